#include "capsct/data/scan.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "capsct/ad/errors.hpp"

namespace capsct::data {

std::string_view to_string(ClassLabel c) {
  switch (c) {
    case ClassLabel::Covid: return "COVID-19";
    case ClassLabel::Cap: return "CAP";
    case ClassLabel::Normal: return "Normal";
  }
  return "?";
}

std::string_view to_string(SetId s) {
  switch (s) {
    case SetId::Train: return "TRAIN";
    case SetId::Test1: return "TEST1";
    case SetId::Test2: return "TEST2";
    case SetId::Test3: return "TEST3";
    case SetId::Test4: return "TEST4";
  }
  return "?";
}

ClassLabel parse_class(std::string_view text) {
  for (auto c : kAllClasses) {
    if (to_string(c) == text) return c;
  }
  throw FormatError("unknown class label '" + std::string(text) + "'");
}

SetId parse_set(std::string_view text) {
  for (auto s : kAllSets) {
    if (to_string(s) == text) return s;
  }
  throw FormatError("unknown set id '" + std::string(text) + "'");
}

ShiftProfile ShiftProfile::preset(SetId set) {
  ShiftProfile p;
  p.name = std::string(to_string(set));
  p.noise_sigma = 0.02;
  switch (set) {
    case SetId::Train:
    case SetId::Test3:
      break;
    case SetId::Test1:
      p.noise_sigma = 0.15;
      break;
    case SetId::Test2:
      // ~2.5x fewer slices, device streaks and a brightness offset
      p.slice_min = 8;
      p.slice_max = 13;
      p.intensity_shift = 0.1;
      p.artifact_rate = 0.3;
      break;
    case SetId::Test4:
      p.mixture = true;
      break;
  }
  return p;
}

bool VolumetricScan::is_infected(std::size_t k) const {
  return std::binary_search(meta.infected_slices.begin(), meta.infected_slices.end(), static_cast<int>(k));
}

}  // namespace capsct::data
