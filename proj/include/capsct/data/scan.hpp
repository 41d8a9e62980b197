#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace capsct::data {

enum class ClassLabel : int { Covid = 0, Cap = 1, Normal = 2 };
inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<ClassLabel, 3> kAllClasses{ClassLabel::Covid, ClassLabel::Cap, ClassLabel::Normal};

enum class SetId : int { Train = 0, Test1, Test2, Test3, Test4 };
inline constexpr std::array<SetId, 5> kAllSets{SetId::Train, SetId::Test1, SetId::Test2, SetId::Test3, SetId::Test4};

std::string_view to_string(ClassLabel c);
std::string_view to_string(SetId s);
ClassLabel parse_class(std::string_view text);
SetId parse_set(std::string_view text);
inline int index(ClassLabel c) { return static_cast<int>(c); }

struct ShiftProfile {
  std::string name;
  double noise_sigma = 0.0;
  int slice_min = 20;
  int slice_max = 32;
  double intensity_shift = 0.0;
  double artifact_rate = 0.0;
  // Per-scan coin flip between the TEST1 and TEST2 presets.
  bool mixture = false;

  static ShiftProfile preset(SetId set);
  bool operator==(const ShiftProfile&) const = default;
};

struct ScanMetadata {
  std::string scan_id;
  ClassLabel true_class = ClassLabel::Normal;
  SetId set_id = SetId::Train;
  ShiftProfile shift_profile;  // resolved: never a mixture
  std::vector<int> infected_slices;  // sorted
  std::uint64_t rng_seed = 0;

  bool operator==(const ScanMetadata&) const = default;
};

struct VolumetricScan {
  std::size_t n_slices = 0, height = 0, width = 0;
  std::vector<float> pixels;  // [n_slices, height, width]
  ScanMetadata meta;

  std::size_t slice_size() const { return height * width; }
  std::span<const float> slice(std::size_t k) const { return {pixels.data() + k * slice_size(), slice_size()}; }
  std::span<float> slice(std::size_t k) { return {pixels.data() + k * slice_size(), slice_size()}; }
  bool is_infected(std::size_t k) const;

  bool operator==(const VolumetricScan&) const = default;
};

}  // namespace capsct::data
