#include "capsct/data/scan_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "capsct/ad/errors.hpp"

namespace capsct::data {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'S', 'P', 'G', 'C'};
constexpr std::size_t kHeaderSize = 4 + 2 + 3 * 4;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

[[noreturn]] void bad(const fs::path& file, std::size_t offset, const std::string& what) {
  throw FormatError(file.string() + ": " + what + " at byte " + std::to_string(offset));
}

}  // namespace

json to_json(const ShiftProfile& p) {
  return {{"name", p.name},
          {"noise_sigma", p.noise_sigma},
          {"slice_count_range", {p.slice_min, p.slice_max}},
          {"intensity_shift", p.intensity_shift},
          {"artifact_rate", p.artifact_rate},
          {"mixture", p.mixture}};
}

ShiftProfile profile_from_json(const json& j) {
  ShiftProfile p;
  p.name = j.at("name").get<std::string>();
  p.noise_sigma = j.at("noise_sigma").get<double>();
  p.slice_min = j.at("slice_count_range").at(0).get<int>();
  p.slice_max = j.at("slice_count_range").at(1).get<int>();
  p.intensity_shift = j.at("intensity_shift").get<double>();
  p.artifact_rate = j.at("artifact_rate").get<double>();
  p.mixture = j.value("mixture", false);
  return p;
}

json to_json(const ScanMetadata& m) {
  return {{"scan_id", m.scan_id},
          {"true_class", to_string(m.true_class)},
          {"set_id", to_string(m.set_id)},
          {"shift_profile", to_json(m.shift_profile)},
          {"infected_slices", m.infected_slices},
          {"rng_seed", m.rng_seed}};
}

ScanMetadata metadata_from_json(const json& j) {
  try {
    ScanMetadata m;
    m.scan_id = j.at("scan_id").get<std::string>();
    m.true_class = parse_class(j.at("true_class").get<std::string>());
    m.set_id = parse_set(j.at("set_id").get<std::string>());
    m.shift_profile = profile_from_json(j.at("shift_profile"));
    m.infected_slices = j.at("infected_slices").get<std::vector<int>>();
    m.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("scan metadata: ") + e.what());
  }
}

fs::path save_scan(const VolumetricScan& scan, const fs::path& root) {
  if (scan.pixels.size() != scan.n_slices * scan.height * scan.width) {
    throw DimensionError("save_scan: pixel count does not match shape");
  }
  const fs::path dir = root / scan.meta.scan_id;
  fs::create_directories(dir);
  std::string bytes(kMagic, 4);
  bytes.reserve(kHeaderSize + 4 * scan.pixels.size());
  put_u16(bytes, kScanFormatVersion);
  put_u32(bytes, static_cast<std::uint32_t>(scan.n_slices));
  put_u32(bytes, static_cast<std::uint32_t>(scan.height));
  put_u32(bytes, static_cast<std::uint32_t>(scan.width));
  for (float v : scan.pixels) put_u32(bytes, std::bit_cast<std::uint32_t>(v));
  write_file(dir / "volume.raw", bytes);
  write_file(dir / "meta.json", to_json(scan.meta).dump(2) + "\n");
  return dir;
}

VolumetricScan load_scan(const fs::path& dir) {
  const fs::path raw_path = dir / "volume.raw";
  const std::string raw = read_file(raw_path);
  if (raw.size() < 4 || !std::equal(kMagic, kMagic + 4, raw.begin())) bad(raw_path, 0, "missing SPGC magic");
  if (raw.size() < kHeaderSize) bad(raw_path, raw.size(), "header truncated");
  const std::uint16_t version =
      static_cast<std::uint16_t>(static_cast<unsigned char>(raw[4]) | (static_cast<unsigned char>(raw[5]) << 8));
  if (version != kScanFormatVersion) bad(raw_path, 4, "unsupported format version " + std::to_string(version));

  VolumetricScan scan;
  scan.n_slices = get_u32(raw, 6);
  scan.height = get_u32(raw, 10);
  scan.width = get_u32(raw, 14);
  if (scan.n_slices == 0 || scan.height == 0 || scan.width == 0) bad(raw_path, 6, "zero extent in header");
  const std::size_t count = scan.n_slices * scan.height * scan.width;
  const std::size_t expected = kHeaderSize + 4 * count;
  if (raw.size() < expected) {
    bad(raw_path, raw.size(), "payload truncated (header declares " + std::to_string(expected) + " bytes)");
  }
  if (raw.size() > expected) bad(raw_path, expected, "trailing bytes after payload");
  scan.pixels.resize(count);
  for (std::size_t i = 0; i < count; ++i) scan.pixels[i] = std::bit_cast<float>(get_u32(raw, kHeaderSize + 4 * i));

  json meta;
  const fs::path meta_path = dir / "meta.json";
  try {
    meta = json::parse(read_file(meta_path));
  } catch (const json::parse_error& e) {
    bad(meta_path, e.byte, "invalid JSON");
  }
  scan.meta = metadata_from_json(meta);
  return scan;
}

void save_corpus(const std::vector<VolumetricScan>& scans, const fs::path& root) {
  fs::create_directories(root);
  for (const auto& s : scans) save_scan(s, root);
}

std::vector<VolumetricScan> load_corpus(const fs::path& root) {
  if (!fs::is_directory(root)) throw FormatError("corpus directory not found: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "volume.raw")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<VolumetricScan> out;
  out.reserve(dirs.size());
  for (const auto& d : dirs) out.push_back(load_scan(d));
  return out;
}

}  // namespace capsct::data
