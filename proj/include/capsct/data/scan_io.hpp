#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"

#include "capsct/data/scan.hpp"

namespace capsct::data {

inline constexpr std::uint16_t kScanFormatVersion = 1;

nlohmann::json to_json(const ScanMetadata& meta);
ScanMetadata metadata_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ShiftProfile& profile);
ShiftProfile profile_from_json(const nlohmann::json& j);

/// Writes <root>/<scan_id>/{volume.raw, meta.json}; returns the scan directory.
std::filesystem::path save_scan(const VolumetricScan& scan, const std::filesystem::path& root);
VolumetricScan load_scan(const std::filesystem::path& scan_dir);

void save_corpus(const std::vector<VolumetricScan>& scans, const std::filesystem::path& root);
/// Every scan directory under root, ordered by scan_id.
std::vector<VolumetricScan> load_corpus(const std::filesystem::path& root);

}  // namespace capsct::data
