#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "capsct/pipeline/network.hpp"

namespace capsct::eval {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string stage;  // "stage1", "stage2", "enhanced:TEST1", ...
  std::uint64_t seed = 0;
  int epochs = 0;
  std::string config_hash;
  nlohmann::json extra = nlohmann::json::object();
};

// "CKPT", u16 version, u32 manifest length, JSON manifest, then float32
// little-endian payloads at the manifest's offsets (parameters, then the
// batch-norm running statistics).
std::string checkpoint_bytes(const pipeline::CapsNet<float>& net, const CheckpointMeta& meta);
void save_checkpoint(const pipeline::CapsNet<float>& net, const CheckpointMeta& meta,
                     const std::filesystem::path& path);

struct LoadedCheckpoint {
  pipeline::CapsNet<float> net;
  CheckpointMeta meta;
  std::vector<std::string> warnings;
};

/// A config hash that differs from `expected_config_hash` only warns; the
/// model still loads for inference.
LoadedCheckpoint parse_checkpoint(const std::string& bytes,
                                  const std::optional<std::string>& expected_config_hash = std::nullopt);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<std::string>& expected_config_hash = std::nullopt);

nlohmann::json to_json(const pipeline::ArchConfig& arch);
pipeline::ArchConfig arch_from_json(const nlohmann::json& j);

}  // namespace capsct::eval
