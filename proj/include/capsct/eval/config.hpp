#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "capsct/data/synth.hpp"
#include "capsct/enhance/enhance.hpp"
#include "capsct/pipeline/pipeline.hpp"

namespace capsct::eval {

// Defaults are the desk experiment: reference pipeline numbers except the
// learning rate and epoch counts, which are sized for a CPU run.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::size_t image_size = data::kDefaultImageSize;
  double validation_fraction = 0.3;
  data::CorpusSpec corpus = data::CorpusSpec::desk_default();
  pipeline::PipelineConfig pipeline = desk_pipeline();
  enhance::EnhanceConfig enhancement = desk_enhancement();
  std::vector<data::SetId> enhance_sets{data::SetId::Test1, data::SetId::Test2, data::SetId::Test3};

  static pipeline::PipelineConfig desk_pipeline();
  static enhance::EnhanceConfig desk_enhancement();

  /// Every profile actually used, presets filled in.
  std::map<data::SetId, data::ShiftProfile> profiles() const;
  void validate() const;
};

/// Complete document: every field is written, presets included.
nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a (64-bit) of the canonical JSON text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace capsct::eval
