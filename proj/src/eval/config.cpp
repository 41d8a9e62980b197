#include "capsct/eval/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "capsct/ad/errors.hpp"
#include "capsct/data/scan_io.hpp"

namespace capsct::eval {

using nlohmann::json;

pipeline::PipelineConfig ExperimentConfig::desk_pipeline() {
  pipeline::PipelineConfig p;
  p.lr = 1e-3;
  p.stage1_epochs = 40;
  p.stage2_epochs = 30;
  return p;
}

enhance::EnhanceConfig ExperimentConfig::desk_enhancement() {
  enhance::EnhanceConfig e;
  e.epochs = 10;
  return e;
}

std::map<data::SetId, data::ShiftProfile> ExperimentConfig::profiles() const {
  std::map<data::SetId, data::ShiftProfile> out;
  for (auto set : data::kAllSets) out[set] = data::ShiftProfile::preset(set);
  for (const auto& [set, p] : corpus.profiles) out[set] = p;
  return out;
}

void ExperimentConfig::validate() const {
  pipeline.validate();
  if (image_size < 16) throw ConfigError("image_size must be >= 16");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) throw ConfigError("validation_fraction must lie in (0, 1)");
  if (!(enhancement.tau > 0.0 && enhancement.tau <= 1.0)) throw ConfigError("enhancement.tau must lie in (0, 1]");
  if (enhancement.epochs < 0) throw ConfigError("enhancement.epochs must be >= 0");
  for (auto set : enhance_sets) {
    if (set == data::SetId::Train) throw ConfigError("enhancement.test_sets may not contain TRAIN");
  }
  // builds the architectures, which checks the size arithmetic
  (void)pipeline.stage1_arch().primary_count();
  (void)pipeline.stage2_arch().primary_count();
}

namespace {

void expect_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
      throw ConfigError("unknown config key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json pipeline_json(const pipeline::PipelineConfig& p) {
  return {{"normal_threshold", p.normal_threshold}, {"infection_cutoff", p.infection_cutoff},
          {"stage1_epochs", p.stage1_epochs},       {"stage2_epochs", p.stage2_epochs},
          {"lr", p.lr},                             {"batch_size", p.batch_size},
          {"dropout_rate", p.dropout_rate},         {"routing_iterations", p.routing_iterations},
          {"input_size", p.input_size},             {"stage1_channels", p.stage1_channels},
          {"stage2_channels", p.stage2_channels},   {"conv_strides", p.conv_strides}};
}

}  // namespace

json to_json(const ExperimentConfig& cfg) {
  json corpus = json::object();
  for (const auto& [set, counts] : cfg.corpus.counts) corpus[std::string(data::to_string(set))] = counts;
  json profiles = json::object();
  for (const auto& [set, p] : cfg.profiles()) profiles[std::string(data::to_string(set))] = data::to_json(p);
  json sets = json::array();
  for (auto s : cfg.enhance_sets) sets.push_back(data::to_string(s));
  return {{"seed", cfg.seed},
          {"image_size", cfg.image_size},
          {"validation_fraction", cfg.validation_fraction},
          {"corpus", corpus},
          {"profiles", profiles},
          {"pipeline", pipeline_json(cfg.pipeline)},
          {"enhancement", {{"tau", cfg.enhancement.tau}, {"epochs", cfg.enhancement.epochs}, {"test_sets", sets}}}};
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  try {
    expect_keys(j, "config", {"seed", "image_size", "validation_fraction", "corpus", "profiles", "pipeline", "enhancement"});
    read(j, "seed", cfg.seed);
    read(j, "image_size", cfg.image_size);
    read(j, "validation_fraction", cfg.validation_fraction);
    if (j.contains("corpus")) {
      const auto& c = j.at("corpus");
      expect_keys(c, "corpus", {"TRAIN", "TEST1", "TEST2", "TEST3", "TEST4"});
      cfg.corpus.counts.clear();
      for (const auto& [key, value] : c.items()) {
        cfg.corpus.counts[data::parse_set(key)] = value.get<std::array<std::size_t, 3>>();
      }
    }
    if (j.contains("profiles")) {
      const auto& ps = j.at("profiles");
      expect_keys(ps, "profiles", {"TRAIN", "TEST1", "TEST2", "TEST3", "TEST4"});
      for (const auto& [key, value] : ps.items()) {
        const auto set = data::parse_set(key);
        expect_keys(value, "profiles." + key,
                    {"name", "noise_sigma", "slice_count_range", "intensity_shift", "artifact_rate", "mixture"});
        auto merged = data::to_json(data::ShiftProfile::preset(set));
        merged.update(value);
        const auto profile = data::profile_from_json(merged);
        if (!(profile == data::ShiftProfile::preset(set))) cfg.corpus.profiles[set] = profile;
      }
    }
    if (j.contains("pipeline")) {
      const auto& p = j.at("pipeline");
      expect_keys(p, "pipeline",
                  {"normal_threshold", "infection_cutoff", "stage1_epochs", "stage2_epochs", "lr", "batch_size",
                   "dropout_rate", "routing_iterations", "input_size", "stage1_channels", "stage2_channels",
                   "conv_strides"});
      auto& q = cfg.pipeline;
      read(p, "normal_threshold", q.normal_threshold);
      read(p, "infection_cutoff", q.infection_cutoff);
      read(p, "stage1_epochs", q.stage1_epochs);
      read(p, "stage2_epochs", q.stage2_epochs);
      read(p, "lr", q.lr);
      read(p, "batch_size", q.batch_size);
      read(p, "dropout_rate", q.dropout_rate);
      read(p, "routing_iterations", q.routing_iterations);
      read(p, "input_size", q.input_size);
      read(p, "stage1_channels", q.stage1_channels);
      read(p, "stage2_channels", q.stage2_channels);
      read(p, "conv_strides", q.conv_strides);
    }
    if (j.contains("enhancement")) {
      const auto& e = j.at("enhancement");
      expect_keys(e, "enhancement", {"tau", "epochs", "test_sets"});
      read(e, "tau", cfg.enhancement.tau);
      read(e, "epochs", cfg.enhancement.epochs);
      if (e.contains("test_sets")) {
        cfg.enhance_sets.clear();
        for (const auto& s : e.at("test_sets")) cfg.enhance_sets.push_back(data::parse_set(s.get<std::string>()));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string config_hash(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(cfg).dump())));
  return buf;
}

}  // namespace capsct::eval
