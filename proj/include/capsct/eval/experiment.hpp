#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <vector>

#include "capsct/enhance/enhance.hpp"
#include "capsct/eval/config.hpp"
#include "capsct/eval/report.hpp"

namespace capsct::eval {

using data::SetId;
using data::VolumetricScan;

struct ExperimentData {
  std::vector<VolumetricScan> train;
  std::vector<VolumetricScan> validation;
  std::map<SetId, std::vector<VolumetricScan>> tests;
};

/// Preprocesses raw scans and splits TRAIN into train/validation.
ExperimentData prepare_data(const ExperimentConfig& cfg, const std::vector<VolumetricScan>& raw);
/// Generates the configured corpus first.
ExperimentData prepare_data(const ExperimentConfig& cfg);

std::vector<VolumetricScan> preprocess_all(const ExperimentConfig& cfg, const std::vector<VolumetricScan>& raw);

struct Benchmark {
  std::shared_ptr<pipeline::Stage1Model> stage1;
  pipeline::Stage2Model stage2;
  pipeline::SliceSet stage2_train;
  pipeline::TrainHistory stage1_history;
  pipeline::TrainHistory stage2_history;
};

// Fixed derivations of the experiment seed, so every component is
// reproducible from the single configured seed.
struct Seeds {
  std::uint64_t stage1_init, stage1_train, stage2_init, stage2_train, enhancement;
  static Seeds from(std::uint64_t seed);
};

pipeline::Stage1Model train_stage1_model(const ExperimentConfig& cfg, const std::vector<VolumetricScan>& train,
                                         pipeline::TrainHistory* history = nullptr);
/// Stage 2 on the stage-1 selections of `train`.
Benchmark train_stage2_model(const ExperimentConfig& cfg, std::shared_ptr<pipeline::Stage1Model> stage1,
                             const std::vector<VolumetricScan>& train);
Benchmark train_benchmark(const ExperimentConfig& cfg, const ExperimentData& data);

std::vector<pipeline::PatientResult> predict_scans(pipeline::Stage1Model& stage1, pipeline::Stage2Model& stage2,
                                                   const std::vector<VolumetricScan>& scans,
                                                   const pipeline::PipelineConfig& cfg);

std::vector<PatientPrediction> ensemble_predict_set(enhance::EnhancedEnsemble& ensemble,
                                                    const std::vector<VolumetricScan>& scans, SetId target,
                                                    const pipeline::PipelineConfig& cfg);

struct ExperimentRun {
  ExperimentData data;
  Benchmark bench;
  std::vector<pipeline::PatientResult> validation_results;
  std::map<SetId, std::vector<pipeline::PatientResult>> bench_results;
  enhance::RoundResult enhancement;
  std::map<SetId, std::vector<PatientPrediction>> ensemble_predictions;
  double benchmark_seconds = 0.0;
  double total_seconds = 0.0;
  // stage-1 state identical before and after the enhancement round
  bool stage1_unchanged = false;
};

ExperimentRun run_experiment(const ExperimentConfig& cfg, bool with_enhancement = true);

std::vector<PatientPrediction> patients(const std::vector<pipeline::PatientResult>& results);

/// config.json, checkpoints/, predictions/ and reports/ under `dir`.
void write_artifacts(const ExperimentRun& run, const ExperimentConfig& cfg, const std::filesystem::path& dir);

}  // namespace capsct::eval
