#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "capsct/data/scan.hpp"
#include "capsct/pipeline/pipeline.hpp"

namespace capsct::enhance {

using data::ClassLabel;
using data::SetId;
using data::VolumetricScan;
using pipeline::PatientPrediction;
using pipeline::PatientResult;

struct EnhanceConfig {
  double tau = 0.8;
  int epochs = 100;
};

struct ConfidentEntry {
  std::vector<float> image;
  ClassLabel label = ClassLabel::Normal;
  std::string scan_id;
  int slice_index = 0;
  double probability = 0.0;
};

struct ConfidentSet {
  SetId source_set_id = SetId::Test1;
  std::vector<ConfidentEntry> entries;
  std::size_t patient_count = 0;

  bool empty() const { return entries.empty(); }
  std::array<std::size_t, 3> class_counts() const;
  /// Adds a patient's entries, counting the patient once if any were kept.
  void add_patient(std::vector<ConfidentEntry> patient_entries, bool count_without_entries = false);
};

/// Scan ids whose max P_i >= tau. Normal-filtered scans are left to the
/// Normal rule and never selected here.
std::vector<std::string> select_confident_patients(const std::vector<PatientPrediction>& predictions,
                                                   double tau = 0.8);

/// Slices whose stage-2 argmax is the patient label and whose length for
/// that class is >= tau.
std::vector<ConfidentEntry> select_confident_slices(const PatientResult& result, const VolumetricScan& scan,
                                                    ClassLabel patient_label, double tau = 0.8);

/// For a normal-filtered scan: slices with stage-1 infection probability
/// >= tau, labeled Normal. Throws std::invalid_argument otherwise.
std::vector<ConfidentEntry> normal_slice_rule(const PatientResult& result, const VolumetricScan& scan,
                                              double tau = 0.8);

/// Runs all three gates over one predicted test set.
ConfidentSet extract_confident(SetId set_id, const std::vector<PatientResult>& results,
                               const std::vector<VolumetricScan>& scans, double tau = 0.8);

struct RetrainResult {
  pipeline::Stage2Model model;
  bool empty_confident_set = false;
  pipeline::TrainHistory history;
};

/// Continues training a copy of the benchmark on train + confident slices.
/// An empty confident set returns the benchmark unchanged and flags it.
RetrainResult retrain_enhanced(const pipeline::Stage2Model& benchmark, const pipeline::SliceSet& train,
                               const ConfidentSet& confident, const pipeline::PipelineConfig& cfg, std::uint64_t seed,
                               int epochs);

struct EnhancedEnsemble {
  std::shared_ptr<pipeline::Stage1Model> stage1;
  pipeline::Stage2Model benchmark;
  std::map<SetId, pipeline::Stage2Model> members;

  /// Members used for `target`: every enhanced model except the target's own.
  std::vector<SetId> members_for(SetId target) const;
};

struct EnsemblePrediction {
  PatientPrediction patient;
  std::vector<SetId> members;  // empty when the benchmark answered alone
  std::vector<std::array<double, 3>> member_prob;
};

/// Mean of the member patient probabilities; label by the pipeline tie rule.
std::array<double, 3> mean_probability(const std::vector<std::array<double, 3>>& member_prob);

EnsemblePrediction ensemble_predict(EnhancedEnsemble& ensemble, const VolumetricScan& scan, SetId target,
                                    const pipeline::PipelineConfig& cfg);

struct SetReport {
  SetId set_id = SetId::Test1;
  std::size_t scans = 0;
  std::size_t confident_patients = 0;
  std::array<std::size_t, 3> slice_counts{};
  bool empty = false;
  std::uint64_t seed = 0;
  std::vector<double> epoch_loss;
};

struct RoundReport {
  double tau = 0.8;
  int epochs = 0;
  std::uint64_t seed = 0;
  std::vector<SetReport> sets;
};

nlohmann::json to_json(const RoundReport& report);

struct RoundResult {
  EnhancedEnsemble ensemble;
  RoundReport report;
};

/// Benchmark-predicts each test set, extracts its confident set and
/// registers a model retrained on it. Stage 1 is shared and never trained.
RoundResult enhancement_round(std::shared_ptr<pipeline::Stage1Model> stage1, const pipeline::Stage2Model& benchmark,
                              const pipeline::SliceSet& stage2_train,
                              const std::map<SetId, std::vector<VolumetricScan>>& test_sets,
                              const pipeline::PipelineConfig& cfg, const EnhanceConfig& ecfg, std::uint64_t seed);

}  // namespace capsct::enhance
