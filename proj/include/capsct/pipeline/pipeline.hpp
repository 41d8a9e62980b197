#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "capsct/caps/loss.hpp"
#include "capsct/data/scan.hpp"
#include "capsct/pipeline/network.hpp"

namespace capsct::pipeline {

using data::ClassLabel;
using data::VolumetricScan;

// Reference defaults; the desk experiment overrides lr and epochs.
struct PipelineConfig {
  double normal_threshold = 0.03;
  double infection_cutoff = 0.5;
  int stage1_epochs = 100;
  int stage2_epochs = 100;
  double lr = 1e-4;
  std::size_t batch_size = 16;
  double dropout_rate = 0.3;
  int routing_iterations = 3;
  std::size_t input_size = 64;
  std::array<std::size_t, 4> stage1_channels{8, 8, 16, 16};
  std::array<std::size_t, 4> stage2_channels{4, 4, 8, 8};
  std::array<std::size_t, 4> conv_strides{2, 1, 2, 1};

  ArchConfig stage1_arch() const;
  ArchConfig stage2_arch() const;
  void validate() const;
};

struct Stage1Model {
  CapsNet<float> net;
};
struct Stage2Model {
  CapsNet<float> net;
};

Stage1Model build_stage1(const PipelineConfig& cfg, std::uint64_t seed);
Stage2Model build_stage2(const PipelineConfig& cfg, std::uint64_t seed);

// Preprocessed slices with integer labels, stored back to back.
struct SliceSet {
  std::size_t image_size = 0;
  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<std::string> scan_ids;
  std::vector<int> slice_indices;

  std::size_t size() const { return labels.size(); }
  const float* image(std::size_t i) const { return pixels.data() + i * image_size * image_size; }
  void add(std::span<const float> image, int label, const std::string& scan_id, int slice_index);
  void append(const SliceSet& other);
  std::array<std::size_t, 3> label_counts() const;
};

/// Every slice of every scan, labeled 1 if it is in the scan's infected set.
SliceSet stage1_slices(const std::vector<VolumetricScan>& scans);

struct TrainHistory {
  std::vector<double> epoch_loss;
  caps::BinaryLossWeights stage1_weights;
};

/// Class-balanced binary loss, weights from this set's negative/positive counts.
TrainHistory train_stage1(Stage1Model& model, const SliceSet& slices, const PipelineConfig& cfg, std::uint64_t seed);

/// Class-weighted BCE with weights (1, 5, 5). `epochs` overrides cfg.stage2_epochs.
TrainHistory train_stage2(Stage2Model& model, const SliceSet& slices, const PipelineConfig& cfg, std::uint64_t seed,
                          std::optional<int> epochs = std::nullopt);

struct Stage1Result {
  std::vector<double> infection_prob;  // positive-capsule length per slice
  std::vector<int> selected;
  double infected_fraction = 0.0;
};

/// Selection from given per-slice probabilities: prob >= cutoff.
Stage1Result select_from_probabilities(std::vector<double> probs, double cutoff);
Stage1Result select_infected_slices(Stage1Model& model, const VolumetricScan& scan, const PipelineConfig& cfg);

/// True when fewer than `threshold` of the slices were flagged (strict).
bool normal_filter(double infected_fraction, double threshold = 0.03);

/// Index of the largest value; ties go to the lower index (COVID-19 > CAP > Normal).
ClassLabel argmax_with_ties(std::span<const double, 3> values);

struct SlicePrediction {
  int slice_index = 0;
  double infection_prob = 0.0;
  std::optional<std::array<double, 3>> class_lengths;
  std::optional<ClassLabel> class_argmax;
};

struct PatientPrediction {
  std::string scan_id;
  data::SetId set_id = data::SetId::Train;
  ClassLabel true_class = ClassLabel::Normal;
  std::array<int, 3> counts{};
  std::array<double, 3> prob{};
  ClassLabel label = ClassLabel::Normal;
  bool normal_filtered = false;
  double infected_fraction = 0.0;
};

/// P_i = n_i / sum(n). Requires a positive total.
std::array<double, 3> patient_probabilities(const std::array<int, 3>& counts);

struct PatientResult {
  PatientPrediction patient;
  std::vector<SlicePrediction> slices;
};

/// Stage 2 on the stage-1 selection, then the filter and the count ratios.
PatientResult classify_with_stage1(const Stage1Result& stage1, Stage2Model& stage2, const VolumetricScan& scan,
                                   const PipelineConfig& cfg);
PatientResult classify_patient(Stage1Model& stage1, Stage2Model& stage2, const VolumetricScan& scan,
                               const PipelineConfig& cfg);

/// Stage-1 selections of the train scans labeled with their patient class.
/// A Normal scan without any selected slice contributes its most
/// infection-like slice so the Normal class is always represented.
SliceSet stage2_training_set(Stage1Model& stage1, const std::vector<VolumetricScan>& scans, const PipelineConfig& cfg);

struct BinaryMetrics {
  double accuracy = 0.0;
  double sensitivity = 0.0;  // NaN when there are no positives
  double specificity = 0.0;  // NaN when there are no negatives
};

BinaryMetrics binary_metrics(std::span<const int> predicted, std::span<const int> truth);
BinaryMetrics evaluate_stage1(Stage1Model& model, const SliceSet& slices, const PipelineConfig& cfg);

nlohmann::json to_json(const PatientResult& r);
PatientResult patient_result_from_json(const nlohmann::json& j);
/// One JSON object per line, keys sorted.
void write_prediction_log(const std::filesystem::path& path, const std::vector<PatientResult>& results);
std::vector<PatientResult> read_prediction_log(const std::filesystem::path& path);

}  // namespace capsct::pipeline
