#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "capsct/eval/stats.hpp"
#include "capsct/pipeline/pipeline.hpp"

namespace capsct::eval {

using pipeline::PatientPrediction;

struct Interval {
  double value = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::size_t successes = 0;
  std::size_t trials = 0;
};

Interval with_ci(const Proportion& p, double level = 0.95);

struct SetMetrics {
  std::string name;  // set id or "TOTAL"
  ConfusionTable table;
  Interval accuracy;
  std::array<std::optional<Interval>, 3> sensitivity;  // nullopt = NA
  std::optional<RocCurve> micro_roc;                   // needs two classes
  std::array<std::optional<double>, 3> onevsrest_auc;
};

struct McNemarComparison {
  std::string baseline;
  std::string set;
  std::size_t system_only_correct = 0;
  std::size_t baseline_only_correct = 0;
  double p_value = 1.0;
};

struct EvalReport {
  std::string system;
  std::vector<SetMetrics> sets;
  SetMetrics total;
  std::vector<McNemarComparison> comparisons;
};

SetMetrics set_metrics(const std::string& name, const std::vector<PatientPrediction>& preds);

/// Metrics per set and overall; each baseline is compared per set and in
/// total on the scans both have predicted.
EvalReport build_report(const std::string& system, const std::vector<PatientPrediction>& preds,
                        const std::map<std::string, std::vector<PatientPrediction>>& baselines = {});

nlohmann::json to_json(const EvalReport& report);

}  // namespace capsct::eval
