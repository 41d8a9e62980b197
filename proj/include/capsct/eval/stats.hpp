#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "capsct/data/scan.hpp"

namespace capsct::eval {

using data::ClassLabel;

// rows = true class, columns = predicted, (COVID-19, CAP, Normal) order
struct ConfusionTable {
  std::array<std::array<std::size_t, 3>, 3> counts{};

  void add(ClassLabel truth, ClassLabel predicted) { ++counts[data::index(truth)][data::index(predicted)]; }
  std::size_t total() const;
  std::size_t correct() const;
  std::size_t row_total(ClassLabel c) const;
};

struct Proportion {
  std::size_t successes = 0;
  std::size_t trials = 0;
  double value() const { return static_cast<double>(successes) / static_cast<double>(trials); }
};

struct AccuracySensitivity {
  Proportion accuracy;
  // nullopt marks a class with no true cases ("NA")
  std::array<std::optional<Proportion>, 3> sensitivity;
};

/// Throws std::invalid_argument on an empty table.
AccuracySensitivity accuracy_and_sensitivity(const ConfusionTable& table);

/// Clopper-Pearson interval for k successes in n trials.
std::pair<double, double> exact_binomial_ci(std::size_t k, std::size_t n, double level = 0.95);

/// Two-sided exact McNemar p-value from the discordant counts.
double mcnemar_exact(std::size_t b, std::size_t c);

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0, 0) to (1, 1)
  double auc = 0.0;
};

/// ROC of binary labels by a threshold sweep over distinct scores; equal
/// scores move together. Needs at least one positive and one negative.
RocCurve roc_curve(std::span<const double> scores, std::span<const int> positive);

/// Every (scan, class) pair pooled as one binary problem, score P_class.
RocCurve roc_micro_auc(const std::vector<std::array<double, 3>>& prob, const std::vector<ClassLabel>& labels);

double onevsrest_auc(const std::vector<std::array<double, 3>>& prob, const std::vector<ClassLabel>& labels,
                     ClassLabel cls);

}  // namespace capsct::eval
