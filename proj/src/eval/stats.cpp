#include "capsct/eval/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include <boost/math/special_functions/beta.hpp>

namespace capsct::eval {

std::size_t ConfusionTable::total() const {
  std::size_t n = 0;
  for (const auto& row : counts) n += std::accumulate(row.begin(), row.end(), std::size_t{0});
  return n;
}

std::size_t ConfusionTable::correct() const { return counts[0][0] + counts[1][1] + counts[2][2]; }

std::size_t ConfusionTable::row_total(ClassLabel c) const {
  const auto& row = counts[data::index(c)];
  return std::accumulate(row.begin(), row.end(), std::size_t{0});
}

AccuracySensitivity accuracy_and_sensitivity(const ConfusionTable& table) {
  const std::size_t total = table.total();
  if (total == 0) throw std::invalid_argument("accuracy_and_sensitivity: empty confusion table");
  AccuracySensitivity out;
  out.accuracy = {table.correct(), total};
  for (auto c : data::kAllClasses) {
    const std::size_t row = table.row_total(c);
    if (row > 0) out.sensitivity[data::index(c)] = Proportion{table.counts[data::index(c)][data::index(c)], row};
  }
  return out;
}

namespace {

// Smallest x in [0, 1] with I_x(a, b) >= target, by bisection.
double beta_quantile(double a, double b, double target) {
  double lo = 0.0, hi = 1.0;
  while (hi - lo > 1e-12) {
    const double mid = 0.5 * (lo + hi);
    if (boost::math::ibeta(a, b, mid) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace

std::pair<double, double> exact_binomial_ci(std::size_t k, std::size_t n, double level) {
  if (n == 0 || k > n) {
    throw std::invalid_argument("exact_binomial_ci: need 0 <= k <= n and n > 0 (k=" + std::to_string(k) +
                                ", n=" + std::to_string(n) + ")");
  }
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("exact_binomial_ci: level must lie in (0, 1)");
  const double alpha = 1.0 - level;
  const double kd = static_cast<double>(k), nd = static_cast<double>(n);
  const double lower = k == 0 ? 0.0 : beta_quantile(kd, nd - kd + 1.0, alpha / 2.0);
  const double upper = k == n ? 1.0 : beta_quantile(kd + 1.0, nd - kd, 1.0 - alpha / 2.0);
  return {lower, upper};
}

double mcnemar_exact(std::size_t b, std::size_t c) {
  const std::size_t n = b + c;
  if (n == 0) return 1.0;
  const std::size_t m = std::min(b, c);
  // Lower tail of Binomial(n, 1/2) up to m. 2^-n is exact while it is a
  // normal double; past that, work in log space.
  double tail = 0.0;
  if (n <= 1000) {
    double term = std::ldexp(1.0, -static_cast<int>(n));
    for (std::size_t k = 0; k <= m; ++k) {
      if (k > 0) term = term * static_cast<double>(n - k + 1) / static_cast<double>(k);
      tail += term;
    }
  } else {
    const double log_half_n = static_cast<double>(n) * std::log(0.5);
    double log_choose = 0.0;
    for (std::size_t k = 0; k <= m; ++k) {
      if (k > 0) log_choose += std::log(static_cast<double>(n - k + 1)) - std::log(static_cast<double>(k));
      tail += std::exp(log_choose + log_half_n);
    }
  }
  return std::min(1.0, 2.0 * tail);
}

RocCurve roc_curve(std::span<const double> scores, std::span<const int> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("roc_curve: scores/labels length mismatch");
  const auto n_pos = static_cast<std::size_t>(std::count_if(positive.begin(), positive.end(), [](int p) { return p != 0; }));
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("roc_curve: needs both positive and negative cases");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      if (positive[order[i]]) {
        ++tp;
      } else {
        ++fp;
      }
    }
    const RocPoint p{s, static_cast<double>(fp) / n_neg, static_cast<double>(tp) / n_pos};
    const auto& q = curve.points.back();
    curve.auc += (p.fpr - q.fpr) * (p.tpr + q.tpr) / 2.0;
    curve.points.push_back(p);
  }
  return curve;
}

namespace {

void check_inputs(const std::vector<std::array<double, 3>>& prob, const std::vector<ClassLabel>& labels) {
  if (prob.size() != labels.size()) throw std::invalid_argument("AUC: probability/label length mismatch");
}

}  // namespace

RocCurve roc_micro_auc(const std::vector<std::array<double, 3>>& prob, const std::vector<ClassLabel>& labels) {
  check_inputs(prob, labels);
  std::array<bool, 3> present{};
  for (auto l : labels) present[data::index(l)] = true;
  if (std::count(present.begin(), present.end(), true) < 2) {
    throw std::invalid_argument("roc_micro_auc: needs at least two distinct classes");
  }
  std::vector<double> scores;
  std::vector<int> positive;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      scores.push_back(prob[i][c]);
      positive.push_back(data::index(labels[i]) == c);
    }
  }
  return roc_curve(scores, positive);
}

double onevsrest_auc(const std::vector<std::array<double, 3>>& prob, const std::vector<ClassLabel>& labels,
                     ClassLabel cls) {
  check_inputs(prob, labels);
  std::vector<double> scores;
  std::vector<int> positive;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    scores.push_back(prob[i][data::index(cls)]);
    positive.push_back(labels[i] == cls);
  }
  return roc_curve(scores, positive).auc;
}

}  // namespace capsct::eval
