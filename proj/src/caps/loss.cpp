#include "capsct/caps/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace capsct::caps {

BinaryLossWeights BinaryLossWeights::from_counts(std::size_t negatives, std::size_t positives) {
  const std::size_t total = negatives + positives;
  if (total == 0) throw std::invalid_argument("loss weights need at least one sample");
  return {static_cast<double>(positives) / static_cast<double>(total),
          static_cast<double>(negatives) / static_cast<double>(total)};
}

double binary_cross_entropy(double length, double target) {
  const double l = std::clamp(length, kLengthEps, 1.0 - kLengthEps);
  return -(target * std::log(l) + (1.0 - target) * std::log(1.0 - l));
}

double weighted_binary_ce(std::span<const double, 2> lengths, int target, const BinaryLossWeights& w) {
  if (target != 0 && target != 1) throw std::invalid_argument("weighted_binary_ce: target must be 0 or 1");
  const double per_sample = binary_cross_entropy(lengths[0], target == 0 ? 1.0 : 0.0) +
                            binary_cross_entropy(lengths[1], target == 1 ? 1.0 : 0.0);
  return (target == 0 ? w.w1 : w.w2) * per_sample;
}

double multiclass_weighted_bce(std::span<const double, 3> lengths, std::span<const double, 3> one_hot,
                               const ClassWeights& class_weights) {
  double loss = 0.0;
  for (std::size_t c = 0; c < 3; ++c) loss += class_weights[c] * binary_cross_entropy(lengths[c], one_hot[c]);
  return loss;
}

template <typename Real>
ad::TensorPtr<Real> weighted_bce_loss(ad::Tape<Real>& tape, const ad::TensorPtr<Real>& lengths,
                                      std::span<const int> targets, std::span<const double> sample_weights,
                                      std::span<const double> class_weights) {
  if (lengths->rank() != 2) {
    throw DimensionError("weighted_bce_loss: lengths must be [B, K], got " + ad::to_string(lengths->shape));
  }
  const std::size_t batch = lengths->dim(0), classes = lengths->dim(1);
  if (targets.size() != batch || sample_weights.size() != batch || class_weights.size() != classes) {
    throw DimensionError("weighted_bce_loss: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(sample_weights.size()) + " sample weights / " +
                         std::to_string(class_weights.size()) + " class weights for lengths " +
                         ad::to_string(lengths->shape));
  }
  const double eps = kLengthEps;
  double total = 0.0;
  std::vector<Real> dlength(lengths->size(), Real(0));
  for (std::size_t b = 0; b < batch; ++b) {
    if (targets[b] < 0 || static_cast<std::size_t>(targets[b]) >= classes) {
      throw std::invalid_argument("weighted_bce_loss: target " + std::to_string(targets[b]) + " out of range");
    }
    for (std::size_t k = 0; k < classes; ++k) {
      const double raw = static_cast<double>(lengths->data[b * classes + k]);
      const double t = static_cast<std::size_t>(targets[b]) == k ? 1.0 : 0.0;
      const double w = sample_weights[b] * class_weights[k] / static_cast<double>(batch);
      total += w * binary_cross_entropy(raw, t);
      if (raw > eps && raw < 1.0 - eps) {
        dlength[b * classes + k] = static_cast<Real>(w * (-t / raw + (1.0 - t) / (1.0 - raw)));
      }
    }
  }
  const bool tracked = tape.tracks(lengths);
  auto out = ad::make_tensor<Real>(ad::Shape{1}, std::vector<Real>{static_cast<Real>(total)}, tracked);
  ad::require_finite<Real>(out->data, "weighted_bce_loss");
  if (tracked) {
    tape.record("weighted_bce_loss", out, {lengths}, [lengths, out, dlength = std::move(dlength)] {
      auto d = lengths->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += out->grad[0] * dlength[i];
    });
  }
  return out;
}

template ad::TensorPtr<float> weighted_bce_loss<float>(ad::Tape<float>&, const ad::TensorPtr<float>&,
                                                       std::span<const int>, std::span<const double>,
                                                       std::span<const double>);
template ad::TensorPtr<double> weighted_bce_loss<double>(ad::Tape<double>&, const ad::TensorPtr<double>&,
                                                         std::span<const int>, std::span<const double>,
                                                         std::span<const double>);

}  // namespace capsct::caps
