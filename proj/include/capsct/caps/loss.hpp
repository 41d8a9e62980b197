#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "capsct/ad/tape.hpp"
#include "capsct/ad/tensor.hpp"

namespace capsct::caps {

inline constexpr double kLengthEps = 1e-7;

// Stage-1 class-balancing weights: w1 scales the loss of negative samples,
// w2 that of positive samples, with w1 = N2/(N1+N2) and w2 = N1/(N1+N2)
// for N1 negatives and N2 positives.
struct BinaryLossWeights {
  double w1 = 0.5;
  double w2 = 0.5;

  static BinaryLossWeights from_counts(std::size_t negatives, std::size_t positives);
};

/// Stage-2 per-class weights in (COVID-19, CAP, Normal) order.
using ClassWeights = std::array<double, 3>;
inline constexpr ClassWeights kStage2ClassWeights{1.0, 5.0, 5.0};

/// -[t ln L + (1-t) ln(1-L)] with L clamped to [eps, 1-eps].
double binary_cross_entropy(double length, double target);

/// Loss of one stage-1 sample: the sample's class weight times the summed
/// per-capsule BCE against its one-hot target. lengths = (negative, positive).
double weighted_binary_ce(std::span<const double, 2> lengths, int target, const BinaryLossWeights& w);

/// Sum over classes of class_weight_c * BCE(length_c, target_c).
double multiclass_weighted_bce(std::span<const double, 3> lengths, std::span<const double, 3> one_hot,
                               const ClassWeights& class_weights = kStage2ClassWeights);

/// Batched, differentiable form of both losses:
///   (1/B) * sum_b sample_weight[b] * sum_k class_weight[k] * BCE(L[b,k], [k == target[b]])
/// Gradients vanish where the clamp is active.
template <typename Real>
ad::TensorPtr<Real> weighted_bce_loss(ad::Tape<Real>& tape, const ad::TensorPtr<Real>& lengths,
                                      std::span<const int> targets, std::span<const double> sample_weights,
                                      std::span<const double> class_weights);

}  // namespace capsct::caps
