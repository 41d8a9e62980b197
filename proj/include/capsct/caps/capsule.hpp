#pragma once

#include <cstddef>
#include <vector>

#include "capsct/ad/tape.hpp"
#include "capsct/ad/tensor.hpp"

namespace capsct::caps {

using ad::Tape;
using ad::TensorPtr;

struct RoutingConfig {
  int iterations = 3;
};

/// Scales each capsule (the last axis) to length |s|^2 / (1 + |s|^2),
/// keeping its direction. Zero capsules stay zero.
template <typename Real>
TensorPtr<Real> squash(Tape<Real>& tape, const TensorPtr<Real>& s);

/// Prediction vectors W_ij u_i for every (input, output) capsule pair.
///   input   [B, n_in, d_in]  (or [n_in, d_in])
///   weights [n_in, n_out, d_out, d_in]
///   result  [B, n_in, n_out, d_out]  (or [n_in, n_out, d_out])
template <typename Real>
TensorPtr<Real> capsule_predictions(Tape<Real>& tape, const TensorPtr<Real>& input, const TensorPtr<Real>& weights);

template <typename Real>
struct RoutingResult {
  TensorPtr<Real> output;  // [B, n_out, d_out] or [n_out, d_out]
  // Coupling coefficients c_ij of every iteration, each laid out [B, n_in, n_out].
  std::vector<std::vector<Real>> couplings;
  // Agreement logits b_ij that produced the last couplings, [B, n_in, n_out].
  std::vector<Real> logits;
};

/// Dynamic routing over prediction vectors [B, n_in, n_out, d_out]. The
/// couplings are computed outside the tape; gradients reach the
/// predictions only through the last weighted sum and squash.
template <typename Real>
RoutingResult<Real> routing_by_agreement(Tape<Real>& tape, const TensorPtr<Real>& predictions, RoutingConfig cfg);

template <typename Real>
TensorPtr<Real> capsule_layer(Tape<Real>& tape, const TensorPtr<Real>& input, const TensorPtr<Real>& weights,
                              RoutingConfig cfg);

/// Euclidean norm of each capsule: [..., n, d] -> [..., n].
template <typename Real>
TensorPtr<Real> capsule_lengths(Tape<Real>& tape, const TensorPtr<Real>& caps);

/// Unnormalized per-class lengths of a single [n_classes, d] capsule set.
template <typename Real>
std::vector<Real> class_probabilities(const ad::Tensor<Real>& caps);

}  // namespace capsct::caps
