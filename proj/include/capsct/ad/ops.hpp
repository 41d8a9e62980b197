#pragma once

#include <cstddef>
#include <vector>

#include "capsct/ad/rng.hpp"
#include "capsct/ad/tape.hpp"
#include "capsct/ad/tensor.hpp"

namespace capsct::ad {

enum class Mode { Train, Eval };

/// Cross-correlation over NCHW input with an FCkk kernel. `bias` may be null.
template <typename Real>
TensorPtr<Real> conv2d(Tape<Real>& tape, const TensorPtr<Real>& input, const TensorPtr<Real>& kernel,
                       const TensorPtr<Real>& bias, std::size_t stride, std::size_t padding);

template <typename Real>
TensorPtr<Real> conv2d(Tape<Real>& tape, const TensorPtr<Real>& input, const TensorPtr<Real>& kernel,
                       std::size_t stride, std::size_t padding) {
  return conv2d(tape, input, kernel, TensorPtr<Real>{}, stride, padding);
}

/// Non-overlapping when stride == window. Ties route the gradient to the
/// first maximal element in row-major window order.
template <typename Real>
TensorPtr<Real> maxpool2d(Tape<Real>& tape, const TensorPtr<Real>& input, std::size_t window,
                          std::size_t stride);

template <typename Real>
struct RunningStats {
  std::vector<Real> mean;
  std::vector<Real> var;
  bool initialized = false;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// Per-channel normalization of NCHW input. Train mode uses biased batch
/// statistics and folds them into `stats` as
/// running = momentum * running + (1 - momentum) * batch.
template <typename Real>
TensorPtr<Real> batch_norm(Tape<Real>& tape, const TensorPtr<Real>& input, const TensorPtr<Real>& gamma,
                           const TensorPtr<Real>& beta, RunningStats<Real>& stats, Mode mode,
                           Real momentum = Real(kBatchNormMomentum));

/// Inverted dropout. `rng` is only consulted in train mode with rate > 0.
template <typename Real>
TensorPtr<Real> dropout(Tape<Real>& tape, const TensorPtr<Real>& input, double rate, Mode mode, Rng* rng);

template <typename Real>
TensorPtr<Real> residual_add(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b);

template <typename Real>
TensorPtr<Real> mul(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b);

template <typename Real>
TensorPtr<Real> relu(Tape<Real>& tape, const TensorPtr<Real>& input);

template <typename Real>
TensorPtr<Real> reshape(Tape<Real>& tape, const TensorPtr<Real>& input, Shape shape);

template <typename Real>
TensorPtr<Real> sum(Tape<Real>& tape, const TensorPtr<Real>& input);

template <typename Real>
TensorPtr<Real> scale(Tape<Real>& tape, const TensorPtr<Real>& input, Real factor);

}  // namespace capsct::ad
