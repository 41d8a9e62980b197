#pragma once

#include <cstdint>
#include <vector>

#include "capsct/ad/tensor.hpp"

namespace capsct::ad {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Real>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<Real>> first_moment;
  std::vector<std::vector<Real>> second_moment;

  explicit AdamState(AdamConfig cfg = {}) : config(cfg) {}
};

/// One bias-corrected Adam update over `params` using their accumulated
/// gradients. Moments are allocated on the first step; later calls must
/// pass the same parameter list in the same order.
template <typename Real>
void adam_step(const std::vector<TensorPtr<Real>>& params, AdamState<Real>& state);

template <typename Real>
void zero_grad(const std::vector<TensorPtr<Real>>& params) {
  for (const auto& p : params) p->zero_grad();
}

}  // namespace capsct::ad
