#include "capsct/ad/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace capsct::ad {

template <typename Real>
void adam_step(const std::vector<TensorPtr<Real>>& params, AdamState<Real>& state) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->has_grad()) {
      const auto& name = params[i]->name;
      throw std::invalid_argument("adam_step: missing gradient for parameter '" +
                                  (name.empty() ? "#" + std::to_string(i) : name) + "'");
    }
  }
  if (state.step == 0) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (const auto& p : params) {
      state.first_moment.emplace_back(p->size(), Real(0));
      state.second_moment.emplace_back(p->size(), Real(0));
    }
  } else if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter list changed between steps");
  }
  ++state.step;
  const auto& cfg = state.config;
  const double t = static_cast<double>(state.step);
  const Real step_size = static_cast<Real>(cfg.lr / (1.0 - std::pow(cfg.beta1, t)));
  const Real v_correction = static_cast<Real>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const Real b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);
  const Real eps = static_cast<Real>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != p.size()) throw DimensionError("adam_step: moment shape mismatch for '" + p.name + "'");
    for (std::size_t k = 0; k < p.size(); ++k) {
      const Real g = p.grad[k];
      m[k] = b1 * m[k] + (Real(1) - b1) * g;
      v[k] = b2 * v[k] + (Real(1) - b2) * g * g;
      p.data[k] -= step_size * m[k] / (std::sqrt(v[k] * v_correction) + eps);
    }
    require_finite<Real>(p.data, "adam_step", "parameter");
  }
}

template void adam_step<float>(const std::vector<TensorPtr<float>>&, AdamState<float>&);
template void adam_step<double>(const std::vector<TensorPtr<double>>&, AdamState<double>&);

}  // namespace capsct::ad
