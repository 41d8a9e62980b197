#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "capsct/ad/errors.hpp"

namespace capsct::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape);

// Dense row-major array. The gradient buffer stays empty until something
// writes into it, which is also how a missing gradient is detected.
template <typename Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::string name;

  Tensor(Shape s, std::vector<Real> values, bool needs_grad = false)
      : shape(std::move(s)), data(std::move(values)), requires_grad(needs_grad) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
  }

  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  std::size_t rank() const { return shape.size(); }
  bool has_grad() const { return !grad.empty(); }

  /// Allocates the accumulator on first use and returns it.
  std::span<Real> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
    return grad;
  }

  void zero_grad() { grad.clear(); }
};

template <typename Real>
using TensorPtr = std::shared_ptr<Tensor<Real>>;

template <typename Real>
TensorPtr<Real> make_tensor(Shape shape, std::vector<Real> values, bool requires_grad = false) {
  return std::make_shared<Tensor<Real>>(std::move(shape), std::move(values), requires_grad);
}

template <typename Real>
TensorPtr<Real> zeros(Shape shape, bool requires_grad = false) {
  const auto n = numel(shape);
  return make_tensor<Real>(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
}

template <typename Real>
TensorPtr<Real> full(Shape shape, Real value, bool requires_grad = false) {
  const auto n = numel(shape);
  return make_tensor<Real>(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

/// Throws NonFiniteError naming `op` if any element is NaN or Inf.
template <typename Real>
void require_finite(std::span<const Real> values, const char* op, const char* what = "output");

}  // namespace capsct::ad
