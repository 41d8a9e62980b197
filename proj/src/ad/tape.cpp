#include "capsct/ad/tape.hpp"

#include <cmath>
#include <sstream>

namespace capsct::ad {

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename Real>
void require_finite(std::span<const Real> values, const char* op, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteError(std::string("non-finite ") + what + " in " + op + " at element " +
                           std::to_string(i));
    }
  }
}

template void require_finite<float>(std::span<const float>, const char*, const char*);
template void require_finite<double>(std::span<const double>, const char*, const char*);

template <typename Real>
void Tape<Real>::record(std::string op, TensorPtr<Real> output, std::vector<TensorPtr<Real>> inputs,
                        std::function<void()> backward) {
  if (!recording_) return;
  entries_.push_back({std::move(op), std::move(output), std::move(inputs), std::move(backward)});
}

template <typename Real>
void Tape<Real>::backward(const TensorPtr<Real>& loss) {
  if (!loss || loss->size() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " +
                         (loss ? to_string(loss->shape) : std::string("<null>")));
  }
  if (!loss->requires_grad) {
    entries_.clear();
    return;
  }
  loss->grad_buffer()[0] += Real(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->has_grad()) continue;
    it->backward();
    for (const auto& in : it->inputs) {
      if (in->has_grad()) {
        require_finite<Real>(in->grad, it->op.c_str(), "gradient");
      }
    }
  }
  entries_.clear();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace capsct::ad
