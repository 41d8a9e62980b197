#pragma once

#include <functional>
#include <string>
#include <vector>

#include "capsct/ad/tensor.hpp"

namespace capsct::ad {

// Records differentiable operations in execution order. Because an
// operation can only consume tensors that already exist, the recording
// order is a topological order and a single reverse sweep suffices.
//
// A Tape belongs to one forward invocation; it is never shared between
// threads. A non-recording tape turns every op into plain inference.
template <typename Real>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  static Tape inference() { return Tape(false); }

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  /// True when an op over `inputs` must be recorded.
  template <typename... Ptrs>
  bool tracks(const Ptrs&... inputs) const {
    return recording_ && (... || inputs->requires_grad);
  }

  /// `backward` reads `output->grad` and accumulates into `inputs`.
  void record(std::string op, TensorPtr<Real> output, std::vector<TensorPtr<Real>> inputs,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule once, newest
  /// first. The tape is consumed.
  void backward(const TensorPtr<Real>& loss);

  void reset() { entries_.clear(); }

 private:
  struct Entry {
    std::string op;
    TensorPtr<Real> output;
    std::vector<TensorPtr<Real>> inputs;
    std::function<void()> backward;
  };

  bool recording_;
  std::vector<Entry> entries_;
};

template <typename Real>
void backward(const TensorPtr<Real>& loss, Tape<Real>& tape) {
  tape.backward(loss);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace capsct::ad
