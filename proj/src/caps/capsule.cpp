#include "capsct/caps/capsule.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace capsct::caps {
namespace {

using ad::Shape;
using ad::to_string;

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using StridedMap = Eigen::Map<RowMatrix<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using ConstStridedMap = Eigen::Map<const RowMatrix<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMatrix<Real>>;
template <typename Real>
using MatMap = Eigen::Map<RowMatrix<Real>>;

// |s|^2/(1+|s|^2) * s/|s| == s * |s| / (1 + |s|^2)
template <typename Real>
Real squash_factor(Real norm) {
  return norm / (Real(1) + norm * norm);
}

template <typename Real>
void squash_in_place(Real* v, std::size_t dim) {
  Real sq = 0;
  for (std::size_t k = 0; k < dim; ++k) sq += v[k] * v[k];
  const Real f = squash_factor(std::sqrt(sq));
  for (std::size_t k = 0; k < dim; ++k) v[k] *= f;
}

}  // namespace

template <typename Real>
TensorPtr<Real> squash(Tape<Real>& tape, const TensorPtr<Real>& s) {
  if (s->rank() == 0) throw DimensionError("squash: scalar input");
  const std::size_t dim = s->shape.back();
  const std::size_t caps = dim == 0 ? 0 : s->size() / dim;
  std::vector<Real> out_data(s->data);
  std::vector<Real> norms(caps);
  for (std::size_t c = 0; c < caps; ++c) {
    Real sq = 0;
    for (std::size_t k = 0; k < dim; ++k) sq += s->data[c * dim + k] * s->data[c * dim + k];
    norms[c] = std::sqrt(sq);
    const Real f = squash_factor(norms[c]);
    for (std::size_t k = 0; k < dim; ++k) out_data[c * dim + k] *= f;
  }
  const bool tracked = tape.tracks(s);
  auto out = ad::make_tensor<Real>(s->shape, std::move(out_data), tracked);
  ad::require_finite<Real>(out->data, "squash");
  if (tracked) {
    tape.record("squash", out, {s}, [s, out, dim, caps, norms = std::move(norms)] {
      auto ds = s->grad_buffer();
      for (std::size_t c = 0; c < caps; ++c) {
        const Real n = norms[c];
        const Real* x = s->data.data() + c * dim;
        const Real* g = out->grad.data() + c * dim;
        const Real f = squash_factor(n);
        Real g_dot_x = 0;
        for (std::size_t k = 0; k < dim; ++k) g_dot_x += g[k] * x[k];
        // d(f(|x|) x)/dx = f I + f'(|x|) x x^T / |x|
        const Real denom = Real(1) + n * n;
        const Real radial = n > Real(0) ? (Real(1) - n * n) / (denom * denom) / n : Real(0);
        for (std::size_t k = 0; k < dim; ++k) ds[c * dim + k] += f * g[k] + radial * g_dot_x * x[k];
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> capsule_predictions(Tape<Real>& tape, const TensorPtr<Real>& input, const TensorPtr<Real>& weights) {
  const bool batched = input->rank() == 3;
  if ((input->rank() != 2 && !batched) || weights->rank() != 4) {
    throw DimensionError("capsule_predictions: input " + to_string(input->shape) + " / weights " +
                         to_string(weights->shape) + " have unsupported rank");
  }
  const std::size_t batch = batched ? input->dim(0) : 1;
  const std::size_t n_in = input->dim(batched ? 1 : 0);
  const std::size_t d_in = input->dim(batched ? 2 : 1);
  if (weights->dim(0) != n_in || weights->dim(3) != d_in) {
    throw DimensionError("capsule_predictions: input " + to_string(input->shape) + " does not match weights " +
                         to_string(weights->shape));
  }
  const std::size_t n_out = weights->dim(1), d_out = weights->dim(2);
  const std::size_t rows = n_out * d_out;
  std::vector<Real> out_data(batch * n_in * rows);
  for (std::size_t i = 0; i < n_in; ++i) {
    ConstMatMap<Real> w(weights->data.data() + i * rows * d_in, rows, d_in);
    ConstStridedMap<Real> u(input->data.data() + i * d_in, batch, d_in, Eigen::OuterStride<>(n_in * d_in));
    StridedMap<Real> p(out_data.data() + i * rows, batch, rows, Eigen::OuterStride<>(n_in * rows));
    p.noalias() = u * w.transpose();
  }
  Shape shape = batched ? Shape{batch, n_in, n_out, d_out} : Shape{n_in, n_out, d_out};
  const bool tracked = tape.tracks(input, weights);
  auto out = ad::make_tensor<Real>(std::move(shape), std::move(out_data), tracked);
  ad::require_finite<Real>(out->data, "capsule_predictions");
  if (tracked) {
    tape.record("capsule_predictions", out, {input, weights},
                [input, weights, out, batch, n_in, d_in, rows] {
                  for (std::size_t i = 0; i < n_in; ++i) {
                    ConstStridedMap<Real> dp(out->grad.data() + i * rows, batch, rows,
                                             Eigen::OuterStride<>(n_in * rows));
                    if (weights->requires_grad) {
                      ConstStridedMap<Real> u(input->data.data() + i * d_in, batch, d_in,
                                              Eigen::OuterStride<>(n_in * d_in));
                      MatMap<Real> dw(weights->grad_buffer().data() + i * rows * d_in, rows, d_in);
                      dw.noalias() += dp.transpose() * u;
                    }
                    if (input->requires_grad) {
                      ConstMatMap<Real> w(weights->data.data() + i * rows * d_in, rows, d_in);
                      StridedMap<Real> du(input->grad_buffer().data() + i * d_in, batch, d_in,
                                          Eigen::OuterStride<>(n_in * d_in));
                      du.noalias() += dp * w;
                    }
                  }
                });
  }
  return out;
}

template <typename Real>
RoutingResult<Real> routing_by_agreement(Tape<Real>& tape, const TensorPtr<Real>& predictions, RoutingConfig cfg) {
  if (cfg.iterations < 1) throw std::invalid_argument("routing_by_agreement: iterations must be >= 1");
  const bool batched = predictions->rank() == 4;
  if (!batched && predictions->rank() != 3) {
    throw DimensionError("routing_by_agreement: predictions " + to_string(predictions->shape) +
                         " must be [B, n_in, n_out, d] or [n_in, n_out, d]");
  }
  const std::size_t off = batched ? 1 : 0;
  const std::size_t batch = batched ? predictions->dim(0) : 1;
  const std::size_t n_in = predictions->dim(off), n_out = predictions->dim(off + 1), dim = predictions->dim(off + 2);
  if (n_in == 0) throw DimensionError("routing_by_agreement: no input capsules");
  const Real* u = predictions->data.data();

  std::vector<Real> logits(batch * n_in * n_out, Real(0));
  std::vector<Real> coupling(logits.size());
  std::vector<Real> s(batch * n_out * dim);
  RoutingResult<Real> result;
  for (int it = 0; it < cfg.iterations; ++it) {
    for (std::size_t r = 0; r < batch * n_in; ++r) {
      const Real* b = logits.data() + r * n_out;
      Real* c = coupling.data() + r * n_out;
      const Real peak = *std::max_element(b, b + n_out);
      Real z = 0;
      for (std::size_t j = 0; j < n_out; ++j) z += (c[j] = std::exp(b[j] - peak));
      for (std::size_t j = 0; j < n_out; ++j) c[j] /= z;
    }
    result.couplings.push_back(coupling);
    result.logits = logits;
    std::fill(s.begin(), s.end(), Real(0));
    for (std::size_t bt = 0; bt < batch; ++bt) {
      for (std::size_t i = 0; i < n_in; ++i) {
        for (std::size_t j = 0; j < n_out; ++j) {
          const Real c = coupling[(bt * n_in + i) * n_out + j];
          const Real* p = u + ((bt * n_in + i) * n_out + j) * dim;
          Real* sj = s.data() + (bt * n_out + j) * dim;
          for (std::size_t k = 0; k < dim; ++k) sj[k] += c * p[k];
        }
      }
    }
    if (it + 1 == cfg.iterations) break;
    std::vector<Real> v(s);
    for (std::size_t r = 0; r < batch * n_out; ++r) squash_in_place(v.data() + r * dim, dim);
    for (std::size_t bt = 0; bt < batch; ++bt) {
      for (std::size_t i = 0; i < n_in; ++i) {
        for (std::size_t j = 0; j < n_out; ++j) {
          const Real* p = u + ((bt * n_in + i) * n_out + j) * dim;
          const Real* vj = v.data() + (bt * n_out + j) * dim;
          Real agreement = 0;
          for (std::size_t k = 0; k < dim; ++k) agreement += p[k] * vj[k];
          logits[(bt * n_in + i) * n_out + j] += agreement;
        }
      }
    }
  }

  Shape shape = batched ? Shape{batch, n_out, dim} : Shape{n_out, dim};
  const bool tracked = tape.tracks(predictions);
  auto weighted = ad::make_tensor<Real>(std::move(shape), std::move(s), tracked);
  ad::require_finite<Real>(weighted->data, "routing_by_agreement");
  if (tracked) {
    tape.record("routing_sum", weighted, {predictions},
                [predictions, weighted, coupling, batch, n_in, n_out, dim] {
                  auto du = predictions->grad_buffer();
                  for (std::size_t bt = 0; bt < batch; ++bt) {
                    for (std::size_t i = 0; i < n_in; ++i) {
                      for (std::size_t j = 0; j < n_out; ++j) {
                        const Real c = coupling[(bt * n_in + i) * n_out + j];
                        const Real* g = weighted->grad.data() + (bt * n_out + j) * dim;
                        Real* d = du.data() + ((bt * n_in + i) * n_out + j) * dim;
                        for (std::size_t k = 0; k < dim; ++k) d[k] += c * g[k];
                      }
                    }
                  }
                });
  }
  result.output = squash(tape, weighted);
  return result;
}

template <typename Real>
TensorPtr<Real> capsule_layer(Tape<Real>& tape, const TensorPtr<Real>& input, const TensorPtr<Real>& weights,
                              RoutingConfig cfg) {
  return routing_by_agreement(tape, capsule_predictions(tape, input, weights), cfg).output;
}

template <typename Real>
TensorPtr<Real> capsule_lengths(Tape<Real>& tape, const TensorPtr<Real>& caps) {
  if (caps->rank() < 2) throw DimensionError("capsule_lengths: expected [..., n, d], got " + to_string(caps->shape));
  const std::size_t dim = caps->shape.back();
  const std::size_t count = caps->size() / std::max<std::size_t>(dim, 1);
  std::vector<Real> lengths(count);
  for (std::size_t c = 0; c < count; ++c) {
    Real sq = 0;
    for (std::size_t k = 0; k < dim; ++k) sq += caps->data[c * dim + k] * caps->data[c * dim + k];
    lengths[c] = std::sqrt(sq);
  }
  Shape shape(caps->shape.begin(), caps->shape.end() - 1);
  const bool tracked = tape.tracks(caps);
  auto out = ad::make_tensor<Real>(std::move(shape), std::move(lengths), tracked);
  if (tracked) {
    tape.record("capsule_lengths", out, {caps}, [caps, out, dim, count] {
      auto d = caps->grad_buffer();
      for (std::size_t c = 0; c < count; ++c) {
        const Real n = out->data[c];
        if (n <= Real(0)) continue;
        for (std::size_t k = 0; k < dim; ++k) d[c * dim + k] += out->grad[c] * caps->data[c * dim + k] / n;
      }
    });
  }
  return out;
}

template <typename Real>
std::vector<Real> class_probabilities(const ad::Tensor<Real>& caps) {
  if (caps.rank() != 2) throw DimensionError("class_probabilities: expected [n, d], got " + to_string(caps.shape));
  std::vector<Real> probs(caps.dim(0));
  for (std::size_t c = 0; c < probs.size(); ++c) {
    Real sq = 0;
    for (std::size_t k = 0; k < caps.dim(1); ++k) sq += caps.data[c * caps.dim(1) + k] * caps.data[c * caps.dim(1) + k];
    probs[c] = std::sqrt(sq);
  }
  return probs;
}

#define CAPSCT_INSTANTIATE_CAPS(Real)                                                                              \
  template TensorPtr<Real> squash<Real>(Tape<Real>&, const TensorPtr<Real>&);                                      \
  template TensorPtr<Real> capsule_predictions<Real>(Tape<Real>&, const TensorPtr<Real>&, const TensorPtr<Real>&); \
  template RoutingResult<Real> routing_by_agreement<Real>(Tape<Real>&, const TensorPtr<Real>&, RoutingConfig);     \
  template TensorPtr<Real> capsule_layer<Real>(Tape<Real>&, const TensorPtr<Real>&, const TensorPtr<Real>&,        \
                                               RoutingConfig);                                                    \
  template TensorPtr<Real> capsule_lengths<Real>(Tape<Real>&, const TensorPtr<Real>&);                             \
  template std::vector<Real> class_probabilities<Real>(const ad::Tensor<Real>&);

CAPSCT_INSTANTIATE_CAPS(float)
CAPSCT_INSTANTIATE_CAPS(double)

}  // namespace capsct::caps
