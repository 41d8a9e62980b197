#include "capsct/ad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace capsct::ad {
namespace {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMatrix<Real>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMatrix<Real>>;

template <typename Real>
TensorPtr<Real> make_output(Shape shape, std::vector<Real> data, bool tracked) {
  return make_tensor<Real>(std::move(shape), std::move(data), tracked);
}

template <typename Real>
void check_output(const TensorPtr<Real>& out, const char* op) {
  require_finite<Real>(out->data, op);
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, stride, padding;
  std::size_t out_h, out_w;
};

// Unrolls one CHW image into a (C*kh*kw) x (out_h*out_w) row-major matrix.
template <typename Real>
void im2col(const Real* image, const ConvGeometry& g, Real* col) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        Real* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          Real* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, Real(0));
            continue;
          }
          const Real* src = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? Real(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename Real>
void col2im_add(const Real* col, const ConvGeometry& g, Real* image) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const Real* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          Real* dst = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const Real* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Real>
TensorPtr<Real> conv2d(Tape<Real>& tape, const TensorPtr<Real>& input, const TensorPtr<Real>& kernel,
                       const TensorPtr<Real>& bias, std::size_t stride, std::size_t padding) {
  if (input->rank() != 4 || kernel->rank() != 4 || input->dim(1) != kernel->dim(1)) {
    throw DimensionError("conv2d: input " + to_string(input->shape) + " incompatible with kernel " +
                         to_string(kernel->shape));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  const std::size_t batch = input->dim(0);
  const std::size_t filters = kernel->dim(0);
  ConvGeometry g{input->dim(1), input->dim(2), input->dim(3), kernel->dim(2), kernel->dim(3), stride, padding, 0, 0};
  if (g.kh > g.height + 2 * padding || g.kw > g.width + 2 * padding) {
    throw DimensionError("conv2d: kernel " + to_string(kernel->shape) + " larger than padded input " +
                         to_string(input->shape));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != filters)) {
    throw DimensionError("conv2d: bias " + to_string(bias->shape) + " does not match " +
                         std::to_string(filters) + " filters");
  }
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;

  const std::size_t patch = g.channels * g.kh * g.kw;
  const std::size_t spatial = g.out_h * g.out_w;
  const std::size_t in_stride = g.channels * g.height * g.width;
  std::vector<Real> out_data(batch * filters * spatial);
  std::vector<Real> col(patch * spatial);
  ConstMatMap<Real> w(kernel->data.data(), filters, patch);
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(input->data.data() + n * in_stride, g, col.data());
    MatMap<Real> out(out_data.data() + n * filters * spatial, filters, spatial);
    out.noalias() = w * ConstMatMap<Real>(col.data(), patch, spatial);
    if (bias) {
      for (std::size_t f = 0; f < filters; ++f) out.row(f).array() += bias->data[f];
    }
  }

  const bool tracked = tape.tracks(input, kernel) || (bias && tape.recording() && bias->requires_grad);
  auto out = make_output<Real>(Shape{batch, filters, g.out_h, g.out_w}, std::move(out_data), tracked);
  check_output(out, "conv2d");
  if (tracked) {
    std::vector<TensorPtr<Real>> inputs{input, kernel};
    if (bias) inputs.push_back(bias);
    tape.record("conv2d", out, inputs, [input, kernel, bias, g, out, batch, filters, patch, spatial, in_stride] {
      std::vector<Real> col(patch * spatial);
      std::vector<Real> dcol(patch * spatial);
      ConstMatMap<Real> w(kernel->data.data(), filters, patch);
      for (std::size_t n = 0; n < batch; ++n) {
        ConstMatMap<Real> dout(out->grad.data() + n * filters * spatial, filters, spatial);
        if (kernel->requires_grad) {
          im2col(input->data.data() + n * in_stride, g, col.data());
          MatMap<Real> dw(kernel->grad_buffer().data(), filters, patch);
          dw.noalias() += dout * ConstMatMap<Real>(col.data(), patch, spatial).transpose();
        }
        if (input->requires_grad) {
          MatMap<Real> dc(dcol.data(), patch, spatial);
          dc.noalias() = w.transpose() * dout;
          col2im_add(dcol.data(), g, input->grad_buffer().data() + n * in_stride);
        }
        if (bias && bias->requires_grad) {
          auto db = bias->grad_buffer();
          for (std::size_t f = 0; f < filters; ++f) db[f] += dout.row(f).sum();
        }
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> maxpool2d(Tape<Real>& tape, const TensorPtr<Real>& input, std::size_t window, std::size_t stride) {
  if (input->rank() != 4) throw DimensionError("maxpool2d: expected NCHW input, got " + to_string(input->shape));
  if (window == 0 || stride == 0) throw DimensionError("maxpool2d: window and stride must be >= 1");
  const std::size_t h = input->dim(2), w = input->dim(3);
  if (window > h || window > w) {
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " larger than input " +
                         to_string(input->shape));
  }
  const std::size_t planes = input->dim(0) * input->dim(1);
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  std::vector<Real> out_data(planes * oh * ow);
  std::vector<std::size_t> argmax(out_data.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = input->data.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * stride) * w + ox * stride;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (oy * stride + i) * w + ox * stride + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out_data[o] = src[best];
        argmax[o] = p * h * w + best;
      }
    }
  }
  const bool tracked = tape.tracks(input);
  auto out = make_output<Real>(Shape{input->dim(0), input->dim(1), oh, ow}, std::move(out_data), tracked);
  if (tracked) {
    tape.record("maxpool2d", out, {input}, [input, out, argmax = std::move(argmax)] {
      auto dx = input->grad_buffer();
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += out->grad[o];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> batch_norm(Tape<Real>& tape, const TensorPtr<Real>& input, const TensorPtr<Real>& gamma,
                           const TensorPtr<Real>& beta, RunningStats<Real>& stats, Mode mode, Real momentum) {
  if (input->rank() != 4) throw DimensionError("batch_norm: expected NCHW input, got " + to_string(input->shape));
  const std::size_t batch = input->dim(0), channels = input->dim(1);
  const std::size_t plane = input->dim(2) * input->dim(3);
  if (gamma->size() != channels || beta->size() != channels) {
    throw DimensionError("batch_norm: gamma/beta " + to_string(gamma->shape) + "/" + to_string(beta->shape) +
                         " do not match " + std::to_string(channels) + " channels");
  }
  const Real eps = Real(kBatchNormEps);
  const Real count = static_cast<Real>(batch * plane);
  std::vector<Real> mean(channels), inv_std(channels);
  if (mode == Mode::Train) {
    if (!stats.initialized) {
      stats.mean.assign(channels, Real(0));
      stats.var.assign(channels, Real(1));
    }
    for (std::size_t c = 0; c < channels; ++c) {
      Real s = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const Real* x = input->data.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += x[i];
      }
      const Real m = s / count;
      Real v = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const Real* x = input->data.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (x[i] - m) * (x[i] - m);
      }
      v /= count;
      mean[c] = m;
      inv_std[c] = Real(1) / std::sqrt(v + eps);
      const Real unbiased = count > 1 ? v * count / (count - 1) : v;
      if (stats.initialized) {
        stats.mean[c] = momentum * stats.mean[c] + (Real(1) - momentum) * m;
        stats.var[c] = momentum * stats.var[c] + (Real(1) - momentum) * unbiased;
      } else {
        stats.mean[c] = m;
        stats.var[c] = unbiased;
      }
    }
    stats.initialized = true;
  } else {
    if (!stats.initialized) throw std::logic_error("batch_norm: uninitialized running statistics");
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = stats.mean[c];
      inv_std[c] = Real(1) / std::sqrt(stats.var[c] + eps);
    }
  }

  std::vector<Real> xhat(input->size());
  std::vector<Real> out_data(input->size());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[base + i] = (input->data[base + i] - mean[c]) * inv_std[c];
        out_data[base + i] = gamma->data[c] * xhat[base + i] + beta->data[c];
      }
    }
  }
  const bool tracked = tape.tracks(input, gamma, beta);
  auto out = make_output<Real>(input->shape, std::move(out_data), tracked);
  check_output(out, "batch_norm");
  if (tracked) {
    tape.record("batch_norm", out, {input, gamma, beta},
                [input, gamma, beta, out, mode, batch, channels, plane, count, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)] {
                  const auto& dy = out->grad;
                  for (std::size_t c = 0; c < channels; ++c) {
                    Real sum_dy = 0, sum_dy_xhat = 0;
                    for (std::size_t n = 0; n < batch; ++n) {
                      const std::size_t base = (n * channels + c) * plane;
                      for (std::size_t i = 0; i < plane; ++i) {
                        sum_dy += dy[base + i];
                        sum_dy_xhat += dy[base + i] * xhat[base + i];
                      }
                    }
                    if (gamma->requires_grad) gamma->grad_buffer()[c] += sum_dy_xhat;
                    if (beta->requires_grad) beta->grad_buffer()[c] += sum_dy;
                    if (!input->requires_grad) continue;
                    auto dx = input->grad_buffer();
                    const Real g = gamma->data[c];
                    for (std::size_t n = 0; n < batch; ++n) {
                      const std::size_t base = (n * channels + c) * plane;
                      for (std::size_t i = 0; i < plane; ++i) {
                        if (mode == Mode::Train) {
                          dx[base + i] += g * inv_std[c] / count *
                                          (count * dy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat);
                        } else {
                          dx[base + i] += g * inv_std[c] * dy[base + i];
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> dropout(Tape<Real>& tape, const TensorPtr<Real>& input, double rate, Mode mode, Rng* rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return input;
  if (rng == nullptr) throw std::invalid_argument("dropout: train mode requires a random stream");
  const Real keep_scale = Real(1.0 / (1.0 - rate));
  std::vector<Real> mask(input->size());
  std::vector<Real> out_data(input->size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng->uniform() < rate ? Real(0) : keep_scale;
    out_data[i] = input->data[i] * mask[i];
  }
  const bool tracked = tape.tracks(input);
  auto out = make_output<Real>(input->shape, std::move(out_data), tracked);
  if (tracked) {
    tape.record("dropout", out, {input}, [input, out, mask = std::move(mask)] {
      auto dx = input->grad_buffer();
      for (std::size_t i = 0; i < mask.size(); ++i) dx[i] += out->grad[i] * mask[i];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> residual_add(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  if (a->shape != b->shape) {
    throw DimensionError("residual_add: shapes " + to_string(a->shape) + " and " + to_string(b->shape) +
                         " differ");
  }
  std::vector<Real> out_data(a->size());
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = a->data[i] + b->data[i];
  const bool tracked = tape.tracks(a, b);
  auto out = make_output<Real>(a->shape, std::move(out_data), tracked);
  check_output(out, "residual_add");
  if (tracked) {
    tape.record("residual_add", out, {a, b}, [a, b, out] {
      for (const auto& t : {a, b}) {
        if (!t->requires_grad) continue;
        auto d = t->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> mul(Tape<Real>& tape, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
  if (a->shape != b->shape) {
    throw DimensionError("mul: shapes " + to_string(a->shape) + " and " + to_string(b->shape) + " differ");
  }
  std::vector<Real> out_data(a->size());
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = a->data[i] * b->data[i];
  const bool tracked = tape.tracks(a, b);
  auto out = make_output<Real>(a->shape, std::move(out_data), tracked);
  check_output(out, "mul");
  if (tracked) {
    tape.record("mul", out, {a, b}, [a, b, out] {
      // a and b may alias; read both values before accumulating.
      if (a->requires_grad) {
        auto d = a->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += out->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        auto d = b->grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += out->grad[i] * a->data[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> relu(Tape<Real>& tape, const TensorPtr<Real>& input) {
  std::vector<Real> out_data(input->size());
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = std::max(input->data[i], Real(0));
  const bool tracked = tape.tracks(input);
  auto out = make_output<Real>(input->shape, std::move(out_data), tracked);
  if (tracked) {
    tape.record("relu", out, {input}, [input, out] {
      auto dx = input->grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        if (input->data[i] > Real(0)) dx[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> reshape(Tape<Real>& tape, const TensorPtr<Real>& input, Shape shape) {
  if (numel(shape) != input->size()) {
    throw DimensionError("reshape: cannot view " + to_string(input->shape) + " as " + to_string(shape));
  }
  const bool tracked = tape.tracks(input);
  auto out = make_output<Real>(std::move(shape), input->data, tracked);
  if (tracked) {
    tape.record("reshape", out, {input}, [input, out] {
      auto dx = input->grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += out->grad[i];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> sum(Tape<Real>& tape, const TensorPtr<Real>& input) {
  Real total = 0;
  for (Real v : input->data) total += v;
  const bool tracked = tape.tracks(input);
  auto out = make_output<Real>(Shape{1}, std::vector<Real>{total}, tracked);
  check_output(out, "sum");
  if (tracked) {
    tape.record("sum", out, {input}, [input, out] {
      auto dx = input->grad_buffer();
      for (auto& d : dx) d += out->grad[0];
    });
  }
  return out;
}

template <typename Real>
TensorPtr<Real> scale(Tape<Real>& tape, const TensorPtr<Real>& input, Real factor) {
  std::vector<Real> out_data(input->size());
  for (std::size_t i = 0; i < out_data.size(); ++i) out_data[i] = input->data[i] * factor;
  const bool tracked = tape.tracks(input);
  auto out = make_output<Real>(input->shape, std::move(out_data), tracked);
  check_output(out, "scale");
  if (tracked) {
    tape.record("scale", out, {input}, [input, out, factor] {
      auto dx = input->grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += out->grad[i] * factor;
    });
  }
  return out;
}

#define CAPSCT_INSTANTIATE_OPS(Real)                                                                          \
  template TensorPtr<Real> conv2d<Real>(Tape<Real>&, const TensorPtr<Real>&, const TensorPtr<Real>&,          \
                                        const TensorPtr<Real>&, std::size_t, std::size_t);                    \
  template TensorPtr<Real> maxpool2d<Real>(Tape<Real>&, const TensorPtr<Real>&, std::size_t, std::size_t);    \
  template TensorPtr<Real> batch_norm<Real>(Tape<Real>&, const TensorPtr<Real>&, const TensorPtr<Real>&,      \
                                            const TensorPtr<Real>&, RunningStats<Real>&, Mode, Real);         \
  template TensorPtr<Real> dropout<Real>(Tape<Real>&, const TensorPtr<Real>&, double, Mode, Rng*);            \
  template TensorPtr<Real> residual_add<Real>(Tape<Real>&, const TensorPtr<Real>&, const TensorPtr<Real>&);   \
  template TensorPtr<Real> mul<Real>(Tape<Real>&, const TensorPtr<Real>&, const TensorPtr<Real>&);            \
  template TensorPtr<Real> relu<Real>(Tape<Real>&, const TensorPtr<Real>&);                                   \
  template TensorPtr<Real> reshape<Real>(Tape<Real>&, const TensorPtr<Real>&, Shape);                         \
  template TensorPtr<Real> sum<Real>(Tape<Real>&, const TensorPtr<Real>&);                                    \
  template TensorPtr<Real> scale<Real>(Tape<Real>&, const TensorPtr<Real>&, Real);

CAPSCT_INSTANTIATE_OPS(float)
CAPSCT_INSTANTIATE_OPS(double)

}  // namespace capsct::ad
