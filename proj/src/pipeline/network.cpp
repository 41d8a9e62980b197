#include "capsct/pipeline/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "capsct/ad/errors.hpp"

namespace capsct::pipeline {

ArchConfig ArchConfig::stage1(std::size_t input_size) {
  ArchConfig a;
  a.input_size = input_size;
  return a;
}

ArchConfig ArchConfig::stage2(std::size_t input_size) {
  ArchConfig a;
  a.input_size = input_size;
  a.channels = {4, 4, 8, 8};
  a.hidden = {{8, 8}, {4, 12}};
  a.classes = {3, 16};
  return a;
}

namespace {
std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < kernel) return 0;
  return (in + 2 * pad - kernel) / stride + 1;
}
}  // namespace

std::size_t ArchConfig::feature_size() const {
  if (kernel % 2 == 0) throw ConfigError("arch: kernel must be odd, got " + std::to_string(kernel));
  std::size_t s = input_size;
  for (std::size_t i = 0; i < 4; ++i) {
    if (strides[i] == 0 || channels[i] == 0) throw ConfigError("arch: zero stride or channel count");
    s = conv_out(s, kernel, strides[i], kernel / 2);
  }
  if (pool == 0 || s < pool || s % pool != 0) {
    throw ConfigError("arch: input size " + std::to_string(input_size) + " gives a " + std::to_string(s) +
                      "-pixel feature map, not divisible by the " + std::to_string(pool) + "x" +
                      std::to_string(pool) + " pool");
  }
  return s / pool;
}

std::size_t ArchConfig::primary_count() const {
  const std::size_t f = feature_size();
  const std::size_t n = channels[3] * f * f;
  if (primary_dim == 0 || n % primary_dim != 0) {
    throw ConfigError("arch: " + std::to_string(n) + " pooled features do not split into capsules of dim " +
                      std::to_string(primary_dim));
  }
  return n / primary_dim;
}

template <typename Real>
TensorPtr<Real> CapsNet<Real>::add_param(std::string name, ad::Shape shape, double stddev, Rng& rng) {
  std::vector<Real> values(ad::numel(shape));
  for (auto& v : values) v = static_cast<Real>(stddev * rng.normal());
  auto t = ad::make_tensor<Real>(std::move(shape), std::move(values), true);
  t->name = name;
  params_.emplace_back(std::move(name), t);
  return t;
}

template <typename Real>
CapsNet<Real>::CapsNet(const CapsNet& other) : arch_(other.arch_), bn_stats_(other.bn_stats_) {
  for (const auto& [name, t] : other.params_) {
    auto copy = ad::make_tensor<Real>(t->shape, t->data, t->requires_grad);
    copy->name = t->name;
    params_.emplace_back(name, std::move(copy));
  }
  bind();
}

template <typename Real>
CapsNet<Real>& CapsNet<Real>::operator=(const CapsNet& other) {
  if (this != &other) *this = CapsNet(other);
  return *this;
}

template <typename Real>
TensorPtr<Real> CapsNet<Real>::find(const std::string& name) const {
  for (const auto& [n, t] : params_) {
    if (n == name) return t;
  }
  return nullptr;
}

template <typename Real>
TensorPtr<Real> CapsNet<Real>::parameter(const std::string& name) const {
  auto t = find(name);
  if (!t) throw std::out_of_range("CapsNet: no parameter named '" + name + "'");
  return t;
}

template <typename Real>
void CapsNet<Real>::bind() {
  k1_ = find("conv1.weight");
  b1_ = find("conv1.bias");
  k2_ = find("conv2.weight");
  b2_ = find("conv2.bias");
  p1_ = find("skip1.weight");
  k3_ = find("conv3.weight");
  b3_ = find("conv3.bias");
  k4_ = find("conv4.weight");
  b4_ = find("conv4.bias");
  p2_ = find("skip2.weight");
  gamma_ = find("bn.gamma");
  beta_ = find("bn.beta");
  caps_w_.clear();
  for (std::size_t l = 1; auto t = find("caps" + std::to_string(l) + ".weight"); ++l) caps_w_.push_back(t);
}

template <typename Real>
CapsNet<Real>::CapsNet(ArchConfig arch, std::uint64_t seed) : arch_(std::move(arch)) {
  const std::size_t primaries = arch_.primary_count();
  if (arch_.routing_iterations < 1) throw ConfigError("arch: routing iterations must be >= 1");
  if (!(arch_.dropout >= 0.0 && arch_.dropout < 1.0)) throw ConfigError("arch: dropout rate must lie in [0, 1)");
  Rng rng(seed);
  const auto& c = arch_.channels;
  const std::size_t k = arch_.kernel;
  auto he = [&](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  k1_ = add_param("conv1.weight", {c[0], 1, k, k}, he(k * k), rng);
  b1_ = add_param("conv1.bias", {c[0]}, 0.0, rng);
  k2_ = add_param("conv2.weight", {c[1], c[0], k, k}, he(c[0] * k * k), rng);
  b2_ = add_param("conv2.bias", {c[1]}, 0.0, rng);
  if (c[1] != 1 || arch_.strides[0] * arch_.strides[1] != 1) {
    p1_ = add_param("skip1.weight", {c[1], 1, 1, 1}, he(1), rng);
  }
  k3_ = add_param("conv3.weight", {c[2], c[1], k, k}, he(c[1] * k * k), rng);
  b3_ = add_param("conv3.bias", {c[2]}, 0.0, rng);
  k4_ = add_param("conv4.weight", {c[3], c[2], k, k}, he(c[2] * k * k), rng);
  b4_ = add_param("conv4.bias", {c[3]}, 0.0, rng);
  if (c[3] != c[1] || arch_.strides[2] * arch_.strides[3] != 1) {
    p2_ = add_param("skip2.weight", {c[3], c[1], 1, 1}, he(c[1]), rng);
  }
  gamma_ = add_param("bn.gamma", {c[3]}, 0.0, rng);
  std::fill(gamma_->data.begin(), gamma_->data.end(), Real(1));
  beta_ = add_param("bn.beta", {c[3]}, 0.0, rng);
  bn_stats_.mean.assign(c[3], Real(0));
  bn_stats_.var.assign(c[3], Real(1));
  bn_stats_.initialized = true;

  // Scaled so that a layer's summed vote has roughly unit length at init.
  std::vector<CapsuleSpec> layers{{primaries, arch_.primary_dim}};
  layers.insert(layers.end(), arch_.hidden.begin(), arch_.hidden.end());
  layers.push_back(arch_.classes);
  for (std::size_t l = 1; l < layers.size(); ++l) {
    const auto in = layers[l - 1], out = layers[l];
    const double stddev = static_cast<double>(out.count) / std::sqrt(static_cast<double>(in.count * out.dim));
    caps_w_.push_back(add_param("caps" + std::to_string(l) + ".weight", {in.count, out.count, out.dim, in.dim},
                                stddev, rng));
  }
}

template <typename Real>
TensorPtr<Real> CapsNet<Real>::forward(Tape<Real>& tape, const TensorPtr<Real>& x, Mode mode, Rng* dropout_rng) {
  const auto& s = arch_.strides;
  const std::size_t pad = arch_.kernel / 2;
  if (x->rank() != 4 || x->dim(1) != 1 || x->dim(2) != arch_.input_size || x->dim(3) != arch_.input_size) {
    throw DimensionError("CapsNet: expected input [B, 1, " + std::to_string(arch_.input_size) + ", " +
                         std::to_string(arch_.input_size) + "], got " + ad::to_string(x->shape));
  }
  auto h1 = ad::relu(tape, ad::conv2d(tape, x, k1_, b1_, s[0], pad));
  auto h2 = ad::conv2d(tape, h1, k2_, b2_, s[1], pad);
  h2 = ad::relu(tape, ad::residual_add(tape, h2, p1_ ? ad::conv2d(tape, x, p1_, s[0] * s[1], 0) : x));
  auto h3 = ad::relu(tape, ad::conv2d(tape, h2, k3_, b3_, s[2], pad));
  auto h4 = ad::conv2d(tape, h3, k4_, b4_, s[3], pad);
  h4 = ad::relu(tape, ad::residual_add(tape, h4, p2_ ? ad::conv2d(tape, h2, p2_, s[2] * s[3], 0) : h2));

  auto feat = ad::batch_norm(tape, h4, gamma_, beta_, bn_stats_, mode);
  feat = ad::maxpool2d(tape, feat, arch_.pool, arch_.pool);
  feat = ad::dropout(tape, feat, arch_.dropout, mode, dropout_rng);

  const std::size_t batch = x->dim(0);
  auto caps = caps::squash(tape, ad::reshape(tape, feat, {batch, arch_.primary_count(), arch_.primary_dim}));
  const caps::RoutingConfig routing{arch_.routing_iterations};
  for (const auto& w : caps_w_) caps = caps::capsule_layer(tape, caps, w, routing);
  return caps;
}

template <typename Real>
TensorPtr<Real> CapsNet<Real>::lengths(Tape<Real>& tape, const TensorPtr<Real>& x, Mode mode, Rng* dropout_rng) {
  return caps::capsule_lengths(tape, forward(tape, x, mode, dropout_rng));
}

template <typename Real>
std::vector<std::vector<double>> CapsNet<Real>::predict(const float* images, std::size_t count, std::size_t batch) {
  const std::size_t px = arch_.input_size * arch_.input_size;
  std::vector<std::vector<double>> out;
  out.reserve(count);
  for (std::size_t start = 0; start < count; start += batch) {
    const std::size_t n = std::min(batch, count - start);
    auto x = ad::make_tensor<Real>({n, 1, arch_.input_size, arch_.input_size},
                                   std::vector<Real>(images + start * px, images + (start + n) * px));
    auto tape = Tape<Real>::inference();
    const auto len = lengths(tape, x, Mode::Eval, nullptr);
    const std::size_t k = arch_.classes.count;
    for (std::size_t i = 0; i < n; ++i) out.emplace_back(len->data.begin() + i * k, len->data.begin() + (i + 1) * k);
  }
  return out;
}

template <typename Real>
std::vector<TensorPtr<Real>> CapsNet<Real>::parameters() const {
  std::vector<TensorPtr<Real>> out;
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

template <typename Real>
std::size_t CapsNet<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t->size();
  return n;
}

template <typename Real>
std::vector<Real> CapsNet<Real>::state_vector() const {
  std::vector<Real> out;
  for (const auto& [name, t] : params_) out.insert(out.end(), t->data.begin(), t->data.end());
  out.insert(out.end(), bn_stats_.mean.begin(), bn_stats_.mean.end());
  out.insert(out.end(), bn_stats_.var.begin(), bn_stats_.var.end());
  return out;
}

template class CapsNet<float>;
template class CapsNet<double>;

}  // namespace capsct::pipeline
