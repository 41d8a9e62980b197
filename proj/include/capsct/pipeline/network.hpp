#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "capsct/ad/ops.hpp"
#include "capsct/ad/rng.hpp"
#include "capsct/ad/tape.hpp"
#include "capsct/caps/capsule.hpp"

namespace capsct::pipeline {

using ad::Mode;
using ad::Tape;
using ad::TensorPtr;

struct CapsuleSpec {
  std::size_t count = 0;
  std::size_t dim = 0;
  bool operator==(const CapsuleSpec&) const = default;
};

// Conv stack (two residual blocks of two 3x3 convs) -> batch norm ->
// max-pool -> dropout -> primary capsules -> hidden capsule layers -> class
// capsules.
struct ArchConfig {
  std::size_t input_size = 64;
  std::array<std::size_t, 4> channels{8, 8, 16, 16};
  std::array<std::size_t, 4> strides{2, 1, 2, 1};
  std::size_t kernel = 3;
  std::size_t pool = 2;
  double dropout = 0.3;
  std::size_t primary_dim = 8;
  std::vector<CapsuleSpec> hidden{{16, 8}, {8, 12}};
  CapsuleSpec classes{2, 16};
  int routing_iterations = 3;

  static ArchConfig stage1(std::size_t input_size = 64);
  /// Half the channels and capsule counts, three class capsules.
  static ArchConfig stage2(std::size_t input_size = 64);

  /// Spatial extent after the conv stack; throws ConfigError when the
  /// input size does not survive the stride/pool arithmetic.
  std::size_t feature_size() const;
  std::size_t primary_count() const;
  bool operator==(const ArchConfig&) const = default;
};

template <typename Real>
class CapsNet {
 public:
  CapsNet(ArchConfig arch, std::uint64_t seed);
  // Copies are deep: parameters and statistics are never shared.
  CapsNet(const CapsNet& other);
  CapsNet& operator=(const CapsNet& other);
  CapsNet(CapsNet&&) noexcept = default;
  CapsNet& operator=(CapsNet&&) noexcept = default;

  const ArchConfig& arch() const { return arch_; }

  /// x: [B, 1, S, S] -> class capsules [B, K, class_dim].
  TensorPtr<Real> forward(Tape<Real>& tape, const TensorPtr<Real>& x, Mode mode, Rng* dropout_rng);
  /// Capsule lengths [B, K].
  TensorPtr<Real> lengths(Tape<Real>& tape, const TensorPtr<Real>& x, Mode mode, Rng* dropout_rng);

  /// Eval-mode lengths for `count` images stored back to back, [count][K].
  std::vector<std::vector<double>> predict(const float* images, std::size_t count, std::size_t batch = 32);

  const std::vector<std::pair<std::string, TensorPtr<Real>>>& named_parameters() const { return params_; }
  std::vector<TensorPtr<Real>> parameters() const;
  std::size_t parameter_count() const;

  ad::RunningStats<Real>& bn_stats() { return bn_stats_; }
  const ad::RunningStats<Real>& bn_stats() const { return bn_stats_; }

  /// Looks up a parameter by name; throws std::out_of_range if absent.
  TensorPtr<Real> parameter(const std::string& name) const;

  /// Parameter values and BN statistics, flattened in a fixed order.
  std::vector<Real> state_vector() const;

 private:
  TensorPtr<Real> add_param(std::string name, ad::Shape shape, double stddev, Rng& rng);
  TensorPtr<Real> find(const std::string& name) const;
  void bind();

  ArchConfig arch_;
  std::vector<std::pair<std::string, TensorPtr<Real>>> params_;
  TensorPtr<Real> k1_, b1_, k2_, b2_, p1_, k3_, b3_, k4_, b4_, p2_, gamma_, beta_;
  std::vector<TensorPtr<Real>> caps_w_;
  ad::RunningStats<Real> bn_stats_;
};

extern template class CapsNet<float>;
extern template class CapsNet<double>;

}  // namespace capsct::pipeline
