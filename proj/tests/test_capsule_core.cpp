#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <numbers>

#include "capsct/caps/capsule.hpp"
#include "capsct/caps/loss.hpp"
#include "gradcheck.hpp"

using namespace capsct;
using namespace capsct::ad;
using namespace capsct::caps;
using capsct::testing::check_gradients;
using capsct::testing::project;
using capsct::testing::random_tensor;

namespace {

double norm_of(const std::vector<double>& v, std::size_t offset, std::size_t dim) {
  double sq = 0;
  for (std::size_t k = 0; k < dim; ++k) sq += v[offset + k] * v[offset + k];
  return std::sqrt(sq);
}

}  // namespace

// ---------------------------------------------------------------- squash

TEST(Squash, ZeroStaysZero) {
  auto tape = Tape<double>::inference();
  auto v = squash(tape, zeros<double>({1, 4}));
  EXPECT_EQ(v->data, std::vector<double>(4, 0.0));
}

TEST(Squash, UnitNormHalves) {
  auto tape = Tape<double>::inference();
  auto v = squash(tape, make_tensor<double>({1, 2}, {0.6, 0.8}));
  EXPECT_NEAR(v->data[0], 0.3, 1e-15);
  EXPECT_NEAR(v->data[1], 0.4, 1e-15);
}

TEST(Squash, LongVectorApproachesOne) {
  auto tape = Tape<double>::inference();
  auto v = squash(tape, make_tensor<double>({1, 2}, {0.0, 10.0}));
  EXPECT_NEAR(norm_of(v->data, 0, 2), 100.0 / 101.0, 1e-15);
}

TEST(Squash, NormBoundMonotoneAndDirection) {
  Rng rng(21);
  double previous_in = 0.0, previous_out = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const double target = 0.01 * (trial + 1) * (trial % 7 + 1);
    auto s = random_tensor({1, 5}, rng, false);
    const double n = norm_of(s->data, 0, 5);
    for (auto& x : s->data) x *= target / n;
    auto tape = Tape<double>::inference();
    auto v = squash(tape, s);
    const double out = norm_of(v->data, 0, 5);
    EXPECT_GE(out, 0.0);
    EXPECT_LT(out, 1.0);
    double cosine = 0;
    for (std::size_t k = 0; k < 5; ++k) cosine += s->data[k] * v->data[k];
    EXPECT_NEAR(cosine / (target * out), 1.0, 1e-12);
    if (target > previous_in) {
      EXPECT_GT(out, previous_out);
    }
    previous_in = std::max(previous_in, target);
    previous_out = std::max(previous_out, out);
  }
}

TEST(Squash, GradientMatchesFiniteDifferences) {
  Rng rng(22);
  auto s = random_tensor({3, 4, 6}, rng, true, 2.0);
  auto result = check_gradients({s}, [&](Tape<double>& t) { return project(t, squash(t, s)); });
  EXPECT_LT(result.max_rel_error, 1e-5);
}

// --------------------------------------------------------------- routing

TEST(Routing, SingleIterationCouplingsAreUniform) {
  Rng rng(1);
  auto u = random_tensor({5, 4, 3}, rng, false);
  auto tape = Tape<double>::inference();
  auto r = routing_by_agreement(tape, u, RoutingConfig{1});
  ASSERT_EQ(r.couplings.size(), 1u);
  for (double c : r.couplings[0]) EXPECT_DOUBLE_EQ(c, 0.25);
}

TEST(Routing, SingleInputCapsuleIsSquashedPrediction) {
  Rng rng(2);
  auto u = random_tensor({1, 1, 4}, rng, false);
  auto tape = Tape<double>::inference();
  auto expected = squash(tape, reshape(tape, u, {1, 4}));
  for (int iterations : {1, 2, 3, 5}) {
    auto v = routing_by_agreement(tape, u, RoutingConfig{iterations}).output;
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(v->data[k], expected->data[k], 1e-15);
  }
}

TEST(Routing, SingleInputWithSeveralOutputsScalesByCoupling) {
  // With one input the softmax over outputs still splits its vote, so each
  // output is squash(c_1j * u_1j) rather than squash(u_1j).
  Rng rng(3);
  auto u = random_tensor({1, 3, 4}, rng, false);
  auto tape = Tape<double>::inference();
  for (int iterations : {1, 2, 3}) {
    auto r = routing_by_agreement(tape, u, RoutingConfig{iterations});
    const auto& c = r.couplings.back();
    for (std::size_t j = 0; j < 3; ++j) {
      std::vector<double> scaled(4);
      for (std::size_t k = 0; k < 4; ++k) scaled[k] = c[j] * u->data[j * 4 + k];
      auto expected = squash(tape, make_tensor<double>({1, 4}, scaled));
      for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(r.output->data[j * 4 + k], expected->data[k], 1e-14);
    }
  }
}

TEST(Routing, AgreementAttractsCoupling) {
  // Both inputs predict the same vector for output 0 and opposite vectors for output 1.
  auto u = make_tensor<double>({2, 2, 3}, {1.0, 0.5, 0.2, 0.8, -0.4, 0.1,  //
                                           1.0, 0.5, 0.2, -0.8, 0.4, -0.1});
  auto tape = Tape<double>::inference();
  auto r = routing_by_agreement(tape, u, RoutingConfig{3});
  const auto& c = r.couplings.back();
  EXPECT_GT(c[0], c[1]);  // input 0
  EXPECT_GT(c[2], c[3]);  // input 1
}

TEST(Routing, CouplingsFormDistributions) {
  Rng rng(31);
  for (int instance = 0; instance < 200; ++instance) {
    const std::size_t n_in = 1 + rng.below(6), n_out = 1 + rng.below(5), dim = 1 + rng.below(6);
    auto u = random_tensor({2, n_in, n_out, dim}, rng, false, 3.0);
    auto tape = Tape<double>::inference();
    auto r = routing_by_agreement(tape, u, RoutingConfig{static_cast<int>(1 + rng.below(4))});
    for (const auto& c : r.couplings) {
      for (std::size_t row = 0; row < 2 * n_in; ++row) {
        double total = 0;
        for (std::size_t j = 0; j < n_out; ++j) {
          EXPECT_GT(c[row * n_out + j], 0.0);
          total += c[row * n_out + j];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
    for (std::size_t j = 0; j < 2 * n_out; ++j) EXPECT_LT(norm_of(r.output->data, j * dim, dim), 1.0);
  }
}

TEST(Routing, PositiveScalingPreservesAgreementRanking) {
  // After one agreement update b_ij = k |v_j(k)| <u_ij, s_j/|s_j|>, so for
  // each output the ranking of inputs by agreement (and its sign) does not
  // depend on the scale k of the predictions.
  Rng rng(41);
  for (int instance = 0; instance < 1000; ++instance) {
    const std::size_t n_in = 1 + rng.below(6), n_out = 2 + rng.below(3), dim = 1 + rng.below(6);
    auto u = random_tensor({n_in, n_out, dim}, rng, false);
    auto scaled = make_tensor<double>(u->shape, u->data);
    const double k = rng.uniform(0.2, 5.0);
    for (auto& x : scaled->data) x *= k;
    auto tape = Tape<double>::inference();
    const auto a = routing_by_agreement(tape, u, RoutingConfig{2}).logits;
    const auto b = routing_by_agreement(tape, scaled, RoutingConfig{2}).logits;
    for (std::size_t j = 0; j < n_out; ++j) {
      for (std::size_t i = 0; i < n_in; ++i) {
        EXPECT_EQ(a[i * n_out + j] > 0, b[i * n_out + j] > 0);
        for (std::size_t i2 = 0; i2 < n_in; ++i2) {
          EXPECT_EQ(a[i * n_out + j] < a[i2 * n_out + j], b[i * n_out + j] < b[i2 * n_out + j]);
        }
      }
    }
  }
}

TEST(Routing, PositiveScalingCanReorderCouplings) {
  // Counterexample kept as documentation: the per-input ordering of the
  // couplings themselves is not scale invariant, because each output's
  // squash saturates at a different rate.
  auto u = make_tensor<double>({2, 2, 1}, {1.0, 0.2, 1.0, 0.1});
  auto scaled = make_tensor<double>({2, 2, 1}, {8.0, 1.6, 8.0, 0.8});
  auto tape = Tape<double>::inference();
  const auto a = routing_by_agreement(tape, u, RoutingConfig{2}).couplings.back();
  const auto b = routing_by_agreement(tape, scaled, RoutingConfig{2}).couplings.back();
  EXPECT_GT(a[0], a[1]);
  EXPECT_GT(b[0], b[1]);
  const double ratio_a = a[0] / a[1], ratio_b = b[0] / b[1];
  EXPECT_NE(ratio_a, ratio_b);
}

TEST(Routing, GradientTreatsCouplingsAsConstants) {
  // With iterations = 1 the couplings are fixed at 1/n_out, so the
  // stop-gradient rule coincides with the true derivative.
  Rng rng(5);
  auto u = random_tensor({2, 4, 3, 5}, rng);
  auto result = check_gradients({u}, [&](Tape<double>& t) {
    return project(t, routing_by_agreement(t, u, RoutingConfig{1}).output);
  });
  EXPECT_LT(result.max_rel_error, 1e-5);
}

// --------------------------------------------------------- capsule_layer

TEST(CapsuleLayer, IdentityWeightsSquashInput) {
  auto u = make_tensor<double>({1, 3}, {0.3, -1.2, 0.5});
  auto w = make_tensor<double>({1, 1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto tape = Tape<double>::inference();
  auto v = capsule_layer(tape, u, w, RoutingConfig{3});
  auto expected = squash(tape, u);
  ASSERT_EQ(v->shape, (Shape{1, 3}));
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(v->data[k], expected->data[k], 1e-15);
}

TEST(CapsuleLayer, ZeroWeightsGiveZeroCapsules) {
  Rng rng(6);
  auto u = random_tensor({4, 5}, rng, false);
  auto tape = Tape<double>::inference();
  auto v = capsule_layer(tape, u, zeros<double>({4, 2, 3, 5}), RoutingConfig{3});
  EXPECT_EQ(v->data, std::vector<double>(6, 0.0));
}

TEST(CapsuleLayer, ShapeMismatch) {
  auto tape = Tape<double>::inference();
  EXPECT_THROW(capsule_layer(tape, zeros<double>({4, 5}), zeros<double>({3, 2, 3, 5}), RoutingConfig{}), DimensionError);
}

TEST(CapsuleLayer, WeightGradient) {
  Rng rng(7);
  auto u = random_tensor({3, 4, 4}, rng);
  auto w = random_tensor({4, 2, 4, 4}, rng);
  auto result = check_gradients({u, w}, [&](Tape<double>& t) {
    return project(t, capsule_layer(t, u, w, RoutingConfig{1}));
  });
  EXPECT_LT(result.max_rel_error, 1e-4);
}

TEST(CapsuleLayer, StopGradientMatchesFrozenCouplings) {
  // For iterations > 1 the backward pass must equal the derivative of the
  // final weighted sum with the couplings frozen at their forward values.
  Rng rng(8);
  auto u = random_tensor({2, 4, 4}, rng);
  auto w = random_tensor({4, 2, 4, 4}, rng);
  auto tape0 = Tape<double>::inference();
  const auto frozen = routing_by_agreement(tape0, capsule_predictions(tape0, u, w), RoutingConfig{3}).couplings.back();
  auto frozen_forward = [&](Tape<double>& t) {
    auto p = capsule_predictions(t, u, w);
    auto weights = make_tensor<double>(p->shape, std::vector<double>(p->size()));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j)
          for (std::size_t k = 0; k < 4; ++k) weights->data[((b * 4 + i) * 2 + j) * 4 + k] = frozen[(b * 4 + i) * 2 + j];
    auto weighted = mul(t, p, weights);
    // One routing iteration sums inputs with c = 1/n_out; pre-scaling by
    // n_out = 2 leaves sum_i c_ij u_ij.
    auto scaled = scale(t, weighted, 2.0);
    return project(t, routing_by_agreement(t, scaled, RoutingConfig{1}).output);
  };
  auto frozen_check = check_gradients({u, w}, frozen_forward);
  EXPECT_LT(frozen_check.max_rel_error, 1e-5);

  u->zero_grad();
  w->zero_grad();
  Tape<double> t1;
  t1.backward(project(t1, capsule_layer(t1, u, w, RoutingConfig{3})));
  const auto grad_u = u->grad, grad_w = w->grad;
  u->zero_grad();
  w->zero_grad();
  Tape<double> t2;
  t2.backward(frozen_forward(t2));
  for (std::size_t i = 0; i < grad_u.size(); ++i) EXPECT_NEAR(grad_u[i], u->grad[i], 1e-12);
  for (std::size_t i = 0; i < grad_w.size(); ++i) EXPECT_NEAR(grad_w[i], w->grad[i], 1e-12);
}

// ----------------------------------------------------- class_probabilities

TEST(ClassProbabilities, Lengths) {
  EXPECT_EQ(class_probabilities(*zeros<double>({3, 4})), std::vector<double>(3, 0.0));
  auto caps = make_tensor<double>({3, 2}, {0.0, 0.9, 0, 0, 0, 0});
  EXPECT_EQ(class_probabilities(*caps), (std::vector<double>{0.9, 0.0, 0.0}));
  Rng rng(9);
  auto tape = Tape<double>::inference();
  for (int i = 0; i < 50; ++i) {
    auto v = squash(tape, random_tensor({4, 6}, rng, false, 50.0));
    for (double p : class_probabilities(*v)) EXPECT_LT(p, 1.0);
  }
}

TEST(CapsuleLengths, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  auto v = random_tensor({3, 2, 5}, rng);
  auto result = check_gradients({v}, [&](Tape<double>& t) { return project(t, capsule_lengths(t, v)); });
  EXPECT_LT(result.max_rel_error, 1e-5);
}

// ----------------------------------------------------------------- losses

TEST(Loss, BalancingWeightsFromSliceCounts) {
  const auto w = BinaryLossWeights::from_counts(18416, 4993);
  EXPECT_NEAR(w.w1, 4993.0 / 23409.0, 1e-15);
  EXPECT_NEAR(w.w2, 18416.0 / 23409.0, 1e-15);
  EXPECT_NEAR(w.w1, 0.21330, 1e-5);
  EXPECT_NEAR(w.w2, 0.78670, 1e-5);
  const auto even = BinaryLossWeights::from_counts(40, 40);
  EXPECT_DOUBLE_EQ(even.w1, 0.5);
  EXPECT_DOUBLE_EQ(even.w2, 0.5);
}

TEST(Loss, BalancingWeightsSumToOneAndSwap) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::size_t a = 1 + rng.below(5000), b = 1 + rng.below(5000);
    const auto w = BinaryLossWeights::from_counts(a, b);
    const auto swapped = BinaryLossWeights::from_counts(b, a);
    EXPECT_NEAR(w.w1 + w.w2, 1.0, 1e-15);
    EXPECT_DOUBLE_EQ(w.w1, swapped.w2);
    EXPECT_DOUBLE_EQ(w.w2, swapped.w1);
  }
}

TEST(Loss, PerfectStageOnePredictionIsNearZero) {
  const auto w = BinaryLossWeights::from_counts(10, 3);
  const std::array<double, 2> perfect{0.0, 1.0};
  EXPECT_LT(weighted_binary_ce(perfect, 1, w), 1e-6);
  const std::array<double, 2> wrong{0.9, 0.1};
  EXPECT_GT(weighted_binary_ce(wrong, 1, w), 1.0);
}

TEST(Loss, MulticlassHandEvaluation) {
  const std::array<double, 3> half{0.5, 0.5, 0.5};
  const std::array<double, 3> covid{1, 0, 0};
  EXPECT_NEAR(multiclass_weighted_bce(half, covid), 11.0 * std::numbers::ln2, 1e-12);
  EXPECT_NEAR(multiclass_weighted_bce(half, covid), 7.6246, 5e-5);
}

TEST(Loss, MulticlassPerfectAndSymmetric) {
  const std::array<double, 3> covid{1, 0, 0};
  EXPECT_LT(multiclass_weighted_bce(covid, covid), 1e-5);
  const std::array<double, 3> a{0.7, 0.2, 0.4};
  const std::array<double, 3> b{0.7, 0.4, 0.2};
  EXPECT_DOUBLE_EQ(multiclass_weighted_bce(a, covid), multiclass_weighted_bce(b, covid));
}

TEST(Loss, NonNegative) {
  Rng rng(4);
  const auto w = BinaryLossWeights::from_counts(7, 2);
  for (int i = 0; i < 500; ++i) {
    const std::array<double, 2> l2{rng.uniform(), rng.uniform()};
    EXPECT_GE(weighted_binary_ce(l2, static_cast<int>(rng.below(2)), w), 0.0);
    const std::array<double, 3> l3{rng.uniform(), rng.uniform(), rng.uniform()};
    std::array<double, 3> t{0, 0, 0};
    t[rng.below(3)] = 1.0;
    EXPECT_GE(multiclass_weighted_bce(l3, t), 0.0);
  }
}

TEST(Loss, BatchedFormMatchesScalarForms) {
  const auto w = BinaryLossWeights::from_counts(30, 10);
  auto lengths = make_tensor<double>({3, 2}, {0.2, 0.7, 0.9, 0.05, 0.4, 0.6});
  const std::vector<int> targets{1, 0, 1};
  std::vector<double> sample_w;
  for (int t : targets) sample_w.push_back(t == 0 ? w.w1 : w.w2);
  const std::vector<double> class_w{1.0, 1.0};
  auto tape = Tape<double>::inference();
  auto loss = weighted_bce_loss(tape, lengths, targets, sample_w, class_w);
  double expected = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::array<double, 2> l{lengths->data[b * 2], lengths->data[b * 2 + 1]};
    expected += weighted_binary_ce(l, targets[b], w);
  }
  EXPECT_NEAR(loss->data[0], expected / 3.0, 1e-12);

  auto three = make_tensor<double>({1, 3}, {0.5, 0.5, 0.5});
  const std::vector<int> covid{0};
  const std::vector<double> one{1.0};
  const std::vector<double> cw(kStage2ClassWeights.begin(), kStage2ClassWeights.end());
  EXPECT_NEAR(weighted_bce_loss(tape, three, covid, one, cw)->data[0], 11.0 * std::numbers::ln2, 1e-12);
}

TEST(Loss, BatchedGradient) {
  Rng rng(5);
  auto lengths = make_tensor<double>({4, 3}, std::vector<double>(12));
  for (auto& v : lengths->data) v = rng.uniform(0.05, 0.95);
  lengths->requires_grad = true;
  const std::vector<int> targets{0, 2, 1, 2};
  const std::vector<double> sample_w{1.0, 0.5, 2.0, 1.0};
  const std::vector<double> class_w{1.0, 5.0, 5.0};
  auto result = check_gradients({lengths}, [&](Tape<double>& t) {
    return weighted_bce_loss(t, lengths, targets, sample_w, class_w);
  });
  EXPECT_LT(result.max_rel_error, 1e-5);
}
