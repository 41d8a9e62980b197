#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "capsct/caps/loss.hpp"
#include "capsct/data/synth.hpp"
#include "capsct/pipeline/pipeline.hpp"
#include "gradcheck.hpp"

using namespace capsct;
using namespace capsct::pipeline;
using capsct::data::ClassLabel;
using capsct::data::SetId;
using capsct::data::ShiftProfile;

namespace {

// Parameter count from the layer shapes, written out independently of the
// network constructor.
std::size_t count_params(const ArchConfig& a) {
  const auto& c = a.channels;
  const std::size_t k2 = a.kernel * a.kernel;
  std::size_t n = c[0] * k2 + c[0];
  n += c[1] * c[0] * k2 + c[1];
  n += c[1];  // 1x1 projection from the single input channel
  n += c[2] * c[1] * k2 + c[2];
  n += c[3] * c[2] * k2 + c[3];
  n += c[3] * c[1];
  n += 2 * c[3];
  std::size_t s = a.input_size;
  for (auto st : a.strides) s = (s - 1) / st + 1;
  s /= a.pool;
  std::size_t in_count = c[3] * s * s / a.primary_dim, in_dim = a.primary_dim;
  auto layers = a.hidden;
  layers.push_back(a.classes);
  for (const auto& l : layers) {
    n += in_count * l.count * l.dim * in_dim;
    in_count = l.count;
    in_dim = l.dim;
  }
  return n;
}

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.input_size = 16;
  cfg.lr = 1e-3;
  cfg.stage1_epochs = 3;
  cfg.stage2_epochs = 3;
  cfg.batch_size = 8;
  return cfg;
}

std::vector<data::VolumetricScan> small_scans(std::size_t size, std::uint64_t seed) {
  std::vector<data::VolumetricScan> out;
  const data::SyntheticMaskProvider masks;
  int i = 0;
  for (auto cls : data::kAllClasses) {
    for (int j = 0; j < 2; ++j, ++i) {
      auto raw = data::generate_scan(cls, ShiftProfile::preset(SetId::Train), Rng::mix(seed, i), 32);
      raw.meta.scan_id = "s" + std::to_string(i);
      out.push_back(data::preprocess(raw, masks, size));
    }
  }
  return out;
}

data::VolumetricScan blank_scan(std::size_t n, std::size_t size, ClassLabel cls) {
  data::VolumetricScan s;
  s.n_slices = n;
  s.height = s.width = size;
  s.pixels.assign(n * size * size, 0.0f);
  s.meta.scan_id = "blank";
  s.meta.true_class = cls;
  Rng rng(5);
  for (auto& p : s.pixels) p = static_cast<float>(rng.uniform());
  return s;
}

}  // namespace

// ---------------------------------------------------------------- network

TEST(Network, ParameterCountsMatchLayerArithmetic) {
  const PipelineConfig cfg;
  auto s1 = build_stage1(cfg, 1);
  auto s2 = build_stage2(cfg, 1);
  EXPECT_EQ(s1.net.parameter_count(), count_params(cfg.stage1_arch()));
  EXPECT_EQ(s2.net.parameter_count(), count_params(cfg.stage2_arch()));
  EXPECT_EQ(s1.net.parameter_count(), 150752u);
  EXPECT_EQ(s2.net.parameter_count(), 39264u);
  EXPECT_LT(s2.net.parameter_count(), s1.net.parameter_count());
}

TEST(Network, BuildIsDeterministicInSeed) {
  const PipelineConfig cfg;
  EXPECT_EQ(build_stage1(cfg, 9).net.state_vector(), build_stage1(cfg, 9).net.state_vector());
  EXPECT_NE(build_stage1(cfg, 9).net.state_vector(), build_stage1(cfg, 10).net.state_vector());
  EXPECT_NE(build_stage1(cfg, 9).net.state_vector(), build_stage2(cfg, 9).net.state_vector());
}

TEST(Network, CopyIsDeep) {
  auto a = build_stage2(small_config(), 3);
  auto b = a;
  b.net.parameter("conv1.weight")->data[0] += 1.0f;
  EXPECT_NE(a.net.parameter("conv1.weight")->data[0], b.net.parameter("conv1.weight")->data[0]);
  EXPECT_NE(a.net.parameter("conv1.weight"), b.net.parameter("conv1.weight"));
}

TEST(Network, ZeroSliceGivesFiniteSubunitLengths) {
  auto m = build_stage1(PipelineConfig{}, 4);
  Tape<float> tape;
  Rng rng(1);
  auto x = ad::zeros<float>({2, 1, 64, 64});
  auto len = m.net.lengths(tape, x, Mode::Train, &rng);
  ASSERT_EQ(len->shape, (ad::Shape{2, 2}));
  for (float v : len->data) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Network, WrongInputShapeIsRejected) {
  auto m = build_stage1(PipelineConfig{}, 4);
  Tape<float> tape;
  EXPECT_THROW(m.net.lengths(tape, ad::zeros<float>({1, 1, 32, 32}), Mode::Eval, nullptr), DimensionError);
}

TEST(Network, InputSizesThatBreakThePoolAreRejected) {
  PipelineConfig cfg;
  cfg.input_size = 20;  // 20 -> 10 -> 5: odd map before the pool
  EXPECT_THROW(build_stage1(cfg, 1), ConfigError);
}

TEST(Network, FullStage1GradientMatchesFiniteDifferences) {
  // Routing couplings are constants in the backward pass, so the analytic
  // gradient is the true one only when a single iteration leaves them uniform.
  auto arch = ArchConfig::stage1(16);
  arch.dropout = 0.0;
  arch.routing_iterations = 1;
  CapsNet<double> net(arch, 21);
  Rng rng(22);
  auto x = capsct::testing::random_tensor({3, 1, 16, 16}, rng, false);
  const std::vector<int> targets{0, 1, 1};
  const std::vector<double> weights{0.6, 0.4, 0.4};
  const std::vector<double> class_weights{1.0, 1.0};
  auto loss_fn = [&](Tape<double>& tape) {
    auto len = net.lengths(tape, x, Mode::Train, nullptr);
    return caps::weighted_bce_loss<double>(tape, len, targets, weights, class_weights);
  };
  const auto r = capsct::testing::check_gradients(net.parameters(), loss_fn);
  EXPECT_EQ(r.checked, net.parameter_count());
  EXPECT_LT(r.max_rel_error, 1e-4);
}

// ---------------------------------------------------------------- training

TEST(Training, Stage1NeedsBothLabels) {
  auto cfg = small_config();
  auto m = build_stage1(cfg, 1);
  SliceSet set;
  set.image_size = 16;
  std::vector<float> img(256, 0.5f);
  for (int i = 0; i < 4; ++i) set.add(img, 0, "a", i);
  EXPECT_THROW(train_stage1(m, set, cfg, 1), std::invalid_argument);
}

TEST(Training, Stage2ErrorNamesMissingClasses) {
  auto cfg = small_config();
  auto m = build_stage2(cfg, 1);
  SliceSet set;
  set.image_size = 16;
  std::vector<float> img(256, 0.5f);
  for (int i = 0; i < 4; ++i) set.add(img, 0, "a", i);
  try {
    train_stage2(m, set, cfg, 1);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("CAP, Normal"), std::string::npos) << e.what();
  }
}

TEST(Training, ZeroEpochsLeavesModelUnchanged) {
  auto cfg = small_config();
  cfg.stage1_epochs = 0;
  auto m = build_stage1(cfg, 2);
  const auto before = m.net.state_vector();
  const auto h = train_stage1(m, stage1_slices(small_scans(16, 1)), cfg, 3);
  EXPECT_TRUE(h.epoch_loss.empty());
  EXPECT_EQ(m.net.state_vector(), before);
}

TEST(Training, Stage1LossDecreasesAndIsDeterministic) {
  auto cfg = small_config();
  cfg.stage1_epochs = 6;
  const auto slices = stage1_slices(small_scans(16, 2));
  auto a = build_stage1(cfg, 2), b = build_stage1(cfg, 2);
  const auto ha = train_stage1(a, slices, cfg, 7);
  const auto hb = train_stage1(b, slices, cfg, 7);
  ASSERT_EQ(ha.epoch_loss.size(), 6u);
  EXPECT_LT(ha.epoch_loss.back(), ha.epoch_loss.front());
  EXPECT_EQ(ha.epoch_loss, hb.epoch_loss);
  EXPECT_EQ(a.net.state_vector(), b.net.state_vector());
  const auto counts = slices.label_counts();
  const double total = static_cast<double>(counts[0] + counts[1]);
  EXPECT_DOUBLE_EQ(ha.stage1_weights.w1, counts[1] / total);
  EXPECT_DOUBLE_EQ(ha.stage1_weights.w2, counts[0] / total);
}

TEST(Training, Stage1SlicesFollowInfectedSets) {
  const auto scans = small_scans(16, 3);
  const auto set = stage1_slices(scans);
  std::size_t i = 0;
  for (const auto& s : scans) {
    for (std::size_t k = 0; k < s.n_slices; ++k, ++i) {
      EXPECT_EQ(set.labels[i], s.is_infected(k) ? 1 : 0);
      EXPECT_EQ(set.scan_ids[i], s.meta.scan_id);
      EXPECT_EQ(set.slice_indices[i], static_cast<int>(k));
    }
  }
  EXPECT_EQ(i, set.size());
}

TEST(Training, Stage2SetKeepsOneSliceOfUnselectedNormals) {
  auto cfg = small_config();
  cfg.infection_cutoff = 1.0 - 1e-12;  // nothing can be selected
  auto m = build_stage1(cfg, 1);
  const auto scans = small_scans(16, 4);
  const auto set = stage2_training_set(m, scans, cfg);
  EXPECT_EQ(set.size(), 2u);
  for (int label : set.labels) EXPECT_EQ(label, data::index(ClassLabel::Normal));
}

// ---------------------------------------------------------------- selection and filter

TEST(Selection, FiveOfTwoHundred) {
  std::vector<double> probs(200, 0.1);
  for (int k : {3, 50, 51, 120, 199}) probs[k] = 0.9;
  const auto r = select_from_probabilities(probs, 0.5);
  EXPECT_EQ(r.selected, (std::vector<int>{3, 50, 51, 120, 199}));
  EXPECT_DOUBLE_EQ(r.infected_fraction, 0.025);
  EXPECT_TRUE(normal_filter(r.infected_fraction));
}

TEST(Selection, CutoffIsInclusive) {
  const auto r = select_from_probabilities({0.5, 0.4999999}, 0.5);
  EXPECT_EQ(r.selected, std::vector<int>{0});
}

TEST(Selection, FractionEqualsRecountAndFallsWithCutoff) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> probs(rng.between(1, 60));
    for (auto& p : probs) p = rng.uniform();
    double last = 2.0;
    for (double cutoff : {0.05, 0.2, 0.5, 0.8, 0.95}) {
      const auto r = select_from_probabilities(probs, cutoff);
      const auto n = std::count_if(probs.begin(), probs.end(), [&](double p) { return p >= cutoff; });
      EXPECT_EQ(static_cast<long>(r.selected.size()), n);
      EXPECT_DOUBLE_EQ(r.infected_fraction, static_cast<double>(n) / probs.size());
      EXPECT_LE(r.infected_fraction, last);
      last = r.infected_fraction;
    }
  }
}

TEST(NormalFilter, Boundaries) {
  EXPECT_TRUE(normal_filter(0.025));
  EXPECT_FALSE(normal_filter(0.035));
  EXPECT_FALSE(normal_filter(0.03));
  EXPECT_TRUE(normal_filter(0.0));
  EXPECT_TRUE(normal_filter(0.1, 0.2));
}

// ---------------------------------------------------------------- patient probabilities

TEST(PatientProbabilities, Examples) {
  EXPECT_EQ(patient_probabilities({8, 2, 0}), (std::array<double, 3>{0.8, 0.2, 0.0}));
  EXPECT_EQ(patient_probabilities({10, 0, 0}), (std::array<double, 3>{1.0, 0.0, 0.0}));
  EXPECT_THROW(patient_probabilities({0, 0, 0}), std::logic_error);
}

TEST(PatientProbabilities, EqualReducedRationalRatios) {
  Rng rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    std::array<int, 3> c{};
    do {
      for (auto& v : c) v = static_cast<int>(rng.between(0, 40));
    } while (c[0] + c[1] + c[2] == 0);
    const int total = c[0] + c[1] + c[2];
    const auto p = patient_probabilities(c);
    double sum = 0;
    for (int i = 0; i < 3; ++i) {
      const int g = std::gcd(c[i], total);
      EXPECT_EQ(p[i], static_cast<double>(c[i] / g) / static_cast<double>(total / g));
      sum += p[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-15);
    // majority vote and argmax of P agree, ties included
    const int majority = static_cast<int>(std::max_element(c.begin(), c.end()) - c.begin());
    EXPECT_EQ(data::index(argmax_with_ties(p)), majority);
  }
}

TEST(PatientProbabilities, TiesGoToLowerIndex) {
  const std::array<double, 3> a{0.4, 0.4, 0.2}, b{0.2, 0.4, 0.4}, c{1.0 / 3, 1.0 / 3, 1.0 / 3};
  EXPECT_EQ(argmax_with_ties(a), ClassLabel::Covid);
  EXPECT_EQ(argmax_with_ties(b), ClassLabel::Cap);
  EXPECT_EQ(argmax_with_ties(c), ClassLabel::Covid);
}

// ---------------------------------------------------------------- classify

TEST(Classify, FilteredScanIsNormalWithoutCounts) {
  auto cfg = small_config();
  auto s2 = build_stage2(cfg, 1);
  const auto scan = blank_scan(40, 16, ClassLabel::Cap);
  std::vector<double> probs(40, 0.1);
  probs[7] = 0.9;  // 1/40 = 2.5%
  const auto r = classify_with_stage1(select_from_probabilities(probs, 0.5), s2, scan, cfg);
  EXPECT_TRUE(r.patient.normal_filtered);
  EXPECT_EQ(r.patient.prob, (std::array<double, 3>{0, 0, 1}));
  EXPECT_EQ(r.patient.label, ClassLabel::Normal);
  EXPECT_EQ(r.patient.counts, (std::array<int, 3>{0, 0, 0}));
  EXPECT_TRUE(r.slices[7].class_lengths.has_value());
  EXPECT_FALSE(r.slices[8].class_lengths.has_value());
}

TEST(Classify, UnfilteredScanVotesOverSelection) {
  auto cfg = small_config();
  auto s2 = build_stage2(cfg, 1);
  const auto scan = blank_scan(40, 16, ClassLabel::Covid);
  std::vector<double> probs(40, 0.1);
  for (int k : {1, 2, 3, 10, 30}) probs[k] = 0.7;
  const auto r = classify_with_stage1(select_from_probabilities(probs, 0.5), s2, scan, cfg);
  EXPECT_FALSE(r.patient.normal_filtered);
  EXPECT_EQ(r.patient.counts[0] + r.patient.counts[1] + r.patient.counts[2], 5);
  std::array<int, 3> recount{};
  for (const auto& sp : r.slices) {
    if (sp.class_argmax) ++recount[data::index(*sp.class_argmax)];
  }
  EXPECT_EQ(recount, r.patient.counts);
  EXPECT_EQ(r.patient.prob, patient_probabilities(r.patient.counts));
  EXPECT_EQ(r.patient.label, argmax_with_ties(r.patient.prob));
}

TEST(Classify, EndToEndMatchesSplitCall) {
  auto cfg = small_config();
  auto s1 = build_stage1(cfg, 1);
  auto s2 = build_stage2(cfg, 2);
  // Eval mode needs running statistics; one short fit provides them.
  cfg.stage1_epochs = 1;
  const auto scans = small_scans(16, 5);
  train_stage1(s1, stage1_slices(scans), cfg, 1);
  for (const auto& scan : scans) {
    const auto a = classify_patient(s1, s2, scan, cfg);
    const auto b = classify_with_stage1(select_infected_slices(s1, scan, cfg), s2, scan, cfg);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  }
}

// ---------------------------------------------------------------- metrics

TEST(Metrics, AllCorrectAndComplement) {
  const std::vector<int> truth{1, 0, 1, 1, 0, 0, 1};
  std::vector<int> complement(truth.size());
  std::transform(truth.begin(), truth.end(), complement.begin(), [](int t) { return 1 - t; });
  const auto ok = binary_metrics(truth, truth);
  EXPECT_EQ(ok.accuracy, 1.0);
  EXPECT_EQ(ok.sensitivity, 1.0);
  EXPECT_EQ(ok.specificity, 1.0);
  const auto bad = binary_metrics(complement, truth);
  EXPECT_EQ(bad.accuracy, 0.0);
  EXPECT_EQ(bad.sensitivity, 0.0);
  EXPECT_EQ(bad.specificity, 0.0);
}

TEST(Metrics, UndefinedRatesAreNaN) {
  const std::vector<int> zeros(4, 0);
  const auto m = binary_metrics(zeros, zeros);
  EXPECT_TRUE(std::isnan(m.sensitivity));
  EXPECT_EQ(m.specificity, 1.0);
  EXPECT_THROW(binary_metrics(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
}

TEST(Metrics, RandomGuessingNearHalf) {
  Rng rng(51);
  std::vector<int> pred(20000), truth(20000);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred[i] = rng.bernoulli(0.5);
    truth[i] = rng.bernoulli(0.5);
  }
  const auto m = binary_metrics(pred, truth);
  EXPECT_NEAR(m.accuracy, 0.5, 0.02);
  EXPECT_NEAR(m.sensitivity, 0.5, 0.02);
  EXPECT_NEAR(m.specificity, 0.5, 0.02);
}

// ---------------------------------------------------------------- prediction log

TEST(PredictionLog, RoundTrip) {
  PatientResult a;
  a.patient.scan_id = "test2-004";
  a.patient.set_id = SetId::Test2;
  a.patient.true_class = ClassLabel::Cap;
  a.patient.counts = {1, 3, 0};
  a.patient.prob = patient_probabilities(a.patient.counts);
  a.patient.label = ClassLabel::Cap;
  a.patient.infected_fraction = 0.4;
  a.slices.push_back({0, 0.2, std::nullopt, std::nullopt});
  a.slices.push_back({1, 0.8, std::array<double, 3>{0.1, 0.7, 0.2}, ClassLabel::Cap});
  PatientResult b;
  b.patient.scan_id = "test1-000";
  b.patient.normal_filtered = true;
  b.patient.prob = {0, 0, 1};

  const auto path = std::filesystem::temp_directory_path() / "capsct_predlog_test.ndjson";
  write_prediction_log(path, {a, b});
  const auto back = read_prediction_log(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(to_json(back[0]).dump(), to_json(a).dump());
  EXPECT_EQ(to_json(back[1]).dump(), to_json(b).dump());
  EXPECT_EQ(back[0].slices[1].class_argmax, ClassLabel::Cap);
  EXPECT_FALSE(back[0].slices[0].class_lengths.has_value());

  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("{\"P\":", 0), 0u) << line;
  std::filesystem::remove(path);
}

TEST(PredictionLog, MalformedLineNamesLineNumber) {
  const auto path = std::filesystem::temp_directory_path() / "capsct_predlog_bad.ndjson";
  {
    std::ofstream out(path);
    out << "{}\n";
  }
  try {
    read_prediction_log(path);
    FAIL() << "expected an error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":1:"), std::string::npos) << e.what();
  }
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------- config

TEST(Config, ValidateRejectsOutOfRange) {
  PipelineConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.normal_threshold = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
