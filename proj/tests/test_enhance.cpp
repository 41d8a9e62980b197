#include <gtest/gtest.h>

#include <algorithm>

#include "capsct/data/synth.hpp"
#include "capsct/enhance/enhance.hpp"

using namespace capsct;
using namespace capsct::enhance;
using capsct::pipeline::PipelineConfig;
using capsct::pipeline::SlicePrediction;

namespace {

PatientPrediction with_counts(std::string id, std::array<int, 3> counts) {
  PatientPrediction p;
  p.scan_id = std::move(id);
  p.counts = counts;
  p.prob = pipeline::patient_probabilities(counts);
  p.label = pipeline::argmax_with_ties(p.prob);
  return p;
}

VolumetricScan numbered_scan(std::size_t n, std::size_t size, const std::string& id) {
  VolumetricScan s;
  s.n_slices = n;
  s.height = s.width = size;
  s.meta.scan_id = id;
  s.pixels.resize(n * size * size);
  for (std::size_t i = 0; i < s.pixels.size(); ++i) s.pixels[i] = static_cast<float>(i / (size * size));
  return s;
}

PatientResult result_for(const VolumetricScan& scan) {
  PatientResult r;
  r.patient.scan_id = scan.meta.scan_id;
  r.slices.resize(scan.n_slices);
  for (std::size_t k = 0; k < scan.n_slices; ++k) r.slices[k].slice_index = static_cast<int>(k);
  return r;
}

void set_lengths(SlicePrediction& sp, std::array<double, 3> lengths) {
  sp.infection_prob = 0.9;
  sp.class_lengths = lengths;
  sp.class_argmax = pipeline::argmax_with_ties(lengths);
}

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.input_size = 16;
  cfg.lr = 1e-3;
  cfg.stage1_epochs = 2;
  cfg.stage2_epochs = 2;
  cfg.batch_size = 8;
  return cfg;
}

struct Fixture {
  PipelineConfig cfg = small_config();
  std::shared_ptr<pipeline::Stage1Model> stage1;
  pipeline::Stage2Model benchmark;
  pipeline::SliceSet stage2_train;
  std::map<SetId, std::vector<VolumetricScan>> tests;

  explicit Fixture(std::uint64_t seed)
      : stage1(std::make_shared<pipeline::Stage1Model>(pipeline::build_stage1(cfg, seed))),
        benchmark(pipeline::build_stage2(cfg, seed)) {
    data::CorpusSpec spec;
    spec.counts[SetId::Train] = {3, 3, 3};
    spec.counts[SetId::Test1] = {2, 0, 2};
    spec.counts[SetId::Test2] = {1, 1, 1};
    spec.counts[SetId::Test3] = {1, 1, 1};
    const data::SyntheticMaskProvider masks;
    std::vector<VolumetricScan> train;
    for (const auto& raw : data::generate_corpus(spec, seed, 32)) {
      auto s = data::preprocess(raw, masks, cfg.input_size);
      if (s.meta.set_id == SetId::Train) {
        train.push_back(std::move(s));
      } else {
        tests[s.meta.set_id].push_back(std::move(s));
      }
    }
    pipeline::train_stage1(*stage1, pipeline::stage1_slices(train), cfg, seed);
    // a low cutoff keeps every class present in the stage-2 set
    auto loose = cfg;
    loose.infection_cutoff = 1e-6;
    stage2_train = pipeline::stage2_training_set(*stage1, train, loose);
    pipeline::train_stage2(benchmark, stage2_train, cfg, seed);
  }
};

}  // namespace

// ---------------------------------------------------------------- patient gate

TEST(PatientGate, ThresholdExamples) {
  const std::vector<PatientPrediction> preds{with_counts("a", {9, 1, 0}), with_counts("b", {7, 3, 0}),
                                             with_counts("c", {8, 2, 0}), with_counts("d", {0, 1, 4})};
  EXPECT_EQ(select_confident_patients(preds, 0.8), (std::vector<std::string>{"a", "c", "d"}));
}

TEST(PatientGate, FilteredScansAreLeftToTheNormalRule) {
  PatientPrediction p;
  p.scan_id = "f";
  p.normal_filtered = true;
  p.prob = {0, 0, 1};
  EXPECT_TRUE(select_confident_patients({p}).empty());
}

// ---------------------------------------------------------------- slice gate

TEST(SliceGate, LengthAndAgreement) {
  const auto scan = numbered_scan(4, 4, "s");
  auto r = result_for(scan);
  set_lengths(r.slices[0], {0.95, 0.1, 0.05});
  set_lengths(r.slices[1], {0.6, 0.3, 0.1});
  set_lengths(r.slices[2], {0.85, 0.9, 0.1});  // confident COVID length but CAP wins
  const auto kept = select_confident_slices(r, scan, ClassLabel::Covid, 0.8);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].slice_index, 0);
  EXPECT_EQ(kept[0].label, ClassLabel::Covid);
  EXPECT_DOUBLE_EQ(kept[0].probability, 0.95);
  EXPECT_EQ(kept[0].scan_id, "s");
  EXPECT_EQ(kept[0].image, std::vector<float>(16, 0.0f));
}

TEST(SliceGate, BoundaryIsInclusive) {
  const auto scan = numbered_scan(2, 4, "s");
  auto r = result_for(scan);
  set_lengths(r.slices[1], {0.1, 0.8, 0.05});
  const auto kept = select_confident_slices(r, scan, ClassLabel::Cap, 0.8);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].image, std::vector<float>(16, 1.0f));
}

TEST(SliceGate, MismatchedScanIsRejected) {
  const auto scan = numbered_scan(2, 4, "s");
  auto r = result_for(numbered_scan(2, 4, "other"));
  EXPECT_THROW(select_confident_slices(r, scan, ClassLabel::Cap), std::invalid_argument);
}

// ---------------------------------------------------------------- Normal rule

TEST(NormalRule, KeepsOnlyHighInfectionProbability) {
  const auto scan = numbered_scan(40, 4, "n");
  auto r = result_for(scan);
  r.patient.normal_filtered = true;
  r.slices[3].infection_prob = 0.9;
  r.slices[5].infection_prob = 0.7;
  const auto kept = normal_slice_rule(r, scan, 0.8);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].slice_index, 3);
  EXPECT_EQ(kept[0].label, ClassLabel::Normal);
  EXPECT_DOUBLE_EQ(kept[0].probability, 0.9);
}

TEST(NormalRule, RejectsUnfilteredScan) {
  const auto scan = numbered_scan(4, 4, "n");
  auto r = result_for(scan);
  EXPECT_THROW(normal_slice_rule(r, scan), std::invalid_argument);
}

// ---------------------------------------------------------------- extraction

TEST(Extraction, CountsPatientsAndSlices) {
  std::vector<VolumetricScan> scans{numbered_scan(10, 4, "a"), numbered_scan(10, 4, "b"), numbered_scan(40, 4, "c"),
                                    numbered_scan(40, 4, "d")};
  std::vector<PatientResult> results;
  for (const auto& s : scans) results.push_back(result_for(s));
  // a: confident COVID patient with two confident slices out of three voted
  for (int k : {0, 1, 2}) set_lengths(results[0].slices[k], {0.9, 0.1, 0.1});
  results[0].slices[2].class_lengths = std::array<double, 3>{0.7, 0.1, 0.1};
  results[0].patient = with_counts("a", {3, 0, 0});
  // b: 60/40 split, below the gate
  for (int k : {0, 1, 2}) set_lengths(results[1].slices[k], {0.9, 0.1, 0.1});
  for (int k : {3, 4}) set_lengths(results[1].slices[k], {0.1, 0.9, 0.1});
  results[1].patient = with_counts("b", {3, 2, 0});
  // c: filtered with one high stage-1 slice
  results[2].patient.normal_filtered = true;
  results[2].slices[7].infection_prob = 0.95;
  // d: filtered with nothing above tau
  results[3].patient.normal_filtered = true;

  const auto set = extract_confident(SetId::Test2, results, scans, 0.8);
  EXPECT_EQ(set.source_set_id, SetId::Test2);
  EXPECT_EQ(set.patient_count, 2u);
  EXPECT_EQ(set.class_counts(), (std::array<std::size_t, 3>{2, 0, 1}));
  for (const auto& e : set.entries) EXPECT_GE(e.probability, 0.8);
}

// ---------------------------------------------------------------- ensemble arithmetic

TEST(Ensemble, MeanOfMembers) {
  const auto m = mean_probability({{1, 0, 0}, {0.6, 0.4, 0}});
  EXPECT_DOUBLE_EQ(m[0], 0.8);
  EXPECT_DOUBLE_EQ(m[1], 0.2);
  EXPECT_DOUBLE_EQ(m[2], 0.0);
  EXPECT_EQ(pipeline::argmax_with_ties(m), ClassLabel::Covid);
  const std::array<double, 3> p{0.25, 0.5, 0.25};
  EXPECT_EQ(mean_probability({p, p, p}), p);
  EXPECT_THROW(mean_probability({}), std::invalid_argument);
}

TEST(Ensemble, MeanOfDistributionsIsADistribution) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::array<double, 3>> members(rng.between(1, 4));
    for (auto& p : members) {
      std::array<int, 3> c{};
      do {
        for (auto& v : c) v = static_cast<int>(rng.between(0, 9));
      } while (c[0] + c[1] + c[2] == 0);
      p = pipeline::patient_probabilities(c);
    }
    const auto m = mean_probability(members);
    for (double v : m) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_NEAR(m[0] + m[1] + m[2], 1.0, 1e-12);
  }
}

TEST(Ensemble, LeaveOneOutMembership) {
  const auto cfg = small_config();
  EnhancedEnsemble e{nullptr, pipeline::build_stage2(cfg, 1), {}};
  for (auto id : {SetId::Test1, SetId::Test2, SetId::Test3}) e.members.emplace(id, pipeline::build_stage2(cfg, 1));
  EXPECT_EQ(e.members_for(SetId::Test1), (std::vector<SetId>{SetId::Test2, SetId::Test3}));
  EXPECT_EQ(e.members_for(SetId::Test4), (std::vector<SetId>{SetId::Test1, SetId::Test2, SetId::Test3}));
}

// ---------------------------------------------------------------- with models

TEST(EnhancementRound, EndToEndProperties) {
  Fixture f(11);
  const auto stage1_before = f.stage1->net.state_vector();
  const auto bench_before = f.benchmark.net.state_vector();
  EnhanceConfig ecfg;
  ecfg.tau = 0.5;
  ecfg.epochs = 1;
  auto round = enhancement_round(f.stage1, f.benchmark, f.stage2_train, f.tests, f.cfg, ecfg, 5);

  // stage 1 and the benchmark are untouched
  EXPECT_EQ(f.stage1->net.state_vector(), stage1_before);
  EXPECT_EQ(f.benchmark.net.state_vector(), bench_before);
  EXPECT_EQ(round.ensemble.stage1, f.stage1);
  EXPECT_EQ(round.ensemble.benchmark.net.state_vector(), bench_before);

  ASSERT_EQ(round.report.sets.size(), 3u);
  for (const auto& s : round.report.sets) {
    const auto& member = round.ensemble.members.at(s.set_id);
    EXPECT_EQ(s.empty, member.net.state_vector() == bench_before);
    EXPECT_EQ(s.scans, f.tests.at(s.set_id).size());
  }

  for (const auto& [target, scans] : f.tests) {
    for (const auto& scan : scans) {
      const auto p = ensemble_predict(round.ensemble, scan, target, f.cfg);
      EXPECT_EQ(std::count(p.members.begin(), p.members.end(), target), 0);
      EXPECT_EQ(p.members.size(), 2u);
      EXPECT_NEAR(p.patient.prob[0] + p.patient.prob[1] + p.patient.prob[2], 1.0, 1e-12);
      EXPECT_EQ(p.patient.label, pipeline::argmax_with_ties(p.patient.prob));
    }
  }
  const auto unseen = ensemble_predict(round.ensemble, f.tests.at(SetId::Test1)[0], SetId::Test4, f.cfg);
  EXPECT_EQ(unseen.members.size(), 3u);

  // the same inputs give the same report
  auto again = enhancement_round(f.stage1, f.benchmark, f.stage2_train, f.tests, f.cfg, ecfg, 5);
  EXPECT_EQ(to_json(again.report).dump(), to_json(round.report).dump());
  for (const auto& [id, m] : round.ensemble.members) {
    EXPECT_EQ(again.ensemble.members.at(id).net.state_vector(), m.net.state_vector());
  }
}

TEST(EnhancementRound, NoTestSetsFallsBackToBenchmark) {
  Fixture f(12);
  auto round = enhancement_round(f.stage1, f.benchmark, f.stage2_train, {}, f.cfg, EnhanceConfig{}, 1);
  EXPECT_TRUE(round.ensemble.members.empty());
  for (const auto& scan : f.tests.at(SetId::Test2)) {
    const auto p = ensemble_predict(round.ensemble, scan, SetId::Test2, f.cfg);
    const auto b = pipeline::classify_patient(*f.stage1, f.benchmark, scan, f.cfg);
    EXPECT_TRUE(p.members.empty());
    EXPECT_EQ(p.patient.prob, b.patient.prob);
    EXPECT_EQ(p.patient.label, b.patient.label);
  }
}

TEST(EnhancementRound, OnlySelfMemberIsAnError) {
  Fixture f(13);
  EnhancedEnsemble e{f.stage1, f.benchmark, {}};
  e.members.emplace(SetId::Test2, f.benchmark);
  EXPECT_THROW(ensemble_predict(e, f.tests.at(SetId::Test2)[0], SetId::Test2, f.cfg), std::invalid_argument);
  EXPECT_NO_THROW(ensemble_predict(e, f.tests.at(SetId::Test2)[0], SetId::Test1, f.cfg));
}

TEST(Retrain, EmptySetReturnsBenchmark) {
  Fixture f(14);
  ConfidentSet empty;
  const auto r = retrain_enhanced(f.benchmark, f.stage2_train, empty, f.cfg, 1, 3);
  EXPECT_TRUE(r.empty_confident_set);
  EXPECT_EQ(r.model.net.state_vector(), f.benchmark.net.state_vector());
  EXPECT_TRUE(r.history.epoch_loss.empty());
}

TEST(Retrain, StartsFromBenchmarkAndIsDeterministic) {
  Fixture f(15);
  ConfidentSet set;
  set.add_patient({ConfidentEntry{std::vector<float>(256, 0.5f), ClassLabel::Cap, "x", 0, 0.9}});
  const auto before = f.benchmark.net.state_vector();
  const auto a = retrain_enhanced(f.benchmark, f.stage2_train, set, f.cfg, 2, 1);
  const auto b = retrain_enhanced(f.benchmark, f.stage2_train, set, f.cfg, 2, 1);
  EXPECT_FALSE(a.empty_confident_set);
  EXPECT_EQ(a.history.epoch_loss.size(), 1u);
  EXPECT_EQ(a.model.net.state_vector(), b.model.net.state_vector());
  EXPECT_NE(a.model.net.state_vector(), before);
  EXPECT_EQ(f.benchmark.net.state_vector(), before);
  // one epoch from the benchmark stays closer to it than a fresh network does
  const auto fresh = pipeline::build_stage2(f.cfg, 99).net.state_vector();
  double d_bench = 0, d_fresh = 0;
  const auto after = a.model.net.state_vector();
  for (std::size_t i = 0; i < after.size(); ++i) {
    d_bench += (after[i] - before[i]) * (after[i] - before[i]);
    d_fresh += (after[i] - fresh[i]) * (after[i] - fresh[i]);
  }
  EXPECT_LT(d_bench, d_fresh);
}

TEST(Report, JsonLayout) {
  RoundReport r;
  r.epochs = 3;
  r.seed = 9;
  r.sets.push_back({SetId::Test1, 30, 12, {40, 0, 2}, false, 77, {0.5}});
  const auto j = to_json(r);
  EXPECT_EQ(j["sets"][0]["set_id"], "TEST1");
  EXPECT_EQ(j["sets"][0]["confident_slices"]["Normal"], 2);
  EXPECT_EQ(j["sets"][0]["confident_patients"], 12);
  EXPECT_EQ(j["tau"], 0.8);
}
