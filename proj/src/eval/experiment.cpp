#include "capsct/eval/experiment.hpp"

#include <chrono>
#include <fstream>

#include "capsct/ad/rng.hpp"
#include "capsct/eval/checkpoint.hpp"

namespace capsct::eval {

Seeds Seeds::from(std::uint64_t seed) {
  return {Rng::mix(seed, 11), Rng::mix(seed, 12), Rng::mix(seed, 21), Rng::mix(seed, 22), Rng::mix(seed, 31)};
}

std::vector<VolumetricScan> preprocess_all(const ExperimentConfig& cfg, const std::vector<VolumetricScan>& raw) {
  const data::SyntheticMaskProvider masks;
  std::vector<VolumetricScan> out;
  out.reserve(raw.size());
  for (const auto& s : raw) out.push_back(data::preprocess(s, masks, cfg.pipeline.input_size));
  return out;
}

ExperimentData prepare_data(const ExperimentConfig& cfg, const std::vector<VolumetricScan>& raw) {
  ExperimentData d;
  std::vector<VolumetricScan> train;
  for (auto& s : preprocess_all(cfg, raw)) {
    if (s.meta.set_id == SetId::Train) {
      train.push_back(std::move(s));
    } else {
      d.tests[s.meta.set_id].push_back(std::move(s));
    }
  }
  if (!train.empty()) std::tie(d.train, d.validation) = data::split_train_validation(train, cfg.validation_fraction, cfg.seed);
  return d;
}

ExperimentData prepare_data(const ExperimentConfig& cfg) {
  auto spec = cfg.corpus;
  return prepare_data(cfg, data::generate_corpus(spec, cfg.seed, cfg.image_size));
}

pipeline::Stage1Model train_stage1_model(const ExperimentConfig& cfg, const std::vector<VolumetricScan>& train,
                                         pipeline::TrainHistory* history) {
  const auto seeds = Seeds::from(cfg.seed);
  auto model = pipeline::build_stage1(cfg.pipeline, seeds.stage1_init);
  auto h = pipeline::train_stage1(model, pipeline::stage1_slices(train), cfg.pipeline, seeds.stage1_train);
  if (history) *history = std::move(h);
  return model;
}

Benchmark train_stage2_model(const ExperimentConfig& cfg, std::shared_ptr<pipeline::Stage1Model> stage1,
                             const std::vector<VolumetricScan>& train) {
  const auto seeds = Seeds::from(cfg.seed);
  Benchmark b{std::move(stage1), pipeline::build_stage2(cfg.pipeline, seeds.stage2_init), {}, {}, {}};
  b.stage2_train = pipeline::stage2_training_set(*b.stage1, train, cfg.pipeline);
  b.stage2_history = pipeline::train_stage2(b.stage2, b.stage2_train, cfg.pipeline, seeds.stage2_train);
  return b;
}

Benchmark train_benchmark(const ExperimentConfig& cfg, const ExperimentData& data) {
  pipeline::TrainHistory h1;
  auto stage1 = std::make_shared<pipeline::Stage1Model>(train_stage1_model(cfg, data.train, &h1));
  auto b = train_stage2_model(cfg, std::move(stage1), data.train);
  b.stage1_history = std::move(h1);
  return b;
}

std::vector<pipeline::PatientResult> predict_scans(pipeline::Stage1Model& stage1, pipeline::Stage2Model& stage2,
                                                   const std::vector<VolumetricScan>& scans,
                                                   const pipeline::PipelineConfig& cfg) {
  std::vector<pipeline::PatientResult> out;
  out.reserve(scans.size());
  for (const auto& s : scans) out.push_back(pipeline::classify_patient(stage1, stage2, s, cfg));
  return out;
}

std::vector<PatientPrediction> ensemble_predict_set(enhance::EnhancedEnsemble& ensemble,
                                                    const std::vector<VolumetricScan>& scans, SetId target,
                                                    const pipeline::PipelineConfig& cfg) {
  std::vector<PatientPrediction> out;
  out.reserve(scans.size());
  for (const auto& s : scans) out.push_back(enhance::ensemble_predict(ensemble, s, target, cfg).patient);
  return out;
}

std::vector<PatientPrediction> patients(const std::vector<pipeline::PatientResult>& results) {
  std::vector<PatientPrediction> out;
  out.reserve(results.size());
  for (const auto& r : results) out.push_back(r.patient);
  return out;
}

ExperimentRun run_experiment(const ExperimentConfig& cfg, bool with_enhancement) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  auto data = prepare_data(cfg);
  auto b = train_benchmark(cfg, data);
  auto validation = predict_scans(*b.stage1, b.stage2, data.validation, cfg.pipeline);
  std::map<SetId, std::vector<pipeline::PatientResult>> bench_results;
  for (const auto& [set, scans] : data.tests) bench_results[set] = predict_scans(*b.stage1, b.stage2, scans, cfg.pipeline);
  const double bench_seconds = elapsed();

  std::map<SetId, std::vector<VolumetricScan>> unlabeled;
  if (with_enhancement) {
    for (auto set : cfg.enhance_sets) {
      const auto it = data.tests.find(set);
      if (it != data.tests.end()) unlabeled[set] = it->second;
    }
  }
  const auto stage1_before = b.stage1->net.state_vector();
  auto round = enhance::enhancement_round(b.stage1, b.stage2, b.stage2_train, unlabeled, cfg.pipeline,
                                          cfg.enhancement, Seeds::from(cfg.seed).enhancement);
  std::map<SetId, std::vector<PatientPrediction>> ensemble;
  for (const auto& [set, scans] : data.tests) ensemble[set] = ensemble_predict_set(round.ensemble, scans, set, cfg.pipeline);

  ExperimentRun run{std::move(data),      std::move(b),        std::move(validation), std::move(bench_results),
                    std::move(round),     std::move(ensemble), bench_seconds,         0.0,
                    false};
  run.stage1_unchanged = run.bench.stage1->net.state_vector() == stage1_before;
  run.total_seconds = elapsed();
  return run;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

void write_artifacts(const ExperimentRun& run, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const auto hash = config_hash(cfg);
  const auto seeds = Seeds::from(cfg.seed);
  write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");

  const auto ckpt = dir / "checkpoints";
  save_checkpoint(run.bench.stage1->net, {"stage1", seeds.stage1_train, cfg.pipeline.stage1_epochs, hash, {}},
                  ckpt / "stage1.ckpt");
  save_checkpoint(run.bench.stage2.net, {"stage2", seeds.stage2_train, cfg.pipeline.stage2_epochs, hash, {}},
                  ckpt / "stage2.ckpt");
  for (const auto& s : run.enhancement.report.sets) {
    const std::string name(data::to_string(s.set_id));
    save_checkpoint(run.enhancement.ensemble.members.at(s.set_id).net,
                    {"enhanced:" + name, s.seed, cfg.enhancement.epochs, hash, {{"empty_confident_set", s.empty}}},
                    ckpt / ("enhanced_" + name + ".ckpt"));
  }

  std::vector<pipeline::PatientResult> bench_all = run.validation_results;
  std::vector<PatientPrediction> bench_tests, ens_tests;
  std::vector<pipeline::PatientResult> ens_all;
  for (const auto& [set, results] : run.bench_results) {
    bench_all.insert(bench_all.end(), results.begin(), results.end());
    for (const auto& r : results) bench_tests.push_back(r.patient);
  }
  for (const auto& [set, preds] : run.ensemble_predictions) {
    for (const auto& p : preds) {
      ens_all.push_back({p, {}});
      ens_tests.push_back(p);
    }
  }
  pipeline::write_prediction_log(dir / "predictions" / "benchmark.ndjson", bench_all);
  pipeline::write_prediction_log(dir / "predictions" / "ensemble.ndjson", ens_all);

  const auto reports = dir / "reports";
  if (!run.validation_results.empty()) {
    write_text(reports / "validation.json",
               to_json(build_report("benchmark", patients(run.validation_results))).dump(2) + "\n");
  }
  if (!bench_tests.empty()) {
    write_text(reports / "benchmark.json", to_json(build_report("benchmark", bench_tests)).dump(2) + "\n");
    write_text(reports / "ensemble.json",
               to_json(build_report("ensemble", ens_tests, {{"benchmark", bench_tests}})).dump(2) + "\n");
  }
  write_text(reports / "enhancement_round.json", enhance::to_json(run.enhancement.report).dump(2) + "\n");
}

}  // namespace capsct::eval
