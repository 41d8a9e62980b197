#include "capsct/eval/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "capsct/data/scan_io.hpp"
#include "capsct/eval/checkpoint.hpp"
#include "capsct/eval/experiment.hpp"

namespace capsct::eval {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config, out, bench, ens, report, target;
  std::vector<std::string> data, tests;
  int stage = 0;
  std::optional<std::uint64_t> seed;
};

ExperimentConfig config_for(const Options& o) {
  auto cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

// A path is either a corpus root (scan directories directly below) or a
// directory of corpus roots, as written by gen-data.
std::vector<VolumetricScan> load_scans(const std::vector<std::string>& paths) {
  std::vector<VolumetricScan> out;
  for (const auto& p : paths) {
    auto direct = data::load_corpus(p);
    if (direct.empty()) {
      std::vector<fs::path> subs;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_directory()) subs.push_back(e.path());
      }
      std::sort(subs.begin(), subs.end());
      for (const auto& s : subs) {
        auto part = data::load_corpus(s);
        direct.insert(direct.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
      }
    }
    if (direct.empty()) throw FormatError("no scans found under " + p);
    out.insert(out.end(), std::make_move_iterator(direct.begin()), std::make_move_iterator(direct.end()));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.meta.scan_id < b.meta.scan_id; });
  return out;
}

std::string lower(std::string_view s) {
  std::string r(s);
  for (auto& c : r) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return r;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

pipeline::CapsNet<float> load_net(const fs::path& path, const ExperimentConfig& cfg, const pipeline::ArchConfig& arch,
                        std::ostream& err) {
  auto loaded = load_checkpoint(path, config_hash(cfg));
  for (const auto& w : loaded.warnings) err << "warning: " << path.string() << ": " << w << "\n";
  if (!(loaded.net.arch() == arch)) throw FormatError(path.string() + ": architecture does not match the config");
  return std::move(loaded.net);
}

struct BenchmarkModels {
  std::shared_ptr<pipeline::Stage1Model> stage1;
  pipeline::Stage2Model stage2;
};

BenchmarkModels load_benchmark(const fs::path& dir, const ExperimentConfig& cfg, std::ostream& err) {
  return {std::make_shared<pipeline::Stage1Model>(
              pipeline::Stage1Model{load_net(dir / "stage1.ckpt", cfg, cfg.pipeline.stage1_arch(), err)}),
          pipeline::Stage2Model{load_net(dir / "stage2.ckpt", cfg, cfg.pipeline.stage2_arch(), err)}};
}

// TRAIN scans split as in the experiment; everything else grouped by set.
ExperimentData data_from(const Options& o, const ExperimentConfig& cfg) {
  std::vector<std::string> paths = o.data;
  paths.insert(paths.end(), o.tests.begin(), o.tests.end());
  if (paths.empty()) throw ConfigError("--data or --tests is required");
  return prepare_data(cfg, load_scans(paths));
}

int gen_data(const Options& o, std::ostream& out) {
  const auto cfg = config_for(o);
  std::map<SetId, std::vector<VolumetricScan>> by_set;
  for (auto& s : data::generate_corpus(cfg.corpus, cfg.seed, cfg.image_size)) by_set[s.meta.set_id].push_back(std::move(s));
  for (const auto& [set, scans] : by_set) {
    data::save_corpus(scans, fs::path(o.out) / lower(data::to_string(set)));
    out << data::to_string(set) << ": " << scans.size() << " scans\n";
  }
  return 0;
}

int train(const Options& o, std::ostream& out, std::ostream& err) {
  const auto cfg = config_for(o);
  const auto d = data_from(o, cfg);
  if (d.train.empty()) throw ConfigError("train: no TRAIN scans in --data");
  const fs::path dir = o.out;
  const auto hash = config_hash(cfg);
  const auto seeds = Seeds::from(cfg.seed);
  if (o.stage == 1) {
    pipeline::TrainHistory h;
    const auto m = train_stage1_model(cfg, d.train, &h);
    save_checkpoint(m.net, {"stage1", seeds.stage1_train, cfg.pipeline.stage1_epochs, hash, {{"epoch_loss", h.epoch_loss}}},
                    dir / "stage1.ckpt");
    out << "stage1: " << h.epoch_loss.size() << " epochs, final loss " << (h.epoch_loss.empty() ? 0.0 : h.epoch_loss.back())
        << "\n";
    return 0;
  }
  const fs::path from = o.bench.empty() ? dir : fs::path(o.bench);
  auto stage1 = std::make_shared<pipeline::Stage1Model>(
      pipeline::Stage1Model{load_net(from / "stage1.ckpt", cfg, cfg.pipeline.stage1_arch(), err)});
  const auto b = train_stage2_model(cfg, stage1, d.train);
  save_checkpoint(b.stage2.net,
                  {"stage2", seeds.stage2_train, cfg.pipeline.stage2_epochs, hash, {{"epoch_loss", b.stage2_history.epoch_loss}}},
                  dir / "stage2.ckpt");
  if (from != dir) save_checkpoint(stage1->net, {"stage1", seeds.stage1_train, cfg.pipeline.stage1_epochs, hash, {}},
                                   dir / "stage1.ckpt");
  const auto c = b.stage2_train.label_counts();
  out << "stage2: " << b.stage2_train.size() << " slices (" << c[0] << "/" << c[1] << "/" << c[2] << "), "
      << b.stage2_history.epoch_loss.size() << " epochs\n";
  return 0;
}

int infer(const Options& o, std::ostream& out, std::ostream& err) {
  const auto cfg = config_for(o);
  auto m = load_benchmark(o.bench, cfg, err);
  const auto d = data_from(o, cfg);
  auto results = predict_scans(*m.stage1, m.stage2, d.validation, cfg.pipeline);
  for (const auto& [set, scans] : d.tests) {
    auto r = predict_scans(*m.stage1, m.stage2, scans, cfg.pipeline);
    results.insert(results.end(), r.begin(), r.end());
  }
  pipeline::write_prediction_log(o.out, results);
  out << results.size() << " predictions -> " << o.out << "\n";
  return 0;
}

int enhance_cmd(const Options& o, std::ostream& out, std::ostream& err) {
  const auto cfg = config_for(o);
  auto m = load_benchmark(o.bench, cfg, err);
  if (o.data.empty()) throw ConfigError("enhance: --data with the TRAIN corpus is required");
  if (o.tests.empty()) throw ConfigError("enhance: --tests is required");
  const auto train_data = prepare_data(cfg, load_scans(o.data));
  if (train_data.train.empty()) throw ConfigError("enhance: no TRAIN scans in --data");
  const auto test_data = prepare_data(cfg, load_scans(o.tests));

  const auto stage2_train = pipeline::stage2_training_set(*m.stage1, train_data.train, cfg.pipeline);
  const auto round = enhance::enhancement_round(m.stage1, m.stage2, stage2_train, test_data.tests, cfg.pipeline,
                                                cfg.enhancement, Seeds::from(cfg.seed).enhancement);
  const fs::path dir = o.out;
  const auto hash = config_hash(cfg);
  const auto seeds = Seeds::from(cfg.seed);
  save_checkpoint(m.stage1->net, {"stage1", seeds.stage1_train, cfg.pipeline.stage1_epochs, hash, {}}, dir / "stage1.ckpt");
  save_checkpoint(m.stage2.net, {"stage2", seeds.stage2_train, cfg.pipeline.stage2_epochs, hash, {}}, dir / "stage2.ckpt");
  for (const auto& s : round.report.sets) {
    const std::string name(data::to_string(s.set_id));
    save_checkpoint(round.ensemble.members.at(s.set_id).net,
                    {"enhanced:" + name, s.seed, cfg.enhancement.epochs, hash, {{"empty_confident_set", s.empty}}},
                    dir / ("enhanced_" + name + ".ckpt"));
    out << name << ": " << s.confident_patients << " confident patients, slices " << s.slice_counts[0] << "/"
        << s.slice_counts[1] << "/" << s.slice_counts[2] << (s.empty ? " (empty, benchmark kept)" : "") << "\n";
  }
  write_json(dir / "enhancement_round.json", enhance::to_json(round.report));
  return 0;
}

enhance::EnhancedEnsemble load_ensemble(const fs::path& dir, const ExperimentConfig& cfg, std::ostream& err) {
  auto m = load_benchmark(dir, cfg, err);
  enhance::EnhancedEnsemble e{m.stage1, m.stage2, {}};
  for (auto set : data::kAllSets) {
    const auto p = dir / ("enhanced_" + std::string(data::to_string(set)) + ".ckpt");
    if (fs::exists(p)) e.members.emplace(set, pipeline::Stage2Model{load_net(p, cfg, cfg.pipeline.stage2_arch(), err)});
  }
  return e;
}

int evaluate(const Options& o, std::ostream& out, std::ostream& err) {
  const auto cfg = config_for(o);
  if (o.ens.empty() && o.bench.empty()) throw ConfigError("evaluate: --ens or --bench is required");
  if (o.report.empty()) throw ConfigError("evaluate: --report is required");
  auto ens = load_ensemble(o.ens.empty() ? o.bench : o.ens, cfg, err);
  if (o.ens.empty()) ens.members.clear();
  const auto d = data_from(o, cfg);

  std::optional<SetId> target;
  if (!o.target.empty()) target = data::parse_set(o.target);
  std::vector<PatientPrediction> system, bench;
  std::vector<pipeline::PatientResult> log;
  for (const auto& [set, scans] : d.tests) {
    if (target && set != *target) continue;
    for (auto& p : ensemble_predict_set(ens, scans, set, cfg.pipeline)) {
      log.push_back({p, {}});
      system.push_back(std::move(p));
    }
    if (!o.ens.empty()) {
      auto b = patients(predict_scans(*ens.stage1, ens.benchmark, scans, cfg.pipeline));
      bench.insert(bench.end(), b.begin(), b.end());
    }
  }
  if (system.empty()) throw ConfigError("evaluate: no scans for the requested target");
  std::map<std::string, std::vector<PatientPrediction>> baselines;
  if (!bench.empty()) baselines["benchmark"] = bench;
  const auto r = build_report(o.ens.empty() ? "benchmark" : "ensemble", system, baselines);
  write_json(o.report, to_json(r));
  if (!o.out.empty()) pipeline::write_prediction_log(o.out, log);
  out << r.system << " accuracy " << r.total.accuracy.successes << "/" << r.total.accuracy.trials << "\n";
  return 0;
}

int report(const Options& o, std::ostream& out) {
  if (o.data.empty() || o.report.empty()) throw ConfigError("report: --data <log.ndjson> and --report are required");
  std::vector<PatientPrediction> system;
  for (const auto& p : o.data) {
    auto r = patients(pipeline::read_prediction_log(p));
    system.insert(system.end(), r.begin(), r.end());
  }
  std::map<std::string, std::vector<PatientPrediction>> baselines;
  if (!o.bench.empty()) baselines["benchmark"] = patients(pipeline::read_prediction_log(o.bench));
  const auto r = build_report("system", system, baselines);
  write_json(o.report, to_json(r));
  out << "accuracy " << r.total.accuracy.successes << "/" << r.total.accuracy.trials << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stage capsule network pipeline for volumetric CT classification", "capsct"};
  app.require_subcommand(1, 1);
  Options o;
  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "override the config seed");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_config(gen);
  gen->add_option("--out", o.out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train stage 1 or stage 2");
  add_config(tr);
  tr->add_option("--stage", o.stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  tr->add_option("--data", o.data, "corpus directories")->required();
  tr->add_option("--out", o.out, "checkpoint directory")->required();
  tr->add_option("--bench", o.bench, "directory holding stage1.ckpt (stage 2; default --out)");

  auto* inf = app.add_subcommand("infer", "benchmark predictions for validation and test scans");
  add_config(inf);
  inf->add_option("--bench", o.bench, "checkpoint directory")->required();
  inf->add_option("--data", o.data, "corpus directories")->required();
  inf->add_option("--tests", o.tests, "more corpus directories");
  inf->add_option("--out", o.out, "prediction log (NDJSON)")->required();

  auto* enh = app.add_subcommand("enhance", "one enhancement round over the given test sets");
  add_config(enh);
  enh->add_option("--bench", o.bench, "benchmark checkpoint directory")->required();
  enh->add_option("--data", o.data, "corpus with the TRAIN scans")->required();
  enh->add_option("--tests", o.tests, "unlabeled test corpora")->required();
  enh->add_option("--out", o.out, "ensemble directory")->required();

  auto* ev = app.add_subcommand("evaluate", "ensemble (or benchmark) EvalReport");
  add_config(ev);
  ev->add_option("--ens", o.ens, "ensemble directory");
  ev->add_option("--bench", o.bench, "benchmark checkpoint directory, when no --ens");
  ev->add_option("--data", o.data, "corpus directories");
  ev->add_option("--tests", o.tests, "more corpus directories");
  ev->add_option("--target", o.target, "evaluate one set only");
  ev->add_option("--report", o.report, "report path (JSON)");
  ev->add_option("--out", o.out, "prediction log (NDJSON)");

  auto* rep = app.add_subcommand("report", "EvalReport from prediction logs");
  rep->add_option("--data", o.data, "prediction logs")->required();
  rep->add_option("--bench", o.bench, "baseline prediction log for McNemar");
  rep->add_option("--report", o.report, "report path (JSON)")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "capsct: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) return gen_data(o, out);
    if (tr->parsed()) return train(o, out, err);
    if (inf->parsed()) return infer(o, out, err);
    if (enh->parsed()) return enhance_cmd(o, out, err);
    if (ev->parsed()) return evaluate(o, out, err);
    return report(o, out);
  } catch (const std::exception& e) {
    err << "capsct: error: " << e.what() << "\n";
    return 1;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace capsct::eval
