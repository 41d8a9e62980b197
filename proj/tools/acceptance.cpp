// One PASS/FAIL line per acceptance criterion; progress goes to stderr.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "capsct/eval/experiment.hpp"
#include "capsct/eval/stats.hpp"
#include "property_sweeps.hpp"

using namespace capsct;
using namespace capsct::eval;
namespace fs = std::filesystem;

namespace {

// pinned tolerances
constexpr double kCiTol = 5e-3;
constexpr double kMcNemarTol = 1e-5;
constexpr double kStatSeconds = 1.0;
constexpr double kGradTol = 1e-4;
constexpr int kGradSeeds = 50;
constexpr std::size_t kInvariantInstances = 1000;
constexpr int kAucInstances = 11000;  // 1000 per scan count 2..12
constexpr double kAucTol = 1e-12;
constexpr int kEq2Vectors = 1000;
constexpr double kMinAccuracy = 0.90;
constexpr double kMinNormalFiltered = 0.90;
constexpr double kMaxSeconds = 20 * 60;
constexpr int kMinStrictImprovements = 3;

int failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void statistics() {
  struct Ci { std::size_t k, n; double lo, hi; };
  bool pass = true;
  double slowest = 0;
  std::ostringstream d;
  for (const Ci& c : {Ci{125, 130, 0.9125, 0.9874}, Ci{49, 51, 0.8654, 0.9950}, Ci{26, 28, 0.7650, 0.9919},
                      Ci{50, 51, 0.8955, 0.9995}}) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto [lo, hi] = exact_binomial_ci(c.k, c.n);
    slowest = std::max(slowest, seconds_since(t0));
    pass &= std::abs(lo - c.lo) <= kCiTol && std::abs(hi - c.hi) <= kCiTol;
    d << fmt("%zu/%zu=[%.4f,%.4f] ", c.k, c.n, lo, hi);
  }
  auto t0 = std::chrono::steady_clock::now();
  const double p30 = mcnemar_exact(3, 0), p412 = mcnemar_exact(4, 12);
  slowest = std::max(slowest, seconds_since(t0));
  pass &= p30 == 0.25 && std::abs(p412 - 0.07681) <= kMcNemarTol && slowest < kStatSeconds;
  d << fmt("mcnemar(3,0)=%.5f mcnemar(4,12)=%.5f slowest %.2g s", p30, p412, slowest);
  report("statistics", pass, d.str());
}

void numerical_core() {
  double worst = 0;
  std::string worst_op;
  std::size_t checked = 0;
  for (int seed = 1; seed <= kGradSeeds; ++seed) {
    const auto r = testing::gradcheck_sweep(static_cast<std::uint64_t>(seed));
    checked += r.checked;
    if (r.worst > worst) {
      worst = r.worst;
      worst_op = r.worst_op;
    }
  }
  const auto sq = testing::squash_violations(kInvariantInstances, 1001);
  const auto rt = testing::routing_violations(kInvariantInstances, 1002);
  report("numerical-core", worst < kGradTol && sq == 0 && rt == 0,
         fmt("gradcheck %d seeds, %zu elements, max rel error %.2e (%s); squash violations %zu, routing violations %zu "
             "over %zu instances each",
             kGradSeeds, checked, worst, worst_op.c_str(), sq, rt, kInvariantInstances));
}

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& pos) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (pos[i] && !pos[j]) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
  }
  return wins / pairs;
}

void oracle_equivalence() {
  Rng rng(77);
  double worst = 0;
  int instances = 0;
  for (int t = 0; t < kAucInstances; ++t) {
    const std::size_t n = 2 + static_cast<std::size_t>(t % 11);
    std::vector<std::array<double, 3>> P(n);
    std::vector<data::ClassLabel> y(n);
    const int grid = 1 + static_cast<int>(rng.below(8));
    for (std::size_t i = 0; i < n; ++i) {
      std::array<int, 3> c{};
      for (auto& v : c) v = static_cast<int>(rng.below(grid + 1));
      if (c[0] + c[1] + c[2] == 0) c[rng.below(3)] = 1;
      P[i] = pipeline::patient_probabilities(c);
      y[i] = data::kAllClasses[rng.below(3)];
    }
    const std::set<data::ClassLabel> present(y.begin(), y.end());
    if (present.size() < 2) continue;
    ++instances;
    std::vector<double> s;
    std::vector<int> pos;
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) {
        s.push_back(P[i][c]);
        pos.push_back(data::index(y[i]) == c);
      }
    }
    worst = std::max(worst, std::abs(roc_micro_auc(P, y).auc - pairwise_auc(s, pos)));
    for (auto cls : present) {
      std::vector<double> sc;
      std::vector<int> pc;
      for (std::size_t i = 0; i < n; ++i) {
        sc.push_back(P[i][data::index(cls)]);
        pc.push_back(y[i] == cls);
      }
      worst = std::max(worst, std::abs(onevsrest_auc(P, y, cls) - pairwise_auc(sc, pc)));
    }
  }
  int eq2_bad = 0;
  for (int t = 0; t < kEq2Vectors; ++t) {
    std::array<int, 3> c{};
    for (auto& v : c) v = static_cast<int>(rng.below(400));
    if (c[0] + c[1] + c[2] == 0) c[0] = 1;
    const auto p = pipeline::patient_probabilities(c);
    const double total = c[0] + c[1] + c[2];
    for (int k = 0; k < 3; ++k) eq2_bad += p[k] != static_cast<double>(c[k]) / total;  // correctly rounded n_k/N
  }
  report("oracle-equivalence", worst <= kAucTol && eq2_bad == 0,
         fmt("AUC vs pairwise oracle on %d instances (2-12 scans): max |diff| %.1e; count-ratio mismatches %d/%d", instances,
             worst, eq2_bad, kEq2Vectors));
}

ExperimentConfig config_for(std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  return cfg;
}

struct SeedOutcome {
  std::uint64_t seed;
  std::size_t n = 0, bench_correct = 0, ens_correct = 0;
  bool stage1_unchanged = false, self_excluded = true;
};

SeedOutcome enhancement_outcome(const ExperimentRun& run, std::uint64_t seed) {
  SeedOutcome o{seed};
  o.stage1_unchanged = run.stage1_unchanged;
  for (auto set : {data::SetId::Test1, data::SetId::Test2, data::SetId::Test4}) {
    const auto members = run.enhancement.ensemble.members_for(set);
    o.self_excluded &= std::find(members.begin(), members.end(), set) == members.end();
    const auto& b = run.bench_results.at(set);
    const auto& e = run.ensemble_predictions.at(set);
    for (std::size_t i = 0; i < b.size(); ++i) {
      o.self_excluded &= e[i].scan_id == b[i].patient.scan_id;
      o.bench_correct += b[i].patient.label == b[i].patient.true_class;
      o.ens_correct += e[i].label == e[i].true_class;
      ++o.n;
    }
  }
  return o;
}

void end_to_end(const ExperimentRun& run, std::uint64_t seed) {
  std::vector<PatientPrediction> held_out = patients(run.validation_results);
  for (const auto& r : run.bench_results.at(data::SetId::Test3)) held_out.push_back(r.patient);
  std::size_t correct = 0, normals = 0, filtered = 0, misfiled = 0;
  for (const auto& p : held_out) {
    correct += p.label == p.true_class;
    if (p.true_class == data::ClassLabel::Normal) {
      ++normals;
      filtered += p.normal_filtered;
    } else {
      misfiled += p.normal_filtered;
    }
  }
  const double acc = double(correct) / double(held_out.size()), fr = double(filtered) / double(normals);
  report("end-to-end", acc >= kMinAccuracy && fr >= kMinNormalFiltered && misfiled == 0 && run.total_seconds < kMaxSeconds,
         fmt("seed %llu, validation+TEST3 accuracy %zu/%zu = %.3f; Normal filtered %zu/%zu = %.3f; infected misfiled "
             "%zu; benchmark %.0f s, full run %.0f s",
             (unsigned long long)seed, correct, held_out.size(), acc, filtered, normals, fr,
             misfiled, run.benchmark_seconds, run.total_seconds));
}

std::map<std::string, std::string> files_under(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), dir).string()] = ss.str();
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks", "capsct_acceptance"};
  int seeds = 5;
  std::string out = (fs::temp_directory_path() / "capsct_acceptance").string();
  bool fast_only = false;
  app.add_option("--seeds", seeds, "enhancement seeds")->check(CLI::Range(1, 100));
  app.add_option("--out", out, "artifact directory");
  app.add_flag("--fast-only", fast_only, "skip the training criteria");
  CLI11_PARSE(app, argc, argv);

  statistics();
  numerical_core();
  oracle_equivalence();
  if (fast_only) return failures == 0 ? 0 : 1;

  fs::remove_all(out);
  std::vector<SeedOutcome> outcomes;
  for (int s = 1; s <= seeds; ++s) {
    const auto cfg = config_for(static_cast<std::uint64_t>(s));
    std::cerr << "training seed " << s << "..." << std::endl;
    const auto run = run_experiment(cfg);
    if (s == 1) {
      end_to_end(run, cfg.seed);
      write_artifacts(run, cfg, fs::path(out) / "run_a");
    }
    outcomes.push_back(enhancement_outcome(run, cfg.seed));
    const auto& o = outcomes.back();
    std::cerr << fmt("  seed %d: benchmark %zu/%zu, ensemble %zu/%zu, %.0f s", s, o.bench_correct, o.n, o.ens_correct,
                     o.n, run.total_seconds)
              << std::endl;
  }

  double bench_mean = 0, ens_mean = 0, one_patient = 0;
  int strict = 0;
  bool asserted = true;
  std::ostringstream per_seed;
  for (const auto& o : outcomes) {
    bench_mean += double(o.bench_correct) / double(o.n) / double(outcomes.size());
    ens_mean += double(o.ens_correct) / double(o.n) / double(outcomes.size());
    one_patient = std::max(one_patient, 1.0 / double(o.n));
    strict += o.ens_correct > o.bench_correct;
    asserted &= o.stage1_unchanged && o.self_excluded;
    per_seed << fmt(" %llu:%zu->%zu", (unsigned long long)o.seed, o.bench_correct, o.ens_correct);
  }
  const int need = std::min(kMinStrictImprovements, static_cast<int>(outcomes.size()));
  report("enhancement",
         ens_mean >= bench_mean - one_patient && strict >= need && asserted && outcomes.size() >= 5,
         fmt("TEST1+TEST2+TEST4 over %zu seeds: benchmark mean %.4f, ensemble mean %.4f (allowance %.4f); strict "
             "improvements %d (need %d); stage-1 unchanged and self-exclusion %s; per seed correct%s",
             outcomes.size(), bench_mean, ens_mean, one_patient, strict, need, asserted ? "held" : "VIOLATED",
             per_seed.str().c_str()));

  std::cerr << "repeating seed 1..." << std::endl;
  const auto cfg = config_for(1);
  write_artifacts(run_experiment(cfg), cfg, fs::path(out) / "run_b");
  const auto a = files_under(fs::path(out) / "run_a"), b = files_under(fs::path(out) / "run_b");
  std::size_t differing = 0;
  for (const auto& [name, bytes] : a) differing += !b.count(name) || b.at(name) != bytes;
  report("determinism", differing == 0 && a.size() == b.size() && !a.empty(),
         fmt("%zu artifact files (checkpoints, prediction logs, reports) compared, %zu differ", a.size(), differing));
  return failures == 0 ? 0 : 1;
}
