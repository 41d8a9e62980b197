#include "capsct/enhance/enhance.hpp"

#include <algorithm>
#include <stdexcept>

#include "capsct/ad/rng.hpp"

namespace capsct::enhance {

using nlohmann::json;

std::array<std::size_t, 3> ConfidentSet::class_counts() const {
  std::array<std::size_t, 3> c{};
  for (const auto& e : entries) ++c[data::index(e.label)];
  return c;
}

void ConfidentSet::add_patient(std::vector<ConfidentEntry> patient_entries, bool count_without_entries) {
  if (patient_entries.empty() && !count_without_entries) return;
  ++patient_count;
  for (auto& e : patient_entries) entries.push_back(std::move(e));
}

std::vector<std::string> select_confident_patients(const std::vector<PatientPrediction>& predictions, double tau) {
  std::vector<std::string> out;
  for (const auto& p : predictions) {
    if (p.normal_filtered) continue;
    if (*std::max_element(p.prob.begin(), p.prob.end()) >= tau) out.push_back(p.scan_id);
  }
  return out;
}

namespace {

ConfidentEntry make_entry(const VolumetricScan& scan, int k, ClassLabel label, double probability) {
  const auto sl = scan.slice(static_cast<std::size_t>(k));
  return {std::vector<float>(sl.begin(), sl.end()), label, scan.meta.scan_id, k, probability};
}

void check_pair(const PatientResult& result, const VolumetricScan& scan) {
  if (result.patient.scan_id != scan.meta.scan_id || result.slices.size() != scan.n_slices) {
    throw std::invalid_argument("prediction for " + result.patient.scan_id + " does not match scan " +
                                scan.meta.scan_id);
  }
}

}  // namespace

std::vector<ConfidentEntry> select_confident_slices(const PatientResult& result, const VolumetricScan& scan,
                                                    ClassLabel patient_label, double tau) {
  check_pair(result, scan);
  std::vector<ConfidentEntry> out;
  const int c = data::index(patient_label);
  for (const auto& sp : result.slices) {
    if (!sp.class_lengths || sp.class_argmax != patient_label) continue;
    const double length = (*sp.class_lengths)[c];
    if (length >= tau) out.push_back(make_entry(scan, sp.slice_index, patient_label, length));
  }
  return out;
}

std::vector<ConfidentEntry> normal_slice_rule(const PatientResult& result, const VolumetricScan& scan, double tau) {
  check_pair(result, scan);
  if (!result.patient.normal_filtered) {
    throw std::invalid_argument("normal_slice_rule: scan " + scan.meta.scan_id + " was not normal-filtered");
  }
  std::vector<ConfidentEntry> out;
  for (const auto& sp : result.slices) {
    if (sp.infection_prob >= tau) out.push_back(make_entry(scan, sp.slice_index, ClassLabel::Normal, sp.infection_prob));
  }
  return out;
}

ConfidentSet extract_confident(SetId set_id, const std::vector<PatientResult>& results,
                               const std::vector<VolumetricScan>& scans, double tau) {
  if (results.size() != scans.size()) throw std::invalid_argument("extract_confident: results/scans length mismatch");
  ConfidentSet set;
  set.source_set_id = set_id;
  std::vector<PatientPrediction> preds;
  for (const auto& r : results) preds.push_back(r.patient);
  const auto chosen = select_confident_patients(preds, tau);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (r.patient.normal_filtered) {
      set.add_patient(normal_slice_rule(r, scans[i], tau));
    } else if (std::find(chosen.begin(), chosen.end(), r.patient.scan_id) != chosen.end()) {
      set.add_patient(select_confident_slices(r, scans[i], r.patient.label, tau), true);
    }
  }
  return set;
}

RetrainResult retrain_enhanced(const pipeline::Stage2Model& benchmark, const pipeline::SliceSet& train,
                               const ConfidentSet& confident, const pipeline::PipelineConfig& cfg, std::uint64_t seed,
                               int epochs) {
  RetrainResult out{benchmark, confident.empty(), {}};
  if (confident.empty()) return out;
  pipeline::SliceSet augmented = train;
  for (const auto& e : confident.entries) augmented.add(e.image, data::index(e.label), e.scan_id, e.slice_index);
  out.history = pipeline::train_stage2(out.model, augmented, cfg, seed, epochs);
  return out;
}

std::vector<SetId> EnhancedEnsemble::members_for(SetId target) const {
  std::vector<SetId> out;
  for (const auto& [id, model] : members) {
    if (id != target) out.push_back(id);
  }
  return out;
}

std::array<double, 3> mean_probability(const std::vector<std::array<double, 3>>& member_prob) {
  if (member_prob.empty()) throw std::invalid_argument("mean_probability: no members");
  std::array<double, 3> mean{};
  for (const auto& p : member_prob) {
    for (int c = 0; c < 3; ++c) mean[c] += p[c];
  }
  for (auto& v : mean) v /= static_cast<double>(member_prob.size());
  return mean;
}

EnsemblePrediction ensemble_predict(EnhancedEnsemble& ensemble, const VolumetricScan& scan, SetId target,
                                    const pipeline::PipelineConfig& cfg) {
  if (!ensemble.stage1) throw std::invalid_argument("ensemble_predict: ensemble has no stage-1 model");
  const auto stage1 = pipeline::select_infected_slices(*ensemble.stage1, scan, cfg);
  EnsemblePrediction out;
  if (ensemble.members.empty()) {
    out.patient = pipeline::classify_with_stage1(stage1, ensemble.benchmark, scan, cfg).patient;
    out.member_prob.push_back(out.patient.prob);
    return out;
  }
  out.members = ensemble.members_for(target);
  if (out.members.empty()) {
    throw std::invalid_argument("ensemble_predict: excluding " + std::string(data::to_string(target)) +
                                " leaves no enhanced model");
  }
  for (SetId id : out.members) {
    auto r = pipeline::classify_with_stage1(stage1, ensemble.members.at(id), scan, cfg);
    if (out.member_prob.empty()) out.patient = r.patient;
    out.member_prob.push_back(r.patient.prob);
  }
  // Counts are per member and have no ensemble meaning.
  out.patient.counts = {};
  out.patient.prob = mean_probability(out.member_prob);
  out.patient.label = pipeline::argmax_with_ties(out.patient.prob);
  return out;
}

json to_json(const RoundReport& report) {
  json sets = json::array();
  for (const auto& s : report.sets) {
    sets.push_back({{"set_id", data::to_string(s.set_id)},
                    {"scans", s.scans},
                    {"confident_patients", s.confident_patients},
                    {"confident_slices",
                     {{"COVID-19", s.slice_counts[0]}, {"CAP", s.slice_counts[1]}, {"Normal", s.slice_counts[2]}}},
                    {"empty", s.empty},
                    {"seed", s.seed},
                    {"epoch_loss", s.epoch_loss}});
  }
  return {{"tau", report.tau}, {"epochs", report.epochs}, {"seed", report.seed}, {"sets", sets}};
}

RoundResult enhancement_round(std::shared_ptr<pipeline::Stage1Model> stage1, const pipeline::Stage2Model& benchmark,
                              const pipeline::SliceSet& stage2_train,
                              const std::map<SetId, std::vector<VolumetricScan>>& test_sets,
                              const pipeline::PipelineConfig& cfg, const EnhanceConfig& ecfg, std::uint64_t seed) {
  if (!stage1) throw std::invalid_argument("enhancement_round: no stage-1 model");
  RoundResult out{{stage1, benchmark, {}}, {ecfg.tau, ecfg.epochs, seed, {}}};
  auto bench = benchmark;
  for (const auto& [set_id, scans] : test_sets) {
    const std::string where = "enhancement on " + std::string(data::to_string(set_id)) + ": ";
    try {
      std::vector<PatientResult> results;
      results.reserve(scans.size());
      for (const auto& scan : scans) results.push_back(pipeline::classify_patient(*stage1, bench, scan, cfg));
      const auto confident = extract_confident(set_id, results, scans, ecfg.tau);
      const std::uint64_t member_seed = Rng::mix(seed, static_cast<std::uint64_t>(set_id) + 1);
      auto retrained = retrain_enhanced(benchmark, stage2_train, confident, cfg, member_seed, ecfg.epochs);
      out.report.sets.push_back({set_id, scans.size(), confident.patient_count, confident.class_counts(),
                                 retrained.empty_confident_set, member_seed, retrained.history.epoch_loss});
      out.ensemble.members.emplace(set_id, std::move(retrained.model));
    } catch (const std::exception& e) {
      throw std::runtime_error(where + e.what());
    }
  }
  return out;
}

}  // namespace capsct::enhance
