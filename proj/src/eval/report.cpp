#include "capsct/eval/report.hpp"

#include <stdexcept>

namespace capsct::eval {

using nlohmann::json;

Interval with_ci(const Proportion& p, double level) {
  const auto [lo, hi] = exact_binomial_ci(p.successes, p.trials, level);
  return {p.value(), lo, hi, p.successes, p.trials};
}

SetMetrics set_metrics(const std::string& name, const std::vector<PatientPrediction>& preds) {
  if (preds.empty()) throw std::invalid_argument("set_metrics: no predictions for " + name);
  SetMetrics m;
  m.name = name;
  std::vector<std::array<double, 3>> prob;
  std::vector<ClassLabel> labels;
  for (const auto& p : preds) {
    m.table.add(p.true_class, p.label);
    prob.push_back(p.prob);
    labels.push_back(p.true_class);
  }
  const auto as = accuracy_and_sensitivity(m.table);
  m.accuracy = with_ci(as.accuracy);
  for (int c = 0; c < 3; ++c) {
    if (as.sensitivity[c]) m.sensitivity[c] = with_ci(*as.sensitivity[c]);
  }
  std::size_t present = 0;
  for (auto c : data::kAllClasses) {
    const std::size_t n = m.table.row_total(c);
    present += n > 0;
    if (n > 0 && n < preds.size()) m.onevsrest_auc[data::index(c)] = onevsrest_auc(prob, labels, c);
  }
  if (present >= 2) m.micro_roc = roc_micro_auc(prob, labels);
  return m;
}

namespace {

std::map<std::string, std::vector<PatientPrediction>> by_set(const std::vector<PatientPrediction>& preds) {
  std::map<std::string, std::vector<PatientPrediction>> out;
  for (const auto& p : preds) out[std::string(data::to_string(p.set_id))].push_back(p);
  return out;
}

McNemarComparison compare(const std::string& baseline, const std::string& set,
                          const std::vector<PatientPrediction>& system, const std::vector<PatientPrediction>& base) {
  std::map<std::string, const PatientPrediction*> index;
  for (const auto& p : base) index[p.scan_id] = &p;
  McNemarComparison c{baseline, set, 0, 0, 1.0};
  for (const auto& p : system) {
    const auto it = index.find(p.scan_id);
    if (it == index.end()) continue;
    const bool s = p.label == p.true_class, b = it->second->label == it->second->true_class;
    c.system_only_correct += s && !b;
    c.baseline_only_correct += b && !s;
  }
  c.p_value = mcnemar_exact(c.system_only_correct, c.baseline_only_correct);
  return c;
}

json interval_json(const Interval& i) {
  return {{"value", i.value}, {"ci", {i.lower, i.upper}}, {"correct", i.successes}, {"total", i.trials}};
}

json metrics_json(const SetMetrics& m) {
  json sens = json::object(), ovr = json::object(), table = json::array();
  for (auto c : data::kAllClasses) {
    const int k = data::index(c);
    const std::string name(data::to_string(c));
    sens[name] = m.sensitivity[k] ? interval_json(*m.sensitivity[k]) : json("NA");
    ovr[name] = m.onevsrest_auc[k] ? json(*m.onevsrest_auc[k]) : json("NA");
    table.push_back(m.table.counts[k]);
  }
  json roc = "NA";
  if (m.micro_roc) {
    json points = json::array();
    for (const auto& p : m.micro_roc->points) points.push_back({p.fpr, p.tpr});
    roc = {{"auc", m.micro_roc->auc}, {"points", points}};
  }
  return {{"set", m.name},
          {"accuracy", interval_json(m.accuracy)},
          {"sensitivity", sens},
          {"confusion", table},
          {"micro_roc", roc},
          {"onevsrest_auc", ovr}};
}

}  // namespace

EvalReport build_report(const std::string& system, const std::vector<PatientPrediction>& preds,
                        const std::map<std::string, std::vector<PatientPrediction>>& baselines) {
  EvalReport r;
  r.system = system;
  const auto sets = by_set(preds);
  for (const auto& [name, ps] : sets) r.sets.push_back(set_metrics(name, ps));
  r.total = set_metrics("TOTAL", preds);
  for (const auto& [baseline, base] : baselines) {
    for (const auto& [name, ps] : sets) r.comparisons.push_back(compare(baseline, name, ps, base));
    r.comparisons.push_back(compare(baseline, "TOTAL", preds, base));
  }
  return r;
}

json to_json(const EvalReport& r) {
  json sets = json::array(), comps = json::array();
  for (const auto& m : r.sets) sets.push_back(metrics_json(m));
  for (const auto& c : r.comparisons) {
    comps.push_back({{"baseline", c.baseline},
                     {"set", c.set},
                     {"system_only_correct", c.system_only_correct},
                     {"baseline_only_correct", c.baseline_only_correct},
                     {"p_value", c.p_value}});
  }
  return {{"system", r.system}, {"sets", sets}, {"total", metrics_json(r.total)}, {"mcnemar", comps}};
}

}  // namespace capsct::eval
