#include "capsct/pipeline/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "capsct/ad/adam.hpp"
#include "capsct/ad/errors.hpp"

namespace capsct::pipeline {
using nlohmann::json;

ArchConfig PipelineConfig::stage1_arch() const {
  auto a = ArchConfig::stage1(input_size);
  a.channels = stage1_channels;
  a.strides = conv_strides;
  a.dropout = dropout_rate;
  a.routing_iterations = routing_iterations;
  return a;
}

ArchConfig PipelineConfig::stage2_arch() const {
  auto a = ArchConfig::stage2(input_size);
  a.channels = stage2_channels;
  a.strides = conv_strides;
  a.dropout = dropout_rate;
  a.routing_iterations = routing_iterations;
  return a;
}

void PipelineConfig::validate() const {
  if (!(normal_threshold > 0.0 && normal_threshold < 1.0)) {
    throw ConfigError("normal_threshold must lie in (0, 1), got " + std::to_string(normal_threshold));
  }
  if (!(infection_cutoff > 0.0 && infection_cutoff < 1.0)) {
    throw ConfigError("infection_cutoff must lie in (0, 1), got " + std::to_string(infection_cutoff));
  }
  if (stage1_epochs < 0 || stage2_epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch norm)");
  if (routing_iterations < 1) throw ConfigError("routing_iterations must be >= 1");
  stage1_arch().primary_count();
  stage2_arch().primary_count();
}

Stage1Model build_stage1(const PipelineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return {CapsNet<float>(cfg.stage1_arch(), Rng::mix(seed, 1))};
}

Stage2Model build_stage2(const PipelineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return {CapsNet<float>(cfg.stage2_arch(), Rng::mix(seed, 2))};
}

void SliceSet::add(std::span<const float> img, int label, const std::string& scan_id, int slice_index) {
  if (img.size() != image_size * image_size) {
    throw DimensionError("SliceSet: image of " + std::to_string(img.size()) + " pixels, expected " +
                         std::to_string(image_size) + "^2");
  }
  pixels.insert(pixels.end(), img.begin(), img.end());
  labels.push_back(label);
  scan_ids.push_back(scan_id);
  slice_indices.push_back(slice_index);
}

void SliceSet::append(const SliceSet& other) {
  if (other.size() == 0) return;
  if (size() == 0) image_size = other.image_size;
  if (other.image_size != image_size) throw DimensionError("SliceSet: image size mismatch on append");
  pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  scan_ids.insert(scan_ids.end(), other.scan_ids.begin(), other.scan_ids.end());
  slice_indices.insert(slice_indices.end(), other.slice_indices.begin(), other.slice_indices.end());
}

std::array<std::size_t, 3> SliceSet::label_counts() const {
  std::array<std::size_t, 3> c{};
  for (int l : labels) {
    if (l >= 0 && l < 3) ++c[l];
  }
  return c;
}

SliceSet stage1_slices(const std::vector<VolumetricScan>& scans) {
  SliceSet set;
  for (const auto& s : scans) {
    if (set.image_size == 0) set.image_size = s.height;
    if (s.height != s.width || s.height != set.image_size) {
      throw DimensionError("stage1_slices: scan " + s.meta.scan_id + " is not preprocessed to a common square size");
    }
    for (std::size_t k = 0; k < s.n_slices; ++k) {
      set.add(s.slice(k), s.is_infected(k) ? 1 : 0, s.meta.scan_id, static_cast<int>(k));
    }
  }
  return set;
}

namespace {

TrainHistory fit(CapsNet<float>& net, const SliceSet& set, std::span<const double> label_weight,
                 std::span<const double> class_weight, int epochs, const PipelineConfig& cfg, std::uint64_t seed) {
  TrainHistory history;
  if (epochs <= 0 || set.size() == 0) return history;
  const std::size_t s = net.arch().input_size;
  if (set.image_size != s) {
    throw DimensionError("training slices are " + std::to_string(set.image_size) + "px, network expects " +
                         std::to_string(s));
  }
  auto params = net.parameters();
  ad::AdamState<float> adam(ad::AdamConfig{.lr = cfg.lr});
  Rng drop_rng(Rng::mix(seed, 0xd0));
  std::vector<std::size_t> order(set.size());
  const std::size_t px = s * s;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(Rng::mix(seed, static_cast<std::uint64_t>(epoch))).shuffle(order.begin(), order.end());
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      if (n < 2) continue;  // batch statistics need two samples
      std::vector<float> x(n * px);
      std::vector<int> targets(n);
      std::vector<double> weights(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = order[start + i];
        std::copy(set.image(idx), set.image(idx) + px, x.begin() + i * px);
        targets[i] = set.labels[idx];
        weights[i] = label_weight[set.labels[idx]];
      }
      ad::Tape<float> tape;
      auto input = ad::make_tensor<float>({n, 1, s, s}, std::move(x));
      auto lengths = net.lengths(tape, input, Mode::Train, &drop_rng);
      auto loss = caps::weighted_bce_loss<float>(tape, lengths, targets, weights, class_weight);
      tape.backward(loss);
      ad::adam_step(params, adam);
      ad::zero_grad(params);
      total += static_cast<double>(loss->data[0]) * n;
      seen += n;
    }
    history.epoch_loss.push_back(seen ? total / seen : 0.0);
  }
  return history;
}

}  // namespace

TrainHistory train_stage1(Stage1Model& model, const SliceSet& slices, const PipelineConfig& cfg, std::uint64_t seed) {
  const auto counts = slices.label_counts();
  if (counts[0] == 0 || counts[1] == 0 || counts[0] + counts[1] != slices.size()) {
    throw std::invalid_argument("train_stage1: needs both negative and positive slices (got " +
                                std::to_string(counts[0]) + " negative, " + std::to_string(counts[1]) + " positive)");
  }
  const auto w = caps::BinaryLossWeights::from_counts(counts[0], counts[1]);
  const double label_weight[2] = {w.w1, w.w2};
  const double class_weight[2] = {1.0, 1.0};
  auto history = fit(model.net, slices, label_weight, class_weight, cfg.stage1_epochs, cfg, seed);
  history.stage1_weights = w;
  return history;
}

TrainHistory train_stage2(Stage2Model& model, const SliceSet& slices, const PipelineConfig& cfg, std::uint64_t seed,
                          std::optional<int> epochs) {
  const auto counts = slices.label_counts();
  std::string missing;
  for (auto c : data::kAllClasses) {
    if (counts[data::index(c)] == 0) missing += (missing.empty() ? "" : ", ") + std::string(data::to_string(c));
  }
  if (!missing.empty()) throw std::invalid_argument("train_stage2: no training slices for class(es) " + missing);
  const double label_weight[3] = {1.0, 1.0, 1.0};
  return fit(model.net, slices, label_weight, caps::kStage2ClassWeights, epochs.value_or(cfg.stage2_epochs), cfg,
             seed);
}

Stage1Result select_from_probabilities(std::vector<double> probs, double cutoff) {
  Stage1Result r;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    if (probs[k] >= cutoff) r.selected.push_back(static_cast<int>(k));
  }
  r.infected_fraction = probs.empty() ? 0.0 : static_cast<double>(r.selected.size()) / probs.size();
  r.infection_prob = std::move(probs);
  return r;
}

Stage1Result select_infected_slices(Stage1Model& model, const VolumetricScan& scan, const PipelineConfig& cfg) {
  if (scan.height != model.net.arch().input_size || scan.width != scan.height) {
    throw DimensionError("select_infected_slices: scan " + scan.meta.scan_id + " is not preprocessed");
  }
  const auto lengths = model.net.predict(scan.pixels.data(), scan.n_slices);
  std::vector<double> probs(lengths.size());
  for (std::size_t k = 0; k < lengths.size(); ++k) probs[k] = lengths[k][1];
  return select_from_probabilities(std::move(probs), cfg.infection_cutoff);
}

bool normal_filter(double infected_fraction, double threshold) { return infected_fraction < threshold; }

ClassLabel argmax_with_ties(std::span<const double, 3> v) {
  int best = 0;
  for (int i = 1; i < 3; ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<ClassLabel>(best);
}

std::array<double, 3> patient_probabilities(const std::array<int, 3>& counts) {
  const int total = counts[0] + counts[1] + counts[2];
  if (total <= 0) throw std::logic_error("patient_probabilities: no classified slices");
  return {static_cast<double>(counts[0]) / total, static_cast<double>(counts[1]) / total,
          static_cast<double>(counts[2]) / total};
}

PatientResult classify_with_stage1(const Stage1Result& stage1, Stage2Model& stage2, const VolumetricScan& scan,
                                   const PipelineConfig& cfg) {
  PatientResult r;
  auto& p = r.patient;
  p.scan_id = scan.meta.scan_id;
  p.set_id = scan.meta.set_id;
  p.true_class = scan.meta.true_class;
  p.infected_fraction = stage1.infected_fraction;
  p.normal_filtered = normal_filter(stage1.infected_fraction, cfg.normal_threshold);

  r.slices.resize(scan.n_slices);
  for (std::size_t k = 0; k < scan.n_slices; ++k) {
    r.slices[k].slice_index = static_cast<int>(k);
    r.slices[k].infection_prob = stage1.infection_prob.at(k);
  }
  if (!stage1.selected.empty()) {
    const std::size_t px = scan.slice_size();
    std::vector<float> images;
    images.reserve(stage1.selected.size() * px);
    for (int k : stage1.selected) {
      const auto sl = scan.slice(static_cast<std::size_t>(k));
      images.insert(images.end(), sl.begin(), sl.end());
    }
    const auto lengths = stage2.net.predict(images.data(), stage1.selected.size());
    for (std::size_t i = 0; i < stage1.selected.size(); ++i) {
      auto& sp = r.slices[stage1.selected[i]];
      sp.class_lengths = std::array<double, 3>{lengths[i][0], lengths[i][1], lengths[i][2]};
      sp.class_argmax = argmax_with_ties(*sp.class_lengths);
      if (!p.normal_filtered) ++p.counts[data::index(*sp.class_argmax)];
    }
  }
  if (p.normal_filtered) {
    p.prob = {0.0, 0.0, 1.0};
    p.label = ClassLabel::Normal;
  } else {
    if (stage1.selected.empty()) throw std::logic_error("classify_patient: unfiltered scan with no selected slices");
    p.prob = patient_probabilities(p.counts);
    p.label = argmax_with_ties(p.prob);
  }
  return r;
}

PatientResult classify_patient(Stage1Model& stage1, Stage2Model& stage2, const VolumetricScan& scan,
                               const PipelineConfig& cfg) {
  return classify_with_stage1(select_infected_slices(stage1, scan, cfg), stage2, scan, cfg);
}

SliceSet stage2_training_set(Stage1Model& stage1, const std::vector<VolumetricScan>& scans, const PipelineConfig& cfg) {
  SliceSet set;
  set.image_size = cfg.input_size;
  for (const auto& scan : scans) {
    const auto sel = select_infected_slices(stage1, scan, cfg);
    const int label = data::index(scan.meta.true_class);
    for (int k : sel.selected) set.add(scan.slice(k), label, scan.meta.scan_id, k);
    if (sel.selected.empty() && scan.meta.true_class == ClassLabel::Normal && scan.n_slices > 0) {
      const auto top = std::max_element(sel.infection_prob.begin(), sel.infection_prob.end());
      const int k = static_cast<int>(top - sel.infection_prob.begin());
      set.add(scan.slice(k), label, scan.meta.scan_id, k);
    }
  }
  return set;
}

BinaryMetrics binary_metrics(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.empty()) throw std::invalid_argument("binary_metrics: empty input");
  if (predicted.size() != truth.size()) throw DimensionError("binary_metrics: prediction/label length mismatch");
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool p = predicted[i] != 0, t = truth[i] != 0;
    tp += p && t;
    tn += !p && !t;
    fp += p && !t;
    fn += !p && t;
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  BinaryMetrics m;
  m.accuracy = static_cast<double>(tp + tn) / predicted.size();
  m.sensitivity = tp + fn ? static_cast<double>(tp) / (tp + fn) : nan;
  m.specificity = tn + fp ? static_cast<double>(tn) / (tn + fp) : nan;
  return m;
}

BinaryMetrics evaluate_stage1(Stage1Model& model, const SliceSet& slices, const PipelineConfig& cfg) {
  if (slices.size() == 0) throw std::invalid_argument("evaluate_stage1: empty slice set");
  const auto lengths = model.net.predict(slices.pixels.data(), slices.size());
  std::vector<int> predicted(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) predicted[i] = lengths[i][1] >= cfg.infection_cutoff;
  return binary_metrics(predicted, slices.labels);
}

json to_json(const PatientResult& r) {
  const auto& p = r.patient;
  json slices = json::array();
  for (const auto& s : r.slices) {
    json js{{"slice_index", s.slice_index}, {"infection_prob", s.infection_prob}};
    if (s.class_lengths) js["class_lengths"] = *s.class_lengths;
    if (s.class_argmax) js["class_argmax"] = data::to_string(*s.class_argmax);
    slices.push_back(std::move(js));
  }
  return {{"scan_id", p.scan_id},
          {"set_id", data::to_string(p.set_id)},
          {"true_class", data::to_string(p.true_class)},
          {"counts", p.counts},
          {"P", p.prob},
          {"label", data::to_string(p.label)},
          {"normal_filtered", p.normal_filtered},
          {"infected_fraction", p.infected_fraction},
          {"slices", std::move(slices)}};
}

PatientResult patient_result_from_json(const json& j) {
  try {
    PatientResult r;
    auto& p = r.patient;
    p.scan_id = j.at("scan_id").get<std::string>();
    p.set_id = data::parse_set(j.at("set_id").get<std::string>());
    p.true_class = data::parse_class(j.at("true_class").get<std::string>());
    p.counts = j.at("counts").get<std::array<int, 3>>();
    p.prob = j.at("P").get<std::array<double, 3>>();
    p.label = data::parse_class(j.at("label").get<std::string>());
    p.normal_filtered = j.at("normal_filtered").get<bool>();
    p.infected_fraction = j.at("infected_fraction").get<double>();
    for (const auto& js : j.at("slices")) {
      SlicePrediction s;
      s.slice_index = js.at("slice_index").get<int>();
      s.infection_prob = js.at("infection_prob").get<double>();
      if (js.contains("class_lengths")) s.class_lengths = js["class_lengths"].get<std::array<double, 3>>();
      if (js.contains("class_argmax")) s.class_argmax = data::parse_class(js["class_argmax"].get<std::string>());
      r.slices.push_back(s);
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("prediction record: ") + e.what());
  }
}

void write_prediction_log(const std::filesystem::path& path, const std::vector<PatientResult>& results) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& r : results) out << to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error("cannot write prediction log " + path.string());
}

std::vector<PatientResult> read_prediction_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open prediction log " + path.string());
  std::vector<PatientResult> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    try {
      out.push_back(patient_result_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace capsct::pipeline
