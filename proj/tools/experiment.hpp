#pragma once

// Config-driven experiment commands shared by the tempseg CLI and the
// integration tests: generate, train, eval, predict, gradcheck, ablate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tempseg/tempseg.hpp"

namespace tempseg::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

// Every key has a default; see README.md for the list.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  std::size_t n_train = 10;
  std::size_t n_val = 2;
  std::size_t n_test = 2;
  std::string data_dir = "data";
  std::string out_dir = "out";
  std::string checkpoint;  // defaults to <out_dir>/checkpoint.bin
  std::string dataset;     // eval/predict input; defaults to <data_dir>/test
  std::string split = "dirs";  // dirs | fractions | subject
  std::string split_fractions = "0.7,0.15,0.15";
  std::string val_subjects;
  std::string test_subjects;
  int variant = 0;  // 0 = as configured, 1..5 = ablation rows
  std::size_t seeds = 5;

  fs::path checkpoint_path() const {
    return checkpoint.empty() ? fs::path(out_dir) / "checkpoint.bin" : fs::path(checkpoint);
  }
  fs::path dataset_path() const { return dataset.empty() ? fs::path(data_dir) / "test" : fs::path(dataset); }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) throw ValidationError("config key '" + key + "' has malformed value '" + v + "'");
  if constexpr (std::is_unsigned_v<T>) {
    if (v.find('-') != std::string::npos) throw ValidationError("config key '" + key + "' must be nonnegative");
  }
  return out;
}

inline std::set<int> parse_int_set(const std::string& key, const std::string& v) {
  std::set<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.insert(parse_number<int>(key, item));
  }
  return out;
}

}  // namespace detail

// Applies one key = value assignment; unknown keys are rejected.
inline void set_option(ExperimentConfig& c, const std::string& key, const std::string& raw) {
  using detail::parse_bool;
  using detail::parse_number;
  const std::string v = detail::trim(raw);
  std::map<std::string, std::function<void()>> setters = {
      {"stages", [&] { c.model.num_stages = parse_number<std::size_t>(key, v); }},
      {"layers", [&] { c.model.layers_per_stage = parse_number<std::size_t>(key, v); }},
      {"hidden", [&] { c.model.hidden_channels = parse_number<std::size_t>(key, v); }},
      {"proj_dim", [&] { c.model.projection_dim = parse_number<std::size_t>(key, v); }},
      {"kernel", [&] { c.model.kernel_size = parse_number<std::size_t>(key, v); }},
      {"tau", [&] { c.model.temperature = parse_number<double>(key, v); }},
      {"lambda", [&] { c.model.lambda = parse_number<double>(key, v); }},
      {"lr", [&] { c.train.learning_rate = parse_number<double>(key, v); }},
      {"batch_size", [&] { c.train.batch_size = parse_number<std::size_t>(key, v); }},
      {"epochs", [&] { c.train.epochs = parse_number<std::size_t>(key, v); }},
      {"seed", [&] { c.train.seed = parse_number<std::uint64_t>(key, v); }},
      {"k_per_class", [&] { c.train.sampling.k_per_class = parse_number<std::size_t>(key, v); }},
      {"boundary_radius", [&] { c.train.sampling.boundary_radius = parse_number<std::size_t>(key, v); }},
      {"sample_contrast", [&] { c.train.sampling.sample_level = parse_bool(key, v); }},
      {"segment_contrast", [&] { c.train.sampling.segment_level = parse_bool(key, v); }},
      {"variant", [&] { c.variant = parse_number<int>(key, v); }},
      {"seeds", [&] { c.seeds = parse_number<std::size_t>(key, v); }},
      {"classes", [&] { c.synth.num_classes = c.model.num_classes = parse_number<std::size_t>(key, v); }},
      {"dim", [&] { c.synth.dim = c.model.input_dim = parse_number<std::size_t>(key, v); }},
      {"noise_std", [&] { c.synth.noise_std = parse_number<double>(key, v); }},
      {"dwell_min", [&] { c.synth.dwell_min = parse_number<std::size_t>(key, v); }},
      {"dwell_max", [&] { c.synth.dwell_max = parse_number<std::size_t>(key, v); }},
      {"blur", [&] { c.synth.transition_blur = parse_number<std::size_t>(key, v); }},
      {"length", [&] { c.synth.total_length = parse_number<std::size_t>(key, v); }},
      {"sample_rate", [&] { c.synth.sample_rate_hz = parse_number<double>(key, v); }},
      {"n_train", [&] { c.n_train = parse_number<std::size_t>(key, v); }},
      {"n_val", [&] { c.n_val = parse_number<std::size_t>(key, v); }},
      {"n_test", [&] { c.n_test = parse_number<std::size_t>(key, v); }},
      {"data_dir", [&] { c.data_dir = v; }},
      {"out_dir", [&] { c.out_dir = v; }},
      {"checkpoint", [&] { c.checkpoint = v; }},
      {"dataset", [&] { c.dataset = v; }},
      {"split", [&] { c.split = v; }},
      {"split_fractions", [&] { c.split_fractions = v; }},
      {"val_subjects", [&] { c.val_subjects = v; }},
      {"test_subjects", [&] { c.test_subjects = v; }},
  };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ValidationError("unknown config key '" + key + "'");
  it->second();
}

// Plain-text "key = value" lines; '#' starts a comment.
inline void apply_config_text(ExperimentConfig& c, std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", lineno);
    set_option(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline void apply_config_file(ExperimentConfig& c, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  apply_config_text(c, in);
}

// Ablation rows: (1) one stage, CE only; (2) multi-stage, CE only;
// (3) one stage + sample and segment contrast; (4) multi-stage + sample
// contrast; (5) multi-stage + sample and segment contrast.
struct VariantSpec {
  int id;
  bool multi_stage;
  bool sample_contrast;
  bool segment_contrast;
};

inline constexpr VariantSpec kVariants[5] = {
    {1, false, false, false}, {2, true, false, false}, {3, false, true, true},
    {4, true, true, false},   {5, true, true, true},
};

// Rewrites stages/lambda/contrast flags for a variant. Multi-stage variants
// keep the configured stage count (at least 2); lambda stays as configured
// for contrast variants (1.0 if it was 0).
inline ExperimentConfig with_variant(ExperimentConfig c, int variant) {
  if (variant == 0) return c;
  if (variant < 1 || variant > 5) throw ValidationError("variant must be in 1..5");
  const auto& v = kVariants[variant - 1];
  c.variant = variant;
  c.model.num_stages = v.multi_stage ? std::max<std::size_t>(2, c.model.num_stages) : 1;
  c.train.sampling.sample_level = v.sample_contrast;
  c.train.sampling.segment_level = v.segment_contrast;
  if (!v.sample_contrast && !v.segment_contrast) {
    c.model.lambda = 0.0;
  } else if (c.model.lambda == 0.0) {
    c.model.lambda = 1.0;
  }
  return c;
}

inline ExperimentConfig resolved(ExperimentConfig c) {
  c.model.num_classes = c.synth.num_classes;
  c.model.input_dim = c.synth.dim;
  c = with_variant(std::move(c), c.variant);
  if (c.synth.classes.size() != c.synth.num_classes ||
      (!c.synth.classes.empty() && c.synth.classes.front().offset.size() != c.synth.dim)) {
    c.synth.classes = default_class_signals(c.synth.num_classes, c.synth.dim, c.train.seed);
  }
  return c;
}

// ---------------------------------------------------------------------------
// JSON

inline json metrics_to_json(const MetricsReport& r) {
  json j;
  j["samples"] = r.samples;
  j["num_classes"] = r.confusion.num_classes;
  j["precision"] = r.macro_precision;
  j["recall"] = r.macro_recall;
  j["f1_macro"] = r.macro_f1;
  j["jaccard"] = r.jaccard;
  j["auc_macro"] = r.auc_macro;
  json conf = json::array();
  for (std::size_t i = 0; i < r.confusion.num_classes; ++i) {
    json row = json::array();
    for (std::size_t k = 0; k < r.confusion.num_classes; ++k) row.push_back(r.confusion(i, k));
    conf.push_back(row);
  }
  j["confusion"] = conf;
  json per = json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& s = r.per_class[c];
    json e{{"class", c},         {"precision", s.precision}, {"recall", s.recall},       {"f1", s.f1},
           {"jaccard", s.jaccard}, {"support", s.support},     {"predicted", s.predicted}};
    if (c < r.auc_per_class.size() && r.auc_per_class[c] >= 0.0) {
      e["auc"] = r.auc_per_class[c];
    } else {
      e["auc"] = nullptr;
    }
    per.push_back(e);
  }
  j["per_class"] = per;
  return j;
}

inline MetricsReport metrics_from_json(const json& j) {
  MetricsReport r;
  r.samples = j.at("samples").get<std::size_t>();
  const auto C = j.at("num_classes").get<std::size_t>();
  r.macro_precision = j.at("precision").get<double>();
  r.macro_recall = j.at("recall").get<double>();
  r.macro_f1 = j.at("f1_macro").get<double>();
  r.jaccard = j.at("jaccard").get<double>();
  r.auc_macro = j.at("auc_macro").get<double>();
  r.confusion = {C, std::vector<std::size_t>(C * C)};
  const auto& conf = j.at("confusion");
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t k = 0; k < C; ++k) r.confusion.counts[i * C + k] = conf.at(i).at(k).get<std::size_t>();
  for (const auto& e : j.at("per_class")) {
    ClassScores s;
    s.precision = e.at("precision").get<double>();
    s.recall = e.at("recall").get<double>();
    s.f1 = e.at("f1").get<double>();
    s.jaccard = e.at("jaccard").get<double>();
    s.support = e.at("support").get<std::size_t>();
    s.predicted = e.at("predicted").get<std::size_t>();
    r.per_class.push_back(s);
    r.auc_per_class.push_back(e.at("auc").is_null() ? -1.0 : e.at("auc").get<double>());
  }
  return r;
}

inline json synth_to_json(const SynthConfig& s) {
  json classes = json::array();
  for (const auto& c : s.classes) {
    classes.push_back({{"frequency_hz", c.frequency_hz}, {"amplitude", c.amplitude}, {"offset", c.offset},
                       {"phase", c.phase}});
  }
  return {{"num_classes", s.num_classes},   {"dim", s.dim},
          {"noise_std", s.noise_std},       {"dwell_min", s.dwell_min},
          {"dwell_max", s.dwell_max},       {"transition_blur", s.transition_blur},
          {"total_length", s.total_length}, {"sample_rate_hz", s.sample_rate_hz},
          {"classes", classes}};
}

// ---------------------------------------------------------------------------
// Data

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (a * 1000003ULL + b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline const char* kSplitNames[3] = {"train", "val", "test"};

// Sequences for one split of the synthetic dataset, without touching disk.
inline std::vector<SensorSequence> synthesize_split(const ExperimentConfig& c, int split) {
  const std::size_t counts[3] = {c.n_train, c.n_val, c.n_test};
  std::vector<SensorSequence> out;
  for (std::size_t i = 0; i < counts[split]; ++i) {
    SynthConfig s = c.synth;
    s.seed = mix_seed(c.train.seed, static_cast<std::uint64_t>(split), i);
    out.push_back(synthesize_sequence(s));
  }
  return out;
}

// Loads every *.csv in a directory (sorted by name) or a single CSV file.
inline std::vector<SensorSequence> load_sequences(const fs::path& path, std::optional<std::size_t> classes = {}) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.path().extension() == ".csv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else if (fs::exists(path)) {
    files.push_back(path);
  } else {
    throw IoError("dataset not found: " + path.string());
  }
  std::vector<SensorSequence> out;
  for (const auto& f : files) {
    auto loaded = load_csv_dataset(f, classes);
    for (auto& s : loaded.sequences)
      if (s.length() > 0) out.push_back(std::move(s));
  }
  return out;
}

inline DatasetSplits load_splits(const ExperimentConfig& c) {
  const fs::path root(c.data_dir);
  const auto C = c.model.num_classes;
  if (c.split == "dirs") {
    DatasetSplits s;
    s.train = load_sequences(root / "train", C);
    if (fs::exists(root / "val")) s.validation = load_sequences(root / "val", C);
    if (fs::exists(root / "test")) s.test = load_sequences(root / "test", C);
    return s;
  }
  auto all = load_sequences(root, C);
  if (c.split == "subject") {
    return split_sequences(std::move(all), BySubject{detail::parse_int_set("val_subjects", c.val_subjects),
                                                     detail::parse_int_set("test_subjects", c.test_subjects)});
  }
  if (c.split == "fractions") {
    std::vector<double> f;
    std::stringstream ss(c.split_fractions);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(detail::parse_number<double>("split_fractions", detail::trim(item)));
    if (f.size() != 3) throw ValidationError("split_fractions needs three values");
    return split_sequences(std::move(all), ContiguousFractions{f[0], f[1], f[2]});
  }
  throw ValidationError("unknown split policy '" + c.split + "'");
}

inline void check_dims(const ModelConfig& m, const std::vector<SensorSequence>& seqs) {
  for (const auto& s : seqs) {
    if (s.dim != m.input_dim) {
      throw ValidationError("dataset has " + std::to_string(s.dim) + " feature channels but the model expects " +
                            std::to_string(m.input_dim));
    }
  }
}

// ---------------------------------------------------------------------------
// generate

struct GenerateResult {
  std::vector<fs::path> files;
  double multiclass_window_rate = 0.0;  // size 24, stride 1, pooled over all sequences
};

inline GenerateResult cmd_generate(const ExperimentConfig& raw, const fs::path& out_dir) {
  const auto c = resolved(raw);
  GenerateResult res;
  std::size_t windows = 0, multi = 0;
  json manifest;
  manifest["seed"] = c.train.seed;
  manifest["synth"] = synth_to_json(c.synth);
  for (int split = 0; split < 3; ++split) {
    const auto dir = out_dir / kSplitNames[split];
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const auto seqs = synthesize_split(c, split);
    json files = json::array();
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      std::ostringstream name;
      name << "seq_" << std::setw(3) << std::setfill('0') << i << ".csv";
      save_csv_sequence(dir / name.str(), seqs[i]);
      res.files.push_back(dir / name.str());
      files.push_back(std::string(kSplitNames[split]) + "/" + name.str());
      if (seqs[i].length() >= 24) {
        for (const auto& w : sliding_windows(seqs[i], 24, 1)) {
          ++windows;
          multi += w.multiclass ? 1 : 0;
        }
      }
    }
    manifest["files"][kSplitNames[split]] = files;
  }
  res.multiclass_window_rate = windows ? static_cast<double>(multi) / static_cast<double>(windows) : 0.0;
  manifest["multiclass_window_rate_24_1"] = res.multiclass_window_rate;
  std::ofstream out(out_dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + out_dir.string());
  out << manifest.dump(2) << '\n';
  return res;
}

// ---------------------------------------------------------------------------
// train

struct EpochRecord {
  std::size_t epoch = 0;
  EpochStats stats;
  std::optional<MetricsReport> validation;
};

struct TrainResult {
  TrainState best;  // best-validation snapshot (last epoch without validation data)
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainState snapshot(const TrainState& s) {
  TrainState c = s;
  c.params = s.params.clone();
  return c;
}

// Trains on already-normalized sequences.
inline TrainResult train_model(const ModelConfig& model, const TrainConfig& train,
                               std::span<const SensorSequence> train_set, std::span<const SensorSequence> val_set,
                               const std::optional<NormStats>& norm, const EpochCallback& on_epoch = {}) {
  model.validate();
  train.validate();
  TrainState state = TrainState::fresh(model, train.seed);
  state.normalization = norm;
  std::mt19937_64 rng(mix_seed(train.seed, 7, 0));
  TrainResult res;
  res.best = snapshot(state);
  double best_score = -1.0;
  for (std::size_t e = 1; e <= train.epochs; ++e) {
    EpochRecord rec;
    rec.epoch = e;
    rec.stats = train_epoch(state, train_set, train, rng);
    if (!val_set.empty()) {
      rec.validation = evaluate(state.params, model, val_set).report;
      if (rec.validation->macro_f1 > best_score) {
        best_score = rec.validation->macro_f1;
        res.best = snapshot(state);
      }
    } else {
      res.best = snapshot(state);
    }
    if (on_epoch) on_epoch(rec);
    res.history.push_back(std::move(rec));
  }
  return res;
}

inline json epoch_to_json(const EpochRecord& r) {
  json j;
  j["epoch"] = r.epoch;
  j["loss_c"] = r.stats.classification;
  j["loss_con"] = r.stats.contrast;
  j["total"] = r.stats.total;
  if (r.validation) {
    j["val_f1"] = r.validation->macro_f1;
    j["val_ji"] = r.validation->jaccard;
  } else {
    j["val_f1"] = nullptr;
    j["val_ji"] = nullptr;
  }
  return j;
}

inline TrainResult cmd_train(const ExperimentConfig& raw, const EpochCallback& on_epoch = {}) {
  const auto c = resolved(raw);
  auto splits = load_splits(c);
  if (splits.train.empty()) throw ValidationError("no training sequences found under " + c.data_dir);
  check_dims(c.model, splits.train);
  check_dims(c.model, splits.validation);
  auto norm = normalize_features(std::move(splits.train), std::move(splits.validation));

  const fs::path out(c.out_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
  if (!log) throw IoError("cannot write training log in " + out.string());

  auto result = train_model(c.model, c.train, norm.train, norm.others, norm.stats, [&](const EpochRecord& r) {
    log << epoch_to_json(r).dump() << '\n';
    log.flush();
    if (on_epoch) on_epoch(r);
  });
  save_checkpoint(result.best, c.checkpoint_path());
  return result;
}

// ---------------------------------------------------------------------------
// eval / predict

struct EvalResult {
  Evaluation evaluation;
  std::size_t rows = 0;
};

inline std::vector<SensorSequence> load_for_checkpoint(const ExperimentConfig& c, const TrainState& state) {
  auto seqs = load_sequences(c.dataset_path(), state.config.num_classes);
  check_dims(state.config, seqs);
  if (state.normalization)
    for (auto& s : seqs) state.normalization->apply(s);
  return seqs;
}

inline void write_predictions(const fs::path& path, const std::vector<SensorSequence>& seqs, const Evaluation& ev,
                              std::size_t C) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "index,truth,pred";
  for (std::size_t c = 0; c < C; ++c) out << ",prob_" << c;
  out << '\n';
  std::size_t index = 0;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& sp = ev.sequences[s];
    for (std::size_t t = 0; t < seqs[s].length(); ++t, ++index) {
      out << index << ',' << seqs[s].labels[t] << ',' << sp.predictions[t];
      for (std::size_t c = 0; c < C; ++c) out << ',' << tempseg::detail::format_double(sp.probs[t * C + c]);
      out << '\n';
    }
  }
}

inline void write_embeddings(const fs::path& path, const std::vector<SensorSequence>& seqs, const Evaluation& ev,
                             std::size_t P) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "index,truth";
  for (std::size_t p = 0; p < P; ++p) out << ",e_" << p;
  out << '\n';
  std::size_t index = 0;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& sp = ev.sequences[s];
    for (std::size_t t = 0; t < seqs[s].length(); ++t, ++index) {
      out << index << ',' << seqs[s].labels[t];
      for (std::size_t p = 0; p < P; ++p) out << ',' << tempseg::detail::format_double(sp.embeddings[t * P + p]);
      out << '\n';
    }
  }
}

inline EvalResult cmd_eval(const ExperimentConfig& c, bool metrics = true) {
  const auto state = load_checkpoint(c.checkpoint_path());
  const auto seqs = load_for_checkpoint(c, state);
  EvalResult res;
  res.evaluation = evaluate(state.params, state.config, seqs);
  for (const auto& s : seqs) res.rows += s.length();
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  write_predictions(out / "predictions.csv", seqs, res.evaluation, state.config.num_classes);
  if (metrics) {
    std::ofstream m(out / "metrics.json");
    if (!m) throw IoError("cannot write metrics in " + out.string());
    m << metrics_to_json(res.evaluation.report).dump(2) << '\n';
    write_embeddings(out / "embeddings.csv", seqs, res.evaluation, state.config.projection_dim);
  }
  return res;
}

inline EvalResult cmd_predict(const ExperimentConfig& c) { return cmd_eval(c, false); }

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheckLine {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_at_kinks = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckLine> lines;
  bool pass() const {
    return std::all_of(lines.begin(), lines.end(), [](const auto& l) { return l.pass; });
  }
};

namespace detail {

// Identity in the forward pass that scales the gradient in the backward pass.
inline Tensor corrupt_gradient(Graph& g, const Tensor& x, double factor) {
  Tensor y = Tensor::from(x.shape(), {x.values().begin(), x.values().end()}, g.tracks({&x}));
  if (y.requires_grad()) {
    g.record("corrupt", {x}, y, [x, y, factor] {
      auto dx = x.grad();
      const auto dy = y.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
    });
  }
  return y;
}

}  // namespace detail

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kGradStep = 1e-3;

// Runs the central-difference check on every differentiable op and on the
// full multi-stage objective of a 2-stage, 2-layer, T=32 model.
// `corrupt_op` (test hook) scales that op's backward gradient by 1.5.
inline GradCheckReport cmd_gradcheck(std::uint64_t seed, const std::string& corrupt_op = {}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> positive(0.5, 2.0);
  auto rand_tensor = [&](ad::Shape shape, bool pos = false) {
    std::vector<double> v(ad::shape_numel(shape));
    for (auto& x : v) x = pos ? positive(rng) : normal(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
  };
  GradCheckReport rep;
  auto run = [&](const std::string& op, std::vector<Tensor> params, std::function<Tensor(Graph&)> f) {
    std::function<Tensor(Graph&)> fn = f;
    if (op == corrupt_op) {
      // Weighted sum so the corruption cannot cancel through a normalization.
      fn = [f](Graph& g) { return detail::corrupt_gradient(g, f(g), 1.5); };
    }
    const auto r = ad::grad_check(fn, params, kGradStep);
    // A check that measured nothing proves nothing.
    const bool ok = r.checked > 0 && r.max_rel_error < kGradTolerance;
    rep.lines.push_back({op, r.max_rel_error, r.checked, r.skipped_at_kinks, ok});
  };
  // Projection onto a fixed random direction turns any tensor into a scalar.
  auto reduce = [&](Graph& g, const Tensor& t, const Tensor& dir) { return ad::dot(g, t, dir); };

  {
    auto x = rand_tensor({12, 3}), w = rand_tensor({4, 3, 3}), b = rand_tensor({4});
    auto dir = rand_tensor({12, 4}).detach();
    run("conv1d_dilated", {x, w, b}, [=](Graph& g) { return reduce(g, ad::conv1d_dilated(g, x, w, b, 2), dir); });
  }
  {
    auto x = rand_tensor({5, 4});
    for (auto& v : x.mutable_values()) v += v > 0 ? 0.1 : -0.1;  // keep away from the kink
    auto dir = rand_tensor({5, 4}).detach();
    run("relu", {x}, [=](Graph& g) { return reduce(g, ad::relu(g, x), dir); });
  }
  {
    auto a = rand_tensor({3, 4}), b = rand_tensor({3, 4});
    auto dir = rand_tensor({3, 4}).detach();
    run("add", {a, b}, [=](Graph& g) { return reduce(g, ad::add(g, a, b), dir); });
  }
  {
    auto a = rand_tensor({3, 4}), b = rand_tensor({4, 2});
    auto dir = rand_tensor({3, 2}).detach();
    run("matmul", {a, b}, [=](Graph& g) { return reduce(g, ad::matmul(g, a, b), dir); });
  }
  {
    auto x = rand_tensor({6});
    auto dir = rand_tensor({6}).detach();
    run("scale", {x}, [=](Graph& g) { return reduce(g, ad::scale(g, x, -2.5), dir); });
  }
  {
    auto x = rand_tensor({4, 3});
    run("mean", {x}, [=](Graph& g) { return ad::mean(g, x); });
  }
  {
    auto x = rand_tensor({5});
    auto dir = rand_tensor({5}).detach();
    run("exp", {x}, [=](Graph& g) { return reduce(g, ad::exp(g, x), dir); });
  }
  {
    auto x = rand_tensor({5}, true);
    auto dir = rand_tensor({5}).detach();
    run("log", {x}, [=](Graph& g) { return reduce(g, ad::log(g, x), dir); });
  }
  {
    auto a = rand_tensor({7}), b = rand_tensor({7});
    run("dot", {a, b}, [=](Graph& g) { return ad::dot(g, a, b); });
  }
  {
    auto x = rand_tensor({4, 5});
    auto dir = rand_tensor({4, 5}).detach();
    run("l2_normalize", {x}, [=](Graph& g) { return reduce(g, ad::l2_normalize(g, x), dir); });
  }
  {
    auto x = rand_tensor({4, 3});
    auto dir = rand_tensor({4, 3}).detach();
    run("softmax", {x}, [=](Graph& g) { return reduce(g, ad::softmax(g, x), dir); });
  }
  {
    auto x = rand_tensor({6, 4});
    const std::vector<int> y = {0, 3, 1, 1, 2, 0};
    run("softmax_cross_entropy", {x}, [=](Graph& g) { return ad::softmax_cross_entropy(g, x, y).loss; });
  }
  {
    auto x = rand_tensor({6, 3});
    const std::vector<std::size_t> rows = {4, 0, 4, 2};
    auto dir = rand_tensor({4, 3}).detach();
    run("gather_rows", {x}, [=](Graph& g) { return reduce(g, ad::gather_rows(g, x, rows), dir); });
  }
  {
    auto x = rand_tensor({8, 3});
    const std::vector<ad::RowRange> ranges = {{0, 3}, {3, 4}, {4, 8}};
    auto dir = rand_tensor({3, 3}).detach();
    run("segment_mean", {x}, [=](Graph& g) { return reduce(g, ad::segment_mean(g, x, ranges), dir); });
  }
  {
    auto a = rand_tensor({2, 3}), b = rand_tensor({3, 3});
    auto dir = rand_tensor({5, 3}).detach();
    run("concat_rows", {a, b}, [=](Graph& g) { return reduce(g, ad::concat_rows(g, a, b), dir); });
  }
  {
    auto x = rand_tensor({8, 4});
    const std::vector<int> cls = {0, 1, 0, 2, 1, 0, 2, 2};
    run("supervised_contrast", {x}, [=](Graph& g) {
      return supervised_contrast(g, ad::l2_normalize(g, x), cls, 0.5).loss;
    });
  }
  {
    ModelConfig mc;
    mc.num_stages = 2;
    mc.layers_per_stage = 2;
    mc.hidden_channels = 4;
    mc.num_classes = 3;
    mc.input_dim = 3;
    mc.projection_dim = 4;
    mc.kernel_size = 3;
    mc.temperature = 0.5;
    mc.lambda = 1.0;
    const std::size_t T = 32;
    // Random biases too: with zero biases a row whose hidden ReLUs are all
    // off projects to the zero vector, where normalization is discontinuous.
    // Halved weights keep the central-difference truncation error (which
    // scales with eps^2 times the third derivative) well under tolerance.
    auto params = init_params(mc, seed);
    for (auto& t : params.tensors()) {
      for (auto& v : t.mutable_values()) v = t.rank() == 1 ? 0.5 * normal(rng) : 0.5 * v;
    }
    auto input = rand_tensor({T, mc.input_dim}).detach();
    std::vector<int> labels(T);
    for (std::size_t t = 0; t < T; ++t) labels[t] = static_cast<int>((t / 6) % 3);
    SamplingConfig sc;
    sc.k_per_class = 4;
    // Example sets are drawn once so that the checked function is fixed.
    std::vector<ExampleSet> sets;
    {
      Graph g(false);
      const auto outs = mstcn_forward(g, input, params);
      std::mt19937_64 srng(seed + 1);
      for (const auto& o : outs) sets.push_back(build_example_set(o.projected, argmax_rows(o.probs), labels, sc, srng));
    }
    run("total_objective", params.tensors(), [=](Graph& g) {
      const auto outs = mstcn_forward(g, input, params);
      std::vector<ContrastBatch> batches;
      for (std::size_t n = 0; n < outs.size(); ++n) batches.push_back(example_batch(g, outs[n].projected, sets[n]));
      return total_objective(g, outs, labels, batches, mc.lambda, mc.temperature).total;
    });
  }
  return rep;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationRun {
  int variant = 0;
  std::uint64_t seed = 0;
  double f1 = 0.0;
  double jaccard = 0.0;
};

struct AblationRow {
  int variant = 0;
  double f1_mean = 0.0, f1_std = 0.0, ji_mean = 0.0, ji_std = 0.0;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationRow> summary;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

// Trains one variant on normalized data and scores the test split.
inline AblationRun run_variant(const ExperimentConfig& base, int variant, std::uint64_t seed,
                               std::span<const SensorSequence> train, std::span<const SensorSequence> val,
                               std::span<const SensorSequence> test) {
  auto c = with_variant(base, variant);
  c.train.seed = seed;
  const auto res = train_model(c.model, c.train, train, val, std::nullopt);
  const auto ev = evaluate(res.best.params, c.model, test);
  return {variant, seed, ev.report.macro_f1, ev.report.jaccard};
}

inline AblationResult summarize(std::vector<AblationRun> runs) {
  AblationResult res;
  for (const auto& v : kVariants) {
    std::vector<double> f, j;
    for (const auto& r : runs) {
      if (r.variant != v.id) continue;
      f.push_back(r.f1);
      j.push_back(r.jaccard);
    }
    const auto [fm, fs] = mean_std(f);
    const auto [jm, js] = mean_std(j);
    res.summary.push_back({v.id, fm, fs, jm, js});
  }
  res.runs = std::move(runs);
  return res;
}

inline void write_ablation(const fs::path& out_dir, const AblationResult& res) {
  fs::create_directories(out_dir);
  std::ofstream runs(out_dir / "ablation_runs.csv");
  if (!runs) throw IoError("cannot write ablation results in " + out_dir.string());
  runs << "variant,seed,f1_macro,jaccard\n";
  for (const auto& r : res.runs)
    runs << r.variant << ',' << r.seed << ',' << tempseg::detail::format_double(r.f1) << ','
         << tempseg::detail::format_double(r.jaccard) << '\n';
  std::ofstream sum(out_dir / "ablation_summary.csv");
  sum << "variant,multi_stage,sample_contrast,segment_contrast,f1_mean,f1_std,jaccard_mean,jaccard_std\n";
  for (const auto& row : res.summary) {
    const auto& v = kVariants[row.variant - 1];
    sum << row.variant << ',' << v.multi_stage << ',' << v.sample_contrast << ',' << v.segment_contrast << ','
        << row.f1_mean << ',' << row.f1_std << ',' << row.ji_mean << ',' << row.ji_std << '\n';
  }
}

using RunCallback = std::function<void(const AblationRun&)>;

// Five variants x `seeds` seeds (seed, seed+1, ...) on the dataset in data_dir.
inline AblationResult cmd_ablate(const ExperimentConfig& raw, const fs::path& out_dir, const RunCallback& on_run = {}) {
  auto c = resolved(raw);
  c.variant = 0;
  auto splits = load_splits(c);
  if (splits.train.empty() || splits.test.empty()) throw ValidationError("ablation needs train and test sequences");
  check_dims(c.model, splits.train);
  std::vector<SensorSequence> others = splits.validation;
  others.insert(others.end(), splits.test.begin(), splits.test.end());
  const std::size_t nval = splits.validation.size();
  auto norm = normalize_features(std::move(splits.train), std::move(others));
  const std::span<const SensorSequence> all(norm.others);
  std::vector<AblationRun> runs;
  for (const auto& v : kVariants) {
    for (std::size_t s = 0; s < c.seeds; ++s) {
      runs.push_back(run_variant(c, v.id, c.train.seed + s, norm.train, all.first(nval), all.subspan(nval)));
      if (on_run) on_run(runs.back());
    }
  }
  auto res = summarize(std::move(runs));
  write_ablation(out_dir, res);
  return res;
}

}  // namespace tempseg::experiment
