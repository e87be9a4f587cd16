#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tempseg/error.hpp"
#include "tempseg/sequence.hpp"

namespace tempseg {

// ---------------------------------------------------------------------------
// CSV

// Header: ch_0,...,ch_{D-1},label[,subject]
struct LoadedDataset {
  std::vector<SensorSequence> sequences;
  std::size_t dropped_rows = 0;  // rows with a missing or non-finite cell
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    cells.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cells;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

// Parses one dataset CSV. With a subject column, rows are grouped into one
// sequence per subject (in order of first appearance); otherwise the file is
// one sequence. When `num_classes` is given, labels outside [0, C) are
// rejected.
inline LoadedDataset parse_csv_dataset(std::istream& in, std::optional<std::size_t> num_classes = {}) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw ParseError("missing header row", lineno);
  const auto header = detail::split_csv(line);
  std::size_t D = 0;
  while (D < header.size() && header[D] == "ch_" + std::to_string(D)) ++D;
  if (D == 0) throw ParseError("header must start with ch_0", lineno);
  if (D >= header.size() || header[D] != "label") throw ParseError("expected 'label' after feature columns", lineno);
  const bool has_subject = header.size() == D + 2 && header[D + 1] == "subject";
  if (header.size() != D + 1 && !has_subject) throw ParseError("unexpected header columns", lineno);
  const std::size_t ncols = header.size();

  LoadedDataset out;
  std::map<long long, std::size_t> subject_index;
  auto sequence_for = [&](std::optional<long long> subject) -> SensorSequence& {
    if (!subject) {
      if (out.sequences.empty()) out.sequences.push_back(SensorSequence{D, {}, {}, std::nullopt});
      return out.sequences.front();
    }
    auto it = subject_index.find(*subject);
    if (it == subject_index.end()) {
      it = subject_index.emplace(*subject, out.sequences.size()).first;
      out.sequences.push_back(SensorSequence{D, {}, {}, static_cast<int>(*subject)});
    }
    return out.sequences[it->second];
  };

  std::vector<double> row(D);
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != ncols) {
      throw ParseError("expected " + std::to_string(ncols) + " columns, found " + std::to_string(cells.size()), lineno);
    }
    bool missing = false;
    for (std::size_t d = 0; d < D; ++d) {
      if (cells[d].empty()) {
        missing = true;
        continue;
      }
      const auto v = detail::parse_double(cells[d]);
      if (!v) throw ParseError("malformed number '" + std::string(cells[d]) + "'", lineno);
      if (!std::isfinite(*v)) missing = true;
      row[d] = *v;
    }
    if (cells[D].empty() || (has_subject && cells[D + 1].empty())) missing = true;
    if (missing) {
      ++out.dropped_rows;
      continue;
    }
    const auto label = detail::parse_int(cells[D]);
    if (!label || *label < 0 || *label > std::numeric_limits<int>::max() ||
        (num_classes && static_cast<std::size_t>(*label) >= *num_classes)) {
      throw ValidationError("unknown label '" + std::string(cells[D]) + "' at line " + std::to_string(lineno));
    }
    std::optional<long long> subject;
    if (has_subject) {
      subject = detail::parse_int(cells[D + 1]);
      if (!subject) throw ParseError("malformed subject id '" + std::string(cells[D + 1]) + "'", lineno);
    }
    auto& seq = sequence_for(subject);
    seq.features.insert(seq.features.end(), row.begin(), row.end());
    seq.labels.push_back(static_cast<int>(*label));
  }
  if (out.sequences.empty()) out.sequences.push_back(SensorSequence{D, {}, {}, std::nullopt});
  return out;
}

inline LoadedDataset load_csv_dataset(const std::filesystem::path& path,
                                      std::optional<std::size_t> num_classes = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_csv_dataset(in, num_classes);
}

inline void write_csv_sequence(std::ostream& out, const SensorSequence& seq) {
  for (std::size_t d = 0; d < seq.dim; ++d) out << "ch_" << d << ',';
  out << "label" << (seq.subject_id ? ",subject" : "") << '\n';
  for (std::size_t t = 0; t < seq.length(); ++t) {
    for (double v : seq.row(t)) out << detail::format_double(v) << ',';
    out << seq.labels[t];
    if (seq.subject_id) out << ',' << *seq.subject_id;
    out << '\n';
  }
}

inline void save_csv_sequence(const std::filesystem::path& path, const SensorSequence& seq) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_csv_sequence(out, seq);
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Normalization

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // channels with std < 1e-12 are stored as mean 0, std 1

  void apply(SensorSequence& seq) const {
    if (seq.dim != mean.size()) {
      throw DimensionError("normalization has " + std::to_string(mean.size()) + " channels, sequence has " +
                           std::to_string(seq.dim));
    }
    for (std::size_t t = 0; t < seq.length(); ++t)
      for (std::size_t d = 0; d < seq.dim; ++d) {
        auto& v = seq.features[t * seq.dim + d];
        v = (v - mean[d]) / stddev[d];
      }
  }
};

// Per-channel population mean and standard deviation over all train samples.
inline NormStats compute_norm_stats(std::span<const SensorSequence> train) {
  if (train.empty()) throw ValidationError("normalization needs at least one training sequence");
  const std::size_t D = train.front().dim;
  std::vector<double> sum(D, 0.0);
  std::size_t n = 0;
  for (const auto& s : train) {
    if (s.dim != D) throw DimensionError("training sequences differ in channel count");
    for (std::size_t t = 0; t < s.length(); ++t)
      for (std::size_t d = 0; d < D; ++d) sum[d] += s.features[t * D + d];
    n += s.length();
  }
  if (n == 0) throw ValidationError("training sequences contain no samples");
  NormStats st{std::vector<double>(D), std::vector<double>(D)};
  for (std::size_t d = 0; d < D; ++d) st.mean[d] = sum[d] / static_cast<double>(n);
  std::vector<double> sq(D, 0.0);
  for (const auto& s : train)
    for (std::size_t t = 0; t < s.length(); ++t)
      for (std::size_t d = 0; d < D; ++d) {
        const double c = s.features[t * D + d] - st.mean[d];
        sq[d] += c * c;
      }
  for (std::size_t d = 0; d < D; ++d) {
    st.stddev[d] = std::sqrt(sq[d] / static_cast<double>(n));
    if (st.stddev[d] < 1e-12) {
      st.mean[d] = 0.0;
      st.stddev[d] = 1.0;
    }
  }
  return st;
}

struct Normalized {
  std::vector<SensorSequence> train;
  std::vector<SensorSequence> others;
  NormStats stats;
};

// z-scores every channel with statistics taken from `train` alone.
inline Normalized normalize_features(std::vector<SensorSequence> train, std::vector<SensorSequence> others) {
  Normalized out;
  out.stats = compute_norm_stats(train);
  for (auto& s : train) out.stats.apply(s);
  for (auto& s : others) out.stats.apply(s);
  out.train = std::move(train);
  out.others = std::move(others);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic wearable sequences

// offset + amplitude * sin(2 pi f t / rate + phase), one entry per channel.
struct ClassSignal {
  std::vector<double> frequency_hz;
  std::vector<double> amplitude;
  std::vector<double> offset;
  std::vector<double> phase;
};

struct SynthConfig {
  std::size_t num_classes = 5;
  std::size_t dim = 6;
  std::vector<ClassSignal> classes;  // filled by default_class_signals() when empty
  double noise_std = 0.3;
  std::size_t dwell_min = 60;
  std::size_t dwell_max = 300;
  std::size_t transition_blur = 5;
  std::size_t total_length = 2000;
  double sample_rate_hz = 50.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 1) throw ValidationError("synth: num_classes must be >= 1");
    if (dim < 1) throw ValidationError("synth: dim must be >= 1");
    if (dwell_min < 1 || dwell_min > dwell_max) throw ValidationError("synth: need 1 <= dwell_min <= dwell_max");
    if (total_length < 1) throw ValidationError("synth: total_length must be >= 1");
    if (!(noise_std >= 0.0)) throw ValidationError("synth: noise_std must be >= 0");
    if (!(sample_rate_hz > 0.0)) throw ValidationError("synth: sample_rate_hz must be positive");
    if (classes.size() != num_classes) throw ValidationError("synth: need one signal model per class");
    for (const auto& c : classes) {
      if (c.frequency_hz.size() != dim || c.amplitude.size() != dim || c.offset.size() != dim ||
          c.phase.size() != dim) {
        throw ValidationError("synth: signal model channel count differs from dim");
      }
      for (double f : c.frequency_hz)
        if (!(f > 0.0)) throw ValidationError("synth: frequencies must be positive");
    }
  }
};

// Random but well separated per-class signal models.
inline std::vector<ClassSignal> default_class_signals(std::size_t num_classes, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5eed5eedULL);
  std::uniform_real_distribution<double> freq(0.3, 4.0), amp(0.3, 1.0), off(-1.5, 1.5),
      phase(0.0, 2.0 * std::numbers::pi);
  std::vector<ClassSignal> out(num_classes);
  for (auto& c : out) {
    for (std::size_t d = 0; d < dim; ++d) {
      c.frequency_hz.push_back(freq(rng));
      c.amplitude.push_back(amp(rng));
      c.offset.push_back(off(rng));
      c.phase.push_back(phase(rng));
    }
  }
  return out;
}

inline SynthConfig default_synth_config(std::uint64_t seed = 0) {
  SynthConfig c;
  c.seed = seed;
  c.classes = default_class_signals(c.num_classes, c.dim, seed);
  return c;
}

// Label path: runs with dwell uniform in [dwell_min, dwell_max] and the next
// class uniform among the others. Features: the class signal plus white
// noise; within transition_blur samples of each boundary the two neighbouring
// class signals cross-fade linearly while the label switches at the boundary.
inline SensorSequence synthesize_sequence(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const std::size_t T = cfg.total_length, D = cfg.dim;
  std::uniform_int_distribution<std::size_t> dwell(cfg.dwell_min, cfg.dwell_max);
  std::uniform_int_distribution<int> first(0, static_cast<int>(cfg.num_classes) - 1);

  SensorSequence seq;
  seq.dim = D;
  seq.labels.reserve(T);
  int cls = first(rng);
  while (seq.labels.size() < T) {
    const std::size_t n = std::min(dwell(rng), T - seq.labels.size());
    seq.labels.insert(seq.labels.end(), n, cls);
    if (cfg.num_classes > 1) {
      std::uniform_int_distribution<int> other(0, static_cast<int>(cfg.num_classes) - 2);
      const int next = other(rng);
      cls = next >= cls ? next + 1 : next;
    }
  }

  auto signal = [&](int c, std::size_t t, std::size_t d) {
    const auto& m = cfg.classes[static_cast<std::size_t>(c)];
    const double time = static_cast<double>(t) / cfg.sample_rate_hz;
    return m.offset[d] + m.amplitude[d] * std::sin(2.0 * std::numbers::pi * m.frequency_hz[d] * time + m.phase[d]);
  };

  seq.features.resize(T * D);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d) seq.features[t * D + d] = signal(seq.labels[t], t, d);

  if (cfg.transition_blur > 0) {
    const std::size_t blur = cfg.transition_blur;
    std::size_t run_start = 0;
    for (std::size_t b = 1; b < T; ++b) {
      if (seq.labels[b] == seq.labels[b - 1]) continue;
      std::size_t run_end = b + 1;
      while (run_end < T && seq.labels[run_end] == seq.labels[b]) ++run_end;
      const int from = seq.labels[b - 1], to = seq.labels[b];
      // Stay within the two runs that meet at b.
      const std::size_t lo = std::max(run_start, b >= blur ? b - blur : 0);
      const std::size_t hi = std::min(run_end, b + blur);
      for (std::size_t t = lo; t < hi; ++t) {
        const double w = (static_cast<double>(t) - static_cast<double>(b) + static_cast<double>(blur) + 0.5) /
                         (2.0 * static_cast<double>(blur));
        for (std::size_t d = 0; d < D; ++d)
          seq.features[t * D + d] = (1.0 - w) * signal(from, t, d) + w * signal(to, t, d);
      }
      run_start = b;
    }
  }

  if (cfg.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (auto& v : seq.features) v += noise(rng);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Fixed-size sliding windows

struct Window {
  std::size_t start = 0;
  std::size_t size = 0;
  int label = 0;            // majority vote
  bool multiclass = false;  // spans more than one label

  std::span<const double> features(const SensorSequence& seq) const {
    return std::span<const double>(seq.features).subspan(start * seq.dim, size * seq.dim);
  }
};

// Windows at offsets 0, stride, 2*stride, ... Majority ties go to the label
// that occurs latest in the window.
inline std::vector<Window> sliding_windows(const SensorSequence& seq, std::size_t size, std::size_t stride) {
  const std::size_t T = seq.length();
  if (size < 1 || size > T) {
    throw ValidationError("window size " + std::to_string(size) + " must be in [1, " + std::to_string(T) + "]");
  }
  if (stride < 1) throw ValidationError("window stride must be >= 1");
  std::vector<Window> out;
  std::map<int, std::size_t> counts;
  for (std::size_t s = 0; s + size <= T; s += stride) {
    counts.clear();
    for (std::size_t t = s; t < s + size; ++t) ++counts[seq.labels[t]];
    std::size_t best = 0;
    for (const auto& [lab, n] : counts) best = std::max(best, n);
    int label = seq.labels[s + size - 1];
    for (std::size_t t = s + size; t-- > s;) {
      if (counts[seq.labels[t]] == best) {
        label = seq.labels[t];
        break;
      }
    }
    out.push_back({s, size, label, counts.size() > 1});
  }
  return out;
}

inline double multiclass_window_rate(const SensorSequence& seq, std::size_t size, std::size_t stride) {
  const auto w = sliding_windows(seq, size, stride);
  const auto n = std::count_if(w.begin(), w.end(), [](const Window& x) { return x.multiclass; });
  return static_cast<double>(n) / static_cast<double>(w.size());
}

// ---------------------------------------------------------------------------
// Splits

struct BySubject {
  std::set<int> validation_subjects;
  std::set<int> test_subjects;
};

// Whole sequences, in order: the first round(train * n) go to train, the next
// up to round((train + val) * n) to validation, the rest to test.
struct ContiguousFractions {
  double train = 1.0;
  double validation = 0.0;
  double test = 0.0;
};

using SplitPolicy = std::variant<BySubject, ContiguousFractions>;

struct DatasetSplits {
  std::vector<SensorSequence> train;
  std::vector<SensorSequence> validation;
  std::vector<SensorSequence> test;
};

inline DatasetSplits split_sequences(std::vector<SensorSequence> sequences, const SplitPolicy& policy) {
  DatasetSplits out;
  if (const auto* bs = std::get_if<BySubject>(&policy)) {
    for (auto& s : sequences) {
      if (!s.subject_id) throw ValidationError("by-subject split requires subject ids on every sequence");
      if (bs->test_subjects.count(*s.subject_id)) {
        out.test.push_back(std::move(s));
      } else if (bs->validation_subjects.count(*s.subject_id)) {
        out.validation.push_back(std::move(s));
      } else {
        out.train.push_back(std::move(s));
      }
    }
    return out;
  }
  const auto& f = std::get<ContiguousFractions>(policy);
  if (f.train < 0 || f.validation < 0 || f.test < 0 || std::abs(f.train + f.validation + f.test - 1.0) > 1e-9) {
    throw ValidationError("split fractions must be nonnegative and sum to 1");
  }
  const double n = static_cast<double>(sequences.size());
  const auto train_end = static_cast<std::size_t>(std::llround(f.train * n));
  const auto val_end = std::max(train_end, static_cast<std::size_t>(std::llround((f.train + f.validation) * n)));
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    auto& dst = i < train_end ? out.train : (i < val_end ? out.validation : out.test);
    dst.push_back(std::move(sequences[i]));
  }
  return out;
}

}  // namespace tempseg
