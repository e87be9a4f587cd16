#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tempseg/autodiff.hpp"
#include "tempseg/data.hpp"
#include "tempseg/error.hpp"
#include "tempseg/losses.hpp"
#include "tempseg/metrics.hpp"
#include "tempseg/model.hpp"
#include "tempseg/sampling.hpp"

namespace tempseg {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;  // sequences per optimizer step
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  SamplingConfig sampling;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ValidationError("learning_rate must be nonnegative");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (sampling.k_per_class % 2 != 0) throw ValidationError("k_per_class must be even");
  }
};

struct TrainState {
  ModelConfig config;
  ModelParams params;
  std::vector<std::vector<double>> adam_m;  // one per parameter tensor, same order as params.named()
  std::vector<std::vector<double>> adam_v;
  std::uint64_t step = 0;
  std::optional<NormStats> normalization;

  static TrainState fresh(const ModelConfig& config, std::uint64_t seed) {
    TrainState s;
    s.config = config;
    s.params = init_params(config, seed);
    for (const auto& nt : s.params.named()) {
      s.adam_m.emplace_back(nt.tensor.size(), 0.0);
      s.adam_v.emplace_back(nt.tensor.size(), 0.0);
    }
    return s;
  }
};

// Bias-corrected Adam on the gradients currently stored in the parameters.
inline void adam_step(TrainState& state, double lr, double beta1, double beta2, double eps) {
  const auto named = state.params.named();
  if (state.adam_m.size() != named.size() || state.adam_v.size() != named.size()) {
    throw ContractError("adam_step: optimizer moments do not match the parameter list");
  }
  for (const auto& nt : named) {
    for (double gval : nt.tensor.grad()) {
      if (!std::isfinite(gval)) throw NumericError("non-finite gradient in parameter " + nt.name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t k = 0; k < named.size(); ++k) {
    Tensor p = named[k].tensor;
    auto w = p.mutable_values();
    const auto gr = p.grad();
    auto& m = state.adam_m[k];
    auto& v = state.adam_v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * gr[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * gr[i] * gr[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
}

inline void adam_step(TrainState& state, const TrainConfig& cfg) {
  adam_step(state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
}

inline bool contrast_enabled(const ModelConfig& model, const TrainConfig& train) {
  return model.lambda > 0.0 && (train.sampling.sample_level || train.sampling.segment_level);
}

// Forward pass plus objective for one sequence on `g`. Example sets are drawn
// from each stage's own predictions.
template <class Rng>
Objective sequence_objective(Graph& g, const SensorSequence& seq, const ModelParams& params,
                             const ModelConfig& model, const TrainConfig& train, Rng& rng) {
  const auto outs = mstcn_forward(g, seq, params, model);
  std::vector<ContrastBatch> batches(outs.size());
  if (contrast_enabled(model, train)) {
    for (std::size_t n = 0; n < outs.size(); ++n) {
      const auto preds = argmax_rows(outs[n].probs);
      const auto set = build_example_set(outs[n].projected, preds, seq.labels, train.sampling, rng);
      batches[n] = example_batch(g, outs[n].projected, set);
    }
  }
  return total_objective(g, outs, seq.labels, batches, model.lambda, model.temperature);
}

struct EpochStats {
  std::vector<double> classification;  // per stage, mean over sequences
  std::vector<double> contrast;
  double total = 0.0;
  std::size_t sequences = 0;
  std::size_t optimizer_steps = 0;
};

// One pass over `train` in rng-shuffled order, stepping the optimizer every
// batch_size sequences and once more for any remainder.
template <class Rng>
EpochStats train_epoch(TrainState& state, std::span<const SensorSequence> train, const TrainConfig& cfg, Rng& rng) {
  if (train.empty()) throw ValidationError("train_epoch needs at least one training sequence");
  cfg.validate();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  EpochStats stats;
  stats.classification.assign(state.config.num_stages, 0.0);
  stats.contrast.assign(state.config.num_stages, 0.0);
  std::size_t pending = 0;
  auto step = [&] {
    const double inv = 1.0 / static_cast<double>(pending);
    for (const auto& nt : state.params.named())
      for (auto& gval : nt.tensor.grad()) gval *= inv;
    adam_step(state, cfg);
    state.params.zero_grad();
    pending = 0;
    ++stats.optimizer_steps;
  };

  state.params.zero_grad();
  for (auto idx : order) {
    Graph g;
    const auto obj = sequence_objective(g, train[idx], state.params, state.config, cfg, rng);
    if (!std::isfinite(obj.breakdown.total)) {
      throw NumericError("non-finite loss on training sequence " + std::to_string(idx));
    }
    backward(g, obj.total);
    for (std::size_t n = 0; n < stats.classification.size(); ++n) {
      stats.classification[n] += obj.breakdown.classification[n];
      stats.contrast[n] += obj.breakdown.contrast[n];
    }
    stats.total += obj.breakdown.total;
    ++stats.sequences;
    if (++pending == cfg.batch_size) step();
  }
  if (pending) step();

  const double inv = 1.0 / static_cast<double>(stats.sequences);
  for (auto& v : stats.classification) v *= inv;
  for (auto& v : stats.contrast) v *= inv;
  stats.total *= inv;
  return stats;
}

struct SequencePrediction {
  std::vector<int> predictions;
  std::vector<double> probs;       // T x C, final stage
  std::vector<double> embeddings;  // T x P, final stage projection
};

struct Evaluation {
  MetricsReport report;
  std::vector<SequencePrediction> sequences;
};

inline SequencePrediction predict_sequence(const ModelParams& params, const ModelConfig& config,
                                           const SensorSequence& seq) {
  Graph g(false);
  const auto outs = mstcn_forward(g, seq, params, config);
  const auto& last = outs.back();
  return {argmax_rows(last.probs), {last.probs.values().begin(), last.probs.values().end()},
          {last.projected.values().begin(), last.projected.values().end()}};
}

// Final-stage argmax per sample, with metrics pooled over all sequences.
inline Evaluation evaluate(const ModelParams& params, const ModelConfig& config,
                           std::span<const SensorSequence> sequences) {
  Evaluation ev;
  std::vector<int> truth, pred;
  std::vector<double> probs;
  for (const auto& seq : sequences) {
    auto sp = predict_sequence(params, config, seq);
    truth.insert(truth.end(), seq.labels.begin(), seq.labels.end());
    pred.insert(pred.end(), sp.predictions.begin(), sp.predictions.end());
    probs.insert(probs.end(), sp.probs.begin(), sp.probs.end());
    ev.sequences.push_back(std::move(sp));
  }
  ev.report = evaluate_predictions(truth, pred, probs, config.num_classes);
  return ev;
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   "TSEGCKPT"  u32 version
//   ModelConfig: u64 x 7 (stages, layers, hidden, classes, input_dim,
//                proj_dim, kernel), f64 temperature, f64 lambda
//   u64 optimizer step
//   u32 tensor count, then per tensor:
//     u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values
//   u64 FNV-1a hash of every preceding byte
//
// All integers and doubles are little-endian.

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<unsigned char>& bytes() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> b) : b_(b) {}
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }
  template <class U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str() {
    const auto n = uint<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const unsigned char> b_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(std::span<const unsigned char> b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto c : b) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void write_tensor(ByteWriter& w, const std::string& name, std::span<const std::size_t> shape,
                         std::span<const double> values) {
  w.str(name);
  w.uint(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.uint(static_cast<std::uint64_t>(d));
  for (double v : values) w.f64(v);
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const TrainState& state) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.uint(kCheckpointVersion);
  const auto& c = state.config;
  for (auto v : {c.num_stages, c.layers_per_stage, c.hidden_channels, c.num_classes, c.input_dim,
                 c.projection_dim, c.kernel_size})
    w.uint(static_cast<std::uint64_t>(v));
  w.f64(c.temperature);
  w.f64(c.lambda);
  w.uint(static_cast<std::uint64_t>(state.step));

  const auto named = state.params.named();
  const bool has_moments = state.adam_m.size() == named.size() && state.adam_v.size() == named.size();
  std::uint32_t count = static_cast<std::uint32_t>(named.size() * (has_moments ? 3 : 1));
  if (state.normalization) count += 2;
  w.uint(count);
  for (const auto& nt : named) detail::write_tensor(w, nt.name, nt.tensor.shape(), nt.tensor.values());
  if (has_moments) {
    for (std::size_t k = 0; k < named.size(); ++k) {
      detail::write_tensor(w, "adam_m:" + named[k].name, named[k].tensor.shape(), state.adam_m[k]);
      detail::write_tensor(w, "adam_v:" + named[k].name, named[k].tensor.shape(), state.adam_v[k]);
    }
  }
  if (state.normalization) {
    const std::size_t D = state.normalization->mean.size();
    detail::write_tensor(w, "norm:mean", std::span<const std::size_t>(&D, 1), state.normalization->mean);
    detail::write_tensor(w, "norm:std", std::span<const std::size_t>(&D, 1), state.normalization->stddev);
  }
  w.uint(detail::fnv1a(w.bytes()));
  return std::move(w.bytes());
}

inline TrainState deserialize_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) + 4 + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const auto body = bytes.first(bytes.size() - 8);
  detail::ByteReader tail(bytes.last(8));
  if (tail.uint<std::uint64_t>() != detail::fnv1a(body)) throw FormatError("checkpoint checksum mismatch");

  detail::ByteReader r(body.subspan(sizeof(kCheckpointMagic)));
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  TrainState s;
  auto& c = s.config;
  for (auto* f : {&c.num_stages, &c.layers_per_stage, &c.hidden_channels, &c.num_classes, &c.input_dim,
                  &c.projection_dim, &c.kernel_size})
    *f = static_cast<std::size_t>(r.uint<std::uint64_t>());
  c.temperature = r.f64();
  c.lambda = r.f64();
  try {
    c.validate();
  } catch (const ValidationError& e) {
    throw FormatError(std::string("checkpoint holds an invalid model config: ") + e.what());
  }
  s.step = r.uint<std::uint64_t>();
  s.params = zero_params(c);
  const auto named = s.params.named();
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < named.size(); ++k) index[named[k].name] = k;
  s.adam_m.assign(named.size(), {});
  s.adam_v.assign(named.size(), {});
  std::vector<bool> seen(named.size(), false);
  std::optional<std::vector<double>> norm_mean, norm_std;

  const auto count = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.str();
    const auto rank = r.uint<std::uint32_t>();
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank");
    ad::Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>()));
    const auto n = ad::shape_numel(shape);
    r.need(n * 8);
    std::vector<double> values(n);
    for (auto& v : values) v = r.f64();

    std::string base = name;
    std::vector<double>* moment = nullptr;
    if (name.rfind("adam_m:", 0) == 0 || name.rfind("adam_v:", 0) == 0) base = name.substr(7);
    if (name == "norm:mean") {
      norm_mean = std::move(values);
      continue;
    }
    if (name == "norm:std") {
      norm_std = std::move(values);
      continue;
    }
    const auto it = index.find(base);
    if (it == index.end()) throw FormatError("unknown tensor '" + name + "' in checkpoint");
    Tensor target = named[it->second].tensor;
    if (shape != target.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + ad::shape_str(shape) + ", expected " +
                        ad::shape_str(target.shape()));
    }
    if (name.rfind("adam_m:", 0) == 0) moment = &s.adam_m[it->second];
    if (name.rfind("adam_v:", 0) == 0) moment = &s.adam_v[it->second];
    if (moment) {
      *moment = std::move(values);
    } else {
      std::copy(values.begin(), values.end(), target.mutable_values().begin());
      seen[it->second] = true;
    }
  }
  if (r.pos() != body.size() - sizeof(kCheckpointMagic)) throw FormatError("trailing bytes in checkpoint");
  for (std::size_t k = 0; k < named.size(); ++k) {
    if (!seen[k]) throw FormatError("checkpoint is missing tensor '" + named[k].name + "'");
    if (s.adam_m[k].empty()) s.adam_m[k].assign(named[k].tensor.size(), 0.0);
    if (s.adam_v[k].empty()) s.adam_v[k].assign(named[k].tensor.size(), 0.0);
  }
  if (norm_mean && norm_std && norm_mean->size() == norm_std->size()) {
    s.normalization = NormStats{std::move(*norm_mean), std::move(*norm_std)};
  } else if (norm_mean || norm_std) {
    throw FormatError("incomplete normalization statistics in checkpoint");
  }
  return s;
}

// Written to a temporary name and renamed, so readers never see a partial file.
inline void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(state);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace tempseg
