#pragma once

// Multi-stage temporal convolutional network.
//
// Each stage maps its input through a 1x1 adapter, a stack of dilated
// residual blocks (dilation 2^i at block i), and then two heads: a 1x1
// classifier producing logits and a two-layer projection head producing
// unit-norm embeddings. Stage 1 reads the raw features; every later stage
// reads the softmax probabilities of the stage before it.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tempseg/autodiff.hpp"
#include "tempseg/error.hpp"
#include "tempseg/sequence.hpp"

namespace tempseg {

using ad::Graph;
using ad::Tensor;

struct ModelConfig {
  std::size_t num_stages = 2;
  std::size_t layers_per_stage = 6;
  std::size_t hidden_channels = 32;
  std::size_t num_classes = 5;
  std::size_t input_dim = 6;
  std::size_t projection_dim = 16;
  std::size_t kernel_size = 3;
  double temperature = 0.1;
  double lambda = 1.0;

  void validate() const {
    if (num_stages < 1) throw ValidationError("num_stages must be >= 1");
    if (layers_per_stage < 1) throw ValidationError("layers_per_stage must be >= 1");
    if (hidden_channels < 1) throw ValidationError("hidden_channels must be >= 1");
    if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
    if (input_dim < 1) throw ValidationError("input_dim must be >= 1");
    if (projection_dim < 1) throw ValidationError("projection_dim must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ValidationError("kernel_size must be odd");
    if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
    if (!(lambda >= 0.0)) throw ValidationError("lambda must be nonnegative");
  }

  // Dilation of residual block i.
  static std::size_t dilation(std::size_t i) { return std::size_t{1} << i; }

  bool operator==(const ModelConfig&) const = default;
};

struct ResidualBlock {
  Tensor dilated_w;    // F x F x k
  Tensor dilated_b;    // F
  Tensor pointwise_w;  // F x F x 1
  Tensor pointwise_b;  // F
};

struct StageParams {
  Tensor adapter_w;  // F x C_in x 1
  Tensor adapter_b;
  std::vector<ResidualBlock> blocks;
  Tensor classifier_w;  // C x F x 1
  Tensor classifier_b;
  Tensor proj_hidden_w;  // F x F x 1
  Tensor proj_hidden_b;
  Tensor proj_out_w;  // P x F x 1
  Tensor proj_out_b;

  std::size_t input_channels() const { return adapter_w.dim(1); }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelParams {
  std::vector<StageParams> stages;

  // Every parameter with a stable name, in a fixed order.
  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto& st = stages[s];
      const std::string p = "stage" + std::to_string(s) + ".";
      out.push_back({p + "adapter.w", st.adapter_w});
      out.push_back({p + "adapter.b", st.adapter_b});
      for (std::size_t l = 0; l < st.blocks.size(); ++l) {
        const std::string b = p + "block" + std::to_string(l) + ".";
        out.push_back({b + "dilated.w", st.blocks[l].dilated_w});
        out.push_back({b + "dilated.b", st.blocks[l].dilated_b});
        out.push_back({b + "pointwise.w", st.blocks[l].pointwise_w});
        out.push_back({b + "pointwise.b", st.blocks[l].pointwise_b});
      }
      out.push_back({p + "classifier.w", st.classifier_w});
      out.push_back({p + "classifier.b", st.classifier_b});
      out.push_back({p + "proj_hidden.w", st.proj_hidden_w});
      out.push_back({p + "proj_hidden.b", st.proj_hidden_b});
      out.push_back({p + "proj_out.w", st.proj_out_w});
      out.push_back({p + "proj_out.b", st.proj_out_b});
    }
    return out;
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (auto& nt : named()) out.push_back(nt.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& nt : named()) n += nt.tensor.size();
    return n;
  }

  void zero_grad() const {
    for (auto& nt : named()) nt.tensor.zero_grad();
  }

  // Deep copy; Tensor handles are otherwise shared.
  ModelParams clone() const {
    ModelParams c = *this;
    auto copy = [](Tensor& t) { t = Tensor::from(t.shape(), {t.values().begin(), t.values().end()}, true); };
    for (auto& st : c.stages) {
      for (Tensor* t : {&st.adapter_w, &st.adapter_b, &st.classifier_w, &st.classifier_b,
                        &st.proj_hidden_w, &st.proj_hidden_b, &st.proj_out_w, &st.proj_out_b})
        copy(*t);
      for (auto& b : st.blocks)
        for (Tensor* t : {&b.dilated_w, &b.dilated_b, &b.pointwise_w, &b.pointwise_b}) copy(*t);
    }
    return c;
  }
};

// Allocates zero-valued parameters with the shapes implied by `config`.
inline ModelParams zero_params(const ModelConfig& config) {
  config.validate();
  const auto F = config.hidden_channels, C = config.num_classes, P = config.projection_dim;
  const auto k = config.kernel_size;
  ModelParams params;
  for (std::size_t s = 0; s < config.num_stages; ++s) {
    StageParams st;
    const std::size_t cin = s == 0 ? config.input_dim : C;
    st.adapter_w = Tensor::zeros({F, cin, 1}, true);
    st.adapter_b = Tensor::zeros({F}, true);
    for (std::size_t l = 0; l < config.layers_per_stage; ++l) {
      st.blocks.push_back({Tensor::zeros({F, F, k}, true), Tensor::zeros({F}, true),
                           Tensor::zeros({F, F, 1}, true), Tensor::zeros({F}, true)});
    }
    st.classifier_w = Tensor::zeros({C, F, 1}, true);
    st.classifier_b = Tensor::zeros({C}, true);
    st.proj_hidden_w = Tensor::zeros({F, F, 1}, true);
    st.proj_hidden_b = Tensor::zeros({F}, true);
    st.proj_out_w = Tensor::zeros({P, F, 1}, true);
    st.proj_out_b = Tensor::zeros({P}, true);
    params.stages.push_back(std::move(st));
  }
  return params;
}

// Weights uniform in +-sqrt(6 / fan_in) with fan_in = C_in * k; biases zero.
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams params = zero_params(config);
  std::mt19937_64 rng(seed);
  for (auto& nt : params.named()) {
    if (nt.tensor.rank() != 3) continue;
    const double fan_in = static_cast<double>(nt.tensor.dim(1) * nt.tensor.dim(2));
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : nt.tensor.mutable_values()) w = dist(rng);
  }
  return params;
}

// 1x1 convolution.
inline Tensor pointwise(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b) {
  return ad::conv1d_dilated(g, x, w, b, 1);
}

// Adapter followed by the dilated residual blocks; returns T x F features.
inline Tensor sstcn_forward(Graph& g, const Tensor& input, const StageParams& stage) {
  if (input.rank() != 2 || input.dim(1) != stage.input_channels()) {
    throw DimensionError("stage expects " + std::to_string(stage.input_channels()) +
                         " input channels, got " + ad::shape_str(input.shape()));
  }
  Tensor h = pointwise(g, input, stage.adapter_w, stage.adapter_b);
  for (std::size_t i = 0; i < stage.blocks.size(); ++i) {
    const auto& blk = stage.blocks[i];
    Tensor inner = ad::relu(g, ad::conv1d_dilated(g, h, blk.dilated_w, blk.dilated_b,
                                                  ModelConfig::dilation(i)));
    h = ad::add(g, h, pointwise(g, inner, blk.pointwise_w, blk.pointwise_b));
  }
  return h;
}

inline Tensor classify(Graph& g, const Tensor& features, const StageParams& stage) {
  return pointwise(g, features, stage.classifier_w, stage.classifier_b);
}

// Two-layer head with ReLU, then unit-L2 rows.
inline Tensor project(Graph& g, const Tensor& features, const StageParams& stage) {
  Tensor hidden = ad::relu(g, pointwise(g, features, stage.proj_hidden_w, stage.proj_hidden_b));
  return ad::l2_normalize(g, pointwise(g, hidden, stage.proj_out_w, stage.proj_out_b));
}

struct StageOutput {
  Tensor features;   // T x F
  Tensor logits;     // T x C
  Tensor probs;      // T x C
  Tensor projected;  // T x P, unit rows (or zero)
};

inline StageOutput stage_forward(Graph& g, const Tensor& input, const StageParams& stage) {
  StageOutput out;
  out.features = sstcn_forward(g, input, stage);
  out.logits = classify(g, out.features, stage);
  out.probs = ad::softmax(g, out.logits);
  out.projected = project(g, out.features, stage);
  return out;
}

inline Tensor features_tensor(const SensorSequence& seq) {
  return Tensor::matrix(seq.length(), seq.dim, seq.features);
}

inline std::vector<StageOutput> mstcn_forward(Graph& g, const Tensor& input, const ModelParams& params) {
  std::vector<StageOutput> outs;
  outs.reserve(params.stages.size());
  Tensor x = input;
  for (const auto& stage : params.stages) {
    outs.push_back(stage_forward(g, x, stage));
    x = outs.back().probs;
  }
  return outs;
}

inline std::vector<StageOutput> mstcn_forward(Graph& g, const SensorSequence& seq,
                                              const ModelParams& params, const ModelConfig& config) {
  if (seq.dim != config.input_dim) {
    throw DimensionError("sequence has " + std::to_string(seq.dim) + " channels, model expects " +
                         std::to_string(config.input_dim));
  }
  return mstcn_forward(g, features_tensor(seq), params);
}

// Row-wise argmax of a T x C tensor.
inline std::vector<int> argmax_rows(const Tensor& probs) {
  const std::size_t T = probs.dim(0), C = probs.dim(1);
  const auto v = probs.values();
  std::vector<int> out(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto row = v.subspan(t * C, C);
    out[t] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace tempseg
