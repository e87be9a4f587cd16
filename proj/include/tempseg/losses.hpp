#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>

#include "tempseg/autodiff.hpp"
#include "tempseg/error.hpp"
#include "tempseg/model.hpp"

namespace tempseg {

enum class ExampleLevel { sample, segment };

struct ContrastExample {
  std::vector<double> embedding;  // unit L2 norm
  int class_label = 0;
  ExampleLevel level = ExampleLevel::sample;

  static ContrastExample make(std::vector<double> embedding, int class_label, ExampleLevel level) {
    double ss = 0.0;
    for (double v : embedding) ss += v * v;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-9) {
      throw ValidationError("contrast example embedding must have unit norm, got " +
                            std::to_string(std::sqrt(ss)));
    }
    return {std::move(embedding), class_label, level};
  }
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("embedding dimensions differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

// -log( e^{a.p/tau} / (e^{a.p/tau} + sum_n e^{a.n/tau}) )
inline double info_nce(std::span<const double> anchor, std::span<const double> positive,
                       const std::vector<std::vector<double>>& negatives, double tau) {
  if (!(tau > 0.0)) throw ValidationError("info_nce: temperature must be positive");
  if (negatives.empty()) throw ValidationError("info_nce: at least one negative is required");
  const double pos = detail::dot(anchor, positive) / tau;
  std::vector<double> neg;
  neg.reserve(negatives.size());
  for (const auto& n : negatives) neg.push_back(detail::dot(anchor, n) / tau);
  const double m = std::max(pos, *std::max_element(neg.begin(), neg.end()));
  double denom = std::exp(pos - m);
  for (double v : neg) denom += std::exp(v - m);
  return std::log(denom) - (pos - m);
}

struct ContrastLoss {
  Tensor loss;  // scalar
  std::size_t valid_anchors = 0;
  std::size_t skipped_anchors = 0;  // anchors with no positive or no negative

  bool degenerate() const noexcept { return valid_anchors == 0; }
};

// Supervised contrast over the rows of `embeddings` (N x P) with class ids.
//
// For anchor i with positives P_i (same class, excluding i) and negatives N_i:
//   L_i = 1/|P_i| sum_{j in P_i} -log( e_ij / (e_ij + sum_{n in N_i} e_in) ),
//   e_ij = exp(x_i . x_j / tau).
// The loss is the mean of L_i over anchors with nonempty P_i and N_i, or 0 if
// there are none.
inline ContrastLoss supervised_contrast(Graph& g, const Tensor& embeddings,
                                        std::span<const int> classes, double tau) {
  using ad::detail::as_mat;
  using ad::detail::RowMat;
  if (!(tau > 0.0)) throw ValidationError("supervised_contrast: temperature must be positive");
  ad::detail::require_rank(embeddings, 2, "supervised_contrast");
  const std::size_t N = embeddings.dim(0), P = embeddings.dim(1);
  if (classes.size() != N) {
    throw DimensionError("supervised_contrast: " + std::to_string(classes.size()) +
                         " class ids for " + std::to_string(N) + " embeddings");
  }
  const auto E = as_mat(embeddings.values(), N, P);
  const RowMat A = (E * E.transpose()) / tau;

  // Per valid anchor: shift, positive denominators, negative sum.
  struct Anchor {
    std::size_t i;
    double shift;
    double neg_sum;
    std::vector<std::size_t> pos;
    std::vector<std::size_t> neg;
    std::vector<double> denom;
  };
  std::vector<Anchor> anchors;
  ContrastLoss result;
  for (std::size_t i = 0; i < N; ++i) {
    Anchor a{i, -std::numeric_limits<double>::infinity(), 0.0, {}, {}, {}};
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      (classes[j] == classes[i] ? a.pos : a.neg).push_back(j);
      a.shift = std::max(a.shift, A(i, j));
    }
    if (a.pos.empty() || a.neg.empty()) {
      ++result.skipped_anchors;
      continue;
    }
    anchors.push_back(std::move(a));
  }
  result.valid_anchors = anchors.size();

  double total = 0.0;
  for (auto& a : anchors) {
    for (auto n : a.neg) a.neg_sum += std::exp(A(a.i, n) - a.shift);
    double li = 0.0;
    for (auto j : a.pos) {
      const double z = A(a.i, j) - a.shift;
      const double d = std::exp(z) + a.neg_sum;
      a.denom.push_back(d);
      li += std::log(d) - z;
    }
    total += li / static_cast<double>(a.pos.size());
  }
  if (!anchors.empty()) total /= static_cast<double>(anchors.size());

  const bool tracked = g.tracks({&embeddings}) && !anchors.empty();
  result.loss = Tensor::scalar(total, tracked);
  if (tracked) {
    Tensor out = result.loss;
    g.record("supervised_contrast", {embeddings}, out,
             [embeddings, out, anchors = std::move(anchors), A, N, P, tau] {
               const double gy = out.grad()[0];
               RowMat dA = RowMat::Zero(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(N));
               const double inv_anchors = 1.0 / static_cast<double>(anchors.size());
               for (const auto& a : anchors) {
                 const double w = gy * inv_anchors / static_cast<double>(a.pos.size());
                 double inv_denom_sum = 0.0;
                 for (std::size_t q = 0; q < a.pos.size(); ++q) {
                   const double e = std::exp(A(a.i, a.pos[q]) - a.shift);
                   dA(a.i, a.pos[q]) += w * (e / a.denom[q] - 1.0);
                   inv_denom_sum += 1.0 / a.denom[q];
                 }
                 for (auto n : a.neg) dA(a.i, n) += w * std::exp(A(a.i, n) - a.shift) * inv_denom_sum;
               }
               const RowMat dS = (dA + dA.transpose()) / tau;
               const auto E = as_mat(embeddings.values(), N, P);
               as_mat(embeddings.grad(), N, P).noalias() += dS * E;
             });
  }
  return result;
}

struct ContrastValue {
  double loss = 0.0;
  std::size_t valid_anchors = 0;
  std::size_t skipped_anchors = 0;
};

namespace detail {

inline bool canonical_less(const ContrastExample& a, const ContrastExample& b) {
  return std::tie(a.class_label, a.level, a.embedding) < std::tie(b.class_label, b.level, b.embedding);
}

}  // namespace detail

// Value-only form over an example set. Examples are put in a canonical order
// first so that the result does not depend on how the set was listed.
inline ContrastValue supervised_contrast(std::vector<ContrastExample> examples, double tau) {
  if (!(tau > 0.0)) throw ValidationError("supervised_contrast: temperature must be positive");
  if (examples.empty()) return {};
  std::sort(examples.begin(), examples.end(), detail::canonical_less);
  const std::size_t P = examples.front().embedding.size();
  std::vector<double> flat;
  std::vector<int> classes;
  for (const auto& e : examples) {
    if (e.embedding.size() != P) throw DimensionError("supervised_contrast: embedding dimensions differ");
    flat.insert(flat.end(), e.embedding.begin(), e.embedding.end());
    classes.push_back(e.class_label);
  }
  Graph g(false);
  const auto r = supervised_contrast(g, Tensor::matrix(examples.size(), P, std::move(flat)), classes, tau);
  return {r.loss.item(), r.valid_anchors, r.skipped_anchors};
}

// Supervised contrast over the union of sample- and segment-level examples,
// which covers sample-to-sample, sample-to-segment and segment-to-segment pairs.
inline ContrastValue multilevel_contrast(const std::vector<ContrastExample>& sample_examples,
                                         const std::vector<ContrastExample>& segment_examples,
                                         double tau) {
  std::vector<ContrastExample> all = sample_examples;
  all.insert(all.end(), segment_examples.begin(), segment_examples.end());
  return supervised_contrast(std::move(all), tau);
}

// Embeddings for one stage's contrast term; an undefined tensor means the
// stage contributes no contrast.
struct ContrastBatch {
  Tensor embeddings;  // N x P
  std::vector<int> classes;

  bool empty() const noexcept { return !embeddings.defined() || classes.empty(); }
};

struct LossBreakdown {
  std::vector<double> classification;  // per stage
  std::vector<double> contrast;        // per stage
  std::vector<std::size_t> skipped_anchors;
  double total = 0.0;
};

struct Objective {
  Tensor total;
  LossBreakdown breakdown;
};

// sum over stages of (cross-entropy_n + lambda * contrast_n).
inline Objective total_objective(Graph& g, const std::vector<StageOutput>& stages,
                                 std::span<const int> labels,
                                 const std::vector<ContrastBatch>& batches, double lambda,
                                 double tau) {
  if (batches.size() != stages.size()) {
    throw ContractError("total_objective: " + std::to_string(batches.size()) +
                        " example sets for " + std::to_string(stages.size()) + " stages");
  }
  if (stages.empty()) throw ContractError("total_objective: no stages");
  Objective obj;
  Tensor total;
  for (std::size_t n = 0; n < stages.size(); ++n) {
    auto ce = ad::softmax_cross_entropy(g, stages[n].logits, labels);
    Tensor term = ce.loss;
    double con = 0.0;
    std::size_t skipped = 0;
    if (!batches[n].empty()) {
      auto sc = supervised_contrast(g, batches[n].embeddings, batches[n].classes, tau);
      con = sc.loss.item();
      skipped = sc.skipped_anchors;
      if (lambda != 0.0) term = ad::add(g, term, ad::scale(g, sc.loss, lambda));
    }
    obj.breakdown.classification.push_back(ce.loss.item());
    obj.breakdown.contrast.push_back(con);
    obj.breakdown.skipped_anchors.push_back(skipped);
    total = n == 0 ? term : ad::add(g, total, term);
  }
  obj.total = total;
  obj.breakdown.total = total.item();
  return obj;
}

}  // namespace tempseg
