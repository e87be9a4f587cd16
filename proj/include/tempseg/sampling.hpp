#pragma once

// Example selection for the contrastive term.
//
// Per class, half of the examples come from misclassified samples; if there
// are not enough of those, samples near activity boundaries fill the gap, and
// the remaining slots are drawn uniformly from the class. Ground-truth runs
// are pooled into segment-level embeddings that join the same example set.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iterator>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "tempseg/autodiff.hpp"
#include "tempseg/error.hpp"
#include "tempseg/losses.hpp"

namespace tempseg {

struct SegmentRun {
  int class_label = 0;
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // exclusive

  std::size_t length() const noexcept { return end - start; }
  bool operator==(const SegmentRun&) const = default;
};

struct SamplingConfig {
  std::size_t k_per_class = 16;
  std::size_t boundary_radius = 2;
  bool sample_level = true;   // include selected samples
  bool segment_level = true;  // include pooled ground-truth runs
};

// Every t >= 1 where the label changes.
inline std::vector<std::size_t> find_boundaries(std::span<const int> labels) {
  std::vector<std::size_t> out;
  for (std::size_t t = 1; t < labels.size(); ++t)
    if (labels[t] != labels[t - 1]) out.push_back(t);
  return out;
}

// Maximal constant runs, in order.
inline std::vector<SegmentRun> labels_to_segments(std::span<const int> labels) {
  std::vector<SegmentRun> runs;
  std::size_t start = 0;
  for (std::size_t t = 1; t <= labels.size(); ++t) {
    if (t == labels.size() || labels[t] != labels[start]) {
      runs.push_back({labels[start], start, t});
      start = t;
    }
  }
  return runs;
}

inline std::vector<int> segments_to_labels(std::span<const SegmentRun> runs) {
  std::vector<int> out;
  for (const auto& r : runs) out.insert(out.end(), r.length(), r.class_label);
  return out;
}

// True when t lies within `radius` samples of a boundary b, i.e. in
// [b - radius, b + radius). A boundary sits between samples b-1 and b.
inline std::vector<bool> boundary_zone(std::span<const int> labels, std::size_t radius) {
  std::vector<bool> zone(labels.size(), false);
  for (auto b : find_boundaries(labels)) {
    const std::size_t lo = b >= radius ? b - radius : 0;
    const std::size_t hi = std::min(labels.size(), b + radius);
    for (std::size_t t = lo; t < hi; ++t) zone[t] = true;
  }
  return zone;
}

namespace detail {

// Appends up to n uniformly chosen, distinct elements of pool.
template <class Rng>
void draw_into(std::vector<std::size_t>& out, const std::vector<std::size_t>& pool, std::size_t n, Rng& rng) {
  std::sample(pool.begin(), pool.end(), std::back_inserter(out), n, rng);
}

}  // namespace detail

// Returns, for each class present in `labels`, the selected sample indices.
template <class Rng>
std::map<int, std::vector<std::size_t>> select_hard_examples(std::span<const int> predictions,
                                                             std::span<const int> labels,
                                                             std::size_t k_per_class,
                                                             std::size_t boundary_radius, Rng& rng) {
  if (k_per_class % 2 != 0) throw ValidationError("k_per_class must be even");
  if (predictions.size() != labels.size()) {
    throw DimensionError("select_hard_examples: predictions and labels differ in length");
  }
  const auto zone = boundary_zone(labels, boundary_radius);
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t t = 0; t < labels.size(); ++t) members[labels[t]].push_back(t);

  const std::size_t half = k_per_class / 2;
  std::map<int, std::vector<std::size_t>> out;
  for (const auto& [cls, idx] : members) {
    std::vector<std::size_t> chosen;
    std::vector<bool> taken(labels.size(), false);
    auto remaining = [&](auto pred) {
      std::vector<std::size_t> pool;
      for (auto t : idx)
        if (!taken[t] && pred(t)) pool.push_back(t);
      return pool;
    };
    auto take = [&](const std::vector<std::size_t>& pool, std::size_t n) {
      const auto before = chosen.size();
      detail::draw_into(chosen, pool, n, rng);
      for (auto i = before; i < chosen.size(); ++i) taken[chosen[i]] = true;
    };

    const auto wrong = remaining([&](std::size_t t) { return predictions[t] != cls; });
    take(wrong, half);
    if (wrong.size() < half) take(remaining([&](std::size_t t) { return zone[t]; }), half - chosen.size());
    if (chosen.size() < k_per_class) take(remaining([](std::size_t) { return true; }), k_per_class - chosen.size());

    std::sort(chosen.begin(), chosen.end());
    out.emplace(cls, std::move(chosen));
  }
  return out;
}

struct SegmentFeature {
  int class_label = 0;
  SegmentRun run;
  std::vector<double> embedding;  // unit norm
};

// Mean of each ground-truth run's rows, renormalized. Runs whose mean is the
// zero vector are dropped.
inline std::vector<SegmentFeature> segment_features(const Tensor& projected, std::span<const int> labels) {
  ad::detail::require_rank(projected, 2, "segment_features");
  if (projected.dim(0) != labels.size()) {
    throw DimensionError("segment_features: projected rows differ from label count");
  }
  const std::size_t P = projected.dim(1);
  const auto v = projected.values();
  std::vector<SegmentFeature> out;
  for (const auto& run : labels_to_segments(labels)) {
    std::vector<double> m(P, 0.0);
    for (std::size_t t = run.start; t < run.end; ++t)
      for (std::size_t c = 0; c < P; ++c) m[c] += v[t * P + c];
    double ss = 0.0;
    for (auto& x : m) {
      x /= static_cast<double>(run.length());
      ss += x * x;
    }
    if (ss == 0.0) continue;
    const double n = std::sqrt(ss);
    for (auto& x : m) x /= n;
    out.push_back({run.class_label, run, std::move(m)});
  }
  return out;
}

// The contrastive example collection for one stage of one sequence.
struct ExampleSet {
  std::vector<std::size_t> sample_rows;  // rows of the projected matrix
  std::vector<int> sample_classes;
  std::vector<SegmentRun> segments;      // pooled runs that survived
  std::vector<ContrastExample> sample_examples;
  std::vector<ContrastExample> segment_examples;

  std::size_t size() const noexcept { return sample_rows.size() + segments.size(); }
  bool empty() const noexcept { return size() == 0; }
};

template <class Rng>
ExampleSet build_example_set(const Tensor& projected, std::span<const int> predictions,
                             std::span<const int> labels, const SamplingConfig& config, Rng& rng) {
  ad::detail::require_rank(projected, 2, "build_example_set");
  if (projected.dim(0) != labels.size()) {
    throw DimensionError("build_example_set: projected rows differ from label count");
  }
  const std::size_t P = projected.dim(1);
  const auto v = projected.values();
  ExampleSet set;
  if (config.sample_level && config.k_per_class > 0) {
    for (const auto& [cls, rows] :
         select_hard_examples(predictions, labels, config.k_per_class, config.boundary_radius, rng)) {
      for (auto t : rows) {
        std::vector<double> e(v.begin() + static_cast<std::ptrdiff_t>(t * P),
                              v.begin() + static_cast<std::ptrdiff_t>((t + 1) * P));
        double ss = 0.0;
        for (double x : e) ss += x * x;
        if (ss == 0.0) continue;
        set.sample_rows.push_back(t);
        set.sample_classes.push_back(cls);
        set.sample_examples.push_back({std::move(e), cls, ExampleLevel::sample});
      }
    }
  }
  if (config.segment_level) {
    for (auto& sf : segment_features(projected, labels)) {
      set.segments.push_back(sf.run);
      set.segment_examples.push_back({std::move(sf.embedding), sf.class_label, ExampleLevel::segment});
    }
  }
  return set;
}

// Differentiable embeddings for `set`: gathered sample rows followed by
// renormalized segment means, all taken from `projected`.
inline ContrastBatch example_batch(Graph& g, const Tensor& projected, const ExampleSet& set) {
  ContrastBatch batch;
  if (set.empty()) return batch;
  Tensor samples, segments;
  if (!set.sample_rows.empty()) samples = ad::gather_rows(g, projected, set.sample_rows);
  if (!set.segments.empty()) {
    std::vector<ad::RowRange> ranges;
    for (const auto& r : set.segments) ranges.push_back({r.start, r.end});
    segments = ad::l2_normalize(g, ad::segment_mean(g, projected, ranges));
  }
  if (samples.defined() && segments.defined()) {
    batch.embeddings = ad::concat_rows(g, samples, segments);
  } else {
    batch.embeddings = samples.defined() ? samples : segments;
  }
  batch.classes = set.sample_classes;
  for (const auto& r : set.segments) batch.classes.push_back(r.class_label);
  return batch;
}

}  // namespace tempseg
