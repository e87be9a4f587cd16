#pragma once

// Sample-level evaluation: confusion matrix, per-class and macro
// precision/recall/F1, Jaccard index, and one-vs-rest ROC AUC.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tempseg/error.hpp"

namespace tempseg {

// Row = ground truth, column = prediction.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::size_t> counts;  // row-major C x C

  std::size_t operator()(std::size_t truth, std::size_t pred) const {
    return counts[truth * num_classes + pred];
  }
  std::size_t row_sum(std::size_t c) const {
    std::size_t s = 0;
    for (std::size_t j = 0; j < num_classes; ++j) s += (*this)(c, j);
    return s;
  }
  std::size_t col_sum(std::size_t c) const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < num_classes; ++i) s += (*this)(i, c);
    return s;
  }
  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double jaccard = 0.0;
  std::size_t support = 0;  // truth count
  std::size_t predicted = 0;
};

struct MetricsReport {
  ConfusionMatrix confusion;
  std::vector<ClassScores> per_class;
  std::vector<double> auc_per_class;  // NaN-free; absent classes hold -1
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double jaccard = 0.0;
  double auc_macro = 0.0;
  std::size_t samples = 0;
};

namespace detail {

inline void check_labels(std::span<const int> v, std::size_t C, const char* what) {
  for (int x : v) {
    if (x < 0 || static_cast<std::size_t>(x) >= C) {
      throw ValidationError(std::string(what) + " label " + std::to_string(x) + " outside [0, " +
                            std::to_string(C) + ")");
    }
  }
}

}  // namespace detail

inline ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> pred, std::size_t C) {
  if (truth.size() != pred.size()) throw DimensionError("confusion_matrix: length mismatch");
  detail::check_labels(truth, C, "truth");
  detail::check_labels(pred, C, "prediction");
  ConfusionMatrix m{C, std::vector<std::size_t>(C * C, 0)};
  for (std::size_t t = 0; t < truth.size(); ++t)
    ++m.counts[static_cast<std::size_t>(truth[t]) * C + static_cast<std::size_t>(pred[t])];
  return m;
}

struct PrecisionRecallF1 {
  std::vector<ClassScores> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
};

// Empty denominators give 0. Macro values average over classes that occur in
// the ground truth.
inline PrecisionRecallF1 precision_recall_f1(const ConfusionMatrix& m) {
  PrecisionRecallF1 r;
  std::size_t present = 0;
  for (std::size_t c = 0; c < m.num_classes; ++c) {
    ClassScores s;
    const auto tp = static_cast<double>(m(c, c));
    s.support = m.row_sum(c);
    s.predicted = m.col_sum(c);
    s.precision = s.predicted ? tp / static_cast<double>(s.predicted) : 0.0;
    s.recall = s.support ? tp / static_cast<double>(s.support) : 0.0;
    s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    const auto uni = s.support + s.predicted - m(c, c);
    s.jaccard = uni ? tp / static_cast<double>(uni) : 0.0;
    if (s.support > 0) {
      ++present;
      r.macro_precision += s.precision;
      r.macro_recall += s.recall;
      r.macro_f1 += s.f1;
    }
    r.per_class.push_back(s);
  }
  if (present) {
    r.macro_precision /= static_cast<double>(present);
    r.macro_recall /= static_cast<double>(present);
    r.macro_f1 /= static_cast<double>(present);
  }
  return r;
}

// Per class |truth ∩ pred| / |truth ∪ pred|, averaged over classes with a
// nonempty union.
inline double jaccard_index(std::span<const int> truth, std::span<const int> pred, std::size_t C) {
  const auto m = confusion_matrix(truth, pred, C);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const auto uni = m.row_sum(c) + m.col_sum(c) - m(c, c);
    if (!uni) continue;
    acc += static_cast<double>(m(c, c)) / static_cast<double>(uni);
    ++n;
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

// Mann-Whitney AUC of `scores` for positives vs negatives; ties count 1/2.
inline double binary_auc(std::span<const double> scores, std::span<const bool> positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Average ranks over tie groups.
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t q = i; q <= j; ++q) rank[order[q]] = r;
    i = j + 1;
  }
  double rank_sum = 0.0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i]) {
      rank_sum += rank[i];
      ++npos;
    }
  }
  const std::size_t nneg = n - npos;
  if (npos == 0 || nneg == 0) return -1.0;
  const double u = rank_sum - static_cast<double>(npos) * static_cast<double>(npos + 1) / 2.0;
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

struct RocAuc {
  std::vector<double> per_class;  // -1 when the class is absent from truth (or is everything)
  double macro = 0.0;
};

// One-vs-rest AUC per class from a row-major T x C probability matrix.
inline RocAuc roc_auc(std::span<const int> truth, std::span<const double> probs, std::size_t C) {
  const std::size_t T = truth.size();
  if (probs.size() != T * C) throw DimensionError("roc_auc: probability matrix does not match T x C");
  detail::check_labels(truth, C, "truth");
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += probs[t * C + c];
    if (std::abs(s - 1.0) > 1e-6) throw ValidationError("roc_auc: probability row does not sum to 1");
  }
  RocAuc r;
  std::size_t used = 0;
  std::vector<double> scores(T);
  std::unique_ptr<bool[]> pos(new bool[T]);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < T; ++t) {
      scores[t] = probs[t * C + c];
      pos[t] = truth[t] == static_cast<int>(c);
    }
    const double a = binary_auc(scores, std::span<const bool>(pos.get(), T));
    r.per_class.push_back(a);
    if (a >= 0.0) {
      r.macro += a;
      ++used;
    }
  }
  if (used) r.macro /= static_cast<double>(used);
  return r;
}

inline MetricsReport evaluate_predictions(std::span<const int> truth, std::span<const int> pred,
                                          std::span<const double> probs, std::size_t C) {
  MetricsReport rep;
  rep.confusion = confusion_matrix(truth, pred, C);
  auto prf = precision_recall_f1(rep.confusion);
  rep.per_class = std::move(prf.per_class);
  rep.macro_precision = prf.macro_precision;
  rep.macro_recall = prf.macro_recall;
  rep.macro_f1 = prf.macro_f1;
  rep.jaccard = jaccard_index(truth, pred, C);
  if (!probs.empty()) {
    auto auc = roc_auc(truth, probs, C);
    rep.auc_per_class = std::move(auc.per_class);
    rep.auc_macro = auc.macro;
  }
  rep.samples = truth.size();
  return rep;
}

}  // namespace tempseg
