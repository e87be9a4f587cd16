#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "oracles.hpp"
#include "tempseg/metrics.hpp"

using namespace tempseg;

namespace {

using oracle::set_scores;
using oracle::trapezoid_auc;

std::vector<double> random_probs(std::size_t T, std::size_t C, std::mt19937_64& rng, bool coarse) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<double> p(T * C);
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) {
      double v = u(rng);
      if (coarse) v = std::round(v * 4) + 1;  // force ties
      p[t * C + c] = v;
      s += v;
    }
    for (std::size_t c = 0; c < C; ++c) p[t * C + c] /= s;
  }
  return p;
}

}  // namespace

TEST(Confusion, Examples) {
  const std::vector<int> t = {0, 0, 1}, p = {0, 1, 1};
  const auto m = confusion_matrix(t, p, 2);
  EXPECT_EQ(m.counts, (std::vector<std::size_t>{1, 1, 0, 1}));
  const std::vector<int> y = {2, 0, 2, 1, 2};
  const auto d = confusion_matrix(y, y, 3);
  EXPECT_EQ(d.counts, (std::vector<std::size_t>{1, 0, 0, 0, 1, 0, 0, 0, 3}));
  EXPECT_THROW(confusion_matrix(y, std::vector<int>{0, 0, 0, 0, 3}, 3), ValidationError);
  EXPECT_THROW(confusion_matrix(y, std::vector<int>{0}, 3), DimensionError);
}

TEST(Confusion, RowSumsAreTruthCounts) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + rng() % 50, C = 2 + rng() % 5;
    std::vector<int> t(T), p(T);
    for (std::size_t i = 0; i < T; ++i) {
      t[i] = static_cast<int>(rng() % C);
      p[i] = static_cast<int>(rng() % C);
    }
    const auto m = confusion_matrix(t, p, C);
    EXPECT_EQ(m.total(), T);
    for (std::size_t c = 0; c < C; ++c)
      EXPECT_EQ(m.row_sum(c), static_cast<std::size_t>(std::count(t.begin(), t.end(), static_cast<int>(c))));
  }
}

TEST(PrecisionRecall, HandExample) {
  const std::vector<int> t = {0, 0, 1, 1}, p = {0, 1, 1, 1};
  const auto r = precision_recall_f1(confusion_matrix(t, p, 2));
  EXPECT_DOUBLE_EQ(r.per_class[0].precision, 1.0);
  EXPECT_DOUBLE_EQ(r.per_class[0].recall, 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[1].precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.per_class[1].recall, 1.0);
  EXPECT_NEAR(r.macro_f1, (2.0 / 3.0 + 0.8) / 2.0, 1e-15);
}

TEST(PrecisionRecall, AbsentClassExcludedFromMacro) {
  const std::vector<int> t = {0, 0, 2, 2}, p = {0, 0, 2, 2};
  const auto r = precision_recall_f1(confusion_matrix(t, p, 3));
  EXPECT_EQ(r.macro_precision, 1.0);
  EXPECT_EQ(r.macro_recall, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
  EXPECT_EQ(r.per_class[1].precision, 0.0);
}

TEST(Jaccard, Examples) {
  const std::vector<int> t = {0, 0, 1, 1}, p = {0, 1, 1, 1};
  EXPECT_NEAR(jaccard_index(t, p, 2), (0.5 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(jaccard_index(t, t, 2), 1.0);
  const std::vector<int> flip = {1, 1, 0, 0};
  EXPECT_EQ(jaccard_index(t, flip, 2), 0.0);
}

TEST(Metrics, MatchSetArithmeticOnRandomInputs) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t T = 1 + rng() % 50, C = 2 + rng() % 5;
    std::vector<int> t(T), p(T);
    for (std::size_t i = 0; i < T; ++i) {
      t[i] = static_cast<int>(rng() % C);
      p[i] = rng() % 3 ? t[i] : static_cast<int>(rng() % C);
    }
    const auto r = precision_recall_f1(confusion_matrix(t, p, C));
    double mp = 0, mr = 0, mf = 0, mj = 0;
    int present = 0, unions = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const auto s = set_scores(t, p, static_cast<int>(c));
      EXPECT_EQ(r.per_class[c].precision, s.precision);
      EXPECT_EQ(r.per_class[c].recall, s.recall);
      EXPECT_EQ(r.per_class[c].f1, s.f1);
      EXPECT_EQ(r.per_class[c].jaccard, s.jaccard);
      EXPECT_LE(r.per_class[c].jaccard, std::min(r.per_class[c].precision, r.per_class[c].recall) + 1e-15);
      if (s.present) {
        mp += s.precision;
        mr += s.recall;
        mf += s.f1;
        ++present;
      }
      if (s.in_union) {
        mj += s.jaccard;
        ++unions;
      }
    }
    EXPECT_NEAR(r.macro_precision, mp / present, 1e-15);
    EXPECT_NEAR(r.macro_recall, mr / present, 1e-15);
    EXPECT_NEAR(r.macro_f1, mf / present, 1e-15);
    EXPECT_NEAR(jaccard_index(t, p, C), mj / unions, 1e-15);
  }
}

TEST(Metrics, InvariantUnderClassRelabelling) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 40, C = 4;
    std::vector<int> t(T), p(T), perm = {2, 0, 3, 1};
    for (std::size_t i = 0; i < T; ++i) {
      t[i] = static_cast<int>(rng() % C);
      p[i] = static_cast<int>(rng() % C);
    }
    std::vector<int> t2(T), p2(T);
    for (std::size_t i = 0; i < T; ++i) {
      t2[i] = perm[t[i]];
      p2[i] = perm[p[i]];
    }
    const auto a = precision_recall_f1(confusion_matrix(t, p, C));
    const auto b = precision_recall_f1(confusion_matrix(t2, p2, C));
    EXPECT_NEAR(a.macro_f1, b.macro_f1, 1e-15);
    EXPECT_NEAR(jaccard_index(t, p, C), jaccard_index(t2, p2, C), 1e-15);
  }
}

TEST(AUC, SeparatedAndTiedScores) {
  const std::vector<double> s = {0.1, 0.2, 0.8, 0.9};
  const bool pos[] = {false, false, true, true};
  EXPECT_EQ(binary_auc(s, pos), 1.0);
  const std::vector<double> same(4, 0.3);
  EXPECT_EQ(binary_auc(same, pos), 0.5);
  const bool all[] = {true, true, true, true};
  EXPECT_EQ(binary_auc(s, all), -1.0);
}

TEST(AUC, SixSampleHandCase) {
  const std::vector<double> s = {0.9, 0.4, 0.6, 0.6, 0.2, 0.7};
  const std::vector<bool> p = {true, true, false, true, false, false};
  const bool pb[] = {true, true, false, true, false, false};
  // pairs (pos, neg): 0.9 beats all 3; 0.4 beats 0.2; 0.6 beats 0.2, ties 0.6 -> 3 + 1 + 1.5 = 5.5 / 9
  EXPECT_NEAR(binary_auc(s, pb), 5.5 / 9.0, 1e-15);
  EXPECT_NEAR(binary_auc(s, pb), trapezoid_auc(s, p), 1e-15);
}

TEST(AUC, MatchesTrapezoidOracleAndMonotoneInvariance) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t T = 2 + rng() % 49, C = 2 + rng() % 5;
    std::vector<int> t(T);
    for (auto& v : t) v = static_cast<int>(rng() % C);
    const auto probs = random_probs(T, C, rng, trial % 2 == 0);
    const auto r = roc_auc(t, probs, C);
    double macro = 0;
    int used = 0;
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<double> s(T);
      std::vector<bool> pos(T);
      std::unique_ptr<bool[]> pb(new bool[T]);
      for (std::size_t i = 0; i < T; ++i) {
        s[i] = probs[i * C + c];
        pos[i] = pb[i] = t[i] == static_cast<int>(c);
      }
      const auto np = std::count(pos.begin(), pos.end(), true);
      if (np == 0 || np == static_cast<long>(T)) {
        EXPECT_EQ(r.per_class[c], -1.0);
        continue;
      }
      EXPECT_NEAR(r.per_class[c], trapezoid_auc(s, pos), 1e-9);
      std::vector<double> cubed(s);
      for (auto& v : cubed) v = std::exp(3 * v) - 7;
      EXPECT_NEAR(binary_auc(cubed, std::span<const bool>(pb.get(), T)), r.per_class[c], 1e-12);
      macro += r.per_class[c];
      ++used;
    }
    if (used) EXPECT_NEAR(r.macro, macro / used, 1e-12);
  }
}

TEST(AUC, RejectsRowsThatAreNotDistributions) {
  const std::vector<int> t = {0, 1};
  EXPECT_THROW(roc_auc(t, std::vector<double>{0.5, 0.6, 0.5, 0.5}, 2), ValidationError);
  EXPECT_THROW(roc_auc(t, std::vector<double>{1, 0, 0}, 2), DimensionError);
}

TEST(Report, PerfectPrediction) {
  const std::vector<int> y = {0, 1, 2, 2, 1, 0};
  std::vector<double> p(6 * 3, 0.0);
  for (std::size_t t = 0; t < 6; ++t) p[t * 3 + y[t]] = 1.0;
  const auto r = evaluate_predictions(y, y, p, 3);
  EXPECT_EQ(r.macro_f1, 1.0);
  EXPECT_EQ(r.jaccard, 1.0);
  EXPECT_EQ(r.auc_macro, 1.0);
  EXPECT_EQ(r.macro_precision, 1.0);
  EXPECT_EQ(r.samples, 6u);
}

TEST(Report, UniformRandomPredictionNearChance) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t T = 20000, C = 5;
    std::vector<int> t(T), p(T);
    for (std::size_t i = 0; i < T; ++i) {
      t[i] = static_cast<int>(rng() % C);
      p[i] = static_cast<int>(rng() % C);
    }
    const auto r = evaluate_predictions(t, p, {}, C);
    EXPECT_NEAR(r.macro_f1, 0.2, 0.05);
    EXPECT_GE(r.jaccard, 0.0);
    EXPECT_LE(r.jaccard, 1.0);
  }
}

TEST(Report, FieldsAgreeWithItsConfusionMatrix) {
  std::mt19937_64 rng(5);
  const std::size_t T = 60, C = 4;
  std::vector<int> t(T), p(T);
  for (std::size_t i = 0; i < T; ++i) {
    t[i] = static_cast<int>(rng() % C);
    p[i] = static_cast<int>(rng() % C);
  }
  const auto r = evaluate_predictions(t, p, random_probs(T, C, rng, false), C);
  const auto again = precision_recall_f1(r.confusion);
  EXPECT_EQ(r.macro_f1, again.macro_f1);
  EXPECT_EQ(r.confusion.total(), r.samples);
  for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(r.per_class[c].support, r.confusion.row_sum(c));
}
