#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "tempseg/sampling.hpp"

using namespace tempseg;

namespace {

std::vector<int> random_labels(std::size_t T, int C, std::mt19937_64& rng) {
  std::vector<int> y(T);
  int cur = static_cast<int>(rng() % C);
  for (auto& v : y) {
    if (rng() % 5 == 0) cur = static_cast<int>(rng() % C);
    v = cur;
  }
  return y;
}

Tensor random_projection(std::size_t T, std::size_t P, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  std::vector<double> v(T * P);
  for (auto& x : v) x = n(rng);
  Graph g(false);
  return ad::l2_normalize(g, Tensor::matrix(T, P, v));
}

}  // namespace

TEST(Boundaries, Examples) {
  EXPECT_EQ(find_boundaries(std::vector<int>{0, 0, 1, 1, 2}), (std::vector<std::size_t>{2, 4}));
  EXPECT_TRUE(find_boundaries(std::vector<int>{3, 3, 3}).empty());
  EXPECT_EQ(find_boundaries(std::vector<int>{0, 1, 0, 1}), (std::vector<std::size_t>{1, 2, 3}));
}

TEST(Segments, Examples) {
  const auto runs = labels_to_segments(std::vector<int>{0, 0, 1, 1, 2});
  EXPECT_EQ(runs, (std::vector<SegmentRun>{{0, 0, 2}, {1, 2, 4}, {2, 4, 5}}));
  EXPECT_EQ(labels_to_segments(std::vector<int>{4, 4, 4}), (std::vector<SegmentRun>{{4, 0, 3}}));
  EXPECT_TRUE(labels_to_segments(std::vector<int>{}).empty());
}

TEST(Segments, RoundTripAndPartition) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto y = random_labels(1 + rng() % 60, 4, rng);
    const auto runs = labels_to_segments(y);
    EXPECT_EQ(segments_to_labels(runs), y);
    ASSERT_FALSE(runs.empty());
    EXPECT_EQ(runs.front().start, 0u);
    EXPECT_EQ(runs.back().end, y.size());
    for (std::size_t i = 0; i < runs.size(); ++i) {
      EXPECT_LT(runs[i].start, runs[i].end);
      if (i > 0) {
        EXPECT_EQ(runs[i].start, runs[i - 1].end);
        EXPECT_NE(runs[i].class_label, runs[i - 1].class_label);
      }
    }
  }
}

TEST(BoundaryZone, RadiusAroundEachChange) {
  const std::vector<int> y = {0, 0, 0, 0, 1, 1, 1, 1, 1, 1};
  const auto z = boundary_zone(y, 2);
  const std::vector<bool> expect = {false, false, true, true, true, true, false, false, false, false};
  EXPECT_EQ(z, expect);
}

TEST(HardExamples, AllCorrectNoBoundariesGivesRandomDraw) {
  const std::vector<int> y(30, 2);
  std::mt19937_64 rng(2);
  const auto sel = select_hard_examples(y, y, 4, 2, rng);
  ASSERT_EQ(sel.size(), 1u);
  const auto& idx = sel.at(2);
  EXPECT_EQ(idx.size(), 4u);
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 4u);
  // Different streams pick different subsets.
  std::set<std::vector<std::size_t>> seen;
  for (int s = 0; s < 20; ++s) {
    std::mt19937_64 r(s);
    seen.insert(select_hard_examples(y, y, 4, 2, r).at(2));
  }
  EXPECT_GT(seen.size(), 10u);
}

TEST(HardExamples, MisclassifiedFirstThenBoundaryThenRandom) {
  std::vector<int> labels(20, 0);
  for (std::size_t t = 10; t < 20; ++t) labels[t] = 1;
  auto preds = labels;
  for (std::size_t t : {1u, 4u, 6u}) preds[t] = 1;  // exactly three class-0 mistakes
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const auto sel = select_hard_examples(preds, labels, 8, 2, rng);
    const auto& c0 = sel.at(0);
    const std::set<std::size_t> s(c0.begin(), c0.end());
    ASSERT_EQ(c0.size(), 8u);
    ASSERT_EQ(s.size(), 8u);
    for (std::size_t t : {1u, 4u, 6u}) EXPECT_TRUE(s.count(t));
    EXPECT_TRUE(s.count(8) || s.count(9));  // boundary zone of class 0 is {8, 9}
    for (auto t : c0) EXPECT_EQ(labels[t], 0);
    // class 1 has no mistakes: 4 from its zone {10, 11} (only 2 exist), then random.
    const auto& c1 = sel.at(1);
    EXPECT_EQ(c1.size(), 8u);
    EXPECT_TRUE(std::count(c1.begin(), c1.end(), 10u) && std::count(c1.begin(), c1.end(), 11u));
  }
}

TEST(HardExamples, ManyMistakesFillHalfFromMistakes) {
  std::vector<int> labels(40, 0), preds(40, 1);
  std::mt19937_64 rng(3);
  const auto sel = select_hard_examples(preds, labels, 6, 2, rng);
  EXPECT_EQ(sel.at(0).size(), 6u);  // 3 mistakes + 3 random, and everything is a mistake
}

TEST(HardExamples, AbsentClassHasNoEntryAndOddKRejected) {
  const std::vector<int> y = {0, 0, 2, 2};
  std::mt19937_64 rng(4);
  const auto sel = select_hard_examples(y, y, 2, 1, rng);
  EXPECT_FALSE(sel.count(1));
  EXPECT_EQ(sel.size(), 2u);
  EXPECT_THROW(select_hard_examples(y, y, 3, 1, rng), ValidationError);
}

TEST(SegmentFeatures, IdenticalRowsGiveThatRow) {
  const std::vector<double> u = {0.6, 0.8};
  std::vector<double> v;
  for (int i = 0; i < 5; ++i) v.insert(v.end(), u.begin(), u.end());
  const auto f = segment_features(Tensor::matrix(5, 2, v), std::vector<int>(5, 1));
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].embedding, u);
  EXPECT_EQ(f[0].class_label, 1);
}

TEST(SegmentFeatures, OrthogonalPairAndZeroRunsDropped) {
  const auto f = segment_features(Tensor::matrix(4, 2, {1, 0, 0, 1, 1, 0, -1, 0}), std::vector<int>{0, 0, 1, 1});
  ASSERT_EQ(f.size(), 1u);  // second run averages to zero
  EXPECT_NEAR(f[0].embedding[0], 1 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(f[0].embedding[1], 1 / std::sqrt(2.0), 1e-15);
}

TEST(ExampleSet, EmptySelectionStillHasSegments) {
  std::mt19937_64 rng(5);
  const auto y = random_labels(40, 3, rng);
  const auto proj = random_projection(40, 4, rng);
  SamplingConfig c;
  c.k_per_class = 0;
  const auto set = build_example_set(proj, y, y, c, rng);
  EXPECT_TRUE(set.sample_examples.empty());
  EXPECT_EQ(set.segment_examples.size(), labels_to_segments(y).size());
}

TEST(ExampleSet, DeterministicForFixedSeed) {
  std::mt19937_64 rng(6);
  const auto y = random_labels(60, 4, rng);
  const auto preds = random_labels(60, 4, rng);
  const auto proj = random_projection(60, 4, rng);
  SamplingConfig c;
  c.k_per_class = 6;
  std::mt19937_64 a(9), b(9);
  const auto s1 = build_example_set(proj, preds, y, c, a), s2 = build_example_set(proj, preds, y, c, b);
  EXPECT_EQ(s1.sample_rows, s2.sample_rows);
  EXPECT_EQ(s1.segments, s2.segments);
}

TEST(ExampleSet, SizesMatchEnumeration) {
  std::mt19937_64 rng(7);
  const auto y = random_labels(50, 4, rng);
  const auto preds = random_labels(50, 4, rng);
  const auto proj = random_projection(50, 3, rng);
  SamplingConfig c;
  c.k_per_class = 8;
  // Scripted oracle: each class contributes min(K, class count) samples and
  // each ground-truth run one segment.
  std::map<int, std::size_t> count;
  for (int v : y) ++count[v];
  std::size_t expect_samples = 0;
  for (auto [k, n] : count) expect_samples += std::min<std::size_t>(8, n);
  std::size_t runs = 1;
  for (std::size_t t = 1; t < y.size(); ++t) runs += y[t] != y[t - 1];
  std::mt19937_64 r(1);
  const auto set = build_example_set(proj, preds, y, c, r);
  EXPECT_EQ(set.sample_examples.size(), expect_samples);
  EXPECT_EQ(set.segment_examples.size(), runs);
  Graph g;
  const auto batch = example_batch(g, proj, set);
  EXPECT_EQ(batch.embeddings.dim(0), expect_samples + runs);
  EXPECT_EQ(batch.classes.size(), expect_samples + runs);
}

TEST(ExampleSet, BatchRowsEqualTheExamples) {
  std::mt19937_64 rng(8);
  const auto y = random_labels(30, 3, rng);
  const auto proj = random_projection(30, 3, rng);
  SamplingConfig c;
  c.k_per_class = 4;
  const auto set = build_example_set(proj, y, y, c, rng);
  Graph g;
  const auto batch = example_batch(g, proj, set);
  std::vector<ContrastExample> all = set.sample_examples;
  all.insert(all.end(), set.segment_examples.begin(), set.segment_examples.end());
  for (std::size_t i = 0; i < all.size(); ++i) {
    EXPECT_EQ(batch.classes[i], all[i].class_label);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(batch.embeddings.at(i, j), all[i].embedding[j], 1e-15);
  }
}
