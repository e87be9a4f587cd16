#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "tempseg/autodiff.hpp"

using namespace tempseg;
using tempseg::ad::Shape;
using tempseg::ad::Tensor;
using tempseg::ad::Graph;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool grad = true) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Direct summation with zero padding; the oracle for conv1d_dilated.
std::vector<double> naive_conv(const std::vector<double>& x, std::size_t T, std::size_t cin,
                               const std::vector<double>& w, std::size_t cout, std::size_t k,
                               const std::vector<double>& b, std::size_t d) {
  std::vector<double> y(T * cout);
  const long half = static_cast<long>(k - 1) / 2;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t o = 0; o < cout; ++o) {
      double acc = b[o];
      for (std::size_t j = 0; j < k; ++j) {
        const long s = static_cast<long>(t) + (static_cast<long>(j) - half) * static_cast<long>(d);
        if (s < 0 || s >= static_cast<long>(T)) continue;
        for (std::size_t i = 0; i < cin; ++i) acc += w[(o * cin + i) * k + j] * x[s * cin + i];
      }
      y[t * cout + o] = acc;
    }
  }
  return y;
}

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Tensor, ShapeAndValueLengthMustAgree) {
  EXPECT_THROW(Tensor::from({2, 3}, std::vector<double>(5)), DimensionError);
  auto t = Tensor::from({2, 3}, std::vector<double>(6), true);
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad().size(), 6u);
  EXPECT_TRUE(t.has_grad());
}

TEST(Conv1d, IdentityKernelReturnsInput) {
  Graph g;
  auto x = Tensor::matrix(4, 1, {1.5, -2, 0.25, 9});
  auto y = ad::conv1d_dilated(g, x, Tensor::from({1, 1, 1}, {1.0}), Tensor::vector({0.0}), 3);
  EXPECT_EQ(vals(y), vals(x));
}

TEST(Conv1d, OnesKernelWithZeroPadding) {
  Graph g;
  auto y = ad::conv1d_dilated(g, Tensor::matrix(4, 1, {1, 2, 3, 4}), Tensor::from({1, 1, 3}, {1, 1, 1}),
                              Tensor::vector({0.0}), 1);
  EXPECT_EQ(vals(y), (std::vector<double>{3, 6, 9, 7}));
}

TEST(Conv1d, BiasOnly) {
  Graph g;
  auto y = ad::conv1d_dilated(g, Tensor::matrix(5, 2, std::vector<double>(10, 3.0)), Tensor::zeros({3, 2, 3}),
                              Tensor::vector({0.5, -1, 2}), 2);
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_EQ(y.at(t, 0), 0.5);
    EXPECT_EQ(y.at(t, 1), -1.0);
    EXPECT_EQ(y.at(t, 2), 2.0);
  }
}

TEST(Conv1d, MatchesDirectSummationAcrossDilations) {
  std::mt19937_64 rng(11);
  for (std::size_t d : {1u, 2u, 4u, 8u, 32u}) {
    for (std::size_t k : {1u, 3u, 5u}) {
      const std::size_t T = 19, cin = 3, cout = 4;
      auto x = random_tensor({T, cin}, rng), w = random_tensor({cout, cin, k}, rng), b = random_tensor({cout}, rng);
      Graph g;
      auto y = ad::conv1d_dilated(g, x, w, b, d);
      const auto ref = naive_conv(vals(x), T, cin, vals(w), cout, k, vals(b), d);
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.values()[i], ref[i], 1e-12) << "d=" << d;
    }
  }
}

TEST(Conv1d, RejectsBadArguments) {
  Graph g;
  auto x = Tensor::zeros({4, 2});
  EXPECT_THROW(ad::conv1d_dilated(g, x, Tensor::zeros({1, 2, 2}), Tensor::zeros({1}), 1), ValidationError);
  EXPECT_THROW(ad::conv1d_dilated(g, x, Tensor::zeros({1, 2, 3}), Tensor::zeros({1}), 0), ValidationError);
  EXPECT_THROW(ad::conv1d_dilated(g, x, Tensor::zeros({1, 3, 3}), Tensor::zeros({1}), 1), DimensionError);
  EXPECT_THROW(ad::conv1d_dilated(g, x, Tensor::zeros({1, 2, 3}), Tensor::zeros({2}), 1), DimensionError);
}

TEST(TensorOps, ElementwiseExamples) {
  Graph g;
  EXPECT_EQ(vals(ad::relu(g, Tensor::vector({-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
  auto x = Tensor::vector({1.25, -3, 7});
  EXPECT_EQ(vals(ad::add(g, x, Tensor::zeros({3}))), vals(x));
  auto n = ad::l2_normalize(g, Tensor::vector({3, 4}));
  EXPECT_NEAR(n.at(0), 0.6, 1e-15);
  EXPECT_NEAR(n.at(1), 0.8, 1e-15);
  EXPECT_EQ(vals(ad::l2_normalize(g, Tensor::vector({0, 0}))), (std::vector<double>{0, 0}));
  EXPECT_DOUBLE_EQ(ad::mean(g, Tensor::vector({1, 2, 3, 6})).item(), 3.0);
  EXPECT_DOUBLE_EQ(ad::dot(g, Tensor::vector({1, 2}), Tensor::vector({3, 4})).item(), 11.0);
  EXPECT_THROW(ad::log(g, Tensor::vector({1, 0})), DomainError);
  EXPECT_THROW(ad::add(g, Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

TEST(TensorOps, MatmulMatchesNaiveProduct) {
  std::mt19937_64 rng(5);
  auto a = random_tensor({4, 6}, rng), b = random_tensor({6, 3}, rng);
  Graph g;
  auto c = ad::matmul(g, a, b);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 6; ++k) s += a.at(i, k) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-12);
    }
  }
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogC) {
  Graph g;
  std::vector<int> labels = {0, 3, 2};
  auto ce = ad::softmax_cross_entropy(g, Tensor::zeros({3, 4}, true), labels);
  EXPECT_NEAR(ce.loss.item(), std::log(4.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, HandValues) {
  Graph g;
  std::vector<int> label = {0};
  EXPECT_NEAR(ad::softmax_cross_entropy(g, Tensor::matrix(1, 2, {1, 0}), label).loss.item(),
              std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_LT(ad::softmax_cross_entropy(g, Tensor::matrix(1, 3, {200, 0, 0}), label).loss.item(), 1e-80);
  std::vector<int> bad = {2};
  EXPECT_THROW(ad::softmax_cross_entropy(g, Tensor::matrix(1, 2, {1, 0}), bad), ValidationError);
}

TEST(SoftmaxCrossEntropy, ProbabilityRowsSumToOne) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({7, 5}, rng);
  for (auto& v : x.mutable_values()) v *= 40;
  Graph g;
  std::vector<int> y(7, 1);
  auto ce = ad::softmax_cross_entropy(g, x, y);
  for (std::size_t t = 0; t < 7; ++t) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += ce.probs.at(t, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Backward, LinearFunctionGradientIsTheCoefficient) {
  Graph g;
  auto w = Tensor::vector({0.5, -1, 2}, true);
  auto x = Tensor::vector({3, 4, -5});
  ad::backward(g, ad::dot(g, w, x));
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), vals(x));
}

TEST(Backward, DeadReluPassesNoGradient) {
  Graph g;
  auto w = Tensor::vector({-1, -0.5, -3}, true);
  ad::backward(g, ad::mean(g, ad::relu(g, w)));
  for (double v : w.grad()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RequiresScalarLoss) {
  Graph g;
  auto w = Tensor::vector({1, 2}, true);
  EXPECT_THROW(ad::backward(g, ad::scale(g, w, 2.0)), ContractError);
}

TEST(Backward, GraphIsTopologicallyOrderedAndEachNodeRunsOnce) {
  Graph g;
  auto w = Tensor::vector({1, 2}, true);
  auto a = ad::scale(g, w, 2.0);
  auto b = ad::add(g, a, w);
  auto loss = ad::dot(g, b, b);
  ASSERT_EQ(g.size(), 3u);
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (const auto& in : g.nodes()[i].inputs) {
      for (std::size_t j = i; j < g.size(); ++j) EXPECT_FALSE(g.nodes()[j].output.same_as(in));
    }
  }
  ad::backward(g, loss);
  // loss = 9 |w|^2 -> grad = 18 w; a second visit of any node would change it.
  EXPECT_DOUBLE_EQ(w.grad()[0], 18.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 36.0);
}

TEST(GradCheck, QuadraticIsExactUpToRoundoff) {
  auto w = Tensor::vector({0.3, -1.2, 2.5, 4}, true);
  std::vector<Tensor> p{w};
  const auto r = ad::grad_check([&](Graph& g) { return ad::dot(g, w, w); }, p);
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_EQ(r.checked, 4u);
}

TEST(GradCheck, ConvReluMeanComposite) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({16, 2}, rng), w = random_tensor({3, 2, 3}, rng), b = random_tensor({3}, rng);
  std::vector<Tensor> p{x, w, b};
  const auto r = ad::grad_check(
      [&](Graph& g) { return ad::mean(g, ad::relu(g, ad::conv1d_dilated(g, x, w, b, 2))); }, p);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.checked, 0u);
}

TEST(GradCheck, CrossEntropyWithRespectToLogits) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({6, 4}, rng);
  std::vector<int> y = {0, 1, 2, 3, 1, 0};
  std::vector<Tensor> p{x};
  EXPECT_LT(ad::grad_check([&](Graph& g) { return ad::softmax_cross_entropy(g, x, y).loss; }, p).max_rel_error, 1e-6);
}

TEST(GradCheck, RandomThreeLayerComposite) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({12, 3}, rng, false);
    auto w1 = random_tensor({4, 3, 3}, rng), b1 = random_tensor({4}, rng);
    auto w2 = random_tensor({4, 4, 3}, rng), b2 = random_tensor({4}, rng);
    auto w3 = random_tensor({2, 4, 1}, rng), b3 = random_tensor({2}, rng);
    std::vector<int> y(12);
    for (std::size_t t = 0; t < 12; ++t) y[t] = static_cast<int>(t % 2);
    std::vector<Tensor> p{w1, b1, w2, b2, w3, b3};
    const auto r = ad::grad_check(
        [&](Graph& g) {
          auto h = ad::relu(g, ad::conv1d_dilated(g, x, w1, b1, 1));
          h = ad::relu(g, ad::conv1d_dilated(g, h, w2, b2, 2));
          return ad::softmax_cross_entropy(g, ad::conv1d_dilated(g, h, w3, b3, 1), y).loss;
        },
        p);
    EXPECT_LT(r.max_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(GradCheck, KinkStraddlingCoordinatesAreCountedNotMeasured) {
  // relu(w) at w = 1e-4: a 1e-3 step crosses zero, so the coordinate is skipped.
  auto w = Tensor::vector({1e-4, 0.5}, true);
  std::vector<Tensor> p{w};
  const auto r = ad::grad_check([&](Graph& g) { return ad::mean(g, ad::relu(g, w)); }, p);
  EXPECT_EQ(r.skipped_at_kinks, 1u);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_LT(r.max_rel_error, 1e-10);
}

TEST(RowOps, GatherSegmentMeanConcat) {
  Graph g;
  auto x = Tensor::matrix(4, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  std::vector<std::size_t> rows = {3, 0, 3};
  EXPECT_EQ(vals(ad::gather_rows(g, x, rows)), (std::vector<double>{7, 8, 1, 2, 7, 8}));
  std::vector<ad::RowRange> ranges = {{0, 1}, {1, 4}};
  EXPECT_EQ(vals(ad::segment_mean(g, x, ranges)), (std::vector<double>{1, 2, 5, 6}));
  auto c = ad::concat_rows(g, Tensor::matrix(1, 2, {9, 9}), x);
  EXPECT_EQ(c.dim(0), 5u);
  EXPECT_EQ(c.at(0, 1), 9.0);
  EXPECT_EQ(c.at(4, 1), 8.0);
}
