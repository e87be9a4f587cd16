#pragma once

// Minimal tape-based reverse-mode differentiation over dense double tensors.
//
// A Graph records one node per operation in creation order, which is already a
// topological order. backward() walks the tape once in reverse. Tensors are
// shared handles; the node list keeps every intermediate alive until the
// graph is destroyed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tempseg/error.hpp"

namespace tempseg::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first written
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->value = std::move(values);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const auto n = v.size();
    return from({n}, std::move(v), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t size() const { return d_->value.size(); }
  bool is_scalar() const { return size() == 1; }

  std::span<const double> values() const { return d_->value; }
  // Only optimizers and test fixtures should write through this.
  std::span<double> mutable_values() { return d_->value; }

  double item() const {
    if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return d_->value[0];
  }
  double at(std::size_t i) const { return d_->value.at(i); }
  double at(std::size_t r, std::size_t c) const { return d_->value.at(r * d_->shape.back() + c); }

  bool requires_grad() const { return d_->requires_grad; }
  bool has_grad() const { return !d_->grad.empty(); }

  // Zero-filled on first access, so unreachable parameters read as zero.
  std::span<double> grad() const {
    ensure_grad();
    return d_->grad;
  }
  void zero_grad() const {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  TensorData* data() const noexcept { return d_.get(); }
  bool same_as(const Tensor& o) const noexcept { return d_ == o.d_; }

  // A fresh tensor with the same values and no history.
  Tensor detach() const { return from(shape(), d_->value, false); }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  void ensure_grad() const {
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
  }

  std::shared_ptr<TensorData> d_;
};

struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;
};

// Records operations for one forward/backward pass. A non-recording graph
// still evaluates every op but keeps no history (inference mode).
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  // True when an op over `inputs` must be recorded.
  bool tracks(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->requires_grad(); });
  }
  bool tracks(const std::vector<Tensor>& inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor& t) { return t.requires_grad(); });
  }

  // `backward` reads output.grad() and accumulates into the inputs' grads.
  // The output must have been created with requires_grad = true.
  void record(std::string op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward) {
    nodes_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  void clear() { nodes_.clear(); }

  // Hash of every branch taken at a non-differentiable point (ReLU side,
  // zero-norm rows). Two evaluations with equal signatures lie on the same
  // smooth piece of the function.
  std::uint64_t branch_signature() const noexcept { return branches_; }
  void note_branch(bool taken) noexcept {
    branches_ = (branches_ ^ (taken ? 0x9eULL : 0x3bULL)) * 0x100000001b3ULL;
  }

 private:
  bool recording_;
  std::vector<Node> nodes_;
  std::uint64_t branches_ = 0xcbf29ce484222325ULL;
};

// Populates grad() of every tensor that `loss` depends on. Gradients
// accumulate, so callers zero parameter grads between steps.
inline void backward(Graph& graph, const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar()) {
    throw ContractError("backward() requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  loss.grad()[0] += 1.0;
  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline MapMat as_mat(std::span<double> v, std::size_t rows, std::size_t cols) {
  return MapMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline CMapMat as_mat(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return CMapMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_rank(const Tensor& t, std::size_t r, std::string_view op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline Tensor make_output(Shape shape, std::vector<double> values, bool tracked) {
  return Tensor::from(std::move(shape), std::move(values), tracked);
}

// Rows and columns of a tensor viewed as a matrix; rank-1 tensors are one row.
inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw DimensionError("expected rank 1 or 2, got " + shape_str(t.shape()));
}

}  // namespace detail

// "Same" 1-D convolution over time with dilated taps.
//   input  T x C_in, weight C_out x C_in x k, bias C_out -> T x C_out
// Zero padding of (k-1)*dilation/2 on both ends keeps the length at T.
inline Tensor conv1d_dilated(Graph& g, const Tensor& input, const Tensor& weight,
                             const Tensor& bias, std::size_t dilation) {
  using namespace detail;
  require_rank(input, 2, "conv1d_dilated input");
  require_rank(weight, 3, "conv1d_dilated weight");
  require_rank(bias, 1, "conv1d_dilated bias");
  if (dilation < 1) throw ValidationError("conv1d_dilated: dilation must be >= 1");
  const std::size_t T = input.dim(0), cin = input.dim(1);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin) {
    throw DimensionError("conv1d_dilated: weight expects " + std::to_string(weight.dim(1)) +
                         " input channels, input has " + std::to_string(cin));
  }
  if (bias.dim(0) != cout) {
    throw DimensionError("conv1d_dilated: bias length " + std::to_string(bias.dim(0)) +
                         " != output channels " + std::to_string(cout));
  }
  if (k % 2 == 0) throw ValidationError("conv1d_dilated: kernel size must be odd");

  const auto w = weight.values();
  // Per-tap C_out x C_in slices, contiguous.
  std::vector<RowMat> taps(k, RowMat(cout, cin));
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < cin; ++i)
      for (std::size_t j = 0; j < k; ++j) taps[j](o, i) = w[(o * cin + i) * k + j];

  const auto half = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const auto sT = static_cast<std::ptrdiff_t>(T);
  struct Span {
    std::ptrdiff_t out_start, in_start, n;
  };
  std::vector<Span> spans(k);
  for (std::size_t j = 0; j < k; ++j) {
    const auto off = (static_cast<std::ptrdiff_t>(j) - half) * static_cast<std::ptrdiff_t>(dilation);
    const auto start = std::max<std::ptrdiff_t>(0, -off);
    const auto end = std::min<std::ptrdiff_t>(sT, sT - off);
    spans[j] = {start, start + off, std::max<std::ptrdiff_t>(0, end - start)};
  }

  std::vector<double> out(T * cout);
  auto Y = as_mat(std::span<double>(out), T, cout);
  const auto B = Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(),
                                                      static_cast<Eigen::Index>(cout));
  Y.rowwise() = B;
  const auto X = as_mat(input.values(), T, cin);
  for (std::size_t j = 0; j < k; ++j) {
    if (spans[j].n == 0) continue;
    Y.middleRows(spans[j].out_start, spans[j].n).noalias() +=
        X.middleRows(spans[j].in_start, spans[j].n) * taps[j].transpose();
  }

  const bool tracked = g.tracks({&input, &weight, &bias});
  Tensor result = make_output({T, cout}, std::move(out), tracked);
  if (tracked) {
    g.record("conv1d_dilated", {input, weight, bias}, result,
             [input, weight, bias, result, taps = std::move(taps), spans, T, cin, cout, k] {
               const auto dY = as_mat(std::span<const double>(result.grad()), T, cout);
               if (input.requires_grad()) {
                 auto dX = as_mat(input.grad(), T, cin);
                 for (std::size_t j = 0; j < k; ++j) {
                   if (spans[j].n == 0) continue;
                   dX.middleRows(spans[j].in_start, spans[j].n).noalias() +=
                       dY.middleRows(spans[j].out_start, spans[j].n) * taps[j];
                 }
               }
               if (weight.requires_grad()) {
                 const auto X = as_mat(input.values(), T, cin);
                 auto dw = weight.grad();
                 RowMat dtap(cout, cin);
                 for (std::size_t j = 0; j < k; ++j) {
                   if (spans[j].n == 0) continue;
                   dtap.noalias() = dY.middleRows(spans[j].out_start, spans[j].n).transpose() *
                                    X.middleRows(spans[j].in_start, spans[j].n);
                   for (std::size_t o = 0; o < cout; ++o)
                     for (std::size_t i = 0; i < cin; ++i) dw[(o * cin + i) * k + j] += dtap(o, i);
                 }
               }
               if (bias.requires_grad()) {
                 auto db = Eigen::Map<Eigen::RowVectorXd>(bias.grad().data(),
                                                          static_cast<Eigen::Index>(cout));
                 db += dY.colwise().sum();
               }
             });
  }
  return result;
}

inline Tensor relu(Graph& g, const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) {
    g.note_branch(v > 0.0);
    v = v > 0.0 ? v : 0.0;
  }
  const bool tracked = g.tracks({&x});
  Tensor result = detail::make_output(x.shape(), std::move(out), tracked);
  if (tracked) {
    g.record("relu", {x}, result, [x, result] {
      auto dx = x.grad();
      const auto dy = result.grad();
      const auto xv = x.values();
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (xv[i] > 0.0) dx[i] += dy[i];
    });
  }
  return result;
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const bool tracked = g.tracks({&a, &b});
  Tensor result = detail::make_output(a.shape(), std::move(out), tracked);
  if (tracked) {
    g.record("add", {a, b}, result, [a, b, result] {
      const auto dy = result.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto d = t->grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
      }
    });
  }
  return result;
}

// (n x k) * (k x m) -> n x m
inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
  using namespace detail;
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(n * m);
  as_mat(std::span<double>(out), n, m).noalias() = as_mat(a.values(), n, k) * as_mat(b.values(), k, m);
  const bool tracked = g.tracks({&a, &b});
  Tensor result = make_output({n, m}, std::move(out), tracked);
  if (tracked) {
    g.record("matmul", {a, b}, result, [a, b, result, n, k, m] {
      const auto dY = as_mat(std::span<const double>(result.grad()), n, m);
      if (a.requires_grad()) as_mat(a.grad(), n, k).noalias() += dY * as_mat(b.values(), k, m).transpose();
      if (b.requires_grad()) as_mat(b.grad(), k, m).noalias() += as_mat(a.values(), n, k).transpose() * dY;
    });
  }
  return result;
}

inline Tensor scale(Graph& g, const Tensor& x, double s) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= s;
  const bool tracked = g.tracks({&x});
  Tensor result = detail::make_output(x.shape(), std::move(out), tracked);
  if (tracked) {
    g.record("scale", {x}, result, [x, result, s] {
      auto dx = x.grad();
      const auto dy = result.grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s * dy[i];
    });
  }
  return result;
}

// Mean of all entries, as a scalar.
inline Tensor mean(Graph& g, const Tensor& x) {
  const auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  const double inv_n = 1.0 / static_cast<double>(xv.size());
  const bool tracked = g.tracks({&x});
  Tensor result = detail::make_output({1}, {acc * inv_n}, tracked);
  if (tracked) {
    g.record("mean", {x}, result, [x, result, inv_n] {
      auto dx = x.grad();
      const double dy = result.grad()[0] * inv_n;
      for (auto& d : dx) d += dy;
    });
  }
  return result;
}

inline Tensor exp(Graph& g, const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = std::exp(v);
  const bool tracked = g.tracks({&x});
  Tensor result = detail::make_output(x.shape(), std::move(out), tracked);
  if (tracked) {
    g.record("exp", {x}, result, [x, result] {
      auto dx = x.grad();
      const auto dy = result.grad();
      const auto y = result.values();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * y[i];
    });
  }
  return result;
}

inline Tensor log(Graph& g, const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) {
    if (!(v > 0.0)) throw DomainError("log of nonpositive value " + std::to_string(v));
    v = std::log(v);
  }
  const bool tracked = g.tracks({&x});
  Tensor result = detail::make_output(x.shape(), std::move(out), tracked);
  if (tracked) {
    g.record("log", {x}, result, [x, result] {
      auto dx = x.grad();
      const auto dy = result.grad();
      const auto xv = x.values();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] / xv[i];
    });
  }
  return result;
}

// Inner product of two equally shaped tensors, as a scalar.
inline Tensor dot(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "dot");
  const auto av = a.values(), bv = b.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  const bool tracked = g.tracks({&a, &b});
  Tensor result = detail::make_output({1}, {acc}, tracked);
  if (tracked) {
    g.record("dot", {a, b}, result, [a, b, result] {
      const double dy = result.grad()[0];
      if (a.requires_grad()) {
        auto da = a.grad();
        const auto bv = b.values();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy * bv[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        const auto av = a.values();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy * av[i];
      }
    });
  }
  return result;
}

// Unit-L2 rows (a rank-1 tensor is one row). A zero row maps to zero and
// passes no gradient.
inline Tensor l2_normalize(Graph& g, const Tensor& x) {
  const auto [rows, cols] = detail::rows_cols(x);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += xv[r * cols + c] * xv[r * cols + c];
    const double n = std::sqrt(ss);
    norms[r] = n;
    g.note_branch(n > 0.0);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = n > 0.0 ? xv[r * cols + c] / n : 0.0;
  }
  const bool tracked = g.tracks({&x});
  Tensor result = detail::make_output(x.shape(), std::move(out), tracked);
  if (tracked) {
    g.record("l2_normalize", {x}, result, [x, result, norms = std::move(norms), rows, cols] {
      auto dx = x.grad();
      const auto dy = result.grad();
      const auto y = result.values();
      for (std::size_t r = 0; r < rows; ++r) {
        if (norms[r] == 0.0) continue;
        double proj = 0.0;
        for (std::size_t c = 0; c < cols; ++c) proj += y[r * cols + c] * dy[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          const auto i = r * cols + c;
          dx[i] += (dy[i] - y[i] * proj) / norms[r];
        }
      }
    });
  }
  return result;
}

// Row-wise softmax of a T x C tensor with max subtraction.
inline Tensor softmax(Graph& g, const Tensor& logits) {
  detail::require_rank(logits, 2, "softmax");
  const std::size_t T = logits.dim(0), C = logits.dim(1);
  const auto z = logits.values();
  std::vector<double> p(z.size());
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = z.data() + t * C;
    const double m = *std::max_element(row, row + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += (p[t * C + c] = std::exp(row[c] - m));
    for (std::size_t c = 0; c < C; ++c) p[t * C + c] /= s;
  }
  const bool tracked = g.tracks({&logits});
  Tensor result = detail::make_output({T, C}, std::move(p), tracked);
  if (tracked) {
    g.record("softmax", {logits}, result, [logits, result, T, C] {
      auto dz = logits.grad();
      const auto dp = result.grad();
      const auto p = result.values();
      for (std::size_t t = 0; t < T; ++t) {
        double inner = 0.0;
        for (std::size_t c = 0; c < C; ++c) inner += p[t * C + c] * dp[t * C + c];
        for (std::size_t c = 0; c < C; ++c) dz[t * C + c] += p[t * C + c] * (dp[t * C + c] - inner);
      }
    });
  }
  return result;
}

struct CrossEntropy {
  Tensor loss;   // scalar, differentiable w.r.t. the logits
  Tensor probs;  // T x C, values only
};

// Mean over samples of -log softmax(logits_t)[label_t].
inline CrossEntropy softmax_cross_entropy(Graph& g, const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t T = logits.dim(0), C = logits.dim(1);
  if (labels.size() != T) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(T) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(y) +
                            " outside [0, " + std::to_string(C) + ")");
    }
  }
  const auto z = logits.values();
  std::vector<double> p(z.size());
  double loss = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = z.data() + t * C;
    const double m = *std::max_element(row, row + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += (p[t * C + c] = std::exp(row[c] - m));
    for (std::size_t c = 0; c < C; ++c) p[t * C + c] /= s;
    loss += std::log(s) + m - row[labels[t]];
  }
  loss /= static_cast<double>(T);
  const bool tracked = g.tracks({&logits});
  Tensor probs = Tensor::from({T, C}, p);
  Tensor result = detail::make_output({1}, {loss}, tracked);
  if (tracked) {
    std::vector<int> y(labels.begin(), labels.end());
    g.record("softmax_cross_entropy", {logits}, result,
             [logits, result, p = std::move(p), y = std::move(y), T, C] {
               auto dz = logits.grad();
               const double s = result.grad()[0] / static_cast<double>(T);
               for (std::size_t t = 0; t < T; ++t) {
                 for (std::size_t c = 0; c < C; ++c) dz[t * C + c] += s * p[t * C + c];
                 dz[t * C + static_cast<std::size_t>(y[t])] -= s;
               }
             });
  }
  return {result, probs};
}

// Selects rows of a T x P tensor by index (duplicates allowed).
inline Tensor gather_rows(Graph& g, const Tensor& x, std::span<const std::size_t> rows) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t T = x.dim(0), P = x.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<double> out(rows.size() * P);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= T) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[r] * P), P,
                out.begin() + static_cast<std::ptrdiff_t>(r * P));
  }
  const bool tracked = g.tracks({&x});
  Tensor result = detail::make_output({rows.size(), P}, std::move(out), tracked);
  if (tracked) {
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    g.record("gather_rows", {x}, result, [x, result, idx = std::move(idx), P] {
      auto dx = x.grad();
      const auto dy = result.grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < P; ++c) dx[idx[r] * P + c] += dy[r * P + c];
    });
  }
  return result;
}

struct RowRange {
  std::size_t begin;
  std::size_t end;  // exclusive
};

// One output row per range: the mean of x's rows in [begin, end).
inline Tensor segment_mean(Graph& g, const Tensor& x, std::span<const RowRange> ranges) {
  detail::require_rank(x, 2, "segment_mean");
  const std::size_t T = x.dim(0), P = x.dim(1);
  if (ranges.empty()) throw DimensionError("segment_mean: no ranges");
  std::vector<double> out(ranges.size() * P, 0.0);
  const auto xv = x.values();
  for (std::size_t r = 0; r < ranges.size(); ++r) {
    const auto [b, e] = ranges[r];
    if (b >= e || e > T) throw DimensionError("segment_mean: invalid row range");
    for (std::size_t t = b; t < e; ++t)
      for (std::size_t c = 0; c < P; ++c) out[r * P + c] += xv[t * P + c];
    const double inv = 1.0 / static_cast<double>(e - b);
    for (std::size_t c = 0; c < P; ++c) out[r * P + c] *= inv;
  }
  const bool tracked = g.tracks({&x});
  Tensor result = detail::make_output({ranges.size(), P}, std::move(out), tracked);
  if (tracked) {
    std::vector<RowRange> rs(ranges.begin(), ranges.end());
    g.record("segment_mean", {x}, result, [x, result, rs = std::move(rs), P] {
      auto dx = x.grad();
      const auto dy = result.grad();
      for (std::size_t r = 0; r < rs.size(); ++r) {
        const double inv = 1.0 / static_cast<double>(rs[r].end - rs[r].begin);
        for (std::size_t t = rs[r].begin; t < rs[r].end; ++t)
          for (std::size_t c = 0; c < P; ++c) dx[t * P + c] += inv * dy[r * P + c];
      }
    });
  }
  return result;
}

// Stacks two matrices with equal column counts.
inline Tensor concat_rows(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "concat_rows");
  detail::require_rank(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const bool tracked = g.tracks({&a, &b});
  Tensor result = detail::make_output({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), tracked);
  if (tracked) {
    g.record("concat_rows", {a, b}, result, [a, b, result] {
      const auto dy = result.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        const auto off = a.size();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[off + i];
      }
    });
  }
  return result;
}

// Central-difference gradient check.
//
// `f` builds a scalar from `params` on the graph it is given. Reports the
// largest |analytic - numeric| / max(1, |numeric|) over all coordinates.
// A coordinate whose +-eps evaluations land on a different side of a ReLU
// (or zero-norm) branch than the unperturbed point is not differentiable
// there in the finite-difference sense; it is counted and left out.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_at_kinks = 0;
};

inline GradCheckResult grad_check(const std::function<Tensor(Graph&)>& f, std::span<Tensor> params,
                                  double eps = 1e-3) {
  if (!(eps > 0.0)) throw ValidationError("grad_check: eps must be positive");
  for (auto& p : params) p.zero_grad();
  std::vector<std::vector<double>> analytic;
  std::uint64_t base = 0;
  {
    Graph g;
    const Tensor loss = f(g);
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    backward(g, loss);
    base = g.branch_signature();
    for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
  }
  auto eval = [&f](std::uint64_t& sig) {
    Graph g(false);
    const double v = f(g).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite evaluation");
    sig = g.branch_signature();
    return v;
  };
  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto vals = params[k].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      std::uint64_t sig_up = 0, sig_down = 0;
      vals[i] = orig + eps;
      const double up = eval(sig_up);
      vals[i] = orig - eps;
      const double down = eval(sig_down);
      vals[i] = orig;
      if (sig_up != base || sig_down != base) {
        ++res.skipped_at_kinks;
        continue;
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      res.max_rel_error = std::max(res.max_rel_error, err);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace tempseg::ad
