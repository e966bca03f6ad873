#pragma once

// Reverse-mode differentiation over whole tensors. A Graph is a tape: every
// op appends a node holding its value and a closure that pushes the node's
// gradient into its parents. Parameters enter the tape through param() and
// receive their accumulated gradient when backward() finishes.

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include "trajground/error.hpp"
#include "trajground/numerics/param_store.hpp"
#include "trajground/numerics/tensor.hpp"
#include "trajground/rng.hpp"

namespace trajground::num {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

template <class T>
class Graph {
 public:
  explicit Graph(ParamStore<T>* params = nullptr) : params_(params) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// A differentiable input that is not a stored parameter.
  Var input(Tensor<T> value) { return push(std::move(value), true, {}); }

  Var param(std::string_view name) {
    if (!params_) fail(ErrorCode::ShapeMismatch, "graph has no parameter store");
    const std::size_t idx = params_->index(name);
    if (auto it = bound_.find(idx); it != bound_.end()) return it->second;
    Var v = push((*params_)[idx].value, true, {});
    nodes_[v.id].param = idx;
    bound_.emplace(idx, v);
    return v;
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool any_requires_grad(std::initializer_list<Var> vs) const {
    for (auto v : vs)
      if (requires_grad(v)) return true;
    return false;
  }

  /// Gradient buffer of v, zero-initialized on first access.
  Tensor<T>& grad(Var v) {
    auto& n = nodes_.at(v.id);
    if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(Var v) const { return nodes_.at(v.id).grad.size() == nodes_.at(v.id).value.size() && !nodes_.at(v.id).value.empty(); }

  /// Appends a node. `backward` runs only when the node requires a gradient
  /// and has received one.
  Var push(Tensor<T> value, bool requires_grad, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(backward), std::nullopt});
    return Var{nodes_.size() - 1};
  }

  /// Appends the result of an op over `parents`. `make_backward` receives the
  /// new node's handle and returns its gradient closure; it is only invoked
  /// when some parent requires a gradient.
  template <class MakeBackward>
  Var op(Tensor<T> value, std::initializer_list<Var> parents, MakeBackward&& make_backward) {
    bool rg = false;
    for (auto p : parents) rg = rg || requires_grad(p);
    Var v = push(std::move(value), rg, {});
    if (rg) nodes_[v.id].backward = make_backward(v);
    return v;
  }

  /// Back-propagates from `out` with seed gradient `seed` (broadcast to every
  /// element) and adds parameter gradients into the store.
  void backward(Var out, T seed = T{1}) {
    auto& g = grad(out);
    g.fill(seed);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() != n.value.size() || n.value.empty()) continue;
      if (n.backward) n.backward();
    }
    if (params_)
      for (auto& n : nodes_) {
        if (!n.param || n.grad.size() != n.value.size()) continue;
        auto& dst = (*params_)[*n.param].grad;
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
  }

  std::size_t size() const { return nodes_.size(); }
  ParamStore<T>* params() const { return params_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    std::function<void()> backward;
    std::optional<std::size_t> param;
  };
  ParamStore<T>* params_;
  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, Var> bound_;
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

namespace detail {
inline Shape with_cols(const Shape& s, std::size_t cols) {
  Shape out = s.empty() ? Shape{1} : s;
  out.back() = cols;
  return out;
}
}  // namespace detail

/// x[..., m] * w[m, n] -> [..., n]
template <class T>
Var matmul(Graph<T>& g, Var x, Var w) {
  const auto& X = g.value(x);
  const auto& W = g.value(w);
  if (W.rank() != 2 || X.cols() != W.dim(0))
    fail(ErrorCode::ShapeMismatch, "matmul " + shape_string(X.shape()) + " x " + shape_string(W.shape()));
  const std::size_t rows = X.rows(), m = W.dim(0), n = W.dim(1);
  Tensor<T> Y(detail::with_cols(X.shape(), n));
  MatMap<T>(Y.data(), rows, n).noalias() = ConstMatMap<T>(X.data(), rows, m) * ConstMatMap<T>(W.data(), m, n);
  return g.op(std::move(Y), {x, w}, [&g, x, w, rows, m, n](Var y) {
    return [&g, x, w, y, rows, m, n] {
      ConstMatMap<T> dY(g.grad(y).data(), rows, n);
      if (g.requires_grad(x))
        MatMap<T>(g.grad(x).data(), rows, m).noalias() += dY * ConstMatMap<T>(g.value(w).data(), m, n).transpose();
      if (g.requires_grad(w))
        MatMap<T>(g.grad(w).data(), m, n).noalias() += ConstMatMap<T>(g.value(x).data(), rows, m).transpose() * dY;
    };
  });
}

/// x[..., n] + b[n]
template <class T>
Var add_bias(Graph<T>& g, Var x, Var b) {
  const auto& X = g.value(x);
  const auto& B = g.value(b);
  if (B.size() != X.cols()) fail(ErrorCode::ShapeMismatch, "bias " + shape_string(B.shape()) + " vs " + shape_string(X.shape()));
  Tensor<T> Y = X;
  const std::size_t rows = X.rows(), n = X.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) Y[r * n + c] += B[c];
  return g.op(std::move(Y), {x, b}, [&g, x, b, rows, n](Var y) {
    return [&g, x, b, y, rows, n] {
      const auto& dY = g.grad(y);
      if (g.requires_grad(x)) {
        auto& dX = g.grad(x);
        for (std::size_t i = 0; i < dY.size(); ++i) dX[i] += dY[i];
      }
      if (g.requires_grad(b)) {
        auto& dB = g.grad(b);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < n; ++c) dB[c] += dY[r * n + c];
      }
    };
  });
}

template <class T>
Var linear(Graph<T>& g, Var x, Var w, std::optional<Var> b = std::nullopt) {
  Var y = matmul(g, x, w);
  return b ? add_bias(g, y, *b) : y;
}

/// Elementwise a + b; shapes must have equal element counts (result takes a's shape).
template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.size() != B.size()) fail(ErrorCode::ShapeMismatch, "add " + shape_string(A.shape()) + " + " + shape_string(B.shape()));
  Tensor<T> Y = A;
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] += B[i];
  return g.op(std::move(Y), {a, b}, [&g, a, b](Var y) {
    return [&g, a, b, y] {
      const auto& dY = g.grad(y);
      for (Var p : {a, b})
        if (g.requires_grad(p)) {
          auto& dP = g.grad(p);
          for (std::size_t i = 0; i < dY.size(); ++i) dP[i] += dY[i];
        }
    };
  });
}

template <class T>
Var scale(Graph<T>& g, Var a, T s) {
  Tensor<T> Y = g.value(a);
  for (auto& v : Y.values()) v *= s;
  return g.op(std::move(Y), {a}, [&g, a, s](Var y) {
    return [&g, a, s, y] {
      const auto& dY = g.grad(y);
      auto& dA = g.grad(a);
      for (std::size_t i = 0; i < dY.size(); ++i) dA[i] += s * dY[i];
    };
  });
}

template <class T>
Var reshape(Graph<T>& g, Var a, Shape shape) {
  Tensor<T> Y = g.value(a).reshaped(std::move(shape));
  return g.op(std::move(Y), {a}, [&g, a](Var y) {
    return [&g, a, y] {
      const auto& dY = g.grad(y);
      auto& dA = g.grad(a);
      for (std::size_t i = 0; i < dY.size(); ++i) dA[i] += dY[i];
    };
  });
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.5 * std::numbers::sqrt2)));
}
template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.5 * std::numbers::sqrt2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

/// Exact (erf-based) GELU, evaluated with Eigen's vectorized erf.
template <class T>
Var gelu(Graph<T>& g, Var x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto& X = g.value(x);
  Tensor<T> Y(X.shape());
  const auto n = static_cast<Eigen::Index>(X.size());
  Eigen::Map<const Arr> xa(X.data(), n);
  Eigen::Map<Arr>(Y.data(), n) = T(0.5) * xa * (T(1) + (xa * T(0.5 * std::numbers::sqrt2)).erf());
  return g.op(std::move(Y), {x}, [&g, x, n](Var y) {
    return [&g, x, y, n] {
      Eigen::Map<const Arr> xa(g.value(x).data(), n);
      Eigen::Map<const Arr> dy(g.grad(y).data(), n);
      const T pdf_scale = T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
      Eigen::Map<Arr>(g.grad(x).data(), n) +=
          dy * (T(0.5) * (T(1) + (xa * T(0.5 * std::numbers::sqrt2)).erf()) + xa * (T(-0.5) * xa.square()).exp() * pdf_scale);
    };
  });
}

template <class T>
T sigmoid_value(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
Var sigmoid(Graph<T>& g, Var x) {
  Tensor<T> Y = g.value(x);
  for (auto& v : Y.values()) v = sigmoid_value(v);
  return g.op(std::move(Y), {x}, [&g, x](Var y) {
    return [&g, x, y] {
      const auto& Yv = g.value(y);
      const auto& dY = g.grad(y);
      auto& dX = g.grad(x);
      for (std::size_t i = 0; i < dY.size(); ++i) dX[i] += dY[i] * Yv[i] * (T(1) - Yv[i]);
    };
  });
}

/// Layer normalization over the last axis with learnable gain and shift.
template <class T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const auto& X = g.value(x);
  const std::size_t rows = X.rows(), n = X.cols();
  if (g.value(gamma).size() != n || g.value(beta).size() != n) fail(ErrorCode::ShapeMismatch, "layer_norm parameter size");
  Tensor<T> Y(X.shape());
  Tensor<T> xhat(X.shape());
  std::vector<T> inv_std(rows);
  const auto& G = g.value(gamma);
  const auto& B = g.value(beta);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X.data() + r * n;
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (xr[c] - mean) * is;
      xhat[r * n + c] = h;
      Y[r * n + c] = h * G[c] + B[c];
    }
  }
  return g.op(std::move(Y), {x, gamma, beta},
              [&g, x, gamma, beta, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Var y) mutable {
                return [&g, x, gamma, beta, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std), y] {
                  const auto& dY = g.grad(y);
                  const auto& G = g.value(gamma);
                  if (g.requires_grad(gamma) || g.requires_grad(beta)) {
                    auto& dG = g.grad(gamma);
                    auto& dB = g.grad(beta);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < n; ++c) {
                        dG[c] += dY[r * n + c] * xhat[r * n + c];
                        dB[c] += dY[r * n + c];
                      }
                  }
                  if (g.requires_grad(x)) {
                    auto& dX = g.grad(x);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T mean_g = 0, mean_gx = 0;
                      for (std::size_t c = 0; c < n; ++c) {
                        const T gc = dY[r * n + c] * G[c];
                        mean_g += gc;
                        mean_gx += gc * xhat[r * n + c];
                      }
                      mean_g /= T(n);
                      mean_gx /= T(n);
                      for (std::size_t c = 0; c < n; ++c) {
                        const T gc = dY[r * n + c] * G[c];
                        dX[r * n + c] += inv_std[r] * (gc - mean_g - xhat[r * n + c] * mean_gx);
                      }
                    }
                  }
                };
              });
}

/// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity when
/// rate is zero or no rng is supplied.
template <class T>
Var dropout(Graph<T>& g, Var x, double rate, CounterRng* rng) {
  if (rate <= 0.0 || rng == nullptr) return x;
  const auto& X = g.value(x);
  Tensor<T> mask(X.shape());
  const T keep = T(1.0 / (1.0 - rate));
  for (auto& m : mask.values()) m = rng->uniform() < rate ? T(0) : keep;
  Tensor<T> Y = X;
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] *= mask[i];
  return g.op(std::move(Y), {x}, [&g, x, mask = std::move(mask)](Var y) mutable {
    return [&g, x, y, mask = std::move(mask)] {
      const auto& dY = g.grad(y);
      auto& dX = g.grad(x);
      for (std::size_t i = 0; i < dY.size(); ++i) dX[i] += dY[i] * mask[i];
    };
  });
}

/// Row-wise concatenation [x_r, r] where the single row r is shared by all rows of x.
template <class T>
Var concat_broadcast(Graph<T>& g, Var x, Var r) {
  const auto& X = g.value(x);
  const auto& R = g.value(r);
  const std::size_t rows = X.rows(), a = X.cols(), b = R.size();
  Tensor<T> Y(detail::with_cols(X.shape(), a + b));
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(X.data() + i * a, a, Y.data() + i * (a + b));
    std::copy_n(R.data(), b, Y.data() + i * (a + b) + a);
  }
  return g.op(std::move(Y), {x, r}, [&g, x, r, rows, a, b](Var y) {
    return [&g, x, r, y, rows, a, b] {
      const auto& dY = g.grad(y);
      if (g.requires_grad(x)) {
        auto& dX = g.grad(x);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t c = 0; c < a; ++c) dX[i * a + c] += dY[i * (a + b) + c];
      }
      if (g.requires_grad(r)) {
        auto& dR = g.grad(r);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t c = 0; c < b; ++c) dR[c] += dY[i * (a + b) + a + c];
      }
    };
  });
}

/// Mean over consecutive groups of `group` rows: [G*group, n] -> [G, n].
template <class T>
Var group_mean(Graph<T>& g, Var x, std::size_t group, Shape out_shape = {}) {
  const auto& X = g.value(x);
  const std::size_t rows = X.rows(), n = X.cols();
  if (group == 0 || rows % group != 0) fail(ErrorCode::ShapeMismatch, "group_mean: rows not divisible by group");
  const std::size_t G = rows / group;
  if (out_shape.empty()) out_shape = {G, n};
  Tensor<T> Y(out_shape);
  if (Y.size() != G * n) fail(ErrorCode::ShapeMismatch, "group_mean output shape");
  const T inv = T(1) / T(group);
  for (std::size_t k = 0; k < G; ++k)
    for (std::size_t j = 0; j < group; ++j)
      for (std::size_t c = 0; c < n; ++c) Y[k * n + c] += X[(k * group + j) * n + c] * inv;
  return g.op(std::move(Y), {x}, [&g, x, G, group, n, inv](Var y) {
    return [&g, x, y, G, group, n, inv] {
      const auto& dY = g.grad(y);
      auto& dX = g.grad(x);
      for (std::size_t k = 0; k < G; ++k)
        for (std::size_t j = 0; j < group; ++j)
          for (std::size_t c = 0; c < n; ++c) dX[(k * group + j) * n + c] += dY[k * n + c] * inv;
    };
  });
}

/// Selects rows of x in the given order: y[i] = x[index[i]].
template <class T>
Var gather_rows(Graph<T>& g, Var x, std::vector<std::size_t> index, Shape out_shape = {}) {
  const auto& X = g.value(x);
  const std::size_t n = X.cols();
  if (out_shape.empty()) out_shape = {index.size(), n};
  Tensor<T> Y(out_shape);
  if (Y.size() != index.size() * n) fail(ErrorCode::ShapeMismatch, "gather_rows output shape");
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= X.rows()) fail(ErrorCode::ShapeMismatch, "gather_rows index out of range");
    std::copy_n(X.data() + index[i] * n, n, Y.data() + i * n);
  }
  return g.op(std::move(Y), {x}, [&g, x, n, index = std::move(index)](Var y) mutable {
    return [&g, x, y, n, index = std::move(index)] {
      const auto& dY = g.grad(y);
      auto& dX = g.grad(x);
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t c = 0; c < n; ++c) dX[index[i] * n + c] += dY[i * n + c];
    };
  });
}

template <class T>
Var slice_rows(Graph<T>& g, Var x, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(g, x, std::move(idx));
}

/// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& v) {
  if (v.cols() == 0 || v.empty()) fail(ErrorCode::EmptyAxis, "softmax over an empty axis");
  Tensor<T> out(v.shape());
  const std::size_t rows = v.rows(), k = v.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = v.data() + r * k;
    T* o = out.data() + r * k;
    const T mx = *std::max_element(in, in + k);
    T sum = 0;
    for (std::size_t c = 0; c < k; ++c) sum += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < k; ++c) o[c] /= sum;
  }
  return out;
}

template <class T>
Var softmax(Graph<T>& g, Var x) {
  Tensor<T> Y = softmax(g.value(x));
  const std::size_t rows = Y.rows(), k = Y.cols();
  return g.op(std::move(Y), {x}, [&g, x, rows, k](Var y) {
    return [&g, x, y, rows, k] {
      const auto& P = g.value(y);
      const auto& dY = g.grad(y);
      auto& dX = g.grad(x);
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < k; ++c) dot += dY[r * k + c] * P[r * k + c];
        for (std::size_t c = 0; c < k; ++c) dX[r * k + c] += P[r * k + c] * (dY[r * k + c] - dot);
      }
    };
  });
}

/// Grouped multi-head scaled dot-product attention.
///
namespace detail {
inline constexpr std::size_t kSmallAttentionGroup = 8;
}  // namespace detail

/// q holds G groups of `q_group` rows, k and v hold G groups of `kv_group`
/// rows; rows of group i only attend to keys of group i. The feature axis is
/// split into `heads` equal slices and each head uses softmax(QK^T/sqrt(dh))V.
template <class T>
Var attention(Graph<T>& g, Var q, Var k, Var v, std::size_t q_group, std::size_t kv_group, std::size_t heads) {
  const auto& Q = g.value(q);
  const auto& K = g.value(k);
  const auto& V = g.value(v);
  const std::size_t d = Q.cols();
  if (K.cols() != d || V.cols() != d) fail(ErrorCode::ShapeMismatch, "attention feature dims differ");
  if (K.rows() != V.rows()) fail(ErrorCode::ShapeMismatch, "attention key/value row counts differ");
  if (heads == 0 || d % heads != 0) fail(ErrorCode::BadHeadCount, "d=" + std::to_string(d) + " not divisible by heads=" + std::to_string(heads));
  if (q_group == 0 || kv_group == 0 || Q.rows() % q_group != 0 || K.rows() % kv_group != 0 ||
      Q.rows() / q_group != K.rows() / kv_group)
    fail(ErrorCode::ShapeMismatch, "attention group sizes do not tile the inputs");
  const std::size_t G = Q.rows() / q_group, dh = d / heads;
  const T scale_f = T(1) / std::sqrt(T(dh));

  Tensor<T> Y(Q.shape());
  Tensor<T> probs(Shape{G, heads, q_group, kv_group});
  // Small groups (the elevation and heading stages) run on plain loops;
  // Eigen's per-call setup dominates at that size.
  const bool small = kv_group <= detail::kSmallAttentionGroup;
  RowMat<T> S(q_group, kv_group);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rowmax(q_group);
  std::vector<T> srow(kv_group);
  for (std::size_t gi = 0; gi < G; ++gi)
    for (std::size_t h = 0; h < heads; ++h) {
      T* Pp = probs.data() + ((gi * heads + h) * q_group) * kv_group;
      if (small) {
        for (std::size_t i = 0; i < q_group; ++i) {
          const T* qi = Q.data() + (gi * q_group + i) * d + h * dh;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < kv_group; ++j) {
            const T* kj = K.data() + (gi * kv_group + j) * d + h * dh;
            T acc = 0;
            for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
            srow[j] = acc * scale_f;
            mx = std::max(mx, srow[j]);
          }
          T sum = 0;
          for (std::size_t j = 0; j < kv_group; ++j) sum += (srow[j] = std::exp(srow[j] - mx));
          T* yi = Y.data() + (gi * q_group + i) * d + h * dh;
          for (std::size_t j = 0; j < kv_group; ++j) {
            const T pj = srow[j] / sum;
            Pp[i * kv_group + j] = pj;
            const T* vj = V.data() + (gi * kv_group + j) * d + h * dh;
            for (std::size_t c = 0; c < dh; ++c) yi[c] += pj * vj[c];
          }
        }
        continue;
      }
      ConstStridedMap<T> Qb(Q.data() + gi * q_group * d + h * dh, q_group, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> Kb(K.data() + gi * kv_group * d + h * dh, kv_group, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> Vb(V.data() + gi * kv_group * d + h * dh, kv_group, dh, Eigen::OuterStride<>(d));
      S.noalias() = (Qb * Kb.transpose()) * scale_f;
      MatMap<T> P(Pp, q_group, kv_group);
      rowmax = S.rowwise().maxCoeff();
      S.colwise() -= rowmax;
      P.array() = S.array().exp();
      rowmax = P.rowwise().sum();
      P.array().colwise() /= rowmax.array();
      StridedMap<T>(Y.data() + gi * q_group * d + h * dh, q_group, dh, Eigen::OuterStride<>(d)).noalias() = P * Vb;
    }

  return g.op(std::move(Y), {q, k, v},
              [&g, q, k, v, G, heads, q_group, kv_group, d, dh, scale_f, probs = std::move(probs)](Var y) mutable {
                return [&g, q, k, v, y, G, heads, q_group, kv_group, d, dh, scale_f, probs = std::move(probs)] {
                  const auto& dY = g.grad(y);
                  const bool gq = g.requires_grad(q), gk = g.requires_grad(k), gv = g.requires_grad(v);
                  T* dQ = gq ? g.grad(q).data() : nullptr;
                  T* dK = gk ? g.grad(k).data() : nullptr;
                  T* dV = gv ? g.grad(v).data() : nullptr;
                  const auto& Q = g.value(q);
                  const auto& K = g.value(k);
                  const auto& V = g.value(v);
                  RowMat<T> dP(q_group, kv_group);
                  std::vector<T> ds(kv_group);
                  const bool small = kv_group <= detail::kSmallAttentionGroup;
                  for (std::size_t gi = 0; gi < G; ++gi)
                    for (std::size_t h = 0; h < heads; ++h) {
                      const std::size_t qo = gi * q_group * d + h * dh, ko = gi * kv_group * d + h * dh;
                      if (small) {
                        const T* Pp = probs.data() + ((gi * heads + h) * q_group) * kv_group;
                        for (std::size_t i = 0; i < q_group; ++i) {
                          const T* doi = dY.data() + qo + i * d;
                          const T* pi = Pp + i * kv_group;
                          T dot = 0;
                          for (std::size_t j = 0; j < kv_group; ++j) {
                            const T* vj = V.data() + ko + j * d;
                            T acc = 0;
                            for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                            ds[j] = acc;
                            dot += acc * pi[j];
                            if (gv) {
                              T* dvj = dV + ko + j * d;
                              for (std::size_t c = 0; c < dh; ++c) dvj[c] += pi[j] * doi[c];
                            }
                          }
                          if (!gq && !gk) continue;
                          const T* qi = Q.data() + qo + i * d;
                          T* dqi = gq ? dQ + qo + i * d : nullptr;
                          for (std::size_t j = 0; j < kv_group; ++j) {
                            const T sj = pi[j] * (ds[j] - dot) * scale_f;
                            const T* kj = K.data() + ko + j * d;
                            if (gq)
                              for (std::size_t c = 0; c < dh; ++c) dqi[c] += sj * kj[c];
                            if (gk) {
                              T* dkj = dK + ko + j * d;
                              for (std::size_t c = 0; c < dh; ++c) dkj[c] += sj * qi[c];
                            }
                          }
                        }
                        continue;
                      }
                      ConstMatMap<T> P(probs.data() + ((gi * heads + h) * q_group) * kv_group, q_group, kv_group);
                      ConstStridedMap<T> dO(dY.data() + qo, q_group, dh, Eigen::OuterStride<>(d));
                      ConstStridedMap<T> Vb(V.data() + ko, kv_group, dh, Eigen::OuterStride<>(d));
                      if (gv) StridedMap<T>(dV + ko, kv_group, dh, Eigen::OuterStride<>(d)).noalias() += P.transpose() * dO;
                      if (!gq && !gk) continue;
                      dP.noalias() = dO * Vb.transpose();
                      for (std::size_t r = 0; r < q_group; ++r) {
                        const T dot = dP.row(r).dot(P.row(r));
                        for (std::size_t c = 0; c < kv_group; ++c) dP(r, c) = P(r, c) * (dP(r, c) - dot) * scale_f;
                      }
                      if (gq)
                        StridedMap<T>(dQ + qo, q_group, dh, Eigen::OuterStride<>(d)).noalias() +=
                            dP * ConstStridedMap<T>(K.data() + ko, kv_group, dh, Eigen::OuterStride<>(d));
                      if (gk)
                        StridedMap<T>(dK + ko, kv_group, dh, Eigen::OuterStride<>(d)).noalias() +=
                            dP.transpose() * ConstStridedMap<T>(Q.data() + qo, q_group, dh, Eigen::OuterStride<>(d));
                    }
                };
              });
}

/// Single-head, single-group softmax(QK^T/sqrt(d))V on plain tensors.
template <class T>
Tensor<T> scaled_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V) {
  Graph<T> g;
  Var out = attention(g, g.constant(Q), g.constant(K), g.constant(V), Q.rows(), K.rows(), 1);
  return g.value(out);
}

/// Sum of all elements, as a [1] tensor.
template <class T>
Var sum(Graph<T>& g, Var x) {
  const auto& X = g.value(x);
  T s = 0;
  for (auto v : X.values()) s += v;
  return g.op(Tensor<T>(Shape{1}, s), {x}, [&g, x](Var y) {
    return [&g, x, y] {
      const T dy = g.grad(y)[0];
      auto& dX = g.grad(x);
      for (auto& v : dX.values()) v += dy;
    };
  });
}

/// Elementwise product a * b (same element count).
template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.size() != B.size()) fail(ErrorCode::ShapeMismatch, "mul size mismatch");
  Tensor<T> Y = A;
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] *= B[i];
  return g.op(std::move(Y), {a, b}, [&g, a, b](Var y) {
    return [&g, a, b, y] {
      const auto& dY = g.grad(y);
      if (g.requires_grad(a)) {
        auto& dA = g.grad(a);
        const auto& Bv = g.value(b);
        for (std::size_t i = 0; i < dY.size(); ++i) dA[i] += dY[i] * Bv[i];
      }
      if (g.requires_grad(b)) {
        auto& dB = g.grad(b);
        const auto& Av = g.value(a);
        for (std::size_t i = 0; i < dY.size(); ++i) dB[i] += dY[i] * Av[i];
      }
    };
  });
}

}  // namespace trajground::num
