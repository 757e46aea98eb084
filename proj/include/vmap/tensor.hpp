#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

// Dense tensors with tape-free reverse-mode differentiation: every result node
// keeps its parents and a backward closure; backward() topologically sorts
// the reachable graph from a scalar loss.
//
// Most ops view a tensor as a 2-D matrix [rows, cols] where cols is the last
// dimension and rows is the product of the leading ones.

namespace vmap::ad {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Global modes

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables graph recording on the current thread.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline std::atomic<bool>& eval_mode_flag() {
  static std::atomic<bool> eval{false};
  return eval;
}

/// Process-wide evaluation flag; dropout is the identity while set.
class EvalModeGuard {
 public:
  explicit EvalModeGuard(bool eval = true) : prev_(eval_mode_flag().exchange(eval)) {}
  ~EvalModeGuard() { eval_mode_flag().store(prev_); }
  EvalModeGuard(const EvalModeGuard&) = delete;
  EvalModeGuard& operator=(const EvalModeGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Node / Tensor

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  bool is_leaf = true;

  std::size_t numel() const { return value.size(); }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static BasicTensor constant(Shape shape, std::vector<T> values) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return BasicTensor(std::move(n));
  }

  static BasicTensor zeros(Shape shape) {
    const auto n = numel_of(shape);
    return constant(std::move(shape), std::vector<T>(n, T(0)));
  }

  static BasicTensor full(Shape shape, T v) {
    const auto n = numel_of(shape);
    return constant(std::move(shape), std::vector<T>(n, v));
  }

  static BasicTensor scalar(T v) { return constant({1}, {v}); }

  /// Trainable leaf.
  static BasicTensor parameter(Shape shape, std::vector<T> values) {
    auto t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->numel(); }
  std::size_t rows() const { return node_->rows(); }
  std::size_t cols() const { return node_->cols(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Constant copy sharing no graph history.
  BasicTensor detach() const { return constant(node_->shape, node_->value); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<double>;

namespace detail {

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<BasicTensor<T>> parents,
                           std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_leaf = false;
  if (grad_enabled_flag()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& p : parents) n->parents.push_back(p.node_ptr());
      n->backward = std::move(backward);
    }
  }
  return BasicTensor<T>(std::move(n));
}

template <typename T>
BasicTensor<T> make_result_v(Shape shape, std::vector<T> value, const std::vector<BasicTensor<T>>& parents,
                             std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_leaf = false;
  if (grad_enabled_flag()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& p : parents) n->parents.push_back(p.node_ptr());
      n->backward = std::move(backward);
    }
  }
  return BasicTensor<T>(std::move(n));
}

/// Grad buffer of parent i, or nullptr when it does not need one.
template <typename T>
T* pgrad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

enum class Broadcast { kSame, kRow, kScalar };

template <typename T>
Broadcast broadcast_kind(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (b.numel() == a.numel() && (b.shape() == a.shape() || b.numel() == 1)) {
    return b.numel() == 1 && a.numel() != 1 ? Broadcast::kScalar : Broadcast::kSame;
  }
  if (b.numel() == 1) return Broadcast::kScalar;
  if (b.numel() == a.cols()) return Broadcast::kRow;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
}

template <typename T>
std::size_t bindex(Broadcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Broadcast::kSame: return i;
    case Broadcast::kRow: return i % cols;
    case Broadcast::kScalar: return 0;
  }
  return 0;
}

template <typename T, typename F, typename DA, typename DB>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* name, F f, DA da, DB db) {
  const auto kind = broadcast_kind(a, b, name);
  const std::size_t n = a.numel();
  const std::size_t cols = a.cols();
  std::vector<T> out(n);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[bindex<T>(kind, i, cols)]);
  return make_result<T>(a.shape(), std::move(out), {a, b}, [kind, cols, da, db](Node<T>& self) {
    const T* g = self.grad.data();
    const T* av = self.parents[0]->value.data();
    const T* bv = self.parents[1]->value.data();
    T* ga = pgrad(self, 0);
    T* gb = pgrad(self, 1);
    for (std::size_t i = 0; i < self.numel(); ++i) {
      const std::size_t j = bindex<T>(kind, i, cols);
      if (ga) ga[i] += g[i] * da(av[i], bv[j]);
      if (gb) gb[j] += g[i] * db(av[i], bv[j]);
    }
  });
}

template <typename T, typename F, typename D>
BasicTensor<T> unary(const BasicTensor<T>& a, F f, D d) {
  std::vector<T> out(a.numel());
  const T* av = a.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, [d](Node<T>& self) {
    T* ga = pgrad(self, 0);
    if (!ga) return;
    const T* av = self.parents[0]->value.data();
    for (std::size_t i = 0; i < self.numel(); ++i) ga[i] += self.grad[i] * d(av[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// Elementwise add; `b` may broadcast as a row vector (numel == a.cols()) or
/// a scalar.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (b.numel() > a.numel()) return add(b, a);
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (b.numel() > a.numel()) return mul(b, a);
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

/// Elementwise minimum; the gradient goes to `a` on ties.
template <typename T>
BasicTensor<T> minimum(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "minimum", [](T x, T y) { return std::min(x, y); }, [](T x, T y) { return x <= y ? T(1) : T(0); },
      [](T x, T y) { return x <= y ? T(0) : T(1); });
}

template <typename T>
BasicTensor<T> maximum(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary(
      a, b, "maximum", [](T x, T y) { return std::max(x, y); }, [](T x, T y) { return x >= y ? T(1) : T(0); },
      [](T x, T y) { return x >= y ? T(0) : T(1); });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

/// Exact (erf) GELU.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return detail::unary(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2)); },
      [](T x, T) { return T(0.5) * (T(1) + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(T(-0.5) * x * x); });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// Values outside [lo, hi] are clamped and receive zero gradient.
template <typename T>
BasicTensor<T> clamp(const BasicTensor<T>& a, T lo, T hi) {
  return detail::unary(
      a, [lo, hi](T x) { return std::clamp(x, lo, hi); }, [lo, hi](T x, T) { return x >= lo && x <= hi ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  return detail::make_result<T>({1}, {s}, {a}, [](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.parents[0]->numel(); ++i) ga[i] += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Column-wise min over rows: [rows, cols] -> [1, cols]. Earliest row wins ties.
template <typename T>
BasicTensor<T> col_min(const BasicTensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(c);
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t j = 0; j < c; ++j) {
    out[j] = a.at(0, j);
    for (std::size_t i = 1; i < r; ++i) {
      if (a.at(i, j) < out[j]) {
        out[j] = a.at(i, j);
        arg[j] = i;
      }
    }
  }
  return detail::make_result<T>({1, c}, std::move(out), {a}, [arg, c](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t j = 0; j < c; ++j) ga[arg[j] * c + j] += self.grad[j];
  });
}

template <typename T>
BasicTensor<T> col_max(const BasicTensor<T>& a) {
  return scale(col_min(scale(a, T(-1))), T(-1));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [.., K] x [K, N] -> [.., N]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (b.shape().size() != 2 || a.cols() != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto k = static_cast<Eigen::Index>(a.cols());
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::CMatMap<T>(a.values().data(), m, k) * detail::CMatMap<T>(b.values().data(), k, n);
  Shape shape = a.shape();
  shape.back() = static_cast<std::size_t>(n);
  return detail::make_result<T>(std::move(shape), std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    detail::CMatMap<T> g(self.grad.data(), m, n);
    if (T* ga = detail::pgrad(self, 0)) {
      detail::MatMap<T>(ga, m, k).noalias() += g * detail::CMatMap<T>(self.parents[1]->value.data(), k, n).transpose();
    }
    if (T* gb = detail::pgrad(self, 1)) {
      detail::MatMap<T>(gb, k, n).noalias() += detail::CMatMap<T>(self.parents[0]->value.data(), m, k).transpose() * g;
    }
  });
}

/// [M, K] x [N, K]^T -> [M, N]
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const auto m = static_cast<Eigen::Index>(a.rows());
  const auto k = static_cast<Eigen::Index>(a.cols());
  const auto n = static_cast<Eigen::Index>(b.rows());
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::CMatMap<T>(a.values().data(), m, k) * detail::CMatMap<T>(b.values().data(), n, k).transpose();
  return detail::make_result<T>({static_cast<std::size_t>(m), static_cast<std::size_t>(n)}, std::move(out), {a, b},
                                [m, k, n](Node<T>& self) {
                                  detail::CMatMap<T> g(self.grad.data(), m, n);
                                  if (T* ga = detail::pgrad(self, 0)) {
                                    detail::MatMap<T>(ga, m, k).noalias() +=
                                        g * detail::CMatMap<T>(self.parents[1]->value.data(), n, k);
                                  }
                                  if (T* gb = detail::pgrad(self, 1)) {
                                    detail::MatMap<T>(gb, n, k).noalias() +=
                                        g.transpose() * detail::CMatMap<T>(self.parents[0]->value.data(), m, k);
                                  }
                                });
}

/// Batched [B, M, K] x [B, K, N] -> [B, M, N]
template <typename T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto n = static_cast<Eigen::Index>(b.dim(2));
  std::vector<T> out(batch * static_cast<std::size_t>(m * n));
  for (std::size_t i = 0; i < batch; ++i) {
    detail::MatMap<T>(out.data() + i * m * n, m, n).noalias() =
        detail::CMatMap<T>(a.values().data() + i * m * k, m, k) * detail::CMatMap<T>(b.values().data() + i * k * n, k, n);
  }
  return detail::make_result<T>({batch, static_cast<std::size_t>(m), static_cast<std::size_t>(n)}, std::move(out),
                                {a, b}, [batch, m, k, n](Node<T>& self) {
                                  T* ga = detail::pgrad(self, 0);
                                  T* gb = detail::pgrad(self, 1);
                                  const T* av = self.parents[0]->value.data();
                                  const T* bv = self.parents[1]->value.data();
                                  for (std::size_t i = 0; i < batch; ++i) {
                                    detail::CMatMap<T> g(self.grad.data() + i * m * n, m, n);
                                    if (ga) {
                                      detail::MatMap<T>(ga + i * m * k, m, k).noalias() +=
                                          g * detail::CMatMap<T>(bv + i * k * n, k, n).transpose();
                                    }
                                    if (gb) {
                                      detail::MatMap<T>(gb + i * k * n, k, n).noalias() +=
                                          detail::CMatMap<T>(av + i * m * k, m, k).transpose() * g;
                                    }
                                  }
                                });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i, j);
  return detail::make_result<T>({c, r}, std::move(out), {a}, [r, c](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {a}, [](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.numel(); ++i) ga[i] += self.grad[i];
  });
}

/// Concatenate 2-D views along axis 0 (rows) or 1 (columns).
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis == 0) {
    const std::size_t c = parts[0].cols();
    std::size_t r = 0;
    for (const auto& p : parts) {
      if (p.cols() != c) throw ShapeError("concat rows: column mismatch " + shape_str(p.shape()));
      r += p.rows();
    }
    std::vector<T> out;
    out.reserve(r * c);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    return detail::make_result_v<T>({r, c}, std::move(out), parts, [](Node<T>& self) {
      std::size_t off = 0;
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        const std::size_t n = self.parents[i]->numel();
        if (T* g = detail::pgrad(self, i)) {
          for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[off + j];
        }
        off += n;
      }
    });
  }
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat cols: row mismatch " + shape_str(p.shape()));
    c += p.cols();
  }
  std::vector<T> out(r * c);
  std::size_t coff = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.values().data() + i * pc, pc, out.data() + i * c + coff);
    coff += pc;
  }
  return detail::make_result_v<T>({r, c}, std::move(out), parts, [r, c](Node<T>& self) {
    std::size_t coff = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const std::size_t pc = self.parents[k]->cols();
      if (T* g = detail::pgrad(self, k)) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += self.grad[i * c + coff + j];
      }
      coff += pc;
    }
  });
}

template <typename T>
BasicTensor<T> concat(std::initializer_list<BasicTensor<T>> parts, int axis) {
  return concat(std::vector<BasicTensor<T>>(parts), axis);
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& a, std::size_t start, std::size_t len) {
  const std::size_t c = a.cols();
  if (start + len > a.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(len) + ") of " +
                     shape_str(a.shape()));
  }
  std::vector<T> out(a.values().begin() + start * c, a.values().begin() + (start + len) * c);
  return detail::make_result<T>({len, c}, std::move(out), {a}, [start, c](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.numel(); ++i) ga[start * c + i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& a, std::size_t start, std::size_t len) {
  const std::size_t r = a.rows(), c = a.cols();
  if (start + len > c) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(len) + ") of " +
                     shape_str(a.shape()));
  }
  std::vector<T> out(r * len);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(a.values().data() + i * c + start, len, out.data() + i * len);
  return detail::make_result<T>({r, len}, std::move(out), {a}, [r, c, start, len](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < len; ++j) ga[i * c + start + j] += self.grad[i * len + j];
  });
}

/// Row gather: out[i] = table[idx[i]]. Embedding lookup and row repetition.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::vector<std::size_t> idx) {
  const std::size_t c = table.cols();
  const std::size_t r = table.rows();
  std::vector<T> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= r) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " + shape_str(table.shape()));
    }
    std::copy_n(table.values().data() + idx[i] * c, c, out.data() + i * c);
  }
  const std::size_t n = idx.size();
  return detail::make_result<T>({n, c}, std::move(out), {table}, [idx = std::move(idx), c](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += self.grad[i * c + j];
  });
}

// ---------------------------------------------------------------------------
// Normalisation and probability

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = a.values().data() + i * c;
    T* y = out.data() + i * c;
    const T mx = *std::max_element(x, x + c);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= s;
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [r, c](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i) {
      const T* y = self.value.data() + i * c;
      const T* g = self.grad.data() + i * c;
      T dot = T(0);
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = a.values().data() + i * c;
    T* y = out.data() + i * c;
    const T mx = *std::max_element(x, x + c);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) y[j] = x[j] - lse;
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [r, c](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i) {
      const T* y = self.value.data() + i * c;
      const T* g = self.grad.data() + i * c;
      T gs = T(0);
      for (std::size_t j = 0; j < c; ++j) gs += g[j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j] - std::exp(y[j]) * gs;
    }
  });
}

/// Row-wise layer normalisation over the last axis with affine gamma/beta.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5)) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(r);
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = x.values().data() + i * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<T>(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xi[j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        T* gx = detail::pgrad(self, 0);
        T* gg = detail::pgrad(self, 1);
        T* gb = detail::pgrad(self, 2);
        const T* gv = self.parents[1]->value.data();
        for (std::size_t i = 0; i < r; ++i) {
          const T* g = self.grad.data() + i * c;
          const T* xh = xhat.data() + i * c;
          T sum_dy = T(0), sum_dy_xh = T(0);
          for (std::size_t j = 0; j < c; ++j) {
            const T dy = g[j] * gv[j];
            sum_dy += dy;
            sum_dy_xh += dy * xh[j];
            if (gg) gg[j] += g[j] * xh[j];
            if (gb) gb[j] += g[j];
          }
          if (gx) {
            const T inv_c = T(1) / static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T dy = g[j] * gv[j];
              gx[i * c + j] += inv_std[i] * (dy - inv_c * sum_dy - xh[j] * inv_c * sum_dy_xh);
            }
          }
        }
      });
}

/// Inverted dropout; identity in eval mode or when p == 0.
template <typename T, typename Rng>
BasicTensor<T> dropout(const BasicTensor<T>& a, T p, Rng& rng) {
  if (p <= T(0) || eval_mode_flag().load()) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const T s = T(1) / (T(1) - p);
  std::vector<T> mask(a.numel());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * mask[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [mask = std::move(mask)](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < mask.size(); ++i) ga[i] += self.grad[i] * mask[i];
  });
}

/// Sum over rows of weight[i] * -log softmax(logits[i])[target[i]]. Rows with a
/// negative target are skipped.
template <typename T>
BasicTensor<T> weighted_nll(const BasicTensor<T>& logits, const std::vector<int>& targets,
                            const std::vector<T>& weights) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r || weights.size() != r) {
    throw ShapeError("weighted_nll: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  std::vector<T> probs(logits.numel());
  T loss = T(0);
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = logits.values().data() + i * c;
    T* p = probs.data() + i * c;
    const T mx = *std::max_element(x, x + c);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += (p[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) p[j] /= s;
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= c) {
      throw ShapeError("weighted_nll: target " + std::to_string(targets[i]) + " >= classes " + std::to_string(c));
    }
    loss += weights[i] * (mx + std::log(s) - x[targets[i]]);
  }
  return detail::make_result<T>({1}, {loss}, {logits}, [r, c, targets, weights, probs = std::move(probs)](Node<T>& self) {
    T* ga = detail::pgrad(self, 0);
    if (!ga) return;
    const T g = self.grad[0];
    for (std::size_t i = 0; i < r; ++i) {
      if (targets[i] < 0) continue;
      const T w = g * weights[i];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += w * probs[i * c + j];
      ga[i * c + static_cast<std::size_t>(targets[i])] -= w;
    }
  });
}

/// Mean cross-entropy over rows with integer targets.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<int>& targets) {
  std::size_t valid = 0;
  for (int t : targets) valid += t >= 0 ? 1 : 0;
  const T w = valid ? T(1) / static_cast<T>(valid) : T(0);
  return weighted_nll(logits, targets, std::vector<T>(targets.size(), w));
}

/// Mean smooth-L1 over all coordinates: 0.5 d^2 / beta if |d| < beta, else
/// |d| - 0.5 beta.
template <typename T>
BasicTensor<T> smooth_l1(const BasicTensor<T>& pred, const BasicTensor<T>& target, T beta = T(1)) {
  if (pred.numel() != target.numel()) {
    throw ShapeError("smooth_l1: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  const std::size_t n = pred.numel();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.values()[i] - target.values()[i];
    total += std::abs(d) < beta ? T(0.5) * d * d / beta : std::abs(d) - T(0.5) * beta;
  }
  return detail::make_result<T>({1}, {total / static_cast<T>(n)}, {pred, target}, [n, beta](Node<T>& self) {
    T* gp = detail::pgrad(self, 0);
    T* gt = detail::pgrad(self, 1);
    const T* pv = self.parents[0]->value.data();
    const T* tv = self.parents[1]->value.data();
    const T g = self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = pv[i] - tv[i];
      const T dd = std::abs(d) < beta ? d / beta : (d > T(0) ? T(1) : T(-1));
      if (gp) gp[i] += g * dd;
      if (gt) gt[i] -= g * dd;
    }
  });
}

// ---------------------------------------------------------------------------
// Sampling

/// Bilinear sample of a [height*width, C] feature map (row-major, y then x) at
/// normalised locations [M, 2] in [0,1]^2 (x, y). Location u maps to pixel
/// coordinate u*width - 0.5, clamped to the valid range; clamped axes get no
/// location gradient.
template <typename T>
BasicTensor<T> grid_sample(const BasicTensor<T>& features, std::size_t height, std::size_t width,
                           const BasicTensor<T>& locs) {
  if (features.rows() != height * width) {
    throw ShapeError("grid_sample: features " + shape_str(features.shape()) + " for grid " + std::to_string(height) +
                     "x" + std::to_string(width));
  }
  if (locs.cols() != 2) throw ShapeError("grid_sample: locations must be [M,2], got " + shape_str(locs.shape()));
  const std::size_t m = locs.rows(), c = features.cols();

  struct Tap {
    std::size_t x0, x1, y0, y1;
    T fx, fy;
    bool free_x, free_y;
  };
  std::vector<Tap> taps(m);
  std::vector<T> out(m * c, T(0));
  const T* f = features.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T px = locs.values()[2 * i] * static_cast<T>(width) - T(0.5);
    const T py = locs.values()[2 * i + 1] * static_cast<T>(height) - T(0.5);
    const T cx = std::clamp(px, T(0), static_cast<T>(width - 1));
    const T cy = std::clamp(py, T(0), static_cast<T>(height - 1));
    Tap t;
    t.x0 = static_cast<std::size_t>(std::floor(cx));
    t.y0 = static_cast<std::size_t>(std::floor(cy));
    t.x1 = std::min(t.x0 + 1, width - 1);
    t.y1 = std::min(t.y0 + 1, height - 1);
    t.fx = cx - static_cast<T>(t.x0);
    t.fy = cy - static_cast<T>(t.y0);
    t.free_x = px > T(0) && px < static_cast<T>(width - 1);
    t.free_y = py > T(0) && py < static_cast<T>(height - 1);
    taps[i] = t;
    const T w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy), w10 = (1 - t.fx) * t.fy, w11 = t.fx * t.fy;
    const T* r00 = f + (t.y0 * width + t.x0) * c;
    const T* r01 = f + (t.y0 * width + t.x1) * c;
    const T* r10 = f + (t.y1 * width + t.x0) * c;
    const T* r11 = f + (t.y1 * width + t.x1) * c;
    T* o = out.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) o[j] = w00 * r00[j] + w01 * r01[j] + w10 * r10[j] + w11 * r11[j];
  }
  return detail::make_result<T>(
      {m, c}, std::move(out), {features, locs}, [m, c, width, height, taps = std::move(taps)](Node<T>& self) {
        T* gf = detail::pgrad(self, 0);
        T* gl = detail::pgrad(self, 1);
        const T* f = self.parents[0]->value.data();
        for (std::size_t i = 0; i < m; ++i) {
          const Tap& t = taps[i];
          const T* g = self.grad.data() + i * c;
          const std::size_t i00 = (t.y0 * width + t.x0) * c, i01 = (t.y0 * width + t.x1) * c;
          const std::size_t i10 = (t.y1 * width + t.x0) * c, i11 = (t.y1 * width + t.x1) * c;
          if (gf) {
            const T w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy), w10 = (1 - t.fx) * t.fy,
                    w11 = t.fx * t.fy;
            for (std::size_t j = 0; j < c; ++j) {
              gf[i00 + j] += w00 * g[j];
              gf[i01 + j] += w01 * g[j];
              gf[i10 + j] += w10 * g[j];
              gf[i11 + j] += w11 * g[j];
            }
          }
          if (gl) {
            T dfx = T(0), dfy = T(0);
            for (std::size_t j = 0; j < c; ++j) {
              const T a = f[i00 + j], b = f[i01 + j], cc = f[i10 + j], d = f[i11 + j];
              dfx += g[j] * ((b - a) * (1 - t.fy) + (d - cc) * t.fy);
              dfy += g[j] * ((cc - a) * (1 - t.fx) + (d - b) * t.fx);
            }
            if (t.free_x) gl[2 * i] += dfx * static_cast<T>(width);
            if (t.free_y) gl[2 * i + 1] += dfy * static_cast<T>(height);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Backward

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Intermediate gradients are reset on each call, leaf gradients accumulate.
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), T(0));
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

}  // namespace vmap::ad
