// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors and a reverse-mode tape.
//
// A Tensor is a shared handle to a node holding values and, when the tensor
// requires a gradient, a gradient buffer of the same shape. Operations take
// the Tape explicitly; an operation whose inputs all lack requires_grad
// produces a constant and records nothing.
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace mtlcer {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  // Set when backward delivers any gradient to this node; read by the optimizer.
  bool touched = false;
};

}  // namespace detail

template <std::floating_point T>
class Tape;

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (shape.empty()) throw ArgumentError("tensor shape must have at least one dimension");
    for (auto d : shape)
      if (d == 0) throw ArgumentError("tensor dimension must be positive, got " + shape_str(shape));
    if (shape_size(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                           std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }
  static Tensor vector(std::vector<T> v, bool requires_grad = false) {
    auto n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape[0]; }
  std::size_t cols() const { return rank() > 1 ? node_->shape[1] : 1; }
  bool is_scalar() const { return size() == 1 && rank() == 1; }

  std::span<const T> data() const { return node_->data; }
  std::span<T> data() { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad() { return node_->grad; }
  std::vector<T> values() const { return node_->data; }

  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  T item() const {
    if (size() != 1) throw ArgumentError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool touched() const { return node_->touched; }
  void clear_touched() { node_->touched = false; }

  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on)
      node_->grad.assign(node_->data.size(), T(0));
    else
      node_->grad.clear();
  }

  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    node_->touched = false;
  }

  /// A new leaf holding a copy of the values, detached from any tape.
  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), values(), requires_grad); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}
  friend class Tape<T>;

  std::shared_ptr<detail::Node<T>> node_;
};

/// Ordered record of differentiable operations.
///
/// Entries are appended as operations execute, so every entry's inputs were
/// produced before it. backward() walks the entries in exact reverse order.
template <std::floating_point T>
class Tape {
 public:
  using Rule = std::function<void()>;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  /// Allocates the output of an operation. It requires a gradient iff any input does.
  Tensor<T> make_output(Shape shape, std::initializer_list<const Tensor<T>*> inputs) {
    bool rg = false;
    for (auto* in : inputs) rg = rg || in->requires_grad();
    return make_output(std::move(shape), rg);
  }

  Tensor<T> make_output(Shape shape, bool requires_grad) {
    auto n = std::make_shared<detail::Node<T>>();
    n->data.assign(shape_size(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    n->leaf = !requires_grad;
    if (requires_grad) n->grad.assign(n->data.size(), T(0));
    return Tensor<T>(std::move(n));
  }

  /// Records the backward rule of an operation whose output is `out`.
  void record(const Tensor<T>& out, Rule rule) {
    if (!out.requires_grad()) return;
    entries_.push_back({out.node(), std::move(rule)});
  }

  /// Accumulates d(loss)/d(tensor) into every reachable requires_grad tensor.
  ///
  /// Intermediate gradients are reset first; leaf gradients accumulate, so
  /// running backward twice doubles every leaf gradient.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || !loss.is_scalar())
      throw ArgumentError("backward needs a scalar loss, got " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (!loss.requires_grad()) return;
    for (auto& e : entries_) std::fill(e.output->grad.begin(), e.output->grad.end(), T(0));
    loss.node()->grad[0] += T(1);
    loss.node()->touched = true;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->rule();
  }

 private:
  struct Entry {
    std::shared_ptr<detail::Node<T>> output;
    Rule rule;
  };
  std::vector<Entry> entries_;
};

template <std::floating_point T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

namespace detail {

template <std::floating_point T>
using NodePtr = std::shared_ptr<Node<T>>;

// Gradient buffer of an input, or an empty span when it takes no gradient.
template <std::floating_point T>
inline std::span<T> sink(const NodePtr<T>& n) {
  if (!n->requires_grad) return {};
  n->touched = true;
  return n->grad;
}

template <std::floating_point T>
inline void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <std::floating_point T>
inline void require_rank(const char* op, const Tensor<T>& a, std::size_t r) {
  if (a.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations

enum class UnaryOp { Tanh, Sigmoid, Relu, Abs };
enum class BinaryOp { Add, Sub, Mul };

namespace testing_hooks {
// Scales the tanh backward rule; anything other than 1 corrupts it. Used to
// confirm the gradient checker notices a broken rule.
inline double tanh_backward_scale = 1.0;
}  // namespace testing_hooks

template <std::floating_point T>
Tensor<T> elementwise(Tape<T>& tape, BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  static constexpr const char* names[] = {"add", "sub", "mul"};
  detail::require_same_shape(names[static_cast<int>(op)], a, b);
  auto out = tape.make_output(a.shape(), {&a, &b});
  auto y = out.data();
  auto x0 = a.data();
  auto x1 = b.data();
  const std::size_t n = y.size();
  switch (op) {
    case BinaryOp::Add:
      for (std::size_t i = 0; i < n; ++i) y[i] = x0[i] + x1[i];
      break;
    case BinaryOp::Sub:
      for (std::size_t i = 0; i < n; ++i) y[i] = x0[i] - x1[i];
      break;
    case BinaryOp::Mul:
      for (std::size_t i = 0; i < n; ++i) y[i] = x0[i] * x1[i];
      break;
  }
  tape.record(out, [op, an = a.node(), bn = b.node(), on = out.node()] {
    const auto& go = on->grad;
    auto ga = detail::sink(an);
    auto gb = detail::sink(bn);
    const std::size_t n = go.size();
    switch (op) {
      case BinaryOp::Add:
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i];
        break;
      case BinaryOp::Sub:
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= go[i];
        break;
      case BinaryOp::Mul:
        if (!ga.empty())
          for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * bn->data[i];
        if (!gb.empty())
          for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * an->data[i];
        break;
    }
  });
  return out;
}

template <std::floating_point T>
Tensor<T> elementwise(Tape<T>& tape, UnaryOp op, const Tensor<T>& x) {
  auto out = tape.make_output(x.shape(), {&x});
  auto y = out.data();
  auto in = x.data();
  const std::size_t n = y.size();
  switch (op) {
    case UnaryOp::Tanh:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(in[i]);
      break;
    case UnaryOp::Sigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-in[i]));
      break;
    case UnaryOp::Relu:
      for (std::size_t i = 0; i < n; ++i) y[i] = in[i] > T(0) ? in[i] : T(0);
      break;
    case UnaryOp::Abs:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::abs(in[i]);
      break;
  }
  tape.record(out, [op, xn = x.node(), on = out.node()] {
    const auto& go = on->grad;
    const auto& yv = on->data;
    const auto& xv = xn->data;
    auto gx = detail::sink(xn);
    const std::size_t n = gx.size();
    switch (op) {
      case UnaryOp::Tanh: {
        const T s = static_cast<T>(testing_hooks::tanh_backward_scale);
        for (std::size_t i = 0; i < n; ++i) gx[i] += s * go[i] * (T(1) - yv[i] * yv[i]);
        break;
      }
      case UnaryOp::Sigmoid:
        for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * yv[i] * (T(1) - yv[i]);
        break;
      case UnaryOp::Relu:
        for (std::size_t i = 0; i < n; ++i)
          if (xv[i] > T(0)) gx[i] += go[i];
        break;
      case UnaryOp::Abs:
        for (std::size_t i = 0; i < n; ++i) {
          if (xv[i] > T(0))
            gx[i] += go[i];
          else if (xv[i] < T(0))
            gx[i] -= go[i];
        }
        break;
    }
  });
  return out;
}

template <std::floating_point T>
Tensor<T> add(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(t, BinaryOp::Add, a, b);
}
template <std::floating_point T>
Tensor<T> sub(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(t, BinaryOp::Sub, a, b);
}
template <std::floating_point T>
Tensor<T> mul(Tape<T>& t, const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(t, BinaryOp::Mul, a, b);
}
template <std::floating_point T>
Tensor<T> tanh(Tape<T>& t, const Tensor<T>& x) {
  return elementwise(t, UnaryOp::Tanh, x);
}
template <std::floating_point T>
Tensor<T> sigmoid(Tape<T>& t, const Tensor<T>& x) {
  return elementwise(t, UnaryOp::Sigmoid, x);
}
template <std::floating_point T>
Tensor<T> relu(Tape<T>& t, const Tensor<T>& x) {
  return elementwise(t, UnaryOp::Relu, x);
}
template <std::floating_point T>
Tensor<T> abs(Tape<T>& t, const Tensor<T>& x) {
  return elementwise(t, UnaryOp::Abs, x);
}

/// x + bias, where bias is a vector added to x (rank 1) or to every row of x (rank 2).
template <std::floating_point T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank("add_bias", bias, 1);
  const std::size_t c = x.rank() == 1 ? x.size() : x.cols();
  if (x.rank() > 2 || bias.size() != c)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                         shape_str(x.shape()));
  auto out = tape.make_output(x.shape(), {&x, &bias});
  auto y = out.data();
  auto xv = x.data();
  auto bv = bias.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + bv[i % c];
  tape.record(out, [c, xn = x.node(), bn = bias.node(), on = out.node()] {
    const auto& go = on->grad;
    auto gx = detail::sink(xn);
    auto gb = detail::sink(bn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    if (!gb.empty())
      for (std::size_t i = 0; i < go.size(); ++i) gb[i % c] += go[i];
  });
  return out;
}

/// x * c for a constant c.
template <std::floating_point T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T c) {
  auto out = tape.make_output(x.shape(), {&x});
  auto y = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * c;
  tape.record(out, [c, xn = x.node(), on = out.node()] {
    auto gx = detail::sink(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * c;
  });
  return out;
}

/// x / c for a constant c.
template <std::floating_point T>
Tensor<T> div_scalar(Tape<T>& tape, const Tensor<T>& x, T c) {
  if (c == T(0)) throw ArgumentError("div_scalar: division by zero");
  auto out = tape.make_output(x.shape(), {&x});
  auto y = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] / c;
  tape.record(out, [c, xn = x.node(), on = out.node()] {
    auto gx = detail::sink(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] / c;
  });
  return out;
}

/// Sum of all entries, as a scalar.
template <std::floating_point T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  auto out = tape.make_output({1}, {&x});
  T s = 0;
  for (T v : x.data()) s += v;
  out.data()[0] = s;
  tape.record(out, [xn = x.node(), on = out.node()] {
    auto gx = detail::sink(xn);
    const T g = on->grad[0];
    for (auto& v : gx) v += g;
  });
  return out;
}

/// Sum of equally shaped tensors, added left to right.
template <std::floating_point T>
Tensor<T> add_n(Tape<T>& tape, std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ArgumentError("add_n: empty list");
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_same_shape("add_n", parts[0], p);
    rg = rg || p.requires_grad();
  }
  auto out = tape.make_output(parts[0].shape(), rg);
  auto y = out.data();
  for (const auto& p : parts) {
    auto v = p.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += v[i];
  }
  std::vector<detail::NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  tape.record(out, [nodes = std::move(nodes), on = out.node()] {
    for (const auto& n : nodes) {
      auto g = detail::sink(n);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// C = A B for A [m x k], B [k x n].
template <std::floating_point T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto out = tape.make_output({m, n}, {&a, &b});
  auto c = out.data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aip * bv[p * n + j];
    }
  tape.record(out, [m, k, n, an = a.node(), bn = b.node(), on = out.node()] {
    const auto& gc = on->grad;
    auto ga = detail::sink(an);
    auto gb = detail::sink(bn);
    if (!ga.empty())  // dA = dC B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s = 0;
          for (std::size_t j = 0; j < n; ++j) s += gc[i * n + j] * bn->data[p * n + j];
          ga[i * k + p] += s;
        }
    if (!gb.empty())  // dB = A^T dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = an->data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * gc[i * n + j];
        }
  });
  return out;
}

/// y = A x for A [m x n], x [n].
template <std::floating_point T>
Tensor<T> matvec(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& x) {
  if (a.rank() != 2 || x.rank() != 1 || a.cols() != x.size())
    throw DimensionError("matvec: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(x.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  auto out = tape.make_output({m}, {&a, &x});
  auto y = out.data();
  auto av = a.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j] * xv[j];
    y[i] = s;
  }
  tape.record(out, [m, n, an = a.node(), xn = x.node(), on = out.node()] {
    const auto& gy = on->grad;
    auto ga = detail::sink(an);
    auto gx = detail::sink(xn);
    for (std::size_t i = 0; i < m; ++i) {
      const T g = gy[i];
      if (!ga.empty())
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g * xn->data[j];
      if (!gx.empty())
        for (std::size_t j = 0; j < n; ++j) gx[j] += g * an->data[i * n + j];
    }
  });
  return out;
}

/// y = x^T A for x [m], A [m x n].
template <std::floating_point T>
Tensor<T> vecmat(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& a) {
  if (a.rank() != 2 || x.rank() != 1 || a.rows() != x.size())
    throw DimensionError("vecmat: cannot multiply " + shape_str(x.shape()) + " by " +
                         shape_str(a.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  auto out = tape.make_output({n}, {&a, &x});
  auto y = out.data();
  auto av = a.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j] += xv[i] * av[i * n + j];
  tape.record(out, [m, n, an = a.node(), xn = x.node(), on = out.node()] {
    const auto& gy = on->grad;
    auto ga = detail::sink(an);
    auto gx = detail::sink(xn);
    for (std::size_t i = 0; i < m; ++i) {
      if (!gx.empty()) {
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += gy[j] * an->data[i * n + j];
        gx[i] += s;
      }
      if (!ga.empty())
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += xn->data[i] * gy[j];
    }
  });
  return out;
}

template <std::floating_point T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t m = a.rows(), n = a.cols();
  auto out = tape.make_output({n, m}, {&a});
  auto y = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = av[i * n + j];
  tape.record(out, [m, n, an = a.node(), on = out.node()] {
    auto ga = detail::sink(an);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += on->grad[j * m + i];
  });
  return out;
}

/// Y = X W^T + b, applied to every row of X [r x in] with W [out x in], b [out].
template <std::floating_point T>
Tensor<T> linear_rows(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || w.cols() != x.cols() ||
      b.size() != w.rows())
    throw DimensionError("linear_rows: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
  const std::size_t r = x.rows(), in = x.cols(), o = w.rows();
  auto out = tape.make_output({r, o}, {&x, &w, &b});
  auto y = out.data();
  auto xv = x.data();
  auto wv = w.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t k = 0; k < o; ++k) {
      T s = bv[k];
      for (std::size_t j = 0; j < in; ++j) s += wv[k * in + j] * xv[i * in + j];
      y[i * o + k] = s;
    }
  tape.record(out, [r, in, o, xn = x.node(), wn = w.node(), bn = b.node(), on = out.node()] {
    const auto& gy = on->grad;
    auto gx = detail::sink(xn);
    auto gw = detail::sink(wn);
    auto gb = detail::sink(bn);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t k = 0; k < o; ++k) {
        const T g = gy[i * o + k];
        if (!gb.empty()) gb[k] += g;
        if (!gw.empty())
          for (std::size_t j = 0; j < in; ++j) gw[k * in + j] += g * xn->data[i * in + j];
        if (!gx.empty())
          for (std::size_t j = 0; j < in; ++j) gx[i * in + j] += g * wn->data[k * in + j];
      }
  });
  return out;
}

/// y = W x + b for a vector x.
template <std::floating_point T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& w, const Tensor<T>& x, const Tensor<T>& b) {
  return add_bias(tape, matvec(tape, w, x), b);
}

// ---------------------------------------------------------------------------
// Normalization and losses

namespace detail {

template <std::floating_point T>
void softmax_into(std::span<const T> x, std::span<T> y, const char* op) {
  T mx = x[0];
  for (T v : x) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
    mx = std::max(mx, v);
  }
  T z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    z += y[i];
  }
  for (auto& v : y) v /= z;
}

template <std::floating_point T>
void softmax_backward(std::span<const T> y, std::span<const T> gy, std::span<T> gx) {
  T dot = 0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += gy[i] * y[i];
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (gy[i] - dot);
}

}  // namespace detail

/// Softmax of a vector, computed after subtracting the maximum.
template <std::floating_point T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
  detail::require_rank("softmax", x, 1);
  auto out = tape.make_output(x.shape(), {&x});
  detail::softmax_into<T>(x.data(), out.data(), "softmax");
  tape.record(out, [xn = x.node(), on = out.node()] {
    auto gx = detail::sink(xn);
    if (!gx.empty()) detail::softmax_backward<T>(on->data, on->grad, gx);
  });
  return out;
}

/// Softmax applied independently to each row of a matrix.
template <std::floating_point T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x) {
  detail::require_rank("softmax_rows", x, 2);
  const std::size_t r = x.rows(), c = x.cols();
  auto out = tape.make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < r; ++i)
    detail::softmax_into<T>(x.data().subspan(i * c, c), out.data().subspan(i * c, c),
                            "softmax_rows");
  tape.record(out, [r, c, xn = x.node(), on = out.node()] {
    auto gx = detail::sink(xn);
    if (gx.empty()) return;
    std::span<const T> y = on->data, gy = on->grad;
    for (std::size_t i = 0; i < r; ++i)
      detail::softmax_backward<T>(y.subspan(i * c, c), gy.subspan(i * c, c),
                                  gx.subspan(i * c, c));
  });
  return out;
}

/// -log softmax(logits)[truth], fused so the gradient is softmax - onehot.
template <std::floating_point T>
Tensor<T> cross_entropy_logits(Tape<T>& tape, const Tensor<T>& logits, std::size_t truth) {
  detail::require_rank("cross_entropy", logits, 1);
  if (truth >= logits.size())
    throw ArgumentError("cross_entropy: class " + std::to_string(truth) + " out of range for " +
                        std::to_string(logits.size()) + " classes");
  auto lv = logits.data();
  T mx = lv[0];
  for (T v : lv) {
    if (!std::isfinite(v)) throw NumericError("cross_entropy: non-finite logit");
    mx = std::max(mx, v);
  }
  T z = 0;
  for (T v : lv) z += std::exp(v - mx);
  const T log_z = mx + std::log(z);
  auto out = tape.make_output({1}, {&logits});
  out.data()[0] = log_z - lv[truth];
  tape.record(out, [truth, log_z, ln = logits.node(), on = out.node()] {
    auto g = detail::sink(ln);
    const T go = on->grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T p = std::exp(ln->data[i] - log_z);
      g[i] += go * (p - (i == truth ? T(1) : T(0)));
    }
  });
  return out;
}

/// -log dist[truth] for an already normalized distribution (no gradient).
template <std::floating_point T>
T cross_entropy(std::span<const T> dist, std::size_t truth) {
  if (truth >= dist.size())
    throw ArgumentError("cross_entropy: class " + std::to_string(truth) + " out of range for " +
                        std::to_string(dist.size()) + " classes");
  return -std::log(dist[truth]);
}

// ---------------------------------------------------------------------------
// Structural operations

/// Concatenation of vectors.
template <std::floating_point T>
Tensor<T> concat(Tape<T>& tape, std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ArgumentError("concat: empty list of parts");
  std::size_t n = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_rank("concat", p, 1);
    n += p.size();
    rg = rg || p.requires_grad();
  }
  auto out = tape.make_output({n}, rg);
  std::vector<detail::NodePtr<T>> nodes;
  auto y = out.data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), y.begin() + off);
    off += p.size();
    nodes.push_back(p.node());
  }
  tape.record(out, [nodes = std::move(nodes), on = out.node()] {
    std::size_t off = 0;
    for (const auto& p : nodes) {
      auto g = detail::sink(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[off + i];
      off += p->data.size();
    }
  });
  return out;
}

template <std::floating_point T>
Tensor<T> concat(Tape<T>& tape, std::initializer_list<Tensor<T>> parts) {
  return concat<T>(tape, std::span<const Tensor<T>>(parts.begin(), parts.size()));
}

/// Column-wise concatenation of matrices with equal row counts.
template <std::floating_point T>
Tensor<T> concat_cols(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("concat_cols", a, 2);
  detail::require_rank("concat_cols", b, 2);
  if (a.rows() != b.rows())
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols(), c = ca + cb;
  auto out = tape.make_output({r, c}, {&a, &b});
  auto y = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.data().begin() + i * ca, ca, y.begin() + i * c);
    std::copy_n(b.data().begin() + i * cb, cb, y.begin() + i * c + ca);
  }
  tape.record(out, [r, ca, cb, c, an = a.node(), bn = b.node(), on = out.node()] {
    auto ga = detail::sink(an);
    auto gb = detail::sink(bn);
    for (std::size_t i = 0; i < r; ++i) {
      if (!ga.empty())
        for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += on->grad[i * c + j];
      if (!gb.empty())
        for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += on->grad[i * c + ca + j];
    }
  });
  return out;
}

/// Stacks equally sized vectors as the rows of a matrix.
template <std::floating_point T>
Tensor<T> stack_rows(Tape<T>& tape, std::span<const Tensor<T>> rows) {
  if (rows.empty()) throw ArgumentError("stack_rows: empty list");
  const std::size_t c = rows[0].size();
  bool rg = false;
  for (const auto& r : rows) {
    detail::require_rank("stack_rows", r, 1);
    if (r.size() != c)
      throw DimensionError("stack_rows: row " + shape_str(r.shape()) + " vs [" +
                           std::to_string(c) + "]");
    rg = rg || r.requires_grad();
  }
  auto out = tape.make_output({rows.size(), c}, rg);
  std::vector<detail::NodePtr<T>> nodes;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].data().begin(), rows[i].data().end(), out.data().begin() + i * c);
    nodes.push_back(rows[i].node());
  }
  tape.record(out, [c, nodes = std::move(nodes), on = out.node()] {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      auto g = detail::sink(nodes[i]);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += on->grad[i * c + j];
    }
  });
  return out;
}

/// Row i of a matrix, as a vector.
template <std::floating_point T>
Tensor<T> row(Tape<T>& tape, const Tensor<T>& x, std::size_t i) {
  detail::require_rank("row", x, 2);
  if (i >= x.rows())
    throw ArgumentError("row: index " + std::to_string(i) + " out of range for " +
                        shape_str(x.shape()));
  const std::size_t c = x.cols();
  auto out = tape.make_output({c}, {&x});
  std::copy_n(x.data().begin() + i * c, c, out.data().begin());
  tape.record(out, [i, c, xn = x.node(), on = out.node()] {
    auto g = detail::sink(xn);
    for (std::size_t j = 0; j < c; ++j) g[i * c + j] += on->grad[j];
  });
  return out;
}

/// Rows of `table` selected by `ids`, as an [ids.size() x cols] matrix.
template <std::floating_point T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& table, std::span<const std::size_t> ids) {
  detail::require_rank("gather_rows", table, 2);
  if (ids.empty()) throw ArgumentError("gather_rows: empty index list");
  const std::size_t c = table.cols();
  for (auto id : ids)
    if (id >= table.rows())
      throw ArgumentError("gather_rows: index " + std::to_string(id) + " out of range for " +
                          shape_str(table.shape()));
  auto out = tape.make_output({ids.size(), c}, {&table});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data().begin() + ids[i] * c, c, out.data().begin() + i * c);
  tape.record(out, [c, idv = std::vector<std::size_t>(ids.begin(), ids.end()), tn = table.node(),
                    on = out.node()] {
    auto g = detail::sink(tn);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idv[i] * c + j] += on->grad[i * c + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Regularization and initialization

/// Inverted dropout: each unit is zeroed with probability `rate`, survivors
/// are scaled by 1 / (1 - rate). Identity when not training or rate == 0.
template <std::floating_point T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0) || rate >= 1.0)
    throw ArgumentError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : keep_scale;
  auto out = tape.make_output(x.shape(), {&x});
  auto y = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * mask[i];
  tape.record(out, [mask = std::move(mask), xn = x.node(), on = out.node()] {
    auto g = detail::sink(xn);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * mask[i];
  });
  return out;
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)). For a matrix [out x in] the
/// fans are (in, out); for a vector [n] they are (n, 1).
template <std::floating_point T>
Tensor<T> init_param(const Shape& shape, Rng& rng) {
  if (shape.empty() || shape.size() > 2) throw ArgumentError("init_param: rank must be 1 or 2");
  for (auto d : shape)
    if (d == 0) throw ArgumentError("init_param: zero dimension in " + shape_str(shape));
  const double fan_in = shape.size() == 2 ? static_cast<double>(shape[1]) : double(shape[0]);
  const double fan_out = shape.size() == 2 ? static_cast<double>(shape[0]) : 1.0;
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<T> v(shape_size(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
  return Tensor<T>(shape, std::move(v), true);
}

template <std::floating_point T>
Tensor<T> init_bias(std::size_t n) {
  if (n == 0) throw ArgumentError("init_bias: zero dimension");
  return Tensor<T>::zeros({n}, true);
}

}  // namespace mtlcer
