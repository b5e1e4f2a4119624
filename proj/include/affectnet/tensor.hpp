#pragma once

// Dense NCHW tensors with a define-by-run reverse-mode tape.
//
// A BasicTensor is a shared handle: copies alias the same storage. Operations
// allocate fresh outputs and, while a Tape is alive on the current thread and
// at least one input requires a gradient, append a backward rule to it.
// Tape::backward walks the recorded rules once, newest first.
//
// Everything is templated on the scalar so the same graph can be evaluated in
// 32-bit (training) or 64-bit (gradient checks).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "affectnet/error.hpp"

namespace affectnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <class T>
class BasicTensor;
template <class T>
class Tape;

namespace detail {

// Reductions accumulate in at least double precision.
template <class T>
using Acc = std::conditional_t<(sizeof(T) < sizeof(double)), double, T>;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::ptrdiff_t tape_index = -1;  // -1: leaf or constant
};

// Name of an op whose backward rule is deliberately skewed; used only to prove
// that the gradient suite catches a broken rule.
inline std::string& corrupted_backward_op() {
  thread_local std::string op;
  return op;
}

template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

}  // namespace detail

template <class T>
class BasicTensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  BasicTensor() : BasicTensor(Shape{}, std::vector<T>{T(0)}) {}

  BasicTensor(Shape shape, std::vector<T> data) : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static BasicTensor full(Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value));
  }
  static BasicTensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static BasicTensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // In-place writes are for parameters and test fixtures; never mutate a
  // tensor that an un-run tape still references.
  std::span<T> mutable_data() { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Gradient accumulator for backward rules; allocated as zeros on first use.
  std::span<T> grad_buffer() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
  }

  bool on_tape() const { return node_->tape_index >= 0; }
  bool same_storage(const BasicTensor& other) const { return node_ == other.node_; }

  BasicTensor detach() const { return BasicTensor(shape(), node_->data); }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return BasicTensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Records operations while alive; nests (restores the previous tape on exit).
template <class T>
class Tape {
 public:
  using Rule = std::function<void(std::span<const T>)>;

  Tape() : previous_(detail::active_tape<T>()) { detail::active_tape<T>() = this; }
  ~Tape() {
    for (auto& entry : entries_) entry.output->tape_index = -1;
    detail::active_tape<T>() = previous_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return detail::active_tape<T>(); }

  std::size_t size() const { return entries_.size(); }

  std::size_t record(const BasicTensor<T>& output, Rule rule) {
    entries_.push_back({output.node(), std::move(rule)});
    output.node()->tape_index = static_cast<std::ptrdiff_t>(entries_.size() - 1);
    return entries_.size() - 1;
  }

  // Seeds d(loss)/d(loss) = 1 and accumulates into every reachable input.
  void backward(const BasicTensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.grad_buffer()[0] += T(1);
    if (!loss.on_tape()) return;  // loss is itself a leaf
    const auto last = static_cast<std::size_t>(loss.node()->tape_index);
    if (last >= entries_.size() || entries_[last].output != loss.node()) {
      throw std::logic_error("backward: loss was recorded on a different tape");
    }
    for (auto i = static_cast<std::ptrdiff_t>(loss.node()->tape_index); i >= 0; --i) {
      auto& entry = entries_[static_cast<std::size_t>(i)];
      if (entry.output->grad.empty()) continue;
      entry.rule(entry.output->grad);
    }
  }

 private:
  struct Entry {
    std::shared_ptr<detail::Node<T>> output;
    Rule rule;
  };
  std::vector<Entry> entries_;
  Tape* previous_;
  bool consumed_ = false;
};

// Backward through the tape active on this thread.
template <class T>
void backward(const BasicTensor<T>& loss) {
  auto* tape = Tape<T>::active();
  if (!tape) throw std::logic_error("backward: no active tape");
  tape->backward(loss);
}

// Wraps a freshly computed output; records `rule` if any input needs a gradient.
template <class T, class Rule, class... Inputs>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> data, Rule&& rule,
                           const Inputs&... inputs) {
  BasicTensor<T> out(std::move(shape), std::move(data));
#ifndef NDEBUG
  const auto finite = [](std::span<const T> v) {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
  };
  if (!finite(out.data()) && (finite(inputs.data()) && ...)) {
    throw NumericalError(std::string(op) + ": non-finite output from finite inputs");
  }
#else
  (void)op;
#endif
  auto* tape = Tape<T>::active();
  if (tape && (inputs.requires_grad() || ...)) {
    out.set_requires_grad(true);
    typename Tape<T>::Rule recorded(std::forward<Rule>(rule));
    if (detail::corrupted_backward_op() == op) {
      recorded = [inner = std::move(recorded)](std::span<const T> g) {
        std::vector<T> skewed(g.begin(), g.end());
        for (auto& v : skewed) v *= T(1.5);
        inner(skewed);
      };
    }
    tape->record(out, std::move(recorded));
  }
  return out;
}

namespace detail {

// Flat index into `b` for every flat index of `a`; empty when shapes match.
inline std::vector<std::size_t> broadcast_map(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return {};
  const bool scalar = b.empty();
  if (!scalar && b.size() != a.size()) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
  }
  if (!scalar) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (b[i] != a[i] && b[i] != 1) {
        throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
      }
    }
  }
  const std::size_t n = shape_numel(a);
  std::vector<std::size_t> map(n, 0);
  if (scalar) return map;
  // Strides of b with zero stride along broadcast axes.
  std::vector<std::size_t> bstride(a.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = a.size(); i-- > 0;) {
    bstride[i] = b[i] == 1 ? 0 : stride;
    stride *= b[i];
  }
  std::vector<std::size_t> idx(a.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < a.size(); ++d) off += idx[d] * bstride[d];
    map[flat] = off;
    for (std::size_t d = a.size(); d-- > 0;) {
      if (++idx[d] < a[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

template <class T>
void require_rank(const char* op, const BasicTensor<T>& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(x.shape()));
  }
}

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

template <class T>
BasicTensor<T> binary(const char* op, BinaryKind kind, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto map = std::make_shared<const std::vector<std::size_t>>(broadcast_map(op, a.shape(), b.shape()));
  const bool direct = map->empty();
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const T bv = bd[direct ? i : (*map)[i]];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = ad[i] + bv; break;
      case BinaryKind::kSub: out[i] = ad[i] - bv; break;
      case BinaryKind::kMul: out[i] = ad[i] * bv; break;
      case BinaryKind::kDiv: out[i] = ad[i] / bv; break;
    }
  }
  auto rule = [a, b, map, kind](std::span<const T> g) {
    const bool direct = map->empty();
    const auto ad = a.data();
    const auto bd = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T bv = bd[direct ? i : (*map)[i]];
        switch (kind) {
          case BinaryKind::kAdd:
          case BinaryKind::kSub: ga[i] += g[i]; break;
          case BinaryKind::kMul: ga[i] += g[i] * bv; break;
          case BinaryKind::kDiv: ga[i] += g[i] / bv; break;
        }
      }
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t j = direct ? i : (*map)[i];
        switch (kind) {
          case BinaryKind::kAdd: gb[j] += g[i]; break;
          case BinaryKind::kSub: gb[j] -= g[i]; break;
          case BinaryKind::kMul: gb[j] += g[i] * ad[i]; break;
          case BinaryKind::kDiv: gb[j] -= g[i] * ad[i] / (bd[j] * bd[j]); break;
        }
      }
    }
  };
  return make_result<T>(op, a.shape(), std::move(out), std::move(rule), a, b);
}

template <class T, class Fwd, class Deriv>
BasicTensor<T> unary(const char* op, const BasicTensor<T>& x, Fwd fwd, Deriv deriv) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  auto y = std::make_shared<std::vector<T>>(out);
  auto rule = [x, y, deriv](std::span<const T> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    const auto xd = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xd[i], (*y)[i]);
  };
  return make_result<T>(op, x.shape(), std::move(out), std::move(rule), x);
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. `b` may broadcast along singleton axes of equal rank,
// or be a rank-0 scalar.

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary("add", detail::BinaryKind::kAdd, a, b);
}
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary("sub", detail::BinaryKind::kSub, a, b);
}
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary("mul", detail::BinaryKind::kMul, a, b);
}
template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary("div", detail::BinaryKind::kDiv, a, b);
}

template <class T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <class T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <class T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }
template <class T>
BasicTensor<T> operator/(const BasicTensor<T>& a, const BasicTensor<T>& b) { return div(a, b); }

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  return detail::unary("scale", x, [factor](T v) { return v * factor; },
                       [factor](T, T) { return factor; });
}

template <class T>
BasicTensor<T> operator-(const BasicTensor<T>& x) { return scale(x, T(-1)); }

// ---------------------------------------------------------------------------
// Activations

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return detail::unary("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                       [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return detail::unary("sigmoid", x, [](T v) { return detail::stable_sigmoid(v); },
                       [](T, T s) { return s * (T(1) - s); });
}

template <class T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  return detail::unary("tanh", x, [](T v) { return std::tanh(v); },
                       [](T, T t) { return T(1) - t * t; });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return detail::unary("exp", x, [](T v) { return std::exp(v); }, [](T, T e) { return e; });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto rule = [x](std::span<const T> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  };
  return make_result<T>("reshape", std::move(shape), std::move(out), std::move(rule), x);
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  detail::require_rank("transpose", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xd[r * cols + c];
  auto rule = [x, rows, cols](std::span<const T> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[c * rows + r];
  };
  return make_result<T>("transpose", Shape{cols, rows}, std::move(out), std::move(rule), x);
}

// Feature-axis concatenation of (N,D1) and (N,D2).
template <class T>
BasicTensor<T> concat(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank("concat", a, 2);
  detail::require_rank("concat", b, 2);
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("concat: batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), d1 = a.dim(1), d2 = b.dim(1), d = d1 + d2;
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * d1, d1, out.begin() + i * d);
    std::copy_n(b.data().begin() + i * d2, d2, out.begin() + i * d + d1);
  }
  auto rule = [a, b, n, d1, d2](std::span<const T> g) {
    const std::size_t d = d1 + d2;
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d1; ++j) ga[i * d1 + j] += g[i * d + j];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d2; ++j) gb[i * d2 + j] += g[i * d + d1 + j];
    }
  };
  return make_result<T>("concat", Shape{n, d}, std::move(out), std::move(rule), a, b);
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  detail::Acc<T> s = 0;
  for (T v : x.data()) s += v;
  auto rule = [x](std::span<const T> g) {
    if (!x.requires_grad()) return;
    for (auto& v : x.grad_buffer()) v += g[0];
  };
  return make_result<T>("sum", Shape{}, std::vector<T>{static_cast<T>(s)}, std::move(rule), x);
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Row-wise max-shifted log-sum-exp of (N,K) -> (N).
template <class T>
BasicTensor<T> log_sum_exp(const BasicTensor<T>& x) {
  detail::require_rank("log_sum_exp", x, 2);
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (k == 0) throw ShapeError("log_sum_exp: K must be >= 1");
  const auto xd = x.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = xd.subspan(i * k, k);
    const T m = *std::max_element(row.begin(), row.end());
    detail::Acc<T> s = 0;
    for (T v : row) s += std::exp(static_cast<detail::Acc<T>>(v) - m);
    out[i] = static_cast<T>(m + std::log(s));
  }
  auto lse = std::make_shared<std::vector<T>>(out);
  auto rule = [x, lse, n, k](std::span<const T> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    const auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += g[i] * std::exp(xd[i * k + j] - (*lse)[i]);
  };
  return make_result<T>("log_sum_exp", Shape{n}, std::move(out), std::move(rule), x);
}

// Row-wise element selection: (N,K), indices[N] -> (N).
template <class T>
BasicTensor<T> pick(const BasicTensor<T>& x, std::span<const std::size_t> indices) {
  detail::require_rank("pick", x, 2);
  const std::size_t n = x.dim(0), k = x.dim(1);
  if (indices.size() != n) throw ShapeError("pick: need one index per row");
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (indices[i] >= k) {
      throw ValidationError("pick: index " + std::to_string(indices[i]) + " out of range for K=" + std::to_string(k));
    }
    out[i] = x.data()[i * k + indices[i]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  auto rule = [x, idx, k](std::span<const T> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i * k + (*idx)[i]] += g[i];
  };
  return make_result<T>("pick", Shape{n}, std::move(out), std::move(rule), x);
}

// Mean of v(N) over entries with mask set. With an empty mask the result is a
// constant zero that carries no gradient.
template <class T>
BasicTensor<T> masked_mean(const BasicTensor<T>& v, std::span<const std::uint8_t> mask) {
  detail::require_rank("masked_mean", v, 1);
  if (mask.size() != v.dim(0)) throw ShapeError("masked_mean: mask length mismatch");
  const auto count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
  if (count == 0) return BasicTensor<T>::scalar(T(0));
  detail::Acc<T> s = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) s += v.data()[i];
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  const T inv = T(1) / static_cast<T>(count);
  auto rule = [v, m, inv](std::span<const T> g) {
    if (!v.requires_grad()) return;
    auto gv = v.grad_buffer();
    for (std::size_t i = 0; i < m->size(); ++i)
      if ((*m)[i]) gv[i] += g[0] * inv;
  };
  return make_result<T>("masked_mean", Shape{}, std::vector<T>{static_cast<T>(s / static_cast<detail::Acc<T>>(count))},
                        std::move(rule), v);
}

// ---------------------------------------------------------------------------
// Dense algebra

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<T> out(n * m, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ad[i * k + p];
      const T* brow = bd.data() + p * m;
      T* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  auto rule = [a, b, n, k, m](std::span<const T> g) {
    const auto ad = a.data();
    const auto bd = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s = 0;
          for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * bd[p * m + j];
          ga[i * k + p] += s;
        }
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = ad[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += av * g[i * m + j];
        }
    }
  };
  return make_result<T>("matmul", Shape{n, m}, std::move(out), std::move(rule), a, b);
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NCHW)

struct Conv2dGeometry {
  std::size_t n, c, h, w;     // input
  std::size_t f, kh, kw;      // filters
  std::size_t stride, padding;
  std::size_t oh, ow;         // output

  // Windows that would start past the padded extent are dropped (floor), so a
  // stride-2 layer halves an even extent. Only an empty output is an error.
  static std::size_t out_extent(const char* what, std::size_t in, std::size_t k, std::size_t stride,
                                std::size_t padding) {
    const std::size_t padded = in + 2 * padding;
    if (padded < k) {
      throw ShapeError(std::string("conv2d: empty output ") + what + " for input " + std::to_string(in) +
                       ", kernel " + std::to_string(k) + ", padding " + std::to_string(padding));
    }
    return (padded - k) / stride + 1;
  }
};

namespace detail {

// col[(c*kh + i)*kw + j][oy*ow + ox] for one sample.
template <class T>
void im2col(const T* x, const Conv2dGeometry& g, T* col) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            dst[oy * g.ow + ox] = inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const Conv2dGeometry& g, T* x) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += src[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation: x(N,C,H,W), w(F,C,kh,kw), bias(F) -> (N,F,H',W').
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", w, 4);
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0) throw ShapeError("conv2d: kernel sizes must be odd");
  if (bias.rank() != 1 || bias.dim(0) != w.dim(0)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(w.dim(0)) + " filters");
  }
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), stride, padding, 0, 0};
  g.oh = Conv2dGeometry::out_extent("height", g.h, g.kh, stride, padding);
  g.ow = Conv2dGeometry::out_extent("width", g.w, g.kw, stride, padding);

  const std::size_t kdim = g.c * g.kh * g.kw;
  const std::size_t plane = g.oh * g.ow;
  auto cols = std::make_shared<std::vector<T>>(g.n * kdim * plane);
  std::vector<T> out(g.n * g.f * plane);
  const auto xd = x.data();
  const auto wd = w.data();
  const auto bd = bias.data();
  for (std::size_t s = 0; s < g.n; ++s) {
    T* col = cols->data() + s * kdim * plane;
    detail::im2col(xd.data() + s * g.c * g.h * g.w, g, col);
    for (std::size_t f = 0; f < g.f; ++f) {
      T* o = out.data() + (s * g.f + f) * plane;
      std::fill_n(o, plane, bd[f]);
      for (std::size_t k = 0; k < kdim; ++k) {
        const T wv = wd[f * kdim + k];
        const T* c = col + k * plane;
        for (std::size_t p = 0; p < plane; ++p) o[p] += wv * c[p];
      }
    }
  }
  auto rule = [x, w, bias, g, cols, kdim, plane](std::span<const T> gout) {
    if (bias.requires_grad()) {
      auto gb = bias.grad_buffer();
      for (std::size_t s = 0; s < g.n; ++s)
        for (std::size_t f = 0; f < g.f; ++f) {
          detail::Acc<T> acc = 0;
          const T* go = gout.data() + (s * g.f + f) * plane;
          for (std::size_t p = 0; p < plane; ++p) acc += go[p];
          gb[f] += static_cast<T>(acc);
        }
    }
    if (w.requires_grad()) {
      auto gw = w.grad_buffer();
      for (std::size_t s = 0; s < g.n; ++s) {
        const T* col = cols->data() + s * kdim * plane;
        for (std::size_t f = 0; f < g.f; ++f) {
          const T* go = gout.data() + (s * g.f + f) * plane;
          for (std::size_t k = 0; k < kdim; ++k) {
            const T* c = col + k * plane;
            T acc = 0;
            for (std::size_t p = 0; p < plane; ++p) acc += go[p] * c[p];
            gw[f * kdim + k] += acc;
          }
        }
      }
    }
    if (x.requires_grad()) {
      auto gx = x.grad_buffer();
      const auto wd = w.data();
      std::vector<T> gcol(kdim * plane);
      for (std::size_t s = 0; s < g.n; ++s) {
        std::fill(gcol.begin(), gcol.end(), T(0));
        for (std::size_t f = 0; f < g.f; ++f) {
          const T* go = gout.data() + (s * g.f + f) * plane;
          for (std::size_t k = 0; k < kdim; ++k) {
            const T wv = wd[f * kdim + k];
            T* gc = gcol.data() + k * plane;
            for (std::size_t p = 0; p < plane; ++p) gc[p] += wv * go[p];
          }
        }
        detail::col2im_add(gcol.data(), g, gx.data() + s * g.c * g.h * g.w);
      }
    }
  };
  return make_result<T>("conv2d", Shape{g.n, g.f, g.oh, g.ow}, std::move(out), std::move(rule), x, w, bias);
}

// (N,C,H,W) -> (N,C) spatial mean.
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  detail::require_rank("global_avg_pool", x, 4);
  const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  if (plane == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  std::vector<T> out(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    detail::Acc<T> s = 0;
    for (std::size_t p = 0; p < plane; ++p) s += x.data()[i * plane + p];
    out[i] = static_cast<T>(s / static_cast<detail::Acc<T>>(plane));
  }
  auto rule = [x, nc, plane](std::span<const T> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    const T inv = T(1) / static_cast<T>(plane);
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t p = 0; p < plane; ++p) gx[i * plane + p] += g[i] * inv;
  };
  return make_result<T>("global_avg_pool", Shape{x.dim(0), x.dim(1)}, std::move(out), std::move(rule), x);
}

// (N,C,H,W) -> (N,C) spatial max; gradient goes to the first maximum in
// row-major order.
template <class T>
BasicTensor<T> global_max_pool(const BasicTensor<T>& x) {
  detail::require_rank("global_max_pool", x, 4);
  const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  if (plane == 0) throw ShapeError("global_max_pool: empty spatial extent");
  std::vector<T> out(nc);
  auto arg = std::make_shared<std::vector<std::size_t>>(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    std::size_t best = 0;
    for (std::size_t p = 1; p < plane; ++p)
      if (x.data()[i * plane + p] > x.data()[i * plane + best]) best = p;
    (*arg)[i] = i * plane + best;
    out[i] = x.data()[(*arg)[i]];
  }
  auto rule = [x, arg](std::span<const T> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*arg)[i]] += g[i];
  };
  return make_result<T>("global_max_pool", Shape{x.dim(0), x.dim(1)}, std::move(out), std::move(rule), x);
}

// (N,C,H,W) -> (N,2,H,W): plane 0 is the mean across channels, plane 1 the max
// (ties to the lowest channel).
template <class T>
BasicTensor<T> channel_pool(const BasicTensor<T>& x) {
  detail::require_rank("channel_pool", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (c == 0) throw ShapeError("channel_pool: need at least one channel");
  std::vector<T> out(n * 2 * plane);
  auto arg = std::make_shared<std::vector<std::size_t>>(n * plane);
  const auto xd = x.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t p = 0; p < plane; ++p) {
      detail::Acc<T> acc = 0;
      std::size_t best = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T v = xd[(s * c + ch) * plane + p];
        acc += v;
        if (v > xd[(s * c + best) * plane + p]) best = ch;
      }
      out[(s * 2) * plane + p] = static_cast<T>(acc / static_cast<detail::Acc<T>>(c));
      out[(s * 2 + 1) * plane + p] = xd[(s * c + best) * plane + p];
      (*arg)[s * plane + p] = best;
    }
  auto rule = [x, arg, n, c, plane](std::span<const T> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    const T inv = T(1) / static_cast<T>(c);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < plane; ++p) {
        const T gm = g[(s * 2) * plane + p] * inv;
        for (std::size_t ch = 0; ch < c; ++ch) gx[(s * c + ch) * plane + p] += gm;
        gx[(s * c + (*arg)[s * plane + p]) * plane + p] += g[(s * 2 + 1) * plane + p];
      }
  };
  return make_result<T>("channel_pool", Shape{n, 2, x.dim(2), x.dim(3)}, std::move(out), std::move(rule), x);
}

// ---------------------------------------------------------------------------
// Regularization

// Inverted dropout: survivors are scaled by 1/(1-p); identity when not training.
template <class T, class Rng>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ValidationError("dropout: probability must lie in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  for (auto& m : *mask) m = unif(rng) >= p ? keep_scale : T(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * (*mask)[i];
  auto rule = [x, mask](std::span<const T> g) {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  };
  return make_result<T>("dropout", x.shape(), std::move(out), std::move(rule), x);
}

}  // namespace affectnet
