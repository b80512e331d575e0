/*
 * Copyright 2026 The GPSVI Lab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense float64 tensors with tape-recorded reverse-mode differentiation.
//
// A Tape is opened per forward pass and becomes the thread's active tape.
// Every op whose inputs require gradients records a backward closure on it;
// Tape::backward replays those closures in reverse creation order, which is
// a valid topological order because inputs always precede outputs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gpsvi/errors.hpp"

namespace gpsvi {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  const Tape* tape = nullptr;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (!has_grad) {
      grad.assign(value.size(), 0.0);
      has_grad = true;
    }
  }
};

inline void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("zero-sized dimension in shape " + to_string(shape));
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    return make_leaf(std::move(shape), std::move(values), false);
  }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return make_leaf(std::move(shape), std::move(values), true);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value) {
    auto n = numel(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, value), false);
  }
  static Tensor scalar(double value) { return constant({}, {value}); }
  static Tensor vector(std::vector<double> values) {
    Shape shape{values.size()};
    return constant(std::move(shape), std::move(values));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }

  std::span<const double> values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const {
    if (size() != 1) throw RankError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  // Empty span until a backward pass has reached this tensor.
  std::span<const double> grad() const {
    if (!node_->has_grad) return {};
    return node_->grad;
  }
  bool has_grad() const { return node_->has_grad; }
  void zero_grad() {
    node_->grad.clear();
    node_->has_grad = false;
  }

  // Only leaves may be mutated in place (optimizer updates, test fixtures).
  std::span<double> mutable_values() {
    if (!is_leaf()) throw TapeError("mutable_values() on a recorded op output");
    return node_->value;
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  static Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    detail::check_shape(shape);
    if (numel(shape) != values.size()) {
      throw ShapeError("shape " + to_string(shape) + " holds " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  std::shared_ptr<detail::Node> node_;
};

class Tape {
 public:
  Tape() : previous_(slot()) { slot() = this; }
  ~Tape() { slot() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return slot(); }

  std::size_t size() const { return entries_.size(); }

  void record(const std::shared_ptr<detail::Node>& node) {
    node->tape = this;
    entries_.push_back(node);
  }

  // Populates grad on every reachable tensor that requires it, then drops the
  // recorded closures. Leaf gradients accumulate across calls.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw RankError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (loss.node()->tape != this) {
      throw TapeError("loss was not recorded on this tape");
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      detail::Node& node = **it;
      if (node.has_grad && node.backward) node.backward(node);
    }
    for (auto& node : entries_) {
      node->backward = nullptr;
      node->inputs.clear();
      node->tape = nullptr;
    }
    entries_.clear();
  }

 private:
  static Tape*& slot() {
    static thread_local Tape* current = nullptr;
    return current;
  }

  std::vector<std::shared_ptr<detail::Node>> entries_;
  Tape* previous_;
};

// Free-function form of Tape::backward on the active tape.
inline void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw TapeError("backward() with no active tape");
  tape->backward(loss);
}

namespace detail {

using BackwardFn = std::function<void(Node&)>;

// Wraps a freshly computed value as an op output, recording it on the active
// tape when any input requires gradients.
inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::vector<std::shared_ptr<Node>> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  Tape* tape = Tape::active();
  if (needs_grad && tape != nullptr) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor(std::move(node));
}

inline double* grad_of(Node& node) {
  if (!node.requires_grad) return nullptr;
  node.ensure_grad();
  return node.grad.data();
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Numpy-style broadcast of two shapes: dimensions are aligned on the right and
// must either match or be 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t offset = out.size() - in.size();
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + offset] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const std::size_t total = numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  if (out.empty()) {
    fn(0, 0, 0);
    return;
  }
  auto sa = broadcast_strides(a, out);
  auto sb = broadcast_strides(b, out);
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t io = 0; io < total; io += inner) {
    for (std::size_t k = 0; k < inner; ++k) fn(io + k, ia + k * ia_step, ib + k * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      ia += sa[d];
      ib += sb[d];
      if (counter[d] < out[d]) break;
      ia -= sa[d] * counter[d];
      ib -= sb[d] * counter[d];
      counter[d] = 0;
    }
  }
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  Shape out = broadcast_shape(a.shape(), b.shape());
  std::vector<double> value(numel(out));
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for_each_broadcast(out, a.shape(), b.shape(),
                     [&](std::size_t o, std::size_t i, std::size_t j) { value[o] = fwd(av[i], bv[j]); });
  auto an = a.node();
  auto bn = b.node();
  return make_result(out, std::move(value), {an, bn}, [an, bn, da, db](Node& self) {
    double* ga = grad_of(*an);
    double* gb = grad_of(*bn);
    const double* x = an->value.data();
    const double* y = bn->value.data();
    const double* g = self.grad.data();
    for_each_broadcast(self.shape, an->shape, bn->shape,
                       [&](std::size_t o, std::size_t i, std::size_t j) {
                         if (ga) ga[i] += g[o] * da(x[i], y[j]);
                         if (gb) gb[j] += g[o] * db(x[i], y[j]);
                       });
  });
}

// dfn receives (input, output) so activations can reuse their forward value.
template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& x, Fwd fwd, Dfn dfn) {
  std::vector<double> value(x.size());
  const double* xv = x.values().data();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = fwd(xv[i]);
  auto xn = x.node();
  return make_result(x.shape(), std::move(value), {xn}, [xn, dfn](Node& self) {
    double* gx = grad_of(*xn);
    if (!gx) return;
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      gx[i] += self.grad[i] * dfn(xn->value[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (broadcasting).

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  for (double y : b.values()) {
    if (y == 0.0) throw DomainError("division by zero");
  }
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities.

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return detail::unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw DomainError("sqrt of non-positive value " + std::to_string(v));
  }
  return detail::unary_op(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// max(0, x); same primitive as relu.
inline Tensor max0(const Tensor& x) { return relu(x); }

inline double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

// Values outside [lo, hi] are pinned and receive zero gradient.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary_op(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// Elementwise binary cross-entropy of sigmoid(logits) against 0/1 targets,
// in the log-sum-exp form max(x,0) - x*y + log(1 + exp(-|x|)).
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_with_logits: " + to_string(logits.shape()) + " vs " +
                     to_string(targets.shape()));
  }
  std::vector<double> value(logits.size());
  for (std::size_t i = 0; i < value.size(); ++i) {
    double x = logits[i];
    double y = targets[i];
    value[i] = std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  auto ln = logits.node();
  auto tn = targets.node();
  return detail::make_result(logits.shape(), std::move(value), {ln, tn}, [ln, tn](detail::Node& self) {
    double* gl = detail::grad_of(*ln);
    double* gt = detail::grad_of(*tn);
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      double x = ln->value[i];
      double y = tn->value[i];
      if (gl) gl[i] += self.grad[i] * (stable_sigmoid(x) - y);
      if (gt) gt[i] += self.grad[i] * (-x);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum(const Tensor& x, long axis, bool keepdim = false) {
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  auto split = detail::split_at(x.shape(), ax);
  Shape out = x.shape();
  if (keepdim) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + static_cast<long>(ax));
  }
  std::vector<double> value(split.outer * split.inner, 0.0);
  const double* xv = x.values().data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t k = 0; k < split.n; ++k) {
      const double* row = xv + (o * split.n + k) * split.inner;
      double* dst = value.data() + o * split.inner;
      for (std::size_t i = 0; i < split.inner; ++i) dst[i] += row[i];
    }
  }
  auto xn = x.node();
  return detail::make_result(out, std::move(value), {xn}, [xn, split](detail::Node& self) {
    double* gx = detail::grad_of(*xn);
    if (!gx) return;
    for (std::size_t o = 0; o < split.outer; ++o) {
      const double* g = self.grad.data() + o * split.inner;
      for (std::size_t k = 0; k < split.n; ++k) {
        double* dst = gx + (o * split.n + k) * split.inner;
        for (std::size_t i = 0; i < split.inner; ++i) dst[i] += g[i];
      }
    }
  });
}

inline Tensor mean(const Tensor& x, long axis, bool keepdim = false) {
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.shape()[ax]));
}

// Sum of every element, as a rank-0 tensor.
inline Tensor sum_all(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  auto xn = x.node();
  return detail::make_result({}, {total}, {xn}, [xn](detail::Node& self) {
    double* gx = detail::grad_of(*xn);
    if (!gx) return;
    for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += self.grad[0];
  });
}

inline Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// Softmax with max-subtraction. The masked variant excludes positions whose
// mask entry is 0 from normalization; a fully masked slice yields all zeros.

inline Tensor masked_softmax(const Tensor& x, const Tensor& mask, long axis) {
  if (mask.shape() != x.shape()) {
    throw ShapeError("softmax mask " + to_string(mask.shape()) + " vs input " +
                     to_string(x.shape()));
  }
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  auto split = detail::split_at(x.shape(), ax);
  std::vector<double> value(x.size(), 0.0);
  const double* xv = x.values().data();
  const double* mv = mask.values().data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      const std::size_t base = o * split.n * split.inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < split.n; ++k) {
        std::size_t idx = base + k * split.inner;
        if (mv[idx] != 0.0) peak = std::max(peak, xv[idx]);
      }
      if (peak == -std::numeric_limits<double>::infinity()) continue;
      double denom = 0.0;
      for (std::size_t k = 0; k < split.n; ++k) {
        std::size_t idx = base + k * split.inner;
        if (mv[idx] != 0.0) {
          value[idx] = std::exp(xv[idx] - peak);
          denom += value[idx];
        }
      }
      for (std::size_t k = 0; k < split.n; ++k) value[base + k * split.inner] /= denom;
    }
  }
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(value), {xn}, [xn, split](detail::Node& self) {
    double* gx = detail::grad_of(*xn);
    if (!gx) return;
    const double* y = self.value.data();
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t i = 0; i < split.inner; ++i) {
        const std::size_t base = o * split.n * split.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < split.n; ++k) {
          std::size_t idx = base + k * split.inner;
          dot += g[idx] * y[idx];
        }
        for (std::size_t k = 0; k < split.n; ++k) {
          std::size_t idx = base + k * split.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

inline Tensor softmax(const Tensor& x, long axis) {
  return masked_softmax(x, Tensor::full(x.shape(), 1.0), axis);
}

// ---------------------------------------------------------------------------
// Linear algebra.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> value(n * m, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = value.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      const double* brow = bv + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += s * brow[j];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result({n, m}, std::move(value), {an, bn}, [an, bn, n, k, m](detail::Node& self) {
    double* ga = detail::grad_of(*an);
    double* gb = detail::grad_of(*bn);
    const double* g = self.grad.data();
    const double* av = an->value.data();
    const double* bv = bn->value.data();
    if (ga) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bv[p * m + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (gb) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double s = av[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += s * g[i * m + j];
        }
      }
    }
  });
}

// Batched matmul over a leading batch axis; transpose_b multiplies by b^T.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t batch = a.dim(0), n = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t m = transpose_b ? b.dim(1) : b.dim(2);
  if (bk != k) {
    throw ShapeError("bmm " + to_string(a.shape()) + " x " + to_string(b.shape()) +
                     (transpose_b ? "^T" : ""));
  }
  auto b_at = [transpose_b, k, m](const double* bv, std::size_t p, std::size_t j) {
    return transpose_b ? bv[j * k + p] : bv[p * m + j];
  };
  std::vector<double> value(batch * n * m, 0.0);
  for (std::size_t t = 0; t < batch; ++t) {
    const double* av = a.values().data() + t * n * k;
    const double* bv = b.values().data() + t * k * m;
    double* out = value.data() + t * n * m;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * b_at(bv, p, j);
        out[i * m + j] = acc;
      }
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(
      {batch, n, m}, std::move(value), {an, bn},
      [an, bn, batch, n, k, m, transpose_b](detail::Node& self) {
        double* ga = detail::grad_of(*an);
        double* gb = detail::grad_of(*bn);
        for (std::size_t t = 0; t < batch; ++t) {
          const double* av = an->value.data() + t * n * k;
          const double* bv = bn->value.data() + t * k * m;
          const double* g = self.grad.data() + t * n * m;
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
              const double gij = g[i * m + j];
              for (std::size_t p = 0; p < k; ++p) {
                std::size_t bidx = transpose_b ? j * k + p : p * m + j;
                if (ga) ga[t * n * k + i * k + p] += gij * bv[bidx];
                if (gb) gb[t * k * m + bidx] += gij * av[i * k + p];
              }
            }
          }
        }
      });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || a.shape() != b.shape()) {
    throw ShapeError("dot " + to_string(a.shape()) + " . " + to_string(b.shape()));
  }
  return sum_all(mul(a, b));
}

// Euclidean norm over the last axis.
inline Tensor l2norm(const Tensor& x) {
  auto n2 = sum(mul(x, x), -1);
  for (double v : n2.values()) {
    if (!(v > 0.0)) throw DomainError("l2norm of a zero vector");
  }
  return sqrt(n2);
}

// ---------------------------------------------------------------------------
// Shape manipulation.

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::check_shape(shape);
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  std::vector<double> value(x.values().begin(), x.values().end());
  auto xn = x.node();
  return detail::make_result(std::move(shape), std::move(value), {xn}, [xn](detail::Node& self) {
    double* gx = detail::grad_of(*xn);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (detail::broadcast_shape(x.shape(), shape) != shape) {
    throw ShapeError("broadcast_to " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  return add(x, Tensor::zeros(shape));
}

inline Tensor concat(const std::vector<Tensor>& parts, long axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  std::size_t ax = detail::normalize_axis(axis, parts[0].rank());
  Shape out = parts[0].shape();
  out[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < out.size(); ++d) {
      if (d != ax && p.shape()[d] != out[d]) {
        throw ShapeError("concat " + to_string(parts[0].shape()) + " with " + to_string(p.shape()));
      }
    }
    out[ax] += p.shape()[ax];
  }
  auto split = detail::split_at(out, ax);
  std::vector<double> value(numel(out));
  std::vector<std::shared_ptr<detail::Node>> inputs;
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[ax] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(p.values().data() + o * w, w, value.data() + o * split.n * split.inner + offset);
    }
    offset += w;
    widths.push_back(w);
    inputs.push_back(p.node());
  }
  auto nodes = inputs;
  return detail::make_result(out, std::move(value), std::move(inputs),
                             [nodes, widths, split](detail::Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t t = 0; t < nodes.size(); ++t) {
                                 double* gp = detail::grad_of(*nodes[t]);
                                 const std::size_t w = widths[t];
                                 if (gp) {
                                   for (std::size_t o = 0; o < split.outer; ++o) {
                                     const double* g = self.grad.data() + o * split.n * split.inner + offset;
                                     for (std::size_t i = 0; i < w; ++i) gp[o * w + i] += g[i];
                                   }
                                 }
                                 offset += w;
                               }
                             });
}

// Elements [begin, end) along axis.
inline Tensor slice(const Tensor& x, long axis, std::size_t begin, std::size_t end) {
  std::size_t ax = detail::normalize_axis(axis, x.rank());
  if (begin >= end || end > x.shape()[ax]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     to_string(x.shape()));
  }
  auto split = detail::split_at(x.shape(), ax);
  Shape out = x.shape();
  out[ax] = end - begin;
  const std::size_t w = (end - begin) * split.inner;
  const std::size_t start = begin * split.inner;
  const std::size_t row = split.n * split.inner;
  std::vector<double> value(split.outer * w);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(x.values().data() + o * row + start, w, value.data() + o * w);
  }
  auto xn = x.node();
  return detail::make_result(out, std::move(value), {xn}, [xn, split, w, start, row](detail::Node& self) {
    double* gx = detail::grad_of(*xn);
    if (!gx) return;
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t i = 0; i < w; ++i) gx[o * row + start + i] += self.grad[o * w + i];
    }
  });
}

// Row lookup: out[r] = table[ids[r]] for a 2-D table. Backward scatter-adds.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows needs a 2-D table, got " + to_string(table.shape()));
  if (ids.empty()) throw ShapeError("gather_rows with no ids");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  std::vector<double> value(ids.size() * width);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= rows) {
      throw UnknownIdError("row id " + std::to_string(ids[r]) + " outside table of " +
                           std::to_string(rows) + " rows");
    }
    std::copy_n(table.values().data() + ids[r] * width, width, value.data() + r * width);
  }
  auto tn = table.node();
  return detail::make_result({ids.size(), width}, std::move(value), {tn}, [tn, ids, width](detail::Node& self) {
    double* gt = detail::grad_of(*tn);
    if (!gt) return;
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const double* g = self.grad.data() + r * width;
      double* dst = gt + ids[r] * width;
      for (std::size_t i = 0; i < width; ++i) dst[i] += g[i];
    }
  });
}

}  // namespace gpsvi
