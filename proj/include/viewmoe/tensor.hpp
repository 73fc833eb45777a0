// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors with a per-step reverse-mode tape.
//
// A Tensor is a cheap handle onto a shared Node. Leaves created with
// Tensor::parameter() hold learnable values and accumulate gradients across
// backward passes until zero_grad(). Every op whose inputs require gradients
// while a Tape is active (see TapeScope) is appended to that tape; outside a
// TapeScope ops run in inference mode and record nothing.
#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "viewmoe/error.hpp"

namespace viewmoe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t tape_id = 0;
  const char* op = "leaf";
  std::function<void(Node&)> backward;

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }

  /// grad += g, copying instead when no gradient has arrived yet.
  void accumulate_grad(std::span<const double> g) {
    if (grad.empty()) {
      grad.assign(g.begin(), g.end());
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
      throw ShapeMismatch("constant: shape " + shape_str(shape) + " vs " + std::to_string(values.size()) +
                          " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    const auto n = shape_numel(shape);
    return constant(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return constant({1}, {v}); }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  double value(std::size_t i) const { return node_->value[i]; }
  double item() const {
    if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  /// Direct write access; only meaningful on leaves (parameters, constants).
  std::span<double> mutable_values() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient copy; zeros when nothing has flowed into this tensor.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
  }
  std::span<double> grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  Tensor detach() const { return constant(shape(), node_->value); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

class Tape;

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}
inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> id{1};
  return id.fetch_add(1);
}
}  // namespace detail

/// Ordered record of the differentiable ops of one step. Nodes are appended at
/// creation, so the record is topologically sorted by construction.
class Tape {
 public:
  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { reset(); }

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  void record(const std::shared_ptr<Node>& n) {
    n->tape_id = id_;
    nodes_.push_back(n);
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every leaf; consumes the tape.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw NotScalar("backward() needs a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "null"));
    if (!loss.requires_grad() || loss.node().tape_id != id_ || loss.is_leaf())
      throw DetachedGraph("loss was not recorded on this tape");
    loss.node().grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (!n.grad.empty() && n.backward) n.backward(n);
    }
    reset();
  }

  /// Drops the record. Nodes still referenced elsewhere become detached.
  void reset() {
    for (auto& n : nodes_) {
      n->backward = nullptr;
      n->tape_id = 0;
    }
    nodes_.clear();
  }

 private:
  std::uint64_t id_;
  std::vector<std::shared_ptr<Node>> nodes_;
};

inline Tape* active_tape() { return detail::active_tape_slot(); }

/// Makes a tape the recording target for this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = &tape; }
  ~TapeScope() { detail::active_tape_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) throw NonFiniteValue(std::string(op) + ": produced a non-finite value");
}

/// Builds an op result, records it on the active tape when any input needs a gradient.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::initializer_list<const Tensor*> inputs, std::function<void(Node&)> backward) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->leaf = false;
  Tape* tape = active_tape();
  bool needs = false;
  for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  if (tape && needs) {
    n->requires_grad = true;
    n->backward = std::move(backward);
    tape->record(n);
  }
  return Tensor(std::move(n));
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->leaf = false;
  Tape* tape = active_tape();
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (tape && needs) {
    n->requires_grad = true;
    n->backward = std::move(backward);
    tape->record(n);
  }
  return Tensor(std::move(n));
}

}  // namespace detail

}  // namespace viewmoe
