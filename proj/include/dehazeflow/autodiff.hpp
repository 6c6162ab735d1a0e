#pragma once

// Tape-based reverse-mode differentiation over Tensor<T>.
//
// A Graph owns every intermediate value produced while a computation is
// recorded. Nodes are appended in evaluation order, so the node index is a
// topological order and backward() is a single reverse sweep. Leaves can
// either own their value or reference an external tensor (model parameters),
// which lets several graphs share read-only weights concurrently.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dehazeflow/error.hpp"
#include "dehazeflow/tensor.hpp"

namespace dehazeflow {

template <class T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <class T>
class Var {
 public:
  Var() = default;

  const Tensor<T>& value() const;
  const Shape4& shape() const { return value().shape(); }
  Graph<T>* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  bool requires_grad() const;

 private:
  friend class Graph<T>;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>* graph_ = nullptr;
  std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

template <class T>
class Graph {
 public:
  /// Called once during backward with the accumulated output gradient.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  /// Leaf without gradient that owns its value.
  Var<T> constant(Tensor<T> value) { return push(std::move(value), nullptr, false, "constant"); }

  /// Leaf that owns its value and collects a gradient.
  Var<T> variable(Tensor<T> value) {
    return push(std::move(value), nullptr, grad_enabled_, "variable");
  }

  /// Leaf referencing an external tensor; the tensor must outlive the graph
  /// and stay unchanged while the graph is in use.
  Var<T> reference(const Tensor<T>& value, bool requires_grad) {
    return push(Tensor<T>{}, &value, grad_enabled_ && requires_grad, "reference");
  }

  /// Record an op result. `backward` is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                const char* op) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owner(in, op);
      needs = needs || nodes_[in.id_].requires_grad;
    }
    Var<T> out = push(std::move(value), nullptr, needs, op);
    if (needs) nodes_[out.id_].backward = std::move(backward);
    return out;
  }

  const Tensor<T>& value(const Var<T>& v) const {
    check_owner(v, "value");
    const Node& n = nodes_[v.id_];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(const Var<T>& v) const {
    check_owner(v, "requires_grad");
    return nodes_[v.id_].requires_grad;
  }

  /// Add `g` into the gradient buffer of `v` (no-op for non-differentiable nodes).
  void accumulate(const Var<T>& v, const Tensor<T>& g) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return;
    Tensor<T>& buf = grad_buffer(n, v.id_);
    if (buf.shape() != g.shape()) {
      throw ShapeError(std::string("accumulate: gradient shape ") + g.shape().str() +
                       " does not match " + buf.shape().str() + " of op " + n.op);
    }
    for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
  }

  /// Mutable gradient buffer of `v`, zero-initialised on first use. Only call
  /// when requires_grad(v) is true.
  Tensor<T>& grad_buffer(const Var<T>& v) { return grad_buffer(nodes_[v.id_], v.id_); }

  /// Reverse sweep from a scalar loss. Every node upstream of the loss is
  /// visited exactly once, in reverse creation order.
  void backward(const Var<T>& loss) {
    if (loss.graph_ != this) throw GraphError("backward: loss belongs to a different graph");
    Node& root = nodes_[loss.id_];
    if (root.owned.numel() != 1 && !(root.external && root.external->numel() == 1)) {
      throw GraphError("backward: loss must be a scalar, got shape " + value(loss).shape().str());
    }
    if (!root.requires_grad) {
      throw GraphError("backward: loss is not connected to any differentiable leaf");
    }
    grad_buffer(root, loss.id_).fill(T(1));
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
      ++visited_;
    }
  }

  /// Gradient of `v` after backward(); zeros when nothing flowed into it.
  Tensor<T> grad(const Var<T>& v) const {
    check_owner(v, "grad");
    const Node& n = nodes_[v.id_];
    if (n.grad.empty()) return Tensor<T>(value(v).shape());
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Number of op nodes whose backward ran in the last sweeps.
  std::size_t backward_visits() const noexcept { return visited_; }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    const char* op = "";
  };

  Var<T> push(Tensor<T> value, const Tensor<T>* external, bool requires_grad, const char* op) {
    Node n;
    n.owned = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Tensor<T>& grad_buffer(Node& n, std::size_t) {
    if (n.grad.empty()) n.grad = Tensor<T>((n.external ? *n.external : n.owned).shape());
    return n.grad;
  }

  void check_owner(const Var<T>& v, const char* what) const {
    if (v.graph_ != this) {
      throw GraphError(std::string(what) + ": variable does not belong to this graph");
    }
  }

  // deque keeps references returned by value() stable while nodes are appended
  std::deque<Node> nodes_;
  bool grad_enabled_;
  std::size_t visited_ = 0;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  if (!graph_) throw GraphError("Var::value on an empty handle");
  return graph_->value(*this);
}

template <class T>
bool Var<T>::requires_grad() const {
  return graph_ && graph_->requires_grad(*this);
}

}  // namespace dehazeflow
