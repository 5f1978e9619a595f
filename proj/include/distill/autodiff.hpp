#pragma once

#include <distill/tensor.hpp>

#include <memory>
#include <utility>
#include <vector>

// Reverse-mode automatic differentiation. A Var pairs a tensor value with
// the graph node that produced it. Every backward rule is itself written in
// terms of recorded operations, so a vector-Jacobian product taken with
// create_graph set yields Vars that can be differentiated again.
namespace distill {

template <class T>
class Var;

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_mode_enabled() { return detail::grad_enabled; }

/// Scoped override of the recording mode.
class GradMode {
 public:
  explicit GradMode(bool enabled) : prev_(detail::grad_enabled) { detail::grad_enabled = enabled; }
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;
  ~GradMode() { detail::grad_enabled = prev_; }

 private:
  bool prev_;
};

class NoGrad : public GradMode {
 public:
  NoGrad() : GradMode(false) {}
};

template <class T>
class Node : public std::enable_shared_from_this<Node<T>> {
 public:
  virtual ~Node() = default;

  /// Gradients for each input given the gradient of this node's output.
  /// Entries for inputs with needed[i] == false may be left undefined.
  virtual std::vector<Var<T>> backward(const Var<T>& grad, const std::vector<bool>& needed) = 0;
  virtual const char* name() const = 0;

  /// Input edges; null where the input does not require grad.
  std::vector<std::shared_ptr<Node<T>>> next;
  Shape out_shape;
};

template <class T>
class LeafNode final : public Node<T> {
 public:
  std::vector<Var<T>> backward(const Var<T>&, const std::vector<bool>&) override { return {}; }
  const char* name() const override { return "leaf"; }
};

template <class T>
class Var {
 public:
  using value_type = T;

  Var() = default;

  /// A constant (no gradient tracking).
  explicit Var(Tensor<T> value) : value_(std::move(value)), defined_(true) {}

  Var(Tensor<T> value, std::shared_ptr<Node<T>> node)
      : value_(std::move(value)), node_(std::move(node)), defined_(true) {}

  /// A differentiable leaf (teacher parameters, student weights, ...).
  static Var leaf(Tensor<T> value) {
    auto node = std::make_shared<LeafNode<T>>();
    node->out_shape = value.shape();
    return Var(std::move(value), std::move(node));
  }

  bool defined() const { return defined_; }
  bool requires_grad() const { return node_ != nullptr; }
  bool is_leaf() const { return node_ && dynamic_cast<const LeafNode<T>*>(node_.get()) != nullptr; }

  const Tensor<T>& value() const { return value_; }
  /// In-place access for optimizers. Do not mutate while a graph that saved
  /// this value is still alive.
  Tensor<T>& mutable_value() { return value_; }

  const Shape& shape() const { return value_.shape(); }
  std::size_t numel() const { return value_.numel(); }
  T item() const { return value_.item(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  Var detach() const { return Var(value_); }

  /// Set on results of a vector-Jacobian product taken without create_graph.
  bool is_plain_gradient() const { return plain_gradient_; }
  void mark_plain_gradient() { plain_gradient_ = true; }

 private:
  Tensor<T> value_;
  std::shared_ptr<Node<T>> node_;
  bool defined_ = false;
  bool plain_gradient_ = false;
};

template <class T>
using VarList = std::vector<Var<T>>;

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Var<T>*> inputs) {
  for (const auto* v : inputs)
    if (v->requires_grad()) return true;
  return false;
}

/// Wraps a freshly computed value, attaching `node` only when recording is
/// enabled and some input is differentiable.
template <class T, class NodeT>
Var<T> record(Tensor<T> value, std::initializer_list<const Var<T>*> inputs, std::shared_ptr<NodeT> node) {
  if (!grad_mode_enabled() || !any_requires_grad<T>(inputs)) return Var<T>(std::move(value));
  node->out_shape = value.shape();
  node->next.reserve(inputs.size());
  for (const auto* v : inputs) node->next.push_back(v->node());
  return Var<T>(std::move(value), std::move(node));
}

template <class T>
Var<T> record_list(Tensor<T> value, const std::vector<Var<T>>& inputs, std::shared_ptr<Node<T>> node) {
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (!grad_mode_enabled() || !any) return Var<T>(std::move(value));
  node->out_shape = value.shape();
  for (const auto& v : inputs) node->next.push_back(v.node());
  return Var<T>(std::move(value), std::move(node));
}

}  // namespace detail

}  // namespace distill
