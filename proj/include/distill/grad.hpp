#pragma once

#include <distill/ops.hpp>

#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace distill {

/// Raised by hvp when the supplied gradients cannot be differentiated again.
class DoubleBackwardError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

template <class T>
using NodePtr = Node<T>*;

/// Nodes on some path from the outputs to a target, in an order where every
/// node precedes its inputs.
template <class T>
std::vector<NodePtr<T>> backward_order(const std::vector<NodePtr<T>>& roots,
                                       const std::unordered_set<NodePtr<T>>& targets) {
  std::unordered_map<NodePtr<T>, bool> reaches;  // memo: does the node lead to a target
  std::vector<NodePtr<T>> postorder;
  struct Frame {
    NodePtr<T> node;
    std::size_t child;
  };
  for (auto* root : roots) {
    if (!root || reaches.count(root)) continue;
    std::vector<Frame> stack{{root, 0}};
    reaches[root] = targets.count(root) > 0;
    while (!stack.empty()) {
      auto& f = stack.back();
      if (f.child < f.node->next.size()) {
        auto* child = f.node->next[f.child++].get();
        if (!child) continue;
        auto it = reaches.find(child);
        if (it == reaches.end()) {
          reaches[child] = targets.count(child) > 0;
          stack.push_back({child, 0});
        } else if (it->second) {
          reaches[f.node] = true;
        }
        continue;
      }
      auto* done = f.node;
      stack.pop_back();
      if (reaches[done]) {
        postorder.push_back(done);
        if (!stack.empty()) reaches[stack.back().node] = true;
      }
    }
  }
  return {postorder.rbegin(), postorder.rend()};
}

template <class T>
void accumulate(std::unordered_map<NodePtr<T>, Var<T>>& grads, NodePtr<T> node, const Var<T>& g) {
  auto it = grads.find(node);
  if (it == grads.end()) grads.emplace(node, g);
  else it->second = add(it->second, g);
}

}  // namespace detail

/// Vector-Jacobian product: returns sum_k vecs[k]^T * d outputs[k] / d wrt[i]
/// for each i. Targets unreachable from the outputs receive zeros. With
/// create_graph the results are recorded and can be differentiated again.
template <class T>
std::vector<Var<T>> vjp(const std::vector<Var<T>>& outputs, const std::vector<Var<T>>& wrt,
                        const std::vector<Var<T>>& vecs, bool create_graph = false) {
  if (outputs.size() != vecs.size()) throw ShapeError("vjp: outputs and vectors differ in count");
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    if (outputs[k].shape() != vecs[k].shape()) {
      throw ShapeError("vjp: vector of shape " + to_string(vecs[k].shape()) + " for output of shape " +
                       to_string(outputs[k].shape()));
    }
  }

  std::unordered_set<detail::NodePtr<T>> targets;
  for (const auto& w : wrt)
    if (w.requires_grad()) targets.insert(w.node().get());

  std::vector<detail::NodePtr<T>> roots;
  for (const auto& o : outputs)
    if (o.requires_grad()) roots.push_back(o.node().get());

  std::unordered_map<detail::NodePtr<T>, Var<T>> grads;
  {
    GradMode mode(create_graph);
    for (std::size_t k = 0; k < outputs.size(); ++k)
      if (outputs[k].requires_grad()) detail::accumulate(grads, outputs[k].node().get(), vecs[k]);

    std::unordered_set<detail::NodePtr<T>> live;
    const auto order = detail::backward_order<T>(roots, targets);
    live.insert(order.begin(), order.end());
    for (auto* node : order) {
      auto it = grads.find(node);
      if (it == grads.end() || node->next.empty()) continue;
      std::vector<bool> needed(node->next.size());
      bool any = false;
      for (std::size_t i = 0; i < node->next.size(); ++i) {
        needed[i] = node->next[i] && live.count(node->next[i].get());
        any = any || needed[i];
      }
      if (!any) continue;
      const Var<T> g = targets.count(node) ? it->second : std::move(it->second);
      if (!targets.count(node)) grads.erase(it);
      auto input_grads = node->backward(g, needed);
      for (std::size_t i = 0; i < needed.size(); ++i)
        if (needed[i]) detail::accumulate(grads, node->next[i].get(), input_grads[i]);
    }
  }

  std::vector<Var<T>> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    Var<T> r;
    if (w.requires_grad()) {
      auto it = grads.find(w.node().get());
      if (it != grads.end()) r = it->second;
    }
    if (!r.defined()) r = Var<T>(Tensor<T>(w.shape()));
    if (!create_graph) {
      r = r.detach();
      r.mark_plain_gradient();
    }
    result.push_back(std::move(r));
  }
  return result;
}

template <class T>
std::vector<Var<T>> vjp(const Var<T>& output, const std::vector<Var<T>>& wrt, const Var<T>& vec,
                        bool create_graph = false) {
  return vjp<T>(std::vector<Var<T>>{output}, wrt, std::vector<Var<T>>{vec}, create_graph);
}

/// Gradient of a scalar.
template <class T>
std::vector<Var<T>> grad(const Var<T>& loss, const std::vector<Var<T>>& wrt, bool create_graph = false) {
  if (loss.numel() != 1) throw ShapeError("grad: loss of shape " + to_string(loss.shape()) + " is not a scalar");
  return vjp<T>(loss, wrt, Var<T>(Tensor<T>(loss.shape(), T(1))), create_graph);
}

/// Hessian-vector product from precomputed first derivatives. The gradients
/// must have been taken with create_graph so they carry their own graph.
template <class T>
std::vector<Var<T>> hvp_from_grads(const std::vector<Var<T>>& grads, const std::vector<Var<T>>& theta,
                                   const std::vector<Var<T>>& v, bool create_graph = false) {
  if (grads.size() != theta.size() || v.size() != theta.size()) throw ShapeError("hvp: list lengths differ");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (grads[i].is_plain_gradient()) {
      throw DoubleBackwardError(
          "hvp: gradient was computed without a retained graph; take the first gradient with create_graph = true");
    }
    if (v[i].shape() != theta[i].shape()) {
      throw ShapeError("hvp: vector of shape " + to_string(v[i].shape()) + " for parameter " +
                       to_string(theta[i].shape()));
    }
  }
  return vjp<T>(grads, theta, v, create_graph);
}

/// (d^2 loss / d theta^2) * v.
template <class T>
std::vector<Var<T>> hvp(const Var<T>& loss, const std::vector<Var<T>>& theta, const std::vector<Var<T>>& v) {
  const auto g = grad<T>(loss, theta, /*create_graph=*/true);
  return hvp_from_grads<T>(g, theta, v);
}

}  // namespace distill
