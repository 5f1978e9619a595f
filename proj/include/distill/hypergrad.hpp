#pragma once

#include <distill/models.hpp>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace distill {

/// Non-finite loss during student training.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& where, std::size_t step)
      : std::runtime_error(where + ": non-finite loss at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// The Neumann series grew without bound.
class NeumannDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inner (student) loss at a given step for the given student weights. It
/// may depend on teacher parameters captured by the closure.
template <class T>
using InnerLoss = std::function<Var<T>(const std::vector<Var<T>>& theta, std::size_t step)>;

template <class T>
double squared_norm(const std::vector<Var<T>>& vs) {
  double s = 0;
  for (const auto& v : vs)
    for (T x : v.value().values()) s += double(x) * double(x);
  return s;
}

template <class T>
bool all_finite(const std::vector<Var<T>>& vs) {
  for (const auto& v : vs)
    for (T x : v.value().values())
      if (!std::isfinite(x)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Reverse-through-training

/// Per-step student weights (as leaves) and the gradients taken at them with
/// their graphs kept, so the optimizer trajectory can be differentiated.
template <class T>
class UnrollMemory {
 public:
  UnrollMemory() = default;
  UnrollMemory(std::vector<Var<T>> lambda, OptimizerConfig opt) : lambda_(std::move(lambda)), opt_(opt) {}

  void push(std::vector<Var<T>> theta, std::vector<Var<T>> grads) {
    thetas_.push_back(std::move(theta));
    grads_.push_back(std::move(grads));
  }

  std::size_t steps() const { return thetas_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<Var<T>>& lambda() const { return lambda_; }
  const OptimizerConfig& optimizer() const { return opt_; }

 private:
  template <class U>
  friend std::vector<Var<U>> hypergrad_unroll(UnrollMemory<U>&, const Var<U>&, const std::vector<Var<U>>&, bool);

  std::vector<Var<T>> lambda_;
  OptimizerConfig opt_;
  std::vector<std::vector<Var<T>>> thetas_;
  std::vector<std::vector<Var<T>>> grads_;
  bool consumed_ = false;
};

template <class T>
struct UnrollResult {
  StudentState<T> student;
  UnrollMemory<T> memory;
};

/// N optimizer steps on the inner loss. With `record`, each step's weights
/// become fresh leaves and the gradient graph is retained.
template <class T>
UnrollResult<T> unrolled_train(const InnerLoss<T>& inner, const std::vector<Var<T>>& lambda, StudentState<T> student,
                               std::size_t steps, const OptimizerConfig& opt, bool record) {
  if (steps == 0) throw std::invalid_argument("unrolled_train: need at least one step");
  UnrollResult<T> r{{}, UnrollMemory<T>(lambda, opt)};
  for (std::size_t n = 0; n < steps; ++n) {
    student.weights = fresh_leaves(student.weights);
    const auto loss = inner(student.weights, n);
    if (!std::isfinite(loss.item())) throw NonFiniteLoss("unrolled_train", n);
    auto g = grad(loss, student.weights, record);
    std::vector<Var<T>> plain;
    for (const auto& x : g) plain.push_back(x.detach());
    auto theta = student.weights;
    student = sgd_momentum_step(student, plain, opt);
    if (record) r.memory.push(std::move(theta), std::move(g));
  }
  r.student = std::move(student);
  return r;
}

/// d loss_T / d lambda through the recorded trajectory. `final_weights` are
/// the weights loss_T was computed from. The memory is released step by step
/// and cannot be used again.
template <class T>
std::vector<Var<T>> hypergrad_unroll(UnrollMemory<T>& memory, const Var<T>& loss_T,
                                     const std::vector<Var<T>>& final_weights, bool include_direct = false) {
  if (memory.consumed_) throw std::logic_error("hypergrad_unroll: memory was already consumed");
  memory.consumed_ = true;
  const auto& lambda = memory.lambda_;
  const T lr = static_cast<T>(memory.opt_.lr);
  const T m = memory.opt_.kind == OptimizerConfig::sgd ? T(0) : static_cast<T>(memory.opt_.momentum);

  std::vector<Var<T>> wrt = final_weights;
  if (include_direct) wrt.insert(wrt.end(), lambda.begin(), lambda.end());
  auto first = grad(loss_T, wrt);
  const std::size_t nw = final_weights.size();
  std::vector<Tensor<T>> v_theta, v_buf, out;
  for (std::size_t i = 0; i < nw; ++i) {
    v_theta.push_back(first[i].value());
    v_buf.emplace_back(first[i].shape());
  }
  for (std::size_t j = 0; j < lambda.size(); ++j)
    out.push_back(include_direct ? first[nw + j].value().clone() : Tensor<T>(lambda[j].shape()));

  for (std::size_t n = memory.steps(); n-- > 0;) {
    // u: adjoint of this step's gradient through the buffer and the update.
    std::vector<Var<T>> u;
    for (std::size_t i = 0; i < nw; ++i) {
      Tensor<T> t(v_theta[i].shape());
      for (std::size_t j = 0; j < t.numel(); ++j) t[j] = v_buf[i][j] - lr * v_theta[i][j];
      u.emplace_back(std::move(t));
    }
    auto targets = memory.thetas_[n];
    targets.insert(targets.end(), lambda.begin(), lambda.end());
    const auto back = vjp(memory.grads_[n], targets, u);
    for (std::size_t i = 0; i < nw; ++i) {
      Tensor<T> vt(v_theta[i].shape()), vb(v_theta[i].shape());
      const auto& bi = back[i].value();
      const auto& ui = u[i].value();
      for (std::size_t j = 0; j < vt.numel(); ++j) {
        vt[j] = v_theta[i][j] + bi[j];
        vb[j] = m * ui[j];
      }
      v_theta[i] = std::move(vt);
      v_buf[i] = std::move(vb);
    }
    for (std::size_t j = 0; j < lambda.size(); ++j) {
      const auto& bl = back[nw + j].value();
      for (std::size_t k = 0; k < bl.numel(); ++k) out[j][k] += bl[k];
    }
    memory.thetas_.pop_back();
    memory.grads_.pop_back();
  }
  std::vector<Var<T>> result;
  for (auto& t : out) result.emplace_back(std::move(t));
  return result;
}

// ---------------------------------------------------------------------------
// Implicit differentiation

struct IFTConfig {
  double alpha = 0.01;
  std::size_t neumann_terms = 5;
  std::size_t zeta_theta = 1;
  double inner_lr = 0.01;

  void validate() const {
    if (!(alpha > 0)) throw std::invalid_argument("ift: alpha must be positive");
    if (zeta_theta == 0) throw std::invalid_argument("ift: zeta_theta must be at least 1");
    if (!(inner_lr > 0)) throw std::invalid_argument("ift: inner learning rate must be positive");
  }
};

template <class T>
struct InnerTrainResult {
  StudentState<T> student;
  double grad_norm = 0;  // at the final weights
};

/// Plain SGD on the inner loss for zeta_theta steps, without recording.
template <class T>
InnerTrainResult<T> inner_train(const InnerLoss<T>& inner, StudentState<T> student, std::size_t zeta_theta, double lr) {
  if (zeta_theta == 0) throw std::invalid_argument("inner_train: zeta_theta must be at least 1");
  const OptimizerConfig opt{OptimizerConfig::sgd, lr, 0.0};
  for (std::size_t n = 0;; ++n) {
    student.weights = fresh_leaves(student.weights);
    const auto loss = inner(student.weights, n);
    if (!std::isfinite(loss.item())) throw NonFiniteLoss("inner_train", n);
    const auto g = grad(loss, student.weights);
    if (n == zeta_theta) return {std::move(student), std::sqrt(squared_norm(g))};
    student = sgd_momentum_step(student, g, opt);
  }
}

/// p = sum_{j=0..terms} (I - alpha H)^j v, where H is the Jacobian of
/// `grads` with respect to `theta`. Callers multiply by alpha.
template <class T>
std::vector<Var<T>> neumann_inverse_hvp(const std::vector<Var<T>>& grads, const std::vector<Var<T>>& theta,
                                        std::vector<Var<T>> v, double alpha, std::size_t terms) {
  if (!(alpha > 0)) throw std::invalid_argument("neumann: alpha must be positive");
  const T a = static_cast<T>(alpha);
  const double v0 = std::sqrt(squared_norm(v));
  std::vector<Var<T>> p;
  for (const auto& x : v) p.emplace_back(x.value().clone());
  for (std::size_t j = 1; j <= terms; ++j) {
    const auto hv = hvp_from_grads(grads, theta, v);
    for (std::size_t i = 0; i < v.size(); ++i) {
      Tensor<T> nv(v[i].shape());
      for (std::size_t k = 0; k < nv.numel(); ++k) {
        nv[k] = v[i].value()[k] - a * hv[i].value()[k];
        p[i].mutable_value()[k] += nv[k];
      }
      v[i] = Var<T>(std::move(nv));
    }
    const double vn = std::sqrt(squared_norm(v));
    if (!std::isfinite(vn) || (v0 > 0 && vn > 1e6 * v0)) {
      throw NeumannDivergence("neumann series diverged at term " + std::to_string(j) + " with alpha=" +
                              std::to_string(alpha) + "; reduce alpha");
    }
  }
  return p;
}

/// -alpha * p^T d(dL_S/dtheta)/d lambda, with p the Neumann approximation
/// of H^{-1} dL_T/dtheta / alpha.
template <class T>
std::vector<Var<T>> hypergrad_ift(const Var<T>& loss_T, const Var<T>& loss_S, const std::vector<Var<T>>& theta,
                                  const std::vector<Var<T>>& lambda, const IFTConfig& cfg,
                                  bool include_direct = false) {
  if (!(cfg.alpha > 0)) throw std::invalid_argument("ift: alpha must be positive");
  std::vector<Var<T>> wrt = theta;
  if (include_direct) wrt.insert(wrt.end(), lambda.begin(), lambda.end());
  auto first = grad(loss_T, wrt);
  std::vector<Var<T>> v(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(theta.size()));
  const auto g = grad(loss_S, theta, true);
  const auto p = neumann_inverse_hvp(g, theta, v, cfg.alpha, cfg.neumann_terms);
  const auto mixed = vjp(g, lambda, p);
  std::vector<Var<T>> out;
  for (std::size_t j = 0; j < lambda.size(); ++j) {
    Tensor<T> t(lambda[j].shape());
    for (std::size_t k = 0; k < t.numel(); ++k) {
      t[k] = -static_cast<T>(cfg.alpha) * mixed[j].value()[k];
      if (include_direct) t[k] += first[theta.size() + j].value()[k];
    }
    out.emplace_back(std::move(t));
  }
  return out;
}

}  // namespace distill
