#pragma once

// Self-checks of the hypergradient engines against references that do not
// share their code path: central finite differences of the forward
// pipeline, closed-form bilevel quadratics solved with Eigen, and scalar
// geometric series.

#include <distill/hypergrad.hpp>

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace distill::verify {

struct OracleCheck {
  std::string name;
  std::size_t instances = 0;
  double worst = 0;  // largest error seen
  double tolerance = 0;
  double seconds = 0;

  bool passed() const { return instances > 0 && worst < tolerance; }
};

namespace detail {

using V = Var<double>;
using Clock = std::chrono::steady_clock;

inline Tensor<double> uniform(const Shape& s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline double rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

inline StudentState<double> student_from(const std::vector<Tensor<double>>& ws) {
  StudentState<double> s;
  for (const auto& w : ws) {
    s.weights.push_back(V::leaf(w.clone()));
    s.momentum.emplace_back(Tensor<double>(w.shape()));
  }
  return s;
}

inline V half_sq(const V& x) { return scale(sum(mul(x, x)), 0.5); }

inline Tensor<double> to_tensor(const Eigen::MatrixXd& m) {
  Tensor<double> t(Shape{std::size_t(m.rows()), std::size_t(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t[std::size_t(i * m.cols() + j)] = m(i, j);
  return t;
}

inline Eigen::MatrixXd to_matrix(const Tensor<double>& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = t[std::size_t(i * m.cols() + j)];
  return m;
}

// inner 1/2 th^T A th - th^T B lam, outer 1/2 |th - c|^2 with A symmetric,
// eigenvalues in [1, 2]. theta* = A^-1 B lam, d outer/d lam = B^T A^-1 (theta* - c).
struct Quadratic {
  Eigen::MatrixXd a, b, c, lam;

  static Quadratic random(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> dim(2, 5), mdim(1, 3);
    const int d = dim(rng), m = mdim(rng);
    Quadratic q;
    const Eigen::MatrixXd q0 = to_matrix(uniform({std::size_t(d), std::size_t(d)}, rng));
    const Eigen::MatrixXd basis = Eigen::HouseholderQR<Eigen::MatrixXd>(q0).householderQ();
    Eigen::VectorXd eig = (to_matrix(uniform({std::size_t(d), 1}, rng, 1.0, 2.0))).col(0);
    q.a = basis * eig.asDiagonal() * basis.transpose();
    q.a = 0.5 * (q.a + q.a.transpose());
    q.b = to_matrix(uniform({std::size_t(d), std::size_t(m)}, rng));
    q.c = to_matrix(uniform({std::size_t(d), 1}, rng));
    q.lam = to_matrix(uniform({std::size_t(m), 1}, rng));
    return q;
  }

  Eigen::MatrixXd analytic() const {
    const Eigen::MatrixXd ainv = a.inverse();
    const Eigen::MatrixXd star = ainv * b * lam;
    return b.transpose() * ainv * (star - c);
  }

  V inner(const V& th, const V& l) const {
    return sub(scale(sum(mul(th, matmul(V(to_tensor(a)), th))), 0.5), sum(mul(th, matmul(V(to_tensor(b)), l))));
  }
  V outer(const V& th) const { return half_sq(sub(th, V(to_tensor(c)))); }
  std::size_t d() const { return std::size_t(a.rows()); }
};

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace detail

/// Unrolled hypergradient of a small tanh network against central finite
/// differences of the full forward pipeline. The teacher is a [5,2] input
/// bank (10 parameters), the student 20 weights, N in 1..5.
inline OracleCheck unroll_vs_finite_differences(std::size_t instances = 50, std::uint64_t seed = 2024,
                                                double tolerance = 1e-3) {
  using namespace detail;
  const auto t0 = Clock::now();
  OracleCheck out{"unroll hypergradient vs finite differences", 0, 0, tolerance, 0};
  std::mt19937_64 rng(seed);
  auto logits = [](const std::vector<V>& th, const V& x) { return matmul(tanh(linear(x, th[0], th[1])), th[2], false, true); };
  for (std::size_t inst = 0; inst < instances; ++inst) {
    const auto lam0 = uniform({5, 2}, rng);
    Tensor<double> syn_y({5, 2}), real_y({8, 2});
    for (std::size_t i = 0; i < 5; ++i) syn_y[i * 2 + i % 2] = 1;
    const auto real_x = uniform({8, 2}, rng);
    for (std::size_t i = 0; i < 8; ++i) real_y[i * 2 + (real_x[i * 2] > real_x[i * 2 + 1])] = 1;
    const std::vector<Tensor<double>> theta0{uniform({4, 2}, rng), uniform({4}, rng), uniform({2, 4}, rng)};
    const std::size_t steps = 1 + inst % 5;
    const OptimizerConfig opt{inst % 2 ? OptimizerConfig::sgd_momentum : OptimizerConfig::sgd, 0.5, 0.5};
    auto inner_for = [&](const V& lam) -> InnerLoss<double> {
      return [lam, &syn_y, &logits](const std::vector<V>& th, std::size_t) {
        return softmax_cross_entropy(logits(th, lam), V(syn_y));
      };
    };
    auto outer = [&](const std::vector<V>& th) { return softmax_cross_entropy(logits(th, V(real_x)), V(real_y)); };
    auto pipeline = [&](const Tensor<double>& lam) {
      const auto r = unrolled_train(inner_for(V(lam)), {}, student_from(theta0), steps, opt, false);
      return outer(r.student.weights).item();
    };

    const auto lam = V::leaf(lam0.clone());
    auto r = unrolled_train(inner_for(lam), {lam}, student_from(theta0), steps, opt, true);
    const auto hg = hypergrad_unroll(r.memory, outer(r.student.weights), r.student.weights)[0].value();

    Tensor<double> fd(lam0.shape());
    const double h = 1e-5;
    for (std::size_t i = 0; i < lam0.numel(); ++i) {
      auto plus = lam0.clone(), minus = lam0.clone();
      plus[i] += h;
      minus[i] -= h;
      fd[i] = (pipeline(plus) - pipeline(minus)) / (2 * h);
    }
    out.worst = std::max(out.worst, rel_error(hg, fd));
    ++out.instances;
  }
  out.seconds = seconds_since(t0);
  return out;
}

/// IFT hypergradient at a converged inner solution (gradient norm below
/// 1e-8, Neumann series run to convergence) against the analytic
/// B^T A^-1 (theta* - c).
inline OracleCheck ift_vs_analytic(std::size_t instances = 20, std::uint64_t seed = 77, double tolerance = 1e-3) {
  using namespace detail;
  const auto t0 = Clock::now();
  OracleCheck out{"ift hypergradient vs closed-form quadratic", 0, 0, tolerance, 0};
  std::mt19937_64 rng(seed);
  for (std::size_t inst = 0; inst < instances; ++inst) {
    const auto q = Quadratic::random(rng);
    const auto lam = V::leaf(to_tensor(q.lam));
    const InnerLoss<double> inner = [&](const std::vector<V>& th, std::size_t) { return q.inner(th[0], lam); };
    auto star = inner_train(inner, student_from({Tensor<double>({q.d(), 1})}), 200, 0.5);
    if (!(star.grad_norm < 1e-8)) {
      out.worst = std::numeric_limits<double>::infinity();
      break;
    }
    const auto& th = star.student.weights[0];
    // alpha = 0.5 with eigenvalues in [1, 2] contracts by at least 1/2 per term.
    const auto hg = hypergrad_ift(q.outer(th), q.inner(th, lam), {th}, {lam}, IFTConfig{0.5, 200, 1, 0.5})[0].value();
    out.worst = std::max(out.worst, rel_error(hg, to_tensor(q.analytic())));
    ++out.instances;
  }
  out.seconds = seconds_since(t0);
  return out;
}

/// Scalar Neumann partial sums against (1 - (1 - a h)^(J+1)) / (a h),
/// relative error.
inline OracleCheck neumann_vs_geometric(double tolerance = 1e-12) {
  using namespace detail;
  const auto t0 = Clock::now();
  OracleCheck out{"neumann partial sums vs geometric closed form", 0, 0, tolerance, 0};
  for (double h : {0.5, 1.0, 3.0}) {
    for (double ah = 0.05; ah < 2.0; ah += 0.15) {
      const auto th = V::leaf(Tensor<double>::scalar(0.7));
      const auto g = grad(scale(half_sq(th), h), {th}, true);
      for (std::size_t terms : {0, 1, 5, 20, 60}) {
        const auto p = neumann_inverse_hvp(g, {th}, {V(Tensor<double>::scalar(1.0))}, ah / h, terms)[0].item();
        const double closed = (1 - std::pow(1 - ah, double(terms + 1))) / ah;
        out.worst = std::max(out.worst, std::abs(p - closed) / std::max(1.0, std::abs(closed)));
        ++out.instances;
      }
    }
  }
  out.seconds = seconds_since(t0);
  return out;
}

/// Unroll (200 plain SGD steps from zero, converged) and IFT on the same
/// convex quadratics.
inline OracleCheck unroll_vs_ift(std::size_t instances = 20, std::uint64_t seed = 4242, double tolerance = 1e-3) {
  using namespace detail;
  const auto t0 = Clock::now();
  OracleCheck out{"unroll vs ift agreement on convex quadratics", 0, 0, tolerance, 0};
  std::mt19937_64 rng(seed);
  for (std::size_t inst = 0; inst < instances; ++inst) {
    const auto q = Quadratic::random(rng);
    const auto lam = V::leaf(to_tensor(q.lam));
    const InnerLoss<double> inner = [&](const std::vector<V>& th, std::size_t) { return q.inner(th[0], lam); };
    auto r = unrolled_train(inner, {lam}, student_from({Tensor<double>({q.d(), 1})}), 200,
                            {OptimizerConfig::sgd, 0.5, 0.0}, true);
    const auto unroll = hypergrad_unroll(r.memory, q.outer(r.student.weights[0]), r.student.weights)[0].value();
    auto star = inner_train(inner, student_from({Tensor<double>({q.d(), 1})}), 200, 0.5);
    const auto& th = star.student.weights[0];
    const auto ift = hypergrad_ift(q.outer(th), q.inner(th, lam), {th}, {lam}, IFTConfig{0.5, 200, 1, 0.5})[0].value();
    out.worst = std::max(out.worst, rel_error(unroll, ift));
    ++out.instances;
  }
  out.seconds = seconds_since(t0);
  return out;
}

inline std::vector<OracleCheck> run_oracle_suite() {
  return {unroll_vs_finite_differences(), ift_vs_analytic(), neumann_vs_geometric(), unroll_vs_ift()};
}

}  // namespace distill::verify
