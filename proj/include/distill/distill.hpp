#pragma once

#include <distill/data.hpp>
#include <distill/hypergrad.hpp>
#include <distill/synthetic.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace distill {

enum class Method { gm, unroll, ift };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::gm: return "gm";
    case Method::unroll: return "unroll";
    case Method::ift: return "ift";
  }
  return "?";
}

inline Method parse_method(std::string_view tag) {
  for (auto m : {Method::gm, Method::unroll, Method::ift})
    if (to_string(m) == tag) return m;
  throw std::invalid_argument("unknown method '" + std::string(tag) + "'; supported: gm, unroll, ift");
}

enum class DistanceReduce { sum, mean };

inline std::string_view to_string(DistanceReduce r) { return r == DistanceReduce::sum ? "sum" : "mean"; }

inline DistanceReduce parse_reduce(std::string_view tag) {
  if (tag == "sum") return DistanceReduce::sum;
  if (tag == "mean") return DistanceReduce::mean;
  throw std::invalid_argument("unknown distance reduction '" + std::string(tag) + "'; supported: sum, mean");
}

/// The teacher update could not produce a finite result. The teacher has
/// been rolled back to its last finite state.
class DistillDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Gradient-matching distance

/// Sum over output slices i of 1 - <A_i, B_i> / (|A_i| |B_i| + eps), taken per
/// weight tensor (axis 0 is the output axis) and combined over tensors by sum
/// or mean. Per-channel vectors (biases, norm parameters) are skipped. A may
/// carry a graph; B is treated as a constant.
template <class T>
Var<T> gm_distance(const std::vector<Var<T>>& a, const std::vector<Var<T>>& b, DistanceReduce reduce,
                   double eps = 1e-6) {
  if (a.size() != b.size()) throw ShapeError("gm_distance: gradient lists differ in length");
  Var<T> total;
  std::size_t layers = 0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a[l].shape() != b[l].shape()) {
      throw ShapeError("gm_distance: layer " + std::to_string(l) + " shapes " + to_string(a[l].shape()) + " vs " +
                       to_string(b[l].shape()));
    }
    if (a[l].shape().size() < 2) continue;
    const std::size_t out = a[l].shape()[0], rest = a[l].numel() / out;
    const Shape flat{out, rest};
    const auto A = reshape(a[l], flat);
    const Var<T> B(b[l].value().reshaped(flat));
    const auto dot = axis_sum(mul(A, B), 0);
    const auto na = pow_scalar(add_scalar(axis_sum(mul(A, A), 0), T(1e-20)), T(0.5));
    Tensor<T> nb(Shape{out});
    for (std::size_t i = 0; i < out; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < rest; ++j) s += double(B.value()[i * rest + j]) * B.value()[i * rest + j];
      nb[i] = static_cast<T>(std::sqrt(s + 1e-20));
    }
    const auto denom = add_scalar(mul(na, Var<T>(std::move(nb))), static_cast<T>(eps));
    const auto d = add_scalar(scale(sum(mul(dot, pow_scalar(denom, T(-1)))), T(-1)), static_cast<T>(out));
    total = total.defined() ? add(total, d) : d;
    ++layers;
  }
  if (!total.defined()) return Var<T>(Tensor<T>::scalar(T(0)));
  return reduce == DistanceReduce::mean ? scale(total, T(1) / static_cast<T>(layers)) : total;
}

// ---------------------------------------------------------------------------
// Teacher optimizer

struct AdamConfig {
  double lr_bank = 0.1;        // pixel banks and learned generator inputs
  double lr_generator = 1e-3;  // generator weights
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(const std::vector<Var<T>>& params, std::vector<double> lrs, const AdamConfig& cfg) : cfg_(cfg), lrs_(std::move(lrs)) {
    if (lrs_.size() != params.size()) throw std::invalid_argument("adam: one learning rate per parameter");
    for (const auto& p : params) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  /// New leaf parameters after one update; the inputs are not modified.
  std::vector<Var<T>> step(const std::vector<Var<T>>& params, const std::vector<Var<T>>& grads) {
    ++t_;
    const double c1 = 1 - std::pow(cfg_.beta1, double(t_)), c2 = 1 - std::pow(cfg_.beta2, double(t_));
    std::vector<Var<T>> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i].value();
      const auto& g = grads[i].value();
      auto np = Tensor<T>::uninitialized(p.shape());
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const double gj = g[j];
        m_[i][j] = static_cast<T>(cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * gj);
        v_[i][j] = static_cast<T>(cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * gj * gj);
        const double mh = m_[i][j] / c1, vh = v_[i][j] / c2;
        np[j] = static_cast<T>(p[j] - lrs_[i] * mh / (std::sqrt(vh) + cfg_.eps));
      }
      out.push_back(Var<T>::leaf(std::move(np)));
    }
    return out;
  }

  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<double> lrs_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

template <class T>
std::vector<double> teacher_learning_rates(const Teacher<T>& t, const AdamConfig& cfg) {
  if (t.kind == TeacherKind::dd) return {cfg.lr_bank};
  std::vector<double> lrs(t.generator->weights.size(), cfg.lr_generator);
  if (t.generator->learned_inputs) lrs.push_back(cfg.lr_bank);
  return lrs;
}

// ---------------------------------------------------------------------------
// Configuration and reports

struct DistillConfig {
  Method method = Method::gm;
  TeacherKind teacher = TeacherKind::dd;
  std::size_t K = 110;          // outer epochs (a cap under a time budget)
  std::size_t N = 10;           // inner steps per epoch; Neumann terms for ift
  std::size_t zeta_theta = 10;  // student steps per inner step (gm), inner training steps (ift)
  std::size_t zeta_S = 0;       // reserved, unused
  std::size_t zeta_T = 0;       // reserved, unused
  std::size_t ipc = 10;
  std::size_t ic = 1;
  std::size_t k = 64;
  bool per_class = true;
  std::optional<DistanceReduce> reduce;  // default: sum for dd, mean for gtn
  double time_budget_secs = std::numeric_limits<double>::infinity();
  AdamConfig teacher_opt;
  std::size_t restarts = 1;
  double alpha = 0.01;
  Arch arch = Arch::convnet;
  std::size_t width = 128;
  OptimizerConfig student_opt;
  std::size_t real_batch = 256;
  AugmentConfig aug;  // train augmentation applies to real batches here
  std::uint64_t seed = 0;

  DistanceReduce distance_reduce() const {
    return reduce.value_or(teacher == TeacherKind::dd ? DistanceReduce::sum : DistanceReduce::mean);
  }

  void validate() const {
    check_synthetic_shape(ipc, ic);
    if (N == 0) throw std::invalid_argument("N must be at least 1");
    if (N % ic != 0) {
      throw std::invalid_argument("ic=" + std::to_string(ic) + " must be a divisor of N=" + std::to_string(N) +
                                  " (each inner epoch walks whole curriculum passes)");
    }
    if (teacher != TeacherKind::dd && k < 4) throw std::invalid_argument("generator width k must be at least 4");
    if (method == Method::ift && zeta_theta == 0) throw std::invalid_argument("ift: zeta_theta must be at least 1");
    if (!(alpha > 0)) throw std::invalid_argument("alpha must be positive");
    if (!(time_budget_secs > 0)) throw std::invalid_argument("time budget must be positive");
    if (restarts == 0) throw std::invalid_argument("restarts must be at least 1");
    if (real_batch == 0) throw std::invalid_argument("real batch size must be positive");
    student_opt.validate();
  }
};

struct RunReport {
  std::size_t steps_completed = 0;
  double wall_time = 0;
  std::int64_t peak_tracked_bytes = 0;  // above the live size at the start of the run
  std::vector<double> teacher_loss_curve;
  std::vector<double> step_times;
  bool divergence_flag = false;
  std::string divergence_message;
};

struct StepInfo {
  std::size_t step = 0;
  double started_at = 0;  // seconds since the run began
  double elapsed = 0;     // at the end of the step
  double loss = 0;
  double grad_norm = 0;
  std::int64_t peak_bytes = 0;
};

/// One outer step; returns (teacher loss, teacher gradient norm).
using OuterStep = std::function<std::pair<double, double>(std::size_t step)>;
using StepObserver = std::function<void(const StepInfo&)>;

inline void log_step(std::ostream& os, const StepInfo& s) {
  os << "step=" << s.step << " loss=" << s.loss << " grad_norm=" << s.grad_norm << " elapsed=" << s.elapsed
     << " peak_bytes=" << s.peak_bytes << '\n';
}

/// Runs whole outer steps while the budget has not expired at the start of a
/// step, at most K of them. Divergence ends the run with the flag set.
inline RunReport budget_runner(std::size_t K, double budget_secs, const OuterStep& step, const StepObserver& observer = {},
                               std::ostream* log = nullptr) {
  if (!(budget_secs > 0)) throw std::invalid_argument("budget_runner: time budget must be positive");
  using clock = std::chrono::steady_clock;
  RunReport r;
  const auto base = memory::live_bytes();
  memory::reset_peak();
  const auto start = clock::now();
  auto since = [&](clock::time_point t) { return std::chrono::duration<double>(t - start).count(); };
  for (std::size_t k = 0; k < K; ++k) {
    const auto t0 = clock::now();
    if (since(t0) >= budget_secs) break;
    std::pair<double, double> out;
    try {
      out = step(k);
    } catch (const DistillDivergence& e) {
      r.divergence_flag = true;
      r.divergence_message = e.what();
      if (log) *log << "step=" << k << " diverged=1 message=\"" << e.what() << "\"\n";
      break;
    }
    const auto t1 = clock::now();
    ++r.steps_completed;
    r.step_times.push_back(std::chrono::duration<double>(t1 - t0).count());
    r.teacher_loss_curve.push_back(out.first);
    StepInfo info{k, since(t0), since(t1), out.first, out.second, memory::peak_bytes() - base};
    if (log) log_step(*log, info);
    if (observer) observer(info);
  }
  r.wall_time = since(clock::now());
  r.peak_tracked_bytes = memory::peak_bytes() - base;
  return r;
}

// ---------------------------------------------------------------------------
// Shared pieces of the three loops

namespace detail {

template <class T>
double grad_norm(const std::vector<Var<T>>& g) {
  return std::sqrt(squared_norm(g));
}

/// Images and one-hot targets for a real batch, with train augmentation.
template <class T>
Batch<T> real_batch(const RealDataset<T>& data, const DistillConfig& cfg, SeedStream& sample, SeedStream& aug) {
  auto rb = sample_real_batch(data, cfg.real_batch, sample);
  if (cfg.aug.on_real()) rb.images = augment(rb.images, cfg.aug, aug);
  return {Var<T>(std::move(rb.images)), Var<T>(one_hot<T>(rb.labels))};
}

/// Rows of a tensor (first axis) as a new tensor.
template <class T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  Shape s = x.shape();
  const std::size_t stride = x.numel() / s[0];
  s[0] = rows.size();
  auto out = Tensor<T>::uninitialized(s);
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(x.data() + rows[r] * stride, stride, out.data() + r * stride);
  return out;
}

template <class T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& one_hot_rows) {
  std::vector<std::uint8_t> l(one_hot_rows.dim(0));
  for (std::size_t i = 0; i < l.size(); ++i)
    for (std::size_t c = 0; c < kClasses; ++c)
      if (one_hot_rows[i * kClasses + c] > T(0.5)) l[i] = static_cast<std::uint8_t>(c);
  return l;
}

/// Shared state of a distillation run: the teacher, its optimizer and the
/// seeded streams every stochastic call site draws from.
template <class T>
struct LoopState {
  DistillConfig cfg;
  const RealDataset<T>* data;
  Teacher<T> teacher;
  Adam<T> opt;
  SeedStream students, sample, aug, noise;

  LoopState(const DistillConfig& c, const RealDataset<T>& d, Teacher<T> t, std::uint64_t seed)
      : cfg(c),
        data(&d),
        teacher(std::move(t)),
        opt(teacher.params(), teacher_learning_rates(teacher, c.teacher_opt), c.teacher_opt),
        students(SeedStream(seed).derive("students")),
        sample(SeedStream(seed).derive("real")),
        aug(SeedStream(seed).derive("augment")),
        noise(SeedStream(seed).derive("noise")) {
    cfg.validate();
  }

  StudentState<T> fresh_student(std::size_t k) const {
    return init_student<T>(cfg.arch, students.derive(k).seed(), cfg.width);
  }

  /// Teacher update; a non-finite gradient or result keeps the old teacher.
  double update(const std::vector<Var<T>>& g) {
    const double norm = grad_norm(g);
    if (!std::isfinite(norm)) throw DistillDivergence("teacher gradient is not finite; teacher rolled back");
    auto next = opt.step(teacher.params(), g);
    if (!all_finite(next)) throw DistillDivergence("teacher update produced non-finite values; teacher rolled back");
    teacher.set_params(std::move(next));
    return norm;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient matching

/// Matching loss for one curriculum batch against one real batch, and its
/// gradient with respect to the teacher. With per_class the loss is the sum
/// of independently computed per-class distances; classes missing from the
/// real batch are skipped.
template <class T>
std::pair<double, std::vector<Var<T>>> gm_matching_grad(const Network& net, const std::vector<Var<T>>& theta,
                                                        const Teacher<T>& teacher, std::size_t b,
                                                        const Batch<T>& real, bool per_class, DistanceReduce reduce,
                                                        SeedStream& noise) {
  const auto lambda = teacher.params();
  std::vector<Var<T>> acc;
  for (const auto& p : lambda) acc.emplace_back(Tensor<T>(p.shape()));
  double loss = 0;
  auto match = [&](const std::vector<std::size_t>& syn_rows, const Batch<T>& real_part) {
    const auto gT = grad(classification_loss(net, theta, real_part), theta);
    std::vector<std::uint8_t> syn_labels;
    for (auto r : syn_rows) syn_labels.push_back(static_cast<std::uint8_t>(r / teacher.ipc));
    const Batch<T> syn{teacher_images(teacher, syn_rows, noise), Var<T>(one_hot<T>(syn_labels))};
    const auto gS = grad(classification_loss(net, theta, syn), theta, true);
    const auto d = gm_distance(gS, gT, reduce);
    loss += d.item();
    const auto gl = grad(d, lambda);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      auto& a = acc[i].mutable_value();
      for (std::size_t j = 0; j < a.numel(); ++j) a[j] += gl[i].value()[j];
    }
  };
  const auto rows = teacher.batch_rows(b);
  if (!per_class) {
    match(rows, real);
    return {loss, acc};
  }
  const auto real_labels = detail::argmax_labels(real.targets.value());
  for (std::size_t c = 0; c < kClasses; ++c) {
    std::vector<std::size_t> real_rows, syn_rows;
    for (std::size_t i = 0; i < real_labels.size(); ++i)
      if (real_labels[i] == c) real_rows.push_back(i);
    for (auto r : rows)
      if (r / teacher.ipc == c) syn_rows.push_back(r);
    if (real_rows.empty() || syn_rows.empty()) continue;
    const Batch<T> part{Var<T>(detail::take_rows(real.images.value(), real_rows)),
                        Var<T>(detail::take_rows(real.targets.value(), real_rows))};
    match(syn_rows, part);
  }
  return {loss, acc};
}

/// One gm epoch: fresh student, N inner steps, each a teacher update on the
/// matching loss followed by zeta_theta student steps on the (detached)
/// synthetic data. The student update after the last inner step is skipped
/// since that student is discarded.
template <class T>
class GmStepper {
 public:
  GmStepper(const DistillConfig& cfg, const RealDataset<T>& data, Teacher<T> teacher, std::uint64_t seed)
      : s_(cfg, data, std::move(teacher), seed) {}

  std::pair<double, double> operator()(std::size_t k) {
    const auto& cfg = s_.cfg;
    const auto net = Network::make(cfg.arch, cfg.width);
    auto student = s_.fresh_student(k);
    double loss = 0, norm = 0;
    for (std::size_t n = 0; n < cfg.N; ++n) {
      const std::size_t b = n % cfg.ic;
      const auto real = detail::real_batch(*s_.data, cfg, s_.sample, s_.aug);
      auto [l, g] = gm_matching_grad(net, student.weights, s_.teacher, b, real, cfg.per_class, cfg.distance_reduce(),
                                     s_.noise);
      if (!std::isfinite(l)) throw DistillDivergence("gm: non-finite matching loss at inner step " + std::to_string(n));
      loss += l;
      norm = s_.update(g);
      if (n + 1 == cfg.N) break;
      for (std::size_t j = 0; j < cfg.zeta_theta; ++j) {
        const auto bj = (n * cfg.zeta_theta + j) % cfg.ic;
        Batch<T> syn;
        {
          NoGrad off;
          syn = materialize_batch(s_.teacher, bj, s_.noise);
        }
        student.weights = fresh_leaves(student.weights);
        const auto ls = classification_loss(net, student.weights, syn);
        if (!std::isfinite(ls.item())) throw DistillDivergence("gm: non-finite student loss");
        student = sgd_momentum_step(student, grad(ls, student.weights), cfg.student_opt);
      }
    }
    return {loss / static_cast<double>(cfg.N), norm};
  }

  const Teacher<T>& teacher() const { return s_.teacher; }
  std::size_t teacher_updates() const { return s_.opt.steps(); }

 private:
  detail::LoopState<T> s_;
};

// ---------------------------------------------------------------------------
// Unrolled differentiation

/// One outer step: fresh student, N recorded steps over the curriculum,
/// real-data loss at the end, hypergradient through the whole trajectory.
template <class T>
class UnrollStepper {
 public:
  UnrollStepper(const DistillConfig& cfg, const RealDataset<T>& data, Teacher<T> teacher, std::uint64_t seed)
      : s_(cfg, data, std::move(teacher), seed) {}

  std::pair<double, double> operator()(std::size_t k) {
    const auto& cfg = s_.cfg;
    const auto net = Network::make(cfg.arch, cfg.width);
    const auto real = detail::real_batch(*s_.data, cfg, s_.sample, s_.aug);
    const auto lambda = s_.teacher.params();
    const InnerLoss<T> inner = [&](const std::vector<Var<T>>& theta, std::size_t n) {
      return classification_loss(net, theta, materialize_batch(s_.teacher, n % cfg.ic, s_.noise));
    };
    std::vector<Var<T>> g;
    double loss = 0;
    try {
      auto run = unrolled_train(inner, lambda, s_.fresh_student(k), cfg.N, cfg.student_opt, true);
      const auto final_weights = fresh_leaves(run.student.weights);
      const auto lt = classification_loss(net, final_weights, real);
      loss = lt.item();
      if (!std::isfinite(loss)) throw DistillDivergence("unroll: non-finite real-data loss");
      g = hypergrad_unroll(run.memory, lt, final_weights);
    } catch (const NonFiniteLoss& e) {
      throw DistillDivergence(std::string("unroll: ") + e.what());
    }
    return {loss, s_.update(g)};
  }

  const Teacher<T>& teacher() const { return s_.teacher; }
  std::size_t teacher_updates() const { return s_.opt.steps(); }

 private:
  detail::LoopState<T> s_;
};

// ---------------------------------------------------------------------------
// Implicit differentiation

/// One outer step: fresh student trained zeta_theta plain SGD steps on the
/// whole synthetic set as one batch, then the Neumann hypergradient with N
/// series terms.
template <class T>
class IftStepper {
 public:
  IftStepper(const DistillConfig& cfg, const RealDataset<T>& data, Teacher<T> teacher, std::uint64_t seed)
      : s_(cfg, data, std::move(teacher), seed) {}

  std::pair<double, double> operator()(std::size_t k) {
    const auto& cfg = s_.cfg;
    const auto net = Network::make(cfg.arch, cfg.width);
    const auto real = detail::real_batch(*s_.data, cfg, s_.sample, s_.aug);
    std::vector<std::size_t> all(s_.teacher.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const Var<T> targets(one_hot<T>(s_.teacher.labels()));
    const InnerLoss<T> inner = [&](const std::vector<Var<T>>& theta, std::size_t) {
      return classification_loss(net, theta, Batch<T>{teacher_images(s_.teacher, all, s_.noise), targets});
    };
    // The student is trained on detached images; the teacher graph is only
    // needed for the final loss.
    const InnerLoss<T> detached = [&](const std::vector<Var<T>>& theta, std::size_t) {
      Var<T> images;
      {
        NoGrad off;
        images = teacher_images(s_.teacher, all, s_.noise);
      }
      return classification_loss(net, theta, Batch<T>{images, targets});
    };
    const IFTConfig ift{cfg.alpha, cfg.N, cfg.zeta_theta, cfg.student_opt.lr};
    std::vector<Var<T>> g;
    double loss = 0;
    try {
      const auto trained = inner_train(detached, s_.fresh_student(k), cfg.zeta_theta, cfg.student_opt.lr);
      const auto theta = fresh_leaves(trained.student.weights);
      const auto lt = classification_loss(net, theta, real);
      loss = lt.item();
      if (!std::isfinite(loss)) throw DistillDivergence("ift: non-finite real-data loss");
      const auto ls = inner(theta, cfg.zeta_theta);
      g = hypergrad_ift(lt, ls, theta, s_.teacher.params(), ift);
    } catch (const NonFiniteLoss& e) {
      throw DistillDivergence(std::string("ift: ") + e.what());
    } catch (const NeumannDivergence& e) {
      throw DistillDivergence(std::string("ift: ") + e.what());
    }
    return {loss, s_.update(g)};
  }

  const Teacher<T>& teacher() const { return s_.teacher; }
  std::size_t teacher_updates() const { return s_.opt.steps(); }

 private:
  detail::LoopState<T> s_;
};

// ---------------------------------------------------------------------------
// Drivers

template <class T>
struct DistillResult {
  Teacher<T> teacher;
  RunReport report;
};

/// Hooks for long runs: a structured log sink and an observer that sees the
/// teacher after every completed outer step.
template <class T>
struct DistillHooks {
  std::ostream* log = nullptr;
  std::function<void(const StepInfo&, const Teacher<T>&)> on_step;
};

template <class T, class Stepper>
DistillResult<T> run_stepper(const DistillConfig& cfg, Stepper stepper, const DistillHooks<T>& hooks) {
  StepObserver obs;
  if (hooks.on_step) obs = [&](const StepInfo& s) { hooks.on_step(s, stepper.teacher()); };
  auto report = budget_runner(
      cfg.K, cfg.time_budget_secs, [&](std::size_t k) { return stepper(k); }, obs, hooks.log);
  return {stepper.teacher(), std::move(report)};
}

template <class T>
DistillResult<T> distill_gm(const DistillConfig& cfg, const RealDataset<T>& data, Teacher<T> teacher,
                            std::uint64_t seed, const DistillHooks<T>& hooks = {}) {
  if (cfg.method != Method::gm) throw std::invalid_argument("distill_gm: config method is " + std::string(to_string(cfg.method)));
  return run_stepper<T>(cfg, GmStepper<T>(cfg, data, std::move(teacher), seed), hooks);
}

template <class T>
DistillResult<T> distill_unroll(const DistillConfig& cfg, const RealDataset<T>& data, Teacher<T> teacher,
                                std::uint64_t seed, const DistillHooks<T>& hooks = {}) {
  if (cfg.method != Method::unroll) {
    throw std::invalid_argument("distill_unroll: config method is " + std::string(to_string(cfg.method)));
  }
  return run_stepper<T>(cfg, UnrollStepper<T>(cfg, data, std::move(teacher), seed), hooks);
}

template <class T>
DistillResult<T> distill_ift(const DistillConfig& cfg, const RealDataset<T>& data, Teacher<T> teacher,
                             std::uint64_t seed, const DistillHooks<T>& hooks = {}) {
  if (cfg.method != Method::ift) throw std::invalid_argument("distill_ift: config method is " + std::string(to_string(cfg.method)));
  return run_stepper<T>(cfg, IftStepper<T>(cfg, data, std::move(teacher), seed), hooks);
}

/// Seed of restart r under a master seed.
inline std::uint64_t restart_seed(std::uint64_t master, std::size_t r) { return SeedStream(master).derive(r).seed(); }

/// Fresh teacher and distillation run for each restart.
template <class T>
std::vector<DistillResult<T>> distill(const DistillConfig& cfg, const RealDataset<T>& data,
                                      const DistillHooks<T>& hooks = {}) {
  cfg.validate();
  std::vector<DistillResult<T>> out;
  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    const auto seed = restart_seed(cfg.seed, r);
    auto teacher = init_teacher<T>(cfg.teacher, cfg.ipc, cfg.ic, cfg.k, SeedStream(seed).derive("teacher"));
    switch (cfg.method) {
      case Method::gm: out.push_back(distill_gm(cfg, data, std::move(teacher), seed, hooks)); break;
      case Method::unroll: out.push_back(distill_unroll(cfg, data, std::move(teacher), seed, hooks)); break;
      case Method::ift: out.push_back(distill_ift(cfg, data, std::move(teacher), seed, hooks)); break;
    }
  }
  return out;
}

}  // namespace distill
