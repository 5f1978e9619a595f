#pragma once

#include <distill/distill.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace distill {

// ---------------------------------------------------------------------------
// Student evaluation

struct StudentResult {
  double accuracy = 0;  // percent, top-1 on the test split
  bool diverged = false;
};

/// Top-1 accuracy (percent) on a labelled set, evaluated in chunks.
template <class T>
double test_accuracy(const Network& net, const std::vector<Var<T>>& weights, const RealDataset<T>& test,
                     std::size_t chunk = 1000) {
  NoGrad off;
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t at = 0; at < test.size(); at += chunk) {
    const std::size_t n = std::min(chunk, test.size() - at);
    Tensor<T> x = Tensor<T>::uninitialized(Shape{n, 1, kImageSide, kImageSide});
    std::copy_n(test.images.data() + at * kImagePixels, n * kImagePixels, x.data());
    const auto logits = net.forward(weights, Var<T>(std::move(x))).value();
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = logits.data() + i * kClasses;
      if (std::size_t(std::max_element(row, row + kClasses) - row) == test.labels[at + i]) ++correct;
    }
  }
  return test.size() ? 100.0 * double(correct) / double(test.size()) : 0.0;
}

struct StudentTraining {
  Arch arch = Arch::convnet;
  std::size_t width = 128;
  std::size_t steps = 1000;
  OptimizerConfig opt;
  AugmentConfig aug;  // test augmentation applies to synthetic batches here
};

/// Trains a fresh student with SGD-momentum on the teacher's curriculum
/// batches and reports its test accuracy. A non-finite loss ends training
/// and is reported as accuracy 0 with the divergence flag set.
template <class T>
StudentResult train_student_on_synthetic(const Teacher<T>& teacher, const StudentTraining& tr, std::uint64_t seed,
                                         const RealDataset<T>& test) {
  const auto net = Network::make(tr.arch, tr.width);
  auto student = init_student<T>(tr.arch, SeedStream(seed).derive("init").seed(), tr.width);
  SeedStream noise = SeedStream(seed).derive("noise"), aug = SeedStream(seed).derive("augment");
  // Fixed teachers are materialized once; gtn-rnd draws fresh noise per step.
  std::optional<Tensor<T>> fixed;
  if (teacher.kind != TeacherKind::gtn_rnd) fixed = materialize_all(teacher, noise);
  for (std::size_t s = 0; s < tr.steps; ++s) {
    const std::size_t b = s % teacher.ic;
    Tensor<T> images;
    if (fixed) {
      images = detail::take_rows(*fixed, teacher.batch_rows(b));
    } else {
      NoGrad off;
      images = materialize_batch(teacher, b, noise).images.value();
    }
    if (tr.aug.on_synthetic()) images = augment(images, tr.aug, aug);
    const Batch<T> batch{Var<T>(std::move(images)), Var<T>(one_hot<T>(teacher.batch_labels(b)))};
    student.weights = fresh_leaves(student.weights);
    const auto loss = classification_loss(net, student.weights, batch);
    if (!std::isfinite(loss.item())) return {0.0, true};
    student = sgd_momentum_step(student, grad(loss, student.weights), tr.opt);
  }
  if (!all_finite(student.weights)) return {0.0, true};
  return {test_accuracy(net, student.weights, test), false};
}

// ---------------------------------------------------------------------------
// Aggregation

struct Stats {
  double mean = 0;
  double stddev = 0;  // population
  std::size_t n = 0;
};

inline Stats summarize(const std::vector<double>& xs) {
  Stats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  // Sorted so the result does not depend on run order.
  auto v = xs;
  std::sort(v.begin(), v.end());
  for (double x : v) s.mean += x;
  s.mean /= double(v.size());
  double ss = 0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(ss / double(v.size()));
  return s;
}

struct EvalProtocol {
  std::size_t n_teachers = 3;
  std::size_t n_students = 5;
  StudentTraining training;
};

struct ResultRow {
  std::string config_hash;
  std::string method;
  std::string teacher;
  std::string arch;
  std::size_t ipc = 0, ic = 0, k = 0, N = 0, zeta_theta = 0, K = 0;
  std::string aug;
  double acc_mean = 0, acc_std = 0;
  std::size_t params = 0;
  std::int64_t peak_bytes = 0;
  double wall_secs = 0;
  std::size_t diverged = 0;  // runs flagged as divergent (teacher or student)
  std::vector<double> accuracies;
};

inline constexpr int kResultSchema = 1;
inline constexpr std::string_view kResultColumns =
    "config_hash,method,teacher,arch,ipc,ic,k,N,zeta_theta,K,aug,acc_mean,acc_std,params,peak_bytes,wall_secs,diverged";

inline std::string csv_line(const ResultRow& r) {
  std::ostringstream os;
  os << r.config_hash << ',' << r.method << ',' << r.teacher << ',' << r.arch << ',' << r.ipc << ',' << r.ic << ','
     << r.k << ',' << r.N << ',' << r.zeta_theta << ',' << r.K << ',' << r.aug << ',' << std::fixed
     << std::setprecision(4) << r.acc_mean << ',' << r.acc_std << ',' << r.params << ',' << r.peak_bytes << ','
     << std::setprecision(2) << r.wall_secs << ',' << r.diverged;
  return os.str();
}

struct ResultTable {
  std::vector<ResultRow> rows;

  /// Appends rows to a CSV file, writing the schema header first if the file
  /// is new. An existing file with another schema is refused.
  void append_csv(const std::filesystem::path& path) const {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    if (!fresh) {
      std::ifstream in(path);
      std::string first;
      std::getline(in, first);
      if (first != schema_line()) {
        throw std::runtime_error(path.string() + ": existing results file has header '" + first + "', expected '" +
                                 schema_line() + "'");
      }
    }
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot open results file " + path.string());
    if (fresh) out << schema_line() << '\n' << kResultColumns << '\n';
    for (const auto& r : rows) out << csv_line(r) << '\n';
  }

  static std::string schema_line() { return "# distill-results schema=" + std::to_string(kResultSchema); }
};

// ---------------------------------------------------------------------------
// Configuration text

/// Canonical key=value lines for a distillation config; the basis of the
/// config hash and of config files.
inline std::string serialize(const DistillConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "method=" << to_string(c.method) << '\n'
     << "teacher=" << to_string(c.teacher) << '\n'
     << "K=" << c.K << '\n'
     << "N=" << c.N << '\n'
     << "zeta_theta=" << c.zeta_theta << '\n'
     << "zeta_S=" << c.zeta_S << '\n'
     << "zeta_T=" << c.zeta_T << '\n'
     << "ipc=" << c.ipc << '\n'
     << "ic=" << c.ic << '\n'
     << "k=" << c.k << '\n'
     << "per_class=" << (c.per_class ? 1 : 0) << '\n'
     << "reduce=" << to_string(c.distance_reduce()) << '\n'
     << "budget=" << c.time_budget_secs << '\n'
     << "teacher_lr_bank=" << c.teacher_opt.lr_bank << '\n'
     << "teacher_lr_generator=" << c.teacher_opt.lr_generator << '\n'
     << "restarts=" << c.restarts << '\n'
     << "alpha=" << c.alpha << '\n'
     << "arch=" << to_string(c.arch) << '\n'
     << "width=" << c.width << '\n'
     << "student_lr=" << c.student_opt.lr << '\n'
     << "student_momentum=" << c.student_opt.momentum << '\n'
     << "real_batch=" << c.real_batch << '\n'
     << "aug=" << to_string(c.aug.mode) << '\n'
     << "crop_padding=" << c.aug.crop_padding << '\n'
     << "max_rotation=" << c.aug.max_rotation_degrees << '\n'
     << "seed=" << c.seed << '\n';
  return os.str();
}

inline std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string config_hash(const DistillConfig& c, const EvalProtocol& p) {
  std::ostringstream os;
  os << serialize(c) << "eval_teachers=" << p.n_teachers << "\neval_students=" << p.n_students
     << "\neval_steps=" << p.training.steps << "\neval_arch=" << to_string(p.training.arch)
     << "\neval_width=" << p.training.width << "\neval_aug=" << to_string(p.training.aug.mode) << '\n';
  return hex64(fnv1a(os.str()));
}

namespace detail {

inline std::size_t parse_size(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw std::invalid_argument("config: " + std::string(key) + " expects a non-negative integer, got '" +
                                std::string(v) + "'");
  }
  return out;
}

inline double parse_real(std::string_view key, std::string_view v) {
  std::string s(v);
  if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) {
    throw std::invalid_argument("config: " + std::string(key) + " expects a number, got '" + s + "'");
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw std::invalid_argument("config: " + std::string(key) + " expects true/false, got '" + std::string(v) + "'");
}

}  // namespace detail

/// Sets one config field from its text form. Unknown keys are rejected.
inline void apply_setting(DistillConfig& c, std::string_view key, std::string_view v) {
  using namespace detail;
  if (key == "method") c.method = parse_method(v);
  else if (key == "teacher") c.teacher = parse_teacher(v);
  else if (key == "K") c.K = parse_size(key, v);
  else if (key == "N") c.N = parse_size(key, v);
  else if (key == "zeta_theta") c.zeta_theta = parse_size(key, v);
  else if (key == "zeta_S") c.zeta_S = parse_size(key, v);
  else if (key == "zeta_T") c.zeta_T = parse_size(key, v);
  else if (key == "ipc") c.ipc = parse_size(key, v);
  else if (key == "ic") c.ic = parse_size(key, v);
  else if (key == "k") c.k = parse_size(key, v);
  else if (key == "per_class") c.per_class = parse_bool(key, v);
  else if (key == "reduce") c.reduce = parse_reduce(v);
  else if (key == "budget") c.time_budget_secs = parse_real(key, v);
  else if (key == "teacher_lr_bank") c.teacher_opt.lr_bank = parse_real(key, v);
  else if (key == "teacher_lr_generator") c.teacher_opt.lr_generator = parse_real(key, v);
  else if (key == "restarts") c.restarts = parse_size(key, v);
  else if (key == "alpha") c.alpha = parse_real(key, v);
  else if (key == "arch") c.arch = parse_arch(v);
  else if (key == "width") c.width = parse_size(key, v);
  else if (key == "student_lr") c.student_opt.lr = parse_real(key, v);
  else if (key == "student_momentum") c.student_opt.momentum = parse_real(key, v);
  else if (key == "real_batch") c.real_batch = parse_size(key, v);
  else if (key == "aug") c.aug.mode = parse_augment_mode(v);
  else if (key == "crop_padding") c.aug.crop_padding = parse_size(key, v);
  else if (key == "max_rotation") c.aug.max_rotation_degrees = parse_real(key, v);
  else if (key == "seed") c.seed = parse_size(key, v);
  else throw std::invalid_argument("config: unknown key '" + std::string(key) + "'");
}

/// Keys accepted by apply_setting, in serialization order.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  std::istringstream in(serialize(DistillConfig{}));
  for (std::string line; std::getline(in, line);) keys.push_back(line.substr(0, line.find('=')));
  return keys;
}

/// Flat key=value text; blank lines and lines starting with '#' are ignored.
inline DistillConfig parse_config(std::string_view text, DistillConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

// ---------------------------------------------------------------------------
// Protocols

/// A distilled teacher with the report of the run that produced it.
template <class T>
struct TeacherRun {
  Teacher<T> teacher;
  RunReport report;
};

/// Produces the i-th teacher of an evaluation (fresh seed per index).
template <class T>
using TeacherBuilder = std::function<TeacherRun<T>(std::size_t index)>;

template <class T>
TeacherBuilder<T> distill_builder(DistillConfig cfg, const RealDataset<T>& train, const DistillHooks<T>& hooks = {}) {
  return [cfg, &train, hooks](std::size_t i) {
    auto c = cfg;
    c.restarts = 1;
    c.seed = restart_seed(cfg.seed, i);
    auto runs = distill<T>(c, train, hooks);
    return TeacherRun<T>{std::move(runs.front().teacher), std::move(runs.front().report)};
  };
}

/// Student seed for (teacher index, student index); shared across rows so
/// comparisons are paired.
inline std::uint64_t student_seed(std::uint64_t master, std::size_t teacher, std::size_t student) {
  return SeedStream(master).derive("students").derive(teacher).derive(student).seed();
}

/// Augmentation column label from where augmentation was applied.
inline AugmentConfig::Mode combined_mode(bool on_real, bool on_synthetic) {
  if (on_real) return on_synthetic ? AugmentConfig::both : AugmentConfig::train_aug;
  return on_synthetic ? AugmentConfig::test_aug : AugmentConfig::none;
}

template <class T>
ResultRow row_header(const DistillConfig& cfg, const EvalProtocol& p, const Teacher<T>& t) {
  ResultRow r;
  r.config_hash = config_hash(cfg, p);
  r.method = std::string(to_string(cfg.method));
  r.teacher = std::string(to_string(cfg.teacher));
  r.arch = std::string(to_string(p.training.arch));
  r.ipc = cfg.ipc;
  r.ic = cfg.ic;
  r.k = cfg.teacher == TeacherKind::dd ? 0 : cfg.k;
  r.N = cfg.N;
  r.zeta_theta = cfg.zeta_theta;
  r.K = cfg.K;
  r.aug = std::string(to_string(combined_mode(cfg.aug.on_real(), p.training.aug.on_synthetic())));
  r.params = param_count(t);
  return r;
}

/// Students for already distilled teachers: n_students per teacher, all
/// accuracies aggregated into one row.
template <class T>
ResultRow evaluate_runs(const std::vector<TeacherRun<T>>& runs, const DistillConfig& cfg, const EvalProtocol& p,
                        const RealDataset<T>& test) {
  if (runs.empty()) throw std::invalid_argument("evaluate: no teachers");
  auto row = row_header(cfg, p, runs.front().teacher);
  for (std::size_t t = 0; t < runs.size(); ++t) {
    const auto& run = runs[t];
    row.peak_bytes = std::max(row.peak_bytes, run.report.peak_tracked_bytes);
    row.wall_secs += run.report.wall_time;
    if (run.report.divergence_flag) ++row.diverged;
    for (std::size_t s = 0; s < p.n_students; ++s) {
      const auto res = train_student_on_synthetic(run.teacher, p.training, student_seed(cfg.seed, t, s), test);
      if (res.diverged) ++row.diverged;
      row.accuracies.push_back(res.accuracy);
    }
  }
  const auto st = summarize(row.accuracies);
  row.acc_mean = st.mean;
  row.acc_std = st.stddev;
  return row;
}

/// Distills n_teachers times and trains n_students students on each.
template <class T>
ResultRow evaluate_teacher(const TeacherBuilder<T>& build, const DistillConfig& cfg, const EvalProtocol& p,
                           const RealDataset<T>& test, std::vector<TeacherRun<T>>* keep = nullptr) {
  if (p.n_teachers == 0 || p.n_students == 0) throw std::invalid_argument("evaluate: protocol needs teachers and students");
  std::vector<TeacherRun<T>> runs;
  for (std::size_t i = 0; i < p.n_teachers; ++i) runs.push_back(build(i));
  auto row = evaluate_runs(runs, cfg, p, test);
  if (keep) *keep = std::move(runs);
  return row;
}

/// Rows for the given teachers on other student architectures, with test
/// augmentation.
template <class T>
ResultTable generalization_suite(const std::vector<TeacherRun<T>>& runs, const DistillConfig& cfg, EvalProtocol p,
                                 const RealDataset<T>& test,
                                 const std::vector<Arch>& archs = {Arch::lenet, Arch::alexnet, Arch::vgg11, Arch::mlp}) {
  ResultTable table;
  p.training.aug.mode = AugmentConfig::test_aug;
  for (auto a : archs) {
    p.training.arch = a;
    table.rows.push_back(evaluate_runs(runs, cfg, p, test));
  }
  return table;
}

/// Test, train and test+train augmentation for each config, with shared
/// seeds. Train augmentation needs its own teachers (distilled with
/// augmented real batches); the test column reuses the base teachers.
template <class T>
ResultTable augmentation_study(const std::vector<DistillConfig>& configs, const EvalProtocol& p,
                               const RealDataset<T>& train, const RealDataset<T>& test,
                               const std::vector<AugmentConfig::Mode>& modes = {AugmentConfig::test_aug,
                                                                                AugmentConfig::train_aug,
                                                                                AugmentConfig::both}) {
  ResultTable table;
  for (const auto& base : configs) {
    std::optional<std::vector<TeacherRun<T>>> plain, augmented;
    for (auto mode : modes) {
      AugmentConfig real_aug = base.aug, syn_aug = base.aug;
      real_aug.mode = (mode == AugmentConfig::train_aug || mode == AugmentConfig::both) ? AugmentConfig::train_aug
                                                                                       : AugmentConfig::none;
      syn_aug.mode = (mode == AugmentConfig::test_aug || mode == AugmentConfig::both) ? AugmentConfig::test_aug
                                                                                     : AugmentConfig::none;
      auto cfg = base;
      cfg.aug = real_aug;
      auto& slot = real_aug.mode == AugmentConfig::none ? plain : augmented;
      if (!slot) {
        slot.emplace();
        const auto build = distill_builder(cfg, train);
        for (std::size_t i = 0; i < p.n_teachers; ++i) slot->push_back(build(i));
      }
      auto q = p;
      q.training.aug = syn_aug;
      table.rows.push_back(evaluate_runs(*slot, cfg, q, test));
    }
  }
  return table;
}

}  // namespace distill
