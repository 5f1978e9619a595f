// Command-line front end: distill, eval, generalize, augstudy, export,
// verify and sweep.

#include <distill/harness.hpp>
#include <distill/verify.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

using namespace distill;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kValidationSize = 10000;

// Options shared by every subcommand that builds a DistillConfig.
struct ConfigOptions {
  std::string config_file;
  std::map<std::string, std::string> values;  // --<config key>
  double scale = 0;
  int precision = 32;
  std::string data_dir = DISTILL_MNIST_DIR;
  std::string select_on = "none";
  bool quiet = false;
  CLI::App* app = nullptr;

  void attach(CLI::App* sub) {
    app = sub;
    sub->add_option("--config", config_file, "flat key=value config file")->check(CLI::ExistingFile);
    for (const auto& key : config_keys()) sub->add_option("--" + key, values[key], "config field " + key);
    sub->add_option("--scale", scale, "desk preset scale: budget 900*s seconds, ipc 10, K capped at ceil(K*s)")
        ->check(CLI::Range(1e-6, 1.0));
    sub->add_option("--precision", precision, "32 or 64 bit arithmetic")->check(CLI::IsMember({32, 64}));
    sub->add_option("--data", data_dir, "directory with the MNIST IDX files");
    sub->add_option("--select-on", select_on, "teacher selection split")->check(CLI::IsMember({"none", "val"}));
    sub->add_flag("--quiet", quiet, "no per-step log");
  }

  // File, then the scale preset, then explicit flags.
  DistillConfig build() const {
    DistillConfig c;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      std::stringstream text;
      text << in.rdbuf();
      c = parse_config(text.str(), c);
    }
    if (scale > 0) {
      c.time_budget_secs = 900.0 * scale;
      c.ipc = 10;
      c.K = std::max<std::size_t>(1, std::size_t(std::ceil(double(c.K) * scale)));
    }
    for (const auto& [key, v] : values)
      if (app->count("--" + key)) apply_setting(c, key, v);
    c.validate();
    return c;
  }
};

struct EvalOptions {
  std::size_t teachers = 3, students = 5, steps = 1000, width = 0;
  std::string arch, aug = "none", results = "results.csv";
  std::vector<std::string> teacher_files;

  void attach(CLI::App* sub, bool teacher_files_allowed = true) {
    sub->add_option("--teachers", teachers, "teachers per row")->check(CLI::PositiveNumber);
    sub->add_option("--students", students, "students per teacher")->check(CLI::PositiveNumber);
    sub->add_option("--student-steps", steps, "student training steps");
    sub->add_option("--student-arch", arch, "student architecture (default: the distillation arch)");
    sub->add_option("--student-width", width, "student width (default: the distillation width)");
    sub->add_option("--eval-aug", aug, "augmentation of synthetic batches")->check(CLI::IsMember({"none", "test"}));
    sub->add_option("--results", results, "results CSV, appended");
    if (teacher_files_allowed)
      sub->add_option("--teacher-file", teacher_files, "evaluate saved teachers instead of distilling")
          ->check(CLI::ExistingFile);
  }

  EvalProtocol protocol(const DistillConfig& c) const {
    EvalProtocol p;
    p.n_teachers = teachers;
    p.n_students = students;
    p.training.steps = steps;
    p.training.arch = arch.empty() ? c.arch : parse_arch(arch);
    p.training.width = width ? width : c.width;
    p.training.opt = c.student_opt;
    p.training.aug = c.aug;
    p.training.aug.mode = aug == "test" ? AugmentConfig::test_aug : AugmentConfig::none;
    return p;
  }
};

template <class T>
struct Data {
  RealDataset<T> train, val, test;
};

template <class T>
Data<T> load_data(const ConfigOptions& o, const DistillConfig& c) {
  const fs::path dir = o.data_dir;
  Data<T> d;
  d.train = load_mnist_idx<T>(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", Split::train);
  d.test = load_mnist_idx<T>(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", Split::test);
  if (o.select_on == "val") std::tie(d.train, d.val) = split_validation(d.train, kValidationSize, c.seed);
  return d;
}

nlohmann::json report_json(const RunReport& r) {
  return {{"steps_completed", r.steps_completed},
          {"wall_time", r.wall_time},
          {"peak_tracked_bytes", r.peak_tracked_bytes},
          {"teacher_loss_curve", r.teacher_loss_curve},
          {"step_times", r.step_times},
          {"divergence_flag", r.divergence_flag},
          {"divergence_message", r.divergence_message}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

template <class T>
DistillHooks<T> hooks(const ConfigOptions& o) {
  DistillHooks<T> h;
  if (!o.quiet) h.log = &std::cerr;
  return h;
}

template <class T>
std::vector<TeacherRun<T>> obtain_teachers(const ConfigOptions& o, const EvalOptions& e, const DistillConfig& c,
                                           const Data<T>& d) {
  std::vector<TeacherRun<T>> runs;
  if (!e.teacher_files.empty()) {
    for (const auto& f : e.teacher_files) runs.push_back({load_teacher<T>(f), {}});
    return runs;
  }
  const auto build = distill_builder(c, d.train, hooks<T>(o));
  for (std::size_t i = 0; i < e.teachers; ++i) runs.push_back(build(i));
  return runs;
}

void print_rows(const ResultTable& t) {
  std::cout << kResultColumns << '\n';
  for (const auto& r : t.rows) std::cout << csv_line(r) << '\n';
}

template <class T>
int run_distill(const ConfigOptions& o, const std::string& out_dir) {
  const auto c = o.build();
  const auto d = load_data<T>(o, c);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "config.txt", serialize(c));
  const auto results = distill::distill<T>(c, d.train, hooks<T>(o));
  nlohmann::json summary{{"config_hash", hex64(fnv1a(serialize(c)))}, {"precision", o.precision},
                         {"select_on", o.select_on}, {"runs", nlohmann::json::array()}};
  std::size_t selected = 0;
  double best = -1;
  for (std::size_t r = 0; r < results.size(); ++r) {
    const auto name = "teacher_" + std::to_string(r) + ".dtch";
    save_teacher(fs::path(out_dir) / name, results[r].teacher);
    auto j = report_json(results[r].report);
    j["teacher_file"] = name;
    j["seed"] = restart_seed(c.seed, r);
    if (o.select_on == "val") {
      StudentTraining tr;
      tr.arch = c.arch;
      tr.width = c.width;
      tr.opt = c.student_opt;
      const double acc = train_student_on_synthetic(results[r].teacher, tr, student_seed(c.seed, r, 0), d.val).accuracy;
      j["val_accuracy"] = acc;
      if (acc > best) best = acc, selected = r;
    }
    summary["runs"].push_back(j);
  }
  // Selection provenance: which restart is teacher.dtch and why.
  summary["selected_run"] = selected;
  summary["selection"] = o.select_on == "val" ? "highest validation accuracy" : "first restart (no selection)";
  fs::copy_file(fs::path(out_dir) / ("teacher_" + std::to_string(selected) + ".dtch"), fs::path(out_dir) / "teacher.dtch",
                fs::copy_options::overwrite_existing);
  write_text(fs::path(out_dir) / "report.json", summary.dump(2) + "\n");
  std::cout << "wrote " << results.size() << " teacher(s) to " << out_dir << "; selected run " << selected << '\n';
  return 0;
}

template <class T>
int run_eval(const ConfigOptions& o, const EvalOptions& e) {
  const auto c = o.build();
  const auto d = load_data<T>(o, c);
  const auto p = e.protocol(c);
  ResultTable table{{evaluate_runs(obtain_teachers(o, e, c, d), c, p, d.test)}};
  table.append_csv(e.results);
  print_rows(table);
  return 0;
}

template <class T>
int run_generalize(const ConfigOptions& o, const EvalOptions& e, const std::vector<std::string>& archs) {
  const auto c = o.build();
  if (c.arch != Arch::convnet) throw std::invalid_argument("generalize: teachers must be distilled with arch=convnet");
  const auto d = load_data<T>(o, c);
  std::vector<Arch> targets;
  for (const auto& a : archs) targets.push_back(parse_arch(a));
  const auto table = generalization_suite(obtain_teachers(o, e, c, d), c, e.protocol(c), d.test, targets);
  table.append_csv(e.results);
  print_rows(table);
  return 0;
}

template <class T>
int run_augstudy(const ConfigOptions& o, const EvalOptions& e, const std::vector<std::string>& methods,
                 const std::vector<std::string>& modes) {
  const auto c = o.build();
  const auto d = load_data<T>(o, c);
  std::vector<DistillConfig> configs;
  for (const auto& m : methods) {
    auto x = c;
    x.method = parse_method(m);
    x.validate();
    configs.push_back(x);
  }
  std::vector<AugmentConfig::Mode> ms;
  for (const auto& m : modes) ms.push_back(parse_augment_mode(m));
  const auto table = augmentation_study(configs, e.protocol(c), d.train, d.test, ms);
  table.append_csv(e.results);
  print_rows(table);
  return 0;
}

template <class T>
int run_sweep(const ConfigOptions& o, const EvalOptions& e, const std::string& param, const std::vector<std::string>& values) {
  const auto base = o.build();
  const auto d = load_data<T>(o, base);
  ResultTable table;
  for (const auto& v : values) {
    auto c = base;
    apply_setting(c, param, v);
    c.validate();
    const auto p = e.protocol(c);
    if (!o.quiet) std::cerr << "sweep " << param << "=" << v << '\n';
    table.rows.push_back(evaluate_teacher(distill_builder(c, d.train, hooks<T>(o)), c, p, d.test));
  }
  table.append_csv(e.results);
  print_rows(table);
  return 0;
}

int run_export(const std::string& teacher_file, const std::string& out_dir, std::uint64_t seed) {
  const auto t = load_teacher<double>(teacher_file);
  export_synthetic(t, out_dir, SeedStream(seed).derive("export"));
  std::cout << "exported " << t.size() << " images to " << out_dir << '\n';
  return 0;
}

int run_verify() {
  bool ok = true;
  for (const auto& c : verify::run_oracle_suite()) {
    std::cout << (c.passed() ? "ok   " : "FAIL ") << c.name << ": " << c.instances << " instances, worst " << c.worst
              << " (tolerance " << c.tolerance << "), " << c.seconds << " s\n";
    ok = ok && c.passed();
  }
  return ok ? 0 : 1;
}

template <class F>
int with_precision(int precision, F&& f) {
  return precision == 64 ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dataset distillation toolkit"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  ConfigOptions dopt, eopt, gopt, aopt, sopt;
  EvalOptions eeval, geval, aeval, seval;

  auto* distill_cmd = app.add_subcommand("distill", "distill teachers and write checkpoints plus a run report");
  dopt.attach(distill_cmd);
  std::string out_dir = "run";
  distill_cmd->add_option("--out", out_dir, "output directory");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate teachers with fresh students and append a CSV row");
  eopt.attach(eval_cmd);
  eeval.attach(eval_cmd);

  auto* gen_cmd = app.add_subcommand("generalize", "evaluate convnet-distilled teachers on other student archs");
  gopt.attach(gen_cmd);
  geval.attach(gen_cmd);
  std::vector<std::string> archs{"lenet", "alexnet", "vgg11", "mlp"};
  gen_cmd->add_option("--archs", archs, "student architectures")->delimiter(',');

  auto* aug_cmd = app.add_subcommand("augstudy", "augmentation study with paired seeds");
  aopt.attach(aug_cmd);
  aeval.attach(aug_cmd, false);
  std::vector<std::string> methods{"gm", "ift"}, modes{"test", "train", "test+train"};
  aug_cmd->add_option("--methods", methods, "distillation methods")->delimiter(',');
  aug_cmd->add_option("--modes", modes, "augmentation modes")->delimiter(',');

  auto* export_cmd = app.add_subcommand("export", "write a teacher's images as a DSTL1 tensor file and PNG grids");
  std::string teacher_file, export_dir = "export";
  std::uint64_t export_seed = 0;
  export_cmd->add_option("--teacher-file", teacher_file, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--out", export_dir, "output directory");
  export_cmd->add_option("--seed", export_seed, "noise seed for random-input generators");

  auto* verify_cmd = app.add_subcommand("verify", "run the hypergradient oracle suite");

  auto* sweep_cmd = app.add_subcommand("sweep", "evaluate a grid over one config field");
  sopt.attach(sweep_cmd);
  seval.attach(sweep_cmd, false);
  std::string param;
  std::vector<std::string> values;
  sweep_cmd->add_option("--param", param, "config key to vary")->required();
  sweep_cmd->add_option("--values", values, "comma-separated values")->required()->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (*distill_cmd)
      return with_precision(dopt.precision, [&](auto t) { return run_distill<decltype(t)>(dopt, out_dir); });
    if (*eval_cmd) return with_precision(eopt.precision, [&](auto t) { return run_eval<decltype(t)>(eopt, eeval); });
    if (*gen_cmd)
      return with_precision(gopt.precision, [&](auto t) { return run_generalize<decltype(t)>(gopt, geval, archs); });
    if (*aug_cmd)
      return with_precision(aopt.precision,
                            [&](auto t) { return run_augstudy<decltype(t)>(aopt, aeval, methods, modes); });
    if (*export_cmd) return run_export(teacher_file, export_dir, export_seed);
    if (*verify_cmd) return run_verify();
    if (*sweep_cmd) {
      const auto keys = config_keys();
      if (std::find(keys.begin(), keys.end(), param) == keys.end())
        throw std::invalid_argument("sweep: unknown config key '" + param + "'");
      return with_precision(sopt.precision, [&](auto t) { return run_sweep<decltype(t)>(sopt, seval, param, values); });
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
