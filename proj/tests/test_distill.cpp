#include "oracles.hpp"

#include <distill/distill.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <sstream>
#include <thread>

using namespace distill;
namespace fs = std::filesystem;

namespace {

const fs::path kMnist = DISTILL_MNIST_DIR;

template <class T>
const RealDataset<T>& small_train() {
  static const auto ds = [] {
    const auto full =
        load_mnist_idx<T>(kMnist / "train-images-idx3-ubyte", kMnist / "train-labels-idx1-ubyte", Split::train);
    std::vector<std::size_t> idx(2000);
    std::iota(idx.begin(), idx.end(), 0);
    return subset(full, idx, Split::train);
  }();
  return ds;
}

template <class T>
Var<T> vec(std::initializer_list<T> v, Shape s) {
  return Var<T>(Tensor<T>(std::move(s), v));
}

DistillConfig tiny(Method m, TeacherKind t = TeacherKind::dd) {
  DistillConfig c;
  c.method = m;
  c.teacher = t;
  c.K = 2;
  c.N = 2;
  c.zeta_theta = 2;
  c.ipc = 1;
  c.k = 8;
  c.arch = Arch::convnet;
  c.width = 4;
  c.real_batch = 32;
  c.alpha = 0.01;
  return c;
}

template <class T>
std::vector<Tensor<T>> values(const Teacher<T>& t) {
  std::vector<Tensor<T>> out;
  for (const auto& p : t.params()) out.push_back(p.value().clone());
  return out;
}

template <class T>
bool bitwise_equal(const std::vector<Tensor<T>>& a, const std::vector<Tensor<T>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) return false;
    for (std::size_t j = 0; j < a[i].numel(); ++j)
      if (a[i][j] != b[i][j]) return false;
  }
  return true;
}

}  // namespace

// --- distance --------------------------------------------------------------

TEST(GmDistance, IdenticalGradientsGiveZero) {
  std::mt19937_64 gen(1);
  std::vector<Var<double>> a{Var<double>(oracle::random_away_from_zero<double>({3, 2, 3, 3}, gen)),
                             Var<double>(oracle::random_away_from_zero<double>({4, 5}, gen))};
  EXPECT_NEAR(gm_distance(a, a, DistanceReduce::sum).item(), 0.0, 1e-5);
}

TEST(GmDistance, OrthogonalSlicesCountOnePerSlice) {
  const auto a = vec<double>({1, 0, 0, 1, 1, 0, 0, 1}, {4, 2});
  const auto b = vec<double>({0, 1, 1, 0, 0, 2, 3, 0}, {4, 2});
  EXPECT_NEAR(gm_distance<double>({a}, {b}, DistanceReduce::sum).item(), 4.0, 1e-12);
  EXPECT_NEAR(gm_distance<double>({a}, {b}, DistanceReduce::mean).item(), 4.0, 1e-12);
}

TEST(GmDistance, HandCosine) {
  const auto a = vec<double>({1, 0}, {1, 2});
  const auto b = vec<double>({1, 1}, {1, 2});
  EXPECT_NEAR(gm_distance<double>({a}, {b}, DistanceReduce::sum).item(), 1 - 1 / std::sqrt(2.0), 1e-6);
}

TEST(GmDistance, VectorsAreSkippedAndMeanDividesByLayers) {
  const auto a = vec<double>({1, 0}, {1, 2});
  const auto b = vec<double>({0, 1}, {1, 2});
  const auto bias_a = vec<double>({1, 2}, {2}), bias_b = vec<double>({-1, 5}, {2});
  EXPECT_NEAR(gm_distance<double>({a, bias_a}, {b, bias_b}, DistanceReduce::sum).item(), 1.0, 1e-12);
  EXPECT_NEAR(gm_distance<double>({a, a}, {b, a}, DistanceReduce::mean).item(), 0.5, 1e-6);
}

TEST(GmDistance, ZeroSlicesAreFinite) {
  const auto z = vec<double>({0, 0, 1, 1}, {2, 2});
  const auto b = vec<double>({1, 2, 1, 1}, {2, 2});
  const auto a = Var<double>::leaf(z.value());
  const auto d = gm_distance<double>({a}, {b}, DistanceReduce::sum);
  EXPECT_NEAR(d.item(), 1.0, 1e-5);
  const auto g = grad(d, {a});
  for (double v : g[0].value().values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(GmDistance, BoundedByTwicePerSlice) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Var<double>> a, b;
    std::size_t slices = 0;
    for (std::size_t l = 0; l < 3; ++l) {
      const std::size_t out = 1 + gen() % 5;
      slices += out;
      a.emplace_back(oracle::random_tensor<double>({out, 3}, gen));
      b.emplace_back(oracle::random_tensor<double>({out, 3}, gen));
    }
    const double d = gm_distance(a, b, DistanceReduce::sum).item();
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0 * slices);
  }
}

TEST(GmDistance, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(5);
  const auto a0 = oracle::random_tensor<double>({3, 4}, gen), b0 = oracle::random_tensor<double>({3, 4}, gen);
  const auto c0 = oracle::random_tensor<double>({2, 1, 2, 2}, gen), e0 = oracle::random_tensor<double>({2, 1, 2, 2}, gen);
  const auto a = Var<double>::leaf(a0), c = Var<double>::leaf(c0);
  const auto g = grad(gm_distance<double>({a, c}, {Var<double>(b0), Var<double>(e0)}, DistanceReduce::mean), {a, c});
  const auto fd = oracle::fd_gradient<double>(
      [&](const std::vector<Tensor<double>>& x) {
        return gm_distance<double>({Var<double>(x[0]), Var<double>(x[1])}, {Var<double>(b0), Var<double>(e0)},
                                   DistanceReduce::mean)
            .item();
      },
      {a0, c0}, 1e-6);
  EXPECT_LT(oracle::rel_error(g[0].value(), fd[0]), 1e-6);
  EXPECT_LT(oracle::rel_error(g[1].value(), fd[1]), 1e-6);
}

// --- config ----------------------------------------------------------------

TEST(DistillConfig, DivisibilityOfN) {
  auto c = tiny(Method::gm);
  c.ipc = 10;
  c.ic = 5;
  c.N = 10;
  EXPECT_NO_THROW(c.validate());
  c.N = 4;
  try {
    c.validate();
    FAIL() << "expected a divisibility failure";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("divisor of N"), std::string::npos);
  }
}

TEST(DistillConfig, DefaultReduceFollowsTeacher) {
  EXPECT_EQ(tiny(Method::gm).distance_reduce(), DistanceReduce::sum);
  EXPECT_EQ(tiny(Method::gm, TeacherKind::gtn_lrn).distance_reduce(), DistanceReduce::mean);
  EXPECT_THROW(parse_method("bptt"), std::invalid_argument);
}

// --- budget runner -------------------------------------------------------------

TEST(BudgetRunner, StepCapAndTiming) {
  std::size_t calls = 0;
  const auto r = budget_runner(5, std::numeric_limits<double>::infinity(), [&](std::size_t) {
    ++calls;
    return std::pair{1.0, 0.0};
  });
  EXPECT_EQ(r.steps_completed, 5u);
  EXPECT_EQ(calls, 5u);
  EXPECT_GE(r.wall_time, std::accumulate(r.step_times.begin(), r.step_times.end(), 0.0));
}

TEST(BudgetRunner, TinyBudgetRunsAtMostOneStep) {
  const auto r = budget_runner(100, 0.001, [](std::size_t) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    return std::pair{0.0, 0.0};
  });
  EXPECT_LE(r.steps_completed, 1u);
  EXPECT_EQ(r.step_times.size(), r.steps_completed);
  EXPECT_EQ(r.teacher_loss_curve.size(), r.steps_completed);
}

TEST(BudgetRunner, DivergenceEndsRunWithFlag) {
  const auto r = budget_runner(10, 1e9, [](std::size_t k) -> std::pair<double, double> {
    if (k == 3) throw DistillDivergence("boom");
    return {0.0, 0.0};
  });
  EXPECT_EQ(r.steps_completed, 3u);
  EXPECT_TRUE(r.divergence_flag);
  EXPECT_EQ(r.divergence_message, "boom");
}

TEST(BudgetRunner, StructuredLogLines) {
  std::ostringstream os;
  budget_runner(2, 1e9, [](std::size_t) { return std::pair{0.5, 2.0}; }, {}, &os);
  std::istringstream in(os.str());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line.rfind("step=" + std::to_string(n) + " loss=0.5 grad_norm=2 elapsed=", 0), 0u) << line;
    EXPECT_NE(line.find(" peak_bytes="), std::string::npos);
    ++n;
  }
  EXPECT_EQ(n, 2);
}

// --- loops -------------------------------------------------------------------

TEST(Distill, ZeroEpochsLeaveTeacherUnchanged) {
  for (auto m : {Method::gm, Method::unroll, Method::ift}) {
    auto c = tiny(m);
    c.K = 0;
    const auto t0 = init_teacher<double>(c.teacher, c.ipc, c.ic, c.k, SeedStream(1));
    const auto before = values(t0);
    auto r = m == Method::gm       ? distill_gm(c, small_train<double>(), t0, 3)
             : m == Method::unroll ? distill_unroll(c, small_train<double>(), t0, 3)
                                   : distill_ift(c, small_train<double>(), t0, 3);
    EXPECT_EQ(r.report.steps_completed, 0u);
    EXPECT_TRUE(bitwise_equal(before, values(r.teacher)));
  }
}

TEST(Distill, MethodMismatchIsRejected) {
  const auto t0 = init_teacher<double>(TeacherKind::dd, 1, 1, 8, SeedStream(1));
  EXPECT_THROW(distill_gm(tiny(Method::ift), small_train<double>(), t0, 1), std::invalid_argument);
}

TEST(Distill, GmUpdatesTeacherOncePerInnerStep) {
  auto c = tiny(Method::gm);
  c.K = 3;
  c.N = 4;
  GmStepper<double> s(c, small_train<double>(), init_teacher<double>(c.teacher, c.ipc, c.ic, c.k, SeedStream(2)), 7);
  for (std::size_t k = 0; k < c.K; ++k) s(k);
  EXPECT_EQ(s.teacher_updates(), c.K * c.N);
}

TEST(Distill, PerClassLossIsSumOfClassLosses) {
  auto c = tiny(Method::gm);
  c.ipc = 2;
  const auto teacher = init_teacher<double>(TeacherKind::dd, 2, 1, 8, SeedStream(3));
  const auto net = Network::make(c.arch, c.width);
  const auto student = init_student<double>(c.arch, 5, c.width);
  SeedStream sample(8), aug(9), noise(10);
  const auto real = detail::real_batch(small_train<double>(), c, sample, aug);
  const auto [total, g] = gm_matching_grad(net, student.weights, teacher, 0, real, true, DistanceReduce::sum, noise);
  (void)g;
  const auto labels = detail::argmax_labels(real.targets.value());
  double expect = 0;
  for (std::size_t cls = 0; cls < kClasses; ++cls) {
    std::vector<std::size_t> rr;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) rr.push_back(i);
    if (rr.empty()) continue;
    const Batch<double> rb{Var<double>(detail::take_rows(real.images.value(), rr)),
                           Var<double>(detail::take_rows(real.targets.value(), rr))};
    const std::vector<std::size_t> sr{cls * 2, cls * 2 + 1};
    const Batch<double> sb{Var<double>(detail::take_rows(teacher.pixels.value(), sr)),
                           Var<double>(one_hot<double>({std::uint8_t(cls), std::uint8_t(cls)}))};
    const auto gt = grad(classification_loss(net, student.weights, rb), student.weights);
    const auto gs = grad(classification_loss(net, student.weights, sb), student.weights);
    expect += gm_distance(gs, gt, DistanceReduce::sum).item();
  }
  EXPECT_NEAR(total, expect, 1e-9 * std::max(1.0, expect));
}

TEST(Distill, MatchingGradientMatchesFiniteDifferences) {
  auto c = tiny(Method::gm);
  const auto net = Network::make(Arch::mlp);
  const auto student = init_student<double>(Arch::mlp, 5);
  auto teacher = init_teacher<double>(TeacherKind::dd, 1, 1, 8, SeedStream(3));
  SeedStream sample(8), aug(9);
  const auto real = detail::real_batch(small_train<double>(), c, sample, aug);
  auto loss_at = [&](const Tensor<double>& px) {
    auto t = teacher;
    t.pixels = Var<double>::leaf(px);
    SeedStream noise(1);
    return gm_matching_grad(net, student.weights, t, 0, real, true, DistanceReduce::sum, noise).first;
  };
  SeedStream noise(1);
  const auto g = gm_matching_grad(net, student.weights, teacher, 0, real, true, DistanceReduce::sum, noise).second;
  // Directional derivative along a random unit direction.
  std::mt19937_64 gen(6);
  auto dir = oracle::random_tensor<double>(teacher.pixels.shape(), gen);
  double nrm = 0, analytic = 0;
  for (double v : dir.values()) nrm += v * v;
  for (std::size_t i = 0; i < dir.numel(); ++i) {
    dir[i] /= std::sqrt(nrm);
    analytic += dir[i] * g[0].value()[i];
  }
  const double h = 1e-5;
  auto shifted = [&](double s) {
    auto px = teacher.pixels.value().clone();
    for (std::size_t i = 0; i < px.numel(); ++i) px[i] += s * dir[i];
    return loss_at(px);
  };
  const double fd = (shifted(h) - shifted(-h)) / (2 * h);
  EXPECT_NEAR(analytic, fd, 1e-5 * std::max(1.0, std::abs(fd)));
}

TEST(Distill, EachLoopChangesTeacherAndIsReproducible) {
  for (auto m : {Method::gm, Method::unroll, Method::ift}) {
    for (auto kind : {TeacherKind::dd, TeacherKind::gtn_lrn, TeacherKind::gtn_rnd}) {
      auto c = tiny(m, kind);
      c.K = 1;
      const auto t0 = init_teacher<double>(kind, c.ipc, c.ic, c.k, SeedStream(11));
      auto run = [&] {
        return m == Method::gm       ? distill_gm(c, small_train<double>(), t0, 5)
               : m == Method::unroll ? distill_unroll(c, small_train<double>(), t0, 5)
                                     : distill_ift(c, small_train<double>(), t0, 5);
      };
      const auto a = run(), b = run();
      ASSERT_FALSE(a.report.divergence_flag) << a.report.divergence_message;
      EXPECT_EQ(a.report.steps_completed, 1u);
      EXPECT_FALSE(bitwise_equal(values(t0), values(a.teacher))) << to_string(m) << ' ' << to_string(kind);
      EXPECT_TRUE(bitwise_equal(values(a.teacher), values(b.teacher))) << to_string(m) << ' ' << to_string(kind);
    }
  }
}

TEST(Distill, RealDataIsNotMutated) {
  const auto& ds = small_train<double>();
  const auto before = ds.images.clone();
  auto c = tiny(Method::gm);
  c.aug.mode = AugmentConfig::train_aug;
  distill<double>(c, ds);
  c.method = Method::ift;
  distill<double>(c, ds);
  for (std::size_t i = 0; i < before.numel(); ++i) ASSERT_EQ(before[i], ds.images[i]);
}

TEST(Distill, IftDivergenceRollsBackTeacher) {
  auto c = tiny(Method::ift);
  c.alpha = 1e6;
  c.N = 10;
  c.K = 3;
  const auto t0 = init_teacher<double>(c.teacher, c.ipc, c.ic, c.k, SeedStream(2));
  const auto r = distill_ift(c, small_train<double>(), t0, 4);
  EXPECT_TRUE(r.report.divergence_flag);
  EXPECT_NE(r.report.divergence_message.find("alpha"), std::string::npos) << r.report.divergence_message;
  EXPECT_EQ(r.report.steps_completed, 0u);
  EXPECT_TRUE(bitwise_equal(values(t0), values(r.teacher)));
}

TEST(Distill, RestartsUseDerivedSeeds) {
  auto c = tiny(Method::gm);
  c.K = 1;
  c.restarts = 2;
  const auto runs = distill<double>(c, small_train<double>());
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_FALSE(bitwise_equal(values(runs[0].teacher), values(runs[1].teacher)));
  EXPECT_NE(restart_seed(0, 0), restart_seed(0, 1));
}

TEST(Distill, ObserverSeesEveryStep) {
  auto c = tiny(Method::gm);
  c.K = 3;
  std::vector<std::size_t> seen;
  DistillHooks<float> hooks;
  hooks.on_step = [&](const StepInfo& s, const Teacher<float>& t) {
    seen.push_back(s.step);
    EXPECT_EQ(t.params().size(), 1u);
  };
  const auto t0 = init_teacher<float>(c.teacher, c.ipc, c.ic, c.k, SeedStream(2));
  distill_gm(c, small_train<float>(), t0, 1, hooks);
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2}));
}

// --- memory ordering ---------------------------------------------------------

namespace {

std::int64_t peak_for(Method m, std::size_t n) {
  auto c = tiny(m);
  c.K = 1;
  c.N = n;
  c.width = 8;
  const auto t0 = init_teacher<float>(c.teacher, c.ipc, c.ic, c.k, SeedStream(1));
  const auto r = m == Method::gm ? distill_gm(c, small_train<float>(), t0, 2) : distill_unroll(c, small_train<float>(), t0, 2);
  return r.report.peak_tracked_bytes;
}

}  // namespace

TEST(Distill, UnrollMemoryGrowsWhileGmStaysFlat) {
  const std::vector<double> ns{5, 10, 20, 40};
  std::vector<double> unroll, gm;
  for (double n : ns) {
    unroll.push_back(double(peak_for(Method::unroll, std::size_t(n))));
    gm.push_back(double(peak_for(Method::gm, std::size_t(n))));
  }
  EXPECT_GT(oracle::linear_fit_r2(ns, unroll), 0.95);
  EXPECT_GT(unroll.back(), 2 * unroll.front());
  const auto [lo, hi] = std::minmax_element(gm.begin(), gm.end());
  EXPECT_LE(*hi, 1.10 * *lo);
  EXPECT_GT(unroll[1], gm[1]);
}
