#include "oracles.hpp"

#include <distill/models.hpp>

#include <gtest/gtest.h>

using namespace distill;

namespace {

template <class T>
Batch<T> random_batch(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint8_t>(rng() % kClasses);
  return {Var<T>::leaf(oracle::random_tensor<T>({n, 1, kImageSide, kImageSide}, rng)),
          Var<T>(one_hot<T>(labels))};
}

// Directional derivative check: <grad, d> against a central difference of
// the loss along d, for weights and images together.
void check_architecture(Arch arch, std::size_t width) {
  std::mt19937_64 rng(17 + static_cast<int>(arch));
  const auto net = Network::make(arch, width);
  auto student = init_student<double>(arch, 3, width);
  const auto batch = random_batch<double>(4, rng);

  auto loss_at = [&](const std::vector<Tensor<double>>& w, const Tensor<double>& x) {
    NoGrad off;
    std::vector<Var<double>> vars;
    for (const auto& t : w) vars.emplace_back(t);
    return classification_loss(net, vars, Batch<double>{Var<double>(x), batch.targets}).item();
  };

  auto wrt = student.weights;
  wrt.push_back(batch.images);
  const auto g = grad(classification_loss(net, student.weights, batch), wrt);

  for (int trial = 0; trial < 4; ++trial) {
    std::vector<Tensor<double>> dirs;
    double analytic = 0;
    double dir_sq = 0;
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      dirs.push_back(oracle::random_tensor<double>(wrt[i].shape(), rng));
      dir_sq += oracle::dot(dirs.back(), dirs.back());
    }
    // Unit-length direction keeps the probe away from relu kinks.
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      for (auto& v : dirs[i].values()) v /= std::sqrt(dir_sq);
      analytic += oracle::dot(g[i].value(), dirs[i]);
    }
    const double h = 1e-6;
    auto shifted = [&](double s) {
      std::vector<Tensor<double>> w;
      for (std::size_t i = 0; i + 1 < wrt.size(); ++i) {
        Tensor<double> t = wrt[i].value().clone();
        for (std::size_t j = 0; j < t.numel(); ++j) t[j] += s * dirs[i][j];
        w.push_back(std::move(t));
      }
      Tensor<double> x = batch.images.value().clone();
      for (std::size_t j = 0; j < x.numel(); ++j) x[j] += s * dirs.back()[j];
      return loss_at(w, x);
    };
    const double numeric = (shifted(h) - shifted(-h)) / (2 * h);
    EXPECT_NEAR(analytic, numeric, 1e-6 * std::max(1.0, std::abs(numeric))) << to_string(arch) << " trial " << trial;
  }
}

}  // namespace

TEST(Network, GradientsMatchFiniteDifferences) {
  check_architecture(Arch::convnet, 4);
  check_architecture(Arch::lenet, 0);
  check_architecture(Arch::alexnet, 0);
  check_architecture(Arch::vgg11, 0);
  check_architecture(Arch::mlp, 0);
}

TEST(Network, LogitShapes) {
  std::mt19937_64 rng(1);
  for (Arch a : {Arch::convnet, Arch::lenet, Arch::alexnet, Arch::vgg11, Arch::mlp}) {
    const auto net = Network::make(a, 8);
    const auto s = init_student<float>(a, 1, 8);
    const auto b = random_batch<float>(3, rng);
    EXPECT_EQ(net.forward(s.weights, b.images).shape(), (Shape{3, 10})) << to_string(a);
  }
}

TEST(Network, UnknownArchitectureListsTags) {
  try {
    parse_arch("resnet");
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    for (const char* tag : {"convnet", "lenet", "alexnet", "vgg11", "mlp"})
      EXPECT_NE(msg.find(tag), std::string::npos) << msg;
  }
}

TEST(Network, WrongWeightCountIsRejected) {
  const auto net = Network::make(Arch::mlp);
  auto s = init_student<float>(Arch::mlp, 1);
  s.weights.pop_back();
  std::mt19937_64 rng(1);
  EXPECT_THROW(net.forward(s.weights, random_batch<float>(1, rng).images), ShapeError);
}

TEST(Network, InitStatisticsOverSeeds) {
  const auto net = Network::make(Arch::convnet, 16);
  const auto& specs = net.params();
  std::vector<double> sum(specs.size()), sq(specs.size());
  std::vector<std::size_t> count(specs.size());
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = init_student<double>(Arch::convnet, seed, 16);
    for (std::size_t i = 0; i < specs.size(); ++i) {
      for (double v : s.weights[i].value().values()) {
        sum[i] += v;
        sq[i] += v * v;
      }
      count[i] += s.weights[i].numel();
    }
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const double n = static_cast<double>(count[i]);
    const double mean = sum[i] / n, second = sq[i] / n;
    switch (specs[i].role) {
      case ParamRole::conv_weight:
      case ParamRole::dense_weight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(specs[i].fan_in));
        const double var = bound * bound / 3.0;
        EXPECT_NEAR(mean, 0.0, 3 * std::sqrt(var / n)) << i;
        EXPECT_NEAR(second / var, 1.0, 0.05) << i;
        break;
      }
      case ParamRole::bias:
      case ParamRole::norm_shift: EXPECT_EQ(second, 0.0) << i; break;
      case ParamRole::norm_scale: EXPECT_EQ(mean, 1.0) << i; break;
    }
  }
}

TEST(Network, InitIsSeedDeterministic) {
  const auto a = init_student<float>(Arch::lenet, 42), b = init_student<float>(Arch::lenet, 42),
             c = init_student<float>(Arch::lenet, 43);
  bool differs = false;
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    for (std::size_t j = 0; j < a.weights[i].numel(); ++j) {
      EXPECT_EQ(a.weights[i].value()[j], b.weights[i].value()[j]);
      differs |= a.weights[i].value()[j] != c.weights[i].value()[j];
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Loss, LabelOutOfRange) { EXPECT_THROW(one_hot<float>({3, 10}), std::out_of_range); }

TEST(Loss, TargetRowsMustBeDistributions) {
  const auto net = Network::make(Arch::mlp);
  const auto s = init_student<double>(Arch::mlp, 1);
  std::mt19937_64 rng(2);
  auto b = random_batch<double>(2, rng);
  Tensor<double> t({2, 10}, 0.2);
  b.targets = Var<double>(t);
  EXPECT_THROW(classification_loss(net, s.weights, b), std::out_of_range);
}

TEST(Loss, SoftTargetsAreMixtureOfHardLosses) {
  const auto net = Network::make(Arch::mlp);
  const auto s = init_student<double>(Arch::mlp, 5);
  std::mt19937_64 rng(3);
  auto b = random_batch<double>(1, rng);
  auto loss_for = [&](Tensor<double> t) {
    return classification_loss(net, s.weights, Batch<double>{b.images, Var<double>(std::move(t))}).item();
  };
  Tensor<double> soft({1, 10});
  soft[2] = 0.25;
  soft[7] = 0.75;
  EXPECT_NEAR(loss_for(soft), 0.25 * loss_for(one_hot<double>({2})) + 0.75 * loss_for(one_hot<double>({7})), 1e-12);
}

TEST(Optimizer, MomentumRecurrence) {
  // Constant gradient g, lr 1, momentum 0.5: displacements g then 1.5 g.
  StudentState<double> s;
  s.weights = {Var<double>::leaf(Tensor<double>({2}, 0.0))};
  s.momentum = {Var<double>(Tensor<double>({2}))};
  const std::vector<Var<double>> g{Var<double>(Tensor<double>(Shape{2}, {0.3, -2.0}))};
  OptimizerConfig cfg{OptimizerConfig::sgd_momentum, 1.0, 0.5};
  const auto s1 = sgd_momentum_step(s, g, cfg);
  const auto s2 = sgd_momentum_step(s1, g, cfg);
  EXPECT_DOUBLE_EQ(s1.weights[0].value()[0], -0.3);
  EXPECT_DOUBLE_EQ(s2.weights[0].value()[0], -0.3 * 2.5);
  EXPECT_DOUBLE_EQ(s2.weights[0].value()[1], 2.0 * 2.5);
  EXPECT_DOUBLE_EQ(s.weights[0].value()[0], 0.0);  // value semantics
}

TEST(Optimizer, ZeroLearningRateLeavesWeights) {
  auto s = init_student<float>(Arch::mlp, 1);
  std::vector<Var<float>> g;
  for (const auto& w : s.weights) g.emplace_back(Tensor<float>(w.shape(), 1.0f));
  const auto next = sgd_momentum_step(s, g, OptimizerConfig{OptimizerConfig::sgd_momentum, 0.0, 0.5});
  for (std::size_t i = 0; i < s.weights.size(); ++i)
    for (std::size_t j = 0; j < s.weights[i].numel(); ++j)
      EXPECT_EQ(next.weights[i].value()[j], s.weights[i].value()[j]);
  EXPECT_THROW((OptimizerConfig{OptimizerConfig::sgd, 0.0, 0.0}.validate()), std::invalid_argument);
}

TEST(Optimizer, DifferentiableStepGivesOneStepHypergradient) {
  // inner loss 0.5 (theta - lambda)^2, outer loss 0.5 theta_1^2.
  // theta_1 = theta_0 - lr (theta_0 - lambda), so d outer / d lambda = lr theta_1.
  const double theta0 = 1.7, lambda0 = -0.4, lr = 0.3;
  StudentState<double> s;
  s.weights = {Var<double>::leaf(Tensor<double>::scalar(theta0))};
  s.momentum = {Var<double>(Tensor<double>::scalar(0.0))};
  const auto lambda = Var<double>::leaf(Tensor<double>::scalar(lambda0));
  const auto d = sub(s.weights[0], lambda);
  const auto inner = scale(mul(d, d), 0.5);
  const auto g = grad(inner, s.weights, true);
  const auto s1 = sgd_momentum_step(s, g, OptimizerConfig{OptimizerConfig::sgd, lr, 0.0}, true);
  const auto outer = scale(mul(s1.weights[0], s1.weights[0]), 0.5);
  const double theta1 = theta0 - lr * (theta0 - lambda0);
  EXPECT_NEAR(grad(outer, {lambda})[0].item(), lr * theta1, 1e-12);
}

TEST(Generator, ParameterCounts) {
  const auto g64 = init_generator<float>(64, GeneratorMode::random_input, SeedStream(1));
  EXPECT_EQ(g64.weight_count(), 1639649u);
  const auto g16 = init_generator<float>(16, GeneratorMode::random_input, SeedStream(1));
  EXPECT_EQ(g16.weight_count(), 107993u);
  EXPECT_THROW(init_generator<float>(3, GeneratorMode::random_input, SeedStream(1)), std::invalid_argument);
}

TEST(Generator, OutputShapeAndRange) {
  auto gen = init_generator<float>(8, GeneratorMode::random_input, SeedStream(4));
  std::mt19937_64 rng(5);
  const auto z = Var<float>(oracle::random_tensor<float>({4, kGeneratorNoise}, rng, -3, 3));
  const auto y = Var<float>(one_hot<float>({0, 3, 9, 3}));
  const auto x = generator_forward(gen, z, y);
  ASSERT_EQ(x.shape(), (Shape{4, 1, 28, 28}));
  for (float v : x.value().values()) {
    EXPECT_GE(v, Normalization::lo() - 1e-5);
    EXPECT_LE(v, Normalization::hi() + 1e-5);
  }
}

TEST(Generator, InputWidthMismatchNamesTotalWidth) {
  auto gen = init_generator<float>(8, GeneratorMode::random_input, SeedStream(4));
  try {
    generator_forward_raw(gen, Var<float>(Tensor<float>({2, 60})));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("64"), std::string::npos);
  }
  EXPECT_THROW(generator_forward(gen, Var<float>(Tensor<float>({1, 54})), Var<float>(Tensor<float>({1, 10}))),
               std::invalid_argument);
}

TEST(Generator, GradientsMatchFiniteDifferences) {
  auto gen = init_generator<double>(4, GeneratorMode::random_input, SeedStream(9));
  std::mt19937_64 rng(6);
  const auto input = Var<double>::leaf(oracle::random_tensor<double>({2, kGeneratorInput}, rng));
  const auto probe = oracle::random_tensor<double>({2, 1, 28, 28}, rng);
  auto value = [&](const GeneratorParams<double>& g, const Var<double>& in) {
    return sum(mul(generator_forward_raw(g, in), Var<double>(probe)));
  };
  auto wrt = gen.weights;
  wrt.push_back(input);
  const auto gr = grad(value(gen, input), wrt);
  for (int trial = 0; trial < 3; ++trial) {
    double analytic = 0;
    std::vector<Tensor<double>> dirs;
    double dir_sq = 0;
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      dirs.push_back(oracle::random_tensor<double>(wrt[i].shape(), rng));
      dir_sq += oracle::dot(dirs.back(), dirs.back());
    }
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      for (auto& v : dirs[i].values()) v /= std::sqrt(dir_sq);
      analytic += oracle::dot(gr[i].value(), dirs[i]);
    }
    auto at = [&](double s) {
      NoGrad off;
      GeneratorParams<double> g = gen;
      for (std::size_t i = 0; i < g.weights.size(); ++i) {
        Tensor<double> t = gen.weights[i].value().clone();
        for (std::size_t j = 0; j < t.numel(); ++j) t[j] += s * dirs[i][j];
        g.weights[i] = Var<double>(std::move(t));
      }
      Tensor<double> in = input.value().clone();
      for (std::size_t j = 0; j < in.numel(); ++j) in[j] += s * dirs.back()[j];
      return value(g, Var<double>(in)).item();
    };
    const double h = 1e-6, numeric = (at(h) - at(-h)) / (2 * h);
    EXPECT_NEAR(analytic, numeric, 1e-5 * std::max(1.0, std::abs(numeric)));
  }
}

TEST(Network, ZeroImageGivesFiniteBoundedLoss) {
  const auto net = Network::make(Arch::convnet, 16);
  const auto s = init_student<float>(Arch::convnet, 1, 16);
  const Batch<float> b{Var<float>(Tensor<float>({2, 1, 28, 28})), Var<float>(one_hot<float>({0, 5}))};
  const float loss = classification_loss(net, s.weights, b).item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_LE(loss, 10.0f);
}

TEST(Loss, ConfidentCorrectLogitsGiveNearZeroLoss) {
  Tensor<double> logits = one_hot<double>({4, 1});
  for (auto& v : logits.values()) v *= 10;
  EXPECT_LT(softmax_cross_entropy(Var<double>(logits), Var<double>(one_hot<double>({4, 1}))).item(), 1e-3);
}

TEST(Generator, OutputBoundedOverManyInputs) {
  auto gen = init_generator<float>(4, GeneratorMode::random_input, SeedStream(8));
  std::mt19937_64 rng(10);
  const auto in = Var<float>(oracle::random_tensor<float>({10000, kGeneratorInput}, rng, -10, 10));
  NoGrad off;
  const auto x = generator_forward_raw(gen, in);
  for (float v : x.value().values()) {
    ASSERT_GE(v, Normalization::lo() - 1e-5);
    ASSERT_LE(v, Normalization::hi() + 1e-5);
  }
}

TEST(Generator, ExtentsForTabulatedWidths) {
  std::mt19937_64 rng(12);
  for (std::size_t k : {16, 32, 64, 128}) {
    const auto gen = init_generator<float>(k, GeneratorMode::random_input, SeedStream(k));
    NoGrad off;
    EXPECT_EQ(generator_forward_raw(gen, Var<float>(oracle::random_tensor<float>({2, 64}, rng))).shape(),
              (Shape{2, 1, 28, 28}));
  }
}
