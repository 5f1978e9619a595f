#pragma once

#include <distill/constants.hpp>
#include <distill/grad.hpp>
#include <distill/rng.hpp>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace distill {

// ---------------------------------------------------------------------------
// Architectures

enum class Arch { convnet, lenet, alexnet, vgg11, mlp };

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::convnet: return "convnet";
    case Arch::lenet: return "lenet";
    case Arch::alexnet: return "alexnet";
    case Arch::vgg11: return "vgg11";
    case Arch::mlp: return "mlp";
  }
  return "?";
}

inline Arch parse_arch(std::string_view tag) {
  for (Arch a : {Arch::convnet, Arch::lenet, Arch::alexnet, Arch::vgg11, Arch::mlp})
    if (to_string(a) == tag) return a;
  throw std::invalid_argument("unknown architecture '" + std::string(tag) +
                              "'; supported: convnet, lenet, alexnet, vgg11, mlp");
}

enum class ParamRole { conv_weight, dense_weight, bias, norm_scale, norm_shift };

struct ParamSpec {
  Shape shape;
  ParamRole role;
  std::size_t fan_in;

  /// Weight matrices/filters, as opposed to per-channel vectors.
  bool is_weight() const { return role == ParamRole::conv_weight || role == ParamRole::dense_weight; }
};

struct Layer {
  enum Kind { conv, norm, relu, pool, flatten, dense } kind;
  std::size_t out = 0;     // channels or features
  std::size_t kernel = 0;  // conv only
  std::size_t pad = 0;     // conv only
  std::size_t param = 0;   // index of the first parameter owned by the layer
};

/// A feed-forward classifier for 1x28x28 inputs described as a layer table.
/// The network holds no weights; forward() takes them explicitly so the same
/// description serves every student copy and every unrolled step.
class Network {
 public:
  static Network make(Arch arch, std::size_t width = 128) {
    Network n(arch, width);
    switch (arch) {
      case Arch::convnet:
        for (int block = 0; block < 3; ++block) {
          n.conv(width, 3, 1);
          n.norm();
          n.relu();
          n.pool();
        }
        n.flatten();
        n.dense(kClasses);
        break;
      case Arch::lenet:
        n.conv(6, 5, 2);
        n.relu();
        n.pool();
        n.conv(16, 5, 0);
        n.relu();
        n.pool();
        n.flatten();
        n.dense(120);
        n.relu();
        n.dense(84);
        n.relu();
        n.dense(kClasses);
        break;
      case Arch::alexnet:
        n.conv(32, 5, 2);
        n.relu();
        n.pool();
        n.conv(48, 5, 2);
        n.relu();
        n.pool();
        n.conv(64, 3, 1);
        n.relu();
        n.conv(48, 3, 1);
        n.relu();
        n.conv(48, 3, 1);
        n.relu();
        n.pool();
        n.flatten();
        n.dense(kClasses);
        break;
      case Arch::vgg11:
        for (std::size_t c : {16, 0, 32, 0, 64, 64, 0, 128, 128, 128, 128}) {
          if (c == 0) {
            n.pool();
            continue;
          }
          n.conv(c, 3, 1);
          n.norm();
          n.relu();
        }
        n.flatten();
        n.dense(kClasses);
        break;
      case Arch::mlp:
        n.flatten();
        n.dense(128);
        n.relu();
        n.dense(128);
        n.relu();
        n.dense(kClasses);
        break;
    }
    return n;
  }

  Arch arch() const { return arch_; }
  std::size_t width() const { return width_; }
  const std::vector<ParamSpec>& params() const { return params_; }
  const std::vector<Layer>& layers() const { return layers_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += numel(p.shape);
    return n;
  }

  /// Kaiming-uniform fan-in (bound 1/sqrt(fan_in)) for weights, zero biases,
  /// unit norm scales and zero norm shifts.
  template <class T>
  std::vector<Tensor<T>> init(SeedStream rng) const {
    std::vector<Tensor<T>> out;
    for (const auto& p : params_) {
      Tensor<T> t(p.shape);
      if (p.is_weight()) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : t.values()) v = static_cast<T>(u(rng.engine()));
      } else if (p.role == ParamRole::norm_scale) {
        for (auto& v : t.values()) v = T(1);
      }
      out.push_back(std::move(t));
    }
    return out;
  }

  /// Logits [N, 10] for images [N, 1, 28, 28].
  template <class T>
  Var<T> forward(const std::vector<Var<T>>& weights, const Var<T>& images) const {
    if (weights.size() != params_.size()) {
      throw ShapeError(std::string(to_string(arch_)) + ": expected " + std::to_string(params_.size()) +
                       " parameter tensors, got " + std::to_string(weights.size()));
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i].shape() != params_[i].shape) {
        throw ShapeError(std::string(to_string(arch_)) + ": parameter " + std::to_string(i) + " has shape " +
                         to_string(weights[i].shape()) + ", expected " + to_string(params_[i].shape));
      }
    }
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != kImageSide || s[3] != kImageSide) {
      throw ShapeError(std::string(to_string(arch_)) + ": expected images [N,1,28,28], got " + to_string(s));
    }
    Var<T> x = images;
    for (const auto& layer : layers_) {
      switch (layer.kind) {
        case Layer::conv:
          x = bias_add(conv2d(x, weights[layer.param], layer.pad), weights[layer.param + 1]);
          break;
        case Layer::norm:
          x = instance_norm(x, weights[layer.param], weights[layer.param + 1]);
          break;
        case Layer::relu:
          x = distill::relu(x);
          break;
        case Layer::pool:
          x = avgpool2(x);
          break;
        case Layer::flatten:
          x = reshape(x, Shape{x.shape()[0], x.numel() / x.shape()[0]});
          break;
        case Layer::dense:
          x = linear(x, weights[layer.param], weights[layer.param + 1]);
          break;
      }
    }
    return x;
  }

 private:
  Network(Arch arch, std::size_t width) : arch_(arch), width_(width) {}

  void conv(std::size_t out, std::size_t kernel, std::size_t pad) {
    const std::size_t in = channels_;
    layers_.push_back({Layer::conv, out, kernel, pad, params_.size()});
    params_.push_back({{out, in, kernel, kernel}, ParamRole::conv_weight, in * kernel * kernel});
    params_.push_back({{out}, ParamRole::bias, in * kernel * kernel});
    channels_ = out;
    side_ = side_ + 2 * pad - kernel + 1;
  }
  void norm() {
    layers_.push_back({Layer::norm, channels_, 0, 0, params_.size()});
    params_.push_back({{channels_}, ParamRole::norm_scale, 1});
    params_.push_back({{channels_}, ParamRole::norm_shift, 1});
  }
  void relu() { layers_.push_back({Layer::relu}); }
  void pool() {
    layers_.push_back({Layer::pool});
    side_ /= 2;
  }
  void flatten() {
    layers_.push_back({Layer::flatten});
    features_ = channels_ * side_ * side_;
  }
  void dense(std::size_t out) {
    layers_.push_back({Layer::dense, out, 0, 0, params_.size()});
    params_.push_back({{out, features_}, ParamRole::dense_weight, features_});
    params_.push_back({{out}, ParamRole::bias, features_});
    features_ = out;
  }

  Arch arch_;
  std::size_t width_;
  std::vector<Layer> layers_;
  std::vector<ParamSpec> params_;
  std::size_t channels_ = 1;
  std::size_t side_ = kImageSide;
  std::size_t features_ = 0;
};

// ---------------------------------------------------------------------------
// Student

template <class T>
struct StudentState {
  Arch arch = Arch::convnet;
  std::size_t width = 128;
  std::vector<Var<T>> weights;
  std::vector<Var<T>> momentum;
  std::uint64_t seed = 0;

  Network network() const { return Network::make(arch, width); }
};

template <class T>
StudentState<T> init_student(Arch arch, std::uint64_t seed, std::size_t width = 128) {
  StudentState<T> s;
  s.arch = arch;
  s.width = width;
  s.seed = seed;
  for (auto& t : Network::make(arch, width).init<T>(SeedStream(seed))) {
    s.momentum.emplace_back(Tensor<T>(t.shape()));
    s.weights.push_back(Var<T>::leaf(std::move(t)));
  }
  return s;
}

/// Fresh differentiable leaves holding the same values (for per-step graphs).
template <class T>
std::vector<Var<T>> fresh_leaves(const std::vector<Var<T>>& vars) {
  std::vector<Var<T>> out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(Var<T>::leaf(v.value()));
  return out;
}

// ---------------------------------------------------------------------------
// Batches and loss

template <class T>
struct Batch {
  Var<T> images;   // [N, 1, 28, 28]
  Var<T> targets;  // [N, 10], rows summing to one
};

/// One-hot rows for hard labels.
template <class T>
Tensor<T> one_hot(const std::vector<std::uint8_t>& labels) {
  Tensor<T> t(Shape{labels.size(), kClasses});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= kClasses) {
      throw std::out_of_range("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                              " is outside 0..9");
    }
    t[i * kClasses + labels[i]] = T(1);
  }
  return t;
}

/// Mean cross-entropy of the network on a batch; differentiable with respect
/// to both weights and images.
template <class T>
Var<T> classification_loss(const Network& net, const std::vector<Var<T>>& weights, const Batch<T>& batch) {
  const auto& t = batch.targets.value();
  if (t.rank() != 2 || t.dim(1) != kClasses || t.dim(0) != batch.images.shape()[0]) {
    throw ShapeError("classification_loss: targets " + to_string(t.shape()) + " for images " +
                     to_string(batch.images.shape()));
  }
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    T mass = T(0);
    for (std::size_t j = 0; j < kClasses; ++j) {
      const T v = t[i * kClasses + j];
      if (v < T(0)) throw std::out_of_range("classification_loss: negative target mass in row " + std::to_string(i));
      mass += v;
    }
    if (std::abs(mass - T(1)) > T(1e-4)) {
      throw std::out_of_range("classification_loss: target row " + std::to_string(i) + " sums to " +
                              std::to_string(double(mass)));
    }
  }
  return softmax_cross_entropy(net.forward(weights, batch.images), batch.targets);
}

template <class T>
double accuracy(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T* row = logits.data() + i * kClasses;
    hits += static_cast<std::size_t>(std::max_element(row, row + kClasses) - row) == labels[i];
  }
  return labels.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------
// Student optimizer

struct OptimizerConfig {
  enum Kind { sgd, sgd_momentum } kind = sgd_momentum;
  double lr = 0.01;
  double momentum = 0.5;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("optimizer: learning rate must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("optimizer: momentum must lie in [0, 1)");
  }
};

/// b <- m b + g; theta <- theta - lr b (plain SGD ignores b). With
/// `differentiable`, the new weights and buffers are recorded functions of
/// the old ones and of the gradients.
template <class T>
StudentState<T> sgd_momentum_step(const StudentState<T>& student, const std::vector<Var<T>>& grads,
                                  const OptimizerConfig& cfg, bool differentiable = false) {
  if (grads.size() != student.weights.size()) throw ShapeError("sgd step: gradient list does not match weights");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != student.weights[i].shape()) {
      throw ShapeError("sgd step: gradient " + std::to_string(i) + " has shape " + to_string(grads[i].shape()) +
                       ", weight has " + to_string(student.weights[i].shape()));
    }
  }
  StudentState<T> next = student;
  const T lr = static_cast<T>(cfg.lr);
  const T m = cfg.kind == OptimizerConfig::sgd ? T(0) : static_cast<T>(cfg.momentum);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (differentiable) {
      GradMode on(true);
      const Var<T> buf = cfg.kind == OptimizerConfig::sgd ? grads[i] : add(scale(student.momentum[i], m), grads[i]);
      next.momentum[i] = buf;
      next.weights[i] = sub(student.weights[i], scale(buf, lr));
      continue;
    }
    const auto& w = student.weights[i].value();
    const auto& b = student.momentum[i].value();
    const auto& g = grads[i].value();
    Tensor<T> nb(w.shape()), nw(w.shape());
    for (std::size_t j = 0; j < w.numel(); ++j) {
      nb[j] = m * b[j] + g[j];
      nw[j] = w[j] - lr * nb[j];
    }
    next.momentum[i] = Var<T>(std::move(nb));
    next.weights[i] = Var<T>::leaf(std::move(nw));
  }
  return next;
}

// ---------------------------------------------------------------------------
// Generator

enum class GeneratorMode { random_input, learned_input };

/// Two linear layers and two 3x3 convolutions. Layer 1 maps the 64-wide
/// input to k features, layer 2 to floor(k/2) planes of 28x28, conv 1 to
/// floor(k/4) planes and conv 2 to one plane. Hidden activations are
/// leaky-relu(0.1); the output is tanh rescaled to the standardized pixel
/// range of a black-to-white image.
template <class T>
struct GeneratorParams {
  std::size_t k = 64;
  GeneratorMode mode = GeneratorMode::learned_input;
  std::vector<Var<T>> weights;
  std::optional<Var<T>> learned_inputs;  // [n, 64], present iff learned_input

  static std::vector<ParamSpec> layout(std::size_t k) {
    if (k < 4) throw std::invalid_argument("generator: k must be at least 4, got " + std::to_string(k));
    const std::size_t half = k / 2, quarter = k / 4;
    return {
        {{k, kGeneratorInput}, ParamRole::dense_weight, kGeneratorInput},
        {{k}, ParamRole::bias, kGeneratorInput},
        {{half * kImagePixels, k}, ParamRole::dense_weight, k},
        {{half * kImagePixels}, ParamRole::bias, k},
        {{quarter, half, 3, 3}, ParamRole::conv_weight, half * 9},
        {{quarter}, ParamRole::bias, half * 9},
        {{1, quarter, 3, 3}, ParamRole::conv_weight, quarter * 9},
        {{1}, ParamRole::bias, quarter * 9},
    };
  }

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += w.numel();
    return n;
  }

  /// All teacher parameters: weights, then the learned input bank if any.
  std::vector<Var<T>> params() const {
    auto p = weights;
    if (learned_inputs) p.push_back(*learned_inputs);
    return p;
  }
};

template <class T>
GeneratorParams<T> init_generator(std::size_t k, GeneratorMode mode, SeedStream rng) {
  GeneratorParams<T> g;
  g.k = k;
  g.mode = mode;
  for (const auto& spec : GeneratorParams<T>::layout(k)) {
    Tensor<T> t(spec.shape);
    if (spec.is_weight()) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : t.values()) v = static_cast<T>(u(rng.engine()));
    }
    g.weights.push_back(Var<T>::leaf(std::move(t)));
  }
  return g;
}

/// Generator on a raw [n, 64] input batch.
template <class T>
Var<T> generator_forward_raw(const GeneratorParams<T>& gen, const Var<T>& input) {
  if (input.shape().size() != 2 || input.shape()[1] != kGeneratorInput) {
    throw ShapeError("generator: input " + to_string(input.shape()) + " but d_total is " +
                     std::to_string(kGeneratorInput));
  }
  const auto& w = gen.weights;
  const std::size_t n = input.shape()[0];
  const T slope = T(0.1);
  auto h = leaky_relu(linear(input, w[0], w[1]), slope);
  h = leaky_relu(linear(h, w[2], w[3]), slope);
  auto x = reshape(h, Shape{n, gen.k / 2, kImageSide, kImageSide});
  x = leaky_relu(bias_add(conv2d(x, w[4], 1), w[5]), slope);
  x = bias_add(conv2d(x, w[6], 1), w[7]);
  const T lo = static_cast<T>(Normalization::lo()), hi = static_cast<T>(Normalization::hi());
  return add_scalar(scale(add_scalar(tanh(x), T(1)), (hi - lo) / T(2)), lo);
}

/// Generator on noise z [n, 54] concatenated with one-hot labels y [n, 10].
template <class T>
Var<T> generator_forward(const GeneratorParams<T>& gen, const Var<T>& z, const Var<T>& y) {
  if (z.shape().size() != 2 || z.shape()[1] + kClasses != kGeneratorInput) {
    throw ShapeError("generator: noise " + to_string(z.shape()) + " plus 10 label columns must give d_total " +
                     std::to_string(kGeneratorInput));
  }
  if (y.shape() != Shape{z.shape()[0], kClasses}) throw ShapeError("generator: labels " + to_string(y.shape()));
  for (std::size_t i = 0; i < y.shape()[0]; ++i) {
    int ones = 0;
    for (std::size_t j = 0; j < kClasses; ++j) {
      const T v = y.value()[i * kClasses + j];
      if (v != T(0) && v != T(1)) throw std::invalid_argument("generator: label row is not one-hot");
      ones += v == T(1);
    }
    if (ones != 1) throw std::invalid_argument("generator: label row is not one-hot");
  }
  return generator_forward_raw(gen, concat(std::vector<Var<T>>{z, y}, 1));
}

}  // namespace distill
