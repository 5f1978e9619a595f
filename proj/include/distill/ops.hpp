#pragma once

#include <distill/autodiff.hpp>
#include <distill/kernels.hpp>

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

// Differentiable operations. Saved-intermediate policy: linear maps
// (matmul, conv and their adjoints) and elementwise products save their
// inputs; activations (relu, tanh, exp, log_softmax) save their outputs.
namespace distill {

template <class T>
class FnNode final : public Node<T> {
 public:
  using Fn = std::function<std::vector<Var<T>>(Node<T>& self, const Var<T>& grad, const std::vector<bool>& needed)>;

  FnNode(const char* name, Fn fn) : name_(name), fn_(std::move(fn)) {}

  std::vector<Var<T>> backward(const Var<T>& grad, const std::vector<bool>& needed) override {
    return fn_(*this, grad, needed);
  }
  const char* name() const override { return name_; }

 private:
  const char* name_;
  Fn fn_;
};

namespace detail {

template <class T>
std::shared_ptr<FnNode<T>> fn_node(const char* name, typename FnNode<T>::Fn fn) {
  return std::make_shared<FnNode<T>>(name, std::move(fn));
}

/// Rebuilds a differentiable handle on a node's own output.
template <class T>
Var<T> self_output(Node<T>& self, const Tensor<T>& out) {
  return Var<T>(out, self.shared_from_this());
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " differ");
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " + to_string(s));
  }
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& x, F f) {
  auto out = Tensor<T>::uninitialized(x.shape());
  const T* in = x.data();
  T* o = out.data();
  for (std::size_t i = 0, n = x.numel(); i < n; ++i) o[i] = f(in[i]);
  return out;
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f) {
  auto out = Tensor<T>::uninitialized(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* o = out.data();
  for (std::size_t i = 0, n = a.numel(); i < n; ++i) o[i] = f(pa[i], pb[i]);
  return out;
}

struct AxisSplit {
  std::size_t outer, dim, inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// Forward declarations so backward rules can refer to one another.
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T c);
template <class T> Var<T> add_scalar(const Var<T>& a, T c);
template <class T> Var<T> mul_scalar(const Var<T>& a, const Var<T>& s);
template <class T> Var<T> pow_scalar(const Var<T>& a, T p);
template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> expand(const Var<T>& s, const Shape& shape);
template <class T> Var<T> axis_sum(const Var<T>& x, std::size_t axis);
template <class T> Var<T> axis_broadcast(const Var<T>& v, const Shape& shape, std::size_t axis);
template <class T> Var<T> reshape(const Var<T>& x, const Shape& shape);
template <class T> Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <class T> Var<T> pad_axis(const Var<T>& x, std::size_t axis, std::size_t before, std::size_t total);
template <class T> Var<T> index_select(const Var<T>& x, const std::vector<std::size_t>& rows);
template <class T> Var<T> index_add(const Var<T>& x, const std::vector<std::size_t>& rows, std::size_t n);
template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);
template <class T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t pad);
template <class T> Var<T> conv2d_input_grad(const Var<T>& gy, const Var<T>& w, std::size_t pad, const Shape& x_shape);
template <class T> Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& gy, std::size_t pad, const Shape& w_shape);
template <class T> Var<T> avgpool2(const Var<T>& x);
template <class T> Var<T> avgpool2_grad(const Var<T>& gy, const Shape& x_shape);
template <class T> Var<T> log_softmax(const Var<T>& x);

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  auto out = detail::zip(a.value(), b.value(), [](T x, T y) { return x + y; });
  return detail::record<T>(std::move(out), {&a, &b},
                           detail::fn_node<T>("add", [](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{g, g};
                           }));
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  auto out = detail::zip(a.value(), b.value(), [](T x, T y) { return x - y; });
  return detail::record<T>(std::move(out), {&a, &b},
                           detail::fn_node<T>("sub", [](Node<T>&, const Var<T>& g, const std::vector<bool>& need) {
                             return std::vector<Var<T>>{g, need[1] ? scale(g, T(-1)) : Var<T>()};
                           }));
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  auto out = detail::zip(a.value(), b.value(), [](T x, T y) { return x * y; });
  return detail::record<T>(std::move(out), {&a, &b},
                           detail::fn_node<T>("mul", [a, b](Node<T>&, const Var<T>& g, const std::vector<bool>& need) {
                             return std::vector<Var<T>>{need[0] ? mul(g, b) : Var<T>(),
                                                        need[1] ? mul(g, a) : Var<T>()};
                           }));
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  auto out = detail::map(a.value(), [c](T x) { return c * x; });
  return detail::record<T>(std::move(out), {&a},
                           detail::fn_node<T>("scale", [c](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{scale(g, c)};
                           }));
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  auto out = detail::map(a.value(), [c](T x) { return x + c; });
  return detail::record<T>(std::move(out), {&a},
                           detail::fn_node<T>("add_scalar", [](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{g};
                           }));
}

/// a * s where s holds a single value.
template <class T>
Var<T> mul_scalar(const Var<T>& a, const Var<T>& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: scalar operand has shape " + to_string(s.shape()));
  const T c = s.value()[0];
  auto out = detail::map(a.value(), [c](T x) { return c * x; });
  return detail::record<T>(
      std::move(out), {&a, &s},
      detail::fn_node<T>("mul_scalar", [a, s](Node<T>&, const Var<T>& g, const std::vector<bool>& need) {
        return std::vector<Var<T>>{need[0] ? mul_scalar(g, s) : Var<T>(),
                                   need[1] ? reshape(sum(mul(g, a)), s.shape()) : Var<T>()};
      }));
}

template <class T>
Var<T> pow_scalar(const Var<T>& a, T p) {
  auto out = detail::map(a.value(), [p](T x) { return std::pow(x, p); });
  return detail::record<T>(std::move(out), {&a},
                           detail::fn_node<T>("pow", [a, p](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{mul(g, scale(pow_scalar(a, p - T(1)), p))};
                           }));
}

template <class T>
Var<T> exp(const Var<T>& a) {
  auto out = detail::map(a.value(), [](T x) { return std::exp(x); });
  return detail::record<T>(Tensor<T>(out), {&a},
                           detail::fn_node<T>("exp", [out](Node<T>& self, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{mul(g, detail::self_output(self, out))};
                           }));
}

/// max(x, 0) + slope * min(x, 0); slope 0 is relu. The derivative mask is
/// piecewise constant, so it enters backward as a constant.
template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  auto out = detail::map(a.value(), [slope](T x) { return std::max(x, T(0)) + slope * std::min(x, T(0)); });
  return detail::record<T>(
      Tensor<T>(out), {&a},
      detail::fn_node<T>("leaky_relu", [out, slope](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
        // The output has the input's sign for any slope > 0; slope 0 maps
        // negatives to exactly 0.
        auto mask = detail::map(out, [slope](T y) { return T(y > T(0)) * (T(1) - slope) + slope; });
        return std::vector<Var<T>>{mul(g, Var<T>(std::move(mask)))};
      }));
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return leaky_relu(a, T(0));
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  auto out = detail::map(a.value(), [](T x) { return std::tanh(x); });
  return detail::record<T>(Tensor<T>(out), {&a},
                           detail::fn_node<T>("tanh", [out](Node<T>& self, const Var<T>& g, const std::vector<bool>&) {
                             auto y = detail::self_output(self, out);
                             return std::vector<Var<T>>{mul(g, add_scalar(scale(mul(y, y), T(-1)), T(1)))};
                           }));
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

template <class T>
Var<T> sum(const Var<T>& a) {
  T acc = T(0);
  for (T v : a.value().values()) acc += v;
  const Shape in_shape = a.shape();
  return detail::record<T>(Tensor<T>::scalar(acc), {&a},
                           detail::fn_node<T>("sum", [in_shape](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{expand(g, in_shape)};
                           }));
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Var<T> expand(const Var<T>& s, const Shape& shape) {
  if (s.numel() != 1) throw ShapeError("expand: source has shape " + to_string(s.shape()));
  Tensor<T> out(shape, s.value()[0]);
  const Shape s_shape = s.shape();
  return detail::record<T>(std::move(out), {&s},
                           detail::fn_node<T>("expand", [s_shape](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{reshape(sum(g), s_shape)};
                           }));
}

namespace detail {
// Strict FP order blocks vectorizing a plain running sum.
template <class T>
T lane_sum(const T* p, std::size_t n) {
  constexpr std::size_t L = 16;
  std::array<T, L> acc{};
  std::size_t i = 0;
  for (; i + L <= n; i += L)
    for (std::size_t l = 0; l < L; ++l) acc[l] += p[i + l];
  T s = T(0);
  for (; i < n; ++i) s += p[i];
  for (T a : acc) s += a;
  return s;
}
}  // namespace detail

/// Sums over every axis except `axis`; the result has shape [shape[axis]].
template <class T>
Var<T> axis_sum(const Var<T>& x, std::size_t axis) {
  const auto sp = detail::split_at(x.shape(), axis, "axis_sum");
  Tensor<T> out(Shape{sp.dim});
  const T* in = x.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t d = 0; d < sp.dim; ++d) {
      const T* p = in + (o * sp.dim + d) * sp.inner;
      out[d] += detail::lane_sum(p, sp.inner);
    }
  const Shape in_shape = x.shape();
  return detail::record<T>(
      std::move(out), {&x},
      detail::fn_node<T>("axis_sum", [in_shape, axis](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
        return std::vector<Var<T>>{axis_broadcast(g, in_shape, axis)};
      }));
}

/// Repeats v (shape [shape[axis]]) along every other axis of `shape`.
template <class T>
Var<T> axis_broadcast(const Var<T>& v, const Shape& shape, std::size_t axis) {
  const auto sp = detail::split_at(shape, axis, "axis_broadcast");
  if (v.shape() != Shape{sp.dim}) {
    throw ShapeError("axis_broadcast: vector of shape " + to_string(v.shape()) + " against axis " +
                     std::to_string(axis) + " of " + to_string(shape));
  }
  Tensor<T> out(shape);
  T* o = out.data();
  for (std::size_t a = 0; a < sp.outer; ++a)
    for (std::size_t d = 0; d < sp.dim; ++d) std::fill_n(o + (a * sp.dim + d) * sp.inner, sp.inner, v.value()[d]);
  return detail::record<T>(std::move(out), {&v},
                           detail::fn_node<T>("axis_broadcast", [axis](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{axis_sum(g, axis)};
                           }));
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Var<T> reshape(const Var<T>& x, const Shape& shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  const Shape in_shape = x.shape();
  return detail::record<T>(x.value().reshaped(shape), {&x},
                           detail::fn_node<T>("reshape", [in_shape](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{reshape(g, in_shape)};
                           }));
}

/// Elements [begin, end) along `axis`.
template <class T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = detail::split_at(x.shape(), axis, "slice");
  if (begin > end || end > sp.dim) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  Tensor<T> out(out_shape);
  const std::size_t len = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.value().data() + (o * sp.dim + begin) * sp.inner, len, out.data() + o * len);
  const std::size_t total = sp.dim;
  return detail::record<T>(
      std::move(out), {&x},
      detail::fn_node<T>("slice", [axis, begin, total](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
        return std::vector<Var<T>>{pad_axis(g, axis, begin, total)};
      }));
}

/// Embeds x into zeros of extent `total` along `axis`, starting at `before`.
template <class T>
Var<T> pad_axis(const Var<T>& x, std::size_t axis, std::size_t before, std::size_t total) {
  const auto sp = detail::split_at(x.shape(), axis, "pad_axis");
  if (before + sp.dim > total) throw ShapeError("pad_axis: block does not fit in extent " + std::to_string(total));
  Shape out_shape = x.shape();
  out_shape[axis] = total;
  Tensor<T> out(out_shape);
  const std::size_t len = sp.dim * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.value().data() + o * len, len, out.data() + (o * total + before) * sp.inner);
  const std::size_t extent = sp.dim;
  return detail::record<T>(
      std::move(out), {&x},
      detail::fn_node<T>("pad_axis", [axis, before, extent](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
        return std::vector<Var<T>>{slice(g, axis, before, before + extent)};
      }));
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts.front().shape();
  detail::split_at(out_shape, axis, "concat");
  std::size_t extent = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch " + to_string(s));
    s[axis] = out_shape[axis];
    if (s != out_shape) throw ShapeError("concat: incompatible part " + to_string(p.shape()) + " vs " + to_string(out_shape));
    offsets.push_back(extent);
    extent += p.shape()[axis];
  }
  out_shape[axis] = extent;
  Tensor<T> out(out_shape);
  const auto sp = detail::split_at(out_shape, axis, "concat");
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t len = parts[k].shape()[axis] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(parts[k].value().data() + o * len, len, out.data() + (o * extent + offsets[k]) * sp.inner);
  }
  std::vector<std::size_t> ends;
  for (const auto& p : parts) ends.push_back(p.shape()[axis]);
  auto node = detail::fn_node<T>("concat", [axis, offsets, ends](Node<T>&, const Var<T>& g, const std::vector<bool>& need) {
    std::vector<Var<T>> grads(offsets.size());
    for (std::size_t k = 0; k < offsets.size(); ++k)
      if (need[k]) grads[k] = slice(g, axis, offsets[k], offsets[k] + ends[k]);
    return grads;
  });
  return detail::record_list<T>(std::move(out), parts, std::move(node));
}

/// Gathers rows (axis 0).
template <class T>
Var<T> index_select(const Var<T>& x, const std::vector<std::size_t>& rows) {
  if (x.shape().empty()) throw ShapeError("index_select: scalar input");
  const std::size_t n = x.shape()[0];
  const std::size_t row = x.numel() / std::max<std::size_t>(n, 1);
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("index_select: row " + std::to_string(rows[i]) + " out of " + std::to_string(n));
    std::copy_n(x.value().data() + rows[i] * row, row, out.data() + i * row);
  }
  return detail::record<T>(std::move(out), {&x},
                           detail::fn_node<T>("index_select", [rows, n](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{index_add(g, rows, n)};
                           }));
}

/// Adjoint of index_select: zeros of extent n along axis 0 with x's rows
/// added at `rows`.
template <class T>
Var<T> index_add(const Var<T>& x, const std::vector<std::size_t>& rows, std::size_t n) {
  if (x.shape().empty() || x.shape()[0] != rows.size()) throw ShapeError("index_add: row count mismatch");
  const std::size_t row = rows.empty() ? 0 : x.numel() / rows.size();
  Shape out_shape = x.shape();
  out_shape[0] = n;
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    T* dst = out.data() + rows[i] * row;
    const T* src = x.value().data() + i * row;
    for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
  }
  return detail::record<T>(std::move(out), {&x},
                           detail::fn_node<T>("index_add", [rows](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{index_select(g, rows)};
                           }));
}

// ---------------------------------------------------------------------------
// Linear maps

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  const std::size_t m = trans_a ? a.shape()[1] : a.shape()[0];
  const std::size_t ka = trans_a ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = trans_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (ka != kb) {
    throw ShapeError("matmul: inner extents differ for " + to_string(a.shape()) + (trans_a ? "^T" : "") + " x " +
                     to_string(b.shape()) + (trans_b ? "^T" : ""));
  }
  Tensor<T> out(Shape{m, n});
  kernels::gemm(a.value().data(), a.shape()[0], a.shape()[1], trans_a, b.value().data(), b.shape()[0], b.shape()[1],
                trans_b, out.data());
  return detail::record<T>(
      std::move(out), {&a, &b},
      detail::fn_node<T>("matmul", [a, b, trans_a, trans_b](Node<T>&, const Var<T>& g, const std::vector<bool>& need) {
        Var<T> ga, gb;
        if (!trans_a && !trans_b) {
          if (need[0]) ga = matmul(g, b, false, true);
          if (need[1]) gb = matmul(a, g, true, false);
        } else if (!trans_a && trans_b) {
          if (need[0]) ga = matmul(g, b, false, false);
          if (need[1]) gb = matmul(g, a, true, false);
        } else if (trans_a && !trans_b) {
          if (need[0]) ga = matmul(b, g, false, true);
          if (need[1]) gb = matmul(a, g, false, false);
        } else {
          if (need[0]) ga = matmul(b, g, true, true);
          if (need[1]) gb = matmul(g, a, true, true);
        }
        return std::vector<Var<T>>{ga, gb};
      }));
}

namespace detail {

inline kernels::ConvGeometry conv_geometry(const char* op, const Shape& x, const Shape& w, std::size_t pad) {
  require_rank(op, x, 4);
  require_rank(op, w, 4);
  if (x[1] != w[1] || w[2] != w[3] || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3]) {
    throw ShapeError(std::string(op) + ": input " + to_string(x) + " incompatible with filter " + to_string(w) +
                     " at padding " + std::to_string(pad));
  }
  return {x[0], x[1], x[2], x[3], w[0], w[2], pad};
}

}  // namespace detail

/// Stride-1 2-D convolution (cross-correlation) with zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t pad) {
  const auto geo = detail::conv_geometry("conv2d", x.shape(), w.shape(), pad);
  Tensor<T> out(Shape{geo.batch, geo.out_ch, geo.out_h(), geo.out_w()});
  kernels::conv2d_forward(x.value().data(), w.value().data(), geo, out.data());
  return detail::record<T>(
      std::move(out), {&x, &w},
      detail::fn_node<T>("conv2d", [x, w, pad](Node<T>&, const Var<T>& g, const std::vector<bool>& need) {
        return std::vector<Var<T>>{need[0] ? conv2d_input_grad(g, w, pad, x.shape()) : Var<T>(),
                                   need[1] ? conv2d_weight_grad(x, g, pad, w.shape()) : Var<T>()};
      }));
}

/// Gradient of conv2d with respect to its input; linear in both gy and w.
template <class T>
Var<T> conv2d_input_grad(const Var<T>& gy, const Var<T>& w, std::size_t pad, const Shape& x_shape) {
  const auto geo = detail::conv_geometry("conv2d_input_grad", x_shape, w.shape(), pad);
  if (gy.shape() != Shape{geo.batch, geo.out_ch, geo.out_h(), geo.out_w()}) {
    throw ShapeError("conv2d_input_grad: output gradient " + to_string(gy.shape()) + " for input " + to_string(x_shape));
  }
  Tensor<T> out(x_shape);
  kernels::conv2d_input_grad(gy.value().data(), w.value().data(), geo, out.data());
  return detail::record<T>(
      std::move(out), {&gy, &w},
      detail::fn_node<T>("conv2d_input_grad", [gy, w, pad](Node<T>&, const Var<T>& h, const std::vector<bool>& need) {
        return std::vector<Var<T>>{need[0] ? conv2d(h, w, pad) : Var<T>(),
                                   need[1] ? conv2d_weight_grad(h, gy, pad, w.shape()) : Var<T>()};
      }));
}

/// Gradient of conv2d with respect to its filter; linear in both x and gy.
template <class T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& gy, std::size_t pad, const Shape& w_shape) {
  const auto geo = detail::conv_geometry("conv2d_weight_grad", x.shape(), w_shape, pad);
  if (gy.shape() != Shape{geo.batch, geo.out_ch, geo.out_h(), geo.out_w()}) {
    throw ShapeError("conv2d_weight_grad: output gradient " + to_string(gy.shape()) + " for input " +
                     to_string(x.shape()));
  }
  Tensor<T> out(w_shape);
  kernels::conv2d_weight_grad(x.value().data(), gy.value().data(), geo, out.data());
  return detail::record<T>(
      std::move(out), {&x, &gy},
      detail::fn_node<T>("conv2d_weight_grad", [x, gy, pad](Node<T>&, const Var<T>& h, const std::vector<bool>& need) {
        return std::vector<Var<T>>{need[0] ? conv2d_input_grad(gy, h, pad, x.shape()) : Var<T>(),
                                   need[1] ? conv2d(x, h, pad) : Var<T>()};
      }));
}

template <class T>
Var<T> avgpool2(const Var<T>& x) {
  detail::require_rank("avgpool2", x.shape(), 4);
  const auto& s = x.shape();
  if (s[2] < 2 || s[3] < 2) throw ShapeError("avgpool2: spatial extent too small in " + to_string(s));
  Tensor<T> out(Shape{s[0], s[1], s[2] / 2, s[3] / 2});
  kernels::avgpool2_forward(x.value().data(), s[0] * s[1], s[2], s[3], out.data());
  const Shape in_shape = s;
  return detail::record<T>(std::move(out), {&x},
                           detail::fn_node<T>("avgpool2", [in_shape](Node<T>&, const Var<T>& g, const std::vector<bool>&) {
                             return std::vector<Var<T>>{avgpool2_grad(g, in_shape)};
                           }));
}

/// Adjoint of avgpool2.
template <class T>
Var<T> avgpool2_grad(const Var<T>& gy, const Shape& x_shape) {
  detail::require_rank("avgpool2_grad", x_shape, 4);
  if (gy.shape() != Shape{x_shape[0], x_shape[1], x_shape[2] / 2, x_shape[3] / 2}) {
    throw ShapeError("avgpool2_grad: gradient " + to_string(gy.shape()) + " for input " + to_string(x_shape));
  }
  Tensor<T> out(x_shape);
  kernels::avgpool2_backward(gy.value().data(), x_shape[0] * x_shape[1], x_shape[2], x_shape[3], out.data());
  return detail::record<T>(std::move(out), {&gy},
                           detail::fn_node<T>("avgpool2_grad", [](Node<T>&, const Var<T>& h, const std::vector<bool>&) {
                             return std::vector<Var<T>>{avgpool2(h)};
                           }));
}

// ---------------------------------------------------------------------------
// Softmax family (rows of an [N, C] matrix)

template <class T>
Var<T> log_softmax(const Var<T>& x) {
  detail::require_rank("log_softmax", x.shape(), 2);
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.value().data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  const Shape shape = x.shape();
  return detail::record<T>(
      Tensor<T>(out), {&x},
      detail::fn_node<T>("log_softmax", [out, shape](Node<T>& self, const Var<T>& g, const std::vector<bool>&) {
        auto probs = exp(detail::self_output(self, out));
        return std::vector<Var<T>>{sub(g, mul(probs, axis_broadcast(axis_sum(g, 0), shape, 0)))};
      }));
}

template <class T>
Var<T> softmax(const Var<T>& x) {
  return exp(log_softmax(x));
}

/// Mean over rows of -sum_j targets[i,j] * log_softmax(logits)[i,j].
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const Var<T>& targets) {
  detail::require_rank("softmax_cross_entropy", logits.shape(), 2);
  detail::require_same_shape("softmax_cross_entropy", logits.shape(), targets.shape());
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.value().data() + i * c;
    const T* t = targets.value().data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) total -= t[j] * (row[j] - lse);
  }
  const T inv_n = T(1) / static_cast<T>(n);
  return detail::record<T>(
      Tensor<T>::scalar(total * inv_n), {&logits, &targets},
      detail::fn_node<T>("softmax_cross_entropy",
                         [logits, targets, inv_n](Node<T>&, const Var<T>& g, const std::vector<bool>& need) {
                           const auto gs = scale(g, inv_n);
                           Var<T> gl, gt;
                           const auto logp = log_softmax(logits);
                           if (need[0]) {
                             const auto row_mass = axis_broadcast(axis_sum(targets, 0), logits.shape(), 0);
                             gl = mul_scalar(sub(mul(exp(logp), row_mass), targets), gs);
                           }
                           if (need[1]) gt = mul_scalar(logp, scale(gs, T(-1)));
                           return std::vector<Var<T>>{gl, gt};
                         }));
}

// ---------------------------------------------------------------------------
// Operators and small composites

template <class T> Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <class T> Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <class T> Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <class T> Var<T> operator-(const Var<T>& a) { return scale(a, T(-1)); }

namespace detail {

template <class T>
void for_each_channel(const Shape& shape, const char* op, std::size_t channels, auto&& f) {
  if (shape.size() < 2 || shape[1] != channels) {
    throw ShapeError(std::string(op) + ": " + std::to_string(channels) + " channel values for tensor " +
                     to_string(shape));
  }
  const auto sp = split_at(shape, 1, op);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t c = 0; c < sp.dim; ++c) f((o * sp.dim + c) * sp.inner, sp.inner, c);
}

}  // namespace detail

/// x + b broadcast along axis 1 (channels for NCHW, features for [N, F]).
template <class T>
Var<T> bias_add(const Var<T>& x, const Var<T>& b) {
  detail::require_rank("bias_add", b.shape(), 1);
  auto out = Tensor<T>::uninitialized(x.shape());
  const T* in = x.value().data();
  const T* bv = b.value().data();
  T* o = out.data();
  detail::for_each_channel<T>(x.shape(), "bias_add", b.numel(), [&](std::size_t at, std::size_t n, std::size_t c) {
    for (std::size_t i = 0; i < n; ++i) o[at + i] = in[at + i] + bv[c];
  });
  return detail::record<T>(std::move(out), {&x, &b},
                           detail::fn_node<T>("bias_add", [](Node<T>&, const Var<T>& g, const std::vector<bool>& need) {
                             return std::vector<Var<T>>{g, need[1] ? axis_sum(g, 1) : Var<T>()};
                           }));
}

/// x times s broadcast along axis 1.
template <class T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& s) {
  detail::require_rank("channel_scale", s.shape(), 1);
  auto out = Tensor<T>::uninitialized(x.shape());
  const T* in = x.value().data();
  const T* sv = s.value().data();
  T* o = out.data();
  detail::for_each_channel<T>(x.shape(), "channel_scale", s.numel(), [&](std::size_t at, std::size_t n, std::size_t c) {
    for (std::size_t i = 0; i < n; ++i) o[at + i] = in[at + i] * sv[c];
  });
  return detail::record<T>(
      std::move(out), {&x, &s},
      detail::fn_node<T>("channel_scale", [x, s](Node<T>&, const Var<T>& g, const std::vector<bool>& need) {
        return std::vector<Var<T>>{need[0] ? channel_scale(g, s) : Var<T>(),
                                   need[1] ? axis_sum(mul(g, x), 1) : Var<T>()};
      }));
}

namespace detail {

inline Shape plane_shape(const Shape& s) { return Shape{s[0] * s[1], s[2] * s[3]}; }

/// Mean over each [H, W] plane of an NCHW tensor; shape [N*C].
template <class T>
Var<T> plane_mean(const Var<T>& x) {
  const auto flat = plane_shape(x.shape());
  return scale(axis_sum(reshape(x, flat), 0), T(1) / static_cast<T>(flat[1]));
}

template <class T>
Var<T> plane_broadcast(const Var<T>& v, const Shape& shape) {
  return reshape(axis_broadcast(v, plane_shape(shape), 0), shape);
}

struct PlaneStats {
  std::vector<double> mean, inv_std;
};

template <class T>
PlaneStats plane_stats(const Tensor<T>& x, T eps) {
  const auto flat = plane_shape(x.shape());
  PlaneStats st{std::vector<double>(flat[0]), std::vector<double>(flat[0])};
  for (std::size_t p = 0; p < flat[0]; ++p) {
    const T* row = x.data() + p * flat[1];
    // independent lanes so the reductions vectorize
    constexpr std::size_t L = 8;
    std::array<double, L> acc{};
    std::size_t i = 0;
    for (; i + L <= flat[1]; i += L)
      for (std::size_t l = 0; l < L; ++l) acc[l] += row[i + l];
    double m = 0;
    for (; i < flat[1]; ++i) m += row[i];
    for (double a : acc) m += a;
    m /= static_cast<double>(flat[1]);
    acc.fill(0);
    for (i = 0; i + L <= flat[1]; i += L)
      for (std::size_t l = 0; l < L; ++l) acc[l] += (row[i + l] - m) * (row[i + l] - m);
    double v = 0;
    for (; i < flat[1]; ++i) v += (row[i] - m) * (row[i] - m);
    for (double a : acc) v += a;
    v /= static_cast<double>(flat[1]);
    st.mean[p] = m;
    st.inv_std[p] = 1.0 / std::sqrt(v + static_cast<double>(eps));
  }
  return st;
}

/// 1 / sqrt(var + eps) of each [H, W] plane; shape [N*C].
template <class T>
Var<T> plane_inv_std(const Var<T>& x, T eps) {
  require_rank("plane_inv_std", x.shape(), 4);
  const auto st = plane_stats(x.value(), eps);
  Tensor<T> out(Shape{st.inv_std.size()});
  for (std::size_t p = 0; p < st.inv_std.size(); ++p) out[p] = static_cast<T>(st.inv_std[p]);
  const T inv_area = T(1) / static_cast<T>(x.shape()[2] * x.shape()[3]);
  return record<T>(Tensor<T>(out), {&x},
                   fn_node<T>("plane_inv_std", [x, out, inv_area](Node<T>& self, const Var<T>& g, const std::vector<bool>&) {
                     const auto inv = self_output(self, out);
                     const auto centered = sub(x, plane_broadcast(plane_mean(x), x.shape()));
                     const auto coef = scale(mul(g, pow_scalar(inv, T(3))), -inv_area);
                     return std::vector<Var<T>>{mul(plane_broadcast(coef, x.shape()), centered)};
                   }));
}

/// (x - mean) / sqrt(var + eps) over each [H, W] plane.
template <class T>
Var<T> plane_normalize(const Var<T>& x, T eps) {
  require_rank("plane_normalize", x.shape(), 4);
  const auto st = plane_stats(x.value(), eps);
  const auto flat = plane_shape(x.shape());
  auto out = Tensor<T>::uninitialized(x.shape());
  Tensor<T> inv(Shape{flat[0]});
  for (std::size_t p = 0; p < flat[0]; ++p) {
    const T m = static_cast<T>(st.mean[p]), r = static_cast<T>(st.inv_std[p]);
    inv[p] = r;
    const T* in = x.value().data() + p * flat[1];
    T* o = out.data() + p * flat[1];
    for (std::size_t i = 0; i < flat[1]; ++i) o[i] = (in[i] - m) * r;
  }
  return record<T>(Tensor<T>(out), {&x},
                   fn_node<T>("plane_normalize", [x, out, inv, eps](Node<T>& self, const Var<T>& g, const std::vector<bool>&) {
                     const auto xhat = self_output(self, out);
                     const Var<T> r = grad_mode_enabled() ? plane_inv_std(x, eps) : Var<T>(inv);
                     const auto& s = x.shape();
                     const auto centered_g = sub(g, plane_broadcast(plane_mean(g), s));
                     const auto proj = mul(xhat, plane_broadcast(plane_mean(mul(g, xhat)), s));
                     return std::vector<Var<T>>{mul(sub(centered_g, proj), plane_broadcast(r, s))};
                   }));
}

}  // namespace detail

/// x [N, in] times W^T with W [out, in], plus bias [out].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return bias_add(matmul(x, w, false, true), b);
}

/// Per-sample, per-channel normalization over the spatial extent followed
/// by a per-channel affine map (group normalization with one channel per
/// group).
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::require_rank("instance_norm", x.shape(), 4);
  return bias_add(channel_scale(detail::plane_normalize(x, eps), gamma), beta);
}

}  // namespace distill
