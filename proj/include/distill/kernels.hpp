#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <vector>

// Raw dense kernels. Layouts are NCHW for images and OCKK for filters; every
// convolution here has stride 1 and symmetric zero padding.
namespace distill::kernels {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMatrix = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMapMatrix = Eigen::Map<const RowMatrix<T>>;

/// C = op(A) * op(B), where op transposes when requested. A is stored
/// row-major as (rows_a x cols_a), B as (rows_b x cols_b).
template <class T>
void gemm(const T* a, std::size_t rows_a, std::size_t cols_a, bool trans_a, const T* b, std::size_t rows_b,
          std::size_t cols_b, bool trans_b, T* c) {
  ConstMapMatrix<T> A(a, rows_a, cols_a);
  ConstMapMatrix<T> B(b, rows_b, cols_b);
  const auto m = trans_a ? cols_a : rows_a;
  const auto n = trans_b ? rows_b : cols_b;
  MapMatrix<T> C(c, m, n);
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else C.noalias() = A.transpose() * B.transpose();
}

struct ConvGeometry {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, kernel, pad;

  std::size_t out_h() const { return height + 2 * pad - kernel + 1; }
  std::size_t out_w() const { return width + 2 * pad - kernel + 1; }
  std::size_t patch() const { return in_ch * kernel * kernel; }
};

// Columns of one image go to cols[r * ld + j] for patch row r and output
// position j, so several images can share one (C*K*K) x (n*Ho*Wo) matrix.
template <class T>
void im2col(const T* image, const ConvGeometry& g, T* cols, std::size_t ld) {
  const std::size_t ho = g.out_h(), wo = g.out_w();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ld;
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - pad;
        // valid x: 0 <= x + off < width
        const std::size_t x0 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-off, 0, std::ptrdiff_t(wo)));
        const std::size_t x1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(w - off, 0, std::ptrdiff_t(wo)));
        for (std::size_t y = 0; y < ho; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          T* out = row + y * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) || x0 >= x1) {
            std::fill_n(out, wo, T(0));
            continue;
          }
          const T* in = plane + iy * w + off;
          std::fill_n(out, x0, T(0));
          std::copy(in + x0, in + x1, out + x0);
          std::fill(out + x1, out + wo, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-and-adds cols back into image.
template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image, std::size_t ld) {
  const std::size_t ho = g.out_h(), wo = g.out_w();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ld;
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::size_t x0 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-off, 0, std::ptrdiff_t(wo)));
        const std::size_t x1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(w - off, 0, std::ptrdiff_t(wo)));
        for (std::size_t y = 0; y < ho; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* out = plane + iy * w + off;
          const T* in = row + y * wo;
          for (std::size_t x = x0; x < x1; ++x) out[x] += in[x];
        }
      }
    }
  }
}

// Images per GEMM: enough to give the multiply a wide right-hand side while
// keeping the column buffer near a megabyte of elements.
inline std::size_t conv_chunk(const ConvGeometry& g) {
  const std::size_t per = g.patch() * g.out_h() * g.out_w();
  return std::clamp<std::size_t>((std::size_t(1) << 18) / std::max<std::size_t>(per, 1), 1, std::max<std::size_t>(g.batch, 1));
}

/// out[n] = W * im2col(x[n])
template <class T>
void conv2d_forward(const T* x, const T* w, const ConvGeometry& g, T* out) {
  const std::size_t hw = g.out_h() * g.out_w(), image = g.in_ch * g.height * g.width;
  const std::size_t chunk = conv_chunk(g);
  std::vector<T> cols(g.patch() * hw * chunk), res(g.out_ch * hw * chunk);
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t m = std::min(chunk, g.batch - n0), ld = m * hw;
    for (std::size_t i = 0; i < m; ++i) im2col(x + (n0 + i) * image, g, cols.data() + i * hw, ld);
    gemm(w, g.out_ch, g.patch(), false, cols.data(), g.patch(), ld, false, res.data());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t o = 0; o < g.out_ch; ++o)
        std::copy_n(res.data() + o * ld + i * hw, hw, out + ((n0 + i) * g.out_ch + o) * hw);
  }
}

namespace detail {
// gy rows of images [n0, n0+m) as one (out_ch) x (m*hw) matrix.
template <class T>
void gather_outputs(const T* gy, const ConvGeometry& g, std::size_t n0, std::size_t m, T* dst) {
  const std::size_t hw = g.out_h() * g.out_w(), ld = m * hw;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t o = 0; o < g.out_ch; ++o) std::copy_n(gy + ((n0 + i) * g.out_ch + o) * hw, hw, dst + o * ld + i * hw);
}
}  // namespace detail

/// dx[n] = col2im(W^T * gy[n])
template <class T>
void conv2d_input_grad(const T* gy, const T* w, const ConvGeometry& g, T* dx) {
  const std::size_t hw = g.out_h() * g.out_w(), image = g.in_ch * g.height * g.width;
  const std::size_t chunk = conv_chunk(g);
  std::vector<T> cols(g.patch() * hw * chunk), gys(g.out_ch * hw * chunk);
  std::fill_n(dx, g.batch * image, T(0));
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t m = std::min(chunk, g.batch - n0), ld = m * hw;
    detail::gather_outputs(gy, g, n0, m, gys.data());
    gemm(w, g.out_ch, g.patch(), true, gys.data(), g.out_ch, ld, false, cols.data());
    for (std::size_t i = 0; i < m; ++i) col2im_add(cols.data() + i * hw, g, dx + (n0 + i) * image, ld);
  }
}

/// dW = sum_n gy[n] * im2col(x[n])^T
template <class T>
void conv2d_weight_grad(const T* x, const T* gy, const ConvGeometry& g, T* dw) {
  const std::size_t hw = g.out_h() * g.out_w(), image = g.in_ch * g.height * g.width;
  const std::size_t chunk = conv_chunk(g);
  std::vector<T> cols(g.patch() * hw * chunk), gys(g.out_ch * hw * chunk);
  MapMatrix<T> DW(dw, g.out_ch, g.patch());
  DW.setZero();
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t m = std::min(chunk, g.batch - n0), ld = m * hw;
    for (std::size_t i = 0; i < m; ++i) im2col(x + (n0 + i) * image, g, cols.data() + i * hw, ld);
    detail::gather_outputs(gy, g, n0, m, gys.data());
    ConstMapMatrix<T> GY(gys.data(), g.out_ch, ld);
    ConstMapMatrix<T> C(cols.data(), g.patch(), ld);
    DW.noalias() += GY * C.transpose();
  }
}

// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
template <class T>
void avgpool2_forward(const T* x, std::size_t planes, std::size_t h, std::size_t w, T* out) {
  const std::size_t ho = h / 2, wo = w / 2;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = x + p * h * w;
    T* o = out + p * ho * wo;
    for (std::size_t y = 0; y < ho; ++y) {
      const T* r0 = in + (2 * y) * w;
      const T* r1 = r0 + w;
      for (std::size_t xx = 0; xx < wo; ++xx) {
        o[y * wo + xx] = T(0.25) * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
      }
    }
  }
}

template <class T>
void avgpool2_backward(const T* gy, std::size_t planes, std::size_t h, std::size_t w, T* dx) {
  const std::size_t ho = h / 2, wo = w / 2;
  std::fill_n(dx, planes * h * w, T(0));
  for (std::size_t p = 0; p < planes; ++p) {
    const T* g = gy + p * ho * wo;
    T* d = dx + p * h * w;
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xx = 0; xx < wo; ++xx) {
        const T v = T(0.25) * g[y * wo + xx];
        d[(2 * y) * w + 2 * xx] = v;
        d[(2 * y) * w + 2 * xx + 1] = v;
        d[(2 * y + 1) * w + 2 * xx] = v;
        d[(2 * y + 1) * w + 2 * xx + 1] = v;
      }
    }
  }
}

}  // namespace distill::kernels
