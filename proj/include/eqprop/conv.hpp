#pragma once

#include "eqprop/tensor.hpp"

#include <algorithm>
#include <utility>

namespace eqprop {

struct ConvGeometry {
  Shape3 input;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;

  int out_height() const { return (input.height + 2 * padding - kernel) / stride + 1; }
  int out_width() const { return (input.width + 2 * padding - kernel) / stride + 1; }
  Shape3 output() const { return {out_channels, out_height(), out_width()}; }
  int patch() const { return input.channels * kernel * kernel; }

  void validate() const {
    if (input.channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0 || padding < 0)
      throw ConfigError("conv geometry: non-positive dimension");
    if (input.height + 2 * padding < kernel || input.width + 2 * padding < kernel)
      throw ConfigError("conv geometry: kernel larger than padded input " + input.str());
  }
};

namespace detail {

// Valid output range [lo, hi) along one axis for kernel offset `kk`: the outputs
// whose input coordinate o * stride + kk - pad lands inside [0, extent).
inline std::pair<int, int> valid_range(int out, int extent, int kk, int stride, int pad) {
  int lo = 0, hi = out;
  while (lo < hi && lo * stride + kk - pad < 0) ++lo;
  while (hi > lo && (hi - 1) * stride + kk - pad >= extent) --hi;
  return {lo, hi};
}

// Receptive fields of one sample as a P x K matrix: row p is the patch feeding
// output position p, column (c * k + ky) * k + kx.
template <class Scalar>
void im2col(const Scalar* src, const ConvGeometry& g, Matrix<Scalar>& cols) {
  const int ho = g.out_height(), wo = g.out_width(), k = g.kernel, s = g.stride;
  const int iw = g.input.width, hw = g.input.spatial();
  cols.resize(ho * wo, g.patch());
  for (int c = 0; c < g.input.channels; ++c) {
    const Scalar* plane = src + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      const auto [y0, y1] = valid_range(ho, g.input.height, ky, s, g.padding);
      for (int kx = 0; kx < k; ++kx) {
        const auto [x0, x1] = valid_range(wo, iw, kx, s, g.padding);
        Scalar* dst = cols.col((c * k + ky) * k + kx).data();
        for (int oy = 0; oy < ho; ++oy) {
          Scalar* row = dst + oy * wo;
          if (oy < y0 || oy >= y1) {
            std::fill(row, row + wo, Scalar(0));
            continue;
          }
          const Scalar* in = plane + (oy * s + ky - g.padding) * iw + kx - g.padding;
          std::fill(row, row + x0, Scalar(0));
          if (s == 1)
            std::copy(in + x0, in + x1, row + x0);
          else
            for (int ox = x0; ox < x1; ++ox) row[ox] = in[ox * s];
          std::fill(row + x1, row + wo, Scalar(0));
        }
      }
    }
  }
}

// Scatter-add of a P x K patch matrix back onto one sample's input map.
template <class Scalar>
void col2im_add(const Matrix<Scalar>& cols, const ConvGeometry& g, Scalar* dst) {
  const int ho = g.out_height(), wo = g.out_width(), k = g.kernel, s = g.stride;
  const int iw = g.input.width, hw = g.input.spatial();
  for (int c = 0; c < g.input.channels; ++c) {
    Scalar* plane = dst + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      const auto [y0, y1] = valid_range(ho, g.input.height, ky, s, g.padding);
      for (int kx = 0; kx < k; ++kx) {
        const auto [x0, x1] = valid_range(wo, iw, kx, s, g.padding);
        const Scalar* src = cols.col((c * k + ky) * k + kx).data();
        for (int oy = y0; oy < y1; ++oy) {
          const Scalar* row = src + oy * wo;
          Scalar* out = plane + (oy * s + ky - g.padding) * iw + kx - g.padding;
          if (s == 1)
            for (int ox = x0; ox < x1; ++ox) out[ox] += row[ox];
          else
            for (int ox = x0; ox < x1; ++ox) out[ox * s] += row[ox];
        }
      }
    }
  }
}

template <class Scalar>
struct ConvWorkspace {
  Matrix<Scalar> cols;
};

template <class Scalar>
ConvWorkspace<Scalar>& workspace() {
  thread_local ConvWorkspace<Scalar> ws;
  return ws;
}

inline void check_weight(Eigen::Index rows, Eigen::Index cols, const ConvGeometry& g) {
  if (rows != g.out_channels || cols != g.patch())
    throw ShapeError("conv weight: expected " + std::to_string(g.out_channels) + "x" +
                     std::to_string(g.patch()) + ", got " + std::to_string(rows) + "x" + std::to_string(cols));
}

// A sample's channel-major map viewed as positions x channels.
template <class Scalar>
using MapMatrix = Eigen::Map<Matrix<Scalar>>;
template <class Scalar>
using ConstMapMatrix = Eigen::Map<const Matrix<Scalar>>;

}  // namespace detail

/// Cross-correlation of every sample in `x` with the kernel bank `w`.
///
/// `w` is out_channels x (in_channels * k * k); column index is
/// (in_channel * k + ky) * k + kx, i.e. the row-major flattening of an
/// [out, in, k, k] kernel tensor. No bias is applied here.
template <class Scalar>
Batch<Scalar> conv_forward(const Matrix<Scalar>& w, const Batch<Scalar>& x, const ConvGeometry& g) {
  detail::check_weight(w.rows(), w.cols(), g);
  require_rows(x.rows(), g.input.size(), "conv_forward input");
  auto& ws = detail::workspace<Scalar>();
  const int positions = g.output().spatial();
  Batch<Scalar> y(g.output().size(), x.cols());
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    detail::im2col(x.col(b).data(), g, ws.cols);
    detail::MapMatrix<Scalar>(y.col(b).data(), positions, g.out_channels).noalias() = ws.cols * w.transpose();
  }
  return y;
}

/// Adjoint of conv_forward with respect to its input:
/// <conv_forward(w, x), y> == <x, conv_transpose(w, y)>.
template <class Scalar>
Batch<Scalar> conv_transpose(const Matrix<Scalar>& w, const Batch<Scalar>& y, const ConvGeometry& g) {
  detail::check_weight(w.rows(), w.cols(), g);
  require_rows(y.rows(), g.output().size(), "conv_transpose input");
  auto& ws = detail::workspace<Scalar>();
  const int positions = g.output().spatial();
  Batch<Scalar> x = Batch<Scalar>::Zero(g.input.size(), y.cols());
  for (Eigen::Index b = 0; b < y.cols(); ++b) {
    ws.cols.noalias() = detail::ConstMapMatrix<Scalar>(y.col(b).data(), positions, g.out_channels) * w;
    detail::col2im_add(ws.cols, g, x.col(b).data());
  }
  return x;
}

/// Kernel gradient summed over the batch: the adjoint of conv_forward with
/// respect to the weights, <conv_forward(dw, x), gy> == <dw, conv_kernel_grad(gy, x)>.
template <class Scalar>
Matrix<Scalar> conv_kernel_grad(const Batch<Scalar>& gy, const Batch<Scalar>& x, const ConvGeometry& g) {
  require_rows(x.rows(), g.input.size(), "conv_kernel_grad input");
  require_rows(gy.rows(), g.output().size(), "conv_kernel_grad output");
  if (gy.cols() != x.cols()) throw ShapeError("conv_kernel_grad: batch mismatch");
  auto& ws = detail::workspace<Scalar>();
  const int positions = g.output().spatial();
  Matrix<Scalar> dw = Matrix<Scalar>::Zero(g.out_channels, g.patch());
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    detail::im2col(x.col(b).data(), g, ws.cols);
    dw.noalias() += detail::ConstMapMatrix<Scalar>(gy.col(b).data(), positions, g.out_channels).transpose() * ws.cols;
  }
  return dw;
}

}  // namespace eqprop
