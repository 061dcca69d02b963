#pragma once

#include "eqprop/tensor.hpp"

#include <utility>

namespace eqprop {

enum class PoolKind { max, avg };

struct PoolingSpec {
  PoolKind kind = PoolKind::avg;
  int filter = 2;
  // Backward scale of the average-pool inverse; <= 0 selects filter^2.
  double alpha = 0.0;

  double effective_alpha() const { return alpha > 0.0 ? alpha : double(filter) * filter; }

  void validate() const {
    if (filter < 1) throw ConfigError("pooling.filter must be >= 1");
    if (alpha < 0.0) throw ConfigError("pooling.alpha must be > 0");
  }
};

/// Relative argmax of every pooling zone, laid out like the pooled output.
/// Each entry is the row-major offset p * F + q of the winner inside its zone.
struct PoolIndices {
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> offset;
  int filter = 1;

  std::pair<int, int> at(Eigen::Index row, Eigen::Index sample) const {
    const int o = offset(row, sample);
    return {o / filter, o % filter};
  }
};

inline Shape3 pooled_shape(const Shape3& in, int filter) {
  if (filter < 1) throw ConfigError("pooling filter must be >= 1");
  if (in.height % filter != 0 || in.width % filter != 0)
    throw ConfigError("pooling: spatial dims " + in.str() + " not divisible by filter " + std::to_string(filter));
  return {in.channels, in.height / filter, in.width / filter};
}

/// Per-zone maximum; ties go to the first element in a row-major zone scan.
template <class Scalar>
std::pair<Batch<Scalar>, PoolIndices> max_pool(const Batch<Scalar>& x, const Shape3& in, int filter) {
  require_rows(x.rows(), in.size(), "max_pool input");
  const Shape3 out = pooled_shape(in, filter);
  Batch<Scalar> y(out.size(), x.cols());
  PoolIndices idx{decltype(PoolIndices::offset)(out.size(), x.cols()), filter};
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    const Scalar* src = x.col(b).data();
    for (int c = 0; c < out.channels; ++c) {
      for (int i = 0; i < out.height; ++i) {
        for (int j = 0; j < out.width; ++j) {
          const Scalar* zone = src + c * in.spatial() + (i * filter) * in.width + j * filter;
          Scalar best = zone[0];
          int arg = 0;
          for (int p = 0; p < filter; ++p)
            for (int q = 0; q < filter; ++q)
              if (zone[p * in.width + q] > best) {
                best = zone[p * in.width + q];
                arg = p * filter + q;
              }
          const Eigen::Index r = c * out.spatial() + i * out.width + j;
          y(r, b) = best;
          idx.offset(r, b) = arg;
        }
      }
    }
  }
  return {std::move(y), std::move(idx)};
}

/// Place each pooled value at its recorded argmax; zeros elsewhere.
template <class Scalar>
Batch<Scalar> max_unpool(const Batch<Scalar>& y, const PoolIndices& idx, const Shape3& in) {
  const Shape3 out = pooled_shape(in, idx.filter);
  require_rows(y.rows(), out.size(), "max_unpool input");
  if (idx.offset.rows() != y.rows() || idx.offset.cols() != y.cols())
    throw ShapeError("max_unpool: index shape does not match pooled tensor");
  const int f = idx.filter;
  Batch<Scalar> x = Batch<Scalar>::Zero(in.size(), y.cols());
  for (Eigen::Index b = 0; b < y.cols(); ++b)
    for (int c = 0; c < out.channels; ++c)
      for (int i = 0; i < out.height; ++i)
        for (int j = 0; j < out.width; ++j) {
          const Eigen::Index r = c * out.spatial() + i * out.width + j;
          const int o = idx.offset(r, b);
          x(c * in.spatial() + (i * f + o / f) * in.width + j * f + o % f, b) = y(r, b);
        }
  return x;
}

/// Adjoint of max_unpool: read each zone's value at its recorded argmax.
template <class Scalar>
Batch<Scalar> max_gather(const Batch<Scalar>& x, const PoolIndices& idx, const Shape3& in) {
  require_rows(x.rows(), in.size(), "max_gather input");
  const Shape3 out = pooled_shape(in, idx.filter);
  const int f = idx.filter;
  Batch<Scalar> y(out.size(), x.cols());
  for (Eigen::Index b = 0; b < x.cols(); ++b)
    for (int c = 0; c < out.channels; ++c)
      for (int i = 0; i < out.height; ++i)
        for (int j = 0; j < out.width; ++j) {
          const Eigen::Index r = c * out.spatial() + i * out.width + j;
          const int o = idx.offset(r, b);
          y(r, b) = x(c * in.spatial() + (i * f + o / f) * in.width + j * f + o % f, b);
        }
  return y;
}

template <class Scalar>
Batch<Scalar> avg_pool(const Batch<Scalar>& x, const Shape3& in, int filter) {
  require_rows(x.rows(), in.size(), "avg_pool input");
  const Shape3 out = pooled_shape(in, filter);
  const Scalar scale = Scalar(1) / Scalar(filter * filter);
  Batch<Scalar> y = Batch<Scalar>::Zero(out.size(), x.cols());
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    const Scalar* src = x.col(b).data();
    Scalar* dst = y.col(b).data();
    for (int c = 0; c < in.channels; ++c)
      for (int r = 0; r < in.height; ++r) {
        const Scalar* row = src + c * in.spatial() + r * in.width;
        Scalar* acc = dst + c * out.spatial() + (r / filter) * out.width;
        for (int j = 0; j < out.width; ++j)
          for (int q = 0; q < filter; ++q) acc[j] += row[j * filter + q];
      }
  }
  return y * scale;
}

/// Nearest-neighbour upsampling divided by alpha. With alpha = F^2 this is the
/// exact adjoint of avg_pool.
template <class Scalar>
Batch<Scalar> avg_unpool(const Batch<Scalar>& y, const Shape3& in, int filter, Scalar alpha) {
  if (!(alpha > Scalar(0))) throw ConfigError("avg_unpool: alpha must be > 0");
  const Shape3 out = pooled_shape(in, filter);
  require_rows(y.rows(), out.size(), "avg_unpool input");
  const Scalar inv = Scalar(1) / alpha;
  Batch<Scalar> x(in.size(), y.cols());
  for (Eigen::Index b = 0; b < y.cols(); ++b) {
    Scalar* dst = x.col(b).data();
    for (int c = 0; c < in.channels; ++c)
      for (int r = 0; r < in.height; ++r)
        for (int s = 0; s < in.width; ++s)
          dst[c * in.spatial() + r * in.width + s] =
              y(c * out.spatial() + (r / filter) * out.width + s / filter, b) * inv;
  }
  return x;
}

}  // namespace eqprop
