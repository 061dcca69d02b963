#pragma once

#include "eqprop/network.hpp"
#include "eqprop/rng.hpp"

#include <random>

namespace testutil {

using namespace eqprop;

inline Batch<double> uniform(int rows, int cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Batch<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline Batch<double> one_hot(int classes, const std::vector<int>& labels) {
  Batch<double> y = Batch<double>::Zero(classes, Eigen::Index(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) y(labels[i], Eigen::Index(i)) = 1.0;
  return y;
}

inline LayerSpec conv(int units, int padding, std::optional<PoolingSpec> pool = std::nullopt, int kernel = 3,
                      int stride = 1) {
  return LayerSpec{LayerKind::conv, units, kernel, stride, padding, pool};
}

inline LayerSpec linear(int units) { return LayerSpec{LayerKind::linear, units, 3, 1, 0, std::nullopt}; }

inline PoolingSpec avg(int f = 2, double alpha = 0.0) { return PoolingSpec{PoolKind::avg, f, alpha}; }
inline PoolingSpec maxp(int f = 2) { return PoolingSpec{PoolKind::max, f, 0.0}; }

inline Topology make_net(Shape3 input, std::vector<LayerSpec> layers, double init_scale = 1.0) {
  NetworkConfig cfg;
  cfg.input = input;
  cfg.layers = std::move(layers);
  cfg.init_scale = init_scale;
  return Topology(cfg);
}

/// Random weights and random biases in [-bias, bias].
inline Parameters<double> random_params(const Topology& topo, std::mt19937_64& rng, double bias = 0.0) {
  auto p = init_parameters<double>(topo, rng);
  if (bias > 0.0) {
    std::uniform_real_distribution<double> u(-bias, bias);
    for (int n = 1; n <= topo.depth(); ++n)
      for (Eigen::Index i = 0; i < p.b(n).size(); ++i) p.b(n)(i) = u(rng);
  }
  return p;
}

// Scalar loop oracles on one channel-major sample.

/// y[o][oy][ox] = sum_{c,ky,kx} w[o][c][ky][kx] x[c][oy*s+ky-p][ox*s+kx-p]
inline Eigen::VectorXd loop_conv(const Matrix<double>& w, const Eigen::VectorXd& x, const ConvGeometry& g) {
  const int ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  Eigen::VectorXd y = Eigen::VectorXd::Zero(g.out_channels * ho * wo);
  for (int o = 0; o < g.out_channels; ++o)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (int c = 0; c < g.input.channels; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * g.stride + ky - g.padding, ix = ox * g.stride + kx - g.padding;
              if (iy < 0 || ix < 0 || iy >= g.input.height || ix >= g.input.width) continue;
              acc += w(o, (c * k + ky) * k + kx) * x(c * g.input.spatial() + iy * g.input.width + ix);
            }
        y(o * ho * wo + oy * wo + ox) = acc;
      }
  return y;
}

inline Eigen::VectorXd loop_avg_pool(const Eigen::VectorXd& x, const Shape3& in, int f) {
  const int ho = in.height / f, wo = in.width / f;
  Eigen::VectorXd y = Eigen::VectorXd::Zero(in.channels * ho * wo);
  for (int c = 0; c < in.channels; ++c)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        double s = 0.0;
        for (int p = 0; p < f; ++p)
          for (int q = 0; q < f; ++q) s += x(c * in.spatial() + (i * f + p) * in.width + j * f + q);
        y(c * ho * wo + i * wo + j) = s / (f * f);
      }
  return y;
}

/// Max and its first row-major offset per zone.
inline std::pair<Eigen::VectorXd, std::vector<int>> loop_max_pool(const Eigen::VectorXd& x, const Shape3& in, int f) {
  const int ho = in.height / f, wo = in.width / f;
  Eigen::VectorXd y(in.channels * ho * wo);
  std::vector<int> idx(std::size_t(y.size()));
  for (int c = 0; c < in.channels; ++c)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        int arg = 0;
        for (int p = 0; p < f; ++p)
          for (int q = 0; q < f; ++q) {
            const double v = x(c * in.spatial() + (i * f + p) * in.width + j * f + q);
            if (v > best) {
              best = v;
              arg = p * f + q;
            }
          }
        const int o = c * ho * wo + i * wo + j;
        y(o) = best;
        idx[std::size_t(o)] = arg;
      }
  return {y, idx};
}

}  // namespace testutil
