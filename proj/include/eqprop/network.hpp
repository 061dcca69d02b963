#pragma once

#include "eqprop/conv.hpp"
#include "eqprop/pooling.hpp"
#include "eqprop/tensor.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <vector>

namespace eqprop {

enum class LayerKind { conv, linear };

struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  int units = 0;  // output channels for conv, output features for linear
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  std::optional<PoolingSpec> pooling;
};

struct NetworkConfig {
  Shape3 input{1, 28, 28};
  std::vector<LayerSpec> layers;
  // Kaiming-uniform bound is init_scale / sqrt(fan_in).
  double init_scale = 1.0;
};

struct LayerGeometry {
  LayerSpec spec;
  Shape3 lower;     // state shape of the layer below
  ConvGeometry conv;  // conv layers only
  Shape3 pre_pool;  // conv output before pooling
  Shape3 state;     // shape of this layer's neuron state

  bool is_conv() const { return spec.kind == LayerKind::conv; }
  bool pooled() const { return spec.pooling.has_value(); }
  int fan_in() const { return is_conv() ? conv.patch() : lower.size(); }
  int weight_rows() const { return spec.units; }
  int weight_cols() const { return is_conv() ? conv.patch() : lower.size(); }
  int bias_size() const { return spec.units; }
  // Positions sharing one bias entry.
  int bias_spatial() const { return is_conv() ? state.spatial() : 1; }
};

/// Resolved layer shapes. Layer 0 is the clamped input; layers 1..depth() carry
/// neuron state and own the weight connecting them to the layer below.
class Topology {
 public:
  explicit Topology(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.layers.empty()) throw ConfigError("network.layers: at least one layer required");
    if (cfg_.input.size() <= 0) throw ConfigError("network.input: empty input shape");
    if (!(cfg_.init_scale > 0.0)) throw ConfigError("network.init_scale must be > 0");
    Shape3 lower = cfg_.input;
    bool seen_linear = false;
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
      const LayerSpec& spec = cfg_.layers[i];
      const std::string where = "network.layers[" + std::to_string(i) + "]";
      if (spec.units <= 0) throw ConfigError(where + ".units must be positive");
      LayerGeometry g;
      g.spec = spec;
      g.lower = lower;
      if (spec.kind == LayerKind::conv) {
        if (seen_linear) throw ConfigError(where + ": conv layers must precede all linear layers");
        g.conv = ConvGeometry{lower, spec.units, spec.kernel, spec.stride, spec.padding};
        try {
          g.conv.validate();
          g.pre_pool = g.conv.output();
          if (spec.pooling) {
            spec.pooling->validate();
            g.state = pooled_shape(g.pre_pool, spec.pooling->filter);
          } else {
            g.state = g.pre_pool;
          }
        } catch (const ConfigError& e) {
          throw ConfigError(where + ": " + e.what());
        }
      } else {
        if (spec.pooling) throw ConfigError(where + ": pooling is only valid on conv layers");
        seen_linear = true;
        g.state = g.pre_pool = Shape3{spec.units, 1, 1};
      }
      layers_.push_back(g);
      lower = g.state;
    }
  }

  const NetworkConfig& config() const { return cfg_; }
  int depth() const { return static_cast<int>(layers_.size()); }
  int conv_count() const {
    int n = 0;
    for (const auto& g : layers_) n += g.is_conv();
    return n;
  }
  const LayerGeometry& layer(int n) const { return layers_.at(static_cast<std::size_t>(n - 1)); }
  Shape3 state_shape(int n) const { return n == 0 ? cfg_.input : layer(n).state; }
  int output_size() const { return layers_.back().state.size(); }

 private:
  NetworkConfig cfg_;
  std::vector<LayerGeometry> layers_;
};

struct ParamTag {};
struct GradTag {};

/// Per-layer weights and biases, indexed by the layer that owns them (1-based).
template <class Scalar, class Tag>
struct LayerTensors {
  std::vector<Matrix<Scalar>> weights;
  std::vector<Vector<Scalar>> biases;

  static LayerTensors zeros(const Topology& topo) {
    LayerTensors t;
    for (int n = 1; n <= topo.depth(); ++n) {
      const auto& g = topo.layer(n);
      t.weights.push_back(Matrix<Scalar>::Zero(g.weight_rows(), g.weight_cols()));
      t.biases.push_back(Vector<Scalar>::Zero(g.bias_size()));
    }
    return t;
  }

  int depth() const { return static_cast<int>(weights.size()); }
  Matrix<Scalar>& w(int n) { return weights.at(static_cast<std::size_t>(n - 1)); }
  const Matrix<Scalar>& w(int n) const { return weights.at(static_cast<std::size_t>(n - 1)); }
  Vector<Scalar>& b(int n) { return biases.at(static_cast<std::size_t>(n - 1)); }
  const Vector<Scalar>& b(int n) const { return biases.at(static_cast<std::size_t>(n - 1)); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += static_cast<std::size_t>(w.size());
    for (const auto& b : biases) n += static_cast<std::size_t>(b.size());
    return n;
  }

  template <class Other>
  LayerTensors<Other, Tag> cast() const {
    LayerTensors<Other, Tag> out;
    for (const auto& w : weights) out.weights.push_back(w.template cast<Other>());
    for (const auto& b : biases) out.biases.push_back(b.template cast<Other>());
    return out;
  }

  void check_congruent(const Topology& topo, const char* what) const {
    if (depth() != topo.depth())
      throw ShapeError(std::string(what) + ": layer count " + std::to_string(depth()) + " vs network " +
                       std::to_string(topo.depth()));
    for (int n = 1; n <= topo.depth(); ++n) {
      const auto& g = topo.layer(n);
      if (w(n).rows() != g.weight_rows() || w(n).cols() != g.weight_cols() || b(n).size() != g.bias_size())
        throw ShapeError(std::string(what) + ": layer " + std::to_string(n) + " shape mismatch");
    }
  }

  LayerTensors& operator*=(Scalar s) {
    for (auto& w : weights) w *= s;
    for (auto& b : biases) b *= s;
    return *this;
  }

  LayerTensors operator-() const {
    LayerTensors out = *this;
    out *= Scalar(-1);
    return out;
  }
};

template <class Scalar>
using Parameters = LayerTensors<Scalar, ParamTag>;

template <class Scalar>
using GradientSet = LayerTensors<Scalar, GradTag>;

/// Kaiming-uniform weights (fan-in mode) and zero biases.
template <class Scalar>
Parameters<Scalar> init_parameters(const Topology& topo, std::mt19937_64& rng) {
  auto params = Parameters<Scalar>::zeros(topo);
  for (int n = 1; n <= topo.depth(); ++n) {
    const double bound = topo.config().init_scale / std::sqrt(double(topo.layer(n).fan_in()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto& w = params.w(n);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = Scalar(dist(rng));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Pooling dispatch for one conv layer's pooling stage.

template <class Scalar>
Batch<Scalar> pool(const LayerGeometry& g, const Batch<Scalar>& pre, PoolIndices* idx) {
  if (!g.pooled()) return pre;
  const PoolingSpec& p = *g.spec.pooling;
  if (p.kind == PoolKind::avg) return avg_pool(pre, g.pre_pool, p.filter);
  auto [y, i] = max_pool(pre, g.pre_pool, p.filter);
  if (idx) *idx = std::move(i);
  return y;
}

/// The backward-route inverse P^-1: max-unpool with indices, or nearest-neighbour
/// upsampling scaled by 1/alpha.
template <class Scalar>
Batch<Scalar> pool_inverse(const LayerGeometry& g, const Batch<Scalar>& y, const PoolIndices* idx) {
  if (!g.pooled()) return y;
  const PoolingSpec& p = *g.spec.pooling;
  if (p.kind == PoolKind::avg) return avg_unpool(y, g.pre_pool, p.filter, Scalar(p.effective_alpha()));
  if (!idx) throw ShapeError("max unpool requires pooling indices");
  return max_unpool(y, *idx, g.pre_pool);
}

// Transpose of pool(): gradient routed from the pooled map to the pre-pool map.
template <class Scalar>
Batch<Scalar> pool_adjoint(const LayerGeometry& g, const Batch<Scalar>& gy, const PoolIndices* idx) {
  if (!g.pooled()) return gy;
  const PoolingSpec& p = *g.spec.pooling;
  if (p.kind == PoolKind::avg) return avg_unpool(gy, g.pre_pool, p.filter, Scalar(p.filter * p.filter));
  if (!idx) throw ShapeError("max pool adjoint requires pooling indices");
  return max_unpool(gy, *idx, g.pre_pool);
}

// Transpose of pool_inverse().
template <class Scalar>
Batch<Scalar> pool_inverse_adjoint(const LayerGeometry& g, const Batch<Scalar>& gx, const PoolIndices* idx) {
  if (!g.pooled()) return gx;
  const PoolingSpec& p = *g.spec.pooling;
  if (p.kind == PoolKind::avg) {
    const Scalar scale = Scalar(p.filter * p.filter) / Scalar(p.effective_alpha());
    return avg_pool(gx, g.pre_pool, p.filter) * scale;
  }
  if (!idx) throw ShapeError("max unpool adjoint requires pooling indices");
  return max_gather(gx, *idx, g.pre_pool);
}

// ---------------------------------------------------------------------------
// Layer input function.

/// Bottom-up input of layer n from the signal of layer n-1: P(w_n * x) for conv
/// layers, w_n x for linear layers. Max-pool indices are written to `idx`.
template <class Scalar>
Batch<Scalar> forward_drive(const Topology& topo, const Parameters<Scalar>& params, int n,
                            const Batch<Scalar>& lower, PoolIndices* idx = nullptr) {
  const auto& g = topo.layer(n);
  require_rows(lower.rows(), g.lower.size(), "forward_drive input");
  if (!g.is_conv()) return params.w(n) * lower;
  return pool(g, conv_forward(params.w(n), lower, g.conv), idx);
}

/// Top-down input of layer n from the signal of layer n+1: w_{n+1} ~* P^-1(y)
/// for a conv upper layer, w_{n+1}^T y for a linear one. `upper_idx` are the
/// pooling indices of layer n+1's forward route.
template <class Scalar>
Batch<Scalar> backward_drive(const Topology& topo, const Parameters<Scalar>& params, int n,
                             const Batch<Scalar>& upper, const PoolIndices* upper_idx = nullptr) {
  const auto& g = topo.layer(n + 1);
  require_rows(upper.rows(), g.state.size(), "backward_drive input");
  if (!g.is_conv()) return params.w(n + 1).transpose() * upper;
  return conv_transpose(params.w(n + 1), pool_inverse(g, upper, upper_idx), g.conv);
}

/// Both summands of every layer's input, computed from one set of layer
/// signals (index 0 is the input layer). Forward terms are evaluated first so
/// each backward term uses the indices produced on this same call.
template <class Scalar>
struct LayerInputs {
  std::vector<Batch<Scalar>> forward;   // [1..N]
  std::vector<Batch<Scalar>> backward;  // [1..N-1]; empty at the top layer
  std::vector<std::optional<PoolIndices>> indices;  // [1..N], max-pooled layers only

  Batch<Scalar> phi(int n) const {
    if (backward[n].size() == 0) return forward[n];
    return forward[n] + backward[n];
  }
  const PoolIndices* index(int n) const { return indices[n] ? &*indices[n] : nullptr; }
};

template <class Scalar>
LayerInputs<Scalar> layer_inputs(const Topology& topo, const Parameters<Scalar>& params,
                                 const std::vector<Batch<Scalar>>& signals) {
  const int depth = topo.depth();
  if (static_cast<int>(signals.size()) != depth + 1) throw ShapeError("layer_inputs: signal count mismatch");
  LayerInputs<Scalar> in;
  in.forward.resize(depth + 1);
  in.backward.resize(depth + 1);
  in.indices.resize(depth + 1);
  for (int n = 1; n <= depth; ++n) {
    const auto& g = topo.layer(n);
    PoolIndices idx;
    in.forward[n] = forward_drive(topo, params, n, signals[n - 1], &idx);
    if (g.pooled() && g.spec.pooling->kind == PoolKind::max) in.indices[n] = std::move(idx);
  }
  for (int n = 1; n < depth; ++n) in.backward[n] = backward_drive(topo, params, n, signals[n + 1], in.index(n + 1));
  return in;
}

/// phi for a single layer n (1-based).
template <class Scalar>
Batch<Scalar> phi(const Topology& topo, const Parameters<Scalar>& params, const std::vector<Batch<Scalar>>& signals,
                  int n) {
  if (n < 1 || n > topo.depth()) throw ConfigError("phi: layer index " + std::to_string(n) + " out of range");
  Batch<Scalar> out = forward_drive(topo, params, n, signals[n - 1]);
  if (n < topo.depth()) {
    PoolIndices idx;
    const auto& upper = topo.layer(n + 1);
    const bool need_idx = upper.pooled() && upper.spec.pooling->kind == PoolKind::max;
    if (need_idx) forward_drive(topo, params, n + 1, signals[n], &idx);
    out += backward_drive(topo, params, n, signals[n + 1], need_idx ? &idx : nullptr);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vector-Jacobian products of the drive terms (used by the BPTT oracle).

/// Given g = dC/d(forward_drive(n, lower)), accumulates dC/dw_n into grads and
/// returns dC/d(lower).
template <class Scalar>
Batch<Scalar> forward_drive_vjp(const Topology& topo, const Parameters<Scalar>& params, int n, const Batch<Scalar>& g,
                                const Batch<Scalar>& lower, const PoolIndices* idx, GradientSet<Scalar>& grads) {
  const auto& geo = topo.layer(n);
  if (!geo.is_conv()) {
    grads.w(n).noalias() += g * lower.transpose();
    return params.w(n).transpose() * g;
  }
  Batch<Scalar> pre = pool_adjoint(geo, g, idx);
  grads.w(n) += conv_kernel_grad(pre, lower, geo.conv);
  return conv_transpose(params.w(n), pre, geo.conv);
}

/// Given g = dC/d(backward_drive(n, upper)), accumulates dC/dw_{n+1} into grads
/// and returns dC/d(upper).
template <class Scalar>
Batch<Scalar> backward_drive_vjp(const Topology& topo, const Parameters<Scalar>& params, int n, const Batch<Scalar>& g,
                                 const Batch<Scalar>& upper, const PoolIndices* upper_idx, GradientSet<Scalar>& grads) {
  const auto& geo = topo.layer(n + 1);
  if (!geo.is_conv()) {
    grads.w(n + 1).noalias() += upper * g.transpose();
    return params.w(n + 1) * g;
  }
  Batch<Scalar> unpooled = pool_inverse(geo, upper, upper_idx);
  grads.w(n + 1) += conv_kernel_grad(unpooled, g, geo.conv);
  return pool_inverse_adjoint(geo, conv_forward(params.w(n + 1), g, geo.conv), upper_idx);
}

template <class Scalar>
Vector<Scalar> expanded_bias(const Topology& topo, const Parameters<Scalar>& params, int n) {
  return expand_bias(params.b(n), topo.layer(n).bias_spatial());
}

}  // namespace eqprop
