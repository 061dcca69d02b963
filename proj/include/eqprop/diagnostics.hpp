#pragma once

#include "eqprop/spiking.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace eqprop {

enum class Route { forward, backward };
enum class Quantity { X, Y };

inline const char* route_name(Route r) { return r == Route::forward ? "forward" : "backward"; }
inline const char* quantity_name(Quantity q) { return q == Quantity::X ? "X" : "Y"; }

/// Statistics of one tapped tensor at one step. `sum` is the per-sample sum of
/// |activation| over all channels and positions, averaged over samples; mean
/// and std are taken over samples and positions together.
struct RouteRecord {
  int layer = 0;
  int timestep = 0;
  Route route = Route::forward;
  Quantity quantity = Quantity::X;
  double sum = 0.0;
  double mean = 0.0;
  double std = 0.0;
};

struct RouteStats {
  std::vector<int> layers;  // instrumented layer indices
  int steps = 0;
  std::vector<RouteRecord> records;

  bool empty() const { return records.empty(); }
};

template <class Scalar>
RouteRecord summarize(const Batch<Scalar>& a, int layer, int t, Route r, Quantity q) {
  RouteRecord rec{layer, t, r, q};
  if (a.size() == 0) return rec;
  const double count = double(a.size());
  rec.sum = double(a.cwiseAbs().sum()) / double(a.cols());
  rec.mean = double(a.sum()) / count;
  const double sq = double(a.squaredNorm()) / count;
  rec.std = std::sqrt(std::max(0.0, sq - rec.mean * rec.mean));
  return rec;
}

/// Taps the forward and backward routes of conv layers 2..N_c while the
/// network relaxes under a +beta nudge from its free fixed point:
///   X_forward = signal of layer n-1,  Y_forward = P(w_n * X_forward)
///   X_backward = signal of layer n+1, Y_backward = w_{n+1} ~* P^-1(X_backward)
/// The first conv layer is skipped since its forward input is the image itself.
template <class Scalar>
RouteStats probe_routes(Engine engine, const Topology& topo, const Parameters<Scalar>& params,
                        const Batch<Scalar>& input, const Batch<Scalar>& target, LossKind loss, Scalar beta,
                        const DynamicsConfig& dyn, const SpikingConfig& spk) {
  const int n_conv = topo.conv_count();
  if (n_conv < 2) throw ConfigError("probe_routes: network needs at least 2 conv layers, has " + std::to_string(n_conv));
  RouteStats stats;
  for (int n = 2; n <= n_conv; ++n) stats.layers.push_back(n);

  NeuronState<Scalar> st = NeuronState<Scalar>::with_input(topo, input);
  relax(engine, st, topo, params, dyn, spk, dyn.t_free);

  int t = 0;
  StepObserver<Scalar> tap = [&](const std::vector<Batch<Scalar>>& signals, const LayerInputs<Scalar>& in) {
    for (int n : stats.layers) {
      stats.records.push_back(summarize(signals[n - 1], n, t, Route::forward, Quantity::X));
      stats.records.push_back(summarize(in.forward[n], n, t, Route::forward, Quantity::Y));
      if (n < topo.depth()) {
        stats.records.push_back(summarize(signals[n + 1], n, t, Route::backward, Quantity::X));
        stats.records.push_back(summarize(in.backward[n], n, t, Route::backward, Quantity::Y));
      }
    }
    ++t;
  };
  Nudge<Scalar> nudge{beta, &target, loss};
  relax(engine, st, topo, params, dyn, spk, dyn.t_nudge, &nudge, &tap);
  stats.steps = t;
  return stats;
}

struct LayerImbalance {
  int layer = 0;
  double forward = 0.0;   // time-averaged summed |Y_forward|
  double backward = 0.0;  // time-averaged summed |Y_backward|
  double ratio = 0.0;     // forward / backward; +inf when backward is zero

  // How far the routes are apart regardless of direction: max(r, 1/r).
  double factor() const {
    if (!(ratio > 0.0)) return std::numeric_limits<double>::infinity();
    return std::max(ratio, 1.0 / ratio);
  }
};

/// Per instrumented layer, time-averaged forward over backward summed activations.
inline std::vector<LayerImbalance> imbalance_ratio(const RouteStats& stats) {
  if (stats.empty()) throw ConfigError("imbalance_ratio: no statistics recorded");
  std::vector<LayerImbalance> out;
  for (int layer : stats.layers) {
    LayerImbalance li;
    li.layer = layer;
    int nf = 0, nb = 0;
    for (const auto& r : stats.records) {
      if (r.layer != layer || r.quantity != Quantity::Y) continue;
      if (r.route == Route::forward) {
        li.forward += r.sum;
        ++nf;
      } else {
        li.backward += r.sum;
        ++nb;
      }
    }
    if (nf) li.forward /= nf;
    if (nb) li.backward /= nb;
    if (li.backward == 0.0)
      li.ratio = li.forward == 0.0 ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
    else
      li.ratio = li.forward / li.backward;
    out.push_back(li);
  }
  return out;
}

/// Largest imbalance factor over layers; NaN layers (both routes silent) are skipped.
inline double max_imbalance(const std::vector<LayerImbalance>& layers) {
  double m = 0.0;
  for (const auto& l : layers)
    if (!std::isnan(l.ratio)) m = std::max(m, l.factor());
  return m;
}

inline void write_route_csv(std::ostream& os, const RouteStats& stats) {
  os << "layer,timestep,route,quantity,sum,mean,std\n";
  os.precision(9);
  for (const auto& r : stats.records)
    os << r.layer << ',' << r.timestep << ',' << route_name(r.route) << ',' << quantity_name(r.quantity) << ','
       << r.sum << ',' << r.mean << ',' << r.std << '\n';
}

}  // namespace eqprop
