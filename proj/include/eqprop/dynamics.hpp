#pragma once

#include "eqprop/activation.hpp"
#include "eqprop/network.hpp"
#include "eqprop/state.hpp"

#include <functional>
#include <optional>
#include <string>

namespace eqprop {

struct DynamicsConfig {
  double epsilon = 0.9;
  int t_free = 250;
  int t_nudge = 50;
  DerivBoundary boundary = DerivBoundary::inclusive;

  void validate() const {
    if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("dynamics.epsilon must lie in (0, 1]");
    if (t_free < 1) throw ConfigError("dynamics.t_free must be >= 1");
    if (t_nudge < 1) throw ConfigError("dynamics.t_nudge must be >= 1");
  }
};

/// Called once per step with the layer signals the step consumed and both
/// summands of every layer's input.
template <class Scalar>
using StepObserver = std::function<void(const std::vector<Batch<Scalar>>& signals, const LayerInputs<Scalar>& inputs)>;

namespace detail {

// Euler step of one layer: xi <- rho((1 - eps) xi + eps rho'(xi) drive).
template <class Scalar>
void integrate(Batch<Scalar>& xi, const Batch<Scalar>& drive, const DynamicsConfig& cfg) {
  const Scalar eps = Scalar(cfg.epsilon);
  Batch<Scalar> u = (Scalar(1) - eps) * xi + eps * hard_sigmoid_deriv(xi, cfg.boundary).cwiseProduct(drive);
  xi = hard_sigmoid(u);
}

template <class Scalar>
Batch<Scalar> layer_drive(const Topology& topo, const Parameters<Scalar>& params, int n,
                          const Batch<Scalar>& drive_input, const Batch<Scalar>& xi_n, const Nudge<Scalar>* nudge) {
  Batch<Scalar> drive = drive_input;
  drive.colwise() += expanded_bias(topo, params, n);
  if (n == topo.depth() && nudge) {
    Batch<Scalar> extra = nudge_drive(*nudge, Batch<Scalar>(hard_sigmoid(xi_n)));
    if (nudge->beta != Scalar(0)) drive += extra;
  }
  return drive;
}

}  // namespace detail

/// One synchronous Euler step of the non-spiking network. Layer signals are
/// rho(xi) of the previous step; layer 0 contributes its clamped input.
/// Returns the layer inputs used, including max-pool indices.
template <class Scalar>
LayerInputs<Scalar> step_crnn(NeuronState<Scalar>& st, const Topology& topo, const Parameters<Scalar>& params,
                              const DynamicsConfig& cfg, const Nudge<Scalar>* nudge = nullptr,
                              const StepObserver<Scalar>* observer = nullptr) {
  const int depth = topo.depth();
  if (st.depth() != depth) throw ShapeError("step_crnn: state depth mismatch");
  std::vector<Batch<Scalar>> signals(depth + 1);
  signals[0] = st.xi[0];
  for (int n = 1; n <= depth; ++n) signals[n] = hard_sigmoid(st.xi[n]);
  LayerInputs<Scalar> inputs = layer_inputs(topo, params, signals);
  if (observer && *observer) (*observer)(signals, inputs);
  for (int n = 1; n <= depth; ++n) {
    Batch<Scalar> drive = detail::layer_drive(topo, params, n, inputs.phi(n), st.xi[n], nudge);
    st.rho_prev[n] = signals[n];
    detail::integrate(st.xi[n], drive, cfg);
  }
  return inputs;
}

/// Runs `steps` steps; returns the last step's layer inputs (empty if steps == 0).
template <class Scalar>
std::optional<LayerInputs<Scalar>> relax_crnn(NeuronState<Scalar>& st, const Topology& topo,
                                              const Parameters<Scalar>& params, const DynamicsConfig& cfg, int steps,
                                              const Nudge<Scalar>* nudge = nullptr,
                                              const StepObserver<Scalar>* observer = nullptr) {
  std::optional<LayerInputs<Scalar>> last;
  for (int t = 0; t < steps; ++t) last = step_crnn(st, topo, params, cfg, nudge, observer);
  return last;
}

/// Hopfield energy of each sample, summed over the batch:
/// 1/2 sum xi^2 - sum_n <rho(xi_n), forward_drive(n, rho(xi_{n-1}))> - sum b rho(xi).
/// Every inter-layer pair appears once with its shared weight.
template <class Scalar>
Scalar energy(const NeuronState<Scalar>& st, const Topology& topo, const Parameters<Scalar>& params) {
  if (st.depth() != topo.depth()) throw ShapeError("energy: state depth mismatch");
  params.check_congruent(topo, "energy");
  Scalar e = 0;
  Batch<Scalar> lower = st.xi[0];
  for (int n = 1; n <= topo.depth(); ++n) {
    require_rows(st.xi[n].rows(), topo.state_shape(n).size(), "energy state");
    Batch<Scalar> rho = hard_sigmoid(st.xi[n]);
    e += Scalar(0.5) * st.xi[n].squaredNorm();
    e -= rho.cwiseProduct(forward_drive(topo, params, n, lower)).sum();
    e -= (expanded_bias(topo, params, n).transpose() * rho).sum();
    lower = std::move(rho);
  }
  return e;
}

}  // namespace eqprop
