#pragma once

#include "eqprop/dynamics.hpp"

namespace eqprop {

struct SpikingConfig {
  double lambda = 0.6;     // prediction factor
  double threshold = 0.5;  // sigma-delta firing threshold

  void validate() const {
    if (!(lambda > 0.0 && lambda <= 1.0)) throw ConfigError("spiking.lambda must lie in (0, 1]");
  }
};

template <class Scalar>
struct SigmaDeltaOutput {
  Batch<Scalar> spikes;  // entries in {0, 1}
  Batch<Scalar> v_next;
};

/// Subtractive sigma-delta quantizer: fire where v + x exceeds the threshold,
/// then remove one unit of charge per spike.
template <class Scalar>
SigmaDeltaOutput<Scalar> sigma_delta_step(const Batch<Scalar>& v, const Batch<Scalar>& x, Scalar v_th) {
  if (v.rows() != x.rows() || v.cols() != x.cols()) throw ShapeError("sigma_delta_step: shape mismatch");
  SigmaDeltaOutput<Scalar> out;
  Batch<Scalar> z = v + x;
  out.spikes = z.unaryExpr([v_th](Scalar a) { return a > v_th ? Scalar(1) : Scalar(0); });
  out.v_next = z - out.spikes;
  return out;
}

/// d <- (1 - lambda) d + lambda * weighted_spikes.
template <class Scalar>
Batch<Scalar> predictive_decode(const Batch<Scalar>& d_prev, const Batch<Scalar>& weighted_spikes, Scalar lambda) {
  if (d_prev.rows() != weighted_spikes.rows() || d_prev.cols() != weighted_spikes.cols())
    throw ShapeError("predictive_decode: shape mismatch");
  return (Scalar(1) - lambda) * d_prev + lambda * weighted_spikes;
}

/// e = (rho_now - (1 - lambda) rho_prev) / lambda; a constant signal encodes to itself.
template <class Scalar>
Batch<Scalar> predictive_encode(const Batch<Scalar>& rho_now, const Batch<Scalar>& rho_prev, Scalar lambda) {
  if (lambda == Scalar(0)) throw ConfigError("predictive_encode: lambda must be non-zero");
  if (rho_now.rows() != rho_prev.rows() || rho_now.cols() != rho_prev.cols())
    throw ShapeError("predictive_encode: shape mismatch");
  return (rho_now - (Scalar(1) - lambda) * rho_prev) / lambda;
}

/// One step of the spiking network. Every layer's input phi is built from the
/// spikes emitted on the previous step (layer 0's spikes come from sigma-delta
/// encoding of the clamped pixels), decoded, integrated into xi, re-encoded and
/// quantized into new spikes. The input encoder then advances one step.
template <class Scalar>
LayerInputs<Scalar> step_snn(NeuronState<Scalar>& st, const Topology& topo, const Parameters<Scalar>& params,
                             const DynamicsConfig& cfg, const SpikingConfig& scfg, const Nudge<Scalar>* nudge = nullptr,
                             const StepObserver<Scalar>* observer = nullptr) {
  const int depth = topo.depth();
  if (st.depth() != depth) throw ShapeError("step_snn: state depth mismatch");
  const Scalar lambda = Scalar(scfg.lambda);
  const Scalar v_th = Scalar(scfg.threshold);
  LayerInputs<Scalar> inputs = layer_inputs(topo, params, st.s);
  if (observer && *observer) (*observer)(st.s, inputs);
  for (int n = 1; n <= depth; ++n) {
    st.d[n] = predictive_decode(st.d[n], inputs.phi(n), lambda);
    Batch<Scalar> drive = detail::layer_drive(topo, params, n, st.d[n], st.xi[n], nudge);
    detail::integrate(st.xi[n], drive, cfg);
    Batch<Scalar> rho_now = hard_sigmoid(st.xi[n]);
    auto q = sigma_delta_step(st.v[n], predictive_encode(rho_now, st.rho_prev[n], lambda), v_th);
    st.s[n] = std::move(q.spikes);
    st.v[n] = std::move(q.v_next);
    st.rho_prev[n] = std::move(rho_now);
  }
  auto q = sigma_delta_step(st.v[0], st.xi[0], v_th);
  st.s[0] = std::move(q.spikes);
  st.v[0] = std::move(q.v_next);
  return inputs;
}

template <class Scalar>
std::optional<LayerInputs<Scalar>> relax_snn(NeuronState<Scalar>& st, const Topology& topo,
                                             const Parameters<Scalar>& params, const DynamicsConfig& cfg,
                                             const SpikingConfig& scfg, int steps, const Nudge<Scalar>* nudge = nullptr,
                                             const StepObserver<Scalar>* observer = nullptr) {
  std::optional<LayerInputs<Scalar>> last;
  for (int t = 0; t < steps; ++t) last = step_snn(st, topo, params, cfg, scfg, nudge, observer);
  return last;
}

enum class Engine { crnn, snn };

/// Relax with whichever engine the run uses.
template <class Scalar>
std::optional<LayerInputs<Scalar>> relax(Engine engine, NeuronState<Scalar>& st, const Topology& topo,
                                         const Parameters<Scalar>& params, const DynamicsConfig& cfg,
                                         const SpikingConfig& scfg, int steps, const Nudge<Scalar>* nudge = nullptr,
                                         const StepObserver<Scalar>* observer = nullptr) {
  if (engine == Engine::snn) return relax_snn(st, topo, params, cfg, scfg, steps, nudge, observer);
  return relax_crnn(st, topo, params, cfg, steps, nudge, observer);
}

}  // namespace eqprop
