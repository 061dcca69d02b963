#pragma once

#include "eqprop/memory.hpp"
#include "eqprop/spiking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace eqprop {

/// One recorded step of the unrolled dynamics.
template <class Scalar>
struct TapeEntry {
  std::vector<Batch<Scalar>> signals;  // layer signals consumed by the step (rho(xi) or spikes), [0..N]
  std::vector<Batch<Scalar>> xi_prev;  // [1..N]
  std::vector<Batch<Scalar>> u;        // pre-clip update, [1..N]
  std::vector<Batch<Scalar>> z;        // spiking only: V + e before firing, [1..N]
  std::vector<std::optional<PoolIndices>> indices;

  std::size_t bytes() const {
    std::size_t total = 0;
    for (const auto* field : {&signals, &xi_prev, &u, &z})
      for (const auto& m : *field) total += buffer_bytes(m);
    for (const auto& i : indices)
      if (i) total += static_cast<std::size_t>(i->offset.size()) * sizeof(int);
    return total;
  }
};

template <class Scalar>
using UnrollTape = std::vector<TapeEntry<Scalar>>;

struct SurrogateConfig {
  // Straight-through window: ds/dz = 1 where |z - threshold| <= half_width.
  double half_width = 0.5;
};

/// Runs `horizon` free steps from the zero state, recording every step. The
/// arithmetic mirrors step_crnn / step_snn exactly, so the final state equals
/// relax() on the same inputs.
template <class Scalar>
NeuronState<Scalar> unroll(Engine engine, const Topology& topo, const Parameters<Scalar>& params,
                           const Batch<Scalar>& input, const DynamicsConfig& dyn, const SpikingConfig& spk,
                           int horizon, UnrollTape<Scalar>& tape, MemoryLedger* ledger = nullptr,
                           std::vector<MemoryLedger::Handle>* handles = nullptr) {
  const int depth = topo.depth();
  const Scalar eps = Scalar(dyn.epsilon);
  const Scalar lambda = Scalar(spk.lambda);
  const Scalar v_th = Scalar(spk.threshold);
  NeuronState<Scalar> st = NeuronState<Scalar>::with_input(topo, input);
  tape.clear();
  tape.reserve(std::size_t(horizon));
  for (int t = 0; t < horizon; ++t) {
    TapeEntry<Scalar> e;
    if (engine == Engine::snn) {
      e.signals = st.s;
    } else {
      e.signals.resize(std::size_t(depth + 1));
      e.signals[0] = st.xi[0];
      for (int n = 1; n <= depth; ++n) e.signals[n] = hard_sigmoid(st.xi[n]);
    }
    e.xi_prev = st.xi;
    e.u.resize(std::size_t(depth + 1));
    if (engine == Engine::snn) e.z.resize(std::size_t(depth + 1));
    LayerInputs<Scalar> in = layer_inputs(topo, params, e.signals);
    for (int n = 1; n <= depth; ++n) {
      if (engine == Engine::snn) st.d[n] = predictive_decode(st.d[n], in.phi(n), lambda);
      Batch<Scalar> drive = detail::layer_drive(topo, params, n, engine == Engine::snn ? st.d[n] : in.phi(n), st.xi[n],
                                                (const Nudge<Scalar>*)nullptr);
      e.u[n] = (Scalar(1) - eps) * st.xi[n] + eps * hard_sigmoid_deriv(st.xi[n], dyn.boundary).cwiseProduct(drive);
      Batch<Scalar> xi_new = hard_sigmoid(e.u[n]);
      if (engine == Engine::snn) {
        Batch<Scalar> enc = predictive_encode(xi_new, st.rho_prev[n], lambda);
        e.z[n] = st.v[n] + enc;
        auto q = sigma_delta_step(st.v[n], enc, v_th);
        st.s[n] = std::move(q.spikes);
        st.v[n] = std::move(q.v_next);
        st.rho_prev[n] = xi_new;
      } else {
        st.rho_prev[n] = e.signals[n];
      }
      st.xi[n] = std::move(xi_new);
    }
    if (engine == Engine::snn) {
      auto q = sigma_delta_step(st.v[0], st.xi[0], v_th);
      st.s[0] = std::move(q.spikes);
      st.v[0] = std::move(q.v_next);
    }
    e.indices = std::move(in.indices);
    if (ledger && handles) handles->push_back(ledger->track("tape", e.bytes()));
    tape.push_back(std::move(e));
  }
  return st;
}

/// Descent direction -dC/dtheta of the final-step objective, obtained by exact
/// reverse-mode differentiation through `horizon` steps of the free dynamics
/// started from the zero state. Spiking mode replaces the spike function's
/// derivative with a straight-through window. Averaged over the batch.
template <class Scalar>
GradientSet<Scalar> bptt_gradients(Engine engine, const Topology& topo, const Parameters<Scalar>& params,
                                   const Batch<Scalar>& input, const Batch<Scalar>& target, LossKind loss,
                                   const DynamicsConfig& dyn, const SpikingConfig& spk, int horizon,
                                   MemoryLedger* ledger = nullptr, SurrogateConfig surrogate = {},
                                   Batch<Scalar>* final_output = nullptr) {
  if (horizon < 1) throw ConfigError("bptt_gradients: horizon must be >= 1");
  params.check_congruent(topo, "bptt_gradients");
  require_rows(target.rows(), topo.output_size(), "target");
  const int depth = topo.depth();
  const Scalar eps = Scalar(dyn.epsilon);
  const Scalar lambda = Scalar(spk.lambda);
  const Scalar v_th = Scalar(spk.threshold);
  std::optional<MemoryLedger> local;
  MemoryLedger& mem = ledger ? *ledger : local.emplace();

  mem.set_phase("forward");
  auto h_state = mem.track("state", NeuronState<Scalar>::zeros(topo, input.cols()).bytes());
  UnrollTape<Scalar> tape;
  std::vector<MemoryLedger::Handle> tape_handles;
  const NeuronState<Scalar> st = unroll(engine, topo, params, input, dyn, spk, horizon, tape, &mem, &tape_handles);

  mem.set_phase("backward");
  auto grads = GradientSet<Scalar>::zeros(topo);
  auto h_grads = mem.track("gradients", grads.scalar_count() * sizeof(Scalar));
  const Eigen::Index batch = input.cols();
  std::vector<Batch<Scalar>> g_xi(depth + 1), g_d(depth + 1), g_v(depth + 1), g_s(depth + 1);
  for (int n = 1; n <= depth; ++n) {
    const int rows = topo.state_shape(n).size();
    g_xi[n] = g_d[n] = g_v[n] = g_s[n] = Batch<Scalar>::Zero(rows, batch);
  }
  const Batch<Scalar> out = hard_sigmoid(st.xi[depth]);
  if (final_output) *final_output = out;
  g_xi[depth] = objective_grad(loss, out, target) / Scalar(batch);
  std::size_t adjoint_bytes = 0;
  for (int n = 1; n <= depth; ++n) adjoint_bytes += 4 * buffer_bytes(g_xi[n]);
  auto h_adjoint = mem.track("adjoint", adjoint_bytes);

  for (int t = horizon - 1; t >= 0; --t) {
    const auto& e = tape[std::size_t(t)];
    std::vector<Batch<Scalar>> nx(depth + 1), nd(depth + 1), nv(depth + 1), ns(depth + 1);
    for (int n = 1; n <= depth; ++n) {
      nx[n] = nd[n] = nv[n] = ns[n] = Batch<Scalar>::Zero(g_xi[n].rows(), batch);
    }
    for (int n = 1; n <= depth; ++n) {
      const Batch<Scalar>& xi_prev = e.xi_prev[n];
      Batch<Scalar> g_total = g_xi[n];
      if (engine == Engine::snn) {
        Batch<Scalar> sur = e.z[n].unaryExpr([&](Scalar z) {
          return std::abs(z - v_th) <= Scalar(surrogate.half_width) ? Scalar(1) : Scalar(0);
        });
        Batch<Scalar> gz = g_v[n].cwiseProduct(Batch<Scalar>::Ones(sur.rows(), sur.cols()) - sur) + g_s[n].cwiseProduct(sur);
        nv[n] += gz;
        g_total += gz / lambda;
        nx[n] -= gz * ((Scalar(1) - lambda) / lambda);
      }
      Batch<Scalar> gu = g_total.cwiseProduct(interior_mask(e.u[n]));
      nx[n] += (Scalar(1) - eps) * gu;
      Batch<Scalar> g_drive = eps * hard_sigmoid_deriv(xi_prev, dyn.boundary).cwiseProduct(gu);
      grads.b(n) += reduce_bias<Scalar>(g_drive, topo.layer(n).spec.units, topo.layer(n).bias_spatial());
      Batch<Scalar> g_phi;
      if (engine == Engine::snn) {
        Batch<Scalar> gd_total = g_d[n] + g_drive;
        nd[n] += (Scalar(1) - lambda) * gd_total;
        g_phi = lambda * gd_total;
      } else {
        g_phi = std::move(g_drive);
      }
      const PoolIndices* idx_n = e.indices[n] ? &*e.indices[n] : nullptr;
      Batch<Scalar> g_lower = forward_drive_vjp(topo, params, n, g_phi, e.signals[n - 1], idx_n, grads);
      if (n > 1) (engine == Engine::snn ? ns : nx)[n - 1] += g_lower;
      if (n < depth) {
        const PoolIndices* idx_up = e.indices[n + 1] ? &*e.indices[n + 1] : nullptr;
        Batch<Scalar> g_upper = backward_drive_vjp(topo, params, n, g_phi, e.signals[n + 1], idx_up, grads);
        (engine == Engine::snn ? ns : nx)[n + 1] += g_upper;
      }
    }
    g_xi = std::move(nx);
    g_d = std::move(nd);
    g_v = std::move(nv);
    g_s = std::move(ns);
  }
  grads *= Scalar(-1);
  return grads;
}

/// Final-step objective after `horizon` free steps of the non-spiking dynamics.
template <class Scalar>
Scalar unrolled_objective(const Topology& topo, const Parameters<Scalar>& params, const Batch<Scalar>& input,
                          const Batch<Scalar>& target, LossKind loss, const DynamicsConfig& dyn, int horizon) {
  NeuronState<Scalar> st = NeuronState<Scalar>::with_input(topo, input);
  relax_crnn(st, topo, params, dyn, horizon);
  return objective(loss, Batch<Scalar>(hard_sigmoid(st.xi[topo.depth()])), target);
}

/// Smallest distance of any pre-clip update to the clip kinks at 0 and 1 over
/// the whole unrolled trajectory. Points closer than the finite-difference
/// step should be rejected.
template <class Scalar>
Scalar kink_margin(const Topology& topo, const Parameters<Scalar>& params, const Batch<Scalar>& input,
                   const DynamicsConfig& dyn, int horizon) {
  NeuronState<Scalar> st = NeuronState<Scalar>::with_input(topo, input);
  Scalar margin = std::numeric_limits<Scalar>::infinity();
  const Scalar eps = Scalar(dyn.epsilon);
  for (int t = 0; t < horizon; ++t) {
    std::vector<Batch<Scalar>> signals(topo.depth() + 1);
    signals[0] = st.xi[0];
    for (int n = 1; n <= topo.depth(); ++n) signals[n] = hard_sigmoid(st.xi[n]);
    LayerInputs<Scalar> in = layer_inputs(topo, params, signals);
    for (int n = 1; n <= topo.depth(); ++n) {
      Batch<Scalar> drive = detail::layer_drive(topo, params, n, in.phi(n), st.xi[n], (const Nudge<Scalar>*)nullptr);
      Batch<Scalar> u =
          (Scalar(1) - eps) * st.xi[n] + eps * hard_sigmoid_deriv(st.xi[n], dyn.boundary).cwiseProduct(drive);
      margin = std::min({margin, u.cwiseAbs().minCoeff(), (u.array() - Scalar(1)).abs().minCoeff()});
      st.xi[n] = hard_sigmoid(u);
    }
  }
  return margin;
}

/// Central differences -(C(theta + h) - C(theta - h)) / 2h for every scalar
/// parameter, re-running the full non-spiking relaxation for each probe.
template <class Scalar>
GradientSet<Scalar> finite_diff_gradients(const Topology& topo, const Parameters<Scalar>& params,
                                          const Batch<Scalar>& input, const Batch<Scalar>& target, LossKind loss,
                                          const DynamicsConfig& dyn, int horizon, Scalar h) {
  if (!(h > Scalar(0))) throw ConfigError("finite_diff_gradients: step must be > 0");
  auto grads = GradientSet<Scalar>::zeros(topo);
  Parameters<Scalar> probe = params;
  auto central = [&](Scalar& slot) {
    const Scalar keep = slot;
    slot = keep + h;
    const Scalar up = unrolled_objective(topo, probe, input, target, loss, dyn, horizon);
    slot = keep - h;
    const Scalar down = unrolled_objective(topo, probe, input, target, loss, dyn, horizon);
    slot = keep;
    return -(up - down) / (Scalar(2) * h);
  };
  for (int n = 1; n <= topo.depth(); ++n) {
    for (Eigen::Index i = 0; i < probe.w(n).size(); ++i) grads.w(n).data()[i] = central(probe.w(n).data()[i]);
    for (Eigen::Index i = 0; i < probe.b(n).size(); ++i) grads.b(n)(i) = central(probe.b(n)(i));
  }
  return grads;
}

struct GradientAgreement {
  double cosine = 0.0;
  double rel_error = 0.0;
};

/// Per-layer agreement of a against reference b (weights and bias together):
/// cosine = <a,b>/(|a||b|), rel = |a - b| / max(|b|, tiny).
template <class Scalar>
std::vector<GradientAgreement> compare_gradients(const GradientSet<Scalar>& a, const GradientSet<Scalar>& b) {
  if (a.depth() != b.depth()) throw ShapeError("compare_gradients: layer count mismatch");
  std::vector<GradientAgreement> out;
  for (int n = 1; n <= a.depth(); ++n) {
    if (a.w(n).rows() != b.w(n).rows() || a.w(n).cols() != b.w(n).cols() || a.b(n).size() != b.b(n).size())
      throw ShapeError("compare_gradients: layer " + std::to_string(n) + " shape mismatch");
    const double dot = double((a.w(n).cwiseProduct(b.w(n))).sum() + a.b(n).dot(b.b(n)));
    const double na = std::sqrt(double(a.w(n).squaredNorm() + a.b(n).squaredNorm()));
    const double nb = std::sqrt(double(b.w(n).squaredNorm() + b.b(n).squaredNorm()));
    const double diff = std::sqrt(double((a.w(n) - b.w(n)).squaredNorm() + (a.b(n) - b.b(n)).squaredNorm()));
    GradientAgreement g;
    g.cosine = (na > 0.0 && nb > 0.0) ? dot / (na * nb) : (na == nb ? 1.0 : 0.0);
    g.rel_error = diff / std::max(nb, 1e-300);
    out.push_back(g);
  }
  return out;
}

}  // namespace eqprop
