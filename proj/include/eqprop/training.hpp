#pragma once

#include "eqprop/data.hpp"
#include "eqprop/memory.hpp"
#include "eqprop/spiking.hpp"

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace eqprop {

struct EPConfig {
  double beta = 0.1;
  LossKind loss = LossKind::mse;
  std::vector<double> learning_rates;
  int batch_size = 125;
  int epochs = 10;
  std::uint64_t seed = 1;
  // Each nudged phase's state is the mean over its last `average_steps`
  // steps; 1 keeps the final state. Spiking states jitter around their fixed
  // point, so averaging suppresses quantization noise in the update.
  int average_steps = 1;

  void validate(int depth) const {
    if (!(beta > 0.0)) throw ConfigError("ep.beta must be > 0");
    if (static_cast<int>(learning_rates.size()) != depth)
      throw ConfigError("ep.learning_rates: expected " + std::to_string(depth) + " entries, got " +
                        std::to_string(learning_rates.size()));
    for (double lr : learning_rates)
      if (!(lr >= 0.0)) throw ConfigError("ep.learning_rates entries must be >= 0");
    if (batch_size < 1) throw ConfigError("ep.batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("ep.epochs must be >= 1");
    if (average_steps < 1) throw ConfigError("ep.average_steps must be >= 1");
  }
};

enum class Phase { free, positive, negative };

/// Converged layer states of one phase, plus the max-pool indices of the last
/// step's forward route (the positions P^-1 routes through).
template <class Scalar>
struct PhaseSnapshot {
  Phase phase = Phase::free;
  std::vector<Batch<Scalar>> xi;  // index 0 is the clamped input
  std::vector<std::optional<PoolIndices>> indices;

  const PoolIndices* index(int n) const {
    return n < static_cast<int>(indices.size()) && indices[n] ? &*indices[n] : nullptr;
  }

  std::size_t bytes() const {
    std::size_t total = 0;
    for (const auto& m : xi) total += buffer_bytes(m);
    for (const auto& i : indices)
      if (i) total += static_cast<std::size_t>(i->offset.size()) * sizeof(int);
    return total;
  }
};

template <class Scalar>
PhaseSnapshot<Scalar> take_snapshot(const NeuronState<Scalar>& st, Phase phase,
                                    const std::optional<LayerInputs<Scalar>>& last) {
  PhaseSnapshot<Scalar> snap;
  snap.phase = phase;
  snap.xi = st.xi;
  snap.indices.resize(st.xi.size());
  if (last)
    for (std::size_t n = 0; n < last->indices.size() && n < snap.indices.size(); ++n) snap.indices[n] = last->indices[n];
  return snap;
}

/// Symmetric-nudge EP update direction, averaged over the batch:
///   linear: dw_n = (rho(xi+_n) rho(xi+_{n-1})^T - rho(xi-_n) rho(xi-_{n-1})^T) / 2beta
///   conv:   dw_n = (K(P^-1(rho(xi+_n)), rho(xi+_{n-1})) - K(P^-1(rho(xi-_n)), rho(xi-_{n-1}))) / 2beta
///   bias:   db_n = (rho(xi+_n) - rho(xi-_n)) / 2beta, summed over positions for conv
/// where K is the kernel-gradient correlation. dw_n reads only layers n and n-1.
template <class Scalar>
GradientSet<Scalar> ep_gradients(const Topology& topo, const PhaseSnapshot<Scalar>& pos,
                                 const PhaseSnapshot<Scalar>& neg, Scalar beta) {
  if (beta == Scalar(0)) throw ConfigError("ep_gradients: beta must be non-zero");
  const int depth = topo.depth();
  if (static_cast<int>(pos.xi.size()) != depth + 1 || static_cast<int>(neg.xi.size()) != depth + 1)
    throw ShapeError("ep_gradients: snapshot depth mismatch");
  const Eigen::Index batch = pos.xi[0].cols();
  if (neg.xi[0].cols() != batch) throw ShapeError("ep_gradients: batch mismatch");
  const Scalar scale = Scalar(1) / (Scalar(2) * beta * Scalar(batch));
  auto grads = GradientSet<Scalar>::zeros(topo);
  auto rho = [](const PhaseSnapshot<Scalar>& s, int n) -> Batch<Scalar> {
    return n == 0 ? s.xi[0] : Batch<Scalar>(hard_sigmoid(s.xi[n]));
  };
  for (int n = 1; n <= depth; ++n) {
    const auto& g = topo.layer(n);
    const Batch<Scalar> up_p = rho(pos, n), up_n = rho(neg, n);
    const Batch<Scalar> low_p = rho(pos, n - 1), low_n = rho(neg, n - 1);
    if (g.is_conv()) {
      grads.w(n) = conv_kernel_grad(pool_inverse(g, up_p, pos.index(n)), low_p, g.conv) -
                   conv_kernel_grad(pool_inverse(g, up_n, neg.index(n)), low_n, g.conv);
    } else {
      grads.w(n).noalias() = up_p * low_p.transpose();
      grads.w(n).noalias() -= up_n * low_n.transpose();
    }
    grads.w(n) *= scale;
    grads.b(n) = reduce_bias<Scalar>(up_p - up_n, g.spec.units, g.bias_spatial()) * scale;
  }
  return grads;
}

/// w_n <- w_n + lr_n dw_n. Update directions already point down the loss.
template <class Scalar>
void sgd_update(Parameters<Scalar>& params, const GradientSet<Scalar>& grads, const std::vector<double>& lrs) {
  if (grads.depth() != params.depth()) throw ShapeError("sgd_update: layer count mismatch");
  if (static_cast<int>(lrs.size()) != params.depth()) throw ShapeError("sgd_update: learning rate count mismatch");
  for (int n = 1; n <= params.depth(); ++n) {
    if (grads.w(n).rows() != params.w(n).rows() || grads.w(n).cols() != params.w(n).cols() ||
        grads.b(n).size() != params.b(n).size())
      throw ShapeError("sgd_update: layer " + std::to_string(n) + " shape mismatch");
    const Scalar lr = Scalar(lrs[std::size_t(n - 1)]);
    params.w(n) += lr * grads.w(n);
    params.b(n) += lr * grads.b(n);
  }
}

/// Column-wise argmax.
template <class Scalar>
std::vector<int> predictions(const Batch<Scalar>& out) {
  std::vector<int> pred(static_cast<std::size_t>(out.cols()));
  for (Eigen::Index b = 0; b < out.cols(); ++b) {
    Eigen::Index arg;
    out.col(b).maxCoeff(&arg);
    pred[std::size_t(b)] = static_cast<int>(arg);
  }
  return pred;
}

template <class Scalar>
int count_errors(const Batch<Scalar>& out, const Batch<Scalar>& target) {
  const auto p = predictions(out), t = predictions(target);
  int errors = 0;
  for (std::size_t i = 0; i < p.size(); ++i) errors += p[i] != t[i];
  return errors;
}

template <class Scalar>
struct StepOutcome {
  GradientSet<Scalar> grads;
  Scalar loss = 0;  // reported loss metric at the free fixed point, batch mean
  int errors = 0;   // misclassified samples at the free fixed point
  Eigen::Index count = 0;
};

/// Three-phase EP on one batch: free relaxation from the zero state, then +beta
/// and -beta relaxations that both restart from a copy of the full free-phase
/// state (spiking potentials and decoders included).
template <class Scalar>
StepOutcome<Scalar> train_sample_ep(Engine engine, const Topology& topo, const Parameters<Scalar>& params,
                                    const Batch<Scalar>& input, const Batch<Scalar>& target,
                                    const DynamicsConfig& dyn, const SpikingConfig& spk, const EPConfig& ep,
                                    MemoryLedger* ledger = nullptr) {
  if (!(ep.beta > 0.0)) throw ConfigError("train_sample_ep: beta must be > 0");
  require_rows(target.rows(), topo.output_size(), "target");
  std::optional<MemoryLedger> local;
  MemoryLedger& mem = ledger ? *ledger : local.emplace();

  mem.set_phase("free");
  NeuronState<Scalar> st = NeuronState<Scalar>::with_input(topo, input);
  auto h_state = mem.track("state", st.bytes());
  relax(engine, st, topo, params, dyn, spk, dyn.t_free);

  StepOutcome<Scalar> out;
  const Batch<Scalar> free_out = hard_sigmoid(st.xi[topo.depth()]);
  out.loss = loss_metric(ep.loss, free_out, target);
  out.errors = count_errors(free_out, target);
  out.count = input.cols();

  const NeuronState<Scalar> saved = st;
  auto h_saved = mem.track("free_copy", saved.bytes());

  const int window = std::clamp(ep.average_steps, 1, dyn.t_nudge);
  auto nudged = [&](Scalar beta, Phase phase, const char* name) {
    mem.set_phase(name);
    st = saved;
    Nudge<Scalar> nudge{beta, &target, ep.loss};
    auto last = relax(engine, st, topo, params, dyn, spk, dyn.t_nudge - window + 1, &nudge);
    PhaseSnapshot<Scalar> snap = take_snapshot(st, phase, last);
    auto handle = mem.track("snapshot", snap.bytes());
    if (window > 1) {
      for (int k = 1; k < window; ++k) {
        last = relax(engine, st, topo, params, dyn, spk, 1, &nudge);
        for (int n = 1; n <= topo.depth(); ++n) snap.xi[n] += st.xi[n];
      }
      for (int n = 1; n <= topo.depth(); ++n) snap.xi[n] /= Scalar(window);
      snap.indices = take_snapshot(st, phase, last).indices;
    }
    return std::pair{std::move(snap), std::move(handle)};
  };
  const auto [pos, h_pos] = nudged(Scalar(ep.beta), Phase::positive, "positive");
  const auto [neg, h_neg] = nudged(Scalar(-ep.beta), Phase::negative, "negative");

  mem.set_phase("update");
  out.grads = ep_gradients(topo, pos, neg, Scalar(ep.beta));
  auto h_grads = mem.track("gradients", out.grads.scalar_count() * sizeof(Scalar));
  return out;
}

/// Fraction of samples whose free-phase output argmax differs from the label.
template <class Scalar>
double evaluate(Engine engine, const Topology& topo, const Parameters<Scalar>& params, const Dataset& ds,
                const DynamicsConfig& dyn, const SpikingConfig& spk, int batch_size = 500) {
  if (ds.size() == 0) return 0.0;
  int errors = 0;
  for (const auto& idx : batches(ds.size(), batch_size, 0, false)) {
    NeuronState<Scalar> st = NeuronState<Scalar>::with_input(topo, ds.gather<Scalar>(idx));
    relax(engine, st, topo, params, dyn, spk, dyn.t_free);
    errors += count_errors(Batch<Scalar>(hard_sigmoid(st.xi[topo.depth()])), ds.one_hot<Scalar>(idx));
  }
  return double(errors) / double(ds.size());
}

}  // namespace eqprop
