#pragma once

#include "eqprop/config.hpp"
#include "eqprop/diagnostics.hpp"
#include "eqprop/oracle.hpp"
#include "eqprop/rng.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace eqprop {

// ---------------------------------------------------------------------------
// Gradient agreement sweep

struct GradcheckRow {
  int layer = 0;
  std::string pair;  // "ep-bptt" or "bptt-fd"
  double cosine = 0.0;
  double rel_error = 0.0;
  double beta = std::numeric_limits<double>::quiet_NaN();  // blank for bptt-fd
  int horizon = 0;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  std::vector<std::string> failures;  // empty when every threshold holds
  double smallest_kink_margin = std::numeric_limits<double>::infinity();
  int rejected_draws = 0;  // bias draws discarded for sitting too close to a kink

  bool passed() const { return failures.empty(); }
};

namespace detail {

inline Batch<double> random_inputs(int rows, int cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Batch<double> x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

inline Batch<double> random_targets(int classes, int cols, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, classes - 1);
  Batch<double> y = Batch<double>::Zero(classes, cols);
  for (int c = 0; c < cols; ++c) y(pick(rng), c) = 1.0;
  return y;
}

// Worst case over draws: lowest cosine, highest relative error.
inline void fold_worst(std::vector<GradientAgreement>& acc, const std::vector<GradientAgreement>& next) {
  if (acc.empty()) {
    acc = next;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    acc[i].cosine = std::min(acc[i].cosine, next[i].cosine);
    acc[i].rel_error = std::max(acc[i].rel_error, next[i].rel_error);
  }
}

}  // namespace detail

/// Compares EP against BPTT over every (beta, horizon) in the sweep and BPTT
/// against central differences, each on `nets` random non-spiking networks.
/// Rows report the worst draw per layer. Finite differences use biases drawn
/// away from zero and redraw them while any trajectory point sits within
/// 10 steps of a clip kink.
inline GradcheckReport run_gradcheck(const RunConfig& cfg) {
  const GradcheckConfig& gc = cfg.gradcheck;
  const Topology topo(cfg.network);
  const int depth = topo.depth();
  std::mt19937_64 init_rng = rng_stream(cfg.seed, "init");
  std::mt19937_64 data_rng = rng_stream(cfg.seed, "data");
  std::mt19937_64 jitter_rng = rng_stream(cfg.seed, "jitter");

  GradcheckReport report;
  // worst[h][b]: per-layer agreement at horizon h and beta b
  std::vector<std::vector<std::vector<GradientAgreement>>> worst(
      gc.horizons.size(), std::vector<std::vector<GradientAgreement>>(gc.betas.size()));
  std::vector<GradientAgreement> fd_worst;

  for (int k = 0; k < gc.nets; ++k) {
    const Parameters<double> params = init_parameters<double>(topo, init_rng);
    const Batch<double> x = detail::random_inputs(topo.state_shape(0).size(), gc.batch, data_rng);
    const Batch<double> y = detail::random_targets(topo.output_size(), gc.batch, data_rng);

    for (std::size_t h = 0; h < gc.horizons.size(); ++h) {
      DynamicsConfig dyn = cfg.dynamics;
      dyn.t_free = gc.horizons[h];
      const auto bptt = bptt_gradients(Engine::crnn, topo, params, x, y, cfg.ep.loss, dyn, cfg.spiking, dyn.t_free);
      for (std::size_t b = 0; b < gc.betas.size(); ++b) {
        EPConfig ep = cfg.ep;
        ep.beta = gc.betas[b];
        const auto out = train_sample_ep(Engine::crnn, topo, params, x, y, dyn, cfg.spiking, ep);
        detail::fold_worst(worst[h][b], compare_gradients(out.grads, bptt));
      }
    }

    // Finite differences: zero biases leave the top layer exactly on a kink at
    // the first step, so draw small nonzero ones.
    Parameters<double> jittered = params;
    DynamicsConfig dyn = cfg.dynamics;
    dyn.t_free = gc.fd_horizon;
    std::uniform_real_distribution<double> bias(-0.2, 0.2);
    double margin = 0.0;
    for (int attempt = 0; attempt < 50; ++attempt) {
      for (int n = 1; n <= depth; ++n)
        for (Eigen::Index i = 0; i < jittered.b(n).size(); ++i) jittered.b(n)(i) = bias(jitter_rng);
      margin = kink_margin(topo, jittered, x, dyn, gc.fd_horizon);
      if (margin > 10.0 * gc.fd_step) break;
      ++report.rejected_draws;
    }
    report.smallest_kink_margin = std::min(report.smallest_kink_margin, margin);
    const auto bptt = bptt_gradients(Engine::crnn, topo, jittered, x, y, cfg.ep.loss, dyn, cfg.spiking, dyn.t_free);
    const auto fd = finite_diff_gradients(topo, jittered, x, y, cfg.ep.loss, dyn, gc.fd_horizon, gc.fd_step);
    detail::fold_worst(fd_worst, compare_gradients(bptt, fd));
  }

  for (std::size_t h = 0; h < gc.horizons.size(); ++h)
    for (std::size_t b = 0; b < gc.betas.size(); ++b)
      for (int n = 1; n <= depth; ++n) {
        const auto& a = worst[h][b][std::size_t(n - 1)];
        report.rows.push_back({n, "ep-bptt", a.cosine, a.rel_error, gc.betas[b], gc.horizons[h], cfg.seed});
      }
  for (int n = 1; n <= depth; ++n) {
    const auto& a = fd_worst[std::size_t(n - 1)];
    report.rows.push_back({n, "bptt-fd", a.cosine, a.rel_error, std::numeric_limits<double>::quiet_NaN(),
                           gc.fd_horizon, cfg.seed});
  }

  // Thresholds at every beta <= 1e-3.
  for (const auto& r : report.rows) {
    const std::string where = "layer " + std::to_string(r.layer) + " " + r.pair + " T=" + std::to_string(r.horizon);
    if (r.pair == "ep-bptt" && r.beta <= 1e-3 * (1.0 + 1e-9)) {
      if (r.cosine < gc.min_cosine)
        report.failures.push_back(where + " beta=" + std::to_string(r.beta) + ": cosine " + std::to_string(r.cosine));
      if (r.rel_error > gc.max_rel_error)
        report.failures.push_back(where + " beta=" + std::to_string(r.beta) + ": rel error " +
                                  std::to_string(r.rel_error));
    }
    if (r.pair == "bptt-fd" && r.rel_error > gc.max_fd_rel_error)
      report.failures.push_back(where + ": rel error " + std::to_string(r.rel_error));
  }
  return report;
}

/// Whether EP's worst relative error shrinks (or stays within `tie` of the
/// previous value) as beta decreases, per layer and horizon.
inline bool errors_shrink_with_beta(const GradcheckReport& report, double tie, std::string* detail = nullptr) {
  bool ok = true;
  for (const auto& a : report.rows) {
    if (a.pair != "ep-bptt") continue;
    for (const auto& b : report.rows) {
      if (b.pair != "ep-bptt" || b.layer != a.layer || b.horizon != a.horizon || !(b.beta < a.beta)) continue;
      if (b.rel_error > a.rel_error + tie) {
        ok = false;
        if (detail)
          *detail += "layer " + std::to_string(a.layer) + ": rel error " + std::to_string(b.rel_error) + " at beta " +
                     std::to_string(b.beta) + " exceeds " + std::to_string(a.rel_error) + " at beta " +
                     std::to_string(a.beta) + "; ";
      }
    }
  }
  return ok;
}

inline void write_gradcheck_csv(std::ostream& os, const GradcheckReport& report) {
  os << "layer,method_pair,cosine,rel_error,beta,T,seed\n";
  os.precision(9);
  for (const auto& r : report.rows) {
    os << r.layer << ',' << r.pair << ',' << r.cosine << ',' << r.rel_error << ',';
    if (!std::isnan(r.beta)) os << r.beta;
    os << ',' << r.horizon << ',' << r.seed << '\n';
  }
}

// ---------------------------------------------------------------------------
// Route probes

struct ProbeResult {
  ProbeMode mode;
  RouteStats stats;
  std::vector<LayerImbalance> imbalance;
};

/// The configured network with every pooled layer switched to `kind`. The
/// average-pool inverse uses its default filter^2 scale.
inline NetworkConfig with_pooling(NetworkConfig net, PoolKind kind) {
  for (auto& l : net.layers)
    if (l.pooling) {
      if (l.pooling->kind != kind) l.pooling->alpha = 0.0;
      l.pooling->kind = kind;
    }
  return net;
}

/// Probes every configured mode on the same samples. Weights are drawn once
/// from the seed's "init" substream; pooling changes no parameter shape, so
/// every mode sees identical weights.
inline std::vector<ProbeResult> run_probes(const RunConfig& cfg, const Dataset& data) {
  const Topology base(cfg.network);
  if (base.conv_count() < 2)
    throw ConfigError("network: probing needs at least 2 conv layers, has " + std::to_string(base.conv_count()));
  if (data.size() < std::size_t(cfg.probe.samples))
    throw ConfigError("probe.samples: " + std::to_string(cfg.probe.samples) + " requested but the dataset has " +
                      std::to_string(data.size()));
  std::mt19937_64 init_rng = rng_stream(cfg.seed, "init");
  const Parameters<float> params = init_parameters<float>(base, init_rng);
  const Dataset picked = subset(data, std::size_t(cfg.probe.samples), cfg.seed, cfg.data.stratified);
  std::vector<int> idx(picked.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
  const Batch<float> x = picked.gather<float>(idx);
  const Batch<float> y = picked.one_hot<float>(idx);

  std::vector<ProbeResult> out;
  for (const ProbeMode& mode : cfg.probe.modes) {
    const Topology topo(with_pooling(cfg.network, mode.pooling));
    ProbeResult r;
    r.mode = mode;
    r.stats = probe_routes(mode.engine, topo, params, x, y, cfg.ep.loss, float(cfg.ep.beta), cfg.dynamics, cfg.spiking);
    r.imbalance = imbalance_ratio(r.stats);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace eqprop
