#pragma once

#include "eqprop/config.hpp"
#include "eqprop/oracle.hpp"
#include "eqprop/rng.hpp"

#include <chrono>
#include <exception>
#include <functional>
#include <limits>
#include <ostream>
#include <thread>

namespace eqprop {

struct EpochMetrics {
  int epoch = 0;
  double train_error = 0.0;  // free-phase error on the training batches as they were seen
  double test_error = std::numeric_limits<double>::quiet_NaN();
  double mean_loss = 0.0;
  std::size_t peak_retained_bytes = 0;  // largest single-step peak of the epoch
  double seconds = 0.0;                 // wall time, kept out of the metrics file
};

inline void write_metrics_header(std::ostream& os) {
  os << "epoch,train_error,test_error,mean_loss,peak_retained_bytes\n";
}

inline void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  os.precision(9);
  os << m.epoch << ',' << m.train_error << ',';
  if (!std::isnan(m.test_error)) os << m.test_error;
  os << ',' << m.mean_loss << ',' << m.peak_retained_bytes << '\n';
}

/// Contiguous column ranges [begin, end) splitting `count` into at most `parts`.
inline std::vector<std::pair<Eigen::Index, Eigen::Index>> split_columns(Eigen::Index count, int parts) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> out;
  parts = std::max(1, std::min<int>(parts, int(count)));
  for (int p = 0; p < parts; ++p) out.emplace_back(count * p / parts, count * (p + 1) / parts);
  return out;
}

/// Runs job(i) for i in [0, n) on up to `workers` threads; each index runs once.
inline void run_parallel(int n, int workers, const std::function<void(int)>& job) {
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  for (int w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) {
        try {
          job(i);
        } catch (...) {
          errors[std::size_t(i)] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Update direction and free-phase metrics for one mini-batch. The batch is
/// cut into `workers` column chunks relaxed concurrently; chunk results are
/// combined in chunk order so the outcome does not depend on thread timing.
template <class Scalar>
StepOutcome<Scalar> batch_step(Mode mode, const Topology& topo, const Parameters<Scalar>& params,
                               const Batch<Scalar>& input, const Batch<Scalar>& target, const DynamicsConfig& dyn,
                               const SpikingConfig& spk, const EPConfig& ep, int workers, std::size_t* peak_bytes) {
  const auto chunks = split_columns(input.cols(), workers);
  std::vector<StepOutcome<Scalar>> parts(chunks.size());
  std::vector<std::size_t> peaks(chunks.size(), 0);
  run_parallel(int(chunks.size()), workers, [&](int i) {
    const auto [b, e] = chunks[std::size_t(i)];
    const Batch<Scalar> x = input.middleCols(b, e - b);
    const Batch<Scalar> y = target.middleCols(b, e - b);
    MemoryLedger ledger;
    StepOutcome<Scalar>& out = parts[std::size_t(i)];
    if (uses_bptt(mode)) {
      Batch<Scalar> final_out;
      out.grads = bptt_gradients(engine_of(mode), topo, params, x, y, ep.loss, dyn, spk, dyn.t_free, &ledger, {},
                                 &final_out);
      out.loss = loss_metric(ep.loss, final_out, y);
      out.errors = count_errors(final_out, y);
      out.count = x.cols();
    } else {
      out = train_sample_ep(engine_of(mode), topo, params, x, y, dyn, spk, ep, &ledger);
    }
    peaks[std::size_t(i)] = ledger.peak();
  });
  StepOutcome<Scalar> total;
  total.grads = GradientSet<Scalar>::zeros(topo);
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Scalar weight = Scalar(parts[i].count) / Scalar(input.cols());
    for (int n = 1; n <= topo.depth(); ++n) {
      total.grads.w(n) += weight * parts[i].grads.w(n);
      total.grads.b(n) += weight * parts[i].grads.b(n);
    }
    loss_sum += double(parts[i].loss) * double(parts[i].count);
    total.errors += parts[i].errors;
    total.count += parts[i].count;
  }
  total.loss = Scalar(loss_sum / double(std::max<Eigen::Index>(1, total.count)));
  if (peak_bytes) {
    std::size_t sum = 0;
    for (auto p : peaks) sum += p;
    *peak_bytes = sum;
  }
  return total;
}

/// Free-phase error rate with evaluation batches spread over workers.
template <class Scalar>
double evaluate_parallel(Engine engine, const Topology& topo, const Parameters<Scalar>& params, const Dataset& ds,
                         const DynamicsConfig& dyn, const SpikingConfig& spk, int batch_size, int workers) {
  if (ds.size() == 0) return 0.0;
  const auto groups = batches(ds.size(), batch_size, 0, false);
  std::vector<int> errors(groups.size(), 0);
  run_parallel(int(groups.size()), workers, [&](int i) {
    const auto& idx = groups[std::size_t(i)];
    NeuronState<Scalar> st = NeuronState<Scalar>::with_input(topo, ds.gather<Scalar>(idx));
    relax(engine, st, topo, params, dyn, spk, dyn.t_free);
    errors[std::size_t(i)] = count_errors(Batch<Scalar>(hard_sigmoid(st.xi[topo.depth()])), ds.one_hot<Scalar>(idx));
  });
  int total = 0;
  for (int e : errors) total += e;
  return double(total) / double(ds.size());
}

struct FitOptions {
  Mode mode = Mode::snn_ep;
  int workers = 1;
  int eval_batch_size = 500;
  std::uint64_t seed = 1;
  bool evaluate_each_epoch = true;  // otherwise only after the last epoch
};

/// Mini-batch training for ep.epochs epochs. The epoch's shuffle comes from
/// the "shuffle" substream of seed + epoch.
template <class Scalar>
std::vector<EpochMetrics> fit(const Topology& topo, Parameters<Scalar>& params, const Dataset& train,
                              const Dataset* test, const DynamicsConfig& dyn, const SpikingConfig& spk,
                              const EPConfig& ep, const FitOptions& opt,
                              const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  std::vector<EpochMetrics> history;
  for (int epoch = 1; epoch <= ep.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    double loss_sum = 0.0;
    int errors = 0;
    std::size_t seen = 0;
    for (const auto& idx : batches(train.size(), ep.batch_size, opt.seed + std::uint64_t(epoch), true)) {
      const Batch<Scalar> x = train.gather<Scalar>(idx);
      const Batch<Scalar> y = train.one_hot<Scalar>(idx);
      std::size_t peak = 0;
      StepOutcome<Scalar> step = batch_step(opt.mode, topo, params, x, y, dyn, spk, ep, opt.workers, &peak);
      sgd_update(params, step.grads, ep.learning_rates);
      loss_sum += double(step.loss) * double(step.count);
      errors += step.errors;
      seen += std::size_t(step.count);
      m.peak_retained_bytes = std::max(m.peak_retained_bytes, peak);
    }
    m.train_error = seen ? double(errors) / double(seen) : 0.0;
    m.mean_loss = seen ? loss_sum / double(seen) : 0.0;
    if (test && (opt.evaluate_each_epoch || epoch == ep.epochs))
      m.test_error = evaluate_parallel(engine_of(opt.mode), topo, params, *test, dyn, spk, opt.eval_batch_size,
                                       opt.workers);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

}  // namespace eqprop
