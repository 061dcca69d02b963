// eqprop: train, evaluate, gradient-check and probe convolutional EP networks.
//
// Exit status: 0 success, 1 a check failed (gradcheck thresholds),
// 2 bad usage or config, 3 data or checkpoint errors.

#include "eqprop/checkpoint.hpp"
#include "eqprop/config.hpp"
#include "eqprop/experiments.hpp"
#include "eqprop/trainer.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace eqprop;

namespace {

constexpr int kCheckFailed = 1;
constexpr int kUsageError = 2;
constexpr int kDataError = 3;

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

RunConfig load(const Options& opt) {
  std::vector<std::string> warnings;
  RunConfig cfg = load_config(opt.config, &warnings);
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.workers) cfg.workers = *opt.workers;
  cfg.validate();
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  return cfg;
}

// --out, then the config's output_dir, then $EQPROP_OUT_DIR, then ./eqprop-out.
fs::path output_dir(const Options& opt, RunConfig& cfg) {
  std::string dir = opt.out;
  if (dir.empty()) dir = cfg.output_dir;
  if (dir.empty())
    if (const char* env = std::getenv("EQPROP_OUT_DIR")) dir = env;
  if (dir.empty()) dir = "eqprop-out";
  cfg.output_dir = dir;
  fs::create_directories(dir);
  return dir;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

void require_path(const std::string& value, const char* field) {
  if (value.empty()) throw ConfigError(std::string(field) + ": required for this command");
}

Dataset load_split(const std::string& images, const std::string& labels, int keep, std::uint64_t seed,
                   bool stratified) {
  Dataset ds = load_idx(images, labels);
  if (keep > 0 && std::size_t(keep) < ds.size()) ds = subset(ds, std::size_t(keep), seed, stratified);
  return ds;
}

int cmd_train(const Options& opt) {
  RunConfig cfg = load(opt);
  require_path(cfg.data.train_images, "data.train_images");
  require_path(cfg.data.train_labels, "data.train_labels");
  const fs::path dir = output_dir(opt, cfg);

  const Dataset train = load_split(cfg.data.train_images, cfg.data.train_labels, cfg.data.train_subset, cfg.seed,
                                   cfg.data.stratified);
  std::optional<Dataset> test;
  if (!cfg.data.test_images.empty()) {
    require_path(cfg.data.test_labels, "data.test_labels");
    test = load_split(cfg.data.test_images, cfg.data.test_labels, cfg.data.test_subset, cfg.seed,
                      cfg.data.stratified);
  }

  const Topology topo(cfg.network);
  Parameters<float> params;
  if (!opt.checkpoint.empty()) {
    params = load_checkpoint<float>(opt.checkpoint, topo);
  } else {
    std::mt19937_64 rng = rng_stream(cfg.seed, "init");
    params = init_parameters<float>(topo, rng);
  }

  open_out(dir / "config.resolved.json") << dump_config(cfg);
  std::ofstream metrics = open_out(dir / "metrics.csv");
  std::ofstream timing = open_out(dir / "timing.csv");
  write_metrics_header(metrics);
  timing << "epoch,seconds\n";

  FitOptions fo;
  fo.mode = cfg.mode;
  fo.workers = cfg.workers;
  fo.eval_batch_size = cfg.eval_batch_size;
  fo.seed = cfg.seed;
  std::cerr << "training " << mode_name(cfg.mode) << " on " << train.size() << " samples for " << cfg.ep.epochs
            << " epochs\n";
  fit(topo, params, train, test ? &*test : nullptr, cfg.dynamics, cfg.spiking, cfg.ep, fo,
      [&](const EpochMetrics& m) {
        write_metrics_row(metrics, m);
        metrics.flush();
        timing << m.epoch << ',' << m.seconds << '\n';
        timing.flush();
        std::cerr << "epoch " << m.epoch << ": train error " << m.train_error;
        if (!std::isnan(m.test_error)) std::cerr << ", test error " << m.test_error;
        std::cerr << " (" << m.seconds << " s)\n";
      });
  save_checkpoint(dir / "checkpoint.eqp", topo, params);
  std::cerr << "wrote " << (dir / "checkpoint.eqp").string() << '\n';
  return 0;
}

int cmd_eval(const Options& opt) {
  RunConfig cfg = load(opt);
  require_path(cfg.data.test_images, "data.test_images");
  require_path(cfg.data.test_labels, "data.test_labels");
  const fs::path dir = output_dir(opt, cfg);
  const fs::path ckpt = opt.checkpoint.empty() ? dir / "checkpoint.eqp" : fs::path(opt.checkpoint);

  const Topology topo(cfg.network);
  const Parameters<float> params = load_checkpoint<float>(ckpt.string(), topo);
  const Dataset test = load_split(cfg.data.test_images, cfg.data.test_labels, cfg.data.test_subset, cfg.seed,
                                  cfg.data.stratified);
  const double err = evaluate_parallel(engine_of(cfg.mode), topo, params, test, cfg.dynamics, cfg.spiking,
                                       cfg.eval_batch_size, cfg.workers);
  std::cout << "test_error " << err << " on " << test.size() << " samples\n";
  std::ofstream os = open_out(dir / "eval.csv");
  os.precision(9);
  os << "checkpoint,mode,samples,test_error\n" << ckpt.string() << ',' << mode_name(cfg.mode) << ',' << test.size()
     << ',' << err << '\n';
  return 0;
}

int cmd_gradcheck(const Options& opt) {
  RunConfig cfg = load(opt);
  const fs::path dir = output_dir(opt, cfg);
  const GradcheckReport report = run_gradcheck(cfg);
  std::ofstream os = open_out(dir / "gradcheck.csv");
  write_gradcheck_csv(os, report);
  write_gradcheck_csv(std::cout, report);
  std::cerr << "smallest kink margin " << report.smallest_kink_margin << ", rejected bias draws "
            << report.rejected_draws << '\n';
  if (!report.passed()) {
    for (const auto& f : report.failures) std::cerr << "FAIL " << f << '\n';
    return kCheckFailed;
  }
  std::cerr << "all thresholds hold\n";
  return 0;
}

int cmd_probe(const Options& opt) {
  RunConfig cfg = load(opt);
  require_path(cfg.data.train_images, "data.train_images");
  require_path(cfg.data.train_labels, "data.train_labels");
  if (Topology(cfg.network).conv_count() < 2)
    throw ConfigError("network.layers: probing needs at least 2 conv layers");
  const fs::path dir = output_dir(opt, cfg);
  const Dataset data = load_idx(cfg.data.train_images, cfg.data.train_labels);
  const auto results = run_probes(cfg, data);

  std::ofstream summary = open_out(dir / "imbalance.csv");
  summary.precision(9);
  summary << "mode,layer,forward,backward,ratio\n";
  for (const auto& r : results) {
    std::ofstream os = open_out(dir / ("probe_" + r.mode.name() + ".csv"));
    write_route_csv(os, r.stats);
    std::cout << r.mode.name() << ':';
    for (const auto& l : r.imbalance) {
      summary << r.mode.name() << ',' << l.layer << ',' << l.forward << ',' << l.backward << ',' << l.ratio << '\n';
      std::cout << " layer " << l.layer << " ratio " << l.ratio;
    }
    std::cout << " (max imbalance " << max_imbalance(r.imbalance) << ")\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Equilibrium propagation for convolutional spiking and non-spiking networks"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opt.out, "Output directory (default: config output_dir, then $EQPROP_OUT_DIR)");
    sub->add_option("--seed", opt.seed, "Override the config seed");
    sub->add_option("--workers", opt.workers, "Override the config worker count")->check(CLI::PositiveNumber);
  };
  CLI::App* train = app.add_subcommand("train", "Train and write metrics, checkpoint and resolved config");
  add_common(train);
  train->add_option("--checkpoint", opt.checkpoint, "Start from these parameters instead of a fresh draw");
  CLI::App* eval = app.add_subcommand("eval", "Test error of a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "Checkpoint (default: <out>/checkpoint.eqp)");
  CLI::App* grad = app.add_subcommand("gradcheck", "EP vs BPTT vs finite differences");
  add_common(grad);
  CLI::App* probe = app.add_subcommand("probe", "Forward/backward route statistics per pooling mode");
  add_common(probe);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (grad->parsed()) return cmd_gradcheck(opt);
    if (probe->parsed()) return cmd_probe(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kUsageError;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kDataError;
  } catch (const IdxError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsageError;
}
