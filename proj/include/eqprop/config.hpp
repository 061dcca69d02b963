#pragma once

#include "eqprop/training.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace eqprop {

inline constexpr int kConfigVersion = 1;

enum class Mode { snn_ep, snn_bptt, crnn_ep, crnn_bptt };

inline Engine engine_of(Mode m) { return (m == Mode::snn_ep || m == Mode::snn_bptt) ? Engine::snn : Engine::crnn; }
inline bool uses_bptt(Mode m) { return m == Mode::snn_bptt || m == Mode::crnn_bptt; }
std::string mode_name(Mode m);
Mode parse_mode(const std::string& s);

struct DataConfig {
  std::string train_images, train_labels, test_images, test_labels;
  int train_subset = 0;  // 0 keeps the whole file
  int test_subset = 0;
  bool stratified = true;
};

/// EP against BPTT against finite differences on random inputs.
struct GradcheckConfig {
  std::vector<double> betas{1e-2, 1e-3, 1e-4};
  std::vector<int> horizons{60};  // free-phase length, also the unroll length
  int nets = 20;                  // random parameter draws per point
  int batch = 2;
  double fd_step = 1e-5;
  int fd_horizon = 20;
  // Thresholds checked at the smallest beta <= 1e-3.
  double min_cosine = 0.99;
  double max_rel_error = 0.1;
  double max_fd_rel_error = 1e-4;
};

/// One probed configuration: which engine and which pooling operator every
/// pooled layer uses.
struct ProbeMode {
  Engine engine = Engine::snn;
  PoolKind pooling = PoolKind::max;
  std::string name() const;
};

struct ProbeConfig {
  int samples = 200;
  std::vector<ProbeMode> modes{{Engine::snn, PoolKind::max}, {Engine::snn, PoolKind::avg}, {Engine::crnn, PoolKind::max}};
};

struct RunConfig {
  int config_version = kConfigVersion;
  Mode mode = Mode::snn_ep;
  std::uint64_t seed = 1;
  int workers = 1;
  std::string output_dir;  // empty: resolved from the environment by the CLI
  int eval_batch_size = 500;
  NetworkConfig network;
  DynamicsConfig dynamics;
  SpikingConfig spiking;
  EPConfig ep;
  DataConfig data;
  GradcheckConfig gradcheck;
  ProbeConfig probe;

  void validate() const;
};

/// Parses JSON text. Unknown keys and type errors raise ConfigError naming the
/// offending field path; values outside the published ranges only add warnings.
RunConfig parse_config(const std::string& text, std::vector<std::string>* warnings = nullptr);
RunConfig load_config(const std::string& path, std::vector<std::string>* warnings = nullptr);
/// Fully resolved config, every field written out.
std::string dump_config(const RunConfig& cfg);

std::vector<std::string> range_warnings(const RunConfig& cfg);

}  // namespace eqprop
