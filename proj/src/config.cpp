#include "eqprop/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace eqprop {

using nlohmann::json;

namespace {

// Walks one JSON object, remembers which keys were read, and rejects the rest.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(at(key) + ": wrong type (got " + std::string(j_.at(key).type_name()) + ")");
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void require(const std::string& key) const {
    if (!j_.contains(key)) throw ConfigError(at(key) + ": required field missing");
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(at(it.key()) + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

PoolKind parse_pool_kind(const std::string& s, const std::string& where) {
  if (s == "max") return PoolKind::max;
  if (s == "avg") return PoolKind::avg;
  throw ConfigError(where + ": expected \"max\" or \"avg\", got \"" + s + "\"");
}

const char* pool_kind_name(PoolKind k) { return k == PoolKind::max ? "max" : "avg"; }

Engine parse_engine(const std::string& s, const std::string& where) {
  if (s == "snn") return Engine::snn;
  if (s == "crnn") return Engine::crnn;
  throw ConfigError(where + ": expected \"snn\" or \"crnn\", got \"" + s + "\"");
}

LossKind parse_loss(const std::string& s, const std::string& where) {
  if (s == "mse") return LossKind::mse;
  if (s == "ce") return LossKind::ce;
  throw ConfigError(where + ": expected \"mse\" or \"ce\", got \"" + s + "\"");
}

LayerSpec parse_layer(const json& j, const std::string& where) {
  Fields f(j, where);
  LayerSpec spec;
  std::string kind;
  f.require("kind");
  f.get("kind", kind);
  if (kind == "conv")
    spec.kind = LayerKind::conv;
  else if (kind == "linear")
    spec.kind = LayerKind::linear;
  else
    throw ConfigError(f.at("kind") + ": expected \"conv\" or \"linear\", got \"" + kind + "\"");
  f.require("units");
  f.get("units", spec.units);
  f.get("kernel", spec.kernel);
  f.get("stride", spec.stride);
  f.get("padding", spec.padding);
  if (const json* p = f.child("pooling")) {
    Fields pf(*p, f.at("pooling"));
    PoolingSpec ps;
    std::string pk = "avg";
    pf.get("kind", pk);
    ps.kind = parse_pool_kind(pk, pf.at("kind"));
    pf.get("filter", ps.filter);
    pf.get("alpha", ps.alpha);
    pf.finish();
    spec.pooling = ps;
  }
  f.finish();
  return spec;
}

NetworkConfig parse_network(const json& j) {
  Fields f(j, "network");
  NetworkConfig net;
  if (const json* in = f.child("input")) {
    if (!in->is_array() || in->size() != 3) throw ConfigError("network.input: expected [channels, height, width]");
    try {
      net.input = Shape3{(*in)[0].get<int>(), (*in)[1].get<int>(), (*in)[2].get<int>()};
    } catch (const json::exception&) {
      throw ConfigError("network.input: expected three integers");
    }
  }
  f.get("init_scale", net.init_scale);
  f.require("layers");
  const json* layers = f.child("layers");
  if (!layers->is_array()) throw ConfigError("network.layers: expected an array");
  for (std::size_t i = 0; i < layers->size(); ++i)
    net.layers.push_back(parse_layer((*layers)[i], "network.layers[" + std::to_string(i) + "]"));
  f.finish();
  return net;
}

json network_json(const NetworkConfig& net) {
  json layers = json::array();
  for (const auto& l : net.layers) {
    json lj{{"kind", l.kind == LayerKind::conv ? "conv" : "linear"}, {"units", l.units}};
    if (l.kind == LayerKind::conv) {
      lj["kernel"] = l.kernel;
      lj["stride"] = l.stride;
      lj["padding"] = l.padding;
    }
    if (l.pooling)
      lj["pooling"] = {{"kind", pool_kind_name(l.pooling->kind)}, {"filter", l.pooling->filter},
                       {"alpha", l.pooling->effective_alpha()}};
    layers.push_back(lj);
  }
  return {{"input", {net.input.channels, net.input.height, net.input.width}},
          {"init_scale", net.init_scale},
          {"layers", layers}};
}

void warn_range(std::vector<std::string>& out, const std::string& name, double v, double lo, double hi) {
  if (v < lo || v > hi) {
    std::ostringstream os;
    os << name << " = " << v << " is outside the usual range [" << lo << ", " << hi << "]";
    out.push_back(os.str());
  }
}

}  // namespace

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::snn_ep: return "snn-ep";
    case Mode::snn_bptt: return "snn-bptt";
    case Mode::crnn_ep: return "crnn-ep";
    case Mode::crnn_bptt: return "crnn-bptt";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::snn_ep, Mode::snn_bptt, Mode::crnn_ep, Mode::crnn_bptt})
    if (mode_name(m) == s) return m;
  throw ConfigError("mode: expected one of snn-ep, snn-bptt, crnn-ep, crnn-bptt; got \"" + s + "\"");
}

std::string ProbeMode::name() const {
  return std::string(engine == Engine::snn ? "snn" : "crnn") + "-" + pool_kind_name(pooling);
}

void RunConfig::validate() const {
  if (config_version != kConfigVersion)
    throw ConfigError("config_version: unsupported version " + std::to_string(config_version));
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
  const Topology topo(network);
  dynamics.validate();
  spiking.validate();
  ep.validate(topo.depth());
  if (ep.average_steps > dynamics.t_nudge)
    throw ConfigError("ep.average_steps: " + std::to_string(ep.average_steps) + " exceeds dynamics.t_nudge (" +
                      std::to_string(dynamics.t_nudge) + ")");
  if (data.train_subset < 0) throw ConfigError("data.train_subset must be >= 0");
  if (data.test_subset < 0) throw ConfigError("data.test_subset must be >= 0");
  for (double b : gradcheck.betas)
    if (!(b > 0.0)) throw ConfigError("gradcheck.betas: every beta must be > 0");
  for (int h : gradcheck.horizons)
    if (h < 1) throw ConfigError("gradcheck.horizons: every horizon must be >= 1");
  if (gradcheck.nets < 1) throw ConfigError("gradcheck.nets must be >= 1");
  if (gradcheck.batch < 1) throw ConfigError("gradcheck.batch must be >= 1");
  if (!(gradcheck.fd_step > 0.0)) throw ConfigError("gradcheck.fd_step must be > 0");
  if (gradcheck.fd_horizon < 1) throw ConfigError("gradcheck.fd_horizon must be >= 1");
  if (probe.samples < 1) throw ConfigError("probe.samples must be >= 1");
}

std::vector<std::string> range_warnings(const RunConfig& cfg) {
  std::vector<std::string> w;
  warn_range(w, "ep.beta", cfg.ep.beta, 0.01, 1.0);
  warn_range(w, "dynamics.epsilon", cfg.dynamics.epsilon, 0.1, 1.0);
  warn_range(w, "spiking.lambda", cfg.spiking.lambda, 0.1, 1.0);
  warn_range(w, "dynamics.t_free", cfg.dynamics.t_free, 50, 500);
  warn_range(w, "dynamics.t_nudge", cfg.dynamics.t_nudge, 10, 100);
  for (std::size_t i = 0; i < cfg.ep.learning_rates.size(); ++i)
    warn_range(w, "ep.learning_rates[" + std::to_string(i) + "]", cfg.ep.learning_rates[i], 0.0, 1.0);
  warn_range(w, "ep.batch_size", cfg.ep.batch_size, 10, 500);
  warn_range(w, "ep.epochs", cfg.ep.epochs, 10, 1000);
  return w;
}

RunConfig parse_config(const std::string& text, std::vector<std::string>* warnings) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  Fields f(j, "");
  RunConfig cfg;
  f.require("config_version");
  f.get("config_version", cfg.config_version);
  if (cfg.config_version != kConfigVersion)
    throw ConfigError("config_version: unsupported version " + std::to_string(cfg.config_version));
  std::string mode = mode_name(cfg.mode);
  f.get("mode", mode);
  cfg.mode = parse_mode(mode);
  f.get("seed", cfg.seed);
  f.get("workers", cfg.workers);
  f.get("output_dir", cfg.output_dir);
  f.get("eval_batch_size", cfg.eval_batch_size);

  f.require("network");
  cfg.network = parse_network(*f.child("network"));

  if (const json* d = f.child("dynamics")) {
    Fields df(*d, "dynamics");
    df.get("epsilon", cfg.dynamics.epsilon);
    df.get("t_free", cfg.dynamics.t_free);
    df.get("t_nudge", cfg.dynamics.t_nudge);
    std::string boundary = "inclusive";
    df.get("deriv_boundary", boundary);
    if (boundary == "inclusive")
      cfg.dynamics.boundary = DerivBoundary::inclusive;
    else if (boundary == "strict")
      cfg.dynamics.boundary = DerivBoundary::strict;
    else
      throw ConfigError("dynamics.deriv_boundary: expected \"inclusive\" or \"strict\"");
    df.finish();
  }
  if (const json* s = f.child("spiking")) {
    Fields sf(*s, "spiking");
    sf.get("lambda", cfg.spiking.lambda);
    sf.get("threshold", cfg.spiking.threshold);
    sf.finish();
  }
  f.require("ep");
  {
    Fields ef(*f.child("ep"), "ep");
    ef.get("beta", cfg.ep.beta);
    std::string loss = "mse";
    ef.get("loss", loss);
    cfg.ep.loss = parse_loss(loss, "ep.loss");
    ef.require("learning_rates");
    ef.get("learning_rates", cfg.ep.learning_rates);
    ef.get("batch_size", cfg.ep.batch_size);
    ef.get("epochs", cfg.ep.epochs);
    ef.get("average_steps", cfg.ep.average_steps);
    ef.finish();
  }
  if (const json* d = f.child("data")) {
    Fields df(*d, "data");
    df.get("train_images", cfg.data.train_images);
    df.get("train_labels", cfg.data.train_labels);
    df.get("test_images", cfg.data.test_images);
    df.get("test_labels", cfg.data.test_labels);
    df.get("train_subset", cfg.data.train_subset);
    df.get("test_subset", cfg.data.test_subset);
    df.get("stratified", cfg.data.stratified);
    df.finish();
  }
  if (const json* g = f.child("gradcheck")) {
    Fields gf(*g, "gradcheck");
    gf.get("betas", cfg.gradcheck.betas);
    gf.get("horizons", cfg.gradcheck.horizons);
    gf.get("nets", cfg.gradcheck.nets);
    gf.get("batch", cfg.gradcheck.batch);
    gf.get("fd_step", cfg.gradcheck.fd_step);
    gf.get("fd_horizon", cfg.gradcheck.fd_horizon);
    gf.get("min_cosine", cfg.gradcheck.min_cosine);
    gf.get("max_rel_error", cfg.gradcheck.max_rel_error);
    gf.get("max_fd_rel_error", cfg.gradcheck.max_fd_rel_error);
    gf.finish();
  }
  if (const json* p = f.child("probe")) {
    Fields pf(*p, "probe");
    pf.get("samples", cfg.probe.samples);
    if (const json* modes = pf.child("modes")) {
      if (!modes->is_array()) throw ConfigError("probe.modes: expected an array");
      cfg.probe.modes.clear();
      for (std::size_t i = 0; i < modes->size(); ++i) {
        const std::string where = "probe.modes[" + std::to_string(i) + "]";
        Fields mf((*modes)[i], where);
        std::string engine = "snn", pooling = "max";
        mf.get("engine", engine);
        mf.get("pooling", pooling);
        mf.finish();
        cfg.probe.modes.push_back({parse_engine(engine, where + ".engine"), parse_pool_kind(pooling, where + ".pooling")});
      }
    }
    pf.finish();
  }
  f.finish();

  try {
    cfg.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (warnings) *warnings = range_warnings(cfg);
  return cfg;
}

RunConfig load_config(const std::string& path, std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), warnings);
}

std::string dump_config(const RunConfig& cfg) {
  json modes = json::array();
  for (const auto& m : cfg.probe.modes)
    modes.push_back({{"engine", m.engine == Engine::snn ? "snn" : "crnn"}, {"pooling", pool_kind_name(m.pooling)}});
  json j{
      {"config_version", cfg.config_version},
      {"mode", mode_name(cfg.mode)},
      {"seed", cfg.seed},
      {"workers", cfg.workers},
      {"output_dir", cfg.output_dir},
      {"eval_batch_size", cfg.eval_batch_size},
      {"network", network_json(cfg.network)},
      {"dynamics",
       {{"epsilon", cfg.dynamics.epsilon},
        {"t_free", cfg.dynamics.t_free},
        {"t_nudge", cfg.dynamics.t_nudge},
        {"deriv_boundary", cfg.dynamics.boundary == DerivBoundary::strict ? "strict" : "inclusive"}}},
      {"spiking", {{"lambda", cfg.spiking.lambda}, {"threshold", cfg.spiking.threshold}}},
      {"ep",
       {{"beta", cfg.ep.beta},
        {"loss", cfg.ep.loss == LossKind::ce ? "ce" : "mse"},
        {"learning_rates", cfg.ep.learning_rates},
        {"batch_size", cfg.ep.batch_size},
        {"epochs", cfg.ep.epochs},
        {"average_steps", cfg.ep.average_steps}}},
      {"data",
       {{"train_images", cfg.data.train_images},
        {"train_labels", cfg.data.train_labels},
        {"test_images", cfg.data.test_images},
        {"test_labels", cfg.data.test_labels},
        {"train_subset", cfg.data.train_subset},
        {"test_subset", cfg.data.test_subset},
        {"stratified", cfg.data.stratified}}},
      {"gradcheck",
       {{"betas", cfg.gradcheck.betas},
        {"horizons", cfg.gradcheck.horizons},
        {"nets", cfg.gradcheck.nets},
        {"batch", cfg.gradcheck.batch},
        {"fd_step", cfg.gradcheck.fd_step},
        {"fd_horizon", cfg.gradcheck.fd_horizon},
        {"min_cosine", cfg.gradcheck.min_cosine},
        {"max_rel_error", cfg.gradcheck.max_rel_error},
        {"max_fd_rel_error", cfg.gradcheck.max_fd_rel_error}}},
      {"probe", {{"samples", cfg.probe.samples}, {"modes", modes}}},
  };
  return j.dump(2) + "\n";
}

}  // namespace eqprop
