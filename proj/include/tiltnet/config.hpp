// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: plain-text `key = value` lines grouped under `[section]`
// headers. `#` starts a comment. Unknown sections and keys are rejected.
//
//   seed = 1
//   output = runs/lenet
//   [network]   preset, input, classes, layers, init_conv_std, init_dense_gain
//   [training]  mode, batch, lr, weight_decay, momentum, epochs, pretrain_epochs,
//               refine_lr, lr_step_epochs, lr_gamma, monitor_examples, resume
//   [hmc]       sigma, mass, step_size, leapfrog_steps, iterations, init,
//               init_std, metropolis, snapshots, chains
//   [data]      source, train_images, train_labels, test_images, test_labels,
//               train_limit, test_limit, synthetic_n, synthetic_eval_n,
//               synthetic_classes, synthetic_size, synthetic_noise
//   [gradcheck] mutation, trials

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "tiltnet/checkpoint.hpp"
#include "tiltnet/data.hpp"
#include "tiltnet/error.hpp"
#include "tiltnet/hmc.hpp"
#include "tiltnet/net.hpp"
#include "tiltnet/train.hpp"

namespace tiltnet {

struct DataConfig {
  enum class Source { idx, synthetic };
  Source source = Source::synthetic;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::optional<std::size_t> train_limit, test_limit;
  std::size_t synthetic_n = 512;
  std::size_t synthetic_eval_n = 0;  // 0: same as synthetic_n
  std::size_t synthetic_classes = 2;
  std::size_t synthetic_size = 28;
  double synthetic_noise = 0.1;
};

/// Deliberate defects the gradient checker can be pointed at, to show it
/// catches them.
enum class Mutation { none, gen_diag_sign };

struct GradcheckConfig {
  Mutation mutation = Mutation::none;
  std::size_t trials = 50;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output = "run";
  NetworkConfig network;
  Hyperparams hyper;
  Schedule schedule;
  std::size_t monitor_examples = 0;
  bool resume = false;
  HmcConfig hmc;
  std::size_t chains = 1;
  DataConfig data;
  GradcheckConfig gradcheck;

  /// Applies a seed to every consumer (network init, batch order, sampler, synthetic data).
  void set_seed(std::uint64_t s) {
    seed = s;
    network.seed = s;
    hyper.seed = s;
    hmc.seed = s;
  }
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("expected a boolean for " + key + ", got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& v, const std::string& key) {
  std::vector<std::size_t> out;
  for (const auto& item : split(v, ','))
    if (!item.empty()) out.push_back(parse_extent(item, key));
  return out;
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
  using Setter = std::function<void(const std::string&)>;
  std::optional<std::string> preset;
  std::optional<Shape> input;
  std::optional<std::size_t> classes;
  std::optional<std::vector<LayerSpec>> layers;
  std::optional<std::uint64_t> seed;

  auto num = [](const std::string& key) {
    return [key](const std::string& v) { return parse_double(v, key); };
  };
  auto ext = [](const std::string& v, const std::string& key) { return detail::parse_extent(v, key); };

  std::map<std::string, std::map<std::string, Setter>> table;
  table[""] = {
      {"seed", [&](const std::string& v) { seed = ext(v, "seed"); }},
      {"output", [&](const std::string& v) { cfg.output = v; }},
  };
  table["network"] = {
      {"preset", [&](const std::string& v) { preset = v; }},
      {"input", [&](const std::string& v) { input = parse_shape(v); }},
      {"classes", [&](const std::string& v) { classes = ext(v, "classes"); }},
      {"layers", [&](const std::string& v) { layers = parse_layers(v); }},
      {"init_conv_std", [&](const std::string& v) { cfg.network.init.conv_std = num("init_conv_std")(v); }},
      {"init_dense_gain", [&](const std::string& v) { cfg.network.init.dense_gain = num("init_dense_gain")(v); }},
  };
  table["training"] = {
      {"mode", [&](const std::string& v) { cfg.schedule.mode = parse_mode(v); }},
      {"batch", [&](const std::string& v) { cfg.hyper.batch_size = ext(v, "batch"); }},
      {"lr", [&](const std::string& v) { cfg.hyper.base_lr = num("lr")(v); }},
      {"weight_decay", [&](const std::string& v) { cfg.hyper.weight_decay = num("weight_decay")(v); }},
      {"momentum", [&](const std::string& v) { cfg.hyper.momentum = num("momentum")(v); }},
      {"epochs", [&](const std::string& v) { cfg.hyper.max_epochs = ext(v, "epochs"); }},
      {"pretrain_epochs", [&](const std::string& v) { cfg.schedule.pretrain_epochs = ext(v, "pretrain_epochs"); }},
      {"refine_lr", [&](const std::string& v) { cfg.schedule.refine_lr = num("refine_lr")(v); }},
      {"lr_step_epochs", [&](const std::string& v) { cfg.schedule.policy.step_epochs = ext(v, "lr_step_epochs"); }},
      {"lr_gamma", [&](const std::string& v) { cfg.schedule.policy.gamma = num("lr_gamma")(v); }},
      {"monitor_examples", [&](const std::string& v) { cfg.monitor_examples = ext(v, "monitor_examples"); }},
      {"resume", [&](const std::string& v) { cfg.resume = detail::parse_bool(v, "resume"); }},
  };
  table["hmc"] = {
      {"sigma", [&](const std::string& v) { cfg.hmc.sigma = num("sigma")(v); }},
      {"mass", [&](const std::string& v) { cfg.hmc.mass = num("mass")(v); }},
      {"step_size", [&](const std::string& v) { cfg.hmc.step_size = num("step_size")(v); }},
      {"leapfrog_steps", [&](const std::string& v) { cfg.hmc.leapfrog_steps = ext(v, "leapfrog_steps"); }},
      {"iterations", [&](const std::string& v) { cfg.hmc.iterations = ext(v, "iterations"); }},
      {"init",
       [&](const std::string& v) {
         if (v == "gaussian") cfg.hmc.init = HmcInit::gaussian;
         else if (v == "zero") cfg.hmc.init = HmcInit::zero;
         else throw ConfigError("hmc init must be gaussian or zero, got '" + v + "'");
       }},
      {"init_std", [&](const std::string& v) { cfg.hmc.init_std = num("init_std")(v); }},
      {"metropolis", [&](const std::string& v) { cfg.hmc.metropolis = detail::parse_bool(v, "metropolis"); }},
      {"snapshots", [&](const std::string& v) { cfg.hmc.snapshots = detail::parse_list(v, "snapshots"); }},
      {"chains", [&](const std::string& v) { cfg.chains = ext(v, "chains"); }},
  };
  table["data"] = {
      {"source",
       [&](const std::string& v) {
         if (v == "idx") cfg.data.source = DataConfig::Source::idx;
         else if (v == "synthetic") cfg.data.source = DataConfig::Source::synthetic;
         else throw ConfigError("data source must be idx or synthetic, got '" + v + "'");
       }},
      {"train_images", [&](const std::string& v) { cfg.data.train_images = v; }},
      {"train_labels", [&](const std::string& v) { cfg.data.train_labels = v; }},
      {"test_images", [&](const std::string& v) { cfg.data.test_images = v; }},
      {"test_labels", [&](const std::string& v) { cfg.data.test_labels = v; }},
      {"train_limit", [&](const std::string& v) { cfg.data.train_limit = ext(v, "train_limit"); }},
      {"test_limit", [&](const std::string& v) { cfg.data.test_limit = ext(v, "test_limit"); }},
      {"synthetic_n", [&](const std::string& v) { cfg.data.synthetic_n = ext(v, "synthetic_n"); }},
      {"synthetic_eval_n", [&](const std::string& v) { cfg.data.synthetic_eval_n = ext(v, "synthetic_eval_n"); }},
      {"synthetic_classes", [&](const std::string& v) { cfg.data.synthetic_classes = ext(v, "synthetic_classes"); }},
      {"synthetic_size", [&](const std::string& v) { cfg.data.synthetic_size = ext(v, "synthetic_size"); }},
      {"synthetic_noise", [&](const std::string& v) { cfg.data.synthetic_noise = num("synthetic_noise")(v); }},
  };
  table["gradcheck"] = {
      {"mutation",
       [&](const std::string& v) {
         if (v == "none") cfg.gradcheck.mutation = Mutation::none;
         else if (v == "gen_diag_sign") cfg.gradcheck.mutation = Mutation::gen_diag_sign;
         else throw ConfigError("unknown gradcheck mutation '" + v + "'");
       }},
      {"trials", [&](const std::string& v) { cfg.gradcheck.trials = ext(v, "trials"); }},
  };

  std::string section, line;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "malformed section header '" + t + "'");
      section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
      if (!table.count(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + t + "'");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    auto& keys = table[section];
    auto it = keys.find(key);
    if (it == keys.end())
      throw ConfigError(where + "unknown key '" + key + "'" + (section.empty() ? "" : " in [" + section + "]"));
    if (!seen.insert(section + "." + key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      it->second(value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }

  if (preset) {
    if (*preset != "lenet") throw ConfigError("unknown network preset '" + *preset + "'");
    const auto init = cfg.network.init;
    cfg.network = NetworkConfig::lenet();
    cfg.network.init = init;
  }
  if (input) cfg.network.input_shape = *input;
  if (classes) cfg.network.classes = *classes;
  if (layers) cfg.network.layers = *layers;
  if (cfg.network.layers.empty()) throw ConfigError("[network] needs layers (or preset = lenet)");
  if (cfg.network.input_shape.empty()) throw ConfigError("[network] needs input");
  if (cfg.network.classes == 0) throw ConfigError("[network] needs classes");
  cfg.set_seed(seed.value_or(1));

  cfg.hyper.validate();
  cfg.schedule.validate(cfg.hyper);
  cfg.hmc.validate();
  if (cfg.chains == 0) throw ConfigError("hmc chains must be positive");
  if (cfg.data.source == DataConfig::Source::idx && (cfg.data.train_images.empty() || cfg.data.train_labels.empty()))
    throw ConfigError("[data] source = idx needs train_images and train_labels");
  Network::build(cfg.network);  // shape propagation check
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  auto cfg = parse_run_config(in);
  // Relative data paths resolve against the config file's directory.
  auto anchor = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = path.parent_path() / p;
  };
  anchor(cfg.data.train_images);
  anchor(cfg.data.train_labels);
  anchor(cfg.data.test_images);
  anchor(cfg.data.test_labels);
  return cfg;
}

/// Training set named by the config.
inline Dataset load_train_data(const RunConfig& cfg) {
  const auto& d = cfg.data;
  if (d.source == DataConfig::Source::synthetic)
    return synthetic_dataset(d.synthetic_n, d.synthetic_classes, d.synthetic_size, cfg.seed, d.synthetic_noise);
  return read_idx(d.train_images, d.train_labels, d.train_limit);
}

/// Held-out set: the IDX test files, or a fresh synthetic draw; nothing when
/// IDX test files are not configured.
inline std::optional<Dataset> load_eval_data(const RunConfig& cfg) {
  const auto& d = cfg.data;
  if (d.source == DataConfig::Source::synthetic)
    return synthetic_dataset(d.synthetic_eval_n ? d.synthetic_eval_n : d.synthetic_n, d.synthetic_classes,
                             d.synthetic_size, cfg.seed + 1, d.synthetic_noise);
  if (d.test_images.empty() || d.test_labels.empty()) return std::nullopt;
  return read_idx(d.test_images, d.test_labels, d.test_limit);
}

}  // namespace tiltnet
