// SPDX-License-Identifier: Apache-2.0
#pragma once

// tiltnet <train|eval|sample|gradcheck|inspect> --config <path>
//         [--checkpoint <path>] [--layer <name>] [--channel <k>] [--seed <n>]
//
// Results are printed as single `key=value` lines so scripts can grep them.
// Exit codes: 0 ok, 2 config error, 3 IO error, 4 numeric failure,
// 5 check failure, 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tiltnet/checkpoint.hpp"
#include "tiltnet/config.hpp"
#include "tiltnet/data.hpp"
#include "tiltnet/gradcheck.hpp"
#include "tiltnet/hmc.hpp"
#include "tiltnet/image.hpp"
#include "tiltnet/net.hpp"
#include "tiltnet/train.hpp"

namespace tiltnet::cli {

enum ExitCode : int { ok = 0, internal = 1, config_error = 2, io_error = 3, numeric_error = 4, check_failed = 5 };

struct Options {
  std::filesystem::path config;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::string> layer;
  std::optional<std::size_t> channel;
  std::optional<std::uint64_t> seed;
};

inline RunConfig resolve_config(const Options& opt) {
  RunConfig cfg = load_run_config(opt.config);
  if (opt.seed) cfg.set_seed(*opt.seed);
  return cfg;
}

inline int cmd_train(const Options& opt, std::ostream& out) {
  const RunConfig cfg = resolve_config(opt);
  // Load data first so a bad path leaves no output directory behind.
  const Dataset train = load_train_data(cfg);
  const auto eval = load_eval_data(cfg);
  Network net = Network::build(cfg.network);
  TrainOptions topts;
  topts.run_dir = cfg.output;
  topts.resume = cfg.resume;
  topts.monitor_examples = cfg.monitor_examples;
  topts.on_epoch = [&](const EpochRecord& r) { out << r.to_line() << std::endl; };
  const auto log = run_training(net, train, eval ? &*eval : nullptr, cfg.schedule, cfg.hyper, topts);
  const auto& last = log.records.back();
  out << "train_error=" << format_double(last.train_error) << "\n";
  if (eval) out << "error_rate=" << format_double(last.eval_error) << "\n";
  out << "checkpoint=" << (cfg.output / (std::to_string(last.epoch) + ".ckpt")).string() << "\n";
  return ok;
}

inline int cmd_eval(const Options& opt, std::ostream& out) {
  const RunConfig cfg = resolve_config(opt);
  if (!opt.checkpoint) throw ConfigError("eval needs --checkpoint");
  const Network net = load_checkpoint(*opt.checkpoint);
  const auto eval = load_eval_data(cfg);
  const Dataset data = eval ? *eval : load_train_data(cfg);
  out << "examples=" << data.size() << "\n";
  out << "error_rate=" << format_double(evaluate(net, data)) << "\n";
  return ok;
}

inline void write_manifest(const std::filesystem::path& path, const RunConfig& cfg, const HmcConfig& hmc,
                           const std::string& layer, std::size_t channel, const SampleRun& run,
                           const std::vector<std::string>& files) {
  std::ofstream m(path);
  if (!m) throw IoError("cannot write manifest '" + path.string() + "'");
  m << "# tiltnet sample manifest v1\n";
  m << "# config seed=" << hmc.seed << " layer=" << layer << " channel=" << channel << " sigma=" << format_double(hmc.sigma)
    << " mass=" << format_double(hmc.mass) << " step_size=" << format_double(hmc.step_size)
    << " leapfrog_steps=" << hmc.leapfrog_steps << " iterations=" << hmc.iterations
    << " init=" << (hmc.init == HmcInit::gaussian ? "gaussian" : "zero") << " init_std=" << format_double(hmc.init_std)
    << " metropolis=" << (hmc.metropolis ? "on" : "off") << " input=" << to_string(run.input_shape)
    << " network_seed=" << cfg.network.seed << "\n";
  m << "# accepted=" << run.accepted << " of " << hmc.iterations << "\n";
  for (std::size_t i = 0; i < run.records.size(); ++i) {
    const auto& r = run.records[i];
    m << "iter=" << r.iteration << " U=" << format_double(r.potential) << " K=" << format_double(r.kinetic)
      << " H=" << format_double(r.hamiltonian) << " score=" << format_double(r.score)
      << " accepted=" << (r.accepted ? (*r.accepted ? "1" : "0") : "-") << " file=" << files[i] << "\n";
  }
}

inline int cmd_sample(const Options& opt, std::ostream& out) {
  const RunConfig cfg = resolve_config(opt);
  if (!opt.checkpoint) throw ConfigError("sample needs --checkpoint");
  if (!opt.channel) throw ConfigError("sample needs --channel");
  const Network net = load_checkpoint(*opt.checkpoint);
  const std::string layer = opt.layer.value_or(net.config().layers.back().name);
  const Network node_net = net.truncate_at(layer, *opt.channel);
  const bool class_node = *net.layer_index(layer) + 1 == net.config().layers.size();
  out << "input_shape=" << to_string(node_net.input_shape()) << "\n";

  const auto dir = cfg.output / ("sample_" + layer + "_" + std::to_string(*opt.channel));
  std::size_t agree = 0;
  for (std::size_t k = 0; k < cfg.chains; ++k) {
    HmcConfig hmc = cfg.hmc;
    hmc.seed = cfg.hmc.seed + k;
    const SampleRun run = sample_network_node(node_net, 0, hmc);
    const auto chain_dir = dir / ("chain" + std::to_string(k));
    std::filesystem::create_directories(chain_dir);
    std::vector<std::string> files;
    for (const auto& r : run.records) {
      files.push_back("iter_" + std::to_string(r.iteration) + (r.image.extent(0) == 3 ? ".ppm" : ".pgm"));
      render_image(r.image, chain_dir / files.back());
    }
    write_manifest(chain_dir / "manifest.txt", cfg, hmc, layer, *opt.channel, run, files);
    out << "chain=" << k << " seed=" << hmc.seed << " accepted=" << run.accepted
        << " final_score=" << format_double(run.scores.back());
    if (class_node) {
      const auto pred = predictions(net.forward_batch(as_batch(run.records.back().image)).scores)[0];
      agree += pred == *opt.channel;
      out << " predicted=" << pred;
    }
    out << "\n";
  }
  if (class_node) out << "self_consistency=" << format_double(static_cast<double>(agree) / static_cast<double>(cfg.chains)) << "\n";
  out << "output=" << dir.string() << "\n";
  return ok;
}

inline int cmd_gradcheck(const Options& opt, std::ostream& out) {
  const RunConfig cfg = resolve_config(opt);
  bool all_ok = true;
  for (const auto& s : check::run_all(cfg.gradcheck, cfg.seed)) {
    out << "suite=" << s.name << " cases=" << s.cases << " max_rel_err=" << format_double(s.max_error)
        << " tol=" << format_double(s.tolerance) << " status=" << (s.passed() ? "PASS" : "FAIL");
    if (!s.passed()) out << " worst=\"" << s.worst_case << "\"";
    out << "\n";
    all_ok = all_ok && s.passed();
  }
  out << "gradcheck=" << (all_ok ? "PASS" : "FAIL") << "\n";
  return all_ok ? ok : check_failed;
}

inline int cmd_inspect(const Options& opt, std::ostream& out) {
  const RunConfig cfg = resolve_config(opt);
  const Network net = opt.checkpoint ? load_checkpoint(*opt.checkpoint) : Network::build(cfg.network);
  out << "layers=" << layers_to_text(net.config().layers) << "\n";
  for (std::size_t i = 0; i < net.depth(); ++i) {
    const auto& l = net.layer(i);
    out << "layer=" << l.name << " kind=" << kind_name(l.kind) << " in=" << to_string(net.shapes()[i])
        << " out=" << to_string(net.shapes()[i + 1]);
    if (l.kind != LayerKind::flatten) out << " sample_input=" << to_string(net.required_input_shape(l.name));
    out << "\n";
  }
  out << "parameters=" << net.parameter_count() << "\n";
  const Dataset data = load_train_data(cfg);
  BatchIterator it(data, cfg.hyper.batch_size, cfg.hyper.seed);
  const Batch batch = it.next_batch();
  const auto scores = net.forward_batch(batch.images).scores;
  out << "batch=" << batch.labels.size() << " l_D=" << format_double(disc_loss_and_grad(scores, batch.labels).value);
  if (batch.labels.size() >= 2) {
    out << " l_G=" << format_double(gen_loss_and_grad(scores, batch.labels).value) << "\n";
    const auto ess = per_class_ess(scores, batch.labels);
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < ess.size(); ++y)
      if (ess[y] > 0.0) {
        out << "class=" << y << " ess=" << format_double(ess[y]) << "\n";
        lo = std::min(lo, ess[y]);
      }
    out << "ess_min=" << format_double(lo) << "\n";
  } else {
    out << "\n";
  }
  return ok;
}

/// Parses arguments, dispatches, and maps exceptions onto exit codes.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Generative-gradient CNN training and HMC sampling"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "run configuration file")->required();
    sub->add_option("--checkpoint", opt.checkpoint, "network checkpoint");
    sub->add_option("--layer", opt.layer, "layer to sample from (default: final layer)");
    sub->add_option("--channel", opt.channel, "channel / class index of the sampled node");
    sub->add_option("--seed", opt.seed, "override the config seed");
  };
  std::vector<std::pair<CLI::App*, int (*)(const Options&, std::ostream&)>> commands = {
      {app.add_subcommand("train", "train a network"), cmd_train},
      {app.add_subcommand("eval", "print the error rate of a checkpoint"), cmd_eval},
      {app.add_subcommand("sample", "draw HMC samples from a network node"), cmd_sample},
      {app.add_subcommand("gradcheck", "run the finite-difference suites"), cmd_gradcheck},
      {app.add_subcommand("inspect", "print network shapes and batch diagnostics"), cmd_inspect},
  };
  for (auto& [sub, fn] : commands) add_common(sub);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return config_error;
  }

  try {
    for (auto& [sub, fn] : commands)
      if (sub->parsed()) return fn(opt, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return io_error;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return numeric_error;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return io_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return internal;
  }
  return internal;
}

}  // namespace tiltnet::cli
