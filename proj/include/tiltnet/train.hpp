// SPDX-License-Identifier: Apache-2.0
#pragma once

// Mini-batch momentum SGD and the three training schedules:
//   DG     discriminative loss layer throughout,
//   GG     generative loss layer throughout,
//   GG+DG  generative pre-training for a fixed number of epochs, then
//          discriminative refinement at its own learning rate.
// The schedules differ only in which loss layer produces the n×C gradient;
// the backward pass and the optimizer are shared.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tiltnet/checkpoint.hpp"
#include "tiltnet/data.hpp"
#include "tiltnet/error.hpp"
#include "tiltnet/loss.hpp"
#include "tiltnet/net.hpp"

namespace tiltnet {

struct Hyperparams {
  std::size_t batch_size = 64;
  double base_lr = 0.01;
  double weight_decay = 0.0005;
  double momentum = 0.9;
  std::size_t max_epochs = 25;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(base_lr > 0.0)) throw ConfigError("base learning rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
    if (max_epochs == 0) throw ConfigError("max epochs must be positive");
  }
};

enum class TrainMode { dg, gg, gg_dg };

inline std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::dg: return "DG";
    case TrainMode::gg: return "GG";
    case TrainMode::gg_dg: return "GG+DG";
  }
  return "?";
}

inline TrainMode parse_mode(std::string_view s) {
  if (s == "DG") return TrainMode::dg;
  if (s == "GG") return TrainMode::gg;
  if (s == "GG+DG") return TrainMode::gg_dg;
  throw ConfigError("unknown training mode '" + std::string(s) + "' (expected DG, GG or GG+DG)");
}

/// Within-stage learning-rate policy. step_epochs = 0 keeps the rate constant;
/// otherwise it is multiplied by gamma every step_epochs epochs of the stage.
struct LrPolicy {
  std::size_t step_epochs = 0;
  double gamma = 0.1;
};

struct Schedule {
  TrainMode mode = TrainMode::dg;
  std::size_t pretrain_epochs = 16;  // GG+DG only
  double refine_lr = 0.003;          // GG+DG only
  LrPolicy policy;

  void validate(const Hyperparams& h) const {
    if (mode == TrainMode::gg_dg) {
      if (pretrain_epochs >= h.max_epochs) throw ConfigError("pre-train epochs must be fewer than max epochs");
      if (!(refine_lr > 0.0)) throw ConfigError("refine learning rate must be positive");
    }
    if (policy.step_epochs > 0 && !(policy.gamma > 0.0)) throw ConfigError("lr decay gamma must be positive");
  }

  LossKind stage(std::size_t epoch) const {
    switch (mode) {
      case TrainMode::dg: return LossKind::discriminative;
      case TrainMode::gg: return LossKind::generative;
      case TrainMode::gg_dg: return epoch <= pretrain_epochs ? LossKind::generative : LossKind::discriminative;
    }
    return LossKind::discriminative;
  }

  /// Epoch (1-based) at which GG+DG switches to the discriminative stage.
  std::optional<std::size_t> switch_epoch() const {
    if (mode != TrainMode::gg_dg) return std::nullopt;
    return pretrain_epochs + 1;
  }

  double learning_rate(std::size_t epoch, const Hyperparams& h) const {
    double lr = h.base_lr;
    std::size_t into_stage = epoch - 1;
    if (mode == TrainMode::gg_dg && epoch > pretrain_epochs) {
      lr = refine_lr;
      into_stage = epoch - pretrain_epochs - 1;
    }
    if (policy.step_epochs > 0) lr *= std::pow(policy.gamma, static_cast<double>(into_stage / policy.step_epochs));
    return lr;
  }
};

struct OptimizerState {
  std::vector<Tensor> velocity;

  static OptimizerState zeros_like(const ParameterStore& store) {
    OptimizerState s;
    for (const auto& e : store.entries()) s.velocity.emplace_back(e.value.shape());
    return s;
  }
  void reset() {
    for (auto& v : velocity) v.fill(0.0);
  }
};

/// Ascent-form momentum step: v ← μ·v + lr·(g − λ·w); w ← w + v.
/// `grads` are log-likelihood gradients already scaled by 1/batch.
inline void sgd_step(Network& net, const ParamGrads& grads, OptimizerState& state, const Hyperparams& h, double lr) {
  auto& store = net.params();
  if (grads.tensors.size() != store.size() || state.velocity.size() != store.size())
    throw ShapeError("gradient/optimizer state does not match the parameter store");
  for (std::size_t i = 0; i < grads.tensors.size(); ++i)
    if (!all_finite(grads.tensors[i].data()))
      throw NumericError("non-finite gradient in '" + store[i].name + "'; step aborted");
  auto& entries = store.mutable_entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto w = entries[i].value.data();
    auto v = state.velocity[i].data();
    const auto g = grads.tensors[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = h.momentum * v[k] + lr * (g[k] - h.weight_decay * w[k]);
      w[k] += v[k];
    }
  }
}

/// Predicted class per row: argmax with ties to the lowest index.
inline std::vector<std::size_t> predictions(const ScoreMatrix& scores) {
  std::vector<std::size_t> out(scores.rows());
  for (std::size_t j = 0; j < scores.rows(); ++j) {
    std::size_t best = 0;
    for (std::size_t y = 1; y < scores.cols(); ++y)
      if (scores(j, y) > scores(j, best)) best = y;
    out[j] = best;
  }
  return out;
}

/// Fraction of examples whose argmax score is not the label.
inline double evaluate(const Network& net, const Dataset& data, std::size_t batch_size = 256) {
  if (data.size() == 0) throw ConfigError("cannot evaluate on an empty dataset");
  std::size_t wrong = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(start + batch_size, data.size()); ++i) idx.push_back(i);
    const auto pred = predictions(net.forward_batch(data.gather(idx)).scores);
    for (std::size_t k = 0; k < idx.size(); ++k) wrong += pred[k] != data.labels[idx[k]];
  }
  return static_cast<double>(wrong) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Metrics

struct EpochRecord {
  std::size_t epoch = 0;
  std::string stage;  // GG or DG
  double lr = 0.0;
  bool lr_reset = false;
  std::size_t steps = 0;
  double l_d = 0.0;  // per-example means of the batch log-likelihood sums
  double l_g = 0.0;
  double train_error = 0.0;
  double eval_error = std::numeric_limits<double>::quiet_NaN();
  double ess_mean = 0.0;
  double ess_min = 0.0;
  double wall_seconds = 0.0;  // reported on a comment line, not in the record

  std::string to_line() const {
    std::ostringstream os;
    os << "epoch=" << epoch << " stage=" << stage << " lr=" << format_double(lr) << " lr_reset=" << (lr_reset ? 1 : 0)
       << " steps=" << steps << " l_D=" << format_double(l_d) << " l_G=" << format_double(l_g)
       << " train_error=" << format_double(train_error) << " eval_error=" << format_double(eval_error)
       << " ess_mean=" << format_double(ess_mean) << " ess_min=" << format_double(ess_min);
    return os.str();
  }

  static EpochRecord from_line(std::string_view line) {
    std::map<std::string, std::string> kv;
    for (const auto& tok : detail::split(line, ' ')) {
      if (tok.empty()) continue;
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw IoError("malformed metrics record token '" + tok + "'");
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    auto get = [&](const char* k) -> const std::string& {
      auto it = kv.find(k);
      if (it == kv.end()) throw IoError(std::string("metrics record lacks '") + k + "'");
      return it->second;
    };
    auto num = [&](const char* k) {
      const auto& s = get(k);
      return s == "nan" ? std::numeric_limits<double>::quiet_NaN() : parse_double(s, k);
    };
    EpochRecord r;
    r.epoch = detail::parse_extent(get("epoch"), "epoch");
    r.stage = get("stage");
    r.lr = num("lr");
    r.lr_reset = get("lr_reset") == "1";
    r.steps = detail::parse_extent(get("steps"), "steps");
    r.l_d = num("l_D");
    r.l_g = num("l_G");
    r.train_error = num("train_error");
    r.eval_error = num("eval_error");
    r.ess_mean = num("ess_mean");
    r.ess_min = num("ess_min");
    return r;
  }
};

/// Header comment lines followed by one record per epoch.
struct MetricsLog {
  std::vector<std::string> header;  // without the leading "# "
  EpochRecord initial;
  std::vector<EpochRecord> records;

  std::string to_text() const {
    std::string out;
    for (const auto& h : header) out += "# " + h + "\n";
    out += "# initial " + initial.to_line() + "\n";
    for (const auto& r : records) {
      out += r.to_line() + "\n";
      out += "# timing epoch=" + std::to_string(r.epoch) + " wall_s=" + format_double(r.wall_seconds) + "\n";
    }
    return out;
  }

  /// Record lines only; header and timing comments are skipped.
  static std::vector<EpochRecord> parse_records(std::istream& in) {
    std::vector<EpochRecord> out;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty() && line[0] != '#') out.push_back(EpochRecord::from_line(line));
    return out;
  }
};

/// Per-step report handed to an optional observer.
struct StepInfo {
  std::size_t epoch = 0;
  std::size_t step = 0;  // within the epoch, 0-based
  LossKind kind = LossKind::discriminative;
  std::size_t batch = 0;
  double loss = 0.0;
  std::vector<double> ess;  // per class, generative steps only (0 for absent classes)
  OpCounts network_ops;     // forward + backward of this step
  std::uint64_t loss_ops = 0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> run_dir;  // checkpoints <run>/<epoch>.ckpt and metrics.log
  bool resume = false;
  std::size_t monitor_examples = 0;  // 0: monitor the whole training set
  std::size_t eval_batch = 256;
  std::function<void(const StepInfo&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

namespace detail {

struct MonitorStats {
  double l_d = 0.0, l_g = 0.0, train_error = 0.0, ess_mean = 0.0, ess_min = 0.0;
};

// Both log-likelihoods, training error and ESS over fixed, unshuffled batches.
inline MonitorStats monitor(const Network& net, const Dataset& data, std::size_t batch_size, std::size_t limit) {
  const std::size_t count = limit ? std::min(limit, data.size()) : data.size();
  MonitorStats s;
  std::size_t wrong = 0, ess_samples = 0;
  std::vector<double> ess_sum(net.output_width(), 0.0);
  std::vector<std::size_t> ess_count(net.output_width(), 0);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < count; start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(start + batch_size, count); ++i) idx.push_back(i);
    const auto labels = data.gather_labels(idx);
    const auto scores = net.forward_batch(data.gather(idx)).scores;
    s.l_d += disc_loss_and_grad(scores, labels).value;
    if (idx.size() >= 2) {
      s.l_g += gen_loss_and_grad(scores, labels).value;
      const auto ess = per_class_ess(scores, labels);
      for (std::size_t y = 0; y < ess.size(); ++y)
        if (ess[y] > 0.0) {
          ess_sum[y] += ess[y];
          ++ess_count[y];
          s.ess_mean += ess[y];
          ++ess_samples;
        }
    }
    const auto pred = predictions(scores);
    for (std::size_t k = 0; k < idx.size(); ++k) wrong += pred[k] != labels[k];
  }
  s.l_d /= static_cast<double>(count);
  s.l_g /= static_cast<double>(count);
  s.train_error = static_cast<double>(wrong) / static_cast<double>(count);
  s.ess_mean = ess_samples ? s.ess_mean / static_cast<double>(ess_samples) : 0.0;
  s.ess_min = std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < ess_sum.size(); ++y)
    if (ess_count[y]) s.ess_min = std::min(s.ess_min, ess_sum[y] / static_cast<double>(ess_count[y]));
  if (!std::isfinite(s.ess_min)) s.ess_min = 0.0;
  return s;
}

inline std::filesystem::path epoch_path(const std::filesystem::path& run, std::size_t epoch, const char* ext) {
  return run / (std::to_string(epoch) + ext);
}

inline void save_optimizer_state(const OptimizerState& state, const Network& net, std::size_t epoch,
                                 const std::filesystem::path& path) {
  TensorFile file;
  file.header = fields_to_text({{"kind", "optimizer"}, {"epoch", std::to_string(epoch)}});
  for (std::size_t i = 0; i < state.velocity.size(); ++i)
    file.tensors.push_back({net.params()[i].name, state.velocity[i]});
  write_file(path, encode_tensor_file(file));
}

inline OptimizerState load_optimizer_state(const Network& net, const std::filesystem::path& path) {
  auto file = decode_tensor_file(read_file(path));
  OptimizerState s = OptimizerState::zeros_like(net.params());
  if (file.tensors.size() != s.velocity.size()) throw CheckpointError("optimizer state does not match network");
  for (std::size_t i = 0; i < file.tensors.size(); ++i) {
    if (file.tensors[i].value.shape() != s.velocity[i].shape())
      throw CheckpointError("optimizer state tensor '" + file.tensors[i].name + "' has the wrong shape");
    s.velocity[i] = std::move(file.tensors[i].value);
  }
  return s;
}

}  // namespace detail

inline std::vector<std::string> training_header(const Schedule& sched, const Hyperparams& h) {
  std::ostringstream schedule, hyper;
  schedule << "schedule mode=" << mode_name(sched.mode);
  if (sched.mode == TrainMode::gg_dg)
    schedule << " pretrain_epochs=" << sched.pretrain_epochs << " refine_lr=" << format_double(sched.refine_lr);
  schedule << " lr_policy=" << (sched.policy.step_epochs ? "step" : "constant");
  if (sched.policy.step_epochs)
    schedule << " lr_step_epochs=" << sched.policy.step_epochs << " lr_gamma=" << format_double(sched.policy.gamma);
  hyper << "hyper batch=" << h.batch_size << " base_lr=" << format_double(h.base_lr)
        << " weight_decay=" << format_double(h.weight_decay) << " momentum=" << format_double(h.momentum)
        << " max_epochs=" << h.max_epochs << " seed=" << h.seed;
  return {"tiltnet metrics v1", schedule.str(), hyper.str(),
          "gradient_scale=1/batch weight_decay_applies_to=weights,biases momentum_reset_at_switch=1"};
}

/// One optimizer step on a batch. Returns the batch log-likelihood, or nothing
/// when the batch is too small for the requested loss (a singleton batch has no
/// generative gradient).
inline std::optional<double> train_step(Network& net, const Batch& batch, LossKind kind, OptimizerState& state,
                                        const Hyperparams& h, double lr, StepInfo* info = nullptr) {
  const std::size_t n = batch.labels.size();
  if (kind == LossKind::generative && n < 2) return std::nullopt;
  const OpCounts before = op_counts();
  auto fwd = net.forward_batch(batch.images);
  const auto loss_before = op_counts().loss_ops;
  auto loss = loss_and_grad(kind, fwd.scores, batch.labels);
  const auto loss_after = op_counts().loss_ops;
  auto grads = net.backward_params(fwd.cache, loss.grad);
  grads *= 1.0 / static_cast<double>(n);
  if (info) {
    const OpCounts after = op_counts();
    info->kind = kind;
    info->batch = n;
    info->loss = loss.value;
    info->loss_ops = loss_after - loss_before;
    info->network_ops = {after.conv_macs - before.conv_macs, after.dense_macs - before.dense_macs,
                         after.pool_compares - before.pool_compares, after.elementwise - before.elementwise, 0};
    if (kind == LossKind::generative) info->ess = per_class_ess(fwd.scores, batch.labels);
  }
  sgd_step(net, grads, state, h, lr);
  return loss.value;
}

/// Runs the schedule for hyper.max_epochs epochs, monitoring both
/// log-likelihoods after each epoch. With a run directory, writes
/// <run>/<epoch>.ckpt, the optimizer state beside it and <run>/metrics.log,
/// and can resume from the last complete epoch found there.
inline MetricsLog run_training(Network& net, const Dataset& train, const Dataset* eval, const Schedule& sched,
                               const Hyperparams& h, const TrainOptions& opts = {}) {
  h.validate();
  sched.validate(h);
  if (net.truncated()) throw ConfigError("cannot train a truncated network view");
  if (train.size() == 0) throw ConfigError("training set is empty");

  MetricsLog log;
  log.header = training_header(sched, h);
  OptimizerState state = OptimizerState::zeros_like(net.params());
  std::size_t first_epoch = 1;

  auto write_log = [&] {
    if (!opts.run_dir) return;
    const std::string text = log.to_text();
    detail::write_file(*opts.run_dir / "metrics.log", std::span<const char>(text.data(), text.size()));
  };

  if (opts.run_dir) std::filesystem::create_directories(*opts.run_dir);
  if (opts.run_dir && opts.resume) {
    std::size_t last = 0;
    for (std::size_t e = 1; e <= h.max_epochs; ++e)
      if (std::filesystem::exists(detail::epoch_path(*opts.run_dir, e, ".ckpt")) &&
          std::filesystem::exists(detail::epoch_path(*opts.run_dir, e, ".state")))
        last = e;
    if (last > 0) {
      Network restored = load_checkpoint(detail::epoch_path(*opts.run_dir, last, ".ckpt"));
      if (restored.config().layers != net.config().layers || restored.config().input_shape != net.config().input_shape)
        throw CheckpointError("checkpoint in run directory does not match the configured network");
      net = std::move(restored);
      state = detail::load_optimizer_state(net, detail::epoch_path(*opts.run_dir, last, ".state"));
      std::ifstream old(*opts.run_dir / "metrics.log");
      std::string line;
      while (std::getline(old, line)) {
        if (line.rfind("# initial ", 0) == 0) log.initial = EpochRecord::from_line(line.substr(10));
        if (!line.empty() && line[0] != '#') {
          auto r = EpochRecord::from_line(line);
          if (r.epoch <= last) log.records.push_back(r);
        }
      }
      log.header.push_back("resumed_after_epoch=" + std::to_string(last));
      first_epoch = last + 1;
    }
  }

  if (first_epoch == 1) {
    const auto m = detail::monitor(net, train, h.batch_size, opts.monitor_examples);
    log.initial = {0, "init", 0.0, false, 0, m.l_d, m.l_g, m.train_error,
                   eval ? evaluate(net, *eval, opts.eval_batch) : std::numeric_limits<double>::quiet_NaN(),
                   m.ess_mean, m.ess_min, 0.0};
    write_log();
  }

  BatchIterator batches(train, h.batch_size, h.seed);
  for (std::size_t epoch = first_epoch; epoch <= h.max_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const LossKind kind = sched.stage(epoch);
    const double lr = sched.learning_rate(epoch, h);
    const bool lr_reset = sched.switch_epoch() == epoch;
    if (lr_reset) state.reset();

    batches.begin_epoch(epoch - 1);
    std::size_t step = 0, taken = 0;
    while (auto batch = batches.next_in_epoch()) {
      StepInfo info;
      info.epoch = epoch;
      info.step = step++;
      if (!train_step(net, *batch, kind, state, h, lr, opts.on_step ? &info : nullptr)) continue;
      ++taken;
      if (opts.on_step) opts.on_step(info);
    }

    const auto m = detail::monitor(net, train, h.batch_size, opts.monitor_examples);
    EpochRecord r{epoch, kind == LossKind::generative ? "GG" : "DG", lr, lr_reset, taken, m.l_d, m.l_g,
                  m.train_error,
                  eval ? evaluate(net, *eval, opts.eval_batch) : std::numeric_limits<double>::quiet_NaN(),
                  m.ess_mean, m.ess_min,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()};
    log.records.push_back(r);
    if (opts.run_dir) {
      save_checkpoint(net, detail::epoch_path(*opts.run_dir, epoch, ".ckpt"));
      detail::save_optimizer_state(state, net, epoch, detail::epoch_path(*opts.run_dir, epoch, ".state"));
    }
    write_log();
    if (opts.on_epoch) opts.on_epoch(r);
  }
  return log;
}

}  // namespace tiltnet
