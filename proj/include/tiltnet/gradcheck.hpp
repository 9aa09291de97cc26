// SPDX-License-Identifier: Apache-2.0
#pragma once

// Finite-difference gradient checks over every differentiable piece of the
// stack. Each suite reports the worst normwise relative error it saw,
//   max_i |analytic_i − numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|),
// against a fixed tolerance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tiltnet/config.hpp"
#include "tiltnet/hmc.hpp"
#include "tiltnet/loss.hpp"
#include "tiltnet/net.hpp"
#include "tiltnet/tensor.hpp"

namespace tiltnet::check {

struct SuiteResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t cases = 0;
  std::string worst_case;
  bool passed() const { return max_error < tolerance; }
};

inline double normwise_relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale > 0.0 ? diff / scale : diff;
}

/// Central differences of f with respect to every entry of `x` (perturbed in place and restored).
template <typename F>
std::vector<double> central_differences(std::span<double> x, F&& f, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

using LossFn = std::function<LossResult(const ScoreMatrix&, const LabelVector&)>;

/// Generative loss evaluated term by term: for every example i, the
/// three-case derivative of log p_{y_i}(x_i) with respect to each f_y(x_j),
/// summed over i. With Mutation::gen_diag_sign the j = i case is computed as
/// 1 + W instead of 1 − W.
inline LossResult gen_loss_literal(const ScoreMatrix& f, const LabelVector& labels, Mutation mutation = Mutation::none) {
  const std::size_t n = f.rows(), classes = f.cols();
  if (n < 2) throw ShapeError("generative loss needs a batch of at least two examples");
  LossResult r{0.0, LossGrad(n, classes)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t yi = labels.at(i);
    double hi = f(0, yi);
    for (std::size_t k = 1; k < n; ++k) hi = std::max(hi, f(k, yi));
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) z += std::exp(f(k, yi) - hi);
    r.value += f(i, yi) - (hi + std::log(z / static_cast<double>(n)));
    for (std::size_t y = 0; y < classes; ++y)
      for (std::size_t j = 0; j < n; ++j) {
        if (y != yi) continue;
        const double w = std::exp(f(j, yi) - hi) / z;
        if (j == i) r.grad(j, y) += mutation == Mutation::gen_diag_sign ? 1.0 + w : 1.0 - w;
        else r.grad(j, y) += -w;
      }
  }
  return r;
}

inline LossFn generative_loss_under_test(Mutation mutation) {
  if (mutation == Mutation::none) return gen_loss_and_grad;
  return [mutation](const ScoreMatrix& f, const LabelVector& l) { return gen_loss_literal(f, l, mutation); };
}

struct RandomInstance {
  ScoreMatrix scores;
  LabelVector labels;
};

inline RandomInstance random_instance(std::mt19937_64& rng, std::size_t max_n = 16, std::size_t max_c = 10) {
  std::uniform_int_distribution<std::size_t> n_dist(2, max_n), c_dist(2, max_c);
  const std::size_t n = n_dist(rng), c = c_dist(rng);
  std::normal_distribution<double> score(0.0, 2.0);
  RandomInstance inst{ScoreMatrix(n, c), LabelVector(n)};
  for (double& v : inst.scores.data()) v = score(rng);
  std::uniform_int_distribution<std::size_t> label(0, c - 1);
  for (auto& y : inst.labels) y = label(rng);
  return inst;
}

/// Analytic loss gradient against central differences of the loss value.
inline SuiteResult loss_suite(const std::string& name, const LossFn& loss, std::size_t trials, std::uint64_t seed,
                              double tol = 1e-8) {
  SuiteResult r{name, 0.0, tol, trials, {}};
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    auto inst = random_instance(rng);
    const auto analytic = loss(inst.scores, inst.labels).grad;
    auto numeric = central_differences(inst.scores.data(), [&] { return loss(inst.scores, inst.labels).value; });
    const double err = normwise_relative_error(analytic.data(), numeric);
    if (err > r.max_error) {
      r.max_error = err;
      r.worst_case = "trial " + std::to_string(t) + " (n=" + std::to_string(inst.scores.rows()) +
                     ", C=" + std::to_string(inst.scores.cols()) + ")";
    }
  }
  return r;
}

/// Aggregated closed form against the term-by-term evaluation.
inline SuiteResult literal_equivalence_suite(const LossFn& closed_form, std::size_t trials, std::uint64_t seed,
                                             double tol = 1e-12) {
  SuiteResult r{"gen_closed_vs_literal", 0.0, tol, trials, {}};
  std::mt19937_64 rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    auto inst = random_instance(rng);
    const auto a = closed_form(inst.scores, inst.labels);
    const auto b = gen_loss_literal(inst.scores, inst.labels);
    double err = 0.0;
    for (std::size_t k = 0; k < a.grad.data().size(); ++k) err = std::max(err, std::abs(a.grad.data()[k] - b.grad.data()[k]));
    err = std::max(err, std::abs(a.value - b.value) / std::max(1.0, std::abs(b.value)));
    if (err > r.max_error) {
      r.max_error = err;
      r.worst_case = "trial " + std::to_string(t);
    }
  }
  return r;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double std = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, std);
  for (double& v : t.data()) v = d(rng);
  return t;
}

/// conv, pool, dense and relu adjoints against central differences of
/// ⟨upstream, forward(·)⟩.
inline SuiteResult primitives_suite(std::uint64_t seed, double tol = 1e-6) {
  SuiteResult r{"primitives", 0.0, tol, 0, {}};
  std::mt19937_64 rng(seed);
  auto note = [&](const std::string& what, double err) {
    ++r.cases;
    if (err > r.max_error) {
      r.max_error = err;
      r.worst_case = what;
    }
  };
  {
    Tensor x = random_tensor({2, 7, 7}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    const std::size_t stride = 2, pad = 1;
    Tensor up = random_tensor(conv2d_forward(x, k, b, stride, pad).shape(), rng);
    auto probe = [&] { return dot(up.data(), conv2d_forward(x, k, b, stride, pad).data()); };
    const auto g = conv2d_backward(up, x, k, stride, pad);
    note("conv input", normwise_relative_error(g.grad_input.data(), central_differences(x.data(), probe)));
    note("conv kernels", normwise_relative_error(g.grad_kernels.data(), central_differences(k.data(), probe)));
    note("conv bias", normwise_relative_error(g.grad_bias.data(), central_differences(b.data(), probe)));
  }
  {
    Tensor x = random_tensor({2, 6, 6}, rng);
    auto p = maxpool_forward(x, 2, 2);
    Tensor up = random_tensor(p.output.shape(), rng);
    auto probe = [&] { return dot(up.data(), maxpool_forward(x, 2, 2).output.data()); };
    note("maxpool", normwise_relative_error(maxpool_backward(up, p.argmax, x.shape()).data(),
                                            central_differences(x.data(), probe)));
  }
  {
    Tensor x = random_tensor({5}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({4}, rng);
    Tensor up = random_tensor({4}, rng);
    auto probe = [&] { return dot(up.data(), dense_forward(x, w, b).data()); };
    const auto g = dense_backward(up, x, w);
    note("dense input", normwise_relative_error(g.grad_input.data(), central_differences(x.data(), probe)));
    note("dense weight", normwise_relative_error(g.grad_weight.data(), central_differences(w.data(), probe)));
    note("dense bias", normwise_relative_error(g.grad_bias.data(), central_differences(b.data(), probe)));
  }
  {
    Tensor x = random_tensor({9}, rng);
    for (double& v : x.data())
      if (std::abs(v) < 0.1) v += v < 0 ? -0.1 : 0.1;  // stay clear of the kink
    Tensor up = random_tensor({9}, rng);
    auto probe = [&] { return dot(up.data(), relu_forward(x).data()); };
    note("relu", normwise_relative_error(relu_backward(up, x).data(), central_differences(x.data(), probe)));
  }
  return r;
}

/// 6×6 input → conv 3×3 → pool 2×2 → dense(C): the small network used for
/// end-to-end checks.
inline NetworkConfig tiny_network_config(std::size_t classes = 3, std::uint64_t seed = 7) {
  NetworkConfig c;
  c.input_shape = {1, 6, 6};
  c.layers = {LayerSpec::conv(2, 3), LayerSpec::pool(2, 2), LayerSpec::dense(classes)};
  c.classes = classes;
  c.init.conv_std = 0.5;
  c.seed = seed;
  return c;
}

/// Loss layer composed with backward_params against central differences of
/// the loss through the whole network, over every parameter. Errors are
/// normalized by the whole gradient: under the generative loss some biases
/// only shift a score column and have an exactly zero gradient.
inline SuiteResult network_suite(const std::string& name, const LossFn& loss, std::uint64_t seed, double tol = 1e-6) {
  SuiteResult r{name, 0.0, tol, 0, {}};
  std::mt19937_64 rng(seed);
  for (std::size_t trial = 0; trial < 3; ++trial) {
    Network net = Network::build(tiny_network_config(3, seed + trial));
    const std::size_t n = 5;
    Tensor images = random_tensor({n, 1, 6, 6}, rng);
    LabelVector labels{0, 1, 2, 0, 1};
    auto value = [&] { return loss(net.forward_batch(images).scores, labels).value; };
    auto fwd = net.forward_batch(images);
    const auto analytic = net.backward_params(fwd.cache, loss(fwd.scores, labels).grad);
    auto& entries = net.params().mutable_entries();
    std::vector<std::vector<double>> numeric;
    double analytic_sq = 0.0, numeric_sq = 0.0;
    for (std::size_t p = 0; p < entries.size(); ++p) {
      numeric.push_back(central_differences(entries[p].value.data(), value));
      analytic_sq += squared_norm(analytic.tensors[p].data());
      numeric_sq += squared_norm(numeric.back());
    }
    const double scale = std::max({std::sqrt(analytic_sq), std::sqrt(numeric_sq), 1e-300});
    for (std::size_t p = 0; p < entries.size(); ++p) {
      double diff = 0.0;
      for (std::size_t i = 0; i < numeric[p].size(); ++i) diff += std::pow(analytic.tensors[p][i] - numeric[p][i], 2);
      const double err = std::sqrt(diff) / scale;
      ++r.cases;
      if (err > r.max_error) {
        r.max_error = err;
        r.worst_case = "trial " + std::to_string(trial) + " parameter " + entries[p].name;
      }
    }
  }
  return r;
}

/// ∂U/∂x of the sampler's potential against central differences of U.
inline SuiteResult potential_suite(std::uint64_t seed, double tol = 1e-6) {
  SuiteResult r{"hmc_potential", 0.0, tol, 0, {}};
  std::mt19937_64 rng(seed);
  Network net = Network::build(tiny_network_config(3, seed));
  for (std::size_t node = 0; node < 3; ++node) {
    Tensor x = random_tensor({1, 6, 6}, rng, 3.0);
    NetworkPotential target(net, node, 10.0);
    const auto analytic = target.energy_and_grad(x).second;
    const auto numeric = central_differences(x.data(), [&] { return target.energy(x); });
    const double err = normwise_relative_error(analytic.data(), numeric);
    ++r.cases;
    if (err > r.max_error) {
      r.max_error = err;
      r.worst_case = "node " + std::to_string(node);
    }
  }
  return r;
}

inline std::vector<SuiteResult> run_all(const GradcheckConfig& cfg, std::uint64_t seed) {
  const LossFn disc = disc_loss_and_grad;
  const LossFn gen = generative_loss_under_test(cfg.mutation);
  return {loss_suite("loss_discriminative", disc, cfg.trials, seed),
          loss_suite("loss_generative", gen, cfg.trials, seed + 1),
          literal_equivalence_suite(gen, cfg.trials, seed + 2),
          primitives_suite(seed + 3),
          network_suite("network_discriminative", disc, seed + 4),
          network_suite("network_generative", gen, seed + 5),
          potential_suite(seed + 6)};
}

}  // namespace tiltnet::check
