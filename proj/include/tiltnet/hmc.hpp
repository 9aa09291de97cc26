// SPDX-License-Identifier: Apache-2.0
#pragma once

// Hamiltonian Monte Carlo synthesis of images from
//   p(x) ∝ exp(f_node(x; w)) · N(x; 0, σ²I),
// i.e. potential U(x) = −f_node(x; w) + |x|²/(2σ²) and kinetic energy
// K(φ) = |φ|²/(2m). Any node of a trained network can be sampled: the
// network is truncated at the node's layer and the input is sized so that
// the node responds at a single position.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tiltnet/error.hpp"
#include "tiltnet/net.hpp"
#include "tiltnet/tensor.hpp"

namespace tiltnet {

enum class HmcInit { gaussian, zero };

struct HmcConfig {
  double sigma = 10.0;          // std-dev of the Gaussian reference, pixel units
  double mass = 1e-4;           // particle mass m
  double step_size = 1e-4;      // leapfrog ε
  std::size_t leapfrog_steps = 100;
  std::size_t iterations = 300;
  HmcInit init = HmcInit::gaussian;
  double init_std = 10.0;
  bool metropolis = true;
  std::uint64_t seed = 1;
  std::vector<std::size_t> snapshots;  // empty: 0, 10, 50, then every 100

  void validate() const {
    if (!(sigma > 0.0) || !(mass > 0.0) || !(step_size > 0.0))
      throw ConfigError("hmc sigma, mass and step size must be positive");
    if (leapfrog_steps < 1) throw ConfigError("hmc needs at least one leapfrog step");
    if (init == HmcInit::gaussian && init_std < 0.0) throw ConfigError("hmc init std must be non-negative");
  }

  /// Settings used for class nodes of the small digit network.
  static HmcConfig lenet() { return {}; }

  /// Settings used for the large natural-image networks; intermediate
  /// convolutional nodes start from Gaussian noise, class nodes from zero.
  static HmcConfig large_network(bool class_node) {
    HmcConfig c;
    c.step_size = 3e-6;
    c.leapfrog_steps = 50;
    c.sigma = 10.0;
    c.mass = 1e-5;
    c.iterations = class_node ? 500 : 100;
    c.init = class_node ? HmcInit::zero : HmcInit::gaussian;
    return c;
  }

  std::vector<std::size_t> snapshot_iterations() const {
    std::vector<std::size_t> out;
    if (snapshots.empty()) {
      for (std::size_t t : {std::size_t{0}, std::size_t{10}, std::size_t{50}})
        if (t <= iterations) out.push_back(t);
      for (std::size_t t = 100; t <= iterations; t += 100) out.push_back(t);
    } else {
      for (std::size_t t : snapshots)
        if (t <= iterations) out.push_back(t);
    }
    if (out.empty() || out.back() != iterations) out.push_back(iterations);
    return out;
  }
};

/// Anything that supplies U(x) and ∂U/∂x.
template <typename T>
concept Potential = requires(const T& t, const Tensor& x) {
  { t.energy(x) } -> std::convertible_to<double>;
  { t.energy_and_grad(x) } -> std::convertible_to<std::pair<double, Tensor>>;
};

/// U(x) = −f_node(x; w) + |x|²/(2σ²) for one output of a (possibly truncated) network.
class NetworkPotential {
 public:
  NetworkPotential(const Network& net, std::size_t node, double sigma) : net_(&net), node_(node), sigma_(sigma) {
    if (node >= net.output_width())
      throw ConfigError("node " + std::to_string(node) + " out of range for " + std::to_string(net.output_width()) +
                        " outputs");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
  }

  double energy(const Tensor& x) const {
    check(x);
    const double f = net_->forward_batch(as_batch(x)).scores(0, node_);
    return -f + squared_norm(x.data()) / (2.0 * sigma_ * sigma_);
  }

  /// −∂f/∂x + x/σ², with the unpooling routed by the forward pass on x itself.
  std::pair<double, Tensor> energy_and_grad(const Tensor& x) const {
    check(x);
    auto [f, grad] = score_and_input_grad(*net_, x, node_);
    const double inv_var = 1.0 / (sigma_ * sigma_);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = -grad[i] + x[i] * inv_var;
    return {-f + squared_norm(x.data()) * inv_var / 2.0, std::move(grad)};
  }

  double score(const Tensor& x) const { return net_->forward_batch(as_batch(x)).scores(0, node_); }
  double sigma() const { return sigma_; }

 private:
  void check(const Tensor& x) const {
    if (x.shape() != net_->input_shape())
      throw ShapeError("sample shape " + to_string(x.shape()) + " does not match network input " +
                       to_string(net_->input_shape()));
  }
  const Network* net_;
  std::size_t node_;
  double sigma_;
};

static_assert(Potential<NetworkPotential>);

inline double potential(const Network& net, std::size_t node, const Tensor& x, double sigma) {
  return NetworkPotential(net, node, sigma).energy(x);
}

inline Tensor potential_grad(const Network& net, std::size_t node, const Tensor& x, double sigma) {
  return NetworkPotential(net, node, sigma).energy_and_grad(x).second;
}

inline double kinetic_energy(const Tensor& momentum, double mass) { return squared_norm(momentum.data()) / (2.0 * mass); }

/// Position, momentum and the potential (with its gradient) at the position.
struct ChainState {
  Tensor x;
  Tensor momentum;
  double potential = 0.0;
  Tensor potential_grad;
  std::size_t iteration = 0;
};

template <Potential P>
ChainState make_state(const P& target, Tensor x) {
  ChainState s;
  auto [u, g] = target.energy_and_grad(x);
  s.momentum = Tensor(x.shape());
  s.x = std::move(x);
  s.potential = u;
  s.potential_grad = std::move(g);
  return s;
}

/// L leapfrog steps of size ε: half momentum step, alternating full position
/// (x += ε·φ/m) and momentum (φ −= ε·∂U/∂x) steps, closing half momentum step.
template <Potential P>
ChainState leapfrog(const ChainState& start, const P& target, const HmcConfig& cfg) {
  ChainState s = start;
  const double eps = cfg.step_size, inv_mass = 1.0 / cfg.mass;
  auto x = s.x.data();
  auto phi = s.momentum.data();
  auto fail = [&](std::size_t step) {
    throw NumericError("non-finite state in leapfrog step " + std::to_string(step) + " of iteration " +
                       std::to_string(start.iteration) + " (step size " + std::to_string(eps) + " too large?)");
  };
  for (std::size_t i = 0; i < phi.size(); ++i) phi[i] -= 0.5 * eps * s.potential_grad[i];
  for (std::size_t step = 1; step <= cfg.leapfrog_steps; ++step) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += eps * phi[i] * inv_mass;
    auto [u, g] = target.energy_and_grad(s.x);
    if (!std::isfinite(u) || !all_finite(g.data())) fail(step);
    s.potential = u;
    s.potential_grad = std::move(g);
    const double scale = step == cfg.leapfrog_steps ? 0.5 * eps : eps;
    for (std::size_t i = 0; i < phi.size(); ++i) phi[i] -= scale * s.potential_grad[i];
  }
  if (!all_finite(phi)) fail(cfg.leapfrog_steps);
  return s;
}

struct HmcStep {
  ChainState state;
  bool accepted = true;
  double delta_h = 0.0;  // H(proposal) − H(start, refreshed momentum)
};

/// One HMC iteration: draw φ ~ N(0, m·I), integrate, then accept with
/// probability min(1, exp(−ΔH)) when Metropolis is on (always otherwise).
template <Potential P, typename Rng>
HmcStep hmc_iterate(const ChainState& current, const P& target, const HmcConfig& cfg, Rng& rng) {
  ChainState start = current;
  std::normal_distribution<double> normal(0.0, std::sqrt(cfg.mass));
  for (double& p : start.momentum.data()) p = normal(rng);
  const double h_start = start.potential + kinetic_energy(start.momentum, cfg.mass);

  HmcStep out{leapfrog(start, target, cfg), true, 0.0};
  out.delta_h = out.state.potential + kinetic_energy(out.state.momentum, cfg.mass) - h_start;
  if (cfg.metropolis) {
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const double u = uniform(rng);  // drawn every iteration so the stream does not depend on ΔH
    out.accepted = out.delta_h <= 0.0 || u < std::exp(-out.delta_h);
  }
  if (!out.accepted) out.state = std::move(start);
  out.state.iteration = current.iteration + 1;
  return out;
}

struct SampleRecord {
  std::size_t iteration = 0;
  Tensor image;
  double potential = 0.0;
  double kinetic = 0.0;
  double hamiltonian = 0.0;  // potential + kinetic
  double score = 0.0;        // f_node(image)
  std::optional<bool> accepted;
};

struct SampleRun {
  std::vector<SampleRecord> records;
  std::vector<double> scores;  // f_node after every iteration, index 0 = initialization
  std::size_t accepted = 0;
  Shape input_shape;
};

template <typename Rng>
Tensor initial_image(const Shape& shape, const HmcConfig& cfg, Rng& rng) {
  Tensor x(shape);
  if (cfg.init == HmcInit::gaussian && cfg.init_std > 0.0) {
    std::normal_distribution<double> normal(0.0, cfg.init_std);
    for (double& v : x.data()) v = normal(rng);
  }
  return x;
}

/// Runs one chain for cfg.iterations HMC iterations on an already selected
/// network output and records the configured snapshots plus the final state.
inline SampleRun sample_network_node(const Network& net, std::size_t node, const HmcConfig& cfg) {
  cfg.validate();
  NetworkPotential target(net, node, cfg.sigma);
  std::mt19937_64 rng(cfg.seed);
  ChainState state = make_state(target, initial_image(net.input_shape(), cfg, rng));

  SampleRun run;
  run.input_shape = net.input_shape();
  const auto snaps = cfg.snapshot_iterations();
  std::size_t next_snap = 0;
  auto score_of = [&](const ChainState& s) {
    return -s.potential + squared_norm(s.x.data()) / (2.0 * cfg.sigma * cfg.sigma);
  };
  auto record = [&](const ChainState& s, std::optional<bool> accepted) {
    const double k = kinetic_energy(s.momentum, cfg.mass);
    run.records.push_back({s.iteration, s.x, s.potential, k, s.potential + k, score_of(s), accepted});
  };
  run.scores.push_back(score_of(state));
  if (snaps[next_snap] == 0) {
    record(state, std::nullopt);
    ++next_snap;
  }
  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    auto step = hmc_iterate(state, target, cfg, rng);
    state = std::move(step.state);
    run.accepted += step.accepted;
    run.scores.push_back(score_of(state));
    if (next_snap < snaps.size() && snaps[next_snap] == t) {
      record(state, cfg.metropolis ? std::optional<bool>(step.accepted) : std::nullopt);
      ++next_snap;
    }
  }
  return run;
}

/// Samples channel `channel` of layer `layer`; the input is sized by
/// required_input_shape so the node responds at a single position.
inline SampleRun sample_node(const Network& net, std::string_view layer, std::size_t channel, const HmcConfig& cfg) {
  const Network node_net = net.truncate_at(layer, channel);
  return sample_network_node(node_net, 0, cfg);
}

}  // namespace tiltnet
