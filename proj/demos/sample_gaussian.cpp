// SPDX-License-Identifier: Apache-2.0
// HMC on the simplest network potential: a network whose weights are all zero
// has f ≡ 0, so U(x) = |x|²/2σ² and the chain should reproduce N(0, σ²I).
//
//   demo_sample_gaussian [iterations] [sigma]

#include <cstdio>
#include <cstdlib>
#include <random>

#include "tiltnet/hmc.hpp"
#include "tiltnet/net.hpp"

using namespace tiltnet;

int main(int argc, char** argv) {
  const std::size_t iterations = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 5000;
  const double sigma = argc > 2 ? std::strtod(argv[2], nullptr) : 10.0;

  NetworkConfig c;
  c.input_shape = {1, 3, 3};
  c.layers = {LayerSpec::dense(1)};
  c.classes = 1;
  Network net = Network::build(c);
  for (auto& e : net.params().mutable_entries()) e.value.fill(0.0);

  HmcConfig cfg;
  cfg.sigma = sigma;
  cfg.mass = 1.0;
  cfg.step_size = 0.05 * sigma;
  cfg.leapfrog_steps = 31;
  const NetworkPotential target(net, 0, sigma);
  std::mt19937_64 rng(cfg.seed);
  auto state = make_state(target, Tensor(c.input_shape));

  double sum = 0.0, sq = 0.0;
  std::size_t accepted = 0, count = 0;
  for (std::size_t t = 0; t < iterations; ++t) {
    auto step = hmc_iterate(state, target, cfg, rng);
    accepted += step.accepted;
    state = std::move(step.state);
    if (t < iterations / 10) continue;  // burn-in
    for (double v : state.x.data()) {
      sum += v;
      sq += v * v;
      ++count;
    }
  }
  const double mean = sum / double(count);
  std::printf("iterations=%zu accepted=%zu\n", iterations, accepted);
  std::printf("pixel mean=%.4f (target 0)  variance=%.3f (target %.3f)\n", mean, sq / double(count) - mean * mean,
              sigma * sigma);
}
