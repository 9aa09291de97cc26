// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "tiltnet/hmc.hpp"
#include "tiltnet/image.hpp"

using namespace tiltnet;
namespace fs = std::filesystem;

namespace {

/// U = |x|²/(2s²), an isotropic Gaussian of std s.
struct Quadratic {
  double s = 1.0;
  double energy(const Tensor& x) const { return squared_norm(x.data()) / (2 * s * s); }
  std::pair<double, Tensor> energy_and_grad(const Tensor& x) const {
    Tensor g = x;
    g *= 1.0 / (s * s);
    return {energy(x), g};
  }
};

struct Flat {
  double energy(const Tensor&) const { return 0.0; }
  std::pair<double, Tensor> energy_and_grad(const Tensor& x) const { return {0.0, Tensor(x.shape())}; }
};

static_assert(Potential<Quadratic> && Potential<Flat>);

Network zero_net(const Shape& input) {
  NetworkConfig c;
  c.input_shape = input;
  c.layers = {LayerSpec::dense(1)};
  c.classes = 1;
  auto net = Network::build(c);
  for (auto& e : net.params().mutable_entries()) e.value.fill(0.0);
  return net;
}

HmcConfig quad_config(double eps, std::size_t steps) {
  HmcConfig c;
  c.step_size = eps;
  c.leapfrog_steps = steps;
  c.mass = 1.0;
  return c;
}

double hamiltonian(const ChainState& s, double mass) { return s.potential + kinetic_energy(s.momentum, mass); }

}  // namespace

TEST(Potential, ZeroWeightNetIsQuadraticOnly) {
  const auto net = zero_net({1, 3, 3});
  EXPECT_EQ(potential(net, 0, Tensor({1, 3, 3}), 10.0), 0.0);
  std::mt19937_64 rng(1);
  const auto x = oracle::random_tensor({1, 3, 3}, rng, 4.0);
  EXPECT_NEAR(potential(net, 0, x, 10.0), squared_norm(x.data()) / 200.0, 1e-14);
  const auto g = potential_grad(net, 0, x, 10.0);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g[i], x[i] / 100.0, 1e-16);
  EXPECT_THROW(potential(net, 0, Tensor({1, 2, 3}), 10.0), ShapeError);
  EXPECT_THROW(potential(net, 1, x, 10.0), ConfigError);
}

TEST(Potential, LinearNetGradientIsExact) {
  auto net = zero_net({4});
  auto& e = net.params().mutable_entries();
  e[0].value = Tensor({1, 4}, {0.5, -1.0, 2.0, 0.25});
  e[1].value[0] = 3.0;
  const Tensor x({4}, {1.0, 2.0, -3.0, 4.0});
  const auto g = potential_grad(net, 0, x, 2.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g[i], -e[0].value[i] + x[i] / 4.0);
}

TEST(Potential, LenetGradientMatchesFiniteDifferences) {
  auto cfg = NetworkConfig::lenet(12);
  cfg.init.conv_std = 0.2;
  const auto net = Network::build(cfg);
  std::mt19937_64 rng(2);
  auto x = oracle::random_tensor({1, 28, 28}, rng, 3.0);
  const auto g = potential_grad(net, 3, x, 10.0);
  const auto fd = oracle::numeric_grad(x, [&] { return potential(net, 3, x, 10.0); });
  EXPECT_LT(oracle::rel_error(g.data(), fd), 1e-5);
}

TEST(Leapfrog, FreeParticle) {
  const auto cfg = quad_config(0.1, 7);
  auto s = make_state(Flat{}, Tensor({2}, {1.0, -1.0}));
  s.momentum = Tensor({2}, {0.5, 2.0});
  auto c = cfg;
  c.mass = 2.0;
  const auto out = leapfrog(s, Flat{}, c);
  EXPECT_NEAR(out.x[0], 1.0 + 7 * 0.1 * 0.5 / 2.0, 1e-14);
  EXPECT_NEAR(out.x[1], -1.0 + 7 * 0.1 * 2.0 / 2.0, 1e-14);
  EXPECT_EQ(out.momentum, s.momentum);
}

TEST(Leapfrog, TwoStepsMatchScalarRecurrence) {
  // U = x²/2, m = 1: hand-rolled kick-drift-kick.
  const double eps = 0.3;
  double x = 1.2, p = -0.4;
  auto s = make_state(Quadratic{}, Tensor({1}, {x}));
  s.momentum[0] = p;
  const auto out = leapfrog(s, Quadratic{}, quad_config(eps, 2));
  p -= 0.5 * eps * x;
  x += eps * p;
  p -= eps * x;
  x += eps * p;
  p -= 0.5 * eps * x;
  EXPECT_NEAR(out.x[0], x, 1e-15);
  EXPECT_NEAR(out.momentum[0], p, 1e-15);
  EXPECT_NEAR(out.potential, x * x / 2, 1e-15);
}

TEST(Leapfrog, TimeReversible) {
  std::mt19937_64 rng(3);
  const Quadratic target{2.0};
  auto s = make_state(target, oracle::random_tensor({16}, rng));
  s.momentum = oracle::random_tensor({16}, rng);
  const auto cfg = quad_config(0.05, 40);
  auto fwd = leapfrog(s, target, cfg);
  fwd.momentum *= -1.0;
  const auto back = leapfrog(fwd, target, cfg);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_NEAR(back.x[i], s.x[i], 1e-8);
    EXPECT_NEAR(-back.momentum[i], s.momentum[i], 1e-8);
  }
}

TEST(Leapfrog, EnergyErrorIsSecondOrder) {
  const Quadratic target{1.0};
  auto s = make_state(target, Tensor({1}, {1.0}));
  s.momentum[0] = 0.5;
  auto drift = [&](double eps, std::size_t steps) {
    const auto out = leapfrog(s, target, quad_config(eps, steps));
    return std::abs(hamiltonian(out, 1.0) - hamiltonian(s, 1.0));
  };
  const double ratio = drift(0.02, 50) / drift(0.01, 100);
  EXPECT_GE(ratio, 3.5);
  EXPECT_LE(ratio, 4.5);
}

TEST(Leapfrog, NonFiniteStateAbortsWithIteration) {
  struct Exploding {
    double energy(const Tensor& x) const { return std::exp(x[0] * x[0]); }
    std::pair<double, Tensor> energy_and_grad(const Tensor& x) const {
      return {energy(x), Tensor({1}, {2 * x[0] * std::exp(x[0] * x[0])})};
    }
  };
  auto s = make_state(Exploding{}, Tensor({1}, {3.0}));
  s.iteration = 17;
  try {
    leapfrog(s, Exploding{}, quad_config(1.0, 10));
    ADD_FAILURE();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 17"), std::string::npos) << e.what();
  }
}

TEST(HmcIterate, DownhillProposalsAlwaysAccepted) {
  const Quadratic target{1.0};
  std::mt19937_64 rng(4);
  auto s = make_state(target, Tensor({3}, {5.0, -5.0, 5.0}));
  const auto cfg = quad_config(0.3, 5);
  std::size_t downhill = 0;
  for (int t = 0; t < 500; ++t) {
    auto step = hmc_iterate(s, target, cfg, rng);
    if (step.delta_h <= 0.0) {
      EXPECT_TRUE(step.accepted);
      ++downhill;
    }
    EXPECT_NEAR(step.state.potential, target.energy(step.state.x), 1e-12);
    s = step.state;
  }
  EXPECT_GT(downhill, 0u);
}

TEST(HmcIterate, MetropolisOffAlwaysAccepts) {
  const Quadratic target{1.0};
  std::mt19937_64 rng(5);
  auto s = make_state(target, Tensor({2}, {0.0, 0.0}));
  auto cfg = quad_config(1.9, 3);  // near the stability limit: large ΔH
  cfg.metropolis = false;
  for (int t = 0; t < 50; ++t) {
    auto step = hmc_iterate(s, target, cfg, rng);
    EXPECT_TRUE(step.accepted);
    s = step.state;
  }
}

TEST(HmcIterate, ZeroNetworkGaussianMoments) {
  const auto net = zero_net({1, 2, 2});
  const NetworkPotential target(net, 0, 10.0);
  HmcConfig cfg;
  cfg.mass = 1.0;
  cfg.step_size = 0.5;
  cfg.leapfrog_steps = 31;
  std::mt19937_64 rng(6);
  auto s = make_state(target, Tensor({1, 2, 2}));
  const std::size_t burn = 200, keep = 10000;
  std::vector<double> sum(4, 0.0), sq(4, 0.0);
  std::size_t accepted = 0;
  for (std::size_t t = 0; t < burn + keep; ++t) {
    auto step = hmc_iterate(s, target, cfg, rng);
    s = std::move(step.state);
    if (t < burn) continue;
    accepted += step.accepted;
    for (std::size_t p = 0; p < 4; ++p) {
      sum[p] += s.x[p];
      sq[p] += s.x[p] * s.x[p];
    }
  }
  for (std::size_t p = 0; p < 4; ++p) {
    const double mean = sum[p] / keep, var = sq[p] / keep - mean * mean;
    EXPECT_LT(std::abs(mean), 0.05 * 10.0) << "pixel " << p;
    EXPECT_NEAR(var, 100.0, 5.0) << "pixel " << p;
  }
  EXPECT_GT(accepted, keep * 9 / 10);
}

TEST(SampleNode, ZeroIterationsRecordsInitialization) {
  const auto net = zero_net({1, 3, 3});
  HmcConfig cfg;
  cfg.iterations = 0;
  cfg.seed = 9;
  const auto run = sample_network_node(net, 0, cfg);
  ASSERT_EQ(run.records.size(), 1u);
  std::mt19937_64 rng(9);
  EXPECT_EQ(run.records[0].image, initial_image({1, 3, 3}, cfg, rng));
  EXPECT_EQ(run.records[0].iteration, 0u);
  EXPECT_FALSE(run.records[0].accepted);
  cfg.init = HmcInit::zero;
  const auto zero_run = sample_network_node(net, 0, cfg);
  for (double v : zero_run.records[0].image.data()) EXPECT_EQ(v, 0.0);
}

TEST(SampleNode, SnapshotScheduleEnergiesAndDeterminism) {
  auto cfg = NetworkConfig::lenet(5);
  const auto net = Network::build(cfg);
  HmcConfig h;
  h.iterations = 12;
  h.leapfrog_steps = 3;
  h.snapshots = {0, 5, 10};
  const auto run = sample_node(net, "conv2", 7, h);
  EXPECT_EQ(run.input_shape, (Shape{1, 14, 14}));
  std::vector<std::size_t> its;
  for (const auto& r : run.records) {
    its.push_back(r.iteration);
    EXPECT_EQ(r.hamiltonian, r.potential + r.kinetic);
  }
  EXPECT_EQ(its, (std::vector<std::size_t>{0, 5, 10, 12}));
  EXPECT_EQ(run.scores.size(), 13u);
  const auto again = sample_node(net, "conv2", 7, h);
  EXPECT_EQ(again.records.back().image, run.records.back().image);
  h.seed = 2;
  EXPECT_NE(sample_node(net, "conv2", 7, h).records.back().image, run.records.back().image);
}

TEST(SampleNode, DefaultSnapshotSchedule) {
  HmcConfig h;
  EXPECT_EQ(h.snapshot_iterations(), (std::vector<std::size_t>{0, 10, 50, 100, 200, 300}));
  h.iterations = 120;
  EXPECT_EQ(h.snapshot_iterations(), (std::vector<std::size_t>{0, 10, 50, 100, 120}));
}

TEST(HmcConfig, PresetsAndValidation) {
  const auto l = HmcConfig::lenet();
  EXPECT_EQ(l.iterations, 300u);
  EXPECT_EQ(l.step_size, 1e-4);
  EXPECT_EQ(l.leapfrog_steps, 100u);
  EXPECT_EQ(l.sigma, 10.0);
  EXPECT_EQ(l.mass, 1e-4);
  EXPECT_EQ(l.init_std, 10.0);
  const auto big = HmcConfig::large_network(true);
  EXPECT_EQ(big.step_size, 3e-6);
  EXPECT_EQ(big.leapfrog_steps, 50u);
  EXPECT_EQ(big.mass, 1e-5);
  EXPECT_EQ(big.init, HmcInit::zero);
  HmcConfig bad;
  bad.mass = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(RenderImage, AffineQuantization) {
  const auto dir = fs::temp_directory_path() / "tiltnet_test_render";
  fs::create_directories(dir);
  render_image(Tensor({1, 2, 2}, {0, 1, 2, 3}), dir / "a.pgm");
  EXPECT_EQ(read_image(dir / "a.pgm").values(), (std::vector<double>{0, 85, 170, 255}));
  render_image(Tensor({1, 3, 2}, 7.5), dir / "c.pgm");
  for (double v : read_image(dir / "c.pgm").values()) EXPECT_EQ(v, 128.0);
  EXPECT_THROW(render_image(Tensor({2, 2, 2}), dir / "x.pgm"), ShapeError);
  EXPECT_THROW(render_image(Tensor({1, 2, 2}), dir / "no" / "such" / "x.pgm"), IoError);
}

TEST(RenderImage, RenderParseRenderIsByteIdentical) {
  const auto dir = fs::temp_directory_path() / "tiltnet_test_render";
  fs::create_directories(dir);
  std::mt19937_64 rng(7);
  for (std::size_t c : {1u, 3u}) {
    const std::string ext = c == 1 ? ".pgm" : ".ppm";
    render_image(oracle::random_tensor({c, 5, 4}, rng), dir / ("r1" + ext));
    render_image(read_image(dir / ("r1" + ext)), dir / ("r2" + ext));
    std::ifstream a(dir / ("r1" + ext), std::ios::binary), b(dir / ("r2" + ext), std::ios::binary);
    EXPECT_EQ(std::string(std::istreambuf_iterator<char>(a), {}), std::string(std::istreambuf_iterator<char>(b), {}));
  }
}
