// SPDX-License-Identifier: Apache-2.0
// Trains a small conv net on synthetic squares with generative pre-training
// followed by discriminative refinement, then draws an HMC sample from each
// class node and renders it.
//
//   demo_train_and_sample [output dir]

#include <cstdio>
#include <filesystem>

#include "tiltnet/data.hpp"
#include "tiltnet/hmc.hpp"
#include "tiltnet/image.hpp"
#include "tiltnet/net.hpp"
#include "tiltnet/train.hpp"

using namespace tiltnet;

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "demo_samples";
  std::filesystem::create_directories(out);

  const Dataset train = synthetic_dataset(400, 4, 16, 1);
  const Dataset test = synthetic_dataset(200, 4, 16, 2);

  NetworkConfig c;
  c.input_shape = {1, 16, 16};
  c.layers = parse_layers("conv:8:5, pool:2:2, dense:32, relu, dense:4");
  c.classes = 4;
  c.init.conv_std = 0.1;
  Network net = Network::build(c);

  Hyperparams h;
  h.max_epochs = 6;
  Schedule s;
  s.mode = TrainMode::gg_dg;
  s.pretrain_epochs = 3;
  TrainOptions opts;
  opts.on_epoch = [](const EpochRecord& r) { std::printf("%s\n", r.to_line().c_str()); };
  run_training(net, train, &test, s, h, opts);

  HmcConfig hmc;
  hmc.mass = 1.0;
  hmc.step_size = 0.05;
  hmc.leapfrog_steps = 20;
  hmc.iterations = 100;
  hmc.init = HmcInit::zero;
  for (std::size_t y = 0; y < c.classes; ++y) {
    const auto run = sample_node(net, net.config().layers.back().name, y, hmc);
    const auto& img = run.records.back().image;
    const auto path = out / ("class" + std::to_string(y) + ".pgm");
    render_image(img, path);
    std::printf("class=%zu accepted=%zu final_score=%.3f predicted=%zu file=%s\n", y, run.accepted,
                run.scores.back(), predictions(net.forward_batch(as_batch(img)).scores)[0], path.c_str());
  }
}
