// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "support.hpp"
#include "tiltnet/checkpoint.hpp"

using namespace tiltnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tiltnet_test_ckpt_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Network trained_looking_net() {
  auto cfg = NetworkConfig::lenet(77);
  cfg.init.dense_gain = 0.7;
  auto net = Network::build(cfg);
  // Non-trivial biases so every tensor carries information.
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d;
  for (auto& e : net.params().mutable_entries())
    if (e.value.rank() == 1)
      for (double& v : e.value.data()) v = d(rng);
  return net;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = temp_dir("roundtrip");
  const auto net = trained_looking_net();
  save_checkpoint(net, dir / "a.ckpt");
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(loaded, dir / "b.ckpt");
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_EQ(loaded.config(), net.config());
  ASSERT_EQ(loaded.params().size(), net.params().size());
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    EXPECT_EQ(loaded.params()[i].name, net.params()[i].name);
    EXPECT_EQ(loaded.params()[i].value, net.params()[i].value);
  }
}

TEST(Checkpoint, LoadedNetReproducesScoresBitExactly) {
  const auto dir = temp_dir("scores");
  const auto net = trained_looking_net();
  save_checkpoint(net, dir / "n.ckpt");
  std::mt19937_64 rng(2);
  const auto x = oracle::random_tensor({3, 1, 28, 28}, rng);
  EXPECT_EQ(load_checkpoint(dir / "n.ckpt").forward_batch(x).scores, net.forward_batch(x).scores);
}

TEST(Checkpoint, TruncatedFileIsReportedCorrupt) {
  const auto dir = temp_dir("truncated");
  save_checkpoint(trained_looking_net(), dir / "n.ckpt");
  const auto bytes = slurp(dir / "n.ckpt");
  for (std::size_t keep : {std::size_t{3}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    std::ofstream(dir / "t.ckpt", std::ios::binary).write(bytes.data(), std::streamsize(keep));
    try {
      load_checkpoint(dir / "t.ckpt");
      ADD_FAILURE() << "no error for " << keep << " bytes";
    } catch (const CheckpointError& e) {
      EXPECT_NE(std::string(e.what()).find("corrupt"), std::string::npos) << e.what();
    }
  }
}

TEST(Checkpoint, ChecksumAndVersionAreEnforced) {
  const auto dir = temp_dir("crc");
  save_checkpoint(trained_looking_net(), dir / "n.ckpt");
  auto bytes = slurp(dir / "n.ckpt");
  auto flipped = bytes;
  flipped[bytes.size() - 100] ^= 0x01;
  std::ofstream(dir / "f.ckpt", std::ios::binary) << flipped;
  EXPECT_THROW(load_checkpoint(dir / "f.ckpt"), CheckpointError);
  auto versioned = bytes;
  versioned[8] = 9;  // u32 version follows the 8-byte magic
  std::ofstream(dir / "v.ckpt", std::ios::binary) << versioned;
  try {
    load_checkpoint(dir / "v.ckpt");
    ADD_FAILURE();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Checkpoint, TruncatedViewsAreNotSaved) {
  const auto dir = temp_dir("view");
  EXPECT_THROW(save_checkpoint(trained_looking_net().truncate_at("conv2", 0), dir / "x.ckpt"), ConfigError);
}

TEST(FormatDouble, ShortestRoundTrip) {
  for (double v : {0.1, 1e-300, -3.25, 431080.0, 0.0030000000000000001}) EXPECT_EQ(parse_double(format_double(v), "v"), v);
  EXPECT_THROW(parse_double("1.5x", "v"), ConfigError);
}
