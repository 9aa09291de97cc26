// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tiltnet/error.hpp"
#include "tiltnet/tensor.hpp"

namespace tiltnet {

/// Maps [min, max] of the image affinely onto 0..255 (rounded); a constant
/// image becomes uniform 128. Returns interleaved bytes, channel-minor.
inline std::vector<unsigned char> quantize_image(const Tensor& x) {
  const std::size_t channels = x.rank() == 3 ? x.extent(0) : 1;
  const std::size_t plane = x.size() / channels;
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  const double min = *lo, range = *hi - *lo;
  std::vector<unsigned char> out(x.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      const double v = x[c * plane + p];
      const long q = range > 0.0 ? std::lround((v - min) / range * 255.0) : 128;
      out[p * channels + c] = static_cast<unsigned char>(std::clamp(q, 0L, 255L));
    }
  return out;
}

/// Writes a [1,H,W] or [H,W] tensor as binary PGM, or [3,H,W] as binary PPM.
inline void render_image(const Tensor& x, const std::filesystem::path& path) {
  if (!(x.rank() == 2 || (x.rank() == 3 && (x.extent(0) == 1 || x.extent(0) == 3))))
    throw ShapeError("render_image needs a 1- or 3-channel image, got " + to_string(x.shape()));
  const std::size_t channels = x.rank() == 3 ? x.extent(0) : 1;
  const std::size_t height = x.extent(x.rank() - 2), width = x.extent(x.rank() - 1);
  const auto bytes = quantize_image(x);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image '" + path.string() + "'");
  out << (channels == 1 ? "P5" : "P6") << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

/// Reads a binary PGM/PPM (maxval 255) back into a [C,H,W] tensor of 0..255 values.
inline Tensor read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path.string() + "'");
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if ((magic != "P5" && magic != "P6") || maxval != 255 || width == 0 || height == 0)
    throw IoError("unsupported image header in '" + path.string() + "'");
  in.get();
  const std::size_t channels = magic == "P5" ? 1 : 3;
  std::vector<unsigned char> bytes(width * height * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError("truncated image '" + path.string() + "'");
  Tensor x({channels, height, width});
  for (std::size_t p = 0; p < width * height; ++p)
    for (std::size_t c = 0; c < channels; ++c) x[c * width * height + p] = bytes[p * channels + c];
  return x;
}

}  // namespace tiltnet
