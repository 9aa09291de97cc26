// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <zlib.h>

#include "tiltnet/error.hpp"
#include "tiltnet/loss.hpp"
#include "tiltnet/tensor.hpp"

namespace tiltnet {

/// Labeled images stored as one [count, C, H, W] tensor.
struct Dataset {
  Tensor images;
  LabelVector labels;
  std::size_t classes = 0;
  double scale = 1.0;   // stored pixel = raw · scale + offset
  double offset = 0.0;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  std::size_t image_size() const { return element_count(image_shape()); }

  std::span<const double> image(std::size_t i) const { return images.data().subspan(i * image_size(), image_size()); }

  /// Images at the given positions stacked into a batch tensor.
  Tensor gather(std::span<const std::size_t> indices) const {
    Shape shape{indices.size()};
    const Shape per = image_shape();
    shape.insert(shape.end(), per.begin(), per.end());
    std::vector<double> values;
    values.reserve(indices.size() * image_size());
    for (std::size_t i : indices) {
      const auto img = image(i);
      values.insert(values.end(), img.begin(), img.end());
    }
    return Tensor(std::move(shape), std::move(values));
  }

  LabelVector gather_labels(std::span<const std::size_t> indices) const {
    LabelVector out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels[i]);
    return out;
  }

  /// First `count` examples.
  Dataset head(std::size_t count) const {
    count = std::min(count, size());
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return {gather(idx), gather_labels(idx), classes, scale, offset};
  }
};

namespace detail {

class GzFile {
 public:
  explicit GzFile(const std::filesystem::path& path) : path_(path.string()) {
    if (!std::filesystem::exists(path)) throw IoError("no such file '" + path_ + "'");
    // gzread passes uncompressed files through unchanged, so both forms work.
    file_ = gzopen(path_.c_str(), "rb");
    if (!file_) throw IoError("cannot open '" + path_ + "'");
  }
  ~GzFile() {
    if (file_) gzclose(file_);
  }
  GzFile(const GzFile&) = delete;
  GzFile& operator=(const GzFile&) = delete;

  void read(void* dst, std::size_t n) {
    auto* out = static_cast<char*>(dst);
    while (n > 0) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
      const int got = gzread(file_, out, chunk);
      if (got <= 0) throw IoError("truncated IDX payload in '" + path_ + "'");
      out += got;
      n -= static_cast<std::size_t>(got);
    }
  }

  std::uint32_t big_endian_u32() {
    unsigned char b[4];
    read(b, 4);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
  }

 private:
  std::string path_;
  gzFile file_ = nullptr;
};

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image/label file pair (optionally gzip-compressed). Pixels are
/// scaled by 1/255 into [0,1]. `max_count` keeps only the leading examples.
inline Dataset read_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::optional<std::size_t> max_count = std::nullopt) {
  detail::GzFile img(images_path);
  if (const auto magic = img.big_endian_u32(); magic != kIdxImageMagic)
    throw IoError("bad IDX image magic in '" + images_path.string() + "'");
  const std::size_t count = img.big_endian_u32();
  const std::size_t rows = img.big_endian_u32();
  const std::size_t cols = img.big_endian_u32();
  if (count == 0 || rows == 0 || cols == 0) throw IoError("empty IDX image file '" + images_path.string() + "'");

  detail::GzFile lab(labels_path);
  if (const auto magic = lab.big_endian_u32(); magic != kIdxLabelMagic)
    throw IoError("bad IDX label magic in '" + labels_path.string() + "'");
  const std::size_t label_count = lab.big_endian_u32();
  if (label_count != count)
    throw IoError("IDX count mismatch: " + std::to_string(count) + " images but " + std::to_string(label_count) +
                  " labels");

  const std::size_t keep = max_count ? std::min(*max_count, count) : count;
  std::vector<unsigned char> pixels(keep * rows * cols);
  img.read(pixels.data(), pixels.size());
  std::vector<unsigned char> raw_labels(keep);
  lab.read(raw_labels.data(), raw_labels.size());

  Dataset ds;
  ds.scale = 1.0 / 255.0;
  std::vector<double> values(pixels.size());
  std::transform(pixels.begin(), pixels.end(), values.begin(), [&](unsigned char p) { return p * ds.scale; });
  ds.images = Tensor({keep, 1, rows, cols}, std::move(values));
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  ds.classes = 1 + *std::max_element(raw_labels.begin(), raw_labels.end());
  return ds;
}

/// Class c is a bright square at a class-specific cell of a grid laid over the
/// image, plus clamped Gaussian pixel noise. Label of example i is i mod classes.
inline Dataset synthetic_dataset(std::size_t n, std::size_t classes, std::size_t image_size, std::uint64_t seed,
                                 double noise_std = 0.1) {
  if (classes < 2) throw ConfigError("synthetic dataset needs at least two classes");
  if (n < classes) throw ConfigError("synthetic dataset needs n >= classes");
  if (noise_std < 0.0) throw ConfigError("synthetic noise std must be non-negative");
  std::size_t grid = 1;
  while (grid * grid < classes) ++grid;
  const std::size_t cell = image_size / grid;
  const std::size_t side = cell / 2;
  if (side < 1) throw ConfigError("synthetic geometry degenerate: squares do not fit in the image");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, noise_std > 0.0 ? noise_std : 1.0);
  Dataset ds;
  ds.classes = classes;
  std::vector<double> values(n * image_size * image_size, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    const std::size_t top = (c / grid) * cell + (cell - side) / 2;
    const std::size_t left = (c % grid) * cell + (cell - side) / 2;
    double* img = values.data() + i * image_size * image_size;
    for (std::size_t r = 0; r < image_size; ++r)
      for (std::size_t q = 0; q < image_size; ++q) {
        const bool inside = r >= top && r < top + side && q >= left && q < left + side;
        double v = inside ? 1.0 : 0.0;
        if (noise_std > 0.0) v += noise(rng);
        img[r * image_size + q] = std::clamp(v, 0.0, 1.0);
      }
    ds.labels.push_back(c);
  }
  ds.images = Tensor({n, 1, image_size, image_size}, std::move(values));
  return ds;
}

struct Batch {
  Tensor images;
  LabelVector labels;
  std::vector<std::size_t> indices;
};

/// Seeded epoch-wise permutation of a dataset. Every epoch visits each example
/// exactly once; the final short batch is kept.
class BatchIterator {
 public:
  BatchIterator(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
      : data_(&data), batch_size_(batch_size), seed_(seed) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (data.size() == 0) throw ConfigError("dataset is empty");
    begin_epoch(0);
  }

  /// Resets to the start of `epoch` with that epoch's permutation.
  void begin_epoch(std::size_t epoch) {
    epoch_ = epoch;
    position_ = 0;
    order_.resize(data_->size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(epoch), 0x7417u};
    std::mt19937_64 rng(seq);
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  /// Next batch of the current epoch, or nothing when the epoch is exhausted.
  std::optional<Batch> next_in_epoch() {
    if (position_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(position_ + batch_size_, order_.size());
    std::span<const std::size_t> idx(order_.data() + position_, end - position_);
    position_ = end;
    return Batch{data_->gather(idx), data_->gather_labels(idx), {idx.begin(), idx.end()}};
  }

  /// Next batch, rolling into the following epoch's permutation when needed.
  Batch next_batch() {
    if (position_ >= order_.size()) begin_epoch(epoch_ + 1);
    return *next_in_epoch();
  }

  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const { return (data_->size() + batch_size_ - 1) / batch_size_; }

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t position_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace tiltnet
