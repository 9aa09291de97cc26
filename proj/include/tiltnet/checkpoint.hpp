// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint files.
//
//   "TILTCKPT"                     8-byte magic
//   u32 format version
//   u32 header length, header      key=value text (network config, seed, ...)
//   u32 tensor count
//   per tensor: u32 name length, name, u32 rank, u64 extents[rank],
//               f64 values[product of extents]
//   u32 CRC-32 of every preceding byte
//
// All integers and doubles are little-endian.

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <zlib.h>

#include "tiltnet/error.hpp"
#include "tiltnet/net.hpp"

namespace tiltnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "TILTCKPT";

/// Shortest decimal text that parses back to the identical double.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

inline double parse_double(std::string_view s, std::string_view what) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw ConfigError("expected a number for " + std::string(what) + ", got '" + std::string(s) + "'");
  return v;
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void text(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  template <typename T>
  void put_le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::string text() { return bytes(u32()); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) throw CheckpointError("corrupt checkpoint: truncated payload");
  }
  template <typename T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  std::span<const char> data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  // Write beside the target and rename, so readers never see a partial file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

}  // namespace detail

/// Ordered key=value lines; the header block of checkpoints and state files.
using TextFields = std::vector<std::pair<std::string, std::string>>;

inline std::string fields_to_text(const TextFields& fields) {
  std::string out;
  for (const auto& [k, v] : fields) out += k + "=" + v + "\n";
  return out;
}

inline std::map<std::string, std::string> text_to_fields(std::string_view text) {
  std::map<std::string, std::string> out;
  for (const auto& line : detail::split(text, '\n')) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("corrupt checkpoint header line '" + line + "'");
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

struct TensorFile {
  std::string header;
  std::vector<NamedTensor> tensors;
};

inline std::vector<char> encode_tensor_file(const TensorFile& file) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.text(file.header);
  w.u32(static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    w.text(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (auto e : t.value.shape()) w.u64(e);
    for (double v : t.value.data()) w.f64(v);
  }
  auto bytes = w.buffer();
  detail::ByteWriter tail;
  tail.u32(detail::crc32_of(bytes));
  bytes.insert(bytes.end(), tail.buffer().begin(), tail.buffer().end());
  return bytes;
}

inline TensorFile decode_tensor_file(std::span<const char> bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 8) throw CheckpointError("corrupt checkpoint: file too short");
  if (std::string_view(bytes.data(), kCheckpointMagic.size()) != kCheckpointMagic)
    throw CheckpointError("not a checkpoint file (bad magic)");
  const auto body = bytes.first(bytes.size() - 4);
  detail::ByteReader crc_reader(bytes.last(4));
  const std::uint32_t stored_crc = crc_reader.u32();

  detail::ByteReader r(body);
  r.bytes(kCheckpointMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  TensorFile file;
  file.header = r.text();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.text();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("corrupt checkpoint: tensor '" + t.name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t total = 1;
    for (auto& e : shape) {
      e = static_cast<std::size_t>(r.u64());
      if (e == 0 || e > r.remaining()) throw CheckpointError("corrupt checkpoint: bad extent in '" + t.name + "'");
      total *= e;
    }
    if (total > r.remaining() / 8) throw CheckpointError("corrupt checkpoint: truncated payload");
    std::vector<double> values(total);
    for (double& v : values) v = r.f64();
    t.value = Tensor(std::move(shape), std::move(values));
    file.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw CheckpointError("corrupt checkpoint: trailing bytes");
  if (detail::crc32_of(body) != stored_crc) throw CheckpointError("checkpoint checksum mismatch");
  return file;
}

inline TextFields network_config_fields(const NetworkConfig& c) {
  std::string input;
  for (std::size_t i = 0; i < c.input_shape.size(); ++i) input += (i ? "," : "") + std::to_string(c.input_shape[i]);
  return {{"input", input},
          {"classes", std::to_string(c.classes)},
          {"layers", layers_to_text(c.layers)},
          {"init_conv_std", format_double(c.init.conv_std)},
          {"init_dense_gain", format_double(c.init.dense_gain)},
          {"seed", std::to_string(c.seed)}};
}

inline Shape parse_shape(std::string_view text) {
  Shape s;
  for (const auto& part : detail::split(text, ',')) s.push_back(detail::parse_extent(part, "shape extent"));
  return s;
}

inline NetworkConfig network_config_from_fields(const std::map<std::string, std::string>& f) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = f.find(key);
    if (it == f.end()) throw CheckpointError("checkpoint header lacks '" + key + "'");
    return it->second;
  };
  NetworkConfig c;
  c.input_shape = parse_shape(get("input"));
  c.classes = detail::parse_extent(get("classes"), "classes");
  c.layers = parse_layers(get("layers"));
  c.init.conv_std = parse_double(get("init_conv_std"), "init_conv_std");
  c.init.dense_gain = parse_double(get("init_dense_gain"), "init_dense_gain");
  c.seed = std::stoull(get("seed"));
  return c;
}

inline void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  if (net.truncated()) throw ConfigError("cannot checkpoint a truncated network view; save its parent");
  TensorFile file{fields_to_text(network_config_fields(net.config())), net.params().entries()};
  detail::write_file(path, encode_tensor_file(file));
}

inline Network load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  auto file = decode_tensor_file(bytes);
  ParameterStore store;
  for (auto& t : file.tensors) store.add(std::move(t.name), std::move(t.value));
  return Network::from_store(network_config_from_fields(text_to_fields(file.header)), std::move(store));
}

}  // namespace tiltnet
