// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tiltnet/error.hpp"

namespace tiltnet {

/// Tensor extents, outermost first.
using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Eigen picks its scalar/packet split from the
/// runtime address, so a fixed alignment keeps every reduction order (and
/// hence every rounding) a function of the shapes alone.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. The shape is fixed at construction;
/// reshaped() returns a new tensor with the same elements.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::span<const double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_extents();
    if (data_.size() != element_count(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
  }
  Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), std::span<const double>(data)) {}
  Tensor(Shape shape, std::initializer_list<double> data)
      : Tensor(std::move(shape), std::span<const double>(data.begin(), data.size())) {}

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double> values() const { return {data_.begin(), data_.end()}; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  // Row-major indexing for the common ranks.
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  double at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != data_.size())
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
  }

  void require_same_shape(const Tensor& other, const char* op) const {
    if (other.shape_ != shape_)
      throw ShapeError(std::string("shape mismatch in ") + op + ": " + to_string(shape_) +
                       " vs " + to_string(other.shape_));
  }

  Shape shape_;
  Buffer data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

/// Multiply-accumulate and comparison tallies of the primitives, used to
/// compare the cost of training modes without relying on wall clock.
struct OpCounts {
  std::uint64_t conv_macs = 0;
  std::uint64_t dense_macs = 0;
  std::uint64_t pool_compares = 0;
  std::uint64_t elementwise = 0;
  std::uint64_t loss_ops = 0;

  std::uint64_t network_total() const { return conv_macs + dense_macs + pool_compares + elementwise; }
  friend bool operator==(const OpCounts&, const OpCounts&) = default;
};

inline OpCounts& op_counts() {
  thread_local OpCounts counts;
  return counts;
}

inline void reset_op_counts() { op_counts() = OpCounts{}; }

/// Winning input element of every max-pool window, as flat input offsets.
struct ArgmaxMap {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::size_t> index;
};

struct ConvGrads {
  Tensor grad_input;
  Tensor grad_kernels;
  Tensor grad_bias;
};

struct DenseGrads {
  Tensor grad_input;
  Tensor grad_weight;
  Tensor grad_bias;
};

/// Which adjoints a backward call should produce. Skipped ones come back empty.
enum class Adjoints { all, input_only, params_only };

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                               const char* axis) {
  const std::size_t padded = in + 2 * pad;
  if (padded < k)
    throw ShapeError(std::string("convolution kernel larger than padded input along ") + axis);
  if ((padded - k) % stride != 0)
    throw ShapeError(std::string("non-integral convolution output extent along ") + axis);
  return (padded - k) / stride + 1;
}

struct ConvGeometry {
  std::size_t in_channels, height, width;
  std::size_t out_channels, kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernels, std::size_t stride,
                                  std::size_t pad) {
  if (input.size() != 3) throw ShapeError("conv2d input must be [C,H,W], got " + to_string(input));
  if (kernels.size() != 4)
    throw ShapeError("conv2d kernels must be [C_out,C_in,kH,kW], got " + to_string(kernels));
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  if (kernels[1] != input[0])
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(input[0]) +
                     ", kernels expect " + std::to_string(kernels[1]));
  ConvGeometry g{input[0], input[1], input[2], kernels[0], kernels[2], kernels[3], stride, pad, 0, 0};
  g.out_h = conv_extent(g.height, g.kh, stride, pad, "height");
  g.out_w = conv_extent(g.width, g.kw, stride, pad, "width");
  return g;
}

// Unfolds input windows into a [C_in*kH*kW, H'*W'] matrix, zero outside the input.
inline void im2col(std::span<const double> input, const ConvGeometry& g, std::span<double> cols) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        double* out = cols.data() + row * g.positions();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - pad;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - pad;
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) &&
                                iw < static_cast<std::ptrdiff_t>(g.width);
            *out++ = inside ? input[(c * g.height + static_cast<std::size_t>(ih)) * g.width +
                                    static_cast<std::size_t>(iw)]
                            : 0.0;
          }
        }
      }
}

// Adjoint of im2col: scatters column gradients back onto the input grid.
inline void col2im(std::span<const double> cols, const ConvGeometry& g, std::span<double> input) {
  std::fill(input.begin(), input.end(), 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        const double* in = cols.data() + row * g.positions();
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - pad;
          for (std::size_t ow = 0; ow < g.out_w; ++ow, ++in) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - pad;
            if (ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) &&
                iw < static_cast<std::ptrdiff_t>(g.width))
              input[(c * g.height + static_cast<std::size_t>(ih)) * g.width +
                    static_cast<std::size_t>(iw)] += *in;
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip)

/// Windowed cross-correlation of a [C,H,W] input with [C_out,C_in,kH,kW]
/// kernels plus a per-channel bias. Zero padding outside the input. The
/// sliding range must be an exact multiple of the stride.
inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                             std::size_t stride = 1, std::size_t pad = 0) {
  const auto g = detail::conv_geometry(input.shape(), kernels.shape(), stride, pad);
  if (bias.shape() != Shape{g.out_channels})
    throw ShapeError("conv2d bias must be [" + std::to_string(g.out_channels) + "], got " +
                     to_string(bias.shape()));
  Buffer cols(g.patch() * g.positions());
  detail::im2col(input.data(), g, cols);

  Tensor out({g.out_channels, g.out_h, g.out_w});
  detail::MatrixMap result(out.data().data(), g.out_channels, g.positions());
  result.noalias() = detail::ConstMatrixMap(kernels.data().data(), g.out_channels, g.patch()) *
                     detail::ConstMatrixMap(cols.data(), g.patch(), g.positions());
  for (std::size_t c = 0; c < g.out_channels; ++c) result.row(c).array() += bias[c];
  op_counts().conv_macs += g.out_channels * g.patch() * g.positions();
  return out;
}

/// Exact adjoints of conv2d_forward with respect to input, kernels and bias.
inline ConvGrads conv2d_backward(const Tensor& upstream, const Tensor& input, const Tensor& kernels,
                                 std::size_t stride = 1, std::size_t pad = 0,
                                 Adjoints wanted = Adjoints::all) {
  const auto g = detail::conv_geometry(input.shape(), kernels.shape(), stride, pad);
  if (upstream.shape() != Shape{g.out_channels, g.out_h, g.out_w})
    throw ShapeError("conv2d upstream gradient " + to_string(upstream.shape()) +
                     " does not match forward output [" + std::to_string(g.out_channels) + "," +
                     std::to_string(g.out_h) + "," + std::to_string(g.out_w) + "]");
  detail::ConstMatrixMap grad_out(upstream.data().data(), g.out_channels, g.positions());
  ConvGrads grads;

  if (wanted != Adjoints::input_only) {
    Buffer cols(g.patch() * g.positions());
    detail::im2col(input.data(), g, cols);
    grads.grad_kernels = Tensor(kernels.shape());
    detail::MatrixMap gk(grads.grad_kernels.data().data(), g.out_channels, g.patch());
    gk.noalias() = grad_out * detail::ConstMatrixMap(cols.data(), g.patch(), g.positions()).transpose();
    grads.grad_bias = Tensor({g.out_channels});
    for (std::size_t c = 0; c < g.out_channels; ++c) grads.grad_bias[c] = grad_out.row(c).sum();
    op_counts().conv_macs += g.out_channels * g.patch() * g.positions();
  }
  if (wanted != Adjoints::params_only) {
    Buffer cols(g.patch() * g.positions());
    detail::MatrixMap gc(cols.data(), g.patch(), g.positions());
    gc.noalias() =
        detail::ConstMatrixMap(kernels.data().data(), g.out_channels, g.patch()).transpose() * grad_out;
    grads.grad_input = Tensor(input.shape());
    detail::col2im(cols, g, grads.grad_input.data());
    op_counts().conv_macs += g.out_channels * g.patch() * g.positions();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Max pooling

struct PoolResult {
  Tensor output;
  ArgmaxMap argmax;
};

/// Max over k×k windows moved by `stride`. Ties go to the first maximal
/// element in row-major scan order of the window.
inline PoolResult maxpool_forward(const Tensor& input, std::size_t window, std::size_t stride) {
  if (input.rank() != 3) throw ShapeError("maxpool input must be [C,H,W], got " + to_string(input.shape()));
  if (window == 0 || stride == 0) throw ShapeError("maxpool window and stride must be positive");
  const std::size_t channels = input.extent(0), height = input.extent(1), width = input.extent(2);
  if (window > height || window > width)
    throw ShapeError("maxpool window " + std::to_string(window) + " larger than input " +
                     to_string(input.shape()));
  if ((height - window) % stride != 0 || (width - window) % stride != 0)
    throw ShapeError("maxpool window/stride does not tile input " + to_string(input.shape()));
  const std::size_t out_h = (height - window) / stride + 1, out_w = (width - window) / stride + 1;

  PoolResult r{Tensor({channels, out_h, out_w}), ArgmaxMap{input.shape(), {channels, out_h, out_w}, {}}};
  r.argmax.index.resize(r.output.size());
  const auto in = input.data();
  std::size_t o = 0;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t oh = 0; oh < out_h; ++oh)
      for (std::size_t ow = 0; ow < out_w; ++ow, ++o) {
        std::size_t best = (c * height + oh * stride) * width + ow * stride;
        for (std::size_t i = 0; i < window; ++i)
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (c * height + oh * stride + i) * width + ow * stride + j;
            if (in[idx] > in[best]) best = idx;
          }
        r.output[o] = in[best];
        r.argmax.index[o] = best;
      }
  op_counts().pool_compares += r.output.size() * window * window;
  return r;
}

/// Argmax unpooling: routes each upstream value to the input element that
/// won its window, accumulating where windows overlap.
inline Tensor maxpool_backward(const Tensor& upstream, const ArgmaxMap& argmax, const Shape& input_shape) {
  if (upstream.shape() != argmax.output_shape)
    throw ShapeError("maxpool upstream gradient " + to_string(upstream.shape()) +
                     " does not match pooled shape " + to_string(argmax.output_shape));
  if (input_shape != argmax.input_shape)
    throw ShapeError("argmax map was recorded for input " + to_string(argmax.input_shape) +
                     ", not " + to_string(input_shape));
  Tensor grad(input_shape);
  for (std::size_t o = 0; o < argmax.index.size(); ++o) {
    if (argmax.index[o] >= grad.size()) throw ShapeError("argmax index out of range");
    grad[argmax.index[o]] += upstream[o];
  }
  op_counts().pool_compares += upstream.size();
  return grad;
}

// ---------------------------------------------------------------------------
// Dense (affine) layer. Inputs of any rank are read as flat vectors.

inline Tensor dense_forward(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) throw ShapeError("dense weight must be [K,D], got " + to_string(weight.shape()));
  const std::size_t k = weight.extent(0), d = weight.extent(1);
  if (input.size() != d)
    throw ShapeError("dense input width " + std::to_string(input.size()) + " does not match weight " +
                     to_string(weight.shape()));
  if (bias.shape() != Shape{k}) throw ShapeError("dense bias must be [" + std::to_string(k) + "]");
  Tensor out({k});
  Eigen::Map<Eigen::VectorXd> y(out.data().data(), static_cast<Eigen::Index>(k));
  y.noalias() = detail::ConstMatrixMap(weight.data().data(), k, d) *
                Eigen::Map<const Eigen::VectorXd>(input.data().data(), static_cast<Eigen::Index>(d));
  y += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), static_cast<Eigen::Index>(k));
  op_counts().dense_macs += k * d;
  return out;
}

inline DenseGrads dense_backward(const Tensor& upstream, const Tensor& input, const Tensor& weight,
                                 Adjoints wanted = Adjoints::all) {
  if (weight.rank() != 2) throw ShapeError("dense weight must be [K,D], got " + to_string(weight.shape()));
  const std::size_t k = weight.extent(0), d = weight.extent(1);
  if (input.size() != d || upstream.size() != k)
    throw ShapeError("dense backward shapes do not match weight " + to_string(weight.shape()));
  Eigen::Map<const Eigen::VectorXd> g(upstream.data().data(), static_cast<Eigen::Index>(k));
  DenseGrads grads;
  if (wanted != Adjoints::input_only) {
    grads.grad_weight = Tensor(weight.shape());
    detail::MatrixMap gw(grads.grad_weight.data().data(), k, d);
    gw.noalias() = g * Eigen::Map<const Eigen::RowVectorXd>(input.data().data(), static_cast<Eigen::Index>(d));
    grads.grad_bias = Tensor({k}, upstream.data());
    op_counts().dense_macs += k * d;
  }
  if (wanted != Adjoints::params_only) {
    grads.grad_input = Tensor(input.shape());
    Eigen::Map<Eigen::VectorXd> gi(grads.grad_input.data().data(), static_cast<Eigen::Index>(d));
    gi.noalias() = detail::ConstMatrixMap(weight.data().data(), k, d).transpose() * g;
    op_counts().dense_macs += k * d;
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Rectifier

inline Tensor relu_forward(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  op_counts().elementwise += input.size();
  return out;
}

/// Passes upstream where the cached input is strictly positive; the
/// derivative at exactly zero is taken as zero.
inline Tensor relu_backward(const Tensor& upstream, const Tensor& cached_input) {
  if (upstream.shape() != cached_input.shape())
    throw ShapeError("relu upstream " + to_string(upstream.shape()) + " vs cached " +
                     to_string(cached_input.shape()));
  Tensor grad(upstream.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = cached_input[i] > 0.0 ? upstream[i] : 0.0;
  op_counts().elementwise += upstream.size();
  return grad;
}

}  // namespace tiltnet
