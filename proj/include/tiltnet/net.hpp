// SPDX-License-Identifier: Apache-2.0
#pragma once

// Linear chain of layers computing class scores f_y(x; w), with the two
// backward passes the rest of the stack needs: to the parameters (driven by
// any loss layer's n×C gradient) and to the input pixels (driven by a single
// selected score, for sampling).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tiltnet/error.hpp"
#include "tiltnet/loss.hpp"
#include "tiltnet/tensor.hpp"

namespace tiltnet {

enum class LayerKind { conv, maxpool, dense, relu, flatten };

inline std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool: return "pool";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::size_t channels = 0;  // conv output channels
  std::size_t kernel = 0;    // conv kernel extent or pool window
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t units = 0;     // dense output width

  static LayerSpec conv(std::size_t channels, std::size_t kernel, std::size_t stride = 1, std::size_t pad = 0) {
    return {LayerKind::conv, {}, channels, kernel, stride, pad, 0};
  }
  static LayerSpec pool(std::size_t window, std::size_t stride) {
    return {LayerKind::maxpool, {}, 0, window, stride, 0, 0};
  }
  static LayerSpec dense(std::size_t units) { return {LayerKind::dense, {}, 0, 0, 1, 0, units}; }
  static LayerSpec relu() { return {LayerKind::relu, {}, 0, 0, 1, 0, 0}; }
  static LayerSpec flatten() { return {LayerKind::flatten, {}, 0, 0, 1, 0, 0}; }

  bool has_params() const { return kind == LayerKind::conv || kind == LayerKind::dense; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Gaussian initialization. Convolution kernels use a fixed standard
/// deviation; dense weights use dense_gain/√fan_in. Biases start at zero.
struct InitScheme {
  double conv_std = 0.01;
  double dense_gain = 1.0;
  friend bool operator==(const InitScheme&, const InitScheme&) = default;
};

struct NetworkConfig {
  Shape input_shape;
  std::vector<LayerSpec> layers;
  std::size_t classes = 0;
  InitScheme init;
  std::uint64_t seed = 0;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;

  /// conv(20@5×5) → pool(2/2) → conv(50@5×5) → pool(2/2) → dense(500) → relu → dense(10)
  /// on 1×28×28 inputs.
  static NetworkConfig lenet(std::uint64_t seed = 1) {
    NetworkConfig c;
    c.input_shape = {1, 28, 28};
    c.layers = {LayerSpec::conv(20, 5), LayerSpec::pool(2, 2), LayerSpec::conv(50, 5),
                LayerSpec::pool(2, 2),  LayerSpec::dense(500), LayerSpec::relu(),
                LayerSpec::dense(10)};
    c.classes = 10;
    c.seed = seed;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Layer-list text form: comma-separated items such as
//   conv:20:5  conv:20:5:1:0  pool:2:2  dense:500  relu  flatten
// each optionally suffixed with @name.

inline std::string to_text(const LayerSpec& s) {
  std::ostringstream os;
  switch (s.kind) {
    case LayerKind::conv: os << "conv:" << s.channels << ':' << s.kernel << ':' << s.stride << ':' << s.pad; break;
    case LayerKind::maxpool: os << "pool:" << s.kernel << ':' << s.stride; break;
    case LayerKind::dense: os << "dense:" << s.units; break;
    case LayerKind::relu: os << "relu"; break;
    case LayerKind::flatten: os << "flatten"; break;
  }
  if (!s.name.empty()) os << '@' << s.name;
  return os.str();
}

inline std::string layers_to_text(const std::vector<LayerSpec>& layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) out += (i ? "," : "") + to_text(layers[i]);
  return out;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

inline std::size_t parse_extent(const std::string& s, std::string_view what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("expected a non-negative integer for " + std::string(what) + ", got '" + s + "'");
  }
  if (pos != s.size() || (!s.empty() && s[0] == '-'))
    throw ConfigError("expected a non-negative integer for " + std::string(what) + ", got '" + s + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

inline LayerSpec parse_layer(std::string_view text) {
  std::string body = detail::trim(text);
  std::string name;
  if (const auto at = body.find('@'); at != std::string::npos) {
    name = detail::trim(std::string_view(body).substr(at + 1));
    body = detail::trim(std::string_view(body).substr(0, at));
  }
  const auto f = detail::split(body, ':');
  auto arg = [&](std::size_t i, std::size_t fallback) {
    return i < f.size() ? detail::parse_extent(f[i], f[0]) : fallback;
  };
  LayerSpec s;
  if (f[0] == "conv") {
    if (f.size() < 3 || f.size() > 5) throw ConfigError("conv layer needs conv:channels:kernel[:stride[:pad]]");
    s = LayerSpec::conv(arg(1, 0), arg(2, 0), arg(3, 1), arg(4, 0));
  } else if (f[0] == "pool") {
    if (f.size() < 2 || f.size() > 3) throw ConfigError("pool layer needs pool:window[:stride]");
    s = LayerSpec::pool(arg(1, 0), arg(2, arg(1, 0)));
  } else if (f[0] == "dense") {
    if (f.size() != 2) throw ConfigError("dense layer needs dense:units");
    s = LayerSpec::dense(arg(1, 0));
  } else if (f[0] == "relu" && f.size() == 1) {
    s = LayerSpec::relu();
  } else if (f[0] == "flatten" && f.size() == 1) {
    s = LayerSpec::flatten();
  } else {
    throw ConfigError("unknown layer '" + std::string(text) + "'");
  }
  if ((s.kind == LayerKind::conv && (s.channels == 0 || s.kernel == 0)) ||
      (s.kind == LayerKind::maxpool && s.kernel == 0) || (s.kind == LayerKind::dense && s.units == 0) ||
      s.stride == 0)
    throw ConfigError("layer '" + std::string(text) + "' needs positive extents");
  s.name = name;
  return s;
}

inline std::vector<LayerSpec> parse_layers(std::string_view text) {
  std::vector<LayerSpec> layers;
  for (const auto& item : detail::split(text, ','))
    if (!item.empty()) layers.push_back(parse_layer(item));
  if (layers.empty()) throw ConfigError("network has no layers");
  return layers;
}

/// Output shape of one layer, or ShapeError when the layer cannot consume `in`.
inline Shape layer_output_shape(const LayerSpec& s, const Shape& in) {
  switch (s.kind) {
    case LayerKind::conv: {
      if (in.size() != 3) throw ShapeError("conv layer " + s.name + " needs [C,H,W] input, got " + to_string(in));
      if (s.channels == 0 || s.kernel == 0 || s.stride == 0)
        throw ConfigError("conv layer " + s.name + " needs positive channels, kernel and stride");
      return {s.channels, detail::conv_extent(in[1], s.kernel, s.stride, s.pad, "height"),
              detail::conv_extent(in[2], s.kernel, s.stride, s.pad, "width")};
    }
    case LayerKind::maxpool: {
      if (in.size() != 3) throw ShapeError("pool layer " + s.name + " needs [C,H,W] input, got " + to_string(in));
      if (s.kernel == 0 || s.stride == 0) throw ConfigError("pool layer " + s.name + " needs positive window and stride");
      if (s.kernel > in[1] || s.kernel > in[2])
        throw ShapeError("pool layer " + s.name + " window larger than input " + to_string(in));
      if ((in[1] - s.kernel) % s.stride || (in[2] - s.kernel) % s.stride)
        throw ShapeError("pool layer " + s.name + " does not tile input " + to_string(in));
      return {in[0], (in[1] - s.kernel) / s.stride + 1, (in[2] - s.kernel) / s.stride + 1};
    }
    case LayerKind::dense:
      if (s.units == 0) throw ConfigError("dense layer " + s.name + " needs positive width");
      return {s.units};
    case LayerKind::relu: return in;
    case LayerKind::flatten: return {element_count(in)};
  }
  throw ConfigError("unknown layer kind");
}

/// shapes[0] is the input; shapes[i + 1] is the output of layer i.
inline std::vector<Shape> propagate_shapes(const Shape& input, const std::vector<LayerSpec>& layers,
                                           std::size_t depth) {
  std::vector<Shape> shapes{input};
  for (std::size_t i = 0; i < depth; ++i) shapes.push_back(layer_output_shape(layers[i], shapes.back()));
  return shapes;
}

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Named weights and biases. The version counter moves whenever mutable
/// access is taken, which lets activation caches detect staleness.
class ParameterStore {
 public:
  std::size_t size() const { return entries_.size(); }
  const NamedTensor& operator[](std::size_t i) const { return entries_[i]; }
  const std::vector<NamedTensor>& entries() const { return entries_; }

  std::vector<NamedTensor>& mutable_entries() {
    ++version_;
    return entries_;
  }
  std::uint64_t version() const { return version_; }

  std::size_t add(std::string name, Tensor value) {
    entries_.push_back({std::move(name), std::move(value)});
    ++version_;
    return entries_.size() - 1;
  }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t element_total() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::vector<NamedTensor> entries_;
  std::uint64_t version_ = 0;
};

/// Gradients aligned index-for-index with a ParameterStore.
struct ParamGrads {
  std::vector<Tensor> tensors;

  static ParamGrads zeros_like(const ParameterStore& store) {
    ParamGrads g;
    for (const auto& e : store.entries()) g.tensors.emplace_back(e.value.shape());
    return g;
  }
  ParamGrads& operator+=(const ParamGrads& other) {
    for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i] += other.tensors[i];
    return *this;
  }
  ParamGrads& operator*=(double s) {
    for (auto& t : tensors) t *= s;
    return *this;
  }
};

class Network;

/// Per-layer inputs and argmax maps of one forward pass over a batch.
struct ActivationCache {
  std::vector<std::vector<Tensor>> layer_inputs;  // [layer][item]
  std::vector<std::vector<ArgmaxMap>> argmax;     // [layer][item], pool layers only
  std::vector<Tensor> outputs;                    // [item]
  const ParameterStore* store = nullptr;
  std::uint64_t version = 0;
  std::size_t batch() const { return outputs.size(); }
};

struct ForwardResult {
  ScoreMatrix scores;
  ActivationCache cache;
};

class Network {
 public:
  /// Allocates and initializes parameters from the config's scheme and seed.
  static Network build(NetworkConfig config) {
    Network net;
    net.config_ = std::move(config);
    auto& cfg = net.config_;
    if (cfg.layers.empty()) throw ConfigError("network has no layers");
    if (cfg.classes < 1) throw ConfigError("network needs a positive class count");
    if (cfg.input_shape.empty()) throw ConfigError("network input shape is empty");
    for (auto e : cfg.input_shape)
      if (e == 0) throw ConfigError("network input extents must be positive");
    net.assign_names();
    net.input_shape_ = cfg.input_shape;
    net.depth_ = cfg.layers.size();
    net.shapes_ = propagate_shapes(net.input_shape_, cfg.layers, net.depth_);
    if (element_count(net.shapes_.back()) != cfg.classes)
      throw ConfigError("final layer width " + std::to_string(element_count(net.shapes_.back())) +
                        " does not equal class count " + std::to_string(cfg.classes));
    net.params_ = std::make_shared<ParameterStore>();
    net.allocate_parameters();
    return net;
  }

  const NetworkConfig& config() const { return config_; }
  const Shape& input_shape() const { return input_shape_; }
  /// shapes()[i] is the input of layer i; shapes().back() is the output.
  const std::vector<Shape>& shapes() const { return shapes_; }
  std::size_t depth() const { return depth_; }
  const LayerSpec& layer(std::size_t i) const { return config_.layers[i]; }
  bool truncated() const { return selected_.has_value(); }
  std::optional<std::size_t> selected_channel() const { return selected_; }

  /// Number of scores per example: the class count, or 1 for a truncated node.
  std::size_t output_width() const { return selected_ ? 1 : config_.classes; }

  const ParameterStore& params() const { return *params_; }
  ParameterStore& params() { return *params_; }
  std::shared_ptr<ParameterStore> shared_params() const { return params_; }
  std::size_t parameter_count() const { return params_->element_total(); }

  std::optional<std::size_t> layer_index(std::string_view name) const {
    for (std::size_t i = 0; i < config_.layers.size(); ++i)
      if (config_.layers[i].name == name) return i;
    return std::nullopt;
  }

  /// Scores for a batch shaped [n, input...]. Row j holds f_y(x_j) for every y.
  ForwardResult forward_batch(const Tensor& images) const;

  /// Σ_{j,y} loss_grad[j,y] · ∂f_y(x_j)/∂w, accumulated over the batch in item order.
  ParamGrads backward_params(const ActivationCache& cache, const LossGrad& loss_grad) const;

  /// ∂f_node(x_item)/∂x through the cached forward pass, unpooling along the
  /// argmax maps recorded on that same input.
  Tensor backward_input(const ActivationCache& cache, std::size_t node, std::size_t item) const;

  /// Scalar-output view ending at `layer_name` and reading `channel`, sharing
  /// parameters with this network. Its input shape is required_input_shape().
  Network truncate_at(std::string_view layer_name, std::size_t channel) const;

  /// Smallest input for which the named layer's spatial output is 1×1.
  Shape required_input_shape(std::string_view layer_name) const;

  /// Rebuilds a network around an existing store (checkpoint loading).
  static Network from_store(NetworkConfig config, ParameterStore store) {
    Network net = build(std::move(config));
    const auto& want = net.params_->entries();
    if (store.size() != want.size())
      throw CheckpointError("checkpoint holds " + std::to_string(store.size()) + " tensors, network expects " +
                            std::to_string(want.size()));
    for (std::size_t i = 0; i < want.size(); ++i)
      if (store[i].name != want[i].name || store[i].value.shape() != want[i].value.shape())
        throw CheckpointError("checkpoint tensor '" + store[i].name + "' does not match network parameter '" +
                              want[i].name + "'");
    *net.params_ = std::move(store);
    return net;
  }

 private:
  struct LayerParams {
    std::optional<std::size_t> weight, bias;
  };

  void assign_names() {
    std::size_t counters[5] = {0, 0, 0, 0, 0};
    for (auto& l : config_.layers) {
      const auto k = static_cast<std::size_t>(l.kind);
      ++counters[k];
      if (l.name.empty()) {
        const char* stem = l.kind == LayerKind::dense ? "fc" : kind_name(l.kind).data();
        l.name = std::string(stem) + std::to_string(counters[k]);
      }
    }
    for (std::size_t i = 0; i < config_.layers.size(); ++i)
      for (std::size_t j = i + 1; j < config_.layers.size(); ++j)
        if (config_.layers[i].name == config_.layers[j].name)
          throw ConfigError("duplicate layer name '" + config_.layers[i].name + "'");
  }

  void allocate_parameters() {
    std::mt19937_64 rng(config_.seed);
    layer_params_.assign(config_.layers.size(), {});
    for (std::size_t i = 0; i < config_.layers.size(); ++i) {
      const auto& l = config_.layers[i];
      const Shape& in = shapes_[i];
      if (l.kind == LayerKind::conv) {
        Tensor w({l.channels, in[0], l.kernel, l.kernel});
        std::normal_distribution<double> dist(0.0, config_.init.conv_std);
        for (double& v : w.data()) v = dist(rng);
        layer_params_[i].weight = params_->add(l.name + ".weight", std::move(w));
        layer_params_[i].bias = params_->add(l.name + ".bias", Tensor({l.channels}));
      } else if (l.kind == LayerKind::dense) {
        const std::size_t fan_in = element_count(in);
        Tensor w({l.units, fan_in});
        std::normal_distribution<double> dist(0.0, config_.init.dense_gain / std::sqrt(static_cast<double>(fan_in)));
        for (double& v : w.data()) v = dist(rng);
        layer_params_[i].weight = params_->add(l.name + ".weight", std::move(w));
        layer_params_[i].bias = params_->add(l.name + ".bias", Tensor({l.units}));
      }
    }
  }

  const Tensor& weight(std::size_t layer) const { return (*params_)[*layer_params_[layer].weight].value; }

  void check_cache(const ActivationCache& cache) const {
    if (cache.store != params_.get() || cache.version != params_->version())
      throw Error("activation cache is stale: parameters changed since the forward pass");
    if (cache.layer_inputs.size() != depth_) throw Error("activation cache belongs to a different network");
  }

  // Gradient of the selected scores of one item with respect to the last layer's output.
  Tensor output_seed(std::span<const double> grad_row) const {
    Tensor seed(shapes_.back());
    if (selected_) {
      seed[*selected_] = grad_row[0];
    } else {
      for (std::size_t y = 0; y < grad_row.size(); ++y) seed[y] = grad_row[y];
    }
    return seed;
  }

  // Walks one item down from the last layer; accumulates parameter gradients
  // when `grads` is set, and stops early when the input gradient is not needed.
  Tensor backward_item(const ActivationCache& cache, std::size_t item, Tensor grad, ParamGrads* grads,
                       bool want_input) const {
    for (std::size_t i = depth_; i-- > 0;) {
      const auto& l = config_.layers[i];
      const Tensor& in = cache.layer_inputs[i][item];
      const bool need_below = want_input || i > 0;
      switch (l.kind) {
        case LayerKind::conv: {
          const Adjoints which = grads ? (need_below ? Adjoints::all : Adjoints::params_only) : Adjoints::input_only;
          auto g = conv2d_backward(grad, in, weight(i), l.stride, l.pad, which);
          if (grads) {
            grads->tensors[*layer_params_[i].weight] += g.grad_kernels;
            grads->tensors[*layer_params_[i].bias] += g.grad_bias;
          }
          if (!need_below) return {};
          grad = std::move(g.grad_input);
          break;
        }
        case LayerKind::dense: {
          const Adjoints which = grads ? (need_below ? Adjoints::all : Adjoints::params_only) : Adjoints::input_only;
          auto g = dense_backward(grad, in, weight(i), which);
          if (grads) {
            grads->tensors[*layer_params_[i].weight] += g.grad_weight;
            grads->tensors[*layer_params_[i].bias] += g.grad_bias;
          }
          if (!need_below) return {};
          grad = std::move(g.grad_input);
          break;
        }
        case LayerKind::maxpool:
          grad = maxpool_backward(grad, cache.argmax[i][item], in.shape());
          break;
        case LayerKind::relu:
          grad = relu_backward(grad, in);
          break;
        case LayerKind::flatten:
          grad = grad.reshaped(in.shape());
          break;
      }
    }
    return grad;
  }

  NetworkConfig config_;
  Shape input_shape_;
  std::vector<Shape> shapes_;
  std::size_t depth_ = 0;
  std::optional<std::size_t> selected_;
  std::shared_ptr<ParameterStore> params_;
  std::vector<LayerParams> layer_params_;
};

inline ForwardResult Network::forward_batch(const Tensor& images) const {
  if (images.rank() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), images.shape().begin() + 1))
    throw ShapeError("batch " + to_string(images.shape()) + " does not match network input " + to_string(input_shape_));
  const std::size_t n = images.extent(0), per_item = element_count(input_shape_);

  ForwardResult r{ScoreMatrix(n, output_width()), {}};
  auto& cache = r.cache;
  cache.store = params_.get();
  cache.version = params_->version();
  cache.layer_inputs.assign(depth_, {});
  cache.argmax.assign(depth_, {});

  std::vector<Tensor> acts;
  acts.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    auto begin = images.data().begin() + static_cast<std::ptrdiff_t>(j * per_item);
    acts.emplace_back(input_shape_, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(per_item)));
  }

  for (std::size_t i = 0; i < depth_; ++i) {
    const auto& l = config_.layers[i];
    std::vector<Tensor> next;
    next.reserve(n);
    for (std::size_t j = 0; j < n; ++j) {
      const Tensor& x = acts[j];
      switch (l.kind) {
        case LayerKind::conv:
          next.push_back(conv2d_forward(x, weight(i), (*params_)[*layer_params_[i].bias].value, l.stride, l.pad));
          break;
        case LayerKind::dense:
          next.push_back(dense_forward(x, weight(i), (*params_)[*layer_params_[i].bias].value));
          break;
        case LayerKind::maxpool: {
          auto p = maxpool_forward(x, l.kernel, l.stride);
          next.push_back(std::move(p.output));
          cache.argmax[i].push_back(std::move(p.argmax));
          break;
        }
        case LayerKind::relu: next.push_back(relu_forward(x)); break;
        case LayerKind::flatten: next.push_back(x.reshaped({x.size()})); break;
      }
    }
    cache.layer_inputs[i] = std::move(acts);
    acts = std::move(next);
  }

  for (std::size_t j = 0; j < n; ++j) {
    if (selected_) {
      r.scores(j, 0) = acts[j][*selected_];
    } else {
      for (std::size_t y = 0; y < config_.classes; ++y) r.scores(j, y) = acts[j][y];
    }
  }
  cache.outputs = std::move(acts);
  return r;
}

inline ParamGrads Network::backward_params(const ActivationCache& cache, const LossGrad& loss_grad) const {
  check_cache(cache);
  if (loss_grad.rows() != cache.batch() || loss_grad.cols() != output_width())
    throw ShapeError("loss gradient is " + std::to_string(loss_grad.rows()) + "x" + std::to_string(loss_grad.cols()) +
                     ", cache expects " + std::to_string(cache.batch()) + "x" + std::to_string(output_width()));
  ParamGrads grads = ParamGrads::zeros_like(*params_);
  for (std::size_t j = 0; j < cache.batch(); ++j)
    backward_item(cache, j, output_seed(loss_grad.row(j)), &grads, false);
  return grads;
}

inline Tensor Network::backward_input(const ActivationCache& cache, std::size_t node, std::size_t item) const {
  check_cache(cache);
  if (node >= output_width())
    throw ShapeError("node " + std::to_string(node) + " out of range for " + std::to_string(output_width()) + " outputs");
  if (item >= cache.batch()) throw ShapeError("batch item " + std::to_string(item) + " out of range");
  std::vector<double> row(output_width(), 0.0);
  row[node] = 1.0;
  return backward_item(cache, item, output_seed(row), nullptr, true);
}

inline Shape Network::required_input_shape(std::string_view layer_name) const {
  const auto idx = layer_index(layer_name);
  if (!idx) throw ConfigError("no layer named '" + std::string(layer_name) + "'");
  const auto& target = config_.layers[*idx];
  if (target.kind == LayerKind::flatten)
    throw ConfigError("layer '" + target.name + "' has no channel semantics to sample from");

  // A dense layer at or below the target pins the input to the configured size.
  for (std::size_t i = 0; i <= *idx; ++i)
    if (config_.layers[i].kind == LayerKind::dense || config_.layers[i].kind == LayerKind::flatten)
      return config_.input_shape;

  if (config_.input_shape.size() != 3) throw ConfigError("spatial truncation needs [C,H,W] network input");
  // Invert out = (in + 2·pad − k)/stride + 1 from a 1×1 response downwards.
  long long extent = 1;
  for (std::size_t i = *idx + 1; i-- > 0;) {
    const auto& l = config_.layers[i];
    if (l.kind == LayerKind::conv || l.kind == LayerKind::maxpool)
      extent = (extent - 1) * static_cast<long long>(l.stride) + static_cast<long long>(l.kernel) -
               2 * static_cast<long long>(l.pad);
    if (extent < 1)
      throw ConfigError("no integral input size makes layer '" + target.name + "' respond at 1x1");
  }
  Shape shape{config_.input_shape[0], static_cast<std::size_t>(extent), static_cast<std::size_t>(extent)};
  const auto check = propagate_shapes(shape, config_.layers, *idx + 1);
  if (check.back().size() != 3 || check.back()[1] != 1 || check.back()[2] != 1)
    throw ConfigError("no integral input size makes layer '" + target.name + "' respond at 1x1");
  return shape;
}

inline Network Network::truncate_at(std::string_view layer_name, std::size_t channel) const {
  if (truncated()) throw ConfigError("network is already truncated");
  const Shape input = required_input_shape(layer_name);
  const std::size_t idx = *layer_index(layer_name);
  Network sub = *this;
  sub.input_shape_ = input;
  sub.depth_ = idx + 1;
  sub.shapes_ = propagate_shapes(input, config_.layers, sub.depth_);
  const Shape& out = sub.shapes_.back();
  const std::size_t channels = out[0];
  if (element_count(out) != channels)
    throw ConfigError("layer '" + std::string(layer_name) + "' does not respond at a single position");
  if (channel >= channels)
    throw ConfigError("channel " + std::to_string(channel) + " out of range: layer '" + std::string(layer_name) +
                      "' has " + std::to_string(channels) + " channels");
  sub.selected_ = channel;
  return sub;
}

inline Network build_network(NetworkConfig config) { return Network::build(std::move(config)); }

/// Batch of one image shaped like the network input.
inline Tensor as_batch(const Tensor& image) {
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  return image.reshaped(std::move(s));
}

/// Selected score of a single image and its gradient with respect to the pixels.
inline std::pair<double, Tensor> score_and_input_grad(const Network& net, const Tensor& image, std::size_t node) {
  auto fwd = net.forward_batch(as_batch(image));
  Tensor g = net.backward_input(fwd.cache, node, 0);
  return {fwd.scores(0, node), g.reshaped(image.shape())};
}

}  // namespace tiltnet
