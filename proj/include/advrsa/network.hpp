#pragma once

// Layer-list classifier with exact reverse-mode gradients for both the
// parameters and the input image.

#include <advrsa/ops.hpp>
#include <advrsa/random.hpp>
#include <advrsa/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace advrsa {

enum class LayerKind { conv, relu, maxpool, lrn, affine, softmax };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::lrn: return "lrn";
    case LayerKind::affine: return "affine";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  for (LayerKind k : {LayerKind::conv, LayerKind::relu, LayerKind::maxpool, LayerKind::lrn,
                      LayerKind::affine, LayerKind::softmax}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t channels = 0;  // conv: output channels
  std::size_t kernel = 0;    // conv: kernel extent; maxpool: window
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t outputs = 0;   // affine: output width
  LrnParams lrn{};

  static LayerSpec conv(std::size_t channels, std::size_t kernel, std::size_t stride, std::size_t padding) {
    return {LayerKind::conv, channels, kernel, stride, padding, 0, {}};
  }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec maxpool(std::size_t window, std::size_t stride) {
    return {LayerKind::maxpool, 0, window, stride, 0, 0, {}};
  }
  static LayerSpec local_response_norm(LrnParams p = {}) { return {LayerKind::lrn, 0, 0, 1, 0, 0, p}; }
  static LayerSpec affine(std::size_t outputs) { return {LayerKind::affine, 0, 0, 1, 0, outputs, {}}; }
  static LayerSpec softmax() { return {LayerKind::softmax}; }

  bool has_parameters() const { return kind == LayerKind::conv || kind == LayerKind::affine; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// A named snapshot point: the output of layer `layer`.
struct ReportLayer {
  std::string name;
  std::size_t layer = 0;

  friend bool operator==(const ReportLayer&, const ReportLayer&) = default;
};

struct NetworkConfig {
  Shape input_shape{3, 32, 32};
  std::size_t classes = 8;
  std::vector<LayerSpec> layers;
  std::vector<ReportLayer> report_layers;
  double input_offset = 0.0;  // subtracted from every pixel before layer 0

  /// Five conv/fc stages: two conv+ReLU+LRN+pool blocks, a third conv, one
  /// hidden affine layer, and the softmax head.
  static NetworkConfig toy(std::size_t classes = 8) {
    NetworkConfig c;
    c.classes = classes;
    c.layers = {
        LayerSpec::conv(16, 5, 1, 2), LayerSpec::relu(), LayerSpec::local_response_norm(), LayerSpec::maxpool(2, 2),
        LayerSpec::conv(32, 3, 1, 1), LayerSpec::relu(), LayerSpec::local_response_norm(), LayerSpec::maxpool(2, 2),
        LayerSpec::conv(32, 3, 1, 1), LayerSpec::relu(),
        LayerSpec::affine(128),       LayerSpec::relu(),
        LayerSpec::affine(classes),   LayerSpec::softmax(),
    };
    c.report_layers = {{"pool1", 3}, {"pool2", 7}, {"conv3", 9}, {"fc1", 11}, {"prob", 13}};
    c.input_offset = 0.5;
    return c;
  }

  /// Output shape of every layer; throws on any inconsistency.
  std::vector<Shape> shape_chain() const {
    if (input_shape.size() != 3) throw ShapeError("network input must be [C,H,W], got " + shape_string(input_shape));
    if (layers.empty()) throw std::invalid_argument("network has no layers");
    std::vector<Shape> shapes;
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
      if (l.stride < 1) throw std::invalid_argument(where + ": stride must be >= 1");
      switch (l.kind) {
        case LayerKind::conv:
          if (cur.size() != 3) throw ShapeError(where + ": needs a [C,H,W] input, got " + shape_string(cur));
          if (l.channels == 0 || l.kernel == 0) throw std::invalid_argument(where + ": empty kernel bank");
          cur = {l.channels, conv_output_extent(cur[1], l.kernel, l.stride, l.padding),
                 conv_output_extent(cur[2], l.kernel, l.stride, l.padding)};
          break;
        case LayerKind::maxpool:
          if (cur.size() != 3) throw ShapeError(where + ": needs a [C,H,W] input, got " + shape_string(cur));
          if (l.kernel == 0 || l.kernel > cur[1] || l.kernel > cur[2]) {
            throw ShapeError(where + ": window " + std::to_string(l.kernel) + " does not fit " + shape_string(cur));
          }
          cur = {cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
          break;
        case LayerKind::lrn:
          if (cur.size() != 3) throw ShapeError(where + ": needs a [C,H,W] input, got " + shape_string(cur));
          if (l.lrn.n % 2 == 0 || !(l.lrn.k > 0.0)) throw std::invalid_argument(where + ": requires odd n and k > 0");
          break;
        case LayerKind::affine:
          if (l.outputs == 0) throw std::invalid_argument(where + ": zero outputs");
          cur = {l.outputs};
          break;
        case LayerKind::relu:
          break;
        case LayerKind::softmax:
          if (cur.size() != 1) throw ShapeError(where + ": softmax needs a vector input, got " + shape_string(cur));
          break;
      }
      shapes.push_back(cur);
    }
    if (layers.back().kind != LayerKind::softmax) throw std::invalid_argument("final layer must be softmax");
    if (shapes.back() != Shape{classes}) {
      throw ShapeError("softmax width " + shape_string(shapes.back()) + " != class count " + std::to_string(classes));
    }
    if (classes < 2) throw std::invalid_argument("need at least two classes");
    for (const ReportLayer& r : report_layers) {
      if (r.layer >= layers.size()) {
        throw std::invalid_argument("report layer '" + r.name + "' refers to missing layer " + std::to_string(r.layer));
      }
    }
    return shapes;
  }

  const ReportLayer& report_layer(const std::string& name) const {
    for (const ReportLayer& r : report_layers) {
      if (r.name == name) return r;
    }
    throw std::out_of_range("unknown report layer '" + name + "'");
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Parameter tensors of a NetworkConfig, two per conv/affine layer (weights, bias).
class Network {
 public:
  explicit Network(NetworkConfig config) : config_(std::move(config)) {
    shapes_ = config_.shape_chain();
    Shape in = config_.input_shape;
    for (std::size_t i = 0; i < config_.layers.size(); ++i) {
      const LayerSpec& l = config_.layers[i];
      if (l.kind == LayerKind::conv) {
        param_index_.push_back(static_cast<long>(params_.size()));
        params_.emplace_back(Shape{l.channels, in[0], l.kernel, l.kernel});
        params_.emplace_back(Shape{l.channels});
      } else if (l.kind == LayerKind::affine) {
        param_index_.push_back(static_cast<long>(params_.size()));
        params_.emplace_back(Shape{l.outputs, shape_volume(in)});
        params_.emplace_back(Shape{l.outputs});
      } else {
        param_index_.push_back(-1);
      }
      in = shapes_[i];
    }
  }

  /// He-style fan-in scaled Gaussian weights and zero biases. The affine layer
  /// feeding the softmax uses unit gain so the initial output is near uniform.
  static Network initialized(NetworkConfig config, std::uint64_t seed) {
    Network net(std::move(config));
    const std::size_t last_param_layer = net.last_parametric_layer();
    for (std::size_t i = 0; i < net.config_.layers.size(); ++i) {
      if (net.param_index_[i] < 0) continue;
      Tensor& w = net.weights(i);
      const std::size_t fan_in = w.size() / w.dim(0);
      const double gain = i == last_param_layer ? 1.0 : 2.0;
      std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
      Engine eng = make_engine(seed, {0x1417, i});
      for (double& v : w.values()) v = dist(eng);
    }
    return net;
  }

  const NetworkConfig& config() const noexcept { return config_; }
  const std::vector<Shape>& output_shapes() const noexcept { return shapes_; }
  std::size_t layer_count() const noexcept { return config_.layers.size(); }

  std::vector<Tensor>& parameters() noexcept { return params_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : params_) n += t.size();
    return n;
  }

  bool has_parameters(std::size_t layer) const { return param_index_.at(layer) >= 0; }
  std::size_t parameter_slot(std::size_t layer) const { return static_cast<std::size_t>(param_index_.at(layer)); }
  Tensor& weights(std::size_t layer) { return params_[parameter_slot(layer)]; }
  const Tensor& weights(std::size_t layer) const { return params_[parameter_slot(layer)]; }
  Tensor& bias(std::size_t layer) { return params_[parameter_slot(layer) + 1]; }
  const Tensor& bias(std::size_t layer) const { return params_[parameter_slot(layer) + 1]; }

  std::size_t last_parametric_layer() const {
    for (std::size_t i = param_index_.size(); i-- > 0;) {
      if (param_index_[i] >= 0) return i;
    }
    throw std::logic_error("network has no parametric layers");
  }

 private:
  NetworkConfig config_;
  std::vector<Shape> shapes_;
  std::vector<Tensor> params_;
  std::vector<long> param_index_;
};

/// Everything backward() needs: the input to every layer plus pooling argmaxes.
struct ForwardRecord {
  std::vector<Tensor> values;  // values[i] is the input of layer i (values[0] offset-shifted); values.back() is the output
  std::vector<std::vector<std::size_t>> argmax;

  bool complete() const noexcept { return !values.empty(); }
  const Tensor& output() const { return values.back(); }
  const Tensor& logits() const { return values.at(values.size() - 2); }
};

inline Tensor apply_layer(const Network& net, std::size_t i, const Tensor& x, std::vector<std::size_t>* argmax) {
  const LayerSpec& l = net.config().layers[i];
  switch (l.kind) {
    case LayerKind::conv: return conv2d(x, net.weights(i), net.bias(i), l.stride, l.padding);
    case LayerKind::relu: return relu(x);
    case LayerKind::lrn: return lrn(x, l.lrn);
    case LayerKind::affine: return affine(x, net.weights(i), net.bias(i));
    case LayerKind::softmax: return softmax(x);
    case LayerKind::maxpool: {
      PoolResult r = maxpool2d(x, l.kernel, l.stride);
      if (argmax) *argmax = std::move(r.argmax);
      return std::move(r.output);
    }
  }
  throw std::logic_error("unhandled layer kind");
}

inline ForwardRecord forward(const Network& net, const Tensor& image) {
  if (image.shape() != net.config().input_shape) {
    throw ShapeError("network expects input " + shape_string(net.config().input_shape) + ", got " +
                     shape_string(image.shape()));
  }
  ForwardRecord rec;
  rec.values.reserve(net.layer_count() + 1);
  rec.argmax.resize(net.layer_count());
  rec.values.push_back(image);
  if (const double off = net.config().input_offset; off != 0.0) {
    for (double& v : rec.values.back().values()) v -= off;
  }
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    rec.values.push_back(apply_layer(net, i, rec.values.back(), &rec.argmax[i]));
  }
  return rec;
}

struct Gradients {
  std::vector<Tensor> params;  // parallel to Network::parameters(); empty tensors when not requested
  Tensor input;
};

struct BackwardOptions {
  bool parameters = true;
  bool input = true;
};

/// Back-propagates `grad` (w.r.t. the output of layer `top`) down to the image.
inline Gradients backward_from(const Network& net, const ForwardRecord& rec, Tensor grad, std::size_t top,
                               BackwardOptions opts = {}) {
  if (!rec.complete() || rec.values.size() != net.layer_count() + 1) {
    throw std::logic_error("backward called without a completed forward record");
  }
  if (top >= net.layer_count()) throw std::out_of_range("backward: layer index out of range");
  if (grad.size() != rec.values[top + 1].size()) {
    throw ShapeError("backward: upstream gradient " + shape_string(grad.shape()) + " does not match layer output " +
                     shape_string(rec.values[top + 1].shape()));
  }
  grad = grad.reshaped(rec.values[top + 1].shape());
  Gradients g;
  g.params.resize(net.parameters().size());
  // Layers below the first parametric layer only matter for the input gradient.
  std::size_t lowest = 0;
  if (!opts.input) {
    lowest = net.layer_count();
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
      if (net.has_parameters(i)) {
        lowest = i;
        break;
      }
    }
  }
  for (std::size_t i = top + 1; i-- > lowest;) {
    const LayerSpec& l = net.config().layers[i];
    const Tensor& x = rec.values[i];
    const bool need_input = opts.input || i > lowest;
    switch (l.kind) {
      case LayerKind::conv: {
        ConvGradients cg = conv2d_backward(x, net.weights(i), l.stride, l.padding, grad, need_input, opts.parameters);
        if (opts.parameters) {
          g.params[net.parameter_slot(i)] = std::move(cg.kernels);
          g.params[net.parameter_slot(i) + 1] = std::move(cg.bias);
        }
        grad = std::move(cg.input);
        break;
      }
      case LayerKind::affine: {
        AffineGradients ag = affine_backward(x, net.weights(i), grad, need_input, opts.parameters);
        if (opts.parameters) {
          g.params[net.parameter_slot(i)] = std::move(ag.weights);
          g.params[net.parameter_slot(i) + 1] = std::move(ag.bias);
        }
        grad = std::move(ag.input);
        break;
      }
      case LayerKind::relu: grad = relu_backward(x, grad); break;
      case LayerKind::lrn: grad = lrn_backward(x, l.lrn, grad); break;
      case LayerKind::maxpool: grad = maxpool2d_backward(x.shape(), rec.argmax[i], grad); break;
      case LayerKind::softmax: grad = softmax_backward(rec.values[i + 1], grad); break;
    }
    if (!need_input) break;
  }
  if (opts.input) g.input = std::move(grad);
  return g;
}

/// Reverse-mode gradients given dL/d(network output).
inline Gradients backward(const Network& net, const ForwardRecord& rec, const Tensor& upstream,
                          BackwardOptions opts = {}) {
  if (!rec.complete()) throw std::logic_error("backward called without a completed forward record");
  return backward_from(net, rec, upstream, net.layer_count() - 1, opts);
}

/// Reverse-mode gradients given dL/d(logits), skipping the softmax Jacobian.
inline Gradients backward_logits(const Network& net, const ForwardRecord& rec, const Tensor& grad_logits,
                                 BackwardOptions opts = {}) {
  if (!rec.complete()) throw std::logic_error("backward called without a completed forward record");
  return backward_from(net, rec, grad_logits, net.layer_count() - 2, opts);
}

inline Tensor predict(const Network& net, const Tensor& image) { return forward(net, image).output(); }

inline std::size_t argmax(const Tensor& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Flattened output of a report layer.
inline std::vector<double> layer_activations(const Network& net, const Tensor& image, const std::string& layer) {
  const ReportLayer& r = net.config().report_layer(layer);
  ForwardRecord rec = forward(net, image);
  const auto v = rec.values[r.layer + 1].values();
  return {v.begin(), v.end()};
}

/// Cross-entropy loss of one labelled image and its gradients.
struct LossGradient {
  double loss = 0.0;
  Tensor probs;
  Gradients grads;
};

inline LossGradient loss_and_gradient(const Network& net, const Tensor& image, std::size_t label,
                                      BackwardOptions opts = {}) {
  ForwardRecord rec = forward(net, image);
  SoftmaxXent sx = softmax_xent(rec.logits(), label);
  LossGradient out;
  out.loss = sx.loss;
  out.probs = rec.output();
  out.grads = backward_logits(net, rec, sx.grad_logits, opts);
  return out;
}

}  // namespace advrsa
