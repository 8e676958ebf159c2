#include "qaa/model.hpp"

#include <cstring>
#include <sstream>

namespace qaa {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::linear: return "linear";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

std::string to_string(QuantState state) {
  std::string s = state.weights_quantized() ? "w:quant" : "w:full";
  s += state.activations_quantized() ? "/a:quant" : "/a:full";
  return s;
}

const char* to_string(QuantScheme scheme) {
  switch (scheme) {
    case QuantScheme::none: return "none";
    case QuantScheme::qat: return "qat";
    case QuantScheme::qaa: return "qaa";
    case QuantScheme::ptq: return "ptq";
  }
  return "?";
}

QuantScheme quant_scheme_from_string(const std::string& s) {
  if (s == "none") return QuantScheme::none;
  if (s == "qat") return QuantScheme::qat;
  if (s == "qaa") return QuantScheme::qaa;
  if (s == "ptq") return QuantScheme::ptq;
  throw ValidationError("unknown quantization scheme '" + s + "'");
}

Shape layer_output_shape(LayerKind kind, const std::string& name, const Shape& in, Index in_features,
                         Index out_features, Index kernel) {
  switch (kind) {
    case LayerKind::conv2d:
      if (in.size() != 3 || in[0] != in_features)
        throw ShapeError(name, "expects [" + std::to_string(in_features) + ",H,W], got " + shape_string(in));
      if (kernel != 1 && kernel != 3) throw ShapeError(name, "kernel must be 1 or 3");
      return {out_features, in[1], in[2]};
    case LayerKind::linear:
      if (in.size() != 1 || in[0] != in_features)
        throw ShapeError(name, "expects [" + std::to_string(in_features) + "], got " + shape_string(in));
      return {out_features};
    case LayerKind::batchnorm:
      if (in.empty() || in[0] != in_features)
        throw ShapeError(name, "channel count " + std::to_string(in_features) + " vs input " + shape_string(in));
      return in;
    case LayerKind::relu:
      return in;
    case LayerKind::maxpool:
    case LayerKind::avgpool:
      if (in.size() != 3 || in[1] % 2 || in[2] % 2)
        throw ShapeError(name, "2x2 pooling needs [C,H,W] with even H,W, got " + shape_string(in));
      return {in[0], in[1] / 2, in[2] / 2};
    case LayerKind::flatten:
      return {shape_size(in)};
  }
  throw ShapeError(name, "unknown layer kind");
}

GraphBuilder::GraphBuilder(std::string architecture_id, Shape input_shape) : current_(input_shape) {
  graph_.architecture_id = std::move(architecture_id);
  graph_.input_shape = std::move(input_shape);
}

namespace {
std::string layer_name(LayerKind kind, std::size_t index) {
  return std::string(to_string(kind)) + std::to_string(index);
}
}  // namespace

GraphBuilder& GraphBuilder::conv(Index out_channels, Index kernel) {
  Layer<float> l;
  l.kind = LayerKind::conv2d;
  l.name = layer_name(l.kind, graph_.layers.size());
  l.in_features = current_.empty() ? 0 : current_[0];
  l.out_features = out_channels;
  l.kernel = kernel;
  current_ = layer_output_shape(l.kind, l.name, current_, l.in_features, l.out_features, kernel);
  l.weight = Tensor32({out_channels, l.in_features, kernel, kernel});
  l.quant_site = static_cast<int>(graph_.weight_quant.size());
  graph_.weight_quant.push_back(QuantParams{kPassthroughBits, 1.0f, 0.0f, true});
  graph_.layers.push_back(std::move(l));
  return *this;
}

GraphBuilder& GraphBuilder::linear(Index out_features) {
  Layer<float> l;
  l.kind = LayerKind::linear;
  l.name = layer_name(l.kind, graph_.layers.size());
  l.in_features = current_.size() == 1 ? current_[0] : 0;
  l.out_features = out_features;
  current_ = layer_output_shape(l.kind, l.name, current_, l.in_features, out_features, 0);
  l.weight = Tensor32({out_features, l.in_features});
  l.bias = Tensor32({out_features});
  l.quant_site = static_cast<int>(graph_.weight_quant.size());
  graph_.weight_quant.push_back(QuantParams{kPassthroughBits, 1.0f, 0.0f, true});
  graph_.layers.push_back(std::move(l));
  return *this;
}

GraphBuilder& GraphBuilder::batchnorm() {
  Layer<float> l;
  l.kind = LayerKind::batchnorm;
  l.name = layer_name(l.kind, graph_.layers.size());
  l.in_features = current_.empty() ? 0 : current_[0];
  current_ = layer_output_shape(l.kind, l.name, current_, l.in_features, 0, 0);
  l.weight = Tensor32::constant({l.in_features}, 1.0f);
  l.bias = Tensor32({l.in_features});
  l.running_mean = Tensor32({l.in_features});
  l.running_var = Tensor32::constant({l.in_features}, 1.0f);
  graph_.layers.push_back(std::move(l));
  return *this;
}

GraphBuilder& GraphBuilder::relu() {
  Layer<float> l;
  l.kind = LayerKind::relu;
  l.name = layer_name(l.kind, graph_.layers.size());
  l.quant_site = static_cast<int>(graph_.act_quant.size());
  l.tap = l.quant_site;
  graph_.act_quant.push_back(QuantParams{kPassthroughBits, 1.0f, 0.0f, false});
  graph_.layers.push_back(std::move(l));
  return *this;
}

GraphBuilder& GraphBuilder::maxpool() {
  Layer<float> l;
  l.kind = LayerKind::maxpool;
  l.name = layer_name(l.kind, graph_.layers.size());
  current_ = layer_output_shape(l.kind, l.name, current_, 0, 0, 0);
  graph_.layers.push_back(std::move(l));
  return *this;
}

GraphBuilder& GraphBuilder::avgpool() {
  Layer<float> l;
  l.kind = LayerKind::avgpool;
  l.name = layer_name(l.kind, graph_.layers.size());
  current_ = layer_output_shape(l.kind, l.name, current_, 0, 0, 0);
  graph_.layers.push_back(std::move(l));
  return *this;
}

GraphBuilder& GraphBuilder::flatten() {
  Layer<float> l;
  l.kind = LayerKind::flatten;
  l.name = layer_name(l.kind, graph_.layers.size());
  current_ = layer_output_shape(l.kind, l.name, current_, 0, 0, 0);
  graph_.layers.push_back(std::move(l));
  return *this;
}

LayerGraph GraphBuilder::build() const {
  LayerGraph g = graph_;
  if (current_.size() != 1) throw ShapeError("output", "graph must end in a flat [classes] output");
  g.classes = current_[0];
  g.validate();
  return g;
}

void initialize(LayerGraph& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& l : model.layers) {
    if (l.kind == LayerKind::conv2d || l.kind == LayerKind::linear) {
      const Index fan_in = l.weight.size() / l.out_features;
      std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
      for (Index i = 0; i < l.weight.size(); ++i) l.weight[i] = dist(rng);
      if (!l.bias.empty()) l.bias.data().setZero();
    } else if (l.kind == LayerKind::batchnorm) {
      l.weight.data().setOnes();
      l.bias.data().setZero();
      l.running_mean.data().setZero();
      l.running_var.data().setOnes();
    }
  }
}

LayerGraph make_architecture(const std::string& id, const Shape& input_shape, Index classes) {
  if (id == "convnet-a") {
    return GraphBuilder(id, input_shape)
        .conv(8, 3).batchnorm().relu().maxpool()
        .conv(16, 3).batchnorm().relu().maxpool()
        .flatten().linear(classes)
        .build();
  }
  if (id == "convnet-b") {
    return GraphBuilder(id, input_shape)
        .conv(8, 3).batchnorm().relu()
        .conv(8, 3).batchnorm().relu().maxpool()
        .conv(16, 3).batchnorm().relu()
        .conv(16, 1).batchnorm().relu().avgpool()
        .flatten().linear(classes)
        .build();
  }
  if (id == "mlp-3") {
    GraphBuilder b(id, input_shape);
    if (input_shape.size() != 1) b.flatten();
    return b.linear(64).relu().linear(32).relu().linear(classes).build();
  }
  throw ValidationError("unknown architecture '" + id + "'");
}

void set_uniform_bitwidth(LayerGraph& model, int bitwidth) {
  for (auto& p : model.weight_quant) p = QuantParams{bitwidth, 1.0f, 0.0f, true};
  for (auto& p : model.act_quant) p = QuantParams{bitwidth, 1.0f, 0.0f, false};
}

namespace {
struct Fnv1a {
  std::uint64_t h = 1469598103934665603ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 1099511628211ULL;
    }
  }
  void tensor(const Tensor32& t) {
    if (!t.empty()) bytes(t.ptr(), sizeof(float) * static_cast<std::size_t>(t.size()));
  }
  void quant(const QuantParams& p) {
    bytes(&p.bitwidth, sizeof p.bitwidth);
    bytes(&p.scale, sizeof p.scale);
    bytes(&p.bias, sizeof p.bias);
  }
};
}  // namespace

std::uint64_t parameter_hash(const LayerGraph& model) {
  Fnv1a f;
  for (const auto& l : model.layers) {
    f.tensor(l.weight);
    f.tensor(l.bias);
    f.tensor(l.running_mean);
    f.tensor(l.running_var);
  }
  for (const auto& p : model.weight_quant) f.quant(p);
  for (const auto& p : model.act_quant) f.quant(p);
  return f.h;
}

}  // namespace qaa
