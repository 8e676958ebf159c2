#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qaa/quantizer.hpp"
#include "qaa/tensor.hpp"

namespace qaa {

enum class LayerKind : std::uint8_t { conv2d, linear, batchnorm, relu, maxpool, avgpool, flatten };

const char* to_string(LayerKind kind);

enum class QuantMode : std::uint8_t { full_precision, quantized };

/// Which quantizer families run during a forward pass. The two flags are
/// independent; (full, full) bypasses every quantizer.
struct QuantState {
  QuantMode weights = QuantMode::full_precision;
  QuantMode activations = QuantMode::full_precision;

  static constexpr QuantState full() { return {}; }
  static constexpr QuantState quantized() { return {QuantMode::quantized, QuantMode::quantized}; }
  static constexpr QuantState weights_only() { return {QuantMode::quantized, QuantMode::full_precision}; }

  bool weights_quantized() const noexcept { return weights == QuantMode::quantized; }
  bool activations_quantized() const noexcept { return activations == QuantMode::quantized; }
  bool operator==(const QuantState&) const = default;
};

std::string to_string(QuantState state);

/// How the model's quantization parameters were produced. Attack variants
/// and QAA fine-tuning check this before running.
enum class QuantScheme : std::uint8_t { none, qat, qaa, ptq };

const char* to_string(QuantScheme scheme);
QuantScheme quant_scheme_from_string(const std::string& s);

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEpsilon = 1e-5;

/// One layer record. Which fields are meaningful depends on `kind`:
///   conv2d     weight [out, in, k, k] (no bias), padding k / 2, stride 1
///   linear     weight [out, in], bias [out]
///   batchnorm  weight = gamma [C], bias = beta [C], running statistics [C]
///   relu       activation quantizer site, feature tap
///   maxpool / avgpool  2x2 window, stride 2
template <typename Scalar>
struct Layer {
  LayerKind kind = LayerKind::relu;
  std::string name;
  Index in_features = 0;
  Index out_features = 0;
  Index kernel = 0;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  int quant_site = -1;  // weight site (conv/linear) or activation site (relu)
  int tap = -1;         // feature tap index (relu)

  bool has_weight_quant() const noexcept { return kind == LayerKind::conv2d || kind == LayerKind::linear; }

  template <typename To>
  Layer<To> cast() const {
    Layer<To> out;
    out.kind = kind;
    out.name = name;
    out.in_features = in_features;
    out.out_features = out_features;
    out.kernel = kernel;
    if (!weight.empty()) out.weight = weight.template cast<To>();
    if (!bias.empty()) out.bias = bias.template cast<To>();
    if (!running_mean.empty()) out.running_mean = running_mean.template cast<To>();
    if (!running_var.empty()) out.running_var = running_var.template cast<To>();
    out.quant_site = quant_site;
    out.tap = tap;
    return out;
  }
};

/// How the scalar objective is formed from the logits. cross_entropy is the
/// model loss everywhere; logit_sum (sum of all logits) exists for analytic
/// test heads.
enum class LossHead : std::uint8_t { cross_entropy, logit_sum };

/// Ordered layer graph with weights, BN running statistics and one
/// QuantParams record per quantizable site.
template <typename Scalar>
struct BasicLayerGraph {
  std::string architecture_id;
  Shape input_shape;  // per-example [C, H, W] or [D]
  Index classes = 0;
  std::vector<Layer<Scalar>> layers;
  std::vector<BasicQuantParams<Scalar>> weight_quant;
  std::vector<BasicQuantParams<Scalar>> act_quant;
  QuantScheme scheme = QuantScheme::none;
  LossHead head = LossHead::cross_entropy;

  Index tap_count() const {
    Index n = 0;
    for (const auto& l : layers) n += l.tap >= 0;
    return n;
  }

  /// Highest bitwidth below 32 among weight sites, or 32.
  int nominal_bitwidth() const {
    int q = kPassthroughBits;
    for (const auto& p : weight_quant)
      if (!p.passthrough()) q = std::min(q, p.bitwidth);
    for (const auto& p : act_quant)
      if (!p.passthrough()) q = std::min(q, p.bitwidth);
    return q;
  }

  bool any_quantizer() const {
    for (const auto& p : weight_quant)
      if (!p.passthrough()) return true;
    for (const auto& p : act_quant)
      if (!p.passthrough()) return true;
    return false;
  }

  template <typename To>
  BasicLayerGraph<To> cast() const {
    BasicLayerGraph<To> out;
    out.architecture_id = architecture_id;
    out.input_shape = input_shape;
    out.classes = classes;
    for (const auto& l : layers) out.layers.push_back(l.template cast<To>());
    for (const auto& p : weight_quant) out.weight_quant.push_back(p.template cast<To>());
    for (const auto& p : act_quant) out.act_quant.push_back(p.template cast<To>());
    out.scheme = scheme;
    out.head = head;
    return out;
  }

  /// Checks the structural invariants: chain-compatible shapes, positive BN
  /// variance and exactly one quantizer record per site. Throws ShapeError or
  /// ValidationError.
  void validate() const;
};

using LayerGraph = BasicLayerGraph<float>;

/// Shape of the tensor leaving `layer` given the incoming per-example shape.
Shape layer_output_shape(LayerKind kind, const std::string& name, const Shape& in, Index in_features,
                         Index out_features, Index kernel);

template <typename Scalar>
void BasicLayerGraph<Scalar>::validate() const {
  if (input_shape.empty()) throw ValidationError("model '" + architecture_id + "' has no input shape");
  Shape cur = input_shape;
  int weight_sites = 0, act_sites = 0, taps = 0;
  for (const auto& l : layers) {
    cur = layer_output_shape(l.kind, l.name, cur, l.in_features, l.out_features, l.kernel);
    switch (l.kind) {
      case LayerKind::conv2d:
        if (l.weight.shape() != Shape{l.out_features, l.in_features, l.kernel, l.kernel})
          throw ShapeError(l.name, "conv weight has shape " + shape_string(l.weight.shape()));
        if (l.quant_site != weight_sites++) throw ValidationError("weight quant sites out of order at " + l.name);
        break;
      case LayerKind::linear:
        if (l.weight.shape() != Shape{l.out_features, l.in_features} || l.bias.shape() != Shape{l.out_features})
          throw ShapeError(l.name, "linear parameters have shape " + shape_string(l.weight.shape()));
        if (l.quant_site != weight_sites++) throw ValidationError("weight quant sites out of order at " + l.name);
        break;
      case LayerKind::batchnorm:
        if (l.weight.shape() != Shape{l.in_features} || l.bias.shape() != Shape{l.in_features} ||
            l.running_mean.shape() != Shape{l.in_features} || l.running_var.shape() != Shape{l.in_features})
          throw ShapeError(l.name, "batchnorm parameters do not match channel count");
        if (!(l.running_var.array() > Scalar(0)).all())
          throw ValidationError("batchnorm running variance must be positive at " + l.name);
        break;
      case LayerKind::relu:
        if (l.quant_site != act_sites++) throw ValidationError("activation quant sites out of order at " + l.name);
        if (l.tap != taps++) throw ValidationError("feature taps out of order at " + l.name);
        break;
      default:
        break;
    }
  }
  if (cur != Shape{classes}) throw ShapeError("output", "model emits " + shape_string(cur) + ", expected [classes]");
  if (static_cast<int>(weight_quant.size()) != weight_sites || static_cast<int>(act_quant.size()) != act_sites)
    throw ValidationError("model '" + architecture_id + "' must carry exactly one QuantParams per site");
  for (const auto& p : weight_quant) p.validate();
  for (const auto& p : act_quant) p.validate();
}

/// Incremental builder used by the architecture factories and by tests that
/// need small hand-made fragments.
class GraphBuilder {
 public:
  GraphBuilder(std::string architecture_id, Shape input_shape);

  GraphBuilder& conv(Index out_channels, Index kernel);
  GraphBuilder& linear(Index out_features);
  GraphBuilder& batchnorm();
  GraphBuilder& relu();
  GraphBuilder& maxpool();
  GraphBuilder& avgpool();
  GraphBuilder& flatten();

  /// Finalizes the graph. Weights are zero; call initialize() for random init.
  LayerGraph build() const;

 private:
  LayerGraph graph_;
  Shape current_;
};

/// Kaiming-normal weights (std = sqrt(2 / fan_in)), zero biases, BN gamma 1,
/// beta 0, running mean 0, running variance 1.
void initialize(LayerGraph& model, std::uint64_t seed);

/// Known architectures: "convnet-a", "convnet-b", "mlp-3".
LayerGraph make_architecture(const std::string& architecture_id, const Shape& input_shape, Index classes);

/// Every weight and activation site set to the given bitwidth with unit scale
/// (q = 32 gives the passthrough record).
void set_uniform_bitwidth(LayerGraph& model, int bitwidth);

/// FNV-1a hash over every stored number; used for determinism checks.
std::uint64_t parameter_hash(const LayerGraph& model);

}  // namespace qaa
