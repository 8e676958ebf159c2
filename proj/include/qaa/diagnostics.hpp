#pragma once

#include <span>
#include <string>
#include <vector>

#include "qaa/attacks.hpp"
#include "qaa/model.hpp"

namespace qaa {

/// ||a - b||_2 / ||b||_2 in double. Throws UndefinedMetric when ||b|| = 0.
double relative_deviation(const Tensor32& adv_feature, const Tensor32& clean_feature);

/// Cosine of two flattened vectors in double. Throws UndefinedMetric when
/// either vector is zero.
double cosine_similarity(const Tensor32& a, const Tensor32& b);

/// Per-example metric values. Examples for which the metric is undefined are
/// counted in `undefined` and left out of the mean.
struct BatchMetric {
  std::vector<double> per_example;  // NaN where undefined
  double mean = 0;
  Index undefined = 0;
};

/// Relative change of feature tap k between clean and adversarial inputs,
/// computed per example. Throws UndefinedMetric if no example has a nonzero
/// clean feature.
BatchMetric feature_divergence(const LayerGraph& target, QuantState state, const Tensor32& x, const Tensor32& x_adv,
                               Index tap);

/// Per-example cosine between the input gradients of target and substitute
/// at the clean point (eval mode). Throws UndefinedMetric if every example
/// has a zero gradient on either side.
BatchMetric gradient_similarity(const Substitute& target, const Substitute& substitute, const Tensor32& x,
                                const std::vector<int>& y);

/// Multi-state substitute (e.g. a QAA model over its schedule states): its
/// gradient is that of the summed member losses.
BatchMetric gradient_similarity(const Substitute& target, std::span<const Substitute> substitute, const Tensor32& x,
                                const std::vector<int>& y);

/// Pairwise 1 - mean cosine similarity. Pairs with no defined example are
/// NaN and listed in `warnings`.
struct DistanceMatrix {
  std::vector<std::string> labels;
  Eigen::MatrixXd values;
  std::vector<std::string> warnings;

  std::string to_csv() const;
};

DistanceMatrix distance_matrix(std::span<const Substitute> models, const std::vector<std::string>& labels,
                               const Tensor32& x, const std::vector<int>& y);

struct SharpnessConfig {
  double epsilon = 5e-4;
  int iterations = 20;
  double step_fraction = 0.25;  // sign step = step_fraction * epsilon

  void validate() const;
};

/// phi and the inner-loop record. objective[0] is the unperturbed loss and
/// objective[t] the accepted value after step t; it is monotone (ascent for
/// weights, descent for features) and every run asserts that.
struct SharpnessResult {
  double phi = 0;
  double base_loss = 0;
  double extreme_loss = 0;
  std::vector<double> objective;
  int fallbacks = 0;  // steps where the line search had to shrink or reject
};

/// Weight-space sharpness: perturbs every conv and linear weight tensor
/// within the box [-eps, eps] to maximize the batch-mean loss.
SharpnessResult sharpness_weight(const LayerGraph& model, QuantState state, const Tensor32& x,
                                 const std::vector<int>& y, const SharpnessConfig& cfg);

/// Feature-space sharpness: perturbs the (adversarial) inputs within the box
/// to minimize the batch-mean loss. Inputs are not clamped to [0, 1].
SharpnessResult sharpness_feature(const LayerGraph& model, QuantState state, const Tensor32& x_adv,
                                  const std::vector<int>& y, const SharpnessConfig& cfg);

/// Multi-state forms: the loss is the mean over `states`.
SharpnessResult sharpness_weight(const LayerGraph& model, std::span<const QuantState> states, const Tensor32& x,
                                 const std::vector<int>& y, const SharpnessConfig& cfg);
SharpnessResult sharpness_feature(const LayerGraph& model, std::span<const QuantState> states, const Tensor32& x_adv,
                                  const std::vector<int>& y, const SharpnessConfig& cfg);

struct BnStats {
  std::string layer;
  Eigen::VectorXf running_mean;
  Eigen::VectorXf running_var;

  Index channels() const { return running_mean.size(); }
  std::string to_csv() const;
};

BnStats bn_stats_export(const LayerGraph& model, Index layer);

}  // namespace qaa
