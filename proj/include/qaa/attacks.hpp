#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qaa/model.hpp"
#include "qaa/tensor.hpp"

namespace qaa {

enum class AttackFamily : std::uint8_t { pgd, mim, qaa, ensemble };
enum class UpdateRule : std::uint8_t { pgd, mim };
enum class EnsembleMode : std::uint8_t { logits, softmax, sampling };
enum class QaaVariant : std::uint8_t { qat, ptq };

const char* to_string(AttackFamily f);
const char* to_string(UpdateRule r);
const char* to_string(EnsembleMode m);
const char* to_string(QaaVariant v);

/// l-infinity attack settings. A step_size of 0 selects the default rule:
/// 2.5 * epsilon / N for the pgd update, epsilon / N for the mim update.
struct AttackSpec {
  AttackFamily family = AttackFamily::mim;
  double epsilon = 16.0 / 255.0;
  int iterations = 10;
  double step_size = 0.0;
  double momentum_decay = 1.0;
  UpdateRule inner = UpdateRule::mim;  // update rule for qaa and ensemble families
  EnsembleMode ensemble_mode = EnsembleMode::logits;
  bool sample_without_replacement = false;  // checkpoint-collection sampling
  bool random_start = false;
  std::uint64_t seed = 0;

  UpdateRule update_rule() const;
  double resolved_step() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const AttackSpec& s);
void from_json(const nlohmann::json& j, AttackSpec& s);

/// Output of an attack. loss_trace is [N, iterations]: the substitute loss at
/// the point where each iteration's gradient was taken. zero_gradient_steps
/// counts, per example, iterations whose update direction was exactly zero.
struct AdversarialSet {
  Tensor32 clean;
  Tensor32 adversarial;
  std::vector<int> labels;
  Eigen::MatrixXf loss_trace;
  std::vector<int> zero_gradient_steps;
  AttackSpec spec;
  std::vector<QuantState> schedule;  // state used at each iteration (single-model attacks)
  std::vector<int> model_sequence;   // member used at each iteration (sampling ensembles)

  Index size() const { return static_cast<Index>(labels.size()); }
  /// max over examples of ||adv - clean||_inf, computed in double.
  double max_linf() const;
};

/// A model together with the quantization state it runs in.
struct Substitute {
  const LayerGraph* model = nullptr;
  QuantState state;
};

/// Untargeted PGD: x <- clip_{B(x0, eps) n [0,1]}(x + a * sign(grad)).
AdversarialSet pgd(const LayerGraph& substitute, const Tensor32& x, const std::vector<int>& y, const AttackSpec& spec,
                   QuantState state = QuantState::full());

/// Momentum iterative method: g <- mu g + grad / ||grad||_1, x <- clip(x + a sign(g)).
AdversarialSet mim(const LayerGraph& substitute, const Tensor32& x, const std::vector<int>& y, const AttackSpec& spec,
                   QuantState state = QuantState::full());

/// The per-iteration state alternation of the quantization aware attack.
/// The flag starts true and is negated before use, so iteration 0 runs the
/// full-precision branch. The qat variant keeps weights quantized and toggles
/// activations; the ptq variant toggles weights and activations together.
std::vector<QuantState> qaa_schedule(int iterations, QaaVariant variant);

/// Quantization aware attack. The qat variant requires a QAT or QAA
/// fine-tuned model, the ptq variant a PTQ model; anything else is rejected.
AdversarialSet qaa_attack(const LayerGraph& model, const Tensor32& x, const std::vector<int>& y,
                          const AttackSpec& spec, QaaVariant variant);

/// Ensemble baselines: average logits, average softmax probabilities, or one
/// uniformly sampled member per iteration (seeded by spec.seed).
AdversarialSet ensemble_attack(std::span<const Substitute> members, const Tensor32& x, const std::vector<int>& y,
                               const AttackSpec& spec);

/// Input gradient of the summed loss of an ensemble; exposed for tests.
Tensor32 ensemble_input_gradient(std::span<const Substitute> members, EnsembleMode mode, const Tensor32& x,
                                 const std::vector<int>& y, Eigen::VectorXf* per_example_loss = nullptr);

}  // namespace qaa
