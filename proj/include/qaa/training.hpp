#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qaa/attacks.hpp"
#include "qaa/dataset.hpp"
#include "qaa/model.hpp"

namespace qaa {

/// SGD settings. bitwidth 32 means full precision; metrics_log, when set,
/// receives one JSON object per epoch.
struct TrainConfig {
  int epochs = 10;
  Index batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  int bitwidth = 32;
  int checkpoints = 8;  // snapshots recorded over QAA fine-tuning; 0 disables
  std::string metrics_log;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Snapshots taken at fixed batch intervals during fine-tuning.
struct CheckpointCollection {
  std::vector<LayerGraph> snapshots;
  std::vector<Index> batch_index;  // batch after which each snapshot was taken

  bool empty() const { return snapshots.empty(); }
  void validate() const;
};

/// Called after every optimizer step with the batch index (counted across
/// epochs), the state the batch ran in, and the updated model.
using BatchObserver = std::function<void(Index batch, QuantState state, const LayerGraph& model)>;

/// Full-precision training from a seeded initialization. cfg.bitwidth must be 32.
LayerGraph train_standard(const std::string& arch, const Dataset& data, const TrainConfig& cfg,
                          const BatchObserver& observer = {});

/// Quantization-aware training at cfg.bitwidth. Starts from `init` when given
/// (same architecture), otherwise from the seeded initialization; quantizer
/// scales and biases are initialized by MSE calibration and then learned.
/// At bitwidth 32 every site stays a passthrough and the run reproduces
/// train_standard exactly.
LayerGraph qat_train(const std::string& arch, const Dataset& data, const TrainConfig& cfg,
                     const LayerGraph* init = nullptr, const BatchObserver& observer = {});

/// Per-batch activation states of QAA fine-tuning: [full, quant, full, ...].
std::vector<QuantState> finetune_schedule(Index batches);

/// Alternating fine-tune of a QAT model. Weights stay quantized; activation
/// quantizer parameters are only updated on quantized-activation batches.
/// Records cfg.checkpoints evenly spaced snapshots into `checkpoints` if given.
LayerGraph finetune_qaa(const LayerGraph& pretrained_qnn, const Dataset& data, const TrainConfig& cfg,
                        CheckpointCollection* checkpoints = nullptr, const BatchObserver& observer = {});

enum class CalibrationMethod : std::uint8_t { minmax, mse };
CalibrationMethod calibration_method_from_string(const std::string& s);

inline constexpr Index kDefaultCalibrationSamples = 256;
inline constexpr int kMseGridSize = 20;

/// Post-training quantization: weights are copied unchanged, every site gets
/// calibrated parameters (weights from the weight tensor, activations from
/// full-precision eval-mode ReLU outputs on the first `samples` examples).
LayerGraph ptq_quantize(const LayerGraph& model32, const Dataset& calib, int bitwidth, CalibrationMethod method,
                        Index samples = kDefaultCalibrationSamples);

/// PGD adversarial training: every batch is replaced by its PGD perturbation
/// against the current model (eval-mode BN) before the SGD step.
LayerGraph adv_train(const std::string& arch, const Dataset& data, const TrainConfig& cfg, const AttackSpec& attack,
                     const BatchObserver& observer = {});

std::vector<int> predict(const LayerGraph& model, const Tensor32& x, QuantState state);

/// Fraction of correctly classified examples, eval mode.
double accuracy(const LayerGraph& model, const Dataset& data, QuantState state);

/// The quantization state a model is deployed in: quantized for QAT, QAA
/// and PTQ models, full precision otherwise.
QuantState deployed_state(const LayerGraph& model);

}  // namespace qaa
