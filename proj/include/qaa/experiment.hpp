#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qaa/attacks.hpp"
#include "qaa/dataset.hpp"
#include "qaa/diagnostics.hpp"
#include "qaa/report.hpp"
#include "qaa/training.hpp"

namespace qaa {

inline constexpr int kExperimentSchemaVersion = 1;

/// Where the data comes from. Synthetic splits are drawn per run seed
/// (train seed synth.seed + 2s, test seed synth.seed + 2s + 1) from the
/// shared pattern_seed; IDX files are read once and reused for every seed.
struct DataSourceConfig {
  std::string kind = "synthetic";  // "synthetic" or "idx"
  SynthConfig synth;
  Index train_count = 10000;
  Index test_count = 2000;
  std::string train_images, train_labels, test_images, test_labels;  // idx; synth.classes applies

  void validate() const;
};

/// One substitute row of the attack grid.
///   models: zoo ids, e.g. "convnet-a/2", "convnet-a/qaa", "convnet-a/ptq4",
///           "convnet-a/adv"; "convnet-a/qaa-ckpts" expands to the checkpoint
///           collection of the QAA fine-tune. More than one member requires an
///           ensemble attack.
///   state:  "deployed", "full", "quantized" or "weights-only".
///   attack: key into ExperimentConfig::attacks.
struct SubstituteConfig {
  std::string label;  // derived from models and state when empty
  std::vector<std::string> models;
  std::string state = "deployed";
  std::string attack;
  QaaVariant variant = QaaVariant::qat;

  std::string resolved_label() const;
};

struct DiagnosticsConfig {
  bool feature_divergence = true;
  bool gradient_similarity = true;
  bool sharpness = true;
  bool distance_matrix = true;
  Index examples = 256;            // clean/adversarial examples for divergence and similarity
  Index sharpness_examples = 128;
  std::vector<double> sharpness_epsilons{5e-4, 1e-3};
  int sharpness_iterations = 20;
};

/// A complete experiment. Every seed is explicit; each seed produces one
/// zoo, one attack grid and one report directory.
struct ExperimentConfig {
  int schema_version = kExperimentSchemaVersion;
  std::string name = "experiment";
  std::vector<std::uint64_t> seeds{0};
  DataSourceConfig dataset;
  std::vector<std::string> architectures{"convnet-a", "convnet-b"};
  std::vector<int> bitwidths{32, 8, 4, 3, 2};
  TrainConfig train;     // full precision; also the QAT starting point
  TrainConfig qat;       // bitwidth field ignored
  bool qaa = true;       // fine-tune "<arch>/qaa" from "<arch>/<qaa_bitwidth>"
  int qaa_bitwidth = 2;
  TrainConfig finetune;
  std::vector<int> ptq_bitwidths;
  CalibrationMethod ptq_method = CalibrationMethod::mse;
  Index ptq_samples = kDefaultCalibrationSamples;
  bool adversarial_training = false;
  TrainConfig adv_train;
  AttackSpec adv_attack{.family = AttackFamily::pgd, .epsilon = 8.0 / 255.0, .iterations = 3};
  std::map<std::string, AttackSpec> attacks;
  std::vector<SubstituteConfig> substitutes;
  std::vector<std::string> targets{"*"};  // "*" = every zoo bitwidth model plus PTQ and adversarial models
  Index eval_examples = 1000;
  DiagnosticsConfig diagnostics;
  bool save_adversarial = false;

  /// Default attack grid ({mim, qaa}) and substitute rows for each
  /// architecture: 32-bit and QAA-bitwidth models under every non-qaa attack,
  /// the QAA model under qaa attacks and in its two fixed states.
  static ExperimentConfig with_defaults();

  void validate() const;
};

void to_json(nlohmann::json& j, const SubstituteConfig& s);
void from_json(const nlohmann::json& j, SubstituteConfig& s);
void to_json(nlohmann::json& j, const DiagnosticsConfig& d);
void from_json(const nlohmann::json& j, DiagnosticsConfig& d);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Absent keys keep their defaults; a missing "substitutes" key is filled
/// with the default rows for the configured attacks. A manifest document is
/// accepted too (its embedded config is used).
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_experiment_config(const std::string& path);

struct RunOptions {
  std::string output_dir;
  /// Earlier run directory; zoo models found there are loaded instead of
  /// retrained.
  std::string reuse_models;
  std::function<void(const std::string&)> progress;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::string directory;
  TransferReport report;
  DistanceMatrix distances;
};

struct ExperimentResult {
  std::vector<SeedResult> runs;
  nlohmann::json manifest;
};

/// Builds the zoo, runs the attack grid and the diagnostics for every seed
/// and writes, per seed, report.csv, cells.jsonl, clean_accuracy.csv,
/// diagnostics.csv/.jsonl, training.jsonl, plot tables and model files; then
/// manifest.json and summary.csv at the top level. On failure a manifest
/// with status "failed" and the failing stage is written before the error
/// propagates.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options);

/// Parses "deployed", "full", "quantized", "weights-only".
QuantState resolve_state(const std::string& name, const LayerGraph& model);

}  // namespace qaa
