#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qaa/attacks.hpp"
#include "qaa/model.hpp"

namespace qaa {

/// A target model in the state it is evaluated in.
struct TargetSpec {
  std::string id;
  const LayerGraph* model = nullptr;
  QuantState state;
};

/// One (substitute, attack, target) entry. asr is 100 * successes / correct,
/// taken over the examples the target classifies correctly when clean; it is
/// NaN when that set is empty. raw_rate is the plain misclassification
/// percentage over all examples.
struct TransferCell {
  std::string target;
  Index successes = 0;
  Index correct = 0;
  Index misclassified = 0;
  Index total = 0;
  double asr = 0;
  double raw_rate = 0;
  bool white_box = false;

  bool defined() const;
};

struct TransferRow {
  std::string substitute;
  std::string attack;
  int bitwidth = 32;  // nominal substitute bitwidth
  std::vector<TransferCell> cells;
  double average = 0;  // mean of the defined cells, NaN if none
};

struct CleanAccuracy {
  std::string target;
  int bitwidth = 32;
  std::string state;
  Index correct = 0;
  Index total = 0;
  double accuracy = 0;  // percent
};

/// One diagnostics value. `parameter` carries the tap, epsilon or state that
/// distinguishes otherwise identical records.
struct DiagnosticRecord {
  std::string kind;
  std::string substitute;
  std::string attack;  // empty for substitute-only metrics
  std::string target;
  std::string parameter;
  double value = 0;
  Index count = 0;
  Index undefined = 0;
};

struct TransferReport {
  std::vector<std::string> targets;
  std::vector<CleanAccuracy> clean;
  std::vector<TransferRow> rows;
  std::vector<DiagnosticRecord> diagnostics;

  const TransferRow* find_row(const std::string& substitute, const std::string& attack) const;

  /// Throws Error unless every cell has successes <= correct <= total, rates
  /// in [0, 100] and each row average is the mean of its defined cells.
  void validate() const;

  /// Substitute rows by target columns plus Avg; undefined cells are empty.
  std::string to_csv() const;
  /// One JSON object per cell with all counts.
  std::string cells_jsonl() const;
  std::string clean_csv() const;
  std::string diagnostics_csv() const;
  std::string diagnostics_jsonl() const;
};

/// Scores adversarial sets against a fixed target list. Clean predictions
/// are computed once; every added set must share the clean inputs.
class TransferEvaluator {
 public:
  TransferEvaluator(std::vector<TargetSpec> targets, const Tensor32& x, const std::vector<int>& y);

  void add(const std::string& substitute, const std::string& attack, int bitwidth, const AdversarialSet& adv);

  const TransferReport& report() const { return report_; }
  TransferReport& report() { return report_; }

 private:
  std::vector<TargetSpec> targets_;
  Tensor32 x_;
  std::vector<int> y_;
  std::vector<std::vector<char>> clean_correct_;
  TransferReport report_;
};

/// Single-row convenience form.
TransferReport evaluate_transfer(const AdversarialSet& adv, std::span<const TargetSpec> targets,
                                 const std::string& substitute = "substitute", const std::string& attack = "attack",
                                 int bitwidth = 32);

/// Sums the counts of matching cells across runs; rows and targets must
/// agree. Rates are recomputed from the pooled counts.
TransferReport pool_reports(const std::vector<TransferReport>& reports);

/// Rebuilds report rows (not clean accuracies or diagnostics) from
/// cells.jsonl text.
TransferReport read_cells_jsonl(const std::string& text);

/// Fixed-precision rendering used by every report file so that reruns are
/// byte-identical.
std::string format_number(double v);

}  // namespace qaa
