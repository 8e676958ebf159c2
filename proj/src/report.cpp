#include "qaa/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "qaa/training.hpp"

namespace qaa {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string csv_cell(double v) { return std::isnan(v) ? "" : format_number(v); }

nlohmann::json json_number(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

// "<model>@<state>" labels a model run in a non-default state.
bool same_model(const std::string& substitute, const std::string& target) {
  return substitute == target || substitute.rfind(target + "@", 0) == 0;
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

bool TransferCell::defined() const { return correct > 0; }

const TransferRow* TransferReport::find_row(const std::string& substitute, const std::string& attack) const {
  for (const auto& r : rows)
    if (r.substitute == substitute && r.attack == attack) return &r;
  return nullptr;
}

void TransferReport::validate() const {
  for (const auto& r : rows) {
    if (r.cells.size() != targets.size()) throw Error("row '" + r.substitute + "' has the wrong number of cells");
    double sum = 0;
    int n = 0;
    for (const auto& c : r.cells) {
      if (c.successes > c.correct || c.correct > c.total || c.misclassified > c.total)
        throw Error("inconsistent counts in cell " + r.substitute + " -> " + c.target);
      if (c.defined()) {
        if (!(c.asr >= 0 && c.asr <= 100)) throw Error("ASR outside [0, 100] in cell " + c.target);
        sum += c.asr;
        ++n;
      } else if (!std::isnan(c.asr)) {
        throw Error("undefined cell carries a rate");
      }
      if (!(c.raw_rate >= 0 && c.raw_rate <= 100)) throw Error("raw rate outside [0, 100]");
    }
    const double avg = n ? sum / n : kNaN;
    if (!(avg == r.average || (std::isnan(avg) && std::isnan(r.average))))
      throw Error("row average of '" + r.substitute + "' is not the mean of its cells");
  }
}

std::string TransferReport::to_csv() const {
  std::ostringstream os;
  os << "substitute,attack,bitwidth";
  for (const auto& t : targets) os << ',' << t;
  os << ",Avg,white_box\n";
  for (const auto& r : rows) {
    os << r.substitute << ',' << r.attack << ',' << r.bitwidth;
    std::string wb;
    for (const auto& c : r.cells) {
      os << ',' << csv_cell(c.asr);
      if (c.white_box) wb += (wb.empty() ? "" : ";") + c.target;
    }
    os << ',' << csv_cell(r.average) << ',' << wb << '\n';
  }
  return os.str();
}

std::string TransferReport::cells_jsonl() const {
  std::ostringstream os;
  for (const auto& r : rows)
    for (const auto& c : r.cells) {
      const nlohmann::json j = {{"substitute", r.substitute}, {"attack", r.attack},
                                {"bitwidth", r.bitwidth},     {"target", c.target},
                                {"successes", c.successes},   {"correct", c.correct},
                                {"misclassified", c.misclassified}, {"total", c.total},
                                {"asr", json_number(c.asr)},  {"raw_rate", c.raw_rate},
                                {"white_box", c.white_box}};
      os << j.dump() << '\n';
    }
  return os.str();
}

std::string TransferReport::clean_csv() const {
  std::ostringstream os;
  os << "target,bitwidth,state,correct,total,accuracy\n";
  for (const auto& c : clean)
    os << c.target << ',' << c.bitwidth << ',' << c.state << ',' << c.correct << ',' << c.total << ','
       << format_number(c.accuracy) << '\n';
  return os.str();
}

std::string TransferReport::diagnostics_csv() const {
  std::ostringstream os;
  os << "kind,substitute,attack,target,parameter,value,count,undefined\n";
  for (const auto& d : diagnostics)
    os << d.kind << ',' << d.substitute << ',' << d.attack << ',' << d.target << ',' << d.parameter << ',' << csv_cell(d.value) << ','
       << d.count << ',' << d.undefined << '\n';
  return os.str();
}

std::string TransferReport::diagnostics_jsonl() const {
  std::ostringstream os;
  for (const auto& d : diagnostics) {
    const nlohmann::json j = {{"kind", d.kind},           {"substitute", d.substitute},
                              {"attack", d.attack},       {"target", d.target},       {"parameter", d.parameter},
                              {"value", json_number(d.value)}, {"count", d.count},
                              {"undefined", d.undefined}};
    os << j.dump() << '\n';
  }
  return os.str();
}

TransferEvaluator::TransferEvaluator(std::vector<TargetSpec> targets, const Tensor32& x, const std::vector<int>& y)
    : targets_(std::move(targets)), x_(x), y_(y) {
  if (x_.empty() || x_.batch() != static_cast<Index>(y_.size()))
    throw ValidationError("evaluation inputs and labels must be non-empty and of equal length");
  for (const auto& t : targets_) {
    if (!t.model) throw ValidationError("target '" + t.id + "' has no model");
    const Shape per(x_.shape().begin() + 1, x_.shape().end());
    if (t.model->input_shape != per)
      throw ShapeError(t.id, "target expects " + shape_string(t.model->input_shape) + ", inputs are " +
                                 shape_string(per));
    const auto pred = predict(*t.model, x_, t.state);
    std::vector<char> ok(y_.size());
    Index correct = 0;
    for (std::size_t i = 0; i < y_.size(); ++i) correct += ok[i] = pred[i] == y_[i];
    clean_correct_.push_back(std::move(ok));
    report_.targets.push_back(t.id);
    report_.clean.push_back({t.id, t.model->nominal_bitwidth(), to_string(t.state), correct, x_.batch(),
                             100.0 * static_cast<double>(correct) / static_cast<double>(x_.batch())});
  }
}

void TransferEvaluator::add(const std::string& substitute, const std::string& attack, int bitwidth,
                            const AdversarialSet& adv) {
  if (adv.clean != x_ || adv.labels != y_)
    throw ValidationError("adversarial set from '" + substitute + "' was built on different clean inputs");
  TransferRow row{substitute, attack, bitwidth, {}, kNaN};
  double sum = 0;
  int n = 0;
  for (std::size_t t = 0; t < targets_.size(); ++t) {
    const auto pred = predict(*targets_[t].model, adv.adversarial, targets_[t].state);
    TransferCell c;
    c.target = targets_[t].id;
    c.total = adv.size();
    for (std::size_t i = 0; i < y_.size(); ++i) {
      const bool wrong = pred[i] != y_[i];
      c.misclassified += wrong;
      if (clean_correct_[t][i]) {
        ++c.correct;
        c.successes += wrong;
      }
    }
    c.asr = c.defined() ? 100.0 * static_cast<double>(c.successes) / static_cast<double>(c.correct) : kNaN;
    c.raw_rate = 100.0 * static_cast<double>(c.misclassified) / static_cast<double>(c.total);
    c.white_box = same_model(substitute, c.target);
    if (c.defined()) {
      sum += c.asr;
      ++n;
    }
    row.cells.push_back(std::move(c));
  }
  if (n) row.average = sum / n;
  report_.rows.push_back(std::move(row));
}

TransferReport evaluate_transfer(const AdversarialSet& adv, std::span<const TargetSpec> targets,
                                 const std::string& substitute, const std::string& attack, int bitwidth) {
  TransferEvaluator ev({targets.begin(), targets.end()}, adv.clean, adv.labels);
  ev.add(substitute, attack, bitwidth, adv);
  return ev.report();
}

namespace {

void finish_row(TransferRow& row) {
  double sum = 0;
  int n = 0;
  for (auto& c : row.cells) {
    c.asr = c.defined() ? 100.0 * static_cast<double>(c.successes) / static_cast<double>(c.correct) : kNaN;
    c.raw_rate = c.total ? 100.0 * static_cast<double>(c.misclassified) / static_cast<double>(c.total) : 0.0;
    if (c.defined()) {
      sum += c.asr;
      ++n;
    }
  }
  row.average = n ? sum / n : kNaN;
}

}  // namespace

TransferReport pool_reports(const std::vector<TransferReport>& reports) {
  if (reports.empty()) throw ValidationError("nothing to pool");
  TransferReport out;
  out.targets = reports[0].targets;
  out.rows = reports[0].rows;
  for (std::size_t k = 1; k < reports.size(); ++k) {
    const auto& r = reports[k];
    if (r.targets != out.targets || r.rows.size() != out.rows.size())
      throw ValidationError("reports to pool have different targets or rows");
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
      auto& dst = out.rows[i];
      if (r.rows[i].substitute != dst.substitute || r.rows[i].attack != dst.attack)
        throw ValidationError("reports to pool have different rows");
      for (std::size_t t = 0; t < dst.cells.size(); ++t) {
        const auto& c = r.rows[i].cells[t];
        dst.cells[t].successes += c.successes;
        dst.cells[t].correct += c.correct;
        dst.cells[t].misclassified += c.misclassified;
        dst.cells[t].total += c.total;
      }
    }
  }
  for (auto& row : out.rows) finish_row(row);
  return out;
}

TransferReport read_cells_jsonl(const std::string& text) {
  TransferReport out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto sub = j.at("substitute").get<std::string>(), attack = j.at("attack").get<std::string>();
    const auto target = j.at("target").get<std::string>();
    if (std::find(out.targets.begin(), out.targets.end(), target) == out.targets.end()) out.targets.push_back(target);
    if (out.rows.empty() || out.rows.back().substitute != sub || out.rows.back().attack != attack)
      out.rows.push_back({sub, attack, j.at("bitwidth").get<int>(), {}, kNaN});
    TransferCell c;
    c.target = target;
    c.successes = j.at("successes").get<Index>();
    c.correct = j.at("correct").get<Index>();
    c.misclassified = j.at("misclassified").get<Index>();
    c.total = j.at("total").get<Index>();
    c.white_box = j.at("white_box").get<bool>();
    out.rows.back().cells.push_back(std::move(c));
  }
  for (auto& row : out.rows) finish_row(row);
  return out;
}

}  // namespace qaa
