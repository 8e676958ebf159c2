// qaa: command-line front end. Every subcommand reads an optional JSON
// config (--config); --seed, --out and the per-command flags override it.
// Exit codes: 0 success, 1 validation failure, 2 runtime failure.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

#include "qaa/experiment.hpp"
#include "qaa/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace qaa {
namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

json read_config(const Common& c) {
  if (c.config.empty()) return json::object();
  try {
    return json::parse(read_text(c.config));
  } catch (const json::parse_error& e) {
    throw ValidationError("config '" + c.config + "' is not valid JSON: " + e.what());
  }
}

std::string require_out(const Common& c) {
  if (c.out.empty()) throw ValidationError("--out is required");
  return c.out;
}

template <class T>
T field(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

// {"kind": "synthetic", <synth fields>, "count"} | {"kind": "idx", "images",
// "labels", "classes"} | {"kind": "qaad", "path"}
Dataset load_data(const json& j, std::optional<std::uint64_t> seed) {
  if (j.is_null()) throw ValidationError("config needs a \"data\" section");
  const auto kind = field<std::string>(j, "kind", "synthetic");
  if (kind == "synthetic") {
    SynthConfig s;
    s.classes = field(j, "classes", s.classes);
    s.count = field(j, "count", s.count);
    s.image_size = field(j, "image_size", s.image_size);
    s.channels = field(j, "channels", s.channels);
    s.noise = field(j, "noise", s.noise);
    s.contrast = field(j, "contrast", s.contrast);
    s.bumps = field(j, "bumps", s.bumps);
    s.max_shift = field(j, "max_shift", s.max_shift);
    s.seed = field(j, "seed", s.seed);
    s.pattern_seed = field(j, "pattern_seed", s.pattern_seed);
    if (seed && !j.contains("seed")) s.seed = *seed;
    if (s.classes < 2) throw ValidationError("synthetic data needs at least 2 classes");
    return synth_dataset(s);
  }
  if (kind == "idx")
    return load_idx(j.at("images").get<std::string>(), j.at("labels").get<std::string>(), field<Index>(j, "classes", 0));
  if (kind == "qaad") return load_dataset(j.at("path").get<std::string>());
  throw ValidationError("data kind must be synthetic, idx or qaad");
}

Dataset limit(Dataset d, const json& j) {
  const auto n = field<Index>(j, "examples", 0);
  if (n > 0 && n < d.size()) return d.slice(0, n);
  return d;
}

TrainConfig train_config(const json& j, const char* key, std::optional<std::uint64_t> seed) {
  TrainConfig c = j.contains(key) ? j.at(key).get<TrainConfig>() : TrainConfig{};
  if (seed) c.seed = *seed;
  return c;
}

QaaVariant variant_from(const std::string& v) {
  if (v == "qat") return QaaVariant::qat;
  if (v == "ptq") return QaaVariant::ptq;
  throw ValidationError("variant must be qat or ptq");
}

void report_written(const std::string& what, const std::string& path) {
  std::cerr << what << " -> " << path << '\n';
}

int cmd_train(const Common& c, const std::string& arch_flag, std::optional<int> epochs) {
  auto j = read_config(c);
  const auto data = load_data(j.value("data", json()), c.seed);
  const auto arch = arch_flag.empty() ? field<std::string>(j, "architecture", "convnet-a") : arch_flag;
  auto cfg = train_config(j, "train", c.seed);
  if (epochs) cfg.epochs = *epochs;
  const auto m = train_standard(arch, data, cfg);
  save_model(m, require_out(c));
  std::cout << "accuracy " << accuracy(m, data, QuantState::full()) << '\n';
  report_written("model", c.out);
  return 0;
}

int cmd_qat(const Common& c, const std::string& arch_flag, std::optional<int> bits, const std::string& init_flag) {
  auto j = read_config(c);
  const auto data = load_data(j.value("data", json()), c.seed);
  const auto arch = arch_flag.empty() ? field<std::string>(j, "architecture", "convnet-a") : arch_flag;
  auto cfg = train_config(j, "qat", c.seed);
  cfg.bitwidth = bits ? *bits : field(j, "bitwidth", cfg.bitwidth);
  const auto init_path = init_flag.empty() ? field<std::string>(j, "init", "") : init_flag;
  std::optional<LayerGraph> init;
  if (!init_path.empty()) init = load_model(init_path);
  const auto m = qat_train(arch, data, cfg, init ? &*init : nullptr);
  save_model(m, require_out(c));
  std::cout << "accuracy " << accuracy(m, data, deployed_state(m)) << '\n';
  report_written("model", c.out);
  return 0;
}

int cmd_finetune(const Common& c, const std::string& model_flag) {
  auto j = read_config(c);
  const auto data = load_data(j.value("data", json()), c.seed);
  const auto qnn = load_model(model_flag.empty() ? j.at("model").get<std::string>() : model_flag);
  const auto cfg = train_config(j, "finetune", c.seed);
  CheckpointCollection ck;
  const auto m = finetune_qaa(qnn, data, cfg, &ck);
  const auto out = require_out(c);
  save_model(m, out);
  const auto stem = fs::path(out).replace_extension().string();
  for (std::size_t k = 0; k < ck.snapshots.size(); ++k)
    save_model(ck.snapshots[k], stem + ".ckpt" + std::to_string(k) + ".qaam");
  std::cout << "accuracy " << accuracy(m, data, deployed_state(m)) << " checkpoints " << ck.snapshots.size() << '\n';
  report_written("model", out);
  return 0;
}

int cmd_ptq(const Common& c, const std::string& model_flag, std::optional<int> bits) {
  auto j = read_config(c);
  const auto data = load_data(j.value("data", json()), c.seed);
  const auto m32 = load_model(model_flag.empty() ? j.at("model").get<std::string>() : model_flag);
  const int q = bits ? *bits : field(j, "bitwidth", 4);
  const auto method = calibration_method_from_string(field<std::string>(j, "method", "mse"));
  const auto m = ptq_quantize(m32, data, q, method, field<Index>(j, "samples", kDefaultCalibrationSamples));
  save_model(m, require_out(c));
  std::cout << "accuracy " << accuracy(m, data, deployed_state(m)) << '\n';
  report_written("model", c.out);
  return 0;
}

int cmd_advtrain(const Common& c, const std::string& arch_flag) {
  auto j = read_config(c);
  const auto data = load_data(j.value("data", json()), c.seed);
  const auto arch = arch_flag.empty() ? field<std::string>(j, "architecture", "convnet-a") : arch_flag;
  const auto cfg = train_config(j, "train", c.seed);
  AttackSpec spec{.family = AttackFamily::pgd, .epsilon = 8.0 / 255.0, .iterations = 3};
  if (j.contains("attack")) spec = j.at("attack").get<AttackSpec>();
  if (c.seed) spec.seed = *c.seed;
  const auto m = adv_train(arch, data, cfg, spec);
  save_model(m, require_out(c));
  std::cout << "accuracy " << accuracy(m, data, QuantState::full()) << '\n';
  report_written("model", c.out);
  return 0;
}

int cmd_attack(const Common& c, const std::vector<std::string>& model_flags, const std::string& state_flag) {
  auto j = read_config(c);
  const auto data = limit(load_data(j.value("data", json()), std::nullopt), j);
  std::vector<std::string> paths = model_flags;
  if (paths.empty()) paths = field<std::vector<std::string>>(j, "models", {});
  if (paths.empty()) throw ValidationError("attack needs at least one substitute model");
  std::vector<LayerGraph> models;
  for (const auto& p : paths) models.push_back(load_model(p));
  AttackSpec spec = j.contains("attack") ? j.at("attack").get<AttackSpec>() : AttackSpec{};
  if (c.seed) spec.seed = *c.seed;
  const auto state = state_flag.empty() ? field<std::string>(j, "state", "deployed") : state_flag;
  std::vector<Substitute> members;
  for (const auto& m : models) members.push_back({&m, resolve_state(state, m)});
  AdversarialSet adv;
  if (spec.family == AttackFamily::ensemble) {
    adv = ensemble_attack(members, data.images, data.labels, spec);
  } else {
    if (members.size() != 1) throw ValidationError("only ensemble attacks take several models");
    if (spec.family == AttackFamily::pgd)
      adv = pgd(models[0], data.images, data.labels, spec, members[0].state);
    else if (spec.family == AttackFamily::mim)
      adv = mim(models[0], data.images, data.labels, spec, members[0].state);
    else
      adv = qaa_attack(models[0], data.images, data.labels, spec, variant_from(field<std::string>(j, "variant", "qat")));
  }
  save_adversarial(adv, require_out(c));
  std::cout << "examples " << adv.size() << " max_linf " << adv.max_linf() << '\n';
  report_written("adversarial set", c.out);
  return 0;
}

struct LoadedTargets {
  std::vector<LayerGraph> models;
  std::vector<TargetSpec> specs;
};

// [{"id", "model": path, "state"}]
LoadedTargets load_targets(const json& j) {
  LoadedTargets t;
  if (!j.is_array() || j.empty()) throw ValidationError("config needs a non-empty \"targets\" list");
  t.models.reserve(j.size());
  for (const auto& e : j) t.models.push_back(load_model(e.at("model").get<std::string>()));
  for (std::size_t i = 0; i < j.size(); ++i)
    t.specs.push_back({field<std::string>(j[i], "id", j[i].at("model").get<std::string>()), &t.models[i],
                       resolve_state(field<std::string>(j[i], "state", "deployed"), t.models[i])});
  return t;
}

int cmd_evaluate(const Common& c, const std::string& adv_flag) {
  auto j = read_config(c);
  const auto adv = load_adversarial(adv_flag.empty() ? j.at("adversarial").get<std::string>() : adv_flag);
  const auto targets = load_targets(j.value("targets", json()));
  TransferEvaluator ev(targets.specs, adv.clean, adv.labels);
  ev.add(field<std::string>(j, "substitute", "substitute"), field<std::string>(j, "attack", to_string(adv.spec.family)),
         field(j, "bitwidth", 32), adv);
  ev.report().validate();
  const fs::path out = require_out(c);
  fs::create_directories(out);
  write_text((out / "report.csv").string(), ev.report().to_csv());
  write_text((out / "cells.jsonl").string(), ev.report().cells_jsonl());
  write_text((out / "clean_accuracy.csv").string(), ev.report().clean_csv());
  std::cout << ev.report().to_csv();
  report_written("report", out.string());
  return 0;
}

int cmd_diagnose(const Common& c, const std::string& adv_flag) {
  auto j = read_config(c);
  const auto adv = load_adversarial(adv_flag.empty() ? j.at("adversarial").get<std::string>() : adv_flag);
  const auto targets = load_targets(j.value("targets", json()));
  const auto& sj = j.at("substitute");
  const auto sub = load_model(sj.at("model").get<std::string>());
  std::vector<QuantState> states;
  for (const auto& s : field<std::vector<std::string>>(sj, "states", {field<std::string>(sj, "state", "deployed")}))
    states.push_back(resolve_state(s, sub));
  std::vector<Substitute> members;
  for (auto s : states) members.push_back({&sub, s});
  const auto label = field<std::string>(sj, "label", "substitute");

  TransferReport rep;
  const Index n = std::min(field<Index>(j, "examples", 256), adv.size());
  const auto x = adv.clean.slice(0, n), xa = adv.adversarial.slice(0, n);
  const std::vector<int> y(adv.labels.begin(), adv.labels.begin() + n);
  auto push = [&](std::string kind, std::string target, std::string param, double v, Index undefined) {
    rep.diagnostics.push_back({std::move(kind), label, "", std::move(target), std::move(param), v, n, undefined});
  };
  for (const auto& t : targets.specs) {
    for (Index k = 0; k < t.model->tap_count(); ++k) {
      try {
        const auto m = feature_divergence(*t.model, t.state, x, xa, k);
        push("feature_divergence", t.id, "tap=" + std::to_string(k), m.mean, m.undefined);
      } catch (const UndefinedMetric&) {
        push("feature_divergence", t.id, "tap=" + std::to_string(k), std::nan(""), n);
      }
    }
    try {
      const auto m = gradient_similarity({t.model, t.state}, members, x, y);
      push("gradient_similarity", t.id, "", m.mean, m.undefined);
    } catch (const UndefinedMetric&) {
      push("gradient_similarity", t.id, "", std::nan(""), n);
    }
  }
  SharpnessConfig sc;
  sc.iterations = field(j, "sharpness_iterations", sc.iterations);
  for (double eps : field<std::vector<double>>(j, "sharpness_epsilons", {5e-4, 1e-3})) {
    sc.epsilon = eps;
    push("sharpness_weight", "", "eps=" + format_number(eps), sharpness_weight(sub, states, x, y, sc).phi, 0);
    push("sharpness_feature", "", "eps=" + format_number(eps), sharpness_feature(sub, states, xa, y, sc).phi, 0);
  }
  const fs::path out = require_out(c);
  fs::create_directories(out);
  write_text((out / "diagnostics.csv").string(), rep.diagnostics_csv());
  write_text((out / "diagnostics.jsonl").string(), rep.diagnostics_jsonl());
  std::cout << rep.diagnostics_csv();
  report_written("diagnostics", out.string());
  return 0;
}

int cmd_experiment(const Common& c, const std::string& reuse, bool quiet) {
  auto j = read_config(c);
  auto cfg = j.get<ExperimentConfig>();
  if (c.seed) cfg.seeds = {*c.seed};
  RunOptions opt;
  opt.output_dir = require_out(c);
  opt.reuse_models = reuse;
  if (!quiet) opt.progress = [](const std::string& m) { std::cerr << m << '\n'; };
  const auto res = run_experiment(cfg, opt);
  for (const auto& r : res.runs) std::cout << "seed " << r.seed << '\n' << r.report.to_csv();
  report_written("manifest", (fs::path(opt.output_dir) / "manifest.json").string());
  return 0;
}

int cmd_report(const Common& c, const std::string& run_flag) {
  auto j = read_config(c);
  const fs::path run = run_flag.empty() ? fs::path(j.at("run").get<std::string>()) : fs::path(run_flag);
  const auto manifest = json::parse(read_text((run / "manifest.json").string()));
  std::vector<TransferReport> reports;
  for (const auto& r : manifest.at("runs")) {
    const auto dir = run / r.at("directory").get<std::string>();
    reports.push_back(read_cells_jsonl(read_text((dir / "cells.jsonl").string())));
  }
  if (reports.empty()) throw ValidationError("run '" + run.string() + "' has no completed seeds");
  const auto pooled = pool_reports(reports);
  pooled.validate();
  if (c.out.empty()) {
    std::cout << pooled.to_csv();
  } else {
    write_text(c.out, pooled.to_csv());
    report_written("pooled report", c.out);
  }
  return 0;
}

}  // namespace
}  // namespace qaa

int main(int argc, char** argv) {
  using namespace qaa;
  CLI::App app{"Quantization aware attack laboratory"};
  app.require_subcommand(1);
  Common common;
  std::string arch, model, init, adv_path, state, run, reuse;
  std::vector<std::string> models;
  std::optional<int> epochs, bits;
  bool quiet = false;

  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", common.config, "JSON config file");
    s->add_option("--seed", common.seed, "seed override");
    s->add_option("--out", common.out, "output path");
  };
  auto* train = app.add_subcommand("train", "full-precision training");
  auto* qat = app.add_subcommand("qat", "quantization-aware training");
  auto* ft = app.add_subcommand("finetune-qaa", "alternating QAA fine-tune of a QAT model");
  auto* ptq = app.add_subcommand("ptq", "post-training quantization");
  auto* adv = app.add_subcommand("advtrain", "PGD adversarial training");
  auto* atk = app.add_subcommand("attack", "craft an adversarial set");
  auto* ev = app.add_subcommand("evaluate", "transfer report for an adversarial set");
  auto* dg = app.add_subcommand("diagnose", "divergence, similarity and sharpness");
  auto* ex = app.add_subcommand("experiment", "full zoo, attack grid and diagnostics");
  auto* rp = app.add_subcommand("report", "pool the per-seed reports of a run");
  for (auto* s : {train, qat, ft, ptq, adv, atk, ev, dg, ex, rp}) add_common(s);
  for (auto* s : {train, qat, adv}) s->add_option("--arch", arch, "architecture id");
  train->add_option("--epochs", epochs);
  qat->add_option("--bitwidth", bits);
  qat->add_option("--init", init, "32-bit starting model");
  ptq->add_option("--bitwidth", bits);
  for (auto* s : {ft, ptq}) s->add_option("--model", model, "input model");
  atk->add_option("--model", models, "substitute model(s)");
  atk->add_option("--state", state, "deployed, full, quantized or weights-only");
  for (auto* s : {ev, dg}) s->add_option("--adversarial", adv_path, "adversarial set");
  ex->add_option("--reuse-models", reuse, "earlier run directory to load zoo models from");
  ex->add_flag("--quiet", quiet, "no progress output");
  rp->add_option("--run", run, "experiment output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(common, arch, epochs);
    if (*qat) return cmd_qat(common, arch, bits, init);
    if (*ft) return cmd_finetune(common, model);
    if (*ptq) return cmd_ptq(common, model, bits);
    if (*adv) return cmd_advtrain(common, arch);
    if (*atk) return cmd_attack(common, models, state);
    if (*ev) return cmd_evaluate(common, adv_path);
    if (*dg) return cmd_diagnose(common, adv_path);
    if (*ex) return cmd_experiment(common, reuse, quiet);
    if (*rp) return cmd_report(common, run);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.is_validation() ? 1 : 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad config: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
