#include "qaa/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

#include "qaa/io.hpp"

namespace qaa {

namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <class T>
void get(const nlohmann::json& j, const char* key, T& v) {
  if (j.contains(key)) j.at(key).get_to(v);
}

const char* method_name(CalibrationMethod m) { return m == CalibrationMethod::mse ? "mse" : "minmax"; }

bool valid_bitwidth(int q) { return (q >= 1 && q <= 8) || q == kPassthroughBits; }

std::string arch_of(const std::string& id) { return id.substr(0, id.find('/')); }

std::string file_stem(const std::string& id) {
  std::string f = id;
  std::replace(f.begin(), f.end(), '/', '_');
  std::replace(f.begin(), f.end(), '@', '_');
  std::replace(f.begin(), f.end(), '+', '_');
  return f;
}

std::string checkpoint_id(const std::string& arch, std::size_t k) {
  return arch + "/qaa-ckpt" + std::to_string(k);
}

// Every id a substitute may name, in build order.
std::vector<std::string> zoo_ids(const ExperimentConfig& c) {
  std::vector<std::string> ids;
  for (const auto& a : c.architectures) {
    ids.push_back(a + "/32");
    for (int q : c.bitwidths)
      if (q != kPassthroughBits) ids.push_back(a + "/" + std::to_string(q));
    if (c.qaa) {
      ids.push_back(a + "/qaa");
      if (c.finetune.checkpoints > 0) ids.push_back(a + "/qaa-ckpts");
    }
    for (int q : c.ptq_bitwidths) ids.push_back(a + "/ptq" + std::to_string(q));
    if (c.adversarial_training) ids.push_back(a + "/adv");
  }
  return ids;
}

std::vector<std::string> expand_targets(const ExperimentConfig& c) {
  std::vector<std::string> out;
  for (const auto& t : c.targets) {
    if (t != "*") {
      out.push_back(t);
      continue;
    }
    for (const auto& a : c.architectures) {
      for (int q : c.bitwidths) out.push_back(a + "/" + std::to_string(q));
      for (int q : c.ptq_bitwidths) out.push_back(a + "/ptq" + std::to_string(q));
      if (c.adversarial_training) out.push_back(a + "/adv");
    }
  }
  return out;
}

std::vector<SubstituteConfig> default_substitutes(const ExperimentConfig& c) {
  std::vector<SubstituteConfig> out;
  const bool has_q = c.qaa_bitwidth != kPassthroughBits &&
                     std::find(c.bitwidths.begin(), c.bitwidths.end(), c.qaa_bitwidth) != c.bitwidths.end();
  for (const auto& a : c.architectures) {
    const std::string q = a + "/" + std::to_string(c.qaa_bitwidth);
    for (const auto& [name, spec] : c.attacks) {
      if (spec.family == AttackFamily::qaa || spec.family == AttackFamily::ensemble) continue;
      out.push_back({"", {a + "/32"}, "deployed", name, QaaVariant::qat});
      if (has_q) out.push_back({"", {q}, "deployed", name, QaaVariant::qat});
      if (c.qaa && has_q) {
        out.push_back({"", {a + "/qaa"}, "weights-only", name, QaaVariant::qat});
        out.push_back({"", {a + "/qaa"}, "quantized", name, QaaVariant::qat});
      }
    }
    if (c.qaa && has_q)
      for (const auto& [name, spec] : c.attacks)
        if (spec.family == AttackFamily::qaa) out.push_back({"", {a + "/qaa"}, "deployed", name, QaaVariant::qat});
  }
  return out;
}

void synth_to_json(nlohmann::json& j, const SynthConfig& s) {
  j["classes"] = s.classes;
  j["image_size"] = s.image_size;
  j["channels"] = s.channels;
  j["noise"] = s.noise;
  j["contrast"] = s.contrast;
  j["bumps"] = s.bumps;
  j["max_shift"] = s.max_shift;
  j["seed"] = s.seed;
  j["pattern_seed"] = s.pattern_seed;
}

void synth_from_json(const nlohmann::json& j, SynthConfig& s) {
  get(j, "classes", s.classes);
  get(j, "image_size", s.image_size);
  get(j, "channels", s.channels);
  get(j, "noise", s.noise);
  get(j, "contrast", s.contrast);
  get(j, "bumps", s.bumps);
  get(j, "max_shift", s.max_shift);
  get(j, "seed", s.seed);
  get(j, "pattern_seed", s.pattern_seed);
}

}  // namespace

void to_json(nlohmann::json& j, const SubstituteConfig& s) {
  j = {{"label", s.resolved_label()},
       {"models", s.models},
       {"state", s.state},
       {"attack", s.attack},
       {"variant", to_string(s.variant)}};
}

void from_json(const nlohmann::json& j, SubstituteConfig& s) {
  get(j, "label", s.label);
  if (j.contains("model")) s.models = {j.at("model").get<std::string>()};
  get(j, "models", s.models);
  get(j, "state", s.state);
  get(j, "attack", s.attack);
  if (j.contains("variant")) {
    const auto v = j.at("variant").get<std::string>();
    if (v == "qat")
      s.variant = QaaVariant::qat;
    else if (v == "ptq")
      s.variant = QaaVariant::ptq;
    else
      throw ValidationError("unknown qaa variant '" + v + "'");
  }
}

void to_json(nlohmann::json& j, const DiagnosticsConfig& d) {
  j = {{"feature_divergence", d.feature_divergence},
       {"gradient_similarity", d.gradient_similarity},
       {"sharpness", d.sharpness},
       {"distance_matrix", d.distance_matrix},
       {"examples", d.examples},
       {"sharpness_examples", d.sharpness_examples},
       {"sharpness_epsilons", d.sharpness_epsilons},
       {"sharpness_iterations", d.sharpness_iterations}};
}

void from_json(const nlohmann::json& j, DiagnosticsConfig& d) {
  get(j, "feature_divergence", d.feature_divergence);
  get(j, "gradient_similarity", d.gradient_similarity);
  get(j, "sharpness", d.sharpness);
  get(j, "distance_matrix", d.distance_matrix);
  get(j, "examples", d.examples);
  get(j, "sharpness_examples", d.sharpness_examples);
  get(j, "sharpness_epsilons", d.sharpness_epsilons);
  get(j, "sharpness_iterations", d.sharpness_iterations);
}

std::string SubstituteConfig::resolved_label() const {
  if (!label.empty()) return label;
  std::string l;
  for (const auto& m : models) l += (l.empty() ? "" : "+") + m;
  if (state != "deployed") l += "@" + state;
  return l;
}

QuantState resolve_state(const std::string& name, const LayerGraph& model) {
  if (name == "deployed") return deployed_state(model);
  if (name == "full") return QuantState::full();
  if (name != "quantized" && name != "weights-only") throw ValidationError("unknown quantization state '" + name + "'");
  if (!model.any_quantizer())
    throw ValidationError("state '" + name + "' needs a quantized model, '" + model.architecture_id + "' has none");
  return name == "quantized" ? QuantState::quantized() : QuantState::weights_only();
}

void DataSourceConfig::validate() const {
  if (kind == "synthetic") {
    if (synth.classes < 2) throw ValidationError("synthetic data needs at least 2 classes");
    if (train_count < 1 || test_count < 1) throw ValidationError("train_count and test_count must be positive");
    if (synth.image_size < 4 || synth.channels < 1) throw ValidationError("synthetic images must be at least 4x4");
    if (!(synth.noise >= 0)) throw ValidationError("synthetic noise must be non-negative");
  } else if (kind == "idx") {
    for (const auto* p : {&train_images, &train_labels, &test_images, &test_labels}) {
      if (p->empty()) throw ValidationError("idx data needs train/test image and label paths");
      if (!fs::exists(*p)) throw ValidationError("data file '" + *p + "' does not exist");
    }
  } else {
    throw ValidationError("dataset kind must be 'synthetic' or 'idx', got '" + kind + "'");
  }
}

ExperimentConfig ExperimentConfig::with_defaults() { return nlohmann::json::object().get<ExperimentConfig>(); }

void ExperimentConfig::validate() const {
  if (schema_version != kExperimentSchemaVersion)
    throw ValidationError("unsupported schema_version " + std::to_string(schema_version));
  if (seeds.empty()) throw ValidationError("at least one explicit seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ValidationError("seeds must be distinct");
  dataset.validate();
  if (architectures.empty()) throw ValidationError("no architectures configured");
  for (const auto& a : architectures)
    if (a != "convnet-a" && a != "convnet-b" && a != "mlp-3") throw ValidationError("unknown architecture '" + a + "'");
  if (std::set<std::string>(architectures.begin(), architectures.end()).size() != architectures.size())
    throw ValidationError("architectures must be distinct");
  if (bitwidths.empty()) throw ValidationError("no bitwidths configured");
  for (int q : bitwidths)
    if (!valid_bitwidth(q)) throw ValidationError("bitwidth must be in [1, 8] or 32, got " + std::to_string(q));
  if (std::set<int>(bitwidths.begin(), bitwidths.end()).size() != bitwidths.size())
    throw ValidationError("bitwidths must be distinct");
  train.validate();
  if (train.bitwidth != kPassthroughBits) throw ValidationError("train.bitwidth must be 32");
  qat.validate();
  if (qaa) {
    finetune.validate();
    if (qaa_bitwidth == kPassthroughBits ||
        std::find(bitwidths.begin(), bitwidths.end(), qaa_bitwidth) == bitwidths.end())
      throw ValidationError("qaa_bitwidth must be one of the quantized zoo bitwidths");
  }
  for (int q : ptq_bitwidths)
    if (q < 1 || q > 8) throw ValidationError("ptq bitwidths must be in [1, 8]");
  if (ptq_samples < 1) throw ValidationError("ptq_samples must be positive");
  if (adversarial_training) {
    adv_train.validate();
    adv_attack.validate();
    if (adv_attack.family != AttackFamily::pgd) throw ValidationError("adversarial training uses the pgd family");
  }
  for (const auto& [name, spec] : attacks) {
    if (name.empty() || name.find_first_of(",\"\n") != std::string::npos)
      throw ValidationError("attack names must be non-empty and free of commas and quotes");
    spec.validate();
  }
  const auto ids = zoo_ids(*this);
  auto known = [&](const std::string& id) { return std::find(ids.begin(), ids.end(), id) != ids.end(); };
  std::set<std::pair<std::string, std::string>> rows;
  for (const auto& s : substitutes) {
    const auto label = s.resolved_label();
    if (s.models.empty()) throw ValidationError("substitute '" + label + "' names no model");
    if (label.find_first_of(",\"\n") != std::string::npos)
      throw ValidationError("substitute labels must be free of commas and quotes");
    const auto it = attacks.find(s.attack);
    if (it == attacks.end()) throw ValidationError("substitute '" + label + "' uses unknown attack '" + s.attack + "'");
    for (const auto& m : s.models)
      if (!known(m)) throw ValidationError("substitute '" + label + "' names unknown model '" + m + "'");
    const bool collection = s.models[0].ends_with("/qaa-ckpts");
    if (it->second.family != AttackFamily::ensemble && (s.models.size() != 1 || collection))
      throw ValidationError("substitute '" + label + "' has several members but attack '" + s.attack +
                            "' is not an ensemble");
    if (it->second.family == AttackFamily::qaa && s.state != "deployed")
      throw ValidationError("qaa attacks choose their own states; substitute '" + label + "' must be 'deployed'");
    if (s.state != "deployed" && s.state != "full" && s.state != "quantized" && s.state != "weights-only")
      throw ValidationError("unknown quantization state '" + s.state + "'");
    if (!rows.insert({label, s.attack}).second)
      throw ValidationError("duplicate substitute row '" + label + "' / '" + s.attack + "'");
  }
  for (const auto& t : expand_targets(*this))
    if (!known(t) || t.ends_with("/qaa-ckpts")) throw ValidationError("unknown target '" + t + "'");
  if (eval_examples < 1) throw ValidationError("eval_examples must be positive");
  if (dataset.kind == "synthetic" && eval_examples > dataset.test_count)
    throw ValidationError("eval_examples exceeds test_count");
  if (diagnostics.examples < 1 || diagnostics.sharpness_examples < 1 || diagnostics.sharpness_iterations < 1)
    throw ValidationError("diagnostics sample counts and iterations must be positive");
  for (double e : diagnostics.sharpness_epsilons)
    if (!(e > 0)) throw ValidationError("sharpness epsilons must be positive");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json data{{"kind", c.dataset.kind}, {"train_count", c.dataset.train_count},
                      {"test_count", c.dataset.test_count}};
  synth_to_json(data, c.dataset.synth);
  if (c.dataset.kind == "idx") {
    data["train_images"] = c.dataset.train_images;
    data["train_labels"] = c.dataset.train_labels;
    data["test_images"] = c.dataset.test_images;
    data["test_labels"] = c.dataset.test_labels;
  }
  nlohmann::json attacks = nlohmann::json::object();
  for (const auto& [name, spec] : c.attacks) attacks[name] = spec;
  j = {{"schema_version", c.schema_version},
       {"name", c.name},
       {"seeds", c.seeds},
       {"dataset", data},
       {"architectures", c.architectures},
       {"bitwidths", c.bitwidths},
       {"train", c.train},
       {"qat", c.qat},
       {"qaa", c.qaa},
       {"qaa_bitwidth", c.qaa_bitwidth},
       {"finetune", c.finetune},
       {"ptq_bitwidths", c.ptq_bitwidths},
       {"ptq_method", method_name(c.ptq_method)},
       {"ptq_samples", c.ptq_samples},
       {"adversarial_training", c.adversarial_training},
       {"adv_train", c.adv_train},
       {"adv_attack", c.adv_attack},
       {"attacks", attacks},
       {"substitutes", c.substitutes},
       {"targets", c.targets},
       {"eval_examples", c.eval_examples},
       {"diagnostics", c.diagnostics},
       {"save_adversarial", c.save_adversarial}};
}

void from_json(const nlohmann::json& j_in, ExperimentConfig& c) {
  const nlohmann::json& j = j_in.contains("config") && j_in.contains("runs") ? j_in.at("config") : j_in;
  if (!j.is_object()) throw ValidationError("experiment config must be a JSON object");
  get(j, "schema_version", c.schema_version);
  get(j, "name", c.name);
  get(j, "seeds", c.seeds);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    get(d, "kind", c.dataset.kind);
    get(d, "train_count", c.dataset.train_count);
    get(d, "test_count", c.dataset.test_count);
    get(d, "train_images", c.dataset.train_images);
    get(d, "train_labels", c.dataset.train_labels);
    get(d, "test_images", c.dataset.test_images);
    get(d, "test_labels", c.dataset.test_labels);
    synth_from_json(d, c.dataset.synth);
  }
  get(j, "architectures", c.architectures);
  get(j, "bitwidths", c.bitwidths);
  get(j, "train", c.train);
  get(j, "qat", c.qat);
  get(j, "qaa", c.qaa);
  get(j, "qaa_bitwidth", c.qaa_bitwidth);
  get(j, "finetune", c.finetune);
  get(j, "ptq_bitwidths", c.ptq_bitwidths);
  if (j.contains("ptq_method")) c.ptq_method = calibration_method_from_string(j.at("ptq_method").get<std::string>());
  get(j, "ptq_samples", c.ptq_samples);
  get(j, "adversarial_training", c.adversarial_training);
  get(j, "adv_train", c.adv_train);
  get(j, "adv_attack", c.adv_attack);
  if (j.contains("attacks")) {
    c.attacks.clear();
    for (const auto& [name, spec] : j.at("attacks").items()) c.attacks[name] = spec.get<AttackSpec>();
  } else {
    c.attacks = {{"mim", AttackSpec{}}, {"qaa", AttackSpec{.family = AttackFamily::qaa}}};
  }
  if (j.contains("substitutes"))
    j.at("substitutes").get_to(c.substitutes);
  else
    c.substitutes = default_substitutes(c);
  get(j, "targets", c.targets);
  get(j, "eval_examples", c.eval_examples);
  get(j, "diagnostics", c.diagnostics);
  get(j, "save_adversarial", c.save_adversarial);
}

ExperimentConfig load_experiment_config(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config '" + path + "' is not valid JSON: " + e.what());
  }
  try {
    return j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config '" + path + "': " + e.what());
  }
}

namespace {

struct Zoo {
  std::map<std::string, LayerGraph> models;
  std::map<std::string, std::vector<LayerGraph>> collections;  // "<arch>/qaa-ckpts"
  std::vector<std::string> order;
};

struct RowResult {
  SubstituteConfig config;
  std::string label;
  AttackSpec spec;
  std::vector<Substitute> gradient_members;  // what the diagnostics differentiate
  const LayerGraph* single = nullptr;        // null for multi-model rows
  AdversarialSet adv;
};

class SeedRun {
 public:
  SeedRun(const ExperimentConfig& cfg, const RunOptions& opt, std::uint64_t seed, std::string& stage)
      : cfg_(cfg), opt_(opt), seed_(seed), stage_(stage) {
    dir_ = fs::path(opt.output_dir) / ("seed-" + std::to_string(seed));
    fs::create_directories(dir_ / "models");
    fs::create_directories(dir_ / "plots");
    log_path_ = (dir_ / "training.jsonl").string();
    write_text(log_path_, "");
  }

  nlohmann::json run(SeedResult& out) {
    load_data();
    build_zoo();
    attack_grid();
    diagnostics();
    stage_ = "report";
    ev_->report().validate();
    write_outputs();
    out.seed = seed_;
    out.directory = dir_.string();
    out.report = ev_->report();
    out.distances = distances_;
    return manifest_;
  }

 private:
  void progress(const std::string& msg) {
    if (opt_.progress) opt_.progress("[seed " + std::to_string(seed_) + "] " + msg);
  }

  void load_data() {
    stage_ = "dataset";
    if (cfg_.dataset.kind == "synthetic") {
      SynthConfig sc = cfg_.dataset.synth;
      sc.count = cfg_.dataset.train_count;
      sc.seed = cfg_.dataset.synth.seed + 2 * seed_;
      train_ = synth_dataset(sc);
      train_.split = "train";
      sc.count = cfg_.dataset.test_count;
      sc.seed += 1;
      test_ = synth_dataset(sc);
      test_.split = "test";
    } else {
      const auto& d = cfg_.dataset;
      train_ = load_idx(d.train_images, d.train_labels, d.synth.classes);
      train_.split = "train";
      test_ = load_idx(d.test_images, d.test_labels, d.synth.classes);
      test_.split = "test";
      if (cfg_.eval_examples > test_.size()) throw ValidationError("eval_examples exceeds the test set size");
    }
    eval_ = test_.slice(0, cfg_.eval_examples);
    manifest_["dataset"] = {
        {"train", {{"size", train_.size()}, {"sha256", dataset_hash(train_)}, {"provenance", train_.provenance}}},
        {"test", {{"size", test_.size()}, {"sha256", dataset_hash(test_)}, {"provenance", test_.provenance}}},
        {"eval_examples", eval_.size()}};
  }

  TrainConfig seeded(TrainConfig c) const {
    c.seed += seed_;
    c.metrics_log = log_path_;
    return c;
  }

  std::string model_path(const std::string& id) const { return (dir_ / "models" / (file_stem(id) + ".qaam")).string(); }

  std::optional<LayerGraph> reuse(const std::string& id) const {
    if (opt_.reuse_models.empty()) return std::nullopt;
    const auto p = fs::path(opt_.reuse_models) / ("seed-" + std::to_string(seed_)) / "models" / (file_stem(id) + ".qaam");
    if (!fs::exists(p)) return std::nullopt;
    return load_model(p.string());
  }

  template <class Fn>
  const LayerGraph& obtain(const std::string& id, Fn train) {
    stage_ = "zoo:" + id;
    if (auto m = reuse(id)) {
      progress("loaded " + id);
      return add(id, std::move(*m));
    }
    progress("training " + id);
    return add(id, train());
  }

  const LayerGraph& add(const std::string& id, LayerGraph m) {
    save_model(m, model_path(id));
    zoo_.order.push_back(id);
    return zoo_.models[id] = std::move(m);
  }

  void build_zoo() {
    for (const auto& a : cfg_.architectures) {
      const LayerGraph& m32 = obtain(a + "/32", [&] { return train_standard(a, train_, seeded(cfg_.train)); });
      for (int q : cfg_.bitwidths) {
        if (q == kPassthroughBits) continue;
        obtain(a + "/" + std::to_string(q), [&] {
          TrainConfig c = seeded(cfg_.qat);
          c.bitwidth = q;
          return qat_train(a, train_, c, &m32);
        });
      }
      if (cfg_.qaa) build_qaa(a);
      for (int q : cfg_.ptq_bitwidths)
        obtain(a + "/ptq" + std::to_string(q),
               [&] { return ptq_quantize(m32, train_, q, cfg_.ptq_method, cfg_.ptq_samples); });
      if (cfg_.adversarial_training)
        obtain(a + "/adv", [&] {
          AttackSpec s = cfg_.adv_attack;
          s.seed += seed_;
          return adv_train(a, train_, seeded(cfg_.adv_train), s);
        });
    }
  }

  void build_qaa(const std::string& a) {
    const std::string id = a + "/qaa";
    stage_ = "zoo:" + id;
    const bool want_ckpts = cfg_.finetune.checkpoints > 0;
    if (auto m = reuse(id)) {
      std::vector<LayerGraph> snaps;
      for (std::size_t k = 0;; ++k) {
        auto s = reuse(checkpoint_id(a, k));
        if (!s) break;
        snaps.push_back(std::move(*s));
      }
      if (!want_ckpts || !snaps.empty()) {
        progress("loaded " + id);
        add(id, std::move(*m));
        store_checkpoints(a, std::move(snaps));
        return;
      }
    }
    progress("fine-tuning " + id);
    CheckpointCollection ck;
    LayerGraph m = finetune_qaa(zoo_.models.at(a + "/" + std::to_string(cfg_.qaa_bitwidth)), train_,
                                seeded(cfg_.finetune), want_ckpts ? &ck : nullptr);
    add(id, std::move(m));
    store_checkpoints(a, std::move(ck.snapshots));
  }

  void store_checkpoints(const std::string& a, std::vector<LayerGraph> snaps) {
    if (snaps.empty()) return;
    for (std::size_t k = 0; k < snaps.size(); ++k) {
      save_model(snaps[k], model_path(checkpoint_id(a, k)));
    }
    zoo_.collections[a + "/qaa-ckpts"] = std::move(snaps);
  }

  std::vector<Substitute> members_of(const SubstituteConfig& s) const {
    std::vector<Substitute> out;
    for (const auto& id : s.models) {
      if (auto it = zoo_.collections.find(id); it != zoo_.collections.end()) {
        for (const auto& m : it->second) out.push_back({&m, resolve_state(s.state, m)});
        continue;
      }
      if (id.ends_with("/qaa-ckpts")) throw ValidationError("no checkpoints were recorded for '" + id + "'");
      const auto& m = zoo_.models.at(id);
      out.push_back({&m, resolve_state(s.state, m)});
    }
    return out;
  }

  void attack_grid() {
    stage_ = "targets";
    std::vector<TargetSpec> targets;
    for (const auto& id : expand_targets(cfg_)) {
      const auto& m = zoo_.models.at(id);
      targets.push_back({id, &m, deployed_state(m)});
    }
    targets_ = targets;
    ev_.emplace(std::move(targets), eval_.images, eval_.labels);
    if (cfg_.save_adversarial) fs::create_directories(dir_ / "adversarial");
    for (const auto& s : cfg_.substitutes) {
      RowResult row;
      row.config = s;
      row.label = s.resolved_label();
      stage_ = "attack:" + row.label + "/" + s.attack;
      progress("attacking with " + row.label + " / " + s.attack);
      row.spec = cfg_.attacks.at(s.attack);
      row.spec.seed += seed_;
      const auto members = members_of(s);
      const auto& x = eval_.images;
      const auto& y = eval_.labels;
      switch (row.spec.family) {
        case AttackFamily::pgd:
          row.adv = pgd(*members[0].model, x, y, row.spec, members[0].state);
          break;
        case AttackFamily::mim:
          row.adv = mim(*members[0].model, x, y, row.spec, members[0].state);
          break;
        case AttackFamily::qaa:
          row.adv = qaa_attack(*members[0].model, x, y, row.spec, s.variant);
          break;
        case AttackFamily::ensemble:
          row.adv = ensemble_attack(members, x, y, row.spec);
          break;
      }
      if (row.spec.family == AttackFamily::qaa) {
        for (auto st : qaa_schedule(2, s.variant)) row.gradient_members.push_back({members[0].model, st});
      } else {
        row.gradient_members = members;
      }
      if (members.size() == 1) row.single = members[0].model;
      ev_->add(row.label, s.attack, members[0].model->nominal_bitwidth(), row.adv);
      if (cfg_.save_adversarial)
        save_adversarial(row.adv, (dir_ / "adversarial" / (file_stem(row.label) + "__" + s.attack + ".qaad")).string());
      rows_.push_back(std::move(row));
    }
  }

  void record(std::string kind, const std::string& sub, const std::string& attack, const std::string& target,
              std::string param, double value, Index count, Index undefined) {
    ev_->report().diagnostics.push_back({std::move(kind), sub, attack, target, std::move(param), value, count, undefined});
  }

  // Similarity and weight sharpness depend only on the substitute and its
  // gradient states; rows sharing both are measured once.
  std::string substitute_key(const RowResult& r) const {
    return r.label + (r.spec.family == AttackFamily::qaa ? "#" + std::string(to_string(r.config.variant)) : "");
  }

  void diagnostics() {
    const auto& dc = cfg_.diagnostics;
    const Index n = std::min(dc.examples, eval_.size());
    const Index ns = std::min(dc.sharpness_examples, eval_.size());
    const Tensor32 xd = eval_.images.slice(0, n);
    const std::vector<int> yd(eval_.labels.begin(), eval_.labels.begin() + n);
    const Tensor32 xs = eval_.images.slice(0, ns);
    const std::vector<int> ys(eval_.labels.begin(), eval_.labels.begin() + ns);
    std::set<std::string> seen;
    for (const auto& r : rows_) {
      stage_ = "diagnostics:" + r.label + "/" + r.config.attack;
      progress("diagnostics for " + r.label + " / " + r.config.attack);
      const bool first = seen.insert(substitute_key(r)).second;
      const std::string sim_attack = r.spec.family == AttackFamily::qaa ? r.config.attack : "";
      if (dc.feature_divergence) {
        const Tensor32 xa = r.adv.adversarial.slice(0, n);
        for (const auto& t : targets_) {
          double sum = 0;
          int defined = 0;
          for (Index k = 0; k < t.model->tap_count(); ++k) {
            double v = kNaN;
            Index undefined = n;
            try {
              const auto m = feature_divergence(*t.model, t.state, xd, xa, k);
              v = m.mean;
              undefined = m.undefined;
              sum += v;
              ++defined;
            } catch (const UndefinedMetric&) {
            }
            record("feature_divergence", r.label, r.config.attack, t.id, "tap=" + std::to_string(k), v, n, undefined);
          }
          record("feature_divergence", r.label, r.config.attack, t.id, "taps_mean", defined ? sum / defined : kNaN, n,
                 0);
        }
      }
      if (dc.gradient_similarity && first) {
        for (const auto& t : targets_) {
          double v = kNaN;
          Index undefined = n;
          try {
            const auto m = gradient_similarity({t.model, t.state}, r.gradient_members, xd, yd);
            v = m.mean;
            undefined = m.undefined;
          } catch (const UndefinedMetric&) {
          }
          record("gradient_similarity", r.label, sim_attack, t.id, "", v, n, undefined);
        }
      }
      if (dc.sharpness && r.single) {
        std::vector<QuantState> states;
        for (const auto& g : r.gradient_members) states.push_back(g.state);
        for (double eps : dc.sharpness_epsilons) {
          SharpnessConfig sc{.epsilon = eps, .iterations = dc.sharpness_iterations};
          const std::string p = "eps=" + format_number(eps);
          if (first) {
            const auto w = sharpness_weight(*r.single, states, xs, ys, sc);
            record("sharpness_weight", r.label, sim_attack, "", p, w.phi, ns, 0);
          }
          const auto f = sharpness_feature(*r.single, states, r.adv.adversarial.slice(0, ns), ys, sc);
          record("sharpness_feature", r.label, r.config.attack, "", p, f.phi, ns, 0);
        }
      }
    }
    if (dc.distance_matrix) {
      stage_ = "diagnostics:distance_matrix";
      std::vector<Substitute> models;
      std::vector<std::string> labels;
      for (const auto& t : targets_) {
        models.push_back({t.model, t.state});
        labels.push_back(t.id);
      }
      std::set<std::string> have(labels.begin(), labels.end());
      for (const auto& r : rows_)
        if (r.gradient_members.size() == 1 && have.insert(r.label).second) {
          models.push_back(r.gradient_members[0]);
          labels.push_back(r.label);
        }
      if (models.size() >= 2) distances_ = distance_matrix(models, labels, xd, yd);
    }
  }

  void write_file(const std::string& rel, const std::string& text) {
    write_text((dir_ / rel).string(), text);
    files_[rel] = sha256_bytes(text.data(), text.size());
  }

  void write_outputs() {
    const auto& rep = ev_->report();
    write_file("report.csv", rep.to_csv());
    write_file("cells.jsonl", rep.cells_jsonl());
    write_file("clean_accuracy.csv", rep.clean_csv());
    write_file("diagnostics.csv", rep.diagnostics_csv());
    write_file("diagnostics.jsonl", rep.diagnostics_jsonl());

    std::ostringstream bn;
    bn << std::setprecision(9) << "model,layer,channel,running_mean,running_var\n";
    for (const auto& id : zoo_.order) {
      const auto& m = zoo_.models.at(id);
      for (std::size_t li = 0; li < m.layers.size(); ++li) {
        if (m.layers[li].kind != LayerKind::batchnorm) continue;
        const auto s = bn_stats_export(m, static_cast<Index>(li));
        for (Index c = 0; c < s.channels(); ++c)
          bn << id << ',' << s.layer << ',' << c << ',' << s.running_mean[c] << ',' << s.running_var[c] << '\n';
      }
    }
    write_file("plots/bn_stats.csv", bn.str());

    std::map<std::string, int> target_bits;
    for (const auto& t : targets_) target_bits[t.id] = t.model->nominal_bitwidth();
    std::ostringstream fd;
    fd << "substitute,attack,target,target_bitwidth,tap,divergence\n";
    for (const auto& d : rep.diagnostics)
      if (d.kind == "feature_divergence" && d.parameter != "taps_mean")
        fd << d.substitute << ',' << d.attack << ',' << d.target << ',' << target_bits[d.target] << ','
           << d.parameter.substr(4) << ',' << (std::isnan(d.value) ? "" : format_number(d.value)) << '\n';
    write_file("plots/feature_divergence_by_tap.csv", fd.str());

    std::ostringstream asr;
    asr << "substitute,attack,target,target_architecture,target_bitwidth,asr,successes,correct\n";
    for (const auto& row : rep.rows)
      for (std::size_t t = 0; t < row.cells.size(); ++t) {
        const auto& c = row.cells[t];
        asr << row.substitute << ',' << row.attack << ',' << c.target << ','
            << targets_[t].model->architecture_id << ',' << target_bits[c.target] << ','
            << (c.defined() ? format_number(c.asr) : "") << ',' << c.successes << ',' << c.correct << '\n';
      }
    write_file("plots/asr_by_bitwidth.csv", asr.str());
    if (cfg_.diagnostics.distance_matrix && distances_.values.size() > 0)
      write_file("plots/distance_matrix.csv", distances_.to_csv());

    nlohmann::json models = nlohmann::json::object();
    auto describe = [&](const std::string& id, const LayerGraph& m) {
      std::ostringstream h;
      h << std::hex << std::setw(16) << std::setfill('0') << parameter_hash(m);
      const auto path = model_path(id);
      models[id] = {{"file", fs::relative(path, dir_).string()},
                    {"sha256", sha256_file(path)},
                    {"parameter_hash", h.str()}};
    };
    for (const auto& id : zoo_.order) describe(id, zoo_.models.at(id));
    for (const auto& [cid, snaps] : zoo_.collections)
      for (std::size_t k = 0; k < snaps.size(); ++k) describe(checkpoint_id(arch_of(cid), k), snaps[k]);
    manifest_["seed"] = seed_;
    manifest_["directory"] = dir_.filename().string();
    manifest_["models"] = models;
    manifest_["files"] = files_;
  }

  const ExperimentConfig& cfg_;
  const RunOptions& opt_;
  std::uint64_t seed_;
  std::string& stage_;
  fs::path dir_;
  std::string log_path_;
  Dataset train_, test_, eval_;
  Zoo zoo_;
  std::vector<TargetSpec> targets_;
  std::optional<TransferEvaluator> ev_;
  std::vector<RowResult> rows_;
  DistanceMatrix distances_;
  std::map<std::string, std::string> files_;
  nlohmann::json manifest_ = nlohmann::json::object();
};

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  if (options.output_dir.empty()) throw ValidationError("an output directory is required");
  fs::create_directories(options.output_dir);
  ExperimentResult result;
  auto& man = result.manifest;
  man = {{"schema_version", kExperimentSchemaVersion}, {"config", cfg}, {"status", "running"},
         {"runs", nlohmann::json::array()}};
  const auto manifest_path = (fs::path(options.output_dir) / "manifest.json").string();
  std::string stage = "setup";
  std::uint64_t current = 0;
  try {
    for (auto seed : cfg.seeds) {
      current = seed;
      SeedResult r;
      SeedRun run(cfg, options, seed, stage);
      man["runs"].push_back(run.run(r));
      result.runs.push_back(std::move(r));
    }
    stage = "summary";
    std::ostringstream summary;
    for (std::size_t i = 0; i < result.runs.size(); ++i) {
      std::istringstream csv(result.runs[i].report.to_csv());
      std::string line;
      std::getline(csv, line);
      if (i == 0) summary << "seed," << line << '\n';
      while (std::getline(csv, line)) summary << result.runs[i].seed << ',' << line << '\n';
    }
    write_text((fs::path(options.output_dir) / "summary.csv").string(), summary.str());
    std::vector<TransferReport> reports;
    for (const auto& r : result.runs) reports.push_back(r.report);
    write_text((fs::path(options.output_dir) / "pooled_report.csv").string(), pool_reports(reports).to_csv());
  } catch (const std::exception& e) {
    man["status"] = "failed";
    man["failure"] = {{"seed", current}, {"stage", stage}, {"message", e.what()}};
    write_text(manifest_path, man.dump(2) + "\n");
    throw;
  }
  man["status"] = "complete";
  write_text(manifest_path, man.dump(2) + "\n");
  return result;
}

}  // namespace qaa
