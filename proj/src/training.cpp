#include "qaa/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "qaa/engine.hpp"
#include "qaa/quantizer.hpp"

namespace qaa {

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("epochs must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ValidationError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) throw ValidationError("weight_decay must be >= 0");
  if (bitwidth != kPassthroughBits && (bitwidth < 1 || bitwidth > 8))
    throw ValidationError("bitwidth must be in [1, 8] or 32");
  if (checkpoints < 0) throw ValidationError("checkpoints must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},         {"batch_size", c.batch_size},     {"learning_rate", c.learning_rate},
                     {"momentum", c.momentum},     {"weight_decay", c.weight_decay}, {"seed", c.seed},
                     {"bitwidth", c.bitwidth},     {"checkpoints", c.checkpoints},   {"metrics_log", c.metrics_log}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("learning_rate", c.learning_rate);
  get("momentum", c.momentum);
  get("weight_decay", c.weight_decay);
  get("seed", c.seed);
  get("bitwidth", c.bitwidth);
  get("checkpoints", c.checkpoints);
  get("metrics_log", c.metrics_log);
}

void CheckpointCollection::validate() const {
  if (snapshots.empty()) throw ValidationError("checkpoint collection is empty");
  for (const auto& s : snapshots)
    if (s.architecture_id != snapshots.front().architecture_id)
      throw ValidationError("checkpoints mix architectures");
}

namespace {

// Momentum buffers mirror the parameter layout; empty until first touched.
struct Velocity {
  std::vector<Eigen::VectorXf> weight, bias;
  std::vector<float> wq_scale, wq_bias, aq_scale, aq_bias;

  explicit Velocity(const LayerGraph& m)
      : weight(m.layers.size()),
        bias(m.layers.size()),
        wq_scale(m.weight_quant.size(), 0.0f),
        wq_bias(m.weight_quant.size(), 0.0f),
        aq_scale(m.act_quant.size(), 0.0f),
        aq_bias(m.act_quant.size(), 0.0f) {}
};

void momentum_update(Eigen::Ref<Eigen::VectorXf> param, const Eigen::VectorXf& grad, Eigen::VectorXf& vel, float lr,
                     float mom, float decay) {
  if (vel.size() == 0) vel = Eigen::VectorXf::Zero(param.size());
  vel = mom * vel + grad + decay * param;
  param -= lr * vel;
}

void momentum_update(float& param, float grad, float& vel, float lr, float mom) {
  vel = mom * vel + grad;
  param -= lr * vel;
}

// Learned-step-size gradient scale 1 / sqrt(numel * Qp).
float lsq_factor(Index numel, const QuantParams& p) {
  const double qp = std::max(1.0, static_cast<double>(p.grid_max()));
  return static_cast<float>(1.0 / std::sqrt(static_cast<double>(numel) * qp));
}

struct StepOptions {
  bool update_act_quant = true;
};

void sgd_step(LayerGraph& m, const ForwardTrace<float>& tr, const ParamGradients<float>& g, Velocity& v,
              const TrainConfig& cfg, StepOptions opt) {
  const float lr = static_cast<float>(cfg.learning_rate), mom = static_cast<float>(cfg.momentum),
              wd = static_cast<float>(cfg.weight_decay);
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    Layer<float>& l = m.layers[li];
    if (!g.weight[li].empty()) {
      const float decay = l.has_weight_quant() ? wd : 0.0f;
      momentum_update(l.weight.data(), g.weight[li].data(), v.weight[li], lr, mom, decay);
    }
    if (!g.bias[li].empty()) momentum_update(l.bias.data(), g.bias[li].data(), v.bias[li], lr, mom, 0.0f);
    if (l.has_weight_quant() && g.weight_quant_active[static_cast<std::size_t>(l.quant_site)]) {
      const auto k = static_cast<std::size_t>(l.quant_site);
      QuantParams& p = m.weight_quant[k];
      const float f = lsq_factor(l.weight.size(), p);
      momentum_update(p.scale, f * g.weight_quant_scale[k], v.wq_scale[k], lr, mom);
      momentum_update(p.bias, f * g.weight_quant_bias[k], v.wq_bias[k], lr, mom);
      p.scale = std::max(p.scale, static_cast<float>(kScaleFloor));
    }
    if (l.kind == LayerKind::relu && l.quant_site >= 0 && opt.update_act_quant &&
        g.act_quant_active[static_cast<std::size_t>(l.quant_site)]) {
      const auto k = static_cast<std::size_t>(l.quant_site);
      QuantParams& p = m.act_quant[k];
      const float f = lsq_factor(tr.inputs[li].per_example(), p);
      momentum_update(p.scale, f * g.act_quant_scale[k], v.aq_scale[k], lr, mom);
      momentum_update(p.bias, f * g.act_quant_bias[k], v.aq_bias[k], lr, mom);
      p.scale = std::max(p.scale, static_cast<float>(kScaleFloor));
    }
  }
}

bool parameters_finite(const LayerGraph& m) {
  for (const auto& l : m.layers)
    if ((!l.weight.empty() && !l.weight.all_finite()) || (!l.bias.empty() && !l.bias.all_finite())) return false;
  for (const auto& p : m.weight_quant)
    if (!std::isfinite(p.scale) || !std::isfinite(p.bias)) return false;
  for (const auto& p : m.act_quant)
    if (!std::isfinite(p.scale) || !std::isfinite(p.bias)) return false;
  return true;
}

struct LoopSpec {
  const char* phase = "train";
  std::function<QuantState(Index batch)> state_for;
  std::function<StepOptions(QuantState)> options_for = [](QuantState) { return StepOptions{}; };
  std::function<Tensor32(const LayerGraph&, const Tensor32&, const std::vector<int>&)> perturb;
  std::function<void(Index batch, const LayerGraph&)> after_step;
};

Index batches_per_epoch(const Dataset& data, Index batch_size) { return (data.size() + batch_size - 1) / batch_size; }

void sgd_loop(LayerGraph& model, const Dataset& data, const TrainConfig& cfg, const LoopSpec& spec,
              const BatchObserver& observer) {
  if (cfg.epochs == 0) return;
  data.validate();
  if (data.example_shape() != model.input_shape)
    throw ShapeError("input", "dataset examples " + shape_string(data.example_shape()) + " do not match model input " +
                                  shape_string(model.input_shape));
  std::ofstream log;
  if (!cfg.metrics_log.empty()) {
    log.open(cfg.metrics_log, std::ios::app);
    if (!log) throw ValidationError("cannot open metrics log '" + cfg.metrics_log + "'");
  }
  Velocity vel(model);
  std::mt19937_64 rng(cfg.seed ^ 0x5348554646ULL);
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  const Index per_epoch = batches_per_epoch(data, cfg.batch_size);
  Index batch = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    Index correct = 0;
    for (Index b = 0; b < per_epoch; ++b, ++batch) {
      const auto first = order.begin() + b * cfg.batch_size;
      const auto last = order.begin() + std::min(data.size(), (b + 1) * cfg.batch_size);
      const std::vector<Index> idx(first, last);
      const Dataset mb = data.gather(idx);
      const QuantState state = spec.state_for(batch);
      const Tensor32 x = spec.perturb ? spec.perturb(model, mb.images, mb.labels) : mb.images;
      ForwardTrace<float> tr;
      BackpropResult<float> r;
      try {
        r = backprop(model, x, mb.labels, state, true, Reduction::mean, &tr);
      } catch (const NumericFault& e) {
        throw DivergedTraining(std::string(spec.phase) + " diverged at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b) + ": " + e.what());
      }
      update_running_stats(model, tr);
      sgd_step(model, tr, r.grads, vel, cfg, spec.options_for(state));
      if (!parameters_finite(model))
        throw DivergedTraining(std::string(spec.phase) + " produced non-finite parameters at epoch " +
                               std::to_string(epoch) + ", batch " + std::to_string(b));
      loss_sum += static_cast<double>(r.loss) * static_cast<double>(idx.size());
      const auto pred = argmax_rows(r.logits);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == mb.labels[i];
      if (spec.after_step) spec.after_step(batch, model);
      if (observer) observer(batch, state, model);
    }
    if (log) {
      const nlohmann::json row{{"phase", spec.phase},
                               {"architecture", model.architecture_id},
                               {"bitwidth", model.nominal_bitwidth()},
                               {"epoch", epoch},
                               {"batches", per_epoch},
                               {"loss", loss_sum / static_cast<double>(data.size())},
                               {"train_accuracy", static_cast<double>(correct) / static_cast<double>(data.size())}};
      log << row.dump() << '\n';
    }
  }
}

LayerGraph fresh_model(const std::string& arch, const Dataset& data, std::uint64_t seed) {
  if (data.classes < 2) throw ValidationError("dataset needs at least 2 classes");
  LayerGraph m = make_architecture(arch, data.example_shape(), data.classes);
  initialize(m, seed);
  return m;
}

// ReLU outputs per activation site on the given inputs.
std::vector<Tensor32> activation_samples(const LayerGraph& m, const Tensor32& x, bool train_mode) {
  const auto tr = forward_trace(m, x, QuantState::full(), train_mode);
  std::vector<Tensor32> out(m.act_quant.size());
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const auto& l = m.layers[li];
    if (l.kind == LayerKind::relu && l.quant_site >= 0) out[static_cast<std::size_t>(l.quant_site)] = tr.layer_output(li);
  }
  return out;
}

void calibrate_sites(LayerGraph& m, const Tensor32& x, int bitwidth, CalibrationMethod method, bool train_mode) {
  auto calib = [&](const Tensor32& samples, bool is_signed) {
    return method == CalibrationMethod::mse ? calibrate_mse(samples, bitwidth, is_signed, kMseGridSize)
                                            : calibrate_minmax(samples, bitwidth, is_signed);
  };
  for (const auto& l : m.layers)
    if (l.has_weight_quant()) m.weight_quant[static_cast<std::size_t>(l.quant_site)] = calib(l.weight, true);
  const auto acts = activation_samples(m, x, train_mode);
  for (std::size_t k = 0; k < acts.size(); ++k) m.act_quant[k] = calib(acts[k], false);
}

}  // namespace

LayerGraph train_standard(const std::string& arch, const Dataset& data, const TrainConfig& cfg,
                          const BatchObserver& observer) {
  cfg.validate();
  if (cfg.bitwidth != kPassthroughBits) throw ValidationError("train_standard needs bitwidth 32; use qat_train");
  LayerGraph m = fresh_model(arch, data, cfg.seed);
  LoopSpec spec;
  spec.state_for = [](Index) { return QuantState::full(); };
  sgd_loop(m, data, cfg, spec, observer);
  return m;
}

LayerGraph qat_train(const std::string& arch, const Dataset& data, const TrainConfig& cfg, const LayerGraph* init,
                     const BatchObserver& observer) {
  cfg.validate();
  if (cfg.bitwidth == 1) throw ValidationError("QAT needs bitwidth in [2, 8] or 32");
  LayerGraph m = init ? *init : fresh_model(arch, data, cfg.seed);
  if (init && init->architecture_id != arch)
    throw ValidationError("QAT init model is '" + init->architecture_id + "', expected '" + arch + "'");
  set_uniform_bitwidth(m, cfg.bitwidth);
  if (cfg.bitwidth != kPassthroughBits) {
    const Index n = std::min<Index>(data.size(), cfg.batch_size);
    calibrate_sites(m, data.images.slice(0, n), cfg.bitwidth, CalibrationMethod::mse, !init);
  }
  m.scheme = QuantScheme::qat;
  LoopSpec spec;
  spec.phase = "qat";
  spec.state_for = [](Index) { return QuantState::quantized(); };
  sgd_loop(m, data, cfg, spec, observer);
  return m;
}

std::vector<QuantState> finetune_schedule(Index batches) {
  std::vector<QuantState> out;
  bool use_act_quant = true;
  for (Index b = 0; b < batches; ++b) {
    use_act_quant = !use_act_quant;
    out.push_back({QuantMode::quantized, use_act_quant ? QuantMode::quantized : QuantMode::full_precision});
  }
  return out;
}

LayerGraph finetune_qaa(const LayerGraph& pretrained_qnn, const Dataset& data, const TrainConfig& cfg,
                        CheckpointCollection* checkpoints, const BatchObserver& observer) {
  cfg.validate();
  if (pretrained_qnn.scheme != QuantScheme::qat)
    throw ValidationError(std::string("QAA fine-tuning needs a QAT model, got scheme '") +
                          to_string(pretrained_qnn.scheme) + "'");
  if (pretrained_qnn.act_quant.empty() ||
      std::any_of(pretrained_qnn.act_quant.begin(), pretrained_qnn.act_quant.end(),
                  [](const QuantParams& p) { return p.passthrough(); }))
    throw ValidationError("QAA fine-tuning needs quantized activation sites");
  pretrained_qnn.validate();

  LayerGraph m = pretrained_qnn;
  const Index total = batches_per_epoch(data, cfg.batch_size) * cfg.epochs;
  const auto schedule = finetune_schedule(total);
  const Index every = cfg.checkpoints > 0 ? std::max<Index>(1, total / cfg.checkpoints) : 0;

  LoopSpec spec;
  spec.phase = "finetune-qaa";
  spec.state_for = [&](Index b) { return schedule[static_cast<std::size_t>(b)]; };
  spec.options_for = [](QuantState s) { return StepOptions{.update_act_quant = s.activations_quantized()}; };
  if (checkpoints) {
    checkpoints->snapshots.clear();
    checkpoints->batch_index.clear();
    spec.after_step = [&](Index b, const LayerGraph& cur) {
      if (every > 0 && (b + 1) % every == 0 && static_cast<int>(checkpoints->snapshots.size()) < cfg.checkpoints) {
        LayerGraph snap = cur;
        snap.scheme = QuantScheme::qaa;
        checkpoints->snapshots.push_back(std::move(snap));
        checkpoints->batch_index.push_back(b);
      }
    };
  }
  sgd_loop(m, data, cfg, spec, observer);
  m.scheme = QuantScheme::qaa;
  return m;
}

CalibrationMethod calibration_method_from_string(const std::string& s) {
  if (s == "minmax") return CalibrationMethod::minmax;
  if (s == "mse") return CalibrationMethod::mse;
  throw ValidationError("unknown calibration method '" + s + "' (expected minmax or mse)");
}

LayerGraph ptq_quantize(const LayerGraph& model32, const Dataset& calib, int bitwidth, CalibrationMethod method,
                        Index samples) {
  if (calib.size() == 0) throw ValidationError("PTQ calibration set is empty");
  if (samples < 1) throw ValidationError("PTQ needs at least one calibration sample");
  if (bitwidth != kPassthroughBits && (bitwidth < 1 || bitwidth > 8))
    throw ValidationError("bitwidth must be in [1, 8] or 32");
  model32.validate();
  LayerGraph m = model32;
  set_uniform_bitwidth(m, bitwidth);
  if (bitwidth != kPassthroughBits)
    calibrate_sites(m, calib.images.slice(0, std::min(samples, calib.size())), bitwidth, method, false);
  m.scheme = QuantScheme::ptq;
  return m;
}

LayerGraph adv_train(const std::string& arch, const Dataset& data, const TrainConfig& cfg, const AttackSpec& attack,
                     const BatchObserver& observer) {
  cfg.validate();
  attack.validate();
  if (attack.family != AttackFamily::pgd) throw ValidationError("adversarial training uses the pgd attack family");
  if (cfg.bitwidth != kPassthroughBits) throw ValidationError("adversarial training is full precision");
  LayerGraph m = fresh_model(arch, data, cfg.seed);
  LoopSpec spec;
  spec.phase = "advtrain";
  spec.state_for = [](Index) { return QuantState::full(); };
  Index batch = 0;
  spec.perturb = [&](const LayerGraph& cur, const Tensor32& x, const std::vector<int>& y) {
    AttackSpec s = attack;
    s.seed = attack.seed + static_cast<std::uint64_t>(batch++);
    return pgd(cur, x, y, s, QuantState::full()).adversarial;
  };
  sgd_loop(m, data, cfg, spec, observer);
  return m;
}

std::vector<int> predict(const LayerGraph& model, const Tensor32& x, QuantState state) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(x.batch()));
  constexpr Index kChunk = 256;
  for (Index b = 0; b < x.batch(); b += kChunk) {
    const auto r = forward(model, x.slice(b, std::min(x.batch(), b + kChunk)), state);
    const auto p = argmax_rows(r.logits);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

double accuracy(const LayerGraph& model, const Dataset& data, QuantState state) {
  if (data.size() == 0) throw ValidationError("accuracy of an empty dataset");
  const auto pred = predict(model, data.images, state);
  Index correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

QuantState deployed_state(const LayerGraph& model) {
  return model.scheme == QuantScheme::none ? QuantState::full() : QuantState::quantized();
}

}  // namespace qaa
