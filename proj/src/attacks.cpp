#include "qaa/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "qaa/engine.hpp"

namespace qaa {

const char* to_string(AttackFamily f) {
  switch (f) {
    case AttackFamily::pgd: return "pgd";
    case AttackFamily::mim: return "mim";
    case AttackFamily::qaa: return "qaa";
    case AttackFamily::ensemble: return "ensemble";
  }
  return "?";
}
const char* to_string(UpdateRule r) { return r == UpdateRule::pgd ? "pgd" : "mim"; }
const char* to_string(EnsembleMode m) {
  switch (m) {
    case EnsembleMode::logits: return "logits";
    case EnsembleMode::softmax: return "softmax";
    case EnsembleMode::sampling: return "sampling";
  }
  return "?";
}
const char* to_string(QaaVariant v) { return v == QaaVariant::qat ? "qat" : "ptq"; }

NLOHMANN_JSON_SERIALIZE_ENUM(AttackFamily, {{AttackFamily::pgd, "pgd"},
                                            {AttackFamily::mim, "mim"},
                                            {AttackFamily::qaa, "qaa"},
                                            {AttackFamily::ensemble, "ensemble"}})
NLOHMANN_JSON_SERIALIZE_ENUM(UpdateRule, {{UpdateRule::pgd, "pgd"}, {UpdateRule::mim, "mim"}})
NLOHMANN_JSON_SERIALIZE_ENUM(EnsembleMode, {{EnsembleMode::logits, "logits"},
                                            {EnsembleMode::softmax, "softmax"},
                                            {EnsembleMode::sampling, "sampling"}})

UpdateRule AttackSpec::update_rule() const {
  switch (family) {
    case AttackFamily::pgd: return UpdateRule::pgd;
    case AttackFamily::mim: return UpdateRule::mim;
    default: return inner;
  }
}

double AttackSpec::resolved_step() const {
  if (step_size > 0) return step_size;
  const double per = epsilon / iterations;
  return update_rule() == UpdateRule::pgd ? 2.5 * per : per;
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ValidationError("attack epsilon must lie in [0, 1]");
  if (iterations < 1) throw ValidationError("attack iterations must be >= 1");
  if (!(step_size >= 0.0) || !std::isfinite(step_size)) throw ValidationError("attack step size must be >= 0");
  if (epsilon > 0 && !(resolved_step() > 0)) throw ValidationError("attack step size must be positive");
  if (!(momentum_decay >= 0.0) || !std::isfinite(momentum_decay))
    throw ValidationError("momentum decay must be non-negative");
}

void to_json(nlohmann::json& j, const AttackSpec& s) {
  j = nlohmann::json{{"family", s.family},
                     {"epsilon", s.epsilon},
                     {"iterations", s.iterations},
                     {"step_size", s.step_size},
                     {"momentum_decay", s.momentum_decay},
                     {"inner", s.inner},
                     {"ensemble_mode", s.ensemble_mode},
                     {"sample_without_replacement", s.sample_without_replacement},
                     {"random_start", s.random_start},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, AttackSpec& s) {
  s = AttackSpec{};
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("family", s.family);
  get("epsilon", s.epsilon);
  get("iterations", s.iterations);
  get("step_size", s.step_size);
  get("momentum_decay", s.momentum_decay);
  get("inner", s.inner);
  get("ensemble_mode", s.ensemble_mode);
  get("sample_without_replacement", s.sample_without_replacement);
  get("random_start", s.random_start);
  get("seed", s.seed);
}

double AdversarialSet::max_linf() const {
  if (clean.empty()) return 0.0;
  return (adversarial.data().cast<double>() - clean.data().cast<double>()).cwiseAbs().maxCoeff();
}

namespace {

constexpr Index kChunk = 256;

// Gradient of the summed loss w.r.t. the chunk input at iteration `it`;
// writes per-example losses into `loss`.
using GradientFn = std::function<Tensor32(int it, const Tensor32& x, const std::vector<int>& y, Eigen::VectorXf& loss)>;

Tensor32 input_gradient(const LayerGraph& m, QuantState state, const Tensor32& x, const std::vector<int>& y,
                        Eigen::VectorXf& loss) {
  const auto tr = forward_trace(m, x, state, false);
  auto [per, dlogits] = loss_and_grad(m.head, tr.output, y, Reduction::sum);
  if (!per.allFinite()) throw NumericFault("non-finite substitute loss during attack");
  loss = per;
  return backward(m, tr, dlogits, false).grad_input;
}

void check_inputs(const Tensor32& x, const std::vector<int>& y, const AttackSpec& spec) {
  spec.validate();
  if (x.empty() || x.rank() < 2) throw ValidationError("attack input must be a non-empty batch");
  if (x.batch() != static_cast<Index>(y.size())) throw ShapeError("input", "label count does not match batch");
  x.require_finite("attack input");
  if (x.data().minCoeff() < 0.0f || x.data().maxCoeff() > 1.0f) throw ValidationError("attack input outside [0, 1]");
}

AdversarialSet iterate(const Tensor32& x, const std::vector<int>& y, const AttackSpec& spec, const GradientFn& grad_fn) {
  check_inputs(x, y, spec);
  const Index n = x.batch(), d = x.per_example();
  const int steps = spec.iterations;
  const float eps = static_cast<float>(spec.epsilon);
  const float alpha = spec.epsilon > 0 ? static_cast<float>(spec.resolved_step()) : 0.0f;
  const float mu = static_cast<float>(spec.momentum_decay);
  const bool momentum = spec.update_rule() == UpdateRule::mim;

  AdversarialSet out;
  out.clean = x;
  out.labels = y;
  out.spec = spec;
  out.adversarial = x;
  out.loss_trace = Eigen::MatrixXf::Zero(n, steps);
  out.zero_gradient_steps.assign(static_cast<std::size_t>(n), 0);

  auto lo = (x.data().array() - eps).cwiseMax(0.0f).eval();
  auto hi = (x.data().array() + eps).cwiseMin(1.0f).eval();

  if (spec.random_start && eps > 0) {
    std::mt19937_64 rng(spec.seed ^ 0x72616e64ULL);
    std::uniform_real_distribution<float> u(-eps, eps);
    for (Index i = 0; i < x.size(); ++i) out.adversarial[i] = std::clamp(x[i] + u(rng), lo[i], hi[i]);
  }

  for (Index begin = 0; begin < n; begin += kChunk) {
    const Index end = std::min(n, begin + kChunk), m = end - begin;
    const std::vector<int> yc(y.begin() + begin, y.begin() + end);
    Tensor32 xc = out.adversarial.slice(begin, end);
    const auto lo_c = lo.segment(begin * d, m * d);
    const auto hi_c = hi.segment(begin * d, m * d);
    Eigen::MatrixXf g = Eigen::MatrixXf::Zero(m, d);  // momentum buffer, one row per example
    Eigen::VectorXf loss;
    for (int it = 0; it < steps; ++it) {
      const Tensor32 grad = grad_fn(it, xc, yc, loss);
      out.loss_trace.block(begin, it, m, 1) = loss;
      const auto gr = grad.rows();
      Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dir(m, d);
      for (Index i = 0; i < m; ++i) {
        if (momentum) {
          const float l1 = gr.row(i).cwiseAbs().sum();
          g.row(i) *= mu;
          if (l1 > 0) g.row(i) += gr.row(i) / l1;
          dir.row(i) = g.row(i).array().sign().matrix();
        } else {
          dir.row(i) = gr.row(i).array().sign().matrix();
        }
        if (dir.row(i).isZero()) ++out.zero_gradient_steps[static_cast<std::size_t>(begin + i)];
      }
      auto xv = xc.data().array();
      const Eigen::Map<const Eigen::ArrayXf> step(dir.data(), m * d);
      xv = (xv + alpha * step).cwiseMax(lo_c.array()).cwiseMin(hi_c.array());
    }
    out.adversarial.data().segment(begin * d, m * d) = xc.data();
  }
  return out;
}

}  // namespace

AdversarialSet pgd(const LayerGraph& substitute, const Tensor32& x, const std::vector<int>& y, const AttackSpec& spec,
                   QuantState state) {
  AttackSpec s = spec;
  s.family = AttackFamily::pgd;
  auto out = iterate(x, y, s, [&](int, const Tensor32& xc, const std::vector<int>& yc, Eigen::VectorXf& loss) {
    return input_gradient(substitute, state, xc, yc, loss);
  });
  out.spec = spec;
  out.schedule.assign(static_cast<std::size_t>(spec.iterations), state);
  return out;
}

AdversarialSet mim(const LayerGraph& substitute, const Tensor32& x, const std::vector<int>& y, const AttackSpec& spec,
                   QuantState state) {
  AttackSpec s = spec;
  s.family = AttackFamily::mim;
  auto out = iterate(x, y, s, [&](int, const Tensor32& xc, const std::vector<int>& yc, Eigen::VectorXf& loss) {
    return input_gradient(substitute, state, xc, yc, loss);
  });
  out.spec = spec;
  out.schedule.assign(static_cast<std::size_t>(spec.iterations), state);
  return out;
}

std::vector<QuantState> qaa_schedule(int iterations, QaaVariant variant) {
  std::vector<QuantState> out;
  bool use_act_quant = true;
  for (int i = 0; i < iterations; ++i) {
    use_act_quant = !use_act_quant;
    const QuantMode a = use_act_quant ? QuantMode::quantized : QuantMode::full_precision;
    if (variant == QaaVariant::qat)
      out.push_back({QuantMode::quantized, a});
    else
      out.push_back({a, a});
  }
  return out;
}

AdversarialSet qaa_attack(const LayerGraph& model, const Tensor32& x, const std::vector<int>& y,
                          const AttackSpec& spec, QaaVariant variant) {
  if (variant == QaaVariant::qat) {
    if (model.scheme != QuantScheme::qat && model.scheme != QuantScheme::qaa)
      throw ValidationError(std::string("qat-variant QAA needs a QAT or QAA fine-tuned model, got scheme '") +
                            to_string(model.scheme) + "'");
    if (model.act_quant.empty()) throw ValidationError("qat-variant QAA needs activation quantization sites");
  } else if (model.scheme != QuantScheme::ptq) {
    throw ValidationError(std::string("ptq-variant QAA needs a PTQ model, got scheme '") + to_string(model.scheme) +
                          "'");
  }
  const auto schedule = qaa_schedule(spec.iterations, variant);
  auto out = iterate(x, y, spec, [&](int it, const Tensor32& xc, const std::vector<int>& yc, Eigen::VectorXf& loss) {
    return input_gradient(model, schedule[static_cast<std::size_t>(it)], xc, yc, loss);
  });
  out.schedule = schedule;
  return out;
}

Tensor32 ensemble_input_gradient(std::span<const Substitute> members, EnsembleMode mode, const Tensor32& x,
                                 const std::vector<int>& y, Eigen::VectorXf* per_example_loss) {
  if (members.empty()) throw ValidationError("ensemble needs at least one model");
  if (mode == EnsembleMode::sampling) throw ValidationError("sampling mode has no averaged gradient");
  const std::size_t M = members.size();
  const float inv_m = 1.0f / static_cast<float>(M);
  std::vector<ForwardTrace<float>> traces;
  traces.reserve(M);
  for (const auto& s : members) {
    if (!s.model) throw ValidationError("ensemble member is null");
    traces.push_back(forward_trace(*s.model, x, s.state, false));
  }
  const Index n = x.batch(), c = traces[0].output.per_example();
  for (const auto& t : traces)
    if (t.output.per_example() != c) throw ShapeError("ensemble", "members disagree on class count");

  std::vector<Tensor32> dlogits(M, Tensor32(traces[0].output.shape()));
  Eigen::VectorXf loss(n);
  if (mode == EnsembleMode::logits) {
    Tensor32 avg(traces[0].output.shape());
    for (const auto& t : traces) avg.data() += t.output.data();
    avg.data() *= inv_m;
    auto [per, d] = loss_and_grad(members[0].model->head, avg, y, Reduction::sum);
    loss = per;
    for (auto& dl : dlogits) dl.data() = d.data() * inv_m;
  } else {
    // L = -log mean_m p_m[y]; dL/dz_m = w_m (p_m - e_y) with w_m = p_m[y] / (M mean p[y]).
    std::vector<Eigen::MatrixXf> probs(M);
    for (std::size_t k = 0; k < M; ++k) {
      const auto z = traces[k].output.rows();
      Eigen::MatrixXf p(n, c);
      for (Index i = 0; i < n; ++i) {
        const float mx = z.row(i).maxCoeff();
        p.row(i) = (z.row(i).array() - mx).exp().matrix();
        p.row(i) /= p.row(i).sum();
      }
      probs[k] = std::move(p);
    }
    for (Index i = 0; i < n; ++i) {
      const int yi = y[static_cast<std::size_t>(i)];
      if (yi < 0 || yi >= c) throw ValidationError("label out of range");
      double mean_py = 0;
      for (std::size_t k = 0; k < M; ++k) mean_py += probs[k](i, yi);
      mean_py /= static_cast<double>(M);
      loss[i] = static_cast<float>(-std::log(std::max(mean_py, 1e-30)));
      for (std::size_t k = 0; k < M; ++k) {
        const float w = static_cast<float>(probs[k](i, yi) / (static_cast<double>(M) * std::max(mean_py, 1e-30)));
        auto row = dlogits[k].rows().row(i);
        row = w * probs[k].row(i);
        row[yi] -= w;
      }
    }
  }
  if (!loss.allFinite()) throw NumericFault("non-finite ensemble loss");
  Tensor32 grad(x.shape());
  for (std::size_t k = 0; k < M; ++k) grad.data() += backward(*members[k].model, traces[k], dlogits[k], false).grad_input.data();
  if (per_example_loss) *per_example_loss = loss;
  return grad;
}

AdversarialSet ensemble_attack(std::span<const Substitute> members, const Tensor32& x, const std::vector<int>& y,
                               const AttackSpec& spec) {
  if (members.empty()) throw ValidationError("ensemble needs at least one model");
  for (const auto& s : members)
    if (!s.model) throw ValidationError("ensemble member is null");
  const Shape in = members[0].model->input_shape;
  for (const auto& s : members)
    if (s.model->input_shape != in) throw ShapeError("ensemble", "members disagree on input shape");

  if (members.size() == 1) {
    auto out = spec.update_rule() == UpdateRule::pgd ? pgd(*members[0].model, x, y, spec, members[0].state)
                                                     : mim(*members[0].model, x, y, spec, members[0].state);
    if (spec.ensemble_mode == EnsembleMode::sampling) out.model_sequence.assign(static_cast<std::size_t>(spec.iterations), 0);
    return out;
  }

  if (spec.ensemble_mode != EnsembleMode::sampling) {
    return iterate(x, y, spec, [&](int, const Tensor32& xc, const std::vector<int>& yc, Eigen::VectorXf& loss) {
      return ensemble_input_gradient(members, spec.ensemble_mode, xc, yc, &loss);
    });
  }

  // One member per iteration, drawn before the attack so every chunk sees the same sequence.
  std::vector<int> sequence;
  std::mt19937_64 rng(spec.seed);
  const int M = static_cast<int>(members.size());
  if (spec.sample_without_replacement) {
    std::vector<int> pool;
    while (static_cast<int>(sequence.size()) < spec.iterations) {
      if (pool.empty()) {
        pool.resize(static_cast<std::size_t>(M));
        std::iota(pool.begin(), pool.end(), 0);
        std::shuffle(pool.begin(), pool.end(), rng);
      }
      sequence.push_back(pool.back());
      pool.pop_back();
    }
  } else {
    std::uniform_int_distribution<int> pick(0, M - 1);
    for (int i = 0; i < spec.iterations; ++i) sequence.push_back(pick(rng));
  }
  auto out = iterate(x, y, spec, [&](int it, const Tensor32& xc, const std::vector<int>& yc, Eigen::VectorXf& loss) {
    const Substitute& s = members[static_cast<std::size_t>(sequence[static_cast<std::size_t>(it)])];
    return input_gradient(*s.model, s.state, xc, yc, loss);
  });
  out.model_sequence = std::move(sequence);
  return out;
}

}  // namespace qaa
