#include "qaa/diagnostics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "qaa/engine.hpp"

namespace qaa {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr Index kChunk = 256;

void finish(BatchMetric& m, const char* what) {
  double sum = 0;
  Index defined = 0;
  for (double v : m.per_example)
    if (!std::isnan(v)) {
      sum += v;
      ++defined;
    }
  m.undefined = static_cast<Index>(m.per_example.size()) - defined;
  if (defined == 0) throw UndefinedMetric(std::string(what) + " is undefined for every example");
  m.mean = sum / static_cast<double>(defined);
}

Tensor32 input_gradients(const Substitute& s, const Tensor32& x, const std::vector<int>& y) {
  if (!s.model) throw ValidationError("null model");
  Tensor32 g(x.shape());
  const Index d = x.per_example();
  for (Index b = 0; b < x.batch(); b += kChunk) {
    const Index e = std::min(x.batch(), b + kChunk);
    const std::vector<int> yc(y.begin() + b, y.begin() + e);
    const auto tr = forward_trace(*s.model, x.slice(b, e), s.state, false);
    auto [per, dlogits] = loss_and_grad(s.model->head, tr.output, yc, Reduction::sum);
    g.data().segment(b * d, (e - b) * d) = backward(*s.model, tr, dlogits, false).grad_input.data();
  }
  return g;
}

// Gradient of the summed member losses.
Tensor32 input_gradients(std::span<const Substitute> members, const Tensor32& x, const std::vector<int>& y) {
  if (members.empty()) throw ValidationError("substitute needs at least one member");
  Tensor32 g = input_gradients(members[0], x, y);
  for (std::size_t i = 1; i < members.size(); ++i) g.data() += input_gradients(members[i], x, y).data();
  return g;
}

double cosine_rows(const Eigen::Ref<const Eigen::RowVectorXf>& a, const Eigen::Ref<const Eigen::RowVectorXf>& b) {
  const Eigen::RowVectorXd ad = a.cast<double>(), bd = b.cast<double>();
  const double na = ad.norm(), nb = bd.norm();
  if (na == 0 || nb == 0) return kNaN;
  return std::clamp(ad.dot(bd) / (na * nb), -1.0, 1.0);
}

// Batch-mean loss averaged over the given states.
double mean_loss(const LayerGraph& m, std::span<const QuantState> states, const Tensor32& x,
                 const std::vector<int>& y) {
  double loss = 0;
  for (auto state : states) {
    const auto logits = forward(m, x, state).logits;
    auto [per, d] = loss_and_grad(m.head, logits, y, Reduction::mean);
    loss += per.cast<double>().mean();
  }
  loss /= static_cast<double>(states.size());
  if (!std::isfinite(loss)) throw NumericFault("non-finite loss during sharpness search");
  return loss;
}

void check_states(std::span<const QuantState> states) {
  if (states.empty()) throw ValidationError("sharpness needs at least one quantization state");
}

void check_batch(const Tensor32& x, const std::vector<int>& y) {
  if (x.empty() || x.batch() != static_cast<Index>(y.size()))
    throw ValidationError("evaluation batch and labels must be non-empty and of equal length");
}

}  // namespace

double relative_deviation(const Tensor32& adv_feature, const Tensor32& clean_feature) {
  if (adv_feature.size() != clean_feature.size()) throw ShapeError("feature", "clean and adversarial sizes differ");
  const Eigen::VectorXd c = clean_feature.data().cast<double>();
  const double nc = c.norm();
  if (nc == 0) throw UndefinedMetric("feature divergence undefined: clean feature is zero");
  return (adv_feature.data().cast<double>() - c).norm() / nc;
}

double cosine_similarity(const Tensor32& a, const Tensor32& b) {
  if (a.size() != b.size()) throw ShapeError("gradient", "vector sizes differ");
  const double c = cosine_rows(a.data().transpose(), b.data().transpose());
  if (std::isnan(c)) throw UndefinedMetric("gradient similarity undefined: zero gradient");
  return c;
}

BatchMetric feature_divergence(const LayerGraph& target, QuantState state, const Tensor32& x, const Tensor32& x_adv,
                               Index tap) {
  if (x.shape() != x_adv.shape()) throw ShapeError("input", "clean and adversarial batches differ in shape");
  if (tap < 0 || tap >= target.tap_count())
    throw ValidationError("feature tap " + std::to_string(tap) + " out of range [0, " +
                          std::to_string(target.tap_count()) + ")");
  BatchMetric m;
  m.per_example.reserve(static_cast<std::size_t>(x.batch()));
  for (Index b = 0; b < x.batch(); b += kChunk) {
    const Index e = std::min(x.batch(), b + kChunk);
    const auto fc = forward(target, x.slice(b, e), state).features[static_cast<std::size_t>(tap)];
    const auto fa = forward(target, x_adv.slice(b, e), state).features[static_cast<std::size_t>(tap)];
    const auto rc = fc.rows(), ra = fa.rows();
    for (Index i = 0; i < e - b; ++i) {
      const Eigen::RowVectorXd c = rc.row(i).cast<double>();
      const double nc = c.norm();
      m.per_example.push_back(nc == 0 ? kNaN : (ra.row(i).cast<double>() - c).norm() / nc);
    }
  }
  finish(m, "feature divergence");
  return m;
}

BatchMetric gradient_similarity(const Substitute& target, const Substitute& substitute, const Tensor32& x,
                                const std::vector<int>& y) {
  return gradient_similarity(target, std::span<const Substitute>(&substitute, 1), x, y);
}

BatchMetric gradient_similarity(const Substitute& target, std::span<const Substitute> substitute, const Tensor32& x,
                                const std::vector<int>& y) {
  check_batch(x, y);
  const auto gt = input_gradients(target, x, y), gs = input_gradients(substitute, x, y);
  BatchMetric m;
  const auto rt = gt.rows(), rs = gs.rows();
  for (Index i = 0; i < x.batch(); ++i) m.per_example.push_back(cosine_rows(rt.row(i), rs.row(i)));
  finish(m, "gradient similarity");
  return m;
}

DistanceMatrix distance_matrix(std::span<const Substitute> models, const std::vector<std::string>& labels,
                               const Tensor32& x, const std::vector<int>& y) {
  if (models.size() < 2) throw ValidationError("distance matrix needs at least 2 models");
  if (labels.size() != models.size()) throw ValidationError("one label per model required");
  check_batch(x, y);
  std::vector<Tensor32> grads;
  for (const auto& s : models) grads.push_back(input_gradients(s, x, y));
  const Index M = static_cast<Index>(models.size());
  DistanceMatrix out;
  out.labels = labels;
  out.values = Eigen::MatrixXd::Zero(M, M);
  for (Index a = 0; a < M; ++a)
    for (Index b = a + 1; b < M; ++b) {
      const auto ra = grads[static_cast<std::size_t>(a)].rows(), rb = grads[static_cast<std::size_t>(b)].rows();
      double sum = 0;
      Index n = 0;
      for (Index i = 0; i < x.batch(); ++i) {
        const double c = cosine_rows(ra.row(i), rb.row(i));
        if (!std::isnan(c)) {
          sum += c;
          ++n;
        }
      }
      double dist = kNaN;
      if (n > 0)
        dist = 1.0 - sum / static_cast<double>(n);
      else
        out.warnings.push_back("no defined gradient similarity between '" + labels[static_cast<std::size_t>(a)] +
                               "' and '" + labels[static_cast<std::size_t>(b)] + "'");
      out.values(a, b) = out.values(b, a) = dist;
    }
  return out;
}

std::string DistanceMatrix::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "model";
  for (const auto& l : labels) os << ',' << l;
  os << '\n';
  for (Index i = 0; i < values.rows(); ++i) {
    os << labels[static_cast<std::size_t>(i)];
    for (Index j = 0; j < values.cols(); ++j) {
      os << ',';
      if (!std::isnan(values(i, j))) os << values(i, j);
    }
    os << '\n';
  }
  return os.str();
}

void SharpnessConfig::validate() const {
  if (!(epsilon > 0) || !std::isfinite(epsilon)) throw ValidationError("sharpness epsilon must be positive");
  if (iterations < 1) throw ValidationError("sharpness iterations must be >= 1");
  if (!(step_fraction > 0)) throw ValidationError("sharpness step fraction must be positive");
}

namespace {

constexpr int kLineSearchHalvings = 4;

// Projected sign-gradient search over a box, shared by both sharpness forms.
// `sign` is +1 to maximize, -1 to minimize. `gradient(eta)` returns the
// objective gradient at eta and `objective(eta)` its value.
template <class GradFn, class ObjFn>
SharpnessResult box_search(Index dim, const SharpnessConfig& cfg, double sign, GradFn gradient, ObjFn objective) {
  cfg.validate();
  const float eps = static_cast<float>(cfg.epsilon);
  Eigen::VectorXf eta = Eigen::VectorXf::Zero(dim);
  SharpnessResult r;
  double current = objective(eta);
  r.base_loss = current;
  r.objective.push_back(current);
  for (int t = 0; t < cfg.iterations; ++t) {
    const Eigen::VectorXf dir = gradient(eta).array().sign().matrix() * static_cast<float>(sign);
    float step = static_cast<float>(cfg.step_fraction * cfg.epsilon);
    int h = 0;
    for (; h <= kLineSearchHalvings; ++h, step *= 0.5f) {
      const Eigen::VectorXf cand = (eta + step * dir).cwiseMax(-eps).cwiseMin(eps);
      const double v = objective(cand);
      if (sign * (v - current) >= 0) {
        eta = cand;
        current = v;
        break;
      }
    }
    if (h > 0) ++r.fallbacks;
    r.objective.push_back(current);
  }
  for (std::size_t t = 1; t < r.objective.size(); ++t)
    if (sign * (r.objective[t] - r.objective[t - 1]) < 0) throw Error("sharpness search lost monotonicity");
  r.extreme_loss = current;
  r.phi = sign > 0 ? (r.extreme_loss - r.base_loss) / (1.0 + r.base_loss) * 100.0
                   : (r.base_loss - r.extreme_loss) / (1.0 + r.extreme_loss) * 100.0;
  return r;
}

}  // namespace

SharpnessResult sharpness_weight(const LayerGraph& model, QuantState state, const Tensor32& x,
                                 const std::vector<int>& y, const SharpnessConfig& cfg) {
  return sharpness_weight(model, std::span<const QuantState>(&state, 1), x, y, cfg);
}

SharpnessResult sharpness_weight(const LayerGraph& model, std::span<const QuantState> states, const Tensor32& x,
                                 const std::vector<int>& y, const SharpnessConfig& cfg) {
  check_batch(x, y);
  check_states(states);
  std::vector<std::size_t> layers;
  Index dim = 0;
  for (std::size_t li = 0; li < model.layers.size(); ++li)
    if (model.layers[li].has_weight_quant()) {
      layers.push_back(li);
      dim += model.layers[li].weight.size();
    }
  if (dim == 0) throw ValidationError("model has no conv or linear weights to perturb");
  LayerGraph work = model;
  auto apply = [&](const Eigen::VectorXf& eta) {
    Index off = 0;
    for (std::size_t li : layers) {
      auto& w = work.layers[li].weight;
      w.data() = model.layers[li].weight.data() + eta.segment(off, w.size());
      off += w.size();
    }
  };
  auto objective = [&](const Eigen::VectorXf& eta) {
    apply(eta);
    return mean_loss(work, states, x, y);
  };
  auto gradient = [&](const Eigen::VectorXf& eta) {
    apply(eta);
    Eigen::VectorXf g = Eigen::VectorXf::Zero(dim);
    for (auto state : states) {
      const auto r = backprop(work, x, y, state, false, Reduction::mean);
      Index off = 0;
      for (std::size_t li : layers) {
        const auto& gw = r.grads.weight[li];
        g.segment(off, gw.size()) += gw.data();
        off += gw.size();
      }
    }
    return g;
  };
  return box_search(dim, cfg, +1.0, gradient, objective);
}

SharpnessResult sharpness_feature(const LayerGraph& model, QuantState state, const Tensor32& x_adv,
                                  const std::vector<int>& y, const SharpnessConfig& cfg) {
  return sharpness_feature(model, std::span<const QuantState>(&state, 1), x_adv, y, cfg);
}

SharpnessResult sharpness_feature(const LayerGraph& model, std::span<const QuantState> states, const Tensor32& x_adv,
                                  const std::vector<int>& y, const SharpnessConfig& cfg) {
  check_batch(x_adv, y);
  check_states(states);
  auto shifted = [&](const Eigen::VectorXf& eta) {
    Tensor32 x = x_adv;
    x.data() += eta;
    return x;
  };
  auto objective = [&](const Eigen::VectorXf& eta) { return mean_loss(model, states, shifted(eta), y); };
  auto gradient = [&](const Eigen::VectorXf& eta) {
    const Tensor32 x = shifted(eta);
    Eigen::VectorXf g = Eigen::VectorXf::Zero(x.size());
    for (auto state : states) g += backprop(model, x, y, state, false, Reduction::mean).grad_input.data();
    return g;
  };
  return box_search(x_adv.size(), cfg, -1.0, gradient, objective);
}

BnStats bn_stats_export(const LayerGraph& model, Index layer) {
  if (layer < 0 || layer >= static_cast<Index>(model.layers.size()))
    throw ValidationError("layer index " + std::to_string(layer) + " out of range");
  const auto& l = model.layers[static_cast<std::size_t>(layer)];
  if (l.kind != LayerKind::batchnorm)
    throw ValidationError("layer " + std::to_string(layer) + " ('" + l.name + "') is not a batchnorm layer");
  return {l.name, l.running_mean.data(), l.running_var.data()};
}

std::string BnStats::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(9) << "layer,channel,running_mean,running_var\n";
  for (Index c = 0; c < channels(); ++c) os << layer << ',' << c << ',' << running_mean[c] << ',' << running_var[c] << '\n';
  return os.str();
}

}  // namespace qaa
