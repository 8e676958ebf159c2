#pragma once

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "qaa/model.hpp"
#include "qaa/quantizer.hpp"
#include "qaa/tensor.hpp"

namespace qaa {

/// Everything the backward pass needs from a forward pass. inputs[i] is the
/// tensor entering layer i; `output` leaves the last layer.
template <typename Scalar>
struct ForwardTrace {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  QuantState state;
  bool train_mode = false;
  std::vector<Tensor<Scalar>> inputs;
  Tensor<Scalar> output;
  std::vector<Index> tap_layers;  // layer index of each feature tap
  // Per-layer batchnorm statistics used in this pass (running stats in eval).
  std::vector<Vector> bn_mean, bn_invstd, bn_batch_var;

  const Tensor<Scalar>& layer_output(std::size_t layer) const {
    return layer + 1 < inputs.size() ? inputs[layer + 1] : output;
  }
  const Tensor<Scalar>& feature(std::size_t tap) const { return layer_output(tap_layers.at(tap)); }
  std::vector<Tensor<Scalar>> features() const {
    std::vector<Tensor<Scalar>> out;
    for (std::size_t k = 0; k < tap_layers.size(); ++k) out.push_back(feature(k));
    return out;
  }
};

template <typename Scalar>
struct ParamGradients {
  std::vector<Tensor<Scalar>> weight;  // per layer; empty for parameter-free layers
  std::vector<Tensor<Scalar>> bias;
  std::vector<Scalar> weight_quant_scale, weight_quant_bias;  // per weight site
  std::vector<Scalar> act_quant_scale, act_quant_bias;        // per activation site
  std::vector<bool> act_quant_active;                          // site contributed a gradient
  std::vector<bool> weight_quant_active;
};

template <typename Scalar>
struct BackwardResult {
  Tensor<Scalar> grad_input;
  ParamGradients<Scalar> grads;
};

template <typename Scalar>
struct BackpropResult {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Scalar loss = 0;  // reduced loss (mean or sum, see Reduction)
  Vector per_example_loss;
  Tensor<Scalar> logits;
  Tensor<Scalar> grad_input;
  ParamGradients<Scalar> grads;
};

enum class Reduction : std::uint8_t { mean, sum };

namespace detail {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
bool weight_quant_on(const BasicLayerGraph<Scalar>& m, const Layer<Scalar>& l, QuantState s) {
  return s.weights_quantized() && !m.weight_quant.at(l.quant_site).passthrough();
}

template <typename Scalar>
bool act_quant_on(const BasicLayerGraph<Scalar>& m, const Layer<Scalar>& l, QuantState s) {
  return s.activations_quantized() && !m.act_quant.at(l.quant_site).passthrough();
}

template <typename Scalar>
Tensor<Scalar> effective_weight(const BasicLayerGraph<Scalar>& m, const Layer<Scalar>& l, QuantState s) {
  if (weight_quant_on(m, l, s)) return fake_quantize(l.weight, m.weight_quant[l.quant_site]);
  return l.weight;
}

/// im2col for a same-padded, stride-1 convolution: rows (c, ky, kx), columns
/// (n, y, x).
template <typename Scalar>
RowMat<Scalar> im2col(const Tensor<Scalar>& x, Index k) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), pad = k / 2;
  const Index hw = h * w;
  RowMat<Scalar> col = RowMat<Scalar>::Zero(c * k * k, n * hw);
  const Scalar* src = x.ptr();
  for (Index ci = 0; ci < c; ++ci)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* row = col.row((ci * k + ky) * k + kx).data();
        for (Index ni = 0; ni < n; ++ni) {
          const Scalar* plane = src + (ni * c + ci) * hw;
          Scalar* dst = row + ni * hw;
          for (Index y = 0; y < h; ++y) {
            const Index sy = y + ky - pad;
            if (sy < 0 || sy >= h) continue;
            for (Index xx = 0; xx < w; ++xx) {
              const Index sx = xx + kx - pad;
              if (sx >= 0 && sx < w) dst[y * w + xx] = plane[sy * w + sx];
            }
          }
        }
      }
  return col;
}

template <typename Scalar>
void col2im_add(const RowMat<Scalar>& col, Index k, Tensor<Scalar>& dx) {
  const Index n = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3), pad = k / 2;
  const Index hw = h * w;
  Scalar* dst = dx.ptr();
  for (Index ci = 0; ci < c; ++ci)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* row = col.row((ci * k + ky) * k + kx).data();
        for (Index ni = 0; ni < n; ++ni) {
          Scalar* plane = dst + (ni * c + ci) * hw;
          const Scalar* src = row + ni * hw;
          for (Index y = 0; y < h; ++y) {
            const Index sy = y + ky - pad;
            if (sy < 0 || sy >= h) continue;
            for (Index xx = 0; xx < w; ++xx) {
              const Index sx = xx + kx - pad;
              if (sx >= 0 && sx < w) plane[sy * w + sx] += src[y * w + xx];
            }
          }
        }
      }
}

/// [N, C, HW] <-> [C, N*HW] reordering used around the convolution GEMM.
template <typename Scalar>
RowMat<Scalar> channels_first(const Tensor<Scalar>& t) {
  const Index n = t.dim(0), c = t.dim(1), hw = t.size() / (n * c);
  RowMat<Scalar> out(c, n * hw);
  for (Index ni = 0; ni < n; ++ni)
    for (Index ci = 0; ci < c; ++ci)
      out.row(ci).segment(ni * hw, hw) = t.data().segment((ni * c + ci) * hw, hw).transpose();
  return out;
}

template <typename Scalar>
void channels_first_store(const RowMat<Scalar>& m, Tensor<Scalar>& t) {
  const Index n = t.dim(0), c = t.dim(1), hw = t.size() / (n * c);
  for (Index ni = 0; ni < n; ++ni)
    for (Index ci = 0; ci < c; ++ci)
      t.data().segment((ni * c + ci) * hw, hw) = m.row(ci).segment(ni * hw, hw).transpose();
}

template <typename Scalar>
Shape batched(Index n, const Shape& per_example) {
  Shape s{n};
  s.insert(s.end(), per_example.begin(), per_example.end());
  return s;
}

/// Number of channel planes and elements per plane for a BN input that is
/// either [N, C] or [N, C, H, W].
template <typename Scalar>
std::pair<Index, Index> bn_layout(const Tensor<Scalar>& x) {
  const Index c = x.dim(1);
  return {c, x.size() / (x.dim(0) * c)};
}

}  // namespace detail

/// Runs the network. Read-only over the model: in train mode batchnorm uses
/// batch statistics and records them in the trace; apply them to the running
/// statistics with update_running_stats().
template <typename Scalar>
ForwardTrace<Scalar> forward_trace(const BasicLayerGraph<Scalar>& model, const Tensor<Scalar>& x, QuantState state,
                                   bool train_mode) {
  using Vector = typename ForwardTrace<Scalar>::Vector;
  using RowMat = detail::RowMat<Scalar>;
  if (x.rank() < 1 || detail::batched<Scalar>(x.batch(), model.input_shape) != x.shape())
    throw ShapeError(model.layers.empty() ? "input" : model.layers.front().name,
                     "input " + shape_string(x.shape()) + " does not match model input " +
                         shape_string(model.input_shape));
  x.require_finite("model input");

  ForwardTrace<Scalar> tr;
  tr.state = state;
  tr.train_mode = train_mode;
  const std::size_t L = model.layers.size();
  tr.inputs.reserve(L);
  tr.bn_mean.resize(L);
  tr.bn_invstd.resize(L);
  tr.bn_batch_var.resize(L);

  Tensor<Scalar> cur = x;
  const Index n = x.batch();
  for (std::size_t li = 0; li < L; ++li) {
    const Layer<Scalar>& l = model.layers[li];
    tr.inputs.push_back(cur);
    Tensor<Scalar> out;
    switch (l.kind) {
      case LayerKind::conv2d: {
        if (cur.rank() != 4 || cur.dim(1) != l.in_features) throw ShapeError(l.name, "bad conv input");
        const Tensor<Scalar> w = detail::effective_weight(model, l, state);
        const RowMat col = detail::im2col(cur, l.kernel);
        const RowMat y = w.matrix(l.out_features, w.size() / l.out_features) * col;
        out = Tensor<Scalar>({n, l.out_features, cur.dim(2), cur.dim(3)});
        detail::channels_first_store(y, out);
        break;
      }
      case LayerKind::linear: {
        if (cur.rank() != 2 || cur.dim(1) != l.in_features) throw ShapeError(l.name, "bad linear input");
        const Tensor<Scalar> w = detail::effective_weight(model, l, state);
        out = Tensor<Scalar>({n, l.out_features});
        out.matrix(n, l.out_features).noalias() =
            cur.matrix(n, l.in_features) * w.matrix(l.out_features, l.in_features).transpose();
        out.matrix(n, l.out_features).rowwise() += l.bias.data().transpose();
        break;
      }
      case LayerKind::batchnorm: {
        const auto [c, plane] = detail::bn_layout(cur);
        if (c != l.in_features) throw ShapeError(l.name, "bad batchnorm input");
        Vector mean(c), invstd(c), var(c);
        const Scalar count = static_cast<Scalar>(n * plane);
        for (Index ci = 0; ci < c; ++ci) {
          if (train_mode) {
            Scalar s = 0, s2 = 0;
            for (Index ni = 0; ni < n; ++ni) s += cur.data().segment((ni * c + ci) * plane, plane).sum();
            const Scalar mu = s / count;
            for (Index ni = 0; ni < n; ++ni)
              s2 += (cur.data().segment((ni * c + ci) * plane, plane).array() - mu).square().sum();
            mean[ci] = mu;
            var[ci] = s2 / count;
          } else {
            mean[ci] = l.running_mean[ci];
            var[ci] = l.running_var[ci];
          }
          invstd[ci] = Scalar(1) / std::sqrt(var[ci] + Scalar(kBatchNormEpsilon));
        }
        out = Tensor<Scalar>(cur.shape());
        for (Index ni = 0; ni < n; ++ni)
          for (Index ci = 0; ci < c; ++ci) {
            const Index off = (ni * c + ci) * plane;
            out.data().segment(off, plane) =
                ((cur.data().segment(off, plane).array() - mean[ci]) * (invstd[ci] * l.weight[ci]) + l.bias[ci])
                    .matrix();
          }
        tr.bn_mean[li] = mean;
        tr.bn_invstd[li] = invstd;
        tr.bn_batch_var[li] = var;
        break;
      }
      case LayerKind::relu: {
        out = cur;
        out.data() = cur.data().cwiseMax(Scalar(0));
        if (detail::act_quant_on(model, l, state)) {
          const auto& p = model.act_quant[l.quant_site];
          out.data() = out.data().unaryExpr([&p](Scalar v) { return fake_quantize_value(v, p); });
        }
        tr.tap_layers.push_back(static_cast<Index>(li));
        break;
      }
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        if (cur.rank() != 4 || cur.dim(2) % 2 || cur.dim(3) % 2) throw ShapeError(l.name, "bad pooling input");
        const Index c = cur.dim(1), h = cur.dim(2), w = cur.dim(3), oh = h / 2, ow = w / 2;
        out = Tensor<Scalar>({n, c, oh, ow});
        const bool is_max = l.kind == LayerKind::maxpool;
        for (Index p = 0; p < n * c; ++p) {
          const Scalar* src = cur.ptr() + p * h * w;
          Scalar* dst = out.ptr() + p * oh * ow;
          for (Index y = 0; y < oh; ++y)
            for (Index xx = 0; xx < ow; ++xx) {
              const Scalar a = src[(2 * y) * w + 2 * xx], b = src[(2 * y) * w + 2 * xx + 1];
              const Scalar c2 = src[(2 * y + 1) * w + 2 * xx], d = src[(2 * y + 1) * w + 2 * xx + 1];
              dst[y * ow + xx] = is_max ? std::max(std::max(a, b), std::max(c2, d)) : (a + b + c2 + d) * Scalar(0.25);
            }
        }
        break;
      }
      case LayerKind::flatten:
        out = cur.reshaped({n, cur.size() / n});
        break;
    }
    if (!out.all_finite()) throw NumericFault("non-finite activation after layer '" + l.name + "'");
    cur = std::move(out);
  }
  tr.output = std::move(cur);
  return tr;
}

/// Exponential moving average of the batch statistics recorded in a
/// train-mode trace: r <- (1 - 0.1) r + 0.1 batch, with the unbiased batch
/// variance.
template <typename Scalar>
void update_running_stats(BasicLayerGraph<Scalar>& model, const ForwardTrace<Scalar>& tr) {
  if (!tr.train_mode) return;
  const Scalar m = Scalar(kBatchNormMomentum);
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    auto& l = model.layers[li];
    if (l.kind != LayerKind::batchnorm) continue;
    const auto [c, plane] = detail::bn_layout(tr.inputs[li]);
    const Index count = tr.inputs[li].batch() * plane;
    const Scalar unbias = count > 1 ? Scalar(count) / Scalar(count - 1) : Scalar(1);
    l.running_mean.data() = (Scalar(1) - m) * l.running_mean.data() + m * tr.bn_mean[li];
    l.running_var.data() = (Scalar(1) - m) * l.running_var.data() + m * unbias * tr.bn_batch_var[li];
  }
}

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> logits;
  std::vector<Tensor<Scalar>> features;
};

/// Inference or training forward. Train mode updates BN running statistics.
template <typename Scalar>
ForwardResult<Scalar> forward(BasicLayerGraph<Scalar>& model, const Tensor<Scalar>& x, QuantState state,
                              bool train_mode) {
  auto tr = forward_trace(model, x, state, train_mode);
  update_running_stats(model, tr);
  return {tr.output, tr.features()};
}

template <typename Scalar>
ForwardResult<Scalar> forward(const BasicLayerGraph<Scalar>& model, const Tensor<Scalar>& x, QuantState state) {
  auto tr = forward_trace(model, x, state, false);
  return {tr.output, tr.features()};
}

/// Reverse pass from an arbitrary output gradient.
template <typename Scalar>
BackwardResult<Scalar> backward(const BasicLayerGraph<Scalar>& model, const ForwardTrace<Scalar>& tr,
                                const Tensor<Scalar>& grad_output, bool param_grads = true) {
  using RowMat = detail::RowMat<Scalar>;
  if (grad_output.shape() != tr.output.shape()) throw ShapeError("output", "gradient shape mismatch");
  const std::size_t L = model.layers.size();
  BackwardResult<Scalar> res;
  auto& g = res.grads;
  g.weight.resize(L);
  g.bias.resize(L);
  g.weight_quant_scale.assign(model.weight_quant.size(), Scalar(0));
  g.weight_quant_bias.assign(model.weight_quant.size(), Scalar(0));
  g.weight_quant_active.assign(model.weight_quant.size(), false);
  g.act_quant_scale.assign(model.act_quant.size(), Scalar(0));
  g.act_quant_bias.assign(model.act_quant.size(), Scalar(0));
  g.act_quant_active.assign(model.act_quant.size(), false);

  const QuantState state = tr.state;
  Tensor<Scalar> grad = grad_output;
  for (std::size_t li = L; li-- > 0;) {
    const Layer<Scalar>& l = model.layers[li];
    const Tensor<Scalar>& in = tr.inputs[li];
    const Index n = in.batch();
    Tensor<Scalar> gin(in.shape());
    switch (l.kind) {
      case LayerKind::conv2d: {
        const Tensor<Scalar> w = detail::effective_weight(model, l, state);
        const Index cols = w.size() / l.out_features;
        const RowMat dy = detail::channels_first(grad);
        const RowMat dcol = w.matrix(l.out_features, cols).transpose() * dy;
        detail::col2im_add(dcol, l.kernel, gin);
        if (!param_grads) break;
        const RowMat col = detail::im2col(in, l.kernel);
        Tensor<Scalar> dw(l.weight.shape());
        dw.matrix(l.out_features, cols).noalias() = dy * col.transpose();
        if (detail::weight_quant_on(model, l, state)) {
          auto ste = ste_backward(dw, l.weight, model.weight_quant[l.quant_site]);
          g.weight[li] = std::move(ste.grad_x);
          g.weight_quant_scale[l.quant_site] = ste.grad_scale;
          g.weight_quant_bias[l.quant_site] = ste.grad_bias;
          g.weight_quant_active[l.quant_site] = true;
        } else {
          g.weight[li] = std::move(dw);
        }
        break;
      }
      case LayerKind::linear: {
        const Tensor<Scalar> w = detail::effective_weight(model, l, state);
        const auto dy = grad.matrix(n, l.out_features);
        gin.matrix(n, l.in_features).noalias() = dy * w.matrix(l.out_features, l.in_features);
        if (!param_grads) break;
        Tensor<Scalar> dw(l.weight.shape());
        dw.matrix(l.out_features, l.in_features).noalias() = dy.transpose() * in.matrix(n, l.in_features);
        Tensor<Scalar> db(l.bias.shape());
        db.data() = dy.colwise().sum().transpose();
        g.bias[li] = std::move(db);
        if (detail::weight_quant_on(model, l, state)) {
          auto ste = ste_backward(dw, l.weight, model.weight_quant[l.quant_site]);
          g.weight[li] = std::move(ste.grad_x);
          g.weight_quant_scale[l.quant_site] = ste.grad_scale;
          g.weight_quant_bias[l.quant_site] = ste.grad_bias;
          g.weight_quant_active[l.quant_site] = true;
        } else {
          g.weight[li] = std::move(dw);
        }
        break;
      }
      case LayerKind::batchnorm: {
        const auto [c, plane] = detail::bn_layout(in);
        const auto& mean = tr.bn_mean[li];
        const auto& invstd = tr.bn_invstd[li];
        Tensor<Scalar> dgamma({c}), dbeta({c});
        const Scalar count = static_cast<Scalar>(n * plane);
        for (Index ci = 0; ci < c; ++ci) {
          Scalar sdy = 0, sdyx = 0;
          for (Index ni = 0; ni < n; ++ni) {
            const Index off = (ni * c + ci) * plane;
            const auto dy = grad.data().segment(off, plane).array();
            const auto xhat = (in.data().segment(off, plane).array() - mean[ci]) * invstd[ci];
            sdy += dy.sum();
            sdyx += (dy * xhat).sum();
          }
          dgamma[ci] = sdyx;
          dbeta[ci] = sdy;
          const Scalar k = l.weight[ci] * invstd[ci];
          for (Index ni = 0; ni < n; ++ni) {
            const Index off = (ni * c + ci) * plane;
            const auto dy = grad.data().segment(off, plane).array();
            if (tr.train_mode) {
              const auto xhat = (in.data().segment(off, plane).array() - mean[ci]) * invstd[ci];
              gin.data().segment(off, plane) = (k / count * (count * dy - sdy - xhat * sdyx)).matrix();
            } else {
              gin.data().segment(off, plane) = (k * dy).matrix();
            }
          }
        }
        g.weight[li] = std::move(dgamma);
        g.bias[li] = std::move(dbeta);
        break;
      }
      case LayerKind::relu: {
        Tensor<Scalar> dpre = grad;
        if (detail::act_quant_on(model, l, state)) {
          Tensor<Scalar> relu_out = in;
          relu_out.data() = in.data().cwiseMax(Scalar(0));
          auto ste = ste_backward(grad, relu_out, model.act_quant[l.quant_site]);
          dpre = std::move(ste.grad_x);
          g.act_quant_scale[l.quant_site] = ste.grad_scale;
          g.act_quant_bias[l.quant_site] = ste.grad_bias;
          g.act_quant_active[l.quant_site] = true;
        }
        gin.data() = (in.data().array() > Scalar(0)).select(dpre.data(), Scalar(0));
        break;
      }
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        const Index c = in.dim(1), h = in.dim(2), w = in.dim(3), oh = h / 2, ow = w / 2;
        const bool is_max = l.kind == LayerKind::maxpool;
        for (Index p = 0; p < n * c; ++p) {
          const Scalar* src = in.ptr() + p * h * w;
          const Scalar* dy = grad.ptr() + p * oh * ow;
          Scalar* dx = gin.ptr() + p * h * w;
          for (Index y = 0; y < oh; ++y)
            for (Index xx = 0; xx < ow; ++xx) {
              const Index idx[4] = {(2 * y) * w + 2 * xx, (2 * y) * w + 2 * xx + 1, (2 * y + 1) * w + 2 * xx,
                                    (2 * y + 1) * w + 2 * xx + 1};
              const Scalar d = dy[y * ow + xx];
              if (is_max) {
                Index best = idx[0];
                for (int t = 1; t < 4; ++t)
                  if (src[idx[t]] > src[best]) best = idx[t];
                dx[best] += d;
              } else {
                for (int t = 0; t < 4; ++t) dx[idx[t]] += d * Scalar(0.25);
              }
            }
        }
        break;
      }
      case LayerKind::flatten:
        gin = grad.reshaped(in.shape());
        break;
    }
    grad = std::move(gin);
  }
  res.grad_input = std::move(grad);
  return res;
}

/// Softmax cross-entropy (or the logit-sum test head). Returns per-example
/// losses and d(reduced loss)/d(logits).
template <typename Scalar>
std::pair<typename BackpropResult<Scalar>::Vector, Tensor<Scalar>> loss_and_grad(
    LossHead head, const Tensor<Scalar>& logits, const std::vector<int>& labels, Reduction reduction) {
  using Vector = typename BackpropResult<Scalar>::Vector;
  const Index n = logits.batch(), c = logits.per_example();
  Vector per(n);
  Tensor<Scalar> dlogits(logits.shape());
  const Scalar scale = reduction == Reduction::mean ? Scalar(1) / Scalar(n) : Scalar(1);
  if (head == LossHead::logit_sum) {
    for (Index i = 0; i < n; ++i) per[i] = logits.rows().row(i).sum();
    dlogits.data().setConstant(scale);
    return {per, dlogits};
  }
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("loss", "label count does not match batch");
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw ValidationError("label " + std::to_string(y) + " out of range");
    const auto z = logits.rows().row(i);
    const Scalar mx = z.maxCoeff();
    const auto e = (z.array() - mx).exp();
    const Scalar sum = e.sum();
    per[i] = std::log(sum) + mx - z[y];
    auto d = dlogits.rows().row(i);
    d = (e / sum).matrix() * scale;
    d[y] -= scale;
  }
  return {per, dlogits};
}

/// Forward + loss + backward in one call. Evaluation-mode BN unless
/// train_mode is set (running statistics are not touched here).
template <typename Scalar>
BackpropResult<Scalar> backprop(const BasicLayerGraph<Scalar>& model, const Tensor<Scalar>& x,
                                const std::vector<int>& labels, QuantState state, bool train_mode = false,
                                Reduction reduction = Reduction::mean, ForwardTrace<Scalar>* trace_out = nullptr) {
  auto tr = forward_trace(model, x, state, train_mode);
  auto [per, dlogits] = loss_and_grad(model.head, tr.output, labels, reduction);
  auto back = backward(model, tr, dlogits);
  BackpropResult<Scalar> r;
  r.per_example_loss = per;
  r.loss = reduction == Reduction::mean ? per.mean() : per.sum();
  if (!std::isfinite(static_cast<double>(r.loss))) throw NumericFault("non-finite loss");
  r.logits = tr.output;
  r.grad_input = std::move(back.grad_input);
  r.grads = std::move(back.grads);
  if (trace_out) *trace_out = std::move(tr);
  return r;
}

/// Smallest |pre-activation| over every ReLU input; grad_check points should
/// keep this above 10 * step.
template <typename Scalar>
Scalar min_relu_margin(const BasicLayerGraph<Scalar>& model, const Tensor<Scalar>& x, bool train_mode = false) {
  const auto tr = forward_trace(model, x, QuantState::full(), train_mode);
  Scalar m = std::numeric_limits<Scalar>::infinity();
  for (std::size_t li = 0; li < model.layers.size(); ++li)
    if (model.layers[li].kind == LayerKind::relu) m = std::min(m, tr.inputs[li].data().cwiseAbs().minCoeff());
  return m;
}

/// Central finite-difference check of every input and parameter coordinate
/// against the analytic backward pass. The objective is a fixed random
/// weighting of the fragment's outputs. Returns the maximum relative error
/// |a - n| / max(|a|, |n|, 1e-12).
template <typename Scalar>
Scalar grad_check(const BasicLayerGraph<Scalar>& fragment, const Tensor<Scalar>& point, Scalar step,
                  bool train_mode = false) {
  if (fragment.any_quantizer())
    throw ValidationError(
        "grad_check rejects fragments with quantizer sites: the straight-through estimator is not a derivative "
        "of the rounding function, so finite differences cannot agree with it");
  const QuantState state = QuantState::full();
  auto tr = forward_trace(fragment, point, state, train_mode);
  Tensor<Scalar> weights(tr.output.shape());
  std::mt19937_64 rng(0x5eedULL);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (Index i = 0; i < weights.size(); ++i) weights[i] = static_cast<Scalar>(dist(rng));

  auto objective = [&](const BasicLayerGraph<Scalar>& m, const Tensor<Scalar>& x) {
    const auto t = forward_trace(m, x, state, train_mode);
    return static_cast<double>(t.output.data().dot(weights.data()));
  };
  const auto analytic = backward(fragment, tr, weights);

  double worst = 0;
  auto compare = [&worst](double a, double num) {
    const double denom = std::max({std::abs(a), std::abs(num), 1e-12});
    worst = std::max(worst, std::abs(a - num) / denom);
  };

  Tensor<Scalar> x = point;
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar orig = x[i];
    x[i] = orig + step;
    const double up = objective(fragment, x);
    x[i] = orig - step;
    const double down = objective(fragment, x);
    x[i] = orig;
    compare(static_cast<double>(analytic.grad_input[i]), (up - down) / (2.0 * static_cast<double>(step)));
  }

  BasicLayerGraph<Scalar> m = fragment;
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    for (int which = 0; which < 2; ++which) {
      Tensor<Scalar>& p = which == 0 ? m.layers[li].weight : m.layers[li].bias;
      const Tensor<Scalar>& gp = which == 0 ? analytic.grads.weight[li] : analytic.grads.bias[li];
      if (p.empty()) continue;
      for (Index i = 0; i < p.size(); ++i) {
        const Scalar orig = p[i];
        p[i] = orig + step;
        const double up = objective(m, point);
        p[i] = orig - step;
        const double down = objective(m, point);
        p[i] = orig;
        compare(static_cast<double>(gp[i]), (up - down) / (2.0 * static_cast<double>(step)));
      }
    }
  }
  return static_cast<Scalar>(worst);
}

/// argmax per row of a [N, C] tensor; ties resolve to the lowest index.
template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.batch()));
  for (Index i = 0; i < logits.batch(); ++i) {
    const auto row = logits.rows().row(i);
    Index best = 0;
    for (Index j = 1; j < row.size(); ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace qaa
