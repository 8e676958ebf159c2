#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "qaa/tensor.hpp"

namespace qaa {

inline constexpr double kScaleFloor = 1e-8;
inline constexpr int kPassthroughBits = 32;

/// Per-tensor uniform affine quantizer: value = scale * code + bias, where
/// code is an integer on a 2^bitwidth level grid. Signed grids are used for
/// weights, unsigned grids for post-ReLU activations. A bitwidth of 32 marks
/// the site as full precision; every quantizer op is then the identity.
template <typename Scalar>
struct BasicQuantParams {
  int bitwidth = kPassthroughBits;
  Scalar scale = Scalar(1);
  Scalar bias = Scalar(0);
  bool is_signed = false;

  bool passthrough() const noexcept { return bitwidth >= kPassthroughBits; }

  Scalar grid_min() const noexcept {
    return is_signed ? -std::ldexp(Scalar(1), bitwidth - 1) : Scalar(0);
  }
  Scalar grid_max() const noexcept {
    return is_signed ? std::ldexp(Scalar(1), bitwidth - 1) - 1 : std::ldexp(Scalar(1), bitwidth) - 1;
  }

  void validate() const {
    if (passthrough()) {
      if (bitwidth != kPassthroughBits) throw ValidationError("bitwidth must be in [1, 8] or 32");
      return;
    }
    if (bitwidth < 1 || bitwidth > 8)
      throw ValidationError("bitwidth must be in [1, 8] or 32, got " + std::to_string(bitwidth));
    if (!(scale >= Scalar(kScaleFloor)) || !std::isfinite(static_cast<double>(scale)))
      throw ValidationError("quantizer scale below floor or non-finite");
    if (!std::isfinite(static_cast<double>(bias))) throw ValidationError("quantizer bias non-finite");
  }

  template <typename To>
  BasicQuantParams<To> cast() const {
    return {bitwidth, static_cast<To>(scale), static_cast<To>(bias), is_signed};
  }

  bool operator==(const BasicQuantParams&) const = default;
};

using QuantParams = BasicQuantParams<float>;

/// Integer grid code of one value: clamp(round((x - b) / s)), round half away
/// from zero.
template <typename Scalar>
inline Scalar quantize_value(Scalar x, const BasicQuantParams<Scalar>& p) {
  const Scalar v = std::round((x - p.bias) / p.scale);
  return std::clamp(v, p.grid_min(), p.grid_max());
}

template <typename Scalar>
inline Scalar fake_quantize_value(Scalar x, const BasicQuantParams<Scalar>& p) {
  if (p.passthrough()) return x;
  return p.scale * quantize_value(x, p) + p.bias;
}

template <typename Scalar>
struct GridTensor {
  Tensor<Scalar> codes;  // integer values; the input itself when passthrough
  bool passthrough = false;
};

template <typename Scalar>
GridTensor<Scalar> quantize(const Tensor<Scalar>& x, const BasicQuantParams<Scalar>& p) {
  p.validate();
  if (p.passthrough()) return {x, true};
  Tensor<Scalar> out = x;
  out.data() = x.data().unaryExpr([&p](Scalar v) { return quantize_value(v, p); });
  return {std::move(out), false};
}

template <typename Scalar>
Tensor<Scalar> fake_quantize(const Tensor<Scalar>& x, const BasicQuantParams<Scalar>& p) {
  p.validate();
  if (p.passthrough()) return x;
  Tensor<Scalar> out = x;
  out.data() = x.data().unaryExpr([&p](Scalar v) { return fake_quantize_value(v, p); });
  return out;
}

template <typename Scalar>
struct SteGradients {
  Tensor<Scalar> grad_x;
  Scalar grad_scale = 0;
  Scalar grad_bias = 0;
};

/// Surrogate gradients of fake_quantize. With v = (x - b) / s:
///   inside [grid_min, grid_max]: dx = g,  ds = g * (round(v) - v),  db = 0
///   outside:                     dx = 0,  ds = g * endpoint,        db = g
/// Scale and bias gradients are summed over the tensor in index order.
template <typename Scalar>
SteGradients<Scalar> ste_backward(const Tensor<Scalar>& grad_out, const Tensor<Scalar>& x,
                                  const BasicQuantParams<Scalar>& p) {
  if (grad_out.shape() != x.shape()) throw ShapeError("quantizer", "gradient and input shapes differ");
  if (p.passthrough()) return {grad_out, Scalar(0), Scalar(0)};
  const Scalar lo = p.grid_min(), hi = p.grid_max();
  SteGradients<Scalar> out{Tensor<Scalar>(x.shape()), Scalar(0), Scalar(0)};
  const Index n = x.size();
  for (Index i = 0; i < n; ++i) {
    const Scalar g = grad_out[i];
    const Scalar v = (x[i] - p.bias) / p.scale;
    if (v < lo) {
      out.grad_scale += g * lo;
      out.grad_bias += g;
    } else if (v > hi) {
      out.grad_scale += g * hi;
      out.grad_bias += g;
    } else {
      out.grad_x[i] = g;
      out.grad_scale += g * (std::round(v) - v);
    }
  }
  return out;
}

/// Min-max calibration. Unsigned: b = min, s = (max - min) / (2^q - 1).
/// Signed: symmetric range [-max|x|, max|x|] with b = 0. A constant sample set
/// yields the degenerate record s = floor, b = constant.
template <typename Scalar>
BasicQuantParams<Scalar> calibrate_minmax(const Tensor<Scalar>& samples, int bitwidth, bool is_signed) {
  if (samples.empty()) throw ValidationError("calibration requires a non-empty sample set");
  BasicQuantParams<Scalar> p{bitwidth, Scalar(1), Scalar(0), is_signed};
  if (p.passthrough()) {
    p.validate();
    return p;
  }
  const Scalar mn = samples.data().minCoeff();
  const Scalar mx = samples.data().maxCoeff();
  const Scalar levels = std::ldexp(Scalar(1), bitwidth) - 1;
  if (mn == mx) {
    p.scale = Scalar(kScaleFloor);
    p.bias = mn;
  } else if (is_signed) {
    const Scalar amax = std::max(std::abs(mn), std::abs(mx));
    p.scale = std::max(Scalar(2) * amax / levels, Scalar(kScaleFloor));
    p.bias = 0;
  } else {
    p.scale = std::max((mx - mn) / levels, Scalar(kScaleFloor));
    p.bias = mn;
  }
  p.validate();
  return p;
}

template <typename Scalar>
double fake_quantize_mse(const Tensor<Scalar>& samples, const BasicQuantParams<Scalar>& p) {
  double acc = 0;
  for (Index i = 0; i < samples.size(); ++i) {
    const double d = static_cast<double>(fake_quantize_value(samples[i], p)) - static_cast<double>(samples[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(samples.size());
}

/// Grid search over (s, b): s in [0.2, 1.2] x the min-max scale, b across the
/// sample range, each axis with grid_size points. Lowest reconstruction MSE
/// wins; ties go to the smaller s, then the smaller b.
template <typename Scalar>
BasicQuantParams<Scalar> calibrate_mse(const Tensor<Scalar>& samples, int bitwidth, bool is_signed,
                                       int grid_size) {
  if (grid_size < 2) throw ValidationError("calibrate_mse needs grid_size >= 2");
  const auto reference = calibrate_minmax(samples, bitwidth, is_signed);
  if (reference.passthrough()) return reference;
  const Scalar mn = samples.data().minCoeff();
  const Scalar mx = samples.data().maxCoeff();
  if (mn == mx) return reference;

  const Scalar unsigned_scale = (mx - mn) / (std::ldexp(Scalar(1), bitwidth) - 1);
  const Scalar base_scale = is_signed ? reference.scale : unsigned_scale;
  const double steps = grid_size - 1;

  BasicQuantParams<Scalar> best = reference;
  double best_mse = std::numeric_limits<double>::infinity();
  for (int i = 0; i < grid_size; ++i) {
    // Integer numerator/denominator so that the factor 1.0 is hit exactly.
    const double factor = (2.0 * steps + 10.0 * i) / (10.0 * steps);
    const Scalar s = std::max(static_cast<Scalar>(factor * base_scale), Scalar(kScaleFloor));
    for (int j = 0; j < grid_size; ++j) {
      const Scalar b = j == 0 ? mn : static_cast<Scalar>(mn + (mx - mn) * (j / steps));
      const BasicQuantParams<Scalar> cand{bitwidth, s, b, is_signed};
      const double mse = fake_quantize_mse(samples, cand);
      if (mse < best_mse) {
        best_mse = mse;
        best = cand;
      }
    }
  }
  return best;
}

}  // namespace qaa
