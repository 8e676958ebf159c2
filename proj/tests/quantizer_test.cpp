#include <gtest/gtest.h>

#include <random>

#include "qaa/quantizer.hpp"

namespace qaa {
namespace {

Tensor32 scalar(float v) { return Tensor32::from({1}, {v}); }

const QuantParams kTwoBitHalf{2, 0.5f, 0.0f, false};

TEST(Quantize, ScalarReferenceValues) {
  EXPECT_EQ(quantize(scalar(0.9f), kTwoBitHalf).codes[0], 2.0f);
  EXPECT_EQ(quantize(scalar(0.0f), kTwoBitHalf).codes[0], 0.0f);
  EXPECT_EQ(quantize(scalar(10.0f), kTwoBitHalf).codes[0], 3.0f);
}

TEST(Quantize, TiesRoundAwayFromZero) {
  const QuantParams p{4, 1.0f, 0.0f, true};
  EXPECT_EQ(quantize(scalar(2.5f), p).codes[0], 3.0f);
  EXPECT_EQ(quantize(scalar(-2.5f), p).codes[0], -3.0f);
  EXPECT_EQ(quantize(scalar(-100.0f), p).codes[0], -8.0f);
  EXPECT_EQ(quantize(scalar(100.0f), p).codes[0], 7.0f);
}

TEST(Quantize, PassthroughIsFlagged) {
  const QuantParams p{32, 1.0f, 0.0f, false};
  const auto r = quantize(scalar(0.123f), p);
  EXPECT_TRUE(r.passthrough);
  EXPECT_EQ(r.codes[0], 0.123f);
  EXPECT_EQ(fake_quantize(scalar(0.123f), p)[0], 0.123f);
}

TEST(Quantize, InvalidParamsRejected) {
  EXPECT_THROW(quantize(scalar(1), QuantParams{9, 1.0f, 0.0f, false}), ValidationError);
  EXPECT_THROW(quantize(scalar(1), QuantParams{4, 1e-9f, 0.0f, false}), ValidationError);
  EXPECT_THROW(quantize(scalar(1), QuantParams{0, 1.0f, 0.0f, false}), ValidationError);
}

TEST(FakeQuantize, ReferenceValues) {
  EXPECT_EQ(fake_quantize(scalar(0.9f), kTwoBitHalf)[0], 1.0f);
  EXPECT_EQ(fake_quantize(scalar(0.5f), kTwoBitHalf)[0], 0.5f);
  EXPECT_EQ(fake_quantize(scalar(-0.2f), kTwoBitHalf)[0], 0.0f);
}

TEST(SteBackward, ClosedForms) {
  const auto inside = ste_backward(scalar(1), scalar(0.9f), kTwoBitHalf);
  EXPECT_EQ(inside.grad_x[0], 1.0f);
  EXPECT_FLOAT_EQ(inside.grad_scale, 0.2f);
  EXPECT_EQ(inside.grad_bias, 0.0f);

  const auto above = ste_backward(scalar(1), scalar(10.0f), kTwoBitHalf);
  EXPECT_EQ(above.grad_x[0], 0.0f);
  EXPECT_EQ(above.grad_scale, 3.0f);
  EXPECT_EQ(above.grad_bias, 1.0f);

  const auto below = ste_backward(scalar(2), scalar(-1.5f), QuantParams{2, 0.5f, 0.0f, true});
  EXPECT_EQ(below.grad_x[0], 0.0f);
  EXPECT_EQ(below.grad_scale, -4.0f);
  EXPECT_EQ(below.grad_bias, 2.0f);
}

TEST(SteBackward, PassthroughIsIdentity) {
  const auto g = Tensor32::from({3}, {1, -2, 3});
  const auto r = ste_backward(g, Tensor32::from({3}, {5, 6, 7}), QuantParams{});
  EXPECT_EQ(r.grad_x, g);
  EXPECT_EQ(r.grad_scale, 0.0f);
  EXPECT_EQ(r.grad_bias, 0.0f);
}

TEST(CalibrateMinmax, Ranges) {
  const auto p = calibrate_minmax(Tensor32::from({3}, {0.0f, 0.4f, 1.0f}), 2, false);
  EXPECT_FLOAT_EQ(p.scale, 1.0f / 3.0f);
  EXPECT_EQ(p.bias, 0.0f);

  const auto q = calibrate_minmax(Tensor32::from({3}, {-1.0f, 0.2f, 1.0f}), 3, false);
  EXPECT_FLOAT_EQ(q.scale, 2.0f / 7.0f);
  EXPECT_EQ(q.bias, -1.0f);

  const auto c = calibrate_minmax(Tensor32::constant({5}, 0.7f), 4, false);
  EXPECT_FLOAT_EQ(c.scale, 1e-8f);
  EXPECT_EQ(c.bias, 0.7f);

  const auto s = calibrate_minmax(Tensor32::from({2}, {-0.5f, 0.25f}), 2, true);
  EXPECT_FLOAT_EQ(s.scale, 1.0f / 3.0f);
  EXPECT_EQ(s.bias, 0.0f);

  EXPECT_THROW(calibrate_minmax(Tensor32(), 2, false), ValidationError);
}

TEST(CalibrateMse, ExactGridHasZeroError) {
  const auto samples = Tensor32::from({6}, {0.0f, 0.5f, 1.0f, 1.5f, 0.5f, 1.0f});
  const auto p = calibrate_mse(samples, 2, false, 11);
  EXPECT_EQ(fake_quantize_mse(samples, p), 0.0);
  EXPECT_EQ(p.scale, 0.5f);
  EXPECT_EQ(p.bias, 0.0f);
}

TEST(CalibrateMse, OneBitPair) {
  const auto samples = Tensor32::from({2}, {0.0f, 1.0f});
  const auto p = calibrate_mse(samples, 1, false, 21);
  EXPECT_EQ(p.scale, 1.0f);
  EXPECT_EQ(p.bias, 0.0f);
  EXPECT_EQ(fake_quantize_mse(samples, p), 0.0);
}

TEST(CalibrateMse, OutlierShrinksScaleAgainstBruteForce) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor32 samples({100});
  for (Index i = 0; i < 99; ++i) samples[i] = u(rng);
  samples[99] = 10.0f;
  constexpr int kGrid = 16;
  const auto p = calibrate_mse(samples, 3, false, kGrid);
  const auto mm = calibrate_minmax(samples, 3, false);
  EXPECT_LT(p.scale, mm.scale);

  // Brute-force oracle over the documented candidate grid.
  const float mn = samples.data().minCoeff(), mx = samples.data().maxCoeff();
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kGrid; ++i)
    for (int j = 0; j < kGrid; ++j) {
      const double f = 0.2 + i / double(kGrid - 1);
      const QuantParams c{3, static_cast<float>(f * mm.scale), static_cast<float>(mn + (mx - mn) * j / (kGrid - 1.0)),
                          false};
      best = std::min(best, fake_quantize_mse(samples, c));
    }
  EXPECT_NEAR(fake_quantize_mse(samples, p), best, 1e-6 * best);
  EXPECT_LT(fake_quantize_mse(samples, p), fake_quantize_mse(samples, mm));
}

TEST(CalibrateMse, RejectsTinyGrid) {
  EXPECT_THROW(calibrate_mse(Tensor32::from({2}, {0, 1}), 2, false, 1), ValidationError);
}

// Random-parameter properties; the acceptance binary runs the full 1e5 sweep.
TEST(FakeQuantize, Properties) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> bits(1, 8);
  std::uniform_real_distribution<float> scale(1e-3f, 1.0f), bias(-1.0f, 1.0f), val(-3.0f, 3.0f);
  for (int t = 0; t < 2000; ++t) {
    const QuantParams p{bits(rng), scale(rng), bias(rng), (t & 1) == 1};
    const float x = val(rng), y = val(rng);
    const float fx = fake_quantize_value(x, p);
    const float k = quantize_value(x, p);
    EXPECT_EQ(fx, p.scale * k + p.bias);
    EXPECT_EQ(k, std::round(k));
    EXPECT_GE(k, p.grid_min());
    EXPECT_LE(k, p.grid_max());
    EXPECT_EQ(fake_quantize_value(fx, p), fx);
    if (x <= y) EXPECT_LE(fx, fake_quantize_value(y, p));
  }
}

}  // namespace
}  // namespace qaa
