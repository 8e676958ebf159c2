#include <gtest/gtest.h>

#include <random>

#include "qaa/engine.hpp"
#include "qaa/model.hpp"

namespace qaa {
namespace {

// Direct (non-GEMM) same-padded convolution used as an independent oracle.
Tensor64 direct_conv(const Tensor64& x, const Tensor64& w) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index co = w.dim(0), k = w.dim(2), pad = k / 2;
  Tensor64 out({n, co, h, wd});
  for (Index b = 0; b < n; ++b)
    for (Index o = 0; o < co; ++o)
      for (Index y = 0; y < h; ++y)
        for (Index xx = 0; xx < wd; ++xx) {
          double acc = 0;
          for (Index ci = 0; ci < c; ++ci)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index sy = y + ky - pad, sx = xx + kx - pad;
                if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                acc += w[((o * c + ci) * k + ky) * k + kx] * x[((b * c + ci) * h + sy) * wd + sx];
              }
          out[((b * co + o) * h + y) * wd + xx] = acc;
        }
  return out;
}

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<Scalar> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(d(rng));
  return t;
}

void randomize(LayerGraph& m, std::uint64_t seed) {
  initialize(m, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<float> d(0.5f, 1.5f), u(-0.3f, 0.3f);
  for (auto& l : m.layers)
    if (l.kind == LayerKind::batchnorm) {
      for (Index c = 0; c < l.in_features; ++c) {
        l.weight[c] = d(rng);
        l.bias[c] = u(rng);
        l.running_mean[c] = u(rng);
        l.running_var[c] = d(rng);
      }
    } else if (l.kind == LayerKind::linear) {
      for (Index i = 0; i < l.bias.size(); ++i) l.bias[i] = u(rng);
    }
}

TEST(Forward, IdentityLinear) {
  auto m = GraphBuilder("id", {2}).linear(2).build();
  m.layers[0].weight = Tensor32::from({2, 2}, {1, 0, 0, 1});
  const auto out = forward(m, Tensor32::from({1, 2}, {1, 2}), QuantState::full());
  EXPECT_EQ(out.logits, Tensor32::from({1, 2}, {1, 2}));
}

TEST(Forward, ConvDiagonalFilterOnTwoByTwo) {
  // A 2x2 filter [[1,0],[0,1]] applied without padding at the top-left corner
  // is the (center, center+1) block of a 3x3 same-padded kernel.
  auto m = GraphBuilder("conv", {1, 2, 2}).conv(1, 3).flatten().build();
  m.layers[0].weight = Tensor32::from({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto out = forward(m, Tensor32::from({1, 1, 2, 2}, {1, 2, 3, 4}), QuantState::full());
  EXPECT_EQ(out.logits[0], 5.0f);
}

TEST(Forward, ConvMatchesDirectOracle) {
  std::mt19937_64 rng(3);
  for (Index k : {1, 3}) {
    auto m = GraphBuilder("conv", {3, 6, 4}).conv(5, k).flatten().build();
    initialize(m, 11);
    const auto x = random_tensor<double>({2, 3, 6, 4}, rng);
    const auto md = m.cast<double>();
    const auto got = forward(md, x, QuantState::full()).logits;
    const auto want = direct_conv(x, md.layers[0].weight);
    ASSERT_EQ(got.size(), want.size());
    EXPECT_LT((got.data() - want.data()).cwiseAbs().maxCoeff(), 1e-12) << "kernel " << k;
  }
}

TEST(Forward, FullStateBypassesQuantizersBitExactly) {
  auto m = make_architecture("convnet-a", {1, 8, 8}, 4);
  initialize(m, 5);
  auto quantized = m;
  set_uniform_bitwidth(quantized, 2);
  auto sentinel = m;
  set_uniform_bitwidth(sentinel, 32);
  std::mt19937_64 rng(1);
  const auto x = random_tensor<float>({3, 1, 8, 8}, rng, 0, 1);
  const auto plain = forward(sentinel, x, QuantState::quantized()).logits;
  EXPECT_EQ(forward(quantized, x, QuantState::full()).logits, plain);
  EXPECT_EQ(forward(m, x, QuantState::full()).logits, plain);
}

TEST(Forward, ShapeMismatchNamesLayer) {
  auto m = make_architecture("mlp-3", {6}, 3);
  try {
    forward(m, Tensor32({1, 5}), QuantState::full());
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.layer(), "linear0");
  }
}

TEST(Forward, NonFiniteInputIsRejected) {
  auto m = make_architecture("mlp-3", {2}, 2);
  auto x = Tensor32::from({1, 2}, {0, std::numeric_limits<float>::quiet_NaN()});
  EXPECT_THROW(forward(m, x, QuantState::full()), NumericFault);
}

TEST(Forward, FeaturesAreReluOutputs) {
  auto m = make_architecture("convnet-b", {1, 8, 8}, 3);
  initialize(m, 2);
  std::mt19937_64 rng(9);
  const auto out = forward(m, random_tensor<float>({2, 1, 8, 8}, rng, 0, 1), QuantState::full());
  ASSERT_EQ(static_cast<Index>(out.features.size()), m.tap_count());
  for (const auto& f : out.features) EXPECT_GE(f.data().minCoeff(), 0.0f);
}

TEST(Forward, DeterministicAcrossCalls) {
  auto m = make_architecture("convnet-b", {1, 8, 8}, 3);
  initialize(m, 2);
  std::mt19937_64 rng(9);
  const auto x = random_tensor<float>({4, 1, 8, 8}, rng, 0, 1);
  const auto a = backprop(m, x, {0, 1, 2, 0}, QuantState::full());
  const auto b = backprop(m, x, {0, 1, 2, 0}, QuantState::full());
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.grad_input, b.grad_input);
}

TEST(Backprop, SumHeadGivesUnitInputGradient) {
  auto m = GraphBuilder("sum", {5}).build();
  m.head = LossHead::logit_sum;
  const auto r = backprop(m, Tensor32::from({1, 5}, {1, -2, 3, 0.5f, 7}), {}, QuantState::full());
  EXPECT_EQ(r.grad_input, Tensor32::constant({1, 5}, 1.0f));
  EXPECT_FLOAT_EQ(r.loss, 9.5f);
}

TEST(Backprop, UniformLogitsCrossEntropyGradient) {
  constexpr int kClasses = 4;
  auto m = GraphBuilder("zero", {3}).linear(kClasses).build();  // zero weights -> uniform logits
  ForwardTrace<float> tr;
  backprop(m, Tensor32::from({1, 3}, {0.3f, -1, 2}), {2}, QuantState::full(), false, Reduction::mean, &tr);
  const auto [per, dlogits] = loss_and_grad(LossHead::cross_entropy, tr.output, {2}, Reduction::mean);
  for (int k = 0; k < kClasses; ++k)
    EXPECT_FLOAT_EQ(dlogits[k], 1.0f / kClasses - (k == 2 ? 1.0f : 0.0f));
  EXPECT_NEAR(per[0], std::log(4.0f), 1e-6);
}

TEST(GradCheck, LinearLayer) {
  std::mt19937_64 rng(4);
  auto m = GraphBuilder("lin", {7}).linear(4).build();
  randomize(m, 1);
  const auto md = m.cast<double>();
  EXPECT_LT(grad_check(md, random_tensor<double>({3, 7}, rng), 1e-6), 1e-6);
}

TEST(GradCheck, ReluAwayFromKink) {
  std::mt19937_64 rng(4);
  auto m = GraphBuilder("relu", {10}).relu().build();
  auto x = random_tensor<double>({2, 10}, rng);
  for (Index i = 0; i < x.size(); ++i)
    if (std::abs(x[i]) < 0.1) x[i] = x[i] < 0 ? -0.1 - x[i] : 0.1 + x[i];
  EXPECT_LT(grad_check(m.cast<double>(), x, 1e-6), 1e-6);
}

TEST(GradCheck, ConvBatchnormReluEval) {
  std::mt19937_64 rng(8);
  auto m = GraphBuilder("cbr", {2, 4, 4}).conv(3, 3).batchnorm().relu().flatten().build();
  randomize(m, 3);
  const auto md = m.cast<double>();
  Tensor64 x;
  do x = random_tensor<double>({2, 2, 4, 4}, rng);
  while (min_relu_margin(md, x) < 1e-4);
  EXPECT_LT(grad_check(md, x, 1e-6), 1e-4);
}

TEST(GradCheck, TrainModeBatchnorm) {
  std::mt19937_64 rng(8);
  auto m = GraphBuilder("bn", {3, 2, 2}).batchnorm().flatten().linear(2).build();
  randomize(m, 3);
  EXPECT_LT(grad_check(m.cast<double>(), random_tensor<double>({4, 3, 2, 2}, rng), 1e-6, true), 1e-4);
}

TEST(GradCheck, PoolingLayers) {
  std::mt19937_64 rng(12);
  auto m = GraphBuilder("pool", {2, 4, 4}).maxpool().avgpool().flatten().linear(3).build();
  randomize(m, 4);
  EXPECT_LT(grad_check(m.cast<double>(), random_tensor<double>({2, 2, 4, 4}, rng), 1e-6), 1e-4);
}

TEST(GradCheck, RejectsQuantizerSites) {
  auto m = GraphBuilder("q", {3}).linear(2).build();
  set_uniform_bitwidth(m, 4);
  EXPECT_THROW(grad_check(m.cast<double>(), Tensor64({1, 3}), 1e-6), ValidationError);
}

TEST(Backprop, WholeNetworkMatchesFiniteDifferencesOnInput) {
  std::mt19937_64 rng(21);
  auto m = make_architecture("convnet-a", {1, 4, 4}, 3);
  randomize(m, 6);
  const auto md = m.cast<double>();
  Tensor64 x;
  do x = random_tensor<double>({1, 1, 4, 4}, rng, 0, 1);
  while (min_relu_margin(md, x) < 1e-4);
  const std::vector<int> y{1};
  const auto r = backprop(md, x, y, QuantState::full());
  const double h = 1e-6;
  for (Index i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double num = (backprop(md, xp, y, QuantState::full()).loss - backprop(md, xm, y, QuantState::full()).loss) / (2 * h);
    EXPECT_NEAR(r.grad_input[i], num, 1e-4 * std::max(1.0, std::abs(num)));
  }
}

TEST(Backprop, QuantizedActivationsExposeScaleGradients) {
  auto m = make_architecture("mlp-3", {4}, 3);
  initialize(m, 1);
  set_uniform_bitwidth(m, 4);
  for (auto& p : m.act_quant) p.scale = 0.05f;
  for (auto& p : m.weight_quant) p.scale = 0.05f;
  std::mt19937_64 rng(2);
  const auto x = random_tensor<float>({8, 4}, rng, 0, 1);
  const std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1};
  const auto full_act = backprop(m, x, y, QuantState::weights_only());
  for (bool active : full_act.grads.act_quant_active) EXPECT_FALSE(active);
  for (bool active : full_act.grads.weight_quant_active) EXPECT_TRUE(active);
  const auto quant = backprop(m, x, y, QuantState::quantized());
  for (bool active : quant.grads.act_quant_active) EXPECT_TRUE(active);
}

TEST(BatchNorm, EvalUsesRunningStatsAndTrainUpdatesByEma) {
  auto m = GraphBuilder("bn", {2}).batchnorm().build();
  const auto x = Tensor32::constant({4, 2}, 3.0f);
  const auto eval = forward(static_cast<const LayerGraph&>(m), x, QuantState::full());
  EXPECT_NEAR(eval.logits[0], 3.0f / std::sqrt(1.0f + 1e-5f), 1e-6);
  forward(m, x, QuantState::full(), true);
  EXPECT_FLOAT_EQ(m.layers[0].running_mean[0], 0.3f);
  EXPECT_FLOAT_EQ(m.layers[0].running_var[0], 0.9f);
}

TEST(Model, ValidateCatchesBrokenInvariants) {
  auto m = make_architecture("convnet-a", {1, 8, 8}, 10);
  EXPECT_NO_THROW(m.validate());
  auto bad_var = m;
  bad_var.layers[1].running_var[0] = 0;
  EXPECT_THROW(bad_var.validate(), ValidationError);
  auto missing = m;
  missing.act_quant.pop_back();
  EXPECT_THROW(missing.validate(), ValidationError);
  EXPECT_THROW(make_architecture("convnet-a", {1, 7, 7}, 10), ShapeError);
}

TEST(Model, CastRoundTripPreservesValues) {
  auto m = make_architecture("convnet-b", {1, 8, 8}, 10);
  initialize(m, 3);
  const auto back = m.cast<double>().cast<float>();
  EXPECT_EQ(parameter_hash(back), parameter_hash(m));
}

}  // namespace
}  // namespace qaa
