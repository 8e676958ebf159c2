#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qaa/diagnostics.hpp"
#include "qaa/engine.hpp"
#include "qaa/training.hpp"

namespace qaa {
namespace {

Tensor32 random_images(Index n, const Shape& per, std::uint64_t seed) {
  Shape s{n};
  s.insert(s.end(), per.begin(), per.end());
  Tensor32 x(s);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (Index i = 0; i < x.size(); ++i) x[i] = u(rng);
  return x;
}

// Single-output linear model with logit_sum head: loss = w.x + b.
LayerGraph linear_score(std::vector<float> w, float b = 0) {
  auto m = GraphBuilder("score", {static_cast<Index>(w.size())}).linear(1).build();
  for (std::size_t i = 0; i < w.size(); ++i) m.layers[0].weight[static_cast<Index>(i)] = w[i];
  m.layers[0].bias[0] = b;
  m.head = LossHead::logit_sum;
  return m;
}

TEST(RelativeDeviation, ClosedForms) {
  const auto c = Tensor32::from({2}, {3, 4});
  EXPECT_EQ(relative_deviation(c, c), 0.0);
  EXPECT_EQ(relative_deviation(Tensor32::from({2}, {0, 0}), c), 1.0);
  EXPECT_EQ(relative_deviation(Tensor32::from({2}, {6, 8}), c), 1.0);
  EXPECT_THROW(relative_deviation(c, Tensor32::from({2}, {0, 0})), UndefinedMetric);
}

TEST(RelativeDeviation, ScalesLinearlyWithDeviation) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0, 1);
  Tensor32 c({16}), d({16});
  for (Index i = 0; i < 16; ++i) {
    c[i] = n(rng);
    d[i] = n(rng);
  }
  const double base = relative_deviation(Tensor32(c.shape(), c.data() + d.data()), c);
  for (float t : {0.5f, 2.0f, 4.0f}) {
    const double scaled = relative_deviation(Tensor32(c.shape(), c.data() + t * d.data()), c);
    EXPECT_NEAR(scaled, t * base, 1e-6 * t * base);
  }
}

TEST(FeatureDivergence, IdenticalInputsGiveZero) {
  auto m = make_architecture("convnet-a", {1, 8, 8}, 3);
  initialize(m, 2);
  const auto x = random_images(6, {1, 8, 8}, 3);
  for (Index k = 0; k < m.tap_count(); ++k) {
    const auto r = feature_divergence(m, QuantState::full(), x, x, k);
    EXPECT_EQ(r.mean, 0.0);
    EXPECT_EQ(r.undefined, 0);
  }
  EXPECT_THROW(feature_divergence(m, QuantState::full(), x, x, m.tap_count()), ValidationError);
}

TEST(FeatureDivergence, DoubledFeatureGivesOne) {
  auto m = GraphBuilder("id", {3}).relu().build();  // tap 0 is relu(x)
  const auto x = Tensor32::from({2, 3}, {0.1f, 0.2f, 0.3f, 0.25f, 0.0f, 0.5f});
  Tensor32 x2 = x;
  x2.data() *= 2.0f;
  const auto r = feature_divergence(m, QuantState::full(), x, x2, 0);
  EXPECT_EQ(r.per_example, (std::vector<double>{1.0, 1.0}));
}

TEST(FeatureDivergence, ZeroCleanFeatureIsUndefined) {
  auto m = GraphBuilder("id", {2}).relu().build();
  const auto x = Tensor32::from({2, 2}, {0, 0, 3, 4});
  const auto xa = Tensor32::from({2, 2}, {1, 1, 0, 0});
  const auto r = feature_divergence(m, QuantState::full(), x, xa, 0);
  EXPECT_TRUE(std::isnan(r.per_example[0]));
  EXPECT_EQ(r.per_example[1], 1.0);
  EXPECT_EQ(r.undefined, 1);
  EXPECT_EQ(r.mean, 1.0);
  EXPECT_THROW(feature_divergence(m, QuantState::full(), x.slice(0, 1), xa.slice(0, 1), 0), UndefinedMetric);
}

TEST(GradientSimilarity, SelfOrthogonalAndHandCosine) {
  const auto a = linear_score({1, 0}), b = linear_score({0, 1}), c = linear_score({1, 1});
  const auto x = random_images(3, {2}, 4);
  const std::vector<int> y{0, 0, 0};
  const Substitute sa{&a, QuantState::full()}, sb{&b, QuantState::full()}, sc{&c, QuantState::full()};
  EXPECT_DOUBLE_EQ(gradient_similarity(sa, sa, x, y).mean, 1.0);
  EXPECT_EQ(gradient_similarity(sa, sb, x, y).mean, 0.0);
  EXPECT_NEAR(gradient_similarity(sa, sc, x, y).mean, 0.70711, 5e-6);
  const auto zero = linear_score({0, 0});
  EXPECT_THROW(gradient_similarity(sa, {&zero, QuantState::full()}, x, y), UndefinedMetric);
}

TEST(GradientSimilarity, RangeAndPositiveScaleInvariance) {
  auto m = make_architecture("mlp-3", {6}, 4);
  auto n = make_architecture("mlp-3", {6}, 4);
  initialize(m, 5);
  initialize(n, 6);
  const auto x = random_images(10, {6}, 7);
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
  const auto r = gradient_similarity({&m, QuantState::full()}, {&n, QuantState::full()}, x, y);
  for (double v : r.per_example) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  auto scaled = linear_score({2, -1, 3}), base = linear_score({4, -2, 6}), other = linear_score({1, 1, 0});
  const auto x3 = random_images(2, {3}, 8);
  EXPECT_NEAR(gradient_similarity({&scaled, {}}, {&other, {}}, x3, {0, 0}).mean,
              gradient_similarity({&base, {}}, {&other, {}}, x3, {0, 0}).mean, 1e-12);
}

TEST(DistanceMatrix, SymmetricZeroDiagonalAndHandEntry) {
  const auto a = linear_score({1, 0}), c = linear_score({1, 1}), b = linear_score({0, 1});
  const Substitute models[] = {{&a, {}}, {&c, {}}, {&b, {}}};
  const auto x = random_images(4, {2}, 9);
  const auto d = distance_matrix(models, {"a", "c", "b"}, x, {0, 0, 0, 0});
  EXPECT_EQ(d.values, d.values.transpose());
  EXPECT_EQ(d.values.diagonal(), Eigen::VectorXd::Zero(3));
  EXPECT_NEAR(d.values(0, 1), 0.29289, 5e-6);
  EXPECT_EQ(d.values(0, 2), 1.0);
  EXPECT_GE(d.values.minCoeff(), 0.0);
  EXPECT_LE(d.values.maxCoeff(), 2.0);
  EXPECT_NE(d.to_csv().find("model,a,c,b"), std::string::npos);
}

TEST(DistanceMatrix, UndefinedPairsAreMissingWithWarning) {
  const auto a = linear_score({1, 0}), z = linear_score({0, 0});
  const Substitute models[] = {{&a, {}}, {&z, {}}};
  const auto d = distance_matrix(models, {"a", "z"}, random_images(2, {2}, 1), {0, 0});
  EXPECT_TRUE(std::isnan(d.values(0, 1)));
  EXPECT_EQ(d.warnings.size(), 1u);
  EXPECT_THROW(distance_matrix(std::span<const Substitute>(models, 1), {"a"}, random_images(2, {2}, 1), {0, 0}),
               ValidationError);
}

TEST(Sharpness, ConstantLossIsFlat) {
  auto m = GraphBuilder("zero", {4}).linear(3).build();  // zero weights: constant logits
  const auto x = random_images(5, {4}, 10);
  const std::vector<int> y{0, 1, 2, 0, 1};
  SharpnessConfig cfg;
  // Zero inputs make the logits equal the bias whatever the weights are.
  EXPECT_EQ(sharpness_weight(m, QuantState::full(), Tensor32({5, 4}), y, cfg).phi, 0.0);
  EXPECT_EQ(sharpness_feature(m, QuantState::full(), x, y, cfg).phi, 0.0);
}

TEST(Sharpness, LinearScoreMatchesBoxClosedForms) {
  const std::vector<float> w{0.5f, -1.0f, 2.0f, 0.25f};
  const auto m = linear_score(w, 0.1f);
  const auto x = Tensor32::from({1, 4}, {0.3f, -0.2f, 0.6f, 0.9f});
  const double wx = 0.5 * 0.3 + 0.2 + 2.0 * 0.6 + 0.25 * 0.9 + 0.1;
  for (double eps : {5e-4, 1e-3}) {
    SharpnessConfig cfg;
    cfg.epsilon = eps;
    const double x1 = 0.3 + 0.2 + 0.6 + 0.9, g1 = 0.5 + 1.0 + 2.0 + 0.25;
    const auto sw = sharpness_weight(m, QuantState::full(), x, {0}, cfg);
    EXPECT_NEAR(sw.phi, 100 * eps * x1 / (1 + wx), 1e-3 * sw.phi);
    const auto sf = sharpness_feature(m, QuantState::full(), x, {0}, cfg);
    EXPECT_NEAR(sf.phi, 100 * eps * g1 / (1 + wx - eps * g1), 1e-3 * sf.phi);
    EXPECT_EQ(sw.fallbacks, 0);
  }
}

TEST(Sharpness, NonNegativeAndMonotoneOnTrainedModels) {
  SynthConfig sc;
  sc.classes = 3;
  sc.count = 120;
  sc.image_size = 8;
  const auto d = synth_dataset(sc);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 32;
  const auto m = train_standard("convnet-a", d, tc);
  const auto x = d.images.slice(0, 32);
  const std::vector<int> y(d.labels.begin(), d.labels.begin() + 32);
  for (double eps : {5e-4, 1e-3}) {
    SharpnessConfig cfg;
    cfg.epsilon = eps;
    for (const auto& r : {sharpness_weight(m, QuantState::full(), x, y, cfg),
                          sharpness_feature(m, QuantState::full(), x, y, cfg)}) {
      EXPECT_GE(r.phi, 0.0);
      EXPECT_EQ(r.objective.size(), 21u);
    }
  }
  EXPECT_THROW(sharpness_weight(m, QuantState::full(), x, y, SharpnessConfig{.epsilon = 0}), ValidationError);
}

TEST(BnStats, FreshModelRowsAndNonBnRejection) {
  auto m = make_architecture("convnet-a", {1, 8, 8}, 3);
  const auto s = bn_stats_export(m, 1);
  EXPECT_EQ(s.channels(), 8);
  EXPECT_EQ(s.running_mean, Eigen::VectorXf::Zero(8));
  EXPECT_EQ(s.running_var, Eigen::VectorXf::Ones(8));
  EXPECT_THROW(bn_stats_export(m, 0), ValidationError);
  EXPECT_THROW(bn_stats_export(m, 99), ValidationError);
  const std::string csv = s.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
}

TEST(BnStats, RunningMeanConvergesToConstantInput) {
  auto m = GraphBuilder("bn", {2, 2, 2}).batchnorm().flatten().build();
  const auto x = Tensor32::constant({4, 2, 2, 2}, 0.7f);
  for (int i = 0; i < 200; ++i) forward(m, x, QuantState::full(), true);
  const auto s = bn_stats_export(m, 0);
  // EMA fixed point: mean -> c, gap shrinks by 0.9 per pass.
  for (Index c = 0; c < 2; ++c) EXPECT_NEAR(s.running_mean[c], 0.7f, 0.7 * std::pow(0.9, 200) + 1e-6);
}

}  // namespace
}  // namespace qaa
