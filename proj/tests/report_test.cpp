#include <gtest/gtest.h>

#include <cmath>

#include "qaa/engine.hpp"
#include "qaa/report.hpp"
#include "qaa/training.hpp"

namespace qaa {
namespace {

Dataset two_class(Index count, std::uint64_t seed, double contrast = 0.35, double noise = 0.1) {
  SynthConfig sc;
  sc.contrast = contrast;
  sc.noise = noise;
  sc.classes = 2;
  sc.count = count;
  sc.image_size = 8;
  sc.seed = seed;
  sc.pattern_seed = 3;
  return synth_dataset(sc);
}

// Nearest-class-mean classifier: z_k = m_k.x - |m_k|^2 / 2.
LayerGraph nearest_mean(const Dataset& d) {
  auto m = GraphBuilder("linear", d.example_shape()).flatten().linear(d.classes).build();
  const auto rows = d.images.rows();
  const Index D = rows.cols();
  for (Index k = 0; k < d.classes; ++k) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(D);
    Index n = 0;
    for (Index i = 0; i < d.size(); ++i)
      if (d.labels[static_cast<std::size_t>(i)] == k) {
        mean += rows.row(i).transpose().cast<double>();
        ++n;
      }
    mean /= static_cast<double>(n);
    for (Index j = 0; j < D; ++j) m.layers[1].weight[k * D + j] = static_cast<float>(mean[j]);
    m.layers[1].bias[k] = static_cast<float>(-0.5 * mean.squaredNorm());
  }
  return m;
}

// Exact fraction of clean-correct examples whose 2-class margin can be
// crossed inside the box intersected with [0, 1].
double linear_oracle_rate(const LayerGraph& m, const Dataset& d, double eps) {
  const Index D = d.images.per_example();
  const auto W = m.layers[1].weight.matrix(2, D).cast<double>();
  const auto logits = forward(m, d.images, QuantState::full()).logits;
  Index correct = 0, flippable = 0;
  for (Index i = 0; i < d.size(); ++i) {
    const int y = d.labels[static_cast<std::size_t>(i)], c = 1 - y;
    const double margin = static_cast<double>(logits[i * 2 + y]) - logits[i * 2 + c];
    if (margin <= 0) continue;
    ++correct;
    double reach = 0;
    for (Index j = 0; j < D; ++j) {
      const double w = W(y, j) - W(c, j), x = d.images[i * D + j];
      reach += std::abs(w) * std::min(eps, w > 0 ? x : 1.0 - x);
    }
    flippable += reach > margin;
  }
  return 100.0 * static_cast<double>(flippable) / static_cast<double>(correct);
}

AdversarialSet unperturbed(const Dataset& d) {
  AdversarialSet a;
  a.clean = a.adversarial = d.images;
  a.labels = d.labels;
  return a;
}

TEST(TransferReport, NoPerturbationGivesZeroAsr) {
  const auto train = two_class(400, 1), test = two_class(200, 2);
  TrainConfig tc;
  tc.epochs = 2;
  const auto a = train_standard("mlp-3", train, tc);
  tc.seed = 1;
  const auto b = train_standard("convnet-a", train, tc);
  const TargetSpec targets[] = {{"a", &a, QuantState::full()}, {"b", &b, QuantState::full()}};
  const auto rep = evaluate_transfer(unperturbed(test), targets, "none", "identity");
  rep.validate();
  ASSERT_EQ(rep.rows.size(), 1u);
  for (std::size_t t = 0; t < 2; ++t) {
    const auto& c = rep.rows[0].cells[t];
    EXPECT_EQ(c.asr, 0.0);
    EXPECT_EQ(c.successes, 0);
    EXPECT_EQ(c.correct, rep.clean[t].correct);
    EXPECT_EQ(c.misclassified, c.total - c.correct);
    EXPECT_FALSE(c.white_box);
  }
  EXPECT_EQ(rep.rows[0].average, 0.0);
}

TEST(TransferReport, WhiteBoxPgdOnLinearModelMatchesMarginOracle) {
  // Low contrast and low noise: separable, with margins inside the box.
  const auto train = two_class(2000, 5, 0.03, 0.01), test = two_class(400, 6, 0.03, 0.01);
  const auto m = nearest_mean(train);
  const double eps = 16.0 / 255.0;
  const double oracle = linear_oracle_rate(m, test, eps);
  EXPECT_GE(oracle, 95.0);
  AttackSpec spec;
  spec.family = AttackFamily::pgd;
  spec.epsilon = eps;
  spec.iterations = 20;
  const auto adv = pgd(m, test.images, test.labels, spec);
  const TargetSpec self[] = {{"linear", &m, QuantState::full()}};
  const auto rep = evaluate_transfer(adv, self, "linear", "pgd");
  const auto& cell = rep.rows[0].cells[0];
  EXPECT_TRUE(cell.white_box);
  EXPECT_GE(cell.correct, 360);
  EXPECT_GE(cell.asr, 95.0);
  EXPECT_NEAR(cell.asr, oracle, 100.0 / static_cast<double>(cell.correct) + 1e-9);
}

TEST(TransferReport, UndefinedCellsAreExcludedFromAverage) {
  const auto test = two_class(50, 7);
  // Zero weights and a bias favouring class 1 never predict class 0.
  auto biased = GraphBuilder("const", test.example_shape()).flatten().linear(2).build();
  biased.layers[1].bias[1] = 1.0f;
  const auto good = nearest_mean(two_class(500, 8));
  Dataset only0 = test;
  std::vector<Index> zeros;
  for (Index i = 0; i < test.size(); ++i)
    if (test.labels[static_cast<std::size_t>(i)] == 0) zeros.push_back(i);
  only0 = test.gather(zeros);
  const TargetSpec targets[] = {{"biased", &biased, QuantState::full()}, {"good", &good, QuantState::full()}};
  auto adv = unperturbed(only0);
  adv.adversarial.data().setConstant(1.0f);
  const auto rep = evaluate_transfer(adv, targets, "s", "flat");
  rep.validate();
  const auto& row = rep.rows[0];
  EXPECT_FALSE(row.cells[0].defined());
  EXPECT_TRUE(std::isnan(row.cells[0].asr));
  EXPECT_EQ(row.cells[0].raw_rate, 100.0);
  ASSERT_TRUE(row.cells[1].defined());
  EXPECT_EQ(row.average, row.cells[1].asr);
  EXPECT_NE(rep.to_csv().find("s,flat,32,,"), std::string::npos);
}

TEST(TransferReport, CsvLayoutAndAverageInvariant) {
  const auto train = two_class(300, 9), test = two_class(120, 10);
  const auto m = nearest_mean(train);
  TrainConfig tc;
  tc.epochs = 1;
  const auto n = train_standard("mlp-3", train, tc);
  const std::vector<TargetSpec> targets{{"m", &m, QuantState::full()}, {"n", &n, QuantState::full()}};
  TransferEvaluator ev(targets, test.images, test.labels);
  AttackSpec spec;
  for (double eps : {2.0 / 255, 8.0 / 255}) {
    spec.epsilon = eps;
    ev.add(eps < 0.02 ? "m" : "m@wide", "mim", 32, mim(m, test.images, test.labels, spec));
  }
  const auto& rep = ev.report();
  rep.validate();
  const std::string csv = rep.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "substitute,attack,bitwidth,m,n,Avg,white_box");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  for (const auto& row : rep.rows) {
    EXPECT_DOUBLE_EQ(row.average, (row.cells[0].asr + row.cells[1].asr) / 2);
    EXPECT_TRUE(row.cells[0].white_box);
    EXPECT_FALSE(row.cells[1].white_box);
    for (const auto& c : row.cells) EXPECT_LE(c.successes, c.correct);
  }
  EXPECT_EQ(rep.clean_csv().substr(0, 38), "target,bitwidth,state,correct,total,ac");

  // cells.jsonl carries every count needed to rebuild and pool the rows.
  const auto back = read_cells_jsonl(rep.cells_jsonl());
  EXPECT_EQ(back.to_csv(), csv);
  const auto pooled = pool_reports({rep, rep});
  pooled.validate();
  EXPECT_EQ(pooled.rows[1].cells[1].correct, 2 * rep.rows[1].cells[1].correct);
  EXPECT_EQ(pooled.rows[1].cells[1].asr, rep.rows[1].cells[1].asr);

  Tensor32 other = test.images;
  other[0] += 0.5f;
  AdversarialSet foreign = unperturbed(test);
  foreign.clean = other;
  EXPECT_THROW(ev.add("x", "y", 32, foreign), ValidationError);
}

}  // namespace
}  // namespace qaa
