#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "csmpu/train.hpp"

using namespace csmpu;

namespace {

struct Instance {
  MpuDataset data;
  LabeledSet test;
};

Instance separable(std::size_t k, double pi_k, std::uint64_t seed, std::size_t n_lab = 60,
                   std::size_t n_pool = 200) {
  SyntheticFamily fam{k, uniform_observed_priors(k, pi_k), 6.0, 1.0};
  std::mt19937_64 rng(seed);
  Instance out{gen_synthetic(fam, n_lab, n_pool, rng), {}};
  out.test = sample_mixture(fam, 400, rng);
  return out;
}

TrainConfig config_for(const MpuSample& s, Estimator e, Correction c) {
  TrainConfig cfg;
  cfg.risk.k = s.k();
  cfg.risk.priors = s.priors;
  cfg.risk.estimator = e;
  cfg.risk.correction = c;
  cfg.batch_size = 64;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  Adam adam(2, 0.1);
  std::vector<double> p{1.0, -1.0};
  adam.step(p, std::vector{3.0, -0.5});
  // bias-corrected first step is lr * g / (|g| + eps)
  EXPECT_NEAR(p[0], 0.9, 1e-8);
  EXPECT_NEAR(p[1], -0.9, 1e-8);
  EXPECT_EQ(adam.steps(), 1u);
  EXPECT_THROW(adam.step(p, std::vector{1.0}), std::invalid_argument);
}

TEST(Adam, MinimizesQuadratic) {
  Adam adam(1, 0.05);
  std::vector<double> p{5.0};
  for (int i = 0; i < 2000; ++i) adam.step(p, std::vector{2.0 * (p[0] - 1.5)});
  EXPECT_NEAR(p[0], 1.5, 1e-3);
}

TEST(Batches, CountAndCoverage) {
  const auto inst = separable(3, 0.3, 1, 40, 100);
  EXPECT_EQ(steps_per_epoch(inst.data.sample, 64), 3u);  // 180 rows
  std::mt19937_64 rng(0);
  const auto batches = make_batches(inst.data.sample, 3, rng);
  ASSERT_EQ(batches.size(), 3u);
  std::size_t pool = 0, first = 0;
  for (const auto& b : batches) {
    pool += b.pool.rows();
    first += b.observed[0].rows();
    EXPECT_EQ(b.priors, inst.data.sample.priors);
  }
  EXPECT_EQ(pool, 100u);
  EXPECT_EQ(first, 40u);
}

TEST(Batches, TooFewRowsForStepCount) {
  const auto inst = separable(3, 0.3, 1, 2, 100);
  std::mt19937_64 rng(0);
  EXPECT_THROW(make_batches(inst.data.sample, 3, rng), std::invalid_argument);
}

TEST(Train, ZeroEpochsLeavesScorerUnchanged) {
  const auto inst = separable(3, 0.3, 2);
  auto cfg = config_for(inst.data.sample, Estimator::csmpu, Correction::abs);
  cfg.epochs = 0;
  const auto init = init_scorer(default_mlp(2, 3), 5);
  const auto res = train(cfg, inst.data.sample, init);
  EXPECT_TRUE(std::equal(init.parameters().begin(), init.parameters().end(),
                         res.scorer.parameters().begin()));
  ASSERT_EQ(res.history.size(), 1u);
  EXPECT_EQ(res.history[0].epoch, 0u);
}

TEST(Train, DescendsForEveryEstimator) {
  const auto inst = separable(2, 0.5, 4);
  const std::pair<Estimator, Correction> combos[] = {
      {Estimator::csmpu, Correction::none}, {Estimator::csmpu, Correction::nn},
      {Estimator::csmpu, Correction::abs},  {Estimator::ure_ovr, Correction::none},
      {Estimator::biased_super, Correction::none}, {Estimator::area, Correction::none}};
  for (auto [e, c] : combos) {
    auto cfg = config_for(inst.data.sample, e, c);
    cfg.epochs = 50;
    const auto res = train(cfg, inst.data.sample, init_scorer(default_mlp(2, 2), 1), &inst.test);
    ASSERT_EQ(res.history.size(), 51u);
    EXPECT_LT(res.history.back().full_risk, res.history.front().full_risk)
        << to_string(e) << "/" << to_string(c);
    EXPECT_TRUE(res.history.back().accuracy.has_value());
  }
}

TEST(Train, CorrectedStepLossIsNonNegative) {
  const auto inst = separable(3, 0.3, 5);
  for (auto c : {Correction::nn, Correction::abs}) {
    auto cfg = config_for(inst.data.sample, Estimator::csmpu, c);
    cfg.epochs = 20;
    const auto res = train(cfg, inst.data.sample, init_scorer(default_mlp(2, 3), 2));
    for (const auto& h : res.history) {
      EXPECT_GE(h.batch_risk, 0.0);
      EXPECT_TRUE(std::isfinite(h.full_risk));
    }
  }
}

TEST(Train, SameSeedSameHistory) {
  const auto inst = separable(3, 0.3, 6);
  auto cfg = config_for(inst.data.sample, Estimator::csmpu, Correction::abs);
  cfg.epochs = 5;
  auto run = [&] {
    return train(cfg, inst.data.sample, init_scorer(default_mlp(2, 3), 8), &inst.test);
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].batch_risk, b.history[i].batch_risk);
    EXPECT_EQ(a.history[i].full_risk, b.history[i].full_risk);
    EXPECT_EQ(a.history[i].accuracy, b.history[i].accuracy);
  }
}

TEST(Train, ShapeAndConfigErrors) {
  const auto inst = separable(3, 0.3, 7);
  auto cfg = config_for(inst.data.sample, Estimator::csmpu, Correction::abs);
  EXPECT_THROW(train(cfg, inst.data.sample, init_scorer(default_mlp(3, 3), 0)), std::invalid_argument);
  EXPECT_THROW(train(cfg, inst.data.sample, init_scorer(default_mlp(2, 4), 0)), std::invalid_argument);
  cfg.learning_rate = 0.0;
  EXPECT_THROW(train(cfg, inst.data.sample, init_scorer(default_mlp(2, 3), 0)), std::invalid_argument);
}

TEST(ValidationSplit, HoldsOutTenPercentWithLabels) {
  const auto inst = separable(3, 0.3, 8, 50, 100);
  const auto split = validation_split(inst.data, 1);
  EXPECT_EQ(split.train.observed[0].rows(), 45u);
  EXPECT_EQ(split.train.pool.rows(), 90u);
  EXPECT_EQ(split.validation.x.rows(), 5u + 5u + 10u);
  EXPECT_EQ(split.validation.y.size(), split.validation.x.rows());
  EXPECT_EQ(split.validation.y[0], 0u);
  MpuDataset unlabeled = inst.data;
  unlabeled.hidden_labels.reset();
  EXPECT_THROW(validation_split(unlabeled, 1), std::invalid_argument);
}

TEST(LearningRate, PicksBestValidationAccuracy) {
  const auto inst = separable(2, 0.5, 9);
  auto cfg = config_for(inst.data.sample, Estimator::csmpu, Correction::abs);
  cfg.epochs = 10;
  const double rates[] = {1e-2, 1e-6};
  const auto choice = select_learning_rate(cfg, inst.data, default_mlp(2, 2), rates);
  ASSERT_EQ(choice.validation_accuracy.size(), 2u);
  double best = 0.0;
  for (auto [r, acc] : choice.validation_accuracy) best = std::max(best, acc);
  for (auto [r, acc] : choice.validation_accuracy) {
    if (r == choice.best_rate) EXPECT_EQ(acc, best);
  }
}

TEST(Metrics, ConfusionExample) {
  const auto m = metrics_from_confusion({{2, 0}, {1, 1}});
  EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
  EXPECT_NEAR(m.per_class_f1[0], 0.8, 1e-12);
  EXPECT_NEAR(m.per_class_f1[1], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.macro_f1, 0.7333, 5e-5);
}

TEST(Metrics, PerfectAndConstantPredictors) {
  const Matrix perfect{{5, 0, 0, 0}, {0, 5, 0, 0}, {0, 0, 5, 0}, {0, 0, 0, 5}};
  const std::vector<std::size_t> labels{0, 1, 2, 3};
  const auto p = evaluate_scores(perfect, labels);
  EXPECT_EQ(p.accuracy, 1.0);
  EXPECT_EQ(p.macro_f1, 1.0);
  const Matrix constant(4, 4);  // all ties resolve to class 0
  const auto c = evaluate_scores(constant, labels);
  EXPECT_EQ(c.accuracy, 0.25);
}

TEST(Metrics, ZeroSupportClassContributesZero) {
  // class 2 never appears in truth or predictions
  const auto m = metrics_from_confusion({{1, 0, 0}, {0, 1, 0}, {0, 0, 0}});
  EXPECT_EQ(m.per_class_f1[2], 0.0);
  EXPECT_NEAR(m.macro_f1, 2.0 / 3.0, 1e-12);
}

TEST(Metrics, IdentitiesOnRandomConfusions) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> cnt(0, 20);
  for (int t = 0; t < 200; ++t) {
    CountMatrix c(4, std::vector<std::size_t>(4));
    std::size_t total = 0, trace = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        c[i][j] = cnt(rng);
        total += c[i][j];
      }
      trace += c[i][i];
    }
    if (total == 0) continue;
    const auto m = metrics_from_confusion(c);
    EXPECT_DOUBLE_EQ(m.accuracy, static_cast<double>(trace) / static_cast<double>(total));
    double mean = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      std::size_t row = 0, col = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        row += c[i][j];
        col += c[j][i];
      }
      const double f1 = row + col == 0 ? 0.0 : 2.0 * c[i][i] / static_cast<double>(row + col);
      EXPECT_NEAR(m.per_class_f1[i], f1, 1e-12);
      mean += f1 / 4.0;
    }
    EXPECT_NEAR(m.macro_f1, mean, 1e-12);
  }
}

TEST(Metrics, EmptyInputThrows) {
  EXPECT_THROW(metrics_from_confusion({{0, 0}, {0, 0}}), std::invalid_argument);
  EXPECT_THROW(evaluate_scores(Matrix(0, 2), std::vector<std::size_t>{}), std::invalid_argument);
}

TEST(Heatmaps, SingleSampleExample) {
  const auto h = margin_support_heatmaps(Matrix{{2, 5}}, std::vector<std::size_t>{0});
  EXPECT_EQ(h.support[0][1], 1u);
  ASSERT_TRUE(h.margin[0][1].has_value());
  EXPECT_EQ(*h.margin[0][1], -3.0);
  EXPECT_FALSE(h.margin[0][0].has_value());
  EXPECT_FALSE(h.margin[1][1].has_value());
}

TEST(Heatmaps, ConfidentPredictorIsDiagonal) {
  const Matrix s{{4, 0, 0}, {0, 3, 1}, {0, 0, 2}, {5, 1, 1}};
  const std::vector<std::size_t> y{0, 1, 2, 0};
  const auto h = margin_support_heatmaps(s, y);
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t p = 0; p < 3; ++p) {
      if (t != p) {
        EXPECT_EQ(h.support[t][p], 0u);
      } else {
        EXPECT_GT(*h.margin[t][p], 0.0);
      }
    }
  }
  EXPECT_EQ(h.support[0][0], 2u);
  EXPECT_DOUBLE_EQ(*h.margin[0][0], 4.0);
}

TEST(SweepDelta, Schemes) {
  const std::vector b{0.1, -0.5, 0.3, 0.0};
  const auto last = sweep_delta(SweepScheme::scalar_last, b, 0.3);
  EXPECT_DOUBLE_EQ(last[3], -0.15);
  EXPECT_DOUBLE_EQ(last[0], 0.05);
  const auto adv = sweep_delta(SweepScheme::adversarial, b, 0.2);
  EXPECT_DOUBLE_EQ(adv[1], 0.1);  // largest |b| is negative, its prior goes up
  EXPECT_DOUBLE_EQ(adv[2], -0.1);
  for (const auto& d : {last, adv}) {
    EXPECT_NEAR(std::accumulate(d.begin(), d.end(), 0.0), 0.0, 1e-15);
  }
  EXPECT_EQ(sweep_delta(SweepScheme::adversarial, b, 0.0), std::vector<double>(4, 0.0));
}

class SweepTest : public ::testing::Test {
 protected:
  void SetUp() override {
    inst_ = separable(5, 0.2, 11, 40, 200);
    risk_.k = 5;
    risk_.priors = inst_.data.sample.priors;
    risk_.correction = Correction::abs;
    TrainConfig cfg;
    cfg.risk = risk_;
    cfg.epochs = 5;
    cfg.batch_size = 128;
    scorer_ = train(cfg, inst_.data.sample, init_scorer(default_mlp(2, 5), 1)).scorer;
  }
  Instance inst_;
  RiskConfig risk_;
  Scorer scorer_;
};

TEST_F(SweepTest, TheoryBoundExampleAndZeroRow) {
  const double mags[] = {0.0, 0.2};
  const auto rep = misspecification_sweep(inst_.data.sample, scorer_, risk_, inst_.test,
                                          SweepScheme::adversarial, mags);
  ASSERT_EQ(rep.points.size(), 2u);
  EXPECT_EQ(rep.points[0].empirical_bound, 0.0);
  EXPECT_EQ(rep.points[0].theory_bound, 0.0);
  EXPECT_EQ(rep.points[0].macro_f1, evaluate(scorer_, inst_.test).macro_f1);
  EXPECT_NEAR(rep.points[1].theory_bound, 0.2, 1e-12);
}

TEST_F(SweepTest, BoundsDominatedAndMonotone) {
  for (auto scheme : {SweepScheme::adversarial, SweepScheme::scalar_last}) {
    const double mags[] = {0.0, 0.02, 0.05, 0.1, 0.2};
    const auto rep = misspecification_sweep(inst_.data.sample, scorer_, risk_, inst_.test, scheme, mags);
    ASSERT_EQ(rep.points.size(), 5u);
    for (std::size_t i = 0; i < rep.points.size(); ++i) {
      EXPECT_LE(rep.points[i].empirical_bound, rep.points[i].theory_bound);
      if (i > 0) {
        EXPECT_GE(rep.points[i].empirical_bound, rep.points[i - 1].empirical_bound);
        EXPECT_GE(rep.points[i].theory_bound, rep.points[i - 1].theory_bound);
      }
    }
    for (double b : rep.b) EXPECT_LE(std::abs(b), kMisspecConstant);
  }
}

TEST_F(SweepTest, InfeasiblePointSkipped) {
  const double mags[] = {0.1, 5.0};
  const auto rep = misspecification_sweep(inst_.data.sample, scorer_, risk_, inst_.test,
                                          SweepScheme::scalar_last, mags);
  EXPECT_EQ(rep.points.size(), 1u);
  EXPECT_EQ(rep.warnings.size(), 1u);
  const double bad[] = {-0.1};
  EXPECT_THROW(misspecification_sweep(inst_.data.sample, scorer_, risk_, inst_.test,
                                      SweepScheme::scalar_last, bad),
               std::invalid_argument);
}

TEST_F(SweepTest, RetrainMode) {
  SweepOptions opt;
  opt.mode = SweepMode::retrain;
  opt.retrain.epochs = 2;
  opt.retrain.batch_size = 128;
  const double mags[] = {0.0};
  const auto rep = misspecification_sweep(inst_.data.sample, scorer_, risk_, inst_.test,
                                          SweepScheme::adversarial, mags, opt);
  ASSERT_EQ(rep.points.size(), 1u);
  EXPECT_GE(rep.points[0].macro_f1, 0.0);
}

TEST(LossTable, RowsAndValues) {
  const auto rows = reproduce_loss_table();
  ASSERT_EQ(rows.size(), 9u);
  EXPECT_NEAR(rows[0].report.max_residual, 10.0, 0.005);  // hinge raw
  EXPECT_EQ(rows[1].report.max_residual, 0.0);            // hinge sym
  EXPECT_EQ(rows[1].report.p99_residual, 0.0);
  EXPECT_NEAR(rows[3].report.max_residual, 1.0, 0.005);  // ramp raw
  EXPECT_NEAR(rows[3].report.p99_residual, 0.9, 0.005);
  for (const auto& r : rows) EXPECT_FALSE(r.macro_f1.has_value());
}

TEST(Parsing, SweepScheme) {
  EXPECT_EQ(parse_sweep_scheme("adversarial"), SweepScheme::adversarial);
  EXPECT_EQ(to_string(SweepScheme::scalar_last), "scalar_last");
  EXPECT_FALSE(parse_sweep_scheme("random").has_value());
}
