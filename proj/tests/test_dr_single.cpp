#include <gtest/gtest.h>

#include "odtr/dr_single.hpp"
#include "odtr/sim.hpp"
#include "support/test_dgms.hpp"

using namespace odtr;
using odtr_test::confounded_single_stage;
using odtr_test::heterogeneous_single_stage;

namespace {

NuisanceConfig linear_config(bool cross_fit = true) {
  NuisanceConfig cfg;
  PenalizedLinearSpec ridge;
  ridge.lambda = 1e-8;
  ridge.penalty = PenalizedLinearSpec::Penalty::ridge;
  cfg.q_library = {ridge};
  cfg.g_library = {LogisticSpec{1e-6}};
  cfg.blip_library = {ridge};
  cfg.cross_fit = cross_fit;
  return cfg;
}

NuisanceEstimates make_nuisances(std::initializer_list<double> q1,
                                 std::initializer_list<double> q0,
                                 std::initializer_list<double> a,
                                 std::initializer_list<double> g) {
  NuisanceEstimates nuis;
  auto vec = [](std::initializer_list<double> xs) {
    Vector v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v;
  };
  nuis.q_treated = vec(q1);
  nuis.q_control = vec(q0);
  nuis.propensity = vec(g);
  const Vector av = vec(a);
  nuis.q_observed.resize(av.size());
  for (Eigen::Index i = 0; i < av.size(); ++i)
    nuis.q_observed[i] = av[i] == 1.0 ? nuis.q_treated[i] : nuis.q_control[i];
  return nuis;
}

}  // namespace

TEST(AipwTransform, HandValues) {
  {
    // treated unit: D = (1/0.5)(1.5 - 1.0) + 1.0 - 0.5 = 1.5
    const NuisanceEstimates nuis = make_nuisances({1.0}, {0.5}, {1.0}, {0.5});
    Vector y(1), a(1);
    y << 1.5;
    a << 1.0;
    const Vector d = aipw_transform(y, nuis, a);
    EXPECT_DOUBLE_EQ(d[0], 1.5);
  }
  {
    // control unit: D = (-1/0.5)(0.0 - 0.5) + 1.0 - 0.5 = 1.5
    const NuisanceEstimates nuis = make_nuisances({1.0}, {0.5}, {0.0}, {0.5});
    Vector y(1), a(1);
    y << 0.0;
    a << 0.0;
    const Vector d = aipw_transform(y, nuis, a);
    EXPECT_DOUBLE_EQ(d[0], 1.5);
  }
  {
    // zero residual leaves the plug-in contrast
    const NuisanceEstimates nuis = make_nuisances({2.0, 3.0}, {1.0, 0.5}, {1.0, 0.0}, {0.4, 0.7});
    Vector y(2), a(2);
    y << 2.0, 0.5;  // equals q at the observed arm
    a << 1.0, 0.0;
    const Vector d = aipw_transform(y, nuis, a);
    EXPECT_DOUBLE_EQ(d[0], 1.0);
    EXPECT_DOUBLE_EQ(d[1], 2.5);
  }
}

TEST(Nuisances, RandomizedInterceptPropensityIsMarginalRate) {
  Rng rng(31);
  const long n = 400;
  Vector w1(n), w2(n), a(n), y(n);
  long n1 = 0;
  for (long i = 0; i < n; ++i) {
    w1[i] = rng.uniform(-1, 1);
    w2[i] = rng.uniform(-1, 1);
    a[i] = rng.bernoulli(0.5);
    n1 += a[i] == 1.0;
    y[i] = w1[i] + a[i] + rng.normal();
  }
  nlohmann::json sj = {{"Y", "outcome"},
                       {"A", {{"treatment", 1}}},
                       {"W1", {{"covariate", 1}}},
                       {"W2", {{"covariate", 1}}}};
  const LongitudinalDataset data(DataSchema::from_json(sj),
                                 {{"W1", w1}, {"W2", w2}, {"A", a}, {"Y", y}});
  NuisanceConfig cfg = linear_config(false);
  cfg.g_library = {InterceptSpec{}};
  const CrossFitPlan plan = CrossFitPlan::make(static_cast<std::size_t>(n), 5, 3);
  const NuisanceEstimates nuis = estimate_nuisances(data, 1, data.outcome(), cfg, plan);
  const double rate = static_cast<double>(n1) / static_cast<double>(n);
  for (long i = 0; i < n; ++i) {
    const double expected = a[i] == 1.0 ? rate : 1.0 - rate;
    EXPECT_NEAR(nuis.propensity[i], expected, 1e-12);
  }
}

TEST(Nuisances, ExactOutcomeModelReproducesY) {
  // zero-noise linear outcome: the ridge fit interpolates, so Q(H,A) = Y
  Rng rng(7);
  const long n = 500;
  Vector w1(n), w2(n), a(n), y(n);
  for (long i = 0; i < n; ++i) {
    w1[i] = rng.uniform(-1, 1);
    w2[i] = rng.uniform(-1, 1);
    a[i] = rng.bernoulli(0.5);
    y[i] = 0.3 + 2.0 * w1[i] - w2[i] + 0.8 * a[i];
  }
  nlohmann::json sj = {{"Y", "outcome"},
                       {"A", {{"treatment", 1}}},
                       {"W1", {{"covariate", 1}}},
                       {"W2", {{"covariate", 1}}}};
  const LongitudinalDataset data(DataSchema::from_json(sj),
                                 {{"W1", w1}, {"W2", w2}, {"A", a}, {"Y", y}});
  const NuisanceConfig cfg = linear_config(true);
  const CrossFitPlan plan = CrossFitPlan::make(static_cast<std::size_t>(n), 10, 5);
  const NuisanceEstimates nuis = estimate_nuisances(data, 1, data.outcome(), cfg, plan);
  for (long i = 0; i < n; ++i) ASSERT_NEAR(nuis.q_observed[i], y[i], 1e-5);

  // and the transform collapses to the plug-in contrast
  const Vector d = aipw_transform(y, nuis, a);
  const Vector contrast = nuis.q_treated - nuis.q_control;
  for (long i = 0; i < n; ++i) ASSERT_NEAR(d[i], contrast[i], 1e-4);
}

TEST(Nuisances, ExtremePropensityIsTruncated) {
  // near-deterministic treatment drives raw fits below the floor
  Rng rng(13);
  const long n = 600;
  Vector w1(n), a(n), y(n);
  for (long i = 0; i < n; ++i) {
    w1[i] = rng.uniform(-1, 1);
    a[i] = rng.bernoulli(expit(12.0 * w1[i]));
    y[i] = w1[i] + rng.normal();
  }
  nlohmann::json sj = {{"Y", "outcome"}, {"A", {{"treatment", 1}}}, {"W1", {{"covariate", 1}}}};
  const LongitudinalDataset data(DataSchema::from_json(sj), {{"W1", w1}, {"A", a}, {"Y", y}});
  NuisanceConfig cfg = linear_config(false);
  cfg.g_library = {LogisticSpec{0.0}};
  const CrossFitPlan plan = CrossFitPlan::make(static_cast<std::size_t>(n), 5, 3);
  const NuisanceEstimates nuis = estimate_nuisances(data, 1, data.outcome(), cfg, plan);
  EXPECT_GT(nuis.clipped_count, 0);
  double lowest = 1.0;
  for (long i = 0; i < n; ++i) {
    ASSERT_GE(nuis.propensity[i], kPropensityFloor);
    ASSERT_LE(nuis.propensity[i], 1.0 - kPropensityFloor);
    lowest = std::min(lowest, nuis.propensity[i]);
  }
  EXPECT_DOUBLE_EQ(lowest, kPropensityFloor);
}

TEST(Nuisances, SingleArmFoldAborts) {
  // 6 treated units out of 40 and 20 folds: some training split loses an arm
  Rng rng(2);
  const long n = 40;
  Vector w1(n), a(n), y(n);
  for (long i = 0; i < n; ++i) {
    w1[i] = rng.uniform(-1, 1);
    a[i] = i < 6 ? 1.0 : 0.0;
    y[i] = rng.normal();
  }
  nlohmann::json sj = {{"Y", "outcome"}, {"A", {{"treatment", 1}}}, {"W1", {{"covariate", 1}}}};
  const LongitudinalDataset data(DataSchema::from_json(sj), {{"W1", w1}, {"A", a}, {"Y", y}});
  NuisanceConfig cfg = linear_config(true);
  bool aborted = false;
  for (std::uint64_t seed = 0; seed < 50 && !aborted; ++seed) {
    const CrossFitPlan plan = CrossFitPlan::make(static_cast<std::size_t>(n), 20, seed);
    try {
      estimate_nuisances(data, 1, data.outcome(), cfg, plan);
    } catch (const Error& e) {
      aborted = true;
      EXPECT_NE(std::string(e.what()).find("fold"), std::string::npos);
      EXPECT_NE(std::string(e.what()).find("single treatment arm"), std::string::npos);
    }
  }
  EXPECT_TRUE(aborted);
}

TEST(FitBlip, InterceptOnlyAndConstantTargets) {
  const LongitudinalDataset data = heterogeneous_single_stage(50, 4);
  const NuisanceConfig cfg = linear_config(true);
  const CrossFitPlan plan = CrossFitPlan::make(50, 5, 11);
  Rng rng(90);
  Vector pseudo(50);
  for (int i = 0; i < 50; ++i) pseudo[i] = rng.normal();

  // no rule covariates: every prediction is a fold mean of the pseudo-outcome
  const BlipFit empty_v = fit_blip(pseudo, data, {}, cfg, plan);
  const auto& full_state = std::get<LinearState>(empty_v.full.state());
  EXPECT_EQ(full_state.coef.size(), 0);
  EXPECT_NEAR(full_state.intercept, pseudo.mean(), 1e-12);

  const Vector constant = Vector::Constant(50, 3.25);
  const BlipFit const_fit = fit_blip(constant, data, {"W1"}, cfg, plan);
  for (int i = 0; i < 50; ++i) ASSERT_NEAR(const_fit.predictions[i], 3.25, 1e-7);
}

TEST(LearnSingle, ConstantCateAssignsEveryoneByDirection) {
  Rng rng(21);
  const long n = 1500;
  Vector w1(n), a(n), y(n);
  for (long i = 0; i < n; ++i) {
    w1[i] = rng.uniform(-1, 1);
    a[i] = rng.bernoulli(0.5);
    y[i] = 1.0 + 0.5 * w1[i] + 2.0 * a[i] + 0.5 * rng.normal();
  }
  nlohmann::json sj = {{"Y", "outcome"},
                       {"A", {{"treatment", 1}}},
                       {"W1", {{"covariate", 1}}},
                       {"rule_covariates", {{"W1"}}}};
  const LongitudinalDataset data(DataSchema::from_json(sj), {{"W1", w1}, {"A", a}, {"Y", y}});
  const NuisanceConfig cfg = linear_config(true);

  const FittedODTRStage max_stage =
      learn_odtr_single(data, {"W1"}, cfg, Direction::maximize, 5);
  EXPECT_DOUBLE_EQ(max_stage.fraction_assigned_one, 1.0);
  EXPECT_GT(max_stage.mean_blip, 1.0);

  const FittedODTRStage min_stage =
      learn_odtr_single(data, {"W1"}, cfg, Direction::minimize, 5);
  EXPECT_DOUBLE_EQ(min_stage.fraction_assigned_one, 0.0);
}

TEST(LearnSingle, RecoversSignRuleForHeterogeneousEffect) {
  const LongitudinalDataset data = heterogeneous_single_stage(5000, 17);
  const NuisanceConfig cfg = linear_config(true);
  const FittedODTRStage stage = learn_odtr_single(data, {"W1", "W2"}, cfg,
                                                  Direction::maximize, 99);

  // independent evaluation grid over the rule covariates
  const long g = 2000;
  Rng rng(555);
  Vector gw1(g), gw2(g), ga(g), gy(g);
  for (long i = 0; i < g; ++i) {
    gw1[i] = rng.uniform(-1, 1);
    gw2[i] = rng.uniform(-1, 1);
    ga[i] = 0.0;
    gy[i] = 0.0;
  }
  nlohmann::json sj = {{"Y", "outcome"},
                       {"A", {{"treatment", 1}}},
                       {"W1", {{"covariate", 1}}},
                       {"W2", {{"covariate", 1}}}};
  const LongitudinalDataset grid(DataSchema::from_json(sj),
                                 {{"W1", gw1}, {"W2", gw2}, {"A", ga}, {"Y", gy}});
  const Vector assigned = apply_rule(stage.as_rule(), grid, 1);
  long agree = 0;
  for (long i = 0; i < g; ++i)
    agree += assigned[i] == (gw1[i] > 0.0 ? 1.0 : 0.0) ? 1 : 0;
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(g), 0.95);
}

TEST(LearnSingle, UnbiasedTransformAndDoubleRobustness) {
  const double ate = 1.5;
  const long n = 20000;
  const LongitudinalDataset data = confounded_single_stage(n, 1234, ate);
  const CrossFitPlan plan = CrossFitPlan::make(static_cast<std::size_t>(n), 10, 77);

  auto check_mean = [&](const NuisanceConfig& cfg, bool expect_pass) {
    const NuisanceEstimates nuis = estimate_nuisances(data, 1, data.outcome(), cfg, plan);
    const Vector d = aipw_transform(data.outcome(), nuis, data.treatment(1));
    const double se = sample_sd(d) / std::sqrt(static_cast<double>(n));
    const double err = std::abs(d.mean() - ate);
    if (expect_pass)
      EXPECT_LE(err, 3.0 * se);
    else
      EXPECT_GT(err, 3.0 * se);
  };

  check_mean(linear_config(true), true);  // both nuisances correctly specified

  NuisanceConfig g_only = linear_config(true);
  g_only.q_library = {InterceptSpec{}};
  check_mean(g_only, true);  // correct g carries a useless Q

  NuisanceConfig q_only = linear_config(true);
  q_only.g_library = {InterceptSpec{}};
  check_mean(q_only, true);  // correct Q carries a useless g

  NuisanceConfig neither = linear_config(true);
  neither.q_library = {InterceptSpec{}};
  neither.g_library = {InterceptSpec{}};
  check_mean(neither, false);  // negative control: confounding leaks through
}

TEST(LearnSingle, OutcomeScalingLeavesAssignmentsUnchanged) {
  const LongitudinalDataset data = heterogeneous_single_stage(2000, 8);
  NuisanceConfig cfg = linear_config(true);
  PenalizedLinearSpec ols;
  ols.lambda = 0.0;
  ols.penalty = PenalizedLinearSpec::Penalty::ridge;
  cfg.q_library = {ols};
  cfg.blip_library = {ols};

  const LearnedStage base =
      learn_stage(data, 1, data.outcome(), {"W1", "W2"}, cfg, Direction::maximize, 3, nullptr);
  const double c = 3.7;
  const Vector scaled_y = c * data.outcome();
  const LearnedStage scaled =
      learn_stage(data, 1, scaled_y, {"W1", "W2"}, cfg, Direction::maximize, 3, nullptr);

  for (Eigen::Index i = 0; i < base.blip.predictions.size(); ++i) {
    ASSERT_NEAR(scaled.blip.predictions[i], c * base.blip.predictions[i],
                1e-6 * (1.0 + std::abs(base.blip.predictions[i])));
    if (std::abs(base.blip.predictions[i]) > 1e-6)
      ASSERT_EQ(scaled.assignments[i], base.assignments[i]);
  }
}

TEST(LearnSingle, AppendixStageTwoBlipMatchesAnalyticForm) {
  // fitted blip at the second decision point is 0.08*A1 - 0.1, constant in W
  const LongitudinalDataset data = sim::generate(60000, 42);
  NuisanceConfig cfg = linear_config(true);
  const LearnedStage stage = learn_stage(data, 2, data.outcome(),
                                         {"W1", "W2", "A1", "W3"}, cfg,
                                         Direction::maximize, 11, nullptr);
  const Vector& a1 = data.column("A1");
  double sum1 = 0, sum0 = 0;
  long n1 = 0, n0 = 0;
  for (Eigen::Index i = 0; i < a1.size(); ++i) {
    if (a1[i] == 1.0) {
      sum1 += stage.blip.predictions[i];
      ++n1;
    } else {
      sum0 += stage.blip.predictions[i];
      ++n0;
    }
  }
  EXPECT_NEAR(sum1 / n1, 0.08 - 0.1, 0.04);
  EXPECT_NEAR(sum0 / n0, -0.1, 0.04);
}
