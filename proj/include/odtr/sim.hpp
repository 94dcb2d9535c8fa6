#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "odtr/policy_eval.hpp"

namespace odtr {
namespace sim {

// ── generating model ─────────────────────────────────────────────────────────
//
//   W1, W2 ~ U(-1,1)
//   A1     ~ Bernoulli(expit(0.5 - 1.3 W1 + 0.4 W2))
//   W3     = 1.25 A1 U(-1,1) + 0.25          (degenerate at 0.25 when A1 = 0)
//   A2     ~ Bernoulli(expit(0.5 + 0.4 A1 - 1.5 W3))
//   Y      ~ Normal(mu, 1)
//
// The outcome mean is written term by term below; the +A2*W3 and -A2*W3 terms
// cancel and -4*A1*W1 appears twice, so the effective mean is
//   0.4 - 0.4 A1 - 8 A1 W1 + 0.08 A1 A2 - 2 A1 W2 - 0.1 A2 + 1.5 W1.
// The redundant form is kept so every term can be audited one by one.

inline double outcome_mean(double w1, double w2, double a1, double w3, double a2) {
  return 0.4 - 0.4 * a1 - a2 * w3 - 4.0 * a1 * w1 + 0.08 * a1 * a2 + a2 * w3 - 4.0 * a1 * w1 -
         2.0 * a1 * w2 - 0.1 * a2 + 1.5 * w1;
}

inline DataSchema schema() {
  nlohmann::json j = {
      {"Y", "outcome"},
      {"A1", {{"treatment", 1}}},
      {"A2", {{"treatment", 2}}},
      {"W1", {{"covariate", 1}}},
      {"W2", {{"covariate", 1}}},
      {"W3", {{"covariate", 2}}},
      {"rule_covariates", {{"W1", "W2"}, {"W1", "W2", "A1", "W3"}}},
  };
  return DataSchema::from_json(j);
}

inline RuleCovariateSpec rule_covariates() { return schema().rule_covariates; }

inline LongitudinalDataset generate(long n, std::uint64_t seed) {
  if (n < 1) throw Error("generate: n must be >= 1");
  Rng rng(mix_seed(seed, 0xd6));
  Vector w1(n), w2(n), a1(n), w3(n), a2(n), y(n);
  for (long i = 0; i < n; ++i) {
    w1[i] = rng.uniform(-1.0, 1.0);
    w2[i] = rng.uniform(-1.0, 1.0);
    a1[i] = rng.bernoulli(expit(0.5 - 1.3 * w1[i] + 0.4 * w2[i]));
    const double u3 = rng.uniform(-1.0, 1.0);
    w3[i] = 1.25 * a1[i] * u3 + 0.25;
    a2[i] = rng.bernoulli(expit(0.5 + 0.4 * a1[i] - 1.5 * w3[i]));
    y[i] = outcome_mean(w1[i], w2[i], a1[i], w3[i], a2[i]) + rng.normal();
  }
  std::unordered_map<std::string, Vector> cols{{"W1", w1}, {"W2", w2}, {"A1", a1},
                                               {"W3", w3}, {"A2", a2}, {"Y", y}};
  return LongitudinalDataset(schema(), std::move(cols));
}

// ── oracle rules and truth ───────────────────────────────────────────────────
//
// Substituting the always-0 optimal second-stage decision (its advantage is
// 0.08 A1 - 0.1 < 0 for either arm) leaves a first-stage advantage of
//   -0.4 - 8 W1 - 2 W2,
// so the optimal regime treats at stage 1 exactly when that is positive.

inline double stage1_advantage(double w1, double w2) { return -0.4 - 8.0 * w1 - 2.0 * w2; }

inline std::vector<TreatmentRule> analytic_optimal_rule() {
  LearnedBlipStage stage;
  stage.v_names = {"W1", "W2"};
  LinearState lin;
  lin.intercept = -0.4;
  lin.coef = Vector(2);
  lin.coef << -8.0, -2.0;
  stage.blip = FittedModel(Family::squared, {"W1", "W2"}, lin);
  LearnedBlipRule stage1;
  stage1.stages = {stage};
  stage1.direction = Direction::maximize;
  return {TreatmentRule{stage1}, TreatmentRule{StaticAllRule{0}}};
}

// Closed form for E[Y] under the optimal regime. With d2 == 0 the value is
//   0.4 + E[max(0, T - c)],  T = (-8 W1) + (-2 W2), c = 0.4,
// and T is the sum of independent U(-a,a), U(-b,b) with a = 8, b = 2. Its
// density is flat at 1/(2a) on [-(a-b), a-b] and ramps linearly to zero at
// +/-(a+b), so the positive-part mean splits into a flat piece and a ramp
// piece, both integrable in closed form.
inline double oracle_closed_form() {
  const double a = 8.0, b = 2.0, c = 0.4;
  // flat piece: integral of (t-c)/(2a) from c to a-b
  const double flat = (a - b - c) * (a - b - c) / (4.0 * a);
  // ramp piece: integral of (t-c)(a+b-t)/(4ab) from a-b to a+b
  const double k = a + b;
  auto antider = [&](double t) {
    return -t * t * t / 3.0 + (k + c) * t * t / 2.0 - c * k * t;
  };
  const double ramp = (antider(a + b) - antider(a - b)) / (4.0 * a * b);
  return 0.4 + flat + ramp;
}

// Monte Carlo value of a regime (d1 decided by the caller, d2 == 0),
// simulating the counterfactual trajectory including outcome noise.
template <typename D1>
double policy_value_mc(long draws, std::uint64_t seed, D1 d1) {
  if (draws < 1) throw Error("policy_value_mc: draws must be >= 1");
  Rng rng(mix_seed(seed, 0x0c));
  double total = 0.0;
  for (long m = 0; m < draws; ++m) {
    const double w1 = rng.uniform(-1.0, 1.0);
    const double w2 = rng.uniform(-1.0, 1.0);
    const double a1 = d1(w1, w2);
    const double u3 = rng.uniform(-1.0, 1.0);
    const double w3 = 1.25 * a1 * u3 + 0.25;
    const double a2 = 0.0;
    total += outcome_mean(w1, w2, a1, w3, a2) + rng.normal();
  }
  return total / static_cast<double>(draws);
}

inline double oracle_true_value(long draws, std::uint64_t seed) {
  return policy_value_mc(draws, seed, [](double w1, double w2) {
    return stage1_advantage(w1, w2) > 0.0 ? 1.0 : 0.0;
  });
}

// ── replication study ────────────────────────────────────────────────────────

struct SimConfig {
  std::vector<long> sample_sizes{500};
  int n_replicates = 1000;
  std::uint64_t seed = 1;
  NuisanceConfig learners = NuisanceConfig::defaults();
  Direction direction = Direction::maximize;
  double alpha = 0.05;
  long oracle_draws = 4'000'000;
  int threads = 1;

  void validate() const {
    if (sample_sizes.empty()) throw Error("simulation config: no sample sizes");
    for (long n : sample_sizes)
      if (n < 40) throw Error("simulation config: sample sizes must be >= 40");
    if (n_replicates < 1) throw Error("simulation config: n_replicates must be >= 1");
    if (oracle_draws < 1'000'000) throw Error("simulation config: oracle_draws must be >= 1e6");
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("simulation config: alpha must be in (0,1)");
  }
};

struct SimRow {
  long n = 0;
  double mean_psi = 0.0;
  double abs_bias = 0.0;
  double sqrt_n_abs_bias = 0.0;
  double coverage = 0.0;
  double mean_se = 0.0;
  double sd_psi = 0.0;
  int replicates = 0;
  int failed = 0;
};

struct SimMetrics {
  double oracle_closed = 0.0;
  double oracle_mc = 0.0;
  std::vector<SimRow> rows;
};

struct ReplicateResult {
  bool ok = false;
  double psi = 0.0;
  double se = 0.0;
  bool covered = false;
  std::string error;
};

// One replicate: draw data, learn the regime, evaluate the cross-fit rule.
inline ReplicateResult run_one_replicate(long n, std::uint64_t rep_seed, const SimConfig& cfg,
                                         double truth) {
  ReplicateResult res;
  try {
    const LongitudinalDataset data = generate(n, rep_seed);
    const FittedODTR odtr = learn_odtr(data, rule_covariates(), cfg.learners, cfg.direction,
                                       mix_seed(rep_seed, 0x4c));
    const TreatmentRule rule = odtr.as_rule(cfg.learners.cross_fit);
    const PolicyValueEstimate est = sdr_policy_value(
        data, uniform_rule(rule, data.tau()), cfg.learners, mix_seed(rep_seed, 0x45), cfg.alpha);
    res.ok = true;
    res.psi = est.psi_hat;
    res.se = est.se;
    res.covered = est.ci.first <= truth && truth <= est.ci.second;
  } catch (const std::exception& e) {
    res.ok = false;
    res.error = e.what();
  }
  return res;
}

// Bias and coverage against the oracle truth. Replicates run independently
// (optionally in parallel); failures are counted and excluded, and the
// aggregation is a fixed-order reduction so results do not depend on the
// thread count.
inline SimMetrics run_replications(const SimConfig& cfg) {
  cfg.validate();
  SimMetrics metrics;
  metrics.oracle_closed = oracle_closed_form();
  metrics.oracle_mc = oracle_true_value(cfg.oracle_draws, mix_seed(cfg.seed, 0x0a));
  const double truth = metrics.oracle_closed;

  for (long n : cfg.sample_sizes) {
    std::vector<ReplicateResult> results(static_cast<std::size_t>(cfg.n_replicates));
    parallel_for(results.size(), cfg.threads, [&](std::size_t r) {
      const std::uint64_t rep_seed =
          mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(n)), 0x72650000u + r);
      results[r] = run_one_replicate(n, rep_seed, cfg, truth);
    });

    SimRow row;
    row.n = n;
    std::vector<double> psis, ses;
    int covered = 0;
    for (const auto& res : results) {
      if (!res.ok) {
        ++row.failed;
        continue;
      }
      psis.push_back(res.psi);
      ses.push_back(res.se);
      covered += res.covered ? 1 : 0;
    }
    row.replicates = static_cast<int>(psis.size());
    if (row.replicates > 0) {
      const Eigen::Map<const Vector> psi_v(psis.data(), static_cast<Eigen::Index>(psis.size()));
      const Eigen::Map<const Vector> se_v(ses.data(), static_cast<Eigen::Index>(ses.size()));
      row.mean_psi = psi_v.mean();
      row.abs_bias = std::abs(row.mean_psi - truth);
      row.sqrt_n_abs_bias = std::sqrt(static_cast<double>(n)) * row.abs_bias;
      row.coverage = static_cast<double>(covered) / static_cast<double>(row.replicates);
      row.mean_se = se_v.mean();
      row.sd_psi = sample_sd(psi_v);
    }
    metrics.rows.push_back(row);
  }
  return metrics;
}

// table matching the replication report layout
inline std::string metrics_to_csv(const SimMetrics& metrics) {
  std::string out = "n,psi_hat,abs_bias,sqrt_n_abs_bias,coverage\n";
  char buf[160];
  for (const auto& row : metrics.rows) {
    std::snprintf(buf, sizeof(buf), "%ld,%.6f,%.6f,%.6f,%.6f\n", row.n, row.mean_psi,
                  row.abs_bias, row.sqrt_n_abs_bias, row.coverage);
    out += buf;
  }
  return out;
}

inline json metrics_to_json(const SimMetrics& metrics) {
  json rows = json::array();
  for (const auto& row : metrics.rows)
    rows.push_back({{"n", row.n},
                    {"psi_hat", row.mean_psi},
                    {"abs_bias", row.abs_bias},
                    {"sqrt_n_abs_bias", row.sqrt_n_abs_bias},
                    {"coverage", row.coverage},
                    {"mean_se", row.mean_se},
                    {"sd_psi", row.sd_psi},
                    {"replicates", row.replicates},
                    {"failed", row.failed}});
  return json{{"oracle_closed_form", metrics.oracle_closed},
              {"oracle_monte_carlo", metrics.oracle_mc},
              {"rows", rows}};
}

}  // namespace sim
}  // namespace odtr
