#pragma once

#include <string>
#include <vector>

#include "odtr/dr_longitudinal.hpp"

namespace odtr {

// psi-hat with influence-function-based uncertainty; eif holds the per-unit
// uncentered influence values, so psi_hat == mean(eif) by construction.
struct PolicyValueEstimate {
  std::string rule_name;
  double psi_hat = 0.0;
  double se = 0.0;
  double alpha = 0.05;
  std::pair<double, double> ci{0.0, 0.0};
  Vector eif;
  std::size_t n = 0;
  double clipped_weight_fraction = 0.0;
  long capped_weights = 0;

  json to_json() const {
    return json{{"rule_name", rule_name},
                {"psi_hat", psi_hat},
                {"se", se},
                {"ci", {ci.first, ci.second}},
                {"alpha", alpha},
                {"n", n},
                {"clipped_weight_fraction", clipped_weight_fraction},
                {"capped_weights", capped_weights}};
  }
};

// risk ratio of two policy values with log-scale influence-function variance
struct ContrastEstimate {
  std::string rule_name;
  std::string reference_rule;
  double rr = 1.0;
  double log_rr_se = 0.0;
  double alpha = 0.05;
  std::pair<double, double> ci{1.0, 1.0};

  json to_json() const {
    return json{{"rule_name", rule_name}, {"reference_rule", reference_rule},
                {"rr", rr},             {"log_rr_se", log_rr_se},
                {"ci", {ci.first, ci.second}}, {"alpha", alpha}};
  }
};

// Pre-computed per-stage ingredients of the efficient influence function,
// used directly by tests and assembled from data by sdr_policy_value.
struct SdrStageNuisance {
  Vector q_at_rule;    // Qbar_t(H_t, d_t)
  Vector propensity;   // truncated probability of the observed arm
  Vector compliance;   // 1(A_t = d_t)
};

namespace detail {

inline PolicyValueEstimate assemble_policy_value(const std::vector<SdrStageNuisance>& stages,
                                                 const Vector& y, double alpha,
                                                 std::string rule_name) {
  const Eigen::Index n = y.size();
  const std::size_t tau = stages.size();
  if (tau == 0) throw Error("policy value: no stages");
  for (const auto& s : stages)
    if (s.q_at_rule.size() != n || s.propensity.size() != n || s.compliance.size() != n)
      throw Error("policy value: misaligned stage nuisances");
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("policy value: alpha must be in (0,1)");

  PolicyValueEstimate out;
  out.rule_name = std::move(rule_name);
  out.alpha = alpha;
  out.n = static_cast<std::size_t>(n);

  // phi_i = Qbar_1(d_1)
  //         + sum_t prod_{k<=t} [1(A_k=d_k)/g_k] * (Qbar_{t+1}(d_{t+1}) - Qbar_t(d_t)),
  // with Qbar_{tau+1}(d) == Y
  Vector phi = stages[0].q_at_rule;
  Vector weight = Vector::Ones(n);
  for (std::size_t t = 0; t < tau; ++t) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double w = weight[i] * stages[t].compliance[i] / stages[t].propensity[i];
      if (w > kCumulativeWeightCap) {
        w = kCumulativeWeightCap;
        ++out.capped_weights;
      }
      weight[i] = w;
    }
    const Vector& next_q = t + 1 < tau ? stages[t + 1].q_at_rule : y;
    phi += (weight.array() * (next_q - stages[t].q_at_rule).array()).matrix();
  }

  out.eif = phi;
  out.psi_hat = phi.mean();
  out.se = sample_sd(phi) / std::sqrt(static_cast<double>(n));
  const double z = normal_quantile(1.0 - alpha / 2.0);
  out.ci = {out.psi_hat - z * out.se, out.psi_hat + z * out.se};
  return out;
}

}  // namespace detail

// Stage nuisances directly supplied; the entry point for tests that need to
// pin propensities or regression fits.
inline PolicyValueEstimate sdr_policy_value_from_nuisances(
    const std::vector<SdrStageNuisance>& stages, const Vector& y, double alpha = 0.05,
    std::string rule_name = "custom") {
  return detail::assemble_policy_value(stages, y, alpha, std::move(rule_name));
}

// Sequentially doubly robust estimate of E[Y_D] for an arbitrary per-stage
// rule sequence. Backward regressions substitute the target rule:
// Qbar_{tau+1} == Y, then Qbar_t regresses Qbar_{t+1}(H_{t+1}, d_{t+1}) on
// {H_t, A_t}. With cross-fitting on, all predictions are out-of-fold.
inline PolicyValueEstimate sdr_policy_value(const LongitudinalDataset& data,
                                            const std::vector<TreatmentRule>& rules,
                                            const NuisanceConfig& cfg, std::uint64_t seed,
                                            double alpha = 0.05) {
  const int tau = data.tau();
  if (rules.size() != static_cast<std::size_t>(tau))
    throw Error("policy value: rule sequence has " + std::to_string(rules.size()) +
                " stages, data has " + std::to_string(tau));
  const std::size_t n = data.n_units();

  std::vector<Vector> assigned(static_cast<std::size_t>(tau));
  for (int t = 1; t <= tau; ++t)
    assigned[static_cast<std::size_t>(t - 1)] = apply_rule(rules[static_cast<std::size_t>(t - 1)], data, t);

  std::vector<SdrStageNuisance> stages(static_cast<std::size_t>(tau));
  long clipped = 0;
  Vector target = data.outcome();
  for (int t = tau; t >= 1; --t) {
    const std::size_t ti = static_cast<std::size_t>(t - 1);
    const CrossFitPlan plan = CrossFitPlan::make(
        n, cfg.folds_for(n), mix_seed(seed, 0xe0a1u + static_cast<std::uint64_t>(t)));
    const HistoryView h = data.history_at(t);
    const Vector& a = data.treatment(t);
    const std::string a_name = data.treatment_name(t);

    std::vector<std::string> q_cols = h.columns;
    q_cols.push_back(a_name);
    DesignMatrix Xq = data.materialize(q_cols);
    const DesignMatrix Xg = data.materialize(h.columns);
    const ModelSearch q_search{cfg.q_library, cfg.sl_folds};
    const ModelSearch g_search{cfg.g_library, cfg.sl_folds};

    Vector q_at_rule, raw_p;
    if (cfg.cross_fit) {
      for (int fold = 0; fold < plan.k; ++fold)
        detail::require_both_arms(a, plan.train_rows(fold), t, fold);
      const CrossFitModel qm = cross_fit(q_search, Xq, target, Family::squared, plan);
      Xq.set_column(a_name, assigned[ti]);
      q_at_rule = qm.predict_oof(Xq);
      raw_p = cross_fit(g_search, Xg, a, Family::binomial, plan).predict_oof(Xg);
    } else {
      std::vector<int> all(n);
      std::iota(all.begin(), all.end(), 0);
      detail::require_both_arms(a, all, t, -1);
      const FittedModel qm =
          fit_search(q_search, Xq, target, Family::squared, mix_seed(plan.seed, 0x71));
      Xq.set_column(a_name, assigned[ti]);
      q_at_rule = qm.predict(Xq);
      raw_p = fit_search(g_search, Xg, a, Family::binomial, mix_seed(plan.seed, 0x67)).predict(Xg);
    }

    SdrStageNuisance& st = stages[ti];
    st.q_at_rule = q_at_rule;
    st.propensity.resize(static_cast<Eigen::Index>(n));
    st.compliance.resize(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
      double g = a[i] == 1.0 ? raw_p[i] : 1.0 - raw_p[i];
      if (g < kPropensityFloor || g > 1.0 - kPropensityFloor) {
        g = std::clamp(g, kPropensityFloor, 1.0 - kPropensityFloor);
        ++clipped;
      }
      st.propensity[i] = g;
      st.compliance[i] = a[i] == assigned[ti][i] ? 1.0 : 0.0;
    }
    target = st.q_at_rule;
  }

  PolicyValueEstimate out = detail::assemble_policy_value(
      stages, data.outcome(), alpha, rule_label(rules.front()));
  out.clipped_weight_fraction =
      static_cast<double>(clipped) / (static_cast<double>(n) * static_cast<double>(tau));
  return out;
}

// RR = psi_a / psi_b with the per-unit log-RR influence values
// phi_a/psi_a - phi_b/psi_b; both arms must be evaluated on the same units.
inline ContrastEstimate rr_contrast(const PolicyValueEstimate& a, const PolicyValueEstimate& b,
                                    double alpha = 0.05) {
  if (a.eif.size() != b.eif.size() || a.n != b.n)
    throw Error("rr_contrast: estimates were not computed on the same units");
  if (a.psi_hat <= 0.0 || b.psi_hat <= 0.0)
    throw Error("rr_contrast: a policy value is <= 0 (" + std::to_string(a.psi_hat) + " vs " +
                std::to_string(b.psi_hat) +
                "), the ratio scale is not interpretable; compare psi_hat differences and their "
                "influence functions instead");
  ContrastEstimate out;
  out.rule_name = a.rule_name;
  out.reference_rule = b.rule_name;
  out.alpha = alpha;
  out.rr = a.psi_hat / b.psi_hat;
  Vector log_if = a.eif / a.psi_hat - b.eif / b.psi_hat;
  out.log_rr_se = sample_sd(log_if) / std::sqrt(static_cast<double>(a.n));
  const double z = normal_quantile(1.0 - alpha / 2.0);
  out.ci = {std::exp(std::log(out.rr) - z * out.log_rr_se),
            std::exp(std::log(out.rr) + z * out.log_rr_se)};
  return out;
}

}  // namespace odtr
