#pragma once

#include <string>
#include <vector>

#include "odtr/common.hpp"
#include "odtr/dataset.hpp"
#include "odtr/learners.hpp"
#include "odtr/rules.hpp"

namespace odtr {

// Observed-arm propensities are truncated to [0.01, 0.99], bounding any
// single inverse weight at 100. Truncation events are counted and surfaced
// in diagnostics.
constexpr double kPropensityFloor = 0.01;

// Learner configuration shared by the outcome, propensity and blip
// regressions. A library with more than one entry is resolved through the
// discrete super learner.
struct NuisanceConfig {
  std::vector<LearnerSpec> q_library;
  std::vector<LearnerSpec> g_library;
  std::vector<LearnerSpec> blip_library;
  int folds = 0;      // cross-fitting folds; 0 picks auto_fold_count(n)
  int sl_folds = 5;   // internal CV folds for the super learner
  bool cross_fit = true;

  static NuisanceConfig defaults() {
    NuisanceConfig cfg;
    PenalizedLinearSpec lasso_q;
    lasso_q.lambda = 0.01;
    lasso_q.penalty = PenalizedLinearSpec::Penalty::lasso;
    GradientBoostedTreesSpec gbt;
    gbt.num_trees = 60;
    gbt.max_depth = 2;
    gbt.learning_rate = 0.1;
    gbt.min_leaf_size = 20;
    cfg.q_library = {lasso_q, gbt};
    cfg.g_library = {LogisticSpec{1e-4}};
    PenalizedLinearSpec lasso_blip;
    lasso_blip.lambda = 0.1;
    lasso_blip.penalty = PenalizedLinearSpec::Penalty::lasso;
    cfg.blip_library = {lasso_blip};
    return cfg;
  }

  int folds_for(std::size_t n) const { return folds > 0 ? folds : auto_fold_count(n); }

  json to_json() const {
    json j;
    auto lib = [](const std::vector<LearnerSpec>& specs) {
      json arr = json::array();
      for (const auto& s : specs) arr.push_back(spec_to_json(s));
      return arr;
    };
    j["q_learners"] = lib(q_library);
    j["g_learners"] = lib(g_library);
    j["blip_learners"] = lib(blip_library);
    j["folds"] = folds;
    j["sl_folds"] = sl_folds;
    j["cross_fit"] = cross_fit;
    return j;
  }

  static NuisanceConfig from_json(const json& j) {
    NuisanceConfig cfg = defaults();
    auto lib = [](const json& arr) {
      std::vector<LearnerSpec> specs;
      for (const auto& s : arr) specs.push_back(spec_from_json(s));
      if (specs.empty()) throw Error("learner library must not be empty");
      return specs;
    };
    if (j.contains("q_learners")) cfg.q_library = lib(j.at("q_learners"));
    if (j.contains("g_learners")) cfg.g_library = lib(j.at("g_learners"));
    if (j.contains("blip_learners")) cfg.blip_library = lib(j.at("blip_learners"));
    cfg.folds = j.value("folds", 0);
    cfg.sl_folds = j.value("sl_folds", 5);
    cfg.cross_fit = j.value("cross_fit", true);
    return cfg;
  }
};

// Q_t(H_t, 1), Q_t(H_t, 0), Q_t(H_t, A_t) and the truncated probability of
// the observed treatment arm.
struct NuisanceEstimates {
  Vector q_treated;
  Vector q_control;
  Vector q_observed;
  Vector propensity;
  long clipped_count = 0;
};

namespace detail {

inline void require_both_arms(const Vector& a, const std::vector<int>& rows, int t, int fold) {
  long n1 = 0;
  for (int i : rows) n1 += a[i] == 1.0 ? 1 : 0;
  const long n0 = static_cast<long>(rows.size()) - n1;
  if (n1 == 0 || n0 == 0) {
    std::string where = fold < 0 ? "the training data"
                                 : "the training split for fold " + std::to_string(fold);
    throw Error("time " + std::to_string(t) + ": " + where +
                " contains a single treatment arm (treated=" + std::to_string(n1) +
                ", control=" + std::to_string(n0) + ")");
  }
}

inline Vector select_by_arm(const Vector& a, const Vector& on_treated, const Vector& on_control) {
  Vector out(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) out[i] = a[i] == 1.0 ? on_treated[i] : on_control[i];
  return out;
}

}  // namespace detail

// Fits the outcome regression on {H_t, A_t} and the propensity on H_t, then
// extracts counterfactual predictions with A_t forced to 1 and 0. With
// cross-fitting on, every prediction for unit i (including the forced-arm
// ones) comes from the fold model that excludes i.
inline NuisanceEstimates estimate_nuisances(const LongitudinalDataset& data, int t,
                                            const Vector& target, const NuisanceConfig& cfg,
                                            const CrossFitPlan& plan) {
  const HistoryView h = data.history_at(t);
  const Vector& a = data.treatment(t);
  const std::string a_name = data.treatment_name(t);

  std::vector<std::string> q_cols = h.columns;
  q_cols.push_back(a_name);
  DesignMatrix Xq = data.materialize(q_cols);
  const DesignMatrix Xg = data.materialize(h.columns);

  NuisanceEstimates out;
  const ModelSearch q_search{cfg.q_library, cfg.sl_folds};
  const ModelSearch g_search{cfg.g_library, cfg.sl_folds};

  if (cfg.cross_fit) {
    std::vector<int> all(data.n_units());
    std::iota(all.begin(), all.end(), 0);
    for (int fold = 0; fold < plan.k; ++fold)
      detail::require_both_arms(a, plan.train_rows(fold), t, fold);
    const CrossFitModel qm = cross_fit(q_search, Xq, target, Family::squared, plan);
    Xq.set_column(a_name, 1.0);
    out.q_treated = qm.predict_oof(Xq);
    Xq.set_column(a_name, 0.0);
    out.q_control = qm.predict_oof(Xq);
    const CrossFitModel gm = cross_fit(g_search, Xg, a, Family::binomial, plan);
    out.propensity = gm.predict_oof(Xg);
  } else {
    std::vector<int> all(data.n_units());
    std::iota(all.begin(), all.end(), 0);
    detail::require_both_arms(a, all, t, -1);
    const FittedModel qm = fit_search(q_search, Xq, target, Family::squared,
                                      mix_seed(plan.seed, 0x71));
    Xq.set_column(a_name, 1.0);
    out.q_treated = qm.predict(Xq);
    Xq.set_column(a_name, 0.0);
    out.q_control = qm.predict(Xq);
    const FittedModel gm = fit_search(g_search, Xg, a, Family::binomial,
                                      mix_seed(plan.seed, 0x67));
    out.propensity = gm.predict(Xg);
  }

  out.q_observed = detail::select_by_arm(a, out.q_treated, out.q_control);
  // probability of the arm actually received, then truncation
  for (Eigen::Index i = 0; i < out.propensity.size(); ++i) {
    double g = a[i] == 1.0 ? out.propensity[i] : 1.0 - out.propensity[i];
    if (g < kPropensityFloor || g > 1.0 - kPropensityFloor) {
      g = std::clamp(g, kPropensityFloor, 1.0 - kPropensityFloor);
      ++out.clipped_count;
    }
    out.propensity[i] = g;
  }
  return out;
}

// D = (2A - 1)/g * (Y - Q(H,A)) + Q(H,1) - Q(H,0)
inline Vector aipw_transform(const Vector& y, const NuisanceEstimates& nuis, const Vector& a) {
  const Eigen::Index n = y.size();
  if (nuis.q_treated.size() != n || nuis.q_control.size() != n || nuis.q_observed.size() != n ||
      nuis.propensity.size() != n || a.size() != n)
    throw Error("aipw_transform: misaligned inputs");
  if (!y.allFinite() || !a.allFinite()) throw Error("aipw_transform: non-finite inputs");
  Vector d(n);
  for (Eigen::Index i = 0; i < n; ++i)
    d[i] = (2.0 * a[i] - 1.0) / nuis.propensity[i] * (y[i] - nuis.q_observed[i]) +
           nuis.q_treated[i] - nuis.q_control[i];
  return d;
}

// Blip regression B(V): pseudo-outcomes regressed on the rule covariates with
// squared loss (the transformed outcome is real-valued even for binary Y).
struct BlipFit {
  FittedModel full;                    // refit on all units, the deployable model
  std::vector<FittedModel> fold_models;
  std::vector<int> fold_of;
  Vector predictions;                  // out-of-fold when cross-fitting
};

inline BlipFit fit_blip(const Vector& pseudo_outcome, const LongitudinalDataset& data,
                        const std::vector<std::string>& v_names, const NuisanceConfig& cfg,
                        const CrossFitPlan& plan) {
  const DesignMatrix V = data.materialize(v_names);
  const ModelSearch search{cfg.blip_library, cfg.sl_folds};
  BlipFit out;
  out.full = fit_search(search, V, pseudo_outcome, Family::squared, mix_seed(plan.seed, 0x62));
  if (cfg.cross_fit) {
    const CrossFitModel cf = cross_fit(search, V, pseudo_outcome, Family::squared, plan);
    out.fold_models = cf.fold_models;
    out.fold_of = plan.fold_of;
    out.predictions = cf.predict_oof(V);
  } else {
    out.predictions = out.full.predict(V);
  }
  return out;
}

// One learned decision point: the blip model over V_t plus the sign
// convention, with assignment diagnostics.
struct FittedODTRStage {
  int t = 1;
  LearnedBlipStage blip_stage;
  Direction direction = Direction::maximize;
  double fraction_assigned_one = 0.0;
  double mean_blip = 0.0;
  long clipped_propensities = 0;

  // the stage as a standalone single-time-point rule
  TreatmentRule as_rule(bool out_of_fold = false) const {
    LearnedBlipRule rule;
    rule.stages.assign(static_cast<std::size_t>(t), LearnedBlipStage{});
    rule.stages[static_cast<std::size_t>(t - 1)] = blip_stage;
    rule.direction = direction;
    rule.use_out_of_fold = out_of_fold;
    return rule;
  }
};

// Full record of one backward-induction stage while learning: nuisances,
// pseudo-outcomes, the fitted blip and the induced assignments.
struct LearnedStage {
  NuisanceEstimates nuisances;
  Vector pseudo_outcome;  // D_t
  Vector residual;        // running correction R_t handed to stage t-1
  BlipFit blip;
  Vector assignments;     // d_t on the training data (out-of-fold if cross-fit)
  Vector compliance;      // 1(A_t = d_t)
  Vector q_at_rule;       // Q_t(H_t, d_t)
  FittedODTRStage stage;
};

// Shared core of the single-stage and backward-induction learners. `target`
// is Y at the last decision point and the substituted pseudo-outcome earlier;
// `future_term` carries 1(A_{t+1}=d_{t+1})/g_{t+1} * R_{t+1} from the stage
// learned just before this one (null when t is the last stage).
inline LearnedStage learn_stage(const LongitudinalDataset& data, int t, const Vector& target,
                                const std::vector<std::string>& v_names,
                                const NuisanceConfig& cfg, Direction direction,
                                std::uint64_t master_seed, const Vector* future_term) {
  const std::size_t n = data.n_units();
  const CrossFitPlan plan =
      CrossFitPlan::make(n, cfg.folds_for(n), mix_seed(master_seed, static_cast<std::uint64_t>(t)));

  LearnedStage out;
  out.nuisances = estimate_nuisances(data, t, target, cfg, plan);
  const Vector& a = data.treatment(t);

  out.residual = target - out.nuisances.q_observed;
  if (future_term != nullptr) out.residual += *future_term;
  Vector d(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < d.size(); ++i)
    d[i] = (2.0 * a[i] - 1.0) / out.nuisances.propensity[i] * out.residual[i] +
           out.nuisances.q_treated[i] - out.nuisances.q_control[i];
  out.pseudo_outcome = d;

  out.blip = fit_blip(out.pseudo_outcome, data, v_names, cfg, plan);
  out.assignments.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < out.assignments.size(); ++i)
    out.assignments[i] = assign_from_blip(out.blip.predictions[i], direction);
  out.compliance.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < out.compliance.size(); ++i)
    out.compliance[i] = a[i] == out.assignments[i] ? 1.0 : 0.0;
  out.q_at_rule =
      detail::select_by_arm(out.assignments, out.nuisances.q_treated, out.nuisances.q_control);

  out.stage.t = t;
  out.stage.direction = direction;
  out.stage.blip_stage.blip = out.blip.full;
  out.stage.blip_stage.v_names = v_names;
  out.stage.blip_stage.fold_blips = out.blip.fold_models;
  out.stage.blip_stage.fold_of = out.blip.fold_of;
  out.stage.fraction_assigned_one = out.assignments.mean();
  out.stage.mean_blip = out.blip.predictions.mean();
  out.stage.clipped_propensities = out.nuisances.clipped_count;
  return out;
}

// Single time-point rule learning: AIPW pseudo-outcomes regressed on V,
// assignment by the sign of the fitted blip.
inline FittedODTRStage learn_odtr_single(const LongitudinalDataset& data,
                                         const std::vector<std::string>& v_names,
                                         const NuisanceConfig& cfg, Direction direction,
                                         std::uint64_t seed, int t = 1) {
  const LearnedStage stage =
      learn_stage(data, t, data.outcome(), v_names, cfg, direction, seed, nullptr);
  return stage.stage;
}

}  // namespace odtr
