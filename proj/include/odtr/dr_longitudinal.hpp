#pragma once

#include <string>
#include <vector>

#include "odtr/dr_single.hpp"

namespace odtr {

// Cumulative compliance/propensity weight products are capped here; the cap
// can only bind for horizons of three or more decision points given the
// propensity floor of 0.01.
constexpr double kCumulativeWeightCap = 1e4;

// Everything the sequential transform needs to know about an already-learned
// stage. The q_* vectors are the stage's outcome-regression predictions, the
// assignments are the learned rule's decisions on the training data.
struct StageCache {
  Vector treatment;
  Vector propensity;   // truncated, at the observed arm
  Vector q_treated;
  Vector q_control;
  Vector q_observed;
  Vector assignments;  // d_t
  Vector q_at_rule;    // Q_t(H_t, d_t)
  Vector compliance;   // 1(A_t = d_t)
};

// Ytilde for the next-earlier stage: Q_t evaluated at the rule's arm
inline Vector pseudo_outcome_update(const StageCache& cache) {
  const Eigen::Index n = cache.assignments.size();
  if (cache.q_treated.size() != n || cache.q_control.size() != n)
    throw Error("pseudo_outcome_update: misaligned cache");
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i)
    out[i] = cache.assignments[i] == 1.0 ? cache.q_treated[i] : cache.q_control[i];
  return out;
}

struct SequentialTransform {
  Vector values;       // D_t per unit
  long capped_weights = 0;
};

// Sequential doubly-robust pseudo-outcome for stage t. `caches` holds stages
// t..tau in order; the terminal regression target is the observed outcome
// (Q_{tau+1} == Y). Evaluated through the backward recursion
//   R_tau = Y - Q_tau(H_tau, A_tau)
//   R_s   = (Q_{s+1}(H_{s+1}, d_{s+1}) - Q_s(H_s, A_s))
//           + [1(A_{s+1}=d_{s+1}) / g_{s+1}] * R_{s+1}
//   D_t   = (2A_t - 1)/g_t * R_t + Q_t(H_t,1) - Q_t(H_t,0),
// which expands to the weighted sum over future stages term by term.
inline SequentialTransform sequential_aipw_transform(const std::vector<StageCache>& caches,
                                                     const Vector& y) {
  if (caches.empty()) throw Error("sequential_aipw_transform: no stage caches");
  const Eigen::Index n = y.size();
  for (const auto& c : caches)
    if (c.q_observed.size() != n || c.propensity.size() != n || c.compliance.size() != n)
      throw Error("sequential_aipw_transform: misaligned cache");

  SequentialTransform out;
  Vector residual = y - caches.back().q_observed;
  Vector running = Vector::Ones(n);  // product of future multipliers, for the cap
  for (std::size_t idx = caches.size() - 1; idx-- > 0;) {
    const StageCache& next = caches[idx + 1];
    const StageCache& cur = caches[idx];
    Vector m(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double mi = next.compliance[i] / next.propensity[i];
      if (running[i] * mi > kCumulativeWeightCap) {
        mi = kCumulativeWeightCap / running[i];
        ++out.capped_weights;
      }
      running[i] *= mi;
      m[i] = mi;
    }
    residual = (next.q_at_rule - cur.q_observed) + (m.array() * residual.array()).matrix();
  }
  const StageCache& first = caches.front();
  out.values.resize(n);
  for (Eigen::Index i = 0; i < n; ++i)
    out.values[i] = (2.0 * first.treatment[i] - 1.0) / first.propensity[i] * residual[i] +
                    first.q_treated[i] - first.q_control[i];
  return out;
}

// ── the learned rule sequence ────────────────────────────────────────────────

struct FittedODTR {
  Direction direction = Direction::maximize;
  RuleCovariateSpec v;
  std::vector<FittedODTRStage> stages;       // index t-1
  std::vector<StageCache> caches;            // training-data caches, index t-1
  long clipped_propensities = 0;
  long capped_weights = 0;

  int tau() const { return static_cast<int>(stages.size()); }

  // The rule as an applicable object. With out_of_fold set, assignments on
  // the training dataset use each unit's held-out-fold blip model, which is
  // what the policy-value evaluation of a learned rule should consume.
  TreatmentRule as_rule(bool out_of_fold = false) const {
    LearnedBlipRule rule;
    rule.direction = direction;
    rule.use_out_of_fold = out_of_fold;
    for (const auto& s : stages) rule.stages.push_back(s.blip_stage);
    return rule;
  }

  json to_json() const {
    json j;
    j["direction"] = direction_name(direction);
    j["rule_covariates"] = v.per_time;
    json stages_json = json::array();
    for (const auto& s : stages) {
      json sj;
      sj["t"] = s.t;
      sj["v_names"] = s.blip_stage.v_names;
      sj["blip_model"] = s.blip_stage.blip.to_json();
      sj["fraction_assigned_one"] = s.fraction_assigned_one;
      sj["mean_blip"] = s.mean_blip;
      sj["clipped_propensities"] = s.clipped_propensities;
      stages_json.push_back(std::move(sj));
    }
    j["stages"] = std::move(stages_json);
    j["clipped_propensities"] = clipped_propensities;
    j["capped_weights"] = capped_weights;
    return j;
  }

  // Restores the deployable artifact: full blip models only. Fold models and
  // training caches are in-memory products of learning and are not persisted.
  static FittedODTR from_json(const json& j) {
    FittedODTR odtr;
    odtr.direction = direction_from_name(j.at("direction").get<std::string>());
    if (j.contains("rule_covariates"))
      odtr.v.per_time = j.at("rule_covariates").get<std::vector<std::vector<std::string>>>();
    for (const auto& sj : j.at("stages")) {
      FittedODTRStage stage;
      stage.t = sj.at("t").get<int>();
      stage.direction = odtr.direction;
      stage.blip_stage.v_names = sj.at("v_names").get<std::vector<std::string>>();
      stage.blip_stage.blip = FittedModel::from_json(sj.at("blip_model"));
      stage.fraction_assigned_one = sj.value("fraction_assigned_one", 0.0);
      stage.mean_blip = sj.value("mean_blip", 0.0);
      odtr.stages.push_back(std::move(stage));
    }
    return odtr;
  }
};

// Backward induction over t = tau..1. Each stage regresses the running
// pseudo-outcome on {H_t, A_t}, fits the propensity, forms the sequential
// doubly-robust transform, fits the blip on V_t, derives the stage rule and
// substitutes Q_t at the rule's arm as the next target. The sequential
// correction R_t is threaded through the loop in a single pass.
inline FittedODTR learn_odtr(const LongitudinalDataset& data, const RuleCovariateSpec& v,
                             const NuisanceConfig& cfg, Direction direction, std::uint64_t seed) {
  const int tau = data.tau();
  data.validate_rule_covariates(v);
  const Eigen::Index n = static_cast<Eigen::Index>(data.n_units());

  FittedODTR odtr;
  odtr.direction = direction;
  odtr.v = v;
  odtr.stages.resize(static_cast<std::size_t>(tau));
  odtr.caches.resize(static_cast<std::size_t>(tau));

  Vector target = data.outcome();
  Vector future_term;
  Vector running = Vector::Ones(n);
  for (int t = tau; t >= 1; --t) {
    LearnedStage learned;
    try {
      learned = learn_stage(data, t, target, v.per_time[static_cast<std::size_t>(t - 1)], cfg,
                            direction, seed, t == tau ? nullptr : &future_term);
    } catch (const Error& e) {
      throw Error("learning failed at time " + std::to_string(t) + ": " + e.what());
    }
    odtr.clipped_propensities += learned.nuisances.clipped_count;

    StageCache cache;
    cache.treatment = data.treatment(t);
    cache.propensity = learned.nuisances.propensity;
    cache.q_treated = learned.nuisances.q_treated;
    cache.q_control = learned.nuisances.q_control;
    cache.q_observed = learned.nuisances.q_observed;
    cache.assignments = learned.assignments;
    cache.q_at_rule = learned.q_at_rule;
    cache.compliance = learned.compliance;
    odtr.caches[static_cast<std::size_t>(t - 1)] = std::move(cache);
    odtr.stages[static_cast<std::size_t>(t - 1)] = learned.stage;

    if (t > 1) {
      // multiplier handed to the next-earlier stage, with the cumulative cap
      Vector m(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        double mi = learned.compliance[i] / learned.nuisances.propensity[i];
        if (running[i] * mi > kCumulativeWeightCap) {
          mi = kCumulativeWeightCap / running[i];
          ++odtr.capped_weights;
        }
        running[i] *= mi;
        m[i] = mi;
      }
      future_term = (m.array() * learned.residual.array()).matrix();
      target = learned.q_at_rule;
    }
  }
  return odtr;
}

}  // namespace odtr
