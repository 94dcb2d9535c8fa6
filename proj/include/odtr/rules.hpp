#pragma once

#include <string>
#include <variant>
#include <vector>

#include "odtr/common.hpp"
#include "odtr/dataset.hpp"
#include "odtr/learners.hpp"

namespace odtr {

enum class Direction { maximize, minimize };

inline std::string direction_name(Direction d) {
  return d == Direction::maximize ? "max" : "min";
}

inline Direction direction_from_name(const std::string& s) {
  if (s == "max" || s == "maximize") return Direction::maximize;
  if (s == "min" || s == "minimize") return Direction::minimize;
  throw Error("unknown direction '" + s + "' (expected max or min)");
}

// sign rule: treat when the blip favors treatment, strictly; a zero blip
// assigns 0 under either direction
inline double assign_from_blip(double blip, Direction d) {
  return d == Direction::maximize ? (blip > 0.0 ? 1.0 : 0.0) : (blip < 0.0 ? 1.0 : 0.0);
}

// ── treatment rule variants ──────────────────────────────────────────────────

struct StaticAllRule {
  int value = 0;  // 0 or 1, applied to everyone at every time point
};

struct ThresholdRule {
  enum class Op { gt, ge, lt, le };
  std::string column;
  Op op = Op::gt;
  double cutoff = 0.0;
  int if_true = 1;
  int if_false = 0;
};

// One learned blip model per time point plus the sign convention. Optional
// per-fold models support out-of-fold assignment on the training data.
struct LearnedBlipStage {
  FittedModel blip;
  std::vector<std::string> v_names;
  std::vector<FittedModel> fold_blips;  // empty unless learned with cross-fitting
  std::vector<int> fold_of;             // training-unit fold map
};

struct LearnedBlipRule {
  std::vector<LearnedBlipStage> stages;  // index t-1
  Direction direction = Direction::maximize;
  // When set, stage assignments for unit i use the blip model fit without
  // i's fold; only valid on the dataset the rule was learned from.
  bool use_out_of_fold = false;
};

struct ObservedTreatmentRule {};  // d_t(.) = A_t as observed

using TreatmentRule =
    std::variant<StaticAllRule, ThresholdRule, LearnedBlipRule, ObservedTreatmentRule>;

inline std::string rule_label(const TreatmentRule& rule) {
  if (const auto* s = std::get_if<StaticAllRule>(&rule))
    return "static_" + std::to_string(s->value);
  if (const auto* t = std::get_if<ThresholdRule>(&rule)) {
    const char* op = t->op == ThresholdRule::Op::gt   ? ">"
                     : t->op == ThresholdRule::Op::ge ? ">="
                     : t->op == ThresholdRule::Op::lt ? "<"
                                                      : "<=";
    return "threshold(" + t->column + op + std::to_string(t->cutoff) + ")";
  }
  if (std::holds_alternative<LearnedBlipRule>(rule)) return "learned_odtr";
  return "observed";
}

namespace detail {

inline void require_in_history(const LongitudinalDataset& data, int t, const std::string& column,
                               const char* what) {
  const HistoryView h = data.history_at(t);
  if (std::find(h.columns.begin(), h.columns.end(), column) == h.columns.end())
    throw Error(std::string(what) + " references column '" + column +
                "' which is not part of the history at time " + std::to_string(t));
}

inline Vector blip_values_at(const LearnedBlipRule& rule, const LongitudinalDataset& data, int t) {
  if (t < 1 || static_cast<std::size_t>(t) > rule.stages.size())
    throw Error("learned rule has no blip model for time " + std::to_string(t));
  const LearnedBlipStage& stage = rule.stages[static_cast<std::size_t>(t - 1)];
  for (const auto& name : stage.v_names) require_in_history(data, t, name, "learned rule");
  const DesignMatrix V = data.materialize(stage.v_names);
  if (rule.use_out_of_fold) {
    if (stage.fold_blips.empty() || stage.fold_of.size() != data.n_units())
      throw Error("learned rule: out-of-fold assignment requested but the fold map does not "
                  "match this dataset");
    const CrossFitPlan plan = CrossFitPlan::from_assignment(stage.fold_of);
    CrossFitModel cf{plan, stage.fold_blips};
    return cf.predict_oof(V);
  }
  return stage.blip.predict(V);
}

}  // namespace detail

// Evaluates a rule at time t; output entries are exactly 0 or 1, computed
// purely from the rule and the dataset.
inline Vector apply_rule(const TreatmentRule& rule, const LongitudinalDataset& data, int t) {
  const Eigen::Index n = static_cast<Eigen::Index>(data.n_units());
  if (t < 1 || t > data.tau())
    throw Error("apply_rule: time index " + std::to_string(t) + " out of range");
  if (const auto* s = std::get_if<StaticAllRule>(&rule)) {
    if (s->value != 0 && s->value != 1) throw Error("static rule value must be 0 or 1");
    return Vector::Constant(n, static_cast<double>(s->value));
  }
  if (const auto* thr = std::get_if<ThresholdRule>(&rule)) {
    if (thr->if_true != 0 && thr->if_true != 1) throw Error("threshold rule branch must be 0 or 1");
    if (thr->if_false != 0 && thr->if_false != 1)
      throw Error("threshold rule branch must be 0 or 1");
    detail::require_in_history(data, t, thr->column, "threshold rule");
    const Vector& x = data.column(thr->column);
    Vector out(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      bool hit = false;
      switch (thr->op) {
        case ThresholdRule::Op::gt: hit = x[i] > thr->cutoff; break;
        case ThresholdRule::Op::ge: hit = x[i] >= thr->cutoff; break;
        case ThresholdRule::Op::lt: hit = x[i] < thr->cutoff; break;
        case ThresholdRule::Op::le: hit = x[i] <= thr->cutoff; break;
      }
      out[i] = static_cast<double>(hit ? thr->if_true : thr->if_false);
    }
    return out;
  }
  if (const auto* lb = std::get_if<LearnedBlipRule>(&rule)) {
    const Vector blips = detail::blip_values_at(*lb, data, t);
    Vector out(n);
    for (Eigen::Index i = 0; i < n; ++i) out[i] = assign_from_blip(blips[i], lb->direction);
    return out;
  }
  return data.treatment(t);  // observed treatment
}

// Per-stage rule list for a full trajectory; a single rule may be broadcast
// across all decision points.
inline std::vector<TreatmentRule> uniform_rule(const TreatmentRule& rule, int tau) {
  return std::vector<TreatmentRule>(static_cast<std::size_t>(tau), rule);
}

}  // namespace odtr
