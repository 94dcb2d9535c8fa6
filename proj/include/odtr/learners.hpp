#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "odtr/common.hpp"

namespace odtr {

using json = nlohmann::json;

enum class Family { squared, binomial };

inline std::string family_name(Family f) {
  return f == Family::squared ? "squared" : "binomial";
}

// ── learner specifications ───────────────────────────────────────────────────

struct PenalizedLinearSpec {
  enum class Penalty { ridge, lasso };
  double lambda = 0.0;
  Penalty penalty = Penalty::lasso;
};

struct LogisticSpec {
  double lambda = 0.0;  // ridge stabilizer
};

struct GradientBoostedTreesSpec {
  int num_trees = 100;
  int max_depth = 2;
  double learning_rate = 0.1;
  int min_leaf_size = 10;
};

struct InterceptSpec {};

using LearnerSpec = std::variant<PenalizedLinearSpec, LogisticSpec,
                                 GradientBoostedTreesSpec, InterceptSpec>;

inline void validate_spec(const LearnerSpec& spec) {
  if (const auto* pl = std::get_if<PenalizedLinearSpec>(&spec)) {
    if (!std::isfinite(pl->lambda) || pl->lambda < 0)
      throw Error("PenalizedLinear: lambda must be finite and >= 0");
  } else if (const auto* lo = std::get_if<LogisticSpec>(&spec)) {
    if (!std::isfinite(lo->lambda) || lo->lambda < 0)
      throw Error("Logistic: lambda must be finite and >= 0");
  } else if (const auto* gb = std::get_if<GradientBoostedTreesSpec>(&spec)) {
    if (gb->num_trees < 0) throw Error("GradientBoostedTrees: num_trees must be >= 0");
    if (gb->max_depth < 0) throw Error("GradientBoostedTrees: max_depth must be >= 0");
    if (!(gb->learning_rate > 0.0) || gb->learning_rate > 1.0 ||
        !std::isfinite(gb->learning_rate))
      throw Error("GradientBoostedTrees: learning_rate must be in (0,1]");
    if (gb->min_leaf_size < 1) throw Error("GradientBoostedTrees: min_leaf_size must be >= 1");
  }
}

inline std::string spec_name(const LearnerSpec& spec) {
  if (const auto* pl = std::get_if<PenalizedLinearSpec>(&spec))
    return pl->penalty == PenalizedLinearSpec::Penalty::lasso ? "lasso" : "ridge";
  if (std::holds_alternative<LogisticSpec>(spec)) return "logistic";
  if (std::holds_alternative<GradientBoostedTreesSpec>(spec)) return "gbt";
  return "intercept";
}

inline json spec_to_json(const LearnerSpec& spec) {
  json j;
  j["type"] = spec_name(spec);
  if (const auto* pl = std::get_if<PenalizedLinearSpec>(&spec)) {
    j["lambda"] = pl->lambda;
  } else if (const auto* lo = std::get_if<LogisticSpec>(&spec)) {
    j["lambda"] = lo->lambda;
  } else if (const auto* gb = std::get_if<GradientBoostedTreesSpec>(&spec)) {
    j["num_trees"] = gb->num_trees;
    j["max_depth"] = gb->max_depth;
    j["learning_rate"] = gb->learning_rate;
    j["min_leaf_size"] = gb->min_leaf_size;
  }
  return j;
}

inline LearnerSpec spec_from_json(const json& j) {
  const std::string type = j.at("type").get<std::string>();
  LearnerSpec spec;
  if (type == "lasso" || type == "ridge") {
    PenalizedLinearSpec pl;
    pl.penalty = type == "lasso" ? PenalizedLinearSpec::Penalty::lasso
                                 : PenalizedLinearSpec::Penalty::ridge;
    pl.lambda = j.value("lambda", 0.0);
    spec = pl;
  } else if (type == "logistic") {
    LogisticSpec lo;
    lo.lambda = j.value("lambda", 0.0);
    spec = lo;
  } else if (type == "gbt") {
    GradientBoostedTreesSpec gb;
    gb.num_trees = j.value("num_trees", 100);
    gb.max_depth = j.value("max_depth", 2);
    gb.learning_rate = j.value("learning_rate", 0.1);
    gb.min_leaf_size = j.value("min_leaf_size", 10);
    spec = gb;
  } else if (type == "intercept") {
    spec = InterceptSpec{};
  } else {
    throw Error("unknown learner type '" + type + "'");
  }
  validate_spec(spec);
  return spec;
}

// ── fitted model ─────────────────────────────────────────────────────────────

struct LinearState {
  double intercept = 0.0;
  Vector coef;  // original feature scale
};

struct LogisticState {
  double intercept = 0.0;
  Vector coef;
};

struct GbtNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf value, learning rate already applied
};

struct GbtState {
  double base = 0.0;  // raw score (log-odds for binomial)
  std::vector<std::vector<GbtNode>> trees;
};

struct InterceptState {
  double value = 0.0;  // mean for squared, mean probability for binomial
};

namespace detail {
constexpr double kProbEps = 1e-9;

inline double clamp_prob(double p, double eps = kProbEps) {
  return std::min(1.0 - eps, std::max(eps, p));
}

inline double tree_predict(const std::vector<GbtNode>& nodes, const double* row) {
  int k = 0;
  while (nodes[static_cast<std::size_t>(k)].feature >= 0) {
    const GbtNode& nd = nodes[static_cast<std::size_t>(k)];
    k = row[nd.feature] <= nd.threshold ? nd.left : nd.right;
  }
  return nodes[static_cast<std::size_t>(k)].value;
}
}  // namespace detail

class FittedModel {
 public:
  FittedModel() = default;
  FittedModel(Family family, std::vector<std::string> features,
              std::variant<LinearState, LogisticState, GbtState, InterceptState> state)
      : family_(family), features_(std::move(features)), state_(std::move(state)) {}

  Family family() const { return family_; }
  const std::vector<std::string>& features() const { return features_; }

  // X must present the fit-time columns, by name and order.
  Vector predict(const DesignMatrix& X) const {
    if (X.names != features_) {
      std::string got;
      for (const auto& n : X.names) got += n + ",";
      std::string want;
      for (const auto& n : features_) want += n + ",";
      throw Error("predict: feature mismatch (model fit on [" + want + "], given [" + got + "])");
    }
    const Eigen::Index n = X.rows();
    Vector out(n);
    if (const auto* lin = std::get_if<LinearState>(&state_)) {
      out = (X.values * lin->coef).array() + lin->intercept;
    } else if (const auto* lo = std::get_if<LogisticState>(&state_)) {
      Vector eta = (X.values * lo->coef).array() + lo->intercept;
      for (Eigen::Index i = 0; i < n; ++i) out[i] = detail::clamp_prob(expit(eta[i]));
    } else if (const auto* gbt = std::get_if<GbtState>(&state_)) {
      out.setConstant(gbt->base);
      if (!gbt->trees.empty()) {
        // row-major copy so each sample's features are contiguous
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows = X.values;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double* r = rows.row(i).data();
          double f = gbt->base;
          for (const auto& tree : gbt->trees) f += detail::tree_predict(tree, r);
          out[i] = f;
        }
      }
      if (family_ == Family::binomial)
        for (Eigen::Index i = 0; i < n; ++i) out[i] = detail::clamp_prob(expit(out[i]));
    } else {
      const auto& ic = std::get<InterceptState>(state_);
      out.setConstant(ic.value);
    }
    return out;
  }

  const std::variant<LinearState, LogisticState, GbtState, InterceptState>& state() const {
    return state_;
  }

  json to_json() const {
    json j;
    j["family"] = family_name(family_);
    j["features"] = features_;
    if (const auto* lin = std::get_if<LinearState>(&state_)) {
      j["kind"] = "linear";
      j["intercept"] = lin->intercept;
      j["coef"] = std::vector<double>(lin->coef.data(), lin->coef.data() + lin->coef.size());
    } else if (const auto* lo = std::get_if<LogisticState>(&state_)) {
      j["kind"] = "logistic";
      j["intercept"] = lo->intercept;
      j["coef"] = std::vector<double>(lo->coef.data(), lo->coef.data() + lo->coef.size());
    } else if (const auto* gbt = std::get_if<GbtState>(&state_)) {
      j["kind"] = "gbt";
      j["base"] = gbt->base;
      json trees = json::array();
      for (const auto& tree : gbt->trees) {
        json tn = json::array();
        for (const auto& nd : tree)
          tn.push_back({{"f", nd.feature},
                        {"t", nd.threshold},
                        {"l", nd.left},
                        {"r", nd.right},
                        {"v", nd.value}});
        trees.push_back(std::move(tn));
      }
      j["trees"] = std::move(trees);
    } else {
      j["kind"] = "intercept";
      j["value"] = std::get<InterceptState>(state_).value;
    }
    return j;
  }

  static FittedModel from_json(const json& j) {
    const std::string fam = j.at("family").get<std::string>();
    const Family family = fam == "squared" ? Family::squared : Family::binomial;
    auto features = j.at("features").get<std::vector<std::string>>();
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "linear" || kind == "logistic") {
      const auto coefs = j.at("coef").get<std::vector<double>>();
      Vector coef = Eigen::Map<const Vector>(coefs.data(), static_cast<Eigen::Index>(coefs.size()));
      if (kind == "linear")
        return FittedModel(family, std::move(features),
                           LinearState{j.at("intercept").get<double>(), std::move(coef)});
      return FittedModel(family, std::move(features),
                         LogisticState{j.at("intercept").get<double>(), std::move(coef)});
    }
    if (kind == "gbt") {
      GbtState st;
      st.base = j.at("base").get<double>();
      for (const auto& tj : j.at("trees")) {
        std::vector<GbtNode> tree;
        for (const auto& nj : tj)
          tree.push_back({nj.at("f").get<int>(), nj.at("t").get<double>(), nj.at("l").get<int>(),
                          nj.at("r").get<int>(), nj.at("v").get<double>()});
        st.trees.push_back(std::move(tree));
      }
      return FittedModel(family, std::move(features), std::move(st));
    }
    if (kind == "intercept")
      return FittedModel(family, std::move(features), InterceptState{j.at("value").get<double>()});
    throw Error("unknown fitted model kind '" + kind + "'");
  }

 private:
  Family family_ = Family::squared;
  std::vector<std::string> features_;
  std::variant<LinearState, LogisticState, GbtState, InterceptState> state_;
};

// ── solvers ──────────────────────────────────────────────────────────────────

namespace detail {

struct Standardized {
  Matrix X;            // centered/scaled copy
  Vector means, sds;   // population sd (1/n)
  std::vector<bool> active;  // false for zero-variance columns
};

inline Standardized standardize(const Matrix& X) {
  Standardized s;
  const Eigen::Index n = X.rows(), p = X.cols();
  s.X = X;
  s.means.resize(p);
  s.sds.resize(p);
  s.active.assign(static_cast<std::size_t>(p), true);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double m = X.col(j).mean();
    const double v = (X.col(j).array() - m).square().sum() / static_cast<double>(n);
    const double sd = std::sqrt(v);
    s.means[j] = m;
    s.sds[j] = sd;
    if (sd < 1e-12) {
      s.active[static_cast<std::size_t>(j)] = false;
      s.X.col(j).setZero();
      s.sds[j] = 1.0;  // avoid dividing by 0 when unscaling
    } else {
      s.X.col(j) = (X.col(j).array() - m) / sd;
    }
  }
  return s;
}

inline double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

// Penalized least squares on standardized features, intercept unpenalized.
// lasso: cyclic coordinate descent, stops when the largest coefficient change
// in a sweep falls below 1e-7 or after 10000 sweeps.
// ridge: normal equations (X'X/n + lambda I) b = X'y/n.
inline FittedModel fit_penalized_linear(const PenalizedLinearSpec& spec, const DesignMatrix& X,
                                        const Vector& y) {
  const Eigen::Index n = X.rows(), p = X.cols();
  Standardized s = standardize(X.values);
  const double ybar = y.mean();
  Vector yc = y.array() - ybar;
  Vector beta = Vector::Zero(p);

  if (p > 0 && spec.penalty == PenalizedLinearSpec::Penalty::lasso) {
    Vector resid = yc;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int sweep = 0; sweep < 10000; ++sweep) {
      double max_change = 0.0;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (!s.active[static_cast<std::size_t>(j)]) continue;
        const double old = beta[j];
        // columns have unit variance, so the coordinate update is a plain
        // soft threshold of the partial correlation
        const double rho = inv_n * s.X.col(j).dot(resid) + old;
        const double next = soft_threshold(rho, spec.lambda);
        if (next != old) {
          resid -= (next - old) * s.X.col(j);
          max_change = std::max(max_change, std::abs(next - old));
          beta[j] = next;
        }
      }
      if (max_change < 1e-7) break;
    }
  } else if (p > 0) {
    Matrix gram = (s.X.transpose() * s.X) / static_cast<double>(n);
    gram.diagonal().array() += spec.lambda;
    for (Eigen::Index j = 0; j < p; ++j)
      if (!s.active[static_cast<std::size_t>(j)]) gram(j, j) = 1.0;
    const Vector xty = (s.X.transpose() * yc) / static_cast<double>(n);
    beta = gram.ldlt().solve(xty);
    for (Eigen::Index j = 0; j < p; ++j)
      if (!s.active[static_cast<std::size_t>(j)]) beta[j] = 0.0;
  }

  LinearState st;
  st.coef.resize(p);
  double intercept = ybar;
  for (Eigen::Index j = 0; j < p; ++j) {
    st.coef[j] = beta[j] / s.sds[j];
    intercept -= st.coef[j] * s.means[j];
  }
  st.intercept = intercept;
  return FittedModel(Family::squared, X.names, std::move(st));
}

// Damped IRLS with an optional ridge stabilizer on the standardized slopes;
// probabilities are clipped inside the solver so separated data cannot blow
// up the weights.
inline FittedModel fit_logistic(const LogisticSpec& spec, const DesignMatrix& X, const Vector& y) {
  const Eigen::Index n = X.rows(), p = X.cols();
  Standardized s = standardize(X.values);
  std::vector<Eigen::Index> act;
  for (Eigen::Index j = 0; j < p; ++j)
    if (s.active[static_cast<std::size_t>(j)]) act.push_back(j);
  const Eigen::Index pa = static_cast<Eigen::Index>(act.size());
  Matrix Xa(n, pa);
  for (Eigen::Index j = 0; j < pa; ++j) Xa.col(j) = s.X.col(act[static_cast<std::size_t>(j)]);

  const double solver_eps = 1e-6;
  auto objective = [&](double b0, const Vector& b) {
    Vector eta = (Xa * b).array() + b0;
    double nll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double pi = clamp_prob(expit(eta[i]), solver_eps);
      nll -= y[i] * std::log(pi) + (1.0 - y[i]) * std::log(1.0 - pi);
    }
    return nll / static_cast<double>(n) + 0.5 * spec.lambda * b.squaredNorm();
  };

  double b0 = std::log(clamp_prob(y.mean(), solver_eps) / (1.0 - clamp_prob(y.mean(), solver_eps)));
  Vector b = Vector::Zero(pa);
  double obj = objective(b0, b);
  for (int iter = 0; iter < 100; ++iter) {
    Vector eta = (Xa * b).array() + b0;
    Vector prob(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      prob[i] = clamp_prob(expit(eta[i]), solver_eps);
      w[i] = prob[i] * (1.0 - prob[i]);
    }
    // score and Hessian of the penalized mean log-likelihood
    Vector resid = y - prob;
    const double inv_n = 1.0 / static_cast<double>(n);
    Vector grad(pa + 1);
    grad[0] = resid.sum() * inv_n;
    grad.tail(pa) = (Xa.transpose() * resid) * inv_n - spec.lambda * b;
    Matrix H(pa + 1, pa + 1);
    H(0, 0) = w.sum() * inv_n;
    if (pa > 0) {
      const Vector xw = (Xa.transpose() * w) * inv_n;
      H.block(1, 0, pa, 1) = xw;
      H.block(0, 1, 1, pa) = xw.transpose();
      H.block(1, 1, pa, pa) = (Xa.transpose() * w.asDiagonal() * Xa) * inv_n;
      H.block(1, 1, pa, pa).diagonal().array() += spec.lambda + 1e-10;
    }
    H(0, 0) += 1e-10;
    const Vector step = H.ldlt().solve(grad);
    double scale = 1.0;
    double nb0 = b0;
    Vector nb = b;
    for (int halving = 0; halving < 30; ++halving) {
      nb0 = b0 + scale * step[0];
      nb = b + scale * step.tail(pa);
      const double nobj = objective(nb0, nb);
      if (nobj <= obj + 1e-14) {
        obj = nobj;
        break;
      }
      scale *= 0.5;
    }
    const double max_step = std::max(std::abs(nb0 - b0),
                                     pa > 0 ? (nb - b).cwiseAbs().maxCoeff() : 0.0);
    b0 = nb0;
    b = nb;
    if (max_step < 1e-8) break;
  }

  LogisticState st;
  st.coef = Vector::Zero(p);
  double intercept = b0;
  for (Eigen::Index j = 0; j < pa; ++j) {
    const Eigen::Index col = act[static_cast<std::size_t>(j)];
    st.coef[col] = b[j] / s.sds[col];
    intercept -= st.coef[col] * s.means[col];
  }
  st.intercept = intercept;
  return FittedModel(Family::binomial, X.names, std::move(st));
}

// Histogram-based gradient boosting. Split search is exact over quantile
// bins; no row or feature subsampling, so fits are deterministic.
class GbtBuilder {
 public:
  GbtBuilder(const GradientBoostedTreesSpec& spec, const Matrix& X) : spec_(spec) {
    const Eigen::Index n = X.rows(), p = X.cols();
    thresholds_.resize(static_cast<std::size_t>(p));
    bins_.resize(static_cast<std::size_t>(p));
    std::vector<double> sorted;
    for (Eigen::Index j = 0; j < p; ++j) {
      sorted.assign(X.col(j).data(), X.col(j).data() + n);
      std::sort(sorted.begin(), sorted.end());
      sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
      auto& thr = thresholds_[static_cast<std::size_t>(j)];
      const std::size_t distinct = sorted.size();
      if (distinct <= 1) {
        // constant column, nothing to split on
      } else if (distinct <= kMaxBins) {
        thr.assign(sorted.begin(), sorted.end() - 1);
      } else {
        for (std::size_t b = 1; b < kMaxBins; ++b) {
          const std::size_t q = b * distinct / kMaxBins;
          thr.push_back(sorted[q]);
        }
        thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
      }
      auto& bj = bins_[static_cast<std::size_t>(j)];
      bj.resize(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto it = std::lower_bound(thr.begin(), thr.end(), X(i, j));
        bj[static_cast<std::size_t>(i)] =
            static_cast<std::uint16_t>(std::distance(thr.begin(), it));
      }
    }
  }

  // one boosted tree on gradients g and hessians h; updates raw scores F
  std::vector<GbtNode> build_tree(const Vector& g, const Vector& h, Vector& F) {
    const Eigen::Index n = g.size();
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<GbtNode> nodes;
    struct Item {
      int node;
      int begin, end;
      int depth;
    };
    std::vector<Item> stack;
    nodes.push_back(GbtNode{});
    stack.push_back({0, 0, static_cast<int>(n), 0});
    while (!stack.empty()) {
      const Item it = stack.back();
      stack.pop_back();
      double sum_g = 0.0, sum_h = 0.0;
      for (int k = it.begin; k < it.end; ++k) {
        sum_g += g[idx[static_cast<std::size_t>(k)]];
        sum_h += h[idx[static_cast<std::size_t>(k)]];
      }
      int best_feature = -1, best_bin = -1;
      double best_gain = 1e-12;
      const int count = it.end - it.begin;
      if (it.depth < spec_.max_depth && count >= 2 * spec_.min_leaf_size) {
        const double parent_score = sum_g * sum_g / (sum_h + kHessEps);
        for (std::size_t j = 0; j < bins_.size(); ++j) {
          const auto& thr = thresholds_[j];
          if (thr.empty()) continue;
          const std::size_t nb = thr.size() + 1;
          hist_g_.assign(nb, 0.0);
          hist_h_.assign(nb, 0.0);
          hist_c_.assign(nb, 0);
          const auto& bj = bins_[j];
          for (int k = it.begin; k < it.end; ++k) {
            const int i = idx[static_cast<std::size_t>(k)];
            const std::uint16_t b = bj[static_cast<std::size_t>(i)];
            hist_g_[b] += g[i];
            hist_h_[b] += h[i];
            hist_c_[b] += 1;
          }
          double gl = 0.0, hl = 0.0;
          int cl = 0;
          for (std::size_t b = 0; b + 1 < nb; ++b) {
            gl += hist_g_[b];
            hl += hist_h_[b];
            cl += hist_c_[b];
            const int cr = count - cl;
            if (cl < spec_.min_leaf_size || cr < spec_.min_leaf_size) continue;
            const double gr = sum_g - gl, hr = sum_h - hl;
            const double gain = gl * gl / (hl + kHessEps) + gr * gr / (hr + kHessEps) -
                                parent_score;
            if (gain > best_gain) {
              best_gain = gain;
              best_feature = static_cast<int>(j);
              best_bin = static_cast<int>(b);
            }
          }
        }
      }
      if (best_feature < 0) {
        const double value = -sum_g / (sum_h + kHessEps) * spec_.learning_rate;
        nodes[static_cast<std::size_t>(it.node)].feature = -1;
        nodes[static_cast<std::size_t>(it.node)].value = value;
        for (int k = it.begin; k < it.end; ++k) F[idx[static_cast<std::size_t>(k)]] += value;
        continue;
      }
      const auto& bj = bins_[static_cast<std::size_t>(best_feature)];
      auto mid_it = std::stable_partition(
          idx.begin() + it.begin, idx.begin() + it.end,
          [&](int i) { return bj[static_cast<std::size_t>(i)] <= best_bin; });
      const int mid = static_cast<int>(std::distance(idx.begin(), mid_it));
      const int left = static_cast<int>(nodes.size());
      nodes.push_back(GbtNode{});
      const int right = static_cast<int>(nodes.size());
      nodes.push_back(GbtNode{});
      auto& nd = nodes[static_cast<std::size_t>(it.node)];
      nd.feature = best_feature;
      nd.threshold =
          thresholds_[static_cast<std::size_t>(best_feature)][static_cast<std::size_t>(best_bin)];
      nd.left = left;
      nd.right = right;
      stack.push_back({right, mid, it.end, it.depth + 1});
      stack.push_back({left, it.begin, mid, it.depth + 1});
    }
    return nodes;
  }

 private:
  static constexpr std::size_t kMaxBins = 64;
  static constexpr double kHessEps = 1e-12;
  GradientBoostedTreesSpec spec_;
  std::vector<std::vector<double>> thresholds_;
  std::vector<std::vector<std::uint16_t>> bins_;
  std::vector<double> hist_g_, hist_h_;
  std::vector<int> hist_c_;
};

inline FittedModel fit_gbt(const GradientBoostedTreesSpec& spec, const DesignMatrix& X,
                           const Vector& y, Family family) {
  const Eigen::Index n = X.rows();
  GbtState st;
  if (family == Family::squared) {
    st.base = y.mean();
  } else {
    const double pbar = clamp_prob(y.mean(), 1e-6);
    st.base = std::log(pbar / (1.0 - pbar));
  }
  Vector F = Vector::Constant(n, st.base);
  if (spec.num_trees > 0 && X.cols() > 0) {
    GbtBuilder builder(spec, X.values);
    Vector g(n), h(n);
    for (int m = 0; m < spec.num_trees; ++m) {
      if (family == Family::squared) {
        g = F - y;
        h.setOnes();
      } else {
        for (Eigen::Index i = 0; i < n; ++i) {
          const double p = clamp_prob(expit(F[i]), 1e-6);
          g[i] = p - y[i];
          h[i] = p * (1.0 - p);
        }
      }
      st.trees.push_back(builder.build_tree(g, h, F));
    }
  } else if (spec.num_trees > 0) {
    // no usable features: boosted constants
    Vector g(n), h(n);
    for (int m = 0; m < spec.num_trees; ++m) {
      double sum_g = 0.0, sum_h = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (family == Family::squared) {
          sum_g += F[i] - y[i];
          sum_h += 1.0;
        } else {
          const double p = clamp_prob(expit(F[i]), 1e-6);
          sum_g += p - y[i];
          sum_h += p * (1.0 - p);
        }
      }
      const double value = -sum_g / (sum_h + 1e-12) * spec.learning_rate;
      st.trees.push_back({GbtNode{-1, 0.0, -1, -1, value}});
      F.array() += value;
    }
  }
  return FittedModel(family, X.names, std::move(st));
}

inline FittedModel fit_intercept(const DesignMatrix& X, const Vector& y, Family family) {
  InterceptState st;
  st.value = family == Family::binomial ? clamp_prob(y.mean(), 1e-6) : y.mean();
  return FittedModel(family, X.names, st);
}

}  // namespace detail

// ── fit / predict ────────────────────────────────────────────────────────────

inline bool family_compatible(const LearnerSpec& spec, Family family) {
  if (std::holds_alternative<PenalizedLinearSpec>(spec)) return family == Family::squared;
  if (std::holds_alternative<LogisticSpec>(spec)) return family == Family::binomial;
  return true;
}

inline FittedModel fit(const LearnerSpec& spec, const DesignMatrix& X, const Vector& y,
                       Family family) {
  validate_spec(spec);
  if (X.rows() != y.size()) throw Error("fit: rows(X) != length(y)");
  if (y.size() < 1) throw Error("fit: empty training data");
  if (static_cast<std::size_t>(X.cols()) != X.names.size())
    throw Error("fit: design matrix names out of sync");
  if (!X.values.allFinite() || !y.allFinite()) throw Error("fit: non-finite values in inputs");
  if (!family_compatible(spec, family))
    throw Error("fit: learner '" + spec_name(spec) + "' incompatible with " +
                family_name(family) + " family");
  if (family == Family::binomial)
    for (Eigen::Index i = 0; i < y.size(); ++i)
      if (y[i] != 0.0 && y[i] != 1.0) throw Error("fit: binomial target must be 0/1");

  if (const auto* pl = std::get_if<PenalizedLinearSpec>(&spec))
    return detail::fit_penalized_linear(*pl, X, y);
  if (const auto* lo = std::get_if<LogisticSpec>(&spec)) return detail::fit_logistic(*lo, X, y);
  if (const auto* gb = std::get_if<GradientBoostedTreesSpec>(&spec))
    return detail::fit_gbt(*gb, X, y, family);
  return detail::fit_intercept(X, y, family);
}

// ── cross-validation plumbing ────────────────────────────────────────────────

struct CrossFitPlan {
  int k = 0;
  std::vector<int> fold_of;  // unit -> fold id in [0, k)
  std::uint64_t seed = 0;

  static CrossFitPlan make(std::size_t n, int k, std::uint64_t seed) {
    if (k < 2) throw Error("CrossFitPlan: need at least 2 folds");
    if (static_cast<std::size_t>(k) > n) throw Error("CrossFitPlan: more folds than units");
    CrossFitPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.fold_of.resize(n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0x666f6c64));  // "fold"
    rng.shuffle(order);
    for (std::size_t pos = 0; pos < n; ++pos)
      plan.fold_of[order[pos]] = static_cast<int>(pos % static_cast<std::size_t>(k));
    return plan;
  }

  static CrossFitPlan from_assignment(std::vector<int> fold_of, std::uint64_t seed = 0) {
    CrossFitPlan plan;
    plan.fold_of = std::move(fold_of);
    plan.seed = seed;
    int kmax = -1;
    for (int f : plan.fold_of) {
      if (f < 0) throw Error("CrossFitPlan: negative fold id");
      kmax = std::max(kmax, f);
    }
    plan.k = kmax + 1;
    std::vector<int> sizes(static_cast<std::size_t>(plan.k), 0);
    for (int f : plan.fold_of) sizes[static_cast<std::size_t>(f)]++;
    const auto [mn, mx] = std::minmax_element(sizes.begin(), sizes.end());
    if (*mn == 0) throw Error("CrossFitPlan: empty fold");
    if (*mx - *mn > 1) throw Error("CrossFitPlan: fold sizes differ by more than 1");
    return plan;
  }

  std::size_t n() const { return fold_of.size(); }

  std::vector<int> fold_rows(int fold) const {
    std::vector<int> rows;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
      if (fold_of[i] == fold) rows.push_back(static_cast<int>(i));
    return rows;
  }

  std::vector<int> train_rows(int fold) const {
    std::vector<int> rows;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
      if (fold_of[i] != fold) rows.push_back(static_cast<int>(i));
    return rows;
  }
};

// default fold count: 10, shrunk to n/20 (but never below 2) for small n
inline int auto_fold_count(std::size_t n) {
  const long by_size = static_cast<long>(n) / 20;
  return static_cast<int>(std::clamp(by_size, 2L, 10L));
}

inline DesignMatrix subset_rows(const DesignMatrix& X, const std::vector<int>& rows) {
  DesignMatrix out;
  out.names = X.names;
  out.values.resize(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.values.row(static_cast<Eigen::Index>(r)) = X.values.row(rows[r]);
  return out;
}

inline Vector subset(const Vector& v, const std::vector<int>& rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) out[static_cast<Eigen::Index>(r)] = v[rows[r]];
  return out;
}

inline double holdout_loss(const Vector& y, const Vector& pred, Family family) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (family == Family::squared) {
      const double e = y[i] - pred[i];
      total += e * e;
    } else {
      const double p = detail::clamp_prob(pred[i], 1e-12);
      total -= y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
    }
  }
  return total;
}

// Mean held-out loss over all units (squared error, or negative log-likelihood
// for the binomial family), deterministic given the plan.
inline double cv_risk(const LearnerSpec& spec, const DesignMatrix& X, const Vector& y,
                      Family family, const CrossFitPlan& plan) {
  if (plan.n() != static_cast<std::size_t>(y.size()))
    throw Error("cv_risk: plan does not cover all rows");
  double total = 0.0;
  for (int fold = 0; fold < plan.k; ++fold) {
    const auto train = plan.train_rows(fold);
    const auto held = plan.fold_rows(fold);
    if (train.empty() || held.empty())
      throw Error("cv_risk: fold " + std::to_string(fold) + " leaves an empty split");
    const FittedModel model = fit(spec, subset_rows(X, train), subset(y, train), family);
    total += holdout_loss(subset(y, held), model.predict(subset_rows(X, held)), family);
  }
  return total / static_cast<double>(y.size());
}

// ── discrete super learner ───────────────────────────────────────────────────

struct SuperLearnerSpec {
  std::vector<LearnerSpec> library;
  int folds = 10;
  Family loss = Family::squared;
};

struct SuperLearnerFit {
  FittedModel model;
  int selected = 0;
  std::vector<double> cv_risks;
};

// Winner-take-all: the library member with the smallest cross-validated risk
// is refit on the full data. Ties go to the earliest library entry.
inline SuperLearnerFit discrete_super_learner(const SuperLearnerSpec& sl, const DesignMatrix& X,
                                              const Vector& y, Family family,
                                              const CrossFitPlan& plan) {
  if (sl.library.empty()) throw Error("super learner: empty library");
  if (sl.loss != family) throw Error("super learner: loss family mismatch");
  SuperLearnerFit out;
  out.cv_risks.reserve(sl.library.size());
  int best = 0;
  double best_risk = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < sl.library.size(); ++m) {
    const double risk = cv_risk(sl.library[m], X, y, family, plan);
    out.cv_risks.push_back(risk);
    if (risk < best_risk) {
      best_risk = risk;
      best = static_cast<int>(m);
    }
  }
  out.selected = best;
  out.model = fit(sl.library[static_cast<std::size_t>(best)], X, y, family);
  return out;
}

// ── model search: a library fit either directly or through the super learner ─

struct ModelSearch {
  std::vector<LearnerSpec> library;
  int sl_folds = 5;
};

inline FittedModel fit_search(const ModelSearch& search, const DesignMatrix& X, const Vector& y,
                              Family family, std::uint64_t seed) {
  if (search.library.empty()) throw Error("fit_search: empty learner library");
  if (search.library.size() == 1) return fit(search.library[0], X, y, family);
  SuperLearnerSpec sl;
  sl.library = search.library;
  sl.loss = family;
  const std::size_t n = static_cast<std::size_t>(y.size());
  sl.folds = static_cast<int>(std::clamp<std::size_t>(static_cast<std::size_t>(search.sl_folds),
                                                      2, n));
  const CrossFitPlan plan = CrossFitPlan::make(n, sl.folds, mix_seed(seed, 0x736c));  // "sl"
  return discrete_super_learner(sl, X, y, family, plan).model;
}

// K models, each trained with one fold held out. Out-of-fold predictions for
// unit i always come from the model that never saw i, including predictions
// at counterfactual feature values.
struct CrossFitModel {
  CrossFitPlan plan;
  std::vector<FittedModel> fold_models;

  Vector predict_oof(const DesignMatrix& X) const {
    if (static_cast<std::size_t>(X.rows()) != plan.n())
      throw Error("predict_oof: row count does not match the fold plan");
    Vector out(X.rows());
    for (int fold = 0; fold < plan.k; ++fold) {
      const auto rows = plan.fold_rows(fold);
      const Vector pred = fold_models[static_cast<std::size_t>(fold)].predict(subset_rows(X, rows));
      for (std::size_t r = 0; r < rows.size(); ++r) out[rows[r]] = pred[static_cast<Eigen::Index>(r)];
    }
    return out;
  }
};

inline CrossFitModel cross_fit(const ModelSearch& search, const DesignMatrix& X, const Vector& y,
                               Family family, const CrossFitPlan& plan) {
  if (plan.n() != static_cast<std::size_t>(y.size()))
    throw Error("cross_fit: plan does not cover all rows");
  CrossFitModel out;
  out.plan = plan;
  out.fold_models.reserve(static_cast<std::size_t>(plan.k));
  for (int fold = 0; fold < plan.k; ++fold) {
    const auto train = plan.train_rows(fold);
    if (train.empty()) throw Error("cross_fit: fold " + std::to_string(fold) + " has no training rows");
    out.fold_models.push_back(fit_search(search, subset_rows(X, train), subset(y, train), family,
                                         mix_seed(plan.seed, 7000 + static_cast<std::uint64_t>(fold))));
  }
  return out;
}

inline Vector cross_fit_predict(const ModelSearch& search, const DesignMatrix& X, const Vector& y,
                                Family family, const CrossFitPlan& plan) {
  return cross_fit(search, X, y, family, plan).predict_oof(X);
}

}  // namespace odtr
