#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "odtr/common.hpp"

namespace odtr {

// Ordered column set (L_1..L_t, A_1..A_{t-1}) backing the regressions at
// decision point t. H_1 never contains treatment columns.
struct HistoryView {
  int t = 0;
  std::vector<std::string> columns;
};

// Per-time-point rule covariates V_t; each must live inside H_t. An empty
// list at some t means an intercept-only rule is allowed there.
struct RuleCovariateSpec {
  std::vector<std::vector<std::string>> per_time;
};

// Maps CSV columns to roles. Covariate/treatment time indices are 1-based.
struct DataSchema {
  std::string outcome;
  std::vector<std::string> treatments;                // index t-1 -> A_t column
  std::vector<std::vector<std::string>> covariates;   // index t-1 -> L_t columns
  RuleCovariateSpec rule_covariates;

  int tau() const { return static_cast<int>(treatments.size()); }

  // Layout: every key except "rule_covariates" maps a column to its role,
  // e.g. {"Y":"outcome","A1":{"treatment":1},"W1":{"covariate":1},
  //       "rule_covariates":[["W1"],["W1","A1"]]}
  static DataSchema from_json(const nlohmann::json& j) {
    DataSchema schema;
    int max_t = 0;
    std::vector<std::pair<std::string, int>> cov_cols, trt_cols;
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() == "rule_covariates") continue;
      const auto& v = it.value();
      if (v.is_string() && v.get<std::string>() == "outcome") {
        if (!schema.outcome.empty())
          throw Error("schema: multiple outcome columns ('" + schema.outcome + "' and '" +
                      it.key() + "')");
        schema.outcome = it.key();
      } else if (v.is_object() && v.contains("treatment")) {
        const int t = v.at("treatment").get<int>();
        if (t < 1) throw Error("schema: treatment time must be >= 1 for column '" + it.key() + "'");
        trt_cols.emplace_back(it.key(), t);
        max_t = std::max(max_t, t);
      } else if (v.is_object() && v.contains("covariate")) {
        const int t = v.at("covariate").get<int>();
        if (t < 1) throw Error("schema: covariate time must be >= 1 for column '" + it.key() + "'");
        cov_cols.emplace_back(it.key(), t);
        max_t = std::max(max_t, t);
      } else {
        throw Error("schema: unrecognized role for column '" + it.key() + "'");
      }
    }
    if (schema.outcome.empty()) throw Error("schema: no outcome column declared");
    if (trt_cols.empty()) throw Error("schema: no treatment columns declared");
    schema.treatments.assign(static_cast<std::size_t>(max_t), "");
    schema.covariates.assign(static_cast<std::size_t>(max_t), {});
    for (const auto& [name, t] : trt_cols) {
      auto& slot = schema.treatments[static_cast<std::size_t>(t - 1)];
      if (!slot.empty())
        throw Error("schema: two treatment columns at time " + std::to_string(t));
      slot = name;
    }
    for (int t = 1; t <= max_t; ++t)
      if (schema.treatments[static_cast<std::size_t>(t - 1)].empty())
        throw Error("schema: missing treatment column for time " + std::to_string(t));
    // covariates keep their declaration order within each time point
    for (const auto& [name, t] : cov_cols)
      schema.covariates[static_cast<std::size_t>(t - 1)].push_back(name);
    if (j.contains("rule_covariates"))
      schema.rule_covariates.per_time =
          j.at("rule_covariates").get<std::vector<std::vector<std::string>>>();
    return schema;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j[outcome] = "outcome";
    for (std::size_t t = 0; t < treatments.size(); ++t)
      j[treatments[t]] = {{"treatment", static_cast<int>(t + 1)}};
    for (std::size_t t = 0; t < covariates.size(); ++t)
      for (const auto& c : covariates[t]) j[c] = {{"covariate", static_cast<int>(t + 1)}};
    if (!rule_covariates.per_time.empty()) j["rule_covariates"] = rule_covariates.per_time;
    return j;
  }
};

// n units observed over tau decision points; covariate blocks L_t, binary
// treatments A_t, and one terminal real outcome Y. Immutable once built.
class LongitudinalDataset {
 public:
  LongitudinalDataset(DataSchema schema,
                      std::unordered_map<std::string, Vector> columns)
      : schema_(std::move(schema)), columns_(std::move(columns)) {
    tau_ = schema_.tau();
    if (tau_ < 1) throw Error("dataset: needs at least one decision point");
    std::unordered_set<std::string> seen;
    auto check = [&](const std::string& name) -> const Vector& {
      if (!seen.insert(name).second) throw Error("dataset: duplicate column '" + name + "'");
      auto it = columns_.find(name);
      if (it == columns_.end()) throw Error("dataset: schema names missing column '" + name + "'");
      return it->second;
    };
    n_ = static_cast<std::size_t>(check(schema_.outcome).size());
    if (n_ == 0) throw Error("dataset: no rows");
    for (int t = 1; t <= tau_; ++t) {
      const Vector& a = check(schema_.treatments[static_cast<std::size_t>(t - 1)]);
      if (static_cast<std::size_t>(a.size()) != n_)
        throw Error("dataset: column length mismatch for '" +
                    schema_.treatments[static_cast<std::size_t>(t - 1)] + "'");
      for (Eigen::Index i = 0; i < a.size(); ++i)
        if (a[i] != 0.0 && a[i] != 1.0)
          throw Error("non-binary treatment at row " + std::to_string(i + 1) + " in column '" +
                      schema_.treatments[static_cast<std::size_t>(t - 1)] + "'");
      for (const auto& name : schema_.covariates[static_cast<std::size_t>(t - 1)]) {
        const Vector& c = check(name);
        if (static_cast<std::size_t>(c.size()) != n_)
          throw Error("dataset: column length mismatch for '" + name + "'");
      }
    }
    for (const auto& [name, col] : columns_) {
      if (seen.count(name) == 0)
        throw Error("dataset: column '" + name + "' not covered by the schema");
      if (!col.allFinite())
        throw Error("dataset: non-finite value in column '" + name + "'");
    }
  }

  std::size_t n_units() const { return n_; }
  int tau() const { return tau_; }
  const DataSchema& schema() const { return schema_; }

  const Vector& column(const std::string& name) const {
    auto it = columns_.find(name);
    if (it == columns_.end()) throw Error("dataset: unknown column '" + name + "'");
    return it->second;
  }

  const std::string& treatment_name(int t) const {
    check_time(t);
    return schema_.treatments[static_cast<std::size_t>(t - 1)];
  }

  const Vector& treatment(int t) const { return column(treatment_name(t)); }
  const Vector& outcome() const { return column(schema_.outcome); }

  const std::vector<std::string>& covariate_names(int t) const {
    check_time(t);
    return schema_.covariates[static_cast<std::size_t>(t - 1)];
  }

  // H_t = (L_1,...,L_t, A_1,...,A_{t-1}) in temporal block order: the L_s
  // block precedes A_s, so downstream design layouts are deterministic.
  HistoryView history_at(int t) const {
    check_time(t);
    HistoryView h;
    h.t = t;
    for (int s = 1; s <= t; ++s) {
      for (const auto& name : schema_.covariates[static_cast<std::size_t>(s - 1)])
        h.columns.push_back(name);
      if (s < t) h.columns.push_back(schema_.treatments[static_cast<std::size_t>(s - 1)]);
    }
    return h;
  }

  DesignMatrix materialize(const std::vector<std::string>& names) const {
    DesignMatrix X;
    X.names = names;
    X.values.resize(static_cast<Eigen::Index>(n_), static_cast<Eigen::Index>(names.size()));
    for (std::size_t j = 0; j < names.size(); ++j)
      X.values.col(static_cast<Eigen::Index>(j)) = column(names[j]);
    return X;
  }

  // V_t columns must exist inside H_t
  void validate_rule_covariates(const RuleCovariateSpec& spec) const {
    if (spec.per_time.size() != static_cast<std::size_t>(tau_))
      throw Error("rule covariates: expected " + std::to_string(tau_) + " time points, got " +
                  std::to_string(spec.per_time.size()));
    for (int t = 1; t <= tau_; ++t) {
      const HistoryView h = history_at(t);
      for (const auto& name : spec.per_time[static_cast<std::size_t>(t - 1)]) {
        if (std::find(h.columns.begin(), h.columns.end(), name) == h.columns.end())
          throw Error("rule covariate '" + name + "' is not part of the history at time " +
                      std::to_string(t));
      }
    }
  }

 private:
  void check_time(int t) const {
    if (t < 1 || t > tau_)
      throw Error("time index " + std::to_string(t) + " out of range [1," + std::to_string(tau_) +
                  "]");
  }

  DataSchema schema_;
  std::unordered_map<std::string, Vector> columns_;
  std::size_t n_ = 0;
  int tau_ = 0;
};

// ── CSV ingestion ────────────────────────────────────────────────────────────

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Wide layout, one row per unit, header required. Columns not named in the
// schema are ignored. Missing or non-numeric cells are rejected with their
// location; there is no imputation path.
inline LongitudinalDataset load_csv(const std::string& path, const DataSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error("file '" + path + "': empty, expected a header row");
  const auto header = detail::split_csv_line(line);
  std::unordered_map<std::string, int> col_pos;
  for (std::size_t j = 0; j < header.size(); ++j) {
    const std::string name = detail::trim(header[j]);
    if (!col_pos.emplace(name, static_cast<int>(j)).second)
      throw Error("file '" + path + "': duplicate header column '" + name + "'");
  }

  std::vector<std::string> needed;
  needed.push_back(schema.outcome);
  for (const auto& a : schema.treatments) needed.push_back(a);
  for (const auto& block : schema.covariates)
    for (const auto& c : block) needed.push_back(c);
  for (const auto& name : needed)
    if (col_pos.find(name) == col_pos.end())
      throw Error("schema column '" + name + "' not found in file '" + path + "'");

  std::unordered_map<std::string, std::vector<double>> raw;
  for (const auto& name : needed) raw[name];

  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++row;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw Error("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                  " fields, got " + std::to_string(fields.size()));
    for (const auto& name : needed) {
      const std::string cell = detail::trim(fields[static_cast<std::size_t>(col_pos[name])]);
      if (cell.empty() || cell == "NA" || cell == "nan" || cell == "NaN")
        throw Error("missing value at row " + std::to_string(row) + ", column '" + name + "'");
      std::size_t used = 0;
      double value = 0.0;
      try {
        value = std::stod(cell, &used);
      } catch (const std::exception&) {
        throw Error("non-numeric value '" + cell + "' at row " + std::to_string(row) +
                    ", column '" + name + "'");
      }
      if (used != cell.size())
        throw Error("non-numeric value '" + cell + "' at row " + std::to_string(row) +
                    ", column '" + name + "'");
      if (!std::isfinite(value))
        throw Error("non-finite value at row " + std::to_string(row) + ", column '" + name + "'");
      raw[name].push_back(value);
    }
  }
  if (row == 0) throw Error("file '" + path + "': no data rows");

  // report binary violations with their row before general validation runs
  for (const auto& a : schema.treatments) {
    const auto& col = raw[a];
    for (std::size_t i = 0; i < col.size(); ++i)
      if (col[i] != 0.0 && col[i] != 1.0)
        throw Error("non-binary treatment at row " + std::to_string(i + 1) + " in column '" + a +
                    "'");
  }

  std::unordered_map<std::string, Vector> columns;
  for (auto& [name, values] : raw)
    columns[name] = Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
  return LongitudinalDataset(schema, std::move(columns));
}

}  // namespace odtr
