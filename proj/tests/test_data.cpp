#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "odtr/dataset.hpp"
#include "odtr/rules.hpp"

using namespace odtr;
namespace fs = std::filesystem;

namespace {

// schema matching the two-decision-point layout used throughout the suite
DataSchema two_stage_schema() {
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

struct TempCsv {
  fs::path path;
  explicit TempCsv(const std::string& content) {
    path = fs::temp_directory_path() /
           ("odtr_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++) + ".csv");
    std::ofstream out(path);
    out << content;
  }
  ~TempCsv() { std::error_code ec; fs::remove(path, ec); }
  static int counter;
};
int TempCsv::counter = 0;

LongitudinalDataset small_dataset() {
  TempCsv csv(
      "id,W1,W2,A1,W3,A2,Y\n"
      "1,0.5,-0.2,1,0.3,0,1.5\n"
      "2,-0.1,0.9,0,0.25,1,-0.4\n"
      "3,0.0,0.0,1,1.1,1,2.0\n");
  return load_csv(csv.path.string(), two_stage_schema());
}

}  // namespace

TEST(Data, LoadCsvBasic) {
  const LongitudinalDataset d = small_dataset();
  EXPECT_EQ(d.n_units(), 3u);
  EXPECT_EQ(d.tau(), 2);
  EXPECT_DOUBLE_EQ(d.outcome()[1], -0.4);
  EXPECT_DOUBLE_EQ(d.treatment(1)[0], 1.0);
  EXPECT_DOUBLE_EQ(d.column("W3")[2], 1.1);  // row order preserved
}

TEST(Data, LoadCsvRejectsNonBinaryTreatment) {
  TempCsv csv(
      "W1,W2,A1,W3,A2,Y\n"
      "0.5,0.1,1,0.3,0,1.0\n"
      "0.2,0.2,2,0.3,1,1.0\n");
  try {
    load_csv(csv.path.string(), two_stage_schema());
    FAIL() << "expected rejection";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("non-binary treatment at row 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("A1"), std::string::npos);
  }
}

TEST(Data, LoadCsvRejectsMissingCell) {
  TempCsv csv(
      "W1,W2,A1,W3,A2,Y\n"
      "0.5,0.1,1,0.3,0,\n");
  try {
    load_csv(csv.path.string(), two_stage_schema());
    FAIL() << "expected rejection";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 1"), std::string::npos);
    EXPECT_NE(msg.find("'Y'"), std::string::npos);
  }
}

TEST(Data, LoadCsvMissingFileAndUnknownColumn) {
  EXPECT_THROW(load_csv("/nonexistent/path.csv", two_stage_schema()), Error);
  TempCsv csv(
      "W1,A1,A2,Y\n"
      "0.5,1,0,1.0\n");
  try {
    load_csv(csv.path.string(), two_stage_schema());
    FAIL() << "expected rejection";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("'W2'"), std::string::npos);
  }
}

TEST(Data, HistoryColumns) {
  const LongitudinalDataset d = small_dataset();
  const HistoryView h1 = d.history_at(1);
  EXPECT_EQ(h1.columns, (std::vector<std::string>{"W1", "W2"}));
  const HistoryView h2 = d.history_at(2);
  EXPECT_EQ(h2.columns, (std::vector<std::string>{"W1", "W2", "A1", "W3"}));
  EXPECT_THROW(d.history_at(3), Error);
  EXPECT_THROW(d.history_at(0), Error);
}

TEST(Data, HistoryNesting) {
  const LongitudinalDataset d = small_dataset();
  const auto h1 = d.history_at(1).columns;
  const auto h2 = d.history_at(2).columns;
  for (const auto& c : h1)
    EXPECT_NE(std::find(h2.begin(), h2.end(), c), h2.end()) << c;
  EXPECT_GT(h2.size(), h1.size());
}

TEST(Data, ApplyStaticAndObservedRules) {
  const LongitudinalDataset d = small_dataset();
  const Vector ones = apply_rule(StaticAllRule{1}, d, 1);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(ones[i], 1.0);
  const Vector obs = apply_rule(ObservedTreatmentRule{}, d, 2);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(obs[i], d.treatment(2)[i]);
}

TEST(Data, ApplyThresholdRule) {
  nlohmann::json j = {
      {"Y", "outcome"},
      {"A1", {{"treatment", 1}}},
      {"prior_use", {{"covariate", 1}}},
  };
  TempCsv csv(
      "prior_use,A1,Y\n"
      "0,0,1.0\n"
      "1,1,1.0\n"
      "1,0,1.0\n");
  const LongitudinalDataset d = load_csv(csv.path.string(), DataSchema::from_json(j));
  ThresholdRule rule;
  rule.column = "prior_use";
  rule.op = ThresholdRule::Op::gt;
  rule.cutoff = 0.0;
  const Vector out = apply_rule(rule, d, 1);
  EXPECT_DOUBLE_EQ(out[0], 0.0);
  EXPECT_DOUBLE_EQ(out[1], 1.0);
  EXPECT_DOUBLE_EQ(out[2], 1.0);
}

TEST(Data, LearnedBlipSignRule) {
  // hand-built linear blip over a single column reproducing (0.3, -0.2, 0.0)
  TempCsv csv(
      "x,A1,Y\n"
      "0.3,0,0\n"
      "-0.2,1,0\n"
      "0.0,0,0\n");
  nlohmann::json j = {{"Y", "outcome"}, {"A1", {{"treatment", 1}}}, {"x", {{"covariate", 1}}}};
  const LongitudinalDataset d = load_csv(csv.path.string(), DataSchema::from_json(j));

  LearnedBlipStage stage;
  stage.v_names = {"x"};
  LinearState lin;
  lin.intercept = 0.0;
  lin.coef = Vector::Ones(1);
  stage.blip = FittedModel(Family::squared, {"x"}, lin);
  LearnedBlipRule rule;
  rule.stages = {stage};
  rule.direction = Direction::maximize;

  const Vector out = apply_rule(rule, d, 1);
  EXPECT_DOUBLE_EQ(out[0], 1.0);
  EXPECT_DOUBLE_EQ(out[1], 0.0);
  EXPECT_DOUBLE_EQ(out[2], 0.0);  // zero blip maps to 0 under the strict sign rule

  // minimize assignment equals maximize on the negated blip (nonzero blips)
  LearnedBlipRule minimize = rule;
  minimize.direction = Direction::minimize;
  LearnedBlipRule negated = rule;
  LinearState neg = lin;
  neg.coef = -lin.coef;
  negated.stages[0].blip = FittedModel(Family::squared, {"x"}, neg);
  const Vector a = apply_rule(minimize, d, 1);
  const Vector b = apply_rule(negated, d, 1);
  for (int i = 0; i < 3; ++i)
    if (d.column("x")[i] != 0.0) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(Data, ApplyRuleIsPure) {
  const LongitudinalDataset d = small_dataset();
  ThresholdRule rule;
  rule.column = "W1";
  rule.op = ThresholdRule::Op::ge;
  rule.cutoff = 0.0;
  const Vector a = apply_rule(rule, d, 1);
  const Vector b = apply_rule(rule, d, 1);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(Data, RuleColumnOutsideHistoryFails) {
  const LongitudinalDataset d = small_dataset();
  ThresholdRule rule;
  rule.column = "W3";  // W3 is measured at time 2, cannot drive the time-1 rule
  EXPECT_THROW(apply_rule(rule, d, 1), Error);
  ThresholdRule missing;
  missing.column = "nope";
  EXPECT_THROW(apply_rule(missing, d, 2), Error);
}

TEST(Data, RuleCovariateValidation) {
  const LongitudinalDataset d = small_dataset();
  RuleCovariateSpec ok;
  ok.per_time = {{"W1", "W2"}, {"A1", "W3"}};
  EXPECT_NO_THROW(d.validate_rule_covariates(ok));
  RuleCovariateSpec empty_t1;
  empty_t1.per_time = {{}, {"W3"}};  // intercept-only at time 1 is allowed
  EXPECT_NO_THROW(d.validate_rule_covariates(empty_t1));
  RuleCovariateSpec bad;
  bad.per_time = {{"W3"}, {"W3"}};
  EXPECT_THROW(d.validate_rule_covariates(bad), Error);
  RuleCovariateSpec wrong_len;
  wrong_len.per_time = {{"W1"}};
  EXPECT_THROW(d.validate_rule_covariates(wrong_len), Error);
}

TEST(Data, SchemaJsonErrors) {
  EXPECT_THROW(DataSchema::from_json(nlohmann::json{{"A1", {{"treatment", 1}}}}), Error);
  EXPECT_THROW(DataSchema::from_json(nlohmann::json{{"Y", "outcome"}}), Error);
  // gap in treatment times
  nlohmann::json gap = {{"Y", "outcome"}, {"A1", {{"treatment", 1}}}, {"A3", {{"treatment", 3}}}};
  EXPECT_THROW(DataSchema::from_json(gap), Error);
  // duplicate outcome
  nlohmann::json dup = {{"Y", "outcome"}, {"Z", "outcome"}, {"A1", {{"treatment", 1}}}};
  EXPECT_THROW(DataSchema::from_json(dup), Error);
}

TEST(Data, DatasetRejectsNonFinite) {
  DataSchema schema = two_stage_schema();
  std::unordered_map<std::string, Vector> cols;
  for (const auto& name : {"W1", "W2", "W3"}) cols[name] = Vector::Zero(2);
  cols["A1"] = Vector::Zero(2);
  cols["A2"] = Vector::Zero(2);
  Vector y = Vector::Zero(2);
  y[1] = std::numeric_limits<double>::infinity();
  cols["Y"] = y;
  EXPECT_THROW(LongitudinalDataset(schema, cols), Error);
}
