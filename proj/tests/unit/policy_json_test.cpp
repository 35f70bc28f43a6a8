#include <gtest/gtest.h>

#include "lrforge/adaptive.hpp"
#include "lrforge/policy_json.hpp"
#include "policy_gen.hpp"

namespace lrforge {
namespace {

TEST(PolicyJson, ParsesTableOneTriExp) {
  const auto j = Json::parse(R"({"family":"TRIEXP","params":{"k0":0.0001,"k1":0.9,"l":2000,"gamma":0.99994}})");
  const PolicySpec spec = policy_from_json(j);
  EXPECT_EQ(spec, PolicySpec(policy::TriExp{0.0001, 0.9, 2000, 0.99994}));
  EXPECT_EQ(policy_to_json(spec), j);
}

TEST(PolicyJson, StepLengthDefaultsToOne) {
  const auto spec = policy_from_json(Json::parse(R"({"family":"STEP","params":{"k":0.1,"gamma":0.99994}})"));
  EXPECT_EQ(spec.as<policy::Step>().l, 1);
}

TEST(PolicyJson, RoundTripsRandomPolicies) {
  Rng rng(99);
  for (int i = 0; i < 500; ++i) {
    const PolicySpec spec = testgen::random_policy(rng, static_cast<int>(rng.below(testgen::kFamilyCount)));
    const auto text = policy_to_json(spec).dump();
    EXPECT_EQ(policy_from_json(Json::parse(text)), spec) << text;
  }
}

TEST(PolicyJson, ErrorsNameTheField) {
  auto expect_error = [](const char* text, const char* fragment) {
    try {
      (void)policy_from_json(Json::parse(text));
      ADD_FAILURE() << "expected failure for " << text;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  expect_error(R"({"family":"NOPE","params":{}})", "unknown family");
  expect_error(R"({"family":"FIX","params":{}})", "policy.params.k is required");
  expect_error(R"({"family":"FIX","params":{"k":"big"}})", "policy.params.k must be a number");
  expect_error(R"({"family":"FIX","params":{"k":0.1,"kk":1}})", "policy.params.kk is not a recognized field");
  expect_error(R"({"family":"TRI","params":{"k0":0.1,"k1":0.2,"l":2.5}})", "policy.params.l must be an integer");
  expect_error(R"({"family":"MULTI","params":{"segments":[{"start":0,"end":5}]}})", "segments[0].policy is required");
}

TEST(PolicyJson, PlateauRoundTrip) {
  PlateauConfig change;
  change.variant = PlateauVariant::Change;
  change.monitor = "test_accuracy";
  change.mode = MetricMode::Maximize;
  change.next_policies = {policy::Tri{0.1, 0.5, 100}, policy::Fix{0.01}};
  EXPECT_EQ(plateau_from_json(plateau_to_json(change)), change);

  PlateauConfig reduce;
  reduce.initial_lr = 0.05;
  reduce.factor = 0.5;
  reduce.min_lr = 1e-4;
  const auto j = plateau_to_json(reduce);
  EXPECT_EQ(j["family"], "PLATEAU_REDUCE");
  EXPECT_TRUE(is_plateau_family(j));
  EXPECT_FALSE(is_plateau_family(policy_to_json(policy::Fix{0.1})));
  EXPECT_EQ(plateau_from_json(j), reduce);
}

}  // namespace
}  // namespace lrforge
