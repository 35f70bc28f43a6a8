#include <gtest/gtest.h>

#include "lrforge/adaptive.hpp"
#include "lrforge/rng.hpp"

namespace lrforge {
namespace {

PlateauConfig reduce_config() {
  PlateauConfig c;
  c.mode = MetricMode::Minimize;
  c.min_delta = 1e-4;
  c.patience = 2;
  c.factor = 0.1;
  c.initial_lr = 0.1;
  return c;
}

std::vector<PlateauAction> feed(const PlateauConfig& c, AdaptiveState& s, std::initializer_list<double> metrics) {
  std::vector<PlateauAction> actions;
  for (double m : metrics) {
    auto [next, action] = observe(s, c, m);
    s = next;
    actions.push_back(action);
  }
  return actions;
}

TEST(ReducePlateau, ReducesOnThirdFlatObservation) {
  const auto c = reduce_config();
  auto s = initial_state(c);
  const auto actions = feed(c, s, {1.0, 1.0, 1.0});
  EXPECT_EQ(actions[0].kind, PlateauAction::Kind::None);
  EXPECT_EQ(actions[1].kind, PlateauAction::Kind::None);
  ASSERT_EQ(actions[2].kind, PlateauAction::Kind::Reduced);
  EXPECT_DOUBLE_EQ(actions[2].new_lr, 0.01);
  EXPECT_DOUBLE_EQ(s.current_lr, 0.01);
  EXPECT_EQ(s.stall_count, 0);
}

TEST(ReducePlateau, StrictlyImprovingNeverActs) {
  const auto c = reduce_config();
  auto s = initial_state(c);
  for (const auto& a : feed(c, s, {1.0, 0.9, 0.8})) EXPECT_EQ(a.kind, PlateauAction::Kind::None);
  EXPECT_EQ(s.best_metric, 0.8);
}

TEST(ReducePlateau, ClampsToMinLr) {
  auto c = reduce_config();
  c.min_lr = 0.05;
  c.initial_lr = 0.1;  // 2 * min_lr
  auto s = initial_state(c);
  const auto actions = feed(c, s, {1.0, 1.0, 1.0});
  ASSERT_EQ(actions[2].kind, PlateauAction::Kind::Reduced);
  EXPECT_EQ(actions[2].new_lr, 0.05);
  // Already at the floor: further plateaus change nothing.
  const auto more = feed(c, s, {1.0, 1.0});
  EXPECT_EQ(more[1].kind, PlateauAction::Kind::None);
  EXPECT_EQ(s.current_lr, 0.05);
}

TEST(ReducePlateau, ImprovementWithinMinDeltaIsAStall) {
  const auto c = reduce_config();
  auto s = initial_state(c);
  feed(c, s, {1.0});
  feed(c, s, {1.0 - 1e-4});  // exactly min_delta better: a tie
  EXPECT_EQ(s.stall_count, 1);
  EXPECT_EQ(s.best_metric, 1.0);
}

TEST(ReducePlateau, MaximizeMode) {
  auto c = reduce_config();
  c.mode = MetricMode::Maximize;
  auto s = initial_state(c);
  const auto actions = feed(c, s, {0.5, 0.6, 0.55, 0.6});
  EXPECT_EQ(actions[3].kind, PlateauAction::Kind::Reduced);
}

TEST(ReducePlateau, RejectsNonFiniteMetric) {
  const auto c = reduce_config();
  EXPECT_THROW(observe(initial_state(c), c, std::nan("")), ValidationError);
}

TEST(ReducePlateau, ConfigValidation) {
  auto c = reduce_config();
  c.factor = 1.0;
  EXPECT_THROW(validate(c), ValidationError);
  c = reduce_config();
  c.patience = 0;
  EXPECT_THROW(validate(c), ValidationError);
  c = reduce_config();
  c.monitor = "val_perplexity";
  EXPECT_THROW(validate(c), ValidationError);
}

TEST(PlateauProperties, RandomMetricStreams) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    PlateauConfig c;
    c.patience = 1 + static_cast<int>(rng.below(4));
    c.cooldown = static_cast<int>(rng.below(4));
    c.factor = rng.uniform(0.1, 0.9);
    c.initial_lr = 1.0;
    c.min_lr = rng.uniform(0.0, 0.3);
    c.min_delta = rng.uniform(0.0, 0.01);
    auto s = initial_state(c);
    double prev_lr = s.current_lr;
    for (int i = 0; i < 100; ++i) {
      const int cooldown_before = s.cooldown_remaining;
      auto [next, action] = observe(s, c, rng.uniform(0.0, 1.0));
      if (cooldown_before > 0) EXPECT_EQ(action.kind, PlateauAction::Kind::None);
      EXPECT_LE(next.current_lr, prev_lr);
      EXPECT_GE(next.current_lr, c.min_lr);
      EXPECT_LE(next.stall_count, c.patience);
      prev_lr = next.current_lr;
      s = next;
    }
  }
}

TEST(ChangePlateau, AdvancesThenHoldsLastPolicy) {
  PlateauConfig c;
  c.variant = PlateauVariant::Change;
  c.patience = 1;
  c.next_policies = {policy::Fix{0.1}, policy::Tri{0.2, 0.6, 10}};
  PlateauController ctl(c);
  EXPECT_EQ(ctl.lr(0), 0.1);
  EXPECT_EQ(ctl.observe(1.0, 0).kind, PlateauAction::Kind::None);
  const auto switched = ctl.observe(1.0, 50);
  ASSERT_EQ(switched.kind, PlateauAction::Kind::Switched);
  EXPECT_EQ(switched.policy_index, 1U);
  // New policy starts from its own t = 0 at the switch iteration, and may raise the LR.
  EXPECT_EQ(ctl.lr(50), 0.2);
  EXPECT_DOUBLE_EQ(ctl.lr(60), 0.6);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(ctl.observe(1.0, 100 + i).kind, PlateauAction::Kind::None);
  EXPECT_EQ(ctl.state().policy_index, 1U);
}

TEST(ChangePlateau, RequiresPolicies) {
  PlateauConfig c;
  c.variant = PlateauVariant::Change;
  EXPECT_THROW(PlateauController{c}, ValidationError);
}

}  // namespace
}  // namespace lrforge
