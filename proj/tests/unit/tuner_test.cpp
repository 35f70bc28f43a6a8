#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "lrforge/tuner.hpp"

namespace lrforge {
namespace {

TrialContext moons_ctx(Iteration budget) {
  TrialContext ctx;
  ctx.model = model::Mlp{2, 8, 2};
  ctx.data = std::make_shared<const SplitDataset>(gen_moons(1, 300, 0.1));
  ctx.train.batch_size = 16;
  ctx.train.budget = budget;
  ctx.train.eval_every = 25;
  ctx.train.seed = 5;
  return ctx;
}

TrialContext blobs_ctx(Iteration budget) {
  TrialContext ctx;
  ctx.model = model::Linear{2, 2};
  ctx.data = std::make_shared<const SplitDataset>(gen_blobs(7, 200, 2, 2, 3.0));
  ctx.train.batch_size = 16;
  ctx.train.budget = budget;
  ctx.train.seed = 1;
  return ctx;
}

SearchSpace fix_space(std::vector<double> lambdas) {
  SearchSpace s;
  s.templates = {PolicySpec(policy::Fix{1.0})};
  s.lambda_grid = std::move(lambdas);
  return s;
}

TEST(GridSearch, EvaluatesEveryCell) {
  SearchSpace s;
  s.templates = {PolicySpec(policy::Fix{1.0}), PolicySpec(policy::Tri{0.5, 1.0, 20}),
                 PolicySpec(policy::Sin2{0.5, 1.0, 20}), PolicySpec(policy::NStep{1.0, 0.1, {30}}),
                 PolicySpec(policy::Exp{1.0, 0.9, 10})};
  s.lambda_grid = {0.001, 0.005, 0.01, 0.05, 0.1};
  const auto r = grid_search(s, moons_ctx(40), 4);
  EXPECT_EQ(r.ranking.size(), 25u);
  std::set<std::pair<std::string, double>> seen;
  for (const auto& c : r.ranking) seen.insert({c.key, c.lambda});
  EXPECT_EQ(seen.size(), 25u);
  for (std::size_t i = 0; i + 1 < r.ranking.size(); ++i) {
    EXPECT_GE(r.ranking[i].metric_mean, r.ranking[i + 1].metric_mean);
  }
}

TEST(GridSearch, SingleCellEqualsTheTrial) {
  const auto ctx = moons_ctx(60);
  const auto r = grid_search(fix_space({0.1}), ctx);
  ASSERT_EQ(r.ranking.size(), 1u);
  const auto direct = run_trial(ctx.model, *ctx.data, ScaledSchedule(0.1, Schedule(policy::Fix{1.0})), {}, ctx.train);
  EXPECT_EQ(r.winner().metric_mean, direct.outcome.final_accuracy);
  EXPECT_EQ(r.winner().metric_std, 0.0);
  EXPECT_EQ(r.winner().cost_iters, 60.0);
  ASSERT_EQ(r.winner().trials.size(), 1u);
  EXPECT_EQ(r.winner().trials[0].seed, ctx.train.seed);
}

TEST(GridSearch, TinyLambdaLoses) {
  const auto r = grid_search(fix_space({1e-6, 0.1}), blobs_ctx(200));
  EXPECT_EQ(r.winner().lambda, 0.1);
}

TEST(GridSearch, RepeatsUseConsecutiveSeedsAndSampleStd) {
  auto s = fix_space({0.05});
  s.trials_per_point = 3;
  const auto r = grid_search(s, moons_ctx(50));
  const auto& c = r.winner();
  ASSERT_EQ(c.trials.size(), 3u);
  EXPECT_EQ(c.trials[0].seed, 5u);
  EXPECT_EQ(c.trials[2].seed, 7u);
  double mean = 0.0;
  for (const auto& t : c.trials) mean += t.outcome.final_accuracy / 3.0;
  double ss = 0.0;
  for (const auto& t : c.trials) ss += (t.outcome.final_accuracy - mean) * (t.outcome.final_accuracy - mean);
  EXPECT_NEAR(c.metric_mean, mean, 1e-15);
  EXPECT_NEAR(c.metric_std, std::sqrt(ss / 2.0), 1e-15);
}

TEST(GridSearch, WorkerCountDoesNotChangeTheResult) {
  SearchSpace s;
  s.templates = {PolicySpec(policy::Fix{1.0}), PolicySpec(policy::Tri2{0.2, 1.0, 15})};
  s.lambda_grid = {0.01, 0.1, 0.5};
  s.trials_per_point = 2;
  const auto ctx = moons_ctx(60);
  const auto one = tune_result_to_json(grid_search(s, ctx, 1)).dump();
  EXPECT_EQ(one, tune_result_to_json(grid_search(s, ctx, 8)).dump());
  EXPECT_EQ(one, tune_result_to_json(grid_search(s, ctx, 3)).dump());
}

TEST(GridSearch, DivergedCellsRankLast) {
  const auto r = grid_search(fix_space({1e7, 0.01}), moons_ctx(60));
  ASSERT_EQ(r.ranking.size(), 2u);
  EXPECT_EQ(r.ranking[0].lambda, 0.01);
  EXPECT_TRUE(r.ranking[1].all_diverged);
  EXPECT_EQ(r.ranking[1].metric_mean, 0.0);
}

TEST(GridSearch, TiesBreakByCostThenPolicyText) {
  // Two templates with identical behaviour (FIX 1 at lambda 0.1 and FIX 0.1
  // at lambda 1) tie on metric and cost; the policy text decides.
  SearchSpace s;
  s.templates = {PolicySpec(policy::Fix{1.0}), PolicySpec(policy::Fix{0.5})};
  s.lambda_grid = {0.1, 0.2};
  const auto r = grid_search(s, blobs_ctx(30));
  for (std::size_t i = 0; i + 1 < r.ranking.size(); ++i) {
    const auto& a = r.ranking[i];
    const auto& b = r.ranking[i + 1];
    if (a.metric_mean == b.metric_mean && a.cost_iters == b.cost_iters) {
      EXPECT_TRUE(a.key < b.key || (a.key == b.key && a.lambda < b.lambda));
    }
  }
}

TEST(RandomSearch, LogUniformDraws) {
  const auto a = draw_lambdas({0.001, 0.1}, 5, 42);
  EXPECT_EQ(a, draw_lambdas({0.001, 0.1}, 5, 42));
  EXPECT_EQ(std::set<double>(a.begin(), a.end()).size(), 5u);
  for (double l : a) {
    EXPECT_GE(l, 0.001);
    EXPECT_LE(l, 0.1);
  }
  const auto degenerate = draw_lambdas({0.02, 0.02 * (1 + 1e-12)}, 1, 3);
  EXPECT_NEAR(degenerate[0], 0.02, 1e-12);

  // Log-uniform: about half the mass below the geometric midpoint 0.01.
  const auto many = draw_lambdas({0.001, 0.1}, 4000, 9);
  const auto below = std::count_if(many.begin(), many.end(), [](double l) { return l < 0.01; });
  EXPECT_NEAR(static_cast<double>(below) / 4000.0, 0.5, 0.03);
}

TEST(RandomSearch, RunsTheDrawnPoints) {
  SearchSpace s;
  s.templates = {PolicySpec(policy::Fix{1.0})};
  s.lambda_range = std::pair{0.001, 0.1};
  const auto r = random_search(s, moons_ctx(30), 5, 42, 2);
  ASSERT_EQ(r.ranking.size(), 5u);
  std::set<double> got;
  for (const auto& c : r.ranking) got.insert(c.lambda);
  const auto want = draw_lambdas({0.001, 0.1}, 5, 42);
  EXPECT_EQ(got, std::set<double>(want.begin(), want.end()));
  EXPECT_THROW(random_search(fix_space({0.1}), moons_ctx(30), 5, 42), ValidationError);
}

TEST(RangeTest, BracketContainsTheBestK) {
  auto ctx = blobs_ctx(1000);
  const auto r = range_test(ctx, {1e-4, 1e-3, 1e-2, 1e-1});
  ASSERT_EQ(r.points.size(), 4u);
  auto best = std::max_element(r.points.begin(), r.points.end(),
                               [](const RangePoint& a, const RangePoint& b) { return a.accuracy < b.accuracy; });
  EXPECT_EQ(r.best_k, best->k);
  EXPECT_LE(r.k_low, r.best_k);
  EXPECT_GE(r.k_high, r.best_k);
  // The smallest rate barely moves in a 100-iteration trial.
  EXPECT_LT(r.points[0].accuracy, best->accuracy);
}

TEST(RangeTest, BracketRules) {
  auto ctx = moons_ctx(500);
  const auto r = range_test(ctx, {1e-3, 0.1, 1e6}, {0.2, 1.0});
  ASSERT_EQ(r.points.size(), 3u);
  EXPECT_TRUE(r.points[2].diverged);
  EXPECT_EQ(r.k_high, r.best_k);  // the step above diverged
  // With a full-width tolerance band any non-diverged smaller k qualifies.
  if (r.best_k == 0.1) EXPECT_EQ(r.k_low, 1e-3);
  EXPECT_THROW(range_test(ctx, {0.1}), ValidationError);
  EXPECT_THROW(range_test(ctx, {1e7, 1e8}), AllDivergedError);
}

TEST(CostEffective, ReachedTargetsRankFirstBySpeed) {
  SearchSpace s;
  s.templates = {PolicySpec(policy::Fix{1.0})};
  s.lambda_grid = {1e-5, 0.05, 0.5};
  s.target_accuracy = 0.95;
  auto ctx = blobs_ctx(2000);
  ctx.data = std::make_shared<const SplitDataset>(gen_blobs(7, 200, 2, 2, 10.0));
  ctx.train.eval_every = 5;
  const auto r = cost_effective(s, ctx);
  ASSERT_EQ(r.ranking.size(), 3u);
  EXPECT_TRUE(r.ranking[0].reached_target);
  EXPECT_FALSE(r.ranking[2].reached_target);
  EXPECT_EQ(r.ranking[2].lambda, 1e-5);
  for (std::size_t i = 0; i + 1 < r.ranking.size(); ++i) {
    if (r.ranking[i].reached_target && r.ranking[i + 1].reached_target) {
      EXPECT_LE(r.ranking[i].cost_iters, r.ranking[i + 1].cost_iters);
    }
  }
  EXPECT_FALSE(r.speedup(r.ranking[2]).has_value());
}

TEST(CostEffective, SpeedupArithmetic) {
  TuneResult t;
  t.budget = 10000;
  CellResult c;
  c.reached_target = true;
  c.cost_iters = 3500;
  EXPECT_NEAR(*t.speedup(c), 2.857, 1e-3);
  c.reached_target = false;
  EXPECT_FALSE(t.speedup(c).has_value());
}

TuneResult won_by(PolicySpec p, double lambda = 1.0) {
  TuneResult t;
  CellResult c;
  c.policy = std::move(p);
  c.lambda = lambda;
  t.ranking.push_back(c);
  return t;
}

TEST(ComposeMulti, ReproducesTheThreePhaseTriangleShape) {
  const auto composite = compose_multi(
      {0, 30000, 60000, 64000},
      {won_by(policy::Tri{0.1, 0.5, 1500}), won_by(policy::Tri{0.01, 0.05, 1000}), won_by(policy::Tri{0.001, 0.005, 500})});
  const PolicySpec expected = policy::Composite{{{0, 30000, policy::Tri{0.1, 0.5, 1500}},
                                                 {30000, 60000, policy::Tri{0.01, 0.05, 1000}},
                                                 {60000, 64000, policy::Tri{0.001, 0.005, 500}}}};
  EXPECT_EQ(composite, expected);
  EXPECT_NO_THROW(validate(composite));
  const Schedule s(composite);
  for (Iteration b : {30000, 60000}) {
    const auto& segs = composite.as<policy::Composite>().segments;
    for (const auto& seg : segs) {
      if (seg.start <= b - 1 && b - 1 < seg.end) EXPECT_EQ(s(b - 1), Schedule(*seg.policy)(b - 1 - seg.start));
      if (seg.start <= b && b < seg.end) EXPECT_EQ(s(b), Schedule(*seg.policy)(0));
      if (seg.start <= b + 1 && b + 1 < seg.end) EXPECT_EQ(s(b + 1), Schedule(*seg.policy)(1));
    }
  }
}

TEST(ComposeMulti, LambdaFoldsIntoTheSegment) {
  const auto c = compose_multi({0, 100}, {won_by(policy::Fix{1.0}, 0.25)});
  EXPECT_EQ(c.as<policy::Composite>().segments[0].policy->as<policy::Fix>().k, 0.25);
}

TEST(ComposeMulti, SinglePhaseAgreesWithItsPolicy) {
  const PolicySpec p = policy::Sin{0.01, 0.1, 40};
  const Schedule composite(compose_multi({0, 500}, {won_by(p)}));
  const Schedule plain(p);
  for (Iteration t = 0; t < 1000; ++t) EXPECT_EQ(composite(t), plain(t));
}

TEST(ComposeMulti, Errors) {
  EXPECT_THROW(compose_multi({0, 50, 40}, {won_by(policy::Fix{0.1}), won_by(policy::Fix{0.1})}), ValidationError);
  EXPECT_THROW(compose_multi({0, 50}, {TuneResult{}}), ValidationError);
  EXPECT_THROW(compose_multi({10, 50}, {won_by(policy::Fix{0.1})}), ValidationError);
}

TEST(TunePhases, ProducesAValidComposite) {
  SearchSpace s;
  s.templates = {PolicySpec(policy::Tri{0.5, 1.0, 10}), PolicySpec(policy::Fix{1.0})};
  s.lambda_grid = {0.01, 0.1};
  const auto r = tune_phases(s, {0, 40, 80}, moons_ctx(80), 2);
  ASSERT_EQ(r.phases.size(), 2u);
  EXPECT_EQ(r.phases[0].ranking.size(), 4u);
  EXPECT_NO_THROW(validate(r.composite));
  const auto& segs = r.composite.as<policy::Composite>().segments;
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[1].start, 40);
  EXPECT_EQ(*segs[0].policy, scale_policy(std::get<PolicySpec>(r.phases[0].winner().policy), r.phases[0].winner().lambda));
}

TEST(KRatio, HoldsK0ByDefault) {
  const auto t = expand_k_ratio(policy::Tri{0.01, 0.02, 100}, {2, 3, 6});
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t[2].as<policy::Tri>().k0, 0.01);
  EXPECT_EQ(t[2].as<policy::Tri>().k1, 0.01 * 6);
  const auto held = expand_k_ratio(policy::Tri{0.01, 0.06, 100}, {2}, false);
  EXPECT_EQ(held[0].as<policy::Tri>().k1, 0.06);
  EXPECT_EQ(held[0].as<policy::Tri>().k0, 0.03);
  EXPECT_THROW(expand_k_ratio(policy::Fix{0.1}, {2}), ValidationError);
}

TEST(TunerIo, SearchSpaceJsonAndLeaderboard) {
  const auto s = search_space_from_json(Json::parse(R"({
    "templates": [{"family": "FIX", "params": {"k": 1}},
                  {"family": "PLATEAU_REDUCE", "params": {"lr": 1, "patience": 2}}],
    "lambda_grid": [0.01, 0.1], "trials_per_point": 2})"));
  EXPECT_EQ(s.templates.size(), 2u);
  EXPECT_EQ(search_space_from_json(search_space_to_json(s)).lambda_grid, s.lambda_grid);
  EXPECT_THROW(search_space_from_json(Json::parse(R"({"templates": [], "lambda_grid": [0.1]})")), ValidationError);
  EXPECT_THROW(search_space_from_json(Json::parse(R"({"templates": [{"family":"FIX","params":{"k":1}}],
    "lambda_grid": [-1]})")),
               ValidationError);
  EXPECT_THROW(search_space_from_json(Json::parse(R"({"templates": [{"family":"FIX","params":{"k":1}}],
    "lambda_range": [0.1, 0.01]})")),
               ValidationError);

  const auto r = grid_search(s, moons_ctx(30));
  std::ostringstream csv;
  write_leaderboard_csv(csv, r);
  const std::string text = csv.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "rank,policy,lambda,metric_mean,metric_std,cost_iters");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
  EXPECT_NE(text.find("\"{\"\"family\"\":\"\"FIX\"\""), std::string::npos);
}

}  // namespace
}  // namespace lrforge
