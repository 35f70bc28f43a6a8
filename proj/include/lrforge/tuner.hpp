#pragma once

// Learning-rate tuning: (policy template x lambda) sweeps by grid or random
// search, the fixed-LR range test, cost-to-target ranking, and assembly of a
// multi-policy composite from per-phase winners.
//
// Trials run on a small worker pool. Every result is written into the slot
// of its cell, so the outcome does not depend on completion order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "lrforge/adaptive.hpp"
#include "lrforge/error.hpp"
#include "lrforge/format.hpp"
#include "lrforge/policy_json.hpp"
#include "lrforge/trainer.hpp"

namespace lrforge {

enum class Objective { MaxAccuracy, MinCostToTarget };

inline std::string_view objective_name(Objective o) {
  return o == Objective::MaxAccuracy ? "max-accuracy" : "min-cost";
}

/// A formula policy or a plateau policy, before lambda is applied.
using PolicyTemplate = std::variant<PolicySpec, PlateauConfig>;

inline Json template_to_json(const PolicyTemplate& t) {
  if (const auto* p = std::get_if<PolicySpec>(&t)) return policy_to_json(*p);
  return plateau_to_json(std::get<PlateauConfig>(t));
}

inline PolicyTemplate template_from_json(const Json& j, const std::string& context = "policy") {
  if (is_plateau_family(j)) {
    auto c = plateau_from_json(j, context);
    validate(c);
    return c;
  }
  return policy_from_json(j, context);
}

/// Canonical text of a template; the last tie-break in every ranking.
inline std::string template_key(const PolicyTemplate& t) { return template_to_json(t).dump(); }

inline LrPolicy instantiate(const PolicyTemplate& t, double lambda) {
  if (const auto* p = std::get_if<PolicySpec>(&t)) return ScaledSchedule(lambda, Schedule(*p));
  auto c = scale_plateau(std::get<PlateauConfig>(t), lambda);
  validate(c);
  return c;
}

/// Model, data, optimizer and loop settings shared by every trial of a sweep.
struct TrialContext {
  ModelSpec model;
  std::shared_ptr<const SplitDataset> data;
  OptimizerSpec optimizer;
  TrainConfig train;
};

struct SearchSpace {
  std::vector<PolicyTemplate> templates;
  std::vector<double> lambda_grid;                           // grid mode
  std::optional<std::pair<double, double>> lambda_range;     // random mode
  int trials_per_point = 1;
  Objective objective = Objective::MaxAccuracy;
  std::optional<double> target_accuracy;  // required for MinCostToTarget
};

inline void validate(const SearchSpace& s) {
  detail::require(!s.templates.empty(), "search space: templates must not be empty");
  detail::require(s.trials_per_point >= 1, "search space: trials_per_point must be >= 1");
  for (double l : s.lambda_grid) {
    detail::require(std::isfinite(l) && l > 0.0, "search space: lambda values must be finite and > 0");
  }
  if (s.lambda_range) {
    const auto [lo, hi] = *s.lambda_range;
    detail::require(std::isfinite(lo) && std::isfinite(hi) && lo > 0.0, "search space: lambda range must be > 0");
    detail::require(lo < hi, "search space: lambda range needs low < high");
  }
  if (s.objective == Objective::MinCostToTarget) {
    detail::require(s.target_accuracy.has_value(), "search space: min-cost objective needs target_accuracy");
  }
  if (s.target_accuracy) {
    detail::require(*s.target_accuracy > 0.0 && *s.target_accuracy <= 1.0,
                    "search space: target_accuracy must lie in (0, 1]");
  }
}

struct TrialResult {
  std::uint64_t seed = 0;
  TrialOutcome outcome;
};

struct CellResult {
  PolicyTemplate policy;
  double lambda = 1.0;
  std::string key;           // template_key(policy)
  double metric_mean = 0.0;  // final accuracy; diverged trials count as 0
  double metric_std = 0.0;   // sample std over repeats, 0 for one repeat
  double cost_iters = 0.0;   // mean iterations run (= iterations to target when reached)
  bool reached_target = false;  // every repeat reached the target
  bool all_diverged = false;
  std::vector<TrialResult> trials;
};

struct TuneResult {
  Objective objective = Objective::MaxAccuracy;
  Iteration budget = 0;
  std::vector<CellResult> ranking;  // best first

  const CellResult& winner() const {
    detail::require(!ranking.empty(), "tune result is empty");
    return ranking.front();
  }
  /// budget / iterations-to-target for a cell that reached the target.
  std::optional<double> speedup(const CellResult& c) const {
    if (!c.reached_target || c.cost_iters <= 0.0) return std::nullopt;
    return static_cast<double>(budget) / c.cost_iters;
  }
};

namespace detail {

inline std::size_t resolve_workers(std::size_t workers) {
  if (workers > 0) return workers;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs job(i) for i in [0, n) on up to `workers` threads. The first
/// exception is rethrown after all threads finish.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  workers = std::min(resolve_workers(workers), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline void summarize(CellResult& cell) {
  std::vector<double> metric;
  double cost = 0.0;
  bool reached = true;
  bool diverged = true;
  for (const auto& t : cell.trials) {
    metric.push_back(t.outcome.diverged ? 0.0 : t.outcome.final_accuracy);
    cost += static_cast<double>(t.outcome.iterations_run);
    reached = reached && t.outcome.iterations_to_target.has_value();
    diverged = diverged && t.outcome.diverged;
  }
  const double n = static_cast<double>(cell.trials.size());
  double sum = 0.0;
  for (double m : metric) sum += m;
  cell.metric_mean = sum / n;
  cell.metric_std = sample_std(metric, cell.metric_mean);
  cell.cost_iters = cost / n;
  cell.reached_target = reached;
  cell.all_diverged = diverged;
}

/// Strict weak order, best first. All-diverged cells go last. In
/// min-cost mode cells that reached the target come first by ascending cost.
/// Then higher mean metric, lower cost, template text, lower lambda.
inline bool ranks_before(const CellResult& a, const CellResult& b, Objective objective) {
  if (a.all_diverged != b.all_diverged) return !a.all_diverged;
  if (objective == Objective::MinCostToTarget) {
    if (a.reached_target != b.reached_target) return a.reached_target;
    if (a.reached_target && a.cost_iters != b.cost_iters) return a.cost_iters < b.cost_iters;
  }
  if (a.metric_mean != b.metric_mean) return a.metric_mean > b.metric_mean;
  if (a.cost_iters != b.cost_iters) return a.cost_iters < b.cost_iters;
  if (a.key != b.key) return a.key < b.key;
  return a.lambda < b.lambda;
}

}  // namespace detail

/// Evaluates every (template, lambda) cell `trials_per_point` times with
/// seeds train.seed + 0 .. r-1 and ranks the cells.
inline TuneResult evaluate_cells(const SearchSpace& space, const std::vector<double>& lambdas,
                                 const TrialContext& ctx, std::size_t workers = 1) {
  validate(space);
  detail::require(!lambdas.empty(), "search space: no lambda values to evaluate");
  detail::require(ctx.data != nullptr, "trial context has no dataset");
  TrainConfig train = ctx.train;
  if (space.target_accuracy) train.target_accuracy = space.target_accuracy;
  validate(train);

  std::vector<CellResult> cells;
  for (const auto& t : space.templates) {
    for (double l : lambdas) {
      CellResult c;
      c.policy = t;
      c.lambda = l;
      c.key = template_key(t);
      c.trials.resize(static_cast<std::size_t>(space.trials_per_point));
      cells.push_back(std::move(c));
    }
  }
  // Instantiate up front so a bad template fails before any training.
  std::vector<LrPolicy> policies;
  for (const auto& c : cells) policies.push_back(instantiate(c.policy, c.lambda));

  const auto r = static_cast<std::size_t>(space.trials_per_point);
  detail::parallel_for(cells.size() * r, workers, [&](std::size_t job) {
    const std::size_t cell = job / r;
    const std::size_t rep = job % r;
    TrainConfig cfg = train;
    cfg.seed = train.seed + rep;
    auto trace = run_trial(ctx.model, *ctx.data, policies[cell], ctx.optimizer, cfg);
    cells[cell].trials[rep] = {cfg.seed, trace.outcome};
  });

  for (auto& c : cells) detail::summarize(c);
  std::stable_sort(cells.begin(), cells.end(),
                   [&](const CellResult& a, const CellResult& b) { return detail::ranks_before(a, b, space.objective); });
  return {space.objective, train.budget, std::move(cells)};
}

inline TuneResult grid_search(const SearchSpace& space, const TrialContext& ctx, std::size_t workers = 1) {
  detail::require(!space.lambda_grid.empty(), "grid search needs a lambda grid");
  return evaluate_cells(space, space.lambda_grid, ctx, workers);
}

/// N log-uniform draws from the lambda range; duplicates are redrawn.
inline std::vector<double> draw_lambdas(std::pair<double, double> range, std::size_t n, std::uint64_t seed) {
  detail::require(n >= 1, "random search needs N >= 1");
  detail::require(range.first > 0.0 && range.first < range.second, "lambda range needs 0 < low < high");
  Rng rng(seed);
  const double lo = std::log(range.first);
  const double hi = std::log(range.second);
  std::vector<double> out;
  for (int attempts = 0; out.size() < n; ++attempts) {
    detail::require(attempts < 1000 * static_cast<int>(n), "lambda range too narrow for N distinct draws");
    const double v = std::clamp(std::exp(rng.uniform(lo, hi)), range.first, range.second);
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  return out;
}

inline TuneResult random_search(const SearchSpace& space, const TrialContext& ctx, std::size_t n, std::uint64_t seed,
                                std::size_t workers = 1) {
  detail::require(space.lambda_range.has_value(), "random search needs a lambda range");
  validate(space);
  return evaluate_cells(space, draw_lambdas(*space.lambda_range, n, seed), ctx, workers);
}

/// Ranks by iterations to the target; cells that never reach it rank last.
inline TuneResult cost_effective(SearchSpace space, const TrialContext& ctx, std::size_t workers = 1) {
  space.objective = Objective::MinCostToTarget;
  if (!space.target_accuracy) space.target_accuracy = ctx.train.target_accuracy;
  detail::require(space.target_accuracy.has_value(), "cost-effective tuning needs a target accuracy");
  if (space.lambda_grid.empty() && !space.lambda_range) space.lambda_grid = {1.0};
  return grid_search(space, ctx, workers);
}

struct RangePoint {
  double k = 0.0;
  double accuracy = 0.0;  // final accuracy of the short trial, 0 if diverged
  bool diverged = false;
};

struct RangeTestResult {
  std::vector<RangePoint> points;  // ascending k
  double best_k = 0.0;
  double k_low = 0.0;
  double k_high = 0.0;
};

struct RangeTestOptions {
  double trial_fraction = 0.1;  // short-trial length as a fraction of the budget
  double tolerance = 0.01;      // accuracy band below the best
};

/// Short FIX trials per k. The bracket runs from the largest k below the best
/// whose accuracy is within `tolerance` of it (else the best k) to one grid
/// step above the best when that step did not diverge (else the best k).
inline RangeTestResult range_test(const TrialContext& ctx, std::vector<double> k_grid, RangeTestOptions opt = {},
                                  std::size_t workers = 1) {
  detail::require(k_grid.size() >= 2, "range test: need >= 2 values in k_grid");
  for (double k : k_grid) detail::require(std::isfinite(k) && k > 0.0, "range test: k values must be > 0");
  std::sort(k_grid.begin(), k_grid.end());
  detail::require(std::adjacent_find(k_grid.begin(), k_grid.end()) == k_grid.end(),
                  "range test: k values must be distinct");
  detail::require(opt.trial_fraction > 0.0 && opt.trial_fraction <= 1.0, "range test: trial_fraction must be in (0, 1]");
  detail::require(opt.tolerance >= 0.0, "range test: tolerance must be >= 0");
  detail::require(ctx.data != nullptr, "trial context has no dataset");

  TrainConfig cfg = ctx.train;
  cfg.budget = std::max<Iteration>(1, std::llround(opt.trial_fraction * static_cast<double>(ctx.train.budget)));
  cfg.target_accuracy.reset();

  RangeTestResult out;
  out.points.resize(k_grid.size());
  detail::parallel_for(k_grid.size(), workers, [&](std::size_t i) {
    const auto trace = run_trial(ctx.model, *ctx.data, Schedule(policy::Fix{k_grid[i]}), ctx.optimizer, cfg);
    out.points[i] = {k_grid[i], trace.outcome.diverged ? 0.0 : trace.outcome.final_accuracy, trace.outcome.diverged};
  });

  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < out.points.size(); ++i) {
    if (out.points[i].diverged) continue;
    if (!best || out.points[i].accuracy > out.points[*best].accuracy) best = i;
  }
  if (!best) throw AllDivergedError("range test: every k diverged");
  const auto& b = out.points[*best];
  out.best_k = b.k;
  out.k_low = b.k;
  for (std::size_t i = *best; i-- > 0;) {
    if (!out.points[i].diverged && out.points[i].accuracy >= b.accuracy - opt.tolerance) {
      out.k_low = out.points[i].k;
      break;
    }
  }
  out.k_high = b.k;
  if (*best + 1 < out.points.size() && !out.points[*best + 1].diverged) out.k_high = out.points[*best + 1].k;
  return out;
}

/// Builds a composite whose segment i, [boundaries[i], boundaries[i+1]), runs
/// the winner of phase i with its lambda folded in.
inline PolicySpec compose_multi(const std::vector<Iteration>& boundaries, const std::vector<TuneResult>& phases) {
  detail::require(boundaries.size() >= 2, "compose_multi: need at least two boundaries");
  detail::require(boundaries.front() == 0, "compose_multi: boundaries must start at 0");
  detail::require(phases.size() + 1 == boundaries.size(), "compose_multi: need one phase result per segment");
  policy::Composite c;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    detail::require(!phases[i].ranking.empty(), "compose_multi: phase " + std::to_string(i) + " result is empty");
    const auto& w = phases[i].winner();
    const auto* spec = std::get_if<PolicySpec>(&w.policy);
    detail::require(spec != nullptr, "compose_multi: phase " + std::to_string(i) + " winner is a plateau policy");
    c.segments.push_back({boundaries[i], boundaries[i + 1], scale_policy(*spec, w.lambda)});
  }
  PolicySpec out = c;
  validate(out);
  return out;
}

struct PhaseTuning {
  PolicySpec composite;
  std::vector<TuneResult> phases;
};

/// Greedy multi-policy tuning: phase i tries every cell of `space` on
/// [b_i, b_i+1) behind the winners already fixed for earlier phases; each
/// candidate composite trains from scratch for b_i+1 iterations.
inline PhaseTuning tune_phases(const SearchSpace& space, const std::vector<Iteration>& boundaries,
                               const TrialContext& ctx, std::size_t workers = 1) {
  detail::require(boundaries.size() >= 2 && boundaries.front() == 0, "tune_phases: boundaries must start at 0");
  for (std::size_t i = 0; i + 1 < boundaries.size(); ++i) {
    detail::require(boundaries[i] < boundaries[i + 1], "tune_phases: boundaries must increase");
  }
  detail::require(!space.lambda_grid.empty(), "tune_phases needs a lambda grid");
  PhaseTuning out;
  std::vector<policy::Segment> fixed;
  for (std::size_t phase = 0; phase + 1 < boundaries.size(); ++phase) {
    SearchSpace sub = space;
    sub.templates.clear();
    sub.lambda_grid = {1.0};
    std::vector<std::pair<const PolicySpec*, double>> origin;
    for (const auto& t : space.templates) {
      const auto* spec = std::get_if<PolicySpec>(&t);
      detail::require(spec != nullptr, "tune_phases: templates must be formula policies");
      for (double l : space.lambda_grid) {
        policy::Composite c;
        c.segments = fixed;
        c.segments.push_back({boundaries[phase], boundaries[phase + 1], scale_policy(*spec, l)});
        sub.templates.emplace_back(PolicySpec(std::move(c)));
        origin.emplace_back(spec, l);
      }
    }
    TrialContext phase_ctx = ctx;
    phase_ctx.train.budget = boundaries[phase + 1];
    auto result = evaluate_cells(sub, sub.lambda_grid, phase_ctx, workers);
    // Report cells as the phase-local (template, lambda) they came from.
    for (auto& cell : result.ranking) {
      const auto it = std::find(sub.templates.begin(), sub.templates.end(), cell.policy);
      const auto idx = static_cast<std::size_t>(it - sub.templates.begin());
      cell.policy = *origin[idx].first;
      cell.lambda = origin[idx].second;
      cell.key = template_key(cell.policy);
    }
    const auto& w = result.winner();
    fixed.push_back({boundaries[phase], boundaries[phase + 1], scale_policy(std::get<PolicySpec>(w.policy), w.lambda)});
    out.phases.push_back(std::move(result));
  }
  out.composite = compose_multi(boundaries, out.phases);
  return out;
}

/// Cyclic templates for a sweep over k1/k0. Holding k0 (the default) sets
/// k1 = ratio * k0; otherwise k0 = k1 / ratio.
inline std::vector<PolicySpec> expand_k_ratio(const PolicySpec& cyclic, const std::vector<double>& ratios,
                                              bool hold_k0 = true) {
  std::vector<PolicySpec> out;
  for (double r : ratios) {
    detail::require(std::isfinite(r) && r >= 1.0, "k1/k0 ratio must be >= 1");
    PolicySpec p = cyclic;
    std::visit(
        [&](auto& f) {
          if constexpr (requires { f.k0; f.k1; }) {
            if (hold_k0) {
              f.k1 = f.k0 * r;
            } else {
              f.k0 = f.k1 / r;
            }
          } else {
            detail::fail("k1/k0 ratio sweep needs a cyclic policy");
          }
        },
        p.family);
    validate(p);
    out.push_back(std::move(p));
  }
  return out;
}

// Serialization.

inline Json search_space_to_json(const SearchSpace& s) {
  Json templates = Json::array();
  for (const auto& t : s.templates) templates.push_back(template_to_json(t));
  Json j = {{"templates", templates},
            {"trials_per_point", s.trials_per_point},
            {"objective", std::string(objective_name(s.objective))}};
  if (!s.lambda_grid.empty()) j["lambda_grid"] = s.lambda_grid;
  if (s.lambda_range) j["lambda_range"] = {s.lambda_range->first, s.lambda_range->second};
  if (s.target_accuracy) j["target_accuracy"] = *s.target_accuracy;
  return j;
}

inline SearchSpace search_space_from_json(const Json& j, const std::string& context = "search") {
  detail::ParamReader r(j, context);
  SearchSpace s;
  const Json& templates = r.raw("templates");
  if (!templates.is_array()) detail::fail(context + ".templates must be an array");
  for (std::size_t i = 0; i < templates.size(); ++i) {
    s.templates.push_back(template_from_json(templates[i], context + ".templates[" + std::to_string(i) + "]"));
  }
  if (r.has("lambda_grid")) s.lambda_grid = r.numbers("lambda_grid");
  if (r.has("lambda_range")) {
    const auto range = r.numbers("lambda_range");
    if (range.size() != 2) detail::fail(context + ".lambda_range must be [low, high]");
    s.lambda_range = std::pair{range[0], range[1]};
  }
  s.trials_per_point = static_cast<int>(r.integer("trials_per_point", 1));
  const std::string objective = r.string("objective", "max-accuracy");
  if (objective == "max-accuracy") {
    s.objective = Objective::MaxAccuracy;
  } else if (objective == "min-cost") {
    s.objective = Objective::MinCostToTarget;
  } else {
    detail::fail(context + ".objective must be \"max-accuracy\" or \"min-cost\"");
  }
  if (r.has("target_accuracy")) s.target_accuracy = r.number("target_accuracy");
  r.finish();
  validate(s);
  return s;
}

inline Json tune_result_to_json(const TuneResult& t) {
  Json ranking = Json::array();
  for (std::size_t i = 0; i < t.ranking.size(); ++i) {
    const auto& c = t.ranking[i];
    Json trials = Json::array();
    for (const auto& tr : c.trials) trials.push_back({{"seed", tr.seed}, {"outcome", outcome_to_json(tr.outcome)}});
    Json cell = {{"rank", i + 1},
                 {"policy", template_to_json(c.policy)},
                 {"lambda", c.lambda},
                 {"metric_mean", c.metric_mean},
                 {"metric_std", c.metric_std},
                 {"cost_iters", c.cost_iters},
                 {"reached_target", c.reached_target},
                 {"diverged", c.all_diverged},
                 {"trials", trials}};
    if (auto s = t.speedup(c)) cell["speedup"] = *s;
    ranking.push_back(std::move(cell));
  }
  return {{"objective", std::string(objective_name(t.objective))}, {"budget", t.budget}, {"ranking", ranking}};
}

namespace detail {

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

}  // namespace detail

/// `rank,policy,lambda,metric_mean,metric_std,cost_iters`; the policy column
/// holds the canonical JSON text, CSV-quoted.
inline void write_leaderboard_csv(std::ostream& os, const TuneResult& t) {
  os << "rank,policy,lambda,metric_mean,metric_std,cost_iters\n";
  for (std::size_t i = 0; i < t.ranking.size(); ++i) {
    const auto& c = t.ranking[i];
    os << (i + 1) << ',' << detail::csv_quote(c.key) << ',' << format_double(c.lambda) << ','
       << format_double(c.metric_mean) << ',' << format_double(c.metric_std) << ',' << format_double(c.cost_iters)
       << '\n';
  }
}

}  // namespace lrforge
