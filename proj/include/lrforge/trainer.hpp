#pragma once

// The training loop: minibatch SGD/Adam over a dataset under a learning-rate
// policy, with periodic test evaluation and optional early stop at a target
// accuracy. A non-finite loss ends the trial as diverged; it is an outcome,
// not an error.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lrforge/adaptive.hpp"
#include "lrforge/error.hpp"
#include "lrforge/format.hpp"
#include "lrforge/model.hpp"
#include "lrforge/optim.hpp"
#include "lrforge/problems.hpp"
#include "lrforge/schedule.hpp"

namespace lrforge {

struct TrainConfig {
  std::size_t batch_size = 32;
  Iteration budget = 1000;
  std::optional<Iteration> eval_every;  // default: one epoch
  std::optional<double> target_accuracy;
  std::uint64_t seed = 0;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// ceil(n_train / batch_size); the last partial batch is kept.
inline Iteration epoch_length(const TrainConfig& c, std::size_t n_train) {
  detail::require(c.batch_size >= 1, "batch_size must be >= 1");
  return static_cast<Iteration>((n_train + c.batch_size - 1) / c.batch_size);
}

inline Iteration eval_interval(const TrainConfig& c, std::size_t n_train) {
  return c.eval_every.value_or(std::max<Iteration>(1, epoch_length(c, n_train)));
}

inline void validate(const TrainConfig& c) {
  detail::require(c.batch_size >= 1, "batch_size must be >= 1");
  detail::require(c.budget >= 0, "budget must be >= 0");
  detail::require(!c.eval_every || *c.eval_every >= 1, "eval_every must be >= 1");
  detail::require(!c.target_accuracy || (*c.target_accuracy > 0.0 && *c.target_accuracy <= 1.0),
                  "target_accuracy must lie in (0, 1]");
}

/// Rewrites a policy whose time parameters are in epochs into iterations:
/// every length, milestone, horizon and segment bound is multiplied by
/// epoch_len. Fractional warmups stay fractions of the (converted) horizon.
inline PolicySpec epochs_to_iterations(const PolicySpec& spec, Iteration epoch_len) {
  detail::require(epoch_len >= 1, "epoch length must be >= 1");
  PolicySpec out = spec;
  std::visit(
      [&](auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (requires { p.l; }) p.l *= epoch_len;
        if constexpr (requires { p.t_max; }) p.t_max *= epoch_len;
        if constexpr (std::is_same_v<P, policy::NStep>) {
          for (auto& m : p.milestones) m *= epoch_len;
        } else if constexpr (std::is_same_v<P, policy::Warmup>) {
          if (p.warmup >= 1.0) p.warmup *= static_cast<double>(epoch_len);
          p.horizon *= epoch_len;
          if (p.inner) **p.inner = epochs_to_iterations(**p.inner, epoch_len);
        } else if constexpr (std::is_same_v<P, policy::Composite>) {
          for (auto& s : p.segments) {
            s.start *= epoch_len;
            s.end *= epoch_len;
            *s.policy = epochs_to_iterations(*s.policy, epoch_len);
          }
        }
      },
      out.family);
  validate(out);
  return out;
}

using LrPolicy = std::variant<Schedule, ScaledSchedule, PlateauConfig>;

/// lambda applied to a plateau policy: its rates (Reduce) or every formula
/// policy it switches between (Change).
inline PlateauConfig scale_plateau(PlateauConfig c, double lambda) {
  detail::require(std::isfinite(lambda) && lambda > 0.0, "lambda must be finite and > 0");
  c.initial_lr *= lambda;
  c.min_lr *= lambda;
  for (auto& p : c.next_policies) p = scale_policy(p, lambda);
  return c;
}

struct IterationRecord {
  Iteration t = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

/// `t` counts completed iterations at the time of the evaluation.
struct EvalRecord {
  Iteration t = 0;
  double test_accuracy = 0.0;
  double test_loss = 0.0;
  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

struct TrialOutcome {
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::optional<Iteration> iterations_to_target;
  Iteration iterations_run = 0;
  bool diverged = false;
  double wall_time_s = 0.0;
};

struct TrialTrace {
  std::vector<IterationRecord> iterations;
  std::vector<EvalRecord> evals;
  TrialOutcome outcome;
};

namespace detail {

// Uniform view over the three policy kinds for the training loop.
class LrDriver {
 public:
  explicit LrDriver(const LrPolicy& p) {
    if (const auto* s = std::get_if<Schedule>(&p)) {
      fixed_.emplace(1.0, *s);
    } else if (const auto* s = std::get_if<ScaledSchedule>(&p)) {
      fixed_.emplace(*s);
    } else {
      plateau_.emplace(std::get<PlateauConfig>(p));
    }
  }

  double lr(Iteration t) const { return fixed_ ? (*fixed_)(t) : plateau_->lr(t); }

  void observe(double train_loss, const EvalRecord& e) {
    if (!plateau_) return;
    const auto& m = plateau_->config().monitor;
    const double metric = m == "train_loss" ? train_loss : m == "test_loss" ? e.test_loss : e.test_accuracy;
    if (std::isfinite(metric)) plateau_->observe(metric, e.t);
  }

 private:
  std::optional<ScaledSchedule> fixed_;
  std::optional<PlateauController> plateau_;
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline std::uint64_t order_seed(std::uint64_t seed) { return seed ^ 0x9E3779B97F4A7C15ULL; }

}  // namespace detail

/// Runs one trial. Parameters are initialized from `config.seed`; batch order
/// comes from an independent stream derived from the same seed. Evaluation
/// happens before the first iteration, every eval_every iterations, and once
/// more at the budget if that is not already an evaluation point.
inline TrialTrace run_trial(const ModelSpec& spec, const SplitDataset& data, const LrPolicy& policy,
                            const OptimizerSpec& optimizer, const TrainConfig& config) {
  validate(config);
  validate(spec);
  detail::require(!data.train.labels.empty(), "training split is empty");
  detail::require(!data.test.labels.empty(), "test split is empty");
  detail::require(data.train.n_features == input_dim(spec) && data.test.n_features == input_dim(spec),
                  "dataset has " + std::to_string(data.train.n_features) + " features but the model expects " +
                      std::to_string(input_dim(spec)));
  detail::require(static_cast<std::size_t>(std::max(data.train.n_classes, data.test.n_classes)) <= output_dim(spec),
                  "dataset has more classes than the model outputs");

  const auto started = std::chrono::steady_clock::now();
  detail::LrDriver lr(policy);
  auto params = init_params(spec, config.seed);
  auto state = make_state(optimizer, params.values.size());
  Rng order_rng(detail::order_seed(config.seed));

  const std::size_t n = data.train.size();
  const Iteration epoch = epoch_length(config, n);
  const Iteration every = eval_interval(config, n);

  TrialTrace trace;
  trace.iterations.reserve(static_cast<std::size_t>(config.budget));
  auto& out = trace.outcome;

  // Returns true when the trial should stop (target reached or diverged).
  auto evaluate_at = [&](Iteration t, double train_loss) {
    const auto e = evaluate(spec, params, data.test);
    if (!std::isfinite(e.loss)) {
      out.diverged = true;
      return true;
    }
    const EvalRecord rec{t, e.accuracy, e.loss};
    trace.evals.push_back(rec);
    out.final_accuracy = e.accuracy;
    out.best_accuracy = std::max(out.best_accuracy, e.accuracy);
    if (config.target_accuracy && e.accuracy >= *config.target_accuracy) {
      out.iterations_to_target = t;
      return true;
    }
    if (t > 0) lr.observe(train_loss, rec);
    return false;
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> bx;
  std::vector<int> by;
  double loss_sum = 0.0;
  Iteration loss_count = 0;

  bool stop = evaluate_at(0, NAN);
  for (Iteration t = 0; !stop && t < config.budget; ++t) {
    const Iteration in_epoch = t % epoch;
    if (in_epoch == 0) order_rng.shuffle(std::span<std::size_t>(order));
    const std::size_t begin = static_cast<std::size_t>(in_epoch) * config.batch_size;
    const std::size_t end = std::min(n, begin + config.batch_size);
    bx.clear();
    by.clear();
    for (std::size_t i = begin; i < end; ++i) {
      const auto row = data.train.row(order[i]);
      bx.insert(bx.end(), row.begin(), row.end());
      by.push_back(data.train.labels[order[i]]);
    }

    const double rate = lr.lr(t);
    const auto r = forward_loss_grad(spec, params, bx, by);
    trace.iterations.push_back({t, rate, r.loss});
    out.iterations_run = t + 1;
    if (!std::isfinite(r.loss) || !detail::all_finite(r.grad)) {
      out.diverged = true;
      break;
    }
    optimizer_step(params.values, r.grad, rate, state);
    loss_sum += r.loss;
    ++loss_count;

    const Iteration done = t + 1;
    if (done % every == 0 || done == config.budget) {
      stop = evaluate_at(done, loss_sum / static_cast<double>(loss_count));
      loss_sum = 0.0;
      loss_count = 0;
    }
  }
  out.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return trace;
}

inline void write_iterations_csv(std::ostream& os, const TrialTrace& trace) {
  os << "iteration,lr,train_loss\n";
  for (const auto& r : trace.iterations) {
    os << r.t << ',' << format_double(r.lr) << ',' << format_double(r.train_loss) << '\n';
  }
}

inline void write_evals_csv(std::ostream& os, const TrialTrace& trace) {
  os << "iteration,test_accuracy\n";
  for (const auto& e : trace.evals) os << e.t << ',' << format_double(e.test_accuracy) << '\n';
}

/// Wall time is left out unless asked for, so outputs stay byte-reproducible.
inline Json outcome_to_json(const TrialOutcome& o, bool include_wall_time = false) {
  Json j = {{"final_accuracy", o.final_accuracy},
            {"best_accuracy", o.best_accuracy},
            {"iterations_to_target", o.iterations_to_target ? Json(*o.iterations_to_target) : Json(nullptr)},
            {"iterations_run", o.iterations_run},
            {"diverged", o.diverged}};
  if (include_wall_time) j["wall_time_s"] = o.wall_time_s;
  return j;
}

inline TrialOutcome outcome_from_json(const Json& j, const std::string& context = "outcome") {
  detail::ParamReader r(j, context);
  TrialOutcome o;
  o.final_accuracy = r.number("final_accuracy");
  o.best_accuracy = r.number("best_accuracy");
  if (r.has("iterations_to_target") && !r.raw("iterations_to_target").is_null()) {
    o.iterations_to_target = r.integer("iterations_to_target");
  } else {
    r.ignore("iterations_to_target");
  }
  o.iterations_run = r.integer("iterations_run", 0);
  o.diverged = r.boolean("diverged", false);
  o.wall_time_s = r.number("wall_time_s", 0.0);
  r.finish();
  return o;
}

inline Json train_config_to_json(const TrainConfig& c) {
  Json j = {{"batch_size", c.batch_size}, {"budget", c.budget}, {"seed", c.seed}};
  if (c.eval_every) j["eval_every"] = *c.eval_every;
  if (c.target_accuracy) j["target_accuracy"] = *c.target_accuracy;
  return j;
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& context = "train") {
  detail::ParamReader r(j, context);
  TrainConfig c;
  c.batch_size = static_cast<std::size_t>(std::max<std::int64_t>(0, r.integer("batch_size", 32)));
  c.budget = r.integer("budget");
  if (r.has("eval_every")) c.eval_every = r.integer("eval_every");
  if (r.has("target_accuracy")) c.target_accuracy = r.number("target_accuracy");
  c.seed = static_cast<std::uint64_t>(r.integer("seed", 0));
  r.finish();
  validate(c);
  return c;
}

// 2-D trajectories.

struct PathPoint {
  Iteration t = 0;
  Vec2 point{};
  double value = 0.0;
  friend bool operator==(const PathPoint&, const PathPoint&) = default;
};

struct SurfacePath {
  std::vector<PathPoint> points;
  bool diverged = false;
};

/// Point k of the path is the position after k optimizer steps, so a run of
/// n iterations yields n + 1 points unless it diverges first.
template <typename Policy>
SurfacePath run_surface_trial(const Surface2D& surface, const Vec2& start, const Policy& policy,
                              const OptimizerSpec& optimizer, Iteration iterations) {
  validate(surface);
  detail::require(iterations >= 0, "iterations must be >= 0");
  auto state = make_state(optimizer, 2);
  SurfacePath path;
  std::vector<double> x{start[0], start[1]};
  for (Iteration t = 0;; ++t) {
    if (!std::isfinite(x[0]) || !std::isfinite(x[1])) {
      path.diverged = true;
      break;
    }
    const auto s = surface_eval_grad(surface, {x[0], x[1]});
    if (!std::isfinite(s.value) || !std::isfinite(s.grad[0]) || !std::isfinite(s.grad[1])) {
      path.diverged = true;
      break;
    }
    path.points.push_back({t, {x[0], x[1]}, s.value});
    if (t == iterations) break;
    const std::vector<double> g{s.grad[0], s.grad[1]};
    optimizer_step(x, g, policy(t), state);
  }
  return path;
}

inline void write_path_csv(std::ostream& os, const SurfacePath& path) {
  os << "iteration,x,y,value\n";
  for (const auto& p : path.points) {
    os << p.t << ',' << format_double(p.point[0]) << ',' << format_double(p.point[1]) << ','
       << format_double(p.value) << '\n';
  }
}

}  // namespace lrforge
