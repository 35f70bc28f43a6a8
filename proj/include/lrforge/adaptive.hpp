#pragma once

// State-based policies driven by an observed metric: Reduce-LR-On-Plateau
// scales the current rate down, Change-LR-On-Plateau advances through an
// ordered list of formula policies. Transitions are pure: old state in, new
// state out. How often to observe is the caller's choice.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "lrforge/error.hpp"
#include "lrforge/policy_json.hpp"
#include "lrforge/schedule.hpp"

namespace lrforge {

enum class PlateauVariant { Reduce, Change };
enum class MetricMode { Minimize, Maximize };

struct PlateauConfig {
  PlateauVariant variant = PlateauVariant::Reduce;
  std::string monitor = "test_loss";
  MetricMode mode = MetricMode::Minimize;
  double min_delta = 1e-4;
  int patience = 10;
  int cooldown = 0;
  double min_lr = 0.0;
  // Reduce
  double initial_lr = 0.1;
  double factor = 0.1;
  // Change
  std::vector<PolicySpec> next_policies;

  friend bool operator==(const PlateauConfig&, const PlateauConfig&) = default;
};

/// Metrics the trainer can feed to a plateau policy.
inline bool is_known_monitor(const std::string& m) {
  return m == "train_loss" || m == "test_loss" || m == "test_accuracy";
}

inline void validate(const PlateauConfig& c) {
  const std::string ctx = c.variant == PlateauVariant::Reduce ? "PLATEAU_REDUCE: " : "PLATEAU_CHANGE: ";
  detail::require(is_known_monitor(c.monitor), ctx + "monitor must be train_loss, test_loss or test_accuracy");
  detail::require(c.patience >= 1, ctx + "patience must be >= 1");
  detail::require(c.cooldown >= 0, ctx + "cooldown must be >= 0");
  detail::require(std::isfinite(c.min_delta) && c.min_delta >= 0.0, ctx + "min_delta must be >= 0");
  detail::require(std::isfinite(c.min_lr) && c.min_lr >= 0.0, ctx + "min_lr must be >= 0");
  if (c.variant == PlateauVariant::Reduce) {
    detail::require(std::isfinite(c.factor) && c.factor > 0.0 && c.factor < 1.0, ctx + "factor must lie in (0, 1)");
    detail::require(std::isfinite(c.initial_lr) && c.initial_lr >= c.min_lr, ctx + "lr must be finite and >= min_lr");
  } else {
    detail::require(!c.next_policies.empty(), ctx + "policies must not be empty");
    for (std::size_t i = 0; i < c.next_policies.size(); ++i) {
      if (auto err = find_violation(c.next_policies[i])) {
        detail::fail(ctx + "policies[" + std::to_string(i) + "]." + *err);
      }
    }
  }
}

struct AdaptiveState {
  double best_metric = 0.0;
  int stall_count = 0;
  int cooldown_remaining = 0;
  double current_lr = 0.0;            // Reduce
  std::size_t policy_index = 0;       // Change
  Iteration local_t_origin = 0;       // Change
  friend bool operator==(const AdaptiveState&, const AdaptiveState&) = default;
};

inline AdaptiveState initial_state(const PlateauConfig& c) {
  AdaptiveState s;
  s.best_metric = c.mode == MetricMode::Minimize ? std::numeric_limits<double>::infinity()
                                                 : -std::numeric_limits<double>::infinity();
  s.current_lr = c.initial_lr;
  return s;
}

struct PlateauAction {
  enum class Kind { None, Reduced, Switched };
  Kind kind = Kind::None;
  double new_lr = 0.0;
  std::size_t policy_index = 0;

  static PlateauAction none() { return {}; }
  friend bool operator==(const PlateauAction&, const PlateauAction&) = default;
};

/// One observation. An improvement must beat best_metric by more than
/// min_delta; anything else is a stall. Stalls seen while cooling down are
/// discarded, so no action fires during cooldown. `iteration` becomes the new
/// local time origin when the Change variant switches policy.
inline std::pair<AdaptiveState, PlateauAction> observe(AdaptiveState state, const PlateauConfig& config,
                                                       double metric, Iteration iteration = 0) {
  detail::require(std::isfinite(metric), "observed metric is not finite");
  const bool improved = config.mode == MetricMode::Minimize ? metric < state.best_metric - config.min_delta
                                                            : metric > state.best_metric + config.min_delta;
  if (improved) {
    state.best_metric = metric;
    state.stall_count = 0;
  } else {
    ++state.stall_count;
  }

  if (state.cooldown_remaining > 0) {
    --state.cooldown_remaining;
    state.stall_count = 0;
    return {state, PlateauAction::none()};
  }
  if (state.stall_count < config.patience) return {state, PlateauAction::none()};

  state.stall_count = 0;
  state.cooldown_remaining = config.cooldown;
  PlateauAction action;
  if (config.variant == PlateauVariant::Reduce) {
    const double next = std::max(state.current_lr * config.factor, config.min_lr);
    if (next < state.current_lr) {
      state.current_lr = next;
      action = {PlateauAction::Kind::Reduced, next, 0};
    }
  } else if (state.policy_index + 1 < config.next_policies.size()) {
    ++state.policy_index;
    state.local_t_origin = iteration;
    action = {PlateauAction::Kind::Switched, 0.0, state.policy_index};
  }
  return {state, action};
}

/// Owns a validated plateau config, its compiled schedules and the running
/// state. This is what a training loop drives.
class PlateauController {
 public:
  explicit PlateauController(PlateauConfig config) : config_(std::move(config)) {
    validate(config_);
    for (const auto& p : config_.next_policies) schedules_.emplace_back(p);
    state_ = initial_state(config_);
  }

  double lr(Iteration t) const {
    if (config_.variant == PlateauVariant::Reduce) return state_.current_lr;
    return schedules_[state_.policy_index](t - state_.local_t_origin);
  }

  PlateauAction observe(double metric, Iteration t) {
    auto [next, action] = lrforge::observe(state_, config_, metric, t);
    state_ = next;
    return action;
  }

  const PlateauConfig& config() const { return config_; }
  const AdaptiveState& state() const { return state_; }

 private:
  PlateauConfig config_;
  std::vector<Schedule> schedules_;
  AdaptiveState state_;
};

inline bool is_plateau_family(const Json& j) {
  if (!j.is_object() || !j.contains("family") || !j.at("family").is_string()) return false;
  const auto f = j.at("family").get<std::string>();
  return f == "PLATEAU_REDUCE" || f == "PLATEAU_CHANGE";
}

inline Json plateau_to_json(const PlateauConfig& c) {
  Json params = {{"monitor", c.monitor},
                 {"mode", c.mode == MetricMode::Minimize ? "min" : "max"},
                 {"min_delta", c.min_delta},
                 {"patience", c.patience},
                 {"cooldown", c.cooldown},
                 {"min_lr", c.min_lr}};
  if (c.variant == PlateauVariant::Reduce) {
    params["lr"] = c.initial_lr;
    params["factor"] = c.factor;
  } else {
    Json list = Json::array();
    for (const auto& p : c.next_policies) list.push_back(policy_to_json(p));
    params["policies"] = list;
  }
  return {{"family", c.variant == PlateauVariant::Reduce ? "PLATEAU_REDUCE" : "PLATEAU_CHANGE"}, {"params", params}};
}

inline PlateauConfig plateau_from_json(const Json& j, const std::string& context = "policy") {
  detail::ParamReader top(j, context);
  const std::string family = top.string("family");
  PlateauConfig c;
  if (family == "PLATEAU_REDUCE") {
    c.variant = PlateauVariant::Reduce;
  } else if (family == "PLATEAU_CHANGE") {
    c.variant = PlateauVariant::Change;
  } else {
    detail::fail(context + ".family: \"" + family + "\" is not a plateau family");
  }
  detail::ParamReader r(top.raw("params"), context + ".params");
  top.finish();
  c.monitor = r.string("monitor", c.monitor);
  const std::string mode = r.string("mode", "min");
  if (mode != "min" && mode != "max") detail::fail(r.context() + ".mode must be \"min\" or \"max\"");
  c.mode = mode == "min" ? MetricMode::Minimize : MetricMode::Maximize;
  c.min_delta = r.number("min_delta", c.min_delta);
  c.patience = static_cast<int>(r.integer("patience", c.patience));
  c.cooldown = static_cast<int>(r.integer("cooldown", c.cooldown));
  c.min_lr = r.number("min_lr", c.min_lr);
  if (c.variant == PlateauVariant::Reduce) {
    c.initial_lr = r.number("lr");
    c.factor = r.number("factor", c.factor);
  } else {
    const Json& list = r.raw("policies");
    if (!list.is_array()) detail::fail(r.context() + ".policies must be an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      c.next_policies.push_back(policy_from_json(list[i], r.context() + ".policies[" + std::to_string(i) + "]"));
    }
  }
  r.finish();
  return c;
}

}  // namespace lrforge
