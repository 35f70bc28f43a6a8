#pragma once

// SGD with momentum and Adam. Both update a flat parameter buffer in place
// and advance their own state; nothing is shared between trials.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lrforge/error.hpp"
#include "lrforge/policy_json.hpp"

namespace lrforge {

struct SgdState {
  double momentum = 0.0;
  std::vector<double> velocity;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::vector<double> m;
  std::vector<double> v;
};

using OptimizerState = std::variant<SgdState, AdamState>;

/// Optimizer choice before any parameters exist.
struct OptimizerSpec {
  enum class Kind { Sgd, Adam };
  Kind kind = Kind::Sgd;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  friend bool operator==(const OptimizerSpec&, const OptimizerSpec&) = default;
};

inline void validate(const OptimizerSpec& s) {
  if (s.kind == OptimizerSpec::Kind::Sgd) {
    detail::require(std::isfinite(s.momentum) && s.momentum >= 0.0 && s.momentum < 1.0,
                    "sgd.momentum must lie in [0, 1)");
  } else {
    detail::require(s.beta1 >= 0.0 && s.beta1 < 1.0, "adam.beta1 must lie in [0, 1)");
    detail::require(s.beta2 >= 0.0 && s.beta2 < 1.0, "adam.beta2 must lie in [0, 1)");
    detail::require(std::isfinite(s.eps) && s.eps > 0.0, "adam.eps must be > 0");
  }
}

inline OptimizerState make_state(const OptimizerSpec& spec, std::size_t n_params) {
  validate(spec);
  if (spec.kind == OptimizerSpec::Kind::Sgd) return SgdState{spec.momentum, std::vector<double>(n_params, 0.0)};
  return AdamState{spec.beta1, spec.beta2, spec.eps, 0, std::vector<double>(n_params, 0.0),
                   std::vector<double>(n_params, 0.0)};
}

namespace detail {

inline void check_step_inputs(std::span<const double> params, std::span<const double> grads, double lr,
                              std::size_t buffer_size) {
  require(params.size() == grads.size(), "shape mismatch: " + std::to_string(params.size()) + " parameters, " +
                                             std::to_string(grads.size()) + " gradients");
  require(buffer_size == params.size(), "shape mismatch: optimizer state holds " + std::to_string(buffer_size) +
                                            " entries for " + std::to_string(params.size()) + " parameters");
  require(std::isfinite(lr) && lr >= 0.0, "learning rate must be finite and >= 0");
  for (double g : grads) require(std::isfinite(g), "non-finite gradient");
}

}  // namespace detail

/// v <- mu v + g ; theta <- theta - lr v
inline void sgd_step(std::span<double> params, std::span<const double> grads, double lr, SgdState& state) {
  detail::check_step_inputs(params, grads, lr, state.velocity.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.velocity[i] = state.momentum * state.velocity[i] + grads[i];
    params[i] -= lr * state.velocity[i];
  }
}

/// M_t = b1 M + (1-b1) g ; V_t = b2 V + (1-b2) g^2 ;
/// theta <- theta - lr * M_hat / (sqrt(V_hat) + eps), eps outside the root.
inline void adam_step(std::span<double> params, std::span<const double> grads, double lr, AdamState& state) {
  detail::check_step_inputs(params, grads, lr, state.m.size());
  detail::require(state.v.size() == state.m.size(), "shape mismatch: adam moment buffers differ");
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

inline void optimizer_step(std::span<double> params, std::span<const double> grads, double lr, OptimizerState& state) {
  std::visit(
      [&](auto& s) {
        if constexpr (std::is_same_v<std::decay_t<decltype(s)>, SgdState>) {
          sgd_step(params, grads, lr, s);
        } else {
          adam_step(params, grads, lr, s);
        }
      },
      state);
}

inline Json optimizer_to_json(const OptimizerSpec& s) {
  if (s.kind == OptimizerSpec::Kind::Sgd) return {{"kind", "sgd"}, {"momentum", s.momentum}};
  return {{"kind", "adam"}, {"beta1", s.beta1}, {"beta2", s.beta2}, {"eps", s.eps}};
}

inline OptimizerSpec optimizer_from_json(const Json& j, const std::string& context = "optimizer") {
  detail::ParamReader r(j, context);
  OptimizerSpec s;
  const std::string kind = r.string("kind");
  if (kind == "sgd") {
    s.kind = OptimizerSpec::Kind::Sgd;
    s.momentum = r.number("momentum", 0.0);
  } else if (kind == "adam") {
    s.kind = OptimizerSpec::Kind::Adam;
    s.beta1 = r.number("beta1", s.beta1);
    s.beta2 = r.number("beta2", s.beta2);
    s.eps = r.number("eps", s.eps);
  } else {
    detail::fail(context + ".kind must be \"sgd\" or \"adam\"");
  }
  r.finish();
  validate(s);
  return s;
}

}  // namespace lrforge
