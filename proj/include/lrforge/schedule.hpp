#pragma once

// Formula-based learning-rate policies.
//
// A PolicySpec is a plain description of one policy family and its
// parameters. Wrapping it in a Schedule validates it once; evaluation is then
// a pure function of the iteration index. Time is always measured in
// iterations; callers that think in epochs convert before building a spec.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "lrforge/error.hpp"
#include "lrforge/format.hpp"

namespace lrforge {

using Iteration = std::int64_t;

/// Raised when a horizon-bound policy is asked for t beyond its t_max.
class HorizonError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Heap-allocated value with deep-copy semantics. Lets PolicySpec nest itself.
template <typename T>
class Box {
 public:
  template <typename U>
    requires(!std::is_same_v<std::remove_cvref_t<U>, Box>) && std::is_constructible_v<T, U&&>
  Box(U&& value) : ptr_(std::make_unique<T>(std::forward<U>(value))) {}  // NOLINT(google-explicit-constructor)
  Box(const Box& other) : ptr_(std::make_unique<T>(*other.ptr_)) {}
  Box(Box&&) noexcept = default;
  Box& operator=(const Box& other) {
    if (this != &other) ptr_ = std::make_unique<T>(*other.ptr_);
    return *this;
  }
  Box& operator=(Box&&) noexcept = default;
  ~Box() = default;

  const T& operator*() const { return *ptr_; }
  const T* operator->() const { return ptr_.get(); }
  T& operator*() { return *ptr_; }
  T* operator->() { return ptr_.get(); }

  friend bool operator==(const Box& a, const Box& b) { return *a == *b; }

 private:
  std::unique_ptr<T> ptr_;
};

struct PolicySpec;

namespace policy {

struct Fix {
  double k = 0.0;
  friend bool operator==(const Fix&, const Fix&) = default;
};

/// k * gamma^floor(t / l)
struct Step {
  double k = 0.0;
  double gamma = 1.0;
  Iteration l = 1;
  friend bool operator==(const Step&, const Step&) = default;
};

/// k * gamma^(number of milestones <= t)
struct NStep {
  double k = 0.0;
  double gamma = 1.0;
  std::vector<Iteration> milestones;
  friend bool operator==(const NStep&, const NStep&) = default;
};

/// k * gamma^(t / l), real-valued exponent.
struct Exp {
  double k = 0.0;
  double gamma = 1.0;
  Iteration l = 1;
  friend bool operator==(const Exp&, const Exp&) = default;
};

/// k * (1 - t / t_max)^p
struct Poly {
  double k = 0.0;
  double p = 1.0;
  Iteration t_max = 1;
  friend bool operator==(const Poly&, const Poly&) = default;
};

// Cyclic families oscillate between k0 and k1 with half-cycle length l.
struct Tri {
  double k0 = 0.0;
  double k1 = 0.0;
  Iteration l = 1;
  friend bool operator==(const Tri&, const Tri&) = default;
};
struct Tri2 {
  double k0 = 0.0;
  double k1 = 0.0;
  Iteration l = 1;
  friend bool operator==(const Tri2&, const Tri2&) = default;
};
struct TriExp {
  double k0 = 0.0;
  double k1 = 0.0;
  Iteration l = 1;
  double gamma = 1.0;
  friend bool operator==(const TriExp&, const TriExp&) = default;
};
struct Sin {
  double k0 = 0.0;
  double k1 = 0.0;
  Iteration l = 1;
  friend bool operator==(const Sin&, const Sin&) = default;
};
struct Sin2 {
  double k0 = 0.0;
  double k1 = 0.0;
  Iteration l = 1;
  friend bool operator==(const Sin2&, const Sin2&) = default;
};
struct SinExp {
  double k0 = 0.0;
  double k1 = 0.0;
  Iteration l = 1;
  double gamma = 1.0;
  friend bool operator==(const SinExp&, const SinExp&) = default;
};

struct CosineDecay {
  double k = 0.0;
  Iteration t_max = 1;
  double k_min = 0.0;
  friend bool operator==(const CosineDecay&, const CosineDecay&) = default;
};

struct LinearDecay {
  double k = 0.0;
  Iteration t_max = 1;
  double k_min = 0.0;
  friend bool operator==(const LinearDecay&, const LinearDecay&) = default;
};

/// Linear ramp from 0 over the warmup length, then the inner policy (shifted
/// so it starts at its own t = 0) or a constant hold at k when there is no
/// inner policy. A warmup value below 1 is a fraction of `horizon`.
struct Warmup {
  double warmup = 0.0;
  Iteration horizon = 0;
  double k = 0.0;
  std::optional<Box<PolicySpec>> inner;
  friend bool operator==(const Warmup&, const Warmup&) = default;
};

struct Segment {
  Iteration start = 0;
  Iteration end = 0;  // exclusive
  Box<PolicySpec> policy;
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Piecewise concatenation; each segment sees segment-local time.
struct Composite {
  std::vector<Segment> segments;
  friend bool operator==(const Composite&, const Composite&) = default;
};

}  // namespace policy

struct PolicySpec {
  using Family = std::variant<policy::Fix, policy::Step, policy::NStep, policy::Exp, policy::Poly,
                              policy::Tri, policy::Tri2, policy::TriExp, policy::Sin, policy::Sin2,
                              policy::SinExp, policy::CosineDecay, policy::LinearDecay,
                              policy::Warmup, policy::Composite>;
  Family family;

  PolicySpec() : family(policy::Fix{}) {}
  template <typename F>
    requires std::is_constructible_v<Family, F&&> &&
             (!std::is_same_v<std::remove_cvref_t<F>, PolicySpec>)
  PolicySpec(F&& f) : family(std::forward<F>(f)) {}  // NOLINT(google-explicit-constructor)

  template <typename F>
  [[nodiscard]] bool is() const {
    return std::holds_alternative<F>(family);
  }
  template <typename F>
  [[nodiscard]] const F& as() const {
    return std::get<F>(family);
  }

  friend bool operator==(const PolicySpec&, const PolicySpec&) = default;
};

/// Canonical family name (FIX, STEP, ..., MULTI).
inline std::string_view family_name(const PolicySpec& spec) {
  static constexpr std::string_view names[] = {"FIX",  "STEP",   "NSTEP", "EXP",    "POLY",
                                               "TRI",  "TRI2",   "TRIEXP", "SIN",   "SIN2",
                                               "SINEXP", "COSINE", "LINEAR", "WARMUP", "MULTI"};
  static_assert(std::size(names) == std::variant_size_v<PolicySpec::Family>);
  return names[spec.family.index()];
}

/// Resolved warmup length in iterations.
inline Iteration warmup_length(const policy::Warmup& w) {
  if (w.warmup <= 0.0) return 0;
  if (w.warmup < 1.0) return static_cast<Iteration>(std::llround(w.warmup * static_cast<double>(w.horizon)));
  return static_cast<Iteration>(w.warmup);
}

/// Largest iteration a horizon-bound policy accepts; nullopt when unbounded.
inline std::optional<Iteration> policy_horizon(const PolicySpec& spec) {
  return std::visit(
      [](const auto& p) -> std::optional<Iteration> {
        using P = std::decay_t<decltype(p)>;
        if constexpr (requires { p.t_max; }) {
          return p.t_max;
        } else if constexpr (std::is_same_v<P, policy::Warmup>) {
          if (!p.inner) return std::nullopt;
          auto inner = policy_horizon(**p.inner);
          if (!inner) return std::nullopt;
          return *inner + warmup_length(p);
        } else if constexpr (std::is_same_v<P, policy::Composite>) {
          if (p.segments.empty()) return std::nullopt;
          const auto& last = p.segments.back();
          auto inner = policy_horizon(*last.policy);
          if (!inner) return std::nullopt;
          return last.start + *inner;
        } else {
          return std::nullopt;
        }
      },
      spec.family);
}

namespace detail {

inline bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }

struct Violations {
  std::string prefix;
  std::optional<std::string> error;

  void check(bool ok, const std::string& msg) {
    if (!error && !ok) error = prefix + msg;
  }
  void lr(double v, const char* name) {
    check(std::isfinite(v), std::string(name) + " is not finite");
    check(v >= 0.0, std::string(name) + " must be >= 0");
  }
  void gamma(double g) {
    check(std::isfinite(g), "gamma is not finite");
    check(g > 0.0 && g <= 1.0, "gamma must lie in (0, 1]");
  }
  void length(Iteration l, const char* name) { check(l >= 1, std::string(name) + " must be >= 1"); }
  void bounds(double k0, double k1) {
    lr(k0, "k0");
    lr(k1, "k1");
    check(k1 >= k0, "k1 < k0");
  }
};

std::optional<std::string> find_violation(const PolicySpec& spec, const std::string& prefix);

inline std::optional<std::string> find_violation(const PolicySpec& spec, const std::string& prefix) {
  Violations v{prefix + std::string(family_name(spec)) + ": ", std::nullopt};
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, policy::Fix>) {
          v.lr(p.k, "k");
        } else if constexpr (std::is_same_v<P, policy::Step> || std::is_same_v<P, policy::Exp>) {
          v.lr(p.k, "k");
          v.gamma(p.gamma);
          v.length(p.l, "l");
        } else if constexpr (std::is_same_v<P, policy::NStep>) {
          v.lr(p.k, "k");
          v.gamma(p.gamma);
          for (std::size_t i = 0; i < p.milestones.size(); ++i) {
            v.check(p.milestones[i] >= 0, "milestones must be >= 0");
            if (i > 0) v.check(p.milestones[i] > p.milestones[i - 1], "milestones must be strictly increasing");
          }
        } else if constexpr (std::is_same_v<P, policy::Poly>) {
          v.lr(p.k, "k");
          v.check(std::isfinite(p.p) && p.p > 0.0, "p must be > 0");
          v.length(p.t_max, "t_max");
        } else if constexpr (std::is_same_v<P, policy::Tri> || std::is_same_v<P, policy::Tri2> ||
                             std::is_same_v<P, policy::Sin> || std::is_same_v<P, policy::Sin2>) {
          v.bounds(p.k0, p.k1);
          v.length(p.l, "l");
        } else if constexpr (std::is_same_v<P, policy::TriExp> || std::is_same_v<P, policy::SinExp>) {
          v.bounds(p.k0, p.k1);
          v.length(p.l, "l");
          v.gamma(p.gamma);
        } else if constexpr (std::is_same_v<P, policy::CosineDecay> ||
                             std::is_same_v<P, policy::LinearDecay>) {
          v.lr(p.k, "k");
          v.lr(p.k_min, "k_min");
          v.check(p.k_min <= p.k, "k_min > k");
          v.length(p.t_max, "t_max");
        } else if constexpr (std::is_same_v<P, policy::Warmup>) {
          v.check(finite_nonneg(p.warmup), "warmup must be finite and >= 0");
          if (p.warmup > 0.0 && p.warmup < 1.0) {
            v.check(p.horizon >= 1, "horizon must be >= 1 when warmup is a fraction");
          } else if (p.warmup >= 1.0) {
            v.check(p.warmup == std::floor(p.warmup), "warmup >= 1 must be a whole number of iterations");
          }
          if (p.inner) {
            if (!v.error) v.error = find_violation(**p.inner, v.prefix + "inner.");
          } else {
            v.lr(p.k, "k");
          }
        } else if constexpr (std::is_same_v<P, policy::Composite>) {
          v.check(!p.segments.empty(), "segments must not be empty");
          for (std::size_t i = 0; i < p.segments.size() && !v.error; ++i) {
            const auto& s = p.segments[i];
            if (i == 0) {
              v.check(s.start == 0, "first segment must start at iteration 0");
            } else {
              const auto prev_end = p.segments[i - 1].end;
              v.check(s.start <= prev_end, "gap at iteration " + std::to_string(prev_end));
              v.check(s.start >= prev_end, "overlap at iteration " + std::to_string(s.start));
            }
            v.check(s.end > s.start, "segment " + std::to_string(i) + " is empty");
            if (!v.error) v.error = find_violation(*s.policy, v.prefix + "segments[" + std::to_string(i) + "].");
            if (i + 1 < p.segments.size()) {
              const auto h = policy_horizon(*s.policy);
              v.check(!h || s.end - s.start - 1 <= *h,
                      "segment " + std::to_string(i) + " outlasts the horizon of its policy");
            }
          }
        }
      },
      spec.family);
  return v.error;
}

}  // namespace detail

/// Returns the first invariant violation, naming the offending field, or
/// nullopt when the spec is valid.
[[nodiscard]] inline std::optional<std::string> find_violation(const PolicySpec& spec) {
  return detail::find_violation(spec, "");
}

inline void validate(const PolicySpec& spec) {
  if (auto err = find_violation(spec)) throw ValidationError(*err);
}

namespace detail {

/// Position inside a triangular cycle of half-length l, computed in integer
/// arithmetic: cycle = floor(1 + t/(2l)), ramp = max(0, 1 - |t/l - 2 cycle + 1|).
struct TrianglePhase {
  Iteration cycle;
  double ramp;
};

inline TrianglePhase triangle_phase(Iteration t, Iteration l) {
  const Iteration period = 2 * l;
  const Iteration pos = t % period;
  const Iteration dist = pos > l ? pos - l : l - pos;
  return {1 + t / period, static_cast<double>(l - dist) / static_cast<double>(l)};
}

/// |sin(pi t / (2l))| with the argument reduced to [0, pi/2] exactly.
inline double abs_sine(Iteration t, Iteration l) {
  const Iteration period = 2 * l;
  const Iteration pos = t % period;
  const Iteration d = std::min(pos, period - pos);
  return std::sin(std::numbers::pi * static_cast<double>(d) / static_cast<double>(period));
}

inline double halving(Iteration cycle) { return std::ldexp(1.0, -static_cast<int>(std::min<Iteration>(cycle - 1, 2000))); }

inline void check_horizon(Iteration t, Iteration t_max, std::string_view family) {
  if (t > t_max) {
    throw HorizonError(std::string(family) + ": t=" + std::to_string(t) + " exceeds t_max=" + std::to_string(t_max));
  }
}

inline double eval_unchecked(const PolicySpec& spec, Iteration t) {
  return std::visit(
      [t](const auto& p) -> double {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, policy::Fix>) {
          return p.k;
        } else if constexpr (std::is_same_v<P, policy::Step>) {
          return p.k * std::pow(p.gamma, static_cast<double>(t / p.l));
        } else if constexpr (std::is_same_v<P, policy::NStep>) {
          const auto passed = std::upper_bound(p.milestones.begin(), p.milestones.end(), t) - p.milestones.begin();
          return p.k * std::pow(p.gamma, static_cast<double>(passed));
        } else if constexpr (std::is_same_v<P, policy::Exp>) {
          return p.k * std::pow(p.gamma, static_cast<double>(t) / static_cast<double>(p.l));
        } else if constexpr (std::is_same_v<P, policy::Poly>) {
          check_horizon(t, p.t_max, "POLY");
          const double remaining = static_cast<double>(p.t_max - t) / static_cast<double>(p.t_max);
          return p.k * std::pow(remaining, p.p);
        } else if constexpr (std::is_same_v<P, policy::Tri>) {
          const auto ph = triangle_phase(t, p.l);
          return p.k0 + (p.k1 - p.k0) * ph.ramp;
        } else if constexpr (std::is_same_v<P, policy::Tri2>) {
          const auto ph = triangle_phase(t, p.l);
          return p.k0 + (p.k1 - p.k0) * halving(ph.cycle) * ph.ramp;
        } else if constexpr (std::is_same_v<P, policy::TriExp>) {
          const auto ph = triangle_phase(t, p.l);
          return p.k0 + (p.k1 - p.k0) * std::pow(p.gamma, static_cast<double>(t)) * ph.ramp;
        } else if constexpr (std::is_same_v<P, policy::Sin>) {
          return p.k0 + (p.k1 - p.k0) * abs_sine(t, p.l);
        } else if constexpr (std::is_same_v<P, policy::Sin2>) {
          const auto ph = triangle_phase(t, p.l);
          return p.k0 + (p.k1 - p.k0) * halving(ph.cycle) * abs_sine(t, p.l);
        } else if constexpr (std::is_same_v<P, policy::SinExp>) {
          return p.k0 + (p.k1 - p.k0) * std::pow(p.gamma, static_cast<double>(t)) * abs_sine(t, p.l);
        } else if constexpr (std::is_same_v<P, policy::CosineDecay>) {
          check_horizon(t, p.t_max, "COSINE");
          // 0.5 (1 + cos(pi t / T)) == cos^2(pi t / 2T); the sine branch keeps
          // full relative precision as t approaches T.
          const double T = static_cast<double>(p.t_max);
          const double c = 2 * t <= p.t_max ? std::cos(std::numbers::pi * static_cast<double>(t) / (2.0 * T))
                                            : std::sin(std::numbers::pi * static_cast<double>(p.t_max - t) / (2.0 * T));
          return p.k_min + (p.k - p.k_min) * (c * c);
        } else if constexpr (std::is_same_v<P, policy::LinearDecay>) {
          check_horizon(t, p.t_max, "LINEAR");
          return p.k_min + (p.k - p.k_min) * (static_cast<double>(p.t_max - t) / static_cast<double>(p.t_max));
        } else if constexpr (std::is_same_v<P, policy::Warmup>) {
          const Iteration w = warmup_length(p);
          if (t < w) {
            const double target = p.inner ? eval_unchecked(**p.inner, 0) : p.k;
            return static_cast<double>(t) * target / static_cast<double>(w);
          }
          return p.inner ? eval_unchecked(**p.inner, t - w) : p.k;
        } else if constexpr (std::is_same_v<P, policy::Composite>) {
          // Last segment whose start <= t; t past the final end stays in it.
          auto it = std::upper_bound(p.segments.begin(), p.segments.end(), t,
                                     [](Iteration v, const policy::Segment& s) { return v < s.start; });
          const auto& seg = *std::prev(it);
          return eval_unchecked(*seg.policy, t - seg.start);
        }
      },
      spec.family);
}

}  // namespace detail

/// A validated policy. Construction throws ValidationError on bad specs, so
/// every Schedule can be evaluated without further checks.
class Schedule {
 public:
  explicit Schedule(PolicySpec spec) : spec_(std::move(spec)) { validate(spec_); }

  /// Learning rate at iteration t (t >= 0).
  double operator()(Iteration t) const {
    if (t < 0) throw ValidationError("iteration must be >= 0, got " + std::to_string(t));
    return detail::eval_unchecked(spec_, t);
  }

  [[nodiscard]] const PolicySpec& spec() const { return spec_; }

 private:
  PolicySpec spec_;
};

/// lambda * base(t). The coefficient rescales a policy without touching its
/// shape, which reduces tuning to a (policy, lambda) grid.
class ScaledSchedule {
 public:
  ScaledSchedule(double lambda, Schedule base) : lambda_(lambda), base_(std::move(base)) {
    detail::require(std::isfinite(lambda) && lambda > 0.0, "lambda must be finite and > 0");
  }

  double operator()(Iteration t) const { return lambda_ * base_(t); }

  [[nodiscard]] double lambda() const { return lambda_; }
  [[nodiscard]] const Schedule& base() const { return base_; }

 private:
  double lambda_;
  Schedule base_;
};

inline double eval(const Schedule& s, Iteration t) { return s(t); }
inline double eval(const ScaledSchedule& s, Iteration t) { return s(t); }

struct TracePoint {
  Iteration t;
  double lr;
  friend bool operator==(const TracePoint&, const TracePoint&) = default;
};

/// Samples t = 0, stride, 2*stride, ... and always ends at t_max.
template <typename Policy>
std::vector<TracePoint> sample_trace(const Policy& policy, Iteration t_max, Iteration stride) {
  detail::require(stride >= 1, "stride must be >= 1");
  detail::require(t_max >= 0, "t_max must be >= 0");
  const Iteration steps = (t_max + stride - 1) / stride;
  std::vector<TracePoint> out;
  out.reserve(static_cast<std::size_t>(steps) + 1);
  for (Iteration i = 0; i < steps; ++i) out.push_back({i * stride, eval(policy, i * stride)});
  out.push_back({t_max, eval(policy, t_max)});
  return out;
}

inline void write_trace_csv(std::ostream& os, std::span<const TracePoint> trace) {
  os << "iteration,lr\n";
  for (const auto& p : trace) os << p.t << ',' << format_double(p.lr) << '\n';
}

/// Multiplies every LR-valued parameter by lambda. For every family the
/// result evaluates to lambda times the original (up to rounding).
inline PolicySpec scale_policy(const PolicySpec& spec, double lambda) {
  PolicySpec out = spec;
  std::visit(
      [lambda](auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (requires { p.k0; }) {
          p.k0 *= lambda;
          p.k1 *= lambda;
        } else if constexpr (std::is_same_v<P, policy::Composite>) {
          for (auto& s : p.segments) *s.policy = scale_policy(*s.policy, lambda);
        } else if constexpr (std::is_same_v<P, policy::Warmup>) {
          p.k *= lambda;
          if (p.inner) **p.inner = scale_policy(**p.inner, lambda);
        } else {
          p.k *= lambda;
          if constexpr (requires { p.k_min; }) p.k_min *= lambda;
        }
      },
      out.family);
  return out;
}

}  // namespace lrforge
