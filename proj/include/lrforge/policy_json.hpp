#pragma once

// JSON form of a PolicySpec: {"family": "<NAME>", "params": {...}}.

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrforge/error.hpp"
#include "lrforge/schedule.hpp"

namespace lrforge {

using Json = nlohmann::json;

namespace detail {

/// Strict reader over a JSON object: typed accessors, and a final check that
/// rejects keys nobody asked for.
class ParamReader {
 public:
  ParamReader(const Json& obj, std::string context) : obj_(obj), ctx_(std::move(context)) {
    if (!obj_.is_object()) fail(ctx_ + " must be a JSON object");
  }

  bool has(const std::string& key) const { return obj_.contains(key) && !obj_.at(key).is_null(); }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    if (!obj_.contains(key)) fail(ctx_ + "." + key + " is required");
    return obj_.at(key);
  }

  double number(const std::string& key) {
    const Json& v = raw(key);
    if (!v.is_number()) fail(ctx_ + "." + key + " must be a number");
    return v.get<double>();
  }
  double number(const std::string& key, double fallback) { return has(key) ? number(key) : (seen_.insert(key), fallback); }

  std::int64_t integer(const std::string& key) {
    const Json& v = raw(key);
    if (v.is_number_integer()) return v.get<std::int64_t>();
    if (v.is_number_float()) {
      const double d = v.get<double>();
      if (std::isfinite(d) && d == std::floor(d) && std::abs(d) < 9.0e15) return static_cast<std::int64_t>(d);
    }
    fail(ctx_ + "." + key + " must be an integer");
  }
  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    return has(key) ? integer(key) : (seen_.insert(key), fallback);
  }

  std::string string(const std::string& key) {
    const Json& v = raw(key);
    if (!v.is_string()) fail(ctx_ + "." + key + " must be a string");
    return v.get<std::string>();
  }
  std::string string(const std::string& key, std::string fallback) {
    return has(key) ? string(key) : (seen_.insert(key), std::move(fallback));
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) {
      seen_.insert(key);
      return fallback;
    }
    const Json& v = raw(key);
    if (!v.is_boolean()) fail(ctx_ + "." + key + " must be a boolean");
    return v.get<bool>();
  }

  std::vector<double> numbers(const std::string& key) {
    const Json& v = raw(key);
    if (!v.is_array()) fail(ctx_ + "." + key + " must be an array");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) fail(ctx_ + "." + key + " must contain numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::vector<std::int64_t> integers(const std::string& key) {
    const Json& v = raw(key);
    if (!v.is_array()) fail(ctx_ + "." + key + " must be an array");
    std::vector<std::int64_t> out;
    for (const auto& e : v) {
      if (!e.is_number_integer()) fail(ctx_ + "." + key + " must contain integers");
      out.push_back(e.get<std::int64_t>());
    }
    return out;
  }

  const std::string& context() const { return ctx_; }

  void ignore(const std::string& key) { seen_.insert(key); }

  void finish() const {
    for (const auto& [key, _] : obj_.items()) {
      if (!seen_.contains(key)) fail(ctx_ + "." + key + " is not a recognized field");
    }
  }

 private:
  const Json& obj_;
  std::string ctx_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Json policy_to_json(const PolicySpec& spec) {
  Json params = Json::object();
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, policy::Fix>) {
          params = {{"k", p.k}};
        } else if constexpr (std::is_same_v<P, policy::Step> || std::is_same_v<P, policy::Exp>) {
          params = {{"k", p.k}, {"gamma", p.gamma}, {"l", p.l}};
        } else if constexpr (std::is_same_v<P, policy::NStep>) {
          params = {{"k", p.k}, {"gamma", p.gamma}, {"milestones", p.milestones}};
        } else if constexpr (std::is_same_v<P, policy::Poly>) {
          params = {{"k", p.k}, {"p", p.p}, {"t_max", p.t_max}};
        } else if constexpr (std::is_same_v<P, policy::TriExp> || std::is_same_v<P, policy::SinExp>) {
          params = {{"k0", p.k0}, {"k1", p.k1}, {"l", p.l}, {"gamma", p.gamma}};
        } else if constexpr (requires { p.k0; }) {
          params = {{"k0", p.k0}, {"k1", p.k1}, {"l", p.l}};
        } else if constexpr (std::is_same_v<P, policy::CosineDecay> || std::is_same_v<P, policy::LinearDecay>) {
          params = {{"k", p.k}, {"t_max", p.t_max}, {"k_min", p.k_min}};
        } else if constexpr (std::is_same_v<P, policy::Warmup>) {
          params = {{"warmup", p.warmup}, {"horizon", p.horizon}};
          if (p.inner) {
            params["inner"] = policy_to_json(**p.inner);
          } else {
            params["k"] = p.k;
          }
        } else if constexpr (std::is_same_v<P, policy::Composite>) {
          Json segs = Json::array();
          for (const auto& s : p.segments) {
            segs.push_back({{"start", s.start}, {"end", s.end}, {"policy", policy_to_json(*s.policy)}});
          }
          params = {{"segments", segs}};
        }
      },
      spec.family);
  return {{"family", std::string(family_name(spec))}, {"params", params}};
}

/// Parses without validating invariants; wrap in Schedule to validate.
inline PolicySpec policy_from_json(const Json& j, const std::string& context = "policy") {
  detail::ParamReader top(j, context);
  const std::string family = top.string("family");
  const Json empty = Json::object();
  const Json& pj = top.has("params") ? top.raw("params") : empty;
  top.ignore("params");
  top.finish();
  detail::ParamReader r(pj, context + ".params");

  auto cyclic = [&]<typename P>(P p) {
    p.k0 = r.number("k0");
    p.k1 = r.number("k1");
    p.l = r.integer("l");
    if constexpr (requires { p.gamma; }) p.gamma = r.number("gamma");
    return PolicySpec{p};
  };

  PolicySpec out;
  if (family == "FIX") {
    out = policy::Fix{r.number("k")};
  } else if (family == "STEP") {
    out = policy::Step{r.number("k"), r.number("gamma"), r.integer("l", 1)};
  } else if (family == "NSTEP") {
    out = policy::NStep{r.number("k"), r.number("gamma"), r.integers("milestones")};
  } else if (family == "EXP") {
    out = policy::Exp{r.number("k"), r.number("gamma"), r.integer("l", 1)};
  } else if (family == "POLY") {
    out = policy::Poly{r.number("k"), r.number("p"), r.integer("t_max")};
  } else if (family == "TRI") {
    out = cyclic(policy::Tri{});
  } else if (family == "TRI2") {
    out = cyclic(policy::Tri2{});
  } else if (family == "TRIEXP") {
    out = cyclic(policy::TriExp{});
  } else if (family == "SIN") {
    out = cyclic(policy::Sin{});
  } else if (family == "SIN2") {
    out = cyclic(policy::Sin2{});
  } else if (family == "SINEXP") {
    out = cyclic(policy::SinExp{});
  } else if (family == "COSINE") {
    out = policy::CosineDecay{r.number("k"), r.integer("t_max"), r.number("k_min", 0.0)};
  } else if (family == "LINEAR") {
    out = policy::LinearDecay{r.number("k"), r.integer("t_max"), r.number("k_min", 0.0)};
  } else if (family == "WARMUP") {
    policy::Warmup w;
    w.warmup = r.number("warmup");
    w.horizon = r.integer("horizon", 0);
    if (r.has("inner")) {
      w.inner = policy_from_json(r.raw("inner"), r.context() + ".inner");
    } else {
      w.k = r.number("k");
    }
    out = std::move(w);
  } else if (family == "MULTI") {
    const Json& segs = r.raw("segments");
    if (!segs.is_array()) detail::fail(r.context() + ".segments must be an array");
    policy::Composite c;
    for (std::size_t i = 0; i < segs.size(); ++i) {
      detail::ParamReader s(segs[i], r.context() + ".segments[" + std::to_string(i) + "]");
      const auto start = s.integer("start");
      const auto end = s.integer("end");
      PolicySpec inner = policy_from_json(s.raw("policy"), s.context() + ".policy");
      s.finish();
      c.segments.push_back({start, end, std::move(inner)});
    }
    out = std::move(c);
  } else {
    detail::fail(context + ".family: unknown family \"" + family + "\"");
  }
  r.finish();
  return out;
}

/// Canonical serialized form (sorted keys); used for keys and tie-breaks.
inline std::string policy_key(const PolicySpec& spec) { return policy_to_json(spec).dump(); }

}  // namespace lrforge
