#pragma once

// Shared driver for the schedule-versus-reference comparison.

#include <cmath>
#include <cstdint>
#include <string>

#include "lrforge/rng.hpp"
#include "lrforge/schedule.hpp"
#include "policy_gen.hpp"
#include "schedule_reference.hpp"

namespace lrforge::testgen {

struct OracleReport {
  std::string family;
  std::int64_t samples = 0;
  double max_rel_error = 0.0;
};

/// Compares eval against the binary128 reference at `samples` random t,
/// drawing a fresh random policy of the family every `per_policy` samples.
inline OracleReport compare_with_reference(int family, std::int64_t samples, std::uint64_t seed,
                                           int per_policy = 50) {
  Rng rng(seed);
  OracleReport report;
  std::int64_t done = 0;
  while (done < samples) {
    const PolicySpec spec = random_policy(rng, family);
    const Schedule schedule(spec);
    report.family = std::string(family_name(spec));
    for (int i = 0; i < per_policy && done < samples; ++i, ++done) {
      const Iteration t = random_t(rng, spec);
      const double got = schedule(t);
      const auto want = reference::eval(spec, t);
      const auto diff = fabsq(static_cast<reference::quad>(got) - want);
      double rel;
      if (want == 0) {
        rel = got == 0.0 ? 0.0 : INFINITY;
      } else {
        rel = static_cast<double>(diff / fabsq(want));
      }
      if (rel > report.max_rel_error) report.max_rel_error = rel;
    }
  }
  report.samples = done;
  return report;
}

}  // namespace lrforge::testgen
