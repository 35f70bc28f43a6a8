#pragma once

#include <stdexcept>
#include <string>

namespace lrforge {

/// Input violates a documented invariant (bad policy, bad manifest, shape
/// mismatch). The CLI maps this to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Filesystem or storage failure. The CLI maps this to exit code 3.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A database append collided with an existing record of the same key.
class KeyConflictError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every trial of a sweep diverged, so there is nothing to recommend. The CLI
/// maps this to exit code 4.
class AllDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void fail(const std::string& msg) { throw ValidationError(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

}  // namespace detail
}  // namespace lrforge
