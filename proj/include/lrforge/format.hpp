#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <system_error>

namespace lrforge {

/// Shortest round-trip decimal form of a double, locale independent.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) return "nan";
  return std::string(buf, ptr);
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, digits);
  if (ec != std::errc{}) return "nan";
  return std::string(buf, ptr);
}

}  // namespace lrforge
