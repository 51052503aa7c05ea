#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace bilevel {

// Bad configuration: missing slots/groups, invalid arguments, stale traces.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor/layout mismatch between operands, slots, cotangents or tangents.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite value produced during evaluation. `where` is the tape node or
// iteration index that produced it, -1 if not applicable.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg, long where = -1)
      : std::runtime_error(msg), where_(where) {}
  long where() const { return where_; }

 private:
  long where_;
};

// Inner iterates blew past the divergence guard. `step` is the unroll step t.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& msg, int step) : NumericError(msg, step), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

namespace detail {
template <typename... Args>
std::string strf(const char* fmt, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  return std::string(buf);
}
}  // namespace detail

}  // namespace bilevel

#define BL_CHECK_CONFIG(cond, ...) \
  do {                             \
    if (!(cond)) throw ::bilevel::ConfigError(::bilevel::detail::strf(__VA_ARGS__)); \
  } while (0)

#define BL_CHECK_SHAPE(cond, ...) \
  do {                            \
    if (!(cond)) throw ::bilevel::ShapeError(::bilevel::detail::strf(__VA_ARGS__)); \
  } while (0)
