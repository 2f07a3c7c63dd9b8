#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace xspec {

// Error taxonomy mirrored by the CLI exit codes: usage -> 1, io -> 2,
// numeric -> 3. LogicError covers contract violations inside the library.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class LogicError : public std::logic_error {
 public:
  explicit LogicError(const std::string& msg) : std::logic_error(msg) {}
};

namespace detail {
template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

}  // namespace xspec

#define XSPEC_CHECK(cond, ...)                                          \
  do {                                                                  \
    if (!(cond))                                                        \
      throw ::xspec::LogicError(::xspec::detail::format_msg(__VA_ARGS__)); \
  } while (0)

#define XSPEC_CHECK_IO(cond, ...)                                       \
  do {                                                                  \
    if (!(cond))                                                        \
      throw ::xspec::IoError(::xspec::detail::format_msg(__VA_ARGS__)); \
  } while (0)

#define XSPEC_CHECK_NUMERIC(cond, ...)                                  \
  do {                                                                  \
    if (!(cond))                                                        \
      throw ::xspec::NumericError(::xspec::detail::format_msg(__VA_ARGS__)); \
  } while (0)
