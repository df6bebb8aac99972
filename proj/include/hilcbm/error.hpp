#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hilcbm {

enum class ErrorKind {
  invalid_argument,
  shape_mismatch,
  size_mismatch,
  out_of_range,
  io,
  format,
  version,
  missing_blob,
  non_finite,
  zero_variance,
  divergence,
  incomplete_model,
  not_found,
  conflict,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::shape_mismatch: return "shape_mismatch";
    case ErrorKind::size_mismatch: return "size_mismatch";
    case ErrorKind::out_of_range: return "out_of_range";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::version: return "version";
    case ErrorKind::missing_blob: return "missing_blob";
    case ErrorKind::non_finite: return "non_finite";
    case ErrorKind::zero_variance: return "zero_variance";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::incomplete_model: return "incomplete_model";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::conflict: return "conflict";
  }
  return "unknown";
}

/// Every failure raised by the library. `kind()` lets callers tell the
/// corruption classes apart without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        message_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorKind kind_;
  std::string message_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace hilcbm
