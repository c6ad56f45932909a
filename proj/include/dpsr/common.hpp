#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dpsr {

// Failure categories. The CLI maps each one to a distinct exit status.
enum class ErrorKind {
  kInvalidArgument,
  kNotFound,
  kHashMismatch,
  kDimensionMismatch,
  kCorrupt,
  kVersionMismatch,
  kNumeric,
  kParse,
  kUnavailable,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kNotFound: return "not_found";
    case ErrorKind::kHashMismatch: return "hash_mismatch";
    case ErrorKind::kDimensionMismatch: return "dimension_mismatch";
    case ErrorKind::kCorrupt: return "corrupt";
    case ErrorKind::kVersionMismatch: return "version_mismatch";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kUnavailable: return "unavailable";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace dpsr
