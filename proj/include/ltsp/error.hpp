#pragma once

#include <stdexcept>
#include <string>

namespace ltsp {

// Error categories double as CLI exit codes.
enum class ErrorCategory : int {
  config = 1,
  io = 2,
  shape = 3,
  numeric = 4,
};

inline const char* to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::numeric: return "numeric";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, std::string code, const std::string& message)
      : std::runtime_error(message), category_(category), code_(std::move(code)) {}

  ErrorCategory category() const { return category_; }
  const std::string& code() const { return code_; }

  // Single-line machine-readable form used by the CLI on stderr.
  std::string oneline() const {
    return std::string("error category=") + to_string(category_) + " code=" + code_ +
           " msg=\"" + what() + "\"";
  }

 private:
  ErrorCategory category_;
  std::string code_;
};

[[noreturn]] inline void raise(ErrorCategory category, const char* code, const std::string& message) {
  throw Error(category, code, message);
}

inline void require(bool ok, ErrorCategory category, const char* code, const std::string& message) {
  if (!ok) raise(category, code, message);
}

}  // namespace ltsp
