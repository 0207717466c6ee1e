#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pagedkv {

enum class ErrorCode {
  kCapacityExhausted,
  kDuplicateSequence,
  kUnknownSequence,
  kInvalidPrefix,
  kOutOfRange,
  kShapeMismatch,
  kNoAllowedKeys,
  kInvalidTrace,
  kInvalidConfig,
  kInternal,
};

std::string_view to_string(ErrorCode code);

// All recoverable failures surface as this exception; `code()` identifies the
// contract that was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace pagedkv
