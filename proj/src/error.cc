#include "pagedkv/error.h"

namespace pagedkv {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kCapacityExhausted:
      return "CapacityExhausted";
    case ErrorCode::kDuplicateSequence:
      return "DuplicateSequence";
    case ErrorCode::kUnknownSequence:
      return "UnknownSequence";
    case ErrorCode::kInvalidPrefix:
      return "InvalidPrefix";
    case ErrorCode::kOutOfRange:
      return "OutOfRange";
    case ErrorCode::kShapeMismatch:
      return "ShapeMismatch";
    case ErrorCode::kNoAllowedKeys:
      return "NoAllowedKeys";
    case ErrorCode::kInvalidTrace:
      return "InvalidTrace";
    case ErrorCode::kInvalidConfig:
      return "InvalidConfig";
    case ErrorCode::kInternal:
      return "Internal";
  }
  return "Unknown";
}

}  // namespace pagedkv
