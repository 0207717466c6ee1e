#pragma once

namespace pagedkv {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace pagedkv
