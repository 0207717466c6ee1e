#pragma once

#include <cstdint>
#include <functional>
#include <limits>

namespace pagedkv {

// Opaque caller-chosen sequence identifier.
enum class SeqId : std::uint64_t {};

constexpr std::uint64_t to_underlying(SeqId id) {
  return static_cast<std::uint64_t>(id);
}

// Physical page index. Block-table entries are 32-bit.
using PageId = std::uint32_t;

inline constexpr PageId kInvalidPage = std::numeric_limits<PageId>::max();

}  // namespace pagedkv
