#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <vector>

#include "pagedkv/page_manager.h"

namespace pagedkv::testing {

// Arranges the free stack so that the next acquisitions return `order`
// (front first). Every pool page is bumped; pages not in `order` stay live
// under scratch sequences.
inline void arrange_free_stack(PageManager& manager,
                               const std::vector<PageId>& order) {
  constexpr std::uint64_t kScratch = 1ULL << 40;
  const std::uint64_t pages = manager.pool().capacity_pages();
  for (std::uint64_t i = 0; i < pages; ++i) {
    manager.reserve(SeqId{kScratch + i}, manager.page_size());
  }
  // Single-page scratch sequences were granted page ids 0, 1, 2, ... in order.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    manager.free(SeqId{kScratch + *it});
  }
}

inline std::vector<float> random_floats(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> out(n);
  for (float& v : out) v = dist(rng);
  return out;
}

inline bool bit_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

inline std::vector<std::size_t> iota_positions(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(i);
  return out;
}

}  // namespace pagedkv::testing
