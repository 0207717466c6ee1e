#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pagedkv/paged_attention.h"

namespace pagedkv {

struct QueryRef {
  std::uint32_t sequence = 0;   // index into `lengths`
  std::uint64_t position = 0;   // absolute position inside that sequence
};

// Dense softmax(Q K^T * scale) V over contiguous per-sequence K/V, with 64-bit
// accumulation. `keys`/`values` concatenate the sequences in order, one row
// of head_count * head_dim values per token. Same mask semantics as
// mask_allow. Used as the oracle for paged_attention.
std::vector<double> reference_attention(std::span<const float> queries,
                                        std::span<const QueryRef> query_refs,
                                        std::span<const float> keys,
                                        std::span<const float> values,
                                        std::span<const std::uint64_t> lengths,
                                        const AttentionConfig& config);

}  // namespace pagedkv
