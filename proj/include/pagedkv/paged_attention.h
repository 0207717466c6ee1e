#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pagedkv/kv_cache.h"
#include "pagedkv/kv_store.h"
#include "pagedkv/types.h"

namespace pagedkv {

struct AttentionConfig {
  std::uint32_t head_count = 1;
  std::uint32_t head_dim = 1;
  // Non-positive means 1/sqrt(head_dim).
  float scale = 0.0f;
  bool causal = true;
  std::uint32_t page_size = 64;

  float effective_scale() const;
  std::size_t row_width() const {
    return static_cast<std::size_t>(head_count) * head_dim;
  }
  void validate() const;
};

// Mask inputs: the flattened KV batch plus, for every query row, the batch
// sequence it belongs to and its absolute position inside that sequence.
struct MaskMeta {
  BatchView kv;
  std::vector<std::uint32_t> query_sequence;
  std::vector<std::uint64_t> query_positions;
  bool causal = true;

  std::size_t query_count() const { return query_sequence.size(); }
  void validate() const;
};

// One query per sequence at its last position, e.g. a decode step.
MaskMeta make_decode_meta(BatchView kv, bool causal = true);
// Every KV slot is also a query (jagged prefill).
MaskMeta make_prefill_meta(BatchView kv, bool causal = true);

// allow <=> same sequence, key inside that sequence's valid length, and (when
// causal) key position not after the query position. Indices are flat.
bool mask_allow(std::size_t q_index, std::size_t k_index, const MaskMeta& meta);

enum class BlockKind : std::uint8_t { kEmpty, kPartial, kFull };

// Classification of every (query block, kv block) pair; blocks are page_size
// wide on both flat axes.
class BlockMask {
 public:
  BlockMask() = default;
  BlockMask(std::size_t query_blocks, std::size_t kv_blocks,
            std::uint32_t block_size);

  std::size_t query_blocks() const { return query_blocks_; }
  std::size_t kv_blocks() const { return kv_blocks_; }
  std::uint32_t block_size() const { return block_size_; }

  BlockKind at(std::size_t query_block, std::size_t kv_block) const {
    return kinds_[query_block * kv_blocks_ + kv_block];
  }
  void set(std::size_t query_block, std::size_t kv_block, BlockKind kind) {
    kinds_[query_block * kv_blocks_ + kv_block] = kind;
  }

  std::size_t count(BlockKind kind) const;

 private:
  std::size_t query_blocks_ = 0;
  std::size_t kv_blocks_ = 0;
  std::uint32_t block_size_ = 1;
  std::vector<BlockKind> kinds_;
};

BlockMask build_block_mask(const MaskMeta& meta, const AttentionConfig& config);

// Per-query instrumentation.
struct AttentionStats {
  std::vector<std::uint64_t> flops;           // 4 * head_dim * heads per key
  std::vector<std::uint32_t> visited_blocks;  // kv blocks actually scanned
  std::vector<std::uint64_t> allowed_keys;
  // Sum of the final softmax weights, per (query, head). Filled only when
  // `record_softmax_mass` is set, at the cost of a second pass.
  std::vector<double> softmax_mass;
  bool record_softmax_mass = false;

  std::uint64_t total_flops() const;
};

enum class BlockSkipping {
  kSkipEmpty,
  // Scans EMPTY blocks too, applying the mask per pair.
  kVisitAll,
};

struct AttentionOptions {
  const BlockMask* mask = nullptr;  // built on the fly when null
  BlockSkipping skipping = BlockSkipping::kSkipEmpty;
  AttentionStats* stats = nullptr;
};

// Exact attention over paged K/V. `tables[i]` holds the block-table entries
// of batch sequence i. `queries` has one row of head_count * head_dim values
// per query. Softmax is streamed block by block with running-max
// renormalization; keys are reduced in ascending logical order.
std::vector<float> paged_attention(std::span<const float> queries,
                                   const KvStore& store, std::uint32_t layer,
                                   std::span<const std::span<const PageId>> tables,
                                   const MaskMeta& meta,
                                   const AttentionConfig& config,
                                   const AttentionOptions& options = {});

// Convenience wrapper resolving block tables from the cache.
std::vector<float> paged_attention(std::span<const float> queries,
                                   const KvCache& cache, std::uint32_t layer,
                                   const MaskMeta& meta,
                                   const AttentionConfig& config,
                                   const AttentionOptions& options = {});

}  // namespace pagedkv
