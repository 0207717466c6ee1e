#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "pagedkv/kv_store.h"
#include "pagedkv/page_manager.h"
#include "pagedkv/types.h"

namespace pagedkv {

// Flattened jagged batch: sequences laid end to end in the given order.
struct BatchView {
  std::vector<SeqId> sequences;
  // Exclusive prefix sum of `lengths`; first flat slot of each sequence.
  std::vector<std::uint64_t> prefix_sums;
  std::vector<std::uint64_t> lengths;
  // Owning sequence of every flat slot.
  std::vector<SeqId> slot_seq_ids;

  std::uint64_t total_slots() const { return slot_seq_ids.size(); }

  // Throws kShapeMismatch unless the four vectors describe the same layout.
  void validate() const;
};

// Builds a view without consulting any cache (lengths taken as given).
BatchView make_batch_view(std::span<const SeqId> sequences,
                          std::span<const std::uint64_t> lengths);

// Row-major block of `rows` x `row_width` values.
struct KvRows {
  std::size_t rows = 0;
  std::size_t row_width = 0;
  std::vector<float> keys;
  std::vector<float> values;
};

// Token-level access to the paged cache: writes go through the block table
// (with copy-on-write on shared pages), reads return logical order.
class KvCache {
 public:
  // Installs the store's page copier on `manager`. Both must outlive this.
  KvCache(PageManager& manager, KvStore& store);

  KvCache(const KvCache&) = delete;
  KvCache& operator=(const KvCache&) = delete;

  PageManager& manager() { return manager_; }
  const PageManager& manager() const { return manager_; }
  const KvStore& store() const { return store_; }

  // `keys`/`values` hold one row per position. Positions beyond the reserved
  // capacity throw kOutOfRange; grow first. Overwrites are allowed.
  void assign(SeqId seq, std::span<const std::size_t> positions,
              std::span<const float> keys, std::span<const float> values,
              std::uint32_t layer = 0);

  KvRows gather(SeqId seq, std::size_t len, std::uint32_t layer = 0) const;

  BatchView build_batch_view(std::span<const SeqId> sequences,
                             std::span<const std::uint64_t> lengths) const;

  nlohmann::json dump_sequence(SeqId seq, std::uint32_t layer = 0) const;

 private:
  PageManager& manager_;
  KvStore& store_;
};

}  // namespace pagedkv
