#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "pagedkv/types.h"

namespace pagedkv {

// Physical location of one token slot.
struct PageAddress {
  PageId page_id = kInvalidPage;
  std::uint32_t offset = 0;

  std::uint64_t flat_index(std::uint32_t page_size) const {
    return static_cast<std::uint64_t>(page_id) * page_size + offset;
  }

  friend bool operator==(const PageAddress&, const PageAddress&) = default;
};

// Per-sequence map from logical block index to physical page.
struct BlockTable {
  SeqId seq_id{};
  std::vector<PageId> entries;
  // Tokens written so far. Reserve/grow only provision capacity.
  std::size_t logical_len = 0;

  std::size_t capacity(std::uint32_t page_size) const {
    return entries.size() * page_size;
  }
};

// Snapshot of page states. Exact only while no operation is in flight.
struct PoolCensus {
  std::uint64_t capacity_pages = 0;
  std::uint64_t live_pages = 0;
  std::uint64_t free_pages = 0;
  std::uint64_t never_allocated = 0;

  bool conserved() const {
    return live_pages + free_pages + never_allocated == capacity_pages;
  }
};

// Fixed-size page allocator: a bump cursor over never-used pages backed by a
// lock-free LIFO stack of reclaimed pages, with per-page reference counts.
// No operation takes a lock.
class PagePool {
 public:
  PagePool(std::uint64_t capacity_pages, std::uint32_t page_size);

  PagePool(const PagePool&) = delete;
  PagePool& operator=(const PagePool&) = delete;

  std::uint32_t page_size() const { return page_size_; }
  std::uint32_t page_shift() const { return page_shift_; }
  std::uint64_t capacity_pages() const { return capacity_; }

  // Appends `count` pages with refcount 1 to `out`. Either all pages are
  // granted or the pool is left as it was and false is returned.
  bool try_acquire(std::size_t count, std::vector<PageId>& out);

  void retain(PageId page);
  // Drops one reference; returns true when the page went back to the free
  // stack. Releasing an unreferenced page throws.
  bool release(PageId page);

  std::uint32_t refcount(PageId page) const;
  std::uint64_t bump_cursor() const {
    return bump_.load(std::memory_order_acquire);
  }
  // Free stack plus never-allocated pages. Approximate under concurrency.
  std::uint64_t available() const;
  std::uint64_t live_pages() const;

  // Walks every page and the free stack. Throws kInternal if a page is in
  // more than one state or the free stack holds duplicates.
  PoolCensus census() const;
  // Free stack from top to bottom.
  std::vector<PageId> free_stack() const;

 private:
  static constexpr std::uint64_t kEmptyHead = kInvalidPage;

  bool pop_free(PageId& page);
  void push_free(PageId page);

  std::uint64_t capacity_;
  std::uint32_t page_size_;
  std::uint32_t page_shift_;

  std::unique_ptr<std::atomic<std::uint32_t>[]> refcounts_;
  std::unique_ptr<std::atomic<PageId>[]> next_free_;

  // Low 32 bits: top page id; high 32 bits: ABA tag.
  alignas(64) std::atomic<std::uint64_t> free_head_{kEmptyHead};
  alignas(64) std::atomic<std::uint64_t> bump_{0};
  alignas(64) std::atomic<std::int64_t> free_count_{0};
};

// Copies the first `slots` token rows of page `src` into page `dst`.
using PageCopyFn =
    std::function<void(PageId src, PageId dst, std::uint32_t slots)>;

// Owns the page pool and every sequence's block table.
//
// Allocation state is lock-free. The table directory is split into shards,
// each guarded by its own mutex that is held only for lookup, insertion and
// removal. A block table belongs to one worker at a time: callers must not
// operate on the same sequence from two threads concurrently.
class PageManager {
 public:
  PageManager(std::uint64_t capacity_pages, std::uint32_t page_size);

  PagePool& pool() { return pool_; }
  const PagePool& pool() const { return pool_; }
  std::uint32_t page_size() const { return pool_.page_size(); }

  // Installed by the KV store so fork and copy-on-write move token data.
  // Without a copier only the page bookkeeping happens.
  void set_page_copier(PageCopyFn copier) { copier_ = std::move(copier); }

  std::vector<PageId> reserve(SeqId seq, std::size_t len);
  std::vector<PageId> grow(SeqId seq, std::size_t new_len);
  std::size_t free(SeqId seq);
  const BlockTable& fork(SeqId parent, SeqId child, std::size_t prefix_len);
  PageAddress translate(SeqId seq, std::size_t position) const;

  // Returns the page backing `block`, first replacing it by a private copy
  // when it is shared with another sequence.
  PageId prepare_write(SeqId seq, std::size_t block);
  // Same for several blocks at once; all private copies are acquired up
  // front, so on CapacityExhausted nothing has changed. Returns the backing
  // page of each requested block.
  std::vector<PageId> prepare_writes(SeqId seq, std::span<const std::size_t> blocks);
  // Raises logical_len to at least `len` (never lowers it).
  void mark_written(SeqId seq, std::size_t len);

  const BlockTable& table(SeqId seq) const;
  bool contains(SeqId seq) const;
  std::size_t sequence_count() const;
  std::vector<SeqId> sequences() const;

  // Pool census plus cross-checks against the tables: every entry is live,
  // refcounts equal the number of referencing entries, and live pages equal
  // the distinct pages referenced. Throws kInternal on any violation.
  PoolCensus check_invariants() const;

  nlohmann::json dump() const;

  // Fault injection for verification tooling.
  void debug_overwrite_entry(SeqId seq, std::size_t block, PageId page);

 private:
  static constexpr std::size_t kShardCount = 64;

  struct Shard {
    mutable std::mutex mu;
    std::unordered_map<SeqId, BlockTable> tables;
  };

  Shard& shard_for(SeqId seq) const;
  BlockTable& mutable_table(SeqId seq);
  std::size_t pages_for(std::size_t len) const;
  void acquire_or_throw(std::size_t count, std::vector<PageId>& out,
                        const char* what);

  PagePool pool_;
  PageCopyFn copier_;
  std::unique_ptr<Shard[]> shards_;
};

}  // namespace pagedkv
