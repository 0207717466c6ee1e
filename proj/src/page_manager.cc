#include "pagedkv/page_manager.h"

#include <algorithm>
#include <bit>
#include <string>

#include "pagedkv/error.h"

namespace pagedkv {

namespace {

constexpr std::uint64_t kIdMask = 0xffffffffULL;

constexpr std::uint64_t pack_head(std::uint64_t tag, PageId top) {
  return (tag << 32) | top;
}

std::string seq_name(SeqId seq) {
  return "sequence " + std::to_string(to_underlying(seq));
}

}  // namespace

// ---------------------------------------------------------------------------
// PagePool

PagePool::PagePool(std::uint64_t capacity_pages, std::uint32_t page_size)
    : capacity_(capacity_pages), page_size_(page_size) {
  if (page_size == 0 || !std::has_single_bit(page_size)) {
    throw Error(ErrorCode::kInvalidConfig,
                "page size must be a positive power of two, got " +
                    std::to_string(page_size));
  }
  // Page ids are 32-bit and kInvalidPage is reserved as the empty marker.
  if (capacity_pages > static_cast<std::uint64_t>(kInvalidPage)) {
    throw Error(ErrorCode::kInvalidConfig,
                "pool capacity exceeds the 32-bit page id space");
  }
  page_shift_ = static_cast<std::uint32_t>(std::countr_zero(page_size));
  refcounts_ = std::make_unique<std::atomic<std::uint32_t>[]>(capacity_);
  next_free_ = std::make_unique<std::atomic<PageId>[]>(capacity_);
  for (std::uint64_t i = 0; i < capacity_; ++i) {
    refcounts_[i].store(0, std::memory_order_relaxed);
    next_free_[i].store(kInvalidPage, std::memory_order_relaxed);
  }
}

bool PagePool::pop_free(PageId& page) {
  std::uint64_t head = free_head_.load(std::memory_order_acquire);
  for (;;) {
    const auto top = static_cast<PageId>(head & kIdMask);
    if (top == kInvalidPage) return false;
    const PageId next = next_free_[top].load(std::memory_order_relaxed);
    const std::uint64_t replacement = pack_head((head >> 32) + 1, next);
    if (free_head_.compare_exchange_weak(head, replacement,
                                         std::memory_order_acq_rel,
                                         std::memory_order_acquire)) {
      free_count_.fetch_sub(1, std::memory_order_relaxed);
      page = top;
      return true;
    }
  }
}

void PagePool::push_free(PageId page) {
  std::uint64_t head = free_head_.load(std::memory_order_relaxed);
  std::uint64_t replacement;
  do {
    next_free_[page].store(static_cast<PageId>(head & kIdMask),
                           std::memory_order_relaxed);
    replacement = pack_head((head >> 32) + 1, page);
  } while (!free_head_.compare_exchange_weak(head, replacement,
                                             std::memory_order_release,
                                             std::memory_order_relaxed));
  free_count_.fetch_add(1, std::memory_order_relaxed);
}

bool PagePool::try_acquire(std::size_t count, std::vector<PageId>& out) {
  const std::size_t base = out.size();
  std::size_t popped = 0;
  PageId page;
  while (popped < count && pop_free(page)) {
    out.push_back(page);
    ++popped;
  }

  const std::uint64_t need = count - popped;
  std::uint64_t first = 0;
  bool ok = true;
  if (need > 0) {
    first = bump_.load(std::memory_order_relaxed);
    do {
      if (first + need > capacity_) {
        ok = false;
        break;
      }
    } while (!bump_.compare_exchange_weak(first, first + need,
                                          std::memory_order_acq_rel,
                                          std::memory_order_relaxed));
  }

  if (!ok) {
    // Restore the stack in its original order.
    for (std::size_t i = out.size(); i > base; --i) push_free(out[i - 1]);
    out.resize(base);
    return false;
  }

  for (std::uint64_t i = 0; i < need; ++i) {
    out.push_back(static_cast<PageId>(first + i));
  }
  for (std::size_t i = base; i < out.size(); ++i) {
    refcounts_[out[i]].store(1, std::memory_order_release);
  }
  return true;
}

void PagePool::retain(PageId page) {
  const std::uint32_t before =
      refcounts_[page].fetch_add(1, std::memory_order_acq_rel);
  if (before == 0) {
    refcounts_[page].fetch_sub(1, std::memory_order_acq_rel);
    throw Error(ErrorCode::kInternal,
                "retain of unreferenced page " + std::to_string(page));
  }
}

bool PagePool::release(PageId page) {
  const std::uint32_t before =
      refcounts_[page].fetch_sub(1, std::memory_order_acq_rel);
  if (before == 0) {
    refcounts_[page].fetch_add(1, std::memory_order_acq_rel);
    throw Error(ErrorCode::kInternal,
                "double release of page " + std::to_string(page));
  }
  if (before == 1) {
    push_free(page);
    return true;
  }
  return false;
}

std::uint32_t PagePool::refcount(PageId page) const {
  return refcounts_[page].load(std::memory_order_acquire);
}

std::uint64_t PagePool::available() const {
  const auto free = free_count_.load(std::memory_order_relaxed);
  return static_cast<std::uint64_t>(std::max<std::int64_t>(free, 0)) +
         (capacity_ - bump_cursor());
}

std::uint64_t PagePool::live_pages() const {
  const auto free = free_count_.load(std::memory_order_relaxed);
  return bump_cursor() - static_cast<std::uint64_t>(std::max<std::int64_t>(free, 0));
}

std::vector<PageId> PagePool::free_stack() const {
  std::vector<PageId> pages;
  const std::uint64_t bump = bump_cursor();
  auto top = static_cast<PageId>(free_head_.load(std::memory_order_acquire) &
                                 kIdMask);
  while (top != kInvalidPage) {
    if (top >= bump || pages.size() > bump) {
      throw Error(ErrorCode::kInternal, "free stack is corrupt");
    }
    pages.push_back(top);
    top = next_free_[top].load(std::memory_order_relaxed);
  }
  return pages;
}

PoolCensus PagePool::census() const {
  PoolCensus census;
  census.capacity_pages = capacity_;
  const std::uint64_t bump = bump_cursor();
  census.never_allocated = capacity_ - bump;

  std::uint64_t unreferenced = 0;
  for (std::uint64_t i = 0; i < bump; ++i) {
    if (refcount(static_cast<PageId>(i)) > 0) {
      ++census.live_pages;
    } else {
      ++unreferenced;
    }
  }

  std::vector<bool> on_stack(bump, false);
  for (PageId page : free_stack()) {
    if (on_stack[page]) {
      throw Error(ErrorCode::kInternal,
                  "page " + std::to_string(page) + " is on the free stack twice");
    }
    if (refcount(page) != 0) {
      throw Error(ErrorCode::kInternal,
                  "page " + std::to_string(page) + " is free but referenced");
    }
    on_stack[page] = true;
    ++census.free_pages;
  }
  if (census.free_pages != unreferenced) {
    throw Error(ErrorCode::kInternal,
                std::to_string(unreferenced - census.free_pages) +
                    " unreferenced pages are missing from the free stack");
  }
  return census;
}

// ---------------------------------------------------------------------------
// PageManager

PageManager::PageManager(std::uint64_t capacity_pages, std::uint32_t page_size)
    : pool_(capacity_pages, page_size),
      shards_(std::make_unique<Shard[]>(kShardCount)) {}

PageManager::Shard& PageManager::shard_for(SeqId seq) const {
  const std::uint64_t mixed = to_underlying(seq) * 0x9E3779B97F4A7C15ULL;
  return shards_[mixed >> 58];
}

std::size_t PageManager::pages_for(std::size_t len) const {
  return (len + page_size() - 1) >> pool_.page_shift();
}

void PageManager::acquire_or_throw(std::size_t count, std::vector<PageId>& out,
                                   const char* what) {
  if (!pool_.try_acquire(count, out)) {
    throw Error(ErrorCode::kCapacityExhausted,
                std::string(what) + " needs " + std::to_string(count) +
                    " pages, " + std::to_string(pool_.available()) +
                    " available");
  }
}

BlockTable& PageManager::mutable_table(SeqId seq) {
  Shard& shard = shard_for(seq);
  std::lock_guard lock(shard.mu);
  auto it = shard.tables.find(seq);
  if (it == shard.tables.end()) {
    throw Error(ErrorCode::kUnknownSequence, seq_name(seq));
  }
  return it->second;
}

const BlockTable& PageManager::table(SeqId seq) const {
  Shard& shard = shard_for(seq);
  std::lock_guard lock(shard.mu);
  auto it = shard.tables.find(seq);
  if (it == shard.tables.end()) {
    throw Error(ErrorCode::kUnknownSequence, seq_name(seq));
  }
  return it->second;
}

bool PageManager::contains(SeqId seq) const {
  Shard& shard = shard_for(seq);
  std::lock_guard lock(shard.mu);
  return shard.tables.contains(seq);
}

std::size_t PageManager::sequence_count() const {
  std::size_t total = 0;
  for (std::size_t i = 0; i < kShardCount; ++i) {
    std::lock_guard lock(shards_[i].mu);
    total += shards_[i].tables.size();
  }
  return total;
}

std::vector<SeqId> PageManager::sequences() const {
  std::vector<SeqId> ids;
  for (std::size_t i = 0; i < kShardCount; ++i) {
    std::lock_guard lock(shards_[i].mu);
    for (const auto& [id, table] : shards_[i].tables) ids.push_back(id);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<PageId> PageManager::reserve(SeqId seq, std::size_t len) {
  if (contains(seq)) {
    throw Error(ErrorCode::kDuplicateSequence, seq_name(seq));
  }
  std::vector<PageId> pages;
  acquire_or_throw(pages_for(len), pages, "reserve");

  Shard& shard = shard_for(seq);
  std::unique_lock lock(shard.mu);
  auto [it, inserted] = shard.tables.try_emplace(seq);
  if (!inserted) {
    lock.unlock();
    for (PageId page : pages) pool_.release(page);
    throw Error(ErrorCode::kDuplicateSequence, seq_name(seq));
  }
  it->second.seq_id = seq;
  it->second.entries = pages;
  return pages;
}

std::vector<PageId> PageManager::grow(SeqId seq, std::size_t new_len) {
  BlockTable& table = mutable_table(seq);
  const std::size_t need = pages_for(new_len);
  std::vector<PageId> granted;
  if (need <= table.entries.size()) return granted;
  acquire_or_throw(need - table.entries.size(), granted, "grow");
  table.entries.insert(table.entries.end(), granted.begin(), granted.end());
  return granted;
}

std::size_t PageManager::free(SeqId seq) {
  Shard& shard = shard_for(seq);
  std::unordered_map<SeqId, BlockTable>::node_type node;
  {
    std::lock_guard lock(shard.mu);
    node = shard.tables.extract(seq);
  }
  if (node.empty()) {
    throw Error(ErrorCode::kUnknownSequence, seq_name(seq));
  }
  std::size_t reclaimed = 0;
  for (PageId page : node.mapped().entries) {
    if (pool_.release(page)) ++reclaimed;
  }
  return reclaimed;
}

const BlockTable& PageManager::fork(SeqId parent, SeqId child,
                                    std::size_t prefix_len) {
  const BlockTable& source = mutable_table(parent);
  if (contains(child)) {
    throw Error(ErrorCode::kDuplicateSequence, seq_name(child));
  }
  if (prefix_len > source.logical_len) {
    throw Error(ErrorCode::kInvalidPrefix,
                "prefix " + std::to_string(prefix_len) + " exceeds " +
                    std::to_string(source.logical_len) + " tokens of " +
                    seq_name(parent));
  }

  const std::size_t shared = prefix_len >> pool_.page_shift();
  const auto tail = static_cast<std::uint32_t>(prefix_len & (page_size() - 1));

  BlockTable fresh;
  fresh.seq_id = child;
  fresh.logical_len = prefix_len;
  fresh.entries.assign(source.entries.begin(),
                       source.entries.begin() + static_cast<std::ptrdiff_t>(shared));
  if (tail != 0) {
    std::vector<PageId> copy;
    acquire_or_throw(1, copy, "fork tail copy");
    if (copier_) copier_(source.entries[shared], copy.front(), tail);
    fresh.entries.push_back(copy.front());
  }
  for (std::size_t i = 0; i < shared; ++i) pool_.retain(fresh.entries[i]);

  Shard& shard = shard_for(child);
  std::unique_lock lock(shard.mu);
  auto [it, inserted] = shard.tables.try_emplace(child, std::move(fresh));
  if (!inserted) {
    lock.unlock();
    for (PageId page : fresh.entries) pool_.release(page);
    throw Error(ErrorCode::kDuplicateSequence, seq_name(child));
  }
  return it->second;
}

PageAddress PageManager::translate(SeqId seq, std::size_t position) const {
  const BlockTable& t = table(seq);
  const std::size_t block = position >> pool_.page_shift();
  if (block >= t.entries.size()) {
    throw Error(ErrorCode::kOutOfRange,
                "position " + std::to_string(position) + " beyond capacity " +
                    std::to_string(t.capacity(page_size())) + " of " +
                    seq_name(seq));
  }
  return PageAddress{t.entries[block],
                     static_cast<std::uint32_t>(position & (page_size() - 1))};
}

PageId PageManager::prepare_write(SeqId seq, std::size_t block) {
  const std::size_t blocks[] = {block};
  return prepare_writes(seq, blocks).front();
}

std::vector<PageId> PageManager::prepare_writes(
    SeqId seq, std::span<const std::size_t> blocks) {
  BlockTable& t = mutable_table(seq);
  std::vector<std::size_t> shared;
  for (std::size_t block : blocks) {
    if (block >= t.entries.size()) {
      throw Error(ErrorCode::kOutOfRange,
                  "block " + std::to_string(block) + " not reserved for " +
                      seq_name(seq));
    }
    if (pool_.refcount(t.entries[block]) > 1 &&
        std::find(shared.begin(), shared.end(), block) == shared.end()) {
      shared.push_back(block);
    }
  }

  if (!shared.empty()) {
    std::vector<PageId> copies;
    acquire_or_throw(shared.size(), copies, "copy-on-write");
    for (std::size_t i = 0; i < shared.size(); ++i) {
      const PageId original = t.entries[shared[i]];
      if (copier_) copier_(original, copies[i], page_size());
      t.entries[shared[i]] = copies[i];
      pool_.release(original);
    }
  }

  std::vector<PageId> pages;
  pages.reserve(blocks.size());
  for (std::size_t block : blocks) pages.push_back(t.entries[block]);
  return pages;
}

void PageManager::mark_written(SeqId seq, std::size_t len) {
  BlockTable& t = mutable_table(seq);
  if (len > t.capacity(page_size())) {
    throw Error(ErrorCode::kOutOfRange,
                "length " + std::to_string(len) + " beyond capacity of " +
                    seq_name(seq));
  }
  t.logical_len = std::max(t.logical_len, len);
}

PoolCensus PageManager::check_invariants() const {
  const PoolCensus census = pool_.census();
  if (!census.conserved()) {
    throw Error(ErrorCode::kInternal, "page census is not conserved");
  }

  const std::uint64_t bump = pool_.bump_cursor();
  std::vector<std::uint32_t> references(bump, 0);
  for (std::size_t i = 0; i < kShardCount; ++i) {
    std::lock_guard lock(shards_[i].mu);
    for (const auto& [id, t] : shards_[i].tables) {
      if (t.logical_len > t.capacity(page_size())) {
        throw Error(ErrorCode::kInternal,
                    seq_name(id) + " length exceeds its capacity");
      }
      for (PageId page : t.entries) {
        if (page >= bump || pool_.refcount(page) == 0) {
          throw Error(ErrorCode::kInternal,
                      seq_name(id) + " references non-live page " +
                          std::to_string(page));
        }
        ++references[page];
      }
    }
  }

  std::uint64_t distinct = 0;
  for (std::uint64_t page = 0; page < bump; ++page) {
    const auto id = static_cast<PageId>(page);
    if (references[page] != pool_.refcount(id)) {
      throw Error(ErrorCode::kInternal,
                  "page " + std::to_string(page) + " has refcount " +
                      std::to_string(pool_.refcount(id)) + " but " +
                      std::to_string(references[page]) + " references");
    }
    if (references[page] > 0) ++distinct;
  }
  if (distinct != census.live_pages) {
    throw Error(ErrorCode::kInternal, "live pages differ from referenced pages");
  }
  return census;
}

nlohmann::json PageManager::dump() const {
  const PoolCensus census = pool_.census();
  nlohmann::json out;
  out["page_size"] = page_size();
  out["capacity_pages"] = pool_.capacity_pages();
  out["bump_cursor"] = pool_.bump_cursor();
  out["census"] = {{"live", census.live_pages},
                   {"free", census.free_pages},
                   {"never_allocated", census.never_allocated}};
  out["free_stack"] = pool_.free_stack();

  auto sequences = nlohmann::json::array();
  for (SeqId id : this->sequences()) {
    const BlockTable& t = table(id);
    std::vector<std::uint32_t> refs;
    refs.reserve(t.entries.size());
    for (PageId page : t.entries) refs.push_back(pool_.refcount(page));
    sequences.push_back({{"seq", to_underlying(id)},
                         {"logical_len", t.logical_len},
                         {"entries", t.entries},
                         {"refcounts", refs}});
  }
  out["sequences"] = std::move(sequences);
  return out;
}

void PageManager::debug_overwrite_entry(SeqId seq, std::size_t block,
                                        PageId page) {
  BlockTable& t = mutable_table(seq);
  if (block >= t.entries.size()) {
    throw Error(ErrorCode::kOutOfRange, "no such block");
  }
  t.entries[block] = page;
}

}  // namespace pagedkv
