#include "pagedkv/page_manager.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <thread>
#include <vector>

#include "pagedkv/error.h"
#include "test_util.h"

namespace pagedkv {
namespace {

using testing::arrange_free_stack;

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kInternal;
}

TEST(PagePool, RejectsNonPowerOfTwoPageSize) {
  EXPECT_EQ(code_of([] { PagePool pool(4, 48); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(code_of([] { PagePool pool(4, 0); }), ErrorCode::kInvalidConfig);
}

TEST(PagePool, RejectsCapacityBeyondPageIdSpace) {
  EXPECT_EQ(code_of([] { PagePool pool(1ULL << 32, 64); }),
            ErrorCode::kInvalidConfig);
}

TEST(PagePool, FailedAcquireRestoresStackOrder) {
  PagePool pool(4, 16);
  std::vector<PageId> pages;
  ASSERT_TRUE(pool.try_acquire(3, pages));
  for (PageId p : pages) pool.release(p);
  const std::vector<PageId> before = pool.free_stack();
  std::vector<PageId> more;
  EXPECT_FALSE(pool.try_acquire(5, more));
  EXPECT_TRUE(more.empty());
  EXPECT_EQ(pool.free_stack(), before);
  EXPECT_EQ(pool.bump_cursor(), 3u);
}

TEST(PagePool, DoubleReleaseThrows) {
  PagePool pool(2, 16);
  std::vector<PageId> pages;
  ASSERT_TRUE(pool.try_acquire(1, pages));
  EXPECT_TRUE(pool.release(pages[0]));
  EXPECT_EQ(code_of([&] { pool.release(pages[0]); }), ErrorCode::kInternal);
  EXPECT_TRUE(pool.census().conserved());
}

TEST(PageManager, ReserveGrantsCeilingOfLengthOverPageSize) {
  PageManager m(8, 64);
  EXPECT_EQ(m.reserve(SeqId{1}, 130).size(), 3u);
  EXPECT_EQ(m.table(SeqId{1}).logical_len, 0u);
}

TEST(PageManager, ReserveZeroGivesEmptyValidTable) {
  PageManager m(8, 64);
  EXPECT_TRUE(m.reserve(SeqId{1}, 0).empty());
  EXPECT_TRUE(m.contains(SeqId{1}));
  EXPECT_TRUE(m.table(SeqId{1}).entries.empty());
  m.check_invariants();
}

TEST(PageManager, ReserveBeyondFreePagesLeavesPoolUnchanged) {
  PageManager m(2, 64);
  const auto before = m.dump();
  EXPECT_EQ(code_of([&] { m.reserve(SeqId{1}, 192); }),
            ErrorCode::kCapacityExhausted);
  EXPECT_EQ(m.dump(), before);
  EXPECT_FALSE(m.contains(SeqId{1}));
}

TEST(PageManager, ReserveExistingSequenceFails) {
  PageManager m(8, 64);
  m.reserve(SeqId{1}, 10);
  EXPECT_EQ(code_of([&] { m.reserve(SeqId{1}, 10); }),
            ErrorCode::kDuplicateSequence);
  m.check_invariants();
}

TEST(PageManager, GrowAppendsMissingPagesOnly) {
  PageManager m(8, 64);
  m.reserve(SeqId{1}, 128);
  EXPECT_EQ(m.grow(SeqId{1}, 129).size(), 1u);
  EXPECT_EQ(m.table(SeqId{1}).entries.size(), 3u);
}

TEST(PageManager, GrowWithinCapacityIsNoop) {
  PageManager m(8, 64);
  m.reserve(SeqId{1}, 100);
  EXPECT_TRUE(m.grow(SeqId{1}, 128).empty());
  EXPECT_TRUE(m.grow(SeqId{1}, 5).empty());
  EXPECT_EQ(m.table(SeqId{1}).entries.size(), 2u);
}

TEST(PageManager, GrowAfterForkLeavesSharedPagesUntouched) {
  PageManager m(16, 64);
  m.reserve(SeqId{1}, 128);
  m.mark_written(SeqId{1}, 128);
  m.fork(SeqId{1}, SeqId{2}, 128);
  const std::vector<PageId> shared = m.table(SeqId{1}).entries;
  m.grow(SeqId{2}, 200);
  const auto& child = m.table(SeqId{2}).entries;
  ASSERT_EQ(child.size(), 4u);
  EXPECT_TRUE(std::equal(shared.begin(), shared.end(), child.begin()));
  EXPECT_EQ(m.table(SeqId{1}).entries, shared);
  for (PageId p : shared) EXPECT_EQ(m.pool().refcount(p), 2u);
  m.check_invariants();
}

TEST(PageManager, FreeReclaimsUnsharedPages) {
  PageManager m(8, 64);
  m.reserve(SeqId{1}, 192);
  const std::size_t stack_before = m.pool().free_stack().size();
  EXPECT_EQ(m.free(SeqId{1}), 3u);
  EXPECT_EQ(m.pool().free_stack().size(), stack_before + 3);
  m.check_invariants();
}

TEST(PageManager, FreeParentAfterForkKeepsSharedPagesLive) {
  PageManager m(8, 64);
  m.reserve(SeqId{1}, 192);
  m.mark_written(SeqId{1}, 192);
  m.fork(SeqId{1}, SeqId{2}, 128);
  const std::vector<PageId> child = m.table(SeqId{2}).entries;
  EXPECT_EQ(m.free(SeqId{1}), 1u);
  for (PageId p : child) EXPECT_EQ(m.pool().refcount(p), 1u);
  EXPECT_EQ(m.pool().live_pages(), 2u);
  m.check_invariants();
}

TEST(PageManager, SecondFreeIsRejected) {
  PageManager m(8, 64);
  m.reserve(SeqId{1}, 64);
  m.free(SeqId{1});
  EXPECT_EQ(code_of([&] { m.free(SeqId{1}); }), ErrorCode::kUnknownSequence);
  const std::vector<PageId> stack = m.pool().free_stack();
  EXPECT_EQ(std::set<PageId>(stack.begin(), stack.end()).size(), stack.size());
}

TEST(PageManager, ReserveOnFullyBumpedPoolReusesReclaimedIds) {
  PageManager m(3, 64);
  const std::vector<PageId> first = m.reserve(SeqId{1}, 192);
  EXPECT_EQ(m.pool().bump_cursor(), 3u);
  m.free(SeqId{1});
  std::vector<PageId> second = m.reserve(SeqId{2}, 192);
  // LIFO reuse hands the pages back in reverse release order.
  std::vector<PageId> expected(first.rbegin(), first.rend());
  EXPECT_EQ(second, expected);
  m.check_invariants();
}

TEST(PageManager, AlignedForkSharesPagesWithoutCopy) {
  PageManager m(8, 64);
  m.reserve(SeqId{1}, 192);
  m.mark_written(SeqId{1}, 150);
  int copies = 0;
  m.set_page_copier([&](PageId, PageId, std::uint32_t) { ++copies; });
  const std::uint64_t live = m.pool().live_pages();
  const BlockTable& child = m.fork(SeqId{1}, SeqId{2}, 128);
  ASSERT_EQ(child.entries.size(), 2u);
  EXPECT_EQ(child.logical_len, 128u);
  EXPECT_EQ(copies, 0);
  EXPECT_EQ(m.pool().live_pages(), live);
  for (PageId p : child.entries) EXPECT_EQ(m.pool().refcount(p), 2u);
  m.check_invariants();
}

TEST(PageManager, UnalignedForkCopiesPartialTail) {
  PageManager m(8, 64);
  m.reserve(SeqId{1}, 128);
  m.mark_written(SeqId{1}, 128);
  std::vector<std::uint32_t> copied_slots;
  m.set_page_copier(
      [&](PageId, PageId, std::uint32_t slots) { copied_slots.push_back(slots); });
  const BlockTable& child = m.fork(SeqId{1}, SeqId{2}, 100);
  const BlockTable& parent = m.table(SeqId{1});
  ASSERT_EQ(child.entries.size(), 2u);
  EXPECT_EQ(child.entries[0], parent.entries[0]);
  EXPECT_NE(child.entries[1], parent.entries[1]);
  EXPECT_EQ(copied_slots, std::vector<std::uint32_t>{36});
  EXPECT_EQ(m.pool().refcount(child.entries[1]), 1u);
  m.check_invariants();
}

TEST(PageManager, ForkBeyondWrittenLengthFails) {
  PageManager m(8, 64);
  m.reserve(SeqId{1}, 128);
  m.mark_written(SeqId{1}, 50);
  EXPECT_EQ(code_of([&] { m.fork(SeqId{1}, SeqId{2}, 64); }),
            ErrorCode::kInvalidPrefix);
  EXPECT_EQ(code_of([&] { m.fork(SeqId{9}, SeqId{2}, 0); }),
            ErrorCode::kUnknownSequence);
  EXPECT_FALSE(m.contains(SeqId{2}));
}

TEST(PageManager, ForkTailCopyOnExhaustedPoolIsAtomic) {
  PageManager m(2, 64);
  m.reserve(SeqId{1}, 128);
  m.mark_written(SeqId{1}, 100);
  const auto before = m.dump();
  EXPECT_EQ(code_of([&] { m.fork(SeqId{1}, SeqId{2}, 100); }),
            ErrorCode::kCapacityExhausted);
  EXPECT_EQ(m.dump(), before);
}

TEST(PageManager, TranslateUsesShiftAndMask) {
  PageManager m(10, 4);
  arrange_free_stack(m, {7, 2, 9});
  ASSERT_EQ(m.reserve(SeqId{1}, 12), (std::vector<PageId>{7, 2, 9}));
  const PageAddress a = m.translate(SeqId{1}, 9);
  EXPECT_EQ(a, (PageAddress{9, 1}));
  EXPECT_EQ(a.flat_index(4), 37u);
  EXPECT_EQ(m.translate(SeqId{1}, 0), (PageAddress{7, 0}));
}

TEST(PageManager, TranslateBoundary) {
  PageManager m(8, 64);
  arrange_free_stack(m, {5});
  m.reserve(SeqId{1}, 64);
  EXPECT_EQ(m.translate(SeqId{1}, 63), (PageAddress{5, 63}));
  EXPECT_EQ(code_of([&] { m.translate(SeqId{1}, 64); }), ErrorCode::kOutOfRange);
}

TEST(PageManager, TranslateIsInjectiveOverCapacity) {
  std::mt19937_64 rng(11);
  PageManager m(32, 8);
  arrange_free_stack(m, {13, 4, 30, 0, 21, 8});
  m.reserve(SeqId{1}, 48);
  std::set<std::uint64_t> seen;
  for (std::size_t t = 0; t < 48; ++t) {
    EXPECT_TRUE(seen.insert(m.translate(SeqId{1}, t).flat_index(8)).second);
  }
}

TEST(PageManager, CopyOnWriteBatchIsAtomic) {
  PageManager m(5, 16);
  m.reserve(SeqId{1}, 64);
  m.mark_written(SeqId{1}, 64);
  m.fork(SeqId{1}, SeqId{2}, 48);
  // One free page left, two shared blocks need private copies.
  const auto before = m.dump();
  const std::size_t blocks[] = {0, 2};
  EXPECT_EQ(code_of([&] { m.prepare_writes(SeqId{2}, blocks); }),
            ErrorCode::kCapacityExhausted);
  EXPECT_EQ(m.dump(), before);
  // A single block still fits.
  const PageId fresh = m.prepare_write(SeqId{2}, 1);
  EXPECT_NE(fresh, m.table(SeqId{1}).entries[1]);
  m.check_invariants();
}

// Replays a seeded single-threaded script; identical seeds must produce
// identical tables and census.
nlohmann::json replay(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PageManager m(64, 16);
  std::vector<SeqId> live;
  std::uint64_t next = 0;
  for (int op = 0; op < 500; ++op) {
    try {
      switch (rng() % 4) {
        case 0: {
          const SeqId id{next++};
          m.reserve(id, rng() % 80);
          live.push_back(id);
          break;
        }
        case 1:
          if (!live.empty()) {
            const SeqId id = live[rng() % live.size()];
            m.grow(id, rng() % 120);
          }
          break;
        case 2:
          if (!live.empty()) {
            const std::size_t i = rng() % live.size();
            m.free(live[i]);
            live.erase(live.begin() + static_cast<std::ptrdiff_t>(i));
          }
          break;
        default:
          if (!live.empty()) {
            const SeqId parent = live[rng() % live.size()];
            const std::size_t cap = m.table(parent).capacity(16);
            m.mark_written(parent, cap);
            const SeqId child{next++};
            m.fork(parent, child, cap == 0 ? 0 : rng() % (cap + 1));
            live.push_back(child);
          }
      }
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kCapacityExhausted);
    }
    const PoolCensus census = m.check_invariants();
    EXPECT_TRUE(census.conserved());
  }
  return m.dump();
}

TEST(PageManager, SingleThreadedReplayIsDeterministic) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    EXPECT_EQ(replay(seed), replay(seed));
  }
}

TEST(PageManager, ConcurrentWorkersConservePages) {
  PageManager m(4096, 16);
  constexpr int kThreads = 4;
  std::vector<std::thread> workers;
  for (int w = 0; w < kThreads; ++w) {
    workers.emplace_back([&m, w] {
      std::mt19937_64 rng(static_cast<std::uint64_t>(w));
      std::vector<SeqId> mine;
      std::uint64_t next = static_cast<std::uint64_t>(w) << 32;
      for (int op = 0; op < 20000; ++op) {
        if (mine.size() < 16 && (mine.empty() || (rng() & 1))) {
          const SeqId id{next++};
          try {
            m.reserve(id, 1 + rng() % 64);
            mine.push_back(id);
          } catch (const Error&) {
          }
        } else {
          const std::size_t i = rng() % mine.size();
          m.free(mine[i]);
          mine[i] = mine.back();
          mine.pop_back();
        }
      }
      for (SeqId id : mine) m.free(id);
    });
  }
  for (auto& t : workers) t.join();
  const PoolCensus census = m.check_invariants();
  EXPECT_TRUE(census.conserved());
  EXPECT_EQ(census.live_pages, 0u);
  EXPECT_EQ(m.sequence_count(), 0u);
}

TEST(PageManager, DumpListsSequencesAndFreeStack) {
  PageManager m(4, 16);
  m.reserve(SeqId{3}, 20);
  m.mark_written(SeqId{3}, 20);
  const auto j = m.dump();
  EXPECT_EQ(j["page_size"], 16);
  EXPECT_EQ(j["sequences"].size(), 1u);
  EXPECT_EQ(j["sequences"][0]["logical_len"], 20);
}

}  // namespace
}  // namespace pagedkv
