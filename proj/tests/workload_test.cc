#include "pagedkv/workload.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "pagedkv/error.h"

namespace pagedkv {
namespace {

std::map<std::uint64_t, std::uint64_t> arrival_lengths(const Trace& trace) {
  std::map<std::uint64_t, std::uint64_t> lens;
  for (const TraceEvent& e : trace.events) {
    if (const auto* a = std::get_if<Arrive>(&e)) lens[to_underlying(a->seq)] = a->prompt_len;
  }
  return lens;
}

// Length each sequence reaches over the whole trace.
std::vector<std::uint64_t> final_lengths(const Trace& trace) {
  std::map<std::uint64_t, std::uint64_t> lens;
  for (const TraceEvent& e : trace.events) {
    if (const auto* a = std::get_if<Arrive>(&e)) lens[to_underlying(a->seq)] = a->prompt_len;
    if (const auto* d = std::get_if<Decode>(&e)) lens[to_underlying(d->seq)] += d->n_tokens;
    if (const auto* f = std::get_if<ForkEvent>(&e)) lens[to_underlying(f->child)] = f->prefix;
  }
  std::vector<std::uint64_t> out;
  for (const auto& [id, len] : lens) out.push_back(len);
  return out;
}

AccountingConfig paged(std::uint32_t page, std::uint64_t max_len = 0) {
  AccountingConfig c;
  c.page_size = page;
  c.max_len = max_len;
  return c;
}

TEST(Workload, SingleSequenceEvents) {
  const Trace t = gen_single_sequence(128);
  ASSERT_EQ(t.events.size(), 2u);
  EXPECT_EQ(std::get<Arrive>(t.events[0]).prompt_len, 0u);
  EXPECT_EQ(std::get<Decode>(t.events[1]).n_tokens, 128u);
  const Trace empty = gen_single_sequence(0);
  ASSERT_EQ(empty.events.size(), 1u);
  EXPECT_TRUE(std::holds_alternative<Arrive>(empty.events[0]));
}

TEST(Workload, GeneratorsAreDeterministic) {
  EXPECT_EQ(trace_hash(gen_single_sequence(4096)), trace_hash(gen_single_sequence(4096)));
  EXPECT_EQ(trace_hash(gen_mixed_batch(7, MixedBatchMode::kUniform)),
            trace_hash(gen_mixed_batch(7, MixedBatchMode::kUniform)));
  EXPECT_EQ(trace_hash(gen_chat_growth(1024, 4096)),
            trace_hash(gen_chat_growth(1024, 4096)));
  EXPECT_NE(trace_hash(gen_mixed_batch(7, MixedBatchMode::kUniform)),
            trace_hash(gen_mixed_batch(8, MixedBatchMode::kUniform)));
}

TEST(Workload, LadderBatch) {
  const Trace t = gen_mixed_batch(0, MixedBatchMode::kLadder);
  const auto lens = arrival_lengths(t);
  ASSERT_EQ(lens.size(), 16u);
  std::uint64_t total = 0;
  std::uint64_t want = 500;
  for (const auto& [id, len] : lens) {
    EXPECT_EQ(len, want);
    want += 500;
    total += len;
  }
  EXPECT_EQ(total, 68000u);
  std::size_t finishes = 0;
  for (const TraceEvent& e : t.events) finishes += std::holds_alternative<Finish>(e);
  EXPECT_EQ(finishes, 16u);
  validate(t);
}

TEST(Workload, UniformBatchDrawsFromGrid) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& [id, len] : arrival_lengths(gen_mixed_batch(seed, MixedBatchMode::kUniform))) {
      EXPECT_EQ(len % 256, 0u);
      EXPECT_GE(len, 256u);
      EXPECT_LE(len, 4096u);
      seen.insert(len);
    }
  }
  EXPECT_EQ(seen.size(), 16u);
}

TEST(Workload, ChatGrowthDoubles) {
  const Trace t = gen_chat_growth(1024, 4096, 2.0);
  ASSERT_EQ(t.events.size(), 3u);
  std::vector<std::uint64_t> contexts{std::get<Arrive>(t.events[0]).prompt_len};
  for (std::size_t i = 1; i < t.events.size(); ++i) {
    contexts.push_back(contexts.back() + std::get<Decode>(t.events[i]).n_tokens);
  }
  EXPECT_EQ(contexts, (std::vector<std::uint64_t>{1024, 2048, 4096}));
  EXPECT_EQ(gen_chat_growth(2048, 2048).events.size(), 1u);
  EXPECT_THROW(gen_chat_growth(0, 10), Error);
}

TEST(Workload, JsonlRoundTrip) {
  Trace t = gen_mixed_batch(3, MixedBatchMode::kUniform);
  t.events.insert(t.events.begin() + 16, ForkEvent{SeqId{0}, SeqId{99}, 128});
  const Trace back = trace_from_jsonl(to_jsonl(t));
  EXPECT_EQ(back, t);
  EXPECT_THROW(trace_from_jsonl("{\"scenario\":\"x\",\"seed\":0,\"events\":2}\n"), Error);
  EXPECT_THROW(trace_from_jsonl("not json"), Error);
}

TEST(Workload, ValidateRejectsDeadReferences) {
  Trace t;
  t.events = {Arrive{SeqId{1}, 4}, Finish{SeqId{1}}, Decode{SeqId{1}, 1}};
  EXPECT_THROW(validate(t), Error);
  t.events = {Arrive{SeqId{1}, 4}, ForkEvent{SeqId{1}, SeqId{2}, 5}};
  EXPECT_THROW(validate(t), Error);
  t.events = {Arrive{SeqId{1}, 4}, Arrive{SeqId{1}, 4}};
  EXPECT_THROW(account(t, paged(64)), Error);
}

TEST(Account, ContiguousWasteOfOneShortSequence) {
  const MemoryReport r = account(gen_single_sequence(1024), paged(64, 4096));
  EXPECT_DOUBLE_EQ(r.waste_pct_contiguous, 75.0);
  EXPECT_EQ(r.peak_tokens_contiguous, 4096u);
}

TEST(Account, PagedOverheadOfPartialPage) {
  const MemoryReport r = account(gen_single_sequence(1000), paged(64));
  EXPECT_EQ(r.peak_tokens_paged, 1024u);
  EXPECT_EQ(r.theoretical_min_tokens, 1000u);
  EXPECT_NEAR(r.overhead_pct_paged, 2.4, 1e-9);
}

TEST(Account, LadderContiguousWaste) {
  const MemoryReport r = account(gen_mixed_batch(0, MixedBatchMode::kLadder), paged(64, 8000));
  // (16 * 8000 - 68000) / (16 * 8000)
  EXPECT_NEAR(r.waste_pct_contiguous, 46.875, 1e-9);
  EXPECT_LT(r.overhead_pct_paged, 5.0);
  EXPECT_LT(r.overhead_pct_paged, r.overhead_pct_contiguous);
}

TEST(Account, BytesUseShape) {
  AccountingConfig c = paged(64);
  c.shape = KvShape{32, 32, 128, 2};
  const MemoryReport r = account(gen_single_sequence(2048), c);
  EXPECT_EQ(r.kv_bytes_per_layer, 2048ULL * 2 * 32 * 128 * 2);
  EXPECT_EQ(r.theoretical_min_bytes, 32 * r.kv_bytes_per_layer);
}

TEST(Account, EmptyTraceHasZeroPeaks) {
  const MemoryReport r = account(Trace{}, paged(64));
  EXPECT_EQ(r.peak_bytes_paged, 0u);
  EXPECT_EQ(r.peak_bytes_contiguous, 0u);
  EXPECT_EQ(r.theoretical_min_bytes, 0u);
  EXPECT_EQ(r.overhead_pct_paged, 0.0);
}

TEST(Account, SharedForkPrefixCountsOnce) {
  Trace t;
  t.events = {Arrive{SeqId{1}, 256}, ForkEvent{SeqId{1}, SeqId{2}, 256},
              Decode{SeqId{2}, 64}};
  const MemoryReport r = account(t, paged(64));
  EXPECT_EQ(r.theoretical_min_tokens, 320u);
  EXPECT_EQ(r.peak_tokens_paged, 320u);
}

TEST(Account, SeriesConservesPages) {
  const MemoryReport r = account(gen_mixed_batch(4, MixedBatchMode::kUniform), paged(32));
  ASSERT_FALSE(r.series.empty());
  const std::uint64_t capacity = r.series.front().live_pages +
                                 r.series.front().free_pages +
                                 r.series.front().never_allocated;
  for (const CensusSample& s : r.series) {
    EXPECT_EQ(s.live_pages + s.free_pages + s.never_allocated, capacity);
  }
  EXPECT_EQ(r.series.back().live_pages, 0u);
}

TEST(Account, ReplayIsPure) {
  const Trace t = gen_mixed_batch(9, MixedBatchMode::kUniform);
  EXPECT_EQ(to_json(account(t, paged(64))), to_json(account(t, paged(64))));
}

// Checked over every generator and several page sizes.
TEST(Account, OverheadPropertiesOnGeneratedTraces) {
  std::vector<Trace> traces{gen_single_sequence(4096), gen_single_sequence(777),
                            gen_chat_growth(1024, 4096), gen_chat_growth(1000, 5000, 1.5),
                            gen_mixed_batch(0, MixedBatchMode::kLadder)};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    traces.push_back(gen_mixed_batch(seed, MixedBatchMode::kUniform));
  }
  for (const Trace& t : traces) {
    for (std::uint32_t page : {16u, 32u, 64u, 128u}) {
      const MemoryReport r = account(t, paged(page));
      ASSERT_GT(r.min_sequence_length, 0u);
      EXPECT_GE(r.overhead_pct_paged, 0.0);
      EXPECT_LE(r.overhead_pct_paged / 100.0,
                static_cast<double>(page) / static_cast<double>(r.min_sequence_length));
      const auto lens = final_lengths(t);
      if (*std::min_element(lens.begin(), lens.end()) < r.max_len) {
        EXPECT_LT(r.overhead_pct_paged, r.overhead_pct_contiguous);
      }
      if (r.min_sequence_length >= 20ULL * page) {
        EXPECT_LT(r.overhead_pct_paged, 5.0) << t.scenario << " page " << page;
      }
    }
  }
}

}  // namespace
}  // namespace pagedkv
