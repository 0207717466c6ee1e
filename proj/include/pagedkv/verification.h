#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pagedkv/kv_cache.h"
#include "pagedkv/paged_attention.h"
#include "pagedkv/reference_attention.h"

namespace pagedkv {

// Randomized paged-attention instance: the same K/V content held both in a
// scattered page pool and in a contiguous mirror for the dense oracle.
struct InstanceParams {
  std::uint32_t min_sequences = 1;
  std::uint32_t max_sequences = 8;
  std::uint64_t max_len = 1024;
  std::vector<std::uint32_t> head_counts{1, 4, 8};
  std::vector<std::uint32_t> head_dims{8, 16, 64};
  std::vector<std::uint32_t> page_sizes{16, 64, 128};
  // Random query positions per sequence; the last position is always added.
  std::uint32_t queries_per_sequence = 8;
  // Scramble the free stack before reserving so pages land out of order.
  bool scatter = true;
  // Causal flag drawn at random unless forced.
  int force_causal = -1;
};

struct AttentionInstance {
  AttentionConfig config;
  std::vector<std::uint64_t> lengths;
  std::vector<float> keys;    // contiguous, sequences back to back
  std::vector<float> values;
  std::vector<float> queries;
  std::vector<QueryRef> query_refs;

  std::unique_ptr<PageManager> manager;
  std::unique_ptr<KvStore> store;
  std::unique_ptr<KvCache> cache;
  std::vector<SeqId> sequences;
  MaskMeta meta;

  std::vector<float> run_paged(const AttentionOptions& options = {}) const;
  std::vector<double> run_reference() const;
};

AttentionInstance make_attention_instance(std::mt19937_64& rng,
                                          const InstanceParams& params);

// Largest |got - want| over each (row, head) block of `head_dim` values,
// divided by that block's largest |want|.
double max_relative_error(std::span<const float> got,
                          std::span<const double> want, std::size_t head_dim);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct EquivalenceSummary {
  std::size_t instances = 0;
  double worst_error = 0.0;
  std::size_t failures = 0;
};

// Paged kernel against the dense oracle on `instances` random instances.
// `corrupt_table` redirects one block-table entry before running, which must
// make the check fail.
EquivalenceSummary run_oracle_equivalence(std::uint64_t seed,
                                          std::size_t instances,
                                          const InstanceParams& params,
                                          double tolerance,
                                          bool corrupt_table = false);

// Random reserve/grow/assign/gather/free/fork script checked against a
// contiguous mirror store and the page census after every operation.
struct ScriptParams {
  std::size_t operations = 10000;
  std::uint32_t page_size = 16;
  std::uint64_t pool_pages = 192;
  std::uint32_t row_width = 4;
  std::uint64_t max_reserve = 200;
  std::size_t max_live = 24;
};

struct ScriptReport {
  std::size_t operations = 0;
  std::size_t reserves = 0;
  std::size_t grows = 0;
  std::size_t assigns = 0;
  std::size_t gathers = 0;
  std::size_t frees = 0;
  std::size_t forks = 0;
  std::size_t capacity_errors = 0;
  std::size_t double_free_rejections = 0;
  bool ok = true;
  std::string failure;
};

ScriptReport run_allocator_script(std::uint64_t seed, const ScriptParams& params);

// Forks a random parent at a block-aligned prefix, then interleaves random
// writes and gathers on parent and child. Fails if the fork took pages or if
// either side ever observes the other's writes.
struct PrefixTrialReport {
  bool ok = true;
  std::uint64_t pages_taken_by_fork = 0;
  std::string failure;
};

PrefixTrialReport run_prefix_sharing_trial(std::uint64_t seed);

}  // namespace pagedkv
