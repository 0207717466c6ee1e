#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "pagedkv/types.h"

namespace pagedkv {

struct Arrive {
  SeqId seq{};
  std::uint64_t prompt_len = 0;
  friend bool operator==(const Arrive&, const Arrive&) = default;
};

struct Decode {
  SeqId seq{};
  std::uint64_t n_tokens = 0;
  friend bool operator==(const Decode&, const Decode&) = default;
};

struct Finish {
  SeqId seq{};
  friend bool operator==(const Finish&, const Finish&) = default;
};

struct ForkEvent {
  SeqId parent{};
  SeqId child{};
  std::uint64_t prefix = 0;
  friend bool operator==(const ForkEvent&, const ForkEvent&) = default;
};

using TraceEvent = std::variant<Arrive, Decode, Finish, ForkEvent>;

struct Trace {
  std::string scenario;
  std::uint64_t seed = 0;
  std::vector<TraceEvent> events;

  friend bool operator==(const Trace&, const Trace&) = default;
};

// Throws kInvalidTrace unless every event references a live sequence, arrivals
// are fresh and forks stay within the parent's length.
void validate(const Trace& trace);

std::string to_jsonl(const Trace& trace);
Trace trace_from_jsonl(const std::string& text);
// FNV-1a over the JSONL form.
std::uint64_t trace_hash(const Trace& trace);

// One sequence generating `len` tokens from an empty prompt.
Trace gen_single_sequence(std::uint64_t len);

enum class MixedBatchMode {
  kLadder,   // 16 prompts of 500, 1000, ..., 8000 tokens
  kUniform,  // 16 prompts drawn uniformly from {256, 512, ..., 4096}
};

// All prompts arrive, then finish in a seeded random order.
Trace gen_mixed_batch(std::uint64_t seed,
                      MixedBatchMode mode = MixedBatchMode::kLadder);

// One conversation growing from `start` tokens by `step_factor` per phase
// until `end`; the final phase is clamped to `end`.
Trace gen_chat_growth(std::uint64_t start, std::uint64_t end,
                      double step_factor = 2.0);

struct KvShape {
  std::uint32_t layers = 1;
  std::uint32_t head_count = 1;
  std::uint32_t head_dim = 1;
  std::uint32_t bytes_per_scalar = 2;

  // K and V across all layers.
  std::uint64_t bytes_per_token() const {
    return 2ULL * layers * head_count * head_dim * bytes_per_scalar;
  }
  std::uint64_t bytes_per_token_per_layer() const {
    return 2ULL * head_count * head_dim * bytes_per_scalar;
  }
};

struct AccountingConfig {
  std::uint32_t page_size = 64;
  // Contiguous slots pre-allocated per sequence; 0 means the longest sequence
  // seen in the trace.
  std::uint64_t max_len = 0;
  KvShape shape;
};

struct CensusSample {
  std::size_t event = 0;
  std::uint64_t live_pages = 0;
  std::uint64_t free_pages = 0;
  std::uint64_t never_allocated = 0;
  std::uint64_t valid_tokens = 0;      // distinct live tokens
  std::uint64_t contiguous_slots = 0;
};

struct MemoryReport {
  std::uint32_t page_size = 0;
  std::uint64_t max_len = 0;
  KvShape shape;

  std::uint64_t peak_tokens_paged = 0;
  std::uint64_t peak_tokens_contiguous = 0;
  std::uint64_t theoretical_min_tokens = 0;
  std::uint64_t min_sequence_length = 0;  // shortest non-empty live sequence

  std::uint64_t peak_bytes_paged = 0;
  std::uint64_t peak_bytes_contiguous = 0;
  std::uint64_t theoretical_min_bytes = 0;
  // Peak KV bytes of a single layer at the theoretical minimum.
  std::uint64_t kv_bytes_per_layer = 0;

  // peak / theoretical_min - 1, in percent.
  double overhead_pct_paged = 0.0;
  double overhead_pct_contiguous = 0.0;
  // 1 - theoretical_min / peak, in percent.
  double waste_pct_paged = 0.0;
  double waste_pct_contiguous = 0.0;

  std::vector<CensusSample> series;
};

// Replays the trace through a real page manager (bookkeeping only) and a
// contiguous max-length model. Shared fork prefixes count once toward the
// theoretical minimum.
MemoryReport account(const Trace& trace, const AccountingConfig& config);

nlohmann::json to_json(const MemoryReport& report);

}  // namespace pagedkv
