#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pagedkv/toy_decoder.h"
#include "pagedkv/verification.h"
#include "pagedkv/workload.h"

namespace pagedkv {

enum class ReportFormat { kJson, kCsv };

// Everything a subcommand needs. Empty `seq_lens` selects the per-scenario
// defaults.
struct RunConfig {
  std::string scenario = "mixed-ladder";
  std::uint32_t page_size = 64;
  std::uint64_t pool_pages = 0;  // 0 sizes the pool to the run
  std::vector<std::uint64_t> seq_lens;
  std::uint64_t seed = 0;
  std::string mode = "both";  // cached, nocache or both
  ReportFormat format = ReportFormat::kJson;
  std::string out;  // empty writes to stdout

  DecoderConfig model;
  KvShape shape{32, 32, 128, 2};
  std::uint64_t max_len = 0;

  std::size_t instances = 200;
  std::size_t script_operations = 10000;
  std::size_t prefix_trials = 100;
  bool corrupt_table = false;

  // Throws kInvalidConfig.
  void validate() const;
  nlohmann::json to_json() const;
};

std::vector<std::uint64_t> parse_seq_lens(const std::string& text);

// ---------------------------------------------------------------------------
// bench

struct ScalingRow {
  std::uint64_t context_len = 0;
  bool has_cached = false;
  bool has_nocache = false;
  FlopCounter cached;
  FlopCounter nocache;
  // Advisory only.
  double cached_wall_ms = 0.0;
  double nocache_wall_ms = 0.0;
  // Against the previous row; 0 on the first row.
  double cached_attention_ratio = 0.0;
  double nocache_attention_ratio = 0.0;
  double nocache_total_ratio = 0.0;
};

struct ScalingReport {
  RunConfig config;
  std::vector<ScalingRow> rows;
  // Whole-generation cost up to the longest length.
  FlopCounter cumulative_cached;
  FlopCounter cumulative_nocache;
  double cumulative_ratio = 0.0;
  // Every recorded counter equals the closed-form step cost.
  bool counters_match_model = false;
};

ScalingReport run_bench(const RunConfig& config);
nlohmann::json to_json(const ScalingReport& report, bool include_timing = true);
std::string to_csv(const ScalingReport& report, bool include_timing = true);

// ---------------------------------------------------------------------------
// audit and trace-dump

Trace scenario_trace(const RunConfig& config);
MemoryReport run_audit(const RunConfig& config);
nlohmann::json audit_json(const RunConfig& config, const MemoryReport& report);
std::string to_csv(const MemoryReport& report);

// Trace as JSONL; with `with_pool` a final line holds the page manager dump
// after replaying the trace.
std::string run_trace_dump(const RunConfig& config, bool with_pool);

// ---------------------------------------------------------------------------
// verify

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool passed() const;
};

VerifyReport run_verify(const RunConfig& config);
nlohmann::json to_json(const VerifyReport& report, const RunConfig& config);
std::string to_csv(const VerifyReport& report);

// Exhaustive block classification check plus skip/visit-all bit-equality on
// random instances.
CheckResult check_block_mask(std::uint64_t seed, std::size_t instances);
// Cached paged decoding against full recomputation on one seed: largest
// relative logit error and greedy token agreement over `steps` steps.
struct CrossPathResult {
  double worst_logit_error = 0.0;
  bool tokens_match = true;
  std::size_t first_divergence = 0;
  double logit_gap_at_divergence = 0.0;
};
CrossPathResult run_cross_path(const DecoderConfig& model, std::size_t steps,
                               std::uint32_t page_size);

}  // namespace pagedkv
