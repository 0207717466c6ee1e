#include "pagedkv/bench.h"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_map>
#include <variant>

#include "pagedkv/error.h"
#include "pagedkv/version.h"

namespace pagedkv {

namespace {

const std::vector<std::uint64_t> kDefaultBenchLens{128, 256, 512, 1024, 2048};
constexpr std::uint64_t kDefaultSingleLen = 4096;
constexpr std::uint64_t kDefaultChatStart = 1024;
constexpr std::uint64_t kDefaultChatEnd = 4096;

const char* format_name(ReportFormat format) {
  return format == ReportFormat::kJson ? "json" : "csv";
}

double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

nlohmann::json flops_json(const FlopCounter& c) {
  return {{"attention", c.attention_flops},
          {"projection", c.projection_flops},
          {"total", c.total()}};
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace

void RunConfig::validate() const {
  if (page_size == 0 || !std::has_single_bit(page_size)) {
    throw Error(ErrorCode::kInvalidConfig,
                "--page-size must be a positive power of two");
  }
  if (mode != "cached" && mode != "nocache" && mode != "both") {
    throw Error(ErrorCode::kInvalidConfig,
                "--mode must be cached, nocache or both, got '" + mode + "'");
  }
  static const std::vector<std::string> kScenarios{
      "single", "mixed-ladder", "mixed-uniform", "chat", "empty"};
  if (std::find(kScenarios.begin(), kScenarios.end(), scenario) ==
      kScenarios.end()) {
    throw Error(ErrorCode::kInvalidConfig, "unknown scenario '" + scenario + "'");
  }
  for (std::size_t i = 0; i < seq_lens.size(); ++i) {
    if (seq_lens[i] == 0 || (i > 0 && seq_lens[i] <= seq_lens[i - 1])) {
      throw Error(ErrorCode::kInvalidConfig,
                  "--seq-lens must be positive and strictly ascending");
    }
  }
  if (scenario == "chat" && !seq_lens.empty() && seq_lens.size() != 2) {
    throw Error(ErrorCode::kInvalidConfig,
                "chat scenario takes --seq-lens start,end");
  }
  if (shape.layers == 0 || shape.head_count == 0 || shape.head_dim == 0 ||
      shape.bytes_per_scalar == 0) {
    throw Error(ErrorCode::kInvalidConfig, "KV shape fields must be positive");
  }
  if (instances == 0) {
    throw Error(ErrorCode::kInvalidConfig,
                "zero verification instances would pass vacuously");
  }
  if (script_operations == 0 || prefix_trials == 0) {
    throw Error(ErrorCode::kInvalidConfig, "verification sizes must be positive");
  }
  model.validate();
}

nlohmann::json RunConfig::to_json() const {
  return {{"scenario", scenario},
          {"page_size", page_size},
          {"pool_pages", pool_pages},
          {"seq_lens", seq_lens},
          {"seed", seed},
          {"mode", mode},
          {"format", format_name(format)},
          {"model",
           {{"layers", model.layers},
            {"head_count", model.head_count},
            {"head_dim", model.head_dim},
            {"vocab", model.vocab},
            {"mlp_ratio", model.mlp_ratio},
            {"seed", model.seed}}},
          {"shape",
           {{"layers", shape.layers},
            {"head_count", shape.head_count},
            {"head_dim", shape.head_dim},
            {"bytes_per_scalar", shape.bytes_per_scalar}}},
          {"max_len", max_len},
          {"instances", instances},
          {"script_operations", script_operations},
          {"prefix_trials", prefix_trials},
          {"corrupt_table", corrupt_table}};
}

std::vector<std::uint64_t> parse_seq_lens(const std::string& text) {
  std::vector<std::uint64_t> lens;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty() ||
        item.find_first_not_of("0123456789") != std::string::npos) {
      throw Error(ErrorCode::kInvalidConfig, "bad --seq-lens entry '" + item + "'");
    }
    lens.push_back(std::stoull(item));
  }
  return lens;
}

// ---------------------------------------------------------------------------
// bench

ScalingReport run_bench(const RunConfig& config) {
  config.validate();
  ScalingReport report;
  report.config = config;
  const std::vector<std::uint64_t>& lens =
      config.seq_lens.empty() ? kDefaultBenchLens : config.seq_lens;
  const std::uint64_t longest = lens.back();
  const bool want_cached = config.mode != "nocache";
  const bool want_nocache = config.mode != "cached";

  ToyDecoder model(config.model);
  const std::vector<Token> prompt{
      static_cast<Token>(config.seed % config.model.vocab)};

  // One cached generation up to the longest length provides every step and
  // the token stream the uncached steps replay.
  GenerationResult cached;
  {
    const std::uint64_t pages =
        config.pool_pages != 0
            ? config.pool_pages
            : (longest + config.page_size - 1) / config.page_size;
    PageManager manager(pages, config.page_size);
    KvStore store(pages, config.page_size, model.kv_layout());
    KvCache cache(manager, store);
    cached = model.generate_cached(prompt, longest, cache, SeqId{0});
  }

  std::vector<Token> context = prompt;
  context.insert(context.end(), cached.tokens.begin(), cached.tokens.end());

  bool match = true;
  for (std::uint64_t n : lens) {
    ScalingRow row;
    row.context_len = n;
    if (want_cached) {
      const StepRecord& step = cached.steps[n - 1];
      row.has_cached = true;
      row.cached = step.flops;
      row.cached_wall_ms = step.wall_ms;
      match = match && step.context_len == n &&
              step.flops == model.step_flops(DecodeMode::kCached, n);
    }
    if (want_nocache) {
      row.has_nocache = true;
      const auto start = std::chrono::steady_clock::now();
      model.decode_step_nocache(std::span<const Token>(context.data(), n),
                                &row.nocache);
      row.nocache_wall_ms = elapsed_ms(start);
      match = match && row.nocache == model.step_flops(DecodeMode::kNoCache, n);
    }
    if (!report.rows.empty()) {
      const ScalingRow& prev = report.rows.back();
      row.cached_attention_ratio =
          ratio(row.cached.attention_flops, prev.cached.attention_flops);
      row.nocache_attention_ratio =
          ratio(row.nocache.attention_flops, prev.nocache.attention_flops);
      row.nocache_total_ratio = ratio(row.nocache.total(), prev.nocache.total());
    }
    report.rows.push_back(row);
  }

  // The whole uncached generation is far too expensive to run, so cumulative
  // costs come from the closed form, which the counters above were checked
  // against. The cached sum is also checked against the measured run.
  report.cumulative_cached = model.cumulative_flops(DecodeMode::kCached, longest);
  report.cumulative_nocache = model.cumulative_flops(DecodeMode::kNoCache, longest);
  report.cumulative_ratio =
      ratio(report.cumulative_nocache.total(), report.cumulative_cached.total());
  FlopCounter measured;
  for (const StepRecord& step : cached.steps) measured += step.flops;
  match = match && measured == report.cumulative_cached;
  report.counters_match_model = match;
  return report;
}

nlohmann::json to_json(const ScalingReport& report, bool include_timing) {
  auto rows = nlohmann::json::array();
  auto timing = nlohmann::json::array();
  for (const ScalingRow& r : report.rows) {
    nlohmann::json row{{"context_len", r.context_len}};
    nlohmann::json wall{{"context_len", r.context_len}};
    if (r.has_cached) {
      row["cached_flops"] = flops_json(r.cached);
      row["cached_attention_ratio"] = r.cached_attention_ratio;
      wall["cached_ms"] = r.cached_wall_ms;
    }
    if (r.has_nocache) {
      row["nocache_flops"] = flops_json(r.nocache);
      row["nocache_attention_ratio"] = r.nocache_attention_ratio;
      row["nocache_total_ratio"] = r.nocache_total_ratio;
      wall["nocache_ms"] = r.nocache_wall_ms;
    }
    rows.push_back(std::move(row));
    timing.push_back(std::move(wall));
  }
  nlohmann::json out{
      {"report", "scaling"},
      {"version", kVersion},
      {"seed", report.config.seed},
      {"config", report.config.to_json()},
      {"rows", rows},
      {"cumulative",
       {{"context_len", report.rows.empty() ? 0 : report.rows.back().context_len},
        {"cached_flops", flops_json(report.cumulative_cached)},
        {"nocache_flops", flops_json(report.cumulative_nocache)},
        {"ratio", report.cumulative_ratio}}},
      {"counters_match_model", report.counters_match_model}};
  if (include_timing) {
    out["advisory_wall_time"] = timing;
  }
  return out;
}

std::string to_csv(const ScalingReport& report, bool include_timing) {
  std::ostringstream out;
  out << "context_len,cached_attention_flops,cached_total_flops,"
         "cached_attention_ratio,nocache_attention_flops,nocache_total_flops,"
         "nocache_attention_ratio,nocache_total_ratio";
  if (include_timing) out << ",cached_wall_ms_advisory,nocache_wall_ms_advisory";
  out << '\n';
  for (const ScalingRow& r : report.rows) {
    out << r.context_len << ',' << r.cached.attention_flops << ','
        << r.cached.total() << ',' << r.cached_attention_ratio << ','
        << r.nocache.attention_flops << ',' << r.nocache.total() << ','
        << r.nocache_attention_ratio << ',' << r.nocache_total_ratio;
    if (include_timing) out << ',' << r.cached_wall_ms << ',' << r.nocache_wall_ms;
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// audit and trace-dump

Trace scenario_trace(const RunConfig& config) {
  config.validate();
  const std::vector<std::uint64_t>& lens = config.seq_lens;
  if (config.scenario == "single") {
    return gen_single_sequence(lens.empty() ? kDefaultSingleLen : lens.back());
  }
  if (config.scenario == "mixed-ladder") {
    return gen_mixed_batch(config.seed, MixedBatchMode::kLadder);
  }
  if (config.scenario == "mixed-uniform") {
    return gen_mixed_batch(config.seed, MixedBatchMode::kUniform);
  }
  if (config.scenario == "chat") {
    return lens.empty() ? gen_chat_growth(kDefaultChatStart, kDefaultChatEnd)
                        : gen_chat_growth(lens[0], lens[1]);
  }
  Trace trace;
  trace.scenario = "empty";
  trace.seed = config.seed;
  return trace;
}

MemoryReport run_audit(const RunConfig& config) {
  const Trace trace = scenario_trace(config);
  return account(trace, AccountingConfig{config.page_size, config.max_len,
                                         config.shape});
}

nlohmann::json audit_json(const RunConfig& config, const MemoryReport& report) {
  return {{"report", "memory"},
          {"version", kVersion},
          {"seed", config.seed},
          {"config", config.to_json()},
          {"memory", to_json(report)}};
}

std::string to_csv(const MemoryReport& report) {
  std::ostringstream out;
  out << "event,live_pages,free_pages,never_allocated,valid_tokens,"
         "contiguous_slots\n";
  for (const CensusSample& s : report.series) {
    out << s.event << ',' << s.live_pages << ',' << s.free_pages << ','
        << s.never_allocated << ',' << s.valid_tokens << ','
        << s.contiguous_slots << '\n';
  }
  return out.str();
}

std::string run_trace_dump(const RunConfig& config, bool with_pool) {
  const Trace trace = scenario_trace(config);
  std::string text = to_jsonl(trace);
  if (!with_pool) return text;

  std::uint64_t pages = config.pool_pages;
  if (pages == 0) {
    std::uint64_t tokens = 0;
    std::uint64_t sequences = 0;
    for (const TraceEvent& event : trace.events) {
      if (const auto* a = std::get_if<Arrive>(&event)) {
        tokens += a->prompt_len;
        ++sequences;
      } else if (const auto* d = std::get_if<Decode>(&event)) {
        tokens += d->n_tokens;
      } else if (const auto* f = std::get_if<ForkEvent>(&event)) {
        tokens += f->prefix;
        ++sequences;
      }
    }
    pages = tokens / config.page_size + sequences + 1;
  }
  PageManager manager(pages, config.page_size);
  std::unordered_map<SeqId, std::uint64_t> lens;
  for (const TraceEvent& event : trace.events) {
    if (const auto* a = std::get_if<Arrive>(&event)) {
      manager.reserve(a->seq, a->prompt_len);
      manager.mark_written(a->seq, a->prompt_len);
      lens[a->seq] = a->prompt_len;
    } else if (const auto* d = std::get_if<Decode>(&event)) {
      const std::uint64_t len = lens.at(d->seq) + d->n_tokens;
      manager.grow(d->seq, len);
      manager.mark_written(d->seq, len);
      lens[d->seq] = len;
    } else if (const auto* f = std::get_if<Finish>(&event)) {
      manager.free(f->seq);
      lens.erase(f->seq);
    } else if (const auto* k = std::get_if<ForkEvent>(&event)) {
      manager.fork(k->parent, k->child, k->prefix);
      lens[k->child] = k->prefix;
    }
  }
  manager.check_invariants();
  text += nlohmann::json{{"pool", manager.dump()}}.dump() + "\n";
  return text;
}

// ---------------------------------------------------------------------------
// verify

bool VerifyReport::passed() const {
  return !checks.empty() &&
         std::all_of(checks.begin(), checks.end(),
                     [](const CheckResult& c) { return c.passed; });
}

CheckResult check_block_mask(std::uint64_t seed, std::size_t instances) {
  CheckResult result{"block_mask", true, ""};
  std::mt19937_64 rng(seed);
  InstanceParams params;
  params.max_len = 300;
  for (std::size_t i = 0; i < instances && result.passed; ++i) {
    const AttentionInstance inst = make_attention_instance(rng, params);
    const MaskMeta& meta = inst.meta;
    const BlockMask mask = build_block_mask(meta, inst.config);
    const std::size_t block = mask.block_size();
    const std::size_t queries = meta.query_count();
    const std::size_t slots = meta.kv.total_slots();

    for (std::size_t qb = 0; qb < mask.query_blocks() && result.passed; ++qb) {
      for (std::size_t kb = 0; kb < mask.kv_blocks(); ++kb) {
        std::size_t allowed = 0;
        std::size_t pairs = 0;
        for (std::size_t q = qb * block; q < std::min(queries, (qb + 1) * block); ++q) {
          for (std::size_t k = kb * block; k < std::min(slots, (kb + 1) * block); ++k) {
            ++pairs;
            if (mask_allow(q, k, meta)) ++allowed;
          }
        }
        const BlockKind want = allowed == 0       ? BlockKind::kEmpty
                               : allowed == pairs ? BlockKind::kFull
                                                  : BlockKind::kPartial;
        if (mask.at(qb, kb) != want) {
          result.passed = false;
          result.detail = "instance " + std::to_string(i) + " block (" +
                          std::to_string(qb) + ", " + std::to_string(kb) +
                          ") misclassified";
          break;
        }
      }
    }
    if (!result.passed) break;

    const std::vector<float> skipped = inst.run_paged({&mask, BlockSkipping::kSkipEmpty});
    const std::vector<float> visited = inst.run_paged({&mask, BlockSkipping::kVisitAll});
    if (!std::equal(skipped.begin(), skipped.end(), visited.begin(), visited.end(),
                    [](float a, float b) {
                      return std::bit_cast<std::uint32_t>(a) ==
                             std::bit_cast<std::uint32_t>(b);
                    })) {
      result.passed = false;
      result.detail = "instance " + std::to_string(i) +
                      ": skipping EMPTY blocks changed the output";
    }
  }
  if (result.passed) {
    result.detail = std::to_string(instances) + " instances classified exactly";
  }
  return result;
}

CrossPathResult run_cross_path(const DecoderConfig& model_config,
                               std::size_t steps, std::uint32_t page_size) {
  ToyDecoder model(model_config);
  const std::uint64_t pages = (steps + page_size) / page_size + 1;
  PageManager manager(pages, page_size);
  KvStore store(pages, page_size, model.kv_layout());
  KvCache cache(manager, store);
  DecodeSession session(model, cache, SeqId{0});

  CrossPathResult result;
  std::vector<Token> context{
      static_cast<Token>(model_config.seed % model_config.vocab)};
  for (std::size_t i = 0; i < steps; ++i) {
    const std::vector<float> paged = session.step(context.back());
    const std::vector<float> dense = model.decode_step_nocache(context);
    double diff = 0.0;
    double scale = 0.0;
    for (std::size_t v = 0; v < dense.size(); ++v) {
      diff = std::max(diff, std::abs(static_cast<double>(paged[v]) - dense[v]));
      scale = std::max(scale, std::abs(static_cast<double>(dense[v])));
    }
    result.worst_logit_error =
        std::max(result.worst_logit_error, scale > 0.0 ? diff / scale : diff);

    const Token a = argmax(paged);
    const Token b = argmax(dense);
    if (a != b && result.tokens_match) {
      result.tokens_match = false;
      result.first_divergence = i;
      result.logit_gap_at_divergence =
          std::abs(static_cast<double>(dense[static_cast<std::size_t>(b)]) -
                   dense[static_cast<std::size_t>(a)]);
    }
    context.push_back(a);
  }
  return result;
}

VerifyReport run_verify(const RunConfig& config) {
  config.validate();
  VerifyReport report;

  {
    constexpr double kTolerance = 1e-5;
    const EquivalenceSummary s = run_oracle_equivalence(
        config.seed, config.instances, InstanceParams{}, kTolerance,
        config.corrupt_table);
    std::ostringstream detail;
    detail << s.instances << " instances, worst relative error " << s.worst_error
           << ", " << s.failures << " above " << kTolerance;
    report.checks.push_back(
        {"oracle_equivalence", s.failures == 0 && s.instances > 0, detail.str()});
  }

  report.checks.push_back(
      check_block_mask(config.seed + 1, std::min<std::size_t>(config.instances, 50)));

  {
    ScriptParams params;
    params.operations = config.script_operations;
    const ScriptReport s = run_allocator_script(config.seed + 2, params);
    std::ostringstream detail;
    if (!s.ok) {
      detail << s.failure;
    } else {
      detail << s.operations << " operations, " << s.capacity_errors
             << " atomic capacity errors, " << s.double_free_rejections
             << " rejected double frees";
    }
    report.checks.push_back({"allocator_script", s.ok, detail.str()});
  }

  {
    CheckResult check{"prefix_sharing", true, ""};
    for (std::size_t t = 0; t < config.prefix_trials; ++t) {
      const PrefixTrialReport r = run_prefix_sharing_trial(config.seed * 7919 + t);
      if (!r.ok) {
        check.passed = false;
        check.detail = "trial " + std::to_string(t) + ": " + r.failure;
        break;
      }
    }
    if (check.passed) {
      check.detail = std::to_string(config.prefix_trials) + " trials";
    }
    report.checks.push_back(check);
  }

  {
    constexpr double kTolerance = 1e-4;
    DecoderConfig model = config.model;
    model.seed = config.seed;
    const CrossPathResult r = run_cross_path(model, 64, config.page_size);
    std::ostringstream detail;
    detail << "worst logit error " << r.worst_logit_error;
    if (!r.tokens_match) {
      detail << ", tokens diverge at step " << r.first_divergence
             << " with logit gap " << r.logit_gap_at_divergence;
    }
    report.checks.push_back({"decoder_cross_path",
                             r.tokens_match && r.worst_logit_error <= kTolerance,
                             detail.str()});
  }
  return report;
}

nlohmann::json to_json(const VerifyReport& report, const RunConfig& config) {
  auto checks = nlohmann::json::array();
  for (const CheckResult& c : report.checks) {
    checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  }
  return {{"report", "verify"},
          {"version", kVersion},
          {"seed", config.seed},
          {"config", config.to_json()},
          {"passed", report.passed()},
          {"checks", checks}};
}

std::string to_csv(const VerifyReport& report) {
  std::ostringstream out;
  out << "check,passed,detail\n";
  for (const CheckResult& c : report.checks) {
    std::string detail = c.detail;
    std::replace(detail.begin(), detail.end(), ',', ';');
    out << c.name << ',' << (c.passed ? "true" : "false") << ',' << detail << '\n';
  }
  return out.str();
}

}  // namespace pagedkv
