#include "pagedkv/workload.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

#include "pagedkv/error.h"
#include "pagedkv/page_manager.h"

namespace pagedkv {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string seq_text(SeqId seq) {
  return std::to_string(to_underlying(seq));
}

[[noreturn]] void invalid(std::size_t index, const std::string& why) {
  throw Error(ErrorCode::kInvalidTrace,
              "event " + std::to_string(index) + ": " + why);
}

nlohmann::json event_to_json(const TraceEvent& event) {
  return std::visit(
      Overloaded{
          [](const Arrive& e) -> nlohmann::json {
            return {{"event", "arrive"},
                    {"seq", to_underlying(e.seq)},
                    {"prompt_len", e.prompt_len}};
          },
          [](const Decode& e) -> nlohmann::json {
            return {{"event", "decode"},
                    {"seq", to_underlying(e.seq)},
                    {"n_tokens", e.n_tokens}};
          },
          [](const Finish& e) -> nlohmann::json {
            return {{"event", "finish"}, {"seq", to_underlying(e.seq)}};
          },
          [](const ForkEvent& e) -> nlohmann::json {
            return {{"event", "fork"},
                    {"parent", to_underlying(e.parent)},
                    {"child", to_underlying(e.child)},
                    {"prefix", e.prefix}};
          },
      },
      event);
}

TraceEvent event_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("event").get<std::string>();
  if (kind == "arrive") {
    return Arrive{SeqId{j.at("seq").get<std::uint64_t>()},
                  j.at("prompt_len").get<std::uint64_t>()};
  }
  if (kind == "decode") {
    return Decode{SeqId{j.at("seq").get<std::uint64_t>()},
                  j.at("n_tokens").get<std::uint64_t>()};
  }
  if (kind == "finish") return Finish{SeqId{j.at("seq").get<std::uint64_t>()}};
  if (kind == "fork") {
    return ForkEvent{SeqId{j.at("parent").get<std::uint64_t>()},
                     SeqId{j.at("child").get<std::uint64_t>()},
                     j.at("prefix").get<std::uint64_t>()};
  }
  throw Error(ErrorCode::kInvalidTrace, "unknown event kind '" + kind + "'");
}

// Fisher-Yates on the raw engine output so orderings do not depend on the
// standard library's distribution implementations.
template <class T>
void seeded_shuffle(std::vector<T>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[rng() % i]);
  }
}

}  // namespace

void validate(const Trace& trace) {
  std::unordered_map<SeqId, std::uint64_t> live;
  for (std::size_t i = 0; i < trace.events.size(); ++i) {
    std::visit(
        Overloaded{
            [&](const Arrive& e) {
              if (!live.try_emplace(e.seq, e.prompt_len).second) {
                invalid(i, "sequence " + seq_text(e.seq) + " already live");
              }
            },
            [&](const Decode& e) {
              auto it = live.find(e.seq);
              if (it == live.end()) {
                invalid(i, "decode on dead sequence " + seq_text(e.seq));
              }
              it->second += e.n_tokens;
            },
            [&](const Finish& e) {
              if (live.erase(e.seq) == 0) {
                invalid(i, "finish of dead sequence " + seq_text(e.seq));
              }
            },
            [&](const ForkEvent& e) {
              auto it = live.find(e.parent);
              if (it == live.end()) {
                invalid(i, "fork of dead sequence " + seq_text(e.parent));
              }
              if (e.prefix > it->second) {
                invalid(i, "fork prefix beyond parent length");
              }
              const std::uint64_t prefix = e.prefix;
              if (!live.try_emplace(e.child, prefix).second) {
                invalid(i, "fork child " + seq_text(e.child) + " already live");
              }
            },
        },
        trace.events[i]);
  }
}

std::string to_jsonl(const Trace& trace) {
  std::string out = nlohmann::json{{"scenario", trace.scenario},
                                   {"seed", trace.seed},
                                   {"events", trace.events.size()}}
                        .dump();
  out += '\n';
  for (const TraceEvent& event : trace.events) {
    out += event_to_json(event).dump();
    out += '\n';
  }
  return out;
}

Trace trace_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  Trace trace;
  bool header = true;
  std::size_t expected = 0;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const nlohmann::json j = nlohmann::json::parse(line);
      if (header) {
        trace.scenario = j.at("scenario").get<std::string>();
        trace.seed = j.at("seed").get<std::uint64_t>();
        expected = j.at("events").get<std::size_t>();
        header = false;
        continue;
      }
      trace.events.push_back(event_from_json(j));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidTrace, e.what());
  }
  if (header || trace.events.size() != expected) {
    throw Error(ErrorCode::kInvalidTrace, "truncated trace");
  }
  return trace;
}

std::uint64_t trace_hash(const Trace& trace) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_jsonl(trace)) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

Trace gen_single_sequence(std::uint64_t len) {
  Trace trace;
  trace.scenario = "single";
  trace.events.push_back(Arrive{SeqId{0}, 0});
  if (len > 0) trace.events.push_back(Decode{SeqId{0}, len});
  return trace;
}

Trace gen_mixed_batch(std::uint64_t seed, MixedBatchMode mode) {
  constexpr std::uint64_t kPrompts = 16;
  std::mt19937_64 rng(seed);
  Trace trace;
  trace.seed = seed;
  trace.scenario = mode == MixedBatchMode::kLadder ? "mixed-ladder" : "mixed-uniform";

  for (std::uint64_t i = 0; i < kPrompts; ++i) {
    const std::uint64_t len = mode == MixedBatchMode::kLadder
                                  ? 500 * (i + 1)
                                  : 256 * (1 + rng() % 16);
    trace.events.push_back(Arrive{SeqId{i}, len});
  }
  std::vector<std::uint64_t> order(kPrompts);
  for (std::uint64_t i = 0; i < kPrompts; ++i) order[i] = i;
  seeded_shuffle(order, rng);
  for (std::uint64_t i : order) trace.events.push_back(Finish{SeqId{i}});
  return trace;
}

Trace gen_chat_growth(std::uint64_t start, std::uint64_t end,
                      double step_factor) {
  if (start == 0 || end < start) {
    throw Error(ErrorCode::kInvalidConfig, "chat growth needs 0 < start <= end");
  }
  if (end > start && !(step_factor > 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "step factor must exceed 1");
  }
  Trace trace;
  trace.scenario = "chat";
  trace.events.push_back(Arrive{SeqId{0}, start});
  std::uint64_t context = start;
  while (context < end) {
    const auto scaled = static_cast<std::uint64_t>(
        std::ceil(static_cast<double>(context) * step_factor));
    const std::uint64_t next = std::min(end, std::max(scaled, context + 1));
    trace.events.push_back(Decode{SeqId{0}, next - context});
    context = next;
  }
  return trace;
}

namespace {

// A run of token positions [start, end) first produced by `owner`.
struct Segment {
  std::uint64_t owner = 0;
  std::uint64_t start = 0;
  std::uint64_t end = 0;
};

struct LiveSequence {
  std::uint64_t instance = 0;
  std::uint64_t len = 0;
  std::vector<Segment> segments;
};

void extend(LiveSequence& seq, std::uint64_t n) {
  if (n == 0) return;
  if (!seq.segments.empty() && seq.segments.back().owner == seq.instance) {
    seq.segments.back().end += n;
  } else {
    seq.segments.push_back(Segment{seq.instance, seq.len, seq.len + n});
  }
  seq.len += n;
}

std::uint64_t distinct_tokens(
    const std::unordered_map<SeqId, LiveSequence>& live) {
  // Every reference to an owner's tokens starts at the owner's first own
  // position, so the union per owner is one interval.
  std::map<std::uint64_t, std::pair<std::uint64_t, std::uint64_t>> owners;
  for (const auto& [id, seq] : live) {
    for (const Segment& s : seq.segments) {
      auto [it, fresh] = owners.try_emplace(s.owner, s.start, s.end);
      if (!fresh) it->second.second = std::max(it->second.second, s.end);
    }
  }
  std::uint64_t total = 0;
  for (const auto& [owner, span] : owners) total += span.second - span.first;
  return total;
}

double overhead_pct(std::uint64_t peak, std::uint64_t minimum) {
  if (minimum == 0) return 0.0;
  return (static_cast<double>(peak) / static_cast<double>(minimum) - 1.0) * 100.0;
}

double waste_pct(std::uint64_t peak, std::uint64_t minimum) {
  if (peak == 0) return 0.0;
  return (1.0 - static_cast<double>(minimum) / static_cast<double>(peak)) * 100.0;
}

}  // namespace

MemoryReport account(const Trace& trace, const AccountingConfig& config) {
  validate(trace);
  const std::uint64_t page = config.page_size;

  // Longest sequence and an upper bound on pages ever needed at once.
  std::uint64_t longest = 0;
  std::uint64_t page_bound = 0;
  {
    std::unordered_map<SeqId, std::uint64_t> lens;
    auto retire = [&](std::uint64_t len) {
      longest = std::max(longest, len);
      page_bound += (len + page - 1) / std::max<std::uint64_t>(page, 1) + 1;
    };
    for (const TraceEvent& event : trace.events) {
      std::visit(Overloaded{
                     [&](const Arrive& e) { lens[e.seq] = e.prompt_len; },
                     [&](const Decode& e) { lens[e.seq] += e.n_tokens; },
                     [&](const Finish& e) {
                       retire(lens[e.seq]);
                       lens.erase(e.seq);
                     },
                     [&](const ForkEvent& e) { lens[e.child] = e.prefix; },
                 },
                 event);
    }
    for (const auto& [id, len] : lens) retire(len);
  }

  MemoryReport report;
  report.page_size = config.page_size;
  report.max_len = config.max_len == 0 ? longest : config.max_len;
  report.shape = config.shape;
  if (longest > report.max_len) {
    throw Error(ErrorCode::kInvalidTrace,
                "a sequence reaches " + std::to_string(longest) +
                    " tokens, beyond the contiguous max_len " +
                    std::to_string(report.max_len));
  }

  PageManager manager(page_bound, config.page_size);
  std::unordered_map<SeqId, LiveSequence> live;
  std::uint64_t next_instance = 0;
  std::uint64_t shortest = 0;

  for (std::size_t i = 0; i < trace.events.size(); ++i) {
    std::visit(
        Overloaded{
            [&](const Arrive& e) {
              manager.reserve(e.seq, e.prompt_len);
              manager.mark_written(e.seq, e.prompt_len);
              LiveSequence& seq = live[e.seq];
              seq.instance = next_instance++;
              extend(seq, e.prompt_len);
            },
            [&](const Decode& e) {
              LiveSequence& seq = live.at(e.seq);
              manager.grow(e.seq, seq.len + e.n_tokens);
              manager.mark_written(e.seq, seq.len + e.n_tokens);
              extend(seq, e.n_tokens);
            },
            [&](const Finish& e) {
              manager.free(e.seq);
              live.erase(e.seq);
            },
            [&](const ForkEvent& e) {
              manager.fork(e.parent, e.child, e.prefix);
              const LiveSequence& parent = live.at(e.parent);
              LiveSequence child;
              child.instance = next_instance++;
              child.len = e.prefix;
              for (const Segment& s : parent.segments) {
                if (s.start >= e.prefix) break;
                child.segments.push_back(
                    Segment{s.owner, s.start, std::min(s.end, e.prefix)});
              }
              live[e.child] = std::move(child);
            },
        },
        trace.events[i]);

    CensusSample sample;
    sample.event = i;
    sample.live_pages = manager.pool().live_pages();
    sample.never_allocated =
        manager.pool().capacity_pages() - manager.pool().bump_cursor();
    sample.free_pages =
        manager.pool().capacity_pages() - sample.live_pages - sample.never_allocated;
    sample.valid_tokens = distinct_tokens(live);
    sample.contiguous_slots = live.size() * report.max_len;
    report.series.push_back(sample);

    report.peak_tokens_paged =
        std::max(report.peak_tokens_paged, sample.live_pages * page);
    report.peak_tokens_contiguous =
        std::max(report.peak_tokens_contiguous, sample.contiguous_slots);
    report.theoretical_min_tokens =
        std::max(report.theoretical_min_tokens, sample.valid_tokens);
    for (const auto& [id, seq] : live) {
      if (seq.len > 0 && (shortest == 0 || seq.len < shortest)) shortest = seq.len;
    }
  }
  manager.check_invariants();

  report.min_sequence_length = shortest;
  const std::uint64_t per_token = config.shape.bytes_per_token();
  report.peak_bytes_paged = report.peak_tokens_paged * per_token;
  report.peak_bytes_contiguous = report.peak_tokens_contiguous * per_token;
  report.theoretical_min_bytes = report.theoretical_min_tokens * per_token;
  report.kv_bytes_per_layer =
      report.theoretical_min_tokens * config.shape.bytes_per_token_per_layer();
  report.overhead_pct_paged =
      overhead_pct(report.peak_tokens_paged, report.theoretical_min_tokens);
  report.overhead_pct_contiguous =
      overhead_pct(report.peak_tokens_contiguous, report.theoretical_min_tokens);
  report.waste_pct_paged =
      waste_pct(report.peak_tokens_paged, report.theoretical_min_tokens);
  report.waste_pct_contiguous =
      waste_pct(report.peak_tokens_contiguous, report.theoretical_min_tokens);
  return report;
}

nlohmann::json to_json(const MemoryReport& report) {
  auto series = nlohmann::json::array();
  for (const CensusSample& s : report.series) {
    series.push_back({{"event", s.event},
                      {"live_pages", s.live_pages},
                      {"free_pages", s.free_pages},
                      {"never_allocated", s.never_allocated},
                      {"valid_tokens", s.valid_tokens},
                      {"contiguous_slots", s.contiguous_slots}});
  }
  const double fp32_scale = 4.0 / report.shape.bytes_per_scalar;
  return {
      {"page_size", report.page_size},
      {"max_len", report.max_len},
      {"shape",
       {{"layers", report.shape.layers},
        {"head_count", report.shape.head_count},
        {"head_dim", report.shape.head_dim},
        {"bytes_per_scalar", report.shape.bytes_per_scalar}}},
      {"tokens",
       {{"peak_paged", report.peak_tokens_paged},
        {"peak_contiguous", report.peak_tokens_contiguous},
        {"theoretical_min", report.theoretical_min_tokens},
        {"min_sequence_length", report.min_sequence_length}}},
      {"bytes",
       {{"peak_paged", report.peak_bytes_paged},
        {"peak_contiguous", report.peak_bytes_contiguous},
        {"theoretical_min", report.theoretical_min_bytes},
        {"kv_per_layer", report.kv_bytes_per_layer}}},
      {"bytes_fp32",
       {{"peak_paged", static_cast<std::uint64_t>(report.peak_bytes_paged * fp32_scale)},
        {"peak_contiguous",
         static_cast<std::uint64_t>(report.peak_bytes_contiguous * fp32_scale)},
        {"theoretical_min",
         static_cast<std::uint64_t>(report.theoretical_min_bytes * fp32_scale)},
        {"kv_per_layer",
         static_cast<std::uint64_t>(report.kv_bytes_per_layer * fp32_scale)}}},
      {"overhead_pct",
       {{"paged", report.overhead_pct_paged},
        {"contiguous", report.overhead_pct_contiguous}}},
      {"waste_pct",
       {{"paged", report.waste_pct_paged},
        {"contiguous", report.waste_pct_contiguous}}},
      {"series", std::move(series)},
  };
}

}  // namespace pagedkv
