#include "pagedkv/verification.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "pagedkv/error.h"

namespace pagedkv {

namespace {

template <class T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& items) {
  return items[rng() % items.size()];
}

std::vector<float> random_rows(std::mt19937_64& rng, std::size_t count) {
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> rows(count);
  for (float& v : rows) v = dist(rng);
  return rows;
}

// Fills the free stack with every page in random order.
void scramble_pool(PageManager& manager, std::mt19937_64& rng) {
  const std::uint64_t pages = manager.pool().capacity_pages();
  constexpr std::uint64_t kScratchBase = 1ULL << 62;
  std::vector<SeqId> scratch;
  for (std::uint64_t i = 0; i < pages; ++i) {
    scratch.push_back(SeqId{kScratchBase + i});
    manager.reserve(scratch.back(), manager.page_size());
  }
  for (std::size_t i = scratch.size(); i > 1; --i) {
    std::swap(scratch[i - 1], scratch[rng() % i]);
  }
  for (SeqId id : scratch) manager.free(id);
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

std::vector<float> AttentionInstance::run_paged(
    const AttentionOptions& options) const {
  return paged_attention(queries, *cache, 0, meta, config, options);
}

std::vector<double> AttentionInstance::run_reference() const {
  return reference_attention(queries, query_refs, keys, values, lengths, config);
}

AttentionInstance make_attention_instance(std::mt19937_64& rng,
                                          const InstanceParams& params) {
  AttentionInstance inst;
  inst.config.page_size = pick(rng, params.page_sizes);
  inst.config.head_count = pick(rng, params.head_counts);
  inst.config.head_dim = pick(rng, params.head_dims);
  inst.config.causal =
      params.force_causal < 0 ? (rng() & 1) != 0 : params.force_causal != 0;
  const std::uint32_t page = inst.config.page_size;
  const std::size_t width = inst.config.row_width();

  const std::uint32_t span = params.max_sequences - params.min_sequences + 1;
  const std::uint32_t count = params.min_sequences + static_cast<std::uint32_t>(rng() % span);
  std::uint64_t pages = 0;
  for (std::uint32_t s = 0; s < count; ++s) {
    inst.lengths.push_back(1 + rng() % params.max_len);
    pages += (inst.lengths.back() + page - 1) / page;
  }

  const std::uint64_t capacity = pages + count + 4;
  inst.manager = std::make_unique<PageManager>(capacity, page);
  inst.store = std::make_unique<KvStore>(
      capacity, page, KvLayout{1, inst.config.head_count, inst.config.head_dim});
  inst.cache = std::make_unique<KvCache>(*inst.manager, *inst.store);
  if (params.scatter) scramble_pool(*inst.manager, rng);

  for (std::uint32_t s = 0; s < count; ++s) {
    const SeqId id{s};
    const std::uint64_t len = inst.lengths[s];
    inst.sequences.push_back(id);
    inst.manager->reserve(id, len);
    const std::vector<float> k = random_rows(rng, len * width);
    const std::vector<float> v = random_rows(rng, len * width);
    std::vector<std::size_t> positions(len);
    for (std::size_t t = 0; t < len; ++t) positions[t] = t;
    inst.cache->assign(id, positions, k, v);
    inst.keys.insert(inst.keys.end(), k.begin(), k.end());
    inst.values.insert(inst.values.end(), v.begin(), v.end());
  }

  MaskMeta meta;
  meta.kv = inst.cache->build_batch_view(inst.sequences, inst.lengths);
  meta.causal = inst.config.causal;
  for (std::uint32_t s = 0; s < count; ++s) {
    const std::uint64_t len = inst.lengths[s];
    std::vector<std::uint64_t> positions;
    for (std::uint32_t i = 0; i < params.queries_per_sequence; ++i) {
      positions.push_back(rng() % len);
    }
    positions.push_back(len - 1);
    for (std::uint64_t pos : positions) {
      meta.query_sequence.push_back(s);
      meta.query_positions.push_back(pos);
      inst.query_refs.push_back(QueryRef{s, pos});
    }
  }
  inst.queries = random_rows(rng, inst.query_refs.size() * width);
  inst.meta = std::move(meta);
  return inst;
}

double max_relative_error(std::span<const float> got,
                          std::span<const double> want, std::size_t head_dim) {
  if (got.size() != want.size() || head_dim == 0 || got.size() % head_dim != 0) {
    throw Error(ErrorCode::kShapeMismatch, "error metric operand sizes");
  }
  double worst = 0.0;
  for (std::size_t base = 0; base < got.size(); base += head_dim) {
    double diff = 0.0;
    double scale = 0.0;
    for (std::size_t i = base; i < base + head_dim; ++i) {
      diff = std::max(diff, std::abs(static_cast<double>(got[i]) - want[i]));
      scale = std::max(scale, std::abs(want[i]));
    }
    const double err = scale > 0.0 ? diff / scale : diff;
    if (std::isnan(err)) return err;
    worst = std::max(worst, err);
  }
  return worst;
}

EquivalenceSummary run_oracle_equivalence(std::uint64_t seed,
                                          std::size_t instances,
                                          const InstanceParams& params,
                                          double tolerance, bool corrupt_table) {
  std::mt19937_64 rng(seed);
  EquivalenceSummary summary;
  for (std::size_t i = 0; i < instances; ++i) {
    AttentionInstance inst = make_attention_instance(rng, params);
    if (corrupt_table) {
      const SeqId victim = inst.sequences.front();
      const PageId entry = inst.manager->table(victim).entries.front();
      const auto capacity = static_cast<PageId>(inst.manager->pool().capacity_pages());
      inst.manager->debug_overwrite_entry(victim, 0, (entry + 1) % capacity);
    }
    const double err = max_relative_error(inst.run_paged(), inst.run_reference(),
                                          inst.config.head_dim);
    ++summary.instances;
    if (!(err <= tolerance)) ++summary.failures;
    if (std::isnan(err)) {
      summary.worst_error = err;
    } else if (!std::isnan(summary.worst_error)) {
      summary.worst_error = std::max(summary.worst_error, err);
    }
  }
  return summary;
}

namespace {

struct MirrorSequence {
  std::vector<float> keys;
  std::vector<float> values;
  std::size_t len = 0;
};

class ScriptRunner {
 public:
  ScriptRunner(std::uint64_t seed, const ScriptParams& params)
      : params_(params),
        rng_(seed),
        manager_(params.pool_pages, params.page_size),
        store_(params.pool_pages, params.page_size, KvLayout{1, 1, params.row_width}),
        cache_(manager_, store_) {}

  ScriptReport run() {
    try {
      for (std::size_t op = 0; op < params_.operations && report_.ok; ++op) {
        step();
        ++report_.operations;
        manager_.check_invariants();
        if (op % 100 == 99) check_all();
      }
      if (report_.ok) check_all();
    } catch (const Error& e) {
      fail(std::string("unexpected error: ") + e.what());
    }
    return report_;
  }

 private:
  void fail(const std::string& why) {
    if (report_.ok) {
      report_.ok = false;
      report_.failure = "op " + std::to_string(report_.operations) + ": " + why;
    }
  }

  SeqId random_live() {
    auto it = mirror_.begin();
    std::advance(it, static_cast<std::ptrdiff_t>(rng_() % mirror_.size()));
    return it->first;
  }

  std::size_t capacity(SeqId seq) const {
    return manager_.table(seq).capacity(params_.page_size);
  }

  // Runs `op`, expecting either success or an atomic CapacityExhausted.
  template <class Fn>
  bool attempt(Fn&& op) {
    const nlohmann::json before = manager_.dump();
    try {
      op();
      return true;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kCapacityExhausted) throw;
      ++report_.capacity_errors;
      if (manager_.dump() != before) fail("capacity error left partial state");
      return false;
    }
  }

  void step() {
    const unsigned roll = mirror_.empty() ? 0 : static_cast<unsigned>(rng_() % 100);
    if (roll < 15) {
      if (mirror_.size() >= params_.max_live) return do_free();
      return do_reserve();
    }
    if (roll < 30) return do_grow();
    if (roll < 55) return do_assign();
    if (roll < 75) return do_gather();
    if (roll < 87) return do_free();
    if (roll < 97) return do_fork();
    return do_stale_free();
  }

  void do_reserve() {
    const SeqId seq{next_id_++};
    const std::size_t len = rng_() % (params_.max_reserve + 1);
    if (attempt([&] { manager_.reserve(seq, len); })) {
      ++report_.reserves;
      mirror_[seq] = MirrorSequence{};
      if (manager_.table(seq).entries.size() !=
          (len + params_.page_size - 1) / params_.page_size) {
        fail("reserve granted the wrong page count");
      }
    }
  }

  void do_grow() {
    const SeqId seq = random_live();
    const std::size_t target = capacity(seq) + rng_() % (3 * params_.page_size);
    if (attempt([&] { manager_.grow(seq, target); })) ++report_.grows;
  }

  void do_assign() {
    const SeqId seq = random_live();
    MirrorSequence& m = mirror_[seq];
    const std::size_t cap = capacity(seq);
    std::vector<std::size_t> positions;
    if (m.len > 0 && (rng_() & 1)) {
      const std::size_t n = 1 + rng_() % 4;
      for (std::size_t i = 0; i < n; ++i) positions.push_back(rng_() % m.len);
    } else {
      const std::size_t n = std::min<std::size_t>(1 + rng_() % (2 * params_.page_size),
                                                  cap - m.len);
      for (std::size_t i = 0; i < n; ++i) positions.push_back(m.len + i);
    }
    if (positions.empty()) return;
    const std::size_t width = params_.row_width;
    const std::vector<float> k = random_rows(rng_, positions.size() * width);
    const std::vector<float> v = random_rows(rng_, positions.size() * width);
    if (!attempt([&] { cache_.assign(seq, positions, k, v); })) return;
    ++report_.assigns;
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const std::size_t t = positions[i];
      if (t >= m.len) {
        m.len = t + 1;
        m.keys.resize(m.len * width);
        m.values.resize(m.len * width);
      }
      std::copy_n(k.begin() + static_cast<std::ptrdiff_t>(i * width), width,
                  m.keys.begin() + static_cast<std::ptrdiff_t>(t * width));
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * width), width,
                  m.values.begin() + static_cast<std::ptrdiff_t>(t * width));
    }
  }

  bool matches(SeqId seq, std::size_t len) {
    const MirrorSequence& m = mirror_.at(seq);
    const KvRows rows = cache_.gather(seq, len);
    const std::size_t n = len * params_.row_width;
    return same_bits(rows.keys, std::span<const float>(m.keys).first(n)) &&
           same_bits(rows.values, std::span<const float>(m.values).first(n));
  }

  void do_gather() {
    const SeqId seq = random_live();
    const std::size_t len = mirror_[seq].len;
    ++report_.gathers;
    if (!matches(seq, rng_() % (len + 1))) {
      fail("gather differs from mirror for sequence " +
           std::to_string(to_underlying(seq)));
    }
    try {
      cache_.gather(seq, len + 1);
      fail("gather past the written length succeeded");
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kOutOfRange) throw;
    }
  }

  void do_free() {
    const SeqId seq = random_live();
    manager_.free(seq);
    mirror_.erase(seq);
    freed_.push_back(seq);
    ++report_.frees;
  }

  void do_stale_free() {
    if (freed_.empty()) return;
    const SeqId seq = freed_[rng_() % freed_.size()];
    try {
      manager_.free(seq);
      fail("second free of a sequence succeeded");
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kUnknownSequence) throw;
      ++report_.double_free_rejections;
    }
  }

  void do_fork() {
    if (mirror_.size() >= params_.max_live) return;
    const SeqId parent = random_live();
    const MirrorSequence& m = mirror_[parent];
    const std::size_t prefix = rng_() % (m.len + 1);
    const SeqId child{next_id_++};
    if (!attempt([&] { manager_.fork(parent, child, prefix); })) return;
    ++report_.forks;
    MirrorSequence copy;
    copy.len = prefix;
    const auto n = static_cast<std::ptrdiff_t>(prefix * params_.row_width);
    copy.keys.assign(m.keys.begin(), m.keys.begin() + n);
    copy.values.assign(m.values.begin(), m.values.begin() + n);
    mirror_[child] = std::move(copy);
  }

  void check_all() {
    for (const auto& [seq, m] : mirror_) {
      if (!matches(seq, m.len)) {
        fail("sequence " + std::to_string(to_underlying(seq)) +
             " diverged from its mirror");
        return;
      }
    }
  }

  ScriptParams params_;
  std::mt19937_64 rng_;
  PageManager manager_;
  KvStore store_;
  KvCache cache_;
  std::map<SeqId, MirrorSequence> mirror_;
  std::vector<SeqId> freed_;
  std::uint64_t next_id_ = 0;
  ScriptReport report_;
};

}  // namespace

ScriptReport run_allocator_script(std::uint64_t seed, const ScriptParams& params) {
  return ScriptRunner(seed, params).run();
}

PrefixTrialReport run_prefix_sharing_trial(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  constexpr std::uint32_t kWidth = 4;
  const std::uint32_t page = std::vector<std::uint32_t>{4, 8, 16}[rng() % 3];
  const std::uint64_t pool_pages = 64;
  PageManager manager(pool_pages, page);
  KvStore store(pool_pages, page, KvLayout{1, 1, kWidth});
  KvCache cache(manager, store);
  PrefixTrialReport report;

  const SeqId parent{1};
  const SeqId child{2};
  const std::size_t len = 1 + rng() % (6 * page);
  std::map<SeqId, std::vector<float>> keys;
  std::map<SeqId, std::vector<float>> values;

  auto write = [&](SeqId seq, std::vector<std::size_t> positions) {
    const std::vector<float> k = random_rows(rng, positions.size() * kWidth);
    const std::vector<float> v = random_rows(rng, positions.size() * kWidth);
    cache.assign(seq, positions, k, v);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const std::size_t t = positions[i];
      if ((t + 1) * kWidth > keys[seq].size()) {
        keys[seq].resize((t + 1) * kWidth);
        values[seq].resize((t + 1) * kWidth);
      }
      std::copy_n(k.begin() + static_cast<std::ptrdiff_t>(i * kWidth), kWidth,
                  keys[seq].begin() + static_cast<std::ptrdiff_t>(t * kWidth));
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * kWidth), kWidth,
                  values[seq].begin() + static_cast<std::ptrdiff_t>(t * kWidth));
    }
  };
  auto consistent = [&](SeqId seq) {
    const std::size_t n = manager.table(seq).logical_len;
    const KvRows rows = cache.gather(seq, n);
    return same_bits(rows.keys, keys[seq]) && same_bits(rows.values, values[seq]);
  };

  try {
    manager.reserve(parent, len);
    std::vector<std::size_t> all(len);
    for (std::size_t t = 0; t < len; ++t) all[t] = t;
    write(parent, all);

    const std::size_t blocks = len / page;
    const std::size_t prefix = page * (blocks == 0 ? 0 : 1 + rng() % blocks);
    const std::uint64_t live_before = manager.pool().live_pages();
    manager.fork(parent, child, prefix);
    report.pages_taken_by_fork = manager.pool().live_pages() - live_before;
    if (report.pages_taken_by_fork != 0) {
      report.ok = false;
      report.failure = "block-aligned fork allocated pages";
      return report;
    }
    keys[child].assign(keys[parent].begin(),
                       keys[parent].begin() + static_cast<std::ptrdiff_t>(prefix * kWidth));
    values[child].assign(values[parent].begin(),
                         values[parent].begin() + static_cast<std::ptrdiff_t>(prefix * kWidth));

    for (int op = 0; op < 24; ++op) {
      const SeqId seq = (rng() & 1) ? parent : child;
      const std::size_t cur = manager.table(seq).logical_len;
      if (cur > 0 && (rng() & 1)) {
        write(seq, {rng() % cur});
      } else {
        const std::size_t n = 1 + rng() % page;
        manager.grow(seq, cur + n);
        std::vector<std::size_t> positions(n);
        for (std::size_t i = 0; i < n; ++i) positions[i] = cur + i;
        write(seq, positions);
      }
      if (!consistent(parent) || !consistent(child)) {
        report.ok = false;
        report.failure = "write leaked across the fork at op " + std::to_string(op);
        return report;
      }
    }
    manager.check_invariants();
  } catch (const Error& e) {
    report.ok = false;
    report.failure = e.what();
  }
  return report;
}

}  // namespace pagedkv
