#include "pagedkv/paged_attention.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "pagedkv/error.h"

namespace pagedkv {

float AttentionConfig::effective_scale() const {
  if (scale > 0.0f) return scale;
  return 1.0f / std::sqrt(static_cast<float>(head_dim));
}

void AttentionConfig::validate() const {
  if (head_count == 0 || head_dim == 0) {
    throw Error(ErrorCode::kInvalidConfig, "head count and dim must be positive");
  }
  if (page_size == 0 || !std::has_single_bit(page_size)) {
    throw Error(ErrorCode::kInvalidConfig, "page size must be a power of two");
  }
  if (!std::isfinite(scale)) {
    throw Error(ErrorCode::kInvalidConfig, "scale must be finite");
  }
}

void MaskMeta::validate() const {
  kv.validate();
  if (query_positions.size() != query_sequence.size()) {
    throw Error(ErrorCode::kShapeMismatch, "query vectors disagree");
  }
  for (std::size_t q = 0; q < query_sequence.size(); ++q) {
    const std::uint32_t s = query_sequence[q];
    if (s >= kv.sequences.size()) {
      throw Error(ErrorCode::kShapeMismatch,
                  "query " + std::to_string(q) + " names no batch sequence");
    }
    if (query_positions[q] >= kv.lengths[s]) {
      throw Error(ErrorCode::kOutOfRange,
                  "query " + std::to_string(q) + " position " +
                      std::to_string(query_positions[q]) +
                      " beyond sequence length " + std::to_string(kv.lengths[s]));
    }
  }
}

MaskMeta make_decode_meta(BatchView kv, bool causal) {
  MaskMeta meta;
  for (std::size_t s = 0; s < kv.sequences.size(); ++s) {
    if (kv.lengths[s] == 0) continue;
    meta.query_sequence.push_back(static_cast<std::uint32_t>(s));
    meta.query_positions.push_back(kv.lengths[s] - 1);
  }
  meta.kv = std::move(kv);
  meta.causal = causal;
  return meta;
}

MaskMeta make_prefill_meta(BatchView kv, bool causal) {
  MaskMeta meta;
  for (std::size_t s = 0; s < kv.sequences.size(); ++s) {
    for (std::uint64_t t = 0; t < kv.lengths[s]; ++t) {
      meta.query_sequence.push_back(static_cast<std::uint32_t>(s));
      meta.query_positions.push_back(t);
    }
  }
  meta.kv = std::move(kv);
  meta.causal = causal;
  return meta;
}

bool mask_allow(std::size_t q_index, std::size_t k_index, const MaskMeta& meta) {
  if (q_index >= meta.query_count() || k_index >= meta.kv.total_slots()) {
    throw Error(ErrorCode::kOutOfRange,
                "mask index (" + std::to_string(q_index) + ", " +
                    std::to_string(k_index) + ") outside the batch");
  }
  const std::uint32_t s = meta.query_sequence[q_index];
  if (meta.kv.sequences[s] != meta.kv.slot_seq_ids[k_index]) return false;
  // Key position relative to the query's sequence, through the prefix sums.
  const std::uint64_t start = meta.kv.prefix_sums[s];
  if (k_index < start) return false;
  const std::uint64_t k_local = k_index - start;
  if (k_local >= meta.kv.lengths[s]) return false;
  return !meta.causal || k_local <= meta.query_positions[q_index];
}

BlockMask::BlockMask(std::size_t query_blocks, std::size_t kv_blocks,
                     std::uint32_t block_size)
    : query_blocks_(query_blocks),
      kv_blocks_(kv_blocks),
      block_size_(block_size),
      kinds_(query_blocks * kv_blocks, BlockKind::kEmpty) {}

std::size_t BlockMask::count(BlockKind kind) const {
  return static_cast<std::size_t>(std::count(kinds_.begin(), kinds_.end(), kind));
}

BlockMask build_block_mask(const MaskMeta& meta, const AttentionConfig& config) {
  config.validate();
  meta.validate();
  const std::uint32_t block = config.page_size;
  const std::size_t queries = meta.query_count();
  const std::uint64_t slots = meta.kv.total_slots();
  BlockMask mask((queries + block - 1) / block, (slots + block - 1) / block,
                 block);

  // The allowed keys of a query form one contiguous flat interval.
  std::vector<std::uint64_t> lo(queries);
  std::vector<std::uint64_t> hi(queries);
  for (std::size_t q = 0; q < queries; ++q) {
    const std::uint32_t s = meta.query_sequence[q];
    const std::uint64_t len = meta.kv.lengths[s];
    lo[q] = meta.kv.prefix_sums[s];
    hi[q] = lo[q] + (meta.causal ? std::min(meta.query_positions[q] + 1, len) : len);
  }

  for (std::size_t qb = 0; qb < mask.query_blocks(); ++qb) {
    const std::size_t q_end = std::min<std::size_t>((qb + 1) * block, queries);
    for (std::size_t kb = 0; kb < mask.kv_blocks(); ++kb) {
      const std::uint64_t k0 = kb * block;
      const std::uint64_t k1 = std::min<std::uint64_t>(k0 + block, slots);
      bool full = true;
      bool empty = true;
      for (std::size_t q = qb * block; q < q_end; ++q) {
        const std::uint64_t a = std::max(lo[q], k0);
        const std::uint64_t b = std::min(hi[q], k1);
        const std::uint64_t overlap = b > a ? b - a : 0;
        if (overlap != k1 - k0) full = false;
        if (overlap != 0) empty = false;
        if (!full && !empty) break;
      }
      mask.set(qb, kb,
               empty ? BlockKind::kEmpty
                     : (full ? BlockKind::kFull : BlockKind::kPartial));
    }
  }
  return mask;
}

std::uint64_t AttentionStats::total_flops() const {
  return std::accumulate(flops.begin(), flops.end(), std::uint64_t{0});
}

namespace {

float dot(const float* a, const float* b, std::size_t n) {
  float sum = 0.0f;
  for (std::size_t i = 0; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

void check_inputs(std::span<const float> queries, const KvStore& store,
                  std::uint32_t layer,
                  std::span<const std::span<const PageId>> tables,
                  const MaskMeta& meta, const AttentionConfig& config) {
  config.validate();
  meta.validate();
  if (meta.causal != config.causal) {
    throw Error(ErrorCode::kInvalidConfig, "mask and config disagree on causality");
  }
  if (store.page_size() != config.page_size) {
    throw Error(ErrorCode::kInvalidConfig, "page size differs from the store");
  }
  if (store.layout().head_count != config.head_count ||
      store.layout().head_dim != config.head_dim) {
    throw Error(ErrorCode::kShapeMismatch, "head layout differs from the store");
  }
  if (layer >= store.layout().layers) {
    throw Error(ErrorCode::kOutOfRange, "layer " + std::to_string(layer));
  }
  if (queries.size() != meta.query_count() * config.row_width()) {
    throw Error(ErrorCode::kShapeMismatch,
                "expected " + std::to_string(meta.query_count()) +
                    " query rows of width " + std::to_string(config.row_width()));
  }
  if (tables.size() != meta.kv.sequences.size()) {
    throw Error(ErrorCode::kShapeMismatch, "one block table per sequence required");
  }
  for (std::size_t s = 0; s < tables.size(); ++s) {
    if (tables[s].size() * config.page_size < meta.kv.lengths[s]) {
      throw Error(ErrorCode::kOutOfRange,
                  "block table " + std::to_string(s) + " does not cover its length");
    }
    for (PageId page : tables[s]) {
      if (page >= store.capacity_pages()) {
        throw Error(ErrorCode::kOutOfRange, "page id outside the store");
      }
    }
  }
}

}  // namespace

std::vector<float> paged_attention(std::span<const float> queries,
                                   const KvStore& store, std::uint32_t layer,
                                   std::span<const std::span<const PageId>> tables,
                                   const MaskMeta& meta,
                                   const AttentionConfig& config,
                                   const AttentionOptions& options) {
  check_inputs(queries, store, layer, tables, meta, config);

  BlockMask local_mask;
  const BlockMask* mask = options.mask;
  if (mask == nullptr) {
    local_mask = build_block_mask(meta, config);
    mask = &local_mask;
  }
  const std::uint32_t page = config.page_size;
  const std::size_t query_count = meta.query_count();
  const std::uint64_t slots = meta.kv.total_slots();
  if (mask->block_size() != page ||
      mask->query_blocks() != (query_count + page - 1) / page ||
      mask->kv_blocks() != (slots + page - 1) / page) {
    throw Error(ErrorCode::kShapeMismatch, "block mask does not fit the batch");
  }

  const std::uint32_t shift = static_cast<std::uint32_t>(std::countr_zero(page));
  const std::size_t heads = config.head_count;
  const std::size_t dim = config.head_dim;
  const std::size_t width = config.row_width();
  const float scale = config.effective_scale();
  constexpr float kNegInf = -std::numeric_limits<float>::infinity();

  AttentionStats* stats = options.stats;
  if (stats != nullptr) {
    stats->flops.assign(query_count, 0);
    stats->visited_blocks.assign(query_count, 0);
    stats->allowed_keys.assign(query_count, 0);
    stats->softmax_mass.assign(
        stats->record_softmax_mass ? query_count * heads : 0, 0.0);
  }

  std::vector<float> out(query_count * width, 0.0f);
  std::vector<std::uint64_t> block_slots(page);
  std::vector<float> scores(heads * page);
  std::vector<float> running_max(heads);
  std::vector<float> running_sum(heads);
  std::vector<float> block_max(heads);

  auto slot_of = [&](std::uint32_t seq, std::uint64_t k) {
    const std::uint64_t local = k - meta.kv.prefix_sums[seq];
    return PageAddress{tables[seq][local >> shift],
                       static_cast<std::uint32_t>(local & (page - 1))}
        .flat_index(page);
  };

  for (std::size_t q = 0; q < query_count; ++q) {
    const std::uint32_t seq = meta.query_sequence[q];
    const float* query = queries.data() + q * width;
    float* acc = out.data() + q * width;
    std::fill(running_max.begin(), running_max.end(), kNegInf);
    std::fill(running_sum.begin(), running_sum.end(), 0.0f);
    std::uint64_t allowed = 0;
    std::uint32_t visited = 0;
    const std::size_t qb = q >> shift;

    for (std::size_t kb = 0; kb < mask->kv_blocks(); ++kb) {
      const BlockKind kind = mask->at(qb, kb);
      if (kind == BlockKind::kEmpty &&
          options.skipping == BlockSkipping::kSkipEmpty) {
        continue;
      }
      ++visited;
      const std::uint64_t k0 = static_cast<std::uint64_t>(kb) << shift;
      const std::uint64_t k1 = std::min<std::uint64_t>(k0 + page, slots);
      std::size_t n = 0;
      for (std::uint64_t k = k0; k < k1; ++k) {
        if (kind == BlockKind::kFull || mask_allow(q, k, meta)) {
          block_slots[n++] = slot_of(seq, k);
        }
      }
      if (n == 0) continue;
      allowed += n;

      std::fill(block_max.begin(), block_max.end(), kNegInf);
      for (std::size_t j = 0; j < n; ++j) {
        const float* key = store.key_row(layer, block_slots[j]).data();
        for (std::size_t h = 0; h < heads; ++h) {
          const float s = scale * dot(query + h * dim, key + h * dim, dim);
          scores[h * page + j] = s;
          block_max[h] = std::max(block_max[h], s);
        }
      }
      for (std::size_t h = 0; h < heads; ++h) {
        const float next_max = std::max(running_max[h], block_max[h]);
        const float alpha = std::exp(running_max[h] - next_max);
        running_sum[h] *= alpha;
        for (std::size_t i = 0; i < dim; ++i) acc[h * dim + i] *= alpha;
        running_max[h] = next_max;
      }
      for (std::size_t j = 0; j < n; ++j) {
        const float* value = store.value_row(layer, block_slots[j]).data();
        for (std::size_t h = 0; h < heads; ++h) {
          const float w = std::exp(scores[h * page + j] - running_max[h]);
          running_sum[h] += w;
          float* dst = acc + h * dim;
          const float* src = value + h * dim;
          for (std::size_t i = 0; i < dim; ++i) dst[i] += w * src[i];
        }
      }
    }

    if (allowed == 0) {
      throw Error(ErrorCode::kNoAllowedKeys,
                  "query " + std::to_string(q) + " attends to no key");
    }
    for (std::size_t h = 0; h < heads; ++h) {
      const float inv = 1.0f / running_sum[h];
      for (std::size_t i = 0; i < dim; ++i) acc[h * dim + i] *= inv;
    }

    if (stats == nullptr) continue;
    stats->flops[q] = 4ULL * heads * dim * allowed;
    stats->visited_blocks[q] = visited;
    stats->allowed_keys[q] = allowed;
    if (!stats->record_softmax_mass) continue;
    // Second pass: the final weights exp(s - m) / l must sum to one.
    for (std::uint64_t k = 0; k < slots; ++k) {
      if (!mask_allow(q, k, meta)) continue;
      const float* key = store.key_row(layer, slot_of(seq, k)).data();
      for (std::size_t h = 0; h < heads; ++h) {
        const float s = scale * dot(query + h * dim, key + h * dim, dim);
        stats->softmax_mass[q * heads + h] +=
            std::exp(static_cast<double>(s) - running_max[h]) / running_sum[h];
      }
    }
  }
  return out;
}

std::vector<float> paged_attention(std::span<const float> queries,
                                   const KvCache& cache, std::uint32_t layer,
                                   const MaskMeta& meta,
                                   const AttentionConfig& config,
                                   const AttentionOptions& options) {
  std::vector<std::span<const PageId>> tables;
  tables.reserve(meta.kv.sequences.size());
  for (SeqId seq : meta.kv.sequences) {
    tables.emplace_back(cache.manager().table(seq).entries);
  }
  return paged_attention(queries, cache.store(), layer, tables, meta, config,
                         options);
}

}  // namespace pagedkv
