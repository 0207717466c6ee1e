#include "pagedkv/kv_cache.h"

#include <algorithm>
#include <string>

#include "pagedkv/error.h"

namespace pagedkv {

void BatchView::validate() const {
  if (prefix_sums.size() != sequences.size() ||
      lengths.size() != sequences.size()) {
    throw Error(ErrorCode::kShapeMismatch, "batch view vectors disagree");
  }
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    if (prefix_sums[i] != expected) {
      throw Error(ErrorCode::kShapeMismatch, "prefix sums are inconsistent");
    }
    expected += lengths[i];
  }
  if (expected != slot_seq_ids.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "slot vector does not cover the batch");
  }
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    for (std::uint64_t s = 0; s < lengths[i]; ++s) {
      if (slot_seq_ids[prefix_sums[i] + s] != sequences[i]) {
        throw Error(ErrorCode::kShapeMismatch, "slot owner mismatch");
      }
    }
  }
}

BatchView make_batch_view(std::span<const SeqId> sequences,
                          std::span<const std::uint64_t> lengths) {
  if (sequences.size() != lengths.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "sequence and length lists differ in size");
  }
  BatchView view;
  view.sequences.assign(sequences.begin(), sequences.end());
  view.lengths.assign(lengths.begin(), lengths.end());
  view.prefix_sums.reserve(sequences.size());
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    view.prefix_sums.push_back(offset);
    offset += lengths[i];
  }
  view.slot_seq_ids.reserve(offset);
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    view.slot_seq_ids.insert(view.slot_seq_ids.end(), lengths[i], sequences[i]);
  }
  return view;
}

KvCache::KvCache(PageManager& manager, KvStore& store)
    : manager_(manager), store_(store) {
  if (manager.page_size() != store.page_size() ||
      manager.pool().capacity_pages() != store.capacity_pages()) {
    throw Error(ErrorCode::kInvalidConfig,
                "store geometry differs from the page pool");
  }
  manager_.set_page_copier([&store](PageId src, PageId dst,
                                    std::uint32_t slots) {
    store.copy_page(src, dst, slots);
  });
}

void KvCache::assign(SeqId seq, std::span<const std::size_t> positions,
                     std::span<const float> keys, std::span<const float> values,
                     std::uint32_t layer) {
  const std::size_t width = store_.layout().row_width();
  if (keys.size() != positions.size() * width ||
      values.size() != positions.size() * width) {
    throw Error(ErrorCode::kShapeMismatch,
                std::to_string(positions.size()) + " positions need " +
                    std::to_string(positions.size() * width) + " values");
  }
  if (layer >= store_.layout().layers) {
    throw Error(ErrorCode::kOutOfRange, "layer " + std::to_string(layer));
  }
  if (positions.empty()) {
    manager_.table(seq);
    return;
  }

  const std::size_t capacity = manager_.table(seq).capacity(store_.page_size());
  const std::size_t highest = *std::max_element(positions.begin(), positions.end());
  if (highest >= capacity) {
    throw Error(ErrorCode::kOutOfRange,
                "position " + std::to_string(highest) + " beyond capacity " +
                    std::to_string(capacity));
  }

  const std::uint32_t shift = manager_.pool().page_shift();
  const std::uint32_t mask = store_.page_size() - 1;
  std::vector<std::size_t> blocks(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    blocks[i] = positions[i] >> shift;
  }
  // Shared pages are privatized before any row is written.
  const std::vector<PageId> pages = manager_.prepare_writes(seq, blocks);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const PageAddress addr{pages[i],
                           static_cast<std::uint32_t>(positions[i] & mask)};
    store_.write(layer, addr.flat_index(store_.page_size()),
                 keys.subspan(i * width, width), values.subspan(i * width, width));
  }
  manager_.mark_written(seq, highest + 1);
}

KvRows KvCache::gather(SeqId seq, std::size_t len, std::uint32_t layer) const {
  const BlockTable& table = manager_.table(seq);
  if (len > table.logical_len) {
    throw Error(ErrorCode::kOutOfRange,
                "gather of " + std::to_string(len) + " tokens, " +
                    std::to_string(table.logical_len) + " written");
  }
  if (layer >= store_.layout().layers) {
    throw Error(ErrorCode::kOutOfRange, "layer " + std::to_string(layer));
  }
  KvRows rows;
  rows.rows = len;
  rows.row_width = store_.layout().row_width();
  rows.keys.reserve(len * rows.row_width);
  rows.values.reserve(len * rows.row_width);
  const std::uint32_t page_size = store_.page_size();
  const std::uint32_t shift = manager_.pool().page_shift();
  for (std::size_t t = 0; t < len; ++t) {
    const PageAddress addr{table.entries[t >> shift],
                           static_cast<std::uint32_t>(t & (page_size - 1))};
    const auto key = store_.key_row(layer, addr.flat_index(page_size));
    const auto value = store_.value_row(layer, addr.flat_index(page_size));
    rows.keys.insert(rows.keys.end(), key.begin(), key.end());
    rows.values.insert(rows.values.end(), value.begin(), value.end());
  }
  return rows;
}

BatchView KvCache::build_batch_view(
    std::span<const SeqId> sequences,
    std::span<const std::uint64_t> lengths) const {
  if (sequences.size() != lengths.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "sequence and length lists differ in size");
  }
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const BlockTable& table = manager_.table(sequences[i]);
    if (lengths[i] > table.logical_len) {
      throw Error(ErrorCode::kOutOfRange,
                  "length " + std::to_string(lengths[i]) + " exceeds " +
                      std::to_string(table.logical_len) + " written tokens");
    }
  }
  return make_batch_view(sequences, lengths);
}

nlohmann::json KvCache::dump_sequence(SeqId seq, std::uint32_t layer) const {
  const BlockTable& table = manager_.table(seq);
  const KvRows rows = gather(seq, table.logical_len, layer);
  auto keys = nlohmann::json::array();
  auto values = nlohmann::json::array();
  for (std::size_t r = 0; r < rows.rows; ++r) {
    const auto begin = static_cast<std::ptrdiff_t>(r * rows.row_width);
    const auto end = begin + static_cast<std::ptrdiff_t>(rows.row_width);
    keys.push_back(std::vector<float>(rows.keys.begin() + begin,
                                      rows.keys.begin() + end));
    values.push_back(std::vector<float>(rows.values.begin() + begin,
                                        rows.values.begin() + end));
  }
  return {{"seq", to_underlying(seq)},
          {"layer", layer},
          {"length", rows.rows},
          {"keys", std::move(keys)},
          {"values", std::move(values)}};
}

}  // namespace pagedkv
