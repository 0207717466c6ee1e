#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pagedkv/types.h"

namespace pagedkv {

enum class StoragePrecision {
  kFloat32,
  // Values are rounded to IEEE binary16 on write; rows stay fp32 in memory.
  kFloat16,
};

struct KvLayout {
  std::uint32_t layers = 1;
  std::uint32_t head_count = 1;
  std::uint32_t head_dim = 1;

  // All heads of one token are packed in one row, head-major.
  std::size_t row_width() const {
    return static_cast<std::size_t>(head_count) * head_dim;
  }
};

// Global K and V buffers. One row per (page_id * page_size + offset) slot and
// per layer.
class KvStore {
 public:
  KvStore(std::uint64_t capacity_pages, std::uint32_t page_size,
          KvLayout layout,
          StoragePrecision precision = StoragePrecision::kFloat32);

  const KvLayout& layout() const { return layout_; }
  std::uint32_t page_size() const { return page_size_; }
  std::uint64_t capacity_pages() const { return capacity_pages_; }
  std::uint64_t rows_per_layer() const { return capacity_pages_ * page_size_; }
  StoragePrecision precision() const { return precision_; }

  std::span<const float> key_row(std::uint32_t layer, std::uint64_t slot) const {
    return {keys_.data() + offset(layer, slot), layout_.row_width()};
  }
  std::span<const float> value_row(std::uint32_t layer,
                                   std::uint64_t slot) const {
    return {values_.data() + offset(layer, slot), layout_.row_width()};
  }

  void write(std::uint32_t layer, std::uint64_t slot, std::span<const float> key,
             std::span<const float> value);

  // Copies the first `slots` rows of `src` into `dst` on every layer.
  void copy_page(PageId src, PageId dst, std::uint32_t slots);

 private:
  std::size_t offset(std::uint32_t layer, std::uint64_t slot) const {
    return (static_cast<std::size_t>(layer) * rows_per_layer() + slot) *
           layout_.row_width();
  }

  std::uint64_t capacity_pages_;
  std::uint32_t page_size_;
  KvLayout layout_;
  StoragePrecision precision_;
  std::vector<float> keys_;
  std::vector<float> values_;
};

}  // namespace pagedkv
