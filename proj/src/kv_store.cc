#include "pagedkv/kv_store.h"

#include <Eigen/Core>
#include <algorithm>
#include <string>

#include "pagedkv/error.h"

namespace pagedkv {

namespace {

void store_row(std::span<const float> src, float* dst,
               StoragePrecision precision) {
  if (precision == StoragePrecision::kFloat32) {
    std::copy(src.begin(), src.end(), dst);
    return;
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = static_cast<float>(Eigen::half(src[i]));
  }
}

}  // namespace

KvStore::KvStore(std::uint64_t capacity_pages, std::uint32_t page_size,
                 KvLayout layout, StoragePrecision precision)
    : capacity_pages_(capacity_pages),
      page_size_(page_size),
      layout_(layout),
      precision_(precision) {
  if (layout.layers == 0 || layout.head_count == 0 || layout.head_dim == 0) {
    throw Error(ErrorCode::kInvalidConfig, "empty KV layout");
  }
  const std::size_t total =
      static_cast<std::size_t>(layout.layers) * rows_per_layer() *
      layout.row_width();
  keys_.assign(total, 0.0f);
  values_.assign(total, 0.0f);
}

void KvStore::write(std::uint32_t layer, std::uint64_t slot,
                    std::span<const float> key, std::span<const float> value) {
  if (key.size() != layout_.row_width() || value.size() != layout_.row_width()) {
    throw Error(ErrorCode::kShapeMismatch,
                "row width " + std::to_string(key.size()) + "/" +
                    std::to_string(value.size()) + ", expected " +
                    std::to_string(layout_.row_width()));
  }
  if (layer >= layout_.layers || slot >= rows_per_layer()) {
    throw Error(ErrorCode::kOutOfRange, "slot outside the store");
  }
  store_row(key, keys_.data() + offset(layer, slot), precision_);
  store_row(value, values_.data() + offset(layer, slot), precision_);
}

void KvStore::copy_page(PageId src, PageId dst, std::uint32_t slots) {
  const std::size_t width = layout_.row_width();
  const std::size_t count = static_cast<std::size_t>(slots) * width;
  for (std::uint32_t layer = 0; layer < layout_.layers; ++layer) {
    const std::size_t from =
        offset(layer, static_cast<std::uint64_t>(src) * page_size_);
    const std::size_t to =
        offset(layer, static_cast<std::uint64_t>(dst) * page_size_);
    std::copy_n(keys_.begin() + from, count, keys_.begin() + to);
    std::copy_n(values_.begin() + from, count, values_.begin() + to);
  }
}

}  // namespace pagedkv
