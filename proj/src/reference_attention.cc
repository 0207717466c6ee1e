#include "pagedkv/reference_attention.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pagedkv/error.h"

namespace pagedkv {

std::vector<double> reference_attention(std::span<const float> queries,
                                        std::span<const QueryRef> query_refs,
                                        std::span<const float> keys,
                                        std::span<const float> values,
                                        std::span<const std::uint64_t> lengths,
                                        const AttentionConfig& config) {
  if (config.head_count == 0 || config.head_dim == 0) {
    throw Error(ErrorCode::kShapeMismatch, "empty head layout");
  }
  const std::size_t heads = config.head_count;
  const std::size_t dim = config.head_dim;
  const std::size_t width = heads * dim;

  std::vector<std::uint64_t> starts(lengths.size());
  std::uint64_t tokens = 0;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    starts[s] = tokens;
    tokens += lengths[s];
  }
  if (queries.size() != query_refs.size() * width ||
      keys.size() != tokens * width || values.size() != tokens * width) {
    throw Error(ErrorCode::kShapeMismatch, "dense attention operand sizes");
  }

  const double scale = config.scale > 0.0f
                           ? static_cast<double>(config.scale)
                           : 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<double> out(query_refs.size() * width, 0.0);
  std::vector<double> scores;

  for (std::size_t q = 0; q < query_refs.size(); ++q) {
    const QueryRef ref = query_refs[q];
    if (ref.sequence >= lengths.size() || ref.position >= lengths[ref.sequence]) {
      throw Error(ErrorCode::kShapeMismatch,
                  "query " + std::to_string(q) + " outside its sequence");
    }
    const std::uint64_t visible =
        config.causal ? ref.position + 1 : lengths[ref.sequence];
    const std::uint64_t first = starts[ref.sequence];
    scores.assign(visible, 0.0);

    for (std::size_t h = 0; h < heads; ++h) {
      const float* qrow = queries.data() + q * width + h * dim;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::uint64_t j = 0; j < visible; ++j) {
        const float* krow = keys.data() + (first + j) * width + h * dim;
        double s = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
          s += static_cast<double>(qrow[i]) * static_cast<double>(krow[i]);
        }
        scores[j] = s * scale;
        peak = std::max(peak, scores[j]);
      }
      double total = 0.0;
      for (double& s : scores) {
        s = std::exp(s - peak);
        total += s;
      }
      double* dst = out.data() + q * width + h * dim;
      for (std::uint64_t j = 0; j < visible; ++j) {
        const float* vrow = values.data() + (first + j) * width + h * dim;
        const double w = scores[j] / total;
        for (std::size_t i = 0; i < dim; ++i) dst[i] += w * vrow[i];
      }
    }
  }
  return out;
}

}  // namespace pagedkv
