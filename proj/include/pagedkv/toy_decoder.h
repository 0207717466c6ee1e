#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "pagedkv/kv_cache.h"
#include "pagedkv/paged_attention.h"
#include "pagedkv/types.h"

namespace pagedkv {

using Token = std::int32_t;

struct DecoderConfig {
  std::uint32_t layers = 2;
  std::uint32_t head_count = 4;
  std::uint32_t head_dim = 16;
  std::uint32_t vocab = 256;
  std::uint32_t mlp_ratio = 4;
  std::uint64_t seed = 0;

  std::size_t model_dim() const {
    return static_cast<std::size_t>(head_count) * head_dim;
  }
  std::size_t mlp_dim() const { return model_dim() * mlp_ratio; }
  void validate() const;
};

struct FlopCounter {
  std::uint64_t attention_flops = 0;
  std::uint64_t projection_flops = 0;

  std::uint64_t total() const { return attention_flops + projection_flops; }
  FlopCounter& operator+=(const FlopCounter& other) {
    attention_flops += other.attention_flops;
    projection_flops += other.projection_flops;
    return *this;
  }
  friend bool operator==(const FlopCounter&, const FlopCounter&) = default;
};

enum class DecodeMode { kCached, kNoCache };

struct StepRecord {
  std::uint64_t context_len = 0;  // tokens attended to, including the new one
  Token token = 0;                // greedy pick from this step's logits
  FlopCounter flops;
  double wall_ms = 0.0;
};

struct GenerationResult {
  std::vector<Token> tokens;  // generated tokens only
  std::vector<StepRecord> steps;
  FlopCounter prefill;        // cached mode: feeding all but the last prompt token
};

// Seeded decoder-only transformer: sinusoidal positions, pre-norm residual
// blocks (RMSNorm, multi-head attention, two-layer ReLU MLP), tied to no
// external weights.
class ToyDecoder {
 public:
  explicit ToyDecoder(DecoderConfig config);

  const DecoderConfig& config() const { return config_; }
  KvLayout kv_layout() const;
  AttentionConfig attention_config(std::uint32_t page_size) const;

  // Recomputes the whole prefix with dense masked attention and returns the
  // logits of the last position.
  std::vector<float> decode_step_nocache(std::span<const Token> prefix,
                                         FlopCounter* flops = nullptr) const;

  // Greedy decoding. Cached mode runs on its own pool sized for the run.
  GenerationResult generate(std::span<const Token> prompt, std::size_t steps,
                            DecodeMode mode, std::uint32_t page_size = 64) const;
  // Cached mode on a caller-provided cache; `seq` must not exist yet and is
  // freed before returning.
  GenerationResult generate_cached(std::span<const Token> prompt,
                                   std::size_t steps, KvCache& cache,
                                   SeqId seq) const;

  // Closed-form cost of one step whose context holds `context_len` tokens.
  FlopCounter step_flops(DecodeMode mode, std::uint64_t context_len) const;
  // Sum of step_flops over context lengths 1..context_len.
  FlopCounter cumulative_flops(DecodeMode mode, std::uint64_t context_len) const;

 private:
  friend class DecodeSession;

  struct Layer {
    std::vector<float> wq, wk, wv, wo;  // model_dim x model_dim
    std::vector<float> w1;              // mlp_dim x model_dim
    std::vector<float> w2;              // model_dim x mlp_dim
  };

  std::vector<float> embed(Token token, std::uint64_t position) const;
  std::vector<float> mlp(const Layer& layer, std::span<const float> x,
                         std::uint64_t& flops) const;
  std::vector<float> logits(std::span<const float> x, std::uint64_t& flops) const;
  std::uint64_t token_projection_flops() const;
  std::uint64_t head_flops() const;

  DecoderConfig config_;
  std::vector<float> embedding_;  // vocab x model_dim
  std::vector<Layer> layers_;
  std::vector<float> lm_head_;    // vocab x model_dim
};

// One sequence decoding token by token over the paged cache. Owns `seq` in
// the cache for its lifetime.
class DecodeSession {
 public:
  DecodeSession(const ToyDecoder& model, KvCache& cache, SeqId seq);
  ~DecodeSession();

  DecodeSession(const DecodeSession&) = delete;
  DecodeSession& operator=(const DecodeSession&) = delete;

  // Computes Q/K/V for `token` only, appends K/V to the cache (growing the
  // block table when needed) and attends over the whole cached context.
  std::vector<float> step(Token token, FlopCounter* flops = nullptr);

  std::uint64_t context_len() const { return position_; }
  SeqId seq() const { return seq_; }

 private:
  const ToyDecoder& model_;
  KvCache& cache_;
  SeqId seq_;
  std::uint64_t position_ = 0;
};

Token argmax(std::span<const float> logits);

}  // namespace pagedkv
