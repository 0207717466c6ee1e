#include "pagedkv/toy_decoder.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "pagedkv/error.h"

namespace pagedkv {

namespace {

std::vector<float> random_matrix(std::mt19937_64& rng, std::size_t rows,
                                 std::size_t cols, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> m(rows * cols);
  for (float& v : m) v = dist(rng);
  return m;
}

// y = W x with W stored row-major as rows x x.size().
std::vector<float> matvec(std::span<const float> w, std::span<const float> x,
                          std::size_t rows, std::uint64_t& flops) {
  const std::size_t cols = x.size();
  flops += 2ULL * rows * cols;
  std::vector<float> y(rows, 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = w.data() + r * cols;
    float sum = 0.0f;
    for (std::size_t c = 0; c < cols; ++c) sum += row[c] * x[c];
    y[r] = sum;
  }
  return y;
}

std::vector<float> rms_norm(std::span<const float> x) {
  double squares = 0.0;
  for (float v : x) squares += static_cast<double>(v) * v;
  const auto inv = static_cast<float>(
      1.0 / std::sqrt(squares / static_cast<double>(x.size()) + 1e-6));
  std::vector<float> y(x.begin(), x.end());
  for (float& v : y) v *= inv;
  return y;
}

void add_into(std::span<float> x, std::span<const float> delta) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += delta[i];
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace

void DecoderConfig::validate() const {
  if (layers == 0 || head_count == 0 || head_dim == 0 || vocab == 0 ||
      mlp_ratio == 0) {
    throw Error(ErrorCode::kInvalidConfig, "decoder dimensions must be positive");
  }
}

Token argmax(std::span<const float> logits) {
  if (logits.empty()) {
    throw Error(ErrorCode::kShapeMismatch, "argmax of empty logits");
  }
  return static_cast<Token>(std::max_element(logits.begin(), logits.end()) -
                            logits.begin());
}

ToyDecoder::ToyDecoder(DecoderConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.model_dim();
  const std::size_t f = config_.mlp_dim();
  std::mt19937_64 rng(config_.seed);
  const float in_d = 1.0f / std::sqrt(static_cast<float>(d));
  const float in_f = 1.0f / std::sqrt(static_cast<float>(f));

  embedding_ = random_matrix(rng, config_.vocab, d, 1.0f);
  layers_.resize(config_.layers);
  for (Layer& layer : layers_) {
    layer.wq = random_matrix(rng, d, d, in_d);
    layer.wk = random_matrix(rng, d, d, in_d);
    layer.wv = random_matrix(rng, d, d, in_d);
    layer.wo = random_matrix(rng, d, d, in_d);
    layer.w1 = random_matrix(rng, f, d, in_d);
    layer.w2 = random_matrix(rng, d, f, in_f);
  }
  lm_head_ = random_matrix(rng, config_.vocab, d, in_d);
}

KvLayout ToyDecoder::kv_layout() const {
  return KvLayout{config_.layers, config_.head_count, config_.head_dim};
}

AttentionConfig ToyDecoder::attention_config(std::uint32_t page_size) const {
  AttentionConfig attn;
  attn.head_count = config_.head_count;
  attn.head_dim = config_.head_dim;
  attn.causal = true;
  attn.page_size = page_size;
  return attn;
}

std::vector<float> ToyDecoder::embed(Token token, std::uint64_t position) const {
  if (token < 0 || static_cast<std::uint32_t>(token) >= config_.vocab) {
    throw Error(ErrorCode::kOutOfRange, "token " + std::to_string(token));
  }
  const std::size_t d = config_.model_dim();
  std::vector<float> x(embedding_.begin() + static_cast<std::ptrdiff_t>(token * d),
                       embedding_.begin() + static_cast<std::ptrdiff_t>((token + 1) * d));
  for (std::size_t i = 0; i < d; i += 2) {
    const double freq =
        std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    const double angle = static_cast<double>(position) * freq;
    x[i] += static_cast<float>(std::sin(angle));
    if (i + 1 < d) x[i + 1] += static_cast<float>(std::cos(angle));
  }
  return x;
}

std::vector<float> ToyDecoder::mlp(const Layer& layer, std::span<const float> x,
                                   std::uint64_t& flops) const {
  const std::vector<float> normed = rms_norm(x);
  std::vector<float> hidden = matvec(layer.w1, normed, config_.mlp_dim(), flops);
  for (float& v : hidden) v = std::max(v, 0.0f);
  return matvec(layer.w2, hidden, config_.model_dim(), flops);
}

std::vector<float> ToyDecoder::logits(std::span<const float> x,
                                      std::uint64_t& flops) const {
  return matvec(lm_head_, rms_norm(x), config_.vocab, flops);
}

std::uint64_t ToyDecoder::token_projection_flops() const {
  const std::uint64_t d = config_.model_dim();
  const std::uint64_t f = config_.mlp_dim();
  return config_.layers * (8 * d * d + 4 * d * f);
}

std::uint64_t ToyDecoder::head_flops() const {
  return 2ULL * config_.model_dim() * config_.vocab;
}

FlopCounter ToyDecoder::step_flops(DecodeMode mode,
                                   std::uint64_t context_len) const {
  const std::uint64_t per_pair =
      4ULL * config_.head_count * config_.head_dim * config_.layers;
  FlopCounter c;
  if (mode == DecodeMode::kCached) {
    c.attention_flops = per_pair * context_len;
    c.projection_flops = token_projection_flops() + head_flops();
  } else {
    c.attention_flops = per_pair * context_len * context_len;
    c.projection_flops = token_projection_flops() * context_len + head_flops();
  }
  return c;
}

FlopCounter ToyDecoder::cumulative_flops(DecodeMode mode,
                                         std::uint64_t context_len) const {
  FlopCounter total;
  for (std::uint64_t n = 1; n <= context_len; ++n) total += step_flops(mode, n);
  return total;
}

std::vector<float> ToyDecoder::decode_step_nocache(std::span<const Token> prefix,
                                                   FlopCounter* flops) const {
  if (prefix.empty()) {
    throw Error(ErrorCode::kInvalidConfig, "empty prefix");
  }
  const std::size_t n = prefix.size();
  const std::size_t d = config_.model_dim();
  const std::size_t heads = config_.head_count;
  const std::size_t dim = config_.head_dim;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dim));

  std::vector<std::vector<float>> x(n);
  for (std::size_t t = 0; t < n; ++t) x[t] = embed(prefix[t], t);

  FlopCounter counter;
  std::uint64_t& proj = counter.projection_flops;
  std::vector<float> scores(n);
  for (const Layer& layer : layers_) {
    std::vector<std::vector<float>> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const std::vector<float> normed = rms_norm(x[t]);
      q[t] = matvec(layer.wq, normed, d, proj);
      k[t] = matvec(layer.wk, normed, d, proj);
      v[t] = matvec(layer.wv, normed, d, proj);
    }
    // Dense masked attention: every (query, key) pair is scored and mixed,
    // masked pairs enter with weight zero.
    for (std::size_t t = 0; t < n; ++t) {
      std::vector<float> attn(d, 0.0f);
      for (std::size_t h = 0; h < heads; ++h) {
        const float* qh = q[t].data() + h * dim;
        float peak = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          const float* kh = k[j].data() + h * dim;
          float s = 0.0f;
          for (std::size_t i = 0; i < dim; ++i) s += qh[i] * kh[i];
          scores[j] = j <= t ? s * scale : -std::numeric_limits<float>::infinity();
          peak = std::max(peak, scores[j]);
        }
        float total = 0.0f;
        for (float& s : scores) {
          s = std::exp(s - peak);
          total += s;
        }
        float* out = attn.data() + h * dim;
        for (std::size_t j = 0; j < n; ++j) {
          const float w = scores[j] / total;
          const float* vh = v[j].data() + h * dim;
          for (std::size_t i = 0; i < dim; ++i) out[i] += w * vh[i];
        }
        counter.attention_flops += 4ULL * dim * n;
      }
      add_into(x[t], matvec(layer.wo, attn, d, proj));
    }
    for (std::size_t t = 0; t < n; ++t) add_into(x[t], mlp(layer, x[t], proj));
  }

  std::vector<float> out = logits(x.back(), proj);
  if (flops != nullptr) *flops += counter;
  return out;
}

GenerationResult ToyDecoder::generate(std::span<const Token> prompt,
                                      std::size_t steps, DecodeMode mode,
                                      std::uint32_t page_size) const {
  if (mode == DecodeMode::kCached) {
    const std::uint64_t tokens = prompt.size() + steps;
    const std::uint64_t pages = (tokens + page_size - 1) / page_size;
    PageManager manager(pages, page_size);
    KvStore store(pages, page_size, kv_layout());
    KvCache cache(manager, store);
    return generate_cached(prompt, steps, cache, SeqId{0});
  }

  if (prompt.empty() || steps == 0) {
    throw Error(ErrorCode::kInvalidConfig, "generation needs a prompt and steps >= 1");
  }
  GenerationResult result;
  std::vector<Token> context(prompt.begin(), prompt.end());
  for (std::size_t i = 0; i < steps; ++i) {
    StepRecord record;
    record.context_len = context.size();
    const auto start = std::chrono::steady_clock::now();
    const std::vector<float> out = decode_step_nocache(context, &record.flops);
    record.wall_ms = elapsed_ms(start);
    record.token = argmax(out);
    context.push_back(record.token);
    result.tokens.push_back(record.token);
    result.steps.push_back(record);
  }
  return result;
}

GenerationResult ToyDecoder::generate_cached(std::span<const Token> prompt,
                                             std::size_t steps, KvCache& cache,
                                             SeqId seq) const {
  if (prompt.empty() || steps == 0) {
    throw Error(ErrorCode::kInvalidConfig, "generation needs a prompt and steps >= 1");
  }
  GenerationResult result;
  DecodeSession session(*this, cache, seq);
  for (std::size_t t = 0; t + 1 < prompt.size(); ++t) {
    session.step(prompt[t], &result.prefill);
  }
  Token next = prompt.back();
  for (std::size_t i = 0; i < steps; ++i) {
    StepRecord record;
    const auto start = std::chrono::steady_clock::now();
    const std::vector<float> out = session.step(next, &record.flops);
    record.wall_ms = elapsed_ms(start);
    record.context_len = session.context_len();
    record.token = argmax(out);
    next = record.token;
    result.tokens.push_back(record.token);
    result.steps.push_back(record);
  }
  return result;
}

DecodeSession::DecodeSession(const ToyDecoder& model, KvCache& cache, SeqId seq)
    : model_(model), cache_(cache), seq_(seq) {
  const KvLayout want = model.kv_layout();
  const KvLayout have = cache.store().layout();
  if (want.layers != have.layers || want.head_count != have.head_count ||
      want.head_dim != have.head_dim) {
    throw Error(ErrorCode::kShapeMismatch, "cache layout does not fit the model");
  }
  cache_.manager().reserve(seq_, 0);
}

DecodeSession::~DecodeSession() {
  if (cache_.manager().contains(seq_)) cache_.manager().free(seq_);
}

std::vector<float> DecodeSession::step(Token token, FlopCounter* flops) {
  const std::size_t d = model_.config_.model_dim();
  const std::uint64_t position = position_;
  PageManager& manager = cache_.manager();
  manager.grow(seq_, position + 1);

  std::vector<float> x = model_.embed(token, position);
  const AttentionConfig attn_config =
      model_.attention_config(cache_.store().page_size());
  const std::size_t positions[] = {position};
  const SeqId ids[] = {seq_};
  const std::uint64_t lengths[] = {position + 1};

  FlopCounter counter;
  AttentionStats stats;
  for (std::uint32_t l = 0; l < model_.layers_.size(); ++l) {
    const ToyDecoder::Layer& layer = model_.layers_[l];
    const std::vector<float> normed = rms_norm(x);
    std::uint64_t& proj = counter.projection_flops;
    const std::vector<float> q = matvec(layer.wq, normed, d, proj);
    const std::vector<float> k = matvec(layer.wk, normed, d, proj);
    const std::vector<float> v = matvec(layer.wv, normed, d, proj);
    cache_.assign(seq_, positions, k, v, l);

    const MaskMeta meta =
        make_decode_meta(cache_.build_batch_view(ids, lengths), true);
    const std::vector<float> attn =
        paged_attention(q, cache_, l, meta, attn_config, {.stats = &stats});
    counter.attention_flops += stats.total_flops();

    add_into(x, matvec(layer.wo, attn, d, proj));
    add_into(x, model_.mlp(layer, x, proj));
  }
  std::vector<float> out = model_.logits(x, counter.projection_flops);
  ++position_;
  if (flops != nullptr) *flops += counter;
  return out;
}

}  // namespace pagedkv
