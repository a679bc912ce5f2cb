#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "specdraft/autograd.hpp"
#include "specdraft/kv_cache.hpp"
#include "specdraft/ops.hpp"

namespace specdraft {

struct BaseLMConfig {
  std::size_t layers = 4;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t vocab = 64;
  std::size_t max_seq = 256;
  double rope_base = 10000.0;
  double norm_eps = kDefaultNormEps;

  /// Throws ParameterError naming the first invalid field.
  void validate() const;
  std::size_t head_dim() const { return hidden / heads; }
  /// Index of the middle tap, floor(L / 2).
  std::size_t mid_layer() const { return layers / 2; }

  friend bool operator==(const BaseLMConfig&, const BaseLMConfig&) = default;
};

/// Row-major (batch, seq) token ids.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<Token> ids;

  static TokenBatch single(std::span<const Token> tokens);
  static TokenBatch rows(const std::vector<std::vector<Token>>& rows);
  Token at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
  std::span<const Token> row(std::size_t b) const { return {ids.data() + b * seq, seq}; }
};

/// HS[0], HS[floor(L/2)], HS[L-1] and HS[L], each (batch, seq, hidden).
template <typename T>
struct HiddenStateTaps {
  Var<T> hs0;
  Var<T> hs_mid;
  Var<T> hs_penult;
  Var<T> hs_last;

  std::size_t batch() const { return hs0.dim(0); }
  std::size_t seq() const { return hs0.dim(1); }
  /// Positions [begin, end) along the sequence axis, as constants.
  HiddenStateTaps slice_positions(std::size_t begin, std::size_t end) const;
};

template <typename T>
struct LMOutput {
  Var<T> logits;  // (batch, seq, vocab)
  std::optional<HiddenStateTaps<T>> taps;
};

template <typename T>
struct DecoderLayer {
  Parameter<T> attn_norm, wq, wk, wv, wo;
  Parameter<T> ffn_norm, w_gate, w_up, w_down;
};

/// Decoder-only transformer with pre-norm residual blocks, rotary
/// positions, SwiGLU feedforward and an untied output head.
template <typename T>
class BaseLM {
 public:
  BaseLM() = default;
  /// Scaled normal init (std 0.02; wo and w_down scaled by 1/sqrt(2L)).
  static BaseLM init(const BaseLMConfig& config, std::uint64_t seed);

  const BaseLMConfig& config() const noexcept { return config_; }

  /// Runs `tokens` after whatever `cache` already holds (or from position 0
  /// when cache is null), appending keys/values to the base layers.
  LMOutput<T> forward(const TokenBatch& tokens, KVCache<T>* cache, bool want_taps) const;

  /// Final norm followed by the output head; (..., hidden) -> (..., vocab).
  Var<T> head(const Var<T>& hidden) const;

  /// A cache with L base layers plus one layer for the draft model.
  KVCache<T> make_cache(std::size_t batch = 1) const;

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  void set_trainable(bool trainable);

  std::size_t count_params() const;
  /// V*d + L*(2d + 4d^2 + 3*d*d_ff) + d + d*V.
  static std::size_t count_params(const BaseLMConfig& config);

  Parameter<T>& embedding() { return embedding_; }
  Parameter<T>& final_norm() { return final_norm_; }
  const Parameter<T>& final_norm() const { return final_norm_; }
  Parameter<T>& lm_head() { return lm_head_; }
  const Parameter<T>& lm_head() const { return lm_head_; }
  DecoderLayer<T>& layer(std::size_t i) { return layers_.at(i); }

  /// Expected name and shape of every tensor, in parameters() order.
  static std::vector<std::pair<std::string, Shape>> tensor_layout(const BaseLMConfig& config);
  /// Builds an all-zero model with the layout above; used by checkpoint loading.
  static BaseLM zeros(const BaseLMConfig& config);

 private:
  BaseLMConfig config_;
  Parameter<T> embedding_;
  std::vector<DecoderLayer<T>> layers_;
  Parameter<T> final_norm_;
  Parameter<T> lm_head_;
};

/// Argmax with ties broken toward the lowest id. -inf entries are allowed.
template <typename T>
Token greedy_next(std::span<const T> logits_row);

/// Last-position logits row of a (1, seq, V) output.
template <typename T>
std::span<const T> logits_row(const Var<T>& logits, std::size_t b, std::size_t t);

/// n tokens from repeated single-token greedy steps after the prompt.
template <typename T>
std::vector<Token> decode_greedy(const BaseLM<T>& model, std::span<const Token> prompt, std::size_t n);

extern template class BaseLM<float>;
extern template class BaseLM<double>;

}  // namespace specdraft
