#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "specdraft/base_lm.hpp"

namespace specdraft {

struct SpecFormerConfig {
  std::size_t hidden = 64;
  std::size_t l_d = 4;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  /// Number of draft bidirectional blocks; one unless scaling the draft up.
  std::size_t blocks = 1;
  double norm_eps = kDefaultNormEps;
  /// Must match the base model so context attention shares its positions.
  double rope_base = 10000.0;

  void validate() const;
  friend bool operator==(const SpecFormerConfig&, const SpecFormerConfig&) = default;
};

template <typename T>
struct DraftBlock {
  Parameter<T> sa_norm, wq, wk, wv, wo;
  Parameter<T> ffn_norm, w_gate, w_up, w_down;
};

/// Intermediate states of one draft pass, kept for tests and diagnostics.
template <typename T>
struct DraftStates {
  Var<T> i_cat;  // (batch, seq, 4 * hidden)
  Var<T> i_d;    // (batch, seq, hidden)
  Var<T> d;      // (batch, seq, l_d, hidden)
  Var<T> e;      // (batch, seq, l_d, hidden)
};

struct DraftParamCounts {
  std::size_t m_s = 0;  // shared across draft positions
  std::size_t m_p = 0;  // per draft position
};

/// Draft model: a hook over four base hidden-state taps, a downsampler and
/// causal context attention, a positional FFN that splits each context
/// position into l_d slots, and bidirectional attention across those slots.
/// Draft logits go through the base model's frozen final norm and head.
template <typename T>
class SpecFormer {
 public:
  SpecFormer() = default;
  static SpecFormer init(const SpecFormerConfig& config, std::uint64_t seed);
  static SpecFormer zeros(const SpecFormerConfig& config);

  const SpecFormerConfig& config() const noexcept { return config_; }

  /// Stacks the taps and normalizes each with its own scale vector.
  Var<T> hook_concat(const HiddenStateTaps<T>& taps) const;
  /// I_D = MSA(RMS(W_D I_Cat)) + W_D I_Cat, causal with rotary positions.
  /// With a cache, keys/values go to its last layer, which must trail the
  /// base layers by exactly seq positions (or everything must be empty).
  Var<T> context_causal_attention(const Var<T>& i_cat, KVCache<T>* cache) const;
  /// D = W_P RMS(I_D) + b_P reshaped to (batch, seq, l_d, hidden).
  Var<T> positional_ffn(const Var<T>& i_d) const;
  /// Residual self-attention and SwiGLU blocks along the l_d axis, with
  /// batch * seq independent groups and no positional encoding.
  Var<T> draft_bidirectional_block(const Var<T>& d) const;

  /// Full pass from taps to E.
  DraftStates<T> forward(const HiddenStateTaps<T>& taps, KVCache<T>* cache) const;

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  std::size_t count_params() const;

  Parameter<T>& group_scales() { return group_scales_; }
  Parameter<T>& w_d() { return w_d_; }
  Parameter<T>& ctx_wo() { return ctx_wo_; }
  Parameter<T>& w_p() { return w_p_; }
  Parameter<T>& b_p() { return b_p_; }
  DraftBlock<T>& block(std::size_t i) { return blocks_.at(i); }

  static std::vector<std::pair<std::string, Shape>> tensor_layout(const SpecFormerConfig& config);
  /// True for the tensors that exist once per draft slot (W_P and b_P).
  static bool is_positional(const std::string& name);

 private:
  SpecFormerConfig config_;
  Parameter<T> group_scales_;
  Parameter<T> w_d_;
  Parameter<T> ctx_norm_, ctx_wq_, ctx_wk_, ctx_wv_, ctx_wo_;
  Parameter<T> pos_norm_, w_p_, b_p_;
  std::vector<DraftBlock<T>> blocks_;
};

/// Base final norm and head applied to every (seq, slot) of E; returns
/// (batch, seq, l_d, V). The base never receives gradient from this path.
template <typename T>
Var<T> draft_logits(const Var<T>& e, const BaseLM<T>& base);

/// Appends `taps` (the newest base positions) to the draft context and
/// returns the greedy chain draft read from the last of them.
template <typename T>
std::vector<Token> generate_draft(const SpecFormer<T>& sf, const BaseLM<T>& base, const HiddenStateTaps<T>& taps,
                                  KVCache<T>* cache = nullptr);

/// m_p counts one draft slot's share of W_P and b_P (hidden^2 + hidden);
/// m_s is everything else.
template <typename T>
DraftParamCounts count_draft_params(const SpecFormer<T>& sf);
DraftParamCounts count_draft_params(const SpecFormerConfig& config);

/// Throws DimensionError unless the draft and base agree on hidden size
/// and rotary base.
void check_compatible(const SpecFormerConfig& draft, const BaseLMConfig& base);

extern template class SpecFormer<float>;
extern template class SpecFormer<double>;

}  // namespace specdraft
