#pragma once

#include <cstdint>

#include "specdraft/autograd.hpp"
#include "specdraft/kv_cache.hpp"
#include "specdraft/ops.hpp"

namespace specdraft {

template <typename T>
struct AttentionParams {
  const Parameter<T>& wq;
  const Parameter<T>& wk;
  const Parameter<T>& wv;
  const Parameter<T>& wo;
};

/// Multi-head causal self-attention with rotary positions over x
/// (batch, seq, width). Without a cache the block covers positions
/// [0, seq); with one it continues `layer` at its current length and
/// appends the new keys/values.
template <typename T>
Var<T> causal_self_attention(const Var<T>& x, const AttentionParams<T>& w, std::size_t heads, double rope_base,
                             KVCache<T>* cache, std::size_t layer);

/// Unmasked multi-head self-attention without positional encoding over
/// x (groups, seq, width); each group attends only within itself.
template <typename T>
Var<T> bidirectional_self_attention(const Var<T>& x, const AttentionParams<T>& w, std::size_t heads);

/// Normal(0, stddev) tensor drawn from a seed.
template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::uint64_t seed);

}  // namespace specdraft
