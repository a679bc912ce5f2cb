#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "specdraft/autograd.hpp"

namespace specdraft {

inline constexpr double kDefaultNormEps = 1e-6;

/// Boolean (queries x keys) visibility pattern; `allowed` is row-major.
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> allowed;

  /// Query i sits at absolute position offset + i and sees keys 0..offset + i.
  static AttentionMask causal(std::size_t queries, std::size_t keys, std::size_t offset);
  bool visible(std::size_t q, std::size_t k) const { return allowed[q * keys + k] != 0; }
};

// Row-major GEMM kernels shared by matmul and its backward. Each output row
// is accumulated in a fixed order that does not depend on how many rows are
// processed together, so a token's activations are bit-identical whether it
// is computed alone or inside a longer block.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <typename T>
void gemm_nt_acc(const T* dc, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n);
template <typename T>
void gemm_tn_acc(const T* a, const T* dc, T* db, std::size_t m, std::size_t k, std::size_t n);

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

/// a (..., m, k) x b (k, n) or (..., k, n) with identical leading extents.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
/// Adds `bias` (extent equal to x's last extent) to every row of x.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T factor);
template <typename T>
Var<T> silu(const Var<T>& x);

/// y = x / sqrt(mean(x^2) + eps) * scale over the last axis.
template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& scale, double eps = kDefaultNormEps);

/// Splits the last axis into `groups` equal slices and rms-normalizes each
/// with its own scale vector. `group_scales` holds groups x slice scalars.
template <typename T>
Var<T> grouped_rms_norm(const Var<T>& x, const Var<T>& group_scales, std::size_t groups,
                        double eps = kDefaultNormEps);

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis);

/// softmax(q k^T / sqrt(d_head) + mask) v. q is (batch, Sq, heads, d_head),
/// k and v are (batch, Sk, heads, d_head). Rank-2 inputs (S, d_head) are
/// treated as batch 1, one head. A query row with no visible key throws.
template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                            const AttentionMask* mask = nullptr);

/// Rotary position embedding on (batch, S, heads, d_head); row s sits at
/// absolute position start_pos + s. Rotates pairs (i, i + d_head/2).
template <typename T>
Var<T> rope(const Var<T>& x, std::size_t start_pos, double base);

/// w_down(silu(w_gate x) * (w_up x)) with weights stored input-major.
template <typename T>
Var<T> swiglu(const Var<T>& x, const Var<T>& w_gate, const Var<T>& w_up, const Var<T>& w_down);

/// Gathers rows of `table` (V, d); output shape is prefix + (d).
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const Token> ids, const Shape& prefix);

/// Mean negative log-softmax of the target over non-ignored rows. When
/// `divisor` is set the sum is divided by it instead of the valid count.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const Token> targets, Token ignore_index,
                     std::optional<double> divisor = std::nullopt);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);
/// sum(x * weights) for a constant weight tensor of the same shape.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

}  // namespace specdraft
