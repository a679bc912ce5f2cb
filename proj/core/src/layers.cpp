#include "specdraft/layers.hpp"

#include "specdraft/prng.hpp"

namespace specdraft {

template <typename T>
Var<T> causal_self_attention(const Var<T>& x, const AttentionParams<T>& w, std::size_t heads, double rope_base,
                             KVCache<T>* cache, std::size_t layer) {
  const std::size_t batch = x.dim(0), seq = x.dim(1), width = x.dim(2);
  if (heads == 0 || width % heads != 0) throw DimensionError("attention width not divisible by heads");
  const std::size_t dh = width / heads;
  const std::size_t start = cache ? cache->layer_length(layer) : 0;

  auto q = rope(reshape(matmul(x, w.wq.var()), {batch, seq, heads, dh}), start, rope_base);
  auto k = rope(reshape(matmul(x, w.wk.var()), {batch, seq, heads, dh}), start, rope_base);
  auto v = reshape(matmul(x, w.wv.var()), {batch, seq, heads, dh});

  Var<T> k_all = k, v_all = v;
  if (cache) {
    if (cache->batch() != batch || cache->width() != width) {
      throw DimensionError("kv cache layout does not match attention input " + shape_str(x.shape()));
    }
    if (start > 0) {
      auto past_k = constant(cache->keys(layer).reshaped({batch, start, heads, dh}));
      auto past_v = constant(cache->values(layer).reshaped({batch, start, heads, dh}));
      k_all = concat<T>({past_k, k}, 1);
      v_all = concat<T>({past_v, v}, 1);
    }
    cache->append(layer, k.value().reshaped({batch, seq, width}), v.value().reshaped({batch, seq, width}));
  }
  const auto mask = AttentionMask::causal(seq, start + seq, start);
  auto att = scaled_dot_attention(q, k_all, v_all, &mask);
  return matmul(reshape(att, {batch, seq, width}), w.wo.var());
}

template <typename T>
Var<T> bidirectional_self_attention(const Var<T>& x, const AttentionParams<T>& w, std::size_t heads) {
  const std::size_t groups = x.dim(0), seq = x.dim(1), width = x.dim(2);
  if (heads == 0 || width % heads != 0) throw DimensionError("attention width not divisible by heads");
  const std::size_t dh = width / heads;
  auto q = reshape(matmul(x, w.wq.var()), {groups, seq, heads, dh});
  auto k = reshape(matmul(x, w.wk.var()), {groups, seq, heads, dh});
  auto v = reshape(matmul(x, w.wv.var()), {groups, seq, heads, dh});
  auto att = scaled_dot_attention<T>(q, k, v, nullptr);
  return matmul(reshape(att, {groups, seq, width}), w.wo.var());
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::uint64_t seed) {
  Tensor<T> t(std::move(shape));
  Prng rng(seed);
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template Var<float> causal_self_attention(const Var<float>&, const AttentionParams<float>&, std::size_t, double,
                                          KVCache<float>*, std::size_t);
template Var<double> causal_self_attention(const Var<double>&, const AttentionParams<double>&, std::size_t, double,
                                           KVCache<double>*, std::size_t);
template Var<float> bidirectional_self_attention(const Var<float>&, const AttentionParams<float>&, std::size_t);
template Var<double> bidirectional_self_attention(const Var<double>&, const AttentionParams<double>&, std::size_t);
template Tensor<float> normal_tensor(Shape, double, std::uint64_t);
template Tensor<double> normal_tensor(Shape, double, std::uint64_t);

}  // namespace specdraft
