#include "specdraft/base_lm.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "specdraft/layers.hpp"
#include "specdraft/prng.hpp"

namespace specdraft {

void BaseLMConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ParameterError("base." + key + ": " + why);
  };
  if (layers < 4) fail("layers", "need at least 4 layers so the four taps are distinct");
  if (hidden == 0) fail("hidden", "must be positive");
  if (heads == 0) fail("heads", "must be positive");
  if (hidden % heads != 0) fail("heads", "hidden size must be divisible by the head count");
  if ((hidden / heads) % 2 != 0) fail("heads", "head dimension must be even for rotary positions");
  if (ffn == 0) fail("ffn", "must be positive");
  if (vocab < 2) fail("vocab", "must be at least 2");
  if (max_seq < 2) fail("max_seq", "must be at least 2");
  if (!(rope_base > 1.0)) fail("rope_base", "must exceed 1");
  if (!(norm_eps > 0.0)) fail("norm_eps", "must be positive");
}

TokenBatch TokenBatch::single(std::span<const Token> tokens) {
  return TokenBatch{1, tokens.size(), std::vector<Token>(tokens.begin(), tokens.end())};
}

TokenBatch TokenBatch::rows(const std::vector<std::vector<Token>>& rows) {
  TokenBatch b;
  b.batch = rows.size();
  b.seq = rows.empty() ? 0 : rows.front().size();
  for (const auto& r : rows) {
    if (r.size() != b.seq) throw DimensionError("token batch rows have different lengths");
    b.ids.insert(b.ids.end(), r.begin(), r.end());
  }
  return b;
}

template <typename T>
HiddenStateTaps<T> HiddenStateTaps<T>::slice_positions(std::size_t begin, std::size_t end) const {
  auto cut = [&](const Var<T>& v) { return constant(slice(v, 1, begin, end).value()); };
  return {cut(hs0), cut(hs_mid), cut(hs_penult), cut(hs_last)};
}

template <typename T>
std::vector<std::pair<std::string, Shape>> BaseLM<T>::tensor_layout(const BaseLMConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embedding", Shape{c.vocab, c.hidden});
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "attn_norm", Shape{c.hidden});
    out.emplace_back(p + "wq", Shape{c.hidden, c.hidden});
    out.emplace_back(p + "wk", Shape{c.hidden, c.hidden});
    out.emplace_back(p + "wv", Shape{c.hidden, c.hidden});
    out.emplace_back(p + "wo", Shape{c.hidden, c.hidden});
    out.emplace_back(p + "ffn_norm", Shape{c.hidden});
    out.emplace_back(p + "w_gate", Shape{c.hidden, c.ffn});
    out.emplace_back(p + "w_up", Shape{c.hidden, c.ffn});
    out.emplace_back(p + "w_down", Shape{c.ffn, c.hidden});
  }
  out.emplace_back("final_norm", Shape{c.hidden});
  out.emplace_back("lm_head", Shape{c.hidden, c.vocab});
  return out;
}

template <typename T>
BaseLM<T> BaseLM<T>::zeros(const BaseLMConfig& config) {
  config.validate();
  BaseLM m;
  m.config_ = config;
  auto layout = tensor_layout(config);
  std::size_t i = 0;
  auto next = [&]() {
    const auto& [name, shape] = layout[i++];
    return Parameter<T>(name, Tensor<T>(shape));
  };
  m.embedding_ = next();
  m.layers_.resize(config.layers);
  for (auto& layer : m.layers_) {
    layer.attn_norm = next();
    layer.wq = next();
    layer.wk = next();
    layer.wv = next();
    layer.wo = next();
    layer.ffn_norm = next();
    layer.w_gate = next();
    layer.w_up = next();
    layer.w_down = next();
  }
  m.final_norm_ = next();
  m.lm_head_ = next();
  return m;
}

template <typename T>
BaseLM<T> BaseLM<T>::init(const BaseLMConfig& config, std::uint64_t seed) {
  BaseLM m = zeros(config);
  constexpr double kStd = 0.02;
  const double out_std = kStd / std::sqrt(2.0 * static_cast<double>(config.layers));
  for (Parameter<T>* p : m.parameters()) {
    const std::string& name = p->name();
    const bool is_norm = name.ends_with("norm");
    if (is_norm) {
      p->value().fill(T{1});
      continue;
    }
    const bool is_output = name.ends_with(".wo") || name.ends_with(".w_down");
    p->value() = normal_tensor<T>(p->shape(), is_output ? out_std : kStd, derive_seed(seed, name));
  }
  return m;
}

template <typename T>
std::vector<Parameter<T>*> BaseLM<T>::parameters() {
  std::vector<Parameter<T>*> out{&embedding_};
  for (auto& l : layers_) {
    for (Parameter<T>* p : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_up, &l.w_down})
      out.push_back(p);
  }
  out.push_back(&final_norm_);
  out.push_back(&lm_head_);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> BaseLM<T>::parameters() const {
  auto mut = const_cast<BaseLM*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
void BaseLM<T>::set_trainable(bool trainable) {
  for (Parameter<T>* p : parameters()) p->set_trainable(trainable);
}

template <typename T>
std::size_t BaseLM<T>::count_params() const {
  std::size_t n = 0;
  for (const Parameter<T>* p : parameters()) n += p->numel();
  return n;
}

template <typename T>
std::size_t BaseLM<T>::count_params(const BaseLMConfig& c) {
  const std::size_t d = c.hidden;
  return c.vocab * d + c.layers * (2 * d + 4 * d * d + 3 * d * c.ffn) + d + d * c.vocab;
}

template <typename T>
KVCache<T> BaseLM<T>::make_cache(std::size_t batch) const {
  return KVCache<T>(config_.layers + 1, batch, config_.max_seq, config_.hidden);
}

template <typename T>
Var<T> BaseLM<T>::head(const Var<T>& hidden) const {
  return matmul(rms_norm(hidden, final_norm_.var(), config_.norm_eps), lm_head_.var());
}

template <typename T>
LMOutput<T> BaseLM<T>::forward(const TokenBatch& tokens, KVCache<T>* cache, bool want_taps) const {
  const std::size_t batch = tokens.batch, seq = tokens.seq;
  if (batch == 0 || seq == 0) throw DimensionError("forward on an empty token batch");
  std::size_t start = 0;
  if (cache) {
    start = cache->layer_length(0);
    for (std::size_t l = 1; l < config_.layers; ++l) {
      if (cache->layer_length(l) != start) throw DimensionError("kv cache base layers are out of step");
    }
  }
  if (start + seq > config_.max_seq) {
    throw CapacityError("sequence of " + std::to_string(start + seq) + " exceeds max_seq " +
                        std::to_string(config_.max_seq));
  }

  Var<T> x = specdraft::embedding(embedding_.var(), std::span<const Token>(tokens.ids), Shape{batch, seq});
  LMOutput<T> out;
  HiddenStateTaps<T> taps;
  taps.hs0 = x;
  const std::size_t mid = config_.mid_layer();
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const DecoderLayer<T>& w = layers_[l];
    auto h = rms_norm(x, w.attn_norm.var(), config_.norm_eps);
    AttentionParams<T> ap{w.wq, w.wk, w.wv, w.wo};
    x = add(x, causal_self_attention(h, ap, config_.heads, config_.rope_base, cache, l));
    auto f = swiglu(rms_norm(x, w.ffn_norm.var(), config_.norm_eps), w.w_gate.var(), w.w_up.var(), w.w_down.var());
    x = add(x, f);
    if (l + 1 == mid) taps.hs_mid = x;
    if (l + 1 == config_.layers - 1) taps.hs_penult = x;
  }
  taps.hs_last = x;
  out.logits = head(x);
  if (want_taps) out.taps = std::move(taps);
  return out;
}

template <typename T>
Token greedy_next(std::span<const T> row) {
  if (row.empty()) throw DimensionError("greedy_next on an empty logits row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (std::isnan(row[i])) throw NumericError("NaN logit");
    if (row[i] > row[best]) best = i;
  }
  return static_cast<Token>(best);
}

template <typename T>
std::span<const T> logits_row(const Var<T>& logits, std::size_t b, std::size_t t) {
  const Shape& s = logits.shape();
  if (s.size() != 3 || b >= s[0] || t >= s[1]) throw DimensionError("logits_row index outside " + shape_str(s));
  const std::size_t vocab = s[2];
  return logits.value().data().subspan((b * s[1] + t) * vocab, vocab);
}

template <typename T>
std::vector<Token> decode_greedy(const BaseLM<T>& model, std::span<const Token> prompt, std::size_t n) {
  if (prompt.empty()) throw ParameterError("decode_greedy needs a nonempty prompt");
  if (prompt.size() + n > model.config().max_seq) {
    throw CapacityError("prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(n) +
                        " tokens exceeds max_seq " + std::to_string(model.config().max_seq));
  }
  std::vector<Token> out;
  if (n == 0) return out;
  out.reserve(n);
  auto cache = model.make_cache();
  auto res = model.forward(TokenBatch::single(prompt), &cache, false);
  out.push_back(greedy_next(logits_row(res.logits, 0, prompt.size() - 1)));
  while (out.size() < n) {
    const Token last = out.back();
    res = model.forward(TokenBatch::single(std::span<const Token>(&last, 1)), &cache, false);
    out.push_back(greedy_next(logits_row(res.logits, 0, 0)));
  }
  return out;
}

template struct HiddenStateTaps<float>;
template struct HiddenStateTaps<double>;
template class BaseLM<float>;
template class BaseLM<double>;
template Token greedy_next(std::span<const float>);
template Token greedy_next(std::span<const double>);
template std::span<const float> logits_row(const Var<float>&, std::size_t, std::size_t);
template std::span<const double> logits_row(const Var<double>&, std::size_t, std::size_t);
template std::vector<Token> decode_greedy(const BaseLM<float>&, std::span<const Token>, std::size_t);
template std::vector<Token> decode_greedy(const BaseLM<double>&, std::span<const Token>, std::size_t);

}  // namespace specdraft
