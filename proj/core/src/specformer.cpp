#include "specdraft/specformer.hpp"

#include <string>

#include "specdraft/layers.hpp"
#include "specdraft/prng.hpp"

namespace specdraft {

void SpecFormerConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ParameterError("draft." + key + ": " + why);
  };
  if (hidden == 0) fail("hidden", "must be positive");
  if (l_d < 1) fail("l_d", "draft length must be at least 1");
  if (heads == 0) fail("heads", "must be positive");
  if (hidden % heads != 0) fail("heads", "hidden size must be divisible by the head count");
  if ((hidden / heads) % 2 != 0) fail("heads", "head dimension must be even for rotary positions");
  if (ffn == 0) fail("ffn", "must be positive");
  if (blocks == 0) fail("blocks", "need at least one draft block");
  if (!(norm_eps > 0.0)) fail("norm_eps", "must be positive");
  if (!(rope_base > 1.0)) fail("rope_base", "must exceed 1");
}

void check_compatible(const SpecFormerConfig& draft, const BaseLMConfig& base) {
  if (draft.hidden != base.hidden) {
    throw DimensionError("draft hidden size " + std::to_string(draft.hidden) + " does not match base " +
                         std::to_string(base.hidden));
  }
  if (draft.rope_base != base.rope_base) throw DimensionError("draft rope_base differs from the base model");
}

template <typename T>
std::vector<std::pair<std::string, Shape>> SpecFormer<T>::tensor_layout(const SpecFormerConfig& c) {
  const std::size_t d = c.hidden;
  std::vector<std::pair<std::string, Shape>> out{
      {"group_scales", {4, d}}, {"w_d", {4 * d, d}},         {"ctx.norm", {d}},
      {"ctx.wq", {d, d}},       {"ctx.wk", {d, d}},          {"ctx.wv", {d, d}},
      {"ctx.wo", {d, d}},       {"pos.norm", {d}},           {"pos.w_p", {d, c.l_d * d}},
      {"pos.b_p", {c.l_d * d}},
  };
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    out.emplace_back(p + "sa_norm", Shape{d});
    out.emplace_back(p + "wq", Shape{d, d});
    out.emplace_back(p + "wk", Shape{d, d});
    out.emplace_back(p + "wv", Shape{d, d});
    out.emplace_back(p + "wo", Shape{d, d});
    out.emplace_back(p + "ffn_norm", Shape{d});
    out.emplace_back(p + "w_gate", Shape{d, c.ffn});
    out.emplace_back(p + "w_up", Shape{d, c.ffn});
    out.emplace_back(p + "w_down", Shape{c.ffn, d});
  }
  return out;
}

template <typename T>
bool SpecFormer<T>::is_positional(const std::string& name) {
  return name == "pos.w_p" || name == "pos.b_p";
}

template <typename T>
SpecFormer<T> SpecFormer<T>::zeros(const SpecFormerConfig& config) {
  config.validate();
  SpecFormer sf;
  sf.config_ = config;
  sf.blocks_.resize(config.blocks);
  auto layout = tensor_layout(config);
  auto slots = sf.parameters();
  for (std::size_t i = 0; i < layout.size(); ++i) {
    *slots[i] = Parameter<T>(layout[i].first, Tensor<T>(layout[i].second));
  }
  return sf;
}

template <typename T>
SpecFormer<T> SpecFormer<T>::init(const SpecFormerConfig& config, std::uint64_t seed) {
  SpecFormer sf = zeros(config);
  constexpr double kStd = 0.02;
  for (Parameter<T>* p : sf.parameters()) {
    const std::string& name = p->name();
    if (name == "group_scales" || name.ends_with("norm")) {
      p->value().fill(T{1});
    } else if (name != "pos.b_p") {
      p->value() = normal_tensor<T>(p->shape(), kStd, derive_seed(seed, name));
    }
  }
  return sf;
}

template <typename T>
std::vector<Parameter<T>*> SpecFormer<T>::parameters() {
  std::vector<Parameter<T>*> out{&group_scales_, &w_d_,     &ctx_norm_, &ctx_wq_, &ctx_wk_,
                                 &ctx_wv_,       &ctx_wo_,  &pos_norm_, &w_p_,    &b_p_};
  for (auto& b : blocks_) {
    for (Parameter<T>* p : {&b.sa_norm, &b.wq, &b.wk, &b.wv, &b.wo, &b.ffn_norm, &b.w_gate, &b.w_up, &b.w_down})
      out.push_back(p);
  }
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> SpecFormer<T>::parameters() const {
  auto mut = const_cast<SpecFormer*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::size_t SpecFormer<T>::count_params() const {
  std::size_t n = 0;
  for (const Parameter<T>* p : parameters()) n += p->numel();
  return n;
}

template <typename T>
Var<T> SpecFormer<T>::hook_concat(const HiddenStateTaps<T>& taps) const {
  const Shape& s = taps.hs0.shape();
  for (const Var<T>* t : {&taps.hs_mid, &taps.hs_penult, &taps.hs_last}) {
    if (t->shape() != s) {
      throw DimensionError("hidden-state taps disagree: " + shape_str(s) + " vs " + shape_str(t->shape()));
    }
  }
  if (s.size() != 3 || s[2] != config_.hidden) {
    throw DimensionError("taps must be (batch, seq, " + std::to_string(config_.hidden) + "), got " + shape_str(s));
  }
  auto cat = concat<T>({taps.hs0, taps.hs_mid, taps.hs_penult, taps.hs_last}, 2);
  return grouped_rms_norm(cat, group_scales_.var(), 4, config_.norm_eps);
}

template <typename T>
Var<T> SpecFormer<T>::context_causal_attention(const Var<T>& i_cat, KVCache<T>* cache) const {
  std::size_t layer = 0;
  if (cache) {
    if (cache->layers() < 2) throw DimensionError("kv cache has no draft layer");
    layer = cache->layers() - 1;
    const std::size_t base_len = cache->layer_length(0);
    const std::size_t draft_len = cache->layer_length(layer);
    const std::size_t seq = i_cat.dim(1);
    if (base_len != 0 && draft_len + seq != base_len) {
      throw DimensionError("draft context at " + std::to_string(draft_len) + " plus " + std::to_string(seq) +
                           " new positions does not reach the base cache length " + std::to_string(base_len));
    }
  }
  auto x = matmul(i_cat, w_d_.var());
  auto h = rms_norm(x, ctx_norm_.var(), config_.norm_eps);
  AttentionParams<T> ap{ctx_wq_, ctx_wk_, ctx_wv_, ctx_wo_};
  return add(causal_self_attention(h, ap, config_.heads, config_.rope_base, cache, layer), x);
}

template <typename T>
Var<T> SpecFormer<T>::positional_ffn(const Var<T>& i_d) const {
  const Shape& s = i_d.shape();
  if (s.size() != 3 || s[2] != config_.hidden) {
    throw DimensionError("positional_ffn expects (batch, seq, " + std::to_string(config_.hidden) + "), got " +
                         shape_str(s));
  }
  auto y = add_bias(matmul(rms_norm(i_d, pos_norm_.var(), config_.norm_eps), w_p_.var()), b_p_.var());
  return reshape(y, {s[0], s[1], config_.l_d, config_.hidden});
}

template <typename T>
Var<T> SpecFormer<T>::draft_bidirectional_block(const Var<T>& d) const {
  const Shape& s = d.shape();
  if (s.size() != 4 || s[2] != config_.l_d || s[3] != config_.hidden) {
    throw DimensionError("draft states must be (batch, seq, " + std::to_string(config_.l_d) + ", " +
                         std::to_string(config_.hidden) + "), got " + shape_str(s));
  }
  auto x = reshape(d, {s[0] * s[1], s[2], s[3]});
  for (const DraftBlock<T>& b : blocks_) {
    AttentionParams<T> ap{b.wq, b.wk, b.wv, b.wo};
    x = add(x, bidirectional_self_attention(rms_norm(x, b.sa_norm.var(), config_.norm_eps), ap, config_.heads));
    x = add(x, swiglu(rms_norm(x, b.ffn_norm.var(), config_.norm_eps), b.w_gate.var(), b.w_up.var(),
                      b.w_down.var()));
  }
  return reshape(x, s);
}

template <typename T>
DraftStates<T> SpecFormer<T>::forward(const HiddenStateTaps<T>& taps, KVCache<T>* cache) const {
  DraftStates<T> st;
  st.i_cat = hook_concat(taps);
  st.i_d = context_causal_attention(st.i_cat, cache);
  st.d = positional_ffn(st.i_d);
  st.e = draft_bidirectional_block(st.d);
  return st;
}

namespace {

// Frozen parameters can be used directly; a trainable one is copied into a
// constant so nothing flows back into the base.
template <typename T>
Var<T> frozen(const Parameter<T>& p) {
  return p.trainable() ? constant(p.value()) : p.var();
}

}  // namespace

template <typename T>
Var<T> draft_logits(const Var<T>& e, const BaseLM<T>& base) {
  const Shape& s = e.shape();
  if (s.empty() || s.back() != base.config().hidden) {
    throw DimensionError("draft states " + shape_str(s) + " do not match base hidden size " +
                         std::to_string(base.config().hidden));
  }
  auto h = rms_norm(e, frozen(base.final_norm()), base.config().norm_eps);
  return matmul(h, frozen(base.lm_head()));
}

template <typename T>
std::vector<Token> generate_draft(const SpecFormer<T>& sf, const BaseLM<T>& base, const HiddenStateTaps<T>& taps,
                                  KVCache<T>* cache) {
  check_compatible(sf.config(), base.config());
  if (taps.batch() != 1) throw DimensionError("generate_draft works on a single sequence");
  auto i_d = sf.context_causal_attention(sf.hook_concat(taps), cache);
  const std::size_t seq = i_d.dim(1);
  auto last = seq == 1 ? i_d : slice(i_d, 1, seq - 1, seq);
  auto logits = draft_logits(sf.draft_bidirectional_block(sf.positional_ffn(last)), base);
  const std::size_t vocab = base.config().vocab;
  std::vector<Token> draft(sf.config().l_d);
  auto data = logits.value().data();
  for (std::size_t j = 0; j < draft.size(); ++j) draft[j] = greedy_next(data.subspan(j * vocab, vocab));
  return draft;
}

DraftParamCounts count_draft_params(const SpecFormerConfig& config) {
  DraftParamCounts c;
  std::size_t positional = 0, total = 0;
  for (const auto& [name, shape] : SpecFormer<float>::tensor_layout(config)) {
    const std::size_t n = shape_numel(shape);
    total += n;
    if (SpecFormer<float>::is_positional(name)) positional += n;
  }
  c.m_p = positional / config.l_d;
  c.m_s = total - positional;
  return c;
}

template <typename T>
DraftParamCounts count_draft_params(const SpecFormer<T>& sf) {
  DraftParamCounts c;
  std::size_t positional = 0, total = 0;
  for (const Parameter<T>* p : sf.parameters()) {
    total += p->numel();
    if (SpecFormer<T>::is_positional(p->name())) positional += p->numel();
  }
  c.m_p = positional / sf.config().l_d;
  c.m_s = total - positional;
  return c;
}

template struct DraftStates<float>;
template struct DraftStates<double>;
template class SpecFormer<float>;
template class SpecFormer<double>;
template Var<float> draft_logits(const Var<float>&, const BaseLM<float>&);
template Var<double> draft_logits(const Var<double>&, const BaseLM<double>&);
template std::vector<Token> generate_draft(const SpecFormer<float>&, const BaseLM<float>&,
                                           const HiddenStateTaps<float>&, KVCache<float>*);
template std::vector<Token> generate_draft(const SpecFormer<double>&, const BaseLM<double>&,
                                           const HiddenStateTaps<double>&, KVCache<double>*);
template DraftParamCounts count_draft_params(const SpecFormer<float>&);
template DraftParamCounts count_draft_params(const SpecFormer<double>&);

}  // namespace specdraft
