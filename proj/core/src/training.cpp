#include "specdraft/training.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "specdraft/prng.hpp"

namespace specdraft {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ParameterError("train.batch_size: must be positive");
  if (grad_accum == 0) throw ParameterError("train.grad_accum: must be positive");
  if (seq_len < 2) throw ParameterError("train.seq_len: must be at least 2");
  if (epochs == 0 && steps == 0) throw ParameterError("train.epochs: need epochs or steps");
  optim.validate();
}

std::size_t TrainConfig::steps_per_epoch(std::size_t corpus_entries) const {
  const std::size_t batches = (corpus_entries + batch_size - 1) / batch_size;
  return std::max<std::size_t>(1, (batches + grad_accum - 1) / grad_accum);
}

std::size_t TrainConfig::total_steps(std::size_t corpus_entries) const {
  return steps ? steps : steps_per_epoch(corpus_entries) * epochs;
}

BatchSampler::BatchSampler(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed)
    : corpus_(corpus), batch_size_(batch_size), seq_len_(seq_len), seed_(seed) {
  if (corpus.entries.empty()) throw ParameterError("cannot sample batches from an empty corpus");
  corpus.validate();
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(corpus_.entries.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Prng rng(derive_seed(seed_, "epoch." + std::to_string(epoch_)));
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.uniform_int(i)]);
  cursor_ = 0;
}

TokenBatch BatchSampler::next() {
  std::vector<std::size_t> picks;
  picks.reserve(batch_size_);
  while (picks.size() < batch_size_) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    picks.push_back(order_[cursor_++]);
  }
  std::size_t len = seq_len_;
  for (auto i : picks) len = std::min(len, corpus_.entries[i].size());

  Prng rng(derive_seed(seed_, "window." + std::to_string(draws_++)));
  TokenBatch b;
  b.batch = batch_size_;
  b.seq = len;
  b.ids.reserve(batch_size_ * len);
  for (auto i : picks) {
    const auto& e = corpus_.entries[i];
    const std::size_t start = rng.uniform_int(e.size() - len + 1);
    b.ids.insert(b.ids.end(), e.begin() + static_cast<std::ptrdiff_t>(start),
                 e.begin() + static_cast<std::ptrdiff_t>(start + len));
  }
  return b;
}

template <typename T>
Var<T> lm_loss(const BaseLM<T>& model, const TokenBatch& tokens) {
  if (tokens.seq < 2) throw DimensionError("lm_loss needs sequences of at least 2 tokens");
  const std::size_t S = tokens.seq - 1;
  TokenBatch inputs{tokens.batch, S, {}};
  std::vector<Token> targets;
  inputs.ids.reserve(tokens.batch * S);
  targets.reserve(tokens.batch * S);
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    auto row = tokens.row(b);
    inputs.ids.insert(inputs.ids.end(), row.begin(), row.end() - 1);
    targets.insert(targets.end(), row.begin() + 1, row.end());
  }
  auto out = model.forward(inputs, nullptr, false);
  return cross_entropy(out.logits, targets, Token{-1});
}

template <typename T>
BaseTrainResult<T> train_base(const Corpus& corpus, const BaseLMConfig& config, const TrainConfig& train) {
  train.validate();
  config.validate();
  if (corpus.vocab != config.vocab) {
    throw ParameterError("corpus vocab " + std::to_string(corpus.vocab) + " does not match base vocab " +
                         std::to_string(config.vocab));
  }
  if (train.seq_len > config.max_seq) throw ParameterError("train.seq_len: exceeds base max_seq");

  BaseTrainResult<T> res{BaseLM<T>::init(config, derive_seed(train.seed, "base.init")), {}};
  BaseLM<T>& model = res.model;
  AdamW<T> opt(model.parameters(), train.optim);
  BatchSampler sampler(corpus, train.batch_size, train.seq_len, derive_seed(train.seed, "base.batches"));
  const std::size_t total = train.total_steps(corpus.size());
  res.losses.reserve(total);
  for (std::size_t s = 0; s < total; ++s) {
    opt.zero_grad();
    double loss = 0.0;
    for (std::size_t micro = 0; micro < train.grad_accum; ++micro) {
      auto l = lm_loss(model, sampler.next());
      loss += l.value().item();
      backward(scale(l, static_cast<T>(1.0 / static_cast<double>(train.grad_accum))));
    }
    res.losses.push_back(loss / static_cast<double>(train.grad_accum));
    opt.step(lr_schedule(s + 1, total, train.optim));
  }
  return res;
}

template <typename T>
Corpus self_distill(const BaseLM<T>& base, const std::vector<std::vector<Token>>& prompts, std::size_t max_len) {
  Corpus c;
  c.vocab = base.config().vocab;
  c.source = CorpusSource::kDistilled;
  const std::size_t max_seq = base.config().max_seq;
  for (const auto& prompt : prompts) {
    if (prompt.empty()) throw ParameterError("self_distill got an empty prompt");
    if (prompt.size() >= max_seq) throw CapacityError("distillation prompt fills the whole context");
    const std::size_t n = std::min(max_len, max_seq - prompt.size());
    auto entry = prompt;
    auto completion = decode_greedy(base, prompt, n);
    entry.insert(entry.end(), completion.begin(), completion.end());
    c.entries.push_back(std::move(entry));
  }
  if (!c.entries.empty()) c.validate();
  return c;
}

std::vector<Token> draft_targets(const TokenBatch& tokens, std::size_t l_d, Token ignore) {
  std::vector<Token> out(tokens.batch * tokens.seq * l_d, ignore);
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    for (std::size_t t = 0; t < tokens.seq; ++t) {
      for (std::size_t j = 0; j < l_d; ++j) {
        const std::size_t target = t + 2 + j;
        if (target < tokens.seq) out[(b * tokens.seq + t) * l_d + j] = tokens.at(b, target);
      }
    }
  }
  return out;
}

namespace {

constexpr Token kIgnore = -1;

template <typename T>
void check_draft_batch(const BaseLM<T>& base, const SpecFormer<T>& sf, const TokenBatch& tokens) {
  check_compatible(sf.config(), base.config());
  if (tokens.seq < sf.config().l_d + 2) {
    throw DimensionError("draft training sequences need at least l_d + 2 = " +
                         std::to_string(sf.config().l_d + 2) + " tokens, got " + std::to_string(tokens.seq));
  }
}

// Taps of a forward through the base, cut loose from any graph.
template <typename T>
HiddenStateTaps<T> base_taps(const BaseLM<T>& base, const TokenBatch& tokens) {
  auto out = base.forward(tokens, nullptr, true);
  const auto& t = *out.taps;
  return {constant(t.hs0.value()), constant(t.hs_mid.value()), constant(t.hs_penult.value()),
          constant(t.hs_last.value())};
}

std::size_t count_valid(const std::vector<Token>& targets) {
  return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](Token t) { return t != kIgnore; }));
}

}  // namespace

template <typename T>
Var<T> draft_loss(const BaseLM<T>& base, const SpecFormer<T>& sf, const TokenBatch& tokens) {
  check_draft_batch(base, sf, tokens);
  auto e = sf.forward(base_taps(base, tokens), nullptr).e;
  auto logits = draft_logits(e, base);
  return cross_entropy(logits, draft_targets(tokens, sf.config().l_d, kIgnore), kIgnore);
}

template <typename T>
double grad_accum_lmhead(const BaseLM<T>& base, const SpecFormer<T>& sf, const TokenBatch& tokens,
                         std::size_t* peak_logits_elements) {
  check_draft_batch(base, sf, tokens);
  const std::size_t l_d = sf.config().l_d;
  const auto targets = draft_targets(tokens, l_d, kIgnore);
  const double divisor = static_cast<double>(count_valid(targets));

  auto e = sf.forward(base_taps(base, tokens), nullptr).e;
  // The head and loss run on a detached leaf one slot at a time; its
  // gradient then seeds a single backward through the draft model.
  Var<T> leaf = detach(e, true);
  std::vector<Token> slot_targets(tokens.batch * tokens.seq);
  double loss = 0.0;
  std::size_t peak = 0;
  for (std::size_t j = 0; j < l_d; ++j) {
    for (std::size_t r = 0; r < slot_targets.size(); ++r) slot_targets[r] = targets[r * l_d + j];
    if (count_valid(slot_targets) == 0) continue;
    auto logits = draft_logits(slice(leaf, 2, j, j + 1), base);
    peak = std::max(peak, logits.value().numel());
    auto l = cross_entropy(logits, slot_targets, kIgnore, divisor);
    loss += l.value().item();
    backward(l);
  }
  backward(e, leaf.grad());
  if (peak_logits_elements) *peak_logits_elements = peak;
  return loss;
}

template <typename T>
DraftTrainResult<T> train_draft(const BaseLM<T>& base, const SpecFormerConfig& config, const Corpus& corpus,
                                const TrainConfig& train, const DraftCheckpointFn<T>& on_epoch) {
  train.validate();
  config.validate();
  check_compatible(config, base.config());
  if (corpus.vocab != base.config().vocab) throw ParameterError("corpus vocab does not match the base model");
  if (train.seq_len < config.l_d + 2) throw ParameterError("train.seq_len: must be at least l_d + 2");

  BaseLM<T> frozen = base;
  frozen.set_trainable(false);
  DraftTrainResult<T> res{SpecFormer<T>::init(config, derive_seed(train.seed, "draft.init")), {}};
  SpecFormer<T>& sf = res.model;
  auto params = sf.parameters();
  AdamW<T> opt(params, train.optim);
  BatchSampler sampler(corpus, train.batch_size, train.seq_len, derive_seed(train.seed, "draft.batches"));
  const std::size_t total = train.total_steps(corpus.size());
  const std::size_t per_epoch = train.steps_per_epoch(corpus.size());
  res.losses.reserve(total);
  for (std::size_t s = 0; s < total; ++s) {
    opt.zero_grad();
    double loss = 0.0;
    for (std::size_t micro = 0; micro < train.grad_accum; ++micro) {
      loss += grad_accum_lmhead(frozen, sf, sampler.next());
    }
    if (train.grad_accum > 1) {
      const T inv = static_cast<T>(1.0 / static_cast<double>(train.grad_accum));
      for (auto* p : params)
        for (auto& g : p->grad().data()) g *= inv;
    }
    res.losses.push_back(loss / static_cast<double>(train.grad_accum));
    opt.step(lr_schedule(s + 1, total, train.optim));
    if (on_epoch && ((s + 1) % per_epoch == 0 || s + 1 == total)) on_epoch((s + per_epoch) / per_epoch, sf);
  }
  return res;
}

template <typename T>
std::vector<double> draft_accuracy(const BaseLM<T>& base, const SpecFormer<T>& sf, const Corpus& corpus,
                                   std::size_t seq_len) {
  const std::size_t l_d = sf.config().l_d;
  const std::size_t vocab = base.config().vocab;
  std::vector<std::size_t> hits(l_d, 0), seen(l_d, 0);
  for (const auto& entry : corpus.entries) {
    const std::size_t len = std::min({seq_len, entry.size(), base.config().max_seq});
    if (len < 2) continue;
    auto tokens = TokenBatch::single(std::span<const Token>(entry.data(), len));
    auto logits = draft_logits(sf.forward(base_taps(base, tokens), nullptr).e, base);
    const auto targets = draft_targets(tokens, l_d, kIgnore);
    auto data = logits.value().data();
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] == kIgnore) continue;
      const std::size_t j = r % l_d;
      ++seen[j];
      if (greedy_next(data.subspan(r * vocab, vocab)) == targets[r]) ++hits[j];
    }
  }
  std::vector<double> acc(l_d, 0.0);
  for (std::size_t j = 0; j < l_d; ++j) {
    acc[j] = seen[j] ? static_cast<double>(hits[j]) / static_cast<double>(seen[j]) : 0.0;
  }
  return acc;
}

#define SPECDRAFT_INSTANTIATE_TRAINING(T)                                                                        \
  template Var<T> lm_loss(const BaseLM<T>&, const TokenBatch&);                                                  \
  template struct BaseTrainResult<T>;                                                                            \
  template BaseTrainResult<T> train_base<T>(const Corpus&, const BaseLMConfig&, const TrainConfig&);            \
  template Corpus self_distill(const BaseLM<T>&, const std::vector<std::vector<Token>>&, std::size_t);          \
  template Var<T> draft_loss(const BaseLM<T>&, const SpecFormer<T>&, const TokenBatch&);                        \
  template double grad_accum_lmhead(const BaseLM<T>&, const SpecFormer<T>&, const TokenBatch&, std::size_t*);   \
  template struct DraftTrainResult<T>;                                                                           \
  template DraftTrainResult<T> train_draft(const BaseLM<T>&, const SpecFormerConfig&, const Corpus&,            \
                                           const TrainConfig&, const DraftCheckpointFn<T>&);                     \
  template std::vector<double> draft_accuracy(const BaseLM<T>&, const SpecFormer<T>&, const Corpus&, std::size_t);

SPECDRAFT_INSTANTIATE_TRAINING(float)
SPECDRAFT_INSTANTIATE_TRAINING(double)

}  // namespace specdraft
