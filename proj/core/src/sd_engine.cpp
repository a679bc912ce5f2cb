#include "specdraft/sd_engine.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <string>
#include <thread>

namespace specdraft {

template <typename T>
std::vector<Token> verify(const BaseLM<T>& base, KVCache<T>& cache, Token last_token, std::span<const Token> draft,
                          HiddenStateTaps<T>* taps_out) {
  std::vector<Token> input;
  input.reserve(draft.size() + 1);
  input.push_back(last_token);
  input.insert(input.end(), draft.begin(), draft.end());
  auto out = base.forward(TokenBatch::single(input), &cache, taps_out != nullptr);
  std::vector<Token> greedy(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) greedy[i] = greedy_next(logits_row(out.logits, 0, i));
  if (taps_out) *taps_out = std::move(*out.taps);
  return greedy;
}

StepResult accept(std::span<const Token> draft, std::span<const Token> base_greedy) {
  if (base_greedy.size() != draft.size() + 1) {
    throw DimensionError("accept needs l_d + 1 base tokens for l_d drafts, got " + std::to_string(draft.size()) +
                         " and " + std::to_string(base_greedy.size()));
  }
  StepResult r;
  r.drafted.assign(draft.begin(), draft.end());
  while (r.matched < draft.size() && draft[r.matched] == base_greedy[r.matched]) ++r.matched;
  r.emitted.assign(base_greedy.begin(), base_greedy.begin() + static_cast<std::ptrdiff_t>(r.matched + 1));
  return r;
}

namespace {

void finish_stats(AcceptanceStats& s) {
  if (s.k < s.l_d) throw ParameterError("draft budget k must be at least l_d");
  if (s.k == 0) throw ParameterError("draft budget k must be positive");
  s.a = s.steps ? static_cast<double>(s.tokens_emitted) / static_cast<double>(s.steps) : 0.0;
  s.kappa = s.a * static_cast<double>(s.l_d) / static_cast<double>(s.k);
}

}  // namespace

AcceptanceStats compute_stats(const std::vector<StepResult>& results, std::size_t l_d, std::size_t k) {
  if (results.empty()) throw ParameterError("compute_stats needs at least one step");
  AcceptanceStats s;
  s.l_d = l_d;
  s.k = k;
  s.steps = results.size();
  s.base_forwards = results.size();
  s.histogram.assign(l_d + 1, 0);
  for (const auto& r : results) {
    if (r.matched > l_d) throw DimensionError("step matched more drafts than l_d");
    s.tokens_emitted += r.emitted.size();
    ++s.histogram[r.matched];
  }
  finish_stats(s);
  return s;
}

AcceptanceStats merge_stats(const std::vector<AcceptanceStats>& runs) {
  if (runs.empty()) throw ParameterError("merge_stats needs at least one run");
  AcceptanceStats m;
  m.l_d = runs.front().l_d;
  m.k = runs.front().k;
  m.histogram.assign(m.l_d + 1, 0);
  for (const auto& r : runs) {
    if (r.l_d != m.l_d || r.k != m.k) throw ParameterError("cannot merge runs with different l_d or k");
    m.steps += r.steps;
    m.tokens_emitted += r.tokens_emitted;
    m.base_forwards += r.base_forwards;
    for (std::size_t i = 0; i < m.histogram.size(); ++i) m.histogram[i] += r.histogram[i];
  }
  finish_stats(m);
  return m;
}

template <typename T>
std::vector<Token> SpecFormerDrafter<T>::propose(const DraftRequest<T>& request) {
  if (!request.new_taps) return std::vector<Token>(sf_.config().l_d, request.last_token);
  return generate_draft(sf_, request.base, *request.new_taps, &request.cache);
}

template <typename T>
OracleDrafter<T>::OracleDrafter(std::vector<Token> reference, std::size_t l_d)
    : reference_(std::move(reference)), l_d_(l_d) {
  if (l_d_ == 0) throw ParameterError("l_d must be at least 1");
}

template <typename T>
OracleDrafter<T> OracleDrafter<T>::from_base(const BaseLM<T>& base, std::span<const Token> prompt, std::size_t n,
                                             std::size_t l_d) {
  return OracleDrafter(decode_greedy(base, prompt, n + l_d + 1), l_d);
}

template <typename T>
std::vector<Token> OracleDrafter<T>::propose(const DraftRequest<T>& request) {
  const std::size_t at = request.emitted.size();
  if (at + l_d_ > reference_.size()) throw CapacityError("oracle reference is too short for this step");
  return {reference_.begin() + static_cast<std::ptrdiff_t>(at),
          reference_.begin() + static_cast<std::ptrdiff_t>(at + l_d_)};
}

template <typename T>
SdResult sd_decode(const BaseLM<T>& base, Drafter<T>& drafter, std::span<const Token> prompt, std::size_t n,
                   std::size_t k) {
  const std::size_t l_d = drafter.draft_length();
  if (k == 0) k = l_d;
  if (prompt.empty()) throw ParameterError("sd_decode needs a nonempty prompt");
  if (prompt.size() + n + l_d + 1 > base.config().max_seq) {
    throw CapacityError("prompt of " + std::to_string(prompt.size()) + " plus " + std::to_string(n) +
                        " tokens and a draft of " + std::to_string(l_d) + " exceeds max_seq " +
                        std::to_string(base.config().max_seq));
  }
  SdResult res;
  if (n == 0) {
    res.stats.l_d = l_d;
    res.stats.k = k;
    res.stats.histogram.assign(l_d + 1, 0);
    return res;
  }

  // The cache always holds the accepted context except its newest token,
  // which is fed as the first position of the next verification forward.
  KVCache<T> cache = base.make_cache();
  std::optional<HiddenStateTaps<T>> taps;
  if (prompt.size() > 1) {
    auto out = base.forward(TokenBatch::single(prompt.first(prompt.size() - 1)), &cache, true);
    taps = std::move(out.taps);
  }
  Token last = prompt.back();
  std::vector<Token>& out = res.tokens;

  while (out.size() < n) {
    const std::size_t context = cache.length();
    auto draft = drafter.propose(DraftRequest<T>{base, cache, taps, last, out});
    if (draft.size() != l_d) throw DimensionError("drafter returned the wrong number of tokens");

    HiddenStateTaps<T> verify_taps;
    auto greedy = verify(base, cache, last, draft, &verify_taps);
    StepResult step = accept(draft, greedy);

    cache.truncate(context + step.matched + 1);
    taps = verify_taps.slice_positions(0, step.matched + 1);
    last = step.emitted.back();
    out.insert(out.end(), step.emitted.begin(), step.emitted.end());
    res.steps.push_back(std::move(step));
  }

  res.stats = compute_stats(res.steps, l_d, k);
  res.final_cache_length = cache.length();
  out.resize(n);
  return res;
}

template <typename T>
SdResult sd_decode(const BaseLM<T>& base, const SpecFormer<T>& sf, std::span<const Token> prompt, std::size_t n,
                   std::size_t k) {
  SpecFormerDrafter<T> drafter(sf);
  return sd_decode(base, drafter, prompt, n, k);
}

template <typename T>
std::vector<SdResult> sd_decode_sessions(const BaseLM<T>& base, const SpecFormer<T>& sf,
                                         const std::vector<std::vector<Token>>& prompts, std::size_t n,
                                         std::size_t k, std::size_t threads) {
  std::vector<SdResult> results(prompts.size());
  std::vector<std::exception_ptr> errors(prompts.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < prompts.size(); i = next++) {
      try {
        results[i] = sd_decode(base, sf, prompts[i], n, k);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(prompts.size(), 1));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

#define SPECDRAFT_INSTANTIATE_SD(T)                                                                              \
  template std::vector<Token> verify(const BaseLM<T>&, KVCache<T>&, Token, std::span<const Token>,               \
                                     HiddenStateTaps<T>*);                                                       \
  template class SpecFormerDrafter<T>;                                                                           \
  template class OracleDrafter<T>;                                                                               \
  template SdResult sd_decode(const BaseLM<T>&, Drafter<T>&, std::span<const Token>, std::size_t, std::size_t); \
  template SdResult sd_decode(const BaseLM<T>&, const SpecFormer<T>&, std::span<const Token>, std::size_t,      \
                              std::size_t);                                                                      \
  template std::vector<SdResult> sd_decode_sessions(const BaseLM<T>&, const SpecFormer<T>&,                     \
                                                    const std::vector<std::vector<Token>>&, std::size_t,         \
                                                    std::size_t, std::size_t);

SPECDRAFT_INSTANTIATE_SD(float)
SPECDRAFT_INSTANTIATE_SD(double)

}  // namespace specdraft
