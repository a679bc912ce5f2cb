#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "specdraft/base_lm.hpp"
#include "specdraft/specformer.hpp"

namespace specdraft {

struct StepResult {
  std::vector<Token> drafted;
  std::size_t matched = 0;
  /// The matched drafts followed by the bonus token.
  std::vector<Token> emitted;
};

struct AcceptanceStats {
  std::size_t l_d = 0;
  std::size_t k = 0;
  std::size_t steps = 0;
  std::size_t tokens_emitted = 0;
  /// Mean tokens emitted per step, bonus token included.
  double a = 0.0;
  double kappa = 0.0;
  /// histogram[m] counts steps that matched exactly m drafts; size l_d + 1.
  std::vector<std::size_t> histogram;
  /// Verification forwards of the base model (prompt prefill excluded).
  std::size_t base_forwards = 0;
};

/// Runs one base forward over [last_token, draft...] continuing `cache` and
/// returns the base's greedy token at each of the l_d + 1 positions. The
/// cache grows by l_d + 1; `taps_out`, when given, receives the hidden-state
/// taps of those positions.
template <typename T>
std::vector<Token> verify(const BaseLM<T>& base, KVCache<T>& cache, Token last_token, std::span<const Token> draft,
                          HiddenStateTaps<T>* taps_out = nullptr);

/// Longest exact-match prefix of `draft` against `base_greedy`, plus the
/// bonus token base_greedy[matched].
StepResult accept(std::span<const Token> draft, std::span<const Token> base_greedy);

/// a = mean emitted per step; kappa = a * l_d / k. Requires k >= l_d.
AcceptanceStats compute_stats(const std::vector<StepResult>& results, std::size_t l_d, std::size_t k);

/// Pools several runs; a and kappa are recomputed from the pooled counts.
AcceptanceStats merge_stats(const std::vector<AcceptanceStats>& runs);

/// What a drafter sees before each step.
template <typename T>
struct DraftRequest {
  const BaseLM<T>& base;
  KVCache<T>& cache;
  /// Taps of the base positions not yet seen by the drafter; empty when the
  /// context before last_token is empty.
  const std::optional<HiddenStateTaps<T>>& new_taps;
  Token last_token;
  /// Tokens emitted so far (prompt excluded).
  std::span<const Token> emitted;
};

template <typename T>
class Drafter {
 public:
  virtual ~Drafter() = default;
  virtual std::size_t draft_length() const = 0;
  virtual std::vector<Token> propose(const DraftRequest<T>& request) = 0;
};

/// Drafts with a SpecFormer. Before any context exists it proposes
/// last_token repeated.
template <typename T>
class SpecFormerDrafter final : public Drafter<T> {
 public:
  explicit SpecFormerDrafter(const SpecFormer<T>& sf) : sf_(sf) {}
  std::size_t draft_length() const override { return sf_.config().l_d; }
  std::vector<Token> propose(const DraftRequest<T>& request) override;

 private:
  const SpecFormer<T>& sf_;
};

/// Proposes the base model's own continuation, read from a precomputed
/// greedy reference; every draft is accepted.
template <typename T>
class OracleDrafter final : public Drafter<T> {
 public:
  OracleDrafter(std::vector<Token> reference, std::size_t l_d);
  static OracleDrafter from_base(const BaseLM<T>& base, std::span<const Token> prompt, std::size_t n,
                                 std::size_t l_d);
  std::size_t draft_length() const override { return l_d_; }
  std::vector<Token> propose(const DraftRequest<T>& request) override;

 private:
  std::vector<Token> reference_;
  std::size_t l_d_;
};

struct SdResult {
  std::vector<Token> tokens;
  AcceptanceStats stats;
  std::vector<StepResult> steps;
  /// Cache length after the last step (accepted context minus the newest token).
  std::size_t final_cache_length = 0;
};

/// Draft, verify, accept and roll back until n tokens exist; the output is
/// trimmed to n while the statistics count every emitted token. `k` is the
/// draft-token budget (0 means l_d).
template <typename T>
SdResult sd_decode(const BaseLM<T>& base, Drafter<T>& drafter, std::span<const Token> prompt, std::size_t n,
                   std::size_t k = 0);

template <typename T>
SdResult sd_decode(const BaseLM<T>& base, const SpecFormer<T>& sf, std::span<const Token> prompt, std::size_t n,
                   std::size_t k = 0);

/// Decodes every prompt on `threads` workers, one cache per session, and
/// returns results in prompt order.
template <typename T>
std::vector<SdResult> sd_decode_sessions(const BaseLM<T>& base, const SpecFormer<T>& sf,
                                         const std::vector<std::vector<Token>>& prompts, std::size_t n,
                                         std::size_t k = 0, std::size_t threads = 1);

}  // namespace specdraft
