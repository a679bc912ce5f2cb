#include <gtest/gtest.h>

#include <cmath>

#include "specdraft/sd_engine.hpp"
#include "support.hpp"

namespace specdraft {
namespace {

using testing::draft_for;
using testing::random_tokens;
using testing::random_toy_base;
using testing::tiny_base;

std::vector<Token> span_vec(std::initializer_list<Token> t) { return std::vector<Token>(t); }

StepResult step_with(std::size_t matched, std::size_t l_d) {
  StepResult s;
  s.drafted.assign(l_d, 0);
  s.matched = matched;
  s.emitted.assign(matched + 1, 0);
  return s;
}

/// Always proposes tokens the base will not produce, so nothing is accepted.
template <typename T>
class MismatchDrafter final : public Drafter<T> {
 public:
  MismatchDrafter(std::vector<Token> reference, std::size_t l_d, std::size_t vocab)
      : ref_(std::move(reference)), l_d_(l_d), vocab_(vocab) {}
  std::size_t draft_length() const override { return l_d_; }
  std::vector<Token> propose(const DraftRequest<T>& r) override {
    const Token next = ref_[r.emitted.size()];
    return std::vector<Token>(l_d_, static_cast<Token>((next + 1) % static_cast<Token>(vocab_)));
  }

 private:
  std::vector<Token> ref_;
  std::size_t l_d_, vocab_;
};

/// Random drafts that also audit the cache before every step.
template <typename T>
class AuditingDrafter final : public Drafter<T> {
 public:
  AuditingDrafter(std::vector<Token> prompt, std::size_t l_d, std::uint64_t seed)
      : prompt_(std::move(prompt)), l_d_(l_d), rng_(seed) {}
  std::size_t draft_length() const override { return l_d_; }
  std::vector<Token> propose(const DraftRequest<T>& r) override {
    std::vector<Token> context = prompt_;
    context.insert(context.end(), r.emitted.begin(), r.emitted.end());
    EXPECT_EQ(r.last_token, context.back());
    context.pop_back();
    const std::size_t base_layers = r.base.config().layers;
    for (std::size_t l = 0; l < base_layers; ++l) EXPECT_EQ(r.cache.layer_length(l), context.size());
    if (!context.empty()) {
      auto fresh = r.base.make_cache();
      r.base.forward(TokenBatch::single(context), &fresh, false);
      for (std::size_t l = 0; l < base_layers; ++l) {
        auto a = r.cache.keys(l), b = fresh.keys(l);
        for (std::size_t i = 0; i < a.numel(); ++i) max_key_diff = std::max(max_key_diff, std::abs(double(a[i] - b[i])));
      }
    }
    ++calls;
    std::vector<Token> d(l_d_);
    for (auto& t : d) t = static_cast<Token>(rng_.uniform_int(r.base.config().vocab));
    return d;
  }
  double max_key_diff = 0.0;
  std::size_t calls = 0;

 private:
  std::vector<Token> prompt_;
  std::size_t l_d_;
  Prng rng_;
};

TEST(Accept, Examples) {
  auto full = accept(span_vec({5, 7, 9}), span_vec({5, 7, 9, 2}));
  EXPECT_EQ(full.matched, 3u);
  EXPECT_EQ(full.emitted, span_vec({5, 7, 9, 2}));
  auto one = accept(span_vec({5, 8, 9}), span_vec({5, 7, 1, 1}));
  EXPECT_EQ(one.matched, 1u);
  EXPECT_EQ(one.emitted, span_vec({5, 7}));
  auto none = accept(span_vec({3, 7, 9}), span_vec({5, 7, 9, 1}));
  EXPECT_EQ(none.matched, 0u);
  EXPECT_EQ(none.emitted, span_vec({5}));
  EXPECT_THROW(accept(span_vec({1, 2}), span_vec({1, 2})), DimensionError);
}

TEST(Accept, PropertyEmittedIsMatchedPlusBonusPrefix) {
  Prng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t l_d = 1 + rng.uniform_int(8);
    auto greedy = random_tokens(l_d + 1, 3, rng);
    std::vector<Token> draft(greedy.begin(), greedy.begin() + static_cast<std::ptrdiff_t>(l_d));
    for (auto& t : draft)
      if (rng.uniform() < 0.3) t = static_cast<Token>(rng.uniform_int(3));
    auto s = accept(draft, greedy);
    std::size_t m = 0;
    while (m < l_d && draft[m] == greedy[m]) ++m;
    ASSERT_EQ(s.matched, m);
    ASSERT_EQ(s.emitted.size(), s.matched + 1);
    ASSERT_TRUE(std::equal(s.emitted.begin(), s.emitted.end(), greedy.begin()));
  }
}

TEST(ComputeStats, Examples) {
  std::vector<StepResult> two{step_with(1, 4), step_with(1, 4)};
  auto s = compute_stats(two, 4, 4);
  EXPECT_DOUBLE_EQ(s.a, 2.0);
  EXPECT_DOUBLE_EQ(s.kappa, 2.0);
  EXPECT_DOUBLE_EQ(compute_stats(two, 4, 8).kappa, 1.0);
  std::vector<StepResult> miss{step_with(0, 4), step_with(0, 4), step_with(0, 4)};
  auto m = compute_stats(miss, 4, 8);
  EXPECT_DOUBLE_EQ(m.a, 1.0);
  EXPECT_DOUBLE_EQ(m.kappa, 0.5);
  EXPECT_THROW(compute_stats({}, 4, 4), ParameterError);
  EXPECT_THROW(compute_stats(two, 4, 3), ParameterError);
}

TEST(ComputeStats, PropertyHistogramAndMeanIdentities) {
  Prng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t l_d = 1 + rng.uniform_int(8);
    std::vector<StepResult> steps(1 + rng.uniform_int(30));
    std::size_t matched_total = 0;
    for (auto& s : steps) {
      s = step_with(rng.uniform_int(l_d + 1), l_d);
      matched_total += s.matched;
    }
    const std::size_t k = l_d + rng.uniform_int(4);
    auto st = compute_stats(steps, l_d, k);
    std::size_t hist_total = 0;
    for (auto h : st.histogram) hist_total += h;
    ASSERT_EQ(st.histogram.size(), l_d + 1);
    ASSERT_EQ(hist_total, steps.size());
    ASSERT_EQ(st.tokens_emitted, matched_total + steps.size());
    ASSERT_NEAR(st.a, 1.0 + double(matched_total) / double(steps.size()), 1e-12);
    ASSERT_GE(st.a, 1.0);
    ASSERT_LE(st.a, double(l_d + 1));
    ASSERT_NEAR(st.kappa, st.a * double(l_d) / double(k), 1e-12);
  }
}

TEST(MergeStats, PoolsCounts) {
  auto a = compute_stats({step_with(4, 4)}, 4, 4);
  auto b = compute_stats({step_with(0, 4), step_with(0, 4), step_with(1, 4)}, 4, 4);
  auto m = merge_stats({a, b});
  EXPECT_EQ(m.steps, 4u);
  EXPECT_EQ(m.tokens_emitted, 9u);
  EXPECT_DOUBLE_EQ(m.a, 2.25);
  EXPECT_EQ(m.histogram, (std::vector<std::size_t>{2, 1, 0, 0, 1}));
}

TEST(Verify, ReturnsLdPlusOneTokensMatchingSequentialSteps) {
  auto c = tiny_base();
  auto base = BaseLM<float>::init(c, 3);
  Prng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t l_d = 1 + rng.uniform_int(5);
    auto context = random_tokens(2 + rng.uniform_int(6), c.vocab, rng);
    auto draft = random_tokens(l_d, c.vocab, rng);
    auto cache = base.make_cache();
    base.forward(TokenBatch::single(std::span<const Token>(context.data(), context.size() - 1)), &cache, false);
    auto got = verify(base, cache, context.back(), draft);
    ASSERT_EQ(got.size(), l_d + 1);
    EXPECT_EQ(cache.layer_length(0), context.size() + l_d);
    // Oracle: one greedy step on every hypothetical prefix.
    std::vector<Token> prefix = context;
    for (std::size_t i = 0; i <= l_d; ++i) {
      ASSERT_EQ(got[i], decode_greedy(base, std::span<const Token>(prefix), 1)[0]) << "position " << i;
      if (i < l_d) prefix.push_back(draft[i]);
    }
  }
}

TEST(Verify, PositionZeroIgnoresTheDraft) {
  auto c = tiny_base();
  auto base = BaseLM<float>::init(c, 5);
  std::vector<Token> context{3, 1, 4};
  Token first = -1;
  Prng rng(6);
  for (int trial = 0; trial < 8; ++trial) {
    auto cache = base.make_cache();
    base.forward(TokenBatch::single(std::span<const Token>(context.data(), 2)), &cache, false);
    auto got = verify(base, cache, context.back(), random_tokens(2, c.vocab, rng));
    EXPECT_EQ(got.size(), 3u);
    if (first < 0) first = got[0];
    EXPECT_EQ(got[0], first);
  }
  EXPECT_EQ(first, decode_greedy(base, std::span<const Token>(context), 1)[0]);
}

TEST(SdDecode, RandomDraftIsLosslessOverTenSeeds) {
  auto c = tiny_base();
  auto base = BaseLM<float>::init(c, 7);
  std::vector<Token> prompt{1, 2, 3, 4};
  const auto want = decode_greedy(base, std::span<const Token>(prompt), 64);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto sf = SpecFormer<float>::init(draft_for(c, 4), seed);
    auto res = sd_decode(base, sf, std::span<const Token>(prompt), 64);
    ASSERT_EQ(res.tokens, want) << "seed " << seed;
    EXPECT_EQ(res.stats.base_forwards, res.stats.steps);
    EXPECT_LE(res.stats.steps, 64u);
  }
}

TEST(SdDecode, PropertyLosslessAcrossModelsPromptsAndLengths) {
  Prng rng(8);
  for (int trial = 0; trial < 12; ++trial) {
    auto c = random_toy_base(rng);
    auto base = BaseLM<float>::init(c, rng.next_u64());
    const std::size_t l_d = 1 + rng.uniform_int(6);
    SpecFormerConfig dc = draft_for(c, l_d, c.heads);
    dc.ffn = 1 + rng.uniform_int(24);
    auto sf = SpecFormer<float>::init(dc, rng.next_u64());
    auto prompt = random_tokens(1 + rng.uniform_int(10), c.vocab, rng);
    const std::size_t n = rng.uniform_int(40);
    auto res = sd_decode(base, sf, std::span<const Token>(prompt), n);
    ASSERT_EQ(res.tokens, decode_greedy(base, std::span<const Token>(prompt), n));
    if (n == 0) continue;
    std::size_t emitted = 0;
    for (const auto& s : res.steps) {
      ASSERT_EQ(s.emitted.size(), s.matched + 1);
      emitted += s.emitted.size();
    }
    ASSERT_EQ(res.stats.tokens_emitted, emitted);
    ASSERT_GE(emitted, n);
    ASSERT_LT(emitted - n, l_d + 1);
    ASSERT_LE(res.stats.steps, n);
    ASSERT_EQ(res.final_cache_length, prompt.size() + emitted - 1);
  }
}

TEST(SdDecode, DoublePrecisionIsLosslessToo) {
  auto c = tiny_base();
  auto base = BaseLM<double>::init(c, 9);
  auto sf = SpecFormer<double>::init(draft_for(c, 3), 10);
  std::vector<Token> prompt{7, 7, 1};
  EXPECT_EQ(sd_decode(base, sf, std::span<const Token>(prompt), 30).tokens,
            decode_greedy(base, std::span<const Token>(prompt), 30));
}

TEST(SdDecode, OracleDraftTakesCeilNOverLdPlusOneSteps) {
  auto c = tiny_base();
  auto base = BaseLM<float>::init(c, 11);
  std::vector<Token> prompt{5, 6};
  for (std::size_t l_d : {1u, 2u, 3u, 4u, 8u}) {
    for (std::size_t n : {1u, 9u, 40u}) {
      auto oracle = OracleDrafter<float>::from_base(base, prompt, n, l_d);
      auto res = sd_decode(base, oracle, std::span<const Token>(prompt), n);
      EXPECT_EQ(res.stats.steps, (n + l_d) / (l_d + 1)) << "l_d " << l_d << " n " << n;
      // Statistics count every emitted token; only the output is trimmed.
      EXPECT_DOUBLE_EQ(res.stats.a, double(l_d + 1));
      EXPECT_DOUBLE_EQ(std::min(res.stats.a, double(n)), std::min(double(l_d + 1), double(n)));
      EXPECT_EQ(res.tokens, decode_greedy(base, std::span<const Token>(prompt), n));
    }
  }
}

TEST(SdDecode, SingleTokenWithRejectedDraftIsOneStepOfOne) {
  auto c = tiny_base();
  auto base = BaseLM<float>::init(c, 12);
  std::vector<Token> prompt{2, 9, 4};
  auto ref = decode_greedy(base, std::span<const Token>(prompt), 1);
  MismatchDrafter<float> drafter(ref, 4, c.vocab);
  auto res = sd_decode(base, drafter, std::span<const Token>(prompt), 1);
  EXPECT_EQ(res.stats.steps, 1u);
  EXPECT_EQ(res.tokens.size(), 1u);
  EXPECT_EQ(res.steps[0].emitted.size(), 1u);
  EXPECT_DOUBLE_EQ(res.stats.a, 1.0);
  EXPECT_DOUBLE_EQ(res.stats.kappa, 1.0);
}

TEST(SdDecode, AllMismatchRunHasUnitAcceptanceAndReducedKappa) {
  auto c = tiny_base();
  auto base = BaseLM<float>::init(c, 13);
  std::vector<Token> prompt{1};
  auto ref = decode_greedy(base, std::span<const Token>(prompt), 20);
  MismatchDrafter<float> drafter(ref, 4, c.vocab);
  auto res = sd_decode(base, drafter, std::span<const Token>(prompt), 20, 8);
  EXPECT_EQ(res.tokens, ref);
  EXPECT_EQ(res.stats.steps, 20u);
  EXPECT_DOUBLE_EQ(res.stats.a, 1.0);
  EXPECT_DOUBLE_EQ(res.stats.kappa, 0.5);
  EXPECT_EQ(res.stats.histogram[0], 20u);
}

TEST(SdDecode, CacheHoldsExactlyTheAcceptedContextBeforeEveryStep) {
  auto c = tiny_base();
  auto base = BaseLM<float>::init(c, 14);
  std::vector<Token> prompt{4, 8, 15, 12};
  AuditingDrafter<float> drafter(prompt, 3, 99);
  auto res = sd_decode(base, drafter, std::span<const Token>(prompt), 50);
  EXPECT_EQ(drafter.calls, res.stats.steps);
  EXPECT_LE(drafter.max_key_diff, 1e-5);
  EXPECT_EQ(res.tokens, decode_greedy(base, std::span<const Token>(prompt), 50));
}

TEST(SdDecode, RejectsEmptyPromptOverflowAndSmallBudget) {
  auto c = tiny_base(16, 32);
  auto base = BaseLM<float>::init(c, 15);
  auto sf = SpecFormer<float>::init(draft_for(c, 4), 16);
  std::vector<Token> prompt(10, 1);
  EXPECT_THROW(sd_decode(base, sf, std::span<const Token>(), 4), ParameterError);
  EXPECT_THROW(sd_decode(base, sf, std::span<const Token>(prompt), 18), CapacityError);
  EXPECT_NO_THROW(sd_decode(base, sf, std::span<const Token>(prompt), 17));
  EXPECT_THROW(sd_decode(base, sf, std::span<const Token>(prompt), 5, 3), ParameterError);
  auto empty = sd_decode(base, sf, std::span<const Token>(prompt), 0);
  EXPECT_TRUE(empty.tokens.empty());
  EXPECT_EQ(empty.stats.steps, 0u);
}

TEST(SdDecode, KappaUsesTheDraftBudget) {
  auto c = tiny_base();
  auto base = BaseLM<float>::init(c, 17);
  auto sf = SpecFormer<float>::init(draft_for(c, 2), 18);
  std::vector<Token> prompt{3, 3};
  auto res = sd_decode(base, sf, std::span<const Token>(prompt), 20, 6);
  EXPECT_EQ(res.stats.k, 6u);
  EXPECT_NEAR(res.stats.kappa, res.stats.a * 2.0 / 6.0, 1e-12);
}

TEST(Sessions, ThreadedResultsMatchSequentialInOrder) {
  auto c = tiny_base();
  auto base = BaseLM<float>::init(c, 19);
  auto sf = SpecFormer<float>::init(draft_for(c, 3), 20);
  Prng rng(21);
  std::vector<std::vector<Token>> prompts;
  for (int i = 0; i < 7; ++i) prompts.push_back(random_tokens(1 + rng.uniform_int(6), c.vocab, rng));
  auto seq = sd_decode_sessions(base, sf, prompts, 24, 0, 1);
  auto par = sd_decode_sessions(base, sf, prompts, 24, 0, 3);
  ASSERT_EQ(seq.size(), prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    EXPECT_EQ(par[i].tokens, seq[i].tokens);
    EXPECT_EQ(par[i].stats.histogram, seq[i].stats.histogram);
    EXPECT_EQ(seq[i].tokens, decode_greedy(base, std::span<const Token>(prompts[i]), 24));
  }
  prompts.push_back({});
  EXPECT_THROW(sd_decode_sessions(base, sf, prompts, 8, 0, 2), ParameterError);
}

}  // namespace
}  // namespace specdraft
