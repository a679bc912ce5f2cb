#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "specdraft/gradcheck.hpp"
#include "specdraft/ops.hpp"
#include "support.hpp"

namespace specdraft {
namespace {

using testing::from_values;
using testing::max_rel_diff;
using testing::random_tensor;

using VarD = Var<double>;

VarD cd(Tensor<double> t) { return constant(std::move(t)); }

Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      long double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<long double>(a[i * k + p]) * b[p * n + j];
      c[i * n + j] = static_cast<double>(acc);
    }
  return c;
}

TEST(Tensor, ShapeAndStorageAgree) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  t.at({1, 2, 3}) = 5.0f;
  EXPECT_EQ(t[23], 5.0f);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), DimensionError);
  EXPECT_THROW(t.reshaped({5, 5}), DimensionError);
  EXPECT_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
  EXPECT_EQ(Tensor<double>().numel(), 1u);
}

TEST(Tensor, RequireFiniteNamesTheValue) {
  Tensor<double> t({2});
  t[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(t.require_finite("probe"), NumericError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto id = from_values<double>({2, 2}, {1, 0, 0, 1});
  auto x = from_values<double>({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(cd(id), cd(x)).value(), x);
}

TEST(Matmul, RowTimesColumn) {
  auto y = matmul(cd(from_values<double>({1, 2}, {1, 2})), cd(from_values<double>({2, 1}, {3, 4})));
  EXPECT_EQ(y.value(), from_values<double>({1, 1}, {11}));
}

TEST(Matmul, Random5x7x3MatchesTripleLoop) {
  Prng rng(7);
  auto a = random_tensor<double>({5, 7}, rng);
  auto b = random_tensor<double>({7, 3}, rng);
  EXPECT_LE(max_rel_diff(matmul(cd(a), cd(b)).value(), matmul_oracle(a, b)), 1e-6);
}

TEST(Matmul, EveryShapeUpTo8MatchesTripleLoop) {
  Prng rng(11);
  for (std::size_t m = 1; m <= 8; ++m)
    for (std::size_t k = 1; k <= 8; ++k)
      for (std::size_t n = 1; n <= 8; ++n) {
        auto a = random_tensor<double>({m, k}, rng);
        auto b = random_tensor<double>({k, n}, rng);
        ASSERT_LE(max_rel_diff(matmul(cd(a), cd(b)).value(), matmul_oracle(a, b)), 1e-6)
            << m << "x" << k << "x" << n;
        // Single precision: k roundings of 2^-24 each, relative to the largest entry.
        auto af = a.cast<float>(), bf = b.cast<float>();
        auto yf = matmul(constant(af), constant(bf)).value().cast<double>();
        ASSERT_LE(max_rel_diff(yf, matmul_oracle(af.cast<double>(), bf.cast<double>())), 1e-5);
      }
}

TEST(Matmul, BatchedLeadingDimsAndSharedRhs) {
  Prng rng(3);
  auto a = random_tensor<double>({2, 3, 4, 5}, rng);
  auto b = random_tensor<double>({5, 6}, rng);
  auto y = matmul(cd(a), cd(b)).value();
  ASSERT_EQ(y.shape(), (Shape{2, 3, 4, 6}));
  for (std::size_t g = 0; g < 6; ++g) {
    Tensor<double> ag({4, 5}, std::vector<double>(a.data().begin() + g * 20, a.data().begin() + (g + 1) * 20));
    auto ref = matmul_oracle(ag, b);
    for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(y[g * 24 + i], ref[i], 1e-12);
  }
  auto bb = random_tensor<double>({2, 3, 5, 2}, rng);
  EXPECT_EQ(matmul(cd(a), cd(bb)).shape(), (Shape{2, 3, 4, 2}));
}

TEST(Matmul, RowsComputedAloneMatchRowsInABlockBitForBit) {
  Prng rng(5);
  auto a = random_tensor<float>({9, 33}, rng);
  auto b = random_tensor<float>({33, 17}, rng);
  auto full = matmul(constant(a), constant(b)).value();
  for (std::size_t r = 0; r < 9; ++r) {
    Tensor<float> row({1, 33}, std::vector<float>(a.data().begin() + r * 33, a.data().begin() + (r + 1) * 33));
    auto one = matmul(constant(row), constant(b)).value();
    for (std::size_t j = 0; j < 17; ++j) ASSERT_EQ(one[j], full[r * 17 + j]);
  }
}

TEST(Matmul, MismatchedInnerExtentThrows) {
  EXPECT_THROW(matmul(cd(Tensor<double>({2, 3})), cd(Tensor<double>({4, 2}))), DimensionError);
  EXPECT_THROW(matmul(cd(Tensor<double>({2, 2, 3})), cd(Tensor<double>({3, 3, 2}))), DimensionError);
}

TEST(RmsNorm, ThreeFourExample) {
  auto y = rms_norm(cd(from_values<double>({2}, {3, 4})), cd(from_values<double>({2}, {1, 1})), 1e-12).value();
  EXPECT_NEAR(y[0], 3.0 / std::sqrt(12.5), 1e-9);
  EXPECT_NEAR(y[1], 4.0 / std::sqrt(12.5), 1e-9);
  EXPECT_NEAR(y[0], 0.8485, 5e-5);
  EXPECT_NEAR(y[1], 1.1314, 5e-5);
}

TEST(RmsNorm, NonPositiveEpsIsRejected) {
  auto x = cd(from_values<double>({2}, {3, 4}));
  auto s = cd(from_values<double>({2}, {1, 1}));
  EXPECT_THROW(rms_norm(x, s, 0.0), ParameterError);
  EXPECT_THROW(rms_norm(x, s, -1e-6), ParameterError);
}

TEST(RmsNorm, ZeroVectorStaysZero) {
  auto y = rms_norm(cd(Tensor<double>({5})), cd(from_values<double>({5}, {2, -1, 3, 4, 5})), 1e-6).value();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(RmsNorm, ScaleExtentMustMatch) {
  EXPECT_THROW(rms_norm(cd(Tensor<double>({2, 4})), cd(Tensor<double>({3}))), DimensionError);
}

TEST(RmsNorm, PropertyOutputOverScaleHasUnitRms) {
  Prng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.uniform_int(4), d = 1 + rng.uniform_int(32);
    auto x = random_tensor<double>({rows, d}, rng, 0.1 + 10 * rng.uniform());
    auto s = random_tensor<double>({d}, rng);
    for (std::size_t i = 0; i < d; ++i)
      if (std::abs(s[i]) < 1e-3) s[i] = 1.0;
    auto y = rms_norm(cd(x), cd(s), 1e-12).value();
    for (std::size_t r = 0; r < rows; ++r) {
      double ms = 0;
      for (std::size_t i = 0; i < d; ++i) {
        const double u = y[r * d + i] / s[i];
        ms += u * u;
      }
      ASSERT_NEAR(std::sqrt(ms / static_cast<double>(d)), 1.0, 1e-5);
    }
  }
}

TEST(GroupedRmsNorm, OneGroupUnitScalesEqualsRmsNormExactly) {
  Prng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + rng.uniform_int(24);
    auto x = random_tensor<double>({3, d}, rng);
    auto a = grouped_rms_norm(cd(x), cd(Tensor<double>::filled({1, d}, 1.0)), 1).value();
    auto b = rms_norm(cd(x), cd(Tensor<double>::filled({d}, 1.0))).value();
    ASSERT_EQ(a, b);
  }
}

TEST(GroupedRmsNorm, FourGroupsEqualFourIndependentNorms) {
  Prng rng(41);
  const std::size_t d = 6;
  std::vector<VarD> parts;
  std::vector<VarD> expected;
  auto scales = random_tensor<double>({4, d}, rng);
  for (std::size_t g = 0; g < 4; ++g) {
    auto t = cd(random_tensor<double>({2, 3, d}, rng, 1.0 + g));
    parts.push_back(t);
    Tensor<double> sg({d}, std::vector<double>(scales.data().begin() + g * d, scales.data().begin() + (g + 1) * d));
    expected.push_back(rms_norm(t, cd(sg)));
  }
  auto got = grouped_rms_norm(concat(parts, 2), cd(scales), 4).value();
  auto want = concat(expected, 2).value();
  EXPECT_LE(max_rel_diff(got, want), 1e-14);
}

TEST(GroupedRmsNorm, ZeroSliceMapsToZerosOthersUnaffected) {
  Prng rng(43);
  auto x = random_tensor<double>({1, 8}, rng);
  for (std::size_t i = 2; i < 4; ++i) x[i] = 0.0;
  auto ones = Tensor<double>::filled({4, 2}, 1.0);
  auto y = grouped_rms_norm(cd(x), cd(ones), 4).value();
  EXPECT_EQ(y[2], 0.0);
  EXPECT_EQ(y[3], 0.0);
  auto x2 = x;
  x2[2] = 5.0;
  auto y2 = grouped_rms_norm(cd(x2), cd(ones), 4).value();
  for (std::size_t i : {0, 1, 4, 5, 6, 7}) EXPECT_EQ(y[i], y2[i]);
}

TEST(GroupedRmsNorm, IndivisibleExtentThrows) {
  EXPECT_THROW(grouped_rms_norm(cd(Tensor<double>({2, 7})), cd(Tensor<double>::filled({4, 1}, 1.0)), 4),
               DimensionError);
}

TEST(Softmax, Examples) {
  auto y = softmax(cd(from_values<double>({2}, {0, 0})), 0).value();
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
  auto z = softmax(cd(from_values<double>({2}, {1000, 0})), 0).value();
  EXPECT_NEAR(z[0], 1.0, 1e-12);
  EXPECT_NEAR(z[1], 0.0, 1e-12);
  EXPECT_TRUE(z.all_finite());
}

TEST(Softmax, PropertyRowsAreDistributionsOnEveryAxis) {
  Prng rng(51);
  for (int trial = 0; trial < 40; ++trial) {
    Shape shape{1 + rng.uniform_int(4), 1 + rng.uniform_int(5), 1 + rng.uniform_int(6)};
    auto x = random_tensor<double>(shape, rng, 1 + 30 * rng.uniform());
    const std::size_t axis = rng.uniform_int(3);
    auto y = softmax(cd(x), axis).value();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= shape[i];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double s = 0;
        for (std::size_t a = 0; a < shape[axis]; ++a) {
          const double v = y[(o * shape[axis] + a) * inner + in];
          ASSERT_GE(v, 0.0);
          s += v;
        }
        ASSERT_NEAR(s, 1.0, 1e-6);
      }
  }
  EXPECT_THROW(softmax(cd(Tensor<double>({2, 2})), 2), DimensionError);
}

TEST(Attention, SingletonReturnsValue) {
  auto q = cd(from_values<double>({1, 1}, {0.3}));
  auto v = cd(from_values<double>({1, 1}, {7}));
  EXPECT_DOUBLE_EQ(scaled_dot_attention(q, q, v).value()[0], 7.0);
}

TEST(Attention, UniformScoresAverageVisibleValues) {
  Prng rng(61);
  const std::size_t s = 5, d = 3;
  auto q = cd(Tensor<double>::filled({s, d}, 0.5));
  auto v = random_tensor<double>({s, d}, rng);
  auto mask = AttentionMask::causal(s, s, 0);
  auto y = scaled_dot_attention(q, q, cd(v), &mask).value();
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0;
      for (std::size_t j = 0; j <= i; ++j) mean += v[j * d + c];
      EXPECT_NEAR(y[i * d + c], mean / static_cast<double>(i + 1), 1e-12);
    }
}

TEST(Attention, CausalOutputIgnoresFuturePerturbations) {
  Prng rng(71);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t b = 2, s = 6, h = 2, d = 4;
    auto q = random_tensor<double>({b, s, h, d}, rng);
    auto k = random_tensor<double>({b, s, h, d}, rng);
    auto v = random_tensor<double>({b, s, h, d}, rng);
    auto mask = AttentionMask::causal(s, s, 0);
    auto y = scaled_dot_attention(cd(q), cd(k), cd(v), &mask).value();
    const std::size_t cut = rng.uniform_int(s - 1);
    auto k2 = k, v2 = v;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t t = cut + 1; t < s; ++t)
        for (std::size_t x = 0; x < h * d; ++x) {
          k2[(bi * s + t) * h * d + x] += rng.normal();
          v2[(bi * s + t) * h * d + x] += rng.normal();
        }
    auto y2 = scaled_dot_attention(cd(q), cd(k2), cd(v2), &mask).value();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t t = 0; t <= cut; ++t)
        for (std::size_t x = 0; x < h * d; ++x)
          ASSERT_EQ(y[(bi * s + t) * h * d + x], y2[(bi * s + t) * h * d + x]);
  }
}

TEST(Attention, FullyMaskedRowIsAnError) {
  AttentionMask mask{2, 2, {1, 0, 0, 0}};
  auto x = cd(Tensor<double>::filled({2, 2}, 1.0));
  EXPECT_THROW(scaled_dot_attention(x, x, x, &mask), ParameterError);
}

TEST(Attention, CausalMaskWithOffsetSeesPrefix) {
  auto m = AttentionMask::causal(2, 5, 3);
  EXPECT_TRUE(m.visible(0, 3));
  EXPECT_FALSE(m.visible(0, 4));
  EXPECT_TRUE(m.visible(1, 4));
}

TEST(SwiGlu, ZeroInputGivesZero) {
  Prng rng(81);
  auto y = swiglu(cd(Tensor<double>({2, 4})), cd(random_tensor<double>({4, 6}, rng)),
                  cd(random_tensor<double>({4, 6}, rng)), cd(random_tensor<double>({6, 4}, rng)))
               .value();
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], 0.0);
}

TEST(SwiGlu, LargeGateApproachesUngatedProduct) {
  // silu(g) -> g for large positive g.
  auto x = cd(from_values<double>({1, 1}, {1.5}));
  auto wg = cd(from_values<double>({1, 1}, {60}));
  auto wu = cd(from_values<double>({1, 1}, {-0.7}));
  auto wd = cd(from_values<double>({1, 1}, {2.0}));
  const double direct = 2.0 * (60 * 1.5) * (-0.7 * 1.5);
  EXPECT_NEAR(swiglu(x, wg, wu, wd).value()[0], direct, 1e-9 * std::abs(direct));
}

TEST(SwiGlu, ShapeChainIsChecked) {
  EXPECT_THROW(swiglu(cd(Tensor<double>({1, 4})), cd(Tensor<double>({4, 6})), cd(Tensor<double>({4, 5})),
                      cd(Tensor<double>({6, 4}))),
               DimensionError);
}

TEST(SwiGlu, GradientMatchesFiniteDifferences) {
  Prng rng(83);
  Parameter<double> x("x", random_tensor<double>({3, 4}, rng));
  Parameter<double> wg("wg", random_tensor<double>({4, 5}, rng));
  Parameter<double> wu("wu", random_tensor<double>({4, 5}, rng));
  Parameter<double> wd("wd", random_tensor<double>({5, 4}, rng));
  auto w = random_tensor<double>({3, 4}, rng);
  auto loss = [&] { return weighted_sum(swiglu(x.var(), wg.var(), wu.var(), wd.var()), w); };
  backward(loss());
  for (Parameter<double>* p : {&x, &wg, &wu, &wd}) {
    auto fd = finite_diff_grad([&] { return loss().value().item(); }, *p);
    EXPECT_LE(relative_error(p->grad(), fd), 1e-3) << p->name();
  }
}

double ce_oracle(const Tensor<double>& logits, const std::vector<Token>& targets, Token ignore) {
  const std::size_t v = logits.shape().back();
  double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == ignore) continue;
    double mx = -1e300;
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, logits[r * v + j]);
    double se = 0;
    for (std::size_t j = 0; j < v; ++j) se += std::exp(logits[r * v + j] - mx);
    total += mx + std::log(se) - logits[r * v + static_cast<std::size_t>(targets[r])];
    ++count;
  }
  return total / static_cast<double>(count);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  std::vector<Token> t{0, 17, 63};
  auto loss = cross_entropy(cd(Tensor<double>({3, 64})), std::span<const Token>(t), -1).value().item();
  EXPECT_NEAR(loss, std::log(64.0), 1e-12);
  EXPECT_NEAR(loss, 4.1589, 1e-4);
}

TEST(CrossEntropy, GrowingMarginDrivesLossToZero) {
  std::vector<Token> t{2};
  double prev = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    auto logits = Tensor<double>({1, 4});
    logits[2] = margin;
    const double loss = cross_entropy(cd(logits), std::span<const Token>(t), -1).value().item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-20);
}

TEST(CrossEntropy, RandomBatchMatchesLogSumExp) {
  Prng rng(91);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 1 + rng.uniform_int(12), v = 2 + rng.uniform_int(40);
    auto logits = random_tensor<double>({rows, v}, rng, 5.0);
    std::vector<Token> t(rows);
    for (auto& x : t) x = rng.uniform() < 0.2 ? -100 : static_cast<Token>(rng.uniform_int(v));
    t[0] = 0;
    const double got = cross_entropy(cd(logits), std::span<const Token>(t), -100).value().item();
    ASSERT_NEAR(got, ce_oracle(logits, t, -100), 1e-6);
  }
}

TEST(CrossEntropy, AllIgnoredOrOutOfRangeThrows) {
  std::vector<Token> ignored{-1, -1};
  EXPECT_THROW(cross_entropy(cd(Tensor<double>({2, 4})), std::span<const Token>(ignored), -1), ParameterError);
  std::vector<Token> bad{4, 0};
  EXPECT_THROW(cross_entropy(cd(Tensor<double>({2, 4})), std::span<const Token>(bad), -1), ParameterError);
}

TEST(CrossEntropy, DivisorReplacesValidCount) {
  Prng rng(93);
  auto logits = random_tensor<double>({3, 5}, rng);
  std::vector<Token> t{1, -1, 4};
  const double mean = cross_entropy(cd(logits), std::span<const Token>(t), -1).value().item();
  const double scaled = cross_entropy(cd(logits), std::span<const Token>(t), -1, 8.0).value().item();
  EXPECT_NEAR(scaled, mean * 2.0 / 8.0, 1e-14);
}

TEST(FiniteDiff, SquareAtThree) {
  Parameter<double> x("x", Tensor<double>::scalar(3.0));
  auto g = finite_diff_grad([&] { return x.value()[0] * x.value()[0]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-6);
}

TEST(FiniteDiff, LinearFunctionIsExactForAnyStep) {
  Parameter<double> x("x", from_values<double>({3}, {0.5, -2, 4}));
  const std::vector<double> c{3, -1, 0.25};
  auto f = [&] { return c[0] * x.value()[0] + c[1] * x.value()[1] + c[2] * x.value()[2]; };
  for (double eps : {1e-6, 1e-3, 0.5}) {
    auto g = finite_diff_grad(f, x, eps);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], c[i], 1e-9);
  }
  EXPECT_EQ(x.value()[1], -2.0);
}

TEST(FiniteDiff, NonFiniteFunctionThrows) {
  Parameter<double> x("x", Tensor<double>::scalar(1.0));
  EXPECT_THROW(finite_diff_grad([] { return std::numeric_limits<double>::infinity(); }, x), NumericError);
}

TEST(Gradcheck, EveryOperationAndFullLossesPassAtThreePoints) {
  const auto results = run_gradcheck_suite(2024, 3, 1e-3);
  std::set<std::string> names;
  for (const auto& r : results) {
    names.insert(r.name);
    EXPECT_TRUE(r.pass) << r.name << " point " << r.point << " rel " << r.rel_error;
    EXPECT_LE(r.rel_error, 1e-3) << r.name;
  }
  for (const char* required : {"matmul", "rms_norm", "grouped_rms_norm", "swiglu", "cross_entropy", "draft_loss",
                               "embedding", "rope", "concat", "slice"}) {
    bool found = false;
    for (const auto& n : names) found = found || n.rfind(required, 0) == 0;
    EXPECT_TRUE(found) << required;
  }
  EXPECT_EQ(results.size() % 3, 0u);
}

TEST(Autograd, GradientsAccumulateAcrossUses) {
  Parameter<double> x("x", from_values<double>({2}, {1.5, -2}));
  backward(sum(mul(x.var(), x.var())));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
  backward(sum(x.var()));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Autograd, FrozenInputsRecordNoGraph) {
  Parameter<double> w("w", from_values<double>({2}, {1, 2}), false);
  auto y = mul(w.var(), w.var());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Autograd, DetachCutsTheGraph) {
  Parameter<double> x("x", from_values<double>({2}, {1, 2}));
  auto d = detach(scale(x.var(), 3.0), true);
  backward(sum(d));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(d.grad()[0], 1.0);
}

TEST(Autograd, ParameterCopiesAreIndependentLeaves) {
  Parameter<double> a("a", from_values<double>({1}, {2}));
  Parameter<double> b = a;
  b.value()[0] = 5;
  EXPECT_EQ(a.value()[0], 2.0);
  backward(sum(b.var()));
  EXPECT_EQ(a.grad()[0], 0.0);
  EXPECT_EQ(b.grad()[0], 1.0);
}

TEST(Autograd, NonFiniteResultsAreRejected) {
  auto x = cd(from_values<double>({1}, {1e300}));
  EXPECT_THROW(mul(x, x), NumericError);
}

}  // namespace
}  // namespace specdraft
