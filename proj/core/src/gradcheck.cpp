#include "specdraft/gradcheck.hpp"

#include <cmath>
#include <memory>

#include "specdraft/base_lm.hpp"
#include "specdraft/layers.hpp"
#include "specdraft/ops.hpp"
#include "specdraft/prng.hpp"
#include "specdraft/specformer.hpp"
#include "specdraft/training.hpp"

namespace specdraft {

Tensor<double> finite_diff_grad(const std::function<double()>& f, Parameter<double>& p, double eps) {
  if (!(eps > 0.0)) throw ParameterError("finite difference step must be positive");
  Tensor<double> g(p.shape());
  auto w = p.value().data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double saved = w[i];
    w[i] = saved + eps;
    const double up = f();
    w[i] = saved - eps;
    const double down = f();
    w[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite function value while differentiating " + p.name());
    }
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

double relative_error(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.numel() != b.numel()) throw DimensionError("relative_error on tensors of different sizes");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

namespace {

using D = double;

// One gradcheck instance: the parameters to differentiate and a scalar loss
// over them. `owner` keeps models alive for the loss closure.
struct Instance {
  std::vector<Parameter<D>*> params;
  std::function<Var<D>()> loss;
  std::shared_ptr<void> owner;
};

struct Case {
  std::string name;
  std::function<Instance(Prng&)> make;
};

Tensor<D> random_tensor(const Shape& shape, Prng& rng, double stddev = 1.0) {
  Tensor<D> t(shape);
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

// Builds an instance whose loss is a random weighting of op(inputs), so
// every output coordinate contributes a distinct amount.
Instance op_instance(std::vector<Shape> shapes, std::function<Var<D>(const std::vector<Var<D>>&)> op, Prng& rng) {
  auto params = std::make_shared<std::vector<Parameter<D>>>();
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    params->emplace_back("in" + std::to_string(i), random_tensor(shapes[i], rng));
  }
  auto vars = [params] {
    std::vector<Var<D>> v;
    for (auto& p : *params) v.push_back(p.var());
    return v;
  };
  const Shape out_shape = op(vars()).shape();
  auto weights = std::make_shared<Tensor<D>>(random_tensor(out_shape, rng));
  Instance inst;
  for (auto& p : *params) inst.params.push_back(&p);
  inst.loss = [op, vars, weights] { return weighted_sum(op(vars()), *weights); };
  inst.owner = params;
  return inst;
}

std::vector<Case> build_cases() {
  std::vector<Case> cases;
  auto add_op = [&](std::string name, std::vector<Shape> shapes,
                    std::function<Var<D>(const std::vector<Var<D>>&)> op) {
    cases.push_back({std::move(name), [shapes, op](Prng& rng) { return op_instance(shapes, op, rng); }});
  };

  add_op("matmul", {{3, 4}, {4, 5}}, [](auto& v) { return matmul(v[0], v[1]); });
  add_op("matmul_broadcast", {{2, 3, 4}, {4, 2}}, [](auto& v) { return matmul(v[0], v[1]); });
  add_op("matmul_batched", {{2, 3, 4}, {2, 4, 2}}, [](auto& v) { return matmul(v[0], v[1]); });
  add_op("add", {{3, 4}, {3, 4}}, [](auto& v) { return add(v[0], v[1]); });
  add_op("add_bias", {{2, 3, 4}, {4}}, [](auto& v) { return add_bias(v[0], v[1]); });
  add_op("mul", {{3, 4}, {3, 4}}, [](auto& v) { return mul(v[0], v[1]); });
  add_op("scale", {{3, 4}}, [](auto& v) { return scale(v[0], 0.7); });
  add_op("silu", {{3, 4}}, [](auto& v) { return silu(v[0]); });
  add_op("rms_norm", {{3, 6}, {6}}, [](auto& v) { return rms_norm(v[0], v[1]); });
  add_op("grouped_rms_norm", {{2, 3, 8}, {4, 2}}, [](auto& v) { return grouped_rms_norm(v[0], v[1], 4); });
  add_op("softmax_last", {{3, 5}}, [](auto& v) { return softmax(v[0], 1); });
  add_op("softmax_first", {{3, 5}}, [](auto& v) { return softmax(v[0], 0); });
  add_op("attention_causal", {{1, 3, 2, 4}, {1, 3, 2, 4}, {1, 3, 2, 4}}, [](auto& v) {
    const auto mask = AttentionMask::causal(3, 3, 0);
    return scaled_dot_attention(v[0], v[1], v[2], &mask);
  });
  add_op("attention_full", {{2, 3, 1, 4}, {2, 5, 1, 4}, {2, 5, 1, 4}},
         [](auto& v) { return scaled_dot_attention<D>(v[0], v[1], v[2], nullptr); });
  add_op("rope", {{1, 4, 2, 6}}, [](auto& v) { return rope(v[0], 3, 10000.0); });
  add_op("swiglu", {{2, 3, 4}, {4, 6}, {4, 6}, {6, 4}},
         [](auto& v) { return swiglu(v[0], v[1], v[2], v[3]); });
  add_op("embedding", {{5, 3}}, [](auto& v) {
    static const std::vector<Token> ids{4, 0, 2, 2, 1, 4};
    return embedding(v[0], ids, {2, 3});
  });
  add_op("cross_entropy", {{4, 5}}, [](auto& v) {
    static const std::vector<Token> targets{1, -1, 4, 0};
    return cross_entropy(v[0], targets, Token{-1});
  });
  add_op("reshape", {{2, 6}}, [](auto& v) { return reshape(v[0], {3, 4}); });
  add_op("concat", {{2, 3}, {2, 2}}, [](auto& v) { return concat<D>({v[0], v[1]}, 1); });
  add_op("slice", {{4, 3}}, [](auto& v) { return slice(v[0], 0, 1, 3); });
  add_op("sum", {{3, 4}}, [](auto& v) { return sum(v[0]); });
  add_op("mean", {{3, 4}}, [](auto& v) { return mean(v[0]); });

  // Randomizes every parameter so the check does not sit in the tiny-weight
  // regime of the default init.
  auto randomize = [](auto& params, Prng& rng) {
    for (auto* p : params) {
      const bool is_scale = p->name().ends_with("norm") || p->name() == "group_scales";
      for (auto& w : p->value().data()) w = is_scale ? 1.0 + rng.normal(0.0, 0.2) : rng.normal(0.0, 0.4);
    }
  };

  cases.push_back({"draft_loss", [randomize](Prng& rng) {
                     BaseLMConfig bc;
                     bc.layers = 4;
                     bc.hidden = 4;
                     bc.heads = 2;
                     bc.ffn = 8;
                     bc.vocab = 8;
                     bc.max_seq = 16;
                     SpecFormerConfig sc;
                     sc.hidden = 4;
                     sc.l_d = 2;
                     sc.heads = 2;
                     sc.ffn = 8;
                     struct Models {
                       BaseLM<D> base;
                       SpecFormer<D> sf;
                       TokenBatch tokens;
                     };
                     auto m = std::make_shared<Models>();
                     m->base = BaseLM<D>::init(bc, rng.next_u64());
                     auto base_params = m->base.parameters();
                     randomize(base_params, rng);
                     m->base.set_trainable(false);
                     m->sf = SpecFormer<D>::init(sc, rng.next_u64());
                     Instance inst;
                     inst.params = m->sf.parameters();
                     randomize(inst.params, rng);
                     // Two sequences of l_d + 2 tokens.
                     m->tokens.batch = 2;
                     m->tokens.seq = sc.l_d + 2;
                     for (std::size_t i = 0; i < m->tokens.batch * m->tokens.seq; ++i) {
                       m->tokens.ids.push_back(static_cast<Token>(rng.uniform_int(bc.vocab)));
                     }
                     inst.loss = [m] { return draft_loss(m->base, m->sf, m->tokens); };
                     inst.owner = m;
                     return inst;
                   }});

  cases.push_back({"base_lm_loss", [randomize](Prng& rng) {
                     BaseLMConfig bc;
                     bc.layers = 4;
                     bc.hidden = 4;
                     bc.heads = 2;
                     bc.ffn = 6;
                     bc.vocab = 6;
                     bc.max_seq = 8;
                     struct Models {
                       BaseLM<D> base;
                       TokenBatch tokens;
                     };
                     auto m = std::make_shared<Models>();
                     m->base = BaseLM<D>::init(bc, rng.next_u64());
                     Instance inst;
                     inst.params = m->base.parameters();
                     randomize(inst.params, rng);
                     m->tokens.batch = 2;
                     m->tokens.seq = 4;
                     for (std::size_t i = 0; i < 8; ++i) {
                       m->tokens.ids.push_back(static_cast<Token>(rng.uniform_int(bc.vocab)));
                     }
                     inst.loss = [m] { return lm_loss(m->base, m->tokens); };
                     inst.owner = m;
                     return inst;
                   }});
  return cases;
}

// Concatenates the listed gradients into one flat tensor.
Tensor<D> flatten(const std::vector<Tensor<D>>& parts) {
  std::vector<D> all;
  for (const auto& t : parts) all.insert(all.end(), t.storage().begin(), t.storage().end());
  const std::size_t n = all.size();
  return Tensor<D>({n}, std::move(all));
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, int points, double tolerance) {
  std::vector<GradcheckResult> results;
  for (const Case& c : build_cases()) {
    for (int point = 0; point < points; ++point) {
      Prng rng(derive_seed(seed, c.name + "." + std::to_string(point)));
      Instance inst = c.make(rng);
      for (auto* p : inst.params) p->zero_grad();
      backward(inst.loss());
      std::vector<Tensor<D>> analytic, numeric;
      for (auto* p : inst.params) {
        analytic.push_back(p->grad());
        numeric.push_back(finite_diff_grad([&] { return inst.loss().value().item(); }, *p));
      }
      GradcheckResult r;
      r.name = c.name;
      r.point = point;
      r.rel_error = relative_error(flatten(analytic), flatten(numeric));
      r.pass = r.rel_error <= tolerance;
      results.push_back(r);
    }
  }
  return results;
}

}  // namespace specdraft
