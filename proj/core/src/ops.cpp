#include "specdraft/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace specdraft {

namespace {

template <typename T>
Tensor<T>* grad_of(Node<T>& n, std::size_t i) {
  Node<T>& in = *n.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

void require_eps(double eps) {
  if (!(eps > 0.0)) throw ParameterError("norm eps must be positive, got " + std::to_string(eps));
}

}  // namespace

AttentionMask AttentionMask::causal(std::size_t queries, std::size_t keys, std::size_t offset) {
  AttentionMask m;
  m.queries = queries;
  m.keys = keys;
  m.allowed.assign(queries * keys, 0);
  for (std::size_t i = 0; i < queries; ++i) {
    const std::size_t last = std::min(keys, offset + i + 1);
    for (std::size_t j = 0; j < last; ++j) m.allowed[i * keys + j] = 1;
  }
  return m;
}

// ---------------------------------------------------------------------------
// GEMM kernels

template <typename T>
void gemm_nn(const T* __restrict__ a, const T* __restrict__ b, T* __restrict__ c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* __restrict__ crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, T{0});
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* __restrict__ brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
void gemm_nt_acc(const T* dc, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
  // da (m x k) += dc (m x n) * b^T where b is (k x n).
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(dc, bt.data(), da, m, n, k, true);
}

template <typename T>
void gemm_tn_acc(const T* __restrict__ a, const T* __restrict__ dc, T* __restrict__ db, std::size_t m,
                 std::size_t k, std::size_t n) {
  // db (k x n) += a^T (k x m) * dc (m x n).
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* __restrict__ dcrow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      if (aip == T{0}) continue;
      T* __restrict__ dbrow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t k = as.back();
  const std::size_t m = as[as.size() - 2];
  const std::size_t n = bs.back();
  if (bs[bs.size() - 2] != k) {
    throw DimensionError("matmul inner extents differ: " + shape_str(as) + " x " + shape_str(bs));
  }
  Shape out_shape = as;
  out_shape.back() = n;

  if (bs.size() == 2) {
    const std::size_t rows = a.value().numel() / k;
    Tensor<T> out(out_shape);
    gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), rows, k, n, false);
    return make_op<T>(
        std::move(out), {a, b},
        [rows, k, n](Node<T>& self) {
          const T* g = self.grad.data().data();
          if (auto* ga = grad_of(self, 0))
            gemm_nt_acc(g, self.inputs[1]->value.data().data(), ga->data().data(), rows, k, n);
          if (auto* gb = grad_of(self, 1))
            gemm_tn_acc(self.inputs[0]->value.data().data(), g, gb->data().data(), rows, k, n);
        },
        "matmul");
  }

  if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
    throw DimensionError("matmul batch extents differ: " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t batch = a.value().numel() / (m * k);
  Tensor<T> out(out_shape);
  for (std::size_t s = 0; s < batch; ++s) {
    gemm_nn(a.value().data().data() + s * m * k, b.value().data().data() + s * k * n,
            out.data().data() + s * m * n, m, k, n, false);
  }
  return make_op<T>(
      std::move(out), {a, b},
      [batch, m, k, n](Node<T>& self) {
        const T* g = self.grad.data().data();
        const T* av = self.inputs[0]->value.data().data();
        const T* bv = self.inputs[1]->value.data().data();
        auto* ga = grad_of(self, 0);
        auto* gb = grad_of(self, 1);
        for (std::size_t s = 0; s < batch; ++s) {
          if (ga) gemm_nt_acc(g + s * m * n, bv + s * k * n, ga->data().data() + s * m * k, m, k, n);
          if (gb) gemm_tn_acc(av + s * m * k, g + s * m * n, gb->data().data() + s * k * n, m, k, n);
        }
      },
      "matmul");
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make_op<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        for (std::size_t in = 0; in < 2; ++in) {
          if (auto* g = grad_of(self, in))
            for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
        }
      },
      "add");
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  const std::size_t width = bias.value().numel();
  if (x.shape().empty() || x.shape().back() != width) {
    throw DimensionError("add_bias: bias of " + std::to_string(width) + " does not match " + shape_str(x.shape()));
  }
  Tensor<T> out = x.value();
  const std::size_t rows = out.numel() / width;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] += bias.value()[j];
  return make_op<T>(
      std::move(out), {x, bias},
      [rows, width](Node<T>& self) {
        if (auto* gx = grad_of(self, 0))
          for (std::size_t i = 0; i < gx->numel(); ++i) (*gx)[i] += self.grad[i];
        if (auto* gb = grad_of(self, 1))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < width; ++j) (*gb)[j] += self.grad[r * width + j];
      },
      "add_bias");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_op<T>(
      std::move(out), {a, b},
      [](Node<T>& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (auto* ga = grad_of(self, 0))
          for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += self.grad[i] * bv[i];
        if (auto* gb = grad_of(self, 1))
          for (std::size_t i = 0; i < gb->numel(); ++i) (*gb)[i] += self.grad[i] * av[i];
      },
      "mul");
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= factor;
  return make_op<T>(
      std::move(out), {x},
      [factor](Node<T>& self) {
        if (auto* g = grad_of(self, 0))
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i] * factor;
      },
      "scale");
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v / (T{1} + std::exp(-v));
  return make_op<T>(
      std::move(out), {x},
      [](Node<T>& self) {
        auto* g = grad_of(self, 0);
        if (!g) return;
        const auto& xv = self.inputs[0]->value;
        for (std::size_t i = 0; i < g->numel(); ++i) {
          const T s = T{1} / (T{1} + std::exp(-xv[i]));
          (*g)[i] += self.grad[i] * s * (T{1} + xv[i] * (T{1} - s));
        }
      },
      "silu");
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

/// Rows of `width` scalars; row r uses scale row (r % groups).
template <typename T>
Var<T> rms_rows(const Var<T>& x, const Var<T>& scales, std::size_t width, std::size_t groups, double eps,
                const char* name) {
  require_eps(eps);
  const std::size_t rows = x.value().numel() / width;
  std::vector<T> inv(rows);
  Tensor<T> out(x.shape());
  const T* xv = x.value().data().data();
  const T* sv = scales.value().data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * width;
    double ss = 0.0;
    for (std::size_t j = 0; j < width; ++j) ss += static_cast<double>(xr[j]) * xr[j];
    inv[r] = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(width) + eps));
    const T* s = sv + (r % groups) * width;
    T* o = out.data().data() + r * width;
    for (std::size_t j = 0; j < width; ++j) o[j] = xr[j] * inv[r] * s[j];
  }
  return make_op<T>(
      std::move(out), {x, scales},
      [rows, width, groups, inv = std::move(inv)](Node<T>& self) {
        const T* xv = self.inputs[0]->value.data().data();
        const T* sv = self.inputs[1]->value.data().data();
        const T* g = self.grad.data().data();
        auto* gx = grad_of(self, 0);
        auto* gs = grad_of(self, 1);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = xv + r * width;
          const T* gr = g + r * width;
          const T* s = sv + (r % groups) * width;
          const T ir = inv[r];
          if (gx) {
            T dot{0};
            for (std::size_t j = 0; j < width; ++j) dot += gr[j] * s[j] * xr[j];
            const T coeff = ir * ir * ir * dot / static_cast<T>(width);
            T* dx = gx->data().data() + r * width;
            for (std::size_t j = 0; j < width; ++j) dx[j] += ir * gr[j] * s[j] - xr[j] * coeff;
          }
          if (gs) {
            T* ds = gs->data().data() + (r % groups) * width;
            for (std::size_t j = 0; j < width; ++j) ds[j] += gr[j] * xr[j] * ir;
          }
        }
      },
      name);
}

}  // namespace

template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& scale, double eps) {
  if (x.shape().empty()) throw DimensionError("rms_norm on a rank-0 tensor");
  const std::size_t width = x.shape().back();
  if (scale.value().numel() != width) {
    throw DimensionError("rms_norm: scale of " + std::to_string(scale.value().numel()) + " for last extent " +
                         std::to_string(width));
  }
  return rms_rows(x, scale, width, 1, eps, "rms_norm");
}

template <typename T>
Var<T> grouped_rms_norm(const Var<T>& x, const Var<T>& group_scales, std::size_t groups, double eps) {
  if (x.shape().empty()) throw DimensionError("grouped_rms_norm on a rank-0 tensor");
  const std::size_t last = x.shape().back();
  if (groups == 0 || last % groups != 0) {
    throw DimensionError("grouped_rms_norm: last extent " + std::to_string(last) + " not divisible into " +
                         std::to_string(groups) + " groups");
  }
  const std::size_t width = last / groups;
  if (group_scales.value().numel() != last) {
    throw DimensionError("grouped_rms_norm: expected " + std::to_string(groups) + " x " + std::to_string(width) +
                         " scales, got " + shape_str(group_scales.shape()));
  }
  return rms_rows(x, group_scales, width, groups, eps, "grouped_rms_norm");
}

// ---------------------------------------------------------------------------
// Softmax and attention

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor<T> out(s);
  const T* xv = x.value().data().data();
  T* ov = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total{0};
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        ov[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) ov[base + j * inner] /= total;
    }
  }
  return make_op<T>(
      std::move(out), {x},
      [outer, inner, len](Node<T>& self) {
        auto* gx = grad_of(self, 0);
        if (!gx) return;
        const T* y = self.value.data().data();
        const T* g = self.grad.data().data();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T dot{0};
            for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t idx = base + j * inner;
              (*gx)[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      },
      "softmax");
}

namespace {

template <typename T>
Var<T> attention4(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionMask* mask) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  if (qs.size() != 4 || ks.size() != 4 || v.shape() != ks) {
    throw DimensionError("attention expects q (B,Sq,H,D) and k/v (B,Sk,H,D), got " + shape_str(qs) + ", " +
                         shape_str(ks) + ", " + shape_str(v.shape()));
  }
  const std::size_t batch = qs[0], sq = qs[1], heads = qs[2], dh = qs[3];
  const std::size_t sk = ks[1];
  if (ks[0] != batch || ks[2] != heads || ks[3] != dh) {
    throw DimensionError("attention head layout mismatch: " + shape_str(qs) + " vs " + shape_str(ks));
  }
  if (mask && (mask->queries != sq || mask->keys != sk)) {
    throw DimensionError("attention mask is " + std::to_string(mask->queries) + "x" + std::to_string(mask->keys) +
                         ", expected " + std::to_string(sq) + "x" + std::to_string(sk));
  }
  if (sk == 0) throw ParameterError("attention over an empty key set");
  const T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  const T* qv = q.value().data().data();
  const T* kv = k.value().data().data();
  const T* vv = v.value().data().data();
  Tensor<T> out(qs);
  std::vector<T> probs(batch * heads * sq * sk, T{0});
  std::vector<T> scores(sk);

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < sq; ++i) {
        const T* qi = qv + ((b * sq + i) * heads + h) * dh;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < sk; ++j) {
          if (mask && !mask->visible(i, j)) continue;
          const T* kj = kv + ((b * sk + j) * heads + h) * dh;
          T dot{0};
          for (std::size_t d = 0; d < dh; ++d) dot += qi[d] * kj[d];
          scores[j] = dot * scl;
          mx = std::max(mx, scores[j]);
          any = true;
        }
        if (!any) {
          throw ParameterError("attention query row " + std::to_string(i) + " has no visible key (malformed mask)");
        }
        T* p = probs.data() + ((b * heads + h) * sq + i) * sk;
        T total{0};
        for (std::size_t j = 0; j < sk; ++j) {
          if (mask && !mask->visible(i, j)) continue;
          p[j] = std::exp(scores[j] - mx);
          total += p[j];
        }
        T* oi = out.data().data() + ((b * sq + i) * heads + h) * dh;
        for (std::size_t j = 0; j < sk; ++j) {
          if (mask && !mask->visible(i, j)) continue;
          p[j] /= total;
          const T* vj = vv + ((b * sk + j) * heads + h) * dh;
          for (std::size_t d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
        }
      }
    }
  }

  return make_op<T>(
      std::move(out), {q, k, v},
      [batch, sq, sk, heads, dh, scl, probs = std::move(probs)](Node<T>& self) {
        const T* qv = self.inputs[0]->value.data().data();
        const T* kv = self.inputs[1]->value.data().data();
        const T* vv = self.inputs[2]->value.data().data();
        auto* gq = grad_of(self, 0);
        auto* gk = grad_of(self, 1);
        auto* gv = grad_of(self, 2);
        const T* g = self.grad.data().data();
        std::vector<T> dp(sk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < sq; ++i) {
              const T* p = probs.data() + ((b * heads + h) * sq + i) * sk;
              const T* go = g + ((b * sq + i) * heads + h) * dh;
              const T* qi = qv + ((b * sq + i) * heads + h) * dh;
              T c{0};
              for (std::size_t j = 0; j < sk; ++j) {
                if (p[j] == T{0}) {
                  dp[j] = T{0};
                  continue;
                }
                const T* vj = vv + ((b * sk + j) * heads + h) * dh;
                T dot{0};
                for (std::size_t d = 0; d < dh; ++d) dot += go[d] * vj[d];
                dp[j] = dot;
                c += p[j] * dot;
                if (gv) {
                  T* dvj = gv->data().data() + ((b * sk + j) * heads + h) * dh;
                  for (std::size_t d = 0; d < dh; ++d) dvj[d] += p[j] * go[d];
                }
              }
              for (std::size_t j = 0; j < sk; ++j) {
                if (p[j] == T{0}) continue;
                const T ds = p[j] * (dp[j] - c) * scl;
                const T* kj = kv + ((b * sk + j) * heads + h) * dh;
                if (gq) {
                  T* dqi = gq->data().data() + ((b * sq + i) * heads + h) * dh;
                  for (std::size_t d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
                }
                if (gk) {
                  T* dkj = gk->data().data() + ((b * sk + j) * heads + h) * dh;
                  for (std::size_t d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
                }
              }
            }
          }
        }
      },
      "scaled_dot_attention");
}

}  // namespace

template <typename T>
Var<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionMask* mask) {
  if (q.shape().size() == 2) {
    const Shape qs = q.shape();
    auto q4 = reshape(q, {1, qs[0], 1, qs[1]});
    auto k4 = reshape(k, {1, k.dim(0), 1, k.dim(1)});
    auto v4 = reshape(v, {1, v.dim(0), 1, v.dim(1)});
    return reshape(attention4(q4, k4, v4, mask), qs);
  }
  return attention4(q, k, v, mask);
}

template <typename T>
Var<T> rope(const Var<T>& x, std::size_t start_pos, double base) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[3] % 2 != 0) {
    throw DimensionError("rope expects (B,S,H,D) with even D, got " + shape_str(s));
  }
  const std::size_t batch = s[0], seq = s[1], heads = s[2], dh = s[3], half = dh / 2;
  std::vector<T> cosv(seq * half), sinv(seq * half);
  for (std::size_t t = 0; t < seq; ++t) {
    const double pos = static_cast<double>(start_pos + t);
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      cosv[t * half + i] = static_cast<T>(std::cos(pos * inv_freq));
      sinv[t * half + i] = static_cast<T>(std::sin(pos * inv_freq));
    }
  }
  Tensor<T> out(s);
  const T* xv = x.value().data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = ((b * seq + t) * heads + h) * dh;
        for (std::size_t i = 0; i < half; ++i) {
          const T c = cosv[t * half + i], sn = sinv[t * half + i];
          const T x0 = xv[off + i], x1 = xv[off + i + half];
          out[off + i] = x0 * c - x1 * sn;
          out[off + i + half] = x0 * sn + x1 * c;
        }
      }
  return make_op<T>(
      std::move(out), {x},
      [batch, seq, heads, dh, half, cosv = std::move(cosv), sinv = std::move(sinv)](Node<T>& self) {
        auto* gx = grad_of(self, 0);
        if (!gx) return;
        const T* g = self.grad.data().data();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t off = ((b * seq + t) * heads + h) * dh;
              for (std::size_t i = 0; i < half; ++i) {
                const T c = cosv[t * half + i], sn = sinv[t * half + i];
                const T g0 = g[off + i], g1 = g[off + i + half];
                (*gx)[off + i] += g0 * c + g1 * sn;
                (*gx)[off + i + half] += -g0 * sn + g1 * c;
              }
            }
      },
      "rope");
}

template <typename T>
Var<T> swiglu(const Var<T>& x, const Var<T>& w_gate, const Var<T>& w_up, const Var<T>& w_down) {
  if (w_gate.shape() != w_up.shape() || w_gate.shape().size() != 2 || w_down.shape().size() != 2 ||
      w_down.dim(0) != w_gate.dim(1) || w_down.dim(1) != w_gate.dim(0)) {
    throw DimensionError("swiglu weights must chain d -> d_ff -> d, got gate " + shape_str(w_gate.shape()) +
                         ", up " + shape_str(w_up.shape()) + ", down " + shape_str(w_down.shape()));
  }
  auto gate = silu(matmul(x, w_gate));
  auto up = matmul(x, w_up);
  return matmul(mul(gate, up), w_down);
}

// ---------------------------------------------------------------------------
// Embedding and loss

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const Token> ids, const Shape& prefix) {
  if (table.shape().size() != 2) throw DimensionError("embedding table must be (V, d)");
  if (shape_numel(prefix) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for prefix " + shape_str(prefix));
  }
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  Shape out_shape = prefix;
  out_shape.push_back(width);
  Tensor<T> out(out_shape);
  std::vector<Token> saved(ids.begin(), ids.end());
  for (std::size_t r = 0; r < saved.size(); ++r) {
    const Token id = saved[r];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ParameterError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.value().data().data() + static_cast<std::size_t>(id) * width, width,
                out.data().data() + r * width);
  }
  return make_op<T>(
      std::move(out), {table},
      [width, saved = std::move(saved)](Node<T>& self) {
        auto* gt = grad_of(self, 0);
        if (!gt) return;
        for (std::size_t r = 0; r < saved.size(); ++r) {
          T* dst = gt->data().data() + static_cast<std::size_t>(saved[r]) * width;
          const T* src = self.grad.data().data() + r * width;
          for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
        }
      },
      "embedding");
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const Token> targets, Token ignore_index,
                     std::optional<double> divisor) {
  if (logits.shape().empty()) throw DimensionError("cross_entropy on rank-0 logits");
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.value().numel() / vocab;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " logit rows");
  }
  std::vector<Token> saved(targets.begin(), targets.end());
  std::size_t valid = 0;
  for (Token t : saved) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ParameterError("target id " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    }
    ++valid;
  }
  if (valid == 0 && !divisor) throw ParameterError("cross_entropy: every position is ignored");
  const double denom = divisor ? *divisor : static_cast<double>(valid);
  if (!(denom > 0.0)) throw ParameterError("cross_entropy divisor must be positive");

  const T* lv = logits.value().data().data();
  std::vector<double> lse(rows, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (saved[r] == ignore_index) continue;
    const T* row = lv + r * vocab;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    lse[r] = mx + std::log(s);
    total += lse[r] - static_cast<double>(row[saved[r]]);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / denom));
  return make_op<T>(
      std::move(out), {logits},
      [rows, vocab, denom, ignore_index, saved = std::move(saved), lse = std::move(lse)](Node<T>& self) {
        auto* gl = grad_of(self, 0);
        if (!gl) return;
        const T up = static_cast<T>(static_cast<double>(self.grad[0]) / denom);
        const T* lv = self.inputs[0]->value.data().data();
        for (std::size_t r = 0; r < rows; ++r) {
          if (saved[r] == ignore_index) continue;
          T* dst = gl->data().data() + r * vocab;
          const T* row = lv + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) {
            const T p = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse[r]));
            dst[j] += up * (p - (static_cast<Token>(j) == saved[r] ? T{1} : T{0}));
          }
        }
      },
      "cross_entropy");
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_op<T>(
      std::move(out), {x},
      [](Node<T>& self) {
        if (auto* g = grad_of(self, 0))
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[i];
      },
      "reshape");
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range for " + shape_str(first));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) {
        throw DimensionError("concat extents differ: " + shape_str(s) + " vs " + shape_str(first));
      }
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t at = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const std::size_t chunk = extents[p] * inner;
      std::copy_n(parts[p].value().data().data() + o * chunk, chunk,
                  out.data().data() + (o * total + at) * inner);
      at += extents[p];
    }
  }
  return make_op<T>(
      std::move(out), parts,
      [outer, inner, total, extents](Node<T>& self) {
        for (std::size_t o = 0; o < outer; ++o) {
          std::size_t at = 0;
          for (std::size_t p = 0; p < extents.size(); ++p) {
            const std::size_t chunk = extents[p] * inner;
            if (auto* g = grad_of(self, p)) {
              const T* src = self.grad.data().data() + (o * total + at) * inner;
              T* dst = g->data().data() + o * chunk;
              for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
            at += extents[p];
          }
        }
      },
      "concat");
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis], width = end - begin;
  Shape out_shape = s;
  out_shape[axis] = width;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.value().data().data() + (o * len + begin) * inner, width * inner,
                out.data().data() + o * width * inner);
  }
  return make_op<T>(
      std::move(out), {x},
      [outer, inner, len, begin, width](Node<T>& self) {
        auto* g = grad_of(self, 0);
        if (!g) return;
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data().data() + o * width * inner;
          T* dst = g->data().data() + (o * len + begin) * inner;
          for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
        }
      },
      "slice");
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double total = 0.0;
  for (T v : x.value().data()) total += v;
  return make_op<T>(
      Tensor<T>::scalar(static_cast<T>(total)), {x},
      [](Node<T>& self) {
        if (auto* g = grad_of(self, 0))
          for (auto& v : g->data()) v += self.grad[0];
      },
      "sum");
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().numel();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(n)));
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  if (weights.shape() != x.shape()) {
    throw DimensionError("weighted_sum weights " + shape_str(weights.shape()) + " vs " + shape_str(x.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < weights.numel(); ++i) total += static_cast<double>(x.value()[i]) * weights[i];
  return make_op<T>(
      Tensor<T>::scalar(static_cast<T>(total)), {x},
      [weights](Node<T>& self) {
        if (auto* g = grad_of(self, 0))
          for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += self.grad[0] * weights[i];
      },
      "weighted_sum");
}

#define SPECDRAFT_INSTANTIATE_OPS(T)                                                                        \
  template void gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);           \
  template void gemm_nt_acc<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);             \
  template void gemm_tn_acc<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);             \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> scale(const Var<T>&, T);                                                                 \
  template Var<T> silu(const Var<T>&);                                                                     \
  template Var<T> rms_norm(const Var<T>&, const Var<T>&, double);                                          \
  template Var<T> grouped_rms_norm(const Var<T>&, const Var<T>&, std::size_t, double);                     \
  template Var<T> softmax(const Var<T>&, std::size_t);                                                     \
  template Var<T> scaled_dot_attention(const Var<T>&, const Var<T>&, const Var<T>&, const AttentionMask*); \
  template Var<T> rope(const Var<T>&, std::size_t, double);                                                \
  template Var<T> swiglu(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> embedding(const Var<T>&, std::span<const Token>, const Shape&);                          \
  template Var<T> cross_entropy(const Var<T>&, std::span<const Token>, Token, std::optional<double>);      \
  template Var<T> reshape(const Var<T>&, Shape);                                                           \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                         \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                             \
  template Var<T> sum(const Var<T>&);                                                                      \
  template Var<T> mean(const Var<T>&);                                                                     \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);

SPECDRAFT_INSTANTIATE_OPS(float)
SPECDRAFT_INSTANTIATE_OPS(double)

#undef SPECDRAFT_INSTANTIATE_OPS

}  // namespace specdraft
