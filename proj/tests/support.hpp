#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "specdraft/base_lm.hpp"
#include "specdraft/prng.hpp"
#include "specdraft/specformer.hpp"
#include "specdraft/tensor.hpp"

namespace specdraft::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, Prng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
Tensor<T> from_values(Shape shape, std::vector<double> values) {
  return Tensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

/// max |a - b| / max(max |b|, tiny).
template <typename T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double num = 0.0, den = 1e-300;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    den = std::max(den, std::abs(static_cast<double>(b[i])));
  }
  return num / den;
}

inline std::vector<Token> random_tokens(std::size_t n, std::size_t vocab, Prng& rng) {
  std::vector<Token> out(n);
  for (auto& t : out) t = static_cast<Token>(rng.uniform_int(vocab));
  return out;
}

/// A small base config drawn from a few shape families.
inline BaseLMConfig random_toy_base(Prng& rng) {
  BaseLMConfig c;
  const std::size_t heads = 1 + rng.uniform_int(2);
  c.layers = 4 + rng.uniform_int(3);
  c.heads = heads;
  c.hidden = heads * 2 * (1 + rng.uniform_int(4));
  c.ffn = 4 + rng.uniform_int(20);
  c.vocab = 5 + rng.uniform_int(20);
  c.max_seq = 128;
  return c;
}

inline BaseLMConfig tiny_base(std::size_t vocab = 16, std::size_t max_seq = 256) {
  BaseLMConfig c;
  c.layers = 4;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 32;
  c.vocab = vocab;
  c.max_seq = max_seq;
  return c;
}

inline SpecFormerConfig draft_for(const BaseLMConfig& base, std::size_t l_d, std::size_t heads = 2) {
  SpecFormerConfig c;
  c.hidden = base.hidden;
  c.rope_base = base.rope_base;
  c.l_d = l_d;
  c.heads = heads;
  c.ffn = 2 * base.hidden;
  return c;
}

/// Scratch directory removed at scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Prng rng(static_cast<std::uint64_t>(std::hash<std::string>{}(tag)) ^
             static_cast<std::uint64_t>(reinterpret_cast<std::uintptr_t>(this)));
    path_ = std::filesystem::temp_directory_path() / ("specdraft_" + tag + "_" + std::to_string(rng.next_u64()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace specdraft::testing
