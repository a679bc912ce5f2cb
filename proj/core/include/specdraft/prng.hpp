#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace specdraft {

/// Seeded pseudo-random stream. Scalar draws use explicit transforms rather
/// than std:: distributions so a seed maps to one stream for a given build.
class Prng {
 public:
  explicit Prng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Child seed derived from this generator's seed and a component tag;
  /// independent of how many draws were already taken.
  std::uint64_t derive(std::string_view tag) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Mixes a seed with a tag; used to split one root seed per component.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

}  // namespace specdraft
