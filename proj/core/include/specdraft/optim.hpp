#pragma once

#include <cstddef>
#include <vector>

#include "specdraft/autograd.hpp"

namespace specdraft {

/// AdamW with linear warmup and cosine annealing.
struct OptimConfig {
  double max_lr = 5e-4;
  double min_lr = 1e-5;
  double warmup_fraction = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  /// Large for Adam; kept as the default recipe value and exposed for tuning.
  double eps = 2e-4;
  double weight_decay = 0.01;

  void validate() const;
};

/// Linear warmup 0 -> max_lr over round(warmup_fraction * total) steps, then
/// min_lr + (max_lr - min_lr)(1 + cos(pi * progress)) / 2. Throws for step > total.
double lr_schedule(std::size_t step, std::size_t total, const OptimConfig& cfg);

/// Decoupled-weight-decay Adam over a fixed parameter list. Moments are kept
/// in double regardless of the parameter precision.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, OptimConfig cfg);

  /// Applies one update with learning rate `lr` using each parameter's grad.
  /// Parameters that are not trainable are skipped.
  void step(double lr);
  void zero_grad();
  std::size_t steps_taken() const noexcept { return t_; }
  const OptimConfig& config() const noexcept { return cfg_; }

 private:
  std::vector<Parameter<T>*> params_;
  OptimConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace specdraft
