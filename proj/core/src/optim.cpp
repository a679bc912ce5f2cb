#include "specdraft/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "specdraft/errors.hpp"

namespace specdraft {

void OptimConfig::validate() const {
  if (!(min_lr > 0.0)) throw ParameterError("train.min_lr: must be positive");
  if (!(max_lr >= min_lr)) throw ParameterError("train.max_lr: must be at least min_lr");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw ParameterError("train.warmup_fraction: must be in [0, 1)");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ParameterError("train.beta1: must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ParameterError("train.beta2: must be in [0, 1)");
  if (!(eps > 0.0)) throw ParameterError("train.eps: must be positive");
  if (!(weight_decay >= 0.0)) throw ParameterError("train.weight_decay: must be nonnegative");
}

double lr_schedule(std::size_t step, std::size_t total, const OptimConfig& cfg) {
  if (step > total) {
    throw ParameterError("lr_schedule step " + std::to_string(step) + " exceeds total " + std::to_string(total));
  }
  const auto warmup = static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(total)));
  if (step < warmup) return cfg.max_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return cfg.max_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto* p : params_) {
    m_.emplace_back(p->numel(), 0.0);
    v_.emplace_back(p->numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter<T>& p = *params_[i];
    if (!p.trainable()) continue;
    if (m_[i].size() != p.numel()) throw DimensionError("optimizer state does not match parameter " + p.name());
    auto w = p.value().data();
    const auto g = p.grad().data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
      const double wj = w[j];
      w[j] = static_cast<T>(wj - lr * (update + cfg_.weight_decay * wj));
    }
    p.value().require_finite(p.name().c_str());
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace specdraft
