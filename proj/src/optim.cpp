#include "tma/optim.hpp"

#include <cmath>

namespace tma {

template <typename T>
Adam<T>::Adam(NamedTensors<T> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config_.lr >= 0.0) || !(config_.eps > 0.0) || config_.beta1 < 0.0 ||
      config_.beta1 >= 1.0 || config_.beta2 < 0.0 || config_.beta2 >= 1.0) {
    throw ConfigError("adam: need lr >= 0, eps > 0 and betas in [0, 1)");
  }
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].second.size(), 0.0);
    v_[i].assign(params_[i].second.size(), 0.0);
  }
}

template <typename T>
void Adam<T>::step() {
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& p = params_[i].second;
    if (!p.has_grad()) continue;
    const auto& g = p.grad();
    auto& data = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      double grad = static_cast<double>(g[j]);
      if (config_.weight_decay != 0.0) grad += config_.weight_decay * data[j];
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * grad;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * grad * grad;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] = static_cast<T>(data[j] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
}

double LrSchedule::lr_at(std::size_t epoch) const {
  if (warmup_epochs > 0 && epoch < warmup_epochs) {
    return base_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
  }
  const std::size_t start = warmup_epochs;
  if (total_epochs <= start + 1) return base_lr;
  const double progress = static_cast<double>(epoch - start) /
                          static_cast<double>(total_epochs - 1 - start);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template class Adam<float>;
template class Adam<double>;

}  // namespace tma
