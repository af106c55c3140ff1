// Adam over a named parameter list, plus the linear-warmup / cosine-decay
// learning-rate schedule used by the training loop.
#pragma once

#include <cstdint>
#include <vector>

#include "tma/layers.hpp"
#include "tma/tensor.hpp"

namespace tma {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
class Adam {
 public:
  Adam(NamedTensors<T> params, AdamConfig config);

  // applies one update from the gradients currently on the parameters;
  // parameters that have no gradient yet are skipped
  void step();

  void set_lr(double lr) { config_.lr = lr; }
  const AdamConfig& config() const { return config_; }
  std::size_t steps_taken() const { return steps_; }

 private:
  NamedTensors<T> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig config_;
  std::size_t steps_ = 0;
};

// linear warm-up over `warmup_epochs` (epoch 0 -> base/warmup), then cosine
// decay reaching exactly zero at the final epoch
struct LrSchedule {
  double base_lr = 1e-4;
  std::size_t warmup_epochs = 30;
  std::size_t total_epochs = 1;

  double lr_at(std::size_t epoch) const;
};

}  // namespace tma
