// Smoothed soft Dice loss over the region channels, plus the deeply
// supervised multi-resolution total and the corner-sampling mask
// downsampler that feeds the intermediate heads.
#pragma once

#include <array>

#include "tma/network.hpp"
#include "tma/tensor.hpp"

namespace tma {

// weights for the (p16, p8, p4, p1) heads
struct SupervisionWeights {
  std::array<double, 4> alpha{0.125, 0.25, 0.5, 1.0};
};

// pred: (N, I, h, w, d) in (0,1); target: binary, same shape. Per class i
// dice_i = (2 sum(p*t) + eps) / (sum(p^2) + sum(t^2) + eps); the loss is
// 1 - mean_i dice_i, so perfect overlap gives ~0 and disjoint masks ~1.
// Differentiable w.r.t. pred; throws ValueError on non-binary targets.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, T eps = T(1e-5));

// Corner sampling per block: out[.., y, x, z] = in[.., y*f, x*f, z*f].
// Keeps masks binary and preserves region nesting. Not recorded on the tape.
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, std::size_t factor);

// target at full resolution; downsampled per head. With deep supervision off
// (p16/p8/p4 undefined) the total is alpha4 * L(p1) alone.
template <typename T>
Tensor<T> deep_supervision_loss(const StageOutputs<T>& outputs, const Tensor<T>& target,
                                const SupervisionWeights& weights = {});

}  // namespace tma
