#include "tma/loss.hpp"

namespace tma {

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, T eps) {
  if (pred.rank() < 2 || pred.shape() != target.shape()) {
    throw ShapeError("dice_loss: pred " + shape_str(pred.shape()) + " and target " +
                     shape_str(target.shape()) + " must share a (N, I, ...) shape");
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T v = target.data()[i];
    if (v != T(0) && v != T(1)) {
      throw ValueError("dice_loss: target is not binary at flat index " + std::to_string(i) +
                       " (value " + std::to_string(static_cast<double>(v)) + ")");
    }
  }
  std::vector<std::size_t> non_class_axes{0};
  for (std::size_t a = 2; a < pred.rank(); ++a) non_class_axes.push_back(a);
  const std::size_t classes = pred.extent(1);

  Tensor<T> inter = reduce_sum(mul(pred, target), non_class_axes);
  Tensor<T> denom = add(reduce_sum(mul(pred, pred), non_class_axes),
                        reduce_sum(mul(target, target), non_class_axes));
  Tensor<T> dice = div(add_scalar(scale(inter, T(2)), eps), add_scalar(denom, eps));
  return add_scalar(scale(sum_all(dice), T(-1) / static_cast<T>(classes)), T(1));
}

template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, std::size_t factor) {
  if (mask.rank() != 5) {
    throw ShapeError("downsample_mask: expected (N, I, h, w, d), got " + shape_str(mask.shape()));
  }
  if (factor == 0) throw ValueError("downsample_mask: factor must be positive");
  for (std::size_t a = 2; a < 5; ++a) {
    if (mask.extent(a) % factor != 0) {
      throw ShapeError("downsample_mask: extent " + std::to_string(mask.extent(a)) +
                       " on axis " + std::to_string(a) + " not divisible by factor " +
                       std::to_string(factor));
    }
  }
  const std::size_t n = mask.extent(0), c = mask.extent(1);
  const std::size_t h = mask.extent(2) / factor, w = mask.extent(3) / factor,
                    d = mask.extent(4) / factor;
  Tensor<T> out = Tensor<T>::zeros({n, c, h, w, d});
  const auto& src = mask.data();
  auto& dst = out.data();
  const std::size_t sw = mask.extent(3), sd = mask.extent(4);
  std::size_t idx = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * mask.extent(2) * sw * sd;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t z = 0; z < d; ++z) {
          dst[idx++] = src[base + (y * factor) * sw * sd + (x * factor) * sd + z * factor];
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> deep_supervision_loss(const StageOutputs<T>& outputs, const Tensor<T>& target,
                                const SupervisionWeights& weights) {
  if (!outputs.p1.defined()) throw ValueError("deep_supervision_loss: p1 output is undefined");
  Tensor<T> total = scale(dice_loss(outputs.p1, target), static_cast<T>(weights.alpha[3]));
  if (!outputs.p16.defined()) return total;

  const std::array<const Tensor<T>*, 3> heads{&outputs.p16, &outputs.p8, &outputs.p4};
  const std::array<std::size_t, 3> factors{16, 8, 4};
  for (std::size_t k = 0; k < 3; ++k) {
    Tensor<T> down = downsample_mask(target, factors[k]);
    if (down.shape() != heads[k]->shape()) {
      throw ShapeError("deep_supervision_loss: head at 1/" + std::to_string(factors[k]) +
                       " has shape " + shape_str(heads[k]->shape()) +
                       " but the downsampled target is " + shape_str(down.shape()));
    }
    total = add(total, scale(dice_loss(*heads[k], down), static_cast<T>(weights.alpha[k])));
  }
  return total;
}

#define TMA_INSTANTIATE(T)                                                                    \
  template Tensor<T> dice_loss<T>(const Tensor<T>&, const Tensor<T>&, T);                     \
  template Tensor<T> downsample_mask<T>(const Tensor<T>&, std::size_t);                       \
  template Tensor<T> deep_supervision_loss<T>(const StageOutputs<T>&, const Tensor<T>&,       \
                                              const SupervisionWeights&);

TMA_INSTANTIATE(float)
TMA_INSTANTIATE(double)
#undef TMA_INSTANTIATE

}  // namespace tma
