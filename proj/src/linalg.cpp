// Matrix ops and normalization layers with backward closures.
#include <cmath>
#include <cstring>

#include "tma/tensor.hpp"

namespace tma {

namespace {

template <typename T>
std::vector<T>& grad_buffer(const Tensor<T>& t) {
  auto& g = t.impl()->grad;
  if (g.empty()) g.assign(t.size(), T(0));
  return g;
}

template <typename T>
void record_op(std::initializer_list<Tensor<T>> inputs, Tensor<T>& out,
               std::function<void()> backward_fn) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape) return;
  bool any = false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) any = true;
  }
  if (!any) return;
  out.set_requires_grad(true);
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  for (const auto& t : inputs) {
    if (t.defined()) impls.push_back(t.impl());
  }
  tape->record(std::move(impls), out.impl(), std::move(backward_fn));
}

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2) {
    throw ShapeError("linear: x must have rank >= 1 and weight rank 2");
  }
  const std::size_t cin = weight.extent(0);
  const std::size_t cout = weight.extent(1);
  if (x.extent(x.rank() - 1) != cin) {
    throw ShapeError("linear: trailing extent of x " + shape_str(x.shape()) +
                     " does not match weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != cout)) {
    throw ShapeError("linear: bias must have shape (" + std::to_string(cout) + ")");
  }
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  const std::size_t rows = x.size() / cin;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  {
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
    const T* bd = bias.defined() ? bias.data().data() : nullptr;
    T* od = out.data().data();
    parallel_for(rows, cin * cout, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t r = r0; r < r1; ++r) {
        T* orow = od + r * cout;
        if (bd) {
          std::memcpy(orow, bd, cout * sizeof(T));
        }
        const T* xrow = xd + r * cin;
        for (std::size_t k = 0; k < cin; ++k) {
          const T xv = xrow[k];
          const T* wrow = wd + k * cout;
          for (std::size_t j = 0; j < cout; ++j) orow[j] += xv * wrow[j];
        }
      }
    });
  }
  record_op<T>({x, weight, bias}, out, [x, weight, bias, out, rows, cin, cout]() {
    const auto& go = out.impl()->grad;
    const T* god = go.data();
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
    if (x.requires_grad()) {
      T* gx = grad_buffer(x).data();
      parallel_for(rows, cin * cout, [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          const T* grow = god + r * cout;
          T* gxrow = gx + r * cin;
          for (std::size_t k = 0; k < cin; ++k) {
            const T* wrow = wd + k * cout;
            T acc = T(0);
            for (std::size_t j = 0; j < cout; ++j) acc += grow[j] * wrow[j];
            gxrow[k] += acc;
          }
        }
      });
    }
    if (weight.requires_grad()) {
      T* gw = grad_buffer(weight).data();
      parallel_for(cin, rows * cout, [&](std::size_t k0, std::size_t k1) {
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xrow = xd + r * cin;
          const T* grow = god + r * cout;
          for (std::size_t k = k0; k < k1; ++k) {
            const T xv = xrow[k];
            T* gwrow = gw + k * cout;
            for (std::size_t j = 0; j < cout; ++j) gwrow[j] += xv * grow[j];
          }
        }
      });
    }
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = grad_buffer(bias);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* grow = god + r * cout;
        for (std::size_t j = 0; j < cout; ++j) gb[j] += grow[j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != a.rank()) {
    throw ShapeError("bmm: operands must share rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t rank = a.rank();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < rank; ++i) {
    if (a.extent(i) != b.extent(i)) {
      throw ShapeError("bmm: leading extents differ, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
    batch *= a.extent(i);
  }
  const std::size_t m = a.extent(rank - 2);
  const std::size_t k = a.extent(rank - 1);
  const std::size_t n = b.extent(rank - 1);
  if (b.extent(rank - 2) != k) {
    throw ShapeError("bmm: inner extents differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  {
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    T* od = out.data().data();
    parallel_for(batch, m * k * n, [&](std::size_t p0, std::size_t p1) {
      for (std::size_t p = p0; p < p1; ++p) {
        const T* ap = ad + p * m * k;
        const T* bp = bd + p * k * n;
        T* op = od + p * m * n;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = ap[i * k + kk];
            const T* brow = bp + kk * n;
            T* orow = op + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
          }
        }
      }
    });
  }
  record_op<T>({a, b}, out, [a, b, out, batch, m, k, n]() {
    const auto& go = out.impl()->grad;
    const T* god = go.data();
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    if (a.requires_grad()) {
      T* ga = grad_buffer(a).data();
      parallel_for(batch, m * k * n, [&](std::size_t p0, std::size_t p1) {
        for (std::size_t p = p0; p < p1; ++p) {
          const T* gp = god + p * m * n;
          const T* bp = bd + p * k * n;
          T* gap = ga + p * m * k;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
              const T* brow = bp + kk * n;
              const T* grow = gp + i * n;
              T acc = T(0);
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              gap[i * k + kk] += acc;
            }
          }
        }
      });
    }
    if (b.requires_grad()) {
      T* gb = grad_buffer(b).data();
      parallel_for(batch, m * k * n, [&](std::size_t p0, std::size_t p1) {
        for (std::size_t p = p0; p < p1; ++p) {
          const T* gp = god + p * m * n;
          const T* ap = ad + p * m * k;
          T* gbp = gb + p * k * n;
          for (std::size_t i = 0; i < m; ++i) {
            const T* grow = gp + i * n;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const T av = ap[i * k + kk];
              T* gbrow = gbp + kk * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
      });
    }
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  const std::size_t len = x.extent(axis);
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::size_t outer = x.size() / (len * inner);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    const T* xd = x.data().data();
    T* od = out.data().data();
    parallel_for(outer * inner, len * 4, [&](std::size_t q0, std::size_t q1) {
      for (std::size_t q = q0; q < q1; ++q) {
        const std::size_t o = q / inner, in = q % inner;
        const std::size_t base = o * len * inner + in;
        T mx = xd[base];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xd[base + i * inner]);
        T denom = T(0);
        for (std::size_t i = 0; i < len; ++i) {
          const T e = std::exp(xd[base + i * inner] - mx);
          od[base + i * inner] = e;
          denom += e;
        }
        const T invd = T(1) / denom;
        for (std::size_t i = 0; i < len; ++i) od[base + i * inner] *= invd;
      }
    });
  }
  record_op<T>({x}, out, [x, out, len, inner, outer]() {
    const auto& go = out.impl()->grad;
    const T* god = go.data();
    const T* od = out.data().data();
    T* gx = grad_buffer(x).data();
    parallel_for(outer * inner, len * 4, [&](std::size_t q0, std::size_t q1) {
      for (std::size_t q = q0; q < q1; ++q) {
        const std::size_t o = q / inner, in = q % inner;
        const std::size_t base = o * len * inner + in;
        T dot = T(0);
        for (std::size_t i = 0; i < len; ++i) dot += god[base + i * inner] * od[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t at = base + i * inner;
          gx[at] += od[at] * (god[at] - dot);
        }
      }
    });
  });
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: x must have rank >= 1");
  const std::size_t len = x.extent(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.extent(0) != len || beta.rank() != 1 || beta.extent(0) != len) {
    throw ShapeError("layer_norm: gamma/beta must have shape (" + std::to_string(len) + ")");
  }
  const std::size_t rows = x.size() / len;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> mean(rows), inv(rows);
  {
    const T* xd = x.data().data();
    const T* gd = gamma.data().data();
    const T* bd = beta.data().data();
    T* od = out.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xrow = xd + r * len;
      T m = T(0);
      for (std::size_t i = 0; i < len; ++i) m += xrow[i];
      m /= T(len);
      T v = T(0);
      for (std::size_t i = 0; i < len; ++i) {
        const T d = xrow[i] - m;
        v += d * d;
      }
      v /= T(len);
      const T iv = T(1) / std::sqrt(v + eps);
      mean[r] = m;
      inv[r] = iv;
      T* orow = od + r * len;
      for (std::size_t i = 0; i < len; ++i) orow[i] = gd[i] * (xrow[i] - m) * iv + bd[i];
    }
  }
  record_op<T>({x, gamma, beta}, out,
               [x, gamma, beta, out, rows, len, mean = std::move(mean), inv = std::move(inv)]() {
                 const auto& go = out.impl()->grad;
                 const T* god = go.data();
                 const T* xd = x.data().data();
                 const T* gd = gamma.data().data();
                 T* gx = x.requires_grad() ? grad_buffer(x).data() : nullptr;
                 T* gg = gamma.requires_grad() ? grad_buffer(gamma).data() : nullptr;
                 T* gb = beta.requires_grad() ? grad_buffer(beta).data() : nullptr;
                 for (std::size_t r = 0; r < rows; ++r) {
                   const T* xrow = xd + r * len;
                   const T* grow = god + r * len;
                   const T m = mean[r], iv = inv[r];
                   if (gg || gb) {
                     for (std::size_t i = 0; i < len; ++i) {
                       if (gg) gg[i] += grow[i] * (xrow[i] - m) * iv;
                       if (gb) gb[i] += grow[i];
                     }
                   }
                   if (gx) {
                     // d/dx of gamma * (x - mean) / sqrt(var + eps)
                     T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                     for (std::size_t i = 0; i < len; ++i) {
                       const T dxhat = grow[i] * gd[i];
                       const T xhat = (xrow[i] - m) * iv;
                       sum_dxhat += dxhat;
                       sum_dxhat_xhat += dxhat * xhat;
                     }
                     T* gxrow = gx + r * len;
                     const T invn = T(1) / T(len);
                     for (std::size_t i = 0; i < len; ++i) {
                       const T dxhat = grow[i] * gd[i];
                       const T xhat = (xrow[i] - m) * iv;
                       gxrow[i] +=
                           iv * (dxhat - invn * sum_dxhat - xhat * invn * sum_dxhat_xhat);
                     }
                   }
                 }
               });
  return out;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, NormMode mode, T momentum, T eps) {
  if (x.rank() < 2) throw ShapeError("batch_norm: x must have rank >= 2 (N, C, ...)");
  const std::size_t batch = x.extent(0);
  const std::size_t channels = x.extent(1);
  std::size_t spatial = 1;
  for (std::size_t a = 2; a < x.rank(); ++a) spatial *= x.extent(a);
  if (gamma.rank() != 1 || gamma.extent(0) != channels || beta.rank() != 1 ||
      beta.extent(0) != channels) {
    throw ShapeError("batch_norm: gamma/beta must have shape (" + std::to_string(channels) + ")");
  }
  if (state.running_mean.size() != channels || state.running_var.size() != channels) {
    throw ShapeError("batch_norm: running stats sized for " +
                     std::to_string(state.running_mean.size()) + " channels, input has " +
                     std::to_string(channels));
  }
  const std::size_t m = batch * spatial;
  std::vector<T> mean(channels), inv(channels);
  if (mode == NormMode::kTrain) {
    if (m < 2) {
      throw ValueError("batch_norm: training mode needs more than one value per channel");
    }
    const T* xd = x.data().data();
    for (std::size_t c = 0; c < channels; ++c) {
      T s = T(0);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = xd + (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      const T mu = s / T(m);
      T v = T(0);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = xd + (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          const T d = p[i] - mu;
          v += d * d;
        }
      }
      const T var = v / T(m);  // biased, used for normalization
      mean[c] = mu;
      inv[c] = T(1) / std::sqrt(var + eps);
      // running stats track the unbiased variance
      const T unbiased = v / T(m - 1);
      auto& rm = state.running_mean.data();
      auto& rv = state.running_var.data();
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    const auto& rm = state.running_mean.data();
    const auto& rv = state.running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = rm[c];
      inv[c] = T(1) / std::sqrt(rv[c] + eps);
    }
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    const T* xd = x.data().data();
    const T* gd = gamma.data().data();
    const T* bd = beta.data().data();
    T* od = out.data().data();
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t c = 0; c < channels; ++c) {
        const T* p = xd + (n * channels + c) * spatial;
        T* q = od + (n * channels + c) * spatial;
        const T mu = mean[c], iv = inv[c], g = gd[c], b = bd[c];
        for (std::size_t i = 0; i < spatial; ++i) q[i] = g * (p[i] - mu) * iv + b;
      }
    }
  }
  const bool train = mode == NormMode::kTrain;
  record_op<T>({x, gamma, beta}, out,
               [x, gamma, beta, out, batch, channels, spatial, m, train, mean = std::move(mean),
                inv = std::move(inv)]() {
                 const auto& go = out.impl()->grad;
                 const T* god = go.data();
                 const T* xd = x.data().data();
                 const T* gd = gamma.data().data();
                 T* gg = gamma.requires_grad() ? grad_buffer(gamma).data() : nullptr;
                 T* gb = beta.requires_grad() ? grad_buffer(beta).data() : nullptr;
                 T* gx = x.requires_grad() ? grad_buffer(x).data() : nullptr;
                 for (std::size_t c = 0; c < channels; ++c) {
                   const T mu = mean[c], iv = inv[c];
                   T sum_g = T(0), sum_g_xhat = T(0);
                   for (std::size_t n = 0; n < batch; ++n) {
                     const std::size_t base = (n * channels + c) * spatial;
                     for (std::size_t i = 0; i < spatial; ++i) {
                       const T g = god[base + i];
                       sum_g += g;
                       sum_g_xhat += g * (xd[base + i] - mu) * iv;
                     }
                   }
                   if (gg) gg[c] += sum_g_xhat;
                   if (gb) gb[c] += sum_g;
                   if (!gx) continue;
                   const T gam = gd[c];
                   if (train) {
                     const T invm = T(1) / T(m);
                     for (std::size_t n = 0; n < batch; ++n) {
                       const std::size_t base = (n * channels + c) * spatial;
                       for (std::size_t i = 0; i < spatial; ++i) {
                         const T xhat = (xd[base + i] - mu) * iv;
                         gx[base + i] += gam * iv *
                                         (god[base + i] - invm * sum_g - xhat * invm * sum_g_xhat);
                       }
                     }
                   } else {
                     // running stats are constants in eval mode
                     for (std::size_t n = 0; n < batch; ++n) {
                       const std::size_t base = (n * channels + c) * spatial;
                       for (std::size_t i = 0; i < spatial; ++i) {
                         gx[base + i] += gam * iv * god[base + i];
                       }
                     }
                   }
                 }
               });
  return out;
}

#define TMA_INSTANTIATE(T)                                                                   \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> bmm<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                   BatchNormState<T>&, NormMode, T, T);

TMA_INSTANTIATE(float)
TMA_INSTANTIATE(double)
#undef TMA_INSTANTIATE

}  // namespace tma
