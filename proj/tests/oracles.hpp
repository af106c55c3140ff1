// Reference implementations used to cross-check the engine. These are written
// gather-style (one output element at a time) on purpose, so they share no
// loop structure with the scatter-style kernels under test.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "tma/tensor.hpp"

namespace oracle {

template <typename T>
std::vector<T> matmul(const std::vector<T>& a, const std::vector<T>& b, std::size_t m,
                      std::size_t k, std::size_t n) {
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      out[i * n + j] = acc;
    }
  }
  return out;
}

template <typename T>
std::vector<T> softmax_rows(const std::vector<T>& x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data() + r * cols;
    T mx = *std::max_element(row, row + cols);
    T denom = T(0);
    for (std::size_t j = 0; j < cols; ++j) denom += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = std::exp(row[j] - mx) / denom;
  }
  return out;
}

// One output element at a time; out-of-range taps read zero (padding).
template <typename T>
tma::Tensor<T> conv3d(const tma::Tensor<T>& x, const tma::Tensor<T>& w, const tma::Tensor<T>& b,
                      const tma::ConvSpec& s) {
  const std::size_t N = x.extent(0), H = x.extent(2), W = x.extent(3), D = x.extent(4);
  const std::size_t cig = s.in_channels / s.groups, cog = s.out_channels / s.groups;
  auto odim = [&](std::size_t in, std::size_t a) {
    return (in + 2 * s.padding[a] - s.kernel[a]) / s.stride[a] + 1;
  };
  const std::size_t Ho = odim(H, 0), Wo = odim(W, 1), Do = odim(D, 2);
  tma::Tensor<T> out = tma::Tensor<T>::zeros({N, s.out_channels, Ho, Wo, Do});
  auto xat = [&](std::size_t n, std::size_t c, long h, long ww, long d) -> T {
    if (h < 0 || ww < 0 || d < 0 || h >= long(H) || ww >= long(W) || d >= long(D)) return T(0);
    return x.data()[((n * s.in_channels + c) * H + h) * W * D + ww * D + d];
  };
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oc = 0; oc < s.out_channels; ++oc) {
      const std::size_t gi = oc / cog;
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          for (std::size_t od = 0; od < Do; ++od) {
            T acc = b.defined() ? b.data()[oc] : T(0);
            for (std::size_t icg = 0; icg < cig; ++icg) {
              for (std::size_t kh = 0; kh < s.kernel[0]; ++kh) {
                for (std::size_t kw = 0; kw < s.kernel[1]; ++kw) {
                  for (std::size_t kd = 0; kd < s.kernel[2]; ++kd) {
                    const long ih = long(oh * s.stride[0] + kh) - long(s.padding[0]);
                    const long iw = long(ow * s.stride[1] + kw) - long(s.padding[1]);
                    const long id = long(od * s.stride[2] + kd) - long(s.padding[2]);
                    const std::size_t widx =
                        ((oc * cig + icg) * s.kernel[0] + kh) * s.kernel[1] * s.kernel[2] +
                        kw * s.kernel[2] + kd;
                    acc += w.data()[widx] * xat(n, gi * cig + icg, ih, iw, id);
                  }
                }
              }
            }
            out.data()[((n * s.out_channels + oc) * Ho + oh) * Wo * Do + ow * Do + od] = acc;
          }
        }
      }
    }
  }
  return out;
}

// Transposed conv, gather form: out[o] collects from the unique input voxel
// whose f-block covers o.
template <typename T>
tma::Tensor<T> transposed_conv3d(const tma::Tensor<T>& x, const tma::Tensor<T>& w,
                                 const tma::Tensor<T>& b, std::size_t f) {
  const std::size_t N = x.extent(0), cin = x.extent(1);
  const std::size_t H = x.extent(2), W = x.extent(3), D = x.extent(4);
  const std::size_t cout = w.extent(1);
  tma::Tensor<T> out = tma::Tensor<T>::zeros({N, cout, H * f, W * f, D * f});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t oh = 0; oh < H * f; ++oh) {
        for (std::size_t ow = 0; ow < W * f; ++ow) {
          for (std::size_t od = 0; od < D * f; ++od) {
            T acc = b.defined() ? b.data()[co] : T(0);
            const std::size_t h = oh / f, a = oh % f;
            const std::size_t ww = ow / f, bb = ow % f;
            const std::size_t d = od / f, cc = od % f;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const T xv = x.data()[((n * cin + ci) * H + h) * W * D + ww * D + d];
              const T wv = w.data()[((ci * cout + co) * f + a) * f * f + bb * f + cc];
              acc += xv * wv;
            }
            out.data()[((n * cout + co) * H * f + oh) * W * f * D * f + ow * D * f + od] = acc;
          }
        }
      }
    }
  }
  return out;
}

}  // namespace oracle
