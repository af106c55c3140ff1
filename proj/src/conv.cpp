// Direct 3D convolutions: grouped/strided conv, depthwise, transposed.
#include <cmath>
#include <cstring>

#include "tma/tensor.hpp"

namespace tma {

void ConvSpec::validate() const {
  if (in_channels == 0 || out_channels == 0) {
    throw ConfigError("conv: channel counts must be positive");
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (kernel[a] == 0 || stride[a] == 0) {
      throw ConfigError("conv: kernel and stride must be positive");
    }
  }
  if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("conv: groups=" + std::to_string(groups) + " must divide in_channels=" +
                      std::to_string(in_channels) + " and out_channels=" +
                      std::to_string(out_channels));
  }
}

std::array<std::size_t, 3> ConvSpec::output_extents(const std::array<std::size_t, 3>& in) const {
  std::array<std::size_t, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t padded = in[a] + 2 * padding[a];
    if (padded < kernel[a]) {
      throw ShapeError("conv: input extent " + std::to_string(in[a]) + " (+2*" +
                       std::to_string(padding[a]) + " pad) smaller than kernel " +
                       std::to_string(kernel[a]));
    }
    out[a] = (padded - kernel[a]) / stride[a] + 1;
  }
  return out;
}

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

// Output positions o with 0 <= o*stride + k_off - pad < in, clamped to n_out.
struct AxisRange {
  std::size_t lo, hi;  // half-open
};

AxisRange valid_range(std::size_t n_out, std::size_t n_in, std::size_t stride, std::size_t pad,
                      std::size_t k_off) {
  std::size_t lo = 0;
  if (pad > k_off) lo = (pad - k_off + stride - 1) / stride;
  std::size_t hi = 0;
  if (n_in + pad > k_off) {
    hi = std::min(n_out, (n_in - 1 + pad - k_off) / stride + 1);
  }
  return {std::min(lo, hi), hi};
}

// All the geometry conv3d forward/backward needs, captured by value.
struct ConvGeom {
  std::size_t batch, cin, cout, groups, cig, cog;
  std::size_t H, W, D, Ho, Wo, Do;
  std::array<std::size_t, 3> k, s, p;
};

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  spec.validate();
  if (x.rank() != 5) {
    throw ShapeError("conv3d: input must be (N, C, H, W, D), got " + shape_str(x.shape()));
  }
  if (x.extent(1) != spec.in_channels) {
    throw ShapeError("conv3d: input has " + std::to_string(x.extent(1)) + " channels, spec wants " +
                     std::to_string(spec.in_channels));
  }
  const std::size_t cig = spec.in_channels / spec.groups;
  const std::size_t cog = spec.out_channels / spec.groups;
  const Shape want_w{spec.out_channels, cig, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  if (weight.shape() != want_w) {
    throw ShapeError("conv3d: weight shape " + shape_str(weight.shape()) + " expected " +
                     shape_str(want_w));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != spec.out_channels)) {
    throw ShapeError("conv3d: bias must have shape (" + std::to_string(spec.out_channels) + ")");
  }
  const auto oe = spec.output_extents({x.extent(2), x.extent(3), x.extent(4)});
  ConvGeom g{x.extent(0), spec.in_channels, spec.out_channels, spec.groups, cig,   cog,
             x.extent(2), x.extent(3),      x.extent(4),       oe[0],       oe[1], oe[2],
             spec.kernel, spec.stride,      spec.padding};
  Tensor<T> out = Tensor<T>::zeros({g.batch, g.cout, g.Ho, g.Wo, g.Do});

  const std::size_t xC = g.H * g.W * g.D, xH = g.W * g.D, xW = g.D;
  const std::size_t oC = g.Ho * g.Wo * g.Do, oH = g.Wo * g.Do, oW = g.Do;
  const std::size_t wO = g.cig * g.k[0] * g.k[1] * g.k[2], wI = g.k[0] * g.k[1] * g.k[2],
                    wH = g.k[1] * g.k[2], wW = g.k[2];
  const std::size_t work = g.cig * wI * oC;

  {
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
    const T* bd = bias.defined() ? bias.data().data() : nullptr;
    T* od = out.data().data();
    parallel_for(g.batch * g.cout, work, [&](std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b) {
        const std::size_t n = b / g.cout, oc = b % g.cout;
        T* obase = od + n * g.cout * oC + oc * oC;
        const T bv = bd ? bd[oc] : T(0);
        for (std::size_t i = 0; i < oC; ++i) obase[i] = bv;
        const std::size_t gi = oc / g.cog;
        for (std::size_t icg = 0; icg < g.cig; ++icg) {
          const T* xbase = xd + n * g.cin * xC + (gi * g.cig + icg) * xC;
          const T* wbase = wd + oc * wO + icg * wI;
          for (std::size_t kh = 0; kh < g.k[0]; ++kh) {
            const auto rh = valid_range(g.Ho, g.H, g.s[0], g.p[0], kh);
            for (std::size_t kw = 0; kw < g.k[1]; ++kw) {
              const auto rw = valid_range(g.Wo, g.W, g.s[1], g.p[1], kw);
              for (std::size_t kd = 0; kd < g.k[2]; ++kd) {
                const auto rd = valid_range(g.Do, g.D, g.s[2], g.p[2], kd);
                const T wv = wbase[kh * wH + kw * wW + kd];
                for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
                  const std::size_t ih = oh * g.s[0] + kh - g.p[0];
                  for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) {
                    const std::size_t iw = ow * g.s[1] + kw - g.p[1];
                    const T* xrow = xbase + ih * xH + iw * xW;
                    T* orow = obase + oh * oH + ow * oW;
                    for (std::size_t odp = rd.lo; odp < rd.hi; ++odp) {
                      orow[odp] += wv * xrow[odp * g.s[2] + kd - g.p[2]];
                    }
                  }
                }
              }
            }
          }
        }
      }
    });
  }

  record_op<T>({x, weight, bias}, out, [x, weight, bias, out, g, xC, xH, xW, oC, oH, oW, wO, wI,
                                        wH, wW, work]() {
    const T* god = out.impl()->grad.data();
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
    if (x.requires_grad()) {
      T* gx = grad_buffer(x).data();
      parallel_for(g.batch, g.cout * work, [&](std::size_t n0, std::size_t n1) {
        for (std::size_t n = n0; n < n1; ++n) {
          for (std::size_t oc = 0; oc < g.cout; ++oc) {
            const T* gbase = god + n * g.cout * oC + oc * oC;
            const std::size_t gi = oc / g.cog;
            for (std::size_t icg = 0; icg < g.cig; ++icg) {
              T* xbase = gx + n * g.cin * xC + (gi * g.cig + icg) * xC;
              const T* wbase = wd + oc * wO + icg * wI;
              for (std::size_t kh = 0; kh < g.k[0]; ++kh) {
                const auto rh = valid_range(g.Ho, g.H, g.s[0], g.p[0], kh);
                for (std::size_t kw = 0; kw < g.k[1]; ++kw) {
                  const auto rw = valid_range(g.Wo, g.W, g.s[1], g.p[1], kw);
                  for (std::size_t kd = 0; kd < g.k[2]; ++kd) {
                    const auto rd = valid_range(g.Do, g.D, g.s[2], g.p[2], kd);
                    const T wv = wbase[kh * wH + kw * wW + kd];
                    for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
                      const std::size_t ih = oh * g.s[0] + kh - g.p[0];
                      for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) {
                        const std::size_t iw = ow * g.s[1] + kw - g.p[1];
                        T* xrow = xbase + ih * xH + iw * xW;
                        const T* grow = gbase + oh * oH + ow * oW;
                        for (std::size_t odp = rd.lo; odp < rd.hi; ++odp) {
                          xrow[odp * g.s[2] + kd - g.p[2]] += wv * grow[odp];
                        }
                      }
                    }
                  }
                }
              }
            }
          }
        }
      });
    }
    if (weight.requires_grad()) {
      T* gw = grad_buffer(weight).data();
      parallel_for(g.cout, g.batch * work, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t oc = c0; oc < c1; ++oc) {
          const std::size_t gi = oc / g.cog;
          for (std::size_t n = 0; n < g.batch; ++n) {
            const T* gbase = god + n * g.cout * oC + oc * oC;
            for (std::size_t icg = 0; icg < g.cig; ++icg) {
              const T* xbase = xd + n * g.cin * xC + (gi * g.cig + icg) * xC;
              T* wbase = gw + oc * wO + icg * wI;
              for (std::size_t kh = 0; kh < g.k[0]; ++kh) {
                const auto rh = valid_range(g.Ho, g.H, g.s[0], g.p[0], kh);
                for (std::size_t kw = 0; kw < g.k[1]; ++kw) {
                  const auto rw = valid_range(g.Wo, g.W, g.s[1], g.p[1], kw);
                  for (std::size_t kd = 0; kd < g.k[2]; ++kd) {
                    const auto rd = valid_range(g.Do, g.D, g.s[2], g.p[2], kd);
                    T acc = T(0);
                    for (std::size_t oh = rh.lo; oh < rh.hi; ++oh) {
                      const std::size_t ih = oh * g.s[0] + kh - g.p[0];
                      for (std::size_t ow = rw.lo; ow < rw.hi; ++ow) {
                        const std::size_t iw = ow * g.s[1] + kw - g.p[1];
                        const T* xrow = xbase + ih * xH + iw * xW;
                        const T* grow = gbase + oh * oH + ow * oW;
                        for (std::size_t odp = rd.lo; odp < rd.hi; ++odp) {
                          acc += grow[odp] * xrow[odp * g.s[2] + kd - g.p[2]];
                        }
                      }
                    }
                    wbase[kh * wH + kw * wW + kd] += acc;
                  }
                }
              }
            }
          }
        }
      });
    }
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = grad_buffer(bias);
      for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t oc = 0; oc < g.cout; ++oc) {
          const T* gbase = god + n * g.cout * oC + oc * oC;
          T acc = T(0);
          for (std::size_t i = 0; i < oC; ++i) acc += gbase[i];
          gb[oc] += acc;
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> depthwise_conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t r) {
  if (x.rank() != 5) {
    throw ShapeError("depthwise_conv3d: input must be (N, C, H, W, D), got " +
                     shape_str(x.shape()));
  }
  if (r == 0) throw ConfigError("depthwise_conv3d: window must be positive");
  for (std::size_t a = 2; a < 5; ++a) {
    if (x.extent(a) % r != 0) {
      throw ShapeError("depthwise_conv3d: extent " + std::to_string(x.extent(a)) + " on axis " +
                       std::to_string(a) + " is not divisible by window " + std::to_string(r));
    }
  }
  const std::size_t c = x.extent(1);
  return conv3d(x, weight, bias, ConvSpec{c, c, {r, r, r}, {r, r, r}, {0, 0, 0}, c});
}

template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                            std::size_t factor) {
  if (x.rank() != 5) {
    throw ShapeError("transposed_conv3d: input must be (N, C, H, W, D), got " +
                     shape_str(x.shape()));
  }
  if (factor == 0) throw ConfigError("transposed_conv3d: factor must be positive");
  const std::size_t batch = x.extent(0), cin = x.extent(1);
  const std::size_t H = x.extent(2), W = x.extent(3), D = x.extent(4);
  if (weight.rank() != 5 || weight.extent(0) != cin || weight.extent(2) != factor ||
      weight.extent(3) != factor || weight.extent(4) != factor) {
    throw ShapeError("transposed_conv3d: weight shape " + shape_str(weight.shape()) +
                     " expected (" + std::to_string(cin) + ", cout, " + std::to_string(factor) +
                     ", " + std::to_string(factor) + ", " + std::to_string(factor) + ")");
  }
  const std::size_t cout = weight.extent(1);
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != cout)) {
    throw ShapeError("transposed_conv3d: bias must have shape (" + std::to_string(cout) + ")");
  }
  const std::size_t Ho = H * factor, Wo = W * factor, Do = D * factor;
  Tensor<T> out = Tensor<T>::zeros({batch, cout, Ho, Wo, Do});

  const std::size_t xC = H * W * D, xH = W * D, xW = D;
  const std::size_t oC = Ho * Wo * Do, oH = Wo * Do, oW = Do;
  const std::size_t f3 = factor * factor * factor;
  const std::size_t work = cin * xC * f3;

  {
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
    const T* bd = bias.defined() ? bias.data().data() : nullptr;
    T* od = out.data().data();
    parallel_for(batch * cout, work, [&](std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b) {
        const std::size_t n = b / cout, co = b % cout;
        T* obase = od + n * cout * oC + co * oC;
        const T bv = bd ? bd[co] : T(0);
        for (std::size_t i = 0; i < oC; ++i) obase[i] = bv;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const T* xbase = xd + n * cin * xC + ci * xC;
          const T* wbase = wd + (ci * cout + co) * f3;
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t w = 0; w < W; ++w) {
              for (std::size_t d = 0; d < D; ++d) {
                const T xv = xbase[h * xH + w * xW + d];
                T* oblk = obase + (h * factor) * oH + (w * factor) * oW + d * factor;
                for (std::size_t a = 0; a < factor; ++a) {
                  for (std::size_t bb = 0; bb < factor; ++bb) {
                    T* orow = oblk + a * oH + bb * oW;
                    const T* wrow = wbase + (a * factor + bb) * factor;
                    for (std::size_t cc = 0; cc < factor; ++cc) orow[cc] += xv * wrow[cc];
                  }
                }
              }
            }
          }
        }
      }
    });
  }

  record_op<T>({x, weight, bias}, out, [x, weight, bias, out, batch, cin, cout, H, W, D, factor,
                                        xC, xH, xW, oC, oH, oW, f3, work]() {
    const T* god = out.impl()->grad.data();
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
    if (x.requires_grad()) {
      T* gx = grad_buffer(x).data();
      parallel_for(batch * cin, cout * xC * f3, [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
          const std::size_t n = b / cin, ci = b % cin;
          T* xbase = gx + n * cin * xC + ci * xC;
          for (std::size_t co = 0; co < cout; ++co) {
            const T* gbase = god + n * cout * oC + co * oC;
            const T* wbase = wd + (ci * cout + co) * f3;
            for (std::size_t h = 0; h < H; ++h) {
              for (std::size_t w = 0; w < W; ++w) {
                for (std::size_t d = 0; d < D; ++d) {
                  const T* gblk = gbase + (h * factor) * oH + (w * factor) * oW + d * factor;
                  T acc = T(0);
                  for (std::size_t a = 0; a < factor; ++a) {
                    for (std::size_t bb = 0; bb < factor; ++bb) {
                      const T* grow = gblk + a * oH + bb * oW;
                      const T* wrow = wbase + (a * factor + bb) * factor;
                      for (std::size_t cc = 0; cc < factor; ++cc) acc += grow[cc] * wrow[cc];
                    }
                  }
                  xbase[h * xH + w * xW + d] += acc;
                }
              }
            }
          }
        }
      });
    }
    if (weight.requires_grad()) {
      T* gw = grad_buffer(weight).data();
      parallel_for(cin, batch * cout * xC * f3, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t ci = c0; ci < c1; ++ci) {
          for (std::size_t n = 0; n < batch; ++n) {
            const T* xbase = xd + n * cin * xC + ci * xC;
            for (std::size_t co = 0; co < cout; ++co) {
              const T* gbase = god + n * cout * oC + co * oC;
              T* wbase = gw + (ci * cout + co) * f3;
              for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t w = 0; w < W; ++w) {
                  for (std::size_t d = 0; d < D; ++d) {
                    const T xv = xbase[h * xH + w * xW + d];
                    const T* gblk = gbase + (h * factor) * oH + (w * factor) * oW + d * factor;
                    for (std::size_t a = 0; a < factor; ++a) {
                      for (std::size_t bb = 0; bb < factor; ++bb) {
                        const T* grow = gblk + a * oH + bb * oW;
                        T* wrow = wbase + (a * factor + bb) * factor;
                        for (std::size_t cc = 0; cc < factor; ++cc) wrow[cc] += xv * grow[cc];
                      }
                    }
                  }
                }
              }
            }
          }
        }
      });
    }
    if (bias.defined() && bias.requires_grad()) {
      auto& gb = grad_buffer(bias);
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t co = 0; co < cout; ++co) {
          const T* gbase = god + n * cout * oC + co * oC;
          T acc = T(0);
          for (std::size_t i = 0; i < oC; ++i) acc += gbase[i];
          gb[co] += acc;
        }
      }
    }
  });
  return out;
}

#define TMA_INSTANTIATE(T)                                                                      \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                               const ConvSpec&);                                                \
  template Tensor<T> depthwise_conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                         std::size_t);                                          \
  template Tensor<T> transposed_conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                          std::size_t);

TMA_INSTANTIATE(float)
TMA_INSTANTIATE(double)
#undef TMA_INSTANTIATE

}  // namespace tma
