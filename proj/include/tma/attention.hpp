// Multi-scale token attention layers.
//
// TMMM aggregates the token grid into a coarse and a fine scale space with
// per-branch depthwise convolutions (kernel == stride == r) followed by layer
// norm and GELU. TMSM runs shared-query two-branch attention over those
// spaces and finishes with a residual conv block; TMCM is the cross-attention
// variant taking queries from the encoder and keys/values from the decoder
// stream. Token counts follow l/r^3 exactly and are asserted at construction
// and on every forward.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>

#include "tma/layers.hpp"
#include "tma/tensor.hpp"

namespace tma {

struct ScalePair {
  std::size_t r1 = 1;  // coarse branch
  std::size_t r2 = 1;  // fine branch

  void validate() const;  // r1 >= r2 >= 1, both powers of two from {1,2,4,8}
};

struct HeadSplit {
  std::size_t n = 16;        // total heads, split evenly across the two branches
  std::size_t channels = 0;  // c; head_dim = c/n

  std::size_t per_branch() const { return n / 2; }
  std::size_t head_dim() const { return channels / n; }
  void validate() const;
};

enum class ValueEnhance { kDepthwise3, kIdentity };

// Installed for the duration of a scope; attention forwards report the
// row-sum deviation of every softmax they produce. Thread-local.
class AttentionObserver {
 public:
  // (layer tag, branch index 1/2, rows seen, max |row_sum - 1|)
  using Fn = std::function<void(const std::string&, std::size_t, std::size_t, double)>;

  explicit AttentionObserver(Fn fn);
  ~AttentionObserver();
  AttentionObserver(const AttentionObserver&) = delete;
  AttentionObserver& operator=(const AttentionObserver&) = delete;

  static bool active();
  static void notify(const std::string& tag, std::size_t branch, std::size_t rows,
                     double max_dev);

 private:
  AttentionObserver* previous_;
  Fn fn_;
};

// QK^T multiply-accumulate FLOPs (x2) for one branch at aggregation factor r:
// (n/2) heads x l queries x l/r^3 keys x c/n depth. Requires r^3 | l.
std::size_t qkt_flops(std::size_t l, std::size_t r, std::size_t n, std::size_t channels);

// One aggregation branch: depthwise conv (k = s = r) -> flatten -> LN -> GELU.
template <typename T>
struct TmmmBranch {
  std::size_t r = 1;
  ConvLayer<T> dw;
  LayerNormLayer<T> ln;

  static TmmmBranch create(std::size_t channels, std::size_t r, Rng& rng);
  // (N, C, h, w, d) -> tokens (N, l/r^3, C)
  Tensor<T> forward(const Tensor<T>& x) const;
  void params(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct Tmmm {
  TmmmBranch<T> coarse, fine;

  static Tmmm create(std::size_t channels, ScalePair scales, Rng& rng);
  void params(const std::string& prefix, NamedTensors<T>& out) const;
};

// Shared internals of TMSM/TMCM: W^Q + TMMM + per-branch W^KV + value
// enhancement + two-branch attention + post conv block.
template <typename T>
struct MultiScaleAttention {
  std::string tag;
  std::size_t channels = 0;
  std::array<std::size_t, 3> extents{};  // expected (h, w, d)
  ScalePair scales;
  HeadSplit split;
  ValueEnhance enhance = ValueEnhance::kDepthwise3;

  LinearLayer<T> wq;
  Tmmm<T> tmmm;
  LinearLayer<T> wkv1, wkv2;
  ConvLayer<T> enhance1, enhance2;  // depthwise 3^3, when enhance == kDepthwise3
  ConvBlock<T> post3;               // 3^3 conv block
  ConvLayer<T> post1;               // 1^3 conv, zero-initialized

  static MultiScaleAttention create(const std::string& tag, std::size_t channels,
                                    std::array<std::size_t, 3> extents, ScalePair scales,
                                    std::size_t heads, ValueEnhance enhance, Rng& rng);

  // query_source supplies Q; kv_source supplies K/V, the residual stream, and
  // the post block input. For self-attention both are the same tensor.
  Tensor<T> forward(const Tensor<T>& query_source, const Tensor<T>& kv_source, NormMode mode);

  void params(const std::string& prefix, NamedTensors<T>& out) const;
  void buffers(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct Tmsm {
  MultiScaleAttention<T> attn;

  static Tmsm create(const std::string& tag, std::size_t channels,
                     std::array<std::size_t, 3> extents, ScalePair scales, std::size_t heads,
                     ValueEnhance enhance, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, NormMode mode) { return attn.forward(x, x, mode); }
  void params(const std::string& prefix, NamedTensors<T>& out) const {
    attn.params(prefix, out);
  }
  void buffers(const std::string& prefix, NamedTensors<T>& out) const {
    attn.buffers(prefix, out);
  }
};

template <typename T>
struct Tmcm {
  MultiScaleAttention<T> attn;

  static Tmcm create(const std::string& tag, std::size_t channels,
                     std::array<std::size_t, 3> extents, ScalePair scales, std::size_t heads,
                     ValueEnhance enhance, Rng& rng);
  // query_source: encoder feature; kv_source: decoder stream (residual target)
  Tensor<T> forward(const Tensor<T>& query_source, const Tensor<T>& kv_source, NormMode mode) {
    return attn.forward(query_source, kv_source, mode);
  }
  void params(const std::string& prefix, NamedTensors<T>& out) const {
    attn.params(prefix, out);
  }
  void buffers(const std::string& prefix, NamedTensors<T>& out) const {
    attn.buffers(prefix, out);
  }
};

// (N, C, h, w, d) <-> (N, l, C) token views
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x);
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, std::size_t channels,
                      const std::array<std::size_t, 3>& extents);

}  // namespace tma
