#include "tma/attention.hpp"

#include <cmath>

namespace tma {

void ScalePair::validate() const {
  auto ok = [](std::size_t r) { return r == 1 || r == 2 || r == 4 || r == 8; };
  if (!ok(r1) || !ok(r2) || r1 < r2) {
    throw ConfigError("scale pair (" + std::to_string(r1) + "," + std::to_string(r2) +
                      ") must satisfy r1 >= r2 with both in {1,2,4,8}");
  }
}

void HeadSplit::validate() const {
  if (n < 2 || n % 2 != 0) {
    throw ConfigError("head count " + std::to_string(n) + " must be even and >= 2");
  }
  if (channels == 0 || channels % n != 0) {
    throw ConfigError("channels " + std::to_string(channels) + " must be divisible by head count " +
                      std::to_string(n));
  }
}

std::size_t qkt_flops(std::size_t l, std::size_t r, std::size_t n, std::size_t channels) {
  const std::size_t r3 = r * r * r;
  if (l == 0 || r3 == 0 || l % r3 != 0) {
    throw ConfigError("qkt_flops: token count " + std::to_string(l) + " not divisible by r^3 = " +
                      std::to_string(r3));
  }
  return 2 * (n / 2) * l * (l / r3) * (channels / n);
}

namespace {

thread_local AttentionObserver* g_observer = nullptr;

}  // namespace

AttentionObserver::AttentionObserver(Fn fn) : previous_(g_observer), fn_(std::move(fn)) {
  g_observer = this;
}

AttentionObserver::~AttentionObserver() { g_observer = previous_; }

bool AttentionObserver::active() { return g_observer != nullptr; }

void AttentionObserver::notify(const std::string& tag, std::size_t branch, std::size_t rows,
                               double max_dev) {
  if (g_observer) g_observer->fn_(tag, branch, rows, max_dev);
}

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  if (x.rank() != 5) throw ShapeError("to_tokens: expected (N, C, h, w, d), got " +
                                      shape_str(x.shape()));
  const std::size_t n = x.extent(0), c = x.extent(1);
  const std::size_t l = x.extent(2) * x.extent(3) * x.extent(4);
  return permute(reshape(x, {n, c, l}), {0, 2, 1});
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, std::size_t channels,
                      const std::array<std::size_t, 3>& extents) {
  if (tokens.rank() != 3 || tokens.extent(2) != channels ||
      tokens.extent(1) != extents[0] * extents[1] * extents[2]) {
    throw ShapeError("from_tokens: tokens " + shape_str(tokens.shape()) + " do not match grid (" +
                     std::to_string(channels) + ", " + std::to_string(extents[0]) + "," +
                     std::to_string(extents[1]) + "," + std::to_string(extents[2]) + ")");
  }
  return reshape(permute(tokens, {0, 2, 1}),
                 {tokens.extent(0), channels, extents[0], extents[1], extents[2]});
}

template <typename T>
TmmmBranch<T> TmmmBranch<T>::create(std::size_t channels, std::size_t r, Rng& rng) {
  TmmmBranch branch;
  branch.r = r;
  branch.dw = ConvLayer<T>::create(ConvSpec{channels, channels, {r, r, r}, {r, r, r}, {0, 0, 0},
                                            channels},
                                   rng);
  branch.ln = LayerNormLayer<T>::create(channels);
  return branch;
}

template <typename T>
Tensor<T> TmmmBranch<T>::forward(const Tensor<T>& x) const {
  const std::size_t l = x.extent(2) * x.extent(3) * x.extent(4);
  const std::size_t r3 = r * r * r;
  if (l % r3 != 0) {
    throw ShapeError("tmmm: token count " + std::to_string(l) + " is not divisible by r^3 = " +
                     std::to_string(r3));
  }
  Tensor<T> aggregated = depthwise_conv3d(x, dw.weight, dw.bias, r);
  Tensor<T> tokens = to_tokens(aggregated);
  if (tokens.extent(1) != l / r3) {
    throw ShapeError("tmmm: produced " + std::to_string(tokens.extent(1)) +
                     " tokens, token-count law requires " + std::to_string(l / r3));
  }
  return gelu(ln.forward(tokens));
}

template <typename T>
void TmmmBranch<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  dw.params(join_name(prefix, "dw"), out);
  ln.params(join_name(prefix, "ln"), out);
}

template <typename T>
Tmmm<T> Tmmm<T>::create(std::size_t channels, ScalePair scales, Rng& rng) {
  scales.validate();
  Tmmm t;
  t.coarse = TmmmBranch<T>::create(channels, scales.r1, rng);
  t.fine = TmmmBranch<T>::create(channels, scales.r2, rng);
  return t;
}

template <typename T>
void Tmmm<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  coarse.params(join_name(prefix, "coarse"), out);
  fine.params(join_name(prefix, "fine"), out);
}

template <typename T>
MultiScaleAttention<T> MultiScaleAttention<T>::create(const std::string& tag,
                                                      std::size_t channels,
                                                      std::array<std::size_t, 3> extents,
                                                      ScalePair scales, std::size_t heads,
                                                      ValueEnhance enhance, Rng& rng) {
  scales.validate();
  MultiScaleAttention m;
  m.tag = tag;
  m.channels = channels;
  m.extents = extents;
  m.scales = scales;
  m.split = HeadSplit{heads, channels};
  m.split.validate();
  m.enhance = enhance;
  for (std::size_t a = 0; a < 3; ++a) {
    if (extents[a] == 0 || extents[a] % scales.r1 != 0 || extents[a] % scales.r2 != 0) {
      throw ConfigError("attention layer '" + tag + "': extent " + std::to_string(extents[a]) +
                        " not divisible by scales (" + std::to_string(scales.r1) + "," +
                        std::to_string(scales.r2) + ")");
    }
  }
  // token-count law at construction: l/r^3 must be exact for both branches
  const std::size_t l = extents[0] * extents[1] * extents[2];
  for (std::size_t r : {scales.r1, scales.r2}) {
    if (l % (r * r * r) != 0) {
      throw ConfigError("attention layer '" + tag + "': token count " + std::to_string(l) +
                        " violates the l/r^3 law for r = " + std::to_string(r));
    }
  }
  m.wq = LinearLayer<T>::create(channels, channels, rng);
  m.tmmm = Tmmm<T>::create(channels, scales, rng);
  m.wkv1 = LinearLayer<T>::create(channels, channels, rng);
  m.wkv2 = LinearLayer<T>::create(channels, channels, rng);
  if (enhance == ValueEnhance::kDepthwise3) {
    const std::size_t half = channels / 2;
    m.enhance1 = ConvLayer<T>::create(ConvSpec{half, half, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, half},
                                      rng);
    m.enhance2 = ConvLayer<T>::create(ConvSpec{half, half, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, half},
                                      rng);
  }
  m.post3 = ConvBlock<T>::create(channels, channels, 3, 1, 1, rng);
  m.post1 = ConvLayer<T>::create(ConvSpec::cubic(channels, channels, 1, 1, 0), rng,
                                 /*with_bias=*/true, /*zero_init=*/true);
  return m;
}

template <typename T>
Tensor<T> MultiScaleAttention<T>::forward(const Tensor<T>& query_source,
                                          const Tensor<T>& kv_source, NormMode mode) {
  for (const Tensor<T>* src : {&query_source, &kv_source}) {
    if (src->rank() != 5) {
      throw ShapeError("attention layer '" + tag + "': input must be (N, C, h, w, d), got " +
                       shape_str(src->shape()));
    }
  }
  if (query_source.shape() != kv_source.shape()) {
    throw ShapeError("attention layer '" + tag + "': query source " +
                     shape_str(query_source.shape()) + " and kv source " +
                     shape_str(kv_source.shape()) + " must match");
  }
  if (kv_source.extent(1) != channels || kv_source.extent(2) != extents[0] ||
      kv_source.extent(3) != extents[1] || kv_source.extent(4) != extents[2]) {
    throw ShapeError("attention layer '" + tag + "': input " + shape_str(kv_source.shape()) +
                     " does not match configured grid");
  }
  const std::size_t batch = kv_source.extent(0);
  const std::size_t l = extents[0] * extents[1] * extents[2];
  const std::size_t half_heads = split.per_branch();
  const std::size_t hd = split.head_dim();

  Tensor<T> q_tokens = wq.forward(to_tokens(query_source));
  Tensor<T> q_heads = permute(reshape(q_tokens, {batch, l, split.n, hd}), {0, 2, 1, 3});

  auto run_branch = [&](const TmmmBranch<T>& branch, const LinearLayer<T>& wkv,
                        const ConvLayer<T>& enh, std::size_t head_start,
                        std::size_t branch_idx) {
    const std::size_t r = branch.r;
    const std::size_t lk = l / (r * r * r);
    Tensor<T> tokens = branch.forward(kv_source);
    if (tokens.extent(1) != lk) {
      throw ShapeError("attention layer '" + tag + "': branch " + std::to_string(branch_idx) +
                       " produced " + std::to_string(tokens.extent(1)) + " tokens, expected " +
                       std::to_string(lk));
    }
    Tensor<T> kv = wkv.forward(tokens);
    Tensor<T> key = narrow(kv, 2, 0, channels / 2);
    Tensor<T> value = narrow(kv, 2, channels / 2, channels / 2);
    if (enhance == ValueEnhance::kDepthwise3) {
      const std::array<std::size_t, 3> grid{extents[0] / r, extents[1] / r, extents[2] / r};
      Tensor<T> v_grid = from_tokens(value, channels / 2, grid);
      value = to_tokens(add(enh.forward(v_grid), v_grid));
    }
    Tensor<T> k_heads = permute(reshape(key, {batch, lk, half_heads, hd}), {0, 2, 1, 3});
    Tensor<T> v_heads = permute(reshape(value, {batch, lk, half_heads, hd}), {0, 2, 1, 3});
    Tensor<T> q = narrow(q_heads, 1, head_start, half_heads);
    Tensor<T> logits =
        bmm(scale(q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)))),
            permute(k_heads, {0, 1, 3, 2}));
    Tensor<T> attn = softmax(logits, 3);
    if (AttentionObserver::active()) {
      const auto& ad = attn.data();
      const std::size_t rows = batch * half_heads * l;
      double max_dev = 0.0;
      for (std::size_t row = 0; row < rows; ++row) {
        double s = 0.0;
        for (std::size_t j = 0; j < lk; ++j) s += static_cast<double>(ad[row * lk + j]);
        max_dev = std::max(max_dev, std::abs(s - 1.0));
      }
      AttentionObserver::notify(tag, branch_idx, rows, max_dev);
    }
    return bmm(attn, v_heads);  // (N, n/2, l, hd)
  };

  Tensor<T> x1 = run_branch(tmmm.coarse, wkv1, enhance1, 0, 1);
  Tensor<T> x2 = run_branch(tmmm.fine, wkv2, enhance2, half_heads, 2);
  Tensor<T> merged = concat<T>({x1, x2}, 1);  // restore original head order
  Tensor<T> out_tokens = reshape(permute(merged, {0, 2, 1, 3}), {batch, l, channels});
  Tensor<T> y = add(kv_source, from_tokens(out_tokens, channels, extents));
  return add(y, post1.forward(post3.forward(y, mode)));
}

template <typename T>
void MultiScaleAttention<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  wq.params(join_name(prefix, "wq"), out);
  tmmm.params(join_name(prefix, "tmmm"), out);
  wkv1.params(join_name(prefix, "wkv1"), out);
  wkv2.params(join_name(prefix, "wkv2"), out);
  if (enhance == ValueEnhance::kDepthwise3) {
    enhance1.params(join_name(prefix, "enh1"), out);
    enhance2.params(join_name(prefix, "enh2"), out);
  }
  post3.params(join_name(prefix, "post3"), out);
  post1.params(join_name(prefix, "post1"), out);
}

template <typename T>
void MultiScaleAttention<T>::buffers(const std::string& prefix, NamedTensors<T>& out) const {
  post3.buffers(join_name(prefix, "post3"), out);
}

template <typename T>
Tmsm<T> Tmsm<T>::create(const std::string& tag, std::size_t channels,
                        std::array<std::size_t, 3> extents, ScalePair scales, std::size_t heads,
                        ValueEnhance enhance, Rng& rng) {
  Tmsm t;
  t.attn = MultiScaleAttention<T>::create(tag, channels, extents, scales, heads, enhance, rng);
  return t;
}

template <typename T>
Tmcm<T> Tmcm<T>::create(const std::string& tag, std::size_t channels,
                        std::array<std::size_t, 3> extents, ScalePair scales, std::size_t heads,
                        ValueEnhance enhance, Rng& rng) {
  Tmcm t;
  t.attn = MultiScaleAttention<T>::create(tag, channels, extents, scales, heads, enhance, rng);
  return t;
}

#define TMA_INSTANTIATE(T)                                                       \
  template Tensor<T> to_tokens<T>(const Tensor<T>&);                             \
  template Tensor<T> from_tokens<T>(const Tensor<T>&, std::size_t,               \
                                    const std::array<std::size_t, 3>&);          \
  template struct TmmmBranch<T>;                                                 \
  template struct Tmmm<T>;                                                       \
  template struct MultiScaleAttention<T>;                                        \
  template struct Tmsm<T>;                                                       \
  template struct Tmcm<T>;

TMA_INSTANTIATE(float)
TMA_INSTANTIATE(double)
#undef TMA_INSTANTIATE

}  // namespace tma
