#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tma/attention.hpp"
#include "tma/gradcheck.hpp"

using namespace tma;

namespace {

Tensor32 rand_input(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor32 t = Tensor32::zeros(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

// the four (stage grid, channels, scales) rows of the desk-scale schedule
struct StageSpec {
  std::array<std::size_t, 3> extents;
  std::size_t channels;
  ScalePair scales;
};

const StageSpec kStages[4] = {
    {{8, 8, 8}, 8, {8, 4}},
    {{4, 4, 4}, 16, {4, 2}},
    {{2, 2, 2}, 32, {2, 1}},
    {{1, 1, 1}, 64, {1, 1}},
};

}  // namespace

TEST_CASE("scale pair and head split validation") {
  CHECK_NOTHROW((ScalePair{8, 4}.validate()));
  CHECK_NOTHROW((ScalePair{1, 1}.validate()));
  CHECK_THROWS_AS((ScalePair{4, 8}.validate()), ConfigError);   // coarse < fine
  CHECK_THROWS_AS((ScalePair{3, 1}.validate()), ConfigError);   // not a power of two
  CHECK_THROWS_AS((ScalePair{16, 1}.validate()), ConfigError);  // out of range
  CHECK_THROWS_AS((ScalePair{2, 0}.validate()), ConfigError);

  CHECK_NOTHROW((HeadSplit{4, 16}.validate()));
  CHECK_THROWS_AS((HeadSplit{3, 9}.validate()), ConfigError);  // odd head count
  CHECK_THROWS_AS((HeadSplit{4, 18}.validate()), ConfigError); // channels % n != 0
  CHECK_THROWS_AS((HeadSplit{0, 8}.validate()), ConfigError);
}

TEST_CASE("token-count law is asserted at construction") {
  Rng rng(1);
  // 4^3 grid has l = 64; r1 = 8 would need 512 | 64
  CHECK_THROWS_AS((void)Tmsm<float>::create("t", 8, {4, 4, 4}, ScalePair{8, 4}, 4,
                                            ValueEnhance::kDepthwise3, rng),
                  ConfigError);
  // extent not divisible by r1
  CHECK_THROWS_AS((void)Tmsm<float>::create("t", 8, {6, 6, 6}, ScalePair{4, 2}, 4,
                                            ValueEnhance::kDepthwise3, rng),
                  ConfigError);
  CHECK_NOTHROW((void)Tmsm<float>::create("t", 8, {8, 8, 8}, ScalePair{8, 4}, 4,
                                          ValueEnhance::kDepthwise3, rng));
}

TEST_CASE("token-count law is asserted in forward") {
  Rng rng(2);
  auto layer =
      Tmsm<float>::create("t", 8, {4, 4, 4}, ScalePair{2, 1}, 4, ValueEnhance::kDepthwise3, rng);
  // feeding a grid the layer was not built for violates the token law
  Tensor32 wrong = rand_input({1, 8, 2, 2, 2}, 3);
  CHECK_THROWS_AS((void)layer.forward(wrong, NormMode::kEval), ShapeError);
}

TEST_CASE("qkt_flops closed form and the 1/r^3 law") {
  // 2 * (n/2) * l * (l/r^3) * (c/n)
  CHECK(qkt_flops(512, 8, 4, 16) == 2ull * 2 * 512 * 1 * 4);
  CHECK(qkt_flops(64, 1, 4, 8) == 2ull * 2 * 64 * 64 * 2);
  for (std::size_t r : {1, 2, 4, 8}) {
    const std::size_t l = 32 * 32 * 32;
    CHECK(qkt_flops(l, r, 16, 64) == qkt_flops(l, 1, 16, 64) / (r * r * r));
  }
  CHECK_THROWS_AS((void)qkt_flops(100, 8, 4, 16), ConfigError);  // 512 does not divide 100
}

TEST_CASE("attention rows sum to one at every stage, self and cross") {
  for (std::size_t s = 0; s < 4; ++s) {
    const StageSpec& spec = kStages[s];
    Rng rng(100 + s);
    auto tmsm = Tmsm<float>::create("en", spec.channels, spec.extents, spec.scales, 4,
                                    ValueEnhance::kDepthwise3, rng);
    auto tmcm = Tmcm<float>::create("de", spec.channels, spec.extents, spec.scales, 4,
                                    ValueEnhance::kDepthwise3, rng);
    Tensor32 x = rand_input({2, spec.channels, spec.extents[0], spec.extents[1],
                             spec.extents[2]},
                            200 + s);
    Tensor32 y = rand_input(x.shape(), 300 + s);

    double worst = -1.0;
    std::size_t rows_seen = 0, calls = 0;
    {
      AttentionObserver obs([&](const std::string&, std::size_t, std::size_t rows,
                                double dev) {
        worst = std::max(worst, dev);
        rows_seen += rows;
        ++calls;
      });
      (void)tmsm.forward(x, NormMode::kEval);
      (void)tmcm.forward(x, y, NormMode::kEval);
    }
    CHECK(calls == 4);  // two branches per layer
    CHECK(rows_seen > 0);
    CHECK(worst >= 0.0);
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("TMSM and TMCM preserve shape for every stage and enhance mode") {
  for (std::size_t s = 0; s < 4; ++s) {
    const StageSpec& spec = kStages[s];
    for (ValueEnhance enhance : {ValueEnhance::kDepthwise3, ValueEnhance::kIdentity}) {
      Rng rng(10 + s);
      auto tmsm = Tmsm<float>::create("en", spec.channels, spec.extents, spec.scales, 4,
                                      enhance, rng);
      auto tmcm = Tmcm<float>::create("de", spec.channels, spec.extents, spec.scales, 4,
                                      enhance, rng);
      Tensor32 x = rand_input({1, spec.channels, spec.extents[0], spec.extents[1],
                               spec.extents[2]},
                              20 + s);
      Tensor32 q = rand_input(x.shape(), 30 + s);
      CHECK(tmsm.forward(x, NormMode::kEval).shape() == x.shape());
      CHECK(tmcm.forward(q, x, NormMode::kEval).shape() == x.shape());
    }
  }
}

TEST_CASE("cross attention rejects mismatched sources") {
  Rng rng(4);
  auto layer =
      Tmcm<float>::create("de", 8, {4, 4, 4}, ScalePair{2, 1}, 4, ValueEnhance::kIdentity, rng);
  Tensor32 q = rand_input({1, 8, 4, 4, 4}, 5);
  Tensor32 kv = rand_input({1, 8, 2, 2, 2}, 6);
  CHECK_THROWS_AS((void)layer.forward(q, kv, NormMode::kEval), ShapeError);
}

TEST_CASE("post block starts as identity-plus-zero") {
  Rng rng(7);
  auto layer =
      Tmsm<float>::create("t", 8, {4, 4, 4}, ScalePair{2, 1}, 4, ValueEnhance::kIdentity, rng);
  for (float v : layer.attn.post1.weight.data()) CHECK(v == 0.0f);

  Tensor32 x = rand_input({1, 8, 4, 4, 4}, 8);
  Tensor32 y1 = layer.forward(x, NormMode::kEval);

  // with post1 zeroed, the 3^3 post conv cannot influence the output ...
  Rng scramble(9);
  for (auto& v : layer.attn.post3.conv.weight.data()) {
    v = static_cast<float>(scramble.uniform(-1.0, 1.0));
  }
  Tensor32 y2 = layer.forward(x, NormMode::kEval);
  CHECK(y1.data() == y2.data());

  // ... until post1 itself is perturbed
  layer.attn.post1.weight.data()[0] = 0.5f;
  Tensor32 y3 = layer.forward(x, NormMode::kEval);
  CHECK(y1.data() != y3.data());
}

TEST_CASE("full-token attention is permutation equivariant") {
  // at scales (1,1) with identity enhance and the post path zeroed, every
  // piece of the layer is per-token or a global softmax mix, so permuting
  // the voxels must permute the output identically
  const std::size_t c = 8, e = 3, l = e * e * e;
  Rng rng(11);
  auto layer = Tmsm<float>::create("t", c, {e, e, e}, ScalePair{1, 1}, 4,
                                   ValueEnhance::kIdentity, rng);
  Tensor32 x = rand_input({1, c, e, e, e}, 12);

  Rng perm_rng(13);
  std::vector<std::size_t> perm(l);
  for (std::size_t i = 0; i < l; ++i) perm[i] = i;
  for (std::size_t i = l; i > 1; --i) std::swap(perm[i - 1], perm[perm_rng.integer(i)]);

  Tensor32 xp = Tensor32::zeros(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < l; ++i) {
      xp.data()[ch * l + perm[i]] = x.data()[ch * l + i];
    }
  }

  Tensor32 y = layer.forward(x, NormMode::kEval);
  Tensor32 yp = layer.forward(xp, NormMode::kEval);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < l; ++i) {
      CHECK(yp.data()[ch * l + perm[i]] ==
            doctest::Approx(y.data()[ch * l + i]).epsilon(1e-4));
    }
  }
}

TEST_CASE("value enhancement changes the output when enabled") {
  Rng rng_a(14), rng_b(14);
  auto with = Tmsm<float>::create("t", 8, {4, 4, 4}, ScalePair{2, 1}, 4,
                                  ValueEnhance::kDepthwise3, rng_a);
  auto without = Tmsm<float>::create("t", 8, {4, 4, 4}, ScalePair{2, 1}, 4,
                                     ValueEnhance::kIdentity, rng_b);
  Tensor32 x = rand_input({1, 8, 4, 4, 4}, 15);
  Tensor32 ya = with.forward(x, NormMode::kEval);
  Tensor32 yb = without.forward(x, NormMode::kEval);
  CHECK(ya.data() != yb.data());
}

TEST_CASE("gradients reach both cross-attention sources") {
  Rng rng(16);
  auto layer = Tmcm<double>::create("de", 8, {2, 2, 2}, ScalePair{2, 1}, 4,
                                    ValueEnhance::kDepthwise3, rng);
  Tensor64 q = Tensor64::zeros({1, 8, 2, 2, 2});
  Tensor64 kv = Tensor64::zeros({1, 8, 2, 2, 2});
  Rng fill(17);
  for (auto& v : q.data()) v = fill.uniform(-1.0, 1.0);
  for (auto& v : kv.data()) v = fill.uniform(-1.0, 1.0);
  q.set_requires_grad(true);
  kv.set_requires_grad(true);

  Tape<double> tape;
  Tensor64 loss;
  {
    Tape<double>::Scope scope(tape);
    loss = sum_all(mul(layer.forward(q, kv, NormMode::kTrain),
                       layer.forward(q, kv, NormMode::kTrain)));
  }
  tape.backward(loss);
  REQUIRE(q.has_grad());
  REQUIRE(kv.has_grad());
  auto nonzero = [](const std::vector<double>& g) {
    for (double v : g) {
      if (v != 0.0) return true;
    }
    return false;
  };
  CHECK(nonzero(q.grad()));
  CHECK(nonzero(kv.grad()));
}

TEST_CASE("attention module gradcheck units pass") {
  GradCheckOptions opts;
  const auto reports = run_gradchecks("attention:", opts);
  REQUIRE(reports.size() == 2);
  for (const auto& r : reports) {
    INFO(r.unit, ": ", r.detail);
    CHECK(r.passed);
    CHECK(r.coords_checked >= 50);
  }
}

TEST_CASE("parameter naming is stable and complete") {
  Rng rng(18);
  auto layer = Tmsm<float>::create("en1.tmsm0", 8, {4, 4, 4}, ScalePair{2, 1}, 4,
                                   ValueEnhance::kDepthwise3, rng);
  NamedTensors<float> params;
  layer.params("en1.tmsm0", params);
  CHECK(params.size() > 0);
  bool saw_wq = false;
  for (const auto& [name, t] : params) {
    CHECK(name.rfind("en1.tmsm0.", 0) == 0);
    CHECK(t.defined());
    if (name.find("wq") != std::string::npos) saw_wq = true;
  }
  CHECK(saw_wq);

  NamedTensors<float> buffers;
  layer.buffers("en1.tmsm0", buffers);
  CHECK(buffers.size() == 2);  // post-block batch norm running stats
}
