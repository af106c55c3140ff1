#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "tma/gradcheck.hpp"
#include "tma/loss.hpp"
#include "tma/metrics.hpp"

using namespace tma;

namespace {

Tensor64 bernoulli(const Shape& shape, double p, std::uint64_t seed) {
  Rng rng(seed);
  Tensor64 t = Tensor64::zeros(shape);
  for (auto& v : t.data()) v = rng.uniform() < p ? 1.0 : 0.0;
  return t;
}

Tensor64 rand_probs(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor64 t = Tensor64::zeros(shape);
  for (auto& v : t.data()) v = rng.uniform(0.05, 0.95);
  return t;
}

BinaryMask3D random_mask(std::array<std::size_t, 3> extents, double p, Rng& rng) {
  BinaryMask3D m = BinaryMask3D::zeros(extents);
  for (auto& v : m.voxels) v = rng.uniform() < p ? 1 : 0;
  return m;
}

// all-pairs reference: per direction, nearest distances then the
// linear-interpolated 95th percentile; symmetric value is the max
double hd95_reference(const BinaryMask3D& a, const BinaryMask3D& b,
                      std::array<double, 3> spacing) {
  auto points = [](const BinaryMask3D& m) {
    std::vector<std::array<double, 3>> out;
    std::size_t i = 0;
    for (std::size_t h = 0; h < m.extents[0]; ++h)
      for (std::size_t w = 0; w < m.extents[1]; ++w)
        for (std::size_t d = 0; d < m.extents[2]; ++d, ++i)
          if (m.voxels[i]) out.push_back({double(h), double(w), double(d)});
    return out;
  };
  const auto pa = points(a);
  const auto pb = points(b);
  REQUIRE(!pa.empty());
  REQUIRE(!pb.empty());
  auto directed_p95 = [&](const auto& from, const auto& to) {
    std::vector<double> nearest;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dh = (p[0] - q[0]) * spacing[0];
        const double dw = (p[1] - q[1]) * spacing[1];
        const double dd = (p[2] - q[2]) * spacing[2];
        best = std::min(best, std::sqrt(dh * dh + dw * dw + dd * dd));
      }
      nearest.push_back(best);
    }
    std::sort(nearest.begin(), nearest.end());
    const double rank = 0.95 * static_cast<double>(nearest.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    const std::size_t hi = std::min(lo + 1, nearest.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return nearest[lo] * (1.0 - frac) + nearest[hi] * frac;
  };
  return std::max(directed_p95(pa, pb), directed_p95(pb, pa));
}

}  // namespace

TEST_CASE("dice loss matches the closed form") {
  // uniform prediction p over a target with t ones out of n voxels:
  // dice_i = (2*p*t + eps) / (p^2*n + t + eps)
  const Shape shape{1, 1, 2, 2, 2};
  Tensor64 target = Tensor64::zeros(shape);
  target.data()[0] = 1.0;
  target.data()[3] = 1.0;
  target.data()[6] = 1.0;  // t = 3, n = 8

  Tensor64 pred = Tensor64::full(shape, 0.5);
  const double eps = 1e-5;
  const double dice = (2.0 * 0.5 * 3.0 + eps) / (0.25 * 8.0 + 3.0 + eps);
  CHECK(dice_loss(pred, target).item() == doctest::Approx(1.0 - dice).epsilon(1e-12));

  // perfect overlap -> loss ~ 0; disjoint -> loss ~ 1
  CHECK(dice_loss(target, target).item() == doctest::Approx(0.0).epsilon(1e-4));
  Tensor64 inverted = Tensor64::zeros(shape);
  for (std::size_t i = 0; i < 8; ++i) inverted.data()[i] = 1.0 - target.data()[i];
  CHECK(dice_loss(inverted, target).item() == doctest::Approx(1.0).epsilon(1e-4));

  // mean over classes: build a two-class target where class 0 overlaps
  // perfectly and class 1 is empty in the prediction
  Tensor64 t2 = Tensor64::zeros({1, 2, 2, 2, 2});
  Tensor64 p2 = Tensor64::zeros({1, 2, 2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) {
    t2.data()[i] = 1.0;
    p2.data()[i] = 1.0;  // class 0: perfect
    t2.data()[8 + i] = 1.0;
    p2.data()[8 + i] = 0.0;  // class 1: all missed
  }
  // dice_0 ~ 1, dice_1 = eps / (8 + eps) ~ 0 -> loss ~ 1 - 0.5 = 0.5
  CHECK(dice_loss(p2, t2).item() == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("dice loss validates inputs") {
  Tensor64 pred = rand_probs({1, 1, 2, 2, 2}, 3);
  Tensor64 target = bernoulli({1, 1, 2, 2, 2}, 0.5, 4);
  CHECK_NOTHROW((void)dice_loss(pred, target));

  Tensor64 nonbinary = target.clone();
  nonbinary.data()[2] = 0.5;
  CHECK_THROWS_AS((void)dice_loss(pred, nonbinary), ValueError);

  Tensor64 wrong_shape = bernoulli({1, 1, 2, 2, 4}, 0.5, 4);
  CHECK_THROWS_AS((void)dice_loss(pred, wrong_shape), ShapeError);
}

TEST_CASE("dice loss gradient matches finite differences") {
  GradCheckOptions opts;
  const auto reports = run_gradchecks("loss:dice", opts);
  REQUIRE(reports.size() == 1);
  INFO(reports[0].detail);
  CHECK(reports[0].passed);
  CHECK(reports[0].coords_checked >= 50);
}

TEST_CASE("downsample_mask samples block corners") {
  // in[.., y, x, z] with extent 4 and factor 2 -> out[y,x,z] = in[2y,2x,2z]
  Tensor64 mask = Tensor64::zeros({1, 1, 4, 4, 4});
  auto at = [&](std::size_t h, std::size_t w, std::size_t d) -> double& {
    return mask.data()[(h * 4 + w) * 4 + d];
  };
  at(0, 0, 0) = 1.0;
  at(2, 0, 0) = 1.0;
  at(1, 1, 1) = 1.0;  // interior of a block: must NOT survive
  at(2, 2, 2) = 1.0;

  Tensor64 half = downsample_mask(mask, 2);
  REQUIRE(half.shape() == Shape{1, 1, 2, 2, 2});
  const std::vector<double> expect{1, 0, 0, 0, 1, 0, 0, 1};  // (0,0,0),(1,0,0),(1,1,1)
  CHECK(half.data() == expect);

  // factor 1 is the identity
  CHECK(downsample_mask(mask, 1).data() == mask.data());

  // indivisible extents are rejected
  Tensor64 odd = Tensor64::zeros({1, 1, 3, 4, 4});
  CHECK_THROWS_AS((void)downsample_mask(odd, 2), ShapeError);
}

TEST_CASE("deep supervision equals the weighted sum of per-head losses") {
  const std::size_t e = 16;
  Tensor64 target = bernoulli({2, 3, e, e, e}, 0.4, 11);

  StageOutputs<double> outputs;
  outputs.p16 = rand_probs({2, 3, e / 16, e / 16, e / 16}, 12);
  outputs.p8 = rand_probs({2, 3, e / 8, e / 8, e / 8}, 13);
  outputs.p4 = rand_probs({2, 3, e / 4, e / 4, e / 4}, 14);
  outputs.p1 = rand_probs({2, 3, e, e, e}, 15);

  SupervisionWeights weights;
  const double total = deep_supervision_loss(outputs, target, weights).item();

  // independent recomputation from the parts
  const double l16 = dice_loss(outputs.p16, downsample_mask(target, 16)).item();
  const double l8 = dice_loss(outputs.p8, downsample_mask(target, 8)).item();
  const double l4 = dice_loss(outputs.p4, downsample_mask(target, 4)).item();
  const double l1 = dice_loss(outputs.p1, target).item();
  const double expected =
      weights.alpha[0] * l16 + weights.alpha[1] * l8 + weights.alpha[2] * l4 + weights.alpha[3] * l1;
  CHECK(std::abs(total - expected) <= 1e-6);

  // the total is linear in the weights
  SupervisionWeights doubled;
  for (auto& a : doubled.alpha) a *= 2.0;
  CHECK(deep_supervision_loss(outputs, target, doubled).item() ==
        doctest::Approx(2.0 * total).epsilon(1e-12));

  // all four stage losses equal -> total = (0.125 + 0.25 + 0.5 + 1) L = 1.875 L.
  // Dice depends only on the per-class sums, so a single 0.7 voxel per class
  // against an all-zero target yields the identical loss at every resolution.
  auto one_spot = [](std::size_t extent) {
    Tensor64 t = Tensor64::zeros({2, 3, extent, extent, extent});
    const std::size_t vol = extent * extent * extent;
    for (std::size_t c = 0; c < 3; ++c) t.data()[c * vol] = 0.7;
    return t;
  };
  StageOutputs<double> spot;
  spot.p16 = one_spot(e / 16);
  spot.p8 = one_spot(e / 8);
  spot.p4 = one_spot(e / 4);
  spot.p1 = one_spot(e);
  Tensor64 empty_target = Tensor64::zeros({2, 3, e, e, e});
  const double single = dice_loss(spot.p1, empty_target).item();
  CHECK(dice_loss(spot.p16, downsample_mask(empty_target, 16)).item() == single);  // bit-equal
  CHECK(deep_supervision_loss(spot, empty_target).item() ==
        doctest::Approx(1.875 * single).epsilon(1e-12));

  // deep supervision off: only the full-resolution head contributes
  StageOutputs<double> p1_only;
  p1_only.p1 = outputs.p1;
  CHECK(deep_supervision_loss(p1_only, target).item() ==
        doctest::Approx(weights.alpha[3] * l1).epsilon(1e-12));
}

TEST_CASE("binary mask conversion thresholds strictly") {
  Tensor32 probs = Tensor32::zeros({2, 2, 1, 2, 2});
  const std::vector<float> vals{0.2f, 0.5f, 0.7f, 0.99f};
  // batch 1, channel 1 holds the values of interest
  for (std::size_t i = 0; i < 4; ++i) probs.data()[12 + i] = vals[i];
  BinaryMask3D m = to_binary_mask(probs, 1, 1, 0.5f);
  CHECK(m.extents == std::array<std::size_t, 3>{1, 2, 2});
  CHECK(m.voxels == std::vector<std::uint8_t>{0, 0, 1, 1});  // strict >
  CHECK(m.count() == 2);

  // other (batch, channel) slots are untouched zeros
  CHECK(to_binary_mask(probs, 0, 0, 0.5f).count() == 0);

  CHECK_THROWS_AS((void)to_binary_mask(probs, 2, 0, 0.5f), ValueError);
  CHECK_THROWS_AS((void)to_binary_mask(probs, 0, 2, 0.5f), ValueError);
}

TEST_CASE("dsc set arithmetic is exact") {
  BinaryMask3D a = BinaryMask3D::zeros({2, 2, 2});
  BinaryMask3D b = BinaryMask3D::zeros({2, 2, 2});
  a.voxels = {1, 1, 1, 0, 0, 0, 0, 0};  // |A| = 3
  b.voxels = {1, 0, 1, 1, 1, 0, 0, 0};  // |B| = 4, intersection = 2
  CHECK(dsc(a, b) == 200.0 * 2.0 / 7.0);  // exact set arithmetic, same expression shape
  CHECK(dsc(b, a) == dsc(a, b));

  BinaryMask3D empty = BinaryMask3D::zeros({2, 2, 2});
  CHECK(dsc(empty, empty) == 100.0);
  CHECK(dsc(a, empty) == 0.0);
  CHECK(dsc(empty, a) == 0.0);
  CHECK(dsc(a, a) == 100.0);

  BinaryMask3D other = BinaryMask3D::zeros({2, 2, 4});
  CHECK_THROWS_AS((void)dsc(a, other), ShapeError);
}

TEST_CASE("hd95 on a known pair") {
  // two single voxels 3 apart along the last axis, spacing 2.0 there:
  // every pooled distance is 6.0, so any percentile is 6.0
  BinaryMask3D a = BinaryMask3D::zeros({1, 1, 8});
  BinaryMask3D b = BinaryMask3D::zeros({1, 1, 8});
  a.voxels[1] = 1;
  b.voxels[4] = 1;
  for (Hd95Method method :
       {Hd95Method::kAuto, Hd95Method::kBruteForce, Hd95Method::kDistanceTransform}) {
    const Hd95Result r = hd95(a, b, {1.0, 1.0, 2.0}, method);
    CHECK(r.mm == doctest::Approx(6.0).epsilon(1e-12));
    CHECK_FALSE(r.sentinel);
  }

  // identical masks -> 0
  CHECK(hd95(a, a, {1.0, 1.0, 1.0}).mm == 0.0);
}

TEST_CASE("hd95 empty conventions") {
  BinaryMask3D empty = BinaryMask3D::zeros({3, 4, 5});
  BinaryMask3D one = BinaryMask3D::zeros({3, 4, 5});
  one.voxels[0] = 1;

  Hd95Result both = hd95(empty, empty, {1.0, 1.0, 1.0});
  CHECK(both.mm == 0.0);
  CHECK_FALSE(both.sentinel);

  // one side empty: sentinel = physical diagonal of the volume
  const std::array<double, 3> spacing{1.0, 2.0, 0.5};
  const double diag = std::sqrt(std::pow(3 * 1.0, 2) + std::pow(4 * 2.0, 2) + std::pow(5 * 0.5, 2));
  for (const auto& [p, t] : {std::pair{empty, one}, std::pair{one, empty}}) {
    Hd95Result r = hd95(p, t, spacing);
    CHECK(r.sentinel);
    CHECK(r.mm == doctest::Approx(diag).epsilon(1e-12));
  }
}

TEST_CASE("hd95 methods agree with the all-pairs reference") {
  Rng rng(2026);
  int done = 0;
  while (done < 60) {
    const std::array<std::size_t, 3> extents{1 + rng.integer(8), 1 + rng.integer(8),
                                             1 + rng.integer(8)};
    const double density = rng.uniform(0.05, 0.6);
    BinaryMask3D a = random_mask(extents, density, rng);
    BinaryMask3D b = random_mask(extents, density, rng);
    if (a.count() == 0 || b.count() == 0) continue;
    const std::array<double, 3> spacing{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0),
                                        rng.uniform(0.5, 2.0)};
    const double ref = hd95_reference(a, b, spacing);
    const double brute = hd95(a, b, spacing, Hd95Method::kBruteForce).mm;
    const double dt = hd95(a, b, spacing, Hd95Method::kDistanceTransform).mm;
    CHECK(std::abs(brute - ref) <= 1e-6);
    CHECK(std::abs(dt - ref) <= 1e-6);
    CHECK(std::abs(dt - brute) <= 1e-6);
    ++done;
  }
  CHECK(done >= 50);
}

TEST_CASE("mask validation rejects malformed inputs") {
  BinaryMask3D m = BinaryMask3D::zeros({2, 2, 2});
  CHECK_NOTHROW(m.validate());
  m.voxels[3] = 2;
  CHECK_THROWS_AS(m.validate(), ValueError);
  m.voxels[3] = 1;
  m.voxels.pop_back();
  CHECK_THROWS_AS(m.validate(), ShapeError);
}

TEST_CASE("evaluate_pair assembles record and flags") {
  BinaryMask3D target = BinaryMask3D::zeros({4, 4, 4});
  target.voxels[0] = 1;
  BinaryMask3D pred = BinaryMask3D::zeros({4, 4, 4});

  MetricRecord r = evaluate_pair("case_007", "WT", pred, target, {1.0, 1.0, 1.0});
  CHECK(r.case_id == "case_007");
  CHECK(r.class_name == "WT");
  CHECK(r.dsc_percent == 0.0);
  CHECK(std::find(r.flags.begin(), r.flags.end(), "pred_empty") != r.flags.end());
  CHECK(std::find(r.flags.begin(), r.flags.end(), "hd95_sentinel") != r.flags.end());
  CHECK(r.hd95_mm == doctest::Approx(std::sqrt(48.0)));

  MetricRecord good = evaluate_pair("c", "ET", target, target, {1.0, 1.0, 1.0});
  CHECK(good.dsc_percent == 100.0);
  CHECK(good.hd95_mm == 0.0);
  CHECK(good.flags.empty());

  const std::string line = metric_record_json(r);
  CHECK(line.find("\"case_id\"") != std::string::npos);
  CHECK(line.find("\"class\"") != std::string::npos);
  CHECK(line.find("hd95_sentinel") != std::string::npos);
}
