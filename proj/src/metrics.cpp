#include "tma/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

namespace tma {

BinaryMask3D BinaryMask3D::zeros(std::array<std::size_t, 3> extents) {
  BinaryMask3D m;
  m.extents = extents;
  m.voxels.assign(extents[0] * extents[1] * extents[2], 0);
  return m;
}

std::size_t BinaryMask3D::count() const {
  std::size_t n = 0;
  for (std::uint8_t v : voxels) n += v != 0;
  return n;
}

void BinaryMask3D::validate() const {
  if (voxels.size() != extents[0] * extents[1] * extents[2]) {
    throw ShapeError("binary mask has " + std::to_string(voxels.size()) + " voxels, extents (" +
                     std::to_string(extents[0]) + "," + std::to_string(extents[1]) + "," +
                     std::to_string(extents[2]) + ") require " +
                     std::to_string(extents[0] * extents[1] * extents[2]));
  }
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    if (voxels[i] > 1) {
      throw ValueError("binary mask has value " + std::to_string(int(voxels[i])) +
                       " at flat index " + std::to_string(i));
    }
  }
}

template <typename T>
BinaryMask3D to_binary_mask(const Tensor<T>& t, std::size_t batch, std::size_t channel,
                            T threshold) {
  if (t.rank() != 5) {
    throw ShapeError("to_binary_mask: expected (N, C, h, w, d), got " + shape_str(t.shape()));
  }
  if (batch >= t.extent(0) || channel >= t.extent(1)) {
    throw ValueError("to_binary_mask: batch " + std::to_string(batch) + ", channel " +
                     std::to_string(channel) + " out of range for " + shape_str(t.shape()));
  }
  BinaryMask3D m = BinaryMask3D::zeros({t.extent(2), t.extent(3), t.extent(4)});
  const std::size_t spatial = m.voxels.size();
  const T* src = t.data().data() + (batch * t.extent(1) + channel) * spatial;
  for (std::size_t i = 0; i < spatial; ++i) m.voxels[i] = src[i] > threshold ? 1 : 0;
  return m;
}

double dsc(const BinaryMask3D& pred, const BinaryMask3D& target) {
  pred.validate();
  target.validate();
  if (pred.extents != target.extents) throw ShapeError("dsc: mask extents differ");
  std::size_t a = 0, b = 0, inter = 0;
  for (std::size_t i = 0; i < pred.voxels.size(); ++i) {
    a += pred.voxels[i];
    b += target.voxels[i];
    inter += pred.voxels[i] & target.voxels[i];
  }
  if (a + b == 0) return 100.0;
  return 200.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<std::array<std::size_t, 3>> occupied(const BinaryMask3D& m) {
  std::vector<std::array<std::size_t, 3>> out;
  std::size_t i = 0;
  for (std::size_t y = 0; y < m.extents[0]; ++y) {
    for (std::size_t x = 0; x < m.extents[1]; ++x) {
      for (std::size_t z = 0; z < m.extents[2]; ++z, ++i) {
        if (m.voxels[i]) out.push_back({y, x, z});
      }
    }
  }
  return out;
}

double percentile95(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const double rank = 0.95 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (rank - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<double> directed_brute(const std::vector<std::array<std::size_t, 3>>& from,
                                   const std::vector<std::array<std::size_t, 3>>& to,
                                   const std::array<double, 3>& spacing) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& a : from) {
    double best = kInf;
    for (const auto& b : to) {
      double d2 = 0.0;
      for (std::size_t axis = 0; axis < 3; ++axis) {
        const double d = (static_cast<double>(a[axis]) - static_cast<double>(b[axis])) *
                         spacing[axis];
        d2 += d * d;
      }
      best = std::min(best, d2);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

// 1D squared-distance transform over parabolas rooted at x = i*s
// (lower-envelope construction, arbitrary sample spacing s). Samples at
// infinity contribute no parabola; an all-infinite line stays infinite.
void edt_1d(std::vector<double>& f, double s) {
  const std::size_t n = f.size();
  std::vector<std::size_t> v;  // parabola roots on the hull
  std::vector<double> z;       // z[k]: left boundary of v[k]'s interval
  v.reserve(n);
  z.reserve(n);
  auto xpos = [s](std::size_t i) { return static_cast<double>(i) * s; };
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    double sx = -kInf;
    while (!v.empty()) {
      const std::size_t p = v.back();
      sx = ((f[q] + xpos(q) * xpos(q)) - (f[p] + xpos(p) * xpos(p))) /
           (2.0 * xpos(q) - 2.0 * xpos(p));
      if (sx <= z.back()) {
        v.pop_back();
        z.pop_back();
      } else {
        break;
      }
    }
    v.push_back(q);
    z.push_back(v.size() == 1 ? -kInf : sx);
  }
  if (v.empty()) return;
  std::vector<double> out(n);
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (k + 1 < v.size() && z[k + 1] < xpos(q)) ++k;
    const double dx = xpos(q) - xpos(v[k]);
    out[q] = dx * dx + f[v[k]];
  }
  f = std::move(out);
}

// squared distance to the nearest set voxel, exact, per voxel
std::vector<double> squared_edt(const BinaryMask3D& m, const std::array<double, 3>& spacing) {
  const std::size_t h = m.extents[0], w = m.extents[1], d = m.extents[2];
  std::vector<double> dist(m.voxels.size());
  for (std::size_t i = 0; i < m.voxels.size(); ++i) dist[i] = m.voxels[i] ? 0.0 : kInf;

  std::vector<double> line;
  // along d (contiguous)
  line.resize(d);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* base = dist.data() + (y * w + x) * d;
      line.assign(base, base + d);
      edt_1d(line, spacing[2]);
      std::copy(line.begin(), line.end(), base);
    }
  }
  // along w
  line.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t z = 0; z < d; ++z) {
      for (std::size_t x = 0; x < w; ++x) line[x] = dist[(y * w + x) * d + z];
      edt_1d(line, spacing[1]);
      for (std::size_t x = 0; x < w; ++x) dist[(y * w + x) * d + z] = line[x];
    }
  }
  // along h
  line.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t z = 0; z < d; ++z) {
      for (std::size_t y = 0; y < h; ++y) line[y] = dist[(y * w + x) * d + z];
      edt_1d(line, spacing[0]);
      for (std::size_t y = 0; y < h; ++y) dist[(y * w + x) * d + z] = line[y];
    }
  }
  return dist;
}

std::vector<double> directed_edt(const BinaryMask3D& from, const BinaryMask3D& to,
                                 const std::array<double, 3>& spacing) {
  const std::vector<double> dist2 = squared_edt(to, spacing);
  std::vector<double> out;
  for (std::size_t i = 0; i < from.voxels.size(); ++i) {
    if (from.voxels[i]) out.push_back(std::sqrt(dist2[i]));
  }
  return out;
}

}  // namespace

Hd95Result hd95(const BinaryMask3D& pred, const BinaryMask3D& target,
                std::array<double, 3> spacing, Hd95Method method) {
  pred.validate();
  target.validate();
  if (pred.extents != target.extents) throw ShapeError("hd95: mask extents differ");
  for (double s : spacing) {
    if (!(s > 0.0)) throw ValueError("hd95: spacing must be positive per axis");
  }
  const std::size_t na = pred.count(), nb = target.count();
  if (na == 0 && nb == 0) return {0.0, false};
  if (na == 0 || nb == 0) {
    double diag2 = 0.0;
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const double e = static_cast<double>(pred.extents[axis]) * spacing[axis];
      diag2 += e * e;
    }
    return {std::sqrt(diag2), true};
  }

  const bool brute = method == Hd95Method::kBruteForce ||
                     (method == Hd95Method::kAuto && na + nb <= 4096);
  std::vector<double> ab, ba;
  if (brute) {
    const auto va = occupied(pred), vb = occupied(target);
    ab = directed_brute(va, vb, spacing);
    ba = directed_brute(vb, va, spacing);
  } else {
    ab = directed_edt(pred, target, spacing);
    ba = directed_edt(target, pred, spacing);
  }
  return {std::max(percentile95(std::move(ab)), percentile95(std::move(ba))), false};
}

MetricRecord evaluate_pair(const std::string& case_id, const std::string& class_name,
                           const BinaryMask3D& pred, const BinaryMask3D& target,
                           std::array<double, 3> spacing) {
  MetricRecord record;
  record.case_id = case_id;
  record.class_name = class_name;
  record.dsc_percent = dsc(pred, target);
  const Hd95Result h = hd95(pred, target, spacing);
  record.hd95_mm = h.mm;
  if (pred.count() == 0) record.flags.push_back("pred_empty");
  if (target.count() == 0) record.flags.push_back("target_empty");
  if (h.sentinel) record.flags.push_back("hd95_sentinel");
  return record;
}

std::string metric_record_json(const MetricRecord& record) {
  nlohmann::json j;
  j["case_id"] = record.case_id;
  j["class"] = record.class_name;
  j["dsc_percent"] = record.dsc_percent;
  j["hd95_mm"] = record.hd95_mm;
  j["flags"] = record.flags;
  return j.dump();
}

template BinaryMask3D to_binary_mask<float>(const Tensor<float>&, std::size_t, std::size_t,
                                            float);
template BinaryMask3D to_binary_mask<double>(const Tensor<double>&, std::size_t, std::size_t,
                                             double);

}  // namespace tma
