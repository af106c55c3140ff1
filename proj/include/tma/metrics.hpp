// Evaluation metrics on binary 3D masks: Dice similarity (percent) and the
// 95% Hausdorff distance in millimeters, with voxel-center Euclidean
// distances scaled by spacing and the linear-interpolated percentile.
//
// Empty-set conventions: both masks empty -> DSC 100 / HD95 0; exactly one
// empty -> DSC 0 and HD95 equal to the physical volume diagonal, flagged as
// a sentinel.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tma/tensor.hpp"

namespace tma {

struct BinaryMask3D {
  std::array<std::size_t, 3> extents{};
  std::vector<std::uint8_t> voxels;  // row-major (h, w, d), values 0/1

  static BinaryMask3D zeros(std::array<std::size_t, 3> extents);
  std::size_t count() const;
  void validate() const;  // extents match voxel count; values 0/1
};

// threshold > : probabilities (0,1) and binary masks both map sensibly
template <typename T>
BinaryMask3D to_binary_mask(const Tensor<T>& t, std::size_t batch, std::size_t channel,
                            T threshold = T(0.5));

// 2|A n B| / (|A| + |B|) * 100 with the conventions above
double dsc(const BinaryMask3D& pred, const BinaryMask3D& target);

enum class Hd95Method {
  kAuto,              // brute force when |A|+|B| <= 4096, distance transform beyond
  kBruteForce,        // all-pairs nearest distances
  kDistanceTransform  // exact separable squared-distance transform
};

struct Hd95Result {
  double mm = 0.0;
  bool sentinel = false;  // one side empty; mm holds the volume diagonal
};

Hd95Result hd95(const BinaryMask3D& pred, const BinaryMask3D& target,
                std::array<double, 3> spacing, Hd95Method method = Hd95Method::kAuto);

struct MetricRecord {
  std::string case_id;
  std::string class_name;
  double dsc_percent = 0.0;
  double hd95_mm = 0.0;
  std::vector<std::string> flags;  // "pred_empty", "target_empty", "hd95_sentinel"
};

MetricRecord evaluate_pair(const std::string& case_id, const std::string& class_name,
                           const BinaryMask3D& pred, const BinaryMask3D& target,
                           std::array<double, 3> spacing);

// one JSON object per line: {"case_id", "class", "dsc_percent", "hd95_mm", "flags"}
std::string metric_record_json(const MetricRecord& record);

}  // namespace tma
