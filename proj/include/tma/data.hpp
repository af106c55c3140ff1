// Synthetic data path: multi-modal phantom volumes with nested ellipsoidal
// lesions, label-to-region encoding (ET/TC/WT), the train-time augmentations
// (mirror flip, corner crop, intensity shift), z-score normalization, and a
// minimal single-file container for volumes and masks.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tma/tensor.hpp"

namespace tma {

struct Volume {
  Tensor32 data;  // (C, H, W, D)
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<std::string> modalities{"T1", "T1ce", "T2", "FLAIR"};
};

// labels: 0 background, 1 necrotic/non-enhancing core, 2 peritumoral edema,
// 4 enhancing tumor
struct MaskVolume {
  std::array<std::size_t, 3> extents{};
  std::vector<std::uint8_t> labels;

  std::size_t index(std::size_t y, std::size_t x, std::size_t z) const {
    return (y * extents[1] + x) * extents[2] + z;
  }
};

// ET = {4}, TC = {1,4}, WT = {1,2,4}; output (3, h, w, d) binary float with
// channel order (ET, TC, WT). Unknown labels name the offending voxel.
Tensor32 encode_regions(const MaskVolume& mask);

// Inverse composition by nesting precedence: ET voxels -> 4, TC-not-ET -> 1,
// WT-not-TC -> 2, rest 0. regions: (3, h, w, d), any value > 0.5 counts set.
MaskVolume decode_regions(const Tensor32& regions);

struct Lesion {
  std::array<double, 3> center;  // voxel coordinates
  double r_edema = 0.0;          // outer shell; core = 0.6 r, enhancing = 0.35 r
  double r_core = 0.0;
  double r_enhancing = 0.0;
};

struct Phantom {
  Volume volume;
  MaskVolume mask;
  std::vector<Lesion> lesions;  // geometry, for independent membership checks
};

// Deterministic per seed. Places `num_lesions` nested lesions (edema shell,
// necrotic core, enhancing center) fully inside a brain ellipsoid; radii are
// drawn from scale_range (voxels) and shrink on placement retries, erroring
// after 10 failed attempts. Background voxels are exactly zero; brain tissue
// carries per-modality contrast plus Gaussian noise (sigma 0.05).
Phantom generate_phantom(std::uint64_t seed, std::array<std::size_t, 3> extents,
                         std::size_t num_lesions,
                         std::pair<double, double> scale_range = {3.0, 6.0});

// z-score per channel over nonzero voxels, in place; zero background stays 0
void normalize_volume(Volume& volume);

struct AugmentPolicy {
  std::array<std::size_t, 3> crop{0, 0, 0};  // all-zero: no crop
  bool mirror = true;
  bool intensity_shift = true;
};

// axis in {0,1,2} refers to (H, W, D)
Volume flip(const Volume& volume, std::size_t axis);
MaskVolume flip(const MaskVolume& mask, std::size_t axis);

struct AugmentResult {
  Volume volume;
  MaskVolume mask;
};

// per-axis mirror with probability 1/2 (volume and mask together), uniform
// corner crop, then per-channel intensity u*x + v with u in [0.9, 1.1] and
// v in [-0.1, 0.1] (volume only); deterministic per seed
AugmentResult augment(const Volume& volume, const MaskVolume& mask, std::uint64_t seed,
                      const AugmentPolicy& policy);

// single-file container: magic "TMAV", length-prefixed JSON header
// {"dims", "spacing", "dtype": "f32le" | "u8", "modalities"}, raw payload
void save_volume(const Volume& volume, const std::string& path);
Volume load_volume(const std::string& path);
void save_mask(const MaskVolume& mask, const std::string& path);
MaskVolume load_mask(const std::string& path);

}  // namespace tma
