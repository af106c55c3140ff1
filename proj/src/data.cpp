#include "tma/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace tma {

namespace {

using json = nlohmann::json;

constexpr std::uint8_t kLabelCore = 1;
constexpr std::uint8_t kLabelEdema = 2;
constexpr std::uint8_t kLabelEnhancing = 4;

}  // namespace

Tensor32 encode_regions(const MaskVolume& mask) {
  const std::size_t h = mask.extents[0], w = mask.extents[1], d = mask.extents[2];
  if (mask.labels.size() != h * w * d) {
    throw ShapeError("encode_regions: mask has " + std::to_string(mask.labels.size()) +
                     " labels, extents require " + std::to_string(h * w * d));
  }
  Tensor32 out = Tensor32::zeros({3, h, w, d});
  const std::size_t spatial = h * w * d;
  float* et = out.data().data();
  float* tc = et + spatial;
  float* wt = tc + spatial;
  for (std::size_t i = 0; i < spatial; ++i) {
    switch (mask.labels[i]) {
      case 0: break;
      case kLabelCore: tc[i] = 1.0f; wt[i] = 1.0f; break;
      case kLabelEdema: wt[i] = 1.0f; break;
      case kLabelEnhancing: et[i] = 1.0f; tc[i] = 1.0f; wt[i] = 1.0f; break;
      default: {
        const std::size_t y = i / (w * d), x = (i / d) % w, z = i % d;
        throw ValueError("encode_regions: unknown label " + std::to_string(int(mask.labels[i])) +
                         " at voxel (" + std::to_string(y) + "," + std::to_string(x) + "," +
                         std::to_string(z) + ")");
      }
    }
  }
  return out;
}

MaskVolume decode_regions(const Tensor32& regions) {
  if (regions.rank() != 4 || regions.extent(0) != 3) {
    throw ShapeError("decode_regions: expected (3, h, w, d), got " + shape_str(regions.shape()));
  }
  MaskVolume mask;
  mask.extents = {regions.extent(1), regions.extent(2), regions.extent(3)};
  const std::size_t spatial = mask.extents[0] * mask.extents[1] * mask.extents[2];
  mask.labels.assign(spatial, 0);
  const float* et = regions.data().data();
  const float* tc = et + spatial;
  const float* wt = tc + spatial;
  for (std::size_t i = 0; i < spatial; ++i) {
    if (et[i] > 0.5f) {
      mask.labels[i] = kLabelEnhancing;
    } else if (tc[i] > 0.5f) {
      mask.labels[i] = kLabelCore;
    } else if (wt[i] > 0.5f) {
      mask.labels[i] = kLabelEdema;
    }
  }
  return mask;
}

Phantom generate_phantom(std::uint64_t seed, std::array<std::size_t, 3> extents,
                         std::size_t num_lesions, std::pair<double, double> scale_range) {
  for (std::size_t e : extents) {
    if (e == 0 || e % 32 != 0) {
      throw ConfigError("phantom extents must be positive multiples of 32, got " +
                        std::to_string(e));
    }
  }
  if (num_lesions == 0) throw ConfigError("phantom needs at least one lesion");
  if (!(scale_range.first > 0.0) || scale_range.second < scale_range.first) {
    throw ConfigError("phantom scale range must satisfy 0 < lo <= hi");
  }

  Rng rng(seed);
  Phantom phantom;
  phantom.mask.extents = extents;
  phantom.mask.labels.assign(extents[0] * extents[1] * extents[2], 0);

  std::array<double, 3> brain_center, brain_axes;
  for (std::size_t a = 0; a < 3; ++a) {
    brain_center[a] = (static_cast<double>(extents[a]) - 1.0) / 2.0;
    brain_axes[a] = 0.45 * static_cast<double>(extents[a]);
  }

  for (std::size_t k = 0; k < num_lesions; ++k) {
    double r = rng.uniform(scale_range.first, scale_range.second);
    Lesion lesion;
    bool placed = false;
    for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
      const double margin = *std::min_element(brain_axes.begin(), brain_axes.end()) - r;
      if (margin > 0.5) {
        std::array<double, 3> c;
        for (std::size_t a = 0; a < 3; ++a) {
          c[a] = brain_center[a] + rng.uniform(-(brain_axes[a] - r), brain_axes[a] - r);
        }
        double shrunk = 0.0;
        for (std::size_t a = 0; a < 3; ++a) {
          const double t = (c[a] - brain_center[a]) / (brain_axes[a] - r);
          shrunk += t * t;
        }
        if (shrunk <= 1.0) {
          lesion.center = c;
          lesion.r_edema = r;
          lesion.r_core = 0.6 * r;
          lesion.r_enhancing = 0.35 * r;
          placed = true;
          break;
        }
      }
      r *= 0.85;
    }
    if (!placed) {
      throw ValueError("phantom lesion " + std::to_string(k) +
                       " could not be placed after 10 shrinking attempts");
    }
    phantom.lesions.push_back(lesion);

    const double re2 = lesion.r_edema * lesion.r_edema;
    const double rc2 = lesion.r_core * lesion.r_core;
    const double rn2 = lesion.r_enhancing * lesion.r_enhancing;
    const auto lo = [&](std::size_t a) {
      const double v = std::ceil(lesion.center[a] - lesion.r_edema);
      return static_cast<std::size_t>(std::max(0.0, v));
    };
    const auto hi = [&](std::size_t a) {
      const double v = std::floor(lesion.center[a] + lesion.r_edema);
      return static_cast<std::size_t>(
          std::min(static_cast<double>(extents[a] - 1), std::max(0.0, v)));
    };
    for (std::size_t y = lo(0); y <= hi(0); ++y) {
      for (std::size_t x = lo(1); x <= hi(1); ++x) {
        for (std::size_t z = lo(2); z <= hi(2); ++z) {
          const double dy = static_cast<double>(y) - lesion.center[0];
          const double dx = static_cast<double>(x) - lesion.center[1];
          const double dz = static_cast<double>(z) - lesion.center[2];
          const double d2 = dy * dy + dx * dx + dz * dz;
          if (d2 > re2) continue;
          std::uint8_t label = kLabelEdema;
          if (d2 <= rn2) {
            label = kLabelEnhancing;
          } else if (d2 <= rc2) {
            label = kLabelCore;
          }
          phantom.mask.labels[phantom.mask.index(y, x, z)] = label;
        }
      }
    }
  }

  // per-modality contrast: brain-tissue base plus per-label offsets
  // channel order (T1, T1ce, T2, FLAIR)
  constexpr double kBase[4] = {0.60, 0.55, 0.50, 0.45};
  constexpr double kEdema[4] = {-0.05, 0.00, 0.25, 0.35};      // bright FLAIR/T2
  constexpr double kCore[4] = {-0.30, -0.10, 0.10, 0.10};      // dark T1
  constexpr double kEnhancing[4] = {-0.10, 0.40, 0.05, 0.10};  // bright T1ce

  const std::size_t spatial = extents[0] * extents[1] * extents[2];
  phantom.volume.data = Tensor32::zeros({4, extents[0], extents[1], extents[2]});
  auto& vox = phantom.volume.data.data();
  for (std::size_t mod = 0; mod < 4; ++mod) {
    std::size_t i = 0;
    for (std::size_t y = 0; y < extents[0]; ++y) {
      for (std::size_t x = 0; x < extents[1]; ++x) {
        for (std::size_t z = 0; z < extents[2]; ++z, ++i) {
          const double ty = (static_cast<double>(y) - brain_center[0]) / brain_axes[0];
          const double tx = (static_cast<double>(x) - brain_center[1]) / brain_axes[1];
          const double tz = (static_cast<double>(z) - brain_center[2]) / brain_axes[2];
          if (ty * ty + tx * tx + tz * tz > 1.0) continue;  // background stays exactly 0
          double value = kBase[mod];
          switch (phantom.mask.labels[i]) {
            case kLabelEdema: value += kEdema[mod]; break;
            case kLabelCore: value += kCore[mod]; break;
            case kLabelEnhancing: value += kEnhancing[mod]; break;
            default: break;
          }
          vox[mod * spatial + i] = static_cast<float>(value + rng.normal(0.0, 0.05));
        }
      }
    }
  }
  return phantom;
}

void normalize_volume(Volume& volume) {
  if (volume.data.rank() != 4) {
    throw ShapeError("normalize_volume: expected (C, H, W, D), got " +
                     shape_str(volume.data.shape()));
  }
  const std::size_t channels = volume.data.extent(0);
  const std::size_t spatial = volume.data.size() / channels;
  auto& vox = volume.data.data();
  for (std::size_t c = 0; c < channels; ++c) {
    float* ch = vox.data() + c * spatial;
    double sum = 0.0, sum2 = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < spatial; ++i) {
      if (ch[i] != 0.0f) {
        sum += ch[i];
        sum2 += static_cast<double>(ch[i]) * ch[i];
        ++n;
      }
    }
    if (n == 0) continue;
    const double mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, sum2 / static_cast<double>(n) - mean * mean);
    const double inv = 1.0 / std::sqrt(var > 1e-24 ? var : 1.0);
    for (std::size_t i = 0; i < spatial; ++i) {
      if (ch[i] != 0.0f) ch[i] = static_cast<float>((ch[i] - mean) * inv);
    }
  }
}

namespace {

template <typename T>
std::vector<T> flip_grid(const std::vector<T>& src, const std::array<std::size_t, 3>& e,
                         std::size_t axis) {
  std::vector<T> out(src.size());
  std::size_t i = 0;
  for (std::size_t y = 0; y < e[0]; ++y) {
    for (std::size_t x = 0; x < e[1]; ++x) {
      for (std::size_t z = 0; z < e[2]; ++z, ++i) {
        const std::size_t fy = axis == 0 ? e[0] - 1 - y : y;
        const std::size_t fx = axis == 1 ? e[1] - 1 - x : x;
        const std::size_t fz = axis == 2 ? e[2] - 1 - z : z;
        out[(fy * e[1] + fx) * e[2] + fz] = src[i];
      }
    }
  }
  return out;
}

std::array<std::size_t, 3> volume_extents(const Volume& v) {
  return {v.data.extent(1), v.data.extent(2), v.data.extent(3)};
}

}  // namespace

Volume flip(const Volume& volume, std::size_t axis) {
  if (axis > 2) throw ValueError("flip: axis must be 0, 1 or 2");
  Volume out = volume;
  out.data = Tensor32::zeros(volume.data.shape());
  const auto e = volume_extents(volume);
  const std::size_t spatial = e[0] * e[1] * e[2];
  for (std::size_t c = 0; c < volume.data.extent(0); ++c) {
    std::vector<float> ch(volume.data.data().begin() + c * spatial,
                          volume.data.data().begin() + (c + 1) * spatial);
    const std::vector<float> flipped = flip_grid(ch, e, axis);
    std::copy(flipped.begin(), flipped.end(), out.data.data().begin() + c * spatial);
  }
  return out;
}

MaskVolume flip(const MaskVolume& mask, std::size_t axis) {
  if (axis > 2) throw ValueError("flip: axis must be 0, 1 or 2");
  MaskVolume out = mask;
  out.labels = flip_grid(mask.labels, mask.extents, axis);
  return out;
}

AugmentResult augment(const Volume& volume, const MaskVolume& mask, std::uint64_t seed,
                      const AugmentPolicy& policy) {
  const auto e = volume_extents(volume);
  if (e != mask.extents) {
    throw ShapeError("augment: volume and mask extents differ");
  }
  Rng rng(seed);
  AugmentResult result{volume, mask};

  if (policy.mirror) {
    for (std::size_t axis = 0; axis < 3; ++axis) {
      if (rng.bernoulli(0.5)) {
        result.volume = flip(result.volume, axis);
        result.mask = flip(result.mask, axis);
      }
    }
  }

  const bool do_crop = policy.crop[0] || policy.crop[1] || policy.crop[2];
  if (do_crop) {
    std::array<std::size_t, 3> corner{};
    for (std::size_t a = 0; a < 3; ++a) {
      if (policy.crop[a] == 0 || policy.crop[a] > e[a]) {
        throw ConfigError("augment: crop extent " + std::to_string(policy.crop[a]) +
                          " on axis " + std::to_string(a) + " invalid for volume extent " +
                          std::to_string(e[a]));
      }
      corner[a] = rng.integer(e[a] - policy.crop[a] + 1);
    }
    const std::size_t channels = result.volume.data.extent(0);
    Tensor32 cropped =
        Tensor32::zeros({channels, policy.crop[0], policy.crop[1], policy.crop[2]});
    MaskVolume cropped_mask;
    cropped_mask.extents = policy.crop;
    cropped_mask.labels.resize(policy.crop[0] * policy.crop[1] * policy.crop[2]);
    const std::size_t spatial = e[0] * e[1] * e[2];
    std::size_t di = 0;
    for (std::size_t y = 0; y < policy.crop[0]; ++y) {
      for (std::size_t x = 0; x < policy.crop[1]; ++x) {
        for (std::size_t z = 0; z < policy.crop[2]; ++z, ++di) {
          const std::size_t si =
              ((y + corner[0]) * e[1] + (x + corner[1])) * e[2] + (z + corner[2]);
          cropped_mask.labels[di] = result.mask.labels[si];
          for (std::size_t c = 0; c < channels; ++c) {
            cropped.data()[c * cropped_mask.labels.size() + di] =
                result.volume.data.data()[c * spatial + si];
          }
        }
      }
    }
    result.volume.data = cropped;
    result.mask = std::move(cropped_mask);
  }

  if (policy.intensity_shift) {
    const std::size_t channels = result.volume.data.extent(0);
    const std::size_t spatial = result.volume.data.size() / channels;
    for (std::size_t c = 0; c < channels; ++c) {
      const float u = static_cast<float>(rng.uniform(0.9, 1.1));
      const float v = static_cast<float>(rng.uniform(-0.1, 0.1));
      float* ch = result.volume.data.data().data() + c * spatial;
      for (std::size_t i = 0; i < spatial; ++i) ch[i] = u * ch[i] + v;
    }
  }
  return result;
}

// ---- container I/O ----

namespace {

constexpr char kMagic[4] = {'T', 'M', 'A', 'V'};

void write_container(const std::string& path, const json& header, const std::string& payload) {
  std::string out(kMagic, 4);
  const std::string head = header.dump();
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((head.size() >> (8 * i)) & 0xff));
  }
  out += head;
  out += payload;
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("short write to '" + path + "'");
}

std::pair<json, std::string> read_container(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  if (data.size() < 8 || data.compare(0, 4, kMagic, 4) != 0) {
    throw IoError("'" + path + "' is not a TMAV container (bad magic)");
  }
  std::size_t head_len = 0;
  for (int i = 0; i < 4; ++i) {
    head_len |= static_cast<std::size_t>(static_cast<unsigned char>(data[4 + i])) << (8 * i);
  }
  if (data.size() < 8 + head_len) {
    throw IoError("'" + path + "': truncated header (promises " + std::to_string(head_len) +
                  " bytes, file has " + std::to_string(data.size() - 8) + ")");
  }
  json header;
  try {
    header = json::parse(data.substr(8, head_len));
  } catch (const json::exception& e) {
    throw IoError("'" + path + "': header is not valid JSON: " + e.what());
  }
  return {header, data.substr(8 + head_len)};
}

void check_payload_size(const std::string& path, const std::string& payload,
                        std::size_t expected) {
  if (payload.size() != expected) {
    throw IoError("'" + path + "': payload holds " + std::to_string(payload.size()) +
                  " bytes, header promises " + std::to_string(expected));
  }
}

}  // namespace

void save_volume(const Volume& volume, const std::string& path) {
  if (volume.data.rank() != 4) {
    throw ShapeError("save_volume: expected (C, H, W, D), got " + shape_str(volume.data.shape()));
  }
  if (volume.modalities.size() != volume.data.extent(0)) {
    throw ConfigError("save_volume: " + std::to_string(volume.modalities.size()) +
                      " modality names for " + std::to_string(volume.data.extent(0)) +
                      " channels");
  }
  json header;
  header["dims"] = volume.data.shape();
  header["spacing"] = volume.spacing;
  header["dtype"] = "f32le";
  header["modalities"] = volume.modalities;
  std::string payload;
  payload.reserve(volume.data.size() * 4);
  for (float v : volume.data.data()) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) payload.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  write_container(path, header, payload);
}

Volume load_volume(const std::string& path) {
  auto [header, payload] = read_container(path);
  Volume volume;
  try {
    if (header.at("dtype").get<std::string>() != "f32le") {
      throw IoError("'" + path + "': dtype '" + header.at("dtype").get<std::string>() +
                    "', expected 'f32le'");
    }
    const Shape dims = header.at("dims").get<Shape>();
    if (dims.size() != 4) throw IoError("'" + path + "': dims must have rank 4");
    volume.spacing = header.at("spacing").get<std::array<double, 3>>();
    volume.modalities = header.at("modalities").get<std::vector<std::string>>();
    check_payload_size(path, payload, shape_size(dims) * 4);
    volume.data = Tensor32::zeros(dims);
    for (std::size_t i = 0; i < volume.data.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[i * 4 + b]))
                << (8 * b);
      }
      volume.data.data()[i] = std::bit_cast<float>(bits);
    }
  } catch (const json::exception& e) {
    throw IoError("'" + path + "': bad header: " + e.what());
  }
  if (volume.modalities.size() != volume.data.extent(0)) {
    throw IoError("'" + path + "': " + std::to_string(volume.modalities.size()) +
                  " modality names for " + std::to_string(volume.data.extent(0)) + " channels");
  }
  return volume;
}

void save_mask(const MaskVolume& mask, const std::string& path) {
  if (mask.labels.size() != mask.extents[0] * mask.extents[1] * mask.extents[2]) {
    throw ShapeError("save_mask: label count does not match extents");
  }
  json header;
  header["dims"] = mask.extents;
  header["dtype"] = "u8";
  write_container(path, header,
                  std::string(reinterpret_cast<const char*>(mask.labels.data()),
                              mask.labels.size()));
}

MaskVolume load_mask(const std::string& path) {
  auto [header, payload] = read_container(path);
  MaskVolume mask;
  try {
    if (header.at("dtype").get<std::string>() != "u8") {
      throw IoError("'" + path + "': dtype '" + header.at("dtype").get<std::string>() +
                    "', expected 'u8'");
    }
    mask.extents = header.at("dims").get<std::array<std::size_t, 3>>();
  } catch (const json::exception& e) {
    throw IoError("'" + path + "': bad header: " + e.what());
  }
  check_payload_size(path, payload, mask.extents[0] * mask.extents[1] * mask.extents[2]);
  mask.labels.assign(payload.begin(), payload.end());
  return mask;
}

}  // namespace tma
