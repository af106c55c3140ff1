// The full segmentation network: a stride-4 stem plus three stride-2
// downsampling stages on the way down (each followed by three TMSM layers),
// and a mirrored decoder whose stages upsample x2, fuse the encoder partner
// through TMCM (or plain addition when disabled), and refine with three TMSM
// layers. The final stage upsamples x4 back to full resolution, fuses a
// residual stem applied to the raw input, and feeds four 1x1x1 sigmoid heads
// at 1/16, 1/8, 1/4 and full resolution.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tma/attention.hpp"
#include "tma/layers.hpp"
#include "tma/tensor.hpp"

namespace tma {

struct AblationSwitches {
  bool tmsm_encoder = true;
  bool tmsm_decoder = true;
  bool tmcm = true;
  bool deep_supervision = true;

  bool operator==(const AblationSwitches&) const = default;
};

struct ModelConfig {
  std::size_t in_channels = 4;
  std::array<std::size_t, 4> stage_channels{32, 64, 128, 256};
  std::size_t heads = 16;
  std::size_t num_targets = 3;
  std::array<std::size_t, 3> extents{128, 128, 128};
  ValueEnhance value_enhance = ValueEnhance::kDepthwise3;
  AblationSwitches ablation;

  // extents divisible by 32, every stage channel divisible by the head count,
  // positive channel/target counts; names the offending field on failure
  void validate() const;
  // grid extents at 1/divisor resolution
  std::array<std::size_t, 3> grid(std::size_t divisor) const {
    return {extents[0] / divisor, extents[1] / divisor, extents[2] / divisor};
  }

  bool operator==(const ModelConfig&) const = default;
};

// per-stage aggregation scales: en1/de3 (8,4); en2/de2 (4,2); en3/de1 (2,1);
// en4 (1,1)
ScalePair stage_scales(std::size_t encoder_stage);

// Expected feature shapes (channels + grid) per named stage, computed from
// the config alone; forward() must trace exactly these.
struct StageShape {
  std::string name;
  std::size_t channels = 0;
  std::array<std::size_t, 3> extents{};
};
std::vector<StageShape> shape_schedule(const ModelConfig& config);

template <typename T>
struct StageOutputs {
  Tensor<T> p16, p8, p4, p1;  // p16/p8/p4 undefined when deep supervision is off
  // (stage name, feature shape) for every encoder/decoder stage, in order
  std::vector<std::pair<std::string, Shape>> trace;
};

template <typename T>
struct Model {
  ModelConfig config;

  ConvBlock<T> stem;                          // C -> c1, 4^3 stride 4
  std::array<ConvBlock<T>, 3> down;           // c1->c2, c2->c3, c3->c4, 2^3 stride 2
  std::array<std::vector<Tmsm<T>>, 4> en_tmsm;
  std::array<TransposedConvLayer<T>, 3> up;   // c4->c3, c3->c2, c2->c1, x2
  std::vector<Tmcm<T>> tmcm;                  // de1..de3 when enabled, else empty
  std::array<std::vector<Tmsm<T>>, 3> de_tmsm;
  TransposedConvLayer<T> up4;                 // c1 -> c1, x4 to full resolution
  ResidualConvBlock<T> input_stem;            // C -> c1 at full resolution
  ResidualConvBlock<T> fuse_res;              // c1 -> c1
  ConvBlock<T> fuse_one;                      // c1 -> c1, 1^3
  ConvLayer<T> head16, head8, head4;          // present when deep supervision is on
  ConvLayer<T> head1;

  static Model build(const ModelConfig& config, std::uint64_t seed);

  // x: (N, C, H, W, D); sigmoid outputs in (0,1)
  StageOutputs<T> forward(const Tensor<T>& x, NormMode mode);

  void params(NamedTensors<T>& out) const;
  void buffers(NamedTensors<T>& out) const;
  std::size_t param_count() const;
};

// Multiply-accumulates x2 for conv / transposed conv / linear / attention
// matmul at batch 1; norms, activations and bias adds are not counted.
struct FlopsReport {
  std::vector<std::pair<std::string, std::size_t>> rows;
  std::size_t total = 0;
};
FlopsReport flops_estimate(const ModelConfig& config);

}  // namespace tma
