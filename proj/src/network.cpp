#include "tma/network.hpp"

namespace tma {

void ModelConfig::validate() const {
  if (in_channels == 0) throw ConfigError("in_channels must be positive");
  if (num_targets == 0) throw ConfigError("num_targets must be positive");
  HeadSplit{heads, stage_channels[0]}.validate();
  for (std::size_t k = 0; k < 4; ++k) {
    if (stage_channels[k] == 0 || stage_channels[k] % heads != 0) {
      throw ConfigError("stage " + std::to_string(k + 1) + " channels (" +
                        std::to_string(stage_channels[k]) + ") must be a positive multiple of " +
                        std::to_string(heads) + " heads");
    }
  }
  const char* axis_names[3] = {"H", "W", "D"};
  for (std::size_t a = 0; a < 3; ++a) {
    if (extents[a] == 0 || extents[a] % 32 != 0) {
      throw ConfigError(std::string("extent ") + axis_names[a] + " = " +
                        std::to_string(extents[a]) +
                        " must be a positive multiple of 32 (stride-4 stem plus three "
                        "stride-2 stages)");
    }
  }
}

ScalePair stage_scales(std::size_t encoder_stage) {
  switch (encoder_stage) {
    case 1: return {8, 4};
    case 2: return {4, 2};
    case 3: return {2, 1};
    case 4: return {1, 1};
    default: throw ConfigError("stage index " + std::to_string(encoder_stage) + " out of range");
  }
}

std::vector<StageShape> shape_schedule(const ModelConfig& config) {
  config.validate();
  const auto& c = config.stage_channels;
  return {
      {"en1", c[0], config.grid(4)},  {"en2", c[1], config.grid(8)},
      {"en3", c[2], config.grid(16)}, {"en4", c[3], config.grid(32)},
      {"de1", c[2], config.grid(16)}, {"de2", c[1], config.grid(8)},
      {"de3", c[0], config.grid(4)},  {"de4", c[0], config.grid(1)},
  };
}

namespace {

// decoder stage j (1..3) runs at the scales of its encoder partner 4-j
ScalePair decoder_scales(std::size_t decoder_stage) { return stage_scales(4 - decoder_stage); }

}  // namespace

template <typename T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const auto& c = config.stage_channels;
  Model m;
  m.config = config;

  m.stem = ConvBlock<T>::create(config.in_channels, c[0], 4, 4, 0, rng);
  for (std::size_t stage = 1; stage <= 4; ++stage) {
    if (stage >= 2) {
      m.down[stage - 2] = ConvBlock<T>::create(c[stage - 2], c[stage - 1], 2, 2, 0, rng);
    }
    if (config.ablation.tmsm_encoder) {
      const auto grid = config.grid(std::size_t(4) << (stage - 1));
      for (std::size_t j = 0; j < 3; ++j) {
        m.en_tmsm[stage - 1].push_back(
            Tmsm<T>::create("en" + std::to_string(stage) + ".tmsm" + std::to_string(j),
                            c[stage - 1], grid, stage_scales(stage), config.heads,
                            config.value_enhance, rng));
      }
    }
  }

  for (std::size_t stage = 1; stage <= 3; ++stage) {
    const std::size_t cin = c[4 - stage], cout = c[3 - stage];
    const auto grid = config.grid(std::size_t(32) >> stage);
    m.up[stage - 1] = TransposedConvLayer<T>::create(cin, cout, 2, rng);
    if (config.ablation.tmcm) {
      m.tmcm.push_back(Tmcm<T>::create("de" + std::to_string(stage) + ".tmcm", cout, grid,
                                       decoder_scales(stage), config.heads, config.value_enhance,
                                       rng));
    }
    if (config.ablation.tmsm_decoder) {
      for (std::size_t j = 0; j < 3; ++j) {
        m.de_tmsm[stage - 1].push_back(
            Tmsm<T>::create("de" + std::to_string(stage) + ".tmsm" + std::to_string(j), cout,
                            grid, decoder_scales(stage), config.heads, config.value_enhance,
                            rng));
      }
    }
  }

  m.up4 = TransposedConvLayer<T>::create(c[0], c[0], 4, rng);
  m.input_stem = ResidualConvBlock<T>::create(config.in_channels, c[0], rng);
  m.fuse_res = ResidualConvBlock<T>::create(c[0], c[0], rng);
  m.fuse_one = ConvBlock<T>::create(c[0], c[0], 1, 1, 0, rng);

  if (config.ablation.deep_supervision) {
    m.head16 = ConvLayer<T>::create(ConvSpec::cubic(c[2], config.num_targets, 1, 1, 0), rng);
    m.head8 = ConvLayer<T>::create(ConvSpec::cubic(c[1], config.num_targets, 1, 1, 0), rng);
    m.head4 = ConvLayer<T>::create(ConvSpec::cubic(c[0], config.num_targets, 1, 1, 0), rng);
  }
  m.head1 = ConvLayer<T>::create(ConvSpec::cubic(c[0], config.num_targets, 1, 1, 0), rng);
  return m;
}

template <typename T>
StageOutputs<T> Model<T>::forward(const Tensor<T>& x, NormMode mode) {
  if (x.rank() != 5 || x.extent(1) != config.in_channels || x.extent(2) != config.extents[0] ||
      x.extent(3) != config.extents[1] || x.extent(4) != config.extents[2]) {
    throw ShapeError("model forward: input " + shape_str(x.shape()) + " does not match (N, " +
                     std::to_string(config.in_channels) + ", " +
                     std::to_string(config.extents[0]) + ", " +
                     std::to_string(config.extents[1]) + ", " +
                     std::to_string(config.extents[2]) + ")");
  }
  StageOutputs<T> out;

  std::array<Tensor<T>, 4> en;
  Tensor<T> f = stem.forward(x, mode);
  for (std::size_t stage = 1; stage <= 4; ++stage) {
    if (stage >= 2) f = down[stage - 2].forward(f, mode);
    for (auto& layer : en_tmsm[stage - 1]) f = layer.forward(f, mode);
    en[stage - 1] = f;
    out.trace.emplace_back("en" + std::to_string(stage), f.shape());
  }

  std::array<Tensor<T>, 3> de;
  for (std::size_t stage = 1; stage <= 3; ++stage) {
    f = up[stage - 1].forward(f);
    const Tensor<T>& partner = en[3 - stage];
    f = config.ablation.tmcm ? tmcm[stage - 1].forward(partner, f, mode) : add(partner, f);
    for (auto& layer : de_tmsm[stage - 1]) f = layer.forward(f, mode);
    de[stage - 1] = f;
    out.trace.emplace_back("de" + std::to_string(stage), f.shape());
  }

  f = add(input_stem.forward(x, mode), up4.forward(de[2]));
  f = fuse_one.forward(fuse_res.forward(f, mode), mode);
  out.trace.emplace_back("de4", f.shape());

  if (config.ablation.deep_supervision) {
    out.p16 = sigmoid(head16.forward(de[0]));
    out.p8 = sigmoid(head8.forward(de[1]));
    out.p4 = sigmoid(head4.forward(de[2]));
  }
  out.p1 = sigmoid(head1.forward(f));
  return out;
}

template <typename T>
void Model<T>::params(NamedTensors<T>& out) const {
  stem.params("stem", out);
  for (std::size_t stage = 1; stage <= 4; ++stage) {
    if (stage >= 2) down[stage - 2].params("down" + std::to_string(stage), out);
    for (std::size_t j = 0; j < en_tmsm[stage - 1].size(); ++j) {
      en_tmsm[stage - 1][j].params("en" + std::to_string(stage) + ".tmsm" + std::to_string(j),
                                   out);
    }
  }
  for (std::size_t stage = 1; stage <= 3; ++stage) {
    const std::string prefix = "de" + std::to_string(stage);
    up[stage - 1].params(prefix + ".up", out);
    if (config.ablation.tmcm) tmcm[stage - 1].params(prefix + ".tmcm", out);
    for (std::size_t j = 0; j < de_tmsm[stage - 1].size(); ++j) {
      de_tmsm[stage - 1][j].params(prefix + ".tmsm" + std::to_string(j), out);
    }
  }
  up4.params("de4.up", out);
  input_stem.params("de4.stem", out);
  fuse_res.params("de4.res", out);
  fuse_one.params("de4.conv1", out);
  if (config.ablation.deep_supervision) {
    head16.params("head.p16", out);
    head8.params("head.p8", out);
    head4.params("head.p4", out);
  }
  head1.params("head.p1", out);
}

template <typename T>
void Model<T>::buffers(NamedTensors<T>& out) const {
  stem.buffers("stem", out);
  for (std::size_t stage = 1; stage <= 4; ++stage) {
    if (stage >= 2) down[stage - 2].buffers("down" + std::to_string(stage), out);
    for (std::size_t j = 0; j < en_tmsm[stage - 1].size(); ++j) {
      en_tmsm[stage - 1][j].buffers("en" + std::to_string(stage) + ".tmsm" + std::to_string(j),
                                    out);
    }
  }
  for (std::size_t stage = 1; stage <= 3; ++stage) {
    const std::string prefix = "de" + std::to_string(stage);
    if (config.ablation.tmcm) tmcm[stage - 1].buffers(prefix + ".tmcm", out);
    for (std::size_t j = 0; j < de_tmsm[stage - 1].size(); ++j) {
      de_tmsm[stage - 1][j].buffers(prefix + ".tmsm" + std::to_string(j), out);
    }
  }
  input_stem.buffers("de4.stem", out);
  fuse_res.buffers("de4.res", out);
  fuse_one.buffers("de4.conv1", out);
}

template <typename T>
std::size_t Model<T>::param_count() const {
  NamedTensors<T> named;
  params(named);
  std::size_t total = 0;
  for (const auto& [name, tensor] : named) total += tensor.size();
  return total;
}

namespace {

std::size_t vox(const std::array<std::size_t, 3>& e) { return e[0] * e[1] * e[2]; }

std::size_t conv_flops(std::size_t cin, std::size_t cout, std::size_t k,
                       const std::array<std::size_t, 3>& out_grid, std::size_t groups = 1) {
  return 2 * cout * (cin / groups) * k * k * k * vox(out_grid);
}

std::size_t residual_block_flops(std::size_t cin, std::size_t cout,
                                 const std::array<std::size_t, 3>& grid) {
  std::size_t f = conv_flops(cin, cout, 3, grid);
  if (cin != cout) f += conv_flops(cin, cout, 1, grid);
  return f;
}

std::size_t attention_flops(std::size_t c, const std::array<std::size_t, 3>& grid,
                            ScalePair scales, std::size_t n, ValueEnhance enhance) {
  const std::size_t l = vox(grid);
  std::size_t f = 2 * l * c * c;  // W^Q
  for (std::size_t r : {scales.r1, scales.r2}) {
    const std::size_t lr = l / (r * r * r);
    f += 2 * c * l;            // depthwise aggregation: r^3 taps per output voxel
    f += 2 * lr * c * c;       // W^KV
    if (enhance == ValueEnhance::kDepthwise3) f += 2 * (c / 2) * 27 * lr;
    f += 2 * qkt_flops(l, r, n, c);  // QK^T plus attention x V
  }
  f += conv_flops(c, c, 3, grid) + conv_flops(c, c, 1, grid);  // post block
  return f;
}

}  // namespace

FlopsReport flops_estimate(const ModelConfig& config) {
  config.validate();
  const auto& c = config.stage_channels;
  FlopsReport report;
  auto row = [&report](const std::string& name, std::size_t flops) {
    report.rows.emplace_back(name, flops);
    report.total += flops;
  };

  row("stem", conv_flops(config.in_channels, c[0], 4, config.grid(4)));
  for (std::size_t stage = 1; stage <= 4; ++stage) {
    const auto grid = config.grid(std::size_t(4) << (stage - 1));
    if (stage >= 2) {
      row("down" + std::to_string(stage), conv_flops(c[stage - 2], c[stage - 1], 2, grid));
    }
    if (config.ablation.tmsm_encoder) {
      row("en" + std::to_string(stage) + ".tmsm",
          3 * attention_flops(c[stage - 1], grid, stage_scales(stage), config.heads,
                              config.value_enhance));
    }
  }
  for (std::size_t stage = 1; stage <= 3; ++stage) {
    const std::string prefix = "de" + std::to_string(stage);
    const auto grid = config.grid(std::size_t(32) >> stage);
    const std::size_t cin = c[4 - stage], cout = c[3 - stage];
    row(prefix + ".up", 2 * cin * cout * vox(grid));
    if (config.ablation.tmcm) {
      row(prefix + ".tmcm", attention_flops(cout, grid, decoder_scales(stage), config.heads,
                                            config.value_enhance));
    }
    if (config.ablation.tmsm_decoder) {
      row(prefix + ".tmsm", 3 * attention_flops(cout, grid, decoder_scales(stage), config.heads,
                                                config.value_enhance));
    }
  }
  row("de4.up", 2 * c[0] * c[0] * vox(config.grid(1)));
  row("de4.stem", residual_block_flops(config.in_channels, c[0], config.grid(1)));
  row("de4.conv1", residual_block_flops(c[0], c[0], config.grid(1)) +
                       conv_flops(c[0], c[0], 1, config.grid(1)));
  std::size_t head_flops = conv_flops(c[0], config.num_targets, 1, config.grid(1));
  if (config.ablation.deep_supervision) {
    head_flops += conv_flops(c[2], config.num_targets, 1, config.grid(16)) +
                  conv_flops(c[1], config.num_targets, 1, config.grid(8)) +
                  conv_flops(c[0], config.num_targets, 1, config.grid(4));
  }
  row("heads", head_flops);
  return report;
}

#define TMA_INSTANTIATE(T)          \
  template struct Model<T>;

TMA_INSTANTIATE(float)
TMA_INSTANTIATE(double)
#undef TMA_INSTANTIATE

}  // namespace tma
