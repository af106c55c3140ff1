#include "tma/layers.hpp"

#include <cmath>

namespace tma {

namespace {
constexpr double kPreluSlope = 0.25;
}

template <typename T>
void kaiming_uniform(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw ConfigError("kaiming_uniform: fan_in must be positive");
  const double gain = std::sqrt(2.0 / (1.0 + kPreluSlope * kPreluSlope));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
void xavier_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
ConvLayer<T> ConvLayer<T>::create(const ConvSpec& spec, Rng& rng, bool with_bias,
                                  bool zero_init) {
  spec.validate();
  ConvLayer layer;
  layer.spec = spec;
  const std::size_t cig = spec.in_channels / spec.groups;
  layer.weight =
      Tensor<T>::zeros({spec.out_channels, cig, spec.kernel[0], spec.kernel[1], spec.kernel[2]});
  if (!zero_init) {
    kaiming_uniform(layer.weight, cig * spec.kernel[0] * spec.kernel[1] * spec.kernel[2], rng);
  }
  if (with_bias) layer.bias = Tensor<T>::zeros({spec.out_channels});
  return layer;
}

template <typename T>
void ConvLayer<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "w"), weight);
  if (bias.defined()) out.emplace_back(join_name(prefix, "b"), bias);
}

template <typename T>
TransposedConvLayer<T> TransposedConvLayer<T>::create(std::size_t cin, std::size_t cout,
                                                      std::size_t factor, Rng& rng) {
  if (cin == 0 || cout == 0 || factor == 0) {
    throw ConfigError("transposed conv: channels and factor must be positive");
  }
  TransposedConvLayer layer;
  layer.factor = factor;
  layer.weight = Tensor<T>::zeros({cin, cout, factor, factor, factor});
  // each output voxel sees exactly cin taps (non-overlapping blocks)
  kaiming_uniform(layer.weight, cin, rng);
  layer.bias = Tensor<T>::zeros({cout});
  return layer;
}

template <typename T>
void TransposedConvLayer<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "w"), weight);
  out.emplace_back(join_name(prefix, "b"), bias);
}

template <typename T>
BatchNormLayer<T> BatchNormLayer<T>::create(std::size_t channels) {
  BatchNormLayer layer;
  layer.gamma = Tensor<T>::full({channels}, T(1));
  layer.beta = Tensor<T>::zeros({channels});
  layer.state = BatchNormState<T>::init(channels);
  return layer;
}

template <typename T>
void BatchNormLayer<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "gamma"), gamma);
  out.emplace_back(join_name(prefix, "beta"), beta);
}

template <typename T>
void BatchNormLayer<T>::buffers(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "running_mean"), state.running_mean);
  out.emplace_back(join_name(prefix, "running_var"), state.running_var);
}

template <typename T>
PReLULayer<T> PReLULayer<T>::create(std::size_t channels) {
  PReLULayer layer;
  layer.slope = Tensor<T>::full({channels}, static_cast<T>(kPreluSlope));
  return layer;
}

template <typename T>
void PReLULayer<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "slope"), slope);
}

template <typename T>
ConvBlock<T> ConvBlock<T>::create(std::size_t cin, std::size_t cout, std::size_t kernel,
                                  std::size_t stride, std::size_t pad, Rng& rng) {
  ConvBlock block;
  block.conv = ConvLayer<T>::create(ConvSpec::cubic(cin, cout, kernel, stride, pad), rng);
  block.bn = BatchNormLayer<T>::create(cout);
  block.act = PReLULayer<T>::create(cout);
  return block;
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x, NormMode mode) {
  return act.forward(bn.forward(conv.forward(x), mode));
}

template <typename T>
void ConvBlock<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  conv.params(join_name(prefix, "conv"), out);
  bn.params(join_name(prefix, "bn"), out);
  act.params(join_name(prefix, "act"), out);
}

template <typename T>
void ConvBlock<T>::buffers(const std::string& prefix, NamedTensors<T>& out) const {
  bn.buffers(join_name(prefix, "bn"), out);
}

template <typename T>
ResidualConvBlock<T> ResidualConvBlock<T>::create(std::size_t cin, std::size_t cout, Rng& rng) {
  ResidualConvBlock block;
  block.block = ConvBlock<T>::create(cin, cout, 3, 1, 1, rng);
  block.has_skip = cin != cout;
  if (block.has_skip) {
    block.skip = ConvLayer<T>::create(ConvSpec::cubic(cin, cout, 1, 1, 0), rng);
  }
  return block;
}

template <typename T>
Tensor<T> ResidualConvBlock<T>::forward(const Tensor<T>& x, NormMode mode) {
  Tensor<T> main = block.forward(x, mode);
  return add(main, has_skip ? skip.forward(x) : x);
}

template <typename T>
void ResidualConvBlock<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  block.params(join_name(prefix, "block"), out);
  if (has_skip) skip.params(join_name(prefix, "skip"), out);
}

template <typename T>
void ResidualConvBlock<T>::buffers(const std::string& prefix, NamedTensors<T>& out) const {
  block.buffers(join_name(prefix, "block"), out);
}

template <typename T>
LinearLayer<T> LinearLayer<T>::create(std::size_t cin, std::size_t cout, Rng& rng,
                                      bool with_bias) {
  if (cin == 0 || cout == 0) throw ConfigError("linear: channels must be positive");
  LinearLayer layer;
  layer.weight = Tensor<T>::zeros({cin, cout});
  xavier_uniform(layer.weight, cin, cout, rng);
  if (with_bias) layer.bias = Tensor<T>::zeros({cout});
  return layer;
}

template <typename T>
void LinearLayer<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "w"), weight);
  if (bias.defined()) out.emplace_back(join_name(prefix, "b"), bias);
}

template <typename T>
LayerNormLayer<T> LayerNormLayer<T>::create(std::size_t dim) {
  LayerNormLayer layer;
  layer.gamma = Tensor<T>::full({dim}, T(1));
  layer.beta = Tensor<T>::zeros({dim});
  return layer;
}

template <typename T>
void LayerNormLayer<T>::params(const std::string& prefix, NamedTensors<T>& out) const {
  out.emplace_back(join_name(prefix, "gamma"), gamma);
  out.emplace_back(join_name(prefix, "beta"), beta);
}

#define TMA_INSTANTIATE(T)                                                      \
  template void kaiming_uniform<T>(Tensor<T>&, std::size_t, Rng&);              \
  template void xavier_uniform<T>(Tensor<T>&, std::size_t, std::size_t, Rng&); \
  template struct ConvLayer<T>;                                                 \
  template struct TransposedConvLayer<T>;                                       \
  template struct BatchNormLayer<T>;                                            \
  template struct PReLULayer<T>;                                                \
  template struct ConvBlock<T>;                                                 \
  template struct ResidualConvBlock<T>;                                         \
  template struct LinearLayer<T>;                                               \
  template struct LayerNormLayer<T>;

TMA_INSTANTIATE(float)
TMA_INSTANTIATE(double)
#undef TMA_INSTANTIATE

}  // namespace tma
