// Parameterized layers over the tensor ops: plain conv, conv->BN->PReLU
// blocks, residual conv blocks, transposed conv, linear, layer norm.
//
// Layers register their tensors through params()/buffers() with dotted names;
// the checkpoint and optimizer work off those lists. Weight init: Kaiming
// uniform (fan-in, PReLU gain) for convolutions, Xavier uniform for linear
// projections, zeros for biases.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tma/tensor.hpp"

namespace tma {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

// Uniform in [-bound, bound] with bound = gain * sqrt(3 / fan_in),
// gain = sqrt(2 / (1 + 0.25^2)) matching the PReLU slope init.
template <typename T>
void kaiming_uniform(Tensor<T>& w, std::size_t fan_in, Rng& rng);

// Uniform in [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void xavier_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng);

template <typename T>
struct ConvLayer {
  ConvSpec spec;
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when created without bias

  static ConvLayer create(const ConvSpec& spec, Rng& rng, bool with_bias = true,
                          bool zero_init = false);
  Tensor<T> forward(const Tensor<T>& x) const { return conv3d(x, weight, bias, spec); }
  void params(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct TransposedConvLayer {
  std::size_t factor = 1;
  Tensor<T> weight;  // (cin, cout, f, f, f)
  Tensor<T> bias;

  static TransposedConvLayer create(std::size_t cin, std::size_t cout, std::size_t factor,
                                    Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const {
    return transposed_conv3d(x, weight, bias, factor);
  }
  void params(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma, beta;
  BatchNormState<T> state;

  static BatchNormLayer create(std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x, NormMode mode) {
    return batch_norm(x, gamma, beta, state, mode);
  }
  void params(const std::string& prefix, NamedTensors<T>& out) const;
  void buffers(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct PReLULayer {
  Tensor<T> slope;  // one slope per channel, init 0.25

  static PReLULayer create(std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x) const { return prelu(x, slope); }
  void params(const std::string& prefix, NamedTensors<T>& out) const;
};

// conv -> batch norm -> PReLU
template <typename T>
struct ConvBlock {
  ConvLayer<T> conv;
  BatchNormLayer<T> bn;
  PReLULayer<T> act;

  static ConvBlock create(std::size_t cin, std::size_t cout, std::size_t kernel,
                          std::size_t stride, std::size_t pad, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
  void params(const std::string& prefix, NamedTensors<T>& out) const;
  void buffers(const std::string& prefix, NamedTensors<T>& out) const;
};

// ConvBlock(3x3x3, pad 1) plus a skip path: identity when channels match,
// 1x1x1 conv otherwise.
template <typename T>
struct ResidualConvBlock {
  ConvBlock<T> block;
  bool has_skip = false;
  ConvLayer<T> skip;

  static ResidualConvBlock create(std::size_t cin, std::size_t cout, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, NormMode mode);
  void params(const std::string& prefix, NamedTensors<T>& out) const;
  void buffers(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // (cin, cout)
  Tensor<T> bias;

  static LinearLayer create(std::size_t cin, std::size_t cout, Rng& rng, bool with_bias = true);
  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void params(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gamma, beta;

  static LayerNormLayer create(std::size_t dim);
  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
  void params(const std::string& prefix, NamedTensors<T>& out) const;
};

}  // namespace tma
