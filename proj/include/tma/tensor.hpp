// Dense tensor engine with reverse-mode differentiation.
//
// Tensors are shared handles over contiguous row-major storage. Ops are free
// functions; when a Tape is active and an input requires gradients, the op
// appends a backward closure to the tape. Tape::backward replays the closures
// in reverse and accumulates gradients into every requires_grad leaf.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "tma/common.hpp"

namespace tma {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);
std::vector<std::size_t> row_major_strides(const Shape& s);

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from(Shape shape, std::vector<T> values);
  static Tensor scalar(T value) { return from({}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
  }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<T>& grad();
  const std::vector<T>& grad() const;
  void zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), T(0));
  }

  // Deep copy of shape+data; gradient state is not copied.
  Tensor clone() const;

  std::shared_ptr<TensorImpl<T>>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

// Wengert list. Ops append entries while a tape is active; backward replays
// them in reverse. A tape is single use: it is cleared by backward and a
// second backward (or backward on an empty tape) is rejected.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape<T>* previous_;
  };

  static Tape<T>* current();

  std::size_t size() const { return entries_.size(); }

  // Populates gradients for every requires_grad tensor recorded on the tape;
  // tensors not reachable from the loss end up with zero gradients.
  void backward(const Tensor<T>& loss);

  void record(std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
              std::shared_ptr<TensorImpl<T>> output, std::function<void()> backward_fn);

 private:
  struct Entry {
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::shared_ptr<TensorImpl<T>> output;
    std::function<void()> backward_fn;
  };
  std::vector<Entry> entries_;
  bool spent_ = false;
};

// Temporarily disables recording (used by backward itself, finite-difference
// probes, and eval-mode forwards inside an active tape).
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// 3D convolution geometry. kernel/stride/padding are (h, w, d) triples.
struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> padding{0, 0, 0};
  std::size_t groups = 1;

  static ConvSpec cubic(std::size_t cin, std::size_t cout, std::size_t k, std::size_t s,
                        std::size_t pad, std::size_t groups = 1) {
    return ConvSpec{cin, cout, {k, k, k}, {s, s, s}, {pad, pad, pad}, groups};
  }

  void validate() const;
  // floor((in + 2*pad - k) / s) + 1 per axis; throws if any extent < 1
  std::array<std::size_t, 3> output_extents(const std::array<std::size_t, 3>& in) const;
};

// ---- elementwise ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T value);

// ---- activations ----
template <typename T> Tensor<T> gelu(const Tensor<T>& x);  // tanh approximation
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
// slope has one entry per channel along channel_axis
template <typename T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slope, std::size_t channel_axis = 1);

// ---- shape ----
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

// ---- reductions ----
template <typename T> Tensor<T> reduce_sum(const Tensor<T>& x, std::vector<std::size_t> axes);
template <typename T> Tensor<T> sum_all(const Tensor<T>& x);  // rank-0 result

// ---- linear algebra ----
// x: (..., c_in), weight: (c_in, c_out), bias: (c_out) or undefined
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
// a: (..., m, k), b: (..., k, n) with identical leading extents
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

// ---- softmax / normalization ----
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
// normalizes over the trailing axis; gamma/beta have that axis' extent
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  static BatchNormState init(std::size_t channels) {
    return {Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T(1))};
  }
};

enum class NormMode { kTrain, kEval };

// x: (N, C, ...); gamma/beta: (C). Train mode normalizes with batch statistics
// and updates the running state in place; eval mode uses the running state.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, NormMode mode, T momentum = T(0.1),
                     T eps = T(1e-5));

// ---- convolution family ----
// x: (N, Cin, H, W, D); weight: (Cout, Cin/groups, kh, kw, kd); bias: (Cout) or undefined
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec);
// kernel == stride == r, groups == channels; extents must divide by r
template <typename T>
Tensor<T> depthwise_conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t r);
// kernel == stride == factor (non-overlapping); weight: (Cin, Cout, f, f, f)
template <typename T>
Tensor<T> transposed_conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                            std::size_t factor);

// Throws ValueError naming `what` if any element is NaN/Inf.
template <typename T> void check_finite(const Tensor<T>& x, const std::string& what);

}  // namespace tma
