// Tensor storage, tape machinery, elementwise/shape/reduction ops.
#include "tma/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace tma {

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

namespace {

void validate_shape(const Shape& s) {
  for (std::size_t e : s) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
  }
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  validate_shape(shape);
  Tensor<T> t;
  t.impl_ = std::make_shared<TensorImpl<T>>();
  t.impl_->data.assign(shape_size(shape), T(0));
  t.impl_->shape = std::move(shape);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor<T> t = zeros(std::move(shape));
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
  validate_shape(shape);
  if (shape_size(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor<T> t;
  t.impl_ = std::make_shared<TensorImpl<T>>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (!impl_ || impl_->data.size() != 1) {
    throw ValueError("Tensor::item: tensor is not a scalar");
  }
  return impl_->data[0];
}

template <typename T>
std::vector<T>& Tensor<T>::grad() {
  if (!has_grad()) throw ValueError("Tensor::grad: no gradient populated");
  return impl_->grad;
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
  if (!has_grad()) throw ValueError("Tensor::grad: no gradient populated");
  return impl_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor<T> t;
  t.impl_ = std::make_shared<TensorImpl<T>>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

// ---- tape ----

template <typename T>
Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
Tape<T>* Tape<T>::current() {
  return active_tape_slot<T>();
}

template <typename T>
Tape<T>::~Tape() {
  if (active_tape_slot<T>() == this) active_tape_slot<T>() = nullptr;
}

template <typename T>
Tape<T>::Scope::Scope(Tape<T>& tape) : previous_(active_tape_slot<T>()) {
  active_tape_slot<T>() = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  active_tape_slot<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(active_tape_slot<T>()) {
  active_tape_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  active_tape_slot<T>() = previous_;
}

template <typename T>
void Tape<T>::record(std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                     std::shared_ptr<TensorImpl<T>> output, std::function<void()> backward_fn) {
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward_fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (spent_) {
    throw ValueError("Tape::backward: tape already consumed; double-backward is unsupported");
  }
  if (!loss.defined() || loss.size() != 1) {
    throw ValueError("Tape::backward: loss must be a defined scalar tensor");
  }
  if (entries_.empty()) {
    throw ValueError("Tape::backward: tape is empty; loss was not produced under an active tape");
  }
  if (!loss.requires_grad()) {
    throw ValueError("Tape::backward: loss does not depend on any requires_grad tensor");
  }
  NoGradScope<T> guard;
  // Recorded requires_grad tensors all receive a gradient buffer, so leaves
  // that turn out to be unreachable from the loss report zeros.
  for (auto& entry : entries_) {
    for (auto& in : entry.inputs) {
      if (in->requires_grad && in->grad.empty()) in->grad.assign(in->data.size(), T(0));
    }
  }
  loss.impl()->grad.assign(1, T(1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->grad.empty()) it->backward_fn();
  }
  spent_ = true;
  entries_.clear();
}

// ---- op plumbing ----

namespace {

template <typename T>
void record_op(std::initializer_list<Tensor<T>> inputs, Tensor<T>& out,
               std::function<void()> backward_fn) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape) return;
  bool any = false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) any = true;
  }
  if (!any) return;
  out.set_requires_grad(true);
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  impls.reserve(inputs.size());
  for (const auto& t : inputs) {
    if (t.defined()) impls.push_back(t.impl());
  }
  tape->record(std::move(impls), out.impl(), std::move(backward_fn));
}

template <typename T>
std::vector<T>& grad_buffer(const Tensor<T>& t) {
  auto& g = t.impl()->grad;
  if (g.empty()) g.assign(t.size(), T(0));
  return g;
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

template <typename T>
void check_finite(const Tensor<T>& x, const std::string& what) {
  for (T v : x.data()) {
    if (!std::isfinite(v)) throw ValueError(what + ": non-finite value encountered");
  }
}

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  record_op<T>({a, b}, out, [a, b, out]() {
    const auto& go = out.impl()->grad;
    if (a.requires_grad()) {
      auto& ga = grad_buffer(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto& gb = grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
  record_op<T>({a, b}, out, [a, b, out]() {
    const auto& go = out.impl()->grad;
    if (a.requires_grad()) {
      auto& ga = grad_buffer(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto& gb = grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  record_op<T>({a, b}, out, [a, b, out]() {
    const auto& go = out.impl()->grad;
    if (a.requires_grad()) {
      auto& ga = grad_buffer(a);
      const auto& bd2 = b.data();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bd2[i];
    }
    if (b.requires_grad()) {
      auto& gb = grad_buffer(b);
      const auto& ad2 = a.data();
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ad2[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("div", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] / bd[i];
  record_op<T>({a, b}, out, [a, b, out]() {
    const auto& go = out.impl()->grad;
    const auto& ad2 = a.data();
    const auto& bd2 = b.data();
    if (a.requires_grad()) {
      auto& ga = grad_buffer(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / bd2[i];
    }
    if (b.requires_grad()) {
      auto& gb = grad_buffer(b);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i] * ad2[i] / (bd2[i] * bd2[i]);
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& ad = a.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * factor;
  record_op<T>({a}, out, [a, out, factor]() {
    const auto& go = out.impl()->grad;
    auto& ga = grad_buffer(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& ad = a.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + value;
  record_op<T>({a}, out, [a, out]() {
    const auto& go = out.impl()->grad;
    auto& ga = grad_buffer(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
  return out;
}

// ---- activations ----

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kSqrt2OverPi = 0.79788456080286535588;
  constexpr double kCubic = 0.044715;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    double v = static_cast<double>(xd[i]);
    double u = kSqrt2OverPi * (v + kCubic * v * v * v);
    od[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
  }
  record_op<T>({x}, out, [x, out]() {
    const auto& go = out.impl()->grad;
    const auto& xd2 = x.data();
    auto& gx = grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) {
      double v = static_cast<double>(xd2[i]);
      double u = kSqrt2OverPi * (v + kCubic * v * v * v);
      double t = std::tanh(u);
      double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
      double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      gx[i] += go[i] * static_cast<T>(d);
    }
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    double v = static_cast<double>(xd[i]);
    od[i] = static_cast<T>(v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                    : std::exp(v) / (1.0 + std::exp(v)));
  }
  record_op<T>({x}, out, [x, out]() {
    const auto& go = out.impl()->grad;
    const auto& od2 = out.data();
    auto& gx = grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * od2[i] * (T(1) - od2[i]);
  });
  return out;
}

template <typename T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slope, std::size_t channel_axis) {
  if (channel_axis >= x.rank()) {
    throw ShapeError("prelu: channel_axis " + std::to_string(channel_axis) +
                     " out of range for shape " + shape_str(x.shape()));
  }
  const std::size_t channels = x.extent(channel_axis);
  if (slope.rank() != 1 || slope.extent(0) != channels) {
    throw ShapeError("prelu: slope must have shape (" + std::to_string(channels) + "), got " +
                     shape_str(slope.shape()));
  }
  std::size_t inner = 1;
  for (std::size_t a = channel_axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const auto& xd = x.data();
  const auto& sd = slope.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) {
    std::size_t c = (i / inner) % channels;
    od[i] = xd[i] >= T(0) ? xd[i] : sd[c] * xd[i];
  }
  record_op<T>({x, slope}, out, [x, slope, out, inner, channels]() {
    const auto& go = out.impl()->grad;
    const auto& xd2 = x.data();
    const auto& sd2 = slope.data();
    if (x.requires_grad()) {
      auto& gx = grad_buffer(x);
      for (std::size_t i = 0; i < go.size(); ++i) {
        std::size_t c = (i / inner) % channels;
        gx[i] += go[i] * (xd2[i] >= T(0) ? T(1) : sd2[c]);
      }
    }
    if (slope.requires_grad()) {
      auto& gs = grad_buffer(slope);
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (xd2[i] < T(0)) gs[(i / inner) % channels] += go[i] * xd2[i];
      }
    }
  });
  return out;
}

// ---- shape ops ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out = Tensor<T>::from(std::move(shape), x.data());
  record_op<T>({x}, out, [x, out]() {
    const auto& go = out.impl()->grad;
    auto& gx = grad_buffer(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
  return out;
}

namespace {

// Copies src into dst where dst's axis order is src's order rearranged by
// `axes` (dst extent i == src extent axes[i]). Used by permute fwd and bwd.
template <typename T>
void permute_copy(const std::vector<T>& src, const Shape& src_shape,
                  const std::vector<std::size_t>& axes, std::vector<T>& dst) {
  const std::size_t rank = src_shape.size();
  const auto src_strides = row_major_strides(src_shape);
  Shape dst_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) dst_shape[i] = src_shape[axes[i]];
  std::vector<std::size_t> step(rank);  // src stride per dst axis
  for (std::size_t i = 0; i < rank; ++i) step[i] = src_strides[axes[i]];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src_off = 0;
  const std::size_t total = src.size();
  for (std::size_t o = 0; o < total; ++o) {
    dst[o] = src[src_off];
    for (std::size_t a = rank; a-- > 0;) {
      ++counter[a];
      src_off += step[a];
      if (counter[a] < dst_shape[a]) break;
      src_off -= step[a] * dst_shape[a];
      counter[a] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) {
    throw ShapeError("permute: axes size " + std::to_string(axes.size()) +
                     " does not match rank " + std::to_string(rank));
  }
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) throw ShapeError("permute: axes must be a permutation of 0..rank-1");
    seen[a] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.extent(axes[i]);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  permute_copy(x.data(), x.shape(), axes, out.data());
  record_op<T>({x}, out, [x, out, axes]() {
    // scatter grad back: inverse permutation
    std::vector<std::size_t> inverse(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;
    std::vector<T> gin(x.size());
    permute_copy(out.impl()->grad, out.shape(), inverse, gin);
    auto& gx = grad_buffer(x);
    for (std::size_t i = 0; i < gin.size(); ++i) gx[i] += gin[i];
  });
  return out;
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank()) throw ShapeError("narrow: axis out of range");
  if (length == 0 || start + length > x.extent(axis)) {
    throw ShapeError("narrow: range [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") exceeds extent " +
                     std::to_string(x.extent(axis)));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.extent(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::size_t in_extent = x.extent(axis);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(od.data() + o * length * inner, xd.data() + (o * in_extent + start) * inner,
                length * inner * sizeof(T));
  }
  record_op<T>({x}, out, [x, out, outer, inner, in_extent, start, length]() {
    const auto& go = out.impl()->grad;
    auto& gx = grad_buffer(x);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = go.data() + o * length * inner;
      T* dst = gx.data() + (o * in_extent + start) * inner;
      for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: needs at least one tensor");
  const std::size_t rank = parts[0].rank();
  if (axis >= rank) throw ShapeError("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (std::size_t a = 0; a < rank; ++a) {
      if (a != axis && p.extent(a) != out_shape[a]) {
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(out_shape) + " on axis " + std::to_string(a));
      }
    }
    total_axis += p.extent(axis);
  }
  out_shape[axis] = total_axis;
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= out_shape[a];
  for (std::size_t a = axis + 1; a < rank; ++a) inner *= out_shape[a];
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  auto& od = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.extent(axis);
    const auto& pd = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(od.data() + (o * total_axis + offset) * inner, pd.data() + o * len * inner,
                  len * inner * sizeof(T));
    }
    offset += len;
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  Tape<T>* tape = Tape<T>::current();
  if (tape && any) {
    out.set_requires_grad(true);
    for (const auto& p : parts) impls.push_back(p.impl());
    std::vector<Tensor<T>> held = parts;
    Tensor<T> held_out = out;
    tape->record(std::move(impls), out.impl(),
                 [held, held_out, outer, inner, total_axis, axis]() {
                   const auto& go = held_out.impl()->grad;
                   std::size_t off = 0;
                   for (const auto& p : held) {
                     const std::size_t len = p.extent(axis);
                     if (p.requires_grad()) {
                       auto& gp = grad_buffer(p);
                       for (std::size_t o = 0; o < outer; ++o) {
                         const T* src = go.data() + (o * total_axis + off) * inner;
                         T* dst = gp.data() + o * len * inner;
                         for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                       }
                     }
                     off += len;
                   }
                 });
  }
  return out;
}

// ---- reductions ----

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::vector<std::size_t> axes) {
  const std::size_t rank = x.rank();
  std::vector<bool> reduced(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank) throw ShapeError("reduce_sum: axis out of range");
    if (reduced[a]) throw ShapeError("reduce_sum: duplicate axis");
    reduced[a] = true;
  }
  Shape out_shape;
  for (std::size_t a = 0; a < rank; ++a) {
    if (!reduced[a]) out_shape.push_back(x.extent(a));
  }
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const auto out_strides = row_major_strides(out_shape);
  // output stride contribution per input axis (0 where reduced)
  std::vector<std::size_t> step(rank, 0);
  {
    std::size_t kept = 0;
    for (std::size_t a = 0; a < rank; ++a) {
      if (!reduced[a]) step[a] = out_strides[kept++];
    }
  }
  const auto& xd = x.data();
  auto& od = out.data();
  std::vector<std::size_t> counter(rank, 0);
  std::size_t out_off = 0;
  for (std::size_t i = 0; i < xd.size(); ++i) {
    od[out_off] += xd[i];
    for (std::size_t a = rank; a-- > 0;) {
      ++counter[a];
      out_off += step[a];
      if (counter[a] < x.extent(a)) break;
      out_off -= step[a] * x.extent(a);
      counter[a] = 0;
    }
  }
  record_op<T>({x}, out, [x, out, step]() {
    const auto& go = out.impl()->grad;
    auto& gx = grad_buffer(x);
    const std::size_t rank2 = x.rank();
    std::vector<std::size_t> counter2(rank2, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += go[off];
      for (std::size_t a = rank2; a-- > 0;) {
        ++counter2[a];
        off += step[a];
        if (counter2[a] < x.extent(a)) break;
        off -= step[a] * x.extent(a);
        counter2[a] = 0;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({});
  T acc = T(0);
  for (T v : x.data()) acc += v;
  out.data()[0] = acc;
  record_op<T>({x}, out, [x, out]() {
    const T g = out.impl()->grad[0];
    auto& gx = grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
  return out;
}

#define TMA_INSTANTIATE(T)                                                                    \
  template class Tensor<T>;                                                                   \
  template class Tape<T>;                                                                     \
  template class NoGradScope<T>;                                                              \
  template void check_finite<T>(const Tensor<T>&, const std::string&);                        \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                           \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                      \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                               \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                            \
  template Tensor<T> prelu<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);               \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                     \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);           \
  template Tensor<T> narrow<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);     \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                   \
  template Tensor<T> reduce_sum<T>(const Tensor<T>&, std::vector<std::size_t>);               \
  template Tensor<T> sum_all<T>(const Tensor<T>&);

TMA_INSTANTIATE(float)
TMA_INSTANTIATE(double)
#undef TMA_INSTANTIATE

}  // namespace tma
