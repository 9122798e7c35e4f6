// Differentiable tensor operations.
//
// Image tensors are (B, C, H, W, L). Convolutions use same-padding and are
// lowered to im2col + GEMM; GEMMs run through Eigen in a single thread, which
// keeps every forward and backward pass bit-reproducible.
#pragma once

#include <Eigen/Core>

#include <array>
#include <cassert>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mdust/autograd.hpp"
#include "mdust/tensor.hpp"

namespace mdust {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

inline void require(bool cond, const std::string& message) {
  if (!cond) throw ShapeError(message);
}

template <typename T>
void check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* op) {
#ifdef MDUST_CHECK_FINITE
  if (!t.all_finite()) throw std::runtime_error(std::string("non-finite output from ") + op);
#endif
}

// (outer, extent, inner) factorisation of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  require(axis < shape.size(), "axis " + std::to_string(axis) + " out of range for shape " + to_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return Var<T>::make(std::move(out), "add", {a, b}, [](auto& self) {
    const T* g = self.grad.ptr();
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      T* d = in->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return Var<T>::make(std::move(out), "sub", {a, b}, [](auto& self) {
    const T* g = self.grad.ptr();
    const std::size_t n = self.grad.size();
    if (self.inputs[0]->requires_grad) {
      T* d = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
    }
    if (self.inputs[1]->requires_grad) {
      T* d = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) d[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return Var<T>::make(std::move(out), "mul", {a, b}, [](auto& self) {
    const T* g = self.grad.ptr();
    const std::size_t n = self.grad.size();
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      T* d = x.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * y.value[i];
    }
    if (y.requires_grad) {
      T* d = y.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * x.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return Var<T>::make(std::move(out), "scale", {a}, [factor](auto& self) {
    T* d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += factor * self.grad[i];
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return mul(a, a);
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T total{0};
  for (T v : a.value().data()) total += v;
  return Var<T>::make(Tensor<T>::scalar(total), "sum", {a}, [](auto& self) {
    T* d = self.inputs[0]->grad_buffer();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) d[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return Var<T>::make(std::move(out), "reshape", {a}, [](auto& self) {
    T* d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- gather

// out[i] = in[index[i]], or 0 where index[i] < 0. Covers permutes, padding,
// cropping, cyclic rolls and window (re)partitioning; the backward pass is the
// matching scatter-add.
template <typename T>
Var<T> gather(const Var<T>& a, std::shared_ptr<const std::vector<std::int64_t>> index, Shape out_shape) {
  detail::require(index->size() == numel(out_shape), "gather: index map size does not match output shape");
  Tensor<T> out(out_shape);
  const T* src = a.value().ptr();
  const auto n_src = static_cast<std::int64_t>(a.size());
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::int64_t j = (*index)[i];
    assert(j < n_src);
    (void)n_src;
    out[i] = j >= 0 ? src[j] : T{0};
  }
  return Var<T>::make(std::move(out), "gather", {a}, [index](auto& self) {
    T* d = self.inputs[0]->grad_buffer();
    const T* g = self.grad.ptr();
    for (std::size_t i = 0; i < index->size(); ++i) {
      const std::int64_t j = (*index)[i];
      if (j >= 0) d[j] += g[i];
    }
  });
}

// Index map that reorders axes; out axis i is input axis perm[i].
inline std::vector<std::int64_t> permute_index(const Shape& in_shape, const std::vector<std::size_t>& perm, Shape& out_shape) {
  const std::size_t r = in_shape.size();
  detail::require(perm.size() == r, "permute: permutation rank mismatch");
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  out_shape.assign(r, 0);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape.at(perm[i]);
    strides[i] = in_strides[perm[i]];
  }
  std::vector<std::int64_t> index(numel(in_shape));
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    index[i] = static_cast<std::int64_t>(src);
    for (std::size_t ax = r; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += strides[ax];
        break;
      }
      src -= strides[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  return index;
}

template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& perm) {
  Shape out_shape;
  auto index = std::make_shared<const std::vector<std::int64_t>>(permute_index(a.shape(), perm, out_shape));
  return gather(a, std::move(index), std::move(out_shape));
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  Shape out_shape = parts.front().shape();
  detail::require(axis < out_shape.size(), "concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    detail::require(s.size() == out_shape.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis) detail::require(s[i] == parts.front().shape()[i], "concat: extent mismatch on axis " + std::to_string(i));
    }
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_axis(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.shape()[axis] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(p.value().ptr() + o * block, block, out.ptr() + (o * split.extent * split.inner) + off * split.inner);
    }
    off += p.shape()[axis];
  }
  return Var<T>::make(std::move(out), "concat", parts, [split, offsets](auto& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      T* d = in.grad_buffer();
      const std::size_t block = in.value.size() / split.outer;
      for (std::size_t o = 0; o < split.outer; ++o) {
        const T* g = self.grad.ptr() + o * split.extent * split.inner + offsets[k] * split.inner;
        T* dst = d + o * block;
        for (std::size_t i = 0; i < block; ++i) dst[i] += g[i];
      }
    }
  });
}

// ---------------------------------------------------------------- matmul / linear

// Batched product: a[b,m,k] * b[b,k,n], or a[b,m,k] * b[b,n,k]^T with transpose_b.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  using namespace detail;
  require(a.rank() == 3 && b.rank() == 3, "bmm: rank-3 inputs required, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
  require(b.dim(0) == batch && kb == k, "bmm: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  Tensor<T> out(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMatMap<T> A(a.value().ptr() + i * m * k, m, k);
    MatMap<T> C(out.ptr() + i * m * n, m, n);
    if (transpose_b) {
      ConstMatMap<T> B(b.value().ptr() + i * n * k, n, k);
      C.noalias() = A * B.transpose();
    } else {
      ConstMatMap<T> B(b.value().ptr() + i * k * n, k, n);
      C.noalias() = A * B;
    }
  }
  return Var<T>::make(std::move(out), "bmm", {a, b}, [batch, m, n, k, transpose_b](auto& self) {
    auto& xa = *self.inputs[0];
    auto& xb = *self.inputs[1];
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatMap<T> G(self.grad.ptr() + i * m * n, m, n);
      ConstMatMap<T> A(xa.value.ptr() + i * m * k, m, k);
      if (transpose_b) {
        ConstMatMap<T> B(xb.value.ptr() + i * n * k, n, k);
        if (xa.requires_grad) MatMap<T>(xa.grad_buffer() + i * m * k, m, k).noalias() += G * B;
        if (xb.requires_grad) MatMap<T>(xb.grad_buffer() + i * n * k, n, k).noalias() += G.transpose() * A;
      } else {
        ConstMatMap<T> B(xb.value.ptr() + i * k * n, k, n);
        if (xa.requires_grad) MatMap<T>(xa.grad_buffer() + i * m * k, m, k).noalias() += G * B.transpose();
        if (xb.requires_grad) MatMap<T>(xb.grad_buffer() + i * k * n, k, n).noalias() += A.transpose() * G;
      }
    }
  });
}

// Affine map over the trailing axis: x[..., din] * W[din, dout] + b[dout].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = Var<T>()) {
  using namespace detail;
  require(weight.rank() == 2, "linear: weight must be rank 2, got " + to_string(weight.shape()));
  const std::size_t din = weight.dim(0), dout = weight.dim(1);
  require(x.rank() >= 1 && x.shape().back() == din,
          "linear: trailing axis of input " + to_string(x.shape()) + " does not match weight " + to_string(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.rank() == 1 && bias.dim(0) == dout, "linear: bias shape " + to_string(bias.shape()) + " mismatch");
  const std::size_t rows = x.size() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  MatMap<T> Y(out.ptr(), rows, dout);
  Y.noalias() = ConstMatMap<T>(x.value().ptr(), rows, din) * ConstMatMap<T>(weight.value().ptr(), din, dout);
  if (has_bias) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().ptr(), dout);
  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return Var<T>::make(std::move(out), "linear", std::move(inputs), [rows, din, dout](auto& self) {
    ConstMatMap<T> G(self.grad.ptr(), rows, dout);
    auto& xi = *self.inputs[0];
    auto& wi = *self.inputs[1];
    if (xi.requires_grad) MatMap<T>(xi.grad_buffer(), rows, din).noalias() += G * ConstMatMap<T>(wi.value.ptr(), din, dout).transpose();
    if (wi.requires_grad) MatMap<T>(wi.grad_buffer(), din, dout).noalias() += ConstMatMap<T>(xi.value.ptr(), rows, din).transpose() * G;
    if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
      MatMap<T>(self.inputs[2]->grad_buffer(), 1, dout) += G.colwise().sum();
    }
  });
}

// ---------------------------------------------------------------- conv3d

using Stride3 = std::array<std::size_t, 3>;

namespace detail {

struct ConvGeometry {
  std::size_t channels = 0;
  std::array<std::size_t, 3> in{};
  std::array<std::size_t, 3> kernel{};
  std::array<std::size_t, 3> stride{};
  std::array<std::size_t, 3> out{};
  std::array<std::size_t, 3> pad{};  // leading pad per axis

  std::size_t col_rows() const { return channels * kernel[0] * kernel[1] * kernel[2]; }
  std::size_t col_cols() const { return out[0] * out[1] * out[2]; }
  std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
  bool pointwise() const {
    return kernel == std::array<std::size_t, 3>{1, 1, 1} && stride == std::array<std::size_t, 3>{1, 1, 1};
  }
};

// Same-padding: out = ceil(in / stride); the deficit is split with the
// smaller half in front.
inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Stride3& stride) {
  ConvGeometry g;
  g.channels = x[1];
  for (int a = 0; a < 3; ++a) {
    g.in[a] = x[2 + a];
    g.kernel[a] = w[2 + a];
    g.stride[a] = stride[a];
    require(stride[a] >= 1, "conv3d: stride must be positive");
    require(g.kernel[a] % 2 == 1, "conv3d: kernel extents must be odd, got " + to_string(w));
    g.out[a] = (g.in[a] + stride[a] - 1) / stride[a];
    const std::ptrdiff_t needed = static_cast<std::ptrdiff_t>((g.out[a] - 1) * stride[a] + g.kernel[a]) - static_cast<std::ptrdiff_t>(g.in[a]);
    g.pad[a] = needed > 0 ? static_cast<std::size_t>(needed) / 2 : 0;
  }
  return g;
}

template <typename T, bool Accumulate>
void im2col_pass(const ConvGeometry& g, const T* x, T* col) {
  const std::size_t P = g.col_cols();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.in_volume();
    for (std::size_t kh = 0; kh < g.kernel[0]; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel[1]; ++kw) {
        for (std::size_t kl = 0; kl < g.kernel[2]; ++kl, ++row) {
          T* dst = col + row * P;
          std::size_t p = 0;
          for (std::size_t oh = 0; oh < g.out[0]; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride[0] + kh) - static_cast<std::ptrdiff_t>(g.pad[0]);
            const bool h_ok = ih >= 0 && ih < static_cast<std::ptrdiff_t>(g.in[0]);
            for (std::size_t ow = 0; ow < g.out[1]; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride[1] + kw) - static_cast<std::ptrdiff_t>(g.pad[1]);
              const bool hw_ok = h_ok && iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.in[1]);
              if (!hw_ok) {
                if constexpr (!Accumulate) std::fill_n(dst + p, g.out[2], T{0});
                p += g.out[2];
                continue;
              }
              const T* src = xc + (static_cast<std::size_t>(ih) * g.in[1] + static_cast<std::size_t>(iw)) * g.in[2];
              for (std::size_t ol = 0; ol < g.out[2]; ++ol, ++p) {
                const std::ptrdiff_t il = static_cast<std::ptrdiff_t>(ol * g.stride[2] + kl) - static_cast<std::ptrdiff_t>(g.pad[2]);
                const bool ok = il >= 0 && il < static_cast<std::ptrdiff_t>(g.in[2]);
                if constexpr (Accumulate) {
                  // col2im: col is the source, x the destination.
                  if (ok) const_cast<T*>(src)[il] += dst[p];
                } else {
                  dst[p] = ok ? src[il] : T{0};
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  im2col_pass<T, false>(g, x, col);
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* dx) {
  im2col_pass<T, true>(g, dx, const_cast<T*>(col));
}

}  // namespace detail

// x[B,C,H,W,L] (*) w[Cout,C,kh,kw,kl] with same-padding, optional bias[Cout].
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = Var<T>(), Stride3 stride = {1, 1, 1}) {
  using namespace detail;
  require(x.rank() == 5, "conv3d: input must be [B,C,H,W,L], got " + to_string(x.shape()));
  require(weight.rank() == 5, "conv3d: weight must be [Cout,C,kh,kw,kl], got " + to_string(weight.shape()));
  require(x.dim(1) == weight.dim(1), "conv3d: input channels of " + to_string(x.shape()) +
                                         " do not match weight " + to_string(weight.shape()));
  const bool has_bias = bias.defined();
  const std::size_t cout = weight.dim(0);
  if (has_bias) require(bias.rank() == 1 && bias.dim(0) == cout, "conv3d: bias shape mismatch");
  const ConvGeometry g = conv_geometry(x.shape(), weight.shape(), stride);
  const std::size_t B = x.dim(0), K = g.col_rows(), P = g.col_cols();
  Tensor<T> out(Shape{B, cout, g.out[0], g.out[1], g.out[2]});
  AlignedVector<T> col(g.pointwise() ? 0 : K * P);
  ConstMatMap<T> W(weight.value().ptr(), cout, K);
  for (std::size_t b = 0; b < B; ++b) {
    const T* xb = x.value().ptr() + b * g.channels * g.in_volume();
    const T* cp = xb;
    if (!g.pointwise()) {
      im2col(g, xb, col.data());
      cp = col.data();
    }
    MatMap<T> Y(out.ptr() + b * cout * P, cout, P);
    Y.noalias() = W * ConstMatMap<T>(cp, K, P);
    if (has_bias) Y.colwise() += ConstVecMap<T>(bias.value().ptr(), cout);
  }
  check_finite(out, "conv3d");
  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return Var<T>::make(std::move(out), "conv3d", std::move(inputs), [g, B, cout, K, P](auto& self) {
    auto& xi = *self.inputs[0];
    auto& wi = *self.inputs[1];
    const bool need_bias = self.inputs.size() > 2 && self.inputs[2]->requires_grad;
    AlignedVector<T> col(g.pointwise() ? 0 : K * P);
    AlignedVector<T> dcol(g.pointwise() || !xi.requires_grad ? 0 : K * P);
    ConstMatMap<T> W(wi.value.ptr(), cout, K);
    for (std::size_t b = 0; b < B; ++b) {
      ConstMatMap<T> G(self.grad.ptr() + b * cout * P, cout, P);
      const T* xb = xi.value.ptr() + b * g.channels * g.in_volume();
      if (wi.requires_grad) {
        const T* cp = xb;
        if (!g.pointwise()) {
          im2col(g, xb, col.data());
          cp = col.data();
        }
        MatMap<T>(wi.grad_buffer(), cout, K).noalias() += G * ConstMatMap<T>(cp, K, P).transpose();
      }
      if (xi.requires_grad) {
        T* dxb = xi.grad_buffer() + b * g.channels * g.in_volume();
        if (g.pointwise()) {
          MatMap<T>(dxb, K, P).noalias() += W.transpose() * G;
        } else {
          MatMap<T>(dcol.data(), K, P).noalias() = W.transpose() * G;
          col2im(g, dcol.data(), dxb);
        }
      }
      if (need_bias) VecMap<T>(self.inputs[2]->grad_buffer(), cout) += G.rowwise().sum();
    }
  });
}

// ---------------------------------------------------------------- softmax

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  Tensor<T> out(x.shape());
  const T* in = x.value().ptr();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = in[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, in[base + k * s.inner]);
      T z{0};
      for (std::size_t k = 0; k < s.extent; ++k) {
        const T e = std::exp(in[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      const T inv = T{1} / z;
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] *= inv;
    }
  }
  return Var<T>::make(std::move(out), "softmax", {x}, [s](auto& self) {
    T* d = self.inputs[0]->grad_buffer();
    const T* y = self.value.ptr();
    const T* g = self.grad.ptr();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        T dot{0};
        for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t idx = base + k * s.inner;
          d[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------- normalisation

namespace detail {

struct RowStats {
  std::vector<double> mean;
  std::vector<double> rstd;
};

// Normalises each contiguous row of length `cols` to zero mean, unit
// (population) variance.
template <typename T>
RowStats normalize_rows(const T* x, T* y, std::size_t rows, std::size_t cols, double eps) {
  RowStats st{std::vector<double>(rows), std::vector<double>(rows)};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    double m = 0.0;
    for (std::size_t c = 0; c < cols; ++c) m += static_cast<double>(xr[c]);
    m /= static_cast<double>(cols);
    double v = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double dlt = static_cast<double>(xr[c]) - m;
      v += dlt * dlt;
    }
    v /= static_cast<double>(cols);
    const double rstd = 1.0 / std::sqrt(v + eps);
    st.mean[r] = m;
    st.rstd[r] = rstd;
    T* yr = y + r * cols;
    for (std::size_t c = 0; c < cols; ++c) yr[c] = static_cast<T>((static_cast<double>(xr[c]) - m) * rstd);
  }
  return st;
}

// dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
template <typename T>
void normalize_rows_backward(const T* xhat, const T* dxhat, T* dx, const RowStats& st, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xh = xhat + r * cols;
    const T* dy = dxhat + r * cols;
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      s1 += static_cast<double>(dy[c]);
      s2 += static_cast<double>(dy[c]) * static_cast<double>(xh[c]);
    }
    s1 /= static_cast<double>(cols);
    s2 /= static_cast<double>(cols);
    T* d = dx + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      d[c] += static_cast<T>(st.rstd[r] * (static_cast<double>(dy[c]) - s1 - static_cast<double>(xh[c]) * s2));
    }
  }
}

}  // namespace detail

// Normalises every (batch, channel) slice over its spatial extent; no affine.
template <typename T>
Var<T> instance_norm(const Var<T>& x, double eps = 1e-5) {
  detail::require(x.rank() >= 3, "instance_norm: input must be [B,C,...], got " + to_string(x.shape()));
  const std::size_t rows = x.dim(0) * x.dim(1);
  const std::size_t cols = x.size() / rows;
  Tensor<T> out(x.shape());
  auto stats = std::make_shared<detail::RowStats>(detail::normalize_rows(x.value().ptr(), out.ptr(), rows, cols, eps));
  return Var<T>::make(std::move(out), "instance_norm", {x}, [stats, rows, cols](auto& self) {
    detail::normalize_rows_backward(self.value.ptr(), self.grad.ptr(), self.inputs[0]->grad_buffer(), *stats, rows, cols);
  });
}

// Normalises over the trailing feature axis; no affine.
template <typename T>
Var<T> layer_norm(const Var<T>& x, double eps = 1e-5) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  Tensor<T> out(x.shape());
  auto stats = std::make_shared<detail::RowStats>(detail::normalize_rows(x.value().ptr(), out.ptr(), rows, cols, eps));
  return Var<T>::make(std::move(out), "layer_norm", {x}, [stats, rows, cols](auto& self) {
    detail::normalize_rows_backward(self.value.ptr(), self.grad.ptr(), self.inputs[0]->grad_buffer(), *stats, rows, cols);
  });
}

// Layer norm with per-feature gain and shift.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
  const std::size_t cols = x.shape().back();
  detail::require(gamma.size() == cols && beta.size() == cols, "layer_norm: affine parameters must match trailing axis");
  const std::size_t rows = x.size() / cols;
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  auto stats = std::make_shared<detail::RowStats>(detail::normalize_rows(x.value().ptr(), xhat->ptr(), rows, cols, eps));
  Tensor<T> out(x.shape());
  const T* g = gamma.value().ptr();
  const T* b = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (*xhat)[r * cols + c] * g[c] + b[c];
  }
  return Var<T>::make(std::move(out), "layer_norm_affine", {x, gamma, beta}, [xhat, stats, rows, cols](auto& self) {
    auto& xi = *self.inputs[0];
    auto& gi = *self.inputs[1];
    auto& bi = *self.inputs[2];
    const T* dy = self.grad.ptr();
    if (gi.requires_grad || bi.requires_grad) {
      T* dg = gi.requires_grad ? gi.grad_buffer() : nullptr;
      T* db = bi.requires_grad ? bi.grad_buffer() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          if (dg) dg[c] += dy[r * cols + c] * (*xhat)[r * cols + c];
          if (db) db[c] += dy[r * cols + c];
        }
      }
    }
    if (xi.requires_grad) {
      std::vector<T> dxhat(rows * cols);
      const T* g = gi.value.ptr();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) dxhat[r * cols + c] = dy[r * cols + c] * g[c];
      }
      detail::normalize_rows_backward(xhat->ptr(), dxhat.data(), xi.grad_buffer(), *stats, rows, cols);
    }
  });
}

// ---------------------------------------------------------------- activations / resampling

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.01)) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v >= T{0} ? v : slope * v;
  return Var<T>::make(std::move(out), "leaky_relu", {x}, [slope](auto& self) {
    auto& xi = *self.inputs[0];
    T* d = xi.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += xi.value[i] >= T{0} ? self.grad[i] : slope * self.grad[i];
  });
}

enum class UpsampleAxes { InPlane, Volumetric };

// Nearest-neighbour x2 along H,W (and L for Volumetric) of a [B,C,H,W,L] tensor.
template <typename T>
Var<T> upsample_x2(const Var<T>& x, UpsampleAxes axes) {
  detail::require(x.rank() == 5, "upsample_x2: input must be [B,C,H,W,L], got " + to_string(x.shape()));
  const std::size_t fl = axes == UpsampleAxes::Volumetric ? 2 : 1;
  const std::size_t BC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), L = x.dim(4);
  const std::size_t Ho = 2 * H, Wo = 2 * W, Lo = fl * L;
  auto index = std::make_shared<std::vector<std::int64_t>>(BC * Ho * Wo * Lo);
  std::size_t i = 0;
  for (std::size_t bc = 0; bc < BC; ++bc)
    for (std::size_t h = 0; h < Ho; ++h)
      for (std::size_t w = 0; w < Wo; ++w)
        for (std::size_t l = 0; l < Lo; ++l)
          (*index)[i++] = static_cast<std::int64_t>(((bc * H + h / 2) * W + w / 2) * L + l / fl);
  return gather(x, std::shared_ptr<const std::vector<std::int64_t>>(std::move(index)), Shape{x.dim(0), x.dim(1), Ho, Wo, Lo});
}

// Mean over all spatial positions: [B,C,...] -> [B,C].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require(x.rank() >= 3, "global_avg_pool: input must be [B,C,...]");
  const std::size_t rows = x.dim(0) * x.dim(1);
  const std::size_t cols = x.size() / rows;
  Tensor<T> out(Shape{x.dim(0), x.dim(1)});
  for (std::size_t r = 0; r < rows; ++r) {
    T s{0};
    for (std::size_t c = 0; c < cols; ++c) s += x.value()[r * cols + c];
    out[r] = s / static_cast<T>(cols);
  }
  return Var<T>::make(std::move(out), "global_avg_pool", {x}, [rows, cols](auto& self) {
    T* d = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T g = self.grad[r] / static_cast<T>(cols);
      for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += g;
    }
  });
}

// Corner-aligned trilinear resampling of the last three axes; leading axes are
// treated as independent channels. Inference only.
template <typename T>
Tensor<T> trilinear_resample(const Tensor<T>& x, const std::array<std::size_t, 3>& target) {
  detail::require(x.rank() >= 3, "trilinear_resample: input needs at least three axes");
  for (std::size_t e : target) detail::require(e > 0, "trilinear_resample: target extents must be positive");
  const std::size_t r = x.rank();
  const std::array<std::size_t, 3> in{x.dim(r - 3), x.dim(r - 2), x.dim(r - 1)};
  const std::size_t lead = x.size() / (in[0] * in[1] * in[2]);
  Shape out_shape = x.shape();
  for (int a = 0; a < 3; ++a) out_shape[r - 3 + a] = target[a];
  Tensor<T> out(out_shape);

  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [](std::size_t n_in, std::size_t n_out) {
    std::vector<Tap> t(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double pos = n_out == 1 ? 0.5 * static_cast<double>(n_in - 1)
                                    : static_cast<double>(o) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
      std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
      if (i0 >= n_in - 1) i0 = n_in >= 2 ? n_in - 2 : 0;
      const std::size_t i1 = n_in >= 2 ? i0 + 1 : 0;
      t[o] = {i0, i1, n_in >= 2 ? pos - static_cast<double>(i0) : 0.0};
    }
    return t;
  };
  const auto th = taps(in[0], target[0]), tw = taps(in[1], target[1]), tl = taps(in[2], target[2]);
  const std::size_t vin = in[0] * in[1] * in[2];
  const std::size_t vout = target[0] * target[1] * target[2];
  for (std::size_t c = 0; c < lead; ++c) {
    const T* src = x.ptr() + c * vin;
    T* dst = out.ptr() + c * vout;
    auto at = [&](std::size_t h, std::size_t w, std::size_t l) { return static_cast<double>(src[(h * in[1] + w) * in[2] + l]); };
    std::size_t o = 0;
    for (const Tap& a : th)
      for (const Tap& b : tw)
        for (const Tap& d : tl) {
          const double c00 = at(a.i0, b.i0, d.i0) * (1 - d.w1) + at(a.i0, b.i0, d.i1) * d.w1;
          const double c01 = at(a.i0, b.i1, d.i0) * (1 - d.w1) + at(a.i0, b.i1, d.i1) * d.w1;
          const double c10 = at(a.i1, b.i0, d.i0) * (1 - d.w1) + at(a.i1, b.i0, d.i1) * d.w1;
          const double c11 = at(a.i1, b.i1, d.i0) * (1 - d.w1) + at(a.i1, b.i1, d.i1) * d.w1;
          const double c0 = c00 * (1 - b.w1) + c01 * b.w1;
          const double c1 = c10 * (1 - b.w1) + c11 * b.w1;
          dst[o++] = static_cast<T>(c0 * (1 - a.w1) + c1 * a.w1);
        }
  }
  return out;
}

}  // namespace mdust
