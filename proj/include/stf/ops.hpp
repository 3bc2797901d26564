#pragma once

// Differentiable kernels. Activations are laid out N x C x T x V (row-major,
// V fastest). Every kernel returns a fresh tensor and, when recording,
// attaches its vector-Jacobian rule.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "stf/tensor.hpp"

namespace stf::inline STF_PRECISION_NS::ops {

namespace detail {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline ConstMatMap cmat(const real* p, std::size_t rows, std::size_t cols) {
  return ConstMatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MatMap mat(real* p, std::size_t rows, std::size_t cols) {
  return MatMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline ConstStridedMap cmat(const real* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return ConstStridedMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}
inline StridedMap mat(real* p, std::size_t rows, std::size_t cols, std::size_t stride) {
  return StridedMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

// Gradient sink of input i, or nullptr when that input is a constant.
inline real* sink(Node& self, std::size_t i) {
  if (i >= self.inputs.size() || !self.inputs[i]->requires_grad) return nullptr;
  return self.inputs[i]->grad_buffer().data();
}

inline const real* val(Node& self, std::size_t i) { return self.inputs[i]->value.data(); }

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline void require_rank(const char* op, const Tensor& t, std::size_t lo, std::size_t hi) {
  if (t.rank() < lo || t.rank() > hi) {
    throw ShapeError(std::string(op) + ": unexpected rank " + std::to_string(t.rank()) + " for " +
                     shape_str(t.shape()));
  }
}

// Product of extents in [from, to).
inline std::size_t span_numel(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------- pointwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (real* g = detail::sink(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (real* g = detail::sink(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const real* av = detail::val(self, 0);
    const real* bv = detail::val(self, 1);
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (real* g = detail::sink(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, real s) {
  std::vector<real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a.values()[i];
  return make_result("scale", a.shape(), std::move(out), {a}, [s](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    }
  });
}

// weights[index] * x, differentiable in both.
inline Tensor weighted(const Tensor& x, const Tensor& weights, std::size_t index) {
  if (index >= weights.numel()) throw ShapeError("weighted: index out of range");
  const real w = weights.values()[index];
  std::vector<real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w * x.values()[i];
  return make_result("weighted", x.shape(), std::move(out), {x, weights}, [index](Node& self) {
    const real* xv = detail::val(self, 0);
    const real w = detail::val(self, 1)[index];
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += w * self.grad[i];
    }
    if (real* g = detail::sink(self, 1)) {
      real acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
      g[index] += acc;
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] > real(0) ? x.values()[i] : real(0);
  return make_result("relu", x.shape(), std::move(out), {x}, [](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (self.value[i] > real(0)) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const real v = x.values()[i];
    // split by sign so exp never overflows
    out[i] = v >= 0 ? real(1) / (real(1) + std::exp(-v)) : std::exp(v) / (real(1) + std::exp(v));
  }
  return make_result("sigmoid", x.shape(), std::move(out), {x}, [](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const real s = self.value[i];
        g[i] += self.grad[i] * s * (real(1) - s);
      }
    }
  });
}

// Sum of every element, as a one-element tensor.
inline Tensor sum(const Tensor& x) {
  real acc = 0;
  for (real v : x.values()) acc += v;
  return make_result("sum", {1}, {acc}, {x}, [](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      const real s = self.grad[0];
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += s;
    }
  });
}

// ---------------------------------------------------------------- layout

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result("reshape", std::move(shape), x.values(), {x}, [](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// out.shape[i] = x.shape[perm[i]]
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  // source offset of every output element, in output order
  std::vector<std::size_t> src(x.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < src.size(); ++flat) {
      src[flat] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        off -= src_stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[src[i]];
  return make_result("permute", std::move(out_shape), std::move(out), {x},
                     [src = std::move(src)](Node& self) {
                       if (real* g = detail::sink(self, 0)) {
                         for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                       }
                     });
}

// Repeats each element of x over the trailing axes of `target`; x.shape must
// be a prefix of target.
inline Tensor expand_trailing(const Tensor& x, const Shape& target) {
  if (x.rank() > target.size() || !std::equal(x.shape().begin(), x.shape().end(), target.begin())) {
    throw ShapeError("expand_trailing: " + shape_str(x.shape()) + " is not a prefix of " + shape_str(target));
  }
  const std::size_t block = detail::span_numel(target, x.rank(), target.size());
  std::vector<real> out(x.numel() * block);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * block), block, x.values()[i]);
  }
  return make_result("expand_trailing", target, std::move(out), {x}, [block](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) {
        real acc = 0;
        for (std::size_t j = 0; j < block; ++j) acc += self.grad[i * block + j];
        g[i] += acc;
      }
    }
  });
}

// Mean over one axis; the axis is removed.
inline Tensor mean(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("mean: axis out of range");
  const std::size_t outer = detail::span_numel(x.shape(), 0, axis);
  const std::size_t len = x.shape()[axis];
  const std::size_t inner = detail::span_numel(x.shape(), axis + 1, x.rank());
  if (len == 0) throw ShapeError("mean over empty axis");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  std::vector<real> out(outer * inner, real(0));
  const real inv = real(1) / static_cast<real>(len);
  const real* xv = x.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const real* row = xv + (o * len + l) * inner;
      real* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
    }
  }
  for (auto& v : out) v *= inv;
  return make_result("mean", std::move(out_shape), std::move(out), {x}, [outer, len, inner, inv](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t l = 0; l < len; ++l) {
          real* dst = g + (o * len + l) * inner;
          const real* src = self.grad.data() + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += inv * src[i];
        }
      }
    }
  });
}

// ---------------------------------------------------------------- products

// [m,k] x [k,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2, 2);
  detail::require_rank("matmul", b, 2, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<real> out(m * n);
  detail::mat(out.data(), m, n).noalias() = detail::cmat(a.values().data(), m, k) * detail::cmat(b.values().data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    auto dy = detail::cmat(self.grad.data(), m, n);
    if (real* g = detail::sink(self, 0)) {
      detail::mat(g, m, k).noalias() += dy * detail::cmat(detail::val(self, 1), k, n).transpose();
    }
    if (real* g = detail::sink(self, 1)) {
      detail::mat(g, k, n).noalias() += detail::cmat(detail::val(self, 0), m, k).transpose() * dy;
    }
  });
}

// [..., m, k] x [..., k, n] with identical leading axes.
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() < 3 || a.rank() != b.rank()) throw ShapeError("bmm: rank mismatch");
  const std::size_t r = a.rank();
  if (!std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw ShapeError("bmm: batch axes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
  if (b.dim(r - 2) != k) throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t batch = detail::span_numel(a.shape(), 0, r - 2);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<real> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::mat(out.data() + i * m * n, m, n).noalias() =
        detail::cmat(a.values().data() + i * m * k, m, k) * detail::cmat(b.values().data() + i * k * n, k, n);
  }
  return make_result("bmm", std::move(out_shape), std::move(out), {a, b}, [batch, m, k, n](Node& self) {
    real* ga = detail::sink(self, 0);
    real* gb = detail::sink(self, 1);
    for (std::size_t i = 0; i < batch; ++i) {
      auto dy = detail::cmat(self.grad.data() + i * m * n, m, n);
      if (ga) {
        detail::mat(ga + i * m * k, m, k).noalias() +=
            dy * detail::cmat(detail::val(self, 1) + i * k * n, k, n).transpose();
      }
      if (gb) {
        detail::mat(gb + i * k * n, k, n).noalias() +=
            detail::cmat(detail::val(self, 0) + i * m * k, m, k).transpose() * dy;
      }
    }
  });
}

// Pointwise (1x1) convolution over the channel axis of [N, Cin, ...].
// weight [Cout, Cin]; bias [Cout] or undefined.
inline Tensor conv1x1(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  if (x.rank() < 2) throw ShapeError("conv1x1: input needs a channel axis");
  detail::require_rank("conv1x1 weight", weight, 2, 2);
  const std::size_t batch = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv1x1: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != cout) throw ShapeError("conv1x1: bias size");
  const std::size_t len = detail::span_numel(x.shape(), 2, x.rank());
  Shape out_shape = x.shape();
  out_shape[1] = cout;
  std::vector<real> out(batch * cout * len);
  auto w = detail::cmat(weight.values().data(), cout, cin);
  for (std::size_t n = 0; n < batch; ++n) {
    auto y = detail::mat(out.data() + n * cout * len, cout, len);
    y.noalias() = w * detail::cmat(x.values().data() + n * cin * len, cin, len);
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) y.row(static_cast<Eigen::Index>(o)).array() += bias.values()[o];
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("conv1x1", std::move(out_shape), std::move(out), std::move(inputs),
                     [batch, cin, cout, len](Node& self) {
                       real* gx = detail::sink(self, 0);
                       real* gw = detail::sink(self, 1);
                       real* gb = detail::sink(self, 2);
                       auto w = detail::cmat(detail::val(self, 1), cout, cin);
                       for (std::size_t n = 0; n < batch; ++n) {
                         auto dy = detail::cmat(self.grad.data() + n * cout * len, cout, len);
                         if (gx) detail::mat(gx + n * cin * len, cin, len).noalias() += w.transpose() * dy;
                         if (gw) {
                           detail::mat(gw, cout, cin).noalias() +=
                               dy * detail::cmat(detail::val(self, 0) + n * cin * len, cin, len).transpose();
                         }
                         if (gb) {
                           for (std::size_t o = 0; o < cout; ++o) gb[o] += dy.row(static_cast<Eigen::Index>(o)).sum();
                         }
                       }
                     });
}

// Affine map [N, Cin] -> [N, Cout]; weight [Cout, Cin].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  detail::require_rank("linear", x, 2, 2);
  detail::require_rank("linear weight", weight, 2, 2);
  const std::size_t batch = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin) throw ShapeError("linear: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  if (bias.defined() && bias.numel() != cout) throw ShapeError("linear: bias size");
  std::vector<real> out(batch * cout);
  auto y = detail::mat(out.data(), batch, cout);
  y.noalias() = detail::cmat(x.values().data(), batch, cin) * detail::cmat(weight.values().data(), cout, cin).transpose();
  if (bias.defined()) {
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t o = 0; o < cout; ++o) out[n * cout + o] += bias.values()[o];
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("linear", {batch, cout}, std::move(out), std::move(inputs), [batch, cin, cout](Node& self) {
    auto dy = detail::cmat(self.grad.data(), batch, cout);
    if (real* g = detail::sink(self, 0)) {
      detail::mat(g, batch, cin).noalias() += dy * detail::cmat(detail::val(self, 1), cout, cin);
    }
    if (real* g = detail::sink(self, 1)) {
      detail::mat(g, cout, cin).noalias() += dy.transpose() * detail::cmat(detail::val(self, 0), batch, cin);
    }
    if (real* g = detail::sink(self, 2)) {
      for (std::size_t o = 0; o < cout; ++o) g[o] += dy.col(static_cast<Eigen::Index>(o)).sum();
    }
  });
}

struct TemporalConvSpec {
  std::size_t stride = 1;
  std::size_t groups = 1;
};

inline std::size_t temporal_output_length(std::size_t frames, std::size_t kernel, std::size_t stride) {
  const std::size_t pad = (kernel - 1) / 2;
  return (frames + 2 * pad - kernel) / stride + 1;
}

// Temporal convolution over axis 2 of [N, Cin, T] or [N, Cin, T, V].
// weight [Cout, Cin/groups, K] with K odd; symmetric zero padding (K-1)/2.
inline Tensor temporal_conv(const Tensor& x, const Tensor& weight, const Tensor& bias = {},
                            TemporalConvSpec spec = {}) {
  detail::require_rank("temporal_conv", x, 3, 4);
  detail::require_rank("temporal_conv weight", weight, 3, 3);
  const std::size_t batch = x.dim(0), cin = x.dim(1), frames = x.dim(2);
  const std::size_t joints = x.rank() == 4 ? x.dim(3) : 1;
  const std::size_t cout = weight.dim(0), kernel = weight.dim(2);
  const std::size_t groups = spec.groups, stride = spec.stride;
  if (kernel % 2 == 0) throw ConfigError("temporal_conv: kernel size must be odd, got " + std::to_string(kernel));
  if (stride == 0 || groups == 0 || cin % groups != 0 || cout % groups != 0) {
    throw ConfigError("temporal_conv: groups " + std::to_string(groups) + " must divide channels " +
                      std::to_string(cin) + " -> " + std::to_string(cout));
  }
  const std::size_t cin_g = cin / groups, cout_g = cout / groups;
  if (weight.dim(1) != cin_g) {
    throw ShapeError("temporal_conv: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != cout) throw ShapeError("temporal_conv: bias size");
  const std::size_t pad = (kernel - 1) / 2;
  const std::size_t tout = temporal_output_length(frames, kernel, stride);

  // per-(group, tap) weight slices, each cout_g x cin_g
  auto split_taps = [groups, cout_g, cin_g, kernel](const real* w) {
    std::vector<detail::RowMat> taps(groups * kernel, detail::RowMat(cout_g, cin_g));
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t o = 0; o < cout_g; ++o)
        for (std::size_t c = 0; c < cin_g; ++c)
          for (std::size_t k = 0; k < kernel; ++k)
            taps[g * kernel + k](static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(c)) =
                w[((g * cout_g + o) * cin_g + c) * kernel + k];
    return taps;
  };
  // output frames [lo, hi) that read an in-range input frame at tap k
  auto valid_range = [pad, stride, frames, tout](std::size_t k) {
    const long shift = static_cast<long>(k) - static_cast<long>(pad);
    const long s = static_cast<long>(stride);
    long lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
    long hi = (static_cast<long>(frames) - 1 - shift) / s + 1;
    if (static_cast<long>(frames) - 1 - shift < 0) hi = 0;
    lo = std::min<long>(lo, static_cast<long>(tout));
    hi = std::clamp<long>(hi, lo, static_cast<long>(tout));
    return std::pair<std::size_t, std::size_t>(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi));
  };

  const auto taps = split_taps(weight.values().data());
  const std::size_t in_plane = frames * joints, out_plane = tout * joints;
  std::vector<real> out(batch * cout * out_plane, real(0));
  std::vector<real> gather;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const real* xg = x.values().data() + (n * cin + g * cin_g) * in_plane;
      real* yg = out.data() + (n * cout + g * cout_g) * out_plane;
      for (std::size_t k = 0; k < kernel; ++k) {
        const auto [lo, hi] = valid_range(k);
        if (lo >= hi) continue;
        const std::size_t cols = (hi - lo) * joints;
        const std::size_t first_in = lo * stride + k - pad;
        auto y = detail::mat(yg + lo * joints, cout_g, cols, out_plane);
        if (stride == 1) {
          y.noalias() += taps[g * kernel + k] * detail::cmat(xg + first_in * joints, cin_g, cols, in_plane);
        } else {
          gather.resize(cin_g * cols);
          for (std::size_t c = 0; c < cin_g; ++c)
            for (std::size_t t = lo; t < hi; ++t)
              std::copy_n(xg + c * in_plane + (t * stride + k - pad) * joints, joints,
                          gather.data() + c * cols + (t - lo) * joints);
          y.noalias() += taps[g * kernel + k] * detail::cmat(gather.data(), cin_g, cols);
        }
      }
    }
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) {
        real* row = out.data() + (n * cout + o) * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) row[i] += bias.values()[o];
      }
    }
  }

  Shape out_shape = x.shape();
  out_shape[1] = cout;
  out_shape[2] = tout;
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      "temporal_conv", std::move(out_shape), std::move(out), std::move(inputs),
      [=, taps = std::move(taps)](Node& self) {
        real* gx = detail::sink(self, 0);
        real* gw = detail::sink(self, 1);
        real* gb = detail::sink(self, 2);
        const real* xv = detail::val(self, 0);
        std::vector<detail::RowMat> dtaps;
        if (gw) dtaps.assign(groups * kernel, detail::RowMat::Zero(cout_g, cin_g));
        std::vector<real> buf, dbuf;
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t g = 0; g < groups; ++g) {
            const real* xg = xv + (n * cin + g * cin_g) * in_plane;
            const real* dyg = self.grad.data() + (n * cout + g * cout_g) * out_plane;
            for (std::size_t k = 0; k < kernel; ++k) {
              const auto [lo, hi] = valid_range(k);
              if (lo >= hi) continue;
              const std::size_t cols = (hi - lo) * joints;
              const std::size_t first_in = lo * stride + k - pad;
              auto dy = detail::cmat(dyg + lo * joints, cout_g, cols, out_plane);
              if (stride == 1) {
                if (gw) dtaps[g * kernel + k].noalias() += dy * detail::cmat(xg + first_in * joints, cin_g, cols, in_plane).transpose();
                if (gx) {
                  real* gxg = gx + (n * cin + g * cin_g) * in_plane;
                  detail::mat(gxg + first_in * joints, cin_g, cols, in_plane).noalias() +=
                      taps[g * kernel + k].transpose() * dy;
                }
              } else {
                if (gw) {
                  buf.resize(cin_g * cols);
                  for (std::size_t c = 0; c < cin_g; ++c)
                    for (std::size_t t = lo; t < hi; ++t)
                      std::copy_n(xg + c * in_plane + (t * stride + k - pad) * joints, joints,
                                  buf.data() + c * cols + (t - lo) * joints);
                  dtaps[g * kernel + k].noalias() += dy * detail::cmat(buf.data(), cin_g, cols).transpose();
                }
                if (gx) {
                  dbuf.assign(cin_g * cols, real(0));
                  detail::mat(dbuf.data(), cin_g, cols).noalias() = taps[g * kernel + k].transpose() * dy;
                  real* gxg = gx + (n * cin + g * cin_g) * in_plane;
                  for (std::size_t c = 0; c < cin_g; ++c)
                    for (std::size_t t = lo; t < hi; ++t) {
                      real* dst = gxg + c * in_plane + (t * stride + k - pad) * joints;
                      const real* src = dbuf.data() + c * cols + (t - lo) * joints;
                      for (std::size_t v = 0; v < joints; ++v) dst[v] += src[v];
                    }
                }
              }
            }
          }
          if (gb) {
            for (std::size_t o = 0; o < cout; ++o) {
              const real* row = self.grad.data() + (n * cout + o) * out_plane;
              real acc = 0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += row[i];
              gb[o] += acc;
            }
          }
        }
        if (gw) {
          for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t o = 0; o < cout_g; ++o)
              for (std::size_t c = 0; c < cin_g; ++c)
                for (std::size_t k = 0; k < kernel; ++k)
                  gw[((g * cout_g + o) * cin_g + c) * kernel + k] +=
                      dtaps[g * kernel + k](static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(c));
        }
      });
}

// Contracts the joint axis against a stack of K joint-space operators:
// z [N, K, C, T, V], ops [K, U, V] -> out [N, C, T, U],
// out[n,c,t,u] = sum_k sum_v ops[k,u,v] * z[n,k,c,t,v].
inline Tensor graph_aggregate(const Tensor& z, const Tensor& ops) {
  detail::require_rank("graph_aggregate", z, 5, 5);
  detail::require_rank("graph_aggregate operators", ops, 3, 3);
  const std::size_t batch = z.dim(0), subsets = z.dim(1), ch = z.dim(2), frames = z.dim(3), joints = z.dim(4);
  if (ops.dim(0) != subsets || ops.dim(2) != joints) {
    throw ShapeError("graph_aggregate: operators " + shape_str(ops.shape()) + " vs features " + shape_str(z.shape()));
  }
  const std::size_t out_joints = ops.dim(1);
  const std::size_t rows = ch * frames;
  std::vector<real> out(batch * rows * out_joints, real(0));
  for (std::size_t n = 0; n < batch; ++n) {
    auto y = detail::mat(out.data() + n * rows * out_joints, rows, out_joints);
    for (std::size_t k = 0; k < subsets; ++k) {
      y.noalias() += detail::cmat(z.values().data() + (n * subsets + k) * rows * joints, rows, joints) *
                     detail::cmat(ops.values().data() + k * out_joints * joints, out_joints, joints).transpose();
    }
  }
  return make_result("graph_aggregate", {batch, ch, frames, out_joints}, std::move(out), {z, ops},
                     [=](Node& self) {
                       real* gz = detail::sink(self, 0);
                       real* ga = detail::sink(self, 1);
                       for (std::size_t n = 0; n < batch; ++n) {
                         auto dy = detail::cmat(self.grad.data() + n * rows * out_joints, rows, out_joints);
                         for (std::size_t k = 0; k < subsets; ++k) {
                           auto a = detail::cmat(detail::val(self, 1) + k * out_joints * joints, out_joints, joints);
                           const std::size_t zoff = (n * subsets + k) * rows * joints;
                           if (gz) detail::mat(gz + zoff, rows, joints).noalias() += dy * a;
                           if (ga) {
                             detail::mat(ga + k * out_joints * joints, out_joints, joints).noalias() +=
                                 dy.transpose() * detail::cmat(detail::val(self, 0) + zoff, rows, joints);
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------- normalization

inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  const std::size_t len = x.shape()[axis];
  if (len == 0) throw ShapeError("softmax over empty axis");
  const std::size_t outer = detail::span_numel(x.shape(), 0, axis);
  const std::size_t inner = detail::span_numel(x.shape(), axis + 1, x.rank());
  std::vector<real> out(x.numel());
  const real* xv = x.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      real mx = -std::numeric_limits<real>::infinity();
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      real denom = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const real e = std::exp(xv[base + l * inner] - mx);
        out[base + l * inner] = e;
        denom += e;
      }
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= denom;
    }
  }
  return make_result("softmax", x.shape(), std::move(out), {x}, [outer, len, inner](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          real dot = 0;
          for (std::size_t l = 0; l < len; ++l) dot += self.grad[base + l * inner] * self.value[base + l * inner];
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t j = base + l * inner;
            g[j] += self.value[j] * (self.grad[j] - dot);
          }
        }
      }
    }
  });
}

// Running statistics owned by a batch-norm layer.
struct BatchNormState {
  std::vector<real> running_mean;
  std::vector<real> running_var;
  real momentum = real(0.9);
  real eps = real(1e-5);
};

// Per-channel normalization of [N, C, ...] over every axis except 1.
// Training mode normalizes with batch statistics and updates `state`;
// inference mode is the frozen affine map.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                         bool training) {
  if (x.rank() < 2) throw ShapeError("batch_norm: input needs a channel axis");
  const std::size_t batch = x.dim(0), ch = x.dim(1);
  const std::size_t len = detail::span_numel(x.shape(), 2, x.rank());
  if (gamma.numel() != ch || beta.numel() != ch || state.running_mean.size() != ch ||
      state.running_var.size() != ch) {
    throw ShapeError("batch_norm: parameter size vs " + std::to_string(ch) + " channels");
  }
  const std::size_t count = batch * len;
  std::vector<real> mean(ch), inv_std(ch);
  const real* xv = x.values().data();
  if (training) {
    if (count < 2) throw ShapeError("batch_norm: training needs more than one value per channel");
    for (std::size_t c = 0; c < ch; ++c) {
      real s = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const real* p = xv + (n * ch + c) * len;
        for (std::size_t i = 0; i < len; ++i) s += p[i];
      }
      const real mu = s / static_cast<real>(count);
      real ss = 0;
      for (std::size_t n = 0; n < batch; ++n) {
        const real* p = xv + (n * ch + c) * len;
        for (std::size_t i = 0; i < len; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const real var = ss / static_cast<real>(count);
      mean[c] = mu;
      inv_std[c] = real(1) / std::sqrt(var + state.eps);
      const real unbiased = ss / static_cast<real>(count - 1);
      state.running_mean[c] = state.momentum * state.running_mean[c] + (real(1) - state.momentum) * mu;
      state.running_var[c] = state.momentum * state.running_var[c] + (real(1) - state.momentum) * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = real(1) / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  std::vector<real> xhat(x.numel()), out(x.numel());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t off = (n * ch + c) * len;
      const real gm = gamma.values()[c], bt = beta.values()[c];
      for (std::size_t i = 0; i < len; ++i) {
        const real h = (xv[off + i] - mean[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = gm * h + bt;
      }
    }
  }
  return make_result(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        real* gx = detail::sink(self, 0);
        real* gg = detail::sink(self, 1);
        real* gbt = detail::sink(self, 2);
        const real* gamma_v = detail::val(self, 1);
        const real m = static_cast<real>(count);
        for (std::size_t c = 0; c < ch; ++c) {
          real sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * ch + c) * len;
            for (std::size_t i = 0; i < len; ++i) {
              sum_dy += self.grad[off + i];
              sum_dy_xhat += self.grad[off + i] * xhat[off + i];
            }
          }
          if (gg) gg[c] += sum_dy_xhat;
          if (gbt) gbt[c] += sum_dy;
          if (!gx) continue;
          const real k = gamma_v[c] * inv_std[c];
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * ch + c) * len;
            for (std::size_t i = 0; i < len; ++i) {
              if (training) {
                gx[off + i] += k * (self.grad[off + i] - sum_dy / m - xhat[off + i] * sum_dy_xhat / m);
              } else {
                gx[off + i] += k * self.grad[off + i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------- temporal

// Forward difference along axis 2 with a zero final frame:
// out[:, :, t] = x[:, :, t+1] - x[:, :, t], out[:, :, T-1] = 0.
inline Tensor temporal_difference(const Tensor& x) {
  detail::require_rank("temporal_difference", x, 3, 4);
  const std::size_t outer = x.dim(0) * x.dim(1), frames = x.dim(2);
  const std::size_t inner = x.rank() == 4 ? x.dim(3) : 1;
  std::vector<real> out(x.numel(), real(0));
  const real* xv = x.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t t = 0; t + 1 < frames; ++t) {
      const std::size_t a = (o * frames + t) * inner, b = a + inner;
      for (std::size_t i = 0; i < inner; ++i) out[a + i] = xv[b + i] - xv[a + i];
    }
  }
  return make_result("temporal_difference", x.shape(), std::move(out), {x}, [outer, frames, inner](Node& self) {
    if (real* g = detail::sink(self, 0)) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t t = 0; t + 1 < frames; ++t) {
          const std::size_t a = (o * frames + t) * inner, b = a + inner;
          for (std::size_t i = 0; i < inner; ++i) {
            g[b + i] += self.grad[a + i];
            g[a + i] -= self.grad[a + i];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------- loss

// Mean over the batch of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  detail::require_rank("cross_entropy", logits, 2, 2);
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw ShapeError("cross_entropy: label count vs batch");
  std::vector<real> probs(logits.numel());
  real total = 0;
  for (std::size_t n = 0; n < batch; ++n) {
    if (labels[n] >= classes) {
      throw DataError("label " + std::to_string(labels[n]) + " out of range for " + std::to_string(classes) + " classes");
    }
    const real* row = logits.values().data() + n * classes;
    const real mx = *std::max_element(row, row + classes);
    real denom = 0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
    const real lse = mx + std::log(denom);
    total += lse - row[labels[n]];
    for (std::size_t c = 0; c < classes; ++c) probs[n * classes + c] = std::exp(row[c] - lse);
  }
  return make_result("cross_entropy", {1}, {total / static_cast<real>(batch)}, {logits},
                     [batch, classes, labels, probs = std::move(probs)](Node& self) {
                       if (real* g = detail::sink(self, 0)) {
                         const real s = self.grad[0] / static_cast<real>(batch);
                         for (std::size_t n = 0; n < batch; ++n) {
                           for (std::size_t c = 0; c < classes; ++c) {
                             const real onehot = c == labels[n] ? real(1) : real(0);
                             g[n * classes + c] += s * (probs[n * classes + c] - onehot);
                           }
                         }
                       }
                     });
}

}  // namespace stf::inline STF_PRECISION_NS::ops
