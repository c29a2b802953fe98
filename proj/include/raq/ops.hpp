#pragma once

// Differentiable free functions over Tensor<Scalar>.
//
// Broadcasting is limited to scalar<->tensor and same-shape operands.
// Products and reductions accumulate in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "raq/tensor.hpp"

namespace raq {

namespace detail {

using MatrixXdR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using ConstMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename Scalar>
using MutMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename Scalar>
MatrixXdR to_double(std::span<const Scalar> v, std::size_t rows, std::size_t cols) {
  return ConstMap<Scalar>(v.data(), Eigen::Index(rows), Eigen::Index(cols)).template cast<double>();
}

template <typename Scalar>
void add_into(std::span<Scalar> dst, const MatrixXdR& src) {
  MutMap<Scalar>(dst.data(), src.rows(), src.cols()) += src.template cast<Scalar>();
}

template <typename Scalar>
std::vector<Scalar> to_vector(const MatrixXdR& m) {
  std::vector<Scalar> out(std::size_t(m.size()));
  MutMap<Scalar>(out.data(), m.rows(), m.cols()) = m.template cast<Scalar>();
  return out;
}

inline bool is_scalar_shape(const Shape& s) { return numel(s) == 1; }

}  // namespace detail

enum class BinaryOp { add, sub, mul };
enum class UnaryOp { sigmoid, tanh, relu };

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> elementwise(BinaryOp op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const bool a_scalar = detail::is_scalar_shape(a.shape()) && a.shape() != b.shape();
  const bool b_scalar = detail::is_scalar_shape(b.shape()) && a.shape() != b.shape();
  if (a.shape() != b.shape() && !a_scalar && !b_scalar)
    throw shape_error("elementwise: incompatible shapes " + to_string(a.shape()) + " and " +
                      to_string(b.shape()));
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(out_shape);
  auto av = a.data();
  auto bv = b.data();
  auto at = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bt = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  std::vector<Scalar> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (op) {
      case BinaryOp::add: out[i] = at(i) + bt(i); break;
      case BinaryOp::sub: out[i] = at(i) - bt(i); break;
      case BinaryOp::mul: out[i] = at(i) * bt(i); break;
    }
  }
  const char* name = op == BinaryOp::add ? "add" : op == BinaryOp::sub ? "sub" : "mul";
  return Tensor<Scalar>::make_op(
      name, out_shape, std::move(out), {a, b},
      [op, a_scalar, b_scalar, n](detail::Node<Scalar>& self) {
        const auto& g = self.grad;
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        auto ga = detail::grad_of(self, 0);
        auto gb = detail::grad_of(self, 1);
        double ga_sum = 0.0;
        double gb_sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          double da = 0.0;
          double db = 0.0;
          switch (op) {
            case BinaryOp::add: da = g[i]; db = g[i]; break;
            case BinaryOp::sub: da = g[i]; db = -double(g[i]); break;
            case BinaryOp::mul:
              da = double(g[i]) * (b_scalar ? bv[0] : bv[i]);
              db = double(g[i]) * (a_scalar ? av[0] : av[i]);
              break;
          }
          if (!ga.empty()) {
            if (a_scalar) ga_sum += da; else ga[i] += Scalar(da);
          }
          if (!gb.empty()) {
            if (b_scalar) gb_sum += db; else gb[i] += Scalar(db);
          }
        }
        if (!ga.empty() && a_scalar) ga[0] += Scalar(ga_sum);
        if (!gb.empty() && b_scalar) gb[0] += Scalar(gb_sum);
      });
}

template <typename Scalar>
Tensor<Scalar> elementwise(UnaryOp op, const Tensor<Scalar>& x) {
  const std::size_t n = x.size();
  auto xv = x.data();
  std::vector<Scalar> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (op) {
      case UnaryOp::sigmoid: out[i] = Scalar(1) / (Scalar(1) + std::exp(-xv[i])); break;
      case UnaryOp::tanh: out[i] = std::tanh(xv[i]); break;
      case UnaryOp::relu: out[i] = xv[i] > Scalar(0) ? xv[i] : Scalar(0); break;
    }
  }
  const char* name = op == UnaryOp::sigmoid ? "sigmoid" : op == UnaryOp::tanh ? "tanh" : "relu";
  return Tensor<Scalar>::make_op(name, x.shape(), std::move(out), {x},
                                 [op, n](detail::Node<Scalar>& self) {
                                   auto gx = detail::grad_of(self, 0);
                                   const auto& y = self.value;
                                   const auto& xin = self.inputs[0]->value;
                                   for (std::size_t i = 0; i < n; ++i) {
                                     Scalar d = 0;
                                     switch (op) {
                                       case UnaryOp::sigmoid: d = y[i] * (Scalar(1) - y[i]); break;
                                       case UnaryOp::tanh: d = Scalar(1) - y[i] * y[i]; break;
                                       case UnaryOp::relu: d = xin[i] > Scalar(0) ? Scalar(1) : Scalar(0); break;
                                     }
                                     gx[i] += self.grad[i] * d;
                                   }
                                 });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return elementwise(BinaryOp::add, a, b); }
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return elementwise(BinaryOp::sub, a, b); }
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return elementwise(BinaryOp::mul, a, b); }
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) { return elementwise(UnaryOp::sigmoid, x); }
template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) { return elementwise(UnaryOp::tanh, x); }
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) { return elementwise(UnaryOp::relu, x); }

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }

/// Multiplication by a constant that is not part of the graph.
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, double factor) {
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = Scalar(v * factor);
  return Tensor<Scalar>::make_op("scale", x.shape(), std::move(out), {x},
                                 [factor](detail::Node<Scalar>& self) {
                                   auto gx = detail::grad_of(self, 0);
                                   for (std::size_t i = 0; i < gx.size(); ++i)
                                     gx[i] += Scalar(self.grad[i] * factor);
                                 });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x) { return mul(x, x); }

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  double acc = 0.0;
  for (auto v : x.data()) acc += v;
  return Tensor<Scalar>::make_op("sum", {}, {Scalar(acc)}, {x}, [](detail::Node<Scalar>& self) {
    auto gx = detail::grad_of(self, 0);
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), 1.0 / double(x.size()));
}

/// Mean squared error over all elements.
template <typename Scalar>
Tensor<Scalar> mse_loss(const Tensor<Scalar>& x, const Tensor<Scalar>& y) {
  return mean(square(sub(x, y)));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw shape_error("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  return Tensor<Scalar>::make_op("reshape", std::move(shape), std::move(out), {x},
                                 [](detail::Node<Scalar>& self) {
                                   auto gx = detail::grad_of(self, 0);
                                   for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                                 });
}

/// out.shape[i] = x.shape[perm[i]].
template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw shape_error("permute: rank mismatch");
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw shape_error("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // Flat input offset for every flat output offset.
  const std::size_t n = x.size();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  auto xv = x.data();
  std::vector<Scalar> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = xv[src[o]];
  return Tensor<Scalar>::make_op("permute", std::move(out_shape), std::move(out), {x},
                                 [src = std::move(src)](detail::Node<Scalar>& self) {
                                   auto gx = detail::grad_of(self, 0);
                                   for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += self.grad[o];
                                 });
}

/// Columns [start, start+len) of a 2-D tensor.
template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& x, std::size_t start, std::size_t len) {
  if (x.rank() != 2 || start + len > x.dim(1))
    throw shape_error("slice_cols: range out of bounds for " + to_string(x.shape()));
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.dim(1);
  std::vector<Scalar> out(rows * len);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.begin() + std::ptrdiff_t(r * cols + start), len, out.begin() + std::ptrdiff_t(r * len));
  return Tensor<Scalar>::make_op("slice_cols", {rows, len}, std::move(out), {x},
                                 [rows, cols, start, len](detail::Node<Scalar>& self) {
                                   auto gx = detail::grad_of(self, 0);
                                   for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t c = 0; c < len; ++c)
                                       gx[r * cols + start + c] += self.grad[r * len + c];
                                 });
}

/// Row `row` of a 2-D tensor as a 1×cols tensor.
template <typename Scalar>
Tensor<Scalar> row(const Tensor<Scalar>& x, std::size_t r) {
  if (x.rank() != 2 || r >= x.dim(0)) throw shape_error("row: index out of bounds");
  const std::size_t cols = x.dim(1);
  auto xv = x.data();
  std::vector<Scalar> out(xv.begin() + std::ptrdiff_t(r * cols), xv.begin() + std::ptrdiff_t((r + 1) * cols));
  return Tensor<Scalar>::make_op("row", {1, cols}, std::move(out), {x},
                                 [r, cols](detail::Node<Scalar>& self) {
                                   auto gx = detail::grad_of(self, 0);
                                   for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += self.grad[c];
                                 });
}

/// Stacks 2-D tensors with equal column counts along the row axis.
template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw shape_error("concat_rows: no inputs");
  const std::size_t cols = parts.front().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols) throw shape_error("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<Scalar> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor<Scalar>::make_op("concat_rows", {rows, cols}, std::move(out), parts,
                                 [](detail::Node<Scalar>& self) {
                                   std::size_t off = 0;
                                   for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                     const std::size_t n = self.inputs[k]->value.size();
                                     auto g = detail::grad_of(self, k);
                                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
                                     off += n;
                                   }
                                 });
}

/// Embedding lookup: out[i] = table[indices[i]]. Table gradient is scatter-added.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const std::int32_t> indices) {
  if (table.rank() != 2) throw shape_error("gather_rows: table must be 2-D");
  const std::size_t rows = table.dim(0);
  const std::size_t cols = table.dim(1);
  std::vector<Scalar> out(indices.size() * cols);
  auto tv = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto k = std::size_t(indices[i]);
    if (indices[i] < 0 || k >= rows) throw shape_error("gather_rows: index out of range");
    std::copy_n(tv.begin() + std::ptrdiff_t(k * cols), cols, out.begin() + std::ptrdiff_t(i * cols));
  }
  std::vector<std::int32_t> idx(indices.begin(), indices.end());
  return Tensor<Scalar>::make_op("gather_rows", {indices.size(), cols}, std::move(out), {table},
                                 [idx = std::move(idx), cols](detail::Node<Scalar>& self) {
                                   auto gt = detail::grad_of(self, 0);
                                   for (std::size_t i = 0; i < idx.size(); ++i)
                                     for (std::size_t c = 0; c < cols; ++c)
                                       gt[std::size_t(idx[i]) * cols + c] += self.grad[i * cols + c];
                                 });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const detail::MatrixXdR c = detail::to_double(a.data(), m, k) * detail::to_double(b.data(), k, n);
  return Tensor<Scalar>::make_op(
      "matmul", {m, n}, detail::to_vector<Scalar>(c), {a, b}, [m, k, n](detail::Node<Scalar>& self) {
        const auto g = detail::to_double(std::span<const Scalar>(self.grad), m, n);
        auto ga = detail::grad_of(self, 0);
        auto gb = detail::grad_of(self, 1);
        if (!ga.empty())
          detail::add_into(ga, detail::MatrixXdR(
                                   g * detail::to_double(std::span<const Scalar>(self.inputs[1]->value), k, n).transpose()));
        if (!gb.empty())
          detail::add_into(gb, detail::MatrixXdR(
                                   detail::to_double(std::span<const Scalar>(self.inputs[0]->value), m, k).transpose() * g));
      });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_height, out_width;
};

// cols[(c*k + ki)*k + kj][oh*Wo + ow] = x[c][oh*s - p + ki][ow*s - p + kj] (zero outside).
template <typename Scalar>
MatrixXdR im2col(std::span<const Scalar> x, const ConvGeometry& g) {
  const std::size_t k = g.kernel;
  MatrixXdR cols = MatrixXdR::Zero(Eigen::Index(g.channels * k * k), Eigen::Index(g.out_height * g.out_width));
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const auto r = Eigen::Index((c * k + ki) * k + kj);
        for (std::size_t oh = 0; oh < g.out_height; ++oh) {
          const auto ih = std::ptrdiff_t(oh * g.stride + ki) - std::ptrdiff_t(g.pad);
          if (ih < 0 || ih >= std::ptrdiff_t(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_width; ++ow) {
            const auto iw = std::ptrdiff_t(ow * g.stride + kj) - std::ptrdiff_t(g.pad);
            if (iw < 0 || iw >= std::ptrdiff_t(g.width)) continue;
            cols(r, Eigen::Index(oh * g.out_width + ow)) =
                x[(c * g.height + std::size_t(ih)) * g.width + std::size_t(iw)];
          }
        }
      }
  return cols;
}

// Adjoint of im2col: scatter-adds columns back into an image.
template <typename Scalar>
void col2im_add(const MatrixXdR& cols, const ConvGeometry& g, std::span<Scalar> x) {
  const std::size_t k = g.kernel;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const auto r = Eigen::Index((c * k + ki) * k + kj);
        for (std::size_t oh = 0; oh < g.out_height; ++oh) {
          const auto ih = std::ptrdiff_t(oh * g.stride + ki) - std::ptrdiff_t(g.pad);
          if (ih < 0 || ih >= std::ptrdiff_t(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_width; ++ow) {
            const auto iw = std::ptrdiff_t(ow * g.stride + kj) - std::ptrdiff_t(g.pad);
            if (iw < 0 || iw >= std::ptrdiff_t(g.width)) continue;
            x[(c * g.height + std::size_t(ih)) * g.width + std::size_t(iw)] +=
                Scalar(cols(r, Eigen::Index(oh * g.out_width + ow)));
          }
        }
      }
}

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  const auto span = std::ptrdiff_t(in + 2 * pad) - std::ptrdiff_t(k);
  if (stride == 0 || span < 0 || span % std::ptrdiff_t(stride) != 0)
    throw shape_error("conv2d: output size (" + std::to_string(in) + "+2*" + std::to_string(pad) + "-" +
                      std::to_string(k) + ")/" + std::to_string(stride) + "+1 is not integral");
  return std::size_t(span) / stride + 1;
}

}  // namespace detail

/// Cross-correlation. input B×C×H×W, kernel F×C×k×k, optional bias of F.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const std::optional<Tensor<Scalar>>& bias, std::size_t stride, std::size_t pad) {
  if (input.rank() != 4 || kernel.rank() != 4 || kernel.dim(1) != input.dim(1) || kernel.dim(2) != kernel.dim(3))
    throw shape_error("conv2d: input " + to_string(input.shape()) + " incompatible with kernel " +
                      to_string(kernel.shape()));
  if (bias && bias->size() != kernel.dim(0)) throw shape_error("conv2d: bias size mismatch");
  const std::size_t batch = input.dim(0), filters = kernel.dim(0), k = kernel.dim(2);
  detail::ConvGeometry geo{input.dim(1), input.dim(2), input.dim(3), k, stride, pad, 0, 0};
  geo.out_height = detail::conv_out_size(geo.height, k, stride, pad);
  geo.out_width = detail::conv_out_size(geo.width, k, stride, pad);
  const std::size_t in_plane = geo.channels * geo.height * geo.width;
  const std::size_t out_plane = filters * geo.out_height * geo.out_width;
  const std::size_t ckk = geo.channels * k * k;

  const detail::MatrixXdR w = detail::to_double(kernel.data(), filters, ckk);
  std::vector<Scalar> out(batch * out_plane);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::MatrixXdR y = w * detail::im2col(input.data().subspan(b * in_plane, in_plane), geo);
    if (bias)
      for (std::size_t f = 0; f < filters; ++f) y.row(Eigen::Index(f)).array() += double((*bias)[f]);
    detail::MutMap<Scalar>(out.data() + b * out_plane, y.rows(), y.cols()) = y.template cast<Scalar>();
  }
  std::vector<Tensor<Scalar>> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return Tensor<Scalar>::make_op(
      "conv2d", {batch, filters, geo.out_height, geo.out_width}, std::move(out), inputs,
      [geo, batch, filters, ckk, in_plane, out_plane](detail::Node<Scalar>& self) {
        const std::span<const Scalar> xv = self.inputs[0]->value;
        const detail::MatrixXdR w = detail::to_double(std::span<const Scalar>(self.inputs[1]->value), filters, ckk);
        auto gx = detail::grad_of(self, 0);
        auto gw = detail::grad_of(self, 1);
        std::span<Scalar> gb = self.inputs.size() > 2 ? detail::grad_of(self, 2) : std::span<Scalar>{};
        detail::MatrixXdR gw_acc = detail::MatrixXdR::Zero(Eigen::Index(filters), Eigen::Index(ckk));
        const std::size_t hw = geo.out_height * geo.out_width;
        for (std::size_t b = 0; b < batch; ++b) {
          const auto g = detail::to_double(std::span<const Scalar>(self.grad).subspan(b * out_plane, out_plane),
                                           filters, hw);
          if (!gw.empty()) gw_acc.noalias() += g * detail::im2col(xv.subspan(b * in_plane, in_plane), geo).transpose();
          if (!gx.empty()) detail::col2im_add(detail::MatrixXdR(w.transpose() * g), geo, gx.subspan(b * in_plane, in_plane));
          if (!gb.empty())
            for (std::size_t f = 0; f < filters; ++f) gb[f] += Scalar(g.row(Eigen::Index(f)).sum());
        }
        if (!gw.empty()) detail::add_into(gw, gw_acc);
      });
}

/// Adjoint of conv2d in the input argument. input B×C×H×W, kernel C×F×k×k;
/// output height (H-1)*stride - 2*pad + k.
template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                                const std::optional<Tensor<Scalar>>& bias, std::size_t stride, std::size_t pad) {
  if (input.rank() != 4 || kernel.rank() != 4 || kernel.dim(0) != input.dim(1) || kernel.dim(2) != kernel.dim(3))
    throw shape_error("conv_transpose2d: input " + to_string(input.shape()) + " incompatible with kernel " +
                      to_string(kernel.shape()));
  if (bias && bias->size() != kernel.dim(1)) throw shape_error("conv_transpose2d: bias size mismatch");
  const std::size_t batch = input.dim(0), channels = input.dim(1), filters = kernel.dim(1), k = kernel.dim(2);
  const auto out_h = std::ptrdiff_t((input.dim(2) - 1) * stride + k) - std::ptrdiff_t(2 * pad);
  const auto out_w = std::ptrdiff_t((input.dim(3) - 1) * stride + k) - std::ptrdiff_t(2 * pad);
  if (stride == 0 || out_h <= 0 || out_w <= 0) throw shape_error("conv_transpose2d: empty output");
  // Geometry of the forward conv that maps the output image back to `input`.
  detail::ConvGeometry geo{filters, std::size_t(out_h), std::size_t(out_w), k, stride, pad, input.dim(2), input.dim(3)};
  const std::size_t hw = input.dim(2) * input.dim(3);
  const std::size_t in_plane = channels * hw;
  const std::size_t out_plane = filters * geo.height * geo.width;
  const std::size_t fkk = filters * k * k;

  const detail::MatrixXdR w = detail::to_double(kernel.data(), channels, fkk);
  std::vector<Scalar> out(batch * out_plane, Scalar(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const auto x = detail::to_double(input.data().subspan(b * in_plane, in_plane), channels, hw);
    std::span<Scalar> ob(out.data() + b * out_plane, out_plane);
    detail::col2im_add(detail::MatrixXdR(w.transpose() * x), geo, ob);
    if (bias)
      for (std::size_t f = 0; f < filters; ++f)
        for (std::size_t p = 0; p < geo.height * geo.width; ++p) ob[f * geo.height * geo.width + p] += (*bias)[f];
  }
  std::vector<Tensor<Scalar>> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return Tensor<Scalar>::make_op(
      "conv_transpose2d", {batch, filters, geo.height, geo.width}, std::move(out), inputs,
      [geo, batch, channels, filters, fkk, hw, in_plane, out_plane](detail::Node<Scalar>& self) {
        const std::span<const Scalar> xv = self.inputs[0]->value;
        const detail::MatrixXdR w = detail::to_double(std::span<const Scalar>(self.inputs[1]->value), channels, fkk);
        auto gx = detail::grad_of(self, 0);
        auto gw = detail::grad_of(self, 1);
        std::span<Scalar> gb = self.inputs.size() > 2 ? detail::grad_of(self, 2) : std::span<Scalar>{};
        detail::MatrixXdR gw_acc = detail::MatrixXdR::Zero(Eigen::Index(channels), Eigen::Index(fkk));
        const std::size_t ohw = geo.height * geo.width;
        for (std::size_t b = 0; b < batch; ++b) {
          const auto gplane = std::span<const Scalar>(self.grad).subspan(b * out_plane, out_plane);
          const detail::MatrixXdR gcols = detail::im2col(gplane, geo);
          if (!gx.empty()) detail::add_into(gx.subspan(b * in_plane, in_plane), detail::MatrixXdR(w * gcols));
          if (!gw.empty())
            gw_acc.noalias() += detail::to_double(xv.subspan(b * in_plane, in_plane), channels, hw) * gcols.transpose();
          if (!gb.empty())
            for (std::size_t f = 0; f < filters; ++f) {
              double s = 0.0;
              for (std::size_t p = 0; p < ohw; ++p) s += gplane[f * ohw + p];
              gb[f] += Scalar(s);
            }
        }
        if (!gw.empty()) detail::add_into(gw, gw_acc);
      });
}

}  // namespace raq
