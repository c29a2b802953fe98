#pragma once

// Vector quantizer: nearest-neighbour assignment, straight-through gradient,
// the three-term VQ loss and the EMA codebook update.

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "raq/ops.hpp"
#include "raq/tensor.hpp"

namespace raq {

enum class UpdateMode { gradient, ema };

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// EMA accumulators: counts N_i (length K) and sums m_i (K×d).
template <typename Scalar>
struct EmaState {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> counts;
  RowMatrix<Scalar> sums;
};

inline constexpr double kEmaCountFloor = 1e-5;

template <typename Scalar>
class Codebook {
 public:
  /// `vectors` is K×d. In ema mode the accumulators start at N_i = 1,
  /// m_i = e_i so that e_i = m_i / N_i holds from the start.
  explicit Codebook(RowMatrix<Scalar> vectors, UpdateMode mode = UpdateMode::ema)
      : mode_(mode) {
    if (vectors.rows() < 1 || vectors.cols() < 1) throw shape_error("codebook: K and d must be >= 1");
    std::vector<Scalar> flat(vectors.data(), vectors.data() + vectors.size());
    vectors_ = Tensor<Scalar>::from({std::size_t(vectors.rows()), std::size_t(vectors.cols())}, std::move(flat),
                                    mode == UpdateMode::gradient);
    if (mode == UpdateMode::ema) {
      EmaState<Scalar> s;
      s.counts = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Ones(vectors.rows());
      s.sums = vectors;
      ema_ = std::move(s);
    }
  }

  Codebook(RowMatrix<Scalar> vectors, EmaState<Scalar> ema) : Codebook(std::move(vectors), UpdateMode::ema) {
    if (std::size_t(ema.counts.size()) != vectors_.dim(0) || ema.sums.rows() != Eigen::Index(vectors_.dim(0)) ||
        ema.sums.cols() != Eigen::Index(vectors_.dim(1)))
      throw shape_error("codebook: EMA state shape mismatch");
    ema_ = std::move(ema);
  }

  /// Uniform(-1/K, 1/K) entries.
  template <typename Rng>
  static Codebook random(std::size_t k, std::size_t d, UpdateMode mode, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0 / double(k), 1.0 / double(k));
    RowMatrix<Scalar> v(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = Scalar(u(rng));
    return Codebook(std::move(v), mode);
  }

  std::size_t size() const { return vectors_.dim(0); }
  std::size_t dim() const { return vectors_.dim(1); }
  UpdateMode mode() const { return mode_; }

  const Tensor<Scalar>& vectors() const { return vectors_; }
  Tensor<Scalar>& vectors() { return vectors_; }
  const std::optional<EmaState<Scalar>>& ema() const { return ema_; }
  std::optional<EmaState<Scalar>>& ema() { return ema_; }

  RowMatrix<Scalar> matrix() const {
    return Eigen::Map<const RowMatrix<Scalar>>(vectors_.data().data(), Eigen::Index(size()), Eigen::Index(dim()));
  }

 private:
  Tensor<Scalar> vectors_;
  std::optional<EmaState<Scalar>> ema_;
  UpdateMode mode_;
};

template <typename Scalar>
struct QuantizationResult {
  Shape grid;                           // z_e shape without the trailing d
  std::vector<std::int32_t> indices;    // row-major over `grid`
  Tensor<Scalar> quantized;             // z_e shape; rows gathered from the codebook
  std::vector<std::int64_t> usage_counts;
};

/// Index of the nearest row of `codebook` (K×d, row-major) to `point`,
/// by squared Euclidean distance; lowest index wins ties.
template <typename Scalar>
std::int32_t nearest_code(std::span<const Scalar> point, std::span<const Scalar> codebook, std::size_t k) {
  const std::size_t d = point.size();
  std::int32_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < k; ++i) {
    double dist = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = double(point[c]) - double(codebook[i * d + c]);
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = std::int32_t(i);
    }
  }
  return best;
}

/// Nearest-neighbour quantisation of z_e (shape [..., d]) against a K×d
/// codebook tensor. `quantized` is graph-connected to the codebook only.
template <typename Scalar>
QuantizationResult<Scalar> quantize(const Tensor<Scalar>& z_e, const Tensor<Scalar>& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw shape_error("quantize: empty codebook");
  const std::size_t k = codebook.dim(0);
  const std::size_t d = codebook.dim(1);
  if (z_e.rank() < 1 || z_e.shape().back() != d)
    throw shape_error("quantize: latent shape " + to_string(z_e.shape()) + " does not end in codebook dim " +
                      std::to_string(d));
  const std::size_t n = z_e.size() / d;
  QuantizationResult<Scalar> r;
  r.grid.assign(z_e.shape().begin(), z_e.shape().end() - 1);
  r.indices.resize(n);
  r.usage_counts.assign(k, 0);
  auto zv = z_e.data();
  auto cv = codebook.data();
  for (std::size_t p = 0; p < n; ++p) {
    r.indices[p] = nearest_code<Scalar>(zv.subspan(p * d, d), cv, k);
    ++r.usage_counts[std::size_t(r.indices[p])];
  }
  r.quantized = reshape(gather_rows(codebook, r.indices), z_e.shape());
  return r;
}

template <typename Scalar>
QuantizationResult<Scalar> quantize(const Tensor<Scalar>& z_e, const Codebook<Scalar>& codebook) {
  if (codebook.dim() != z_e.shape().back()) throw shape_error("quantize: dimension mismatch");
  return quantize(z_e, codebook.vectors());
}

/// Forward value z_q; backward copies the incoming gradient to z_e and
/// sends nothing to z_q.
template <typename Scalar>
Tensor<Scalar> straight_through(const Tensor<Scalar>& z_e, const Tensor<Scalar>& z_q) {
  if (z_e.shape() != z_q.shape())
    throw shape_error("straight_through: shapes " + to_string(z_e.shape()) + " and " + to_string(z_q.shape()));
  std::vector<Scalar> out(z_q.data().begin(), z_q.data().end());
  return Tensor<Scalar>::make_op("straight_through", z_q.shape(), std::move(out), {z_e},
                                 [](detail::Node<Scalar>& self) {
                                   auto g = detail::grad_of(self, 0);
                                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                 });
}

/// Mean over positions of the squared L2 norm along the trailing axis.
template <typename Scalar>
Tensor<Scalar> mean_squared_norm(const Tensor<Scalar>& diff) {
  const std::size_t positions = diff.size() / diff.shape().back();
  return scale(sum(square(diff)), 1.0 / double(positions));
}

template <typename Scalar>
struct VqLoss {
  Tensor<Scalar> recon;
  Tensor<Scalar> embed;
  Tensor<Scalar> commit;
  Tensor<Scalar> total;
};

/// recon + embed + beta * commit, with
///   recon  = MSE(x, x_hat)
///   embed  = ||sg[z_e] - z_q||^2   (reaches the codebook only)
///   commit = ||sg[z_q] - z_e||^2   (reaches the encoder only)
template <typename Scalar>
VqLoss<Scalar> vq_loss(const Tensor<Scalar>& x, const Tensor<Scalar>& x_hat, const Tensor<Scalar>& z_e,
                       const Tensor<Scalar>& z_q, double beta) {
  if (x.shape() != x_hat.shape()) throw shape_error("vq_loss: x and x_hat differ in shape");
  if (z_e.shape() != z_q.shape()) throw shape_error("vq_loss: z_e and z_q differ in shape");
  if (beta < 0) throw std::invalid_argument("vq_loss: beta must be >= 0");
  VqLoss<Scalar> l;
  l.recon = mse_loss(x, x_hat);
  l.embed = mean_squared_norm(sub(z_e.detach(), z_q));
  l.commit = mean_squared_norm(sub(z_q.detach(), z_e));
  l.total = add(add(l.recon, l.embed), scale(l.commit, beta));
  return l;
}

/// Same three terms with z_q taken from the adapted codebook.
template <typename Scalar>
VqLoss<Scalar> raq_loss(const Tensor<Scalar>& x, const Tensor<Scalar>& x_hat_adapted, const Tensor<Scalar>& z_e,
                        const Tensor<Scalar>& z_q_adapted, double beta) {
  return vq_loss(x, x_hat_adapted, z_e, z_q_adapted, beta);
}

/// N_i <- g N_i + (1-g) n_i;  m_i <- g m_i + (1-g) sum z;  e_i <- m_i / max(N_i, eps).
template <typename Scalar>
void ema_update(Codebook<Scalar>& codebook, const QuantizationResult<Scalar>& result, const Tensor<Scalar>& z_e,
                double gamma, double eps = kEmaCountFloor) {
  if (codebook.mode() != UpdateMode::ema || !codebook.ema())
    throw std::logic_error("ema_update: codebook is not in ema mode");
  const std::size_t k = codebook.size();
  const std::size_t d = codebook.dim();
  if (result.usage_counts.size() != k) throw shape_error("ema_update: result was produced by another codebook");
  auto& s = *codebook.ema();
  RowMatrix<double> batch_sums = RowMatrix<double>::Zero(Eigen::Index(k), Eigen::Index(d));
  auto zv = z_e.data();
  for (std::size_t p = 0; p < result.indices.size(); ++p)
    for (std::size_t c = 0; c < d; ++c) batch_sums(result.indices[p], Eigen::Index(c)) += zv[p * d + c];
  auto v = codebook.vectors().mutable_data();
  for (std::size_t i = 0; i < k; ++i) {
    const auto ii = Eigen::Index(i);
    s.counts(ii) = Scalar(gamma * s.counts(ii) + (1.0 - gamma) * double(result.usage_counts[i]));
    const double denom = std::max(double(s.counts(ii)), eps);
    for (std::size_t c = 0; c < d; ++c) {
      const auto cc = Eigen::Index(c);
      s.sums(ii, cc) = Scalar(gamma * s.sums(ii, cc) + (1.0 - gamma) * batch_sums(ii, cc));
      v[i * d + c] = Scalar(double(s.sums(ii, cc)) / denom);
    }
  }
}

}  // namespace raq
