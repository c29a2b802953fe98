#pragma once

// Training-free codebook resizing.
//
//   kmeans_lloyd   hard k-means baseline (and oracle for DKM)
//   dkm_reduce     soft k-means with a temperature softmax attention; K̃ < K
//   mmd_squared    biased Gaussian-RBF MMD^2 between two point sets
//   ikm_increase   grows a codebook to K̃ > K by descending
//                  MMD^2(e, dkm(ẽ)) + lambda ||ẽ||^2 in ẽ
//
// All routines work on K×d row-major matrices, one vector per row.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "raq/vq.hpp"

namespace raq {

enum class InitMethod { kmeanspp, random };

template <typename Scalar>
Scalar squared_distance(const Eigen::Ref<const RowMatrix<Scalar>>& a, Eigen::Index i,
                        const Eigen::Ref<const RowMatrix<Scalar>>& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

/// K×K̃ matrix of squared Euclidean distances.
template <typename Scalar>
RowMatrix<Scalar> pairwise_sq_distances(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b) {
  RowMatrix<Scalar> d(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  return d;
}

/// Lowest-index nearest centroid for every point.
template <typename Scalar>
std::vector<std::int32_t> assign_nearest(const RowMatrix<Scalar>& points, const RowMatrix<Scalar>& centroids) {
  std::vector<std::int32_t> out(std::size_t(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
      const Scalar d = (points.row(i) - centroids.row(j)).squaredNorm();
      if (d < best) {
        best = d;
        out[std::size_t(i)] = std::int32_t(j);
      }
    }
  }
  return out;
}

/// Sum of squared distances from each point to its assigned centroid.
template <typename Scalar>
double kmeans_objective(const RowMatrix<Scalar>& points, const RowMatrix<Scalar>& centroids,
                        const std::vector<std::int32_t>& assignment) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    acc += double((points.row(i) - centroids.row(assignment[std::size_t(i)])).squaredNorm());
  return acc;
}

/// k-means++ seeding: first centre uniform, then D^2-weighted draws.
template <typename Scalar, typename Rng>
RowMatrix<Scalar> kmeanspp_init(const RowMatrix<Scalar>& points, std::size_t k, Rng& rng) {
  const auto n = std::size_t(points.rows());
  if (k < 1 || k > n) throw std::invalid_argument("kmeans++: need 1 <= k <= #points");
  RowMatrix<Scalar> c(Eigen::Index(k), points.cols());
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  c.row(0) = points.row(Eigen::Index(first(rng)));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = double((points.row(Eigen::Index(i)) - c.row(0)).squaredNorm());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t j = 1; j < k; ++j) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0) {
      double r = u(rng) * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        if (r < d2[pick]) break;
        r -= d2[pick];
      }
      if (d2[pick] == 0.0)  // never land on an existing centre
        for (std::size_t i = n; i-- > 0;)
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
    }
    c.row(Eigen::Index(j)) = points.row(Eigen::Index(pick));
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], double((points.row(Eigen::Index(i)) - c.row(Eigen::Index(j))).squaredNorm()));
  }
  return c;
}

/// k distinct points chosen uniformly at random.
template <typename Scalar, typename Rng>
RowMatrix<Scalar> random_init(const RowMatrix<Scalar>& points, std::size_t k, Rng& rng) {
  const auto n = std::size_t(points.rows());
  if (k < 1 || k > n) throw std::invalid_argument("random init: need 1 <= k <= #points");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  RowMatrix<Scalar> c(Eigen::Index(k), points.cols());
  for (std::size_t i = 0; i < k; ++i) c.row(Eigen::Index(i)) = points.row(Eigen::Index(idx[i]));
  return c;
}

template <typename Scalar>
RowMatrix<Scalar> init_centroids(const RowMatrix<Scalar>& points, std::size_t k, InitMethod method,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return method == InitMethod::kmeanspp ? kmeanspp_init(points, k, rng) : random_init(points, k, rng);
}

// ---------------------------------------------------------------------------
// Lloyd

template <typename Scalar>
struct KMeansResult {
  RowMatrix<Scalar> centroids;
  std::vector<std::int32_t> assignment;
  std::vector<double> objective;  // after each assignment step
  std::size_t iterations = 0;
};

/// Alternating assignment / mean update from the given centroids. An empty
/// cluster keeps its previous centroid.
template <typename Scalar>
KMeansResult<Scalar> kmeans_lloyd(const RowMatrix<Scalar>& points, RowMatrix<Scalar> centroids,
                                  std::size_t max_iters) {
  if (centroids.rows() > points.rows())
    throw std::invalid_argument("kmeans_lloyd: more clusters (" + std::to_string(centroids.rows()) + ") than points (" +
                                std::to_string(points.rows()) + ")");
  KMeansResult<Scalar> r;
  r.centroids = std::move(centroids);
  r.assignment = assign_nearest(points, r.centroids);
  r.objective.push_back(kmeans_objective(points, r.centroids, r.assignment));
  for (std::size_t it = 0; it < max_iters; ++it) {
    RowMatrix<double> sums = RowMatrix<double>::Zero(r.centroids.rows(), r.centroids.cols());
    std::vector<std::size_t> counts(std::size_t(r.centroids.rows()), 0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      sums.row(r.assignment[std::size_t(i)]) += points.row(i).template cast<double>();
      ++counts[std::size_t(r.assignment[std::size_t(i)])];
    }
    for (Eigen::Index j = 0; j < r.centroids.rows(); ++j)
      if (counts[std::size_t(j)] > 0)
        r.centroids.row(j) = (sums.row(j) / double(counts[std::size_t(j)])).template cast<Scalar>();
    auto next = assign_nearest(points, r.centroids);
    r.objective.push_back(kmeans_objective(points, r.centroids, next));
    ++r.iterations;
    const bool stable = next == r.assignment;
    r.assignment = std::move(next);
    if (stable) break;
  }
  return r;
}

template <typename Scalar>
KMeansResult<Scalar> kmeans_lloyd(const RowMatrix<Scalar>& points, std::size_t k, InitMethod init,
                                  std::size_t max_iters, std::uint64_t seed) {
  if (k < 1 || k > std::size_t(points.rows()))
    throw std::invalid_argument("kmeans_lloyd: K̃=" + std::to_string(k) + " exceeds #points=" +
                                std::to_string(points.rows()));
  return kmeans_lloyd(points, init_centroids(points, k, init, seed), max_iters);
}

// ---------------------------------------------------------------------------
// Differentiable k-means

template <typename Scalar>
struct DkmState {
  RowMatrix<Scalar> centroids;  // K̃×d
  RowMatrix<Scalar> distances;  // K×K̃, D_ij = -||e_i - c_j||^2
  RowMatrix<Scalar> attention;  // K×K̃, row-wise softmax(D / tau)
  double tau = 0.01;
};

/// Fills distances and attention for the current centroids. Softmax is
/// evaluated with the row maximum subtracted.
template <typename Scalar>
void dkm_attention(const RowMatrix<Scalar>& points, DkmState<Scalar>& s) {
  s.distances = -pairwise_sq_distances(points, s.centroids);
  s.attention.resize(s.distances.rows(), s.distances.cols());
  for (Eigen::Index i = 0; i < s.distances.rows(); ++i) {
    const Scalar mx = s.distances.row(i).maxCoeff();
    auto e = ((s.distances.row(i).array() - mx) / Scalar(s.tau)).exp();
    s.attention.row(i) = e / e.sum();
  }
}

/// c̃_j = sum_i A_ij e_i / sum_i A_ij. Columns with vanishing mass keep c_j.
template <typename Scalar>
RowMatrix<Scalar> dkm_candidates(const RowMatrix<Scalar>& points, const DkmState<Scalar>& s) {
  RowMatrix<Scalar> next = s.centroids;
  const RowMatrix<Scalar> weighted = s.attention.transpose() * points;
  for (Eigen::Index j = 0; j < next.rows(); ++j) {
    const Scalar mass = s.attention.col(j).sum();
    if (mass > std::numeric_limits<Scalar>::min()) next.row(j) = weighted.row(j) / mass;
  }
  return next;
}

struct DkmOptions {
  double tau = 0.01;
  std::size_t max_iters = 200;
  double eps = 1e-6;
  InitMethod init = InitMethod::kmeanspp;
  std::uint64_t seed = 0;
};

template <typename Scalar>
struct DkmResult {
  DkmState<Scalar> state;
  std::vector<std::int32_t> assignment;  // argmax attention column per point
  std::size_t iterations = 0;
  std::size_t reseeded = 0;
};

/// Fixed-point iteration C <- C̃ until ||C - C̃|| <= eps or max_iters.
template <typename Scalar>
DkmResult<Scalar> dkm_iterate(const RowMatrix<Scalar>& points, RowMatrix<Scalar> centroids, double tau,
                              std::size_t max_iters, double eps) {
  if (tau <= 0) throw std::invalid_argument("dkm: temperature must be positive");
  DkmResult<Scalar> r;
  r.state.tau = tau;
  r.state.centroids = std::move(centroids);
  for (std::size_t it = 0; it < max_iters; ++it) {
    dkm_attention(points, r.state);
    RowMatrix<Scalar> next = dkm_candidates(points, r.state);
    const double delta = double((next - r.state.centroids).norm());
    r.state.centroids = std::move(next);
    ++r.iterations;
    if (delta <= eps) break;
  }
  dkm_attention(points, r.state);
  return r;
}

template <typename Scalar>
std::vector<std::int32_t> argmax_columns(const RowMatrix<Scalar>& attention) {
  std::vector<std::int32_t> out(std::size_t(attention.rows()));
  for (Eigen::Index i = 0; i < attention.rows(); ++i) {
    Eigen::Index j = 0;
    attention.row(i).maxCoeff(&j);
    out[std::size_t(i)] = std::int32_t(j);
  }
  return out;
}

/// Rate reduction: K̃ < K centroids of the codebook rows. After the soft
/// iteration converges each row is hard-assigned to its argmax column; a
/// centroid that claims no row is re-seeded at the row farthest from its
/// centroid and one more refinement pass is run.
template <typename Scalar>
DkmResult<Scalar> dkm_reduce(const RowMatrix<Scalar>& codebook, std::size_t k_tilde, const DkmOptions& opt = {}) {
  const auto k = std::size_t(codebook.rows());
  if (k_tilde < 1 || k_tilde >= k)
    throw std::invalid_argument("dkm_reduce: need 1 <= K̃ < K, got K̃=" + std::to_string(k_tilde) +
                                " K=" + std::to_string(k));
  if (opt.tau <= 0) throw std::invalid_argument("dkm_reduce: temperature must be positive");
  auto r = dkm_iterate(codebook, init_centroids(codebook, k_tilde, opt.init, opt.seed), opt.tau, opt.max_iters,
                       opt.eps);
  r.assignment = argmax_columns(r.state.attention);
  std::vector<bool> used_as_seed(k, false);
  for (std::size_t round = 0; round < k_tilde; ++round) {
    std::vector<std::size_t> members(k_tilde, 0);
    for (auto a : r.assignment) ++members[std::size_t(a)];
    bool repaired = false;
    for (std::size_t j = 0; j < k_tilde; ++j) {
      if (members[j] > 0) continue;
      std::size_t far = k;
      Scalar far_d = -1;
      for (std::size_t i = 0; i < k; ++i) {
        if (used_as_seed[i]) continue;
        const Scalar d = squared_distance<Scalar>(codebook, Eigen::Index(i), r.state.centroids,
                                                  Eigen::Index(r.assignment[i]));
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far == k) break;
      used_as_seed[far] = true;
      r.state.centroids.row(Eigen::Index(j)) = codebook.row(Eigen::Index(far));
      ++r.reseeded;
      repaired = true;
    }
    if (!repaired) break;
    auto refined = dkm_iterate(codebook, r.state.centroids, opt.tau, 1, 0.0);
    r.state = std::move(refined.state);
    r.assignment = argmax_columns(r.state.attention);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy

enum class Kernel { gaussian_rbf };

struct MmdConfig {
  Kernel kernel = Kernel::gaussian_rbf;
  std::optional<double> bandwidth;  // unset: median heuristic
  double lambda = 1e-4;
  double eta = 0.1;
  std::size_t max_iters = 5000;
};

/// k(x, y) = exp(-||x - y||^2 / (2 sigma^2)).
inline double rbf(double sq_dist, double bandwidth) { return std::exp(-sq_dist / (2.0 * bandwidth * bandwidth)); }

/// Median pairwise Euclidean distance over the pooled rows of X and Y.
template <typename Scalar>
double median_bandwidth(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& y) {
  RowMatrix<Scalar> pooled(x.rows() + y.rows(), x.cols());
  pooled << x, y;
  std::vector<double> d;
  for (Eigen::Index i = 0; i < pooled.rows(); ++i)
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) d.push_back(std::sqrt(double((pooled.row(i) - pooled.row(j)).squaredNorm())));
  std::erase_if(d, [](double v) { return v <= 0.0; });
  if (d.empty()) return 1.0;
  auto mid = d.begin() + std::ptrdiff_t(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

namespace detail {

template <typename Scalar>
double mean_kernel(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b, double bandwidth) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) acc += rbf(double((a.row(i) - b.row(j)).squaredNorm()), bandwidth);
  return acc / (double(a.rows()) * double(b.rows()));
}

// Strict weak order on point sets, used to fix the summation order of the
// cross term regardless of argument order.
template <typename Scalar>
bool set_less(const RowMatrix<Scalar>& a, const RowMatrix<Scalar>& b) {
  if (a.rows() != b.rows()) return a.rows() < b.rows();
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

}  // namespace detail

/// Biased (V-statistic) estimate of MMD^2 with a Gaussian RBF kernel.
template <typename Scalar>
double mmd_squared(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& y, double bandwidth) {
  if (x.rows() < 1 || y.rows() < 1) throw std::invalid_argument("mmd_squared: empty sample");
  if (x.cols() != y.cols()) throw std::invalid_argument("mmd_squared: dimension mismatch");
  if (!(bandwidth > 0)) throw std::invalid_argument("mmd_squared: bandwidth must be positive");
  const double kxx = detail::mean_kernel(x, x, bandwidth);
  const double kyy = detail::mean_kernel(y, y, bandwidth);
  const double kxy = detail::set_less(y, x) ? detail::mean_kernel(y, x, bandwidth)
                                            : detail::mean_kernel(x, y, bandwidth);
  return std::max(kxx + kyy - 2.0 * kxy, -1e-9);
}

template <typename Scalar>
double mmd_squared(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& y, const MmdConfig& cfg) {
  return mmd_squared(x, y, cfg.bandwidth ? *cfg.bandwidth : median_bandwidth(x, y));
}

/// d MMD^2(X, Y) / dY for the biased estimator.
template <typename Scalar>
RowMatrix<double> mmd_squared_grad_y(const RowMatrix<Scalar>& x, const RowMatrix<Scalar>& y, double bandwidth) {
  const double n = double(x.rows()), m = double(y.rows());
  const double s2 = bandwidth * bandwidth;
  RowMatrix<double> g = RowMatrix<double>::Zero(y.rows(), y.cols());
  for (Eigen::Index l = 0; l < y.rows(); ++l) {
    for (Eigen::Index j = 0; j < y.rows(); ++j) {
      const Eigen::RowVectorXd diff = (y.row(l) - y.row(j)).template cast<double>();
      g.row(l) -= (2.0 / (m * m)) * rbf(diff.squaredNorm(), bandwidth) * diff / s2;
    }
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Eigen::RowVectorXd diff = (y.row(l) - x.row(i)).template cast<double>();
      g.row(l) += (2.0 / (n * m)) * rbf(diff.squaredNorm(), bandwidth) * diff / s2;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Inverse-functional DKM

struct IkmOptions {
  MmdConfig mmd;
  double tau = 0.01;
  std::size_t dkm_iters = 200;
  double dkm_eps = 1e-6;
  double plateau_tol = 1e-7;
  std::size_t plateau_window = 100;
  std::uint64_t seed = 0;
};

struct IkmLoss {
  double value = 0.0;
  double mmd = 0.0;
  RowMatrix<double> grad;  // d value / d ẽ
};

/// One differentiable DKM step from fixed centroids:
///   A = softmax_rows(-||ẽ_i - c_j||^2 / tau),  g_j = sum_i A_ij ẽ_i / sum_i A_ij,
/// then value = MMD^2(e, g) + lambda ||ẽ||^2 and its gradient in ẽ, which
/// flows through both A and the weighted means.
inline IkmLoss ikm_objective(const RowMatrix<double>& original, const RowMatrix<double>& candidates,
                             const RowMatrix<double>& centroids, double tau, double bandwidth, double lambda) {
  DkmState<double> s;
  s.tau = tau;
  s.centroids = centroids;
  dkm_attention(candidates, s);
  const RowMatrix<double>& a = s.attention;  // n×K
  const Eigen::VectorXd mass = a.colwise().sum().transpose();
  RowMatrix<double> g = centroids;
  std::vector<bool> live(std::size_t(g.rows()));
  const RowMatrix<double> weighted = a.transpose() * candidates;
  for (Eigen::Index j = 0; j < g.rows(); ++j) {
    live[std::size_t(j)] = mass(j) > 1e-300;
    if (live[std::size_t(j)]) g.row(j) = weighted.row(j) / mass(j);
  }

  IkmLoss out;
  out.mmd = mmd_squared(original, g, bandwidth);
  out.value = out.mmd + lambda * candidates.squaredNorm();
  const RowMatrix<double> dg = mmd_squared_grad_y(original, g, bandwidth);

  out.grad = 2.0 * lambda * candidates;
  // Through the weighted mean (A held fixed) and through A.
  RowMatrix<double> da = RowMatrix<double>::Zero(a.rows(), a.cols());
  for (Eigen::Index j = 0; j < g.rows(); ++j) {
    if (!live[std::size_t(j)]) continue;
    for (Eigen::Index i = 0; i < candidates.rows(); ++i) {
      out.grad.row(i) += (a(i, j) / mass(j)) * dg.row(j);
      da(i, j) = (candidates.row(i) - g.row(j)).dot(dg.row(j)) / mass(j);
    }
  }
  // Softmax backward, then D_ij = -||ẽ_i - c_j||^2 scaled by 1/tau.
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double inner = a.row(i).dot(da.row(i));
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double dd = a(i, j) * (da(i, j) - inner) / tau;
      if (dd != 0.0) out.grad.row(i) += dd * (-2.0) * (candidates.row(i) - centroids.row(j));
    }
  }
  return out;
}

template <typename Scalar>
struct IkmResult {
  RowMatrix<Scalar> codebook;   // K̃×d
  std::vector<double> loss;     // objective before each update, plus the final value
  double bandwidth = 0.0;
  std::size_t iterations = 0;
  bool plateaued = false;
};

/// Rate increase: K̃ > K vectors initialised i.i.d. N(0, d^{-1/2}) per
/// coordinate, then SGD on MMD^2(e, dkm(ẽ)) + lambda ||ẽ||^2. The DKM
/// centroids are warm-started from the previous iteration.
template <typename Scalar>
IkmResult<Scalar> ikm_increase(const RowMatrix<Scalar>& codebook, std::size_t k_tilde, const IkmOptions& opt = {}) {
  const auto k = std::size_t(codebook.rows());
  const auto d = codebook.cols();
  if (k_tilde <= k)
    throw std::invalid_argument("ikm_increase: need K̃ > K, got K̃=" + std::to_string(k_tilde) +
                                " K=" + std::to_string(k));
  if (opt.mmd.eta <= 0 || opt.mmd.lambda < 0) throw std::invalid_argument("ikm_increase: need eta > 0, lambda >= 0");
  if (opt.mmd.bandwidth && !(*opt.mmd.bandwidth > 0)) throw std::invalid_argument("ikm_increase: bandwidth must be positive");

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, std::pow(double(d), -0.25));
  RowMatrix<double> cand(Eigen::Index(k_tilde), d);
  for (Eigen::Index i = 0; i < cand.size(); ++i) cand.data()[i] = normal(rng);
  const RowMatrix<double> original = codebook.template cast<double>();

  RowMatrix<double> centroids = kmeanspp_init(cand, k, rng);
  auto cluster = [&] {
    centroids = dkm_iterate(cand, centroids, opt.tau, opt.dkm_iters, opt.dkm_eps).state.centroids;
  };
  cluster();

  IkmResult<Scalar> r;
  r.bandwidth = opt.mmd.bandwidth ? *opt.mmd.bandwidth : median_bandwidth(original, centroids);
  for (std::size_t it = 0; it < opt.mmd.max_iters; ++it) {
    const IkmLoss l = ikm_objective(original, cand, centroids, opt.tau, r.bandwidth, opt.mmd.lambda);
    if (!std::isfinite(l.value) || !l.grad.allFinite()) {
      std::ostringstream os;
      os << "ikm_increase: objective diverged at iteration " << it << " (value " << l.value << ")";
      throw numeric_error(os.str());
    }
    r.loss.push_back(l.value);
    if (r.loss.size() > opt.plateau_window &&
        r.loss[r.loss.size() - 1 - opt.plateau_window] - l.value < opt.plateau_tol) {
      r.plateaued = true;
      break;
    }
    cand -= opt.mmd.eta * l.grad;
    cluster();
    ++r.iterations;
  }
  if (!r.plateaued) {
    r.loss.push_back(ikm_objective(original, cand, centroids, opt.tau, r.bandwidth, opt.mmd.lambda).value);
    if (!std::isfinite(r.loss.back())) throw numeric_error("ikm_increase: objective diverged at the final step");
  }
  r.codebook = cand.template cast<Scalar>();
  return r;
}

}  // namespace raq
