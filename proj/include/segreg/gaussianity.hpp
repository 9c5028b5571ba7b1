#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <algorithm>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "segreg/latent.hpp"
#include "segreg/ops.hpp"
#include "segreg/rng.hpp"

namespace segreg {

/// K unit directions in R^d, row-major.
struct ProjectionSet {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> directions;
  std::uint64_t seed = 0;

  std::span<const double> row(std::size_t k) const { return {directions.data() + k * dim, dim}; }
};

/// Directions uniform on the unit sphere: normalised standard-normal vectors.
inline ProjectionSet sample_projections(std::size_t dim, std::size_t count, std::uint64_t seed) {
  if (dim == 0 || count == 0) throw ValidationError("sample_projections: d and K must be positive");
  ProjectionSet set{count, dim, std::vector<double>(dim * count), seed};
  auto rng = make_stream(seed, "projections");
  std::normal_distribution<double> normal;
  for (std::size_t k = 0; k < count; ++k) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        const double v = normal(rng);
        set.directions[k * dim + i] = v;
        norm += v * v;
      }
    } while (norm < 1e-24);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < dim; ++i) set.directions[k * dim + i] /= norm;
  }
  return set;
}

// Trapezoid rule on t in [-t_max, t_max].
struct QuadratureGrid {
  std::size_t points = 257;
  double t_max = 8.0;

  void validate() const {
    if (points < 3) throw ValidationError("quadrature grid needs at least 3 points");
    if (!(t_max > 0)) throw ValidationError("quadrature grid needs t_max > 0");
  }
};

enum class EppsPulleyMode { closed, quadrature };

// ---------------------------------------------------------------------------
// Epps-Pulley statistic against N(0,1) with standard-normal weight:
//   T = n * integral |phi_n(t) - exp(-t^2/2)|^2 w(t) dt.
// Samples are not standardised, so location and scale are both tested.

namespace detail {

inline void require_samples(std::span<const double> z) {
  if (z.empty()) throw ValidationError("epps_pulley: empty sample");
  for (double v : z)
    if (!std::isfinite(v)) throw NumericError("epps_pulley: non-finite sample");
}

}  // namespace detail

/// Pairwise closed form, O(n^2). Writes dT/dz into `grad` when non-empty.
inline double epps_pulley_closed(std::span<const double> z, std::span<double> grad = {}) {
  detail::require_samples(z);
  const std::size_t n = z.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const bool want_grad = !grad.empty();
  if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);

  double pair_sum = static_cast<double>(n);  // diagonal terms
  for (std::size_t j = 0; j < n; ++j) {
    double row = 0.0;
    for (std::size_t k = j + 1; k < n; ++k) {
      const double d = z[j] - z[k];
      const double e = std::exp(-0.5 * d * d);
      row += e;
      if (want_grad) {
        const double g = -2.0 * inv_n * d * e;
        grad[j] += g;
        grad[k] -= g;
      }
    }
    pair_sum += 2.0 * row;
  }
  double single = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double e = std::exp(-0.25 * z[j] * z[j]);
    single += e;
    if (want_grad) grad[j] += std::numbers::sqrt2 * 0.5 * z[j] * e;
  }
  return inv_n * pair_sum - std::numbers::sqrt2 * single + static_cast<double>(n) / std::numbers::sqrt3;
}

/// Trapezoid evaluation of the defining integral, O(n * points).
///
/// The integrand is even in t, so only t >= 0 is visited and mirrored nodes
/// are counted twice. cos/sin(t z) along the grid follow the angle-addition
/// recurrence from the first non-negative node.
inline double epps_pulley_quadrature(std::span<const double> z, const QuadratureGrid& grid = {},
                                     std::span<double> grad = {}) {
  detail::require_samples(z);
  grid.validate();
  const std::size_t n = z.size();
  const std::size_t P = grid.points;
  const double step = 2.0 * grid.t_max / static_cast<double>(P - 1);
  const std::size_t first = P / 2;  // first node with t >= 0
  const std::size_t half = P - first;
  const double t0 = -grid.t_max + static_cast<double>(first) * step;

  std::vector<double> t(half), weight(half), target(half);
  for (std::size_t k = 0; k < half; ++k) {
    t[k] = t0 + static_cast<double>(k) * step;
    const bool centre = (first + k) * 2 == P - 1;
    const bool endpoint = first + k == P - 1;
    const double trap = endpoint ? 0.5 * step : step;
    target[k] = std::exp(-0.5 * t[k] * t[k]);
    weight[k] = (centre ? 1.0 : 2.0) * trap * target[k] / std::sqrt(2.0 * std::numbers::pi);
  }

  // Empirical characteristic function: C = mean cos(tz), S = mean sin(tz).
  std::vector<double> C(half, 0.0), S(half, 0.0);
  for (double zj : z) {
    double c = std::cos(t0 * zj), s = std::sin(t0 * zj);
    const double cd = std::cos(step * zj), sd = std::sin(step * zj);
    for (std::size_t k = 0; k < half; ++k) {
      C[k] += c;
      S[k] += s;
      const double cn = c * cd - s * sd;
      s = s * cd + c * sd;
      c = cn;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t k = 0; k < half; ++k) {
    C[k] *= inv_n;
    S[k] *= inv_n;
    const double re = C[k] - target[k];
    total += weight[k] * (re * re + S[k] * S[k]);
  }
  total *= static_cast<double>(n);

  if (!grad.empty()) {
    // dT/dz_j = sum_k 2 w_k t_k [S_k cos(t_k z_j) - (C_k - g_k) sin(t_k z_j)]
    std::vector<double> A(half), B(half);
    for (std::size_t k = 0; k < half; ++k) {
      A[k] = 2.0 * weight[k] * t[k] * S[k];
      B[k] = 2.0 * weight[k] * t[k] * (C[k] - target[k]);
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double zj = z[j];
      double c = std::cos(t0 * zj), s = std::sin(t0 * zj);
      const double cd = std::cos(step * zj), sd = std::sin(step * zj);
      double g = 0.0;
      for (std::size_t k = 0; k < half; ++k) {
        g += A[k] * c - B[k] * s;
        const double cn = c * cd - s * sd;
        s = s * cd + c * sd;
        c = cn;
      }
      grad[j] = g;
    }
  }
  return total;
}

/// Statistic evaluated on the samples in canonical order (ascending |z|,
/// then z). The result is bitwise invariant to permutations of `z` and to
/// z -> -z.
inline double epps_pulley(std::span<const double> z, EppsPulleyMode mode, const QuadratureGrid& grid = {},
                          std::span<double> grad = {}) {
  detail::require_samples(z);
  std::vector<std::size_t> order(z.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(z[a]), mb = std::abs(z[b]);
    return ma != mb ? ma < mb : z[a] < z[b];
  });
  std::vector<double> sorted(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) sorted[i] = z[order[i]];
  std::vector<double> sorted_grad(grad.empty() ? 0 : z.size());
  const double value = mode == EppsPulleyMode::closed ? epps_pulley_closed(sorted, sorted_grad)
                                                      : epps_pulley_quadrature(sorted, grid, sorted_grad);
  for (std::size_t i = 0; i < sorted_grad.size(); ++i) grad[order[i]] = sorted_grad[i];
  return value;
}

/// Column-wise statistic of an (n,K) tensor of projected samples -> (K).
template <class T>
Tensor<T> epps_pulley_columns(const Tensor<T>& samples, EppsPulleyMode mode, const QuadratureGrid& grid = {}) {
  detail::require_rank("epps-pulley", samples.shape(), 2, "samples");
  const std::size_t n = samples.dim(0), K = samples.dim(1);
  if (n == 0) throw ValidationError("epps_pulley: empty sample");
  const bool want_grad = grad_mode_enabled() && samples.requires_grad();
  std::vector<T> stats(K);
  std::vector<double> grads(want_grad ? n * K : 0);
  std::vector<double> column(n), column_grad(want_grad ? n : 0);
  auto sd = samples.data();
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t j = 0; j < n; ++j) column[j] = static_cast<double>(sd[j * K + k]);
    stats[k] = static_cast<T>(epps_pulley(column, mode, grid, column_grad));
    for (std::size_t j = 0; j < column_grad.size(); ++j) grads[j * K + k] = column_grad[j];
  }
  return detail::make_result<T>("epps-pulley", Shape{K}, std::move(stats), {samples},
                                [K, grads = std::move(grads)](detail::Node<T>& self) {
                                  auto& g = self.inputs[0]->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i % K] * static_cast<T>(grads[i]);
                                });
}

struct SigRegOptions {
  EppsPulleyMode mode = EppsPulleyMode::quadrature;
  QuadratureGrid grid{};
  bool normalize_by_n = false;
};

/// Mean over directions of the Epps-Pulley statistic of the projected
/// embeddings. Every row participates, background included.
template <class T>
Tensor<T> sigreg_loss(const LatentBatch<T>& latents, const ProjectionSet& proj, const SigRegOptions& opts = {}) {
  if (latents.size() == 0) throw ValidationError("sigreg_loss: empty latent batch");
  latents.validate();
  if (proj.dim != latents.dim()) {
    throw ShapeError("sigreg_loss: projections have dim " + std::to_string(proj.dim) + ", latents " +
                     std::to_string(latents.dim()));
  }
  std::vector<T> dirs(proj.dim * proj.count);
  for (std::size_t k = 0; k < proj.count; ++k)
    for (std::size_t i = 0; i < proj.dim; ++i) dirs[i * proj.count + k] = static_cast<T>(proj.directions[k * proj.dim + i]);
  auto projected = matmul(latents.embeddings, Tensor<T>({proj.dim, proj.count}, std::move(dirs)));
  auto loss = mean(epps_pulley_columns(projected, opts.mode, opts.grid));
  if (opts.normalize_by_n) loss = scale(loss, T(1) / static_cast<T>(latents.size()));
  return loss;
}

// ---------------------------------------------------------------------------
// Gaussian moments and differential entropy

struct GaussianMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

namespace detail {

// Cholesky factor of a symmetric positive-definite covariance.
inline Eigen::LLT<Eigen::MatrixXd> checked_cholesky(const Eigen::MatrixXd& cov, const char* op) {
  if (cov.rows() != cov.cols() || cov.rows() == 0) throw ShapeError(std::string(op) + ": covariance must be square");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, cov.cwiseAbs().maxCoeff())) {
    throw ValidationError(std::string(op) + ": covariance is not symmetric");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) throw ValidationError(std::string(op) + ": covariance is not positive definite");
  for (Eigen::Index i = 0; i < cov.rows(); ++i) {
    if (!(llt.matrixL()(i, i) > 0)) throw ValidationError(std::string(op) + ": covariance is not positive definite");
  }
  return llt;
}

inline double log_det(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  double s = 0.0;
  const Eigen::MatrixXd L = llt.matrixL();
  for (Eigen::Index i = 0; i < L.rows(); ++i) s += std::log(L(i, i));
  return 2.0 * s;
}

}  // namespace detail

/// h = 1/2 ln((2 pi e)^d det cov).
inline double gaussian_entropy(const GaussianMoments& m) {
  auto llt = detail::checked_cholesky(m.cov, "gaussian_entropy");
  const double d = static_cast<double>(m.cov.rows());
  return 0.5 * (d * std::log(2.0 * std::numbers::pi * std::numbers::e) + detail::log_det(llt));
}

// Closed-form differential entropies of zero-mean 1-D laws with given variance.
namespace entropy {

inline double gaussian(double variance) { return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * variance); }

// Uniform on [-a, a] with a = sqrt(3 variance): ln(2a).
inline double uniform(double variance) { return std::log(2.0 * std::sqrt(3.0 * variance)); }

// Laplace with scale b = sqrt(variance / 2): 1 + ln(2b).
inline double laplace(double variance) { return 1.0 + std::log(2.0 * std::sqrt(0.5 * variance)); }

}  // namespace entropy

}  // namespace segreg
