#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "segreg/errors.hpp"
#include "segreg/gaussianity.hpp"

namespace segreg {

inline constexpr double kMomentRidge = 1e-4;

/// Sample mean and unbiased covariance (divisor N-1) plus ridge * I.
inline GaussianMoments fit_moments(const Eigen::MatrixXd& x, double ridge = kMomentRidge) {
  if (x.rows() < 2) throw ValidationError("fit_moments: need at least 2 rows, got " + std::to_string(x.rows()));
  if (!x.allFinite()) throw NumericError("fit_moments: non-finite embedding");
  GaussianMoments m;
  m.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centred = x.rowwise() - m.mean.transpose();
  m.cov = centred.transpose() * centred / static_cast<double>(x.rows() - 1);
  m.cov.diagonal().array() += ridge;
  return m;
}

/// KL(a || b) between Gaussians.
inline double gaussian_kl(const GaussianMoments& a, const GaussianMoments& b) {
  if (a.dim() != b.dim() || a.cov.rows() != b.cov.rows()) {
    throw ShapeError("gaussian_kl: dimensions " + std::to_string(a.dim()) + " and " + std::to_string(b.dim()) + " differ");
  }
  const auto la = detail::checked_cholesky(a.cov, "gaussian_kl");
  const auto lb = detail::checked_cholesky(b.cov, "gaussian_kl");
  if (a.mean == b.mean && a.cov == b.cov) return 0.0;  // skip the rounding residue of the general formula
  const double d = static_cast<double>(a.dim());
  const Eigen::VectorXd dm = b.mean - a.mean;
  const double trace = lb.solve(a.cov).trace();
  const double maha = dm.dot(lb.solve(dm));
  const double kl = 0.5 * (trace + maha - d + detail::log_det(lb) - detail::log_det(la));
  if (!std::isfinite(kl)) throw NumericError("gaussian_kl: non-finite result");
  return std::max(0.0, kl);
}

/// Probe-set embeddings after one stage, with fitted moments.
struct LatentSnapshot {
  std::size_t stage = 0;
  Eigen::MatrixXd embeddings;  // N x d
  std::vector<int> labels;
  std::size_t num_classes = 0;
  GaussianMoments global;
  std::vector<std::optional<GaussianMoments>> per_class;  // index 0..C; absent below d+1 rows
};

inline LatentSnapshot make_snapshot(std::size_t stage, Eigen::MatrixXd embeddings, std::vector<int> labels,
                                    std::size_t num_classes) {
  if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) {
    throw ShapeError("make_snapshot: embeddings and labels disagree in length");
  }
  LatentSnapshot s;
  s.stage = stage;
  s.num_classes = num_classes;
  s.global = fit_moments(embeddings);
  const auto d = static_cast<std::size_t>(embeddings.cols());
  for (std::size_t c = 0; c <= num_classes; ++c) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == static_cast<int>(c)) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.size() < d + 1) {
      s.per_class.emplace_back();
      continue;
    }
    s.per_class.emplace_back(fit_moments(embeddings(rows, Eigen::all)));
  }
  s.embeddings = std::move(embeddings);
  s.labels = std::move(labels);
  return s;
}

/// KL between consecutive stages: kl[i] compares snapshot i+1 to snapshot i.
struct DriftReport {
  std::vector<double> kl;
  double total = 0.0;
  std::vector<std::vector<std::optional<double>>> per_class;  // [class][transition]
};

inline DriftReport drift_report(const std::vector<LatentSnapshot>& snaps) {
  if (snaps.size() < 2) throw ValidationError("drift_report: need at least 2 snapshots");
  DriftReport r;
  const std::size_t classes = snaps[0].per_class.size();
  r.per_class.assign(classes, {});
  for (std::size_t t = 1; t < snaps.size(); ++t) {
    if (snaps[t].global.dim() != snaps[0].global.dim() || snaps[t].per_class.size() != classes) {
      throw ShapeError("drift_report: snapshots have inconsistent dimensions");
    }
    r.kl.push_back(gaussian_kl(snaps[t].global, snaps[t - 1].global));
    for (std::size_t c = 0; c < classes; ++c) {
      const auto& now = snaps[t].per_class[c];
      const auto& before = snaps[t - 1].per_class[c];
      r.per_class[c].push_back(now && before ? std::optional<double>(gaussian_kl(*now, *before)) : std::nullopt);
    }
  }
  r.total = std::accumulate(r.kl.begin(), r.kl.end(), 0.0);
  return r;
}

struct PcaResult {
  Eigen::MatrixXd coords;      // N x k
  Eigen::MatrixXd components;  // d x k, orthonormal columns
  std::vector<double> explained;
};

/// Top-k principal components. Each component's largest-magnitude entry is
/// made positive (first such entry on ties).
inline PcaResult pca_project(const Eigen::MatrixXd& x, std::size_t k = 2) {
  const auto n = static_cast<std::size_t>(x.rows()), d = static_cast<std::size_t>(x.cols());
  if (k == 0 || k > d) throw ValidationError("pca_project: k must lie in 1..d");
  if (n <= k) throw ValidationError("pca_project: need more than k rows");
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("pca_project: eigen decomposition failed");
  // Eigen returns ascending eigenvalues.
  const Eigen::VectorXd values = eig.eigenvalues().reverse();
  const Eigen::MatrixXd vectors = eig.eigenvectors().rowwise().reverse();
  const double total = std::max(values.sum(), 0.0);
  PcaResult r;
  r.components = vectors.leftCols(static_cast<Eigen::Index>(k));
  for (Eigen::Index j = 0; j < r.components.cols(); ++j) {
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < r.components.rows(); ++i)
      if (std::abs(r.components(i, j)) > std::abs(r.components(arg, j))) arg = i;
    if (r.components(arg, j) < 0) r.components.col(j) *= -1.0;
    r.explained.push_back(total > 0 ? std::max(values(j), 0.0) / total : 0.0);
  }
  r.coords = centred * r.components;
  return r;
}

}  // namespace segreg
