#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "netoutlier/error.hpp"

namespace netoutlier {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace linalg {

/// Applies `f` to the spectrum of a symmetric matrix: V f(D) V'.
template <typename F>
MatrixXd spectral_apply(const Eigen::SelfAdjointEigenSolver<MatrixXd>& eig, F&& f) {
  const VectorXd mapped = eig.eigenvalues().unaryExpr(f);
  return eig.eigenvectors() * mapped.asDiagonal() * eig.eigenvectors().transpose();
}

inline Eigen::SelfAdjointEigenSolver<MatrixXd> eigen_sym(const MatrixXd& a) {
  const MatrixXd sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(sym);
  require(eig.info() == Eigen::Success, ErrorKind::Decomposition,
          "symmetric eigendecomposition did not converge");
  return eig;
}

/// Throws unless the smallest eigenvalue of `a` is strictly positive.
inline Eigen::SelfAdjointEigenSolver<MatrixXd> require_pd(const MatrixXd& a,
                                                          const std::string& name) {
  require(a.rows() == a.cols(), ErrorKind::DimensionMismatch, name + " is not square");
  require(a.allFinite(), ErrorKind::Decomposition, name + " has non-finite entries");
  auto eig = eigen_sym(a);
  if (a.rows() > 0) {
    const double lo = eig.eigenvalues()(0);
    const double hi = eig.eigenvalues()(a.rows() - 1);
    require(lo > 0.0 && lo > 1e-14 * hi, ErrorKind::Decomposition,
            name + " is not positive definite (smallest eigenvalue " +
                std::to_string(lo) + ")");
  }
  return eig;
}

inline MatrixXd sqrt_pd(const MatrixXd& a, const std::string& name = "matrix") {
  return spectral_apply(require_pd(a, name), [](double v) { return std::sqrt(v); });
}

inline MatrixXd inv_sqrt_pd(const MatrixXd& a, const std::string& name = "matrix") {
  return spectral_apply(require_pd(a, name), [](double v) { return 1.0 / std::sqrt(v); });
}

inline MatrixXd inverse_pd(const MatrixXd& a, const std::string& name = "matrix") {
  return spectral_apply(require_pd(a, name), [](double v) { return 1.0 / v; });
}

inline double logdet_pd(const MatrixXd& a, const std::string& name = "matrix") {
  const auto eig = require_pd(a, name);
  return eig.eigenvalues().array().log().sum();
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix; eigenvalues at or
/// below `rel_tol * max eigenvalue` are treated as zero.
inline MatrixXd pinv_sym(const MatrixXd& a, double rel_tol = 1e-10) {
  const auto eig = eigen_sym(a);
  const double cut = rel_tol * std::max(0.0, eig.eigenvalues().maxCoeff());
  return spectral_apply(eig, [cut](double v) { return v > cut ? 1.0 / v : 0.0; });
}

}  // namespace linalg
}  // namespace netoutlier
