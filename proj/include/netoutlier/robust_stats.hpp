#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "netoutlier/error.hpp"
#include "netoutlier/linalg.hpp"

namespace netoutlier {

/// Gaussian consistency constant of the Qn scale.
inline constexpr double kQnConsistency = 2.2219;

namespace detail {

/// Number of pairs a < b in sorted `u` with u[b] - u[a] <= t.
inline std::uint64_t count_pairs_within(const std::vector<double>& u, double t) {
  std::uint64_t count = 0;
  std::size_t lo = 0;
  for (std::size_t b = 0; b < u.size(); ++b) {
    while (u[b] - u[lo] > t) ++lo;
    count += b - lo;
  }
  return count;
}

}  // namespace detail

/// k-th smallest (1-based) pairwise absolute difference of `values`.
///
/// Selection runs a bisection over the bit patterns of non-negative doubles,
/// which are ordered like the values themselves; each probe is a linear
/// two-pointer count over the sorted sample. The result is exactly one of the
/// pairwise differences, in O(m log m + 64 m).
inline double kth_pairwise_difference(std::vector<double> values, std::uint64_t k) {
  const std::size_t m = values.size();
  const std::uint64_t pairs = static_cast<std::uint64_t>(m) * (m - 1) / 2;
  require(m >= 2 && k >= 1 && k <= pairs, ErrorKind::InvalidInput,
          "pairwise order statistic out of range");
  std::sort(values.begin(), values.end());
  std::uint64_t lo = std::bit_cast<std::uint64_t>(0.0);
  std::uint64_t hi = std::bit_cast<std::uint64_t>(values.back() - values.front());
  if (detail::count_pairs_within(values, 0.0) >= k) return 0.0;
  // invariant: count(lo) < k <= count(hi)
  while (hi - lo > 1) {
    const std::uint64_t mid = lo + (hi - lo) / 2;
    if (detail::count_pairs_within(values, std::bit_cast<double>(mid)) >= k)
      hi = mid;
    else
      lo = mid;
  }
  return std::bit_cast<double>(hi);
}

/// Rousseeuw-Croux Qn scale: 2.2219 times the C(h,2)-th smallest pairwise
/// distance, h = floor(m/2) + 1. No small-sample correction.
inline double qn_scale(const std::vector<double>& u) {
  require(u.size() >= 2, ErrorKind::InvalidInput,
          "Qn scale needs at least 2 observations, got " + std::to_string(u.size()));
  for (double v : u)
    require(std::isfinite(v), ErrorKind::InvalidInput, "Qn scale input must be finite");
  const std::uint64_t h = u.size() / 2 + 1;
  const std::uint64_t k = h * (h - 1) / 2;
  return kQnConsistency * kth_pairwise_difference(u, k);
}

inline double qn_scale(const Eigen::Ref<const VectorXd>& u) {
  return qn_scale(std::vector<double>(u.data(), u.data() + u.size()));
}

/// Columnwise Qn scales.
inline VectorXd qn_scales(const MatrixXd& a) {
  VectorXd s(a.cols());
  for (Eigen::Index c = 0; c < a.cols(); ++c) s(c) = qn_scale(VectorXd(a.col(c)));
  return s;
}

inline double chi2_cdf(int dof, double x) {
  require(dof > 0, ErrorKind::InvalidInput, "chi-square degrees of freedom must be positive");
  if (x <= 0.0) return 0.0;
  return boost::math::cdf(boost::math::chi_squared_distribution<double>(dof), x);
}

inline double chi2_quantile(int dof, double prob) {
  require(dof > 0, ErrorKind::InvalidInput, "chi-square degrees of freedom must be positive");
  require(prob > 0.0 && prob < 1.0, ErrorKind::InvalidInput,
          "chi-square quantile probability must lie strictly inside (0,1)");
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(dof), prob);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Ranks 1..m, ties receive their average rank.
inline VectorXd average_ranks(const Eigen::Ref<const VectorXd>& u) {
  const Eigen::Index m = u.size();
  std::vector<Eigen::Index> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return u(a) < u(b); });
  VectorXd r(m);
  for (Eigen::Index a = 0; a < m;) {
    Eigen::Index b = a;
    while (b + 1 < m && u(idx[b + 1]) == u(idx[a])) ++b;
    const double avg = 0.5 * static_cast<double>(a + b) + 1.0;
    for (Eigen::Index c = a; c <= b; ++c) r(idx[c]) = avg;
    a = b + 1;
  }
  return r;
}

enum class SeedMethod { Tanh, Rank, NormalScores, SpatialSign };

inline constexpr SeedMethod kSeedMethods[] = {SeedMethod::Tanh, SeedMethod::Rank,
                                              SeedMethod::NormalScores, SeedMethod::SpatialSign};

inline const char* to_string(SeedMethod m) {
  switch (m) {
    case SeedMethod::Tanh: return "tanh";
    case SeedMethod::Rank: return "rank";
    case SeedMethod::NormalScores: return "normal-scores";
    case SeedMethod::SpatialSign: return "spatial-sign";
  }
  return "?";
}

struct SeedCorrelation {
  MatrixXd S;
  SeedMethod method = SeedMethod::Tanh;
};

namespace detail {

inline MatrixXd transform_columns(const MatrixXd& a, SeedMethod method) {
  const double m = static_cast<double>(a.rows());
  MatrixXd out(a.rows(), a.cols());
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    switch (method) {
      case SeedMethod::Tanh:
        out.col(c) = a.col(c).array().tanh();
        break;
      case SeedMethod::Rank:
        out.col(c) = average_ranks(a.col(c));
        break;
      case SeedMethod::NormalScores:
        out.col(c) = ((average_ranks(a.col(c)).array() - 1.0 / 3.0) / (m + 1.0 / 3.0))
                         .unaryExpr([](double v) { return normal_cdf(v); });
        break;
      case SeedMethod::SpatialSign:
        break;
    }
  }
  return out;
}

inline MatrixXd standardize_columns(MatrixXd a, const char* which) {
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    a.col(c).array() -= a.col(c).mean();
    const double norm = a.col(c).norm();
    require(norm > 0.0 && std::isfinite(norm), ErrorKind::Degenerate,
            std::string("zero-variance transformed column ") + std::to_string(c) + " of " +
                which);
    a.col(c) /= norm;
  }
  return a;
}

inline MatrixXd normalize_rows(MatrixXd a) {
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double norm = a.row(r).norm();
    if (norm > 0.0) a.row(r) /= norm;
  }
  return a;
}

}  // namespace detail

/// Robust association matrix between the columns of `r` and `t`; inputs are
/// expected to be Qn-scaled already.
inline SeedCorrelation seed_correlation(const MatrixXd& r, const MatrixXd& t, SeedMethod method) {
  require(r.rows() == t.rows(), ErrorKind::DimensionMismatch,
          "seed correlation inputs must have the same row count");
  require(r.rows() >= 2, ErrorKind::InvalidInput, "seed correlation needs at least 2 rows");
  SeedCorrelation out;
  out.method = method;
  if (method == SeedMethod::SpatialSign) {
    out.S = detail::normalize_rows(r).transpose() * detail::normalize_rows(t) /
            static_cast<double>(r.rows());
    return out;
  }
  const MatrixXd rs = detail::standardize_columns(detail::transform_columns(r, method), "R");
  const MatrixXd ts = detail::standardize_columns(detail::transform_columns(t, method), "T");
  out.S = rs.transpose() * ts;
  return out;
}

/// Replaces the singular values of S by products of Qn scales of the data
/// projected on the singular vectors: U diag(qn(R U)) diag(qn(T V)) V'.
/// Directions with a numerically zero singular value get a zero product.
inline MatrixXd svd_adjust(const MatrixXd& s, const MatrixXd& r_s, const MatrixXd& t_s) {
  require(s.allFinite(), ErrorKind::InvalidInput, "svd_adjust: S has non-finite entries");
  require(r_s.cols() == s.rows() && t_s.cols() == s.cols() && r_s.rows() == t_s.rows(),
          ErrorKind::DimensionMismatch, "svd_adjust: data matrices do not match S");
  Eigen::JacobiSVD<MatrixXd> svd(s, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const MatrixXd& u = svd.matrixU();
  const MatrixXd& v = svd.matrixV();
  const VectorXd& sv = svd.singularValues();
  const double cut = sv.size() > 0 ? 1e-12 * sv(0) : 0.0;
  const VectorXd scale_r = qn_scales(r_s * u);
  const VectorXd scale_t = qn_scales(t_s * v);
  VectorXd prod(sv.size());
  for (Eigen::Index k = 0; k < sv.size(); ++k)
    prod(k) = sv(k) > cut ? scale_r(k) * scale_t(k) : 0.0;
  return u * prod.asDiagonal() * v.transpose();
}

}  // namespace netoutlier
