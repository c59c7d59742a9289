#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "netoutlier/error.hpp"
#include "netoutlier/graph.hpp"
#include "netoutlier/linalg.hpp"
#include "netoutlier/robust_stats.hpp"

namespace netoutlier {

/// Mean coefficients theta (q x p) and variable covariance Sigma_V (p x p).
struct ModelParams {
  MatrixXd theta;
  MatrixXd sigma_v;

  int q() const { return static_cast<int>(theta.rows()); }
  int p() const { return static_cast<int>(sigma_v.rows()); }
};

/// Responses X (n x p) and covariates Z (n x q).
struct Dataset {
  MatrixXd X;
  MatrixXd Z;

  int n() const { return static_cast<int>(X.rows()); }
  int p() const { return static_cast<int>(X.cols()); }
  int q() const { return static_cast<int>(Z.cols()); }
};

struct EdgeDiagnostic {
  int i = 0;
  int j = 0;
  double w = 1.0;
  double delta = 0.0;       // weighted squared Mahalanobis distance of the residual difference
  double var_factor = 0.0;  // w (l+_ii + l+_jj - 2 l+_ij)
  double standardized = 0.0;
  bool is_outlier = false;
};

inline constexpr double kDefaultEdgeLevel = 0.975;

inline void check_dataset(const Dataset& data, int n) {
  require(data.X.rows() == n, ErrorKind::DimensionMismatch,
          "response matrix has " + std::to_string(data.X.rows()) + " rows but the graph has " +
              std::to_string(n) + " nodes");
  require(data.Z.rows() == n, ErrorKind::DimensionMismatch,
          "covariate matrix has " + std::to_string(data.Z.rows()) + " rows but the graph has " +
              std::to_string(n) + " nodes");
  require(data.X.allFinite() && data.Z.allFinite(), ErrorKind::InvalidInput,
          "dataset contains non-finite entries");
}

inline void check_params(const ModelParams& params, const Dataset& data) {
  require(params.theta.rows() == data.q() && params.theta.cols() == data.p(),
          ErrorKind::DimensionMismatch,
          "theta must be " + std::to_string(data.q()) + " x " + std::to_string(data.p()));
  require(params.sigma_v.rows() == data.p() && params.sigma_v.cols() == data.p(),
          ErrorKind::DimensionMismatch,
          "Sigma_V must be " + std::to_string(data.p()) + " x " + std::to_string(data.p()));
}

inline MatrixXd residuals(const Dataset& data, const MatrixXd& theta) {
  return data.X - data.Z * theta;
}

/// X = Z theta + L^{+/2} Y Sigma_V^{1/2} for a given standard-normal matrix Y.
inline MatrixXd matrix_normal_from_noise(const ModelParams& params, const LaplacianBundle& bundle,
                                         const MatrixXd& Z, const MatrixXd& Y) {
  const int n = bundle.num_nodes();
  require(Z.rows() == n && Y.rows() == n && Y.cols() == params.p() &&
              Z.cols() == params.theta.rows() && params.theta.cols() == params.p(),
          ErrorKind::DimensionMismatch, "matrix-normal sampler: inconsistent dimensions");
  const MatrixXd sigma_half = linalg::sqrt_pd(params.sigma_v, "Sigma_V");
  return Z * params.theta + bundle.LplusHalf * Y * sigma_half;
}

inline MatrixXd standard_normal_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  MatrixXd y(rows, cols);
  // column-major fill keeps the draw order tied to vecc(Y)
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) y(r, c) = gauss(rng);
  return y;
}

inline Dataset sample_matrix_normal(const ModelParams& params, const LaplacianBundle& bundle,
                                   const MatrixXd& Z, std::uint64_t seed) {
  require(bundle.rank == bundle.num_nodes() - 1, ErrorKind::DisconnectedGraph,
          "matrix-normal sampling requires a connected graph");
  std::mt19937_64 rng(seed);
  const MatrixXd Y = standard_normal_matrix(bundle.num_nodes(), params.p(), rng);
  return {matrix_normal_from_noise(params, bundle, Z, Y), Z};
}

namespace detail {

/// Delta for every edge from residuals and a precision matrix (Sigma_V^{-1},
/// or its generalized inverse for degenerate coordinates).
inline std::vector<EdgeDiagnostic> deltas_from_precision(const MatrixXd& resid,
                                                         const MatrixXd& precision,
                                                         const WeightedGraph& graph,
                                                         const LaplacianBundle& bundle) {
  std::vector<EdgeDiagnostic> out;
  out.reserve(graph.num_edges());
  for (const auto& e : graph.edges()) {
    const VectorXd d = (resid.row(e.i) - resid.row(e.j)).transpose();
    EdgeDiagnostic diag;
    diag.i = e.i;
    diag.j = e.j;
    diag.w = e.w;
    diag.delta = std::max(0.0, d.dot(precision * d) * e.w);
    diag.var_factor = e.w * bundle.resistance(e.i, e.j);
    diag.standardized = diag.var_factor > 0.0 ? diag.delta / diag.var_factor : 0.0;
    out.push_back(diag);
  }
  return out;
}

}  // namespace detail

/// Total Mahalanobis distance as the edgewise sum, each unordered edge once.
inline double total_mahalanobis(const Dataset& data, const ModelParams& params,
                                const LaplacianBundle& bundle, const WeightedGraph& graph) {
  check_dataset(data, graph.num_nodes());
  check_params(params, data);
  const MatrixXd precision = linalg::inverse_pd(params.sigma_v, "Sigma_V");
  double total = 0.0;
  for (const auto& d :
       detail::deltas_from_precision(residuals(data, params.theta), precision, graph, bundle))
    total += d.delta;
  return total;
}

inline std::vector<EdgeDiagnostic> edge_deltas(const Dataset& data, const ModelParams& params,
                                               const LaplacianBundle& bundle,
                                               const WeightedGraph& graph) {
  check_dataset(data, graph.num_nodes());
  check_params(params, data);
  const MatrixXd precision = linalg::inverse_pd(params.sigma_v, "Sigma_V");
  return detail::deltas_from_precision(residuals(data, params.theta), precision, graph, bundle);
}

/// Marks edges whose standardized score strictly exceeds the chi-square
/// quantile at `level` with `dof` degrees of freedom.
inline std::vector<EdgeDiagnostic> flag_edge_outliers(std::vector<EdgeDiagnostic> diag, int dof,
                                                      double level = kDefaultEdgeLevel) {
  const double tau = chi2_quantile(dof, level);
  for (auto& d : diag) d.is_outlier = d.standardized > tau;
  return diag;
}

struct NodeDiagnostic {
  double score = 0.0;              // x'Sigma^{-1}x / l+_ii
  std::optional<bool> is_outlier;  // empty when l+_ii vanishes
};

namespace detail {

inline std::vector<NodeDiagnostic> node_scores_from_precision(const MatrixXd& resid,
                                                              const MatrixXd& precision,
                                                              const LaplacianBundle& bundle,
                                                              int dof, double level) {
  const double tau = chi2_quantile(dof, level);
  std::vector<NodeDiagnostic> out(resid.rows());
  for (Eigen::Index i = 0; i < resid.rows(); ++i) {
    const VectorXd r = resid.row(i).transpose();
    const double lii = bundle.Lplus(i, i);
    if (!(lii > 1e-14 * bundle.Lplus.diagonal().cwiseAbs().maxCoeff())) continue;
    out[i].score = r.dot(precision * r) / lii;
    out[i].is_outlier = out[i].score > tau;
  }
  return out;
}

}  // namespace detail

inline std::vector<NodeDiagnostic> node_diagnostics(const Dataset& data, const ModelParams& params,
                                                    const LaplacianBundle& bundle, int dof,
                                                    double level = kDefaultEdgeLevel) {
  check_dataset(data, bundle.num_nodes());
  check_params(params, data);
  const MatrixXd precision = linalg::inverse_pd(params.sigma_v, "Sigma_V");
  return detail::node_scores_from_precision(residuals(data, params.theta), precision, bundle, dof,
                                            level);
}

/// Node i is flagged iff x_i' Sigma_V^{-1} x_i / l+_ii exceeds the chi-square
/// quantile; nodes with l+_ii = 0 come back without a flag.
inline std::vector<std::optional<bool>> flag_node_outliers(const Dataset& data,
                                                           const ModelParams& params,
                                                           const LaplacianBundle& bundle, int dof,
                                                           double level = kDefaultEdgeLevel) {
  std::vector<std::optional<bool>> flags;
  for (const auto& d : node_diagnostics(data, params, bundle, dof, level))
    flags.push_back(d.is_outlier);
  return flags;
}

/// L^{1/2} (X - Z theta) Sigma_V^{-1/2}.
inline MatrixXd standardized_residuals(const Dataset& data, const ModelParams& params,
                                       const LaplacianBundle& bundle) {
  check_dataset(data, bundle.num_nodes());
  check_params(params, data);
  return bundle.Lhalf * residuals(data, params.theta) *
         linalg::inv_sqrt_pd(params.sigma_v, "Sigma_V");
}

}  // namespace netoutlier
