#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "netoutlier/edgewise_mcd.hpp"
#include "netoutlier/error.hpp"
#include "netoutlier/graph.hpp"
#include "netoutlier/linalg.hpp"
#include "netoutlier/model.hpp"

namespace netoutlier {

// ---- simplex operations ---------------------------------------------------

inline void check_composition(const Eigen::Ref<const VectorXd>& x, const std::string& where = "") {
  require(x.size() >= 2, ErrorKind::InvalidInput,
          "composition needs at least two parts" + (where.empty() ? "" : " (" + where + ")"));
  for (Eigen::Index k = 0; k < x.size(); ++k)
    require(std::isfinite(x(k)) && x(k) > 0.0, ErrorKind::Domain,
            "part " + std::to_string(k) + " is not strictly positive" +
                (where.empty() ? "" : " (" + where + ")"));
}

/// Rescales positive parts to sum to one.
inline VectorXd closure(const Eigen::Ref<const VectorXd>& x) {
  check_composition(x);
  return x / x.sum();
}

inline VectorXd clr(const Eigen::Ref<const VectorXd>& x) {
  check_composition(x);
  const VectorXd lx = x.array().log();
  return lx.array() - lx.mean();
}

inline VectorXd clr_inv(const Eigen::Ref<const VectorXd>& c) {
  const VectorXd e = (c.array() - c.maxCoeff()).exp();
  return e / e.sum();
}

inline VectorXd perturb(const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& y) {
  require(x.size() == y.size(), ErrorKind::DimensionMismatch, "perturbation of unequal parts");
  check_composition(x);
  check_composition(y);
  return closure(x.cwiseProduct(y));
}

inline VectorXd power(const Eigen::Ref<const VectorXd>& x, double alpha) {
  check_composition(x);
  // via clr to avoid overflow for large |alpha|
  return clr_inv(alpha * clr(x));
}

inline double aitchison_inner(const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& y) {
  require(x.size() == y.size(), ErrorKind::DimensionMismatch, "inner product of unequal parts");
  check_composition(x);
  check_composition(y);
  const Eigen::Index p = x.size();
  double s = 0.0;
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j)
      s += std::log(x(i) / x(j)) * std::log(y(i) / y(j));
  return s / (2.0 * static_cast<double>(p));
}

inline double aitchison_distance(const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& y) {
  const VectorXd d = perturb(x, power(y, -1.0));
  return std::sqrt(std::max(0.0, aitchison_inner(d, d)));
}

// ---- contrast matrices ----------------------------------------------------

/// Checks V'V = I and 1'V = 0 to `tol`.
inline void check_contrast(const MatrixXd& v, double tol = 1e-10) {
  require(v.rows() >= 2 && v.cols() == v.rows() - 1, ErrorKind::DimensionMismatch,
          "contrast matrix must be p x (p-1)");
  const double orth = (v.transpose() * v - MatrixXd::Identity(v.cols(), v.cols())).cwiseAbs().maxCoeff();
  const double sums = v.colwise().sum().cwiseAbs().maxCoeff();
  require(orth <= tol && sums <= tol, ErrorKind::InvalidInput,
          "contrast matrix is not an orthonormal basis of the zero-sum subspace");
}

/// Orthonormal Helmert basis: column k contrasts the first k parts with part k+1.
inline MatrixXd helmert_contrast(int p) {
  require(p >= 2, ErrorKind::InvalidInput, "contrast needs at least two parts");
  MatrixXd v = MatrixXd::Zero(p, p - 1);
  for (int k = 1; k < p; ++k) {
    const double s = 1.0 / std::sqrt(static_cast<double>(k) * (k + 1));
    v.col(k - 1).head(k).setConstant(s);
    v(k, k - 1) = -k * s;
  }
  return v;
}

/// Helmert basis rotated by a Haar-distributed orthogonal matrix drawn from `rng`.
inline MatrixXd random_contrast(int p, std::mt19937_64& rng) {
  require(p >= 2, ErrorKind::InvalidInput, "contrast needs at least two parts");
  std::normal_distribution<double> normal;
  MatrixXd g(p - 1, p - 1);
  for (Eigen::Index c = 0; c < g.cols(); ++c)
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, c) = normal(rng);
  const Eigen::HouseholderQR<MatrixXd> qr(g);
  MatrixXd q = qr.householderQ();
  // sign fix makes the rotation Haar distributed
  const MatrixXd rr = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index k = 0; k < q.cols(); ++k)
    if (rr(k, k) < 0.0) q.col(k) *= -1.0;
  return helmert_contrast(p) * q;
}

inline MatrixXd random_contrast(int p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_contrast(p, rng);
}

inline VectorXd ilr(const Eigen::Ref<const VectorXd>& x, const MatrixXd& v) {
  require(v.rows() == x.size(), ErrorKind::DimensionMismatch, "contrast does not match composition");
  return v.transpose() * clr(x);
}

inline VectorXd ilr_inv(const Eigen::Ref<const VectorXd>& u, const MatrixXd& v) {
  require(v.cols() == u.size(), ErrorKind::DimensionMismatch, "contrast does not match coordinates");
  return clr_inv(v * u);
}

// ---- compositional fitting ------------------------------------------------

/// Which data are compositional. Groups list raw covariate column indices;
/// each group has at least two columns and groups are disjoint.
struct CodaSchema {
  bool response_compositional = true;
  std::vector<std::vector<int>> covariate_groups;
  std::vector<std::string> group_names;  // optional, for diagnostics
};

struct CodaConfig {
  McdConfig mcd;
  double edge_level = 0.995;
  double node_level = 0.995;
  std::optional<std::uint64_t> contrast_seed;  // empty selects Helmert contrasts
  // Pin deterministic starts to Helmert coordinates so that the fit does not
  // depend on the contrast matrices.
  bool canonical_start_frame = true;
  // Append a constant covariate column after the raw covariates.
  bool add_intercept = true;
};

/// Maps raw covariates (with compositional groups) to clr and ilr coordinates.
/// Output columns keep the raw order; a group's ilr columns replace it at the
/// position of its first member.
struct CovariateMap {
  MatrixXd V;                        // q_raw x q_ilr, block Helmert/contrast per group, identity elsewhere
  std::vector<int> ilr_source;       // raw column (or first group column) per ilr column
  std::vector<int> group_of_column;  // group index per raw column, -1 if Euclidean
  std::vector<MatrixXd> group_contrasts;
};

inline void check_schema(const CodaSchema& schema, int q_raw) {
  std::vector<int> seen(q_raw, 0);
  for (std::size_t g = 0; g < schema.covariate_groups.size(); ++g) {
    const auto& grp = schema.covariate_groups[g];
    require(grp.size() >= 2, ErrorKind::InvalidInput,
            "compositional group " + std::to_string(g) + " needs at least two columns");
    for (int c : grp) {
      require(c >= 0 && c < q_raw, ErrorKind::DimensionMismatch,
              "compositional group " + std::to_string(g) + " refers to column " +
                  std::to_string(c) + " but there are " + std::to_string(q_raw) + " covariates");
      require(seen[c]++ == 0, ErrorKind::InvalidInput,
              "covariate column " + std::to_string(c) + " belongs to two groups");
    }
  }
}

inline CovariateMap covariate_map(const CodaSchema& schema, int q_raw,
                                  const std::vector<MatrixXd>& contrasts) {
  check_schema(schema, q_raw);
  require(contrasts.size() == schema.covariate_groups.size(), ErrorKind::DimensionMismatch,
          "one contrast matrix per compositional group is required");
  CovariateMap m;
  m.group_of_column.assign(q_raw, -1);
  for (std::size_t g = 0; g < schema.covariate_groups.size(); ++g) {
    check_contrast(contrasts[g]);
    require(contrasts[g].rows() == static_cast<Eigen::Index>(schema.covariate_groups[g].size()),
            ErrorKind::DimensionMismatch, "contrast size does not match group " + std::to_string(g));
    for (int c : schema.covariate_groups[g]) m.group_of_column[c] = static_cast<int>(g);
  }
  m.group_contrasts = contrasts;
  int q_ilr = q_raw;
  q_ilr -= static_cast<int>(schema.covariate_groups.size());
  m.V = MatrixXd::Zero(q_raw, q_ilr);
  std::vector<char> emitted(schema.covariate_groups.size(), 0);
  int col = 0;
  for (int c = 0; c < q_raw; ++c) {
    const int g = m.group_of_column[c];
    if (g < 0) {
      m.V(c, col++) = 1.0;
      m.ilr_source.push_back(c);
    } else if (!emitted[g]) {
      emitted[g] = 1;
      const auto& grp = schema.covariate_groups[g];
      for (Eigen::Index k = 0; k < contrasts[g].cols(); ++k) {
        for (std::size_t r = 0; r < grp.size(); ++r) m.V(grp[r], col) = contrasts[g](r, k);
        m.ilr_source.push_back(c);
        ++col;
      }
    }
  }
  return m;
}

/// Row-wise closure followed by clr. Records a warning when closure moves a
/// row by more than 1e-6 relative.
inline MatrixXd clr_rows(const MatrixXd& parts, const std::string& what,
                         std::vector<std::string>* warnings = nullptr) {
  MatrixXd out(parts.rows(), parts.cols());
  int moved = 0;
  int first_moved = -1;
  for (Eigen::Index i = 0; i < parts.rows(); ++i) {
    const VectorXd row = parts.row(i).transpose();
    for (Eigen::Index k = 0; k < row.size(); ++k)
      require(std::isfinite(row(k)) && row(k) > 0.0, ErrorKind::Domain,
              what + ": row " + std::to_string(i) + ", part " + std::to_string(k) +
                  " is not strictly positive (" + std::to_string(row(k)) + ")");
    if (std::abs(row.sum() - 1.0) > 1e-6) {
      if (moved++ == 0) first_moved = static_cast<int>(i);
    }
    out.row(i) = clr(row).transpose();  // clr is invariant to closure
  }
  if (moved > 0 && warnings)
    warnings->push_back(what + ": closure rescaled " + std::to_string(moved) +
                        " rows by more than 1e-6 (first: row " + std::to_string(first_moved) + ")");
  return out;
}

struct CodaFitResult {
  FitResult ilr_fit;
  Dataset ilr_data;
  MatrixXd V_X;  // p x (p-1), or identity for Euclidean responses
  CovariateMap covariates;
  MatrixXd X_clr;
  MatrixXd Z_clr;
  MatrixXd theta_clr;  // q_raw x p
  MatrixXd sigma_clr;  // p x p, singular with the ones vector in its null space
  std::vector<EdgeDiagnostic> edges;  // Delta in clr coordinates, flagged at edge_level
  std::vector<NodeDiagnostic> nodes;  // flagged at node_level
  int dof = 0;
  std::vector<std::string> warnings;

  /// Generalized inverse of sigma_clr, V_X (Sigma^ilr)^{-1} V_X'.
  MatrixXd precision_clr() const {
    return V_X * linalg::inverse_pd(ilr_fit.sigma_v_hat, "Sigma_V^ilr") * V_X.transpose();
  }

  /// L^{1/2} (X^clr - Z^clr theta^clr) (Sigma^clr)^{+1/2}.
  MatrixXd standardized_residuals(const LaplacianBundle& bundle) const {
    const MatrixXd root = V_X * linalg::inv_sqrt_pd(ilr_fit.sigma_v_hat, "Sigma_V^ilr") * V_X.transpose();
    return bundle.Lhalf * (X_clr - Z_clr * theta_clr) * root;
  }
};

/// Edge and node diagnostics in clr coordinates from clr residuals and the
/// generalized inverse of Sigma^clr.
inline void coda_diagnostics(CodaFitResult& out, const WeightedGraph& graph,
                             const LaplacianBundle& bundle, const CodaConfig& config) {
  const MatrixXd resid = out.X_clr - out.Z_clr * out.theta_clr;
  const MatrixXd prec = out.precision_clr();
  out.edges = flag_edge_outliers(detail::deltas_from_precision(resid, prec, graph, bundle), out.dof,
                                 config.edge_level);
  out.nodes = detail::node_scores_from_precision(resid, prec, bundle, out.dof, config.node_level);
}

/// Robust fit in ilr coordinates, back-mapped to clr. `x` holds the raw
/// responses (compositions when the schema says so), `z` the raw covariates.
inline CodaFitResult fit_compositional(const MatrixXd& x, const MatrixXd& z, const CodaSchema& schema,
                                       const WeightedGraph& graph, const LaplacianBundle& bundle,
                                       const CodaConfig& config = {}) {
  require(x.rows() == graph.num_nodes() && z.rows() == graph.num_nodes(),
          ErrorKind::DimensionMismatch, "compositional data rows do not match the graph");
  const int p = static_cast<int>(x.cols());
  check_schema(schema, static_cast<int>(z.cols()));
  MatrixXd z_all = z;
  if (config.add_intercept) {
    z_all.conservativeResize(Eigen::NoChange, z.cols() + 1);
    z_all.col(z.cols()).setOnes();
  }
  const int q_raw = static_cast<int>(z_all.cols());

  std::mt19937_64 rng(config.contrast_seed.value_or(0));
  auto contrast = [&](int parts) {
    return config.contrast_seed ? random_contrast(parts, rng) : helmert_contrast(parts);
  };

  CodaFitResult out;
  if (schema.response_compositional) {
    require(p >= 2, ErrorKind::InvalidInput, "compositional responses need at least two parts");
    out.V_X = contrast(p);
    out.X_clr = clr_rows(x, "responses", &out.warnings);
  } else {
    out.V_X = MatrixXd::Identity(p, p);
    out.X_clr = x;
  }
  std::vector<MatrixXd> contrasts;
  for (const auto& grp : schema.covariate_groups) contrasts.push_back(contrast(static_cast<int>(grp.size())));
  out.covariates = covariate_map(schema, q_raw, contrasts);

  out.Z_clr = z_all;
  for (std::size_t g = 0; g < schema.covariate_groups.size(); ++g) {
    const auto& grp = schema.covariate_groups[g];
    const std::string name = g < schema.group_names.size() ? schema.group_names[g]
                                                           : "covariate group " + std::to_string(g);
    const MatrixXd block = clr_rows(detail::select_cols(z_all, grp), name, &out.warnings);
    for (std::size_t k = 0; k < grp.size(); ++k) out.Z_clr.col(grp[k]) = block.col(k);
  }
  out.ilr_data.X = out.X_clr * out.V_X;
  out.ilr_data.Z = out.Z_clr * out.covariates.V;
  out.dof = static_cast<int>(out.V_X.cols());

  McdConfig mcd = config.mcd;
  if (config.canonical_start_frame) {
    // coordinates relative to the Helmert frame: u_H = H' V u
    const MatrixXd hx = schema.response_compositional ? helmert_contrast(p) : MatrixXd::Identity(p, p);
    std::vector<MatrixXd> helm;
    for (const auto& grp : schema.covariate_groups) helm.push_back(helmert_contrast(static_cast<int>(grp.size())));
    const MatrixXd hz = covariate_map(schema, q_raw, helm).V;
    const MatrixXd fz_full = out.covariates.V.transpose() * hz;
    const std::vector<int> active = nonconstant_columns(out.ilr_data.Z);
    std::vector<int> inactive;
    for (int c = 0; c < fz_full.cols(); ++c)
      if (std::find(active.begin(), active.end(), c) == active.end()) inactive.push_back(c);
    const MatrixXd fz = detail::select_rows(detail::select_cols(fz_full, active), active);
    const bool closed = inactive.empty() ||
                        detail::select_rows(detail::select_cols(fz_full, active), inactive).cwiseAbs().maxCoeff() < 1e-12;
    if (closed) {
      mcd.start_frame = StartFrame{fz, out.V_X.transpose() * hx};
    } else {
      out.warnings.push_back("start frame not applied: a compositional group mixes constant and varying ilr columns");
    }
  }

  out.ilr_fit = edgewise_mcd_fit(out.ilr_data, graph, bundle, mcd);
  for (auto& w : out.ilr_fit.warnings) out.warnings.push_back(w);
  out.theta_clr = out.covariates.V * out.ilr_fit.theta_hat * out.V_X.transpose();
  out.sigma_clr = out.V_X * out.ilr_fit.sigma_v_hat * out.V_X.transpose();
  out.sigma_clr = 0.5 * (out.sigma_clr + out.sigma_clr.transpose());
  coda_diagnostics(out, graph, bundle, config);
  return out;
}

// ---- synthetic election-shaped replica ------------------------------------

/// Synthetic data shaped like a departmental election table: three-part vote
/// shares per node, nineteen raw covariates (age 3 parts, employment 5 parts,
/// education 3 parts, eight Euclidean columns) and an adjacency network.
struct ElectionReplica {
  WeightedGraph graph;
  MatrixXd coords;           // n x 2 node positions used to build the network
  MatrixXd X;                // n x 3 vote shares
  MatrixXd Z;                // n x 19 raw covariates
  CodaSchema schema;
  std::vector<std::string> response_names;
  std::vector<std::string> covariate_names;
  ModelParams truth_ilr;     // parameters in Helmert ilr coordinates, intercept appended last
  std::optional<Edge> planted;
};

/// `plant_shift` is the ilr distance the planted pair is pushed apart along
/// the first response coordinate.
inline ElectionReplica make_election_replica(std::uint64_t seed, bool plant_pair, int n = 95,
                                             double plant_shift = 1.5) {
  require(n >= 10, ErrorKind::InvalidInput, "replica needs at least 10 nodes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal;
  ElectionReplica rep;
  rep.response_names = {"left", "right", "others"};
  rep.covariate_names = {"age_18_39", "age_40_64", "age_65", "emp_AZ", "emp_BE", "emp_FZ", "emp_GU",
                         "emp_OQ", "foreign", "income_rate", "owner_rate", "unemployment",
                         "employment_growth", "edu_secondary", "edu_highschool", "edu_university",
                         "density", "median_age", "turnout"};
  rep.schema.covariate_groups = {{0, 1, 2}, {3, 4, 5, 6, 7}, {13, 14, 15}};
  rep.schema.group_names = {"age", "employment", "education"};

  // adjacency network: 4 nearest neighbours of random points, unit weights
  for (int attempt = 0;; ++attempt) {
    require(attempt < 100, ErrorKind::Degenerate, "replica network did not connect");
    rep.coords.resize(n, 2);
    for (int i = 0; i < n; ++i) rep.coords.row(i) << unif(rng), unif(rng);
    rep.graph = build_knn_graph(rep.coords, 4);
    if (rep.graph.connected()) break;
  }
  const LaplacianBundle bundle = laplacian_bundle(rep.graph);

  // covariates in ilr/Euclidean coordinates with a smooth spatial trend
  const CovariateMap map = covariate_map(rep.schema, 19, {helmert_contrast(3), helmert_contrast(5), helmert_contrast(3)});
  const int q_ilr = static_cast<int>(map.V.cols());
  MatrixXd z_ilr(n, q_ilr);
  for (int c = 0; c < q_ilr; ++c) {
    const double a = normal(rng), b = normal(rng), phase = 6.283 * unif(rng);
    for (int i = 0; i < n; ++i)
      z_ilr(i, c) = 0.6 * std::sin(3.0 * a * rep.coords(i, 0) + 3.0 * b * rep.coords(i, 1) + phase) +
                    0.3 * normal(rng);
  }
  // raw covariates: groups back on the simplex, Euclidean columns as is
  rep.Z.resize(n, 19);
  for (int c = 0; c < 19; ++c) {
    if (map.group_of_column[c] < 0) {
      const auto it = std::find(map.ilr_source.begin(), map.ilr_source.end(), c);
      rep.Z.col(c) = z_ilr.col(it - map.ilr_source.begin());
    }
  }
  for (std::size_t g = 0; g < rep.schema.covariate_groups.size(); ++g) {
    const auto& grp = rep.schema.covariate_groups[g];
    const auto it = std::find(map.ilr_source.begin(), map.ilr_source.end(), grp.front());
    const int first = static_cast<int>(it - map.ilr_source.begin());
    const int width = static_cast<int>(grp.size()) - 1;
    for (int i = 0; i < n; ++i) {
      const VectorXd parts = ilr_inv(z_ilr.row(i).segment(first, width).transpose(), map.group_contrasts[g]);
      for (std::size_t k = 0; k < grp.size(); ++k) rep.Z(i, grp[k]) = parts(k);
    }
  }

  // responses: matrix normal in Helmert ilr coordinates with an intercept
  Dataset design;
  design.Z.resize(n, q_ilr + 1);
  design.Z << z_ilr, VectorXd::Ones(n);
  rep.truth_ilr.theta = MatrixXd(q_ilr + 1, 2);
  for (Eigen::Index r = 0; r < rep.truth_ilr.theta.rows(); ++r)
    for (Eigen::Index c = 0; c < 2; ++c) rep.truth_ilr.theta(r, c) = 0.3 * normal(rng);
  rep.truth_ilr.theta.row(q_ilr) << 0.2, -0.1;
  rep.truth_ilr.sigma_v = MatrixXd(2, 2);
  rep.truth_ilr.sigma_v << 0.04, 0.01, 0.01, 0.02;
  const Dataset sample = sample_matrix_normal(rep.truth_ilr, bundle, design.Z, rng());
  MatrixXd x_ilr = sample.X;

  if (plant_pair) {
    // push an adjacent pair apart along the first response coordinate
    const Edge e = rep.graph.edges()[rng() % rep.graph.num_edges()];
    x_ilr(e.i, 0) += 0.5 * plant_shift;
    x_ilr(e.j, 0) -= 0.5 * plant_shift;
    rep.planted = e;
  }
  const MatrixXd hx = helmert_contrast(3);
  rep.X.resize(n, 3);
  for (int i = 0; i < n; ++i) rep.X.row(i) = ilr_inv(x_ilr.row(i).transpose(), hx).transpose();
  return rep;
}

}  // namespace netoutlier
