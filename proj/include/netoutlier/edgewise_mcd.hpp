#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "netoutlier/error.hpp"
#include "netoutlier/graph.hpp"
#include "netoutlier/linalg.hpp"
#include "netoutlier/model.hpp"
#include "netoutlier/robust_stats.hpp"

namespace netoutlier {

/// Weighted edgewise differences: row r holds (z_i - z_j) sqrt(w_ij) and
/// (x_i - x_j) sqrt(w_ij) for the r-th edge (i < j) of the graph.
struct EdgewiseDesign {
  MatrixXd Z_E;
  MatrixXd X_E;
  std::vector<Edge> edges;
  int n = 0;
  // Covariate columns that vary across nodes. Constant columns have zero
  // edgewise differences and are not identifiable from them.
  std::vector<int> active_cols;

  int num_edges() const { return static_cast<int>(X_E.rows()); }
  int p() const { return static_cast<int>(X_E.cols()); }
  int q() const { return static_cast<int>(Z_E.cols()); }
};

inline std::vector<int> nonconstant_columns(const MatrixXd& Z) {
  std::vector<int> cols;
  for (Eigen::Index c = 0; c < Z.cols(); ++c)
    if (Z.rows() > 0 && (Z.col(c).array() != Z(0, c)).any()) cols.push_back(static_cast<int>(c));
  return cols;
}

inline EdgewiseDesign build_edgewise_design(const Dataset& data, const WeightedGraph& graph) {
  check_dataset(data, graph.num_nodes());
  EdgewiseDesign d;
  d.n = graph.num_nodes();
  d.edges = graph.edges();
  d.Z_E.resize(static_cast<Eigen::Index>(graph.num_edges()), data.q());
  d.X_E.resize(static_cast<Eigen::Index>(graph.num_edges()), data.p());
  Eigen::Index r = 0;
  for (const auto& e : graph.edges()) {
    const double s = std::sqrt(e.w);
    d.Z_E.row(r) = (data.Z.row(e.i) - data.Z.row(e.j)) * s;
    d.X_E.row(r) = (data.X.row(e.i) - data.X.row(e.j)) * s;
    ++r;
  }
  d.active_cols = nonconstant_columns(data.Z);
  return d;
}

namespace detail {

inline MatrixXd select_cols(const MatrixXd& a, const std::vector<int>& cols) {
  MatrixXd out(a.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(k) = a.col(cols[k]);
  return out;
}

inline MatrixXd select_rows(const MatrixXd& a, const std::vector<int>& rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(k) = a.row(rows[k]);
  return out;
}

/// Solves the normal equations G theta = B for symmetric G, failing with a
/// message naming the direction in covariate space that is not identified.
inline MatrixXd solve_normal_equations(const MatrixXd& gram, const MatrixXd& rhs,
                                       const std::vector<int>& cols, const std::string& what) {
  if (gram.rows() == 0) return MatrixXd::Zero(0, rhs.cols());
  const auto eig = linalg::eigen_sym(gram);
  const double lo = eig.eigenvalues()(0);
  const double hi = eig.eigenvalues()(gram.rows() - 1);
  if (!(lo > 1e-12 * hi) || !(hi > 0.0)) {
    const VectorXd dir = eig.eigenvectors().col(0);
    std::string msg = what + " is rank-deficient; unidentified covariate direction:";
    for (Eigen::Index k = 0; k < dir.size(); ++k)
      if (std::abs(dir(k)) > 1e-6)
        msg += " z" + std::to_string(cols[k]) + "*" + std::to_string(dir(k));
    fail(ErrorKind::Degenerate, msg);
  }
  return linalg::spectral_apply(eig, [](double v) { return 1.0 / v; }) * rhs;
}

/// Expands coefficients of the active covariates into a full q x p theta.
/// The first nonzero constant column absorbs the node mean of the remaining
/// residual so that residual columns sum to zero; other constant columns get 0.
inline MatrixXd expand_theta(const MatrixXd& theta_active, const std::vector<int>& active,
                             const Dataset& data) {
  MatrixXd theta = MatrixXd::Zero(data.q(), data.p());
  for (std::size_t k = 0; k < active.size(); ++k) theta.row(active[k]) = theta_active.row(k);
  const MatrixXd resid = data.X - data.Z * theta;
  for (int c = 0; c < data.q(); ++c) {
    if (std::find(active.begin(), active.end(), c) != active.end()) continue;
    const double v = data.Z(0, c);
    if (v != 0.0) {
      theta.row(c) = resid.colwise().mean() / v;
      break;
    }
  }
  return theta;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), ErrorKind::InvalidInput, "median of an empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  return 0.5 * (upper + *std::max_element(v.begin(), v.begin() + mid));
}

}  // namespace detail

/// Closed-form maximum likelihood estimates in node form:
/// theta = (Z'LZ)^{-1} Z'LX and Sigma_V = (X - Z theta)' L (X - Z theta) / n.
/// Constant covariate columns (e.g. an intercept) are annihilated by L; their
/// coefficient is set to centre the residuals.
inline ModelParams mle_fit(const Dataset& data, const WeightedGraph& graph,
                           const LaplacianBundle& bundle) {
  check_dataset(data, graph.num_nodes());
  require(graph.connected(), ErrorKind::DisconnectedGraph,
          "maximum likelihood fit requires a connected graph");
  const std::vector<int> active = nonconstant_columns(data.Z);
  const MatrixXd Za = detail::select_cols(data.Z, active);
  const MatrixXd theta_active = detail::solve_normal_equations(
      Za.transpose() * bundle.L * Za, Za.transpose() * bundle.L * data.X, active, "Z'LZ");
  ModelParams out;
  out.theta = detail::expand_theta(theta_active, active, data);
  const MatrixXd resid = residuals(data, out.theta);
  out.sigma_v = resid.transpose() * bundle.L * resid / static_cast<double>(data.n());
  return out;
}

/// The same estimates from the edgewise design matrices:
/// theta = (Z_E'Z_E)^{-1} Z_E'X_E, Sigma_V = (X_E - Z_E theta)'(X_E - Z_E theta) / n.
/// Returns coefficients for the active covariates only (rows in
/// `design.active_cols` order).
inline ModelParams mle_fit_edgewise(const EdgewiseDesign& design) {
  const MatrixXd Za = detail::select_cols(design.Z_E, design.active_cols);
  ModelParams out;
  out.theta = detail::solve_normal_equations(Za.transpose() * Za, Za.transpose() * design.X_E,
                                             design.active_cols, "Z_E'Z_E");
  const MatrixXd resid = design.X_E - Za * out.theta;
  out.sigma_v = resid.transpose() * resid / static_cast<double>(design.n);
  return out;
}

/// Per-edge Delta from the design rows: r' Sigma^{-1} r with r the weighted
/// residual difference. `theta` has one row per design covariate column.
inline VectorXd design_deltas(const EdgewiseDesign& design, const ModelParams& params) {
  require(params.theta.rows() == design.q() && params.theta.cols() == design.p(),
          ErrorKind::DimensionMismatch, "theta does not match the edgewise design");
  const MatrixXd precision = linalg::inverse_pd(params.sigma_v, "Sigma_V");
  const MatrixXd resid = design.X_E - design.Z_E * params.theta;
  return ((resid * precision).array() * resid.array()).rowwise().sum().max(0.0);
}

/// Indices of the h smallest values, ties broken by lower index; sorted.
inline std::vector<int> smallest_h(const VectorXd& values, int h) {
  std::vector<int> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto less = [&](int a, int b) { return values(a) != values(b) ? values(a) < values(b) : a < b; };
  std::nth_element(idx.begin(), idx.begin() + (h - 1), idx.end(), less);
  idx.resize(h);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Trimmed objective: sum of the h smallest Delta plus (n h / |E|) log|Sigma_V|.
inline double trimmed_objective(const EdgewiseDesign& design, const ModelParams& params, int h) {
  require(h >= 1 && h <= design.num_edges(), ErrorKind::InvalidInput,
          "h must lie in [1, |E|]");
  const VectorXd delta = design_deltas(design, params);
  std::vector<double> sorted(delta.data(), delta.data() + delta.size());
  std::partial_sort(sorted.begin(), sorted.begin() + h, sorted.end());
  const double trimmed = std::accumulate(sorted.begin(), sorted.begin() + h, 0.0);
  const double weight = static_cast<double>(design.n) * h / design.num_edges();
  return trimmed + weight * linalg::logdet_pd(params.sigma_v, "Sigma_V");
}

/// Refits theta and Sigma_V on a subset of edges; Sigma_V is normalized by
/// n |subset| / |E|.
inline ModelParams refit_on_subset(const EdgewiseDesign& design, const std::vector<int>& subset) {
  const MatrixXd Zs = detail::select_cols(detail::select_rows(design.Z_E, subset), design.active_cols);
  const MatrixXd Xs = detail::select_rows(design.X_E, subset);
  const MatrixXd theta_active = detail::solve_normal_equations(
      Zs.transpose() * Zs, Zs.transpose() * Xs, design.active_cols, "Gamma_Z'Z on the edge subset");
  ModelParams out;
  out.theta = MatrixXd::Zero(design.q(), design.p());
  for (std::size_t k = 0; k < design.active_cols.size(); ++k)
    out.theta.row(design.active_cols[k]) = theta_active.row(k);
  const MatrixXd resid = Xs - Zs * theta_active;
  const double divisor =
      static_cast<double>(design.n) * static_cast<double>(subset.size()) / design.num_edges();
  out.sigma_v = resid.transpose() * resid / divisor;
  return out;
}

struct CStepResult {
  ModelParams params;          // refitted on `subset`
  std::vector<int> subset;     // h smallest Delta under the input parameters
  double objective_in = 0.0;   // trimmed objective of the input parameters
};

/// One concentration step: order edges by Delta under `params`, keep the h
/// smallest, refit theta then Sigma_V on them.
inline CStepResult c_step(const EdgewiseDesign& design, const ModelParams& params, int h) {
  const VectorXd delta = design_deltas(design, params);
  CStepResult out;
  out.subset = smallest_h(delta, h);
  double trimmed = 0.0;
  for (int e : out.subset) trimmed += delta(e);
  out.objective_in = trimmed + static_cast<double>(design.n) * h / design.num_edges() *
                                   linalg::logdet_pd(params.sigma_v, "Sigma_V");
  out.params = refit_on_subset(design, out.subset);
  return out;
}

/// Invertible linear maps applied to the active covariate columns and the
/// responses before computing deterministic starts; the starts are mapped
/// back afterwards. Lets a caller pin starts to a canonical coordinate frame.
struct StartFrame {
  MatrixXd z;  // q_active x q_active
  MatrixXd x;  // p x p
};

struct StartEstimate {
  SeedMethod method = SeedMethod::Tanh;
  std::optional<ModelParams> params;  // empty when the start degenerated
  std::string note;
};

namespace detail {

/// Robust covariance of the columns of `a` from one seed method:
/// Qn-scale, seed correlation, singular value adjustment, re-inflate.
inline MatrixXd seed_covariance(const MatrixXd& a, SeedMethod method) {
  const VectorXd scale = qn_scales(a);
  for (Eigen::Index c = 0; c < scale.size(); ++c)
    require(scale(c) > 0.0, ErrorKind::Degenerate,
            "column " + std::to_string(c) + " has zero Qn scale");
  const MatrixXd as = a * scale.cwiseInverse().asDiagonal();
  const MatrixXd s = seed_correlation(as, as, method).S;
  const MatrixXd adj = svd_adjust(s, as, as);
  return scale.asDiagonal() * adj * scale.asDiagonal();
}

}  // namespace detail

/// Four deterministic initial estimates (tanh, rank, normal-scores,
/// spatial-sign). The seed covariance of the joint matrix [Z_E X_E] yields
/// theta0 from its blocks; Sigma_V0 comes from the seed covariance of the
/// residual rows, scaled by |E| / n.
inline std::vector<StartEstimate> deterministic_starts(const EdgewiseDesign& design,
                                                       const std::optional<StartFrame>& frame = {}) {
  const int qa = static_cast<int>(design.active_cols.size());
  const int p = design.p();
  require(design.num_edges() > p + qa, ErrorKind::InvalidInput,
          "deterministic starts need more edges than p + q");
  MatrixXd za = detail::select_cols(design.Z_E, design.active_cols);
  MatrixXd xe = design.X_E;
  if (frame) {
    require(frame->z.rows() == qa && frame->z.cols() == qa && frame->x.rows() == p &&
                frame->x.cols() == p,
            ErrorKind::DimensionMismatch, "start frame does not match the design");
    za = za * frame->z;
    xe = xe * frame->x;
  }
  MatrixXd joint(design.num_edges(), qa + p);
  joint << za, xe;
  const double edge_to_node = static_cast<double>(design.num_edges()) / design.n;

  std::vector<StartEstimate> starts;
  for (SeedMethod method : kSeedMethods) {
    StartEstimate st;
    st.method = method;
    try {
      const MatrixXd cov = detail::seed_covariance(joint, method);
      MatrixXd theta_a = MatrixXd::Zero(qa, p);
      if (qa > 0) {
        theta_a = detail::solve_normal_equations(cov.topLeftCorner(qa, qa),
                                                 cov.topRightCorner(qa, p), design.active_cols,
                                                 "seed covariance of Z_E");
      }
      const MatrixXd resid = xe - za * theta_a;
      MatrixXd sigma = edge_to_node * detail::seed_covariance(resid, method);
      if (frame) {
        const MatrixXd xinv = frame->x.inverse();
        theta_a = frame->z * theta_a * xinv;
        sigma = xinv.transpose() * sigma * xinv;
        sigma = 0.5 * (sigma + sigma.transpose());
      }
      linalg::require_pd(sigma, "start covariance");
      ModelParams params;
      params.theta = MatrixXd::Zero(design.q(), p);
      for (int k = 0; k < qa; ++k) params.theta.row(design.active_cols[k]) = theta_a.row(k);
      params.sigma_v = sigma;
      st.params = std::move(params);
    } catch (const Error& err) {
      st.note = err.what();
    }
    starts.push_back(std::move(st));
  }
  return starts;
}

struct McdConfig {
  int h = 0;                 // 0 selects ceil(h_fraction |E|), clamped to the admissible range
  double h_fraction = 0.75;
  int max_csteps = 100;
  double objective_tol = 1e-10;
  double reweight_level = 0.975;
  bool reweight = true;
  bool rescale = true;
  // Scale the raw estimate so the median standardized Delta is chi2_{p,0.5}
  // before applying the reweighting cut.
  bool consistency_before_reweight = true;
  int threads = 1;
  std::optional<StartFrame> start_frame;
};

inline int min_admissible_h(int num_edges, int p) {
  return (num_edges + p + 2) / 2;  // ceil((|E| + p + 1) / 2)
}

inline int resolve_h(const McdConfig& config, int num_edges, int p) {
  const int lo = min_admissible_h(num_edges, p);
  if (config.h == 0) {
    require(config.h_fraction > 0.0 && config.h_fraction <= 1.0, ErrorKind::InvalidInput,
            "h fraction must lie in (0, 1]");
    const int h = static_cast<int>(std::ceil(config.h_fraction * num_edges - 1e-9));
    return std::clamp(h, std::min(lo, num_edges), num_edges);
  }
  require(config.h >= lo && config.h <= num_edges, ErrorKind::InvalidInput,
          "h = " + std::to_string(config.h) + " outside the admissible range [" +
              std::to_string(lo) + ", " + std::to_string(num_edges) + "]");
  return config.h;
}

struct StartTrace {
  SeedMethod method = SeedMethod::Tanh;
  bool survived = false;
  std::string note;
  std::vector<double> objectives;  // trimmed objective before each C-step, then at the end
  int n_csteps = 0;
  bool converged = false;
  int monotonicity_violations = 0;
};

struct FitResult {
  MatrixXd theta_hat;
  MatrixXd sigma_v_hat;
  double objective = 0.0;  // trimmed objective at the C-step fixed point, before reweighting
  std::vector<int> active_set;
  int h = 0;
  int n_csteps = 0;
  int start_id = -1;
  SeedMethod start_method = SeedMethod::Tanh;
  bool converged = false;
  bool reweighted = false;
  std::size_t reweight_set_size = 0;
  double raw_consistency_factor = 1.0;
  bool rescaled = false;
  double rescale_factor = 1.0;
  std::vector<StartTrace> starts;
  std::vector<std::string> warnings;

  ModelParams params() const { return {theta_hat, sigma_v_hat}; }
};

struct ChainResult {
  StartTrace trace;
  ModelParams params;
  std::vector<int> subset;
  double objective = std::numeric_limits<double>::infinity();
};

/// Iterates C-steps from `start` until the retained edge set repeats (or the
/// objective stalls within tolerance, or max_csteps is hit).
inline ChainResult run_csteps(const EdgewiseDesign& design, ModelParams start, int h,
                              const McdConfig& config) {
  ChainResult out;
  out.params = std::move(start);
  std::vector<int> previous;
  double prev_obj = std::numeric_limits<double>::infinity();
  while (true) {
    const VectorXd delta = design_deltas(design, out.params);
    std::vector<int> subset = smallest_h(delta, h);
    double trimmed = 0.0;
    for (int e : subset) trimmed += delta(e);
    const double obj = trimmed + static_cast<double>(design.n) * h / design.num_edges() *
                                     linalg::logdet_pd(out.params.sigma_v, "Sigma_V");
    out.trace.objectives.push_back(obj);
    if (std::isfinite(prev_obj) && obj > prev_obj + 1e-9 * std::max(1.0, std::abs(prev_obj)))
      ++out.trace.monotonicity_violations;
    const bool stalled = std::isfinite(prev_obj) &&
                         std::abs(prev_obj - obj) <= config.objective_tol * std::max(1.0, std::abs(obj));
    if (subset == previous || stalled) {
      out.trace.converged = true;
      out.subset = std::move(subset);
      out.objective = obj;
      break;
    }
    if (out.trace.n_csteps >= config.max_csteps) {
      out.subset = std::move(subset);
      out.objective = obj;
      break;
    }
    out.params = refit_on_subset(design, subset);
    linalg::require_pd(out.params.sigma_v, "C-step covariance");
    ++out.trace.n_csteps;
    previous = std::move(subset);
    prev_obj = obj;
  }
  return out;
}

/// Standardized Delta (Delta / (w (l+_ii + l+_jj - 2 l+_ij))) for every edge.
inline VectorXd standardized_design_deltas(const EdgewiseDesign& design, const ModelParams& params,
                                           const LaplacianBundle& bundle) {
  VectorXd d = design_deltas(design, params);
  for (int r = 0; r < design.num_edges(); ++r) {
    const auto& e = design.edges[r];
    d(r) /= e.w * bundle.resistance(e.i, e.j);
  }
  return d;
}

/// Robust edgewise MCD: C-step chains from the deterministic starts, winner
/// by lowest trimmed objective, then optional reweighting on all edges whose
/// standardized Delta passes the chi-square cut and optional rescaling of
/// Sigma_V so that the median standardized Delta is the chi-square median.
inline FitResult edgewise_mcd_fit(const Dataset& data, const WeightedGraph& graph,
                                  const LaplacianBundle& bundle, const McdConfig& config = {}) {
  check_dataset(data, graph.num_nodes());
  require(graph.connected(), ErrorKind::DisconnectedGraph,
          "edgewise MCD requires a connected graph (found " +
              std::to_string(graph.component_count()) + " components)");
  require(config.max_csteps >= 0, ErrorKind::InvalidInput, "max_csteps must be non-negative");
  require(config.reweight_level > 0.0 && config.reweight_level < 1.0, ErrorKind::InvalidInput,
          "reweighting level must lie in (0,1)");
  const EdgewiseDesign design = build_edgewise_design(data, graph);
  const int p = design.p();
  FitResult result;
  result.h = resolve_h(config, design.num_edges(), p);

  const auto starts = deterministic_starts(design, config.start_frame);
  std::vector<std::optional<ChainResult>> chains(starts.size());
  auto run = [&](std::size_t k) -> std::optional<ChainResult> {
    if (!starts[k].params) return std::nullopt;
    try {
      return run_csteps(design, *starts[k].params, result.h, config);
    } catch (const Error&) {
      return std::nullopt;
    }
  };
  if (config.threads > 1) {
    std::vector<std::future<std::optional<ChainResult>>> futures;
    for (std::size_t k = 0; k < starts.size(); ++k)
      futures.push_back(std::async(std::launch::async, run, k));
    for (std::size_t k = 0; k < starts.size(); ++k) chains[k] = futures[k].get();
  } else {
    for (std::size_t k = 0; k < starts.size(); ++k) chains[k] = run(k);
  }

  int best = -1;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    StartTrace trace;
    if (chains[k]) trace = chains[k]->trace;
    trace.method = starts[k].method;
    trace.survived = chains[k].has_value();
    trace.note = starts[k].note.empty() && !chains[k] ? "degenerate C-step chain" : starts[k].note;
    if (!trace.survived)
      result.warnings.push_back(std::string("start ") + to_string(starts[k].method) +
                                " dropped: " + trace.note);
    result.starts.push_back(std::move(trace));
    if (chains[k] && (best < 0 || chains[k]->objective < chains[best]->objective))
      best = static_cast<int>(k);
  }
  require(best >= 0, ErrorKind::Degenerate, "all deterministic starts degenerated");

  const ChainResult& win = *chains[best];
  ModelParams params = win.params;
  result.objective = win.objective;
  result.active_set = win.subset;
  result.start_id = best;
  result.start_method = starts[best].method;
  result.n_csteps = win.trace.n_csteps;
  result.converged = win.trace.converged;
  if (!result.converged)
    result.warnings.push_back("C-steps did not reach a fixed point within max_csteps");

  if (config.reweight) {
    VectorXd stdz = standardized_design_deltas(design, params, bundle);
    if (config.consistency_before_reweight) {
      // the raw trimmed covariance is too small; correct it before the cut
      const double med = detail::median(std::vector<double>(stdz.data(), stdz.data() + stdz.size()));
      if (med > 0.0) {
        result.raw_consistency_factor = med / chi2_quantile(p, 0.5);
        stdz /= result.raw_consistency_factor;
      }
    }
    const double cut = chi2_quantile(p, config.reweight_level);
    std::vector<int> keep;
    for (int r = 0; r < design.num_edges(); ++r)
      if (stdz(r) <= cut) keep.push_back(r);
    try {
      ModelParams refit = refit_on_subset(design, keep);
      linalg::require_pd(refit.sigma_v, "reweighted covariance");
      params = std::move(refit);
      result.reweighted = true;
      result.reweight_set_size = keep.size();
    } catch (const Error& err) {
      result.warnings.push_back(std::string("reweighting skipped: ") + err.what());
    }
  }

  if (config.rescale) {
    const VectorXd stdz = standardized_design_deltas(design, params, bundle);
    const double med = detail::median(std::vector<double>(stdz.data(), stdz.data() + stdz.size()));
    if (med > 0.0) {
      result.rescale_factor = med / chi2_quantile(p, 0.5);
      params.sigma_v *= result.rescale_factor;
      result.rescaled = true;
    } else {
      result.warnings.push_back("rescaling skipped: median standardized Delta is zero");
    }
  }

  MatrixXd theta_active(static_cast<Eigen::Index>(design.active_cols.size()), p);
  for (std::size_t k = 0; k < design.active_cols.size(); ++k)
    theta_active.row(k) = params.theta.row(design.active_cols[k]);
  result.theta_hat = detail::expand_theta(theta_active, design.active_cols, data);
  result.sigma_v_hat = 0.5 * (params.sigma_v + params.sigma_v.transpose());
  return result;
}

}  // namespace netoutlier
