#include <gtest/gtest.h>

#include <random>

#include "netoutlier/edgewise_mcd.hpp"
#include "test_support.hpp"

using namespace netoutlier;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Problem {
  WeightedGraph graph;
  LaplacianBundle bundle;
  ModelParams truth;
  Dataset data;
};

// kNN graph on uniform points, Z = [1, U(-1,1) columns], matrix-normal X.
Problem make_problem(int n, int p, int q, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0), c(-1.0, 1.0);
  MatrixXd pts(n, 2);
  for (int i = 0; i < n; ++i) pts.row(i) << u(rng), u(rng);
  Problem pr{build_knn_graph(pts, 5), {}, {}, {}};
  pr.bundle = laplacian_bundle(pr.graph);
  MatrixXd Z(n, q);
  Z.col(0).setOnes();
  for (int i = 0; i < n; ++i)
    for (int k = 1; k < q; ++k) Z(i, k) = c(rng);
  pr.truth = {oracle::random_normal(q, p, rng), oracle::random_spd(p, rng)};
  pr.data = sample_matrix_normal(pr.truth, pr.bundle, Z, seed + 1000);
  return pr;
}

double rel_frob(const MatrixXd& a, const MatrixXd& b) { return (a - b).norm() / b.norm(); }

MatrixXd active_theta(const ModelParams& p, const EdgewiseDesign& d) {
  return detail::select_rows(p.theta, d.active_cols);
}

EdgewiseDesign gaussian_design(int rows, int p, int q, std::mt19937_64& rng, MatrixXd* theta) {
  EdgewiseDesign d;
  d.n = rows / 2;
  d.Z_E = oracle::random_normal(rows, q, rng);
  *theta = oracle::random_normal(q, p, rng);
  const MatrixXd sigma = oracle::random_spd(p, rng);
  const MatrixXd chol = sigma.llt().matrixL();
  d.X_E = d.Z_E * *theta + oracle::random_normal(rows, p, rng) * chol.transpose();
  for (int k = 0; k < q; ++k) d.active_cols.push_back(k);
  for (int r = 0; r < rows; ++r) d.edges.push_back({r, r + 1, 1.0});
  return d;
}

}  // namespace

TEST(EdgewiseDesign, SingleEdgeAndWeightScaling) {
  WeightedGraph g(2, {{0, 1, 1.0}});
  Dataset data{MatrixXd(2, 2), MatrixXd::Ones(2, 1)};
  data.X << 1, 0, 0, 0;
  auto d = build_edgewise_design(data, g);
  EXPECT_EQ(d.X_E(0, 0), 1.0);
  EXPECT_EQ(d.X_E(0, 1), 0.0);
  EXPECT_EQ(d.Z_E(0, 0), 0.0);

  WeightedGraph g4(2, {{0, 1, 4.0}});
  d = build_edgewise_design(data, g4);
  EXPECT_EQ(d.X_E(0, 0), 2.0);
  EXPECT_EQ((d.X_E.transpose() * d.X_E)(0, 0), 4.0);
}

TEST(EdgewiseDesign, GramMatchesDirectSum) {
  std::mt19937_64 rng(1);
  const auto g = oracle::random_connected_graph(25, 30, rng);
  Dataset data{oracle::random_normal(25, 2, rng), oracle::random_normal(25, 3, rng)};
  const auto d = build_edgewise_design(data, g);
  MatrixXd direct = MatrixXd::Zero(3, 3);
  for (const auto& e : g.edges()) {
    const VectorXd dz = (data.Z.row(e.i) - data.Z.row(e.j)).transpose();
    direct += dz * dz.transpose() * e.w;
  }
  EXPECT_LT((d.Z_E.transpose() * d.Z_E - direct).cwiseAbs().maxCoeff(), 1e-10);
  // and the Laplacian form
  EXPECT_LT((d.Z_E.transpose() * d.Z_E - data.Z.transpose() * laplacian(g) * data.Z)
                .cwiseAbs()
                .maxCoeff(),
            1e-10);
}

TEST(MleFit, NoiseFreeRecoversTheta) {
  std::mt19937_64 rng(2);
  const auto g = oracle::random_connected_graph(20, 15, rng);
  const auto b = laplacian_bundle(g);
  MatrixXd Z(20, 3);
  Z << MatrixXd::Ones(20, 1), oracle::random_normal(20, 2, rng);
  const MatrixXd theta = oracle::random_normal(3, 2, rng);
  const Dataset data{Z * theta, Z};
  const auto fit = mle_fit(data, g, b);
  EXPECT_LT((fit.theta - theta).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT(fit.sigma_v.cwiseAbs().maxCoeff(), 1e-20);
}

TEST(MleFit, InterceptOnly) {
  std::mt19937_64 rng(3);
  const auto g = oracle::random_connected_graph(15, 10, rng);
  const auto b = laplacian_bundle(g);
  const Dataset data{oracle::random_normal(15, 3, rng), MatrixXd::Ones(15, 1)};
  const auto fit = mle_fit(data, g, b);
  const MatrixXd want = data.X.transpose() * b.L * data.X / 15.0;
  EXPECT_LT((fit.sigma_v - want).cwiseAbs().maxCoeff(), 1e-12);
  // theta is free; the intercept row centres the residuals
  EXPECT_LT((fit.theta.row(0) - data.X.colwise().mean()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MleFit, NodeAndEdgewisePathsAgree) {
  for (std::uint64_t seed : {4u, 5u, 6u}) {
    const auto pr = make_problem(80, 3, 4, seed);
    const auto node = mle_fit(pr.data, pr.graph, pr.bundle);
    const auto design = build_edgewise_design(pr.data, pr.graph);
    const auto edge = mle_fit_edgewise(design);
    EXPECT_LT((active_theta(node, design) - edge.theta).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((node.sigma_v - edge.sigma_v).cwiseAbs().maxCoeff(),
              1e-10 * node.sigma_v.cwiseAbs().maxCoeff());
  }
}

TEST(MleFit, RankDeficientNamesDirection) {
  std::mt19937_64 rng(7);
  const auto g = oracle::random_connected_graph(12, 8, rng);
  const auto b = laplacian_bundle(g);
  MatrixXd Z(12, 3);
  Z.col(0).setOnes();
  Z.col(1) = oracle::random_normal(12, 1, rng);
  Z.col(2) = 2.0 * Z.col(1);
  try {
    mle_fit({oracle::random_normal(12, 2, rng), Z}, g, b);
    FAIL() << "expected rank deficiency";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("z1"), std::string::npos);
    EXPECT_NE(msg.find("z2"), std::string::npos);
  }
}

TEST(MleFit, DisconnectedGraphRejected) {
  WeightedGraph g(4, {{0, 1, 1.0}, {2, 3, 1.0}});
  const auto b = laplacian_bundle(g);
  try {
    mle_fit({MatrixXd::Ones(4, 1), MatrixXd::Ones(4, 1)}, g, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DisconnectedGraph);
  }
}

TEST(TrimmedObjective, FullSetAndZeroResiduals) {
  const auto pr = make_problem(40, 2, 2, 8);
  const auto design = build_edgewise_design(pr.data, pr.graph);
  const int E = design.num_edges();
  const double full = trimmed_objective(design, pr.truth, E);
  const double direct = total_mahalanobis(pr.data, pr.truth, pr.bundle, pr.graph) +
                        40.0 * std::log(pr.truth.sigma_v.determinant());
  EXPECT_NEAR(full, direct, 1e-9 * std::abs(direct));

  Dataset exact{pr.data.Z * pr.truth.theta, pr.data.Z};
  const auto d0 = build_edgewise_design(exact, pr.graph);
  EXPECT_NEAR(trimmed_objective(d0, {pr.truth.theta, MatrixXd::Identity(2, 2)}, E / 2 + 3), 0.0,
              1e-18);
}

TEST(TrimmedObjective, SumTermMonotoneInH) {
  const auto pr = make_problem(40, 2, 2, 9);
  const auto design = build_edgewise_design(pr.data, pr.graph);
  const ModelParams unit{pr.truth.theta, MatrixXd::Identity(2, 2)};
  double prev = 0.0;
  for (int h = 1; h <= design.num_edges(); ++h) {
    const double obj = trimmed_objective(design, unit, h);
    EXPECT_GE(obj, prev);
    prev = obj;
  }
  EXPECT_THROW(trimmed_objective(design, unit, 0), Error);
  EXPECT_THROW(trimmed_objective(design, {pr.truth.theta, -MatrixXd::Identity(2, 2)}, 5), Error);
}

TEST(CStep, FixedPoint) {
  const auto pr = make_problem(60, 3, 3, 10);
  const auto design = build_edgewise_design(pr.data, pr.graph);
  const int h = resolve_h({}, design.num_edges(), 3);
  auto step = c_step(design, pr.truth, h);
  for (int it = 0; it < 50; ++it) {
    auto next = c_step(design, step.params, h);
    if (next.subset == step.subset) {
      auto again = c_step(design, next.params, h);
      EXPECT_EQ(again.subset, next.subset);
      EXPECT_LT((again.params.theta - next.params.theta).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LT((again.params.sigma_v - next.params.sigma_v).cwiseAbs().maxCoeff(), 1e-10);
      return;
    }
    step = std::move(next);
  }
  FAIL() << "no fixed point within 50 steps";
}

TEST(CStep, DescentFromRandomStarts) {
  const auto pr = make_problem(70, 3, 3, 11);
  const auto design = build_edgewise_design(pr.data, pr.graph);
  const int h = resolve_h({}, design.num_edges(), 3);
  std::mt19937_64 rng(12);
  for (int rep = 0; rep < 200; ++rep) {
    ModelParams start{oracle::random_normal(3, 3, rng) * 3.0, oracle::random_spd(3, rng)};
    start.theta.row(0).setZero();
    const auto step = c_step(design, start, h);
    const double after = trimmed_objective(design, step.params, h);
    EXPECT_LE(after, step.objective_in + 1e-9 * std::abs(step.objective_in)) << rep;
  }
}

TEST(CStep, RecoversThetaFromCleanSubset) {
  std::mt19937_64 rng(13);
  MatrixXd theta;
  auto d = gaussian_design(200, 2, 3, rng, &theta);
  d.X_E = d.Z_E * theta;
  const int h = 150;
  for (int r = h; r < 200; ++r) d.X_E.row(r) += 50.0 * oracle::random_normal(1, 2, rng);
  const auto step = c_step(d, {theta, MatrixXd::Identity(2, 2)}, h);
  std::vector<int> want(h);
  std::iota(want.begin(), want.end(), 0);
  EXPECT_EQ(step.subset, want);
  EXPECT_LT((step.params.theta - theta).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(CStep, SingularSubsetRejected) {
  std::mt19937_64 rng(14);
  MatrixXd theta;
  auto d = gaussian_design(40, 2, 2, rng, &theta);
  d.Z_E.col(1) = d.Z_E.col(0);
  EXPECT_THROW(c_step(d, {theta, MatrixXd::Identity(2, 2)}, 30), Error);
}

TEST(Starts, CloseToMleOnCleanData) {
  std::mt19937_64 rng(15);
  MatrixXd theta;
  const auto d = gaussian_design(2000, 3, 3, rng, &theta);
  const auto mle = mle_fit_edgewise(d);
  const auto starts = deterministic_starts(d);
  ASSERT_EQ(starts.size(), 4u);
  for (const auto& s : starts) {
    ASSERT_TRUE(s.params) << to_string(s.method) << ": " << s.note;
    EXPECT_LT(rel_frob(s.params->theta, mle.theta), 0.10) << to_string(s.method);
    EXPECT_GT(s.params->sigma_v.llt().matrixLLT().diagonal().minCoeff(), 0.0);
  }
}

TEST(Starts, RowPermutationInvariant) {
  std::mt19937_64 rng(16);
  MatrixXd theta;
  const auto d = gaussian_design(300, 2, 3, rng, &theta);
  auto dp = d;
  std::vector<int> perm(300);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  dp.Z_E = detail::select_rows(d.Z_E, perm);
  dp.X_E = detail::select_rows(d.X_E, perm);
  const auto a = deterministic_starts(d);
  const auto b = deterministic_starts(dp);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_LT((a[k].params->theta - b[k].params->theta).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((a[k].params->sigma_v - b[k].params->sigma_v).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Starts, RobustToGrossRowCorruption) {
  std::mt19937_64 rng(17);
  MatrixXd theta;
  const auto clean = deterministic_starts(gaussian_design(1000, 2, 3, rng, &theta));
  std::mt19937_64 rng2(17);
  auto d = gaussian_design(1000, 2, 3, rng2, &theta);
  const auto mle_clean = mle_fit_edgewise(d);
  for (int r = 0; r < 200; ++r) {
    d.X_E.row(r) = 100.0 * oracle::random_normal(1, 2, rng2);
    d.Z_E.row(r) = 100.0 * oracle::random_normal(1, 3, rng2);
  }
  const auto corrupted = deterministic_starts(d);
  const auto mle_corrupted = mle_fit_edgewise(d);
  const auto& rank_clean = *clean[1].params;
  const auto& rank_corr = *corrupted[1].params;
  ASSERT_EQ(clean[1].method, SeedMethod::Rank);
  EXPECT_LT(rel_frob(rank_corr.theta, rank_clean.theta), 0.5);
  EXPECT_GT(rel_frob(mle_corrupted.theta, mle_clean.theta), 0.5);
  EXPECT_GT(rel_frob(mle_corrupted.sigma_v, mle_clean.sigma_v), 1.0);
}

TEST(Starts, FrameLeavesCleanStartsClose) {
  std::mt19937_64 rng(18);
  MatrixXd theta;
  const auto d = gaussian_design(500, 2, 2, rng, &theta);
  StartFrame frame{MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2)};
  const auto a = deterministic_starts(d);
  const auto b = deterministic_starts(d, frame);
  for (std::size_t k = 0; k < a.size(); ++k)
    EXPECT_LT((a[k].params->theta - b[k].params->theta).cwiseAbs().maxCoeff(), 1e-12);
  frame.x.resize(3, 3);
  EXPECT_THROW(deterministic_starts(d, frame), Error);
}

TEST(ResolveH, DefaultsAndRange) {
  EXPECT_EQ(resolve_h({}, 100, 3), 75);
  EXPECT_EQ(min_admissible_h(100, 3), 52);
  McdConfig cfg;
  cfg.h = 51;
  EXPECT_THROW(resolve_h(cfg, 100, 3), Error);
  cfg.h = 52;
  EXPECT_EQ(resolve_h(cfg, 100, 3), 52);
  cfg.h = 101;
  EXPECT_THROW(resolve_h(cfg, 100, 3), Error);
}

TEST(EdgewiseMcdFit, NoTrimmingEqualsMle) {
  const auto pr = make_problem(80, 3, 3, 19);
  McdConfig cfg;
  cfg.h = static_cast<int>(pr.graph.num_edges());
  cfg.reweight = false;
  cfg.rescale = false;
  const auto fit = edgewise_mcd_fit(pr.data, pr.graph, pr.bundle, cfg);
  const auto mle = mle_fit(pr.data, pr.graph, pr.bundle);
  EXPECT_LT((fit.theta_hat - mle.theta).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((fit.sigma_v_hat - mle.sigma_v).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_EQ(fit.active_set.size(), pr.graph.num_edges());
}

TEST(EdgewiseMcdFit, RescaledMedianIsChiSquareMedian) {
  const auto pr = make_problem(120, 3, 3, 20);
  const auto fit = edgewise_mcd_fit(pr.data, pr.graph, pr.bundle);
  ASSERT_TRUE(fit.rescaled);
  const auto diag = edge_deltas(pr.data, fit.params(), pr.bundle, pr.graph);
  std::vector<double> s;
  for (const auto& d : diag) s.push_back(d.standardized);
  EXPECT_NEAR(detail::median(s), chi2_quantile(3, 0.5), 1e-9);
}

TEST(EdgewiseMcdFit, TraceInvariants) {
  for (std::uint64_t seed = 21; seed < 31; ++seed) {
    const auto pr = make_problem(100, 3, 3, seed);
    const auto fit = edgewise_mcd_fit(pr.data, pr.graph, pr.bundle);
    EXPECT_EQ(static_cast<int>(fit.active_set.size()), fit.h);
    EXPECT_TRUE(fit.converged);
    EXPECT_LE(fit.n_csteps, 100);
    EXPECT_TRUE(fit.sigma_v_hat.isApprox(fit.sigma_v_hat.transpose()));
    EXPECT_GT(linalg::eigen_sym(fit.sigma_v_hat).eigenvalues().minCoeff(), 0.0);
    for (const auto& t : fit.starts) {
      EXPECT_TRUE(t.survived);
      EXPECT_EQ(t.monotonicity_violations, 0);
      for (std::size_t k = 1; k < t.objectives.size(); ++k)
        EXPECT_LE(t.objectives[k], t.objectives[k - 1] + 1e-9 * std::abs(t.objectives[k - 1]));
    }
    // objective is the trimmed objective of the winning pre-reweight chain
    EXPECT_EQ(fit.objective, fit.starts[fit.start_id].objectives.back());
  }
}

TEST(EdgewiseMcdFit, ThreadedMatchesSerial) {
  const auto pr = make_problem(90, 2, 3, 31);
  McdConfig cfg;
  const auto serial = edgewise_mcd_fit(pr.data, pr.graph, pr.bundle, cfg);
  cfg.threads = 4;
  const auto threaded = edgewise_mcd_fit(pr.data, pr.graph, pr.bundle, cfg);
  EXPECT_TRUE(serial.theta_hat == threaded.theta_hat);
  EXPECT_TRUE(serial.sigma_v_hat == threaded.sigma_v_hat);
  EXPECT_EQ(serial.active_set, threaded.active_set);
}

TEST(EdgewiseMcdFit, DisconnectedGraphRejected) {
  WeightedGraph g(4, {{0, 1, 1.0}, {2, 3, 1.0}});
  const auto b = laplacian_bundle(g);
  try {
    edgewise_mcd_fit({MatrixXd::Ones(4, 1), MatrixXd::Ones(4, 1)}, g, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DisconnectedGraph);
  }
}

TEST(EdgewiseMcdFit, CStepsAffineEquivariant) {
  // A C-step chain maps exactly under X -> X A' + 1 c'.
  const auto pr = make_problem(80, 3, 3, 32);
  std::mt19937_64 rng(33);
  MatrixXd A = oracle::random_normal(3, 3, rng) + 2.0 * MatrixXd::Identity(3, 3);
  Dataset moved = pr.data;
  moved.X = pr.data.X * A.transpose();
  moved.X.rowwise() += Eigen::RowVectorXd::LinSpaced(3, -5.0, 7.0);
  const auto d1 = build_edgewise_design(pr.data, pr.graph);
  const auto d2 = build_edgewise_design(moved, pr.graph);
  const int h = resolve_h({}, d1.num_edges(), 3);
  const ModelParams start = mle_fit(pr.data, pr.graph, pr.bundle);
  ModelParams start2{start.theta * A.transpose(), A * start.sigma_v * A.transpose()};
  const auto c1 = run_csteps(d1, start, h, {});
  const auto c2 = run_csteps(d2, start2, h, {});
  EXPECT_EQ(c1.subset, c2.subset);
  const MatrixXd t1 = active_theta(c1.params, d1) * A.transpose();
  EXPECT_LT(rel_frob(active_theta(c2.params, d2), t1), 1e-6);
  EXPECT_LT(rel_frob(c2.params.sigma_v, A * c1.params.sigma_v * A.transpose()), 1e-6);
}

TEST(EdgewiseMcdFit, FullFitEquivariantUnderScaledSignedPermutations) {
  // The deterministic starts are built from coordinatewise scales, so the
  // whole fit is equivariant for A = signed permutation times positive
  // diagonal. General A is covered at the C-step level above.
  const auto pr = make_problem(120, 3, 3, 34);
  MatrixXd A = MatrixXd::Zero(3, 3);
  A(0, 2) = -3.0;
  A(1, 0) = 0.25;
  A(2, 1) = 7.0;
  const Eigen::RowVectorXd shift = Eigen::RowVectorXd::LinSpaced(3, -5.0, 7.0);
  Dataset moved = pr.data;
  moved.X = pr.data.X * A.transpose();
  moved.X.rowwise() += shift;
  const auto f1 = edgewise_mcd_fit(pr.data, pr.graph, pr.bundle);
  const auto f2 = edgewise_mcd_fit(moved, pr.graph, pr.bundle);
  ASSERT_EQ(f1.active_set, f2.active_set);
  EXPECT_EQ(f1.start_id, f2.start_id);
  MatrixXd want = f1.theta_hat * A.transpose();
  want.row(0) += shift;  // intercept column
  EXPECT_LT(rel_frob(f2.theta_hat, want), 1e-6);
  EXPECT_LT(rel_frob(f2.sigma_v_hat, A * f1.sigma_v_hat * A.transpose()), 1e-6);
}

TEST(EdgewiseMcdFit, BreakdownSmoke) {
  const auto pr = make_problem(200, 2, 3, 36);
  McdConfig cfg;
  cfg.h = min_admissible_h(static_cast<int>(pr.graph.num_edges()), 2);
  const auto clean = edgewise_mcd_fit(pr.data, pr.graph, pr.bundle, cfg);
  const double clean_err = (clean.theta_hat.bottomRows(2) - pr.truth.theta.bottomRows(2)).norm();

  // corrupt nodes until just under a quarter of the edges are touched
  const auto& edges = pr.graph.edges();
  std::vector<char> bad(200, 0), touched(edges.size(), 0);
  std::size_t n_touched = 0;
  for (int v = 0; v < 200; v += 3) {
    std::size_t extra = 0;
    for (std::size_t e = 0; e < edges.size(); ++e)
      if (!touched[e] && (edges[e].i == v || edges[e].j == v)) ++extra;
    if (n_touched + extra > edges.size() / 4) continue;
    bad[v] = 1;
    for (std::size_t e = 0; e < edges.size(); ++e)
      if (edges[e].i == v || edges[e].j == v) touched[e] = 1;
    n_touched += extra;
  }
  double prev_mle_err = 0.0;
  for (double mag : {1e2, 1e4, 1e6}) {
    Dataset data = pr.data;
    std::mt19937_64 rng(37);
    for (int v = 0; v < 200; ++v)
      if (bad[v]) data.X.row(v) += mag * oracle::random_normal(1, 2, rng);
    const auto fit = edgewise_mcd_fit(data, pr.graph, pr.bundle, cfg);
    const double err = (fit.theta_hat.bottomRows(2) - pr.truth.theta.bottomRows(2)).norm();
    EXPECT_LT(err, 2.0 * clean_err + 1e-12) << mag;
    const auto mle = mle_fit(data, pr.graph, pr.bundle);
    const double mle_err = (mle.theta.bottomRows(2) - pr.truth.theta.bottomRows(2)).norm();
    EXPECT_GT(mle_err, 10.0 * prev_mle_err) << mag;
    prev_mle_err = mle_err;
  }
}
