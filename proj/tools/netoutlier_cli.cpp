// netoutlier: edgewise outlier detection for multivariate graph-indexed data.
//
//   netoutlier detect   --data X.csv --edges E.csv [--covariates Z.csv] [--coda schema.json] --out DIR
//   netoutlier simulate --config sim.json --out DIR
//   netoutlier sample   --model model.json --edges E.csv --seed S --out DIR
//
// Exit codes: 0 success, 2 parse/config error, 3 dimension mismatch or missing
// value, 4 disconnected graph, 5 estimator degeneracy.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "netoutlier.hpp"

namespace fs = std::filesystem;
using namespace netoutlier;
using io::json;

namespace {

constexpr int kExitParse = 2;
constexpr int kExitDimension = 3;
constexpr int kExitDisconnected = 4;
constexpr int kExitDegenerate = 5;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Parse:
    case ErrorKind::InvalidInput:
    case ErrorKind::Domain: return kExitParse;
    case ErrorKind::DimensionMismatch:
    case ErrorKind::MissingValue: return kExitDimension;
    case ErrorKind::DisconnectedGraph: return kExitDisconnected;
    case ErrorKind::Degenerate:
    case ErrorKind::Decomposition: return kExitDegenerate;
  }
  return 1;
}

/// NETOUTLIER_SEED wins over --seed when set.
std::optional<std::uint64_t> resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (const char* env = std::getenv("NETOUTLIER_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      require(used == std::string(env).size(), ErrorKind::Parse, "");
      return v;
    } catch (const std::exception&) {
      fail(ErrorKind::Parse, std::string("NETOUTLIER_SEED='") + env + "' is not an unsigned integer");
    }
  }
  return flag;
}

void prepare_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorKind::InvalidInput, "cannot create output directory " + dir);
}

void require_connected(const WeightedGraph& g) {
  if (g.connected()) return;
  const auto label = g.components();
  int stray = 0;
  while (label[stray] == 0) ++stray;
  fail(ErrorKind::DisconnectedGraph, "graph has " + std::to_string(g.component_count()) +
                                         " components; node " + std::to_string(stray) +
                                         " is not connected to node 0");
}

void require_finite(const MatrixXd& m, const std::string& what) {
  require(m.allFinite(), ErrorKind::Degenerate, what + " has non-finite entries");
}

// ---- detect ----------------------------------------------------------------

struct DetectOptions {
  std::string data, covariates, edges, out, coda;
  std::optional<double> level, node_level;
  double h_fraction = 0.75;
  int max_csteps = 100;
  bool no_reweight = false, no_rescale = false, no_intercept = false;
  std::optional<std::uint64_t> contrast_seed, seed;
  int threads = 1;
};

int cmd_detect(const DetectOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  require(o.h_fraction > 0.0 && o.h_fraction <= 1.0, ErrorKind::InvalidInput, "--h-fraction must lie in (0, 1]");
  const io::Table xt = io::read_table(o.data);
  const int n = static_cast<int>(xt.values.rows());
  require(n >= 2, ErrorKind::DimensionMismatch, o.data + ": need at least two nodes");
  io::Table zt;
  zt.values.resize(n, 0);
  if (!o.covariates.empty()) {
    zt = io::read_table(o.covariates);
    require(zt.values.rows() == n, ErrorKind::DimensionMismatch,
            o.covariates + " has " + std::to_string(zt.values.rows()) + " rows but " + o.data + " has " +
                std::to_string(n));
  }
  const WeightedGraph graph = io::read_graph(o.edges, n);
  require_connected(graph);
  const LaplacianBundle bundle = laplacian_bundle(graph);

  McdConfig mcd;
  mcd.h_fraction = o.h_fraction;
  mcd.max_csteps = o.max_csteps;
  mcd.reweight = !o.no_reweight;
  mcd.rescale = !o.no_rescale;
  mcd.threads = o.threads;

  std::vector<std::string> covariate_names = zt.header;
  if (!o.no_intercept) covariate_names.push_back("(intercept)");
  const int p = static_cast<int>(xt.values.cols());
  std::vector<EdgeDiagnostic> edges;
  std::vector<NodeDiagnostic> nodes;
  MatrixXd std_resid;
  json params;
  double level = 0.0;

  if (!o.coda.empty()) {
    const CodaSchema schema = io::schema_from_json(io::read_json(o.coda), zt.header);
    CodaConfig cc;
    cc.mcd = mcd;
    cc.edge_level = o.level.value_or(0.995);
    cc.node_level = o.node_level.value_or(cc.edge_level);
    cc.contrast_seed = o.contrast_seed;
    cc.add_intercept = !o.no_intercept;
    level = cc.edge_level;
    const CodaFitResult f = fit_compositional(xt.values, zt.values, schema, graph, bundle, cc);
    edges = f.edges;
    nodes = f.nodes;
    std_resid = f.standardized_residuals(bundle);
    params = io::params_json(f.ilr_fit, xt.header, covariate_names);
    // clr-space estimates are the reported ones; ilr ones kept for reference
    params["coordinates"] = "clr";
    params["theta"] = io::to_json(f.theta_clr);
    params["sigma_v"] = io::to_json(f.sigma_clr);
    params["theta_ilr"] = io::to_json(f.ilr_fit.theta_hat);
    params["sigma_v_ilr"] = io::to_json(f.ilr_fit.sigma_v_hat);
    params["contrast_responses"] = io::to_json(f.V_X);
    params["contrast_covariates"] = io::to_json(f.covariates.V);
    params["dof"] = f.dof;
    params["warnings"] = f.warnings;
    require_finite(f.theta_clr, "theta");
    require_finite(f.sigma_clr, "Sigma_V");
  } else {
    Dataset data{xt.values, zt.values};
    if (!o.no_intercept) {
      data.Z.conservativeResize(Eigen::NoChange, data.Z.cols() + 1);
      data.Z.col(data.Z.cols() - 1).setOnes();
    }
    level = o.level.value_or(kDefaultEdgeLevel);
    const FitResult fit = edgewise_mcd_fit(data, graph, bundle, mcd);
    const ModelParams est = fit.params();
    require_finite(est.theta, "theta");
    linalg::require_pd(est.sigma_v, "estimated Sigma_V");
    edges = flag_edge_outliers(edge_deltas(data, est, bundle, graph), p, level);
    nodes = node_diagnostics(data, est, bundle, p, o.node_level.value_or(level));
    std_resid = standardized_residuals(data, est, bundle);
    params = io::params_json(fit, xt.header, covariate_names);
    params["coordinates"] = "euclidean";
    params["dof"] = p;
  }
  for (const auto& e : edges)
    require(std::isfinite(e.delta) && std::isfinite(e.standardized), ErrorKind::Degenerate,
            "edge (" + std::to_string(e.i) + "," + std::to_string(e.j) + ") has a non-finite statistic");
  require_finite(std_resid, "standardized residuals");

  prepare_dir(o.out);
  const fs::path dir(o.out);
  io::write_edges((dir / "edges.csv").string(), edges);
  io::write_nodes((dir / "nodes.csv").string(), nodes);
  io::write_json((dir / "params.json").string(), params);
  io::write_matrix((dir / "residuals.csv").string(), xt.header, std_resid);

  int n_edge_flags = 0, n_node_flags = 0;
  for (const auto& e : edges) n_edge_flags += e.is_outlier;
  for (const auto& v : nodes) n_node_flags += v.is_outlier.value_or(false);

  io::RunManifest m;
  m.command = "detect";
  m.config = {{"level", level},
              {"node_level", o.node_level.value_or(level)},
              {"h_fraction", o.h_fraction},
              {"max_csteps", o.max_csteps},
              {"reweight", !o.no_reweight},
              {"rescale", !o.no_rescale},
              {"intercept", !o.no_intercept},
              {"coda", !o.coda.empty()},
              {"contrast_seed", o.contrast_seed ? json(*o.contrast_seed) : json(nullptr)},
              {"threads", o.threads}};
  m.inputs[o.data] = io::file_digest(o.data);
  m.inputs[o.edges] = io::file_digest(o.edges);
  if (!o.covariates.empty()) m.inputs[o.covariates] = io::file_digest(o.covariates);
  if (!o.coda.empty()) m.inputs[o.coda] = io::file_digest(o.coda);
  m.seed = o.seed;
  m.outputs = {"edges.csv", "nodes.csv", "params.json", "residuals.csv"};
  m.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_json((dir / "manifest.json").string(), m.to_json());

  std::cout << n << " nodes, " << edges.size() << " edges: " << n_edge_flags << " edge outliers, "
            << n_node_flags << " node outliers at level " << level << "\n";
  return 0;
}

// ---- simulate --------------------------------------------------------------

struct SimulateOptions {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

int cmd_simulate(const SimulateOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const json raw = io::read_json(o.config);
  auto cells = io::sim_configs_from_json(raw);
  for (auto& c : cells) {
    if (o.seed) c.seed = *o.seed;
    if (o.threads) c.threads = *o.threads;
    validate(c);
  }
  std::vector<ScoreRow> rows;
  prepare_dir(o.out);
  const fs::path dir(o.out);
  io::CsvWriter failures((dir / "failures.csv").string(), {"graph", "n", "zeta", "rep", "method", "message"});
  int n_failures = 0;
  for (const auto& c : cells) {
    const StudyResult r = run_study(c);
    rows.insert(rows.end(), r.rows.begin(), r.rows.end());
    for (const auto& f : r.failures) {
      ++n_failures;
      std::string msg = f.message;
      std::replace(msg.begin(), msg.end(), ',', ';');
      failures.row({to_string(c.graph_type), std::to_string(c.n), io::fmt(c.zeta), std::to_string(f.rep),
                    f.method ? to_string(*f.method) : "", msg});
    }
  }
  const auto meds = cell_medians(rows);
  io::write_scores((dir / "scores.csv").string(), rows);
  io::write_medians((dir / "medians.csv").string(), meds);

  io::RunManifest m;
  m.command = "simulate";
  m.config = json::array();
  for (const auto& c : cells) m.config.push_back(io::sim_config_json(c));
  m.inputs[o.config] = io::file_digest(o.config);
  m.seed = cells.front().seed;
  m.outputs = {"scores.csv", "medians.csv", "failures.csv"};
  m.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_json((dir / "manifest.json").string(), m.to_json());

  for (const auto& med : meds)
    std::cout << to_string(med.graph_type) << " n=" << med.n << " zeta=" << med.zeta << " "
              << to_string(med.method) << ": Fsc " << med.fsc << ", KL " << med.kl << ", RD " << med.rd
              << " (" << med.count << " reps)\n";
  if (n_failures > 0) std::cerr << n_failures << " rep failures recorded in failures.csv\n";
  return 0;
}

// ---- sample ----------------------------------------------------------------

struct SampleOptions {
  std::string model, edges, out;
  std::optional<std::uint64_t> seed;
};

int cmd_sample(const SampleOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const json model = io::read_json(o.model);
  require(model.is_object() && model.contains("sigma_v"), ErrorKind::Parse, o.model + ": needs 'sigma_v'");
  const MatrixXd sigma = io::matrix_from_json(model["sigma_v"], "sigma_v");
  const int p = static_cast<int>(sigma.rows());
  require(sigma.cols() == p, ErrorKind::DimensionMismatch, "sigma_v must be square");
  linalg::require_pd(sigma, "Sigma_V");

  MatrixXd theta(0, p);
  if (model.contains("theta")) theta = io::matrix_from_json(model["theta"], "theta");
  require(theta.cols() == p, ErrorKind::DimensionMismatch,
          "theta has " + std::to_string(theta.cols()) + " columns but Sigma_V is " + std::to_string(p) + " x " +
              std::to_string(p));
  const int q = static_cast<int>(theta.rows());

  int n = 0;
  if (model.contains("n")) {
    n = model["n"].get<int>();
  } else {
    const io::Table et = io::read_table(o.edges);
    const int ci = et.column("i"), cj = et.column("j");
    require(ci >= 0 && cj >= 0, ErrorKind::Parse, o.edges + ": edge list needs columns 'i' and 'j'");
    n = et.values.rows() > 0 ? static_cast<int>(std::max(et.values.col(ci).maxCoeff(), et.values.col(cj).maxCoeff())) + 1 : 0;
  }
  const WeightedGraph graph = io::read_graph(o.edges, n);
  require_connected(graph);
  const LaplacianBundle bundle = laplacian_bundle(graph);

  const std::uint64_t seed = o.seed.value_or(1);
  std::mt19937_64 rng(seed);
  MatrixXd z(n, q);
  bool z_given = model.contains("covariates");
  if (z_given) {
    z = io::matrix_from_json(model["covariates"], "covariates");
    require(z.rows() == n && z.cols() == q, ErrorKind::DimensionMismatch,
            "covariates must be " + std::to_string(n) + " x " + std::to_string(q));
  } else {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      for (Eigen::Index r = 0; r < z.rows(); ++r) z(r, c) = u(rng);
  }
  const Dataset data = sample_matrix_normal({theta, sigma}, bundle, z, rng());

  auto names = [&](const char* key, const std::string& prefix, int count) {
    std::vector<std::string> out;
    if (model.contains(key)) out = model[key].get<std::vector<std::string>>();
    require(out.empty() || static_cast<int>(out.size()) == count, ErrorKind::DimensionMismatch,
            std::string(key) + " has the wrong length");
    for (int k = static_cast<int>(out.size()); k < count; ++k) out.push_back(prefix + std::to_string(k + 1));
    return out;
  };
  prepare_dir(o.out);
  const fs::path dir(o.out);
  io::write_matrix((dir / "data.csv").string(), names("responses", "x", p), data.X);
  std::vector<std::string> outputs = {"data.csv"};
  if (q > 0) {
    io::write_matrix((dir / "covariates.csv").string(), names("covariate_names", "z", q), data.Z);
    outputs.push_back("covariates.csv");
  }
  io::RunManifest m;
  m.command = "sample";
  m.config = {{"n", n}, {"p", p}, {"q", q}, {"covariates_given", z_given}};
  m.inputs[o.model] = io::file_digest(o.model);
  m.inputs[o.edges] = io::file_digest(o.edges);
  m.seed = seed;
  m.outputs = outputs;
  m.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  io::write_json((dir / "manifest.json").string(), m.to_json());
  std::cout << "sampled " << n << " x " << p << " responses" << (q > 0 ? " with covariates" : "") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Edgewise outlier detection for multivariate data on weighted graphs"};
  app.set_version_flag("--version", std::string(io::kVersion));
  app.require_subcommand(1);

  DetectOptions d;
  auto* detect = app.add_subcommand("detect", "Fit the robust model and flag outlying edges and nodes");
  detect->add_option("--data", d.data, "Response CSV, one row per node")->required();
  detect->add_option("--edges", d.edges, "Edge list CSV with columns i, j[, w] (0-based nodes)")->required();
  detect->add_option("--covariates", d.covariates, "Covariate CSV, one row per node");
  detect->add_option("--out", d.out, "Output directory")->required();
  detect->add_option("--coda", d.coda, "Schema JSON declaring compositional responses and covariate groups");
  detect->add_option("--contrast-seed", d.contrast_seed, "Random contrast matrices for --coda (default Helmert)");
  detect->add_option("--level", d.level, "Edge flag level (default 0.975, 0.995 with --coda)");
  detect->add_option("--node-level", d.node_level, "Node flag level (default: edge level)");
  detect->add_option("--h-fraction", d.h_fraction, "Fraction of edges kept by the trimmed objective")
      ->capture_default_str();
  detect->add_option("--max-csteps", d.max_csteps, "C-step cap per start")->capture_default_str();
  detect->add_flag("--no-reweight", d.no_reweight, "Skip the reweighting step");
  detect->add_flag("--no-rescale", d.no_rescale, "Skip the final median rescaling");
  detect->add_flag("--no-intercept", d.no_intercept, "Do not append a constant covariate");
  detect->add_option("--seed", d.seed, "Recorded in the manifest (NETOUTLIER_SEED overrides)");
  detect->add_option("--threads", d.threads, "Threads for the deterministic starts")->capture_default_str();

  SimulateOptions s;
  auto* simulate = app.add_subcommand("simulate", "Run a simulation study from a JSON config");
  simulate->add_option("--config", s.config, "Simulation config JSON")->required();
  simulate->add_option("--out", s.out, "Output directory")->required();
  simulate->add_option("--seed", s.seed, "Master seed (overrides the config; NETOUTLIER_SEED overrides this)");
  simulate->add_option("--threads", s.threads, "Threads across reps");

  SampleOptions sm;
  auto* sample = app.add_subcommand("sample", "Sample one dataset from the matrix-normal model");
  sample->add_option("--model", sm.model, "Model JSON with sigma_v[, theta, covariates, n]")->required();
  sample->add_option("--edges", sm.edges, "Edge list CSV")->required();
  sample->add_option("--out", sm.out, "Output directory")->required();
  sample->add_option("--seed", sm.seed, "Seed (NETOUTLIER_SEED overrides)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitParse;
  }

  try {
    if (*detect) {
      d.seed = resolve_seed(d.seed);
      return cmd_detect(d);
    }
    if (*simulate) {
      s.seed = resolve_seed(s.seed);
      return cmd_simulate(s);
    }
    sm.seed = resolve_seed(sm.seed);
    return cmd_sample(sm);
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitParse;
  }
}
