#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "netoutlier/coda.hpp"
#include "netoutlier/edgewise_mcd.hpp"
#include "netoutlier/error.hpp"
#include "netoutlier/graph.hpp"
#include "netoutlier/model.hpp"
#include "netoutlier/sim_bench.hpp"

#ifndef NETOUTLIER_VERSION
#define NETOUTLIER_VERSION "0.0.0"
#endif

namespace netoutlier::io {

using json = nlohmann::json;

inline constexpr const char* kVersion = NETOUTLIER_VERSION;

/// Shortest form is not needed; 17 significant digits always round-trip.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- CSV -----------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  MatrixXd values;

  int column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto keep = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), keep));
  s.erase(std::find_if(s.rbegin(), s.rend(), keep).base(), s.end());
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
      field += c;
    } else if (c == ',' && !quoted) {
      out.push_back(trim(field));
      field.clear();
    } else {
      field += c;
    }
  }
  out.push_back(trim(field));
  return out;
}

inline bool is_missing(const std::string& s) {
  std::string l;
  for (char c : s) l += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return l.empty() || l == "na" || l == "nan" || l == "null";
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Parse, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Numeric CSV with a header line. Missing entries (empty, NA, NaN) raise
/// MissingValue naming the line and column; other non-numeric entries raise
/// Parse.
inline Table read_table(const std::string& path) {
  std::istringstream in(detail::read_file(path));
  Table t;
  std::string line;
  int lineno = 0;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    require(fields.size() == t.header.size(), ErrorKind::Parse,
            path + " line " + std::to_string(lineno) + ": expected " +
                std::to_string(t.header.size()) + " fields, found " + std::to_string(fields.size()));
    std::vector<double> row;
    for (std::size_t c = 0; c < fields.size(); ++c) {
      const std::string where = path + " line " + std::to_string(lineno) + ", column '" + t.header[c] + "'";
      require(!detail::is_missing(fields[c]), ErrorKind::MissingValue,
              where + ": missing value (rows with missing values are not supported)");
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(fields[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      require(used == fields[c].size() && std::isfinite(v), ErrorKind::Parse,
              where + ": '" + fields[c] + "' is not a finite number");
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  require(!t.header.empty(), ErrorKind::Parse, path + ": empty file");
  t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) t.values(r, c) = rows[r][c];
  return t;
}

/// Edge list CSV with columns i, j and optional w (default 1); node indices
/// are 0-based. `n` is the node count of the data the graph must index.
inline WeightedGraph read_graph(const std::string& path, int n) {
  const Table t = read_table(path);
  const int ci = t.column("i"), cj = t.column("j"), cw = t.column("w");
  require(ci >= 0 && cj >= 0, ErrorKind::Parse, path + ": edge list needs columns 'i' and 'j'");
  std::vector<Edge> edges;
  for (Eigen::Index r = 0; r < t.values.rows(); ++r) {
    const double a = t.values(r, ci), b = t.values(r, cj);
    const std::string where = path + " edge row " + std::to_string(r + 1);
    require(a == std::floor(a) && b == std::floor(b), ErrorKind::Parse, where + ": node indices must be integers");
    require(a >= 0 && b >= 0 && a < n && b < n, ErrorKind::DimensionMismatch,
            where + ": node index outside [0, " + std::to_string(n) + ")");
    edges.push_back({static_cast<int>(a), static_cast<int>(b), cw >= 0 ? t.values(r, cw) : 1.0});
  }
  try {
    return WeightedGraph(n, std::move(edges));
  } catch (const Error& e) {
    fail(ErrorKind::Parse, path + ": " + e.what());
  }
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path, std::ios::binary) {
    require(out_.good(), ErrorKind::InvalidInput, "cannot write " + path);
    row(header);
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t k = 0; k < fields.size(); ++k) out_ << (k ? "," : "") << fields[k];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline void write_matrix(const std::string& path, const std::vector<std::string>& header, const MatrixXd& m) {
  require(header.size() == static_cast<std::size_t>(m.cols()), ErrorKind::DimensionMismatch,
          "header does not match matrix columns for " + path);
  CsvWriter w(path, header);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<std::string> f;
    for (Eigen::Index c = 0; c < m.cols(); ++c) f.push_back(fmt(m(r, c)));
    w.row(f);
  }
}

inline void write_graph(const std::string& path, const WeightedGraph& g) {
  CsvWriter w(path, {"i", "j", "w"});
  for (const auto& e : g.edges()) w.row({std::to_string(e.i), std::to_string(e.j), fmt(e.w)});
}

inline void write_edges(const std::string& path, const std::vector<EdgeDiagnostic>& edges) {
  CsvWriter w(path, {"i", "j", "w", "delta", "var_factor", "standardized", "flag"});
  for (const auto& e : edges)
    w.row({std::to_string(e.i), std::to_string(e.j), fmt(e.w), fmt(e.delta), fmt(e.var_factor),
           fmt(e.standardized), e.is_outlier ? "1" : "0"});
}

/// Node scores; the flag is empty for nodes without a defined score.
inline void write_nodes(const std::string& path, const std::vector<NodeDiagnostic>& nodes) {
  CsvWriter w(path, {"node", "score", "flag"});
  for (std::size_t i = 0; i < nodes.size(); ++i)
    w.row({std::to_string(i), nodes[i].is_outlier ? fmt(nodes[i].score) : "",
           nodes[i].is_outlier ? (*nodes[i].is_outlier ? "1" : "0") : ""});
}

inline void write_scores(const std::string& path, const std::vector<ScoreRow>& rows) {
  CsvWriter w(path, {"graph", "n", "p", "q", "zeta", "rep", "method", "fsc", "kl", "rd", "fsc_degenerate"});
  for (const auto& r : rows)
    w.row({to_string(r.graph_type), std::to_string(r.n), std::to_string(r.p), std::to_string(r.q),
           fmt(r.zeta), std::to_string(r.rep), to_string(r.method), fmt(r.fsc), fmt(r.kl), fmt(r.rd),
           r.fsc_degenerate ? "1" : "0"});
}

inline void write_medians(const std::string& path, const std::vector<CellMedian>& meds) {
  CsvWriter w(path, {"graph", "n", "p", "q", "zeta", "method", "count", "fsc", "kl", "rd"});
  for (const auto& m : meds)
    w.row({to_string(m.graph_type), std::to_string(m.n), std::to_string(m.p), std::to_string(m.q),
           fmt(m.zeta), to_string(m.method), std::to_string(m.count), fmt(m.fsc), fmt(m.kl), fmt(m.rd)});
}

// ---- JSON ----------------------------------------------------------------

inline json to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline MatrixXd matrix_from_json(const json& j, const std::string& what) {
  require(j.is_array() && !j.empty(), ErrorKind::Parse, what + " must be a non-empty array of rows");
  const std::size_t cols = j.front().is_array() ? j.front().size() : 0;
  require(cols > 0, ErrorKind::Parse, what + " rows must be non-empty arrays");
  MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    require(j[r].is_array() && j[r].size() == cols, ErrorKind::Parse,
            what + " row " + std::to_string(r) + " has the wrong length");
    for (std::size_t c = 0; c < cols; ++c) {
      require(j[r][c].is_number(), ErrorKind::Parse,
              what + " entry (" + std::to_string(r) + "," + std::to_string(c) + ") is not a number");
      m(r, c) = j[r][c].get<double>();
    }
  }
  return m;
}

inline json read_json(const std::string& path) {
  try {
    return json::parse(detail::read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Parse, path + ": " + e.what());
  }
}

/// Writes JSON with 17 significant digits for doubles.
inline void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::InvalidInput, "cannot write " + path);
  out << j.dump(2) << '\n';
}

inline json params_json(const FitResult& fit, const std::vector<std::string>& response_names,
                        const std::vector<std::string>& covariate_names) {
  json j;
  j["responses"] = response_names;
  j["covariates"] = covariate_names;
  j["theta"] = to_json(fit.theta_hat);
  j["sigma_v"] = to_json(fit.sigma_v_hat);
  j["objective"] = fit.objective;
  j["h"] = fit.h;
  j["start_id"] = fit.start_id;
  j["start_method"] = to_string(fit.start_method);
  j["n_csteps"] = fit.n_csteps;
  j["converged"] = fit.converged;
  j["reweighted"] = fit.reweighted;
  j["reweight_set_size"] = fit.reweight_set_size;
  j["raw_consistency_factor"] = fit.raw_consistency_factor;
  j["rescale_factor"] = fit.rescale_factor;
  j["warnings"] = fit.warnings;
  return j;
}

/// Coda schema: {"response": "compositional" | "euclidean",
///  "covariate_groups": [{"name": ..., "columns": [names or 0-based indices]}]}.
inline CodaSchema schema_from_json(const json& j, const std::vector<std::string>& covariate_names) {
  CodaSchema s;
  require(j.is_object(), ErrorKind::Parse, "schema must be a JSON object");
  const std::string resp = j.value("response", std::string("compositional"));
  require(resp == "compositional" || resp == "euclidean", ErrorKind::Parse,
          "schema response must be 'compositional' or 'euclidean'");
  s.response_compositional = resp == "compositional";
  if (j.contains("covariate_groups")) {
    require(j["covariate_groups"].is_array(), ErrorKind::Parse, "covariate_groups must be an array");
    for (const auto& g : j["covariate_groups"]) {
      const std::string name = g.value("name", "group " + std::to_string(s.covariate_groups.size()));
      require(g.contains("columns") && g["columns"].is_array(), ErrorKind::Parse,
              "schema group '" + name + "' needs a columns array");
      std::vector<int> cols;
      for (const auto& c : g["columns"]) {
        if (c.is_number_integer()) {
          cols.push_back(c.get<int>());
        } else {
          require(c.is_string(), ErrorKind::Parse, "schema group '" + name + "': bad column entry");
          const auto it = std::find(covariate_names.begin(), covariate_names.end(), c.get<std::string>());
          require(it != covariate_names.end(), ErrorKind::DimensionMismatch,
                  "schema group '" + name + "' names unknown covariate '" + c.get<std::string>() + "'");
          cols.push_back(static_cast<int>(it - covariate_names.begin()));
        }
      }
      s.covariate_groups.push_back(std::move(cols));
      s.group_names.push_back(name);
    }
  }
  check_schema(s, static_cast<int>(covariate_names.size()));
  return s;
}

inline json schema_to_json(const CodaSchema& s, const std::vector<std::string>& covariate_names) {
  json j;
  j["response"] = s.response_compositional ? "compositional" : "euclidean";
  j["covariate_groups"] = json::array();
  for (std::size_t g = 0; g < s.covariate_groups.size(); ++g) {
    json cols = json::array();
    for (int c : s.covariate_groups[g]) cols.push_back(covariate_names.at(c));
    j["covariate_groups"].push_back({{"name", g < s.group_names.size() ? s.group_names[g] : ""}, {"columns", cols}});
  }
  return j;
}

/// Simulation config. "n", "zeta" and "graph" accept a scalar or an array;
/// arrays expand into a grid of cells.
inline std::vector<SimConfig> sim_configs_from_json(const json& j) {
  require(j.is_object(), ErrorKind::InvalidInput, "simulation config must be a JSON object");
  static const std::vector<std::string> known = {"p", "n", "graph", "zeta", "q", "reps", "seed",
                                                 "h_fraction", "threads", "methods"};
  for (const auto& [key, value] : j.items())
    require(std::find(known.begin(), known.end(), key) != known.end(), ErrorKind::InvalidInput,
            "unknown simulation config key '" + key + "'");
  auto as_list = [&](const char* key) {
    std::vector<json> out;
    if (!j.contains(key)) return out;
    if (j[key].is_array()) {
      for (const auto& v : j[key]) out.push_back(v);
      require(!out.empty(), ErrorKind::InvalidInput, std::string("config '") + key + "' is an empty list");
    } else {
      out.push_back(j[key]);
    }
    return out;
  };
  SimConfig base;
  try {
    base.p = j.value("p", base.p);
    base.q = j.value("q", base.q);
    base.reps = j.value("reps", base.reps);
    base.seed = j.value("seed", base.seed);
    base.h_fraction = j.value("h_fraction", base.h_fraction);
    base.threads = j.value("threads", base.threads);
    if (j.contains("methods")) {
      base.methods.clear();
      for (const auto& m : j["methods"]) base.methods.push_back(parse_method(m.get<std::string>()));
    }
    std::vector<int> ns;
    for (const auto& v : as_list("n")) ns.push_back(v.get<int>());
    if (ns.empty()) ns.push_back(base.n);
    std::vector<double> zetas;
    for (const auto& v : as_list("zeta")) zetas.push_back(v.get<double>());
    if (zetas.empty()) zetas.push_back(base.zeta);
    std::vector<GraphType> graphs;
    for (const auto& v : as_list("graph")) graphs.push_back(parse_graph_type(v.get<std::string>()));
    if (graphs.empty()) graphs.push_back(base.graph_type);
    std::vector<SimConfig> out;
    for (GraphType g : graphs)
      for (int n : ns)
        for (double z : zetas) {
          SimConfig c = base;
          c.graph_type = g;
          c.n = n;
          c.zeta = z;
          validate(c);
          out.push_back(c);
        }
    return out;
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidInput, std::string("simulation config: ") + e.what());
  }
}

inline json sim_config_json(const SimConfig& c) {
  json methods = json::array();
  for (Method m : c.methods) methods.push_back(to_string(m));
  return {{"p", c.p},         {"n", c.n},         {"graph", to_string(c.graph_type)},
          {"zeta", c.zeta},   {"q", c.q},         {"reps", c.reps},
          {"seed", c.seed},   {"h_fraction", c.h_fraction}, {"threads", c.threads},
          {"methods", methods}};
}

// ---- digests and manifest -------------------------------------------------

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_digest(const std::string& path) { return "fnv1a64:" + hex64(fnv1a64(detail::read_file(path))); }

struct RunManifest {
  std::string command;
  json config;
  std::map<std::string, std::string> inputs;  // path -> digest
  std::optional<std::uint64_t> seed;
  std::vector<std::string> outputs;
  double elapsed_seconds = 0.0;

  json to_json() const {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["config_hash"] = "fnv1a64:" + hex64(fnv1a64(config.dump()));
    j["inputs"] = json::object();
    for (const auto& [path, digest] : inputs) j["inputs"][path] = digest;
    j["seed"] = seed ? json(*seed) : json(nullptr);
    j["software_version"] = kVersion;
    j["outputs"] = outputs;
    j["elapsed_seconds"] = elapsed_seconds;
    return j;
  }
};

}  // namespace netoutlier::io
