#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "netoutlier/error.hpp"
#include "netoutlier/linalg.hpp"

namespace netoutlier {

struct Edge {
  int i = 0;
  int j = 0;
  double w = 1.0;

  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Undirected graph with strictly positive edge weights. Edges are stored
/// with i < j, sorted lexicographically; that order is the canonical edge
/// index used by every edge-indexed matrix in the library.
class WeightedGraph {
 public:
  WeightedGraph() = default;

  WeightedGraph(int n, std::vector<Edge> edges) : n_(n), edges_(std::move(edges)) {
    require(n > 0, ErrorKind::InvalidInput, "graph needs at least one node");
    for (auto& e : edges_) {
      require(e.i >= 0 && e.i < n && e.j >= 0 && e.j < n, ErrorKind::InvalidInput,
              "edge (" + std::to_string(e.i) + "," + std::to_string(e.j) +
                  ") has a node index outside [0, " + std::to_string(n) + ")");
      require(e.i != e.j, ErrorKind::InvalidInput,
              "self-loop on node " + std::to_string(e.i));
      require(std::isfinite(e.w) && e.w > 0.0, ErrorKind::InvalidInput,
              "edge (" + std::to_string(e.i) + "," + std::to_string(e.j) +
                  ") has non-positive weight");
      if (e.i > e.j) std::swap(e.i, e.j);
    }
    std::sort(edges_.begin(), edges_.end(), [](const Edge& a, const Edge& b) {
      return a.i != b.i ? a.i < b.i : a.j < b.j;
    });
    for (std::size_t k = 1; k < edges_.size(); ++k) {
      require(edges_[k].i != edges_[k - 1].i || edges_[k].j != edges_[k - 1].j,
              ErrorKind::InvalidInput,
              "duplicate edge (" + std::to_string(edges_[k].i) + "," +
                  std::to_string(edges_[k].j) + ")");
    }
  }

  int num_nodes() const { return n_; }
  std::size_t num_edges() const { return edges_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }

  MatrixXd weight_matrix() const {
    MatrixXd w = MatrixXd::Zero(n_, n_);
    for (const auto& e : edges_) {
      w(e.i, e.j) = e.w;
      w(e.j, e.i) = e.w;
    }
    return w;
  }

  std::vector<int> degrees() const {
    std::vector<int> deg(n_, 0);
    for (const auto& e : edges_) {
      ++deg[e.i];
      ++deg[e.j];
    }
    return deg;
  }

  /// Component label per node, labels numbered from 0 in order of first node.
  std::vector<int> components() const {
    std::vector<int> parent(n_);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    for (const auto& e : edges_) parent[find(e.i)] = find(e.j);
    std::vector<int> label(n_, -1), root_label(n_, -1);
    int next = 0;
    for (int v = 0; v < n_; ++v) {
      const int r = find(v);
      if (root_label[r] < 0) root_label[r] = next++;
      label[v] = root_label[r];
    }
    return label;
  }

  int component_count() const {
    const auto label = components();
    return label.empty() ? 0 : *std::max_element(label.begin(), label.end()) + 1;
  }

  bool connected() const { return component_count() == 1; }

 private:
  int n_ = 0;
  std::vector<Edge> edges_;
};

/// Laplacian L = D - W together with the matrices derived from it.
struct LaplacianBundle {
  MatrixXd L;
  MatrixXd Lplus;
  MatrixXd LplusHalf;
  MatrixXd Lhalf;
  VectorXd eigenvalues;
  int rank = 0;
  Eigen::SparseMatrix<double> incidence;  // |E| x n, rows in canonical edge order

  int num_nodes() const { return static_cast<int>(L.rows()); }

  /// l+_ii + l+_jj - 2 l+_ij, the effective resistance between i and j.
  double resistance(int i, int j) const {
    return Lplus(i, i) + Lplus(j, j) - 2.0 * Lplus(i, j);
  }
};

inline MatrixXd laplacian(const WeightedGraph& g) {
  const int n = g.num_nodes();
  MatrixXd L = MatrixXd::Zero(n, n);
  for (const auto& e : g.edges()) {
    L(e.i, e.j) -= e.w;
    L(e.j, e.i) -= e.w;
    L(e.i, e.i) += e.w;
    L(e.j, e.j) += e.w;
  }
  return L;
}

inline Eigen::SparseMatrix<double> incidence_matrix(const WeightedGraph& g) {
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(2 * g.num_edges());
  int row = 0;
  for (const auto& e : g.edges()) {
    const double s = std::sqrt(e.w);
    trips.emplace_back(row, e.i, s);
    trips.emplace_back(row, e.j, -s);
    ++row;
  }
  Eigen::SparseMatrix<double> m(static_cast<Eigen::Index>(g.num_edges()), g.num_nodes());
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

inline LaplacianBundle laplacian_bundle(const WeightedGraph& g, double tol = 1e-10) {
  require(tol >= 0.0, ErrorKind::InvalidInput, "pseudo-inverse tolerance must be >= 0");
  LaplacianBundle b;
  b.L = laplacian(g);
  const auto eig = linalg::eigen_sym(b.L);
  b.eigenvalues = eig.eigenvalues();
  const double cut = tol * std::max(0.0, b.eigenvalues.maxCoeff());
  auto keep = [cut](double v) { return v > cut; };
  b.rank = static_cast<int>(std::count_if(b.eigenvalues.begin(), b.eigenvalues.end(), keep));
  b.Lplus = linalg::spectral_apply(eig, [&](double v) { return keep(v) ? 1.0 / v : 0.0; });
  b.LplusHalf =
      linalg::spectral_apply(eig, [&](double v) { return keep(v) ? 1.0 / std::sqrt(v) : 0.0; });
  b.Lhalf = linalg::spectral_apply(eig, [&](double v) { return keep(v) ? std::sqrt(v) : 0.0; });
  b.incidence = incidence_matrix(g);
  return b;
}

/// Returns (y'Ly, 1/2 sum_ij (y_i - y_j)^2 w_ij), the two sides of the
/// Laplacian quadratic-form identity, computed independently.
inline std::pair<double, double> quadratic_form_identity_check(const WeightedGraph& g,
                                                               const VectorXd& y) {
  require(y.size() == g.num_nodes(), ErrorKind::DimensionMismatch,
          "vector length " + std::to_string(y.size()) + " does not match node count " +
              std::to_string(g.num_nodes()));
  const MatrixXd L = laplacian(g);
  const double lhs = y.dot(L * y);
  const MatrixXd W = g.weight_matrix();
  double rhs = 0.0;
  for (int i = 0; i < g.num_nodes(); ++i)
    for (int j = 0; j < g.num_nodes(); ++j) rhs += (y(i) - y(j)) * (y(i) - y(j)) * W(i, j);
  return {lhs, 0.5 * rhs};
}

/// Symmetrized (union) K-nearest-neighbour graph with unit weights. Rows of
/// `coords` are points; distance ties go to the lower index.
inline WeightedGraph build_knn_graph(const MatrixXd& coords, int k) {
  const int n = static_cast<int>(coords.rows());
  require(k > 0, ErrorKind::InvalidInput, "K must be positive");
  require(n >= k + 1, ErrorKind::InvalidInput,
          "K-nearest-neighbour graph needs at least K+1 = " + std::to_string(k + 1) +
              " points, got " + std::to_string(n));
  require(coords.allFinite(), ErrorKind::InvalidInput, "coordinates must be finite");

  std::vector<std::vector<char>> adj(n, std::vector<char>(n, 0));
  std::vector<int> order(n);
  std::vector<double> dist(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) dist[j] = (coords.row(i) - coords.row(j)).squaredNorm();
    order.resize(n);
    std::iota(order.begin(), order.end(), 0);
    order.erase(order.begin() + i);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      return dist[a] != dist[b] ? dist[a] < dist[b] : a < b;
    });
    for (int r = 0; r < k; ++r) {
      adj[i][order[r]] = 1;
      adj[order[r]][i] = 1;
    }
  }
  std::vector<Edge> edges;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (adj[i][j]) edges.push_back({i, j, 1.0});
  return WeightedGraph(n, std::move(edges));
}

enum class Kernel { Gaussian, Box };

inline WeightedGraph build_kernel_graph(const MatrixXd& coords, Kernel kernel, double sigma) {
  require(std::isfinite(sigma) && sigma > 0.0, ErrorKind::InvalidInput,
          "kernel bandwidth sigma must be positive");
  require(coords.allFinite(), ErrorKind::InvalidInput, "coordinates must be finite");
  const int n = static_cast<int>(coords.rows());
  std::vector<Edge> edges;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double d2 = (coords.row(i) - coords.row(j)).squaredNorm();
      if (kernel == Kernel::Gaussian) {
        const double w = std::exp(-d2 / (2.0 * sigma * sigma));
        if (w > 0.0) edges.push_back({i, j, w});  // underflow drops the pair
      } else if (std::sqrt(d2) <= sigma) {
        edges.push_back({i, j, 1.0});
      }
    }
  }
  return WeightedGraph(n, std::move(edges));
}

}  // namespace netoutlier
