#pragma once

// Spot adjacency: directed k-nearest-neighbor graph over array coordinates,
// plus hop-limited neighborhoods. Deliberately not symmetrized; aggregation
// downstream follows out-edges.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace stad {

class GraphError : public std::runtime_error {
 public:
  explicit GraphError(const std::string& what) : std::runtime_error(what) {}
};

struct SpotGraph {
  int n = 0;
  int k = 0;
  // Built graphs carry exactly k entries per node; hand-assembled test
  // fixtures may be ragged, and traversal copes with that.
  std::vector<std::vector<int>> out_neighbors;
};

// coords is n x 2 row-major. Euclidean distances, ties by smaller index,
// self excluded.
template <typename Coord>
SpotGraph build_knn_graph(const std::vector<Coord>& coords, int n, int k) {
  if (k < 1) throw GraphError("build_knn_graph: k must be >= 1");
  if (n <= k) throw GraphError("build_knn_graph: need at least k+1 spots, got " +
                               std::to_string(n));
  SpotGraph g;
  g.n = n;
  g.k = k;
  g.out_neighbors.resize(static_cast<std::size_t>(n));
  std::vector<std::pair<double, int>> cand(static_cast<std::size_t>(n - 1));
  for (int i = 0; i < n; ++i) {
    const double xi = static_cast<double>(coords[2 * static_cast<std::size_t>(i)]);
    const double yi = static_cast<double>(coords[2 * static_cast<std::size_t>(i) + 1]);
    std::size_t m = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = xi - static_cast<double>(coords[2 * static_cast<std::size_t>(j)]);
      const double dy = yi - static_cast<double>(coords[2 * static_cast<std::size_t>(j) + 1]);
      cand[m++] = {dx * dx + dy * dy, j};
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    auto& nb = g.out_neighbors[static_cast<std::size_t>(i)];
    nb.resize(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) nb[static_cast<std::size_t>(j)] = cand[static_cast<std::size_t>(j)].second;
  }
  return g;
}

// Nodes reachable from `node` in at most L steps along out-edges, the node
// itself included. Returned sorted ascending.
inline std::vector<int> khop(const SpotGraph& g, int node, int hops) {
  if (node < 0 || node >= g.n) throw GraphError("khop: node index out of range");
  if (hops < 0) throw GraphError("khop: negative hop count");
  std::vector<int> dist(static_cast<std::size_t>(g.n), -1);
  std::vector<int> frontier{node};
  dist[static_cast<std::size_t>(node)] = 0;
  std::vector<int> result{node};
  for (int step = 1; step <= hops && !frontier.empty(); ++step) {
    std::vector<int> next;
    for (int u : frontier) {
      for (int v : g.out_neighbors[static_cast<std::size_t>(u)]) {
        if (dist[static_cast<std::size_t>(v)] == -1) {
          dist[static_cast<std::size_t>(v)] = step;
          next.push_back(v);
          result.push_back(v);
        }
      }
    }
    frontier = std::move(next);
  }
  std::sort(result.begin(), result.end());
  return result;
}

}  // namespace stad
