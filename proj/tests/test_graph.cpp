#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "stad/graph.hpp"
#include "stad/rng.hpp"

using stad::SpotGraph;

namespace {

// Hexagonal lattice: odd rows shifted half a step, unit nearest distance.
std::vector<double> hex_coords(int rows, int cols) {
  std::vector<double> c;
  for (int r = 0; r < rows; ++r)
    for (int q = 0; q < cols; ++q) {
      c.push_back(q + (r % 2 ? 0.5 : 0.0));
      c.push_back(r * std::sqrt(3.0) / 2.0);
    }
  return c;
}

}  // namespace

TEST(SpotGraph, UnitSquareCornersLinkAlongEdges) {
  std::vector<double> coords{0, 0, 1, 0, 0, 1, 1, 1};
  SpotGraph g = stad::build_knn_graph(coords, 4, 2);
  auto sorted = [](std::vector<int> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  EXPECT_EQ(sorted(g.out_neighbors[0]), (std::vector<int>{1, 2}));
  EXPECT_EQ(sorted(g.out_neighbors[1]), (std::vector<int>{0, 3}));
  EXPECT_EQ(sorted(g.out_neighbors[2]), (std::vector<int>{0, 3}));
  EXPECT_EQ(sorted(g.out_neighbors[3]), (std::vector<int>{1, 2}));
}

TEST(SpotGraph, DistanceTiesPickSmallerIndex) {
  // Node 0 sits exactly between nodes 1 and 2.
  std::vector<double> coords{0, 0, -1, 0, 1, 0, 3, 0};
  SpotGraph g = stad::build_knn_graph(coords, 4, 1);
  EXPECT_EQ(g.out_neighbors[0], (std::vector<int>{1}));
}

TEST(SpotGraph, HexInteriorNodeGetsItsRing) {
  SpotGraph g = stad::build_knn_graph(hex_coords(5, 5), 25, 6);
  // Center of the 5x5 block: row 2, col 2 at (2, sqrt(3)). Odd rows sit half
  // a step right, so the touching diagonals are cols 1 and 2 of rows 1 and 3.
  std::vector<int> nb = g.out_neighbors[12];
  std::sort(nb.begin(), nb.end());
  EXPECT_EQ(nb, (std::vector<int>{6, 7, 11, 13, 16, 17}));
  // Every interior node's 1-hop set has exactly 7 members.
  for (int r = 1; r < 4; ++r)
    for (int c = 1; c < 4; ++c) {
      EXPECT_EQ(stad::khop(g, r * 5 + c, 1).size(), 7u);
    }
}

TEST(SpotGraph, KhopOnHandBuiltChain) {
  SpotGraph g;
  g.n = 3;
  g.k = 1;
  g.out_neighbors = {{1}, {2}, {}};
  EXPECT_EQ(stad::khop(g, 0, 2), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(stad::khop(g, 0, 1), (std::vector<int>{0, 1}));
  EXPECT_EQ(stad::khop(g, 0, 0), (std::vector<int>{0}));
  EXPECT_EQ(stad::khop(g, 2, 5), (std::vector<int>{2}));
}

TEST(SpotGraph, KhopGrowsMonotonically) {
  stad::Rng rng(17);
  std::vector<double> coords;
  for (int i = 0; i < 40; ++i) {
    coords.push_back(rng.uniform(0.0, 10.0));
    coords.push_back(rng.uniform(0.0, 10.0));
  }
  SpotGraph g = stad::build_knn_graph(coords, 40, 4);
  for (int node = 0; node < 40; node += 7) {
    std::vector<int> prev = stad::khop(g, node, 0);
    for (int hops = 1; hops <= 4; ++hops) {
      std::vector<int> cur = stad::khop(g, node, hops);
      EXPECT_TRUE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
      prev = std::move(cur);
    }
  }
}

TEST(SpotGraph, RebuildAfterRelabelingIsIsomorphic) {
  stad::Rng rng(23);
  const int n = 30;
  std::vector<double> coords;
  for (int i = 0; i < 2 * n; ++i) coords.push_back(rng.uniform(0.0, 100.0));
  SpotGraph g = stad::build_knn_graph(coords, n, 3);

  // Reverse the labeling, rebuild, and map neighbors back.
  std::vector<double> perm_coords(coords.size());
  for (int i = 0; i < n; ++i) {
    perm_coords[2 * static_cast<std::size_t>(n - 1 - i)] = coords[2 * static_cast<std::size_t>(i)];
    perm_coords[2 * static_cast<std::size_t>(n - 1 - i) + 1] =
        coords[2 * static_cast<std::size_t>(i) + 1];
  }
  SpotGraph gp = stad::build_knn_graph(perm_coords, n, 3);
  for (int i = 0; i < n; ++i) {
    std::vector<int> expect = g.out_neighbors[static_cast<std::size_t>(i)];
    for (auto& v : expect) v = n - 1 - v;
    std::sort(expect.begin(), expect.end());
    std::vector<int> got = gp.out_neighbors[static_cast<std::size_t>(n - 1 - i)];
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, expect);
  }
}

TEST(SpotGraph, ErrorsOnBadArguments) {
  std::vector<double> coords{0, 0, 1, 0, 0, 1};
  EXPECT_THROW(stad::build_knn_graph(coords, 3, 3), stad::GraphError);
  SpotGraph g = stad::build_knn_graph(coords, 3, 1);
  EXPECT_THROW(stad::khop(g, 3, 1), stad::GraphError);
  EXPECT_THROW(stad::khop(g, -1, 1), stad::GraphError);
  EXPECT_THROW(stad::khop(g, 0, -1), stad::GraphError);
}
