#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "stad/dataset.hpp"
#include "stad/rng.hpp"

using stad::SpatialDataset;

namespace {

// Small dataset with deterministic pseudo-random content. Every value is
// exactly float-representable, matching what the container stores.
SpatialDataset make_dataset(int n, int g, unsigned seed, bool with_labels = true) {
  stad::Rng rng(seed);
  SpatialDataset d;
  d.n_spots = n;
  d.n_genes = g;
  d.expr.resize(static_cast<std::size_t>(n) * g);
  for (auto& v : d.expr) {
    v = static_cast<float>(rng.below(20));  // counts, some zeros
  }
  // Every spot needs at least one count for normalize_log.
  for (int i = 0; i < n; ++i) d.expr[static_cast<std::size_t>(i) * g] += 1.0f;
  d.coords.resize(static_cast<std::size_t>(n) * 2);
  for (int i = 0; i < n; ++i) {
    d.coords[2 * static_cast<std::size_t>(i)] = static_cast<float>(i % 7);
    d.coords[2 * static_cast<std::size_t>(i) + 1] = static_cast<float>(i / 7);
  }
  d.patch_h = d.patch_w = 8;
  d.patch_c = 3;
  d.patches.resize(static_cast<std::size_t>(n) * 8 * 8 * 3);
  for (auto& v : d.patches) v = static_cast<float>(rng.uniform(0.0, 1.0));
  if (with_labels) {
    d.has_labels = true;
    d.labels.resize(static_cast<std::size_t>(n));
    for (auto& v : d.labels) v = rng.bernoulli(0.2) ? 1 : 0;
  }
  for (int j = 0; j < g; ++j) d.gene_ids.push_back("G" + std::to_string(j));
  return d;
}

SpatialDataset expr_only(std::vector<std::vector<float>> rows) {
  SpatialDataset d;
  d.n_spots = static_cast<int>(rows.size());
  d.n_genes = static_cast<int>(rows[0].size());
  for (auto& r : rows)
    for (float v : r) d.expr.push_back(v);
  for (int i = 0; i < d.n_spots; ++i) {
    d.coords.push_back(static_cast<float>(i));
    d.coords.push_back(0.0f);
  }
  for (int j = 0; j < d.n_genes; ++j) d.gene_ids.push_back("G" + std::to_string(j));
  return d;
}

std::string temp_path(const char* name) {
  return std::string(::testing::TempDir()) + name;
}

}  // namespace

TEST(DatasetIo, RoundTripPreservesContent) {
  SpatialDataset d = make_dataset(12, 9, 3);
  const std::string path = temp_path("roundtrip.mtds");
  stad::save_dataset(path, d);
  SpatialDataset r = stad::load_dataset(path);

  ASSERT_EQ(r.n_spots, d.n_spots);
  ASSERT_EQ(r.n_genes, d.n_genes);
  for (std::size_t i = 0; i < d.expr.size(); ++i) EXPECT_EQ(r.expr[i], d.expr[i]);
  for (std::size_t i = 0; i < d.coords.size(); ++i) EXPECT_EQ(r.coords[i], d.coords[i]);
  ASSERT_TRUE(r.has_labels);
  EXPECT_EQ(r.labels, d.labels);
  EXPECT_EQ(r.gene_ids, d.gene_ids);
  ASSERT_EQ(r.patches.size(), d.patches.size());
  for (std::size_t i = 0; i < d.patches.size(); ++i) {
    EXPECT_NEAR(r.patches[i], d.patches[i], 1.0 / 255.0);
  }
  // A second round trip is exact: quantization already happened.
  const std::string path2 = temp_path("roundtrip2.mtds");
  stad::save_dataset(path2, r);
  SpatialDataset r2 = stad::load_dataset(path2);
  for (std::size_t i = 0; i < r.patches.size(); ++i) EXPECT_EQ(r2.patches[i], r.patches[i]);
}

TEST(DatasetIo, WrongMagicRejected) {
  const std::string path = temp_path("bad.mtds");
  std::ofstream out(path, std::ios::binary);
  out << "NOPE" << std::string(64, '\0');
  out.close();
  EXPECT_THROW(stad::load_dataset(path), stad::DataError);
}

TEST(DatasetIo, EmptyDatasetRejected) {
  SpatialDataset d;
  d.n_spots = 0;
  d.n_genes = 5;
  const std::string path = temp_path("empty.mtds");
  stad::save_dataset(path, d);
  EXPECT_THROW(stad::load_dataset(path), stad::DataError);
}

TEST(DatasetIo, NegativeCountsRejected) {
  SpatialDataset d = make_dataset(4, 3, 1);
  d.expr[2] = -1.0f;
  const std::string path = temp_path("neg.mtds");
  stad::save_dataset(path, d);
  EXPECT_THROW(stad::load_dataset(path), stad::DataError);
}

TEST(DatasetIo, MissingFileRejected) {
  EXPECT_THROW(stad::load_dataset(temp_path("does_not_exist.mtds")), stad::DataError);
}

TEST(Preprocess, FilterGenesByDetectionCount) {
  // Two genes over three spots; the second is detected once, below the bar.
  SpatialDataset d = expr_only({{1, 0}, {1, 0}, {1, 1}});
  auto [out, rep] = stad::filter_genes(d, 2);
  EXPECT_EQ(out.n_genes, 1);
  EXPECT_EQ(rep.genes_removed, 1);
  EXPECT_EQ(out.gene_ids[0], "G0");
  EXPECT_EQ(out.expr_at(2, 0), 1.0);
}

TEST(Preprocess, FilterKeepsEverythingAtThresholdOne) {
  SpatialDataset d = expr_only({{1, 0}, {0, 2}});
  auto [out, rep] = stad::filter_genes(d, 1);
  EXPECT_EQ(out.n_genes, 2);
  EXPECT_EQ(rep.genes_removed, 0);
}

TEST(Preprocess, FilterRemovingAllGenesFails) {
  SpatialDataset d = expr_only({{0, 0}, {0, 0}});
  EXPECT_THROW(stad::filter_genes(d, 1), stad::DataError);
}

TEST(Preprocess, NormalizeLogHandExample) {
  // Row sums {2,4}, median 3; both rows scale to 1.5 per entry.
  SpatialDataset d = expr_only({{1, 1}, {2, 2}});
  SpatialDataset out = stad::normalize_log(d);
  const double expect = std::log1p(1.5);
  for (int i = 0; i < 2; ++i)
    for (int g = 0; g < 2; ++g) EXPECT_NEAR(out.expr_at(i, g), expect, 1e-6);
}

TEST(Preprocess, NormalizeSingleSpotIsPlainLog1p) {
  SpatialDataset d = expr_only({{2, 6, 0}});
  SpatialDataset out = stad::normalize_log(d);
  EXPECT_NEAR(out.expr_at(0, 0), std::log1p(2.0), 1e-6);
  EXPECT_NEAR(out.expr_at(0, 1), std::log1p(6.0), 1e-6);
  EXPECT_EQ(out.expr_at(0, 2), 0.0);
}

TEST(Preprocess, NormalizeRejectsZeroCountSpot) {
  SpatialDataset d = expr_only({{1, 1}, {0, 0}});
  EXPECT_THROW(stad::normalize_log(d), stad::DataError);
}

TEST(Preprocess, NormalizePreservesZeroPattern) {
  SpatialDataset d = make_dataset(10, 6, 5);
  SpatialDataset out = stad::normalize_log(d);
  for (std::size_t i = 0; i < d.expr.size(); ++i) {
    EXPECT_EQ(d.expr[i] == 0.0f, out.expr[i] == 0.0f);
  }
}

TEST(Preprocess, HvgSelectionWithTieRule) {
  // Genes 1 and 2 hold the same value multiset, so their variances are
  // bit-identical and the index tie rule decides; gene 3 dominates, gene 0
  // is constant. Variances: {0, f^2/4, f^2/4, f^2} with f = sqrt(2).
  const float f = std::sqrt(2.0f);
  SpatialDataset d = expr_only({{1, 0, f, 0}, {1, f, 0, 2 * f}});
  auto kept = stad::select_hvg_indices(d, 2);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0], 1);
  EXPECT_EQ(kept[1], 3);
  SpatialDataset out = stad::select_hvg(d, 2);
  EXPECT_EQ(out.gene_ids, (std::vector<std::string>{"G1", "G3"}));
}

TEST(Preprocess, HvgIdentityAndErrors) {
  SpatialDataset d = make_dataset(8, 5, 9);
  SpatialDataset all = stad::select_hvg(d, 5);
  EXPECT_EQ(all.n_genes, 5);
  EXPECT_EQ(all.expr, d.expr);
  EXPECT_THROW(stad::select_hvg(d, 0), stad::DataError);
  EXPECT_THROW(stad::select_hvg(d, 6), stad::DataError);
}

TEST(Preprocess, ConstantGeneRanksLast) {
  SpatialDataset d = expr_only({{5, 1, 0}, {5, 2, 3}, {5, 0, 9}});
  auto kept = stad::select_hvg_indices(d, 2);
  EXPECT_EQ(kept, (std::vector<int>{1, 2}));  // constant gene 0 dropped
}

TEST(Preprocess, ZeroProportionMean) {
  EXPECT_DOUBLE_EQ(stad::zero_proportion_mean(expr_only({{0, 1}, {1, 1}})), 0.25);
  EXPECT_DOUBLE_EQ(stad::zero_proportion_mean(expr_only({{0, 0}, {0, 0}})), 1.0);
  EXPECT_DOUBLE_EQ(stad::zero_proportion_mean(expr_only({{2, 1}, {3, 4}})), 0.0);
}

TEST(Preprocess, PipelineIsStructurallyIdempotent) {
  SpatialDataset d = make_dataset(15, 12, 21);
  auto [filtered, rep1] = stad::filter_genes(d, 2);
  SpatialDataset normed = stad::normalize_log(filtered);
  SpatialDataset hvg = stad::select_hvg(normed, 6);

  // Re-running the structural steps on the processed data changes nothing.
  auto [filtered2, rep2] = stad::filter_genes(hvg, 2);
  EXPECT_EQ(rep2.genes_removed, 0);
  auto kept2 = stad::select_hvg_indices(hvg, 6);
  EXPECT_EQ(kept2, (std::vector<int>{0, 1, 2, 3, 4, 5}));
}
