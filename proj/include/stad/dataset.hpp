#pragma once

// Spatial dataset container (MTDS files) and the preprocessing steps that
// run before any model sees the data: gene filtering, library-size
// normalization with log transform, and highly-variable-gene selection.
//
// Expression and coordinates live as float32 in memory, mirroring the file
// format exactly so save/load round-trips are bit-stable. Math on them is
// done in double after widening.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stad/tensor.hpp"

namespace stad {

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct SpatialDataset {
  int n_spots = 0;
  int n_genes = 0;
  std::vector<float> expr;    // n_spots x n_genes, row-major, nonnegative
  std::vector<float> coords;  // n_spots x 2
  int patch_h = 32, patch_w = 32, patch_c = 3;
  std::vector<float> patches;  // n_spots x h x w x c, values in [0,1]
  bool has_labels = false;
  std::vector<std::uint8_t> labels;  // 0/1 when present
  std::vector<std::string> gene_ids;

  double expr_at(int spot, int gene) const {
    return expr[static_cast<std::size_t>(spot) * n_genes + gene];
  }

  // One patch as a [1,h,w,c] tensor.
  Tensor patch_tensor(int spot) const {
    const std::size_t len = static_cast<std::size_t>(patch_h) * patch_w * patch_c;
    const float* src = patches.data() + static_cast<std::size_t>(spot) * len;
    std::vector<double> d(src, src + len);
    return Tensor::leaf({1, patch_h, patch_w, patch_c}, std::move(d));
  }

  // Several patches stacked as [B,h,w,c].
  Tensor patch_batch(const std::vector<int>& spots) const {
    const std::size_t len = static_cast<std::size_t>(patch_h) * patch_w * patch_c;
    std::vector<double> d;
    d.reserve(spots.size() * len);
    for (int s : spots) {
      const float* src = patches.data() + static_cast<std::size_t>(s) * len;
      d.insert(d.end(), src, src + len);
    }
    return Tensor::leaf({static_cast<int>(spots.size()), patch_h, patch_w, patch_c},
                        std::move(d));
  }

  // Expression rows as a [B,G] tensor.
  Tensor expr_batch(const std::vector<int>& spots) const {
    std::vector<double> d;
    d.reserve(spots.size() * static_cast<std::size_t>(n_genes));
    for (int s : spots) {
      const float* src = expr.data() + static_cast<std::size_t>(s) * n_genes;
      d.insert(d.end(), src, src + n_genes);
    }
    return Tensor::leaf({static_cast<int>(spots.size()), n_genes}, std::move(d));
  }
};

struct PreprocessReport {
  int genes_removed = 0;
  int hvg_selected = 0;
  double zero_proportion_mean = 0.0;
};

// ============================================================
// MTDS container I/O
// ============================================================
//
// Layout (little-endian): magic "MTDS", version u16=1, then sections of
// [tag u8][byte-length u64][payload]:
//   tag 1  expr     u32 N, u32 G, N*G float32
//   tag 2  coords   N*2 float32
//   tag 3  patches  u16 h, u16 w, u16 C, N*h*w*C u8
//   tag 4  labels   N u8                  (optional)
//   tag 5  gene_ids G strings, each u32 length + UTF-8 bytes  (optional)

namespace detail {

template <typename T>
void mtds_write(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T mtds_read(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("MTDS: truncated file");
  return v;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const SpatialDataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("MTDS: cannot open for writing: " + path);
  out.write("MTDS", 4);
  detail::mtds_write<std::uint16_t>(out, 1);

  auto section = [&out](std::uint8_t tag, std::uint64_t len) {
    detail::mtds_write<std::uint8_t>(out, tag);
    detail::mtds_write<std::uint64_t>(out, len);
  };

  section(1, 8 + static_cast<std::uint64_t>(d.expr.size()) * 4);
  detail::mtds_write<std::uint32_t>(out, static_cast<std::uint32_t>(d.n_spots));
  detail::mtds_write<std::uint32_t>(out, static_cast<std::uint32_t>(d.n_genes));
  out.write(reinterpret_cast<const char*>(d.expr.data()),
            static_cast<std::streamsize>(d.expr.size() * 4));

  section(2, static_cast<std::uint64_t>(d.coords.size()) * 4);
  out.write(reinterpret_cast<const char*>(d.coords.data()),
            static_cast<std::streamsize>(d.coords.size() * 4));

  std::vector<std::uint8_t> pix(d.patches.size());
  for (std::size_t i = 0; i < pix.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, d.patches[i]));
    pix[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  section(3, 6 + static_cast<std::uint64_t>(pix.size()));
  detail::mtds_write<std::uint16_t>(out, static_cast<std::uint16_t>(d.patch_h));
  detail::mtds_write<std::uint16_t>(out, static_cast<std::uint16_t>(d.patch_w));
  detail::mtds_write<std::uint16_t>(out, static_cast<std::uint16_t>(d.patch_c));
  out.write(reinterpret_cast<const char*>(pix.data()), static_cast<std::streamsize>(pix.size()));

  if (d.has_labels) {
    section(4, static_cast<std::uint64_t>(d.labels.size()));
    out.write(reinterpret_cast<const char*>(d.labels.data()),
              static_cast<std::streamsize>(d.labels.size()));
  }
  if (!d.gene_ids.empty()) {
    std::uint64_t len = 0;
    for (const auto& s : d.gene_ids) len += 4 + s.size();
    section(5, len);
    for (const auto& s : d.gene_ids) {
      detail::mtds_write<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
      out.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
  }
  if (!out) throw DataError("MTDS: write failed: " + path);
}

inline SpatialDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("MTDS: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MTDS", 4) != 0) throw DataError("MTDS: bad magic in " + path);
  const auto version = detail::mtds_read<std::uint16_t>(in);
  if (version != 1) throw DataError("MTDS: unsupported version " + std::to_string(version));

  SpatialDataset d;
  bool have_expr = false;
  while (true) {
    std::uint8_t tag;
    in.read(reinterpret_cast<char*>(&tag), 1);
    if (in.eof()) break;
    if (!in) throw DataError("MTDS: truncated section header");
    const auto len = detail::mtds_read<std::uint64_t>(in);
    switch (tag) {
      case 1: {
        const auto n = detail::mtds_read<std::uint32_t>(in);
        const auto g = detail::mtds_read<std::uint32_t>(in);
        if (len != 8 + static_cast<std::uint64_t>(n) * g * 4) {
          throw DataError("MTDS: expr section length mismatch");
        }
        d.n_spots = static_cast<int>(n);
        d.n_genes = static_cast<int>(g);
        d.expr.resize(static_cast<std::size_t>(n) * g);
        in.read(reinterpret_cast<char*>(d.expr.data()),
                static_cast<std::streamsize>(d.expr.size() * 4));
        if (!in) throw DataError("MTDS: truncated expr data");
        have_expr = true;
        break;
      }
      case 2: {
        if (!have_expr) throw DataError("MTDS: coords section before expr");
        if (len != static_cast<std::uint64_t>(d.n_spots) * 2 * 4) {
          throw DataError("MTDS: coords section length mismatch");
        }
        d.coords.resize(static_cast<std::size_t>(d.n_spots) * 2);
        in.read(reinterpret_cast<char*>(d.coords.data()),
                static_cast<std::streamsize>(d.coords.size() * 4));
        if (!in) throw DataError("MTDS: truncated coords data");
        break;
      }
      case 3: {
        if (!have_expr) throw DataError("MTDS: patches section before expr");
        d.patch_h = detail::mtds_read<std::uint16_t>(in);
        d.patch_w = detail::mtds_read<std::uint16_t>(in);
        d.patch_c = detail::mtds_read<std::uint16_t>(in);
        const std::uint64_t count = static_cast<std::uint64_t>(d.n_spots) * d.patch_h *
                                    d.patch_w * d.patch_c;
        if (len != 6 + count) throw DataError("MTDS: patches section length mismatch");
        std::vector<std::uint8_t> pix(count);
        in.read(reinterpret_cast<char*>(pix.data()), static_cast<std::streamsize>(count));
        if (!in) throw DataError("MTDS: truncated patch data");
        d.patches.resize(count);
        for (std::size_t i = 0; i < count; ++i) d.patches[i] = pix[i] / 255.0f;
        break;
      }
      case 4: {
        if (!have_expr) throw DataError("MTDS: labels section before expr");
        if (len != static_cast<std::uint64_t>(d.n_spots)) {
          throw DataError("MTDS: labels section length mismatch");
        }
        d.labels.resize(static_cast<std::size_t>(d.n_spots));
        in.read(reinterpret_cast<char*>(d.labels.data()),
                static_cast<std::streamsize>(d.labels.size()));
        if (!in) throw DataError("MTDS: truncated labels data");
        for (auto v : d.labels) {
          if (v > 1) throw DataError("MTDS: label values must be 0/1");
        }
        d.has_labels = true;
        break;
      }
      case 5: {
        if (!have_expr) throw DataError("MTDS: gene_ids section before expr");
        std::uint64_t consumed = 0;
        d.gene_ids.clear();
        for (int g = 0; g < d.n_genes; ++g) {
          const auto slen = detail::mtds_read<std::uint32_t>(in);
          std::string s(slen, '\0');
          in.read(s.data(), slen);
          if (!in) throw DataError("MTDS: truncated gene id");
          d.gene_ids.push_back(std::move(s));
          consumed += 4 + slen;
        }
        if (consumed != len) throw DataError("MTDS: gene_ids section length mismatch");
        break;
      }
      default:
        throw DataError("MTDS: unknown section tag " + std::to_string(tag));
    }
  }

  if (!have_expr) throw DataError("MTDS: missing expr section");
  if (d.n_spots == 0) throw DataError("MTDS: empty dataset (no spots)");
  for (float v : d.expr) {
    if (v < 0.0f) throw DataError("MTDS: negative expression count");
  }
  if (d.coords.size() != static_cast<std::size_t>(d.n_spots) * 2) {
    throw DataError("MTDS: missing coords section");
  }
  // Coordinate rows must be unique (spots occupy distinct positions).
  {
    std::vector<std::pair<float, float>> pts(static_cast<std::size_t>(d.n_spots));
    for (int i = 0; i < d.n_spots; ++i) pts[i] = {d.coords[2 * i], d.coords[2 * i + 1]};
    std::sort(pts.begin(), pts.end());
    if (std::adjacent_find(pts.begin(), pts.end()) != pts.end()) {
      throw DataError("MTDS: duplicate spot coordinates");
    }
  }
  if (d.gene_ids.empty()) {
    for (int g = 0; g < d.n_genes; ++g) d.gene_ids.push_back("gene_" + std::to_string(g));
  }
  return d;
}

// ============================================================
// Preprocessing
// ============================================================

// Genes with nonzero counts in at least min_spots spots survive.
inline std::vector<int> filter_genes_indices(const SpatialDataset& d, int min_spots) {
  if (min_spots < 1) throw DataError("filter_genes: min_spots must be >= 1");
  std::vector<int> kept;
  for (int g = 0; g < d.n_genes; ++g) {
    int nz = 0;
    for (int i = 0; i < d.n_spots; ++i) {
      if (d.expr_at(i, g) != 0.0) ++nz;
    }
    if (nz >= min_spots) kept.push_back(g);
  }
  if (kept.empty()) throw DataError("filter_genes: all genes removed");
  return kept;
}

inline SpatialDataset subset_genes(const SpatialDataset& d, const std::vector<int>& kept) {
  SpatialDataset out = d;
  out.n_genes = static_cast<int>(kept.size());
  out.expr.assign(static_cast<std::size_t>(d.n_spots) * kept.size(), 0.0f);
  out.gene_ids.clear();
  for (std::size_t j = 0; j < kept.size(); ++j) {
    if (kept[j] < 0 || kept[j] >= d.n_genes) throw DataError("subset_genes: index out of range");
    out.gene_ids.push_back(d.gene_ids.empty() ? "" : d.gene_ids[static_cast<std::size_t>(kept[j])]);
  }
  for (int i = 0; i < d.n_spots; ++i)
    for (std::size_t j = 0; j < kept.size(); ++j)
      out.expr[static_cast<std::size_t>(i) * kept.size() + j] =
          d.expr[static_cast<std::size_t>(i) * d.n_genes + kept[j]];
  return out;
}

inline std::pair<SpatialDataset, PreprocessReport> filter_genes(const SpatialDataset& d,
                                                                int min_spots = 10) {
  auto kept = filter_genes_indices(d, min_spots);
  PreprocessReport rep;
  rep.genes_removed = d.n_genes - static_cast<int>(kept.size());
  return {subset_genes(d, kept), rep};
}

// Row i becomes log1p(x_ij * m / s_i), s_i the row sum, m the median row sum.
inline SpatialDataset normalize_log(const SpatialDataset& d) {
  std::vector<double> sums(static_cast<std::size_t>(d.n_spots), 0.0);
  for (int i = 0; i < d.n_spots; ++i) {
    double s = 0.0;
    for (int g = 0; g < d.n_genes; ++g) s += d.expr_at(i, g);
    if (s == 0.0) throw DataError("normalize_log: spot " + std::to_string(i) +
                                  " has zero total counts");
    sums[static_cast<std::size_t>(i)] = s;
  }
  std::vector<double> sorted = sums;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double m = (n % 2 == 1) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);

  SpatialDataset out = d;
  for (int i = 0; i < d.n_spots; ++i) {
    const double scale = m / sums[static_cast<std::size_t>(i)];
    for (int g = 0; g < d.n_genes; ++g) {
      out.expr[static_cast<std::size_t>(i) * d.n_genes + g] =
          static_cast<float>(std::log1p(d.expr_at(i, g) * scale));
    }
  }
  return out;
}

// Indices of the n_top genes with the largest variance, ties broken by gene
// index ascending; result sorted ascending so column order is preserved.
inline std::vector<int> select_hvg_indices(const SpatialDataset& d, int n_top) {
  if (n_top <= 0) throw DataError("select_hvg: n_top must be positive");
  if (n_top > d.n_genes) throw DataError("select_hvg: n_top exceeds gene count");
  std::vector<std::pair<double, int>> ranked;
  ranked.reserve(static_cast<std::size_t>(d.n_genes));
  const double inv_n = 1.0 / d.n_spots;
  for (int g = 0; g < d.n_genes; ++g) {
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < d.n_spots; ++i) {
      const double v = d.expr_at(i, g);
      s += v;
      s2 += v * v;
    }
    const double mean = s * inv_n;
    ranked.emplace_back(s2 * inv_n - mean * mean, g);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> kept;
  for (int j = 0; j < n_top; ++j) kept.push_back(ranked[static_cast<std::size_t>(j)].second);
  std::sort(kept.begin(), kept.end());
  return kept;
}

inline SpatialDataset select_hvg(const SpatialDataset& d, int n_top) {
  return subset_genes(d, select_hvg_indices(d, n_top));
}

// Mean over spots of each spot's fraction of zero entries.
inline double zero_proportion_mean(const SpatialDataset& d) {
  double acc = 0.0;
  for (int i = 0; i < d.n_spots; ++i) {
    int zeros = 0;
    for (int g = 0; g < d.n_genes; ++g) {
      if (d.expr_at(i, g) == 0.0) ++zeros;
    }
    acc += static_cast<double>(zeros) / d.n_genes;
  }
  return acc / d.n_spots;
}

}  // namespace stad
