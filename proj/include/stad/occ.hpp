#pragma once

// One-class stage: originals and reconstructions pass through shared encoders
// into a fused latent, their difference is the per-spot reconstruction error,
// and training pulls reference errors toward a common center. The anomaly
// score is the squared distance to that center.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "stad/nn.hpp"
#include "stad/rng.hpp"
#include "stad/tensor.hpp"

namespace stad {

class OccError : public std::runtime_error {
 public:
  explicit OccError(const std::string& what) : std::runtime_error(what) {}
};

struct Stage3Config {
  int epochs = 5;
  int batch = 128;
  double lr = 1e-4;
  int embed_dim = 256;  // encoder output width D
  int occ_dim = 256;    // fused latent width
  double beta = 0.5;    // image share of the fused combination
};

// E2: four stride-2 conv + residual stages over 32x32x3. E3: two-layer MLP.
// FFN: two layers into the one-class latent, final layer biasless so the
// constant-map solution is not free. "center" rides along untrained.
inline ParamStore init_stage3_params(Rng& rng, int n_genes, const Stage3Config& cfg) {
  ParamStore ps;
  conv_init(ps, "e2.c1", 3, 3, 3, 8, rng);
  conv_init(ps, "e2.r1", 3, 3, 8, 8, rng);
  conv_init(ps, "e2.c2", 3, 3, 8, 16, rng);
  conv_init(ps, "e2.r2", 3, 3, 16, 16, rng);
  conv_init(ps, "e2.c3", 3, 3, 16, 32, rng);
  conv_init(ps, "e2.r3", 3, 3, 32, 32, rng);
  conv_init(ps, "e2.c4", 3, 3, 32, 32, rng);
  conv_init(ps, "e2.r4", 3, 3, 32, 32, rng);
  dense_init(ps, "e2.embed", 2 * 2 * 32, cfg.embed_dim, rng);
  dense_init(ps, "e3.l1", n_genes, 256, rng);
  dense_init(ps, "e3.l2", 256, cfg.embed_dim, rng);
  dense_init(ps, "ffn.l1", cfg.embed_dim, cfg.occ_dim, rng);
  dense_init(ps, "ffn.l2", cfg.occ_dim, cfg.occ_dim, rng, /*bias=*/false);
  ps.add("center", {1, cfg.occ_dim},
         std::vector<double>(static_cast<std::size_t>(cfg.occ_dim), 0.0),
         /*trainable=*/false);
  return ps;
}

inline Tensor encode_occ_patches(const ParamStore& ps, const Tensor& patches) {
  Tensor x = residual_conv_block(leaky_relu(conv_layer(patches, ps, "e2.c1", 2, 1)), ps, "e2.r1");
  x = residual_conv_block(leaky_relu(conv_layer(x, ps, "e2.c2", 2, 1)), ps, "e2.r2");
  x = residual_conv_block(leaky_relu(conv_layer(x, ps, "e2.c3", 2, 1)), ps, "e2.r3");
  x = residual_conv_block(leaky_relu(conv_layer(x, ps, "e2.c4", 2, 1)), ps, "e2.r4");
  const int B = patches.dim(0);
  return dense(reshape(x, {B, 2 * 2 * 32}), ps, "e2.embed");
}

inline Tensor encode_occ_genes(const ParamStore& ps, const Tensor& expr) {
  return dense(leaky_relu(dense(expr, ps, "e3.l1")), ps, "e3.l2");
}

// Convex combination of the row-normalized embeddings; its norm never
// exceeds 1 by the triangle inequality.
inline Tensor fused_unit_combo(const Tensor& e_img, const Tensor& e_gene, double beta) {
  Tensor ni = div_colvec(e_img, add_scalar(row_norms(e_img), 1e-12));
  Tensor ng = div_colvec(e_gene, add_scalar(row_norms(e_gene), 1e-12));
  return add(mul_scalar(ni, beta), mul_scalar(ng, 1.0 - beta));
}

inline Tensor apply_fusion_ffn(const ParamStore& ps, const Tensor& fused) {
  return dense(leaky_relu(dense(fused, ps, "ffn.l1")), ps, "ffn.l2", /*bias=*/false);
}

// Z_fused for a batch of raw inputs; the same weights serve originals and
// reconstructions.
inline Tensor latent_fuse(const ParamStore& ps, const Tensor& patches, const Tensor& expr,
                          double beta) {
  return apply_fusion_ffn(
      ps, fused_unit_combo(encode_occ_patches(ps, patches), encode_occ_genes(ps, expr), beta));
}

inline Tensor latent_recon_error(const ParamStore& ps, const Tensor& p, const Tensor& phat,
                                 const Tensor& x, const Tensor& xhat, double beta) {
  return sub(latent_fuse(ps, p, x, beta), latent_fuse(ps, phat, xhat, beta));
}

// ---------- center and scores ----------

inline std::vector<double> compute_center(const Tensor& errors) {
  if (errors.ndim() != 2 || errors.dim(0) < 1) {
    throw OccError("compute_center: need at least one error vector");
  }
  NoGradGuard ng;
  return mean_axis(errors, 0).data();
}

inline std::vector<double> scores_from_errors(const Tensor& errors,
                                              const std::vector<double>& center) {
  NoGradGuard ng;
  const int n = errors.dim(0), d = errors.dim(1);
  if (static_cast<std::size_t>(d) != center.size()) {
    throw OccError("scores: center width mismatch");
  }
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      const double diff = errors.at2(i, j) - center[static_cast<std::size_t>(j)];
      s += diff * diff;
    }
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

// ---------- training over an abstract latent source ----------

// One batch of one-class inputs: `errors` feed the hypersphere, `fused`
// is the Z_fused matrix watched by the collapse detector. The embedding
// ablation passes the same tensor for both.
struct LatentBatch {
  Tensor errors;
  Tensor fused;
};

using LatentFn = std::function<LatentBatch(const std::vector<int>&)>;

struct ReconSet {
  Tensor orig_patches;   // [n,32,32,3]
  Tensor recon_patches;  // [n,32,32,3]
  Tensor orig_expr;      // [n,G]
  Tensor recon_expr;     // [n,G]
};

namespace detail3 {

inline Tensor take4(const Tensor& t, const std::vector<int>& idx) {
  const int h = t.dim(1), w = t.dim(2), c = t.dim(3);
  Tensor flat = reshape(t, {t.dim(0), h * w * c});
  return reshape(gather_rows(flat, idx), {static_cast<int>(idx.size()), h, w, c});
}

}  // namespace detail3

// Latent source for the standard pipeline: errors are Eq.-style differences
// between original and reconstructed fused latents. Captures by reference;
// keep `ps` and `rs` alive across calls.
inline LatentFn make_recon_latent(const ParamStore& ps, const ReconSet& rs, double beta) {
  return [&ps, &rs, beta](const std::vector<int>& idx) {
    Tensor zo = latent_fuse(ps, detail3::take4(rs.orig_patches, idx),
                            gather_rows(rs.orig_expr, idx), beta);
    Tensor zr = latent_fuse(ps, detail3::take4(rs.recon_patches, idx),
                            gather_rows(rs.recon_expr, idx), beta);
    return LatentBatch{sub(zo, zr), zo};
  };
}

struct EmbeddingSet {
  Tensor e_img;   // [n,D]
  Tensor e_gene;  // [n,D]
};

// Latent source for the no-reconstruction-error ablation: instance
// embeddings are fused directly and stand in for the errors.
inline LatentFn make_embed_latent(const ParamStore& ps, const EmbeddingSet& es, double beta) {
  return [&ps, &es, beta](const std::vector<int>& idx) {
    Tensor z = apply_fusion_ffn(
        ps, fused_unit_combo(gather_rows(es.e_img, idx), gather_rows(es.e_gene, idx), beta));
    return LatentBatch{z, z};
  };
}

struct Stage3Report {
  std::vector<double> epoch_losses;  // mean L_occ per epoch
  double fused_variance = 0.0;       // last collapse-check value
};

namespace detail3 {

inline std::vector<std::vector<int>> chunk_indices(int n, int batch) {
  std::vector<std::vector<int>> out;
  for (int s = 0; s < n; s += batch) {
    std::vector<int> idx;
    for (int i = s; i < std::min(n, s + batch); ++i) idx.push_back(i);
    out.push_back(std::move(idx));
  }
  return out;
}

// Full-set pass without gradients: stacked errors plus the mean per-coordinate
// variance of the fused latents.
inline std::pair<Tensor, double> collect_errors(const LatentFn& fn, int n, int batch) {
  NoGradGuard ng;
  std::vector<Tensor> errs, fused;
  for (const auto& idx : chunk_indices(n, batch)) {
    LatentBatch lb = fn(idx);
    errs.push_back(lb.errors);
    fused.push_back(lb.fused);
  }
  Tensor all_err = errs.size() == 1 ? errs[0] : concat_rows(errs);
  Tensor all_fused = fused.size() == 1 ? fused[0] : concat_rows(fused);
  const int d = all_fused.dim(1);
  double var_acc = 0.0;
  for (int j = 0; j < d; ++j) {
    double m = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double v = all_fused.at2(i, j);
      m += v;
      m2 += v * v;
    }
    m /= n;
    var_acc += m2 / n - m * m;
  }
  return {all_err, var_acc / d};
}

}  // namespace detail3

// Algorithm: at each epoch start the center is refrozen from current-model
// errors over the whole reference set (no gradient flows through it), then
// mini-batches minimize mean squared distance to it.
inline Stage3Report train_stage3(ParamStore& ps, const LatentFn& fn, int n,
                                 const Stage3Config& cfg, Rng& rng) {
  if (n < 1) throw OccError("train_stage3: empty reference set");
  Stage3Report rep;
  {
    auto [errors, variance] = detail3::collect_errors(fn, n, cfg.batch);
    rep.fused_variance = variance;
    ps.set_values("center", compute_center(errors));
  }
  if (cfg.epochs == 0) return rep;

  Adam opt(cfg.lr);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto [errors, variance] = detail3::collect_errors(fn, n, cfg.batch);
    rep.fused_variance = variance;
    if (variance < 1e-10) {
      throw OccError("train_stage3: fused latents collapsed to a constant (variance " +
                     std::to_string(variance) + ")");
    }
    ps.set_values("center", compute_center(errors));
    Tensor neg_center = Tensor::leaf({cfg.occ_dim}, [&] {
      std::vector<double> v = ps.get("center").data();
      for (double& x : v) x = -x;
      return v;
    }());

    rng.shuffle(order);
    double acc = 0.0;
    for (int s = 0; s < n; s += cfg.batch) {
      std::vector<int> idx(order.begin() + s,
                           order.begin() + std::min(n, s + cfg.batch));
      Tensor diff = add_rowvec(fn(idx).errors, neg_center);
      Tensor loss = mean(sum_axis(mul(diff, diff), 1));
      ps.zero_grads();
      loss.backward();
      opt.step(ps);
      acc += loss.item() * static_cast<double>(idx.size());
    }
    rep.epoch_losses.push_back(acc / n);
  }
  return rep;
}

// Scores against the stored center, chunked so frozen scoring stays cheap.
inline std::vector<double> anomaly_scores(const ParamStore& ps, const LatentFn& fn, int n,
                                          int batch = 256) {
  NoGradGuard ng;
  const std::vector<double> center = ps.get("center").data();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n));
  for (const auto& idx : detail3::chunk_indices(n, batch)) {
    for (double s : scores_from_errors(fn(idx).errors, center)) out.push_back(s);
  }
  return out;
}

// Piecewise heuristic raising the image weight when expression dropout gets
// extreme.
inline double adaptive_beta(double zbar) {
  if (zbar < 0.0 || zbar > 1.0) throw OccError("adaptive_beta: proportion out of range");
  if (zbar <= 0.95) return 0.5;
  const double t = 200.0 * (zbar - 0.975);
  const double sig = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
  return 0.5 + 0.5 * sig;
}

}  // namespace stad
