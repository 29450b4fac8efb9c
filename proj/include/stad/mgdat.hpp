#pragma once

// Masked dual-attention propagation over the spot graph. Per-node imagery and
// expression embeddings are condensed through a narrow cross-modal attention
// bottleneck, graph attention mixes each modality over out-neighbors, and
// nodes hidden behind learnable mask tokens are reconstructed from context.

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "stad/dataset.hpp"
#include "stad/graph.hpp"
#include "stad/nn.hpp"
#include "stad/rng.hpp"
#include "stad/stage1.hpp"
#include "stad/tensor.hpp"

namespace stad {

struct Stage2Config {
  int epochs = 10;
  int batch = 128;
  double lr = 1e-4;
  int blocks = 3;
  int heads = 2;            // graph-attention heads, averaged
  int embed_dim = 256;      // per-modality width D
  int bottleneck_dim = 16;  // fused width, strictly narrower than D
  double alpha = 0.5;       // image share of the mixed loss
  double gamma = 2.0;       // cosine-error exponent
  bool finetune_e1 = false;
  bool use_mask_tokens = true;
  bool fuse_concat = false;  // bypass the bottleneck with [Z_img || Z_gene]
};

// Width of the fused row appended to each modality before graph attention.
inline int fusion_width(const Stage2Config& cfg) {
  return cfg.fuse_concat ? 2 * cfg.embed_dim : cfg.bottleneck_dim;
}

constexpr int kTrmHeads = 4;

inline ParamStore init_stage2_params(Rng& rng, int n_genes, const Stage2Config& cfg) {
  if (cfg.bottleneck_dim >= cfg.embed_dim) {
    throw TensorError("stage2: bottleneck must be narrower than the embedding");
  }
  if (cfg.bottleneck_dim % kTrmHeads != 0) {
    throw TensorError("stage2: bottleneck width must split across attention heads");
  }
  const int D = cfg.embed_dim, Dp = cfg.bottleneck_dim;
  ParamStore ps;
  dense_init(ps, "f.l1", n_genes, 512, rng);
  dense_init(ps, "f.l2", 512, D, rng);
  ps.add("mask.img", {1, D}, std::vector<double>(static_cast<std::size_t>(D), 0.0));
  ps.add("mask.gene", {1, D}, std::vector<double>(static_cast<std::size_t>(D), 0.0));
  auto mat = [&](const std::string& name, int in, int out) {
    ps.add(name, {in, out},
           xavier_uniform(static_cast<std::size_t>(in), static_cast<std::size_t>(out),
                          static_cast<std::size_t>(in) * out, rng));
  };
  const int F = D + fusion_width(cfg);
  for (int l = 0; l < cfg.blocks; ++l) {
    const std::string fb = "fb" + std::to_string(l);
    if (!cfg.fuse_concat) {
      mat(fb + ".q1", 2 * D, Dp);
      mat(fb + ".k1", 2 * D, Dp);
      mat(fb + ".v1", 2 * D, Dp);
      mat(fb + ".q2", Dp, Dp);
      mat(fb + ".k2", Dp, Dp);
      mat(fb + ".v2", Dp, Dp);
    }
    for (const char* mod : {"img", "gene"}) {
      for (int h = 0; h < cfg.heads; ++h) {
        const std::string base = "g" + std::to_string(l) + "." + mod + ".";
        mat(base + "w" + std::to_string(h), F, D);
        mat(base + "a" + std::to_string(h), D, 1);
      }
    }
  }
  dense_init(ps, "d2.expand", D, 4 * 4 * 64, rng);
  conv_init(ps, "d2.t1", 4, 4, 64, 32, rng);
  conv_init(ps, "d2.r1", 3, 3, 32, 32, rng);
  conv_init(ps, "d2.t2", 4, 4, 32, 16, rng);
  conv_init(ps, "d2.r2", 3, 3, 16, 16, rng);
  conv_init(ps, "d2.t3", 4, 4, 16, 3, rng);
  conv_init(ps, "d2.r3", 3, 3, 3, 3, rng);
  mat("d3.w", D, n_genes);
  mat("d3.a", n_genes, 1);
  return ps;
}

// Two-layer MLP lifting one expression row into the shared embedding space.
inline Tensor rasterize_genes(const ParamStore& ps, const Tensor& expr) {
  return dense(leaky_relu(dense(expr, ps, "f.l1")), ps, "f.l2");
}

// ---------- graph attention over padded out-neighbor lists ----------

// Out-neighbor lists padded to the max degree. Pad slots point at row 0 with
// logit -1e6, which underflows to an exactly-zero softmax weight, so one
// rectangular code path serves uniform and ragged graphs alike.
struct PaddedNeighbors {
  int n = 0;
  int kmax = 0;
  std::vector<int> src;  // n*kmax, slot owner
  std::vector<int> dst;  // n*kmax, neighbor id (0 at pads)
  Tensor keep;           // [n,kmax], 1 real / 0 pad
  Tensor pad_logit;      // [n,kmax], 0 real / -1e6 pad
};

inline PaddedNeighbors pad_neighbors(const SpotGraph& g) {
  PaddedNeighbors pn;
  pn.n = g.n;
  for (const auto& nb : g.out_neighbors) {
    pn.kmax = std::max(pn.kmax, static_cast<int>(nb.size()));
  }
  for (int i = 0; i < g.n; ++i) {
    if (g.out_neighbors[static_cast<std::size_t>(i)].empty()) {
      throw GraphError("attention: node " + std::to_string(i) + " has no out-neighbors");
    }
  }
  const std::size_t total = static_cast<std::size_t>(pn.n) * pn.kmax;
  pn.src.resize(total);
  pn.dst.assign(total, 0);
  std::vector<double> keep(total, 0.0), pad(total, 0.0);
  for (int i = 0; i < pn.n; ++i) {
    const auto& nb = g.out_neighbors[static_cast<std::size_t>(i)];
    for (int s = 0; s < pn.kmax; ++s) {
      const std::size_t at = static_cast<std::size_t>(i) * pn.kmax + s;
      pn.src[at] = i;
      if (s < static_cast<int>(nb.size())) {
        pn.dst[at] = nb[static_cast<std::size_t>(s)];
        keep[at] = 1.0;
      } else {
        pad[at] = -1e6;
      }
    }
  }
  pn.keep = Tensor::leaf({pn.n, pn.kmax}, keep);
  pn.pad_logit = Tensor::leaf({pn.n, pn.kmax}, pad);
  return pn;
}

struct GatOut {
  Tensor value;      // [n, out] pre-activation aggregate
  Tensor attention;  // [n, kmax] rows sum to 1, zeros at pads
};

// One attention head: logits a^T LeakyReLU(W h_i + W h_j) over j in N_i,
// softmax per row, then the weighted sum of the projected neighbors.
inline GatOut gat_forward(const Tensor& h, const Tensor& w, const Tensor& a,
                          const PaddedNeighbors& pn) {
  Tensor g = matmul(h, w);
  const int dout = g.dim(1);
  Tensor gi = gather_rows(g, pn.src);
  Tensor gj = gather_rows(g, pn.dst);
  Tensor e = matmul(leaky_relu(add(gi, gj)), a);
  Tensor logits = add(mul(reshape(e, {pn.n, pn.kmax}), pn.keep), pn.pad_logit);
  Tensor alpha = softmax_rows(logits);
  Tensor vals = reshape(gj, {pn.n, pn.kmax, dout});
  return {sum_mid(scale_mid(vals, alpha)), alpha};
}

namespace detail2 {

inline Tensor attention_layer(const Tensor& x, const Tensor& wq, const Tensor& wk,
                              const Tensor& wv) {
  Tensor q = matmul(x, wq);
  Tensor k = matmul(x, wk);
  Tensor v = matmul(x, wv);
  const int width = q.dim(1);
  const int hd = width / kTrmHeads;
  std::vector<Tensor> outs;
  outs.reserve(kTrmHeads);
  for (int h = 0; h < kTrmHeads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    Tensor scores = mul_scalar(matmul(qh, transpose(kh)), 1.0 / std::sqrt(hd));
    outs.push_back(matmul(softmax_rows(scores), vh));
  }
  return concat_cols(outs);
}

}  // namespace detail2

// Condenses [Z_img || Z_gene] tokens (one per node, no positional encoding)
// through two narrow self-attention layers shared across the node set.
inline Tensor fuse_bottleneck(const ParamStore& ps, int block, const Tensor& z_img,
                              const Tensor& z_gene) {
  if (z_img.dim(0) < 1) throw TensorError("fuse_bottleneck: empty node set");
  if (z_img.dim(0) != z_gene.dim(0)) throw TensorError("fuse_bottleneck: row mismatch");
  Tensor x = concat_cols({z_img, z_gene});
  const std::string p = "fb" + std::to_string(block);
  Tensor h1 = leaky_relu(
      detail2::attention_layer(x, ps.get(p + ".q1"), ps.get(p + ".k1"), ps.get(p + ".v1")));
  return detail2::attention_layer(h1, ps.get(p + ".q2"), ps.get(p + ".k2"), ps.get(p + ".v2"));
}

// One propagation block. Each modality concatenates the fused row, runs its
// own attention heads over the shared graph, and averages them before the
// nonlinearity.
inline std::pair<Tensor, Tensor> mgdat_block(const ParamStore& ps, int block,
                                             const Tensor& z_img, const Tensor& z_gene,
                                             const Tensor& z_fused,
                                             const PaddedNeighbors& pn, int heads) {
  auto modality = [&](const Tensor& z, const char* mod) {
    Tensor h = concat_cols({z, z_fused});
    Tensor acc;
    for (int hd = 0; hd < heads; ++hd) {
      const std::string stem = "g" + std::to_string(block) + "." + mod + ".";
      Tensor v = gat_forward(h, ps.get(stem + "w" + std::to_string(hd)),
                             ps.get(stem + "a" + std::to_string(hd)), pn)
                     .value;
      acc = (hd == 0) ? v : add(acc, v);
    }
    return leaky_relu(mul_scalar(acc, 1.0 / heads));
  };
  return {modality(z_img, "img"), modality(z_gene, "gene")};
}

// ---------- decoders ----------

inline Tensor decode_patches(const ParamStore& ps, const Tensor& z) {
  const int B = z.dim(0);
  Tensor x = reshape(leaky_relu(dense(z, ps, "d2.expand")), {B, 4, 4, 64});
  x = residual_conv_block(tconv_layer(x, ps, "d2.t1", 2, 1), ps, "d2.r1");
  x = residual_conv_block(tconv_layer(x, ps, "d2.t2", 2, 1), ps, "d2.r2");
  x = residual_conv_block(tconv_layer(x, ps, "d2.t3", 2, 1), ps, "d2.r3");
  return sigmoid(x);
}

// Expression head: one attention layer over the graph, identity output.
inline Tensor decode_genes(const ParamStore& ps, const Tensor& z_gene,
                           const PaddedNeighbors& pn) {
  return gat_forward(z_gene, ps.get("d3.w"), ps.get("d3.a"), pn).value;
}

// ---------- masked forward ----------

struct MaskedRecon {
  Tensor patches;  // [B,32,32,3]
  Tensor expr;     // [B,G]
};

namespace detail2 {

inline std::pair<Tensor, Tensor> run_blocks(const ParamStore& ps, Tensor z_img,
                                            Tensor z_gene, const PaddedNeighbors& pn,
                                            const Stage2Config& cfg) {
  for (int l = 0; l < cfg.blocks; ++l) {
    Tensor fused = cfg.fuse_concat ? concat_cols({z_img, z_gene})
                                   : fuse_bottleneck(ps, l, z_img, z_gene);
    std::tie(z_img, z_gene) = mgdat_block(ps, l, z_img, z_gene, fused, pn, cfg.heads);
  }
  return {z_img, z_gene};
}

}  // namespace detail2

inline MaskedRecon forward_masked(const ParamStore& ps, const std::vector<int>& batch,
                                  const Tensor& z_img_all, const Tensor& expr,
                                  const PaddedNeighbors& pn, const Stage2Config& cfg) {
  if (batch.empty()) throw TensorError("forward_masked: empty batch");
  for (int i : batch) {
    if (i < 0 || i >= pn.n) throw TensorError("forward_masked: node out of range");
  }
  const int B = static_cast<int>(batch.size());
  Tensor z_img = z_img_all;
  Tensor z_gene = rasterize_genes(ps, expr);
  if (cfg.use_mask_tokens) {
    z_img = replace_rows(z_img, batch, repeat_row(ps.get("mask.img"), B));
    z_gene = replace_rows(z_gene, batch, repeat_row(ps.get("mask.gene"), B));
  }
  auto [zi, zg] = detail2::run_blocks(ps, z_img, z_gene, pn, cfg);
  MaskedRecon out;
  out.patches = decode_patches(ps, gather_rows(zi, batch));
  out.expr = gather_rows(decode_genes(ps, zg, pn), batch);
  return out;
}

// Final per-node embeddings with nothing masked; feeds the downstream
// classifier ablation that skips reconstruction errors.
struct Stage2Embeddings {
  Tensor z_img;
  Tensor z_gene;
};

inline Stage2Embeddings forward_unmasked(const ParamStore& ps, const Tensor& z_img_all,
                                         const Tensor& expr, const PaddedNeighbors& pn,
                                         const Stage2Config& cfg) {
  auto [zi, zg] = detail2::run_blocks(ps, z_img_all, rasterize_genes(ps, expr), pn, cfg);
  return {zi, zg};
}

// ---------- losses ----------

// Scaled cosine error (1 - cos)^gamma per row; norms carry a 1e-12 guard so
// zero rows produce cos = 0 rather than a division failure.
inline Tensor sce_per_sample(const Tensor& x, const Tensor& xhat, double gamma) {
  if (x.shape() != xhat.shape()) throw TensorError("sce: shape mismatch");
  Tensor nx = add_scalar(row_norms(x), 1e-12);
  Tensor nh = add_scalar(row_norms(xhat), 1e-12);
  Tensor cosv = divt(sum_axis(mul(x, xhat), 1), mul(nx, nh));
  return pow_scalar(rsub_scalar(1.0, cosv), gamma);
}

inline Tensor stage2_loss(const Tensor& p, const Tensor& phat, const Tensor& x,
                          const Tensor& xhat, double alpha, double gamma) {
  Tensor img = mean(stage1_loss_per_sample(p, phat));
  Tensor gene = mean(sce_per_sample(x, xhat, gamma));
  return add(mul_scalar(img, alpha), mul_scalar(gene, 1.0 - alpha));
}

// ---------- batching with 3-hop separation ----------

// Greedy deferral over `order`: a node joins the current batch only when no
// member lies within 3 hops in either direction; skipped nodes seed later
// batches, so every node is used exactly once and batches stay conflict-free
// (possibly smaller than requested).
inline std::vector<std::vector<int>> make_masked_batches(const SpotGraph& g, int batch,
                                                         Rng* rng) {
  const int n = g.n;
  if (batch < 1) throw GraphError("make_masked_batches: batch must be positive");
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  if (rng != nullptr) rng->shuffle(order);
  std::vector<std::vector<int>> reach(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) reach[static_cast<std::size_t>(i)] = khop(g, i, 3);

  std::vector<std::vector<int>> batches;
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  std::vector<char> in_cur(static_cast<std::size_t>(n), 0);
  std::vector<char> blocked(static_cast<std::size_t>(n), 0);
  int remaining = n;
  while (remaining > 0) {
    std::vector<int> cur;
    std::fill(in_cur.begin(), in_cur.end(), 0);
    std::fill(blocked.begin(), blocked.end(), 0);
    for (int id : order) {
      if (used[static_cast<std::size_t>(id)] || blocked[static_cast<std::size_t>(id)]) {
        continue;
      }
      bool hits = false;
      for (int j : reach[static_cast<std::size_t>(id)]) {
        if (in_cur[static_cast<std::size_t>(j)]) {
          hits = true;
          break;
        }
      }
      if (hits) continue;
      cur.push_back(id);
      used[static_cast<std::size_t>(id)] = 1;
      in_cur[static_cast<std::size_t>(id)] = 1;
      for (int j : reach[static_cast<std::size_t>(id)]) {
        blocked[static_cast<std::size_t>(j)] = 1;
      }
      --remaining;
      if (static_cast<int>(cur.size()) >= batch) break;
    }
    batches.push_back(std::move(cur));
  }
  return batches;
}

// ---------- exact per-node subgraph mode ----------

// Induced subgraph on khop(center,3) with local ids. Border nodes that lose
// every out-neighbor get a self-loop so attention stays defined; the center's
// own reconstruction never consumes those rows.
struct InducedSubgraph {
  SpotGraph graph;
  std::vector<int> nodes;  // local -> global, sorted
  int center_local = -1;
};

inline InducedSubgraph induce_khop3(const SpotGraph& g, int center) {
  InducedSubgraph sub;
  sub.nodes = khop(g, center, 3);
  std::vector<int> local(static_cast<std::size_t>(g.n), -1);
  for (std::size_t i = 0; i < sub.nodes.size(); ++i) {
    local[static_cast<std::size_t>(sub.nodes[i])] = static_cast<int>(i);
  }
  sub.center_local = local[static_cast<std::size_t>(center)];
  sub.graph.n = static_cast<int>(sub.nodes.size());
  sub.graph.k = g.k;
  sub.graph.out_neighbors.resize(sub.nodes.size());
  for (std::size_t i = 0; i < sub.nodes.size(); ++i) {
    for (int j : g.out_neighbors[static_cast<std::size_t>(sub.nodes[i])]) {
      if (local[static_cast<std::size_t>(j)] >= 0) {
        sub.graph.out_neighbors[i].push_back(local[static_cast<std::size_t>(j)]);
      }
    }
    if (sub.graph.out_neighbors[i].empty()) {
      sub.graph.out_neighbors[i].push_back(static_cast<int>(i));
    }
  }
  return sub;
}

inline MaskedRecon forward_masked_exact(const ParamStore& ps, int center,
                                        const Tensor& z_img_all, const Tensor& expr,
                                        const SpotGraph& g, const Stage2Config& cfg) {
  InducedSubgraph sub = induce_khop3(g, center);
  PaddedNeighbors pn = pad_neighbors(sub.graph);
  Tensor z_sub = gather_rows(z_img_all, sub.nodes);
  Tensor x_sub = gather_rows(expr, sub.nodes);
  return forward_masked(ps, {sub.center_local}, z_sub, x_sub, pn, cfg);
}

// ---------- training ----------

struct Stage2Report {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double initial_sce = 0.0;
  double final_sce = 0.0;
  std::vector<double> epoch_losses;
};

struct Stage2Eval {
  double loss = 0.0;
  double sce = 0.0;
};

// Mean mixed loss and mean cosine-error term over every node, each node
// masked exactly once in deterministic index-order batches.
inline Stage2Eval eval_stage2(const ParamStore& ps, const Tensor& z_img_all,
                              const Tensor& expr, const SpatialDataset& d,
                              const SpotGraph& g, const PaddedNeighbors& pn,
                              const Stage2Config& cfg) {
  NoGradGuard ng;
  double img_acc = 0.0, sce_acc = 0.0;
  for (const auto& batch : make_masked_batches(g, cfg.batch, nullptr)) {
    MaskedRecon r = forward_masked(ps, batch, z_img_all, expr, pn, cfg);
    Tensor img = stage1_loss_per_sample(d.patch_batch(batch), r.patches);
    Tensor sce = sce_per_sample(gather_rows(expr, batch), r.expr, cfg.gamma);
    for (std::size_t i = 0; i < img.size(); ++i) img_acc += img.at(i);
    for (std::size_t i = 0; i < sce.size(); ++i) sce_acc += sce.at(i);
  }
  Stage2Eval ev;
  ev.sce = sce_acc / d.n_spots;
  ev.loss = cfg.alpha * (img_acc / d.n_spots) + (1.0 - cfg.alpha) * ev.sce;
  return ev;
}

// Trains the propagation stack, decoders, rasterizer, and mask tokens on the
// reference section. The patch encoder stays frozen unless cfg.finetune_e1,
// in which case its parameters join the same optimizer step.
inline Stage2Report train_stage2(ParamStore& ps, ParamStore& e1, const SpatialDataset& d,
                                 const SpotGraph& g, const Stage2Config& cfg, Rng& rng) {
  PaddedNeighbors pn = pad_neighbors(g);
  std::vector<int> all(static_cast<std::size_t>(d.n_spots));
  for (int i = 0; i < d.n_spots; ++i) all[static_cast<std::size_t>(i)] = i;
  Tensor expr = d.expr_batch(all);
  Tensor frozen = embed_all_patches(e1, d);

  Stage2Report rep;
  Stage2Eval ev0 = eval_stage2(ps, frozen, expr, d, g, pn, cfg);
  rep.initial_loss = ev0.loss;
  rep.initial_sce = ev0.sce;
  if (cfg.epochs == 0) {
    rep.final_loss = rep.initial_loss;
    rep.final_sce = rep.initial_sce;
    return rep;
  }

  Adam opt(cfg.lr);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double acc = 0.0;
    int count = 0;
    for (const auto& batch : make_masked_batches(g, cfg.batch, &rng)) {
      Tensor z_img = cfg.finetune_e1 ? encode_patches(e1, d.patch_batch(all)) : frozen;
      MaskedRecon r = forward_masked(ps, batch, z_img, expr, pn, cfg);
      Tensor loss = stage2_loss(d.patch_batch(batch), r.patches,
                                gather_rows(expr, batch), r.expr, cfg.alpha, cfg.gamma);
      ps.zero_grads();
      if (cfg.finetune_e1) {
        e1.zero_grads();
        loss.backward();
        opt.step({&ps, &e1});
      } else {
        loss.backward();
        opt.step(ps);
      }
      acc += loss.item() * static_cast<double>(batch.size());
      count += static_cast<int>(batch.size());
    }
    rep.epoch_losses.push_back(acc / count);
  }
  if (cfg.finetune_e1) frozen = embed_all_patches(e1, d);
  Stage2Eval ev1 = eval_stage2(ps, frozen, expr, d, g, pn, cfg);
  rep.final_loss = ev1.loss;
  rep.final_sce = ev1.sce;
  return rep;
}

}  // namespace stad
