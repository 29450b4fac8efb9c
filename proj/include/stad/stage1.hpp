#pragma once

// Patch autoencoder: a small strided-conv U-Net over 32x32x3 histology
// patches. The encoder's flat embedding is the per-spot imagery feature the
// rest of the pipeline consumes; the decoder exists only to supply the
// pretraining signal (whole-patch SSIM plus mean absolute error).

#include <string>
#include <vector>

#include "stad/dataset.hpp"
#include "stad/nn.hpp"
#include "stad/rng.hpp"
#include "stad/tensor.hpp"

namespace stad {

struct Stage1Config {
  int epochs = 30;
  int batch = 128;
  double lr = 1e-4;
  int embed_dim = 256;
};

// Encoder halves 32->16->8->4->2 over channels 3->8->16->32->64, then maps
// the 2*2*64 bottleneck to the embedding. Decoder mirrors with 4x4 stride-2
// transposed convs, concatenating the three intermediate encoder activations
// (16x16x8, 8x8x16, 4x4x32) as skip inputs.
inline ParamStore init_stage1_params(Rng& rng, int embed_dim = 256) {
  ParamStore ps;
  conv_init(ps, "e1.c1", 3, 3, 3, 8, rng);
  conv_init(ps, "e1.c2", 3, 3, 8, 16, rng);
  conv_init(ps, "e1.c3", 3, 3, 16, 32, rng);
  conv_init(ps, "e1.c4", 3, 3, 32, 64, rng);
  dense_init(ps, "e1.embed", 2 * 2 * 64, embed_dim, rng);
  dense_init(ps, "d1.expand", embed_dim, 2 * 2 * 64, rng);
  conv_init(ps, "d1.t4", 4, 4, 64, 32, rng);       // 2 -> 4, meets skip e3 (32ch)
  conv_init(ps, "d1.t3", 4, 4, 32 + 32, 16, rng);  // 4 -> 8, meets skip e2 (16ch)
  conv_init(ps, "d1.t2", 4, 4, 16 + 16, 8, rng);   // 8 -> 16, meets skip e1 (8ch)
  conv_init(ps, "d1.t1", 4, 4, 8 + 8, 3, rng);     // 16 -> 32, image head
  return ps;
}

namespace detail1 {

struct EncoderTaps {
  Tensor a1, a2, a3;  // post-activation intermediates for skip connections
  Tensor embed;       // [B, D]
};

inline EncoderTaps encode_with_taps(const ParamStore& ps, const Tensor& patches) {
  EncoderTaps t;
  t.a1 = leaky_relu(conv_layer(patches, ps, "e1.c1", 2, 1));  // [B,16,16,8]
  t.a2 = leaky_relu(conv_layer(t.a1, ps, "e1.c2", 2, 1));     // [B,8,8,16]
  t.a3 = leaky_relu(conv_layer(t.a2, ps, "e1.c3", 2, 1));     // [B,4,4,32]
  Tensor a4 = leaky_relu(conv_layer(t.a3, ps, "e1.c4", 2, 1));  // [B,2,2,64]
  const int B = patches.dim(0);
  t.embed = dense(reshape(a4, {B, 2 * 2 * 64}), ps, "e1.embed");
  return t;
}

// Concatenates two NHWC activations along channels.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const int B = a.dim(0), H = a.dim(1), W = a.dim(2);
  Tensor fa = reshape(a, {B * H * W, a.dim(3)});
  Tensor fb = reshape(b, {B * H * W, b.dim(3)});
  return reshape(concat_cols({fa, fb}), {B, H, W, a.dim(3) + b.dim(3)});
}

}  // namespace detail1

inline Tensor encode_patches(const ParamStore& ps, const Tensor& patches) {
  return detail1::encode_with_taps(ps, patches).embed;
}

// Full autoencoder pass; output values lie in (0,1) via the sigmoid head.
inline Tensor autoencode_patches(const ParamStore& ps, const Tensor& patches) {
  detail1::EncoderTaps taps = detail1::encode_with_taps(ps, patches);
  const int B = patches.dim(0);
  Tensor h = leaky_relu(dense(taps.embed, ps, "d1.expand"));
  Tensor x = reshape(h, {B, 2, 2, 64});
  x = leaky_relu(tconv_layer(x, ps, "d1.t4", 2, 1));          // [B,4,4,32]
  x = detail1::concat_channels(x, taps.a3);                   // [B,4,4,64]
  x = leaky_relu(tconv_layer(x, ps, "d1.t3", 2, 1));          // [B,8,8,16]
  x = detail1::concat_channels(x, taps.a2);                   // [B,8,8,32]
  x = leaky_relu(tconv_layer(x, ps, "d1.t2", 2, 1));          // [B,16,16,8]
  x = detail1::concat_channels(x, taps.a1);                   // [B,16,16,16]
  return sigmoid(tconv_layer(x, ps, "d1.t1", 2, 1));          // [B,32,32,3]
}

// ---------- SSIM and the pretraining loss ----------

// Per-sample SSIM from whole-patch statistics, computed per channel and
// averaged; C1=(0.01)^2, C2=(0.03)^2 for dynamic range 1. Returns [B].
inline Tensor ssim_per_sample(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape()) throw TensorError("ssim: shape mismatch");
  const int B = x.dim(0), C = x.dim(3);
  const double c1 = 1e-4, c2 = 9e-4;
  Tensor rx = nhwc_to_bc_rows(x);  // [B*C, H*W]
  Tensor ry = nhwc_to_bc_rows(y);
  Tensor mx = mean_axis(rx, 1);  // [B*C]
  Tensor my = mean_axis(ry, 1);
  Tensor dx = sub_colvec(rx, mx);
  Tensor dy = sub_colvec(ry, my);
  Tensor vx = mean_axis(mul(dx, dx), 1);
  Tensor vy = mean_axis(mul(dy, dy), 1);
  Tensor cov = mean_axis(mul(dx, dy), 1);
  Tensor num = mul(add_scalar(mul_scalar(mul(mx, my), 2.0), c1),
                   add_scalar(mul_scalar(cov, 2.0), c2));
  Tensor den = mul(add_scalar(add(mul(mx, mx), mul(my, my)), c1),
                   add_scalar(add(vx, vy), c2));
  Tensor per_channel = divt(num, den);            // [B*C]
  return mean_axis(reshape(per_channel, {B, C}), 1);  // [B]
}

// Scalar SSIM of one patch pair (or the batch mean when B > 1).
inline Tensor ssim(const Tensor& x, const Tensor& y) {
  return mean(ssim_per_sample(x, y));
}

// Per-sample -SSIM + mean-absolute-error, returned as [B].
inline Tensor stage1_loss_per_sample(const Tensor& p, const Tensor& phat) {
  if (p.shape() != phat.shape()) throw TensorError("stage1_loss: shape mismatch");
  const int B = p.dim(0);
  const int per = p.dim(1) * p.dim(2) * p.dim(3);
  Tensor l1 = mean_axis(reshape(abs(sub(p, phat)), {B, per}), 1);
  return add(neg(ssim_per_sample(p, phat)), l1);
}

inline Tensor stage1_loss(const Tensor& p, const Tensor& phat) {
  return mean(stage1_loss_per_sample(p, phat));
}

// ---------- training ----------

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

namespace detail1 {

inline std::vector<std::vector<int>> make_batches(int n, int batch, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  rng.shuffle(idx);
  std::vector<std::vector<int>> out;
  for (int s = 0; s < n; s += batch) {
    out.emplace_back(idx.begin() + s, idx.begin() + std::min(n, s + batch));
  }
  return out;
}

}  // namespace detail1

// Mean reconstruction loss over the whole dataset without touching grads.
inline double stage1_dataset_loss(const ParamStore& ps, const SpatialDataset& d,
                                  int batch = 128) {
  NoGradGuard ng;
  double acc = 0.0;
  for (int s = 0; s < d.n_spots; s += batch) {
    std::vector<int> idx;
    for (int i = s; i < std::min(d.n_spots, s + batch); ++i) idx.push_back(i);
    Tensor p = d.patch_batch(idx);
    Tensor loss = stage1_loss_per_sample(p, autoencode_patches(ps, p));
    for (std::size_t i = 0; i < loss.size(); ++i) acc += loss.at(i);
  }
  return acc / d.n_spots;
}

inline TrainReport pretrain_stage1(ParamStore& ps, const SpatialDataset& d,
                                   const Stage1Config& cfg, Rng& rng) {
  TrainReport rep;
  rep.initial_loss = stage1_dataset_loss(ps, d, cfg.batch);
  if (cfg.epochs == 0) {
    rep.final_loss = rep.initial_loss;
    return rep;
  }
  Adam opt(cfg.lr);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_acc = 0.0;
    int epoch_n = 0;
    for (const auto& idx : detail1::make_batches(d.n_spots, cfg.batch, rng)) {
      Tensor p = d.patch_batch(idx);
      Tensor loss = stage1_loss(p, autoencode_patches(ps, p));
      ps.zero_grads();
      loss.backward();
      opt.step(ps);
      epoch_acc += loss.item() * static_cast<double>(idx.size());
      epoch_n += static_cast<int>(idx.size());
    }
    rep.epoch_losses.push_back(epoch_acc / epoch_n);
  }
  rep.final_loss = stage1_dataset_loss(ps, d, cfg.batch);
  return rep;
}

// Embeddings for every spot, evaluated without gradient tracking. Rows align
// with spot indices.
inline Tensor embed_all_patches(const ParamStore& ps, const SpatialDataset& d,
                                int batch = 256) {
  NoGradGuard ng;
  std::vector<Tensor> chunks;
  for (int s = 0; s < d.n_spots; s += batch) {
    std::vector<int> idx;
    for (int i = s; i < std::min(d.n_spots, s + batch); ++i) idx.push_back(i);
    chunks.push_back(encode_patches(ps, d.patch_batch(idx)));
  }
  return chunks.size() == 1 ? chunks[0] : concat_rows(chunks);
}

}  // namespace stad
