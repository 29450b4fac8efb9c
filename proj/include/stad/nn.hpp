#pragma once

// Parameter bookkeeping, initializers, small layer helpers, and Adam.
// Models are functional: a ParamStore owns named leaf tensors, forward code
// pulls them by name, and the optimizer walks the store after backward().

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stad/rng.hpp"
#include "stad/tensor.hpp"

namespace stad {

class ParamStore {
 public:
  // Creates a named leaf. Names are unique; re-adding is a logic error.
  // Frozen stores (trainable=false) participate in forward passes without
  // growing the gradient graph.
  Tensor add(const std::string& name, Shape shape, std::vector<double> data,
             bool trainable = true) {
    if (params_.count(name)) throw TensorError("ParamStore: duplicate name " + name);
    Tensor t = Tensor::leaf(std::move(shape), std::move(data), trainable);
    params_.emplace(name, t);
    return t;
  }

  Tensor get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw TensorError("ParamStore: unknown name " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  // Ordered by name; iteration order feeds the optimizer and the checkpoint
  // writer, so it must be deterministic.
  const std::map<std::string, Tensor>& items() const { return params_; }

  void zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  // Overwrites values in place (checkpoint load); shapes must match.
  void set_values(const std::string& name, const std::vector<double>& v) {
    Tensor t = get(name);
    if (t.size() != v.size()) throw TensorError("ParamStore: size mismatch loading " + name);
    t.mutable_data() = v;
  }

 private:
  std::map<std::string, Tensor> params_;
};

// ---------- initializers ----------

inline std::vector<double> xavier_uniform(std::size_t fan_in, std::size_t fan_out,
                                          std::size_t count, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(count);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return v;
}

inline Tensor dense_init(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                         bool bias = true) {
  Tensor W = ps.add(name + ".w", {in, out},
                    xavier_uniform(static_cast<std::size_t>(in), static_cast<std::size_t>(out),
                                   static_cast<std::size_t>(in) * out, rng));
  if (bias) ps.add(name + ".b", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
  return W;
}

// Conv kernels are [kh,kw,Cin,Cout]; fan counts follow the receptive field.
inline void conv_init(ParamStore& ps, const std::string& name, int kh, int kw, int cin, int cout,
                      Rng& rng) {
  const std::size_t fan_in = static_cast<std::size_t>(kh) * kw * cin;
  const std::size_t fan_out = static_cast<std::size_t>(kh) * kw * cout;
  ps.add(name + ".k", {kh, kw, cin, cout},
         xavier_uniform(fan_in, fan_out, fan_in * cout, rng));
  ps.add(name + ".b", {cout}, std::vector<double>(static_cast<std::size_t>(cout), 0.0));
}

// ---------- layer helpers ----------

inline Tensor dense(const Tensor& x, const ParamStore& ps, const std::string& name,
                    bool bias = true) {
  Tensor y = matmul(x, ps.get(name + ".w"));
  if (bias) y = add_rowvec(y, ps.get(name + ".b"));
  return y;
}

// Adds a per-channel bias to an NHWC activation.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor flat = reshape(x, {n * h * w, c});
  return reshape(add_rowvec(flat, b), {n, h, w, c});
}

inline Tensor conv_layer(const Tensor& x, const ParamStore& ps, const std::string& name,
                         int stride, int pad) {
  return add_channel_bias(conv2d(x, ps.get(name + ".k"), stride, pad),
                          ps.get(name + ".b"));
}

inline Tensor tconv_layer(const Tensor& x, const ParamStore& ps, const std::string& name,
                          int stride, int pad) {
  return add_channel_bias(conv2d_transpose(x, ps.get(name + ".k"), stride, pad),
                          ps.get(name + ".b"));
}

// x + conv3x3(LeakyReLU(x)), shape-preserving.
inline Tensor residual_conv_block(const Tensor& x, const ParamStore& ps,
                                  const std::string& name) {
  Tensor y = conv_layer(leaky_relu(x), ps, name, /*stride=*/1, /*pad=*/1);
  return add(x, y);
}

// ---------- optimizer ----------

// Adam with bias correction. Moment buffers key off the parameter name, so a
// store can be trained in several phases with one optimizer per phase.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore& ps) { step({&ps}); }

  // One timestep over several stores (joint fine-tuning across stages).
  // Skips non-trainable parameters.
  void step(std::initializer_list<ParamStore*> stores) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (ParamStore* ps : stores) {
      for (auto& [name, p] : ps->items()) {
        Tensor t = p;
        if (!t.requires_grad()) continue;
        const auto& g = t.grad();
        auto& slot = mv_[name];
        if (slot.first.empty()) {
          slot.first.assign(t.size(), 0.0);
          slot.second.assign(t.size(), 0.0);
        }
        auto& val = t.mutable_data();
        for (std::size_t i = 0; i < val.size(); ++i) {
          if (!std::isfinite(g[i])) throw NonFiniteError("Adam: non-finite gradient in " + name);
          slot.first[i] = b1_ * slot.first[i] + (1.0 - b1_) * g[i];
          slot.second[i] = b2_ * slot.second[i] + (1.0 - b2_) * g[i] * g[i];
          const double mhat = slot.first[i] / c1;
          const double vhat = slot.second[i] / c2;
          val[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
      }
    }
  }

  double lr() const { return lr_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> mv_;
};

}  // namespace stad
