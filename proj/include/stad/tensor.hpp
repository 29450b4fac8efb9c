#pragma once

// Reverse-mode automatic differentiation over dense row-major double tensors.
//
// Every op builds a DiffNode holding the forward value plus a closure that
// scatters the node's gradient into its parents. backward() walks reachable
// nodes in reverse construction order, which fixes the accumulation order and
// keeps repeated runs bit-identical. Values are checked for NaN/Inf after each
// forward op; gradients are not checked.
//
// Matrix products route through Eigen; convolutions lower to im2col + matmul.
// No in-place mutation of any value with dependents, no operator fusion.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace stad {

using Shape = std::vector<int>;

class TensorError : public std::runtime_error {
 public:
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when a forward op produces NaN or Inf.
class NonFiniteError : public TensorError {
 public:
  explicit NonFiniteError(const std::string& what) : TensorError(what) {}
};

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated on first backward touch
  bool requires_grad = false;
  std::uint64_t seq = 0;  // construction order, monotone per thread
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_rule;

  // Long op chains would otherwise unwind recursively through shared_ptr
  // destructors and overflow the stack.
  ~Node() {
    std::vector<NodePtr> work;
    work.swap(parents);
    while (!work.empty()) {
      NodePtr p = std::move(work.back());
      work.pop_back();
      if (p && p.use_count() == 1) {
        for (auto& q : p->parents) work.push_back(std::move(q));
        p->parents.clear();
      }
    }
  }

  void ensure_grad() {
    if (grad.empty()) grad.assign(val.size(), 0.0);
  }
};

inline std::uint64_t& seq_counter() {
  thread_local std::uint64_t c = 0;
  return c;
}

inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

}  // namespace detail

// Disables graph recording inside its scope (pure forward evaluation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
};

// ============================================================
// Tensor: a handle on one DiffNode
// ============================================================

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw TensorError("leaf: shape " + shape_str(shape) + " does not match data length " +
                        std::to_string(data.size()));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->requires_grad = requires_grad && detail::grad_mode();
    n->seq = ++detail::seq_counter();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(numel(shape), 0.0);
    return leaf(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(numel(shape), v);
    return leaf(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return leaf({1}, {v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  std::size_t size() const { return n_->val.size(); }
  bool requires_grad() const { return n_->requires_grad; }

  const std::vector<double>& data() const { return n_->val; }
  // Mutable access is reserved for leaves without dependents (parameter updates).
  std::vector<double>& mutable_data() { return n_->val; }

  double item() const {
    if (size() != 1) throw TensorError("item: tensor is not scalar, shape " + shape_str(shape()));
    return n_->val[0];
  }
  double at(std::size_t i) const { return n_->val[i]; }
  double at2(int r, int c) const {
    return n_->val[static_cast<std::size_t>(r) * static_cast<std::size_t>(dim(1)) +
                   static_cast<std::size_t>(c)];
  }

  const std::vector<double>& grad() const {
    if (n_->grad.empty()) n_->grad.assign(n_->val.size(), 0.0);
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->val.size(), 0.0); }

  // Reverse pass from a scalar root. Gradients accumulate additively across
  // repeated calls; callers reset leaves explicitly when they want fresh grads.
  void backward() const {
    if (size() != 1) {
      throw TensorError("backward: root must be scalar, got shape " + shape_str(shape()));
    }
    // Collect the reachable subgraph iteratively.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{n_.get()};
    seen.insert(n_.get());
    while (!stack.empty()) {
      detail::Node* cur = stack.back();
      stack.pop_back();
      order.push_back(cur);
      for (auto& p : cur->parents) {
        if (p && seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
    // Interior gradients are scratch per pass; only leaves accumulate across
    // calls. Each pass therefore contributes exactly one unit of root seed.
    for (detail::Node* node : order) {
      if (node->backward_rule) node->grad.assign(node->val.size(), 0.0);
    }
    n_->ensure_grad();
    n_->grad[0] += 1.0;
    for (detail::Node* node : order) {
      if (node->backward_rule && !node->grad.empty()) node->backward_rule(*node);
    }
  }

  detail::NodePtr node() const { return n_; }

 private:
  explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}
  detail::NodePtr n_;

  friend Tensor make_op(const std::string&, Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(detail::Node&)>);
};

// ============================================================
// Op construction helper
// ============================================================

inline void check_finite(const std::string& op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NonFiniteError(op + ": non-finite value in output");
  }
}

inline Tensor make_op(const std::string& name, Shape shape, std::vector<double> val,
                      std::vector<Tensor> inputs, std::function<void(detail::Node&)> rule) {
  check_finite(name, val);
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  n->seq = ++detail::seq_counter();
  bool need = false;
  if (detail::grad_mode()) {
    for (const auto& t : inputs) need = need || t.requires_grad();
  }
  if (need) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward_rule = std::move(rule);
  }
  return Tensor(n);
}

namespace detail {
// Parents that do not require grad skip their scatter; this test keeps the
// backward rules short.
inline bool wants_grad(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  if (!p->requires_grad) return false;
  p->ensure_grad();
  return true;
}
}  // namespace detail

// ============================================================
// Elementwise binary and scalar ops
// ============================================================

inline void check_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError(op + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) + b.at(i);
  return make_op("add", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::wants_grad(self, p)) continue;
      auto& g = self.parents[p]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) - b.at(i);
  return make_op("sub", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * b.at(i);
  return make_op("mul", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->val;
    const auto& bv = self.parents[1]->val;
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor divt(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) / b.at(i);
  return make_op("div", a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->val;
    const auto& bv = self.parents[1]->val;
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) + c;
  return make_op("add_scalar", a.shape(), std::move(v), {a}, [](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) * c;
  return make_op("mul_scalar", a.shape(), std::move(v), {a}, [c](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// c - a
inline Tensor rsub_scalar(double c, const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = c - a.at(i);
  return make_op("rsub_scalar", a.shape(), std::move(v), {a}, [](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

// ============================================================
// Elementwise unary ops
// ============================================================

inline Tensor exp(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.at(i));
  return make_op("exp", a.shape(), std::move(v), {a}, [](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.val[i];
  });
}

inline Tensor log(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(a.at(i));
  return make_op("log", a.shape(), std::move(v), {a}, [](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    const auto& av = self.parents[0]->val;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / av[i];
  });
}

// Elementwise a^p for a real constant exponent.
inline Tensor pow_scalar(const Tensor& a, double p) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::pow(a.at(i), p);
  return make_op("pow_scalar", a.shape(), std::move(v), {a}, [p](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    const auto& av = self.parents[0]->val;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = (p == 1.0) ? 1.0 : p * std::pow(av[i], p - 1.0);
      g[i] += self.grad[i] * d;
    }
  });
}

inline Tensor sqrt(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(a.at(i));
  return make_op("sqrt", a.shape(), std::move(v), {a}, [](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 0.5 / self.val[i];
  });
}

inline Tensor abs(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::abs(a.at(i));
  return make_op("abs", a.shape(), std::move(v), {a}, [](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    const auto& av = self.parents[0]->val;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double s = (av[i] > 0.0) ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
      g[i] += self.grad[i] * s;
    }
  });
}

inline Tensor leaky_relu(const Tensor& a, double slope = 0.01) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.at(i) > 0.0 ? a.at(i) : slope * a.at(i);
  return make_op("leaky_relu", a.shape(), std::move(v), {a}, [slope](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    const auto& av = self.parents[0]->val;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * (av[i] > 0.0 ? 1.0 : slope);
  });
}

inline double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = sigmoid_stable(a.at(i));
  return make_op("sigmoid", a.shape(), std::move(v), {a}, [](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * self.val[i] * (1.0 - self.val[i]);
  });
}

// ============================================================
// Reductions
// ============================================================

inline Tensor sum(const Tensor& a) {
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return make_op("sum", {1}, {s}, {a}, [](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw TensorError("mean: empty tensor");
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  double inv = 1.0 / static_cast<double>(a.size());
  return make_op("mean", {1}, {s * inv}, {a}, [inv](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * inv;
  });
}

// 2-D reduction over one axis. axis 0 collapses rows -> [cols], axis 1 -> [rows].
inline Tensor sum_axis(const Tensor& a, int axis) {
  if (a.ndim() != 2) throw TensorError("sum_axis: expects 2-D, got " + shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  if (axis == 0) {
    std::vector<double> v(static_cast<std::size_t>(c), 0.0);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(j)] += a.at2(i, j);
    return make_op("sum_axis0", {c}, std::move(v), {a}, [r, c](detail::Node& self) {
      if (!detail::wants_grad(self, 0)) return;
      auto& g = self.parents[0]->grad;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          g[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j)];
    });
  }
  if (axis == 1) {
    std::vector<double> v(static_cast<std::size_t>(r), 0.0);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(i)] += a.at2(i, j);
    return make_op("sum_axis1", {r}, std::move(v), {a}, [r, c](detail::Node& self) {
      if (!detail::wants_grad(self, 0)) return;
      auto& g = self.parents[0]->grad;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          g[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(i)];
    });
  }
  throw TensorError("sum_axis: axis must be 0 or 1");
}

inline Tensor mean_axis(const Tensor& a, int axis) {
  double inv = 1.0 / static_cast<double>(axis == 0 ? a.dim(0) : a.dim(1));
  return mul_scalar(sum_axis(a, axis), inv);
}

// 3-D [a,b,c] -> [a,b], reducing the last axis.
inline Tensor mean_last(const Tensor& t) {
  if (t.ndim() != 3) throw TensorError("mean_last: expects 3-D, got " + shape_str(t.shape()));
  const int A = t.dim(0), B = t.dim(1), C = t.dim(2);
  std::vector<double> v(static_cast<std::size_t>(A) * B, 0.0);
  const auto& d = t.data();
  for (int i = 0; i < A; ++i)
    for (int j = 0; j < B; ++j) {
      double s = 0.0;
      const std::size_t base = (static_cast<std::size_t>(i) * B + j) * C;
      for (int k = 0; k < C; ++k) s += d[base + k];
      v[static_cast<std::size_t>(i) * B + j] = s / C;
    }
  return make_op("mean_last", {A, B}, std::move(v), {t}, [A, B, C](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    double inv = 1.0 / C;
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < B; ++j) {
        const double gv = self.grad[static_cast<std::size_t>(i) * B + j] * inv;
        const std::size_t base = (static_cast<std::size_t>(i) * B + j) * C;
        for (int k = 0; k < C; ++k) g[base + k] += gv;
      }
  });
}

// ============================================================
// Matrix ops (Eigen-backed)
// ============================================================

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapRowMat = Eigen::Map<const RowMat>;
using MapRowMat = Eigen::Map<RowMat>;

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m) * n);
  {
    CMapRowMat A(a.data().data(), m, k), B(b.data().data(), k, n);
    MapRowMat C(v.data(), m, n);
    C.noalias() = A * B;
  }
  return make_op("matmul", {m, n}, std::move(v), {a, b}, [m, k, n](detail::Node& self) {
    CMapRowMat G(self.grad.data(), m, n);
    if (detail::wants_grad(self, 0)) {
      CMapRowMat B(self.parents[1]->val.data(), k, n);
      MapRowMat GA(self.parents[0]->grad.data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (detail::wants_grad(self, 1)) {
      CMapRowMat A(self.parents[0]->val.data(), m, k);
      MapRowMat GB(self.parents[1]->grad.data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw TensorError("transpose: expects 2-D");
  const int r = a.dim(0), c = a.dim(1);
  std::vector<double> v(a.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      v[static_cast<std::size_t>(j) * r + i] = a.at2(i, j);
  return make_op("transpose", {c, r}, std::move(v), {a}, [r, c](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        g[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j) * r + i];
  });
}

// ============================================================
// Shape and indexing ops
// ============================================================

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw TensorError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> v = a.data();
  return make_op("reshape", std::move(shape), std::move(v), {a}, [](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
  if (a.ndim() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1) {
    throw TensorError("slice_rows: bad range");
  }
  const int c = a.dim(1);
  std::vector<double> v(static_cast<std::size_t>(r1 - r0) * c);
  std::copy(a.data().begin() + static_cast<std::size_t>(r0) * c,
            a.data().begin() + static_cast<std::size_t>(r1) * c, v.begin());
  return make_op("slice_rows", {r1 - r0, c}, std::move(v), {a}, [r0, c](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    const std::size_t off = static_cast<std::size_t>(r0) * c;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
  if (a.ndim() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1) {
    throw TensorError("slice_cols: bad range");
  }
  const int r = a.dim(0), c = a.dim(1), w = c1 - c0;
  std::vector<double> v(static_cast<std::size_t>(r) * w);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j)
      v[static_cast<std::size_t>(i) * w + j] = a.at2(i, c0 + j);
  return make_op("slice_cols", {r, w}, std::move(v), {a}, [r, c, c0, w](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j)
        g[static_cast<std::size_t>(i) * c + c0 + j] +=
            self.grad[static_cast<std::size_t>(i) * w + j];
  });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat_cols: empty input");
  const int r = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != r) throw TensorError("concat_cols: row mismatch");
    total += p.dim(1);
  }
  std::vector<double> v(static_cast<std::size_t>(r) * total);
  int off = 0;
  for (const auto& p : parts) {
    const int c = p.dim(1);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        v[static_cast<std::size_t>(i) * total + off + j] = p.at2(i, j);
    off += c;
  }
  std::vector<int> widths;
  for (const auto& p : parts) widths.push_back(p.dim(1));
  return make_op("concat_cols", {r, total}, std::move(v), parts,
                 [r, total, widths](detail::Node& self) {
                   int off2 = 0;
                   for (std::size_t p = 0; p < widths.size(); ++p) {
                     const int c = widths[p];
                     if (detail::wants_grad(self, p)) {
                       auto& g = self.parents[p]->grad;
                       for (int i = 0; i < r; ++i)
                         for (int j = 0; j < c; ++j)
                           g[static_cast<std::size_t>(i) * c + j] +=
                               self.grad[static_cast<std::size_t>(i) * total + off2 + j];
                     }
                     off2 += c;
                   }
                 });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat_rows: empty input");
  const int c = parts[0].dim(1);
  int total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != c) throw TensorError("concat_rows: col mismatch");
    total += p.dim(0);
  }
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(total) * c);
  for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  std::vector<int> heights;
  for (const auto& p : parts) heights.push_back(p.dim(0));
  return make_op("concat_rows", {total, c}, std::move(v), parts,
                 [c, heights](detail::Node& self) {
                   std::size_t off = 0;
                   for (std::size_t p = 0; p < heights.size(); ++p) {
                     const std::size_t len = static_cast<std::size_t>(heights[p]) * c;
                     if (detail::wants_grad(self, p)) {
                       auto& g = self.parents[p]->grad;
                       for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
                     }
                     off += len;
                   }
                 });
}

// Rows of u indexed by idx; duplicate indices accumulate gradient.
inline Tensor gather_rows(const Tensor& u, const std::vector<int>& idx) {
  if (u.ndim() != 2) throw TensorError("gather_rows: expects 2-D");
  const int c = u.dim(1), n = u.dim(0);
  std::vector<double> v(idx.size() * static_cast<std::size_t>(c));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= n) throw TensorError("gather_rows: index out of range");
    std::copy(u.data().begin() + static_cast<std::size_t>(idx[r]) * c,
              u.data().begin() + static_cast<std::size_t>(idx[r] + 1) * c,
              v.begin() + static_cast<std::size_t>(r) * c);
  }
  return make_op("gather_rows", {static_cast<int>(idx.size()), c}, std::move(v), {u},
                 [idx, c](detail::Node& self) {
                   if (!detail::wants_grad(self, 0)) return;
                   auto& g = self.parents[0]->grad;
                   for (std::size_t r = 0; r < idx.size(); ++r)
                     for (int j = 0; j < c; ++j)
                       g[static_cast<std::size_t>(idx[r]) * c + j] +=
                           self.grad[r * static_cast<std::size_t>(c) + j];
                 });
}

// Functional row substitution: rows listed in idx come from r (one row per
// index, in order), all others from a. Indices must be unique.
inline Tensor replace_rows(const Tensor& a, const std::vector<int>& idx, const Tensor& r) {
  if (a.ndim() != 2 || r.ndim() != 2 || a.dim(1) != r.dim(1) ||
      static_cast<std::size_t>(r.dim(0)) != idx.size()) {
    throw TensorError("replace_rows: shape mismatch");
  }
  std::unordered_set<int> seen;
  for (int i : idx) {
    if (i < 0 || i >= a.dim(0)) throw TensorError("replace_rows: index out of range");
    if (!seen.insert(i).second) throw TensorError("replace_rows: duplicate index");
  }
  const int c = a.dim(1);
  std::vector<double> v = a.data();
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy(r.data().begin() + static_cast<std::size_t>(k) * c,
              r.data().begin() + static_cast<std::size_t>(k + 1) * c,
              v.begin() + static_cast<std::size_t>(idx[k]) * c);
  return make_op("replace_rows", a.shape(), std::move(v), {a, r},
                 [idx, c](detail::Node& self) {
                   std::unordered_set<int> replaced(idx.begin(), idx.end());
                   if (detail::wants_grad(self, 0)) {
                     auto& g = self.parents[0]->grad;
                     const int rows = self.shape[0];
                     for (int i = 0; i < rows; ++i) {
                       if (replaced.count(i)) continue;
                       for (int j = 0; j < c; ++j)
                         g[static_cast<std::size_t>(i) * c + j] +=
                             self.grad[static_cast<std::size_t>(i) * c + j];
                     }
                   }
                   if (detail::wants_grad(self, 1)) {
                     auto& g = self.parents[1]->grad;
                     for (std::size_t k = 0; k < idx.size(); ++k)
                       for (int j = 0; j < c; ++j)
                         g[k * static_cast<std::size_t>(c) + j] +=
                             self.grad[static_cast<std::size_t>(idx[k]) * c + j];
                   }
                 });
}

// [d] or [1,d] -> [n,d]
inline Tensor repeat_row(const Tensor& v, int n) {
  const int d = (v.ndim() == 1) ? v.dim(0) : v.dim(1);
  if (v.ndim() == 2 && v.dim(0) != 1) throw TensorError("repeat_row: expects a single row");
  std::vector<double> out(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    std::copy(v.data().begin(), v.data().end(), out.begin() + static_cast<std::size_t>(i) * d);
  return make_op("repeat_row", {n, d}, std::move(out), {v}, [n, d](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i) * d + j];
  });
}

// ============================================================
// Scalar-tensor broadcasts (s has shape [1])
// ============================================================

inline Tensor sub_bcast(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw TensorError("sub_bcast: second operand must be scalar");
  std::vector<double> v(x.size());
  const double sv = s.at(0);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.at(i) - sv;
  return make_op("sub_bcast", x.shape(), std::move(v), {x, s}, [](detail::Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      double acc = 0.0;
      for (double gv : self.grad) acc += gv;
      self.parents[1]->grad[0] -= acc;
    }
  });
}

inline Tensor mul_bcast(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw TensorError("mul_bcast: second operand must be scalar");
  std::vector<double> v(x.size());
  const double sv = s.at(0);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.at(i) * sv;
  return make_op("mul_bcast", x.shape(), std::move(v), {x, s}, [](detail::Node& self) {
    const auto& xv = self.parents[0]->val;
    const double sv2 = self.parents[1]->val[0];
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sv2;
    }
    if (detail::wants_grad(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xv[i];
      self.parents[1]->grad[0] += acc;
    }
  });
}

// ============================================================
// Broadcast helpers over 2-D operands
// ============================================================

inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (x.ndim() != 2 || b.size() != static_cast<std::size_t>(x.dim(1))) {
    throw TensorError("add_rowvec: shape mismatch");
  }
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      v[static_cast<std::size_t>(i) * c + j] = x.at2(i, j) + b.at(static_cast<std::size_t>(j));
  return make_op("add_rowvec", x.shape(), std::move(v), {x, b}, [r, c](detail::Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          g[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i) * c + j];
    }
  });
}

// x[i,j] - s[i]
inline Tensor sub_colvec(const Tensor& x, const Tensor& s) {
  if (x.ndim() != 2 || s.size() != static_cast<std::size_t>(x.dim(0))) {
    throw TensorError("sub_colvec: shape mismatch");
  }
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      v[static_cast<std::size_t>(i) * c + j] = x.at2(i, j) - s.at(static_cast<std::size_t>(i));
  return make_op("sub_colvec", x.shape(), std::move(v), {x, s}, [r, c](detail::Node& self) {
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad;
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) acc += self.grad[static_cast<std::size_t>(i) * c + j];
        g[static_cast<std::size_t>(i)] -= acc;
      }
    }
  });
}

// x[i,j] * s[i]
inline Tensor mul_colvec(const Tensor& x, const Tensor& s) {
  if (x.ndim() != 2 || s.size() != static_cast<std::size_t>(x.dim(0))) {
    throw TensorError("mul_colvec: shape mismatch");
  }
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      v[static_cast<std::size_t>(i) * c + j] = x.at2(i, j) * s.at(static_cast<std::size_t>(i));
  return make_op("mul_colvec", x.shape(), std::move(v), {x, s}, [r, c](detail::Node& self) {
    const auto& xv = self.parents[0]->val;
    const auto& sv = self.parents[1]->val;
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          g[static_cast<std::size_t>(i) * c + j] +=
              self.grad[static_cast<std::size_t>(i) * c + j] * sv[static_cast<std::size_t>(i)];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad;
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j)
          acc += self.grad[static_cast<std::size_t>(i) * c + j] *
                 xv[static_cast<std::size_t>(i) * c + j];
        g[static_cast<std::size_t>(i)] += acc;
      }
    }
  });
}

// x[i,j] / s[i]
inline Tensor div_colvec(const Tensor& x, const Tensor& s) {
  if (x.ndim() != 2 || s.size() != static_cast<std::size_t>(x.dim(0))) {
    throw TensorError("div_colvec: shape mismatch");
  }
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      v[static_cast<std::size_t>(i) * c + j] = x.at2(i, j) / s.at(static_cast<std::size_t>(i));
  return make_op("div_colvec", x.shape(), std::move(v), {x, s}, [r, c](detail::Node& self) {
    const auto& sv = self.parents[1]->val;
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          g[static_cast<std::size_t>(i) * c + j] +=
              self.grad[static_cast<std::size_t>(i) * c + j] / sv[static_cast<std::size_t>(i)];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad;
      for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j)
          acc -= self.grad[static_cast<std::size_t>(i) * c + j] * self.val[static_cast<std::size_t>(i) * c + j];
        // d/ds (x/s) = -(x/s)/s, using the cached output.
        g[static_cast<std::size_t>(i)] += acc / sv[static_cast<std::size_t>(i)];
      }
    }
  });
}

// ============================================================
// Softmax over rows (numerically stabilized)
// ============================================================

inline Tensor softmax_rows(const Tensor& x) {
  if (x.ndim() != 2) throw TensorError("softmax_rows: expects 2-D");
  const int r = x.dim(0), c = x.dim(1);
  std::vector<double> v(x.size());
  for (int i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max(mx, x.at2(i, j));
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      double e = std::exp(x.at2(i, j) - mx);
      v[static_cast<std::size_t>(i) * c + j] = e;
      z += e;
    }
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(i) * c + j] /= z;
  }
  return make_op("softmax_rows", x.shape(), std::move(v), {x}, [r, c](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (int i = 0; i < r; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * c;
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += self.grad[base + j] * self.val[base + j];
      for (int j = 0; j < c; ++j)
        g[base + j] += self.val[base + j] * (self.grad[base + j] - dot);
    }
  });
}

// 1-D convenience wrapper.
inline Tensor softmax(const Tensor& x) {
  if (x.ndim() == 1) {
    Tensor y = softmax_rows(reshape(x, {1, x.dim(0)}));
    return reshape(y, {x.dim(0)});
  }
  return softmax_rows(x);
}

// ============================================================
// Ragged-neighborhood helpers for graph attention.
// T is [n, k, d]; S is [n, k]. Rows with weight zero drop out of the sum.
// ============================================================

inline Tensor scale_mid(const Tensor& t, const Tensor& s) {
  if (t.ndim() != 3 || s.ndim() != 2 || t.dim(0) != s.dim(0) || t.dim(1) != s.dim(1)) {
    throw TensorError("scale_mid: shape mismatch");
  }
  const int n = t.dim(0), k = t.dim(1), d = t.dim(2);
  std::vector<double> v(t.size());
  const auto& tv = t.data();
  const auto& sv = s.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      const double w = sv[static_cast<std::size_t>(i) * k + j];
      const std::size_t base = (static_cast<std::size_t>(i) * k + j) * d;
      for (int e = 0; e < d; ++e) v[base + e] = tv[base + e] * w;
    }
  return make_op("scale_mid", t.shape(), std::move(v), {t, s}, [n, k, d](detail::Node& self) {
    const auto& tv = self.parents[0]->val;
    const auto& sv = self.parents[1]->val;
    if (detail::wants_grad(self, 0)) {
      auto& g = self.parents[0]->grad;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
          const double w = sv[static_cast<std::size_t>(i) * k + j];
          const std::size_t base = (static_cast<std::size_t>(i) * k + j) * d;
          for (int e = 0; e < d; ++e) g[base + e] += self.grad[base + e] * w;
        }
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = self.parents[1]->grad;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
          const std::size_t base = (static_cast<std::size_t>(i) * k + j) * d;
          double acc = 0.0;
          for (int e = 0; e < d; ++e) acc += self.grad[base + e] * tv[base + e];
          g[static_cast<std::size_t>(i) * k + j] += acc;
        }
    }
  });
}

// [n,k,d] -> [n,d], summing over the middle axis.
inline Tensor sum_mid(const Tensor& t) {
  if (t.ndim() != 3) throw TensorError("sum_mid: expects 3-D");
  const int n = t.dim(0), k = t.dim(1), d = t.dim(2);
  std::vector<double> v(static_cast<std::size_t>(n) * d, 0.0);
  const auto& tv = t.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      const std::size_t base = (static_cast<std::size_t>(i) * k + j) * d;
      for (int e = 0; e < d; ++e) v[static_cast<std::size_t>(i) * d + e] += tv[base + e];
    }
  return make_op("sum_mid", {n, d}, std::move(v), {t}, [n, k, d](detail::Node& self) {
    if (!detail::wants_grad(self, 0)) return;
    auto& g = self.parents[0]->grad;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const std::size_t base = (static_cast<std::size_t>(i) * k + j) * d;
        for (int e = 0; e < d; ++e) g[base + e] += self.grad[static_cast<std::size_t>(i) * d + e];
      }
  });
}

// ============================================================
// 2-D convolution, NHWC layout, kernel [kh,kw,Cin,Cout]
// ============================================================

namespace detail {

struct ConvGeom {
  int N, H, W, C, kh, kw, Co, stride, pad, OH, OW;
};

// Patch matrix: rows indexed (n, oh, ow), columns (dy, dx, c).
inline void im2col(const double* x, const ConvGeom& g, double* out) {
  const int cols = g.kh * g.kw * g.C;
  for (int n = 0; n < g.N; ++n)
    for (int oh = 0; oh < g.OH; ++oh)
      for (int ow = 0; ow < g.OW; ++ow) {
        double* row = out + ((static_cast<std::size_t>(n) * g.OH + oh) * g.OW + ow) * cols;
        for (int dy = 0; dy < g.kh; ++dy) {
          const int iy = oh * g.stride + dy - g.pad;
          for (int dx = 0; dx < g.kw; ++dx) {
            const int ix = ow * g.stride + dx - g.pad;
            double* dst = row + (dy * g.kw + dx) * g.C;
            if (iy < 0 || iy >= g.H || ix < 0 || ix >= g.W) {
              std::fill(dst, dst + g.C, 0.0);
            } else {
              const double* src = x + ((static_cast<std::size_t>(n) * g.H + iy) * g.W + ix) * g.C;
              std::copy(src, src + g.C, dst);
            }
          }
        }
      }
}

// Adjoint of im2col: scatter-add patch rows back onto the image grid.
inline void col2im_acc(const double* cols_mat, const ConvGeom& g, double* gx) {
  const int cols = g.kh * g.kw * g.C;
  for (int n = 0; n < g.N; ++n)
    for (int oh = 0; oh < g.OH; ++oh)
      for (int ow = 0; ow < g.OW; ++ow) {
        const double* row = cols_mat + ((static_cast<std::size_t>(n) * g.OH + oh) * g.OW + ow) * cols;
        for (int dy = 0; dy < g.kh; ++dy) {
          const int iy = oh * g.stride + dy - g.pad;
          if (iy < 0 || iy >= g.H) continue;
          for (int dx = 0; dx < g.kw; ++dx) {
            const int ix = ow * g.stride + dx - g.pad;
            if (ix < 0 || ix >= g.W) continue;
            const double* src = row + (dy * g.kw + dx) * g.C;
            double* dst = gx + ((static_cast<std::size_t>(n) * g.H + iy) * g.W + ix) * g.C;
            for (int c = 0; c < g.C; ++c) dst[c] += src[c];
          }
        }
      }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad) {
  if (x.ndim() != 4 || k.ndim() != 4 || x.dim(3) != k.dim(2)) {
    throw TensorError("conv2d: expects x [N,H,W,C] and kernel [kh,kw,C,Co]");
  }
  detail::ConvGeom g;
  g.N = x.dim(0); g.H = x.dim(1); g.W = x.dim(2); g.C = x.dim(3);
  g.kh = k.dim(0); g.kw = k.dim(1); g.Co = k.dim(3);
  g.stride = stride; g.pad = pad;
  const int hn = g.H + 2 * pad - g.kh, wn = g.W + 2 * pad - g.kw;
  if (hn < 0 || wn < 0) {
    throw TensorError("conv2d: kernel larger than padded input, shape " + shape_str(x.shape()));
  }
  // Floor semantics: a trailing remainder leaves the last rows/cols uncovered.
  g.OH = hn / stride + 1;
  g.OW = wn / stride + 1;

  const int cols = g.kh * g.kw * g.C;
  const std::size_t rows = static_cast<std::size_t>(g.N) * g.OH * g.OW;
  std::vector<double> patches(rows * cols);
  detail::im2col(x.data().data(), g, patches.data());
  std::vector<double> v(rows * g.Co);
  {
    CMapRowMat P(patches.data(), static_cast<Eigen::Index>(rows), cols);
    CMapRowMat K(k.data().data(), cols, g.Co);
    MapRowMat Y(v.data(), static_cast<Eigen::Index>(rows), g.Co);
    Y.noalias() = P * K;
  }
  // Patch matrices are rebuilt in backward instead of cached; they are the
  // dominant memory cost of a training step.
  return make_op("conv2d", {g.N, g.OH, g.OW, g.Co}, std::move(v), {x, k},
                 [g, cols, rows](detail::Node& self) {
                   CMapRowMat G(self.grad.data(), static_cast<Eigen::Index>(rows), g.Co);
                   if (detail::wants_grad(self, 1)) {
                     std::vector<double> patches2(rows * cols);
                     detail::im2col(self.parents[0]->val.data(), g, patches2.data());
                     CMapRowMat P(patches2.data(), static_cast<Eigen::Index>(rows), cols);
                     MapRowMat GK(self.parents[1]->grad.data(), cols, g.Co);
                     GK.noalias() += P.transpose() * G;
                   }
                   if (detail::wants_grad(self, 0)) {
                     std::vector<double> gcols(rows * cols);
                     CMapRowMat K(self.parents[1]->val.data(), cols, g.Co);
                     MapRowMat GC(gcols.data(), static_cast<Eigen::Index>(rows), cols);
                     GC.noalias() = G * K.transpose();
                     detail::col2im_acc(gcols.data(), g, self.parents[0]->grad.data());
                   }
                 });
}

// Transposed convolution: the adjoint of conv2d's forward map. x is
// [N,H,W,Cin], kernel [kh,kw,Cin,Co], output [N, s(H-1)+kh-2p, ...].
inline Tensor conv2d_transpose(const Tensor& x, const Tensor& k, int stride, int pad) {
  if (x.ndim() != 4 || k.ndim() != 4 || x.dim(3) != k.dim(2)) {
    throw TensorError("conv2d_transpose: expects x [N,H,W,C] and kernel [kh,kw,C,Co]");
  }
  const int N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  const int kh = k.dim(0), kw = k.dim(1), Co = k.dim(3);
  const int OH = stride * (H - 1) + kh - 2 * pad;
  const int OW = stride * (W - 1) + kw - 2 * pad;
  if (OH <= 0 || OW <= 0) throw TensorError("conv2d_transpose: degenerate output");

  // Geometry mirror: conv2d applied to the *output* grid with this kernel
  // produces the input grid, so the shared im2col helpers run on OH/OW.
  detail::ConvGeom g;
  g.N = N; g.H = OH; g.W = OW; g.C = Co;
  g.kh = kh; g.kw = kw; g.Co = Ci;
  g.stride = stride; g.pad = pad; g.OH = H; g.OW = W;

  // K permuted to [Cin, kh*kw*Co] so P = X_mat * Kp gives per-cell patches.
  const int cols = kh * kw * Co;
  std::vector<double> kperm(static_cast<std::size_t>(Ci) * cols);
  for (int dy = 0; dy < kh; ++dy)
    for (int dx = 0; dx < kw; ++dx)
      for (int ci = 0; ci < Ci; ++ci)
        for (int co = 0; co < Co; ++co)
          kperm[static_cast<std::size_t>(ci) * cols + (dy * kw + dx) * Co + co] =
              k.at(((static_cast<std::size_t>(dy) * kw + dx) * Ci + ci) * Co + co);

  const std::size_t rows = static_cast<std::size_t>(N) * H * W;
  std::vector<double> pat(rows * cols);
  {
    CMapRowMat X(x.data().data(), static_cast<Eigen::Index>(rows), Ci);
    CMapRowMat Kp(kperm.data(), Ci, cols);
    MapRowMat P(pat.data(), static_cast<Eigen::Index>(rows), cols);
    P.noalias() = X * Kp;
  }
  std::vector<double> v(static_cast<std::size_t>(N) * OH * OW * Co, 0.0);
  detail::col2im_acc(pat.data(), g, v.data());

  return make_op(
      "conv2d_transpose", {N, OH, OW, Co}, std::move(v), {x, k},
      [g, N, H, W, Ci, kh, kw, Co, cols, rows](detail::Node& self) {
        // Patches of the output gradient, gathered on the input grid.
        std::vector<double> gpat(rows * cols);
        detail::im2col(self.grad.data(), g, gpat.data());
        CMapRowMat GP(gpat.data(), static_cast<Eigen::Index>(rows), cols);
        if (detail::wants_grad(self, 0)) {
          std::vector<double> kperm2(static_cast<std::size_t>(Ci) * cols);
          const auto& kv = self.parents[1]->val;
          for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx)
              for (int ci = 0; ci < Ci; ++ci)
                for (int co = 0; co < Co; ++co)
                  kperm2[static_cast<std::size_t>(ci) * cols + (dy * kw + dx) * Co + co] =
                      kv[((static_cast<std::size_t>(dy) * kw + dx) * Ci + ci) * Co + co];
          CMapRowMat Kp(kperm2.data(), Ci, cols);
          MapRowMat GX(self.parents[0]->grad.data(), static_cast<Eigen::Index>(rows), Ci);
          GX.noalias() += GP * Kp.transpose();
        }
        if (detail::wants_grad(self, 1)) {
          CMapRowMat X(self.parents[0]->val.data(), static_cast<Eigen::Index>(rows), Ci);
          std::vector<double> gkperm(static_cast<std::size_t>(Ci) * cols, 0.0);
          MapRowMat GKp(gkperm.data(), Ci, cols);
          GKp.noalias() = X.transpose() * GP;
          auto& gk = self.parents[1]->grad;
          for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx)
              for (int ci = 0; ci < Ci; ++ci)
                for (int co = 0; co < Co; ++co)
                  gk[((static_cast<std::size_t>(dy) * kw + dx) * Ci + ci) * Co + co] +=
                      gkperm[static_cast<std::size_t>(ci) * cols + (dy * kw + dx) * Co + co];
        }
      });
}

// [B,H,W,C] -> [B*C, H*W]: row b*C+c holds channel c of sample b. Lets
// per-channel image statistics become row reductions.
inline Tensor nhwc_to_bc_rows(const Tensor& x) {
  if (x.ndim() != 4) throw TensorError("nhwc_to_bc_rows: expects 4-D");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int hw = H * W;
  std::vector<double> v(x.size());
  const auto& d = x.data();
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < hw; ++p)
      for (int c = 0; c < C; ++c)
        v[(static_cast<std::size_t>(b) * C + c) * hw + p] =
            d[(static_cast<std::size_t>(b) * hw + p) * C + c];
  return make_op("nhwc_to_bc_rows", {B * C, hw}, std::move(v), {x},
                 [B, hw, C](detail::Node& self) {
                   if (!detail::wants_grad(self, 0)) return;
                   auto& g = self.parents[0]->grad;
                   for (int b = 0; b < B; ++b)
                     for (int p = 0; p < hw; ++p)
                       for (int c = 0; c < C; ++c)
                         g[(static_cast<std::size_t>(b) * hw + p) * C + c] +=
                             self.grad[(static_cast<std::size_t>(b) * C + c) * hw + p];
                 });
}

// ============================================================
// Norms
// ============================================================

inline Tensor l2_norm(const Tensor& x) {
  Tensor sq = mul(x, x);
  return sqrt(sum(sq));
}

// Per-row L2 norms of a 2-D tensor -> [rows].
inline Tensor row_norms(const Tensor& x) {
  return sqrt(sum_axis(mul(x, x), 1));
}

// ============================================================
// Finite-difference oracle
// ============================================================

struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
};

// Central differences against the analytic gradient of f at x. f must be a
// pure function building a fresh graph per call and returning a scalar.
inline FdReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& x, double step = 1e-5) {
  Tensor leaf = Tensor::leaf(x.shape(), x.data(), /*requires_grad=*/true);
  Tensor y = f(leaf);
  if (y.size() != 1) throw TensorError("finite_difference_check: f must return a scalar");
  y.backward();
  const std::vector<double> analytic = leaf.grad();

  FdReport rep;
  std::vector<double> base = x.data();
  NoGradGuard ng;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> hi = base, lo = base;
    hi[i] += step;
    lo[i] -= step;
    const double fp = f(Tensor::leaf(x.shape(), hi)).item();
    const double fm = f(Tensor::leaf(x.shape(), lo)).item();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NonFiniteError("finite_difference_check: non-finite evaluation");
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double abs_err = std::abs(analytic[i] - numeric);
    const double rel = abs_err / std::max(1e-8, std::abs(numeric));
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
    }
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
  }
  return rep;
}

}  // namespace stad
