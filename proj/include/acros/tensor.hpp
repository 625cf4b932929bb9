#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "acros/rng.hpp"

namespace acros {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace autograd {
inline thread_local bool g_tape_enabled = true;

// Disables tape recording in scope (evaluation-time forwards).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_tape_enabled) { g_tape_enabled = false; }
  ~NoGradGuard() { g_tape_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
}  // namespace autograd

// Dense tensor with an optional recorded gradient tape. Values are stored in
// Real (float in production, double in the gradient-check instantiation);
// every reduction accumulates in double regardless of Real.
//
// A tensor is a handle onto a shared node. Leaves created with
// requires_grad=true collect gradients into a persistent .grad buffer;
// intermediate nodes carry a backward closure and die with the graph.
template <class Real>
class TensorT {
  struct Node {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;
    bool requires_grad = false;  // trainable leaf
    bool on_tape = false;        // participates in some recorded computation
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<Real>& grad_buf() {
      if (grad.empty()) grad.assign(value.size(), Real(0));
      return grad;
    }
  };

 public:
  TensorT() = default;

  static TensorT zeros(Shape shape) { return filled(std::move(shape), Real(0)); }

  static TensorT filled(Shape shape, Real v) {
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value.assign(shape_numel(t.n_->shape), v);
    return t;
  }

  static TensorT from(Shape shape, std::vector<Real> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("tensor: data length does not match shape " + shape_str(shape));
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    return t;
  }

  static TensorT randn(Shape shape, RngState& rng, double stddev) {
    TensorT t = zeros(std::move(shape));
    for (auto& v : t.n_->value) v = static_cast<Real>(rng.next_normal() * stddev);
    return t;
  }

  static TensorT param(Shape shape, RngState& rng, double stddev) {
    TensorT t = randn(std::move(shape), rng, stddev);
    t.n_->requires_grad = true;
    return t;
  }

  static TensorT param_zeros(Shape shape) {
    TensorT t = zeros(std::move(shape));
    t.n_->requires_grad = true;
    return t;
  }

  static TensorT param_from(Shape shape, std::vector<Real> data) {
    TensorT t = from(std::move(shape), std::move(data));
    t.n_->requires_grad = true;
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }

  std::span<const Real> data() const { return n_->value; }
  // Leaf mutation only; editing an interior node would desynchronize the tape.
  std::span<Real> mutable_data() {
    if (n_->backward) throw std::logic_error("tensor: cannot mutate a non-leaf value");
    return n_->value;
  }

  Real item() const {
    if (numel() != 1) throw std::logic_error("tensor: item() on non-scalar " + shape_str(shape()));
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) {
    if (n_->backward) throw std::logic_error("tensor: requires_grad is a leaf property");
    n_->requires_grad = b;
  }
  bool tracked() const { return n_->requires_grad || n_->on_tape; }

  std::span<const Real> grad() const {
    if (n_->grad.empty()) throw std::logic_error("tensor: gradient not populated");
    return n_->grad;
  }
  bool has_grad() const { return !n_->grad.empty(); }
  void zero_grad() { n_->grad.clear(); }

  bool all_finite() const {
    for (Real v : n_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Value copy detached from any tape.
  TensorT detach() const {
    TensorT t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = n_->shape;
    t.n_->value = n_->value;
    return t;
  }

  // Reverse-mode sweep from a scalar. Children run before parents, every
  // node's closure runs exactly once, gradients for reachable leaves
  // accumulate into their persistent buffers.
  void backward() {
    if (numel() != 1) throw std::logic_error("tensor: backward() requires a scalar loss");
    if (!tracked()) throw std::logic_error("tensor: loss is not on a recorded graph");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx].get();
        ++idx;
        if ((p->requires_grad || p->on_tape) && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->grad_buf()[0] = Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward && !node->grad.empty()) node->backward(*node);
    }
  }

  // --- op construction helpers (used by the free functions below) ---

  static TensorT make_op(Shape shape, std::vector<Real> value,
                         std::vector<TensorT> inputs,
                         std::function<void(Node&)> backward) {
    TensorT t = from(std::move(shape), std::move(value));
    bool tracked = false;
    if (autograd::g_tape_enabled)
      for (const auto& in : inputs) tracked = tracked || in.tracked();
    if (tracked) {
      t.n_->on_tape = true;
      for (auto& in : inputs) t.n_->parents.push_back(in.n_);
      t.n_->backward = std::move(backward);
    }
    return t;
  }

  using NodeType = Node;
  Node* node() const { return n_.get(); }

 private:
  std::shared_ptr<Node> n_;
};

namespace tensorops {

template <class Real>
using Node = typename TensorT<Real>::NodeType;

// Upstream gradient of the node itself.
template <class Real>
std::span<const Real> up(Node<Real>& n) { return n.grad; }

// Gradient buffer of parent i (allocated on demand).
template <class Real>
std::vector<Real>* pgrad(Node<Real>& n, size_t i) {
  auto& p = *n.parents[i];
  if (!p.requires_grad && !p.on_tape) return nullptr;
  return &p.grad_buf();
}

template <class Real>
std::span<const Real> pval(Node<Real>& n, size_t i) { return n.parents[i]->value; }

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < a.numel(); ++i) out[static_cast<size_t>(i)] += b.data()[static_cast<size_t>(i)];
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a, b}, [](Node<Real>& n) {
    auto g = up(n);
    for (size_t pi : {size_t(0), size_t(1)}) {
      if (auto* pg = pgrad(n, pi))
        for (size_t i = 0; i < g.size(); ++i) (*pg)[i] += g[i];
    }
  });
}

template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < a.numel(); ++i) out[static_cast<size_t>(i)] -= b.data()[static_cast<size_t>(i)];
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a, b}, [](Node<Real>& n) {
    auto g = up(n);
    if (auto* pg = pgrad(n, 0))
      for (size_t i = 0; i < g.size(); ++i) (*pg)[i] += g[i];
    if (auto* pg = pgrad(n, 1))
      for (size_t i = 0; i < g.size(); ++i) (*pg)[i] -= g[i];
  });
}

template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<Real> out(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i)
    out[static_cast<size_t>(i)] = a.data()[static_cast<size_t>(i)] * b.data()[static_cast<size_t>(i)];
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a, b}, [](Node<Real>& n) {
    auto g = up(n);
    auto av = pval(n, 0), bv = pval(n, 1);
    if (auto* pg = pgrad(n, 0))
      for (size_t i = 0; i < g.size(); ++i) (*pg)[i] += g[i] * bv[i];
    if (auto* pg = pgrad(n, 1))
      for (size_t i = 0; i < g.size(); ++i) (*pg)[i] += g[i] * av[i];
  });
}

template <class Real>
TensorT<Real> scale(const TensorT<Real>& a, double c) {
  std::vector<Real> out(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i)
    out[static_cast<size_t>(i)] = static_cast<Real>(a.data()[static_cast<size_t>(i)] * c);
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a}, [c](Node<Real>& n) {
    auto g = up(n);
    if (auto* pg = pgrad(n, 0))
      for (size_t i = 0; i < g.size(); ++i) (*pg)[i] += static_cast<Real>(g[i] * c);
  });
}

// c = s * a with s a tracked 1-element tensor (the residual gate).
template <class Real>
TensorT<Real> mul_scalar(const TensorT<Real>& a, const TensorT<Real>& s) {
  check(s.numel() == 1, "mul_scalar: scale must be a 1-element tensor");
  const Real sv = s.data()[0];
  std::vector<Real> out(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) out[static_cast<size_t>(i)] = a.data()[static_cast<size_t>(i)] * sv;
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a, s}, [](Node<Real>& n) {
    auto g = up(n);
    auto av = pval(n, 0);
    const Real sv2 = pval(n, 1)[0];
    if (auto* pg = pgrad(n, 0))
      for (size_t i = 0; i < g.size(); ++i) (*pg)[i] += g[i] * sv2;
    if (auto* pg = pgrad(n, 1)) {
      double acc = 0.0;
      for (size_t i = 0; i < g.size(); ++i) acc += static_cast<double>(g[i]) * static_cast<double>(av[i]);
      (*pg)[0] += static_cast<Real>(acc);
    }
  });
}

template <class Real>
TensorT<Real> gelu(const TensorT<Real>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  std::vector<Real> out(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = static_cast<double>(a.data()[static_cast<size_t>(i)]);
    out[static_cast<size_t>(i)] = static_cast<Real>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a}, [=](Node<Real>& n) {
    auto g = up(n);
    auto av = pval(n, 0);
    if (auto* pg = pgrad(n, 0))
      for (size_t i = 0; i < g.size(); ++i) {
        double x = static_cast<double>(av[i]);
        double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        (*pg)[i] += static_cast<Real>(static_cast<double>(g[i]) * d);
      }
  });
}

template <class Real>
TensorT<Real> sqrt_op(const TensorT<Real>& a) {
  std::vector<Real> out(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i)
    out[static_cast<size_t>(i)] = static_cast<Real>(std::sqrt(static_cast<double>(a.data()[static_cast<size_t>(i)])));
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a}, [](Node<Real>& n) {
    auto g = up(n);
    auto yv = n.value;
    if (auto* pg = pgrad(n, 0))
      for (size_t i = 0; i < g.size(); ++i) {
        double y = std::max(static_cast<double>(yv[i]), 1e-12);
        (*pg)[i] += static_cast<Real>(static_cast<double>(g[i]) / (2.0 * y));
      }
  });
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> reshape(const TensorT<Real>& a, Shape shape) {
  check(shape_numel(shape) == a.numel(), "reshape: element count mismatch");
  std::vector<Real> out(a.data().begin(), a.data().end());
  return TensorT<Real>::make_op(std::move(shape), std::move(out), {a}, [](Node<Real>& n) {
    auto g = up(n);
    if (auto* pg = pgrad(n, 0))
      for (size_t i = 0; i < g.size(); ++i) (*pg)[i] += g[i];
  });
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

template <class Real>
TensorT<Real> permute(const TensorT<Real>& a, std::vector<int> perm) {
  const auto& s = a.shape();
  check(perm.size() == s.size(), "permute: rank mismatch");
  Shape out_shape(s.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = s[static_cast<size_t>(perm[i])];
  auto in_strides = row_major_strides(s);
  auto out_strides = row_major_strides(out_shape);
  const int64_t n = a.numel();
  const int r = a.rank();
  std::vector<Real> out(static_cast<size_t>(n));
  // out[idx] = in[perm(idx)]
  std::vector<int64_t> src_stride_for_out(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    src_stride_for_out[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      int64_t q = rem / out_strides[static_cast<size_t>(i)];
      rem -= q * out_strides[static_cast<size_t>(i)];
      src += q * src_stride_for_out[static_cast<size_t>(i)];
    }
    out[static_cast<size_t>(o)] = a.data()[static_cast<size_t>(src)];
  }
  return TensorT<Real>::make_op(std::move(out_shape), std::move(out), {a},
                                [out_strides, src_stride_for_out, r](Node<Real>& n) {
    auto g = up(n);
    if (auto* pg = pgrad(n, 0)) {
      const int64_t cnt = static_cast<int64_t>(g.size());
      for (int64_t o = 0; o < cnt; ++o) {
        int64_t rem = o, src = 0;
        for (int i = 0; i < r; ++i) {
          int64_t q = rem / out_strides[static_cast<size_t>(i)];
          rem -= q * out_strides[static_cast<size_t>(i)];
          src += q * src_stride_for_out[static_cast<size_t>(i)];
        }
        (*pg)[static_cast<size_t>(src)] += g[static_cast<size_t>(o)];
      }
    }
  });
}

// Last-axis slice: a[..., off:off+len].
template <class Real>
TensorT<Real> slice_last(const TensorT<Real>& a, int off, int len) {
  const auto& s = a.shape();
  const int last = s.back();
  check(off >= 0 && len > 0 && off + len <= last, "slice_last: range out of bounds");
  const int64_t rows = a.numel() / last;
  Shape out_shape = s;
  out_shape.back() = len;
  std::vector<Real> out(static_cast<size_t>(rows * len));
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < len; ++j)
      out[static_cast<size_t>(r * len + j)] = a.data()[static_cast<size_t>(r * last + off + j)];
  return TensorT<Real>::make_op(std::move(out_shape), std::move(out), {a}, [rows, len, last, off](Node<Real>& n) {
    auto g = up(n);
    if (auto* pg = pgrad(n, 0))
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < len; ++j)
          (*pg)[static_cast<size_t>(r * last + off + j)] += g[static_cast<size_t>(r * len + j)];
  });
}

// First-axis slice of a rank-2 tensor: a[off:off+len, :].
template <class Real>
TensorT<Real> slice_rows(const TensorT<Real>& a, int off, int len) {
  check(a.rank() == 2, "slice_rows: rank-2 input required");
  const int cols = a.dim(1);
  check(off >= 0 && len > 0 && off + len <= a.dim(0), "slice_rows: range out of bounds");
  std::vector<Real> out(static_cast<size_t>(len) * static_cast<size_t>(cols));
  std::copy(a.data().begin() + static_cast<size_t>(off) * cols,
            a.data().begin() + static_cast<size_t>(off + len) * cols, out.begin());
  return TensorT<Real>::make_op({len, cols}, std::move(out), {a}, [off, len, cols](Node<Real>& n) {
    auto g = up(n);
    if (auto* pg = pgrad(n, 0))
      for (int64_t i = 0; i < static_cast<int64_t>(len) * cols; ++i)
        (*pg)[static_cast<size_t>(off) * cols + static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
  });
}

// Broadcast-add b over the leading axis of a (a: [B, rest...], b: [rest...]).
template <class Real>
TensorT<Real> add_broadcast0(const TensorT<Real>& a, const TensorT<Real>& b) {
  check(a.rank() == b.rank() + 1, "add_broadcast0: rank mismatch");
  for (int i = 1; i < a.rank(); ++i) check(a.dim(i) == b.dim(i - 1), "add_broadcast0: trailing shape mismatch");
  const int64_t inner = b.numel();
  const int64_t lead = a.numel() / inner;
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t i = 0; i < inner; ++i)
      out[static_cast<size_t>(l * inner + i)] += b.data()[static_cast<size_t>(i)];
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a, b}, [lead, inner](Node<Real>& n) {
    auto g = up(n);
    if (auto* pg = pgrad(n, 0))
      for (size_t i = 0; i < g.size(); ++i) (*pg)[i] += g[i];
    if (auto* pg = pgrad(n, 1))
      for (int64_t l = 0; l < lead; ++l)
        for (int64_t i = 0; i < inner; ++i)
          (*pg)[static_cast<size_t>(i)] += g[static_cast<size_t>(l * inner + i)];
  });
}

// a: [..., n], bias: [n].
template <class Real>
TensorT<Real> add_bias(const TensorT<Real>& a, const TensorT<Real>& b) {
  check(b.rank() == 1 && b.dim(0) == a.shape().back(), "add_bias: bias length mismatch");
  const int n = b.dim(0);
  const int64_t rows = a.numel() / n;
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(r * n + j)] += b.data()[static_cast<size_t>(j)];
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a, b}, [rows, n](Node<Real>& n_) {
    auto g = up(n_);
    if (auto* pg = pgrad(n_, 0))
      for (size_t i = 0; i < g.size(); ++i) (*pg)[i] += g[i];
    if (auto* pg = pgrad(n_, 1))
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) (*pg)[static_cast<size_t>(j)] += g[static_cast<size_t>(r * n + j)];
  });
}

// w: [..., k] -> [..., k, r], each entry repeated r times along a new axis.
template <class Real>
TensorT<Real> repeat_last(const TensorT<Real>& a, int r) {
  check(r > 0, "repeat_last: nonpositive repeat");
  Shape out_shape = a.shape();
  out_shape.push_back(r);
  const int64_t n = a.numel();
  std::vector<Real> out(static_cast<size_t>(n * r));
  for (int64_t i = 0; i < n; ++i)
    for (int j = 0; j < r; ++j) out[static_cast<size_t>(i * r + j)] = a.data()[static_cast<size_t>(i)];
  return TensorT<Real>::make_op(std::move(out_shape), std::move(out), {a}, [n, r](Node<Real>& nd) {
    auto g = up(nd);
    if (auto* pg = pgrad(nd, 0))
      for (int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < r; ++j) acc += static_cast<double>(g[static_cast<size_t>(i * r + j)]);
        (*pg)[static_cast<size_t>(i)] += static_cast<Real>(acc);
      }
  });
}

// ---------------------------------------------------------------------------
// contractions
// ---------------------------------------------------------------------------

// Batched matmul: a [..., m, k] x b [..., k, n] with identical leading dims.
template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
  check(a.rank() >= 2 && b.rank() == a.rank(), "matmul: rank mismatch");
  for (int i = 0; i < a.rank() - 2; ++i) check(a.dim(i) == b.dim(i), "matmul: leading dims differ");
  const int m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  check(b.dim(b.rank() - 2) == k, "matmul: inner dims differ");
  const int n = b.dim(b.rank() - 1);
  const int64_t batch = a.numel() / (static_cast<int64_t>(m) * k);
  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 1] = n;
  std::vector<Real> out(static_cast<size_t>(batch) * m * n, Real(0));
  std::vector<double> rowacc(static_cast<size_t>(n));
  for (int64_t bt = 0; bt < batch; ++bt) {
    const Real* A = a.data().data() + bt * m * k;
    const Real* B = b.data().data() + bt * k * n;
    Real* C = out.data() + bt * m * n;
    for (int i = 0; i < m; ++i) {
      std::fill(rowacc.begin(), rowacc.end(), 0.0);
      for (int p = 0; p < k; ++p) {
        const double av = static_cast<double>(A[i * k + p]);
        const Real* Brow = B + p * n;
        for (int j = 0; j < n; ++j) rowacc[static_cast<size_t>(j)] += av * static_cast<double>(Brow[j]);
      }
      for (int j = 0; j < n; ++j) C[i * n + j] = static_cast<Real>(rowacc[static_cast<size_t>(j)]);
    }
  }
  return TensorT<Real>::make_op(std::move(out_shape), std::move(out), {a, b}, [batch, m, k, n](Node<Real>& nd) {
    auto g = up(nd);
    auto av = pval(nd, 0), bv = pval(nd, 1);
    auto* ga = pgrad(nd, 0);
    auto* gb = pgrad(nd, 1);
    std::vector<double> acc(static_cast<size_t>(std::max(k, n)));
    for (int64_t bt = 0; bt < batch; ++bt) {
      const Real* A = av.data() + bt * m * k;
      const Real* B = bv.data() + bt * k * n;
      const Real* G = g.data() + bt * m * n;
      if (ga) {
        Real* GA = ga->data() + bt * m * k;
        // dA = dC * B^T
        for (int i = 0; i < m; ++i) {
          std::fill(acc.begin(), acc.begin() + k, 0.0);
          for (int j = 0; j < n; ++j) {
            const double gv = static_cast<double>(G[i * n + j]);
            for (int p = 0; p < k; ++p) acc[static_cast<size_t>(p)] += gv * static_cast<double>(B[p * n + j]);
          }
          for (int p = 0; p < k; ++p) GA[i * k + p] += static_cast<Real>(acc[static_cast<size_t>(p)]);
        }
      }
      if (gb) {
        Real* GB = gb->data() + bt * k * n;
        // dB = A^T * dC
        for (int p = 0; p < k; ++p) {
          std::fill(acc.begin(), acc.begin() + n, 0.0);
          for (int i = 0; i < m; ++i) {
            const double avp = static_cast<double>(A[i * k + p]);
            for (int j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += avp * static_cast<double>(G[i * n + j]);
          }
          for (int j = 0; j < n; ++j) GB[p * n + j] += static_cast<Real>(acc[static_cast<size_t>(j)]);
        }
      }
    }
  });
}

// a [..., m, k] x w [n, k] -> [..., m, n]; w shared across the batch.
// Both operands are traversed row-contiguously (this is the linear-layer and
// tied-LM-head kernel).
template <class Real>
TensorT<Real> matmul_nt(const TensorT<Real>& a, const TensorT<Real>& w) {
  check(w.rank() == 2, "matmul_nt: weight must be rank-2");
  const int k = a.shape().back();
  check(w.dim(1) == k, "matmul_nt: inner dims differ");
  const int n = w.dim(0);
  const int64_t rows = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<Real> out(static_cast<size_t>(rows) * n);
  for (int64_t r = 0; r < rows; ++r) {
    const Real* A = a.data().data() + r * k;
    for (int j = 0; j < n; ++j) {
      const Real* W = w.data().data() + static_cast<int64_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += static_cast<double>(A[p]) * static_cast<double>(W[p]);
      out[static_cast<size_t>(r * n + j)] = static_cast<Real>(acc);
    }
  }
  return TensorT<Real>::make_op(std::move(out_shape), std::move(out), {a, w}, [rows, k, n](Node<Real>& nd) {
    auto g = up(nd);
    auto av = pval(nd, 0), wv = pval(nd, 1);
    auto* ga = pgrad(nd, 0);
    auto* gw = pgrad(nd, 1);
    std::vector<double> acc(static_cast<size_t>(k));
    for (int64_t r = 0; r < rows; ++r) {
      const Real* G = g.data() + r * n;
      const Real* A = av.data() + r * k;
      if (ga) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int j = 0; j < n; ++j) {
          const double gv = static_cast<double>(G[j]);
          if (gv == 0.0) continue;
          const Real* W = wv.data() + static_cast<int64_t>(j) * k;
          for (int p = 0; p < k; ++p) acc[static_cast<size_t>(p)] += gv * static_cast<double>(W[p]);
        }
        Real* GA = ga->data() + r * k;
        for (int p = 0; p < k; ++p) GA[p] += static_cast<Real>(acc[static_cast<size_t>(p)]);
      }
      if (gw) {
        for (int j = 0; j < n; ++j) {
          const double gv = static_cast<double>(G[j]);
          if (gv == 0.0) continue;
          Real* GW = gw->data() + static_cast<int64_t>(j) * k;
          for (int p = 0; p < k; ++p) GW[p] += static_cast<Real>(gv * static_cast<double>(A[p]));
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// normalization / attention
// ---------------------------------------------------------------------------

// Softmax over the last axis with max-subtraction.
template <class Real>
TensorT<Real> softmax_last(const TensorT<Real>& a) {
  const int n = a.shape().back();
  const int64_t rows = a.numel() / n;
  std::vector<Real> out(static_cast<size_t>(a.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    const Real* X = a.data().data() + r * n;
    Real* Y = out.data() + r * n;
    double mx = -1e300;
    for (int j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(X[j]));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      double e = std::exp(static_cast<double>(X[j]) - mx);
      Y[j] = static_cast<Real>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) Y[j] = static_cast<Real>(static_cast<double>(Y[j]) * inv);
  }
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a}, [rows, n](Node<Real>& nd) {
    auto g = up(nd);
    auto yv = nd.value;
    if (auto* pg = pgrad(nd, 0))
      for (int64_t r = 0; r < rows; ++r) {
        const Real* Y = yv.data() + r * n;
        const Real* G = g.data() + r * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(G[j]) * static_cast<double>(Y[j]);
        Real* PG = pg->data() + r * n;
        for (int j = 0; j < n; ++j)
          PG[j] += static_cast<Real>(static_cast<double>(Y[j]) * (static_cast<double>(G[j]) - dot));
      }
  });
}

// Row-causal softmax on [..., T, T]: row q is a distribution over j <= q,
// entries with j > q are exactly zero.
template <class Real>
TensorT<Real> causal_softmax_last(const TensorT<Real>& a) {
  const int r = a.rank();
  check(r >= 2 && a.dim(r - 1) == a.dim(r - 2), "causal_softmax_last: trailing dims must be square");
  const int T = a.dim(r - 1);
  const int64_t mats = a.numel() / (static_cast<int64_t>(T) * T);
  std::vector<Real> out(static_cast<size_t>(a.numel()), Real(0));
  for (int64_t m = 0; m < mats; ++m)
    for (int q = 0; q < T; ++q) {
      const Real* X = a.data().data() + (m * T + q) * T;
      Real* Y = out.data() + (m * T + q) * T;
      double mx = -1e300;
      for (int j = 0; j <= q; ++j) mx = std::max(mx, static_cast<double>(X[j]));
      double sum = 0.0;
      for (int j = 0; j <= q; ++j) {
        double e = std::exp(static_cast<double>(X[j]) - mx);
        Y[j] = static_cast<Real>(e);
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int j = 0; j <= q; ++j) Y[j] = static_cast<Real>(static_cast<double>(Y[j]) * inv);
    }
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a}, [mats, T](Node<Real>& nd) {
    auto g = up(nd);
    auto yv = nd.value;
    if (auto* pg = pgrad(nd, 0))
      for (int64_t m = 0; m < mats; ++m)
        for (int q = 0; q < T; ++q) {
          const Real* Y = yv.data() + (m * T + q) * T;
          const Real* G = g.data() + (m * T + q) * T;
          double dot = 0.0;
          for (int j = 0; j <= q; ++j) dot += static_cast<double>(G[j]) * static_cast<double>(Y[j]);
          Real* PG = pg->data() + (m * T + q) * T;
          for (int j = 0; j <= q; ++j)
            PG[j] += static_cast<Real>(static_cast<double>(Y[j]) * (static_cast<double>(G[j]) - dot));
        }
  });
}

// Layer norm over the last axis with affine parameters.
template <class Real>
TensorT<Real> layer_norm(const TensorT<Real>& a, const TensorT<Real>& gamma, const TensorT<Real>& beta,
                         double eps = 1e-5) {
  const int n = a.shape().back();
  check(gamma.rank() == 1 && gamma.dim(0) == n && beta.rank() == 1 && beta.dim(0) == n,
        "layer_norm: parameter length mismatch");
  const int64_t rows = a.numel() / n;
  std::vector<Real> out(static_cast<size_t>(a.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    const Real* X = a.data().data() + r * n;
    Real* Y = out.data() + r * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += static_cast<double>(X[j]);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = static_cast<double>(X[j]) - mean;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j)
      Y[j] = static_cast<Real>((static_cast<double>(X[j]) - mean) * inv * static_cast<double>(gamma.data()[static_cast<size_t>(j)]) +
                               static_cast<double>(beta.data()[static_cast<size_t>(j)]));
  }
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a, gamma, beta}, [rows, n, eps](Node<Real>& nd) {
    auto g = up(nd);
    auto xv = pval(nd, 0);
    auto gv = pval(nd, 1);
    auto* gx = pgrad(nd, 0);
    auto* gg = pgrad(nd, 1);
    auto* gb = pgrad(nd, 2);
    for (int64_t r = 0; r < rows; ++r) {
      const Real* X = xv.data() + r * n;
      const Real* G = g.data() + r * n;
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += static_cast<double>(X[j]);
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) {
        double d = static_cast<double>(X[j]) - mean;
        var += d * d;
      }
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps);
      if (gg || gb) {
        for (int j = 0; j < n; ++j) {
          const double xhat = (static_cast<double>(X[j]) - mean) * inv;
          if (gg) (*gg)[static_cast<size_t>(j)] += static_cast<Real>(static_cast<double>(G[j]) * xhat);
          if (gb) (*gb)[static_cast<size_t>(j)] += G[j];
        }
      }
      if (gx) {
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < n; ++j) {
          const double dxhat = static_cast<double>(G[j]) * static_cast<double>(gv[static_cast<size_t>(j)]);
          const double xhat = (static_cast<double>(X[j]) - mean) * inv;
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        Real* GX = gx->data() + r * n;
        for (int j = 0; j < n; ++j) {
          const double dxhat = static_cast<double>(G[j]) * static_cast<double>(gv[static_cast<size_t>(j)]);
          const double xhat = (static_cast<double>(X[j]) - mean) * inv;
          GX[j] += static_cast<Real>(inv * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / n));
        }
      }
    }
  });
}

// Normalize the last axis to unit L2 norm.
template <class Real>
TensorT<Real> l2norm_last(const TensorT<Real>& a, double min_norm = 1e-12) {
  const int n = a.shape().back();
  const int64_t rows = a.numel() / n;
  std::vector<Real> out(static_cast<size_t>(a.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    const Real* X = a.data().data() + r * n;
    double ss = 0.0;
    for (int j = 0; j < n; ++j) ss += static_cast<double>(X[j]) * static_cast<double>(X[j]);
    const double norm = std::sqrt(ss);
    if (norm < min_norm) throw std::domain_error("l2norm_last: degenerate (near-zero) slice");
    const double inv = 1.0 / norm;
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(r * n + j)] = static_cast<Real>(static_cast<double>(X[j]) * inv);
  }
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a}, [rows, n](Node<Real>& nd) {
    auto g = up(nd);
    auto xv = pval(nd, 0);
    auto yv = nd.value;
    if (auto* pg = pgrad(nd, 0))
      for (int64_t r = 0; r < rows; ++r) {
        const Real* X = xv.data() + r * n;
        const Real* Y = yv.data() + r * n;
        const Real* G = g.data() + r * n;
        double ss = 0.0, dot = 0.0;
        for (int j = 0; j < n; ++j) {
          ss += static_cast<double>(X[j]) * static_cast<double>(X[j]);
          dot += static_cast<double>(G[j]) * static_cast<double>(Y[j]);
        }
        const double inv = 1.0 / std::sqrt(ss);
        Real* PG = pg->data() + r * n;
        for (int j = 0; j < n; ++j)
          PG[j] += static_cast<Real>((static_cast<double>(G[j]) - static_cast<double>(Y[j]) * dot) * inv);
      }
  });
}

// ---------------------------------------------------------------------------
// gather / reduce
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> embedding(const TensorT<Real>& table, const std::vector<int>& ids, int batch, int time) {
  check(table.rank() == 2, "embedding: table must be rank-2");
  check(static_cast<int64_t>(ids.size()) == static_cast<int64_t>(batch) * time, "embedding: id count mismatch");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids) check(id >= 0 && id < v, "embedding: token id out of range");
  std::vector<Real> out(ids.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(table.data().begin() + static_cast<size_t>(ids[i]) * d,
              table.data().begin() + static_cast<size_t>(ids[i] + 1) * d, out.begin() + i * static_cast<size_t>(d));
  return TensorT<Real>::make_op({batch, time, d}, std::move(out), {table}, [ids, d](Node<Real>& nd) {
    auto g = up(nd);
    if (auto* pg = pgrad(nd, 0))
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          (*pg)[static_cast<size_t>(ids[i]) * d + static_cast<size_t>(j)] += g[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
  });
}

template <class Real>
TensorT<Real> sum_all(const TensorT<Real>& a) {
  double acc = 0.0;
  for (Real v : a.data()) acc += static_cast<double>(v);
  return TensorT<Real>::make_op({1}, {static_cast<Real>(acc)}, {a}, [](Node<Real>& nd) {
    auto g = up(nd);
    if (auto* pg = pgrad(nd, 0))
      for (auto& v : *pg) v += g[0];
  });
}

// Sum over one axis.
template <class Real>
TensorT<Real> sum_axis(const TensorT<Real>& a, int axis) {
  const int r = a.rank();
  check(axis >= 0 && axis < r, "sum_axis: axis out of range");
  const auto& s = a.shape();
  Shape out_shape;
  for (int i = 0; i < r; ++i)
    if (i != axis) out_shape.push_back(s[static_cast<size_t>(i)]);
  if (out_shape.empty()) out_shape.push_back(1);
  int64_t outer = 1, mid = s[static_cast<size_t>(axis)], inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<size_t>(i)];
  std::vector<Real> out(static_cast<size_t>(outer * inner));
  std::vector<double> acc(static_cast<size_t>(inner));
  for (int64_t o = 0; o < outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t m = 0; m < mid; ++m) {
      const Real* X = a.data().data() + (o * mid + m) * inner;
      for (int64_t i = 0; i < inner; ++i) acc[static_cast<size_t>(i)] += static_cast<double>(X[i]);
    }
    for (int64_t i = 0; i < inner; ++i) out[static_cast<size_t>(o * inner + i)] = static_cast<Real>(acc[static_cast<size_t>(i)]);
  }
  return TensorT<Real>::make_op(std::move(out_shape), std::move(out), {a}, [outer, mid, inner](Node<Real>& nd) {
    auto g = up(nd);
    if (auto* pg = pgrad(nd, 0))
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t m = 0; m < mid; ++m) {
          Real* PG = pg->data() + (o * mid + m) * inner;
          const Real* G = g.data() + o * inner;
          for (int64_t i = 0; i < inner; ++i) PG[i] += G[i];
        }
  });
}

// x: [B, T, d], pos: one index per batch row -> [B, d].
template <class Real>
TensorT<Real> take_positions(const TensorT<Real>& x, const std::vector<int>& pos) {
  check(x.rank() == 3, "take_positions: rank-3 input required");
  const int B = x.dim(0), T = x.dim(1), d = x.dim(2);
  check(static_cast<int>(pos.size()) == B, "take_positions: one position per batch row");
  for (int p : pos) check(p >= 0 && p < T, "take_positions: position out of range");
  std::vector<Real> out(static_cast<size_t>(B) * d);
  for (int b = 0; b < B; ++b)
    std::copy(x.data().begin() + (static_cast<size_t>(b) * T + static_cast<size_t>(pos[static_cast<size_t>(b)])) * d,
              x.data().begin() + (static_cast<size_t>(b) * T + static_cast<size_t>(pos[static_cast<size_t>(b)]) + 1) * d,
              out.begin() + static_cast<size_t>(b) * d);
  return TensorT<Real>::make_op({B, d}, std::move(out), {x}, [pos, T, d](Node<Real>& nd) {
    auto g = up(nd);
    if (auto* pg = pgrad(nd, 0))
      for (size_t b = 0; b < pos.size(); ++b)
        for (int j = 0; j < d; ++j)
          (*pg)[(b * static_cast<size_t>(T) + static_cast<size_t>(pos[b])) * static_cast<size_t>(d) + static_cast<size_t>(j)] +=
              g[b * static_cast<size_t>(d) + static_cast<size_t>(j)];
  });
}

// Weighted mean over time: x [B, T, d], w [B, T] (nonnegative, not all zero
// per row) -> [B, d] with row b = sum_t w[b,t] x[b,t] / sum_t w[b,t].
template <class Real>
TensorT<Real> masked_mean_time(const TensorT<Real>& x, const std::vector<double>& w) {
  check(x.rank() == 3, "masked_mean_time: rank-3 input required");
  const int B = x.dim(0), T = x.dim(1), d = x.dim(2);
  check(static_cast<int64_t>(w.size()) == static_cast<int64_t>(B) * T, "masked_mean_time: weight shape mismatch");
  std::vector<double> rowsum(static_cast<size_t>(B), 0.0);
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t) rowsum[static_cast<size_t>(b)] += w[static_cast<size_t>(b * T + t)];
    check(rowsum[static_cast<size_t>(b)] > 0.0, "masked_mean_time: all-zero weight row");
  }
  std::vector<Real> out(static_cast<size_t>(B) * d);
  std::vector<double> acc(static_cast<size_t>(d));
  for (int b = 0; b < B; ++b) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int t = 0; t < T; ++t) {
      const double wv = w[static_cast<size_t>(b * T + t)];
      if (wv == 0.0) continue;
      const Real* X = x.data().data() + (static_cast<int64_t>(b) * T + t) * d;
      for (int j = 0; j < d; ++j) acc[static_cast<size_t>(j)] += wv * static_cast<double>(X[j]);
    }
    for (int j = 0; j < d; ++j)
      out[static_cast<size_t>(b) * d + static_cast<size_t>(j)] = static_cast<Real>(acc[static_cast<size_t>(j)] / rowsum[static_cast<size_t>(b)]);
  }
  return TensorT<Real>::make_op({B, d}, std::move(out), {x}, [w, rowsum, B, T, d](Node<Real>& nd) {
    auto g = up(nd);
    if (auto* pg = pgrad(nd, 0))
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < T; ++t) {
          const double wv = w[static_cast<size_t>(b * T + t)] / rowsum[static_cast<size_t>(b)];
          if (wv == 0.0) continue;
          Real* PG = pg->data() + (static_cast<int64_t>(b) * T + t) * d;
          const Real* G = g.data() + static_cast<int64_t>(b) * d;
          for (int j = 0; j < d; ++j) PG[j] += static_cast<Real>(wv * static_cast<double>(G[j]));
        }
  });
}

// Zero the diagonal of the trailing [K, K] block (used by the slot-diversity
// penalty, which sums over distinct slot pairs only).
template <class Real>
TensorT<Real> zero_diag_last2(const TensorT<Real>& a) {
  const int r = a.rank();
  check(r >= 2 && a.dim(r - 1) == a.dim(r - 2), "zero_diag_last2: trailing dims must be square");
  const int K = a.dim(r - 1);
  const int64_t mats = a.numel() / (static_cast<int64_t>(K) * K);
  std::vector<Real> out(a.data().begin(), a.data().end());
  for (int64_t m = 0; m < mats; ++m)
    for (int i = 0; i < K; ++i) out[static_cast<size_t>((m * K + i) * K + i)] = Real(0);
  return TensorT<Real>::make_op(a.shape(), std::move(out), {a}, [mats, K](Node<Real>& nd) {
    auto g = up(nd);
    if (auto* pg = pgrad(nd, 0))
      for (int64_t m = 0; m < mats; ++m)
        for (int i = 0; i < K; ++i)
          for (int j = 0; j < K; ++j)
            if (i != j) (*pg)[static_cast<size_t>((m * K + i) * K + j)] += g[static_cast<size_t>((m * K + i) * K + j)];
  });
}

// ---------------------------------------------------------------------------
// fused masked losses (logits come in flattened as [N, V])
// ---------------------------------------------------------------------------

template <class Real>
double masked_count(const std::vector<double>& mask) {
  double m = 0.0;
  for (double v : mask) m += v;
  return m;
}

// Mean masked negative log-likelihood. labels/mask have length N.
template <class Real>
TensorT<Real> masked_nll(const TensorT<Real>& logits, const std::vector<int>& labels,
                         const std::vector<double>& mask) {
  check(logits.rank() == 2, "masked_nll: logits must be [N, V]");
  const int N = logits.dim(0), V = logits.dim(1);
  check(static_cast<int>(labels.size()) == N && static_cast<int>(mask.size()) == N, "masked_nll: label/mask length mismatch");
  const double M = masked_count<Real>(mask);
  check(M >= 1.0, "masked_nll: all-zero mask");
  double loss = 0.0;
  for (int i = 0; i < N; ++i) {
    if (mask[static_cast<size_t>(i)] == 0.0) continue;
    check(labels[static_cast<size_t>(i)] >= 0 && labels[static_cast<size_t>(i)] < V, "masked_nll: label out of range");
    const Real* Z = logits.data().data() + static_cast<int64_t>(i) * V;
    double mx = -1e300;
    for (int v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(Z[v]));
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += std::exp(static_cast<double>(Z[v]) - mx);
    const double lse = mx + std::log(sum);
    loss += mask[static_cast<size_t>(i)] * (lse - static_cast<double>(Z[labels[static_cast<size_t>(i)]]));
  }
  loss /= M;
  return TensorT<Real>::make_op({1}, {static_cast<Real>(loss)}, {logits}, [labels, mask, M, N, V](Node<Real>& nd) {
    const double gy = static_cast<double>(up(nd)[0]);
    auto zv = pval(nd, 0);
    if (auto* pg = pgrad(nd, 0))
      for (int i = 0; i < N; ++i) {
        if (mask[static_cast<size_t>(i)] == 0.0) continue;
        const Real* Z = zv.data() + static_cast<int64_t>(i) * V;
        Real* PG = pg->data() + static_cast<int64_t>(i) * V;
        double mx = -1e300;
        for (int v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(Z[v]));
        double sum = 0.0;
        for (int v = 0; v < V; ++v) sum += std::exp(static_cast<double>(Z[v]) - mx);
        const double c = gy * mask[static_cast<size_t>(i)] / M;
        for (int v = 0; v < V; ++v) {
          double p = std::exp(static_cast<double>(Z[v]) - mx) / sum;
          PG[v] += static_cast<Real>(c * (p - (v == labels[static_cast<size_t>(i)] ? 1.0 : 0.0)));
        }
      }
  });
}

// Label-smoothed masked cross entropy; eps = 0 reduces exactly to masked_nll.
template <class Real>
TensorT<Real> masked_smooth_nll(const TensorT<Real>& logits, const std::vector<int>& labels,
                                const std::vector<double>& mask, double eps) {
  check(logits.rank() == 2, "masked_smooth_nll: logits must be [N, V]");
  check(eps >= 0.0 && eps < 1.0, "masked_smooth_nll: eps out of range");
  const int N = logits.dim(0), V = logits.dim(1);
  const double M = masked_count<Real>(mask);
  check(M >= 1.0, "masked_smooth_nll: all-zero mask");
  double loss = 0.0;
  for (int i = 0; i < N; ++i) {
    if (mask[static_cast<size_t>(i)] == 0.0) continue;
    const Real* Z = logits.data().data() + static_cast<int64_t>(i) * V;
    double mx = -1e300;
    for (int v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(Z[v]));
    double sum = 0.0, zbar = 0.0;
    for (int v = 0; v < V; ++v) {
      sum += std::exp(static_cast<double>(Z[v]) - mx);
      zbar += static_cast<double>(Z[v]);
    }
    const double lse = mx + std::log(sum);
    loss += mask[static_cast<size_t>(i)] *
            (lse - (1.0 - eps) * static_cast<double>(Z[labels[static_cast<size_t>(i)]]) - eps * zbar / V);
  }
  loss /= M;
  return TensorT<Real>::make_op({1}, {static_cast<Real>(loss)}, {logits}, [labels, mask, M, N, V, eps](Node<Real>& nd) {
    const double gy = static_cast<double>(up(nd)[0]);
    auto zv = pval(nd, 0);
    if (auto* pg = pgrad(nd, 0))
      for (int i = 0; i < N; ++i) {
        if (mask[static_cast<size_t>(i)] == 0.0) continue;
        const Real* Z = zv.data() + static_cast<int64_t>(i) * V;
        Real* PG = pg->data() + static_cast<int64_t>(i) * V;
        double mx = -1e300;
        for (int v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(Z[v]));
        double sum = 0.0;
        for (int v = 0; v < V; ++v) sum += std::exp(static_cast<double>(Z[v]) - mx);
        const double c = gy * mask[static_cast<size_t>(i)] / M;
        for (int v = 0; v < V; ++v) {
          double p = std::exp(static_cast<double>(Z[v]) - mx) / sum;
          double target = (v == labels[static_cast<size_t>(i)] ? 1.0 - eps : 0.0) + eps / V;
          PG[v] += static_cast<Real>(c * (p - target));
        }
      }
  });
}

// Temperature-softened KL(teacher || student), masked mean. The teacher
// logits are treated as constants; gradient flows into the student only.
template <class Real>
TensorT<Real> masked_kd(const TensorT<Real>& teacher, const TensorT<Real>& student, double tau,
                        const std::vector<double>& mask) {
  check(teacher.shape() == student.shape() && student.rank() == 2, "masked_kd: logits must be matching [N, V]");
  check(tau > 0.0, "masked_kd: temperature must be positive");
  const int N = student.dim(0), V = student.dim(1);
  const double M = masked_count<Real>(mask);
  check(M >= 1.0, "masked_kd: all-zero mask");
  auto row_logprobs = [V](const Real* Z, double tau_, std::vector<double>& lp) {
    double mx = -1e300;
    for (int v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(Z[v]) / tau_);
    double sum = 0.0;
    for (int v = 0; v < V; ++v) {
      lp[static_cast<size_t>(v)] = static_cast<double>(Z[v]) / tau_ - mx;
      sum += std::exp(lp[static_cast<size_t>(v)]);
    }
    const double lse = std::log(sum);
    for (int v = 0; v < V; ++v) lp[static_cast<size_t>(v)] -= lse;
  };
  std::vector<double> lt(static_cast<size_t>(V)), ls(static_cast<size_t>(V));
  double loss = 0.0;
  for (int i = 0; i < N; ++i) {
    if (mask[static_cast<size_t>(i)] == 0.0) continue;
    row_logprobs(teacher.data().data() + static_cast<int64_t>(i) * V, tau, lt);
    row_logprobs(student.data().data() + static_cast<int64_t>(i) * V, tau, ls);
    double kl = 0.0;
    for (int v = 0; v < V; ++v) kl += std::exp(lt[static_cast<size_t>(v)]) * (lt[static_cast<size_t>(v)] - ls[static_cast<size_t>(v)]);
    loss += mask[static_cast<size_t>(i)] * kl;
  }
  loss /= M;
  const auto teacher_vals = teacher.detach();
  return TensorT<Real>::make_op({1}, {static_cast<Real>(loss)}, {student},
                                [teacher_vals, mask, M, N, V, tau, row_logprobs](Node<Real>& nd) {
    const double gy = static_cast<double>(up(nd)[0]);
    auto zv = pval(nd, 0);
    if (auto* pg = pgrad(nd, 0)) {
      std::vector<double> lt(static_cast<size_t>(V)), ls(static_cast<size_t>(V));
      for (int i = 0; i < N; ++i) {
        if (mask[static_cast<size_t>(i)] == 0.0) continue;
        row_logprobs(teacher_vals.data().data() + static_cast<int64_t>(i) * V, tau, lt);
        row_logprobs(zv.data() + static_cast<int64_t>(i) * V, tau, ls);
        Real* PG = pg->data() + static_cast<int64_t>(i) * V;
        const double c = gy * mask[static_cast<size_t>(i)] / (M * tau);
        for (int v = 0; v < V; ++v)
          PG[v] += static_cast<Real>(c * (std::exp(ls[static_cast<size_t>(v)]) - std::exp(lt[static_cast<size_t>(v)])));
      }
    }
  });
}

}  // namespace tensorops

using Tensor = TensorT<float>;

// Per-parameter gradient extraction for a recorded scalar loss. Parameters
// absent from the loss's graph but tracked get zero gradients; asking for an
// untracked tensor is a caller error.
template <class Real>
std::vector<std::vector<Real>> gradients(TensorT<Real> loss, std::vector<TensorT<Real>> params) {
  for (auto& p : params) {
    if (!p.requires_grad()) throw std::logic_error("gradients: parameter is not tracked (requires_grad=false)");
    p.zero_grad();
  }
  loss.backward();
  std::vector<std::vector<Real>> out;
  out.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad())
      out.emplace_back(p.grad().begin(), p.grad().end());
    else
      out.emplace_back(static_cast<size_t>(p.numel()), Real(0));
  }
  return out;
}

}  // namespace acros
