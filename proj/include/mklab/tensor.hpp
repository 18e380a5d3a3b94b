#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "mklab/common.hpp"

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor<T> is a cheap handle onto a graph node holding the value, an
// optional gradient, and a backward closure. Ops build the graph dynamically;
// Tensor::backward() on a scalar walks it in reverse topological order.
// Gradients accumulate across backward calls until zero_grad(); this is the
// documented accumulate mode.
//
// T is float for training and double for verification runs.

namespace mklab {

namespace detail {

inline thread_local int no_grad_depth = 0;

}  // namespace detail

// Disables graph recording for its lifetime (evaluation, data pipelines).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // accumulates into parents' grads
  const char* op = "leaf";

  std::size_t numel() const { return value.size(); }

  std::vector<T>& grad_buf() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Shape of a broadcast result; axes align right, length-1 or missing axes
// stretch. Throws DimError naming both shapes on mismatch.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimError("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` viewed as `out`, with 0 where an axis broadcasts.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  const auto st = row_major_strides(shape);
  std::vector<std::size_t> r(out.size(), 0);
  const std::size_t off = out.size() - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    r[off + i] = shape[i] == 1 ? 0 : st[i];
  }
  return r;
}

// Applies fn(out_index, a_offset, b_offset) over every element of `out`.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t total = shape_numel(out);
  const std::size_t nd = out.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < total; ++i) {
    fn(i, oa, ob);
    for (std::size_t ax = nd; ax-- > 0;) {
      if (++idx[ax] < out[ax]) {
        oa += sa[ax];
        ob += sb[ax];
        break;
      }
      oa -= sa[ax] * (out[ax] - 1);
      ob -= sb[ax] * (out[ax] - 1);
      idx[ax] = 0;
    }
  }
}

// Sums `g` (laid out as `g_shape`) into `dst` whose shape broadcast to it.
template <typename T>
void reduce_broadcast_into(const std::vector<T>& g, const Shape& g_shape,
                           std::vector<T>& dst, const Shape& dst_shape) {
  const auto sd = broadcast_strides(dst_shape, g_shape);
  const std::size_t nd = g_shape.size();
  std::vector<std::size_t> idx(nd, 0);
  std::size_t od = 0;
  const std::size_t total = g.size();
  for (std::size_t i = 0; i < total; ++i) {
    dst[od] += g[i];
    for (std::size_t ax = nd; ax-- > 0;) {
      if (++idx[ax] < g_shape[ax]) {
        od += sd[ax];
        break;
      }
      od -= sd[ax] * (g_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using NodeT = detail::Node<T>;

  Tensor() = default;

  // -- construction ---------------------------------------------------------

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return filled(std::move(shape), T(1)); }

  static Tensor filled(Shape shape, T v) {
    auto n = std::make_shared<NodeT>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size()) {
      throw DimError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<NodeT>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    auto t = zeros(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal() * static_cast<double>(stddev));
    return t;
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, T stddev) {
    auto t = zeros(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(static_cast<double>(stddev)));
    return t;
  }

  // -- basic accessors ------------------------------------------------------

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t ndim() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->value.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }

  T item() const {
    if (numel() != 1) throw ContractError("item() requires a one-element tensor, got " + shape_str(shape()));
    return n_->value[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    const auto st = detail::row_major_strides(shape());
    std::size_t off = 0, i = 0;
    for (std::size_t v : idx) off += v * st[i++];
    return n_->value[off];
  }

  // -- autodiff surface -----------------------------------------------------

  bool requires_grad() const { return n_->requires_grad; }

  Tensor& set_requires_grad(bool b) {
    n_->requires_grad = b;
    return *this;
  }

  // Gradient accumulated by backward(); zeros if this leaf was never reached.
  const std::vector<T>& grad() const { return n_->grad_buf(); }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  // Reverse-mode accumulation from a scalar. Gradients add onto whatever is
  // already stored (accumulate mode); call zero_grad() on leaves between
  // unrelated backward passes.
  void backward() const {
    if (numel() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    // Topological order via iterative DFS over parents.
    std::vector<NodeT*> order;
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    std::vector<NodeT*> seen;
    auto visited = [&](NodeT* p) {
      return std::find(seen.begin(), seen.end(), p) != seen.end();
    };
    if (n_->requires_grad) {
      stack.push_back({n_.get(), 0});
      seen.push_back(n_.get());
    }
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        NodeT* p = node->parents[next++].get();
        if (p->requires_grad && !visited(p)) {
          seen.push_back(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->grad_buf()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

  std::shared_ptr<NodeT> node() const { return n_; }
  explicit Tensor(std::shared_ptr<NodeT> n) : n_(std::move(n)) {}

  // -- shape ops (graph-recorded) -------------------------------------------

  // Same data, new shape; element count and order never change.
  Tensor reshape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimError("reshape " + shape_str(this->shape()) + " -> " + shape_str(shape) +
                     " changes element count");
    }
    auto out = std::make_shared<NodeT>();
    out->shape = std::move(shape);
    out->value = n_->value;
    out->op = "reshape";
    if (grad_enabled() && n_->requires_grad) {
      out->requires_grad = true;
      out->parents = {n_};
      auto parent = n_;
      out->backward = [parent](NodeT& self) {
        auto& pg = parent->grad_buf();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pg[i] += self.grad[i];
      };
    }
    return Tensor(out);
  }

  // Axis permutation; copies into the permuted layout.
  Tensor permute(const std::vector<std::size_t>& axes) const {
    const std::size_t nd = ndim();
    if (axes.size() != nd) throw DimError("permute axes rank mismatch for " + shape_str(shape()));
    std::vector<bool> used(nd, false);
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) {
      if (axes[i] >= nd || used[axes[i]]) throw DimError("invalid permutation");
      used[axes[i]] = true;
      out_shape[i] = shape()[axes[i]];
    }
    auto out = std::make_shared<NodeT>();
    out->shape = out_shape;
    out->value.resize(numel());
    permute_copy(n_->value, shape(), axes, out->value);
    out->op = "permute";
    if (grad_enabled() && n_->requires_grad) {
      out->requires_grad = true;
      out->parents = {n_};
      auto parent = n_;
      std::vector<std::size_t> inv(nd);
      for (std::size_t i = 0; i < nd; ++i) inv[axes[i]] = i;
      out->backward = [parent, inv, out_shape](NodeT& self) {
        std::vector<T> tmp(self.grad.size());
        permute_copy(self.grad, out_shape, inv, tmp);
        auto& pg = parent->grad_buf();
        for (std::size_t i = 0; i < tmp.size(); ++i) pg[i] += tmp[i];
      };
    }
    return Tensor(out);
  }

  // Contiguous sub-range along one axis.
  Tensor narrow(std::size_t axis, std::size_t start, std::size_t len) const {
    if (axis >= ndim() || start + len > shape()[axis]) {
      throw DimError("narrow out of range on " + shape_str(shape()));
    }
    Shape out_shape = shape();
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape()[i];
    for (std::size_t i = axis + 1; i < ndim(); ++i) inner *= shape()[i];
    const std::size_t full = shape()[axis];
    auto out = std::make_shared<NodeT>();
    out->shape = out_shape;
    out->value.resize(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = n_->value.data() + (o * full + start) * inner;
      T* dst = out->value.data() + o * len * inner;
      std::copy(src, src + len * inner, dst);
    }
    out->op = "narrow";
    if (grad_enabled() && n_->requires_grad) {
      out->requires_grad = true;
      out->parents = {n_};
      auto parent = n_;
      out->backward = [parent, outer, inner, len, full, start](NodeT& self) {
        auto& pg = parent->grad_buf();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* g = self.grad.data() + o * len * inner;
          T* dst = pg.data() + (o * full + start) * inner;
          for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
        }
      };
    }
    return Tensor(out);
  }

  // Materialized broadcast to a larger shape.
  Tensor broadcast_to(const Shape& target) const {
    const Shape out_shape = detail::broadcast_shapes(shape(), target);
    if (out_shape != target) {
      throw DimError("cannot broadcast " + shape_str(shape()) + " to " + shape_str(target));
    }
    auto out = std::make_shared<NodeT>();
    out->shape = target;
    out->value.resize(shape_numel(target));
    const auto ss = detail::broadcast_strides(shape(), target);
    const auto zero = std::vector<std::size_t>(target.size(), 0);
    const auto& src = n_->value;
    detail::for_each_broadcast(target, ss, zero,
                               [&](std::size_t i, std::size_t sa, std::size_t) { out->value[i] = src[sa]; });
    out->op = "broadcast";
    if (grad_enabled() && n_->requires_grad) {
      out->requires_grad = true;
      out->parents = {n_};
      auto parent = n_;
      Shape in_shape = shape();
      out->backward = [parent, in_shape, target](NodeT& self) {
        detail::reduce_broadcast_into(self.grad, target, parent->grad_buf(), in_shape);
      };
    }
    return Tensor(out);
  }

 private:
  static void permute_copy(const std::vector<T>& src, const Shape& in_shape,
                           const std::vector<std::size_t>& axes, std::vector<T>& dst) {
    const std::size_t nd = in_shape.size();
    const auto in_st = detail::row_major_strides(in_shape);
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[axes[i]];
    std::vector<std::size_t> src_stride(nd);
    for (std::size_t i = 0; i < nd; ++i) src_stride[i] = in_st[axes[i]];
    std::vector<std::size_t> idx(nd, 0);
    std::size_t so = 0;
    const std::size_t total = src.size();
    for (std::size_t i = 0; i < total; ++i) {
      dst[i] = src[so];
      for (std::size_t ax = nd; ax-- > 0;) {
        if (++idx[ax] < out_shape[ax]) {
          so += src_stride[ax];
          break;
        }
        so -= src_stride[ax] * (out_shape[ax] - 1);
        idx[ax] = 0;
      }
    }
  }

  std::shared_ptr<NodeT> n_;
};

// ===========================================================================
// Ops
// ===========================================================================

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_out(Shape shape, const char* op) {
  auto n = std::make_shared<Node<T>>();
  n->value.resize(shape_numel(shape));
  n->shape = std::move(shape);
  n->op = op;
  return n;
}

template <typename T>
bool record(const Tensor<T>& a) {
  return grad_enabled() && a.requires_grad();
}

template <typename T>
bool record(const Tensor<T>& a, const Tensor<T>& b) {
  return grad_enabled() && (a.requires_grad() || b.requires_grad());
}

// Raw batched matmul kernel: out[..., m, n] = a[..., m, k] * b[..., k, n],
// with optional transposition of each operand's trailing two axes and
// right-aligned broadcasting of the leading (batch) axes.
template <typename T>
void bmm(const std::vector<T>& a, const Shape& ash, bool ta,
         const std::vector<T>& b, const Shape& bsh, bool tb,
         std::vector<T>& out, Shape& out_shape) {
  if (ash.size() < 2 || bsh.size() < 2) {
    throw DimError("matmul requires rank >= 2: " + shape_str(ash) + " vs " + shape_str(bsh));
  }
  const std::size_t am = ash[ash.size() - 2], ak = ash[ash.size() - 1];
  const std::size_t bk = bsh[bsh.size() - 2], bn = bsh[bsh.size() - 1];
  const std::size_t m = ta ? ak : am, k = ta ? am : ak;
  const std::size_t k2 = tb ? bn : bk, n = tb ? bk : bn;
  if (k != k2) {
    throw DimError("matmul inner dimension mismatch: " + shape_str(ash) + " vs " + shape_str(bsh));
  }
  Shape abatch(ash.begin(), ash.end() - 2), bbatch(bsh.begin(), bsh.end() - 2);
  Shape batch = broadcast_shapes(abatch, bbatch);
  // Batch strides count matrices, not elements; scaled by matrix size below.
  const auto sa = broadcast_strides(abatch, batch);
  const auto sb = broadcast_strides(bbatch, batch);
  const std::size_t a_mat = am * ak, b_mat = bk * bn;
  out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  out.assign(shape_numel(out_shape), T(0));

  const std::size_t batches = shape_numel(batch);
  std::vector<std::size_t> idx(batch.size(), 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t bi = 0; bi < batches; ++bi) {
    const T* A = a.data() + oa * a_mat;
    const T* B = b.data() + ob * b_mat;
    T* C = out.data() + bi * m * n;
    if (!ta && !tb) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const T aik = A[i * k + kk];
          const T* Brow = B + kk * n;
          T* Crow = C + i * n;
          for (std::size_t j = 0; j < n; ++j) Crow[j] += aik * Brow[j];
        }
      }
    } else if (!ta && tb) {
      // C[i,j] = sum_k A[i,k] * B[j,k]
      for (std::size_t i = 0; i < m; ++i) {
        const T* Arow = A + i * k;
        T* Crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const T* Brow = B + j * k;
          T acc = 0;
          for (std::size_t kk = 0; kk < k; ++kk) acc += Arow[kk] * Brow[kk];
          Crow[j] = acc;
        }
      }
    } else if (ta && !tb) {
      // C[i,j] = sum_k A[k,i] * B[k,j]
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T* Arow = A + kk * m;
        const T* Brow = B + kk * n;
        for (std::size_t i = 0; i < m; ++i) {
          const T aki = Arow[i];
          T* Crow = C + i * n;
          for (std::size_t j = 0; j < n; ++j) Crow[j] += aki * Brow[j];
        }
      }
    } else {
      // C[i,j] = sum_k A[k,i] * B[j,k]
      for (std::size_t i = 0; i < m; ++i) {
        T* Crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const T* Brow = B + j * k;
          T acc = 0;
          for (std::size_t kk = 0; kk < k; ++kk) acc += A[kk * m + i] * Brow[kk];
          Crow[j] = acc;
        }
      }
    }
    // advance batch odometer
    for (std::size_t ax = batch.size(); ax-- > 0;) {
      if (++idx[ax] < batch[ax]) {
        oa += sa[ax];
        ob += sb[ax];
        break;
      }
      oa -= sa[ax] * (batch[ax] - 1);
      ob -= sb[ax] * (batch[ax] - 1);
      idx[ax] = 0;
    }
  }
}

// Sums gradient `g` of the broadcast batch result back into `dst_shape`
// (batch axes only; the trailing two axes always match).
template <typename T>
void reduce_batch_into(const std::vector<T>& g, const Shape& g_shape,
                       std::vector<T>& dst, const Shape& dst_shape) {
  if (g_shape == dst_shape) {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    return;
  }
  reduce_broadcast_into(g, g_shape, dst, dst_shape);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: standard (batched) matrix product.
// Gradients: da = g . b^T, db = a^T . g, batch-reduced onto each operand.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = std::make_shared<detail::Node<T>>();
  detail::bmm(a.data(), a.shape(), false, b.data(), b.shape(), false, out->value, out->shape);
  out->op = "matmul";
  if (detail::record(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    auto an = a.node();
    auto bn = b.node();
    out->backward = [an, bn](detail::Node<T>& self) {
      if (an->requires_grad) {
        std::vector<T> da;
        Shape da_shape;
        detail::bmm(self.grad, self.shape, false, bn->value, bn->shape, true, da, da_shape);
        detail::reduce_batch_into(da, da_shape, an->grad_buf(), an->shape);
      }
      if (bn->requires_grad) {
        std::vector<T> db;
        Shape db_shape;
        detail::bmm(an->value, an->shape, true, self.grad, self.shape, false, db, db_shape);
        detail::reduce_batch_into(db, db_shape, bn->grad_buf(), bn->shape);
      }
    };
  }
  return Tensor<T>(out);
}

// a . b^T over the trailing two axes (attention scores pattern); avoids
// materializing the transpose. Gradients: da = g . b, db = g^T . a.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = std::make_shared<detail::Node<T>>();
  detail::bmm(a.data(), a.shape(), false, b.data(), b.shape(), true, out->value, out->shape);
  out->op = "matmul_nt";
  if (detail::record(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    auto an = a.node();
    auto bn = b.node();
    out->backward = [an, bn](detail::Node<T>& self) {
      if (an->requires_grad) {
        std::vector<T> da;
        Shape da_shape;
        detail::bmm(self.grad, self.shape, false, bn->value, bn->shape, false, da, da_shape);
        detail::reduce_batch_into(da, da_shape, an->grad_buf(), an->shape);
      }
      if (bn->requires_grad) {
        std::vector<T> db;
        Shape db_shape;
        detail::bmm(self.grad, self.shape, true, an->value, an->shape, false, db, db_shape);
        detail::reduce_batch_into(db, db_shape, bn->grad_buf(), bn->shape);
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting.
// ---------------------------------------------------------------------------
namespace detail {

enum class BinKind { Add, Sub, Mul };

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinKind kind, const char* name) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  auto out = make_out<T>(out_shape, name);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const auto& av = a.data();
  const auto& bv = b.data();
  switch (kind) {
    case BinKind::Add:
      for_each_broadcast(out_shape, sa, sb,
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { out->value[i] = av[ia] + bv[ib]; });
      break;
    case BinKind::Sub:
      for_each_broadcast(out_shape, sa, sb,
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { out->value[i] = av[ia] - bv[ib]; });
      break;
    case BinKind::Mul:
      for_each_broadcast(out_shape, sa, sb,
                         [&](std::size_t i, std::size_t ia, std::size_t ib) { out->value[i] = av[ia] * bv[ib]; });
      break;
  }
  if (record(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    auto an = a.node();
    auto bn = b.node();
    out->backward = [an, bn, kind, out_shape](Node<T>& self) {
      if (an->requires_grad) {
        if (kind == BinKind::Mul) {
          std::vector<T> tmp(self.grad.size());
          const auto sbb = broadcast_strides(bn->shape, out_shape);
          const auto zero = std::vector<std::size_t>(out_shape.size(), 0);
          for_each_broadcast(out_shape, sbb, zero,
                             [&](std::size_t i, std::size_t ib, std::size_t) { tmp[i] = self.grad[i] * bn->value[ib]; });
          reduce_broadcast_into(tmp, out_shape, an->grad_buf(), an->shape);
        } else {
          reduce_broadcast_into(self.grad, out_shape, an->grad_buf(), an->shape);
        }
      }
      if (bn->requires_grad) {
        std::vector<T> tmp(self.grad.size());
        if (kind == BinKind::Mul) {
          const auto saa = broadcast_strides(an->shape, out_shape);
          const auto zero = std::vector<std::size_t>(out_shape.size(), 0);
          for_each_broadcast(out_shape, saa, zero,
                             [&](std::size_t i, std::size_t ia, std::size_t) { tmp[i] = self.grad[i] * an->value[ia]; });
        } else if (kind == BinKind::Sub) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) tmp[i] = -self.grad[i];
        } else {
          tmp = self.grad;
        }
        reduce_broadcast_into(tmp, out_shape, bn->grad_buf(), bn->shape);
      }
    };
  }
  return Tensor<T>(out);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Add, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Sub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Mul, "mul");
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------
namespace detail {

// value_fn: x -> y; deriv_fn: (x, y) -> dy/dx
template <typename T, typename VF, typename DF>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, VF value_fn, DF deriv_fn) {
  auto out = make_out<T>(x.shape(), name);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = value_fn(xv[i]);
  if (record(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backward = [xn, deriv_fn](Node<T>& self) {
      auto& pg = xn->grad_buf();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        pg[i] += self.grad[i] * deriv_fn(xn->value[i], self.value[i]);
      }
    };
  }
  return Tensor<T>(out);
}

}  // namespace detail

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary_op(
      x, "scale", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op(
      x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary_op(
      x, "gelu",
      [=](T v) {
        const double d = static_cast<double>(v);
        return static_cast<T>(0.5 * d * (1.0 + std::erf(d * inv_sqrt2)));
      },
      [=](T v, T) {
        const double d = static_cast<double>(v);
        const double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
        return static_cast<T>(cdf + d * pdf);
      });
}

// 1 / sqrt(x + eps); used by layer_norm.
template <typename T>
Tensor<T> rsqrt_shift(const Tensor<T>& x, T eps) {
  return detail::unary_op(
      x, "rsqrt",
      [eps](T v) { return T(1) / std::sqrt(v + eps); },
      [](T, T y) { return T(-0.5) * y * y * y; });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------
namespace detail {

inline void check_axes(const Shape& shape, const std::vector<std::size_t>& axes) {
  std::vector<bool> seen(shape.size(), false);
  for (std::size_t a : axes) {
    if (a >= shape.size()) throw DimError("reduction axis out of range for " + shape_str(shape));
    if (seen[a]) throw DimError("duplicate reduction axis");
    seen[a] = true;
  }
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim = false) {
  detail::check_axes(x.shape(), axes);
  const Shape& in = x.shape();
  Shape kept = in;  // with reduced axes set to 1
  for (std::size_t a : axes) {
    if (in[a] == 0) throw NumericError("reduction over empty axis");
    kept[a] = 1;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const bool in_axes = std::find(axes.begin(), axes.end(), i) != axes.end();
    if (keepdim) {
      out_shape.push_back(in_axes ? 1 : in[i]);
    } else if (!in_axes) {
      out_shape.push_back(in[i]);
    }
  }
  auto out = detail::make_out<T>(out_shape, "reduce_sum");
  std::fill(out->value.begin(), out->value.end(), T(0));
  // accumulate via broadcast strides of kept shape
  const auto sk = detail::broadcast_strides(kept, in);
  {
    std::vector<std::size_t> idx(in.size(), 0);
    std::size_t ok = 0;
    const auto& xv = x.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      out->value[ok] += xv[i];
      for (std::size_t ax = in.size(); ax-- > 0;) {
        if (++idx[ax] < in[ax]) {
          ok += sk[ax];
          break;
        }
        ok -= sk[ax] * (in[ax] - 1);
        idx[ax] = 0;
      }
    }
  }
  if (detail::record(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backward = [xn, sk, in](detail::Node<T>& self) {
      auto& pg = xn->grad_buf();
      std::vector<std::size_t> idx(in.size(), 0);
      std::size_t ok = 0;
      for (std::size_t i = 0; i < pg.size(); ++i) {
        pg[i] += self.grad[ok];
        for (std::size_t ax = in.size(); ax-- > 0;) {
          if (++idx[ax] < in[ax]) {
            ok += sk[ax];
            break;
          }
          ok -= sk[ax] * (in[ax] - 1);
          idx[ax] = 0;
        }
      }
    };
  }
  return Tensor<T>(out);
}

// Arithmetic mean over the named axes; gradient is a uniform 1/count spread.
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, const std::vector<std::size_t>& axes, bool keepdim = false) {
  std::size_t count = 1;
  detail::check_axes(x.shape(), axes);
  for (std::size_t a : axes) count *= x.shape()[a];
  if (count == 0) throw NumericError("reduction over empty axis");
  return scale(reduce_sum(x, axes, keepdim), T(1) / static_cast<T>(count));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  std::vector<std::size_t> axes(x.ndim());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reduce_sum(x, axes);
}

// ---------------------------------------------------------------------------
// softmax along one axis, computed with max subtraction.
// Backward: dx = y * (g - sum(g * y, axis)).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.ndim()) throw DimError("softmax axis out of range for " + shape_str(x.shape()));
  for (T v : x.data()) {
    if (std::isnan(v)) throw NumericError("softmax input contains NaN");
  }
  const Shape& in = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i) inner *= in[i];
  const std::size_t L = in[axis];
  auto out = detail::make_out<T>(in, "softmax");
  const auto& xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t s = 0; s < inner; ++s) {
      const std::size_t base = o * L * inner + s;
      T mx = xv[base];
      for (std::size_t l = 1; l < L; ++l) mx = std::max(mx, xv[base + l * inner]);
      T sum = 0;
      for (std::size_t l = 0; l < L; ++l) {
        const T e = std::exp(xv[base + l * inner] - mx);
        out->value[base + l * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::size_t l = 0; l < L; ++l) out->value[base + l * inner] *= inv;
    }
  }
  if (detail::record(x)) {
    out->requires_grad = true;
    out->parents = {x.node()};
    auto xn = x.node();
    out->backward = [xn, outer, inner, L](detail::Node<T>& self) {
      auto& pg = xn->grad_buf();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t s = 0; s < inner; ++s) {
          const std::size_t base = o * L * inner + s;
          T dot = 0;
          for (std::size_t l = 0; l < L; ++l) {
            const std::size_t i = base + l * inner;
            dot += self.grad[i] * self.value[i];
          }
          for (std::size_t l = 0; l < L; ++l) {
            const std::size_t i = base + l * inner;
            pg[i] += self.value[i] * (self.grad[i] - dot);
          }
        }
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// concat of two tensors along one axis.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  if (a.ndim() != b.ndim() || axis >= a.ndim()) {
    throw DimError("concat rank mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  for (std::size_t i = 0; i < a.ndim(); ++i) {
    if (i != axis && a.shape()[i] != b.shape()[i]) {
      throw DimError("concat shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[axis] += b.shape()[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.ndim(); ++i) inner *= a.shape()[i];
  const std::size_t la = a.shape()[axis], lb = b.shape()[axis];
  auto out = detail::make_out<T>(out_shape, "concat");
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(a.data().data() + o * la * inner, a.data().data() + (o + 1) * la * inner,
              out->value.data() + o * (la + lb) * inner);
    std::copy(b.data().data() + o * lb * inner, b.data().data() + (o + 1) * lb * inner,
              out->value.data() + o * (la + lb) * inner + la * inner);
  }
  if (detail::record(a, b)) {
    out->requires_grad = true;
    out->parents = {a.node(), b.node()};
    auto an = a.node();
    auto bn = b.node();
    out->backward = [an, bn, outer, inner, la, lb](detail::Node<T>& self) {
      if (an->requires_grad) {
        auto& pg = an->grad_buf();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* g = self.grad.data() + o * (la + lb) * inner;
          for (std::size_t i = 0; i < la * inner; ++i) pg[o * la * inner + i] += g[i];
        }
      }
      if (bn->requires_grad) {
        auto& pg = bn->grad_buf();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* g = self.grad.data() + o * (la + lb) * inner + la * inner;
          for (std::size_t i = 0; i < lb * inner; ++i) pg[o * lb * inner + i] += g[i];
        }
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// linear: x . W^T (+ bias), with W stored [out_features, in_features].
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr) {
  if (x.ndim() < 1 || w.ndim() != 2) {
    throw DimError("linear expects x [..., in] and w [out, in], got " + shape_str(x.shape()) +
                   " and " + shape_str(w.shape()));
  }
  const std::size_t in_f = x.shape().back();
  if (in_f != w.shape()[1]) {
    throw DimError("linear feature mismatch: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  }
  const std::size_t out_f = w.shape()[0];
  const std::size_t rows = x.numel() / in_f;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  auto out = detail::make_out<T>(out_shape, "linear");
  // y = x . w^T
  {
    std::vector<T> tmp;
    Shape tmp_shape;
    detail::bmm(x.data(), Shape{rows, in_f}, false, w.data(), w.shape(), true, tmp, tmp_shape);
    out->value = std::move(tmp);
  }
  if (bias) {
    if (bias->shape() != Shape{out_f}) {
      throw DimError("linear bias shape " + shape_str(bias->shape()) + " != (" + std::to_string(out_f) + ")");
    }
    for (std::size_t r = 0; r < rows; ++r) {
      T* row = out->value.data() + r * out_f;
      const T* bv = bias->data().data();
      for (std::size_t j = 0; j < out_f; ++j) row[j] += bv[j];
    }
  }
  const bool rec = grad_enabled() &&
                   (x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad()));
  if (rec) {
    out->requires_grad = true;
    out->parents = {x.node(), w.node()};
    auto xn = x.node();
    auto wn = w.node();
    std::shared_ptr<detail::Node<T>> bn;
    if (bias) {
      bn = bias->node();
      out->parents.push_back(bn);
    }
    out->backward = [xn, wn, bn, rows, in_f, out_f](detail::Node<T>& self) {
      if (xn->requires_grad) {
        std::vector<T> dx;
        Shape dx_shape;
        detail::bmm(self.grad, Shape{rows, out_f}, false, wn->value, wn->shape, false, dx, dx_shape);
        auto& pg = xn->grad_buf();
        for (std::size_t i = 0; i < dx.size(); ++i) pg[i] += dx[i];
      }
      if (wn->requires_grad) {
        std::vector<T> dw;
        Shape dw_shape;
        detail::bmm(self.grad, Shape{rows, out_f}, true, xn->value, Shape{rows, in_f}, false, dw, dw_shape);
        auto& pg = wn->grad_buf();
        for (std::size_t i = 0; i < dw.size(); ++i) pg[i] += dw[i];
      }
      if (bn && bn->requires_grad) {
        auto& pg = bn->grad_buf();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * out_f;
          for (std::size_t j = 0; j < out_f; ++j) pg[j] += g[j];
        }
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// grouped_pointwise_conv: 1x1 grouped convolution over the channel axis.
//
// x: [..., C_in, L], w: [C_out, C_in/groups]. For each group g and output
// channel i of that group, out_i[l] = sum_j w[i, j] * x[g-th block j][l].
// Realized as a per-group matrix product, so it inherits matmul gradients.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> grouped_pointwise_conv(const Tensor<T>& x, const Tensor<T>& w, std::size_t groups) {
  if (x.ndim() < 2 || w.ndim() != 2) {
    throw DimError("grouped_pointwise_conv expects x [..., C_in, L] and w [C_out, C_in/groups]");
  }
  const std::size_t c_in = x.shape()[x.ndim() - 2];
  const std::size_t L = x.shape().back();
  const std::size_t c_out = w.shape()[0];
  if (groups == 0 || c_in % groups != 0 || c_out % groups != 0) {
    throw ConfigError("channel counts not divisible by groups: C_in=" + std::to_string(c_in) +
                      ", C_out=" + std::to_string(c_out) + ", groups=" + std::to_string(groups));
  }
  const std::size_t n_in = c_in / groups, n_out = c_out / groups;
  if (w.shape()[1] != n_in) {
    throw ConfigError("conv weight shape " + shape_str(w.shape()) + " inconsistent with C_in/groups=" +
                      std::to_string(n_in));
  }
  Shape lead(x.shape().begin(), x.shape().end() - 2);
  Shape xg = lead;
  xg.push_back(groups);
  xg.push_back(n_in);
  xg.push_back(L);
  auto xr = x.reshape(xg);
  auto wr = w.reshape({groups, n_out, n_in});
  auto yr = matmul(wr, xr);  // [..., groups, n_out, L] with w broadcast over leads
  Shape out_shape = lead;
  out_shape.push_back(c_out);
  out_shape.push_back(L);
  return yr.reshape(out_shape);
}

// ---------------------------------------------------------------------------
// layer_norm over the last axis, composed from primitives.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const std::size_t last = x.ndim() - 1;
  auto m = reduce_mean(x, {last}, true);
  auto c = sub(x, m);
  auto v = reduce_mean(mul(c, c), {last}, true);
  auto r = rsqrt_shift(v, eps);
  return add(mul(mul(c, r), gain), bias);
}

// ---------------------------------------------------------------------------
// cross_entropy_mean: mean over rows of -log softmax(logits)[label].
// Stable log-sum-exp forward; backward is (softmax - onehot) / rows.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.ndim() != 2) throw DimError("cross_entropy expects [batch, classes] logits");
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  if (labels.size() != B) throw ContractError("label count != batch size");
  for (std::size_t l : labels) {
    if (l >= C) throw ContractError("label out of range");
  }
  auto out = detail::make_out<T>(Shape{}, "cross_entropy");
  const auto& lv = logits.data();
  double total = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = lv.data() + b * C;
    T mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double se = 0;
    for (std::size_t c = 0; c < C; ++c) se += std::exp(static_cast<double>(row[c] - mx));
    total += static_cast<double>(mx) + std::log(se) - static_cast<double>(row[labels[b]]);
  }
  out->value[0] = static_cast<T>(total / static_cast<double>(B));
  if (detail::record(logits)) {
    out->requires_grad = true;
    out->parents = {logits.node()};
    auto ln = logits.node();
    auto labs = labels;
    out->backward = [ln, labs, B, C](detail::Node<T>& self) {
      const T g = self.grad[0] / static_cast<T>(B);
      auto& pg = ln->grad_buf();
      for (std::size_t b = 0; b < B; ++b) {
        const T* row = ln->value.data() + b * C;
        T mx = row[0];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T se = 0;
        for (std::size_t c = 0; c < C; ++c) se += std::exp(row[c] - mx);
        const T inv = T(1) / se;
        for (std::size_t c = 0; c < C; ++c) {
          const T p = std::exp(row[c] - mx) * inv;
          pg[b * C + c] += g * (p - (labs[b] == c ? T(1) : T(0)));
        }
      }
    };
  }
  return Tensor<T>(out);
}

}  // namespace mklab
