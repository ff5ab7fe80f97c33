#pragma once

// Tape-based reverse-mode differentiation over a closed set of tensor ops.
//
// Nodes are appended in evaluation order, so node ids are already a
// topological order and backward is a single reverse sweep that visits every
// node at most once.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmoco/error.hpp"
#include "dmoco/kernels.hpp"
#include "dmoco/tensor.hpp"

namespace dmoco {

template <typename T>
class Graph;

/// Named parameter collection. Ordered so iteration is deterministic.
template <typename T>
using ParamSet = std::map<std::string, Tensor<T>>;

/// Handle to a node in a Graph.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t id() const noexcept { return id_; }
  Graph<T>& graph() const { return *graph_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  bool requires_grad() const { return graph_->requires_grad(id_); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
using BoundParams = std::map<std::string, Var<T>>;

/// Result of a backward sweep.
template <typename T>
struct Gradients {
  /// One entry per named parameter leaf; untouched parameters hold zeros.
  ParamSet<T> named;
  /// Gradient of every requires-grad leaf, keyed by node id.
  std::map<std::size_t, Tensor<T>> leaves;

  const Tensor<T>& of(const Var<T>& v) const {
    auto it = leaves.find(v.id());
    if (it == leaves.end()) throw ContractError("no gradient recorded for node " + std::to_string(v.id()));
    return it->second;
  }
  const Tensor<T>& operator[](const std::string& name) const {
    auto it = named.find(name);
    if (it == named.end()) throw ContractError("no gradient for parameter '" + name + "'");
    return it->second;
  }
};

template <typename T>
class Graph {
 public:
  /// Receives the gradient w.r.t. the node's output (and the output itself)
  /// and accumulates into the gradients of the node's inputs via grad_ptr().
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& grad_out, const Tensor<T>& out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), {}, nullptr, false, {}, true); }

  /// Differentiable input; its gradient is reported in Gradients::leaves.
  Var<T> leaf(Tensor<T> value) { return push("leaf", std::move(value), {}, nullptr, true, {}, true); }

  /// Named trainable parameter; its gradient is reported in Gradients::named.
  Var<T> param(const std::string& name, Tensor<T> value) {
    return push("param", std::move(value), {}, nullptr, true, name, true);
  }

  BoundParams<T> bind(const ParamSet<T>& params, bool trainable) {
    BoundParams<T> out;
    for (const auto& [name, t] : params) out.emplace(name, trainable ? param(name, t) : constant(t));
    return out;
  }

  /// Appends an op result. The result must be finite.
  Var<T> record(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    require_finite(value, op);
    bool rg = false;
    for (auto i : inputs) rg = rg || nodes_[i].requires_grad;
    return push(op, std::move(value), std::move(inputs), rg ? std::move(fn) : nullptr, rg, {}, false);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  /// Gradient accumulator for node `id`, or nullptr if it needs none.
  T* grad_ptr(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    auto& g = grads_[id];
    if (g.empty()) g.assign(n.value.size(), T{0});
    return g.data();
  }

  Gradients<T> backward(const Var<T>& loss) {
    if (&loss.graph() != this) throw ContractError("loss node belongs to a different graph");
    if (loss.value().size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    grads_.assign(nodes_.size(), {});
    if (nodes_[loss.id()].requires_grad) grads_[loss.id()].assign(1, T{1});

    for (std::size_t k = loss.id() + 1; k-- > 0;) {
      auto& n = nodes_[k];
      if (!n.backward || grads_[k].empty()) continue;
      Tensor<T> g(n.value.shape(), std::move(grads_[k]));
      grads_[k].clear();
      n.backward(*this, g, n.value);
    }

    Gradients<T> out;
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      const auto& n = nodes_[k];
      if (!n.is_leaf || !n.requires_grad) continue;
      Tensor<T> g = grads_[k].empty() ? Tensor<T>(n.value.shape()) : Tensor<T>(n.value.shape(), grads_[k]);
      if (!n.name.empty()) out.named[n.name] = g;
      out.leaves.emplace(k, std::move(g));
    }
    grads_.clear();
    return out;
  }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::string name;
    bool is_leaf = false;
  };

  Var<T> push(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn, bool rg,
              std::string name, bool is_leaf) {
    nodes_.push_back(Node{op, std::move(value), std::move(inputs), std::move(fn), rg, std::move(name), is_leaf});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
};

template <typename T>
Gradients<T> backward(Graph<T>& graph, const Var<T>& loss) {
  return graph.backward(loss);
}

namespace ops {

namespace detail {

inline void check_same_graph(const void* a, const void* b) {
  if (a != b) throw ContractError("operands belong to different graphs");
}

/// Visits (out_index, b_index) pairs where b broadcasts against out along
/// axes of extent 1. Ranks must agree.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& b, F&& f) {
  const std::size_t n = numel(out);
  if (out == b) {
    for (std::size_t i = 0; i < n; ++i) f(i, i);
    return;
  }
  const std::size_t r = out.size();
  std::vector<std::size_t> bstride(r, 0);
  std::size_t s = 1;
  for (std::size_t k = r; k-- > 0;) {
    bstride[k] = b[k] == 1 ? 0 : s;
    s *= b[k];
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, j);
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      j += bstride[k];
      if (idx[k] < out[k]) break;
      j -= bstride[k] * idx[k];
      idx[k] = 0;
    }
  }
}

inline void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  bool ok = a.size() == b.size();
  for (std::size_t k = 0; ok && k < a.size(); ++k) ok = b[k] == a[k] || b[k] == 1;
  if (!ok) throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " + to_string(a));
}

inline std::size_t last(const Shape& s) { return s.back(); }

inline Shape drop_last(const Shape& s) {
  if (s.size() == 1) return Shape{1};
  return Shape(s.begin(), s.end() - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The right operand may broadcast along unit axes.

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(&a.graph(), &b.graph());
  detail::check_broadcast(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  detail::for_each_broadcast(a.shape(), b.shape(), [&](std::size_t i, std::size_t j) { o[i] += bv[j]; });
  const auto ia = a.id(), ib = b.id();
  return a.graph().record("add", std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    auto gv = go.data();
    if (T* ga = g.grad_ptr(ia))
      for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
    if (T* gb = g.grad_ptr(ib))
      detail::for_each_broadcast(go.shape(), g.value(ib).shape(),
                                 [&](std::size_t i, std::size_t j) { gb[j] += gv[i]; });
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(&a.graph(), &b.graph());
  detail::check_broadcast(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  detail::for_each_broadcast(a.shape(), b.shape(), [&](std::size_t i, std::size_t j) { o[i] -= bv[j]; });
  const auto ia = a.id(), ib = b.id();
  return a.graph().record("sub", std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    auto gv = go.data();
    if (T* ga = g.grad_ptr(ia))
      for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
    if (T* gb = g.grad_ptr(ib))
      detail::for_each_broadcast(go.shape(), g.value(ib).shape(),
                                 [&](std::size_t i, std::size_t j) { gb[j] -= gv[i]; });
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(&a.graph(), &b.graph());
  detail::check_broadcast(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  detail::for_each_broadcast(a.shape(), b.shape(), [&](std::size_t i, std::size_t j) { o[i] *= bv[j]; });
  const auto ia = a.id(), ib = b.id();
  return a.graph().record("mul", std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    auto gv = go.data();
    auto av = g.value(ia).data();
    auto bv = g.value(ib).data();
    T* ga = g.grad_ptr(ia);
    T* gb = g.grad_ptr(ib);
    detail::for_each_broadcast(go.shape(), g.value(ib).shape(), [&](std::size_t i, std::size_t j) {
      if (ga) ga[i] += gv[i] * bv[j];
      if (gb) gb[j] += gv[i] * av[i];
    });
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  const auto ia = a.id();
  return a.graph().record("scale", std::move(out), {ia}, [ia, s](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* ga = g.grad_ptr(ia)) {
      auto gv = go.data();
      for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += s * gv[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// (M,K)x(K,N) -> (M,N), or batched (B,M,K)x(B,K,N) -> (B,M,N).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(&a.graph(), &b.graph());
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3) || sa.back() != sb[sb.size() - 2] ||
      (batched && sa[0] != sb[0]))
    throw ShapeError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  const std::size_t B = batched ? sa[0] : 1;
  const std::size_t M = sa[sa.size() - 2], K = sa.back(), N = sb.back();
  Tensor<T> out(batched ? Shape{B, M, N} : Shape{M, N});
  for (std::size_t p = 0; p < B; ++p)
    kernels::gemm_nn(M, N, K, a.value().data().data() + p * M * K, b.value().data().data() + p * K * N,
                     out.data().data() + p * M * N, false);
  const auto ia = a.id(), ib = b.id();
  return a.graph().record("matmul", std::move(out), {ia, ib},
                          [ia, ib, B, M, K, N](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
                            const T* av = g.value(ia).data().data();
                            const T* bv = g.value(ib).data().data();
                            const T* gv = go.data().data();
                            T* ga = g.grad_ptr(ia);
                            T* gb = g.grad_ptr(ib);
                            std::vector<T> scratch;
                            for (std::size_t p = 0; p < B; ++p) {
                              // dA = dC * B^T, dB = A^T * dC
                              if (ga) kernels::gemm_nt(M, K, N, gv + p * M * N, bv + p * K * N, ga + p * M * K, true, scratch);
                              if (gb) kernels::gemm_tn(K, N, M, av + p * M * K, gv + p * M * N, gb + p * K * N, true);
                            }
                          });
}

/// Swaps the last two axes (batched over any leading axes).
template <typename T>
Var<T> transpose(const Var<T>& a) {
  const auto& s = a.shape();
  if (s.size() < 2) throw ShapeError("transpose needs rank >= 2, got " + to_string(s));
  const std::size_t R = s[s.size() - 2], C = s.back();
  const std::size_t B = a.value().size() / (R * C);
  Shape os = s;
  std::swap(os[os.size() - 2], os.back());
  Tensor<T> out(os);
  for (std::size_t p = 0; p < B; ++p)
    kernels::transpose(R, C, a.value().data().data() + p * R * C, out.data().data() + p * R * C);
  const auto ia = a.id();
  return a.graph().record("transpose", std::move(out), {ia}, [ia, B, R, C](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* ga = g.grad_ptr(ia)) {
      const T* gv = go.data().data();
      for (std::size_t p = 0; p < B; ++p)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t r = 0; r < R; ++r) ga[p * R * C + r * C + c] += gv[p * R * C + c * R + r];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const auto ia = a.id();
  return a.graph().record("reshape", std::move(out), {ia}, [ia](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* ga = g.grad_ptr(ia)) {
      auto gv = go.data();
      for (std::size_t i = 0; i < gv.size(); ++i) ga[i] += gv[i];
    }
  });
}

/// Concatenates along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis = 1) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat axis out of range for " + to_string(s0));
  Shape os = s0;
  os[axis] = 0;
  for (const auto& p : parts) {
    detail::check_same_graph(&p.graph(), &parts[0].graph());
    const auto& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t k = 0; ok && k < s.size(); ++k) ok = k == axis || s[k] == s0[k];
    if (!ok) throw ShapeError("concat: mismatched shapes " + to_string(s0) + " and " + to_string(s));
    os[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= s0[k];
  for (std::size_t k = axis + 1; k < s0.size(); ++k) inner *= s0[k];
  Tensor<T> out(os);
  std::vector<std::size_t> ids, widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    const T* src = p.value().data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * w, src + (o + 1) * w, out.data().data() + o * os[axis] * inner + offset);
    offset += w;
    ids.push_back(p.id());
    widths.push_back(w);
  }
  const std::size_t total = os[axis] * inner;
  return parts[0].graph().record("concat", std::move(out), ids,
                                 [ids, widths, outer, total](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
                                   std::size_t off = 0;
                                   for (std::size_t q = 0; q < ids.size(); ++q) {
                                     if (T* gp = g.grad_ptr(ids[q]))
                                       for (std::size_t o = 0; o < outer; ++o)
                                         for (std::size_t i = 0; i < widths[q]; ++i)
                                           gp[o * widths[q] + i] += go[o * total + off + i];
                                     off += widths[q];
                                   }
                                 });
}

// ---------------------------------------------------------------------------
// Convolution and resampling on (N, C, H, W)

namespace detail {
inline void check_nchw(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + " expects (N,C,H,W), got " + to_string(s));
}
}  // namespace detail

/// 2-D cross-correlation, square kernel (O, C, k, k), zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride = 1, std::size_t pad = 0) {
  detail::check_same_graph(&x.graph(), &w.graph());
  detail::check_nchw(x.shape(), "conv2d");
  const auto& ws = w.shape();
  if (ws.size() != 4 || ws[1] != x.dim(1) || ws[2] != ws[3])
    throw ShapeError("conv2d: weight " + to_string(ws) + " incompatible with input " + to_string(x.shape()));
  if (stride != 1 && stride != 2) throw ParameterError("conv2d: stride must be 1 or 2");
  const kernels::ConvGeometry geo{x.dim(1), x.dim(2), x.dim(3), ws[2], stride, pad};
  if (x.dim(2) + 2 * pad < ws[2] || x.dim(3) + 2 * pad < ws[2]) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t N = x.dim(0), O = ws[0], P = geo.patch(), L = geo.out_h() * geo.out_w();
  const std::size_t in_sz = geo.channels * geo.height * geo.width;
  Tensor<T> out(Shape{N, O, geo.out_h(), geo.out_w()});
  std::vector<T> cols(P * L);
  for (std::size_t n = 0; n < N; ++n) {
    kernels::im2col(geo, x.value().data().data() + n * in_sz, cols.data());
    kernels::gemm_nn(O, L, P, w.value().data().data(), cols.data(), out.data().data() + n * O * L, false);
  }
  const auto ix = x.id(), iw = w.id();
  return x.graph().record(
      "conv2d", std::move(out), {ix, iw}, [ix, iw, geo, N, O, P, L, in_sz](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
        T* gx = g.grad_ptr(ix);
        T* gw = g.grad_ptr(iw);
        const T* xv = g.value(ix).data().data();
        const T* wv = g.value(iw).data().data();
        const T* gv = go.data().data();
        std::vector<T> cols(P * L), scratch;
        for (std::size_t n = 0; n < N; ++n) {
          if (gw) {
            kernels::im2col(geo, xv + n * in_sz, cols.data());
            kernels::gemm_nt(O, P, L, gv + n * O * L, cols.data(), gw, true, scratch);
          }
          if (gx) {
            kernels::gemm_tn(P, L, O, wv, gv + n * O * L, cols.data(), false);
            kernels::col2im(geo, cols.data(), gx + n * in_sz);
          }
        }
      });
}

/// Convolution followed by a per-output-channel bias of shape (O).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride = 1, std::size_t pad = 0) {
  auto y = conv2d(x, w, stride, pad);
  if (bias.shape() != Shape{y.dim(1)})
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match channels " + std::to_string(y.dim(1)));
  return add(y, reshape(bias, Shape{1, y.dim(1), 1, 1}));
}

/// Nearest-neighbour 2x upsample.
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  detail::check_nchw(x.shape(), "upsample2x");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), 2 * H, 2 * W});
  const T* xv = x.value().data().data();
  T* o = out.data().data();
  for (std::size_t p = 0; p < NC; ++p)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx) o[(p * 2 * H + y) * 2 * W + xx] = xv[(p * H + y / 2) * W + xx / 2];
  const auto ix = x.id();
  return x.graph().record("upsample2x", std::move(out), {ix}, [ix, NC, H, W](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* gx = g.grad_ptr(ix))
      for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t y = 0; y < 2 * H; ++y)
          for (std::size_t xx = 0; xx < 2 * W; ++xx) gx[(p * H + y / 2) * W + xx / 2] += go[(p * 2 * H + y) * 2 * W + xx];
  });
}

/// 2x2 average pool, stride 2. Spatial extents must be even.
template <typename T>
Var<T> avgpool2x2(const Var<T>& x) {
  detail::check_nchw(x.shape(), "avgpool2x2");
  if (x.dim(2) % 2 || x.dim(3) % 2) throw ShapeError("avgpool2x2 needs even spatial extents, got " + to_string(x.shape()));
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2) / 2, W = x.dim(3) / 2;
  Tensor<T> out(Shape{x.dim(0), x.dim(1), H, W});
  const T* xv = x.value().data().data();
  for (std::size_t p = 0; p < NC; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const T* r0 = xv + (p * 2 * H + 2 * y) * 2 * W + 2 * xx;
        const T* r1 = r0 + 2 * W;
        out[(p * H + y) * W + xx] = T(0.25) * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  const auto ix = x.id();
  return x.graph().record("avgpool2x2", std::move(out), {ix}, [ix, NC, H, W](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* gx = g.grad_ptr(ix))
      for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t xx = 0; xx < W; ++xx) {
            const T v = T(0.25) * go[(p * H + y) * W + xx];
            T* r0 = gx + (p * 2 * H + 2 * y) * 2 * W + 2 * xx;
            T* r1 = r0 + 2 * W;
            r0[0] += v;
            r0[1] += v;
            r1[0] += v;
            r1[1] += v;
          }
  });
}

/// (N,C,H,W) -> (N,C)
template <typename T>
Var<T> global_avgpool(const Var<T>& x) {
  detail::check_nchw(x.shape(), "global_avgpool");
  const std::size_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1)});
  const T* xv = x.value().data().data();
  for (std::size_t p = 0; p < NC; ++p) {
    T s{0};
    for (std::size_t i = 0; i < HW; ++i) s += xv[p * HW + i];
    out[p] = s / static_cast<T>(HW);
  }
  const auto ix = x.id();
  return x.graph().record("global_avgpool", std::move(out), {ix}, [ix, NC, HW](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* gx = g.grad_ptr(ix))
      for (std::size_t p = 0; p < NC; ++p) {
        const T v = go[p] / static_cast<T>(HW);
        for (std::size_t i = 0; i < HW; ++i) gx[p * HW + i] += v;
      }
  });
}

// ---------------------------------------------------------------------------
// Activations and normalisation

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  const auto ix = x.id();
  return x.graph().record("relu", std::move(out), {ix}, [ix](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* gx = g.grad_ptr(ix)) {
      auto xv = g.value(ix).data();
      for (std::size_t i = 0; i < xv.size(); ++i)
        if (xv[i] > T{0}) gx[i] += go[i];
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v / (T{1} + std::exp(-v));
  const auto ix = x.id();
  return x.graph().record("silu", std::move(out), {ix}, [ix](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* gx = g.grad_ptr(ix)) {
      auto xv = g.value(ix).data();
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const T s = T{1} / (T{1} + std::exp(-xv[i]));
        gx[i] += go[i] * s * (T{1} + xv[i] * (T{1} - s));
      }
    }
  });
}

/// Group normalisation over (C/groups, H, W) per sample, no affine part.
template <typename T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, T eps = T(1e-5)) {
  const auto& s = x.shape();
  if (s.size() < 2 || groups == 0 || s[1] % groups)
    throw ShapeError("group_norm: channels of " + to_string(s) + " not divisible by " + std::to_string(groups));
  const std::size_t N = s[0];
  const std::size_t per = x.value().size() / (N * groups);
  const std::size_t G = N * groups;
  Tensor<T> out(s);
  std::vector<T> inv_std(G);
  const T* xv = x.value().data().data();
  for (std::size_t p = 0; p < G; ++p) {
    const T* xs = xv + p * per;
    T mean{0};
    for (std::size_t i = 0; i < per; ++i) mean += xs[i];
    mean /= static_cast<T>(per);
    T var{0};
    for (std::size_t i = 0; i < per; ++i) var += (xs[i] - mean) * (xs[i] - mean);
    var /= static_cast<T>(per);
    inv_std[p] = T{1} / std::sqrt(var + eps);
    for (std::size_t i = 0; i < per; ++i) out[p * per + i] = (xs[i] - mean) * inv_std[p];
  }
  const auto ix = x.id();
  return x.graph().record("group_norm", std::move(out), {ix},
                          [ix, G, per, inv_std = std::move(inv_std)](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
                            T* gx = g.grad_ptr(ix);
                            if (!gx) return;
                            const T* yv = out.data().data();
                            for (std::size_t p = 0; p < G; ++p) {
                              T mg{0}, mgy{0};
                              for (std::size_t i = 0; i < per; ++i) {
                                mg += go[p * per + i];
                                mgy += go[p * per + i] * yv[p * per + i];
                              }
                              mg /= static_cast<T>(per);
                              mgy /= static_cast<T>(per);
                              for (std::size_t i = 0; i < per; ++i)
                                gx[p * per + i] += inv_std[p] * (go[p * per + i] - mg - yv[p * per + i] * mgy);
                            }
                          });
}

/// Softmax over the last axis.
template <typename T>
Var<T> softmax(const Var<T>& x) {
  const std::size_t C = detail::last(x.shape());
  const std::size_t R = x.value().size() / C;
  Tensor<T> out(x.shape());
  const T* xv = x.value().data().data();
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = xv + r * C;
    T mx = *std::max_element(row, row + C);
    T z{0};
    for (std::size_t c = 0; c < C; ++c) z += (out[r * C + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= z;
  }
  const auto ix = x.id();
  return x.graph().record("softmax", std::move(out), {ix}, [ix, R, C](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    T* gx = g.grad_ptr(ix);
    if (!gx) return;
    const T* yv = out.data().data();
    for (std::size_t r = 0; r < R; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < C; ++c) dot += go[r * C + c] * yv[r * C + c];
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += yv[r * C + c] * (go[r * C + c] - dot);
    }
  });
}

/// log(sum(exp(x))) over the last axis; the last axis is dropped.
template <typename T>
Var<T> logsumexp(const Var<T>& x) {
  const std::size_t C = detail::last(x.shape());
  const std::size_t R = x.value().size() / C;
  Tensor<T> out(detail::drop_last(x.shape()));
  const T* xv = x.value().data().data();
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = xv + r * C;
    const T mx = *std::max_element(row, row + C);
    T z{0};
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    out[r] = mx + std::log(z);
  }
  const auto ix = x.id();
  return x.graph().record("logsumexp", std::move(out), {ix}, [ix, R, C](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    T* gx = g.grad_ptr(ix);
    if (!gx) return;
    const T* xv = g.value(ix).data().data();
    const T* yv = out.data().data();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += go[r] * std::exp(xv[r * C + c] - yv[r]);
  });
}

/// Scales each row (last axis) to unit Euclidean norm.
template <typename T>
Var<T> l2_normalize(const Var<T>& x, T eps = T(1e-12)) {
  const std::size_t C = detail::last(x.shape());
  const std::size_t R = x.value().size() / C;
  Tensor<T> out(x.shape());
  std::vector<T> norms(R);
  const T* xv = x.value().data().data();
  for (std::size_t r = 0; r < R; ++r) {
    T s{0};
    for (std::size_t c = 0; c < C; ++c) s += xv[r * C + c] * xv[r * C + c];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = xv[r * C + c] / norms[r];
  }
  const auto ix = x.id();
  return x.graph().record("l2_normalize", std::move(out), {ix},
                          [ix, R, C, norms = std::move(norms)](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
                            T* gx = g.grad_ptr(ix);
                            if (!gx) return;
                            const T* yv = out.data().data();
                            for (std::size_t r = 0; r < R; ++r) {
                              T dot{0};
                              for (std::size_t c = 0; c < C; ++c) dot += yv[r * C + c] * go[r * C + c];
                              for (std::size_t c = 0; c < C; ++c)
                                gx[r * C + c] += (go[r * C + c] - yv[r * C + c] * dot) / norms[r];
                            }
                          });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (auto v : x.value().data()) s += v;
  const auto ix = x.id();
  return x.graph().record("sum", Tensor<T>::scalar(s), {ix}, [ix](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* gx = g.grad_ptr(ix))
      for (std::size_t i = 0; i < g.value(ix).size(); ++i) gx[i] += go[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

/// Sum over the last axis; the last axis is dropped.
template <typename T>
Var<T> sum_last(const Var<T>& x) {
  const std::size_t C = detail::last(x.shape());
  const std::size_t R = x.value().size() / C;
  Tensor<T> out(detail::drop_last(x.shape()));
  for (std::size_t r = 0; r < R; ++r) {
    T s{0};
    for (std::size_t c = 0; c < C; ++c) s += x.value()[r * C + c];
    out[r] = s;
  }
  const auto ix = x.id();
  return x.graph().record("sum_last", std::move(out), {ix}, [ix, R, C](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
    if (T* gx = g.grad_ptr(ix))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += go[r];
  });
}

/// Mean of (a - b)^2 over all elements.
template <typename T>
Var<T> squared_error(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("squared_error: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  auto d = sub(a, b);
  return mean(mul(d, d));
}

/// Mean over rows of -log softmax(logits)[label]. logits is (N, classes).
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + to_string(s) + " vs " + std::to_string(labels.size()) +
                     " labels");
  const std::size_t N = s[0], C = s[1];
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= C) throw ParameterError("softmax_cross_entropy: label out of range");
  std::vector<T> probs(N * C);
  T total{0};
  const T* xv = logits.value().data().data();
  for (std::size_t r = 0; r < N; ++r) {
    const T* row = xv + r * C;
    const T mx = *std::max_element(row, row + C);
    T z{0};
    for (std::size_t c = 0; c < C; ++c) z += (probs[r * C + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < C; ++c) probs[r * C + c] /= z;
    total += mx + std::log(z) - row[labels[r]];
  }
  const auto ix = logits.id();
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.graph().record(
      "softmax_cross_entropy", Tensor<T>::scalar(total / static_cast<T>(N)), {ix},
      [ix, N, C, probs = std::move(probs), lab = std::move(lab)](Graph<T>& g, const Tensor<T>& go, [[maybe_unused]] const Tensor<T>& out) {
        if (T* gx = g.grad_ptr(ix))
          for (std::size_t r = 0; r < N; ++r)
            for (std::size_t c = 0; c < C; ++c)
              gx[r * C + c] += go[0] * (probs[r * C + c] - (static_cast<int>(c) == lab[r] ? T{1} : T{0})) /
                               static_cast<T>(N);
      });
}

}  // namespace ops

}  // namespace dmoco
