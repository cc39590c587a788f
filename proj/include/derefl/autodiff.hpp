#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "derefl/tensor.hpp"

// Eager reverse-mode automatic differentiation over Tensor4 values.
//
// Each op builds a Var node holding the forward result, pointers to its
// parents, and a closure that scatters the node's gradient back into them.
// backward() seeds a scalar root with 1 and replays the closures in reverse
// topological order.  Graphs are DAGs (a node may feed several consumers,
// e.g. skip connections); gradients accumulate additively at the join.
//
// All spatial ops use stride 1 and zero-padded "same" output, so every
// activation in a network keeps the input's height and width.

namespace derefl::ad {

namespace detail {

// The three correlation kernels below are the whole compute budget of the
// project, so they are written for the optimizer: per (channel, tap) pair
// the inner x-loop walks both buffers contiguously.
//
// Shapes: X is N x Q x H x W, Y is N x P x H x W, W is P x Q x k x k with
// k odd and r = k / 2.  Out-of-range input samples read as zero.

/// Y[n,p,y,x] += sum_{q,ky,kx} W[p,q,ky,kx] * X[n,q, y+ky-r, x+kx-r]
inline void corr2d_acc(const double* X, const double* W, double* Y, int N,
                       int Q, int P, int H, int Wd, int k) {
  const int r = k / 2;
  const std::size_t plane = static_cast<std::size_t>(H) * Wd;
  for (int n = 0; n < N; ++n) {
    for (int p = 0; p < P; ++p) {
      double* yp = Y + (static_cast<std::size_t>(n) * P + p) * plane;
      for (int q = 0; q < Q; ++q) {
        const double* xp = X + (static_cast<std::size_t>(n) * Q + q) * plane;
        const double* wp =
            W + (static_cast<std::size_t>(p) * Q + q) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - r;
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - r;
            const int x0 = std::max(0, -dx), x1 = std::min(Wd, Wd - dx);
            const double wv = wp[ky * k + kx];
            if (wv == 0.0) continue;
            for (int y = y0; y < y1; ++y) {
              double* yrow = yp + static_cast<std::size_t>(y) * Wd;
              const double* xrow =
                  xp + static_cast<std::size_t>(y + dy) * Wd + dx;
              for (int x = x0; x < x1; ++x) yrow[x] += wv * xrow[x];
            }
          }
        }
      }
    }
  }
}

/// Adjoint of corr2d_acc in its image argument:
/// X[n,q,u,v] += sum_{p,ky,kx} W[p,q,ky,kx] * Y[n,p, u-ky+r, v-kx+r]
inline void corr2d_adj_acc(const double* Y, const double* W, double* X, int N,
                           int Q, int P, int H, int Wd, int k) {
  const int r = k / 2;
  const std::size_t plane = static_cast<std::size_t>(H) * Wd;
  for (int n = 0; n < N; ++n) {
    for (int q = 0; q < Q; ++q) {
      double* xp = X + (static_cast<std::size_t>(n) * Q + q) * plane;
      for (int p = 0; p < P; ++p) {
        const double* yp = Y + (static_cast<std::size_t>(n) * P + p) * plane;
        const double* wp =
            W + (static_cast<std::size_t>(p) * Q + q) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          const int dy = ky - r;
          const int u0 = std::max(0, dy), u1 = std::min(H, H + dy);
          for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - r;
            const int v0 = std::max(0, dx), v1 = std::min(Wd, Wd + dx);
            const double wv = wp[ky * k + kx];
            if (wv == 0.0) continue;
            for (int u = u0; u < u1; ++u) {
              double* xrow = xp + static_cast<std::size_t>(u) * Wd;
              const double* yrow =
                  yp + static_cast<std::size_t>(u - dy) * Wd - dx;
              for (int v = v0; v < v1; ++v) xrow[v] += wv * yrow[v];
            }
          }
        }
      }
    }
  }
}

/// Weight gradient shared by both conv directions:
/// GW[p,q,ky,kx] += sum_{n,y,x} Y[n,p,y,x] * X[n,q, y+ky-r, x+kx-r]
inline void corr2d_gradw_acc(const double* Y, const double* X, double* GW,
                             int N, int Q, int P, int H, int Wd, int k) {
  const int r = k / 2;
  const std::size_t plane = static_cast<std::size_t>(H) * Wd;
  for (int p = 0; p < P; ++p) {
    for (int q = 0; q < Q; ++q) {
      double* gw = GW + (static_cast<std::size_t>(p) * Q + q) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        const int dy = ky - r;
        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
        for (int kx = 0; kx < k; ++kx) {
          const int dx = kx - r;
          const int x0 = std::max(0, -dx), x1 = std::min(Wd, Wd - dx);
          double acc = 0.0;
          for (int n = 0; n < N; ++n) {
            const double* yp =
                Y + (static_cast<std::size_t>(n) * P + p) * plane;
            const double* xp =
                X + (static_cast<std::size_t>(n) * Q + q) * plane;
            for (int y = y0; y < y1; ++y) {
              const double* yrow = yp + static_cast<std::size_t>(y) * Wd;
              const double* xrow =
                  xp + static_cast<std::size_t>(y + dy) * Wd + dx;
              for (int x = x0; x < x1; ++x) acc += yrow[x] * xrow[x];
            }
          }
          gw[ky * k + kx] += acc;
        }
      }
    }
  }
}

}  // namespace detail

class Var;
using VarPtr = std::shared_ptr<Var>;

/// One node of the computation graph.
class Var {
 public:
  Tensor4 t;
  bool requires_grad = false;  // leaf parameter flag
  bool needs_grad = false;     // any leaf below requires grad
  std::vector<VarPtr> parents;
  std::function<void(Var&)> backward_fn;  // scatters t.g into parents

  explicit Var(Tensor4 tensor) : t(std::move(tensor)) {}
};

/// Leaf holding data or a trainable parameter.
inline VarPtr make_leaf(Tensor4 t, bool requires_grad = false) {
  auto v = std::make_shared<Var>(std::move(t));
  v->requires_grad = requires_grad;
  v->needs_grad = requires_grad;
  return v;
}

inline VarPtr make_const(Tensor4 t) { return make_leaf(std::move(t), false); }

namespace detail {

inline VarPtr make_node(Tensor4 value, std::vector<VarPtr> parents,
                        std::function<void(Var&)> backward_fn) {
  auto v = std::make_shared<Var>(std::move(value));
  for (const auto& p : parents) {
    if (p->needs_grad) v->needs_grad = true;
  }
  // Nodes on frozen branches never run a backward pass; dropping their
  // edges and closure up front releases parent activations as soon as the
  // data flow moves past them (what makes whole-photo inference cheap).
  if (v->needs_grad) {
    v->parents = std::move(parents);
    v->backward_fn = std::move(backward_fn);
  }
  return v;
}

inline void check_conv_args(const Var& x, const Var& w, const Var* b,
                            int in_channels, int out_channels,
                            const char* op) {
  if (w.t.h != w.t.w || w.t.h % 2 == 0) {
    throw std::invalid_argument(std::string(op) +
                                ": kernel must be square with odd side, got " +
                                w.t.shape_str());
  }
  if (x.t.c != in_channels) {
    throw std::invalid_argument(std::string(op) + ": input has " +
                                std::to_string(x.t.c) + " channels, weight " +
                                w.t.shape_str() + " expects " +
                                std::to_string(in_channels));
  }
  if (b != nullptr &&
      (b->t.c != out_channels || b->t.n != 1 || b->t.h != 1 || b->t.w != 1)) {
    throw std::invalid_argument(std::string(op) + ": bias must be 1x" +
                                std::to_string(out_channels) +
                                "x1x1, got " + b->t.shape_str());
  }
}

inline void fill_bias(Tensor4& out, const Var* b) {
  if (b == nullptr) return;
  const std::size_t plane = out.plane();
  for (int n = 0; n < out.n; ++n) {
    for (int c = 0; c < out.c; ++c) {
      double* op = out.v.data() + (static_cast<std::size_t>(n) * out.c + c) * plane;
      const double bv = b->t.v[c];
      for (std::size_t i = 0; i < plane; ++i) op[i] += bv;
    }
  }
}

inline void accumulate_bias_grad(const Tensor4& gout, Var& b) {
  b.t.ensure_grad();
  const std::size_t plane = gout.plane();
  for (int n = 0; n < gout.n; ++n) {
    for (int c = 0; c < gout.c; ++c) {
      const double* gp =
          gout.g.data() + (static_cast<std::size_t>(n) * gout.c + c) * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
      b.t.g[c] += acc;
    }
  }
}

}  // namespace detail

/// 2-D convolution (cross-correlation), stride 1, zero-padded same output.
/// Weight layout: out_channels x in_channels x k x k.  Bias may be null.
inline VarPtr conv2d(const VarPtr& x, const VarPtr& w, const VarPtr& b) {
  const int P = w->t.n, Q = w->t.c, k = w->t.h;
  detail::check_conv_args(*x, *w, b.get(), Q, P, "conv2d");
  Tensor4 out(x->t.n, P, x->t.h, x->t.w);
  detail::fill_bias(out, b.get());
  detail::corr2d_acc(x->t.v.data(), w->t.v.data(), out.v.data(), x->t.n, Q, P,
                     x->t.h, x->t.w, k);
  std::vector<VarPtr> parents{x, w};
  if (b) parents.push_back(b);
  return detail::make_node(
      std::move(out), std::move(parents), [x, w, b, Q, P, k](Var& self) {
        const Tensor4& go = self.t;
        if (x->needs_grad) {
          x->t.ensure_grad();
          detail::corr2d_adj_acc(go.g.data(), w->t.v.data(), x->t.g.data(),
                                 go.n, Q, P, go.h, go.w, k);
        }
        if (w->needs_grad) {
          w->t.ensure_grad();
          detail::corr2d_gradw_acc(go.g.data(), x->t.v.data(), w->t.g.data(),
                                   go.n, Q, P, go.h, go.w, k);
        }
        if (b && b->needs_grad) detail::accumulate_bias_grad(go, *b);
      });
}

/// Transposed 2-D convolution: the exact adjoint of conv2d with the same
/// weight, i.e. <conv2d(x, W), y> == <x, tconv2d(y, W)>.  Weight layout:
/// in_channels x out_channels x k x k (dim 0 indexes this layer's input).
inline VarPtr tconv2d(const VarPtr& x, const VarPtr& w, const VarPtr& b) {
  const int A = w->t.n, B = w->t.c, k = w->t.h;
  detail::check_conv_args(*x, *w, b.get(), A, B, "tconv2d");
  Tensor4 out(x->t.n, B, x->t.h, x->t.w);
  detail::fill_bias(out, b.get());
  // Forward scatters through the adjoint kernel: x plays the P-channel role.
  detail::corr2d_adj_acc(x->t.v.data(), w->t.v.data(), out.v.data(), x->t.n,
                         B, A, x->t.h, x->t.w, k);
  std::vector<VarPtr> parents{x, w};
  if (b) parents.push_back(b);
  return detail::make_node(
      std::move(out), std::move(parents), [x, w, b, A, B, k](Var& self) {
        const Tensor4& go = self.t;
        if (x->needs_grad) {
          x->t.ensure_grad();
          detail::corr2d_acc(go.g.data(), w->t.v.data(), x->t.g.data(), go.n,
                             B, A, go.h, go.w, k);
        }
        if (w->needs_grad) {
          w->t.ensure_grad();
          detail::corr2d_gradw_acc(x->t.v.data(), go.g.data(), w->t.g.data(),
                                   go.n, B, A, go.h, go.w, k);
        }
        if (b && b->needs_grad) detail::accumulate_bias_grad(go, *b);
      });
}

/// Elementwise max(0, x).  The derivative at exactly 0 is taken as 0.
inline VarPtr relu(const VarPtr& x) {
  Tensor4 out(x->t.n, x->t.c, x->t.h, x->t.w);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out.v[i] = x->t.v[i] > 0.0 ? x->t.v[i] : 0.0;
  }
  return detail::make_node(std::move(out), {x}, [x](Var& self) {
    if (!x->needs_grad) return;
    x->t.ensure_grad();
    for (std::size_t i = 0; i < self.t.numel(); ++i) {
      if (x->t.v[i] > 0.0) x->t.g[i] += self.t.g[i];
    }
  });
}

namespace detail {

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.t.same_shape(b.t)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.t.shape_str() + " vs " + b.t.shape_str());
  }
}

}  // namespace detail

inline VarPtr add(const VarPtr& a, const VarPtr& b) {
  detail::check_same_shape(*a, *b, "add");
  Tensor4 out = a->t;
  out.g.clear();
  for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] += b->t.v[i];
  return detail::make_node(std::move(out), {a, b}, [a, b](Var& self) {
    if (a->needs_grad) {
      a->t.ensure_grad();
      for (std::size_t i = 0; i < self.t.numel(); ++i)
        a->t.g[i] += self.t.g[i];
    }
    if (b->needs_grad) {
      b->t.ensure_grad();
      for (std::size_t i = 0; i < self.t.numel(); ++i)
        b->t.g[i] += self.t.g[i];
    }
  });
}

inline VarPtr subtract(const VarPtr& a, const VarPtr& b) {
  detail::check_same_shape(*a, *b, "subtract");
  Tensor4 out = a->t;
  out.g.clear();
  for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] -= b->t.v[i];
  return detail::make_node(std::move(out), {a, b}, [a, b](Var& self) {
    if (a->needs_grad) {
      a->t.ensure_grad();
      for (std::size_t i = 0; i < self.t.numel(); ++i)
        a->t.g[i] += self.t.g[i];
    }
    if (b->needs_grad) {
      b->t.ensure_grad();
      for (std::size_t i = 0; i < self.t.numel(); ++i)
        b->t.g[i] -= self.t.g[i];
    }
  });
}

/// Reduces a tensor to the scalar sum of its elements.
inline VarPtr sum_all(const VarPtr& x) {
  Tensor4 out(1, 1, 1, 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < x->t.numel(); ++i) acc += x->t.v[i];
  out.v[0] = acc;
  return detail::make_node(std::move(out), {x}, [x](Var& self) {
    if (!x->needs_grad) return;
    x->t.ensure_grad();
    const double g0 = self.t.g[0];
    for (std::size_t i = 0; i < x->t.numel(); ++i) x->t.g[i] += g0;
  });
}

/// Reduces a tensor to the scalar sum of its squared elements.
inline VarPtr sum_squares(const VarPtr& x) {
  Tensor4 out(1, 1, 1, 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < x->t.numel(); ++i) acc += x->t.v[i] * x->t.v[i];
  out.v[0] = acc;
  return detail::make_node(std::move(out), {x}, [x](Var& self) {
    if (!x->needs_grad) return;
    x->t.ensure_grad();
    const double g0 = self.t.g[0];
    for (std::size_t i = 0; i < x->t.numel(); ++i)
      x->t.g[i] += g0 * 2.0 * x->t.v[i];
  });
}

/// Multiplies every element by a compile-time-constant scalar.
inline VarPtr scale(const VarPtr& x, double s) {
  Tensor4 out = x->t;
  out.g.clear();
  for (std::size_t i = 0; i < out.numel(); ++i) out.v[i] *= s;
  return detail::make_node(std::move(out), {x}, [x, s](Var& self) {
    if (!x->needs_grad) return;
    x->t.ensure_grad();
    for (std::size_t i = 0; i < self.t.numel(); ++i)
      x->t.g[i] += s * self.t.g[i];
  });
}

/// Reverse pass from a scalar root, seeding its gradient with 1.
///
/// The topological order is built by an iterative post-order depth-first
/// search that visits parents in their stored order, so replay order (and
/// with it every floating-point accumulation) is identical across runs.
inline void backward(const VarPtr& root) {
  if (root->t.numel() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got " +
                                root->t.shape_str());
  }
  std::vector<Var*> order;
  std::unordered_set<Var*> visited;
  std::vector<std::pair<Var*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Var* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->t.ensure_grad();
  root->t.g[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Var* node = *it;
    if (node->needs_grad && node->backward_fn && !node->t.g.empty()) {
      node->backward_fn(*node);
    }
  }
}

/// Clears the gradient slots of a parameter set before a fresh pass.
inline void zero_grads(const std::vector<VarPtr>& params) {
  for (const auto& p : params) p->t.zero_grad();
}

}  // namespace derefl::ad
