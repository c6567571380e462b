#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "warpdet/tensor.hpp"

namespace warpdet::ad {

// Reverse-mode tape. Nodes live in an arena owned by the Graph; creation
// order is topological order, so backward() is a single reverse sweep.
struct Node {
  Tensor value;
  Tensor grad;  // allocated only when needs_grad
  bool needs_grad = false;
  std::function<void()> backprop;  // accumulates into parent grads
};

using NodeRef = Node*;

class Graph {
 public:
  NodeRef make(Tensor value, bool needs_grad) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.needs_grad = needs_grad;
    if (needs_grad) n.grad = Tensor(value.shape(), 0.0);
    n.value = std::move(value);
    return &n;
  }

  NodeRef constant(Tensor value) { return make(std::move(value), false); }
  NodeRef leaf(Tensor value) { return make(std::move(value), true); }

  void backward(NodeRef root) {
    if (root->value.numel() != 1) throw std::logic_error("backward: root must be scalar");
    if (!root->needs_grad) return;  // nothing reachable requires gradients
    root->grad[0] += 1.0;
    bool seen_root = false;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!seen_root) {  // nodes created after root cannot feed it
        if (&*it != root) continue;
        seen_root = true;
      }
      if (it->needs_grad && it->backprop) it->backprop();
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;  // stable addresses
};

namespace detail {
inline bool want(std::initializer_list<NodeRef> parents) {
  for (NodeRef p : parents)
    if (p->needs_grad) return true;
  return false;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / structural ops

inline NodeRef add(Graph& g, NodeRef a, NodeRef b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  NodeRef n = g.make(std::move(out), detail::want({a, b}));
  if (n->needs_grad)
    n->backprop = [n, a, b] {
      for (std::size_t i = 0; i < n->grad.numel(); ++i) {
        if (a->needs_grad) a->grad[i] += n->grad[i];
        if (b->needs_grad) b->grad[i] += n->grad[i];
      }
    };
  return n;
}

inline NodeRef scale(Graph& g, NodeRef a, double c) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
  NodeRef n = g.make(std::move(out), a->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, a, c] {
      for (std::size_t i = 0; i < n->grad.numel(); ++i) a->grad[i] += c * n->grad[i];
    };
  return n;
}

// a*ca + b*cb, scalars or same-shape tensors
inline NodeRef add_scaled(Graph& g, NodeRef a, double ca, NodeRef b, double cb) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("add_scaled: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ca * a->value[i] + cb * b->value[i];
  NodeRef n = g.make(std::move(out), detail::want({a, b}));
  if (n->needs_grad)
    n->backprop = [n, a, ca, b, cb] {
      for (std::size_t i = 0; i < n->grad.numel(); ++i) {
        if (a->needs_grad) a->grad[i] += ca * n->grad[i];
        if (b->needs_grad) b->grad[i] += cb * n->grad[i];
      }
    };
  return n;
}

inline NodeRef relu(Graph& g, NodeRef a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  NodeRef n = g.make(std::move(out), a->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, a] {
      for (std::size_t i = 0; i < n->grad.numel(); ++i)
        if (a->value[i] > 0.0) a->grad[i] += n->grad[i];
    };
  return n;
}

inline NodeRef sum(Graph& g, NodeRef a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  NodeRef n = g.make(Tensor::scalar(s), a->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, a] {
      for (std::size_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += n->grad[0];
    };
  return n;
}

inline NodeRef mean(Graph& g, NodeRef a) { return scale(g, sum(g, a), 1.0 / static_cast<double>(a->value.numel())); }

// gather arbitrary flat indices into a vector node
inline NodeRef gather(Graph& g, NodeRef a, std::vector<std::size_t> idx) {
  Tensor out({static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = a->value[idx[i]];
  NodeRef n = g.make(std::move(out), a->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, a, idx = std::move(idx)] {
      for (std::size_t i = 0; i < idx.size(); ++i) a->grad[idx[i]] += n->grad[i];
    };
  return n;
}

inline NodeRef pick(Graph& g, NodeRef a, std::size_t idx) { return gather(g, a, {idx}); }

inline NodeRef reshape(Graph& g, NodeRef a, std::vector<int> shape) {
  Tensor out = Tensor::from(std::move(shape), a->value.vec());
  if (out.numel() != a->value.numel()) throw std::invalid_argument("reshape: numel mismatch");
  NodeRef n = g.make(std::move(out), a->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, a] {
      for (std::size_t i = 0; i < n->grad.numel(); ++i) a->grad[i] += n->grad[i];
    };
  return n;
}

inline NodeRef sigmoid(Graph& g, NodeRef a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  NodeRef n = g.make(std::move(out), a->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, a] {
      for (std::size_t i = 0; i < n->grad.numel(); ++i) {
        const double y = n->value[i];
        a->grad[i] += n->grad[i] * y * (1.0 - y);
      }
    };
  return n;
}

// softmax over a 1-d vector
inline NodeRef softmax(Graph& g, NodeRef a) {
  const std::size_t n_el = a->value.numel();
  Tensor out = a->value;
  double mx = out[0];
  for (std::size_t i = 1; i < n_el; ++i) mx = std::max(mx, out[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n_el; ++i) {
    out[i] = std::exp(out[i] - mx);
    z += out[i];
  }
  for (std::size_t i = 0; i < n_el; ++i) out[i] /= z;
  NodeRef n = g.make(std::move(out), a->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, a] {
      double dot = 0.0;
      for (std::size_t i = 0; i < n->grad.numel(); ++i) dot += n->grad[i] * n->value[i];
      for (std::size_t i = 0; i < n->grad.numel(); ++i) a->grad[i] += n->value[i] * (n->grad[i] - dot);
    };
  return n;
}

// log(max(x, eps)) elementwise; gradient is zero in the clamped region.
// `clamp_hits` (optional) counts clamp events at forward time.
inline NodeRef log_clamped(Graph& g, NodeRef a, double eps, std::uint64_t* clamp_hits = nullptr) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (out[i] < eps) {
      out[i] = std::log(eps);
      if (clamp_hits) ++*clamp_hits;
    } else {
      out[i] = std::log(out[i]);
    }
  }
  NodeRef n = g.make(std::move(out), a->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, a, eps] {
      for (std::size_t i = 0; i < n->grad.numel(); ++i)
        if (a->value[i] >= eps) a->grad[i] += n->grad[i] / a->value[i];
    };
  return n;
}

// out[i] = blocked[i] ? fill : x[i]; no gradient flows through blocked slots
inline NodeRef masked_fill(Graph& g, NodeRef x, const std::vector<char>& blocked, double fill) {
  if (blocked.size() != x->value.numel()) throw std::invalid_argument("masked_fill: mask size mismatch");
  Tensor out = x->value;
  for (std::size_t i = 0; i < out.numel(); ++i)
    if (blocked[i]) out[i] = fill;
  NodeRef n = g.make(std::move(out), x->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, x, blocked] {
      for (std::size_t i = 0; i < n->grad.numel(); ++i)
        if (!blocked[i]) x->grad[i] += n->grad[i];
    };
  return n;
}

// mean((a-b)^2)
inline NodeRef mse(Graph& g, NodeRef a, NodeRef b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("mse: shape mismatch");
  const double inv_n = 1.0 / static_cast<double>(a->value.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < a->value.numel(); ++i) {
    const double d = a->value[i] - b->value[i];
    s += d * d;
  }
  NodeRef n = g.make(Tensor::scalar(s * inv_n), detail::want({a, b}));
  if (n->needs_grad)
    n->backprop = [n, a, b, inv_n] {
      const double go = n->grad[0] * 2.0 * inv_n;
      for (std::size_t i = 0; i < a->value.numel(); ++i) {
        const double d = a->value[i] - b->value[i];
        if (a->needs_grad) a->grad[i] += go * d;
        if (b->needs_grad) b->grad[i] -= go * d;
      }
    };
  return n;
}

// ---------------------------------------------------------------------------
// neural-net ops

// x: [Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout]
inline NodeRef conv2d(Graph& g, NodeRef x, NodeRef w, NodeRef b, int stride, int pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 3 || ws.size() != 4 || xs[0] != ws[1])
    throw std::invalid_argument("conv2d: bad shapes");
  const int cin = xs[0], h = xs[1], wd = xs[2];
  const int cout = ws[0], kh = ws[2], kw = ws[3];
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");

  Tensor out({cout, oh, ow});
  const double* xd = x->value.data();
  const double* wdt = w->value.data();
  for (int co = 0; co < cout; ++co) {
    const double bias = b->value[co];
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias;
        const int iy0 = oy * stride - pad;
        const int ix0 = ox * stride - pad;
        for (int ci = 0; ci < cin; ++ci) {
          const double* xrow = xd + (static_cast<std::size_t>(ci) * h) * wd;
          const double* wrow = wdt + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= wd) continue;
              acc += xrow[iy * wd + ix] * wrow[ky * kw + kx];
            }
          }
        }
        out.at(co, oy, ox) = acc;
      }
    }
  }
  NodeRef n = g.make(std::move(out), detail::want({x, w, b}));
  if (n->needs_grad)
    n->backprop = [n, x, w, b, stride, pad, cin, h, wd, cout, kh, kw, oh, ow] {
      const double* gd = n->grad.data();
      for (int co = 0; co < cout; ++co) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const double go = gd[(static_cast<std::size_t>(co) * oh + oy) * ow + ox];
            if (go == 0.0) continue;
            if (b->needs_grad) b->grad[co] += go;
            const int iy0 = oy * stride - pad;
            const int ix0 = ox * stride - pad;
            for (int ci = 0; ci < cin; ++ci) {
              const std::size_t xoff = static_cast<std::size_t>(ci) * h * wd;
              const std::size_t woff = (static_cast<std::size_t>(co) * cin + ci) * kh * kw;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = iy0 + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ix0 + kx;
                  if (ix < 0 || ix >= wd) continue;
                  const std::size_t xi = xoff + static_cast<std::size_t>(iy) * wd + ix;
                  const std::size_t wi = woff + static_cast<std::size_t>(ky) * kw + kx;
                  if (w->needs_grad) w->grad[wi] += go * x->value[xi];
                  if (x->needs_grad) x->grad[xi] += go * w->value[wi];
                }
              }
            }
          }
        }
      }
    };
  return n;
}

// x: [in], w: [out,in], b: [out]
inline NodeRef linear(Graph& g, NodeRef x, NodeRef w, NodeRef b) {
  const int in = static_cast<int>(x->value.numel());
  const auto& ws = w->value.shape();
  if (ws.size() != 2 || ws[1] != in) throw std::invalid_argument("linear: bad shapes");
  const int out_n = ws[0];
  Tensor out({out_n});
  for (int o = 0; o < out_n; ++o) {
    double acc = b->value[o];
    const double* wrow = w->value.data() + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) acc += wrow[i] * x->value[i];
    out[o] = acc;
  }
  NodeRef n = g.make(std::move(out), detail::want({x, w, b}));
  if (n->needs_grad)
    n->backprop = [n, x, w, b, in, out_n] {
      for (int o = 0; o < out_n; ++o) {
        const double go = n->grad[o];
        if (go == 0.0) continue;
        if (b->needs_grad) b->grad[o] += go;
        const std::size_t off = static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) {
          if (w->needs_grad) w->grad[off + i] += go * x->value[i];
          if (x->needs_grad) x->grad[i] += go * w->value[off + i];
        }
      }
    };
  return n;
}

// Max-pool a rectangular region of a [C,H,W] map onto a fixed out_h x out_w
// grid. The region is given in feature-map coordinates and clamped to at
// least one cell. Ties take the first (row-major) element.
inline NodeRef grid_max_pool(Graph& g, NodeRef x, double x1, double y1, double x2, double y2,
                             int out_h, int out_w) {
  const auto& xs = x->value.shape();
  const int c = xs[0], h = xs[1], w = xs[2];
  int cx1 = std::clamp(static_cast<int>(std::floor(x1)), 0, w - 1);
  int cy1 = std::clamp(static_cast<int>(std::floor(y1)), 0, h - 1);
  int cx2 = std::clamp(static_cast<int>(std::ceil(x2)), cx1 + 1, w);
  int cy2 = std::clamp(static_cast<int>(std::ceil(y2)), cy1 + 1, h);
  const int bw = cx2 - cx1, bh = cy2 - cy1;

  Tensor out({c, out_h, out_w});
  std::vector<std::size_t> argmax(static_cast<std::size_t>(c) * out_h * out_w);
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < out_h; ++oy) {
      int ys = cy1 + (oy * bh) / out_h;
      int ye = cy1 + ((oy + 1) * bh + out_h - 1) / out_h;  // ceil
      if (ye <= ys) ye = ys + 1;
      for (int ox = 0; ox < out_w; ++ox) {
        int xs0 = cx1 + (ox * bw) / out_w;
        int xe = cx1 + ((ox + 1) * bw + out_w - 1) / out_w;
        if (xe <= xs0) xe = xs0 + 1;
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = 0;
        for (int yy = ys; yy < ye; ++yy) {
          for (int xx = xs0; xx < xe; ++xx) {
            const std::size_t i = (static_cast<std::size_t>(ch) * h + yy) * w + xx;
            if (x->value[i] > best) {
              best = x->value[i];
              best_i = i;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(ch) * out_h + oy) * out_w + ox;
        out[o] = best;
        argmax[o] = best_i;
      }
    }
  }
  NodeRef n = g.make(std::move(out), x->needs_grad);
  if (n->needs_grad)
    n->backprop = [n, x, argmax = std::move(argmax)] {
      for (std::size_t o = 0; o < argmax.size(); ++o) x->grad[argmax[o]] += n->grad[o];
    };
  return n;
}

// ---------------------------------------------------------------------------
// gradient checking helper (used by tests and the acceptance suite)

// Relative error with the usual unit floor on the denominator, so that
// near-zero gradients are compared absolutely instead of amplifying
// finite-difference rounding noise.
inline double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace warpdet::ad
