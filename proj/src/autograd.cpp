// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dadet {

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst.data[i] += src.data[i];
}

template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* cols) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* dx) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + static_cast<std::size_t>(oy) * Wo;
          T* dst = dx + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct BilinearTap {
  int y0, x0, y1, x1;
  double w00, w01, w10, w11;
  bool valid;
};

BilinearTap bilinear_tap(double y, double x, int H, int W) {
  BilinearTap t{0, 0, 0, 0, 0, 0, 0, 0, false};
  if (y < -1.0 || y > H || x < -1.0 || x > W) return t;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y0 = static_cast<int>(y);
  int x0 = static_cast<int>(x);
  int y1, x1;
  if (y0 >= H - 1) {
    y0 = y1 = H - 1;
    y = y0;
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= W - 1) {
    x0 = x1 = W - 1;
    x = x0;
  } else {
    x1 = x0 + 1;
  }
  const double ly = y - y0, lx = x - x0, hy = 1.0 - ly, hx = 1.0 - lx;
  t = {y0, x0, y1, x1, hy * hx, hy * lx, ly * hx, ly * lx, true};
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Var Graph<T>::input(Tensor<T> value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Graph<T>::param(const std::string& name, const Tensor<T>& value) {
  auto it = param_ids_.find(name);
  if (it != param_ids_.end()) return Var{it->second};
  Var v = input(value, true);
  param_ids_[name] = v.id;
  return v;
}

template <typename T>
Var Graph<T>::push(Tensor<T> value, const std::vector<Var>& parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (Var p : parents) n.requires_grad = n.requires_grad || nodes_.at(p.id).requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Graph<T>::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.shape != n.value.shape || n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape);
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var root, T seed) {
  require(nodes_.at(root.id).value.size() == 1, "backward root must be a scalar");
  for (Node& n : nodes_) n.grad = Tensor<T>();
  grad(root).data[0] = seed;
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && !n.grad.empty()) n.backward(*this);
  }
}

template <typename T>
std::map<std::string, Tensor<T>> Graph<T>::param_grads() const {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, id] : param_ids_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    out[name] = n.grad.empty() ? Tensor<T>(n.value.shape) : n.grad;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  require(g.shape(a) == g.shape(b),
          "add: shape mismatch " + shape_str(g.shape(a)) + " vs " + shape_str(g.shape(b)));
  Tensor<T> out = g.value(a);
  accumulate(out, g.value(b));
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {a, b}, [a, b, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    if (gr.requires_grad(a)) accumulate(gr.grad(a), go);
    if (gr.requires_grad(b)) accumulate(gr.grad(b), go);
  });
}

template <typename T>
Var scale(Graph<T>& g, Var x, T s) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.data) v *= s;
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {x}, [x, s, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx.data[i] += s * go.data[i];
  });
}

template <typename T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& xs, const std::vector<T>& ws) {
  require(xs.size() == ws.size(), "weighted_sum: size mismatch");
  T total = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    require(g.value(xs[k]).size() == 1, "weighted_sum: inputs must be scalars");
    total += ws[k] * g.scalar(xs[k]);
  }
  const int id = static_cast<int>(g.size());
  return g.push(Tensor<T>({1}, total), xs, [xs, ws, id](Graph<T>& gr) {
    const T go = gr.grad(Var{id}).data[0];
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (gr.requires_grad(xs[k])) gr.grad(xs[k]).data[0] += ws[k] * go;
    }
  });
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {x}, [x, id](Graph<T>& gr) {
    const Tensor<T>& y = gr.value(Var{id});
    const Tensor<T>& go = gr.grad(Var{id});
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (y.data[i] > T(0)) gx.data[i] += go.data[i];
    }
  });
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {x}, [x, id](Graph<T>& gr) {
    const Tensor<T>& y = gr.value(Var{id});
    const Tensor<T>& go = gr.grad(Var{id});
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx.data[i] += go.data[i] * y.data[i] * (T(1) - y.data[i]);
  });
}

template <typename T>
Var reshape(Graph<T>& g, Var x, std::vector<int> shape) {
  Tensor<T> out = g.value(x).reshaped(std::move(shape));
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {x}, [x, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx.data[i] += go.data[i];
  });
}

// ---------------------------------------------------------------------------
// Convolution

template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b, int stride, int pad) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(w);
  require(xv.ndim() == 3, "conv2d: input must be [C,H,W], got " + shape_str(xv.shape));
  require(wv.ndim() == 4 && wv.dim(2) == wv.dim(3), "conv2d: weight must be [O,C,k,k]");
  require(wv.dim(1) == xv.dim(0), "conv2d: channel mismatch " + std::to_string(wv.dim(1)) + " vs " +
                                      std::to_string(xv.dim(0)));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int O = wv.dim(0), k = wv.dim(2);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  require(Ho > 0 && Wo > 0, "conv2d: empty output");
  const int K = C * k * k, P = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  auto cols = std::make_shared<std::vector<T>>();
  if (!direct) {
    cols->resize(static_cast<std::size_t>(K) * P);
    im2col(xv.data.data(), C, H, W, k, stride, pad, Ho, Wo, cols->data());
  }
  const T* colp = direct ? xv.data.data() : cols->data();

  Tensor<T> out({O, Ho, Wo});
  MatMap<T> Y(out.data.data(), O, P);
  ConstMatMap<T> Wm(wv.data.data(), O, K);
  ConstMatMap<T> X(colp, K, P);
  Y.noalias() = Wm * X;
  const Tensor<T>& bv = g.value(b);
  require(bv.size() == static_cast<std::size_t>(O), "conv2d: bias size mismatch");
  for (int o = 0; o < O; ++o) Y.row(o).array() += bv.data[static_cast<std::size_t>(o)];

  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {x, w, b},
                [=](Graph<T>& gr) {
                  const Tensor<T>& go = gr.grad(Var{id});
                  ConstMatMap<T> dY(go.data.data(), O, P);
                  const T* cp = direct ? gr.value(x).data.data() : cols->data();
                  ConstMatMap<T> Xc(cp, K, P);
                  if (gr.requires_grad(w)) {
                    MatMap<T> dW(gr.grad(w).data.data(), O, K);
                    dW.noalias() += dY * Xc.transpose();
                  }
                  if (gr.requires_grad(b)) {
                    Tensor<T>& db = gr.grad(b);
                    for (int o = 0; o < O; ++o) db.data[static_cast<std::size_t>(o)] += dY.row(o).sum();
                  }
                  if (gr.requires_grad(x)) {
                    ConstMatMap<T> Wt(gr.value(w).data.data(), O, K);
                    Tensor<T>& gx = gr.grad(x);
                    if (direct) {
                      MatMap<T> dX(gx.data.data(), K, P);
                      dX.noalias() += Wt.transpose() * dY;
                    } else {
                      RowMat<T> dcols = Wt.transpose() * dY;
                      col2im(dcols.data(), C, H, W, k, stride, pad, Ho, Wo, gx.data.data());
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Pooling, dense layers, attention plumbing

template <typename T>
Var global_avg_pool(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  require(xv.ndim() == 3, "global_avg_pool: input must be [C,H,W]");
  const int C = xv.dim(0);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor<T> out({C});
  for (int c = 0; c < C; ++c) {
    T s = 0;
    const T* p = xv.data.data() + c * hw;
    for (std::size_t i = 0; i < hw; ++i) s += p[i];
    out.data[static_cast<std::size_t>(c)] = s / static_cast<T>(hw);
  }
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {x}, [x, id, C, hw](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    Tensor<T>& gx = gr.grad(x);
    for (int c = 0; c < C; ++c) {
      const T v = go.data[static_cast<std::size_t>(c)] / static_cast<T>(hw);
      T* p = gx.data.data() + c * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += v;
    }
  });
}

template <typename T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(w);
  require(wv.ndim() == 2, "linear: weight must be [out,in]");
  const int out_dim = wv.dim(0), in_dim = wv.dim(1);
  const bool vec = xv.ndim() == 1;
  const int n = vec ? 1 : xv.dim(0);
  const int xin = vec ? xv.dim(0) : xv.dim(1);
  require(xv.ndim() <= 2 && xin == in_dim,
          "linear: input width " + std::to_string(xin) + " does not match weight " + shape_str(wv.shape));
  require(g.value(b).size() == static_cast<std::size_t>(out_dim), "linear: bias size mismatch");
  Tensor<T> out(vec ? std::vector<int>{out_dim} : std::vector<int>{n, out_dim});
  if (n > 0) {
    ConstMatMap<T> X(xv.data.data(), n, in_dim);
    ConstMatMap<T> Wm(wv.data.data(), out_dim, in_dim);
    MatMap<T> Y(out.data.data(), n, out_dim);
    Y.noalias() = X * Wm.transpose();
    const T* bp = g.value(b).data.data();
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out_dim; ++o) Y(i, o) += bp[o];
  }
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {x, w, b}, [=](Graph<T>& gr) {
    if (n == 0) return;
    const Tensor<T>& go = gr.grad(Var{id});
    ConstMatMap<T> dY(go.data.data(), n, out_dim);
    ConstMatMap<T> X(gr.value(x).data.data(), n, in_dim);
    if (gr.requires_grad(w)) {
      MatMap<T> dW(gr.grad(w).data.data(), out_dim, in_dim);
      dW.noalias() += dY.transpose() * X;
    }
    if (gr.requires_grad(b)) {
      Tensor<T>& db = gr.grad(b);
      for (int o = 0; o < out_dim; ++o) db.data[static_cast<std::size_t>(o)] += dY.col(o).sum();
    }
    if (gr.requires_grad(x)) {
      ConstMatMap<T> Wm(gr.value(w).data.data(), out_dim, in_dim);
      MatMap<T> dX(gr.grad(x).data.data(), n, in_dim);
      dX.noalias() += dY * Wm;
    }
  });
}

template <typename T>
Var softmax(Graph<T>& g, Var logits) {
  const Tensor<T>& lv = g.value(logits);
  require(lv.ndim() == 1 && lv.size() > 0, "softmax: expects a non-empty vector");
  Tensor<T> out(lv.shape);
  const T mx = *std::max_element(lv.data.begin(), lv.data.end());
  T z = 0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    out.data[i] = std::exp(lv.data[i] - mx);
    z += out.data[i];
  }
  for (auto& v : out.data) v /= z;
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {logits}, [logits, id](Graph<T>& gr) {
    const Tensor<T>& y = gr.value(Var{id});
    const Tensor<T>& go = gr.grad(Var{id});
    T dot = 0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += go.data[i] * y.data[i];
    Tensor<T>& gx = gr.grad(logits);
    for (std::size_t i = 0; i < y.size(); ++i) gx.data[i] += y.data[i] * (go.data[i] - dot);
  });
}

template <typename T>
Var channel_scale(Graph<T>& g, Var x, Var e) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& ev = g.value(e);
  require(xv.ndim() == 3 && ev.size() == static_cast<std::size_t>(xv.dim(0)),
          "channel_scale: excitation length must equal channel count");
  const int C = xv.dim(0);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
  Tensor<T> out = xv;
  for (int c = 0; c < C; ++c) {
    const T s = ev.data[static_cast<std::size_t>(c)];
    T* p = out.data.data() + c * hw;
    for (std::size_t i = 0; i < hw; ++i) p[i] *= s;
  }
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {x, e}, [x, e, id, C, hw](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    const Tensor<T>& xv2 = gr.value(x);
    const Tensor<T>& ev2 = gr.value(e);
    const bool gx_on = gr.requires_grad(x), ge_on = gr.requires_grad(e);
    for (int c = 0; c < C; ++c) {
      const T* gp = go.data.data() + c * hw;
      if (gx_on) {
        T* dx = gr.grad(x).data.data() + c * hw;
        const T s = ev2.data[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < hw; ++i) dx[i] += s * gp[i];
      }
      if (ge_on) {
        const T* xp = xv2.data.data() + c * hw;
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += gp[i] * xp[i];
        gr.grad(e).data[static_cast<std::size_t>(c)] += acc;
      }
    }
  });
}

template <typename T>
Var stack(Graph<T>& g, const std::vector<Var>& xs) {
  require(!xs.empty(), "stack: no inputs");
  const std::size_t d = g.value(xs[0]).size();
  Tensor<T> out({static_cast<int>(xs.size()), static_cast<int>(d)});
  for (std::size_t k = 0; k < xs.size(); ++k) {
    require(g.value(xs[k]).size() == d, "stack: inputs differ in size");
    std::copy(g.value(xs[k]).data.begin(), g.value(xs[k]).data.end(), out.data.begin() + k * d);
  }
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), xs, [xs, d, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (!gr.requires_grad(xs[k])) continue;
      Tensor<T>& gx = gr.grad(xs[k]);
      for (std::size_t i = 0; i < d; ++i) gx.data[i] += go.data[k * d + i];
    }
  });
}

template <typename T>
Var mix_rows(Graph<T>& g, Var a, Var rows) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& rv = g.value(rows);
  require(rv.ndim() == 2 && av.size() == static_cast<std::size_t>(rv.dim(0)), "mix_rows: shape mismatch");
  const int N = rv.dim(0), d = rv.dim(1);
  Tensor<T> out({d});
  for (int k = 0; k < N; ++k)
    for (int i = 0; i < d; ++i) out.data[static_cast<std::size_t>(i)] += av.data[k] * rv.data[k * d + i];
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {a, rows}, [a, rows, N, d, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    const Tensor<T>& av2 = gr.value(a);
    const Tensor<T>& rv2 = gr.value(rows);
    if (gr.requires_grad(a)) {
      Tensor<T>& ga = gr.grad(a);
      for (int k = 0; k < N; ++k) {
        T acc = 0;
        for (int i = 0; i < d; ++i) acc += go.data[i] * rv2.data[k * d + i];
        ga.data[k] += acc;
      }
    }
    if (gr.requires_grad(rows)) {
      Tensor<T>& gr_rows = gr.grad(rows);
      for (int k = 0; k < N; ++k)
        for (int i = 0; i < d; ++i) gr_rows.data[k * d + i] += av2.data[k] * go.data[i];
    }
  });
}

template <typename T>
Var concat_rows(Graph<T>& g, const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_rows: no inputs");
  const int d = g.value(xs[0]).dim(1);
  int n = 0;
  for (Var x : xs) {
    require(g.value(x).ndim() == 2 && g.value(x).dim(1) == d, "concat_rows: width mismatch");
    n += g.value(x).dim(0);
  }
  Tensor<T> out({n, d});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (Var x : xs) {
    offsets.push_back(off);
    std::copy(g.value(x).data.begin(), g.value(x).data.end(), out.data.begin() + off);
    off += g.value(x).size();
  }
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), xs, [xs, offsets, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (!gr.requires_grad(xs[k]) || gr.value(xs[k]).empty()) continue;
      Tensor<T>& gx = gr.grad(xs[k]);
      for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += go.data[offsets[k] + i];
    }
  });
}

// ---------------------------------------------------------------------------
// ROI Align

template <typename T>
Var roi_align(Graph<T>& g, Var feat, const std::vector<std::array<double, 4>>& boxes, int pooled,
              double spatial_scale, int sampling) {
  const Tensor<T>& fv = g.value(feat);
  require(fv.ndim() == 3, "roi_align: features must be [C,H,W]");
  require(pooled > 0 && sampling > 0, "roi_align: bad pooling parameters");
  const int C = fv.dim(0), H = fv.dim(1), W = fv.dim(2);
  const int n = static_cast<int>(boxes.size());
  const int cell = pooled * pooled;
  const int width = C * cell;

  // Precomputed taps: for every (roi, bin) a list of weighted samples shared across channels.
  struct Tap {
    int offset;  // y * W + x
    T weight;
  };
  auto taps = std::make_shared<std::vector<std::vector<Tap>>>(static_cast<std::size_t>(n) * cell);
  const double inv_count = 1.0 / (sampling * sampling);
  for (int r = 0; r < n; ++r) {
    const auto& bx = boxes[static_cast<std::size_t>(r)];
    const double x1 = bx[0] * spatial_scale - 0.5, y1 = bx[1] * spatial_scale - 0.5;
    const double x2 = bx[2] * spatial_scale - 0.5, y2 = bx[3] * spatial_scale - 0.5;
    const double bin_w = (x2 - x1) / pooled, bin_h = (y2 - y1) / pooled;
    for (int py = 0; py < pooled; ++py) {
      for (int px = 0; px < pooled; ++px) {
        auto& list = (*taps)[static_cast<std::size_t>(r) * cell + py * pooled + px];
        for (int sy = 0; sy < sampling; ++sy) {
          const double y = y1 + py * bin_h + (sy + 0.5) * bin_h / sampling;
          for (int sx = 0; sx < sampling; ++sx) {
            const double x = x1 + px * bin_w + (sx + 0.5) * bin_w / sampling;
            const BilinearTap t = bilinear_tap(y, x, H, W);
            if (!t.valid) continue;
            list.push_back({t.y0 * W + t.x0, static_cast<T>(t.w00 * inv_count)});
            list.push_back({t.y0 * W + t.x1, static_cast<T>(t.w01 * inv_count)});
            list.push_back({t.y1 * W + t.x0, static_cast<T>(t.w10 * inv_count)});
            list.push_back({t.y1 * W + t.x1, static_cast<T>(t.w11 * inv_count)});
          }
        }
      }
    }
  }

  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<T> out({n, width});
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < C; ++c) {
      const T* fp = fv.data.data() + c * plane;
      T* op = out.data.data() + static_cast<std::size_t>(r) * width + c * cell;
      for (int b = 0; b < cell; ++b) {
        T acc = 0;
        for (const Tap& t : (*taps)[static_cast<std::size_t>(r) * cell + b]) acc += t.weight * fp[t.offset];
        op[b] = acc;
      }
    }
  }
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {feat}, [=](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    Tensor<T>& gf = gr.grad(feat);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < C; ++c) {
        T* fp = gf.data.data() + c * plane;
        const T* gp = go.data.data() + static_cast<std::size_t>(r) * width + c * cell;
        for (int b = 0; b < cell; ++b) {
          const T v = gp[b];
          if (v == T(0)) continue;
          for (const Tap& t : (*taps)[static_cast<std::size_t>(r) * cell + b]) fp[t.offset] += t.weight * v;
        }
      }
    }
  });
}

#define DADET_INSTANTIATE_AUTOGRAD(T)                                                                   \
  template class Graph<T>;                                                                               \
  template Var add<T>(Graph<T>&, Var, Var);                                                              \
  template Var scale<T>(Graph<T>&, Var, T);                                                              \
  template Var weighted_sum<T>(Graph<T>&, const std::vector<Var>&, const std::vector<T>&);               \
  template Var relu<T>(Graph<T>&, Var);                                                                  \
  template Var sigmoid<T>(Graph<T>&, Var);                                                               \
  template Var reshape<T>(Graph<T>&, Var, std::vector<int>);                                             \
  template Var conv2d<T>(Graph<T>&, Var, Var, Var, int, int);                                            \
  template Var global_avg_pool<T>(Graph<T>&, Var);                                                       \
  template Var linear<T>(Graph<T>&, Var, Var, Var);                                                      \
  template Var softmax<T>(Graph<T>&, Var);                                                               \
  template Var channel_scale<T>(Graph<T>&, Var, Var);                                                    \
  template Var stack<T>(Graph<T>&, const std::vector<Var>&);                                             \
  template Var mix_rows<T>(Graph<T>&, Var, Var);                                                         \
  template Var concat_rows<T>(Graph<T>&, const std::vector<Var>&);                                       \
  template Var roi_align<T>(Graph<T>&, Var, const std::vector<std::array<double, 4>>&, int, double, int);

DADET_INSTANTIATE_AUTOGRAD(float)
DADET_INSTANTIATE_AUTOGRAD(double)

}  // namespace dadet
