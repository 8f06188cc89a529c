// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over Tensor<T>. Nodes are appended in
// evaluation order, so a reverse sweep over node ids is a valid topological order.

#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dadet/tensor.hpp"

namespace dadet {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(Tensor<T> value, bool requires_grad = false);

  // Leaf bound to a named parameter; repeated lookups of the same name share one leaf.
  Var param(const std::string& name, const Tensor<T>& value);

  // Appends a computed node. `backward` reads grad(out) and accumulates into parents.
  // It is dropped when no parent requires a gradient.
  Var push(Tensor<T> value, const std::vector<Var>& parents, BackwardFn backward);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const std::vector<int>& shape(Var v) const { return nodes_.at(v.id).value.shape; }
  T scalar(Var v) const { return nodes_.at(v.id).value.data.at(0); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient buffer of v, allocated as zeros on first access.
  Tensor<T>& grad(Var v);
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  // Clears all gradients, seeds d(root)/d(root) = seed, and sweeps the tape backwards.
  void backward(Var root, T seed = T(1));

  // Gradient for every parameter leaf (zeros when the parameter was unreached).
  std::map<std::string, Tensor<T>> param_grads() const;
  const std::map<std::string, int>& param_ids() const { return param_ids_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::map<std::string, int> param_ids_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Shapes: feature maps [C, H, W], matrices [n, d].

template <typename T> Var add(Graph<T>& g, Var a, Var b);
template <typename T> Var scale(Graph<T>& g, Var x, T s);
// Weighted sum of scalar nodes: sum_k w_k * x_k.
template <typename T> Var weighted_sum(Graph<T>& g, const std::vector<Var>& xs, const std::vector<T>& ws);
template <typename T> Var relu(Graph<T>& g, Var x);
template <typename T> Var sigmoid(Graph<T>& g, Var x);
template <typename T> Var reshape(Graph<T>& g, Var x, std::vector<int> shape);

// x [C,H,W], w [O,C,k,k], b [O] -> [O, Ho, Wo]
template <typename T> Var conv2d(Graph<T>& g, Var x, Var w, Var b, int stride, int pad);

// [C,H,W] -> [C]
template <typename T> Var global_avg_pool(Graph<T>& g, Var x);

// x [in] or [n, in], w [out, in], b [out] -> [out] or [n, out]
template <typename T> Var linear(Graph<T>& g, Var x, Var w, Var b);

// Numerically stable softmax over a vector [N].
template <typename T> Var softmax(Graph<T>& g, Var logits);

// x [C,H,W] scaled by e [C] per channel.
template <typename T> Var channel_scale(Graph<T>& g, Var x, Var e);

// Rows of equal-shape vectors [d] stacked into [N, d].
template <typename T> Var stack(Graph<T>& g, const std::vector<Var>& xs);

// a [N], rows [N, d] -> sum_k a_k rows_k, shape [d]
template <typename T> Var mix_rows(Graph<T>& g, Var a, Var rows);

// Concatenates [n_i, d] matrices along rows. Empty inputs ([0, d]) are allowed.
template <typename T> Var concat_rows(Graph<T>& g, const std::vector<Var>& xs);

// Bilinear ROI pooling. feat [C,H,W]; boxes in image pixels as (x1,y1,x2,y2) rows.
// Output [n, C*P*P] with `sampling` x `sampling` samples per bin.
template <typename T>
Var roi_align(Graph<T>& g, Var feat, const std::vector<std::array<double, 4>>& boxes, int pooled,
              double spatial_scale, int sampling);

}  // namespace dadet
