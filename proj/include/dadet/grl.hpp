// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "dadet/autograd.hpp"

namespace dadet {

// Identity in the forward pass, -lambda times the incoming gradient in the backward pass.
struct GradientReversal {
  double lambda_grl = 1.0;
};

template <typename T>
std::vector<T> grl_forward(std::span<const T> x) {
  return std::vector<T>(x.begin(), x.end());
}

// Returns -lambda * upstream elementwise.
template <typename T>
std::vector<T> grl_backward(std::span<const T> upstream, T lambda) {
  std::vector<T> out(upstream.size());
  const T neg = -lambda;
  for (std::size_t i = 0; i < upstream.size(); ++i) out[i] = neg * upstream[i];
  return out;
}

template <typename T>
Var gradient_reversal(Graph<T>& g, Var x, T lambda);

template <typename T>
Var gradient_reversal(Graph<T>& g, Var x, const GradientReversal& layer) {
  return gradient_reversal(g, x, static_cast<T>(layer.lambda_grl));
}

}  // namespace dadet
