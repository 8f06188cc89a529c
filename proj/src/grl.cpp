// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/grl.hpp"

#include <stdexcept>

namespace dadet {

template <typename T>
Var gradient_reversal(Graph<T>& g, Var x, T lambda) {
  if (!(lambda >= T(0))) throw std::invalid_argument("gradient_reversal: lambda must be >= 0");
  Tensor<T> out = g.value(x);
  const int id = static_cast<int>(g.size());
  return g.push(std::move(out), {x}, [x, lambda, id](Graph<T>& gr) {
    const Tensor<T>& go = gr.grad(Var{id});
    const std::vector<T> reversed = grl_backward<T>(go.data, lambda);
    Tensor<T>& gx = gr.grad(x);
    for (std::size_t i = 0; i < reversed.size(); ++i) gx.data[i] += reversed[i];
  });
}

template Var gradient_reversal<float>(Graph<float>&, Var, float);
template Var gradient_reversal<double>(Graph<double>&, Var, double);

}  // namespace dadet
