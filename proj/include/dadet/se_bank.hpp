// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0
//
// Squeeze-excitation adaptors and attention-routed adaptor banks.
//
//   excitation(x) = sigmoid(W2 relu(W1 avgpool(x) + b1) + b2)          one adaptor
//   a             = softmax(Wa avgpool(x) + ba)                         bank attention
//   bank(x)       = x * sum_k a_k excitation_k(x)                       channelwise
//
// All adaptors and the attention projection share one squeeze (avgpool) of x.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "dadet/autograd.hpp"
#include "dadet/params.hpp"

namespace dadet {

template <typename T>
struct SEAdaptor {
  int channels = 0;
  int reduction = 1;
  Tensor<T> fc1_w;  // [C/r, C]
  Tensor<T> fc1_b;  // [C/r]
  Tensor<T> fc2_w;  // [C, C/r]
  Tensor<T> fc2_b;  // [C]

  SEAdaptor() = default;
  SEAdaptor(int c, int r);  // zero weights
  int hidden() const { return channels / reduction; }
  void randomize(std::mt19937_64& rng, double stddev);
  void validate() const;
};

template <typename T>
struct SEBank {
  std::vector<SEAdaptor<T>> adaptors;
  Tensor<T> attention_w;  // [N, C]
  Tensor<T> attention_b;  // [N]

  SEBank() = default;
  SEBank(int n, int c, int r);  // zero weights
  int size() const { return static_cast<int>(adaptors.size()); }
  int channels() const { return adaptors.empty() ? 0 : adaptors.front().channels; }
  void validate() const;
};

// Tensor-level entry points (build and evaluate a private graph).
template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SEAdaptor<T>& adaptor);
template <typename T>
Tensor<T> bank_forward(const Tensor<T>& x, const SEBank<T>& bank);
template <typename T>
std::vector<T> bank_attention(const Tensor<T>& x, const SEBank<T>& bank);

// Parameter names under `prefix`: k<i>.fc1.w, k<i>.fc1.b, k<i>.fc2.w, k<i>.fc2.b, attn.w, attn.b.
template <typename T>
void register_bank(ParamStore<T>& params, const std::string& prefix, const SEBank<T>& bank);
template <typename T>
SEBank<T> bank_from_params(const ParamStore<T>& params, const std::string& prefix);

template <typename T>
struct BankNodes {
  Var out;
  Var attention;   // [N]
  Var excitation;  // [C], combined
};

// Graph form over parameter nodes stored under `prefix`.
template <typename T>
BankNodes<T> bank_forward_node(Graph<T>& g, const ParamStore<T>& params, const std::string& prefix, Var x,
                               int bank_size);

// Single adaptor excitation from an already pooled descriptor.
template <typename T>
Var se_excitation_node(Graph<T>& g, Var pooled, Var fc1_w, Var fc1_b, Var fc2_w, Var fc2_b);

}  // namespace dadet
