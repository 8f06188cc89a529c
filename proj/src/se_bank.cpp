// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/se_bank.hpp"

#include <cmath>
#include <stdexcept>

namespace dadet {

namespace {
void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

std::string adaptor_key(const std::string& prefix, int k, const char* leaf) {
  return prefix + ".k" + std::to_string(k) + "." + leaf;
}
}  // namespace

template <typename T>
SEAdaptor<T>::SEAdaptor(int c, int r) : channels(c), reduction(r) {
  require(c > 0 && r > 0 && c % r == 0, "SE adaptor: channels must be a positive multiple of the reduction");
  const int h = c / r;
  fc1_w = Tensor<T>({h, c});
  fc1_b = Tensor<T>({h});
  fc2_w = Tensor<T>({c, h});
  fc2_b = Tensor<T>({c});
}

template <typename T>
void SEAdaptor<T>::randomize(std::mt19937_64& rng, double stddev) {
  fill_normal(fc1_w, rng, stddev);
  fill_normal(fc1_b, rng, stddev);
  fill_normal(fc2_w, rng, stddev);
  fill_normal(fc2_b, rng, stddev);
}

template <typename T>
void SEAdaptor<T>::validate() const {
  require(channels > 0 && reduction > 0 && channels % reduction == 0, "SE adaptor: C mod r must be 0");
  const int h = hidden();
  require(fc1_w.shape == std::vector<int>{h, channels} && fc1_b.shape == std::vector<int>{h} &&
              fc2_w.shape == std::vector<int>{channels, h} && fc2_b.shape == std::vector<int>{channels},
          "SE adaptor: weight shapes inconsistent with channels/reduction");
}

template <typename T>
SEBank<T>::SEBank(int n, int c, int r) {
  require(n >= 1, "SE bank needs at least one adaptor");
  for (int k = 0; k < n; ++k) adaptors.emplace_back(c, r);
  attention_w = Tensor<T>({n, c});
  attention_b = Tensor<T>({n});
}

template <typename T>
void SEBank<T>::validate() const {
  require(!adaptors.empty(), "SE bank is empty");
  const int c = channels();
  for (const auto& a : adaptors) {
    a.validate();
    require(a.channels == c, "SE bank adaptors disagree on channel count");
  }
  require(attention_w.shape == std::vector<int>{size(), c} && attention_b.shape == std::vector<int>{size()},
          "SE bank attention projection has the wrong shape");
}

template <typename T>
Var se_excitation_node(Graph<T>& g, Var pooled, Var fc1_w, Var fc1_b, Var fc2_w, Var fc2_b) {
  Var h = relu(g, linear(g, pooled, fc1_w, fc1_b));
  return sigmoid(g, linear(g, h, fc2_w, fc2_b));
}

template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SEAdaptor<T>& adaptor) {
  adaptor.validate();
  require(x.ndim() == 3 && x.dim(0) == adaptor.channels,
          "se_forward: input has " + std::to_string(x.ndim() == 3 ? x.dim(0) : -1) + " channels, adaptor expects " +
              std::to_string(adaptor.channels));
  Graph<T> g;
  Var in = g.input(x);
  Var e = se_excitation_node(g, global_avg_pool(g, in), g.input(adaptor.fc1_w), g.input(adaptor.fc1_b),
                             g.input(adaptor.fc2_w), g.input(adaptor.fc2_b));
  return g.value(channel_scale(g, in, e));
}

template <typename T>
void register_bank(ParamStore<T>& params, const std::string& prefix, const SEBank<T>& bank) {
  bank.validate();
  for (int k = 0; k < bank.size(); ++k) {
    const SEAdaptor<T>& a = bank.adaptors[static_cast<std::size_t>(k)];
    params.add(adaptor_key(prefix, k, "fc1.w"), a.fc1_w);
    params.add(adaptor_key(prefix, k, "fc1.b"), a.fc1_b);
    params.add(adaptor_key(prefix, k, "fc2.w"), a.fc2_w);
    params.add(adaptor_key(prefix, k, "fc2.b"), a.fc2_b);
  }
  params.add(prefix + ".attn.w", bank.attention_w);
  params.add(prefix + ".attn.b", bank.attention_b);
}

template <typename T>
SEBank<T> bank_from_params(const ParamStore<T>& params, const std::string& prefix) {
  SEBank<T> bank;
  bank.attention_w = params.at(prefix + ".attn.w");
  bank.attention_b = params.at(prefix + ".attn.b");
  const int n = bank.attention_w.dim(0);
  for (int k = 0; k < n; ++k) {
    SEAdaptor<T> a;
    a.fc1_w = params.at(adaptor_key(prefix, k, "fc1.w"));
    a.fc1_b = params.at(adaptor_key(prefix, k, "fc1.b"));
    a.fc2_w = params.at(adaptor_key(prefix, k, "fc2.w"));
    a.fc2_b = params.at(adaptor_key(prefix, k, "fc2.b"));
    a.channels = a.fc1_w.dim(1);
    a.reduction = a.channels / a.fc1_w.dim(0);
    bank.adaptors.push_back(std::move(a));
  }
  bank.validate();
  return bank;
}

template <typename T>
BankNodes<T> bank_forward_node(Graph<T>& g, const ParamStore<T>& params, const std::string& prefix, Var x,
                               int bank_size) {
  require(bank_size >= 1, "bank_forward: empty bank");
  Var pooled = global_avg_pool(g, x);
  std::vector<Var> excitations;
  for (int k = 0; k < bank_size; ++k) {
    excitations.push_back(se_excitation_node(
        g, pooled, params.var(g, adaptor_key(prefix, k, "fc1.w")), params.var(g, adaptor_key(prefix, k, "fc1.b")),
        params.var(g, adaptor_key(prefix, k, "fc2.w")), params.var(g, adaptor_key(prefix, k, "fc2.b"))));
  }
  Var attention =
      softmax(g, linear(g, pooled, params.var(g, prefix + ".attn.w"), params.var(g, prefix + ".attn.b")));
  Var combined = mix_rows(g, attention, stack(g, excitations));
  return {channel_scale(g, x, combined), attention, combined};
}

template <typename T>
Tensor<T> bank_forward(const Tensor<T>& x, const SEBank<T>& bank) {
  require(!bank.adaptors.empty(), "bank_forward: empty bank");
  bank.validate();
  require(x.ndim() == 3 && x.dim(0) == bank.channels(), "bank_forward: channel mismatch");
  ParamStore<T> params;
  register_bank(params, "bank", bank);
  Graph<T> g;
  return g.value(bank_forward_node(g, params, "bank", g.input(x), bank.size()).out);
}

template <typename T>
std::vector<T> bank_attention(const Tensor<T>& x, const SEBank<T>& bank) {
  require(!bank.adaptors.empty(), "bank_attention: empty bank");
  bank.validate();
  require(x.ndim() == 3 && x.dim(0) == bank.channels(), "bank_attention: channel mismatch");
  ParamStore<T> params;
  register_bank(params, "bank", bank);
  Graph<T> g;
  return g.value(bank_forward_node(g, params, "bank", g.input(x), bank.size()).attention).values();
}

#define DADET_INSTANTIATE_SE(T)                                                                          \
  template struct SEAdaptor<T>;                                                                           \
  template struct SEBank<T>;                                                                              \
  template Tensor<T> se_forward<T>(const Tensor<T>&, const SEAdaptor<T>&);                                \
  template Tensor<T> bank_forward<T>(const Tensor<T>&, const SEBank<T>&);                                 \
  template std::vector<T> bank_attention<T>(const Tensor<T>&, const SEBank<T>&);                          \
  template void register_bank<T>(ParamStore<T>&, const std::string&, const SEBank<T>&);                   \
  template SEBank<T> bank_from_params<T>(const ParamStore<T>&, const std::string&);                       \
  template BankNodes<T> bank_forward_node<T>(Graph<T>&, const ParamStore<T>&, const std::string&, Var, int); \
  template Var se_excitation_node<T>(Graph<T>&, Var, Var, Var, Var, Var);

DADET_INSTANTIATE_SE(float)
DADET_INSTANTIATE_SE(double)

}  // namespace dadet
