// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <random>
#include <stdexcept>
#include <string>

#include "dadet/autograd.hpp"

namespace dadet {

// Named trainable tensors. Names are dotted paths whose first component is the
// owning sub-network (see ParamGroup).
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (values_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    values_.emplace(name, std::move(value));
  }
  bool contains(const std::string& name) const { return values_.count(name) > 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
  }
  Var var(Graph<T>& g, const std::string& name) const { return g.param(name, at(name)); }

  const std::map<std::string, Tensor<T>>& all() const { return values_; }
  std::map<std::string, Tensor<T>>& all() { return values_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : values_) n += v.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [k, v] : values_) out.add(k, v.template cast<U>());
    return out;
  }

 private:
  std::map<std::string, Tensor<T>> values_;
};

enum class ParamGroup { kBackbone, kRpn, kRoiHead, kImageHead, kInstanceHead, kCenters };

ParamGroup param_group(const std::string& name);
const char* group_name(ParamGroup g);

// Parameters owned by the center optimizer: domain heads and class centers.
inline bool in_center_partition(const std::string& name) {
  const ParamGroup g = param_group(name);
  return g == ParamGroup::kImageHead || g == ParamGroup::kInstanceHead || g == ParamGroup::kCenters;
}

template <typename T>
Tensor<T> normal_tensor(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace dadet
