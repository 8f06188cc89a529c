// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dadet {

inline std::size_t numel(const std::vector<int>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

std::string shape_str(const std::vector<int>& shape);

// Cache-line aligned storage. Vectorized kernels peel unaligned heads, so a fixed base
// alignment keeps floating-point summation order independent of heap state.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlignment)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(kAlignment)); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

// Dense row-major array. Images and feature maps are [C, H, W]; matrices are [rows, cols].
template <typename T>
struct Tensor {
  std::vector<int> shape;
  Buffer<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(std::vector<int> s, Buffer<T> d) : shape(std::move(s)), data(std::move(d)) { check(); }
  Tensor(std::vector<int> s, const std::vector<T>& d) : shape(std::move(s)), data(d.begin(), d.end()) { check(); }

  Tensor(std::vector<int> s, std::initializer_list<T> d) : shape(std::move(s)), data(d) { check(); }

  std::vector<T> values() const { return std::vector<T>(data.begin(), data.end()); }

  std::size_t size() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  bool empty() const { return data.empty(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // Element access for [C, H, W] tensors.
  T& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x]; }
  const T& at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  Tensor reshaped(std::vector<int> s) const {
    if (numel(s) != data.size()) {
      throw std::invalid_argument("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data);
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

 private:
  void check() const {
    if (data.size() != numel(shape)) {
      throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
  }
};

}  // namespace dadet
