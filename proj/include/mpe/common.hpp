// Copyright 2026 The mpe Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mpe {

/// Broad failure classes. The CLI maps these onto exit statuses.
enum class ErrorKind { usage, data, numerical };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {
template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}
}  // namespace detail

template <typename... Args>
[[noreturn]] void fail_usage(Args&&... args) {
  throw Error(ErrorKind::usage, detail::concat(std::forward<Args>(args)...));
}

template <typename... Args>
[[noreturn]] void fail_data(Args&&... args) {
  throw Error(ErrorKind::data, detail::concat(std::forward<Args>(args)...));
}

template <typename... Args>
[[noreturn]] void fail_numerical(Args&&... args) {
  throw Error(ErrorKind::numerical, detail::concat(std::forward<Args>(args)...));
}

/// The single source of randomness. Callers own it; every sampler takes it
/// by reference so runs replay from a seed.
using Rng = std::mt19937_64;

/// Dense row-major 3-D array, indexed (channel, bin, frame).
template <typename T>
class Array3 {
 public:
  Array3() = default;
  Array3(std::size_t channels, std::size_t bins, std::size_t frames, T fill = T{})
      : c_(channels), k_(bins), n_(frames), data_(channels * bins * frames, fill) {}

  std::size_t channels() const noexcept { return c_; }
  std::size_t bins() const noexcept { return k_; }
  std::size_t frames() const noexcept { return n_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t c, std::size_t k, std::size_t n) { return data_[(c * k_ + k) * n_ + n]; }
  const T& operator()(std::size_t c, std::size_t k, std::size_t n) const {
    return data_[(c * k_ + k) * n_ + n];
  }

  T* channel(std::size_t c) { return data_.data() + c * k_ * n_; }
  const T* channel(std::size_t c) const { return data_.data() + c * k_ * n_; }

  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  bool same_shape(const Array3& o) const noexcept {
    return c_ == o.c_ && k_ == o.k_ && n_ == o.n_;
  }

  friend bool operator==(const Array3& a, const Array3& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t c_ = 0, k_ = 0, n_ = 0;
  std::vector<T> data_;
};

/// Row-major K x N grid (bin, frame).
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t bins, std::size_t frames, T fill = T{})
      : k_(bins), n_(frames), data_(bins * frames, fill) {}

  std::size_t bins() const noexcept { return k_; }
  std::size_t frames() const noexcept { return n_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t k, std::size_t n) { return data_[k * n_ + n]; }
  const T& operator()(std::size_t k, std::size_t n) const { return data_[k * n_ + n]; }

  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  bool same_shape(const Grid& o) const noexcept { return k_ == o.k_ && n_ == o.n_; }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t k_ = 0, n_ = 0;
  std::vector<T> data_;
};

template <typename To, typename From>
Grid<To> grid_cast(const Grid<From>& g) {
  Grid<To> out(g.bins(), g.frames());
  std::transform(g.values().begin(), g.values().end(), out.values().begin(),
                 [](From v) { return static_cast<To>(v); });
  return out;
}

template <typename To, typename From>
Array3<To> array_cast(const Array3<From>& a) {
  Array3<To> out(a.channels(), a.bins(), a.frames());
  std::transform(a.values().begin(), a.values().end(), out.values().begin(),
                 [](From v) { return static_cast<To>(v); });
  return out;
}

}  // namespace mpe
