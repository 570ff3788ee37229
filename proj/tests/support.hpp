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

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mpe/common.hpp"

namespace mpe::test {

inline constexpr double pi = 3.14159265358979323846;

inline std::vector<float> sine(double hz, double seconds, double rate = 22050.0, double amp = 0.5,
                               double phase = 0.0) {
  std::vector<float> out(static_cast<std::size_t>(std::llround(seconds * rate)));
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(amp * std::sin(2 * pi * hz * static_cast<double>(i) / rate + phase));
  return out;
}

// Harmonic tone with partial amplitudes 1/p.
inline std::vector<float> harmonic_tone(double f0, double seconds, std::size_t partials = 6,
                                        double rate = 22050.0) {
  std::vector<float> out(static_cast<std::size_t>(std::llround(seconds * rate)));
  for (std::size_t p = 1; p <= partials; ++p) {
    if (f0 * static_cast<double>(p) >= rate / 2) break;
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] += static_cast<float>(0.2 / static_cast<double>(p) *
                                   std::sin(2 * pi * f0 * static_cast<double>(p) * static_cast<double>(i) / rate));
  }
  return out;
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("mpe_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline double relative_error(double a, double b) {
  const double d = std::abs(a - b);
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? 0.0 : d / s;
}

}  // namespace mpe::test
