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
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mpe/common.hpp"
#include "mpe/spectral.hpp"

namespace mpe {

struct PitchEntry {
  double time = 0.0;
  std::vector<double> f0s;
  friend bool operator==(const PitchEntry&, const PitchEntry&) = default;
};

/// Frame-level multi-pitch annotation. Times strictly increase.
struct PitchAnnotation {
  std::string source_id;
  std::vector<PitchEntry> entries;

  void validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i > 0 && !(entries[i].time > entries[i - 1].time))
        fail_data(source_id, ": annotation times not strictly increasing at row ", i + 1);
      for (double f : entries[i].f0s)
        if (!(f > 0)) fail_data(source_id, ": non-positive f0 at row ", i + 1);
    }
  }

  /// Median spacing of the rows, or nullopt with fewer than two rows.
  std::optional<double> period() const {
    if (entries.size() < 2) return std::nullopt;
    std::vector<double> d(entries.size() - 1);
    for (std::size_t i = 1; i < entries.size(); ++i) d[i - 1] = entries[i].time - entries[i - 1].time;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
    return d[d.size() / 2];
  }

  /// Row nearest to `t` within `tolerance`, if any. Ties go to the earlier row.
  std::optional<std::size_t> nearest(double t, double tolerance) const {
    if (entries.empty()) return std::nullopt;
    auto it = std::lower_bound(entries.begin(), entries.end(), t,
                               [](const PitchEntry& e, double v) { return e.time < v; });
    std::size_t best = entries.size();
    double best_d = 0.0;
    auto consider = [&](std::size_t i) {
      const double d = std::abs(entries[i].time - t);
      if (best == entries.size() || d < best_d) best = i, best_d = d;
    };
    const auto idx = static_cast<std::size_t>(it - entries.begin());
    if (idx > 0) consider(idx - 1);
    if (idx < entries.size()) consider(idx);
    if (best_d > tolerance * (1.0 + 1e-9)) return std::nullopt;
    return best;
  }
};

/// Tab-separated `time<TAB>f0<TAB>f0...`; a lone time is a silent row.
inline PitchAnnotation read_annotation(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail_data("cannot open annotation ", path);
  PitchAnnotation ann;
  ann.source_id = path;
  std::string line;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    PitchEntry e;
    std::size_t pos = 0;
    bool first = true;
    while (pos <= line.size()) {
      const auto tab = line.find('\t', pos);
      const std::string tok = line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos);
      if (!tok.empty()) {
        char* end = nullptr;
        const double v = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0') fail_data(path, ": bad number '", tok, "' on row ", row);
        if (first) e.time = v;
        else e.f0s.push_back(v);
        first = false;
      }
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (first) fail_data(path, ": missing time on row ", row);
    ann.entries.push_back(std::move(e));
  }
  ann.validate();
  return ann;
}

inline void write_annotation(const std::string& path, const PitchAnnotation& ann) {
  std::ofstream os(path);
  if (!os) fail_data("cannot open ", path, " for writing");
  char buf[64];
  for (const auto& e : ann.entries) {
    std::snprintf(buf, sizeof buf, "%.6f", e.time);
    os << buf;
    for (double f : e.f0s) {
      std::snprintf(buf, sizeof buf, "\t%.6f", f);
      os << buf;
    }
    os << '\n';
  }
  if (!os) fail_data("write failed: ", path);
}

/// Round-half-up to the nearest bin index.
inline long nearest_bin(double hz, const SpectralConfig& config) {
  return static_cast<long>(std::floor(hz_to_bin(hz, config) + 0.5));
}

struct Activations {
  SalienceGram grid;
  /// f0s further than half a semitone outside the bin range (dropped).
  std::size_t out_of_range = 0;
};

/// Binary K x N grid: each frame takes the nearest annotation row within half
/// the annotation period and sets the nearest bin of each f0.
inline Activations annotations_to_activations(const PitchAnnotation& ann,
                                              const std::vector<double>& frame_times,
                                              const SpectralConfig& config) {
  const std::size_t K = config.bins_total;
  Activations out;
  out.grid.values = Grid<float>(K, frame_times.size());
  out.grid.frame_times = frame_times;
  const double period = ann.period().value_or(static_cast<double>(config.hop) / config.sample_rate);
  const double slack = static_cast<double>(config.bins_per_semitone) / 2.0;
  const double top = static_cast<double>(K - 1);
  for (std::size_t n = 0; n < frame_times.size(); ++n) {
    const auto row = ann.nearest(frame_times[n], period / 2.0);
    if (!row) continue;
    for (double f0 : ann.entries[*row].f0s) {
      const double b = hz_to_bin(f0, config);
      if (b > top + slack || b < -slack) {
        ++out.out_of_range;
        continue;
      }
      const long k = std::clamp<long>(static_cast<long>(std::floor(b + 0.5)), 0, static_cast<long>(K - 1));
      out.grid.values(static_cast<std::size_t>(k), n) = 1.0f;
    }
  }
  return out;
}

/// Per-frame Gaussian blur along bins with a peak-1 kernel truncated at
/// +-4 sigma; overlapping contributions combine by max.
inline SalienceGram blur_target(const SalienceGram& y, double sigma_bins = 1.0) {
  if (!(sigma_bins > 0)) fail_usage("sigma must be positive");
  const auto radius = static_cast<std::ptrdiff_t>(std::floor(4.0 * sigma_bins));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (std::ptrdiff_t d = -radius; d <= radius; ++d)
    kernel[static_cast<std::size_t>(d + radius)] =
        std::exp(-static_cast<double>(d * d) / (2.0 * sigma_bins * sigma_bins));
  const auto K = static_cast<std::ptrdiff_t>(y.bins());
  const std::size_t N = y.frames();
  SalienceGram out{Grid<float>(y.bins(), N), y.frame_times};
  for (std::ptrdiff_t k = 0; k < K; ++k) {
    for (std::size_t n = 0; n < N; ++n) {
      const double v = y.values(static_cast<std::size_t>(k), n);
      if (v <= 0.0) continue;
      for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
        const std::ptrdiff_t j = k + d;
        if (j < 0 || j >= K) continue;
        float& o = out.values(static_cast<std::size_t>(j), n);
        o = std::max(o, static_cast<float>(v * kernel[static_cast<std::size_t>(d + radius)]));
      }
    }
  }
  return out;
}

}  // namespace mpe
