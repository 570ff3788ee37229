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

// Harmonic variable-Q spectrograms, dB scaling and the harmonic energy target.

#pragma once

#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "mpe/common.hpp"

namespace mpe {

enum class NyquistPolicy { zero_fill, strict };

struct SpectralConfig {
  double sample_rate = 22050.0;
  std::size_t hop = 256;
  double f_min = 27.5;
  std::size_t bins_total = 440;
  std::size_t bins_per_semitone = 5;
  std::vector<double> harmonics = {0.5, 1, 2, 3, 4, 5};
  double vq_offset = 5.0;
  double db_floor = -80.0;
  NyquistPolicy nyquist_policy = NyquistPolicy::zero_fill;

  std::size_t bins_per_octave() const { return 12 * bins_per_semitone; }

  void validate() const {
    if (!(sample_rate > 0)) fail_usage("sample_rate must be positive");
    if (hop == 0) fail_usage("hop must be positive");
    if (!(f_min > 0)) fail_usage("f_min must be positive");
    if (bins_total == 0) fail_usage("bins_total must be positive");
    if (bins_per_semitone == 0) fail_usage("bins_per_semitone must be positive");
    if (harmonics.empty()) fail_usage("harmonics must not be empty");
    if (!std::is_sorted(harmonics.begin(), harmonics.end()) ||
        std::adjacent_find(harmonics.begin(), harmonics.end()) != harmonics.end())
      fail_usage("harmonics must be strictly ascending");
    if (harmonics.front() <= 0) fail_usage("harmonics must be positive");
    if (vq_offset < 0) fail_usage("vq_offset must be non-negative");
    if (!(db_floor < 0)) fail_usage("db_floor must be negative");
  }

  friend bool operator==(const SpectralConfig&, const SpectralConfig&) = default;
};

/// Index of harmonic `h` in `config.harmonics`, or -1.
inline int harmonic_index(const SpectralConfig& config, double h) {
  for (std::size_t i = 0; i < config.harmonics.size(); ++i)
    if (std::abs(config.harmonics[i] - h) < 1e-12) return static_cast<int>(i);
  return -1;
}

inline double bin_to_hz(double k, const SpectralConfig& config) {
  return config.f_min * std::exp2(k / static_cast<double>(config.bins_per_octave()));
}

inline double hz_to_bin(double hz, const SpectralConfig& config) {
  if (!(hz > 0)) fail_data("frequency must be positive, got ", hz);
  return static_cast<double>(config.bins_per_octave()) * std::log2(hz / config.f_min);
}

/// 6 x K x N harmonic spectrogram in both linear magnitude and unit-dB form.
struct HcqtTensor {
  Array3<float> linear;
  Array3<float> unit_db;
  std::vector<double> frame_times;
  /// Set on copies whose unit_db view was transformed without touching linear.
  bool linear_stale = false;

  std::size_t channels() const { return unit_db.channels(); }
  std::size_t bins() const { return unit_db.bins(); }
  std::size_t frames() const { return unit_db.frames(); }
};

/// K x N grid in [0,1]: predictions, blurred targets and energy targets.
struct SalienceGram {
  Grid<float> values;
  std::vector<double> frame_times;

  std::size_t bins() const { return values.bins(); }
  std::size_t frames() const { return values.frames(); }
};

inline std::vector<double> make_frame_times(std::size_t frames, const SpectralConfig& config,
                                            std::size_t first_frame = 0) {
  std::vector<double> t(frames);
  for (std::size_t n = 0; n < frames; ++n)
    t[n] = static_cast<double>((first_frame + n) * config.hop) / config.sample_rate;
  return t;
}

/// v -> clamp(20 log10(v / v_ref), floor, 0) / -floor + 1, with v_ref the
/// maximum of `linear`. An all-zero input maps to all zeros.
inline std::vector<float> amplitude_to_unit_db(std::span<const float> linear, double db_floor) {
  std::vector<float> out(linear.size(), 0.0f);
  float ref = 0.0f;
  for (float v : linear) ref = std::max(ref, v);
  if (!(ref > 0.0f)) return out;
  const double scale = -db_floor;
  for (std::size_t i = 0; i < linear.size(); ++i) {
    const double v = linear[i];
    if (!(v > 0)) continue;
    double db = 20.0 * std::log10(v / ref);
    db = std::clamp(db, db_floor, 0.0);
    out[i] = static_cast<float>(db / scale + 1.0);
  }
  return out;
}

inline Array3<float> amplitude_to_unit_db(const Array3<float>& linear, double db_floor) {
  Array3<float> out(linear.channels(), linear.bins(), linear.frames());
  out.values() = amplitude_to_unit_db(std::span<const float>(linear.values()), db_floor);
  return out;
}

inline Grid<float> amplitude_to_unit_db(const Grid<float>& linear, double db_floor) {
  Grid<float> out(linear.bins(), linear.frames());
  out.values() = amplitude_to_unit_db(std::span<const float>(linear.values()), db_floor);
  return out;
}

/// Precomputed sparse spectral kernels for one SpectralConfig. Building the
/// kernels dominates the cost for short inputs, so callers processing many
/// excerpts should keep one plan around.
class HcqtPlan {
 public:
  explicit HcqtPlan(SpectralConfig config) : config_(std::move(config)) {
    config_.validate();
    build();
  }

  const SpectralConfig& config() const { return config_; }
  std::size_t fft_size() const { return fft_size_; }

  /// Frequency of channel `c`, bin `k`.
  double center_hz(std::size_t c, std::size_t k) const {
    return config_.harmonics[c] * bin_to_hz(static_cast<double>(k), config_);
  }

  /// Linear magnitudes only (6 x K x N).
  Array3<float> compute_linear(std::span<const float> audio) const {
    if (audio.empty()) fail_data("empty input");
    return compute_linear(audio, 0, (audio.size() + config_.hop - 1) / config_.hop);
  }

  /// Frames [first, first + frames) of the whole-signal transform, reading
  /// zeros outside `audio`.
  Array3<float> compute_linear(std::span<const float> audio, std::size_t first, std::size_t frames) const {
    if (audio.empty()) fail_data("empty input");
    const std::size_t hop = config_.hop;
    const std::size_t channels = config_.harmonics.size();
    const std::size_t bins = config_.bins_total;
    Array3<float> out(channels, bins, frames);

    Eigen::FFT<double> fft;
    fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
    std::vector<double> segment(fft_size_);
    std::vector<std::complex<double>> spectrum;
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(fft_size_ / 2);
    const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(audio.size());
    const double norm = 2.0 / static_cast<double>(fft_size_);

    for (std::size_t n = 0; n < frames; ++n) {
      const std::ptrdiff_t center = static_cast<std::ptrdiff_t>((first + n) * hop);
      for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(fft_size_); ++i) {
        const std::ptrdiff_t src = center - half + i;
        segment[static_cast<std::size_t>(i)] = (src >= 0 && src < len) ? audio[static_cast<std::size_t>(src)] : 0.0;
      }
      fft.fwd(spectrum, segment);
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t k = 0; k < bins; ++k) {
          const Kernel& kern = kernels_[c * bins + k];
          if (kern.coeffs.empty()) continue;
          std::complex<double> acc = 0.0;
          for (std::size_t j = 0; j < kern.coeffs.size(); ++j)
            acc += spectrum[kern.start + j] * kern.coeffs[j];
          out(c, k, n) = static_cast<float>(std::abs(acc) * norm);
        }
      }
    }
    return out;
  }

  HcqtTensor compute(std::span<const float> audio) const {
    HcqtTensor t;
    t.linear = compute_linear(audio);
    t.unit_db = amplitude_to_unit_db(t.linear, config_.db_floor);
    t.frame_times = make_frame_times(t.linear.frames(), config_);
    return t;
  }

 private:
  struct Kernel {
    std::size_t start = 0;
    // Conjugated spectral coefficients over [start, start + size).
    std::vector<std::complex<double>> coeffs;
  };

  static double relative_bandwidth(std::size_t bins_per_octave) {
    const double r2 = std::exp2(2.0 / static_cast<double>(bins_per_octave));
    return (r2 - 1.0) / (r2 + 1.0);
  }

  double window_length(double hz) const {
    const double alpha = relative_bandwidth(config_.bins_per_octave());
    return config_.sample_rate / (alpha * hz + config_.vq_offset);
  }

  void build() {
    const std::size_t channels = config_.harmonics.size();
    const std::size_t bins = config_.bins_total;
    const double nyquist = config_.sample_rate / 2.0;
    const double alpha = relative_bandwidth(config_.bins_per_octave());

    std::vector<std::string> offending;
    double longest = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const double top = center_hz(c, bins - 1);
      if (top + (alpha * top + config_.vq_offset) / 2.0 >= nyquist)
        offending.push_back(detail::concat("h=", config_.harmonics[c]));
      longest = std::max(longest, window_length(center_hz(c, 0)));
    }
    if (!offending.empty() && config_.nyquist_policy == NyquistPolicy::strict) {
      std::string list;
      for (const auto& s : offending) list += (list.empty() ? "" : ",") + s;
      fail_usage("bins exceed Nyquist: ", list);
    }

    fft_size_ = 1;
    while (static_cast<double>(fft_size_) < longest + 1.0) fft_size_ *= 2;

    kernels_.assign(channels * bins, Kernel{});
    Eigen::FFT<double> fft;
    std::vector<std::complex<double>> frame(fft_size_), spec;
    const double pi = 3.14159265358979323846;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t k = 0; k < bins; ++k) {
        const double hz = center_hz(c, k);
        if (hz + (alpha * hz + config_.vq_offset) / 2.0 >= nyquist) continue;
        const auto length = static_cast<std::size_t>(std::max(2.0, std::round(window_length(hz))));
        std::fill(frame.begin(), frame.end(), std::complex<double>{});
        // Window centred on sample fft_size/2, matching the frame centring.
        const std::ptrdiff_t first =
            static_cast<std::ptrdiff_t>(fft_size_ / 2) - static_cast<std::ptrdiff_t>(length / 2);
        double wsum = 0.0;
        for (std::size_t i = 0; i < length; ++i) {
          const double w = 0.5 - 0.5 * std::cos(2.0 * pi * (static_cast<double>(i) + 0.5) /
                                                static_cast<double>(length));
          wsum += w;
        }
        for (std::size_t i = 0; i < length; ++i) {
          const double w = 0.5 - 0.5 * std::cos(2.0 * pi * (static_cast<double>(i) + 0.5) /
                                                static_cast<double>(length));
          const std::ptrdiff_t pos = first + static_cast<std::ptrdiff_t>(i);
          const double phase = 2.0 * pi * hz *
                               static_cast<double>(pos - static_cast<std::ptrdiff_t>(fft_size_ / 2)) /
                               config_.sample_rate;
          frame[static_cast<std::size_t>(pos)] = std::polar(w / wsum, phase);
        }
        fft.fwd(spec, frame);
        const std::size_t half = fft_size_ / 2;
        double peak = 0.0;
        for (std::size_t j = 0; j <= half; ++j) peak = std::max(peak, std::abs(spec[j]));
        const double threshold = peak * 1e-4;
        std::size_t lo = half + 1, hi = 0;
        for (std::size_t j = 0; j <= half; ++j) {
          if (std::abs(spec[j]) >= threshold) {
            lo = std::min(lo, j);
            hi = std::max(hi, j);
          }
        }
        if (lo > hi) continue;
        Kernel& kern = kernels_[c * bins + k];
        kern.start = lo;
        kern.coeffs.resize(hi - lo + 1);
        for (std::size_t j = lo; j <= hi; ++j) kern.coeffs[j - lo] = std::conj(spec[j]);
      }
    }
  }

  SpectralConfig config_;
  std::size_t fft_size_ = 0;
  std::vector<Kernel> kernels_;
};

inline HcqtTensor compute_hcqt(std::span<const float> audio, const SpectralConfig& config) {
  if (audio.empty()) fail_data("empty input");
  return HcqtPlan(config).compute(audio);
}

/// Copies frames [first, first + count) of the linear view (zero past the end)
/// and rescales the unit-dB view against the excerpt's own maximum.
inline HcqtTensor slice_frames(const HcqtTensor& src, std::size_t first, std::size_t count,
                               const SpectralConfig& config) {
  HcqtTensor out;
  out.linear = Array3<float>(src.linear.channels(), src.linear.bins(), count);
  for (std::size_t c = 0; c < src.linear.channels(); ++c)
    for (std::size_t k = 0; k < src.linear.bins(); ++k)
      for (std::size_t n = 0; n < count && first + n < src.linear.frames(); ++n)
        out.linear(c, k, n) = src.linear(c, k, first + n);
  out.unit_db = amplitude_to_unit_db(out.linear, config.db_floor);
  out.frame_times = make_frame_times(count, config, first);
  return out;
}

/// Linear-scale sum over h = 1..5 of X_h / h^4. The sub-harmonic channel
/// does not contribute.
inline Grid<float> harmonic_energy_linear(const HcqtTensor& hcqt, const SpectralConfig& config) {
  if (hcqt.linear_stale) fail_data("harmonic energy needs a fresh linear view");
  const auto& lin = hcqt.linear;
  Grid<float> out(lin.bins(), lin.frames());
  std::vector<double> acc(out.size(), 0.0);
  for (int h = 1; h <= 5; ++h) {
    const int c = harmonic_index(config, h);
    if (c < 0 || static_cast<std::size_t>(c) >= lin.channels())
      fail_data("missing harmonic channel h=", h);
    const double w = 1.0 / std::pow(static_cast<double>(h), 4);
    const float* src = lin.channel(static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * src[i];
  }
  std::transform(acc.begin(), acc.end(), out.values().begin(),
                 [](double v) { return static_cast<float>(v); });
  return out;
}

inline SalienceGram harmonic_energy_target(const HcqtTensor& hcqt, const SpectralConfig& config) {
  SalienceGram s;
  s.values = amplitude_to_unit_db(harmonic_energy_linear(hcqt, config), config.db_floor);
  s.frame_times = hcqt.frame_times;
  return s;
}

// SFG1 container: "SFG1", u32 channels, u32 bins, u32 frames, then
// little-endian f32 values in channel -> bin -> frame order.

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_f32(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}
inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  const auto offset = is.tellg();
  if (!is.read(reinterpret_cast<char*>(b), 4))
    fail_data("truncated ", what, " at byte ", static_cast<long long>(offset));
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline float get_f32(std::istream& is, const char* what) {
  const std::uint32_t v = get_u32(is, what);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}
}  // namespace detail

inline void write_sfg(const std::string& path, const Array3<float>& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail_data("cannot open ", path, " for writing");
  os.write("SFG1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(grid.channels()));
  detail::put_u32(os, static_cast<std::uint32_t>(grid.bins()));
  detail::put_u32(os, static_cast<std::uint32_t>(grid.frames()));
  for (float v : grid.values()) detail::put_f32(os, v);
  if (!os) fail_data("write failed: ", path);
}

inline void write_sfg(const std::string& path, const Grid<float>& grid) {
  Array3<float> a(1, grid.bins(), grid.frames());
  a.values() = grid.values();
  write_sfg(path, a);
}

inline Array3<float> read_sfg(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open ", path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SFG1", 4) != 0) fail_data("bad SFG1 magic at byte 0 in ", path);
  const auto c = detail::get_u32(is, "SFG1 header");
  const auto k = detail::get_u32(is, "SFG1 header");
  const auto n = detail::get_u32(is, "SFG1 header");
  Array3<float> a(c, k, n);
  for (auto& v : a.values()) v = detail::get_f32(is, "SFG1 payload");
  return a;
}

}  // namespace mpe
