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

// Pitch-invariant (EQ curve, percussion mix) and pitch-equivariant
// (shift/stretch) transforms. Every transform is described by a small spec
// that is sampled once and replayed on inputs and targets alike.

#pragma once

#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mpe/common.hpp"
#include "mpe/spectral.hpp"

namespace mpe {

/// Parabolic gain u[k] = 1 - 2 alpha (k - beta)^2, clamped at zero.
struct EqCurveSpec {
  double alpha = 0.0;
  double beta = 0.0;

  double gain(double k) const {
    return std::max(0.0, 1.0 - 2.0 * alpha * (k - beta) * (k - beta));
  }
  friend bool operator==(const EqCurveSpec&, const EqCurveSpec&) = default;
};

struct PercussionMixSpec {
  double volume = 0.0;
  std::string source;
  /// Start sample inside the (looped) percussion clip.
  std::size_t offset = 0;
  friend bool operator==(const PercussionMixSpec&, const PercussionMixSpec&) = default;
};

/// Stretch by gamma, then shift dk bins up and dn frames later.
struct GeometricSpec {
  int dk = 0;
  int dn = 0;
  double gamma = 1.0;
  friend bool operator==(const GeometricSpec&, const GeometricSpec&) = default;
};

using TransformSpec = std::variant<EqCurveSpec, PercussionMixSpec, GeometricSpec>;

// ---------------------------------------------------------------------------
// EQ curves

inline EqCurveSpec sample_eq_curve(Rng& rng, std::size_t bins) {
  const double kmax = static_cast<double>(bins - 1);
  std::uniform_real_distribution<double> a(0.0, 1.0 / (kmax * kmax));
  std::uniform_real_distribution<double> b(0.0, kmax);
  EqCurveSpec s;
  s.alpha = a(rng);
  s.beta = b(rng);
  return s;
}

inline void check_eq(const EqCurveSpec& spec, std::size_t bins) {
  const double kmax = static_cast<double>(bins - 1);
  const double amax = 1.0 / (kmax * kmax);
  if (!(spec.alpha >= 0.0 && spec.alpha <= amax * (1 + 1e-12)))
    fail_usage("eq alpha ", spec.alpha, " outside [0, ", amax, "]");
  if (!(spec.beta >= 0.0 && spec.beta <= kmax)) fail_usage("eq beta ", spec.beta, " outside [0, ", kmax, "]");
}

/// Scales the unit-dB view of every frame and channel by the curve. The
/// linear view is not transformed and is flagged stale on the copy.
inline HcqtTensor apply_eq(const HcqtTensor& hcqt, const EqCurveSpec& spec) {
  check_eq(spec, hcqt.bins());
  HcqtTensor out = hcqt;
  out.linear_stale = true;
  auto& u = out.unit_db;
  for (std::size_t k = 0; k < u.bins(); ++k) {
    const double g = spec.gain(static_cast<double>(k));
    for (std::size_t c = 0; c < u.channels(); ++c)
      for (std::size_t n = 0; n < u.frames(); ++n)
        u(c, k, n) = static_cast<float>(std::clamp(u(c, k, n) * g, 0.0, 1.0));
  }
  return out;
}

/// One curve per frame; `specs.size()` must equal the frame count.
inline HcqtTensor apply_eq_per_frame(const HcqtTensor& hcqt, std::span<const EqCurveSpec> specs) {
  if (specs.size() != hcqt.frames()) fail_usage("per-frame eq needs one curve per frame");
  HcqtTensor out = hcqt;
  out.linear_stale = true;
  auto& u = out.unit_db;
  for (std::size_t n = 0; n < u.frames(); ++n) {
    check_eq(specs[n], u.bins());
    for (std::size_t k = 0; k < u.bins(); ++k) {
      const double g = specs[n].gain(static_cast<double>(k));
      for (std::size_t c = 0; c < u.channels(); ++c)
        u(c, k, n) = static_cast<float>(std::clamp(u(c, k, n) * g, 0.0, 1.0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Percussion

/// audio + volume * percussion (looped from `offset`), renormalised to a
/// peak of 1 only when the mix clips.
inline std::vector<float> mix_percussion(std::span<const float> audio, double audio_rate,
                                         std::span<const float> percussion, double percussion_rate,
                                         double volume, std::size_t offset = 0) {
  if (audio_rate != percussion_rate)
    fail_data("sample-rate mismatch: ", audio_rate, " vs ", percussion_rate);
  if (!(volume >= 0.0 && volume <= 1.0)) fail_usage("percussion volume ", volume, " outside [0, 1]");
  std::vector<float> out(audio.begin(), audio.end());
  if (volume == 0.0 || percussion.empty()) return out;
  double peak = 0.0;
  std::vector<double> mix(audio.size());
  for (std::size_t i = 0; i < audio.size(); ++i) {
    mix[i] = audio[i] + volume * percussion[(offset + i) % percussion.size()];
    peak = std::max(peak, std::abs(mix[i]));
  }
  const double scale = peak > 1.0 ? 1.0 / peak : 1.0;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(mix[i] * scale);
  return out;
}

inline PercussionMixSpec sample_percussion_mix(Rng& rng, std::string source, std::size_t clip_length) {
  std::uniform_real_distribution<double> v(0.0, 1.0);
  PercussionMixSpec s;
  s.volume = v(rng);
  s.source = std::move(source);
  if (clip_length > 0) s.offset = std::uniform_int_distribution<std::size_t>(0, clip_length - 1)(rng);
  return s;
}

// ---------------------------------------------------------------------------
// Geometric transforms

/// dk uniform on [-bins_per_octave, bins_per_octave], dn uniform on
/// [-floor(N/4), floor(N/4)], gamma uniform on [0.5,1] or [1,2] with equal odds.
inline GeometricSpec sample_geometric(Rng& rng, std::size_t frames, int bins_per_octave = 60) {
  if (frames == 0) fail_usage("sample_geometric needs N > 0");
  GeometricSpec s;
  s.dk = std::uniform_int_distribution<int>(-bins_per_octave, bins_per_octave)(rng);
  const int q = static_cast<int>(frames / 4);
  s.dn = std::uniform_int_distribution<int>(-q, q)(rng);
  const bool slow = std::bernoulli_distribution(0.5)(rng);
  s.gamma = slow ? std::uniform_real_distribution<double>(0.5, 1.0)(rng)
                 : std::uniform_real_distribution<double>(1.0, 2.0)(rng);
  return s;
}

namespace detail {

// One K x N plane. Stretch pulls from position m * gamma with linear
// interpolation (zero beyond the last frame); shifts zero-fill.
template <typename T>
void geometric_plane(const T* in, T* out, std::size_t bins, std::size_t frames, const GeometricSpec& s) {
  std::vector<T> stretched(bins * frames, T{0});
  if (s.gamma == 1.0) {
    std::copy(in, in + bins * frames, stretched.begin());
  } else {
    for (std::size_t m = 0; m < frames; ++m) {
      const double x = static_cast<double>(m) * s.gamma;
      const auto i0 = static_cast<std::size_t>(std::floor(x));
      const double f = x - static_cast<double>(i0);
      if (i0 >= frames) break;
      const T w0 = static_cast<T>(1.0 - f);
      const T w1 = static_cast<T>(f);
      for (std::size_t k = 0; k < bins; ++k) {
        T v = w0 * in[k * frames + i0];
        if (f > 0.0 && i0 + 1 < frames) v += w1 * in[k * frames + i0 + 1];
        stretched[k * frames + m] = v;
      }
    }
  }
  std::fill(out, out + bins * frames, T{0});
  const auto K = static_cast<std::ptrdiff_t>(bins);
  const auto N = static_cast<std::ptrdiff_t>(frames);
  for (std::ptrdiff_t k = 0; k < K; ++k) {
    const std::ptrdiff_t ks = k - s.dk;
    if (ks < 0 || ks >= K) continue;
    for (std::ptrdiff_t n = 0; n < N; ++n) {
      const std::ptrdiff_t ns = n - s.dn;
      if (ns < 0 || ns >= N) continue;
      out[k * N + n] = stretched[static_cast<std::size_t>(ks * N + ns)];
    }
  }
}

// Transpose of geometric_plane as a linear map.
template <typename T>
void geometric_plane_adjoint(const T* in, T* out, std::size_t bins, std::size_t frames,
                             const GeometricSpec& s) {
  const auto K = static_cast<std::ptrdiff_t>(bins);
  const auto N = static_cast<std::ptrdiff_t>(frames);
  std::vector<T> unshifted(bins * frames, T{0});
  for (std::ptrdiff_t k = 0; k < K; ++k) {
    const std::ptrdiff_t ks = k - s.dk;
    if (ks < 0 || ks >= K) continue;
    for (std::ptrdiff_t n = 0; n < N; ++n) {
      const std::ptrdiff_t ns = n - s.dn;
      if (ns < 0 || ns >= N) continue;
      unshifted[static_cast<std::size_t>(ks * N + ns)] = in[k * N + n];
    }
  }
  if (s.gamma == 1.0) {
    std::copy(unshifted.begin(), unshifted.end(), out);
    return;
  }
  std::fill(out, out + bins * frames, T{0});
  for (std::size_t m = 0; m < frames; ++m) {
    const double x = static_cast<double>(m) * s.gamma;
    const auto i0 = static_cast<std::size_t>(std::floor(x));
    const double f = x - static_cast<double>(i0);
    if (i0 >= frames) break;
    const T w0 = static_cast<T>(1.0 - f);
    const T w1 = static_cast<T>(f);
    for (std::size_t k = 0; k < bins; ++k) {
      const T g = unshifted[k * frames + m];
      out[k * frames + i0] += w0 * g;
      if (f > 0.0 && i0 + 1 < frames) out[k * frames + i0 + 1] += w1 * g;
    }
  }
}

}  // namespace detail

template <typename T>
Grid<T> apply_geometric(const Grid<T>& grid, const GeometricSpec& spec) {
  if (!(spec.gamma > 0)) fail_usage("gamma must be positive");
  Grid<T> out(grid.bins(), grid.frames());
  detail::geometric_plane(grid.data(), out.data(), grid.bins(), grid.frames(), spec);
  return out;
}

template <typename T>
Array3<T> apply_geometric(const Array3<T>& grid, const GeometricSpec& spec) {
  if (!(spec.gamma > 0)) fail_usage("gamma must be positive");
  Array3<T> out(grid.channels(), grid.bins(), grid.frames());
  for (std::size_t c = 0; c < grid.channels(); ++c)
    detail::geometric_plane(grid.channel(c), out.channel(c), grid.bins(), grid.frames(), spec);
  return out;
}

template <typename T>
Grid<T> apply_geometric_adjoint(const Grid<T>& grid, const GeometricSpec& spec) {
  Grid<T> out(grid.bins(), grid.frames());
  detail::geometric_plane_adjoint(grid.data(), out.data(), grid.bins(), grid.frames(), spec);
  return out;
}

/// The unit-dB view is transformed; linear is left as-is and flagged stale.
inline HcqtTensor apply_geometric(const HcqtTensor& hcqt, const GeometricSpec& spec) {
  HcqtTensor out;
  out.linear = hcqt.linear;
  out.unit_db = apply_geometric(hcqt.unit_db, spec);
  out.frame_times = hcqt.frame_times;
  out.linear_stale = true;
  return out;
}

inline SalienceGram apply_geometric(const SalienceGram& s, const GeometricSpec& spec) {
  return SalienceGram{apply_geometric(s.values, spec), s.frame_times};
}

// ---------------------------------------------------------------------------
// Text records for experiment logs.

inline std::string to_string(const TransformSpec& spec) {
  char buf[256];
  if (const auto* e = std::get_if<EqCurveSpec>(&spec)) {
    std::snprintf(buf, sizeof buf, "eq alpha=%.17g beta=%.17g", e->alpha, e->beta);
  } else if (const auto* p = std::get_if<PercussionMixSpec>(&spec)) {
    std::snprintf(buf, sizeof buf, "perc volume=%.17g offset=%zu source=", p->volume, p->offset);
    return std::string(buf) + p->source;
  } else {
    const auto& g = std::get<GeometricSpec>(spec);
    std::snprintf(buf, sizeof buf, "geo dk=%d dn=%d gamma=%.17g", g.dk, g.dn, g.gamma);
  }
  return buf;
}

inline TransformSpec parse_transform_spec(const std::string& text) {
  std::istringstream is(text);
  std::string tag;
  is >> tag;
  auto field = [&](const std::string& name) {
    std::string tok;
    if (!(is >> tok) || tok.rfind(name + "=", 0) != 0) fail_data("bad transform record: ", text);
    return tok.substr(name.size() + 1);
  };
  try {
    if (tag == "eq") {
      EqCurveSpec e;
      e.alpha = std::stod(field("alpha"));
      e.beta = std::stod(field("beta"));
      return e;
    }
    if (tag == "perc") {
      PercussionMixSpec p;
      p.volume = std::stod(field("volume"));
      p.offset = static_cast<std::size_t>(std::stoull(field("offset")));
      const auto pos = text.find("source=");
      if (pos == std::string::npos) fail_data("bad transform record: ", text);
      p.source = text.substr(pos + 7);
      return p;
    }
    if (tag == "geo") {
      GeometricSpec g;
      g.dk = std::stoi(field("dk"));
      g.dn = std::stoi(field("dn"));
      g.gamma = std::stod(field("gamma"));
      return g;
    }
  } catch (const std::logic_error&) {
    fail_data("bad transform record: ", text);
  }
  fail_data("unknown transform tag: ", tag);
}

}  // namespace mpe
