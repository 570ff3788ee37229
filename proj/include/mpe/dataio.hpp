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

// Audio and annotation ingestion, resampling, dataset manifests and splits,
// and the synthetic polyphony/percussion generators used as test oracles.

#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mpe/common.hpp"
#include "mpe/config.hpp"
#include "mpe/spectral.hpp"
#include "mpe/targets.hpp"

namespace mpe {

inline constexpr double model_sample_rate = 22050.0;

// ---------------------------------------------------------------------------
// WAV

struct WavData {
  double sample_rate = 0;
  std::size_t channels = 0;
  std::vector<float> mono;  // mean downmix, [-1, 1]
};

inline WavData read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open ", path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto u16 = [&](std::size_t at) {
    if (at + 2 > bytes.size()) fail_data(path, ": truncated at byte ", at);
    return static_cast<std::uint32_t>(bytes[at] | (bytes[at + 1] << 8));
  };
  auto u32 = [&](std::size_t at) {
    if (at + 4 > bytes.size()) fail_data(path, ": truncated at byte ", at);
    return static_cast<std::uint32_t>(bytes[at]) | (static_cast<std::uint32_t>(bytes[at + 1]) << 8) |
           (static_cast<std::uint32_t>(bytes[at + 2]) << 16) | (static_cast<std::uint32_t>(bytes[at + 3]) << 24);
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0)
    fail_data(path, ": missing RIFF header at byte 0");
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) fail_data(path, ": missing WAVE tag at byte 8");

  std::uint32_t format = 0, channels = 0, rate = 0, bits = 0;
  std::size_t data_at = 0, data_len = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t len = u32(pos + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
      if (len < 16) fail_data(path, ": short fmt chunk at byte ", pos);
      format = u16(body);
      channels = u16(body + 2);
      rate = u32(body + 4);
      bits = u16(body + 14);
      if (format == 0xFFFE && len >= 26) format = u16(body + 24);
      have_fmt = true;
    } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
      data_at = body;
      data_len = std::min<std::size_t>(len, bytes.size() - body);
      break;
    }
    pos = body + len + (len & 1u);
  }
  if (!have_fmt) fail_data(path, ": no fmt chunk before byte ", pos);
  if (data_at == 0) fail_data(path, ": no data chunk before byte ", pos);
  if (channels == 0) fail_data(path, ": zero channels in fmt chunk at byte 22");
  if (rate == 0) fail_data(path, ": zero sample rate in fmt chunk at byte 24");
  const bool is_float = format == 3;
  if (!(format == 1 || is_float)) fail_data(path, ": unsupported format tag ", format, " at byte 20");
  if (is_float && bits != 32 && bits != 64) fail_data(path, ": unsupported float width ", bits, " at byte 34");
  if (!is_float && bits != 8 && bits != 16 && bits != 24 && bits != 32)
    fail_data(path, ": unsupported PCM width ", bits, " at byte 34");

  const std::size_t width = bits / 8;
  const std::size_t frames = data_len / (width * channels);
  WavData w;
  w.sample_rate = rate;
  w.channels = channels;
  w.mono.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = bytes.data() + data_at + (i * channels + c) * width;
      double v = 0.0;
      if (is_float && bits == 32) {
        float f;
        std::memcpy(&f, p, 4);
        v = f;
      } else if (is_float) {
        double d;
        std::memcpy(&d, p, 8);
        v = d;
      } else if (bits == 8) {
        v = (static_cast<int>(p[0]) - 128) / 128.0;
      } else if (bits == 16) {
        v = static_cast<std::int16_t>(p[0] | (p[1] << 8)) / 32768.0;
      } else if (bits == 24) {
        std::int32_t s = p[0] | (p[1] << 8) | (p[2] << 16);
        if (s & 0x800000) s -= 0x1000000;
        v = s / 8388608.0;
      } else {
        std::int32_t s;
        std::memcpy(&s, p, 4);
        v = s / 2147483648.0;
      }
      acc += v;
    }
    w.mono[i] = static_cast<float>(acc / static_cast<double>(channels));
  }
  return w;
}

/// Writes mono PCM16 (default) or float32.
inline void write_wav(const std::string& path, std::span<const float> samples, double sample_rate,
                      bool float32 = false) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail_data("cannot open ", path, " for writing");
  const std::uint32_t width = float32 ? 4 : 2;
  const auto data_len = static_cast<std::uint32_t>(samples.size() * width);
  auto u16 = [&](std::uint32_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
  };
  os.write("RIFF", 4);
  detail::put_u32(os, 36 + data_len);
  os.write("WAVEfmt ", 8);
  detail::put_u32(os, 16);
  u16(float32 ? 3 : 1);
  u16(1);
  detail::put_u32(os, static_cast<std::uint32_t>(sample_rate));
  detail::put_u32(os, static_cast<std::uint32_t>(sample_rate) * width);
  u16(width);
  u16(width * 8);
  os.write("data", 4);
  detail::put_u32(os, data_len);
  for (float s : samples) {
    if (float32) {
      detail::put_f32(os, s);
    } else {
      const double v = std::clamp(std::round(static_cast<double>(s) * 32768.0), -32768.0, 32767.0);
      u16(static_cast<std::uint32_t>(static_cast<std::uint16_t>(static_cast<std::int16_t>(v))));
    }
  }
  if (!os) fail_data("write failed: ", path);
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {
inline double bessel_i0(double x) {
  double sum = 1.0, term = 1.0;
  for (int k = 1; k < 64; ++k) {
    term *= (x / (2.0 * k)) * (x / (2.0 * k));
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum;
}
}  // namespace detail

/// Kaiser-windowed sinc interpolation. The cutoff tracks the lower of the two
/// Nyquist rates.
inline std::vector<float> resample(std::span<const float> in, double from_rate, double to_rate,
                                   int zero_crossings = 32, double beta = 8.6) {
  if (!(from_rate > 0 && to_rate > 0)) fail_usage("sample rates must be positive");
  if (from_rate == to_rate) return {in.begin(), in.end()};
  const double ratio = to_rate / from_rate;
  const double cutoff = 0.5 * std::min(1.0, ratio) * 0.97;  // cycles per input sample
  const double half_width = zero_crossings / (2.0 * cutoff);
  const auto out_len = static_cast<std::size_t>(std::ceil(static_cast<double>(in.size()) * ratio));
  const double i0_beta = detail::bessel_i0(beta);
  const double pi = 3.14159265358979323846;
  std::vector<float> out(out_len);
  const auto len = static_cast<std::ptrdiff_t>(in.size());
  for (std::size_t m = 0; m < out_len; ++m) {
    const double t = static_cast<double>(m) / ratio;
    const auto lo = static_cast<std::ptrdiff_t>(std::ceil(t - half_width));
    const auto hi = static_cast<std::ptrdiff_t>(std::floor(t + half_width));
    double acc = 0.0;
    for (std::ptrdiff_t n = std::max<std::ptrdiff_t>(lo, 0); n <= std::min(hi, len - 1); ++n) {
      const double d = t - static_cast<double>(n);
      const double r = d / half_width;
      const double w = detail::bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - r * r))) / i0_beta;
      const double x = 2.0 * cutoff * d;
      const double sinc = x == 0.0 ? 1.0 : std::sin(pi * x) / (pi * x);
      acc += in[static_cast<std::size_t>(n)] * 2.0 * cutoff * sinc * w;
    }
    out[m] = static_cast<float>(acc);
  }
  return out;
}

/// Mono samples at `target_rate`.
inline std::vector<float> load_audio(const std::string& path, double target_rate = model_sample_rate) {
  WavData w = read_wav(path);
  if (w.sample_rate == target_rate) return std::move(w.mono);
  return resample(w.mono, w.sample_rate, target_rate);
}

// ---------------------------------------------------------------------------
// Synthetic tracks

struct SynthNote {
  double start = 0.0;
  double end = 0.0;
  double hz = 0.0;
};

/// Additive-synthesis track description. Each voice is a list of
/// non-overlapping notes with partial amplitudes 1/p.
struct SynthSpec {
  std::vector<std::vector<SynthNote>> voices;
  std::size_t partials = 8;
  double duration = 4.0;
  double noise_floor = 1e-3;
  double sample_rate = model_sample_rate;
  double annotation_period = 0.01;
  std::size_t seed = 0;
};

struct SynthTrack {
  std::vector<float> samples;
  PitchAnnotation annotation;
};

inline SynthTrack synth_track(const SynthSpec& spec) {
  if (!(spec.duration > 0)) fail_usage("synth duration must be positive");
  const auto len = static_cast<std::size_t>(std::llround(spec.duration * spec.sample_rate));
  std::vector<double> mix(len, 0.0);
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * 3.14159265358979323846);
  const double nyquist = spec.sample_rate / 2.0;
  const double ramp = 0.005 * spec.sample_rate;
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (const auto& voice : spec.voices) {
    for (const auto& note : voice) {
      const auto s0 = static_cast<std::size_t>(std::max(0.0, std::ceil(note.start * spec.sample_rate)));
      const auto s1 = std::min(len, static_cast<std::size_t>(std::ceil(note.end * spec.sample_rate)));
      for (std::size_t p = 1; p <= spec.partials; ++p) {
        const double f = note.hz * static_cast<double>(p);
        const double ph = phase(rng);
        if (f >= nyquist) continue;
        const double amp = 1.0 / static_cast<double>(p);
        for (std::size_t i = s0; i < s1; ++i) {
          const double env = std::min({1.0, (static_cast<double>(i - s0) + 1.0) / ramp,
                                       static_cast<double>(s1 - i) / ramp});
          mix[i] += env * amp * std::sin(two_pi * f * static_cast<double>(i) / spec.sample_rate + ph);
        }
      }
    }
  }
  if (spec.noise_floor > 0) {
    std::normal_distribution<double> noise(0.0, spec.noise_floor);
    for (auto& v : mix) v += noise(rng);
  }
  double peak = 0.0;
  for (double v : mix) peak = std::max(peak, std::abs(v));
  SynthTrack out;
  out.samples.resize(len);
  const double scale = peak > 0 ? 0.9 / peak : 0.0;
  for (std::size_t i = 0; i < len; ++i) out.samples[i] = static_cast<float>(mix[i] * scale);

  const auto rows = static_cast<std::size_t>(std::ceil(spec.duration / spec.annotation_period - 1e-9));
  out.annotation.entries.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    PitchEntry e;
    e.time = static_cast<double>(r) * spec.annotation_period;
    for (const auto& voice : spec.voices)
      for (const auto& note : voice)
        if (note.start <= e.time && e.time < note.end) e.f0s.push_back(note.hz);
    std::sort(e.f0s.begin(), e.f0s.end());
    out.annotation.entries.push_back(std::move(e));
  }
  return out;
}

struct RandomSynthOptions {
  std::size_t min_voices = 1;
  std::size_t max_voices = 4;
  double duration = 4.0;
  /// F0s are drawn on the semitone grid of `config` between these bins.
  std::size_t lowest_bin = 60;
  std::size_t highest_bin = 360;
  double min_note = 0.3;
  double max_note = 1.0;
  double rest_probability = 0.1;
  std::size_t partials = 8;
};

/// Random piecewise-constant polyphony. Simultaneous voices never share a pitch.
inline SynthSpec random_synth_spec(std::size_t seed, const RandomSynthOptions& opt, const SpectralConfig& config) {
  if (opt.min_voices > opt.max_voices || opt.lowest_bin > opt.highest_bin) fail_usage("bad random synth options");
  Rng rng(seed);
  SynthSpec spec;
  spec.duration = opt.duration;
  spec.partials = opt.partials;
  spec.sample_rate = config.sample_rate;
  spec.seed = seed ^ 0x9e3779b97f4a7c15ULL;
  const std::size_t step = config.bins_per_semitone;
  const std::size_t first = (opt.lowest_bin + step - 1) / step;
  const std::size_t last = opt.highest_bin / step;
  const std::size_t n_voices = std::uniform_int_distribution<std::size_t>(opt.min_voices, opt.max_voices)(rng);
  std::uniform_real_distribution<double> dur(opt.min_note, opt.max_note);
  std::uniform_int_distribution<std::size_t> semitone(first, last);
  std::bernoulli_distribution rest(opt.rest_probability);
  spec.voices.resize(n_voices);
  for (std::size_t v = 0; v < n_voices; ++v) {
    double t = 0.0;
    while (t < opt.duration) {
      const double end = std::min(opt.duration, t + dur(rng));
      if (!rest(rng)) {
        // Retry until no other voice holds the same pitch in the overlap.
        for (int attempt = 0; attempt < 32; ++attempt) {
          const double hz = bin_to_hz(static_cast<double>(semitone(rng) * step), config);
          bool clash = false;
          for (std::size_t u = 0; u < v && !clash; ++u)
            for (const auto& n : spec.voices[u])
              if (n.hz == hz && n.start < end && t < n.end) clash = true;
          if (!clash) {
            spec.voices[v].push_back({t, end, hz});
            break;
          }
        }
      }
      t = end;
    }
  }
  return spec;
}

/// Sparse decaying noise bursts: low-passed "kick" and high-passed "hat"
/// variants at 2-8 onsets per second.
inline std::vector<float> synth_percussion(Rng& rng, double duration, double sample_rate = model_sample_rate) {
  if (!(duration > 0)) fail_usage("percussion duration must be positive");
  const auto len = static_cast<std::size_t>(std::llround(duration * sample_rate));
  std::vector<double> out(len, 0.0);
  const double rate = std::uniform_real_distribution<double>(2.0, 8.0)(rng);
  std::exponential_distribution<double> gap(rate);
  std::uniform_real_distribution<double> decay_s(0.02, 0.08);
  std::uniform_real_distribution<double> gain(0.3, 1.0);
  std::normal_distribution<double> white(0.0, 1.0);
  std::bernoulli_distribution kick(0.5);
  double t = gap(rng) * 0.5;
  while (t < duration) {
    const auto start = static_cast<std::size_t>(t * sample_rate);
    const double decay = decay_s(rng) * sample_rate;
    const double g = gain(rng);
    const bool low = kick(rng);
    const auto stop = std::min(len, start + static_cast<std::size_t>(decay * 6.0));
    double state = 0.0, prev = 0.0;
    const double a = low ? std::exp(-2.0 * 3.14159265358979323846 * 150.0 / sample_rate) : 0.0;
    for (std::size_t i = start; i < stop; ++i) {
      const double w = white(rng);
      double v;
      if (low) {
        state = (1.0 - a) * w + a * state;  // one-pole low-pass
        v = state * 4.0;
      } else {
        v = w - prev;  // first difference: high-pass
        prev = w;
      }
      out[i] += g * v * std::exp(-static_cast<double>(i - start) / decay);
    }
    t += gap(rng);
  }
  double peak = 0.0;
  for (double v : out) peak = std::max(peak, std::abs(v));
  std::vector<float> res(len);
  const double scale = peak > 0 ? 0.9 / peak : 0.0;
  for (std::size_t i = 0; i < len; ++i) res[i] = static_cast<float>(out[i] * scale);
  return res;
}

// ---------------------------------------------------------------------------
// Manifests and splits

enum class Role { train_supervised, train_ssl, validation, test };

inline std::string role_name(Role r) {
  switch (r) {
    case Role::train_supervised: return "train-supervised";
    case Role::train_ssl: return "train-ssl";
    case Role::validation: return "validation";
    case Role::test: return "test";
  }
  return "?";
}

inline Role parse_role(const std::string& s) {
  if (s == "train-supervised") return Role::train_supervised;
  if (s == "train-ssl") return Role::train_ssl;
  if (s == "validation") return Role::validation;
  if (s == "test") return Role::test;
  fail_data("unknown role '", s, "'");
}

struct TrackRecord {
  std::string id;
  std::string audio_path;
  std::optional<std::string> annotation_path;
  std::vector<Role> roles;

  bool has_role(Role r) const { return std::find(roles.begin(), roles.end(), r) != roles.end(); }
};

/// One record per line: id<TAB>audio<TAB>annotation-or-dash<TAB>roles.
/// Relative paths resolve against the manifest's directory.
inline std::vector<TrackRecord> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail_data("cannot open manifest ", path);
  const auto slash = path.find_last_of('/');
  const std::string base = slash == std::string::npos ? "" : path.substr(0, slash + 1);
  auto resolve = [&](const std::string& p) { return (!p.empty() && p[0] == '/') ? p : base + p; };
  std::vector<TrackRecord> out;
  std::string line;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const auto tab = line.find('\t', pos);
      f.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (f.size() != 4) fail_data(path, ":", row, ": expected 4 tab-separated fields");
    TrackRecord r;
    r.id = f[0];
    r.audio_path = resolve(f[1]);
    if (f[2] != "-") r.annotation_path = resolve(f[2]);
    for (const auto& tok : KeyValues::split_list(f[3])) r.roles.push_back(parse_role(tok));
    if (r.has_role(Role::train_supervised) && !r.annotation_path)
      fail_data(path, ":", row, ": supervised track '", r.id, "' has no annotation");
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<TrackRecord>& records) {
  std::ofstream os(path);
  if (!os) fail_data("cannot open ", path, " for writing");
  for (const auto& r : records) {
    std::string roles;
    for (Role x : r.roles) roles += (roles.empty() ? "" : ",") + role_name(x);
    os << r.id << '\t' << r.audio_path << '\t' << r.annotation_path.value_or("-") << '\t' << roles << '\n';
  }
  if (!os) fail_data("write failed: ", path);
}

enum class SplitKind {
  by_role,  // roles as written; train-ssl tracks (any corpus) feed the ssl pool
  t1t2,     // carve `t2_size` supervised tracks into a same-distribution ssl pool
  reference // no ssl pool
};

struct SplitScheme {
  SplitKind kind = SplitKind::by_role;
  std::size_t t2_size = 10;
  std::size_t seed = 0;
};

struct SplitSet {
  std::vector<TrackRecord> supervised, ssl, validation, test;
};

inline SplitSet make_splits(const std::vector<TrackRecord>& records, const SplitScheme& scheme) {
  SplitSet s;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) fail_data("duplicate track id '", r.id, "'");
    std::size_t roles = 0;
    for (Role x : {Role::train_supervised, Role::train_ssl, Role::validation, Role::test}) roles += r.has_role(x);
    if (roles > 1) fail_data("overlapping assignments for track '", r.id, "'");
    if (r.has_role(Role::train_supervised)) s.supervised.push_back(r);
    else if (r.has_role(Role::train_ssl)) s.ssl.push_back(r);
    else if (r.has_role(Role::validation)) s.validation.push_back(r);
    else if (r.has_role(Role::test)) s.test.push_back(r);
  }
  if (scheme.kind == SplitKind::reference) {
    s.ssl.clear();
  } else if (scheme.kind == SplitKind::t1t2) {
    if (scheme.t2_size > s.supervised.size())
      fail_data("t1/t2 split needs ", scheme.t2_size, " tracks, supervised pool has ", s.supervised.size());
    std::vector<std::size_t> order(s.supervised.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(scheme.seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> to_t2(order.size(), false);
    for (std::size_t i = 0; i < scheme.t2_size; ++i) to_t2[order[i]] = true;
    std::vector<TrackRecord> t1, t2;
    for (std::size_t i = 0; i < s.supervised.size(); ++i) {
      TrackRecord r = s.supervised[i];
      if (to_t2[i]) {
        r.roles = {Role::train_ssl};
        t2.push_back(std::move(r));
      } else {
        t1.push_back(std::move(r));
      }
    }
    s.supervised = std::move(t1);
    s.ssl = std::move(t2);
  }
  return s;
}

}  // namespace mpe
