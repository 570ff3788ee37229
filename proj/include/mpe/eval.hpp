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

// Peak picking and frame-level multi-pitch scoring.

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpe/common.hpp"
#include "mpe/dataio.hpp"
#include "mpe/model.hpp"
#include "mpe/spectral.hpp"
#include "mpe/targets.hpp"

namespace mpe {

struct MultipitchEstimate {
  std::vector<double> frame_times;
  std::vector<std::vector<double>> frequencies;  // ascending Hz per frame

  std::size_t frames() const { return frame_times.size(); }
};

/// Bins where v >= threshold, v > left and v >= right (missing neighbours are
/// -inf), so a plateau reports its leftmost bin.
inline std::vector<std::size_t> pick_frame(const float* column, std::size_t stride, std::size_t bins,
                                           double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < bins; ++k) {
    const double v = column[k * stride];
    if (v < threshold) continue;
    if (k > 0 && !(v > column[(k - 1) * stride])) continue;
    if (k + 1 < bins && !(v >= column[(k + 1) * stride])) continue;
    out.push_back(k);
  }
  return out;
}

inline void check_threshold(double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) fail_usage("threshold ", threshold, " outside [0, 1]");
}

inline MultipitchEstimate peak_pick(const SalienceGram& salience, const SpectralConfig& config,
                                    double threshold = 0.5) {
  check_threshold(threshold);
  const std::size_t K = salience.bins(), N = salience.frames();
  MultipitchEstimate est;
  est.frame_times = salience.frame_times;
  est.frequencies.resize(N);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k : pick_frame(salience.values.values().data() + n, N, K, threshold))
      est.frequencies[n].push_back(bin_to_hz(static_cast<double>(k), config));
  return est;
}

/// |12 log2(est / ref)| <= tol, with a 1e-9 semitone allowance for rounding.
inline bool pitch_match(double est_hz, double ref_hz, double tol_semitones) {
  return std::abs(12.0 * std::log2(est_hz / ref_hz)) <= tol_semitones + 1e-9;
}

/// One-to-one matches between two ascending frequency lists. With a common
/// tolerance on a log axis every match window has the same width, so the
/// two-pointer sweep attains the maximum matching.
inline std::size_t greedy_match_count(const std::vector<double>& est, const std::vector<double>& ref,
                                      double tol_semitones) {
  std::size_t i = 0, j = 0, tp = 0;
  while (i < est.size() && j < ref.size()) {
    if (pitch_match(est[i], ref[j], tol_semitones)) {
      ++tp, ++i, ++j;
    } else if (est[i] < ref[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return tp;
}

struct TrackMetrics {
  std::string track;
  double precision = 0, recall = 0, f1 = 0;
  std::size_t tp = 0, n_est = 0, n_ref = 0, frames = 0;
};

struct MetricsReport {
  std::vector<TrackMetrics> tracks;
  double precision = 0, recall = 0, f1 = 0;  // unweighted means over tracks
  std::vector<std::string> skipped;          // unreadable tracks with reasons
};

inline double f1_score(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

/// Scores frames inside the annotation's time support. Each estimate frame is
/// compared with the nearest annotation row within half the row period.
inline TrackMetrics multipitch_metrics(const MultipitchEstimate& est, const PitchAnnotation& ref,
                                       double tol_semitones = 0.5, const std::string& track = "") {
  if (est.frames() == 0 || ref.entries.empty()) fail_data(track, ": no overlapping time support");
  const double period = ref.period().value_or(est.frames() > 1 ? est.frame_times[1] - est.frame_times[0] : 0.0);
  const double lo = ref.entries.front().time - period / 2.0;
  const double hi = ref.entries.back().time + period / 2.0;
  TrackMetrics m;
  m.track = track;
  for (std::size_t n = 0; n < est.frames(); ++n) {
    const double t = est.frame_times[n];
    if (t < lo - 1e-9 || t > hi + 1e-9) continue;
    ++m.frames;
    const auto row = ref.nearest(t, period / 2.0);
    std::vector<double> e = est.frequencies[n];
    std::vector<double> r = row ? ref.entries[*row].f0s : std::vector<double>{};
    std::sort(e.begin(), e.end());
    std::sort(r.begin(), r.end());
    m.tp += greedy_match_count(e, r, tol_semitones);
    m.n_est += e.size();
    m.n_ref += r.size();
  }
  if (m.frames == 0) fail_data(track, ": no overlapping time support");
  auto ratio = [](std::size_t num, std::size_t den, std::size_t other) {
    if (den == 0) return other == 0 ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(m.tp, m.n_est, m.n_ref);
  m.recall = ratio(m.tp, m.n_ref, m.n_est);
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

inline MetricsReport aggregate(std::vector<TrackMetrics> tracks) {
  MetricsReport rep;
  std::sort(tracks.begin(), tracks.end(), [](const auto& a, const auto& b) { return a.track < b.track; });
  for (const auto& t : tracks) {
    rep.precision += t.precision;
    rep.recall += t.recall;
    rep.f1 += t.f1;
  }
  if (!tracks.empty()) {
    const double n = static_cast<double>(tracks.size());
    rep.precision /= n;
    rep.recall /= n;
    rep.f1 /= n;
  }
  rep.tracks = std::move(tracks);
  return rep;
}

// ---------------------------------------------------------------------------
// Full-track inference

/// A track ready for scoring: its whole-track spectrogram and annotation.
struct EvalTrack {
  std::string id;
  HcqtTensor hcqt;
  PitchAnnotation annotation;
};

/// Runs the model over non-overlapping tiles of `tile_frames` frames (each
/// tile re-normalised like a training excerpt) and concatenates the results.
template <typename T>
SalienceGram infer_track(const Model<T>& model, const HcqtTensor& full, const SpectralConfig& config,
                         std::size_t tile_frames) {
  if (tile_frames == 0) fail_usage("tile length must be positive");
  const std::size_t N = full.frames(), K = full.bins();
  SalienceGram out{Grid<float>(K, N), full.frame_times};
  for (std::size_t first = 0; first < N; first += tile_frames) {
    const HcqtTensor tile = slice_frames(full, first, tile_frames, config);
    const SalienceGram y = model.forward(tile);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t n = 0; n < tile_frames && first + n < N; ++n) out.values(k, first + n) = y.values(k, n);
  }
  return out;
}

struct TrackEvaluation {
  TrackMetrics metrics;
  double mean_salience = 0;
  double active_bins = 0;  // mean picked bins per frame
};

template <typename T>
TrackEvaluation evaluate_track(const Model<T>& model, const EvalTrack& track, const SpectralConfig& config,
                               std::size_t tile_frames, double threshold = 0.5, double tol = 0.5) {
  const SalienceGram y = infer_track(model, track.hcqt, config, tile_frames);
  const MultipitchEstimate est = peak_pick(y, config, threshold);
  TrackEvaluation ev;
  ev.metrics = multipitch_metrics(est, track.annotation, tol, track.id);
  double sum = 0;
  for (float v : y.values.values()) sum += v;
  ev.mean_salience = y.values.size() ? sum / static_cast<double>(y.values.size()) : 0.0;
  std::size_t picked = 0;
  for (const auto& f : est.frequencies) picked += f.size();
  ev.active_bins = est.frames() ? static_cast<double>(picked) / static_cast<double>(est.frames()) : 0.0;
  return ev;
}

template <typename T>
MetricsReport evaluate_dataset(const Model<T>& model, const std::vector<EvalTrack>& tracks,
                               const SpectralConfig& config, std::size_t tile_frames, double threshold = 0.5,
                               double tol = 0.5) {
  std::vector<TrackMetrics> m;
  m.reserve(tracks.size());
  for (const auto& t : tracks) m.push_back(evaluate_track(model, t, config, tile_frames, threshold, tol).metrics);
  return aggregate(std::move(m));
}

/// Loads audio and annotation for each record. Unreadable tracks are skipped
/// and listed in `skipped`.
inline std::vector<EvalTrack> load_eval_tracks(const std::vector<TrackRecord>& records, const SpectralConfig& config,
                                               std::vector<std::string>* skipped = nullptr) {
  std::vector<EvalTrack> out;
  const HcqtPlan plan(config);
  for (const auto& r : records) {
    try {
      if (!r.annotation_path) fail_data(r.id, ": no annotation");
      EvalTrack t;
      t.id = r.id;
      t.annotation = read_annotation(*r.annotation_path);
      t.annotation.source_id = r.id;
      const auto audio = load_audio(r.audio_path, config.sample_rate);
      t.hcqt = plan.compute(audio);
      out.push_back(std::move(t));
    } catch (const Error& e) {
      if (!skipped) throw;
      skipped->push_back(r.id + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report files

inline void write_metrics_tsv(const std::string& path, const MetricsReport& rep) {
  std::ofstream os(path);
  if (!os) fail_data("cannot open ", path, " for writing");
  char buf[64];
  os << "track\tP\tR\tF1\n";
  auto line = [&](const std::string& name, double p, double r, double f) {
    std::snprintf(buf, sizeof buf, "\t%.4f\t%.4f\t%.4f\n", p, r, f);
    os << name << buf;
  };
  for (const auto& t : rep.tracks) line(t.track, t.precision, t.recall, t.f1);
  line("mean", rep.precision, rep.recall, rep.f1);
  if (!os) fail_data("write failed: ", path);
}

inline nlohmann::json metrics_json(const MetricsReport& rep) {
  nlohmann::json j;
  j["tracks"] = nlohmann::json::array();
  for (const auto& t : rep.tracks)
    j["tracks"].push_back({{"track", t.track}, {"P", t.precision}, {"R", t.recall}, {"F1", t.f1},
                           {"tp", t.tp}, {"n_est", t.n_est}, {"n_ref", t.n_ref}, {"frames", t.frames}});
  j["mean"] = {{"P", rep.precision}, {"R", rep.recall}, {"F1", rep.f1}};
  j["skipped"] = rep.skipped;
  return j;
}

inline void write_metrics_json(const std::string& path, const MetricsReport& rep) {
  std::ofstream os(path);
  if (!os) fail_data("cannot open ", path, " for writing");
  os << metrics_json(rep).dump(2) << '\n';
  if (!os) fail_data("write failed: ", path);
}

/// Estimate file in the annotation format: time, then picked f0s.
inline void write_estimate(const std::string& path, const MultipitchEstimate& est) {
  PitchAnnotation a;
  for (std::size_t n = 0; n < est.frames(); ++n) a.entries.push_back({est.frame_times[n], est.frequencies[n]});
  write_annotation(path, a);
}

}  // namespace mpe
