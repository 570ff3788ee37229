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

// Prediction-density trajectories across checkpoints and a collapse detector.

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mpe/common.hpp"
#include "mpe/eval.hpp"

namespace mpe {

struct DensityRow {
  std::size_t epoch = 0;
  std::string split;
  double mean_salience = 0;
  double active_bins = 0;
  double recall = 0;
  double f1 = 0;
};

struct DensityTrajectory {
  std::vector<DensityRow> rows;

  std::vector<DensityRow> split(const std::string& name) const {
    std::vector<DensityRow> out;
    for (const auto& r : rows)
      if (r.split == name) out.push_back(r);
    return out;
  }

  std::vector<std::string> split_names() const {
    std::vector<std::string> out;
    for (const auto& r : rows)
      if (std::find(out.begin(), out.end(), r.split) == out.end()) out.push_back(r.split);
    return out;
  }
};

struct DiagnosticSplit {
  std::string name;
  std::vector<EvalTrack> tracks;
};

/// One row per split, averaged over tracks.
template <typename T>
std::vector<DensityRow> record_checkpoint(const Model<T>& model, const std::vector<DiagnosticSplit>& splits,
                                          std::size_t epoch, const SpectralConfig& config, std::size_t tile_frames,
                                          double threshold = 0.5) {
  std::vector<DensityRow> rows;
  for (const auto& s : splits) {
    if (s.tracks.empty()) fail_usage("diagnostic split '", s.name, "' has no tracks");
    DensityRow row;
    row.epoch = epoch;
    row.split = s.name;
    for (const auto& t : s.tracks) {
      const auto ev = evaluate_track(model, t, config, tile_frames, threshold);
      row.mean_salience += ev.mean_salience;
      row.active_bins += ev.active_bins;
      row.recall += ev.metrics.recall;
      row.f1 += ev.metrics.f1;
    }
    const double n = static_cast<double>(s.tracks.size());
    row.mean_salience /= n;
    row.active_bins /= n;
    row.recall /= n;
    row.f1 /= n;
    rows.push_back(row);
  }
  return rows;
}

enum class VerdictState { not_flagged, flagged, indeterminate };

inline const char* verdict_name(VerdictState s) {
  switch (s) {
    case VerdictState::not_flagged: return "stable";
    case VerdictState::flagged: return "degenerating";
    case VerdictState::indeterminate: return "indeterminate";
  }
  return "?";
}

struct DegenerationVerdict {
  std::string split;
  VerdictState state = VerdictState::indeterminate;
  double peak_recall = 0;
  double trailing_recall = 0;  // mean over the last ceil(window/2) rows
  bool salience_non_increasing = false;
  std::size_t rows = 0;
};

/// Flags a split when mean recall over the last ceil(window/2) rows has fallen
/// below `drop` times the split's peak recall and mean salience never rises
/// inside the trailing window. Fewer than `window` rows give an indeterminate verdict.
inline std::vector<DegenerationVerdict> detect_degeneration(const DensityTrajectory& traj, std::size_t window = 5,
                                                            double drop = 0.5) {
  if (window < 2) fail_usage("degeneration window must be >= 2");
  if (!(drop > 0 && drop < 1)) fail_usage("degeneration drop must lie in (0, 1)");
  std::vector<DegenerationVerdict> out;
  for (const auto& name : traj.split_names()) {
    const auto rows = traj.split(name);
    DegenerationVerdict v;
    v.split = name;
    v.rows = rows.size();
    if (rows.size() < window) {
      out.push_back(v);
      continue;
    }
    for (const auto& r : rows) v.peak_recall = std::max(v.peak_recall, r.recall);
    const std::size_t tail = (window + 1) / 2;
    for (std::size_t i = rows.size() - tail; i < rows.size(); ++i) v.trailing_recall += rows[i].recall;
    v.trailing_recall /= static_cast<double>(tail);
    v.salience_non_increasing = true;
    for (std::size_t i = rows.size() - window + 1; i < rows.size(); ++i)
      if (rows[i].mean_salience > rows[i - 1].mean_salience) v.salience_non_increasing = false;
    const bool dropped = v.trailing_recall < drop * v.peak_recall;
    v.state = dropped && v.salience_non_increasing ? VerdictState::flagged : VerdictState::not_flagged;
    out.push_back(v);
  }
  return out;
}

inline void write_density_tsv(const std::string& path, const std::vector<DensityRow>& rows, bool header = true,
                              bool append = false) {
  std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
  if (!os) fail_data("cannot open ", path, " for writing");
  if (header) os << "epoch\tsplit\tmean_salience\tactive_bins\trecall\tf1\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu\t%s\t%.6g\t%.6g\t%.6g\t%.6g\n", r.epoch, r.split.c_str(), r.mean_salience,
                  r.active_bins, r.recall, r.f1);
    os << buf;
  }
  if (!os) fail_data("write failed: ", path);
}

inline DensityTrajectory read_density_tsv(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail_data("cannot open ", path);
  DensityTrajectory t;
  std::string line;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty() || line.rfind("epoch", 0) == 0) continue;
    std::istringstream ls(line);
    DensityRow r;
    if (!(ls >> r.epoch >> r.split >> r.mean_salience >> r.active_bins >> r.recall >> r.f1))
      fail_data(path, ":", row, ": malformed density row");
    t.rows.push_back(r);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Curves

/// Legend labels for the regimes compared in the collapse experiments.
inline constexpr const char* label_reference = "Ref.";
inline constexpr const char* label_ssl16 = "+16";
inline constexpr const char* label_ssl16_energy = "+16+EG";
inline constexpr const char* label_ssl16_finetune = "+16-FT";

struct RegimeCurve {
  std::string label;
  DensityTrajectory trajectory;
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '&') o += "&amp;";
    else if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else o += c;
  }
  return o;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  return colors[i % 6];
}

// Two stacked panels (F1, mean salience) against epoch for one split.
inline std::string render_split_svg(const std::string& split, const std::vector<RegimeCurve>& curves) {
  const double W = 640, H = 480, left = 60, right = 150, top = 30, panel = 180, gap = 50;
  double emax = 1;
  double smax = 0;
  for (const auto& c : curves)
    for (const auto& r : c.trajectory.split(split)) {
      emax = std::max(emax, static_cast<double>(r.epoch));
      smax = std::max(smax, r.mean_salience);
    }
  smax = smax > 0 ? smax * 1.1 : 1.0;
  std::string s;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" font-family=\"sans-serif\" "
                "font-size=\"11\">\n<rect width=\"100%%\" height=\"100%%\" fill=\"white\"/>\n",
                W, H);
  s += buf;
  s += "<text x=\"" + std::to_string(static_cast<int>(left)) + "\" y=\"18\" font-size=\"13\">split: " +
       svg_escape(split) + "</text>\n";
  const double pw = W - left - right;
  const char* titles[] = {"F1", "mean salience"};
  for (int p = 0; p < 2; ++p) {
    const double y0 = top + p * (panel + gap);
    const double ymax = p == 0 ? 1.0 : smax;
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"black\"/>\n"
                  "<text x=\"%g\" y=\"%g\">%s</text>\n<text x=\"%g\" y=\"%g\">0</text>\n"
                  "<text x=\"%g\" y=\"%g\">%.3g</text>\n<text x=\"%g\" y=\"%g\">epoch %g</text>\n",
                  left, y0, pw, panel, left, y0 - 4, titles[p], left - 14, y0 + panel, left - 40, y0 + 10, ymax,
                  left + pw - 60, y0 + panel + 14, emax);
    s += buf;
    for (std::size_t ci = 0; ci < curves.size(); ++ci) {
      const auto rows = curves[ci].trajectory.split(split);
      if (rows.empty()) continue;
      std::string pts;
      for (const auto& r : rows) {
        const double v = p == 0 ? r.f1 : r.mean_salience;
        std::snprintf(buf, sizeof buf, "%.2f,%.2f ", left + pw * static_cast<double>(r.epoch) / emax,
                      y0 + panel - panel * std::clamp(v / ymax, 0.0, 1.0));
        pts += buf;
      }
      s += std::string("<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"") + palette(ci) + "\" points=\"" +
           pts + "\"/>\n";
    }
  }
  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const double y = top + 14 + 16 * static_cast<double>(ci);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"%s\" stroke-width=\"2\"/>"
                  "<text x=\"%g\" y=\"%g\">",
                  W - right + 10, y - 4, W - right + 30, y - 4, palette(ci), W - right + 36, y);
    s += buf;
    s += svg_escape(curves[ci].label) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace detail

/// Writes `<prefix><split>.svg` for every split and `<prefix>curves.tsv`.
/// Returns the written paths.
inline std::vector<std::string> emit_curves(const std::vector<RegimeCurve>& curves, const std::string& prefix) {
  std::vector<std::string> splits;
  for (const auto& c : curves)
    for (const auto& n : c.trajectory.split_names())
      if (std::find(splits.begin(), splits.end(), n) == splits.end()) splits.push_back(n);
  if (splits.empty()) fail_usage("no trajectory rows to plot");

  std::vector<std::string> written;
  const std::string tsv = prefix + "curves.tsv";
  {
    std::ofstream os(tsv);
    if (!os) fail_data("cannot open ", tsv, " for writing");
    os << "regime\tepoch\tsplit\tmean_salience\tactive_bins\trecall\tf1\n";
    char buf[200];
    for (const auto& c : curves)
      for (const auto& r : c.trajectory.rows) {
        std::snprintf(buf, sizeof buf, "\t%zu\t%s\t%.6g\t%.6g\t%.6g\t%.6g\n", r.epoch, r.split.c_str(),
                      r.mean_salience, r.active_bins, r.recall, r.f1);
        os << c.label << buf;
      }
    if (!os) fail_data("write failed: ", tsv);
  }
  written.push_back(tsv);
  for (const auto& split : splits) {
    const std::string path = prefix + split + ".svg";
    std::ofstream os(path);
    if (!os) fail_data("cannot open ", path, " for writing");
    os << detail::render_split_svg(split, curves);
    if (!os) fail_data("write failed: ", path);
    written.push_back(path);
  }
  return written;
}

}  // namespace mpe
