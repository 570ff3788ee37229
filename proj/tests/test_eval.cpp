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

#include <gtest/gtest.h>

#include <json.hpp>

#include "mpe/eval.hpp"
#include "support.hpp"

using namespace mpe;

namespace {

// Maximum bipartite matching by augmenting paths.
std::size_t brute_force_matches(const std::vector<double>& est, const std::vector<double>& ref, double tol) {
  std::vector<int> owner(ref.size(), -1);
  std::function<bool(std::size_t, std::vector<bool>&)> augment = [&](std::size_t i, std::vector<bool>& seen) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (seen[j] || std::abs(12 * std::log2(est[i] / ref[j])) > tol + 1e-9) continue;
      seen[j] = true;
      if (owner[j] < 0 || augment(static_cast<std::size_t>(owner[j]), seen)) {
        owner[j] = static_cast<int>(i);
        return true;
      }
    }
    return false;
  };
  std::size_t n = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    std::vector<bool> seen(ref.size(), false);
    n += augment(i, seen);
  }
  return n;
}

std::vector<double> random_pitches(Rng& rng, std::size_t max_count) {
  std::uniform_int_distribution<std::size_t> count(0, max_count);
  // Quarter-semitone grid makes near-ties common.
  std::uniform_int_distribution<int> step(0, 40);
  std::vector<double> f(count(rng));
  for (auto& v : f) v = 220.0 * std::exp2(step(rng) / 48.0);
  std::sort(f.begin(), f.end());
  return f;
}

PitchAnnotation annotation(const std::vector<std::vector<double>>& rows, double period = 0.01) {
  PitchAnnotation a;
  for (std::size_t i = 0; i < rows.size(); ++i) a.entries.push_back({static_cast<double>(i) * period, rows[i]});
  return a;
}

MultipitchEstimate estimate(const std::vector<std::vector<double>>& rows, double period = 0.01) {
  MultipitchEstimate e;
  for (std::size_t i = 0; i < rows.size(); ++i) e.frame_times.push_back(static_cast<double>(i) * period);
  e.frequencies = rows;
  return e;
}

}  // namespace

TEST(PeakPick, LocalMaximaAboveThreshold) {
  SpectralConfig cfg;
  SalienceGram y{Grid<float>(10, 1), {0.0}};
  const float col[10] = {0.9f, 0.1f, 0.6f, 0.6f, 0.2f, 0.4f, 0.3f, 0.7f, 0.8f, 0.8f};
  for (std::size_t k = 0; k < 10; ++k) y.values(k, 0) = col[k];
  const auto e = peak_pick(y, cfg, 0.5);
  // Edge bin 0 counts; plateaus report their left end; 0.4 is below threshold.
  std::vector<double> expect = {bin_to_hz(0, cfg), bin_to_hz(2, cfg), bin_to_hz(8, cfg)};
  ASSERT_EQ(e.frequencies[0].size(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_DOUBLE_EQ(e.frequencies[0][i], expect[i]);
  EXPECT_EQ(peak_pick(y, cfg, 0.95).frequencies[0].size(), 0u);
  // A constant column is one plateau: exactly one pick, at bin 0.
  SalienceGram ones{Grid<float>(10, 2, 1.0f), {0.0, 0.01}};
  const auto o = peak_pick(ones, cfg);
  for (const auto& f : o.frequencies) {
    ASSERT_EQ(f.size(), 1u);
    EXPECT_DOUBLE_EQ(f[0], bin_to_hz(0, cfg));
  }
  EXPECT_THROW(peak_pick(y, cfg, 1.5), Error);
  EXPECT_THROW(peak_pick(y, cfg, -0.1), Error);
}

TEST(PeakPick, InvariantUnderMonotoneRescaling) {
  SpectralConfig cfg;
  Rng rng(4);
  std::uniform_int_distribution<int> level(0, 8);
  for (int trial = 0; trial < 100; ++trial) {
    SalienceGram y{Grid<float>(40, 3), {0.0, 0.01, 0.02}};
    for (auto& v : y.values.values()) v = static_cast<float>(level(rng)) / 8.0f;
    SalienceGram z = y;
    // Strictly increasing and fixes 0.5.
    for (auto& v : z.values.values()) v = v < 0.5f ? v * v * 2.0f : 0.5f + (v - 0.5f) * 0.5f;
    const auto a = peak_pick(y, cfg), b = peak_pick(z, cfg);
    EXPECT_EQ(a.frequencies, b.frequencies);
  }
}

TEST(Matching, BoundaryTolerance) {
  const double edge = 440.0 * std::exp2(1.0 / 24.0);
  EXPECT_TRUE(pitch_match(edge, 440.0, 0.5));
  EXPECT_TRUE(pitch_match(440.0, edge, 0.5));
  EXPECT_FALSE(pitch_match(452.9, 440.0, 0.5));
  EXPECT_FALSE(pitch_match(440.0 * std::exp2(0.5001 / 12), 440.0, 0.5));
}

TEST(Matching, GreedyEqualsBruteForce) {
  Rng rng(1);
  for (int frame = 0; frame < 10000; ++frame) {
    const auto e = random_pitches(rng, 6);
    const auto r = random_pitches(rng, 6);
    ASSERT_EQ(greedy_match_count(e, r, 0.5), brute_force_matches(e, r, 0.5)) << frame;
  }
}

TEST(Metrics, PerfectEstimate) {
  const auto a = annotation({{220.0}, {220.0, 330.0}, {}, {440.0}});
  const auto m = multipitch_metrics(estimate({{220.0}, {220.0, 330.0}, {}, {440.0}}), a);
  EXPECT_EQ(m.tp, 4u);
  EXPECT_DOUBLE_EQ(m.precision, 1.0);
  EXPECT_DOUBLE_EQ(m.recall, 1.0);
  EXPECT_DOUBLE_EQ(m.f1, 1.0);
  EXPECT_EQ(m.frames, 4u);
}

TEST(Metrics, CountsAndF1) {
  // Frame 0: one hit, one false alarm. Frame 1: one miss.
  const auto a = annotation({{440.0}, {330.0}});
  const auto m = multipitch_metrics(estimate({{440.0, 880.0}, {}}), a);
  EXPECT_EQ(m.tp, 1u);
  EXPECT_EQ(m.n_est, 2u);
  EXPECT_EQ(m.n_ref, 2u);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_DOUBLE_EQ(m.f1, 0.5);
}

TEST(Metrics, BoundaryFrameGivesTwoThirds) {
  const double edge = 440.0 * std::exp2(1.0 / 24.0);
  const auto a = annotation({{440.0, 660.0}});
  const auto m = multipitch_metrics(estimate({{edge}}), a);
  EXPECT_DOUBLE_EQ(m.precision, 1.0);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_NEAR(m.f1, 2.0 / 3.0, 1e-12);
  EXPECT_EQ(multipitch_metrics(estimate({{452.9}}), a).tp, 0u);
}

TEST(Metrics, SilenceConventions) {
  EXPECT_DOUBLE_EQ(multipitch_metrics(estimate({{}, {}}), annotation({{}, {}})).f1, 1.0);
  const auto miss = multipitch_metrics(estimate({{}, {}}), annotation({{440.0}, {}}));
  EXPECT_DOUBLE_EQ(miss.precision, 0.0);
  EXPECT_DOUBLE_EQ(miss.recall, 0.0);
  EXPECT_DOUBLE_EQ(miss.f1, 0.0);
}

TEST(Metrics, FramesOutsideSupportAreIgnored) {
  const auto a = annotation({{440.0}, {440.0}});
  auto e = estimate({{440.0}, {440.0}, {100.0}, {100.0}});
  const auto m = multipitch_metrics(e, a);
  EXPECT_EQ(m.frames, 2u);
  EXPECT_DOUBLE_EQ(m.f1, 1.0);
  MultipitchEstimate late;
  late.frame_times = {5.0};
  late.frequencies = {{440.0}};
  EXPECT_THROW(multipitch_metrics(late, a), Error);
}

TEST(Metrics, SymmetryAndToleranceMonotonicity) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> er, rr;
    for (int n = 0; n < 8; ++n) {
      er.push_back(random_pitches(rng, 4));
      rr.push_back(random_pitches(rng, 4));
    }
    const auto m = multipitch_metrics(estimate(er), annotation(rr));
    const auto s = multipitch_metrics(estimate(rr), annotation(er));
    EXPECT_EQ(m.tp, s.tp);
    EXPECT_DOUBLE_EQ(m.precision, s.recall);
    EXPECT_DOUBLE_EQ(m.recall, s.precision);
    EXPECT_DOUBLE_EQ(m.f1, s.f1);
    std::size_t prev = 0;
    for (double tol : {0.0, 0.1, 0.25, 0.5, 1.0, 2.0}) {
      const auto t = multipitch_metrics(estimate(er), annotation(rr), tol);
      EXPECT_GE(t.tp, prev);
      prev = t.tp;
    }
  }
}

TEST(Aggregate, UnweightedMeanSortedByTrack) {
  TrackMetrics a{"b", 1.0, 0.5, 2.0 / 3.0, 0, 0, 0, 0};
  TrackMetrics b{"a", 0.0, 0.0, 0.0, 0, 0, 0, 0};
  const auto rep = aggregate({a, b});
  EXPECT_EQ(rep.tracks[0].track, "a");
  EXPECT_DOUBLE_EQ(rep.precision, 0.5);
  EXPECT_DOUBLE_EQ(rep.recall, 0.25);
  EXPECT_DOUBLE_EQ(rep.f1, 1.0 / 3.0);
  EXPECT_EQ(aggregate({}).f1, 0.0);
}

TEST(Inference, TilesCoverEveryFrame) {
  SpectralConfig cfg;
  cfg.bins_total = 24;
  ModelConfig mc;
  mc.bins = 24;
  mc.n_blocks = 2;
  mc.base_filters = 2;
  Model<float> m(mc);
  HcqtTensor full;
  full.unit_db = Array3<float>(6, 24, 23);
  full.linear = Array3<float>(6, 24, 23);
  Rng rng(3);
  std::uniform_real_distribution<float> d(0.01f, 1.0f);
  for (auto& v : full.linear.values()) v = d(rng);
  full.unit_db = full.linear;
  full.frame_times = make_frame_times(23, cfg);
  const auto y = infer_track(m, full, cfg, 10);
  ASSERT_EQ(y.frames(), 23u);
  for (float v : y.values.values()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  // The last tile matches a direct pass over the same slice.
  const auto tail = m.forward(slice_frames(full, 20, 10, cfg));
  for (std::size_t k = 0; k < 24; ++k)
    for (std::size_t n = 0; n < 3; ++n) EXPECT_EQ(y.values(k, 20 + n), tail.values(k, n));
  EXPECT_THROW(infer_track(m, full, cfg, 0), Error);
}

TEST(Reports, FilesAreWritten) {
  test::TempDir dir("eval");
  TrackMetrics a{"t1", 1.0, 0.5, 2.0 / 3.0, 1, 1, 2, 1};
  auto rep = aggregate({a});
  rep.skipped = {"t9: missing"};
  write_metrics_tsv(dir.file("m.tsv"), rep);
  write_metrics_json(dir.file("m.json"), rep);
  std::ifstream ts(dir.file("m.tsv"));
  std::string header, row, mean;
  std::getline(ts, header);
  std::getline(ts, row);
  std::getline(ts, mean);
  EXPECT_EQ(header, "track\tP\tR\tF1");
  EXPECT_EQ(row, "t1\t1.0000\t0.5000\t0.6667");
  EXPECT_EQ(mean, "mean\t1.0000\t0.5000\t0.6667");
  std::ifstream js(dir.file("m.json"));
  const auto j = nlohmann::json::parse(js);
  EXPECT_EQ(j["tracks"][0]["tp"], 1);
  EXPECT_EQ(j["skipped"][0], "t9: missing");

  const auto e = estimate({{440.0}, {}, {220.0, 330.0}});
  write_estimate(dir.file("e.tsv"), e);
  const auto back = read_annotation(dir.file("e.tsv"));
  ASSERT_EQ(back.entries.size(), 3u);
  EXPECT_EQ(back.entries[2].f0s, (std::vector<double>{220.0, 330.0}));
}
