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

#include "mpe/targets.hpp"
#include "support.hpp"

using namespace mpe;

namespace {

PitchAnnotation regular(double period, std::size_t rows, std::vector<double> f0s) {
  PitchAnnotation a;
  a.source_id = "t";
  for (std::size_t i = 0; i < rows; ++i) a.entries.push_back({static_cast<double>(i) * period, f0s});
  return a;
}

}  // namespace

TEST(NearestBin, RoundsHalfUp) {
  SpectralConfig cfg;
  EXPECT_EQ(nearest_bin(27.5, cfg), 0);
  EXPECT_EQ(nearest_bin(440.0, cfg), 240);
  // 452.9 Hz sits just above the 242/243 boundary.
  EXPECT_NEAR(hz_to_bin(452.9, cfg), 60 * std::log2(452.9 / 27.5), 1e-9);
  EXPECT_GT(hz_to_bin(452.9, cfg), 242.5);
  EXPECT_EQ(nearest_bin(452.9, cfg), 243);
  // Exactly half a bin above 440 Hz rounds up.
  const double half = 440.0 * std::exp2(0.5 / 60.0);
  EXPECT_EQ(nearest_bin(half * (1 + 1e-12), cfg), 241);
  EXPECT_EQ(nearest_bin(440.0 * std::exp2(0.49 / 60.0), cfg), 240);
}

TEST(Annotation, PeriodAndNearest) {
  const auto a = regular(0.01, 5, {100.0});
  EXPECT_NEAR(*a.period(), 0.01, 1e-15);
  EXPECT_EQ(*a.nearest(0.021, 0.005), 2u);
  const auto q = regular(0.25, 5, {100.0});
  EXPECT_EQ(*q.nearest(0.625, 0.125), 2u);  // tie goes to the earlier row
  EXPECT_FALSE(a.nearest(0.06, 0.005).has_value());
  EXPECT_FALSE(regular(0.01, 1, {}).period().has_value());
  EXPECT_FALSE(PitchAnnotation{}.nearest(0, 1).has_value());
}

TEST(Annotation, Validation) {
  PitchAnnotation a = regular(0.01, 3, {100.0});
  a.entries[2].time = 0.01;
  EXPECT_THROW(a.validate(), Error);
  PitchAnnotation b = regular(0.01, 3, {100.0});
  b.entries[1].f0s = {-3.0};
  EXPECT_THROW(b.validate(), Error);
}

TEST(Annotation, FileRoundTrip) {
  test::TempDir dir("ann");
  PitchAnnotation a;
  a.entries = {{0.0, {}}, {0.01, {220.0}}, {0.02, {220.0, 330.5}}};
  write_annotation(dir.file("a.tsv"), a);
  const auto b = read_annotation(dir.file("a.tsv"));
  EXPECT_EQ(b.entries, a.entries);

  std::ofstream(dir.file("bad.tsv")) << "0.0\t220\n0.01\tabc\n";
  EXPECT_THROW(read_annotation(dir.file("bad.tsv")), Error);
  std::ofstream(dir.file("order.tsv")) << "0.02\t220\n0.01\t220\n";
  EXPECT_THROW(read_annotation(dir.file("order.tsv")), Error);
  try {
    read_annotation(dir.file("missing.tsv"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
  }
}

TEST(Activations, FrameAlignmentAndSilence) {
  SpectralConfig cfg;
  PitchAnnotation a;
  // Rows every 10 ms: 440 Hz, silence, then two voices.
  for (int i = 0; i < 100; ++i) {
    std::vector<double> f;
    if (i < 30) f = {440.0};
    else if (i >= 60) f = {220.0, 330.0};
    a.entries.push_back({i * 0.01, f});
  }
  const auto times = make_frame_times(80, cfg);
  const auto act = annotations_to_activations(a, times, cfg);
  ASSERT_EQ(act.grid.bins(), 440u);
  ASSERT_EQ(act.grid.frames(), 80u);
  EXPECT_EQ(act.out_of_range, 0u);
  for (std::size_t n = 0; n < 80; ++n) {
    const double t = times[n];
    float sum = 0;
    for (std::size_t k = 0; k < 440; ++k) sum += act.grid.values(k, n);
    const auto row = static_cast<int>(std::floor(t / 0.01 + 0.5 - 1e-12));
    if (row >= 100) {
      EXPECT_EQ(sum, 0.0f) << n;
    } else if (row < 30) {
      EXPECT_EQ(sum, 1.0f) << n;
      EXPECT_EQ(act.grid.values(240, n), 1.0f);
    } else if (row < 60) {
      EXPECT_EQ(sum, 0.0f) << n;
    } else {
      EXPECT_EQ(sum, 2.0f) << n;
      EXPECT_EQ(act.grid.values(180, n), 1.0f);
      EXPECT_EQ(act.grid.values(215, n), 1.0f);
    }
  }
}

TEST(Activations, FramesBeyondHalfPeriodStaySilent) {
  SpectralConfig cfg;
  PitchAnnotation a;
  a.entries = {{0.0, {440.0}}, {0.01, {440.0}}};
  const std::vector<double> times = {0.0, 0.014, 0.016, 1.0};
  const auto act = annotations_to_activations(a, times, cfg);
  EXPECT_EQ(act.grid.values(240, 0), 1.0f);
  EXPECT_EQ(act.grid.values(240, 1), 1.0f);
  EXPECT_EQ(act.grid.values(240, 2), 0.0f);
  EXPECT_EQ(act.grid.values(240, 3), 0.0f);
}

TEST(Activations, OutOfRangePitchesAreCounted) {
  SpectralConfig cfg;
  PitchAnnotation a;
  // 20 Hz is far below bin 0; 27.0 Hz is within half a semitone of it.
  a.entries = {{0.0, {20.0, 27.0, 20000.0}}};
  const auto act = annotations_to_activations(a, {0.0}, cfg);
  EXPECT_EQ(act.out_of_range, 2u);
  EXPECT_EQ(act.grid.values(0, 0), 1.0f);
}

TEST(Blur, KernelShapeAndTruncation) {
  SalienceGram y{Grid<float>(40, 2), {0.0, 0.01}};
  y.values(20, 0) = 1.0f;
  const auto b = blur_target(y);
  for (std::size_t k = 0; k < 40; ++k) {
    const double d = std::abs(static_cast<double>(k) - 20.0);
    const double expect = d <= 4 ? std::exp(-d * d / 2) : 0.0;
    EXPECT_NEAR(b.values(k, 0), expect, 1e-7) << k;
    EXPECT_EQ(b.values(k, 1), 0.0f);
  }
}

TEST(Blur, OverlapsCombineByMax) {
  SalienceGram y{Grid<float>(30, 1), {0.0}};
  y.values(10, 0) = 1.0f;
  y.values(12, 0) = 1.0f;
  const auto b = blur_target(y);
  EXPECT_FLOAT_EQ(b.values(11, 0), static_cast<float>(std::exp(-0.5)));
  EXPECT_FLOAT_EQ(b.values(10, 0), 1.0f);
  EXPECT_FLOAT_EQ(b.values(12, 0), 1.0f);
  EXPECT_THROW(blur_target(y, 0.0), Error);
}

TEST(Blur, PropertiesOnRandomGrids) {
  Rng rng(3);
  std::bernoulli_distribution on(0.05);
  for (int trial = 0; trial < 20; ++trial) {
    SalienceGram y{Grid<float>(60, 10), std::vector<double>(10)};
    for (auto& v : y.values.values()) v = on(rng) ? 1.0f : 0.0f;
    const auto b = blur_target(y);
    for (std::size_t i = 0; i < y.values.size(); ++i) {
      const float v = b.values.values()[i];
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
      if (y.values.values()[i] == 1.0f) {
        EXPECT_EQ(v, 1.0f);
      }
      EXPECT_GE(v, y.values.values()[i]);
    }
  }
}
