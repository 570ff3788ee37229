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

#include "mpe/losses.hpp"
#include "support.hpp"

using namespace mpe;

namespace {

// Channel 0 of the input, passed through unchanged.
struct PassThrough {
  Grid<double> forward(const Array3<double>& x) const {
    Grid<double> g(x.bins(), x.frames());
    std::copy(x.channel(0), x.channel(0) + g.size(), g.data());
    return g;
  }
};

struct Constant {
  double c = 0.3;
  Grid<double> forward(const Array3<double>& x) const { return Grid<double>(x.bins(), x.frames(), c); }
};

double entropy(double p) { return -p * std::log(p) - (1 - p) * std::log(1 - p); }

ModelConfig small_config() {
  ModelConfig c;
  c.bins = 24;
  c.n_blocks = 2;
  c.base_filters = 2;
  c.seed = 11;
  return c;
}

HcqtTensor random_hcqt(std::size_t K, std::size_t N, Rng& rng) {
  HcqtTensor t;
  t.unit_db = Array3<float>(6, K, N);
  std::uniform_real_distribution<float> d(0, 1);
  for (auto& v : t.unit_db.values()) v = d(rng);
  t.linear = t.unit_db;
  t.frame_times = std::vector<double>(N);
  return t;
}

SalienceGram random_gram(std::size_t K, std::size_t N, Rng& rng) {
  SalienceGram g{Grid<float>(K, N), std::vector<double>(N)};
  std::uniform_real_distribution<float> d(0, 1);
  for (auto& v : g.values.values()) v = d(rng);
  return g;
}

Batch mixed_batch(Rng& rng, std::size_t K, std::size_t N) {
  Batch b;
  for (int i = 0; i < 3; ++i) {
    Sample s;
    s.track_id = "s" + std::to_string(i);
    s.role = i < 2 ? SampleRole::supervised : SampleRole::ssl_only;
    s.hcqt = random_hcqt(K, N, rng);
    if (s.role == SampleRole::supervised) s.target = random_gram(K, N, rng);
    else s.energy_target = random_gram(K, N, rng);
    s.eq = sample_eq_curve(rng, K);
    s.percussive_hcqt = random_hcqt(K, N, rng);
    s.geometric = GeometricSpec{static_cast<int>(i) - 1, 1 - static_cast<int>(i), i == 1 ? 1.5 : 0.75};
    b.samples.push_back(std::move(s));
  }
  return b;
}

double loss_at(const Batch& b, Model<double>& m, const LossRegime& r) { return total_loss(b, m, r).l_total; }

}  // namespace

TEST(Bce, ScalarValues) {
  EXPECT_NEAR(bce(0.5, 1.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce(0.5, 0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce(0.0, 1.0), -std::log(1e-7), 1e-9);
  EXPECT_NEAR(bce(1.0, 0.0), -std::log(1e-7), 1e-9);
  EXPECT_LT(bce(1.0, 1.0), 2e-7);
  EXPECT_NEAR(bce(0.2, 0.2), entropy(0.2), 1e-15);
}

TEST(Bce, GridNormalisesByFramesOnly) {
  Grid<double> p(2, 3, 0.5), t(2, 3, 1.0);
  EXPECT_NEAR(bce_grid(p, t), 2 * std::log(2.0), 1e-14);
  Grid<double> p4(4, 3, 0.5), t4(4, 3, 1.0);
  EXPECT_NEAR(bce_grid(p4, t4), 4 * std::log(2.0), 1e-14);
  EXPECT_THROW(bce_grid(p, t4), Error);
}

TEST(Bce, MinimisedAtTarget) {
  Rng rng(2);
  std::uniform_real_distribution<double> d(0.01, 0.99);
  for (int i = 0; i < 1000; ++i) {
    const double t = d(rng), p = d(rng);
    EXPECT_GE(bce(p, t) + 1e-12, bce(t, t));
  }
}

TEST(Bce, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  std::uniform_real_distribution<double> d(0.05, 0.95);
  Grid<double> p(3, 4), t(3, 4);
  for (auto& v : p.values()) v = d(rng);
  for (auto& v : t.values()) v = d(rng);
  const auto gp = bce_grid_grad_pred(p, t);
  const auto gt = bce_grid_grad_target(p, t);
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto a = p, b = p;
    a.values()[i] += h;
    b.values()[i] -= h;
    EXPECT_NEAR(gp.values()[i], (bce_grid(a, t) - bce_grid(b, t)) / (2 * h), 1e-6);
    auto c = t, e = t;
    c.values()[i] += h;
    e.values()[i] -= h;
    EXPECT_NEAR(gt.values()[i], (bce_grid(p, c) - bce_grid(p, e)) / (2 * h), 1e-6);
  }
}

TEST(Bce, ClampedPredictionHasZeroGradient) {
  Grid<double> p(1, 2), t(1, 2, 1.0);
  p(0, 0) = 0.0;
  p(0, 1) = 1.0;
  const auto g = bce_grid_grad_pred(p, t);
  EXPECT_EQ(g(0, 0), 0.0);
  EXPECT_EQ(g(0, 1), 0.0);
}

TEST(Sparsity, ValueAndGradient) {
  Grid<double> p(2, 2);
  p.values() = {0.5, 0.25, 0.0, 1.0};
  EXPECT_DOUBLE_EQ(sparsity_loss(p), 0.875);
  const auto g = sparsity_loss_grad(p);
  EXPECT_EQ(g.values(), (std::vector<double>{0.5, 0.5, 0.0, 0.5}));
}

TEST(Terms, SupervisedNeedsTarget) {
  Rng rng(4);
  const auto y = random_gram(5, 3, rng);
  try {
    supervised_loss(y, std::nullopt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
  }
  EXPECT_DOUBLE_EQ(supervised_loss(y, y), bce_grid(y, y));
  EXPECT_DOUBLE_EQ(energy_loss(y, y), bce_grid(y, y));
}

TEST(Terms, InvarianceOfConstantNetworkIsItsEntropy) {
  Rng rng(5);
  const auto x = random_hcqt(10, 4, rng);
  const double l = invariance_loss<double>(Constant{}, x, sample_eq_curve(rng, 10));
  EXPECT_NEAR(l, 10 * entropy(0.3), 1e-12);
}

TEST(Terms, EquivarianceVanishesForCommutingNetwork) {
  Rng rng(6);
  std::bernoulli_distribution on(0.3);
  Array3<double> x(6, 30, 12);
  for (auto& v : x.values()) v = on(rng) ? 1.0 : 0.0;
  for (int i = 0; i < 10; ++i) {
    const auto s = sample_geometric(rng, 12);
    if (s.gamma != 1.0) continue;
    EXPECT_LT(equivariance_loss<double>(PassThrough{}, x, s), 30 * 2e-7);
  }
  // With integer shifts only, pass-through commutes exactly.
  EXPECT_LT(equivariance_loss<double>(PassThrough{}, x, GeometricSpec{7, -3, 1.0}), 30 * 2e-7);
}

TEST(Regime, ParseAndName) {
  EXPECT_EQ(LossRegime::parse("spv").name(), "spv");
  EXPECT_EQ(LossRegime::parse("total").name(), "spv,iv_t,iv_p,ev_g");
  EXPECT_EQ(LossRegime::parse("spv,eg").name(), "spv,eg");
  EXPECT_EQ(LossRegime::parse(LossRegime::parse("iv_t,ev_g").name()), LossRegime::parse("iv_t,ev_g"));
  EXPECT_THROW(LossRegime::parse("spv,bogus"), Error);
  EXPECT_THROW(LossRegime::parse(""), Error);
}

TEST(TotalLoss, TermsAddUpAndAverageCorrectly) {
  Rng rng(7);
  const auto b = mixed_batch(rng, 24, 6);
  Model<double> m(small_config());
  LossRegime r = LossRegime::parse("total,eg");
  const auto rep = total_loss(b, m, r);
  EXPECT_EQ(rep.n_spv, 2u);
  EXPECT_EQ(rep.n_iv_t, 3u);
  EXPECT_EQ(rep.n_iv_p, 3u);
  EXPECT_EQ(rep.n_ev_g, 3u);
  EXPECT_EQ(rep.n_eg, 1u);
  EXPECT_NEAR(rep.l_total, rep.l_spv + rep.l_iv_t + rep.l_iv_p + rep.l_ev_g + rep.l_eg + rep.l_spr, 1e-12);

  // Supervised term: mean of per-sample BCE over supervised samples.
  double spv = 0;
  for (int i = 0; i < 2; ++i) {
    const auto y = m.forward(array_cast<double>(b.samples[i].hcqt.unit_db));
    spv += bce_grid(y, grid_cast<double>(b.samples[i].target->values)) / 2;
  }
  EXPECT_NEAR(rep.l_spv, spv, 1e-12);

  // Equivariance term: mean over all samples.
  double ev = 0;
  for (const auto& s : b.samples)
    ev += equivariance_loss<double>(m, array_cast<double>(s.hcqt.unit_db), *s.geometric) / 3;
  EXPECT_NEAR(rep.l_ev_g, ev, 1e-12);
}

TEST(TotalLoss, Errors) {
  Rng rng(8);
  Model<double> m(small_config());
  Batch ssl_only;
  ssl_only.samples.push_back(mixed_batch(rng, 24, 6).samples[2]);
  EXPECT_THROW(total_loss(ssl_only, m, LossRegime::parse("spv")), Error);
  EXPECT_THROW(total_loss(Batch{}, m, LossRegime::parse("iv_t")), Error);
  auto b = mixed_batch(rng, 24, 6);
  b.samples[0].geometric.reset();
  EXPECT_THROW(total_loss(b, m, LossRegime::parse("ev_g")), Error);
}

TEST(TotalLoss, SymmetricGradientMatchesFiniteDifferences) {
  Rng rng(9);
  const auto b = mixed_batch(rng, 24, 6);
  Model<double> m(small_config());
  LossRegime r = LossRegime::parse("total,eg");
  r.symmetric_gradients = true;
  auto grads = m.params().zeros_like();
  total_loss(b, m, r, &grads);
  const double h = 1e-5;
  std::size_t checked = 0;
  for (std::size_t t = 0; t < m.params().tensors.size(); ++t) {
    auto& vals = m.params().tensors[t].values;
    for (std::size_t j = 0; j < vals.size(); j += 1 + vals.size() / 5) {
      const double v0 = vals[j];
      vals[j] = v0 + h;
      const double lp = loss_at(b, m, r);
      vals[j] = v0 - h;
      const double lm = loss_at(b, m, r);
      vals[j] = v0;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_NEAR(grads.tensors[t].values[j], fd, 1e-5 + 1e-4 * std::abs(fd)) << m.params().tensors[t].name;
      ++checked;
    }
  }
  EXPECT_GT(checked, 20u);
}

TEST(TotalLoss, StopGradientTreatsTargetsAsConstants) {
  Rng rng(10);
  auto b = mixed_batch(rng, 24, 6);
  Model<double> m(small_config());
  const LossRegime r = LossRegime::parse("ev_g");
  auto grads = m.params().zeros_like();
  total_loss(b, m, r, &grads);

  // Oracle: targets computed once at the current parameters and frozen.
  std::vector<Grid<double>> frozen;
  for (const auto& s : b.samples)
    frozen.push_back(apply_geometric(m.forward(array_cast<double>(s.hcqt.unit_db)), *s.geometric));
  auto frozen_loss = [&] {
    double l = 0;
    for (std::size_t i = 0; i < b.samples.size(); ++i) {
      const auto& s = b.samples[i];
      l += bce_grid(m.forward(apply_geometric(array_cast<double>(s.hcqt.unit_db), *s.geometric)), frozen[i]) / 3;
    }
    return l;
  };
  const double h = 1e-5;
  for (std::size_t t = 0; t < m.params().tensors.size(); ++t) {
    auto& vals = m.params().tensors[t].values;
    for (std::size_t j = 0; j < vals.size(); j += 1 + vals.size() / 3) {
      const double v0 = vals[j];
      vals[j] = v0 + h;
      const double lp = frozen_loss();
      vals[j] = v0 - h;
      const double lm = frozen_loss();
      vals[j] = v0;
      const double fd = (lp - lm) / (2 * h);
      EXPECT_NEAR(grads.tensors[t].values[j], fd, 1e-5 + 1e-4 * std::abs(fd));
    }
  }

  // And the symmetric variant really differs.
  LossRegime rs = r;
  rs.symmetric_gradients = true;
  auto sym = m.params().zeros_like();
  total_loss(b, m, rs, &sym);
  EXPECT_FALSE(sym == grads);
}
