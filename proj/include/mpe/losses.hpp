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

// Training objectives. Every grid loss is a BCE (or L1) summed over bins and
// averaged over frames:  (1/N) sum_n sum_k B(pred[k,n], target[k,n]).

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mpe/common.hpp"
#include "mpe/model.hpp"
#include "mpe/spectral.hpp"
#include "mpe/transforms.hpp"

namespace mpe {

inline constexpr double bce_epsilon = 1e-7;

namespace detail {
template <typename T>
void require_same_shape(const Grid<T>& a, const Grid<T>& b) {
  if (!a.same_shape(b))
    fail_data("shape mismatch: ", a.bins(), "x", a.frames(), " vs ", b.bins(), "x", b.frames());
}
}  // namespace detail

/// Binary cross-entropy with the prediction clamped to [eps, 1 - eps].
template <typename T>
T bce(T p, T t) {
  const T eps = static_cast<T>(bce_epsilon);
  const T q = std::clamp(p, eps, T{1} - eps);
  return -t * std::log(q) - (T{1} - t) * std::log(T{1} - q);
}

template <typename T>
T bce_grid(const Grid<T>& pred, const Grid<T>& target) {
  detail::require_same_shape(pred, target);
  T sum{0};
  for (std::size_t i = 0; i < pred.size(); ++i) sum += bce(pred.values()[i], target.values()[i]);
  return sum / static_cast<T>(pred.frames());
}

inline double bce_grid(const SalienceGram& pred, const SalienceGram& target) {
  return bce_grid(grid_cast<double>(pred.values), grid_cast<double>(target.values));
}

/// d bce_grid / d pred. Zero where the clamp is active.
template <typename T>
Grid<T> bce_grid_grad_pred(const Grid<T>& pred, const Grid<T>& target) {
  detail::require_same_shape(pred, target);
  const T eps = static_cast<T>(bce_epsilon);
  const T inv_n = T{1} / static_cast<T>(pred.frames());
  Grid<T> g(pred.bins(), pred.frames());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T p = pred.values()[i];
    const T t = target.values()[i];
    if (p < eps || p > T{1} - eps) continue;
    g.values()[i] = inv_n * ((T{1} - t) / (T{1} - p) - t / p);
  }
  return g;
}

/// d bce_grid / d target.
template <typename T>
Grid<T> bce_grid_grad_target(const Grid<T>& pred, const Grid<T>& target) {
  detail::require_same_shape(pred, target);
  const T eps = static_cast<T>(bce_epsilon);
  const T inv_n = T{1} / static_cast<T>(pred.frames());
  Grid<T> g(pred.bins(), pred.frames());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T q = std::clamp(pred.values()[i], eps, T{1} - eps);
    g.values()[i] = inv_n * (std::log(T{1} - q) - std::log(q));
  }
  return g;
}

template <typename T>
T sparsity_loss(const Grid<T>& pred) {
  T sum{0};
  for (T v : pred.values()) sum += std::abs(v);
  return sum / static_cast<T>(pred.frames());
}

inline double sparsity_loss(const SalienceGram& pred) { return sparsity_loss(grid_cast<double>(pred.values)); }

template <typename T>
Grid<T> sparsity_loss_grad(const Grid<T>& pred) {
  const T inv_n = T{1} / static_cast<T>(pred.frames());
  Grid<T> g(pred.bins(), pred.frames());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T v = pred.values()[i];
    g.values()[i] = v > T{0} ? inv_n : (v < T{0} ? -inv_n : T{0});
  }
  return g;
}

inline double supervised_loss(const SalienceGram& pred, const std::optional<SalienceGram>& blurred_target) {
  if (!blurred_target) fail_usage("supervised loss requested for a sample without a target");
  return bce_grid(pred, *blurred_target);
}

inline double energy_loss(const SalienceGram& pred, const SalienceGram& energy_target) {
  return bce_grid(pred, energy_target);
}

/// B(F(t(X)), F(X)) for an already transformed input. `Net` needs
/// `Grid<T> forward(const Array3<T>&) const`.
template <typename T, typename Net>
T invariance_loss(const Net& net, const Array3<T>& x, const Array3<T>& transformed) {
  const Grid<T> reference = net.forward(x);
  return bce_grid(net.forward(transformed), reference);
}

template <typename T, typename Net>
T invariance_loss(const Net& net, const HcqtTensor& x, const EqCurveSpec& spec) {
  return invariance_loss<T>(net, array_cast<T>(x.unit_db), array_cast<T>(apply_eq(x, spec).unit_db));
}

/// B(F(t(X)), t(F(X))) with one spec replayed on input and prediction.
template <typename T, typename Net>
T equivariance_loss(const Net& net, const Array3<T>& x, const GeometricSpec& spec) {
  const Grid<T> target = apply_geometric(net.forward(x), spec);
  return bce_grid(net.forward(apply_geometric(x, spec)), target);
}

// ---------------------------------------------------------------------------
// Batches and the combined objective.

enum class SampleRole { supervised, ssl_only };

struct Sample {
  std::string track_id;
  SampleRole role = SampleRole::supervised;
  std::size_t first_frame = 0;
  HcqtTensor hcqt;
  std::optional<SalienceGram> target;  // blurred ground truth
  std::optional<SalienceGram> energy_target;
  std::optional<EqCurveSpec> eq;
  std::vector<EqCurveSpec> eq_per_frame;
  std::optional<PercussionMixSpec> percussion;
  std::optional<HcqtTensor> percussive_hcqt;  // spectrogram of the mixed waveform
  std::optional<GeometricSpec> geometric;
};

struct Batch {
  std::vector<Sample> samples;

  std::size_t count(SampleRole role) const {
    return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(),
                                                  [&](const Sample& s) { return s.role == role; }));
  }
};

struct LossRegime {
  bool spv = true;
  bool iv_t = false;
  bool iv_p = false;
  bool ev_g = false;
  bool eg = false;  // energy + sparsity, on ssl-only samples
  /// Let gradients flow into the target branch of the invariance/equivariance terms.
  bool symmetric_gradients = false;

  bool any_self_supervised() const { return iv_t || iv_p || ev_g; }

  std::string name() const {
    std::string s;
    auto add = [&](bool on, const char* n) {
      if (on) s += (s.empty() ? "" : ",") + std::string(n);
    };
    add(spv, "spv");
    add(iv_t, "iv_t");
    add(iv_p, "iv_p");
    add(ev_g, "ev_g");
    add(eg, "eg");
    return s;
  }

  static LossRegime parse(const std::string& text) {
    LossRegime r;
    r.spv = false;
    for (const auto& tok : KeyValues::split_list(text)) {
      if (tok == "spv") r.spv = true;
      else if (tok == "iv_t") r.iv_t = true;
      else if (tok == "iv_p") r.iv_p = true;
      else if (tok == "ev_g") r.ev_g = true;
      else if (tok == "eg") r.eg = true;
      else if (tok == "total") r.spv = r.iv_t = r.iv_p = r.ev_g = true;
      else fail_usage("unknown loss term '", tok, "'");
    }
    if (!r.spv && !r.any_self_supervised() && !r.eg) fail_usage("regime enables no loss term");
    return r;
  }

  friend bool operator==(const LossRegime&, const LossRegime&) = default;
};

struct LossReport {
  double l_spv = 0, l_iv_t = 0, l_iv_p = 0, l_ev_g = 0, l_eg = 0, l_spr = 0, l_total = 0;
  std::size_t n_spv = 0, n_iv_t = 0, n_iv_p = 0, n_ev_g = 0, n_eg = 0;

  std::vector<std::pair<std::string, double>> terms() const {
    return {{"spv", l_spv},   {"iv_t", l_iv_t}, {"iv_p", l_iv_p}, {"ev_g", l_ev_g},
            {"eg", l_eg},     {"spr", l_spr},   {"total", l_total}};
  }
};

namespace detail {

template <typename T>
struct Branch {
  typename Model<T>::Trace trace;
  Grid<T> output;
};

template <typename T>
void accumulate(Grid<T>& into, const Grid<T>& g, T w) {
  if (into.empty()) into = Grid<T>(g.bins(), g.frames());
  for (std::size_t i = 0; i < g.size(); ++i) into.values()[i] += w * g.values()[i];
}

}  // namespace detail

/// Evaluates the enabled terms over a batch and, when `grads` is given,
/// accumulates the gradient of l_total into it. Supervised BCE averages over
/// supervised samples, invariance/equivariance terms over all samples, and
/// energy + sparsity over ssl-only samples. Per-sample contributions are
/// reduced in batch order.
template <typename T>
LossReport total_loss(const Batch& batch, const Model<T>& model, const LossRegime& regime,
                      ParameterSet<T>* grads = nullptr) {
  const std::size_t n_all = batch.samples.size();
  const std::size_t n_sup = batch.count(SampleRole::supervised);
  const std::size_t n_ssl = n_all - n_sup;
  if (regime.spv && n_sup == 0) fail_usage("regime enables spv but the batch has no supervised samples");
  if (n_all == 0) fail_usage("empty batch");

  LossReport rep;
  const T w_sup = n_sup ? T{1} / static_cast<T>(n_sup) : T{0};
  const T w_all = T{1} / static_cast<T>(n_all);
  const T w_ssl = n_ssl ? T{1} / static_cast<T>(n_ssl) : T{0};

  for (const Sample& s : batch.samples) {
    const Array3<T> x = array_cast<T>(s.hcqt.unit_db);
    detail::Branch<T> clean;
    clean.output = model.forward(x, grads ? &clean.trace : nullptr);
    const Grid<T>& y_hat = clean.output;
    Grid<T> g_clean;

    if (regime.spv && s.role == SampleRole::supervised) {
      if (!s.target) fail_usage("supervised sample ", s.track_id, " has no target");
      const Grid<T> t = grid_cast<T>(s.target->values);
      rep.l_spv += static_cast<double>(w_sup * bce_grid(y_hat, t));
      ++rep.n_spv;
      if (grads) detail::accumulate(g_clean, bce_grid_grad_pred(y_hat, t), w_sup);
    }

    if (regime.eg && s.role == SampleRole::ssl_only) {
      if (!s.energy_target) fail_usage("ssl sample ", s.track_id, " has no energy target");
      const Grid<T> e = grid_cast<T>(s.energy_target->values);
      rep.l_eg += static_cast<double>(w_ssl * bce_grid(y_hat, e));
      rep.l_spr += static_cast<double>(w_ssl * sparsity_loss(y_hat));
      ++rep.n_eg;
      if (grads) {
        detail::accumulate(g_clean, bce_grid_grad_pred(y_hat, e), w_ssl);
        detail::accumulate(g_clean, sparsity_loss_grad(y_hat), w_ssl);
      }
    }

    // Transformed branch against a target derived from y_hat.
    auto branch = [&](const Array3<T>& input, const Grid<T>& target, const GeometricSpec* geo, double& term,
                      std::size_t& count) {
      typename Model<T>::Trace tr;
      const Grid<T> p = model.forward(input, grads ? &tr : nullptr);
      term += static_cast<double>(w_all * bce_grid(p, target));
      ++count;
      if (!grads) return;
      model.backward(tr, bce_grid_grad_pred(p, target), *grads, w_all);
      if (regime.symmetric_gradients) {
        Grid<T> gt = bce_grid_grad_target(p, target);
        if (geo) gt = apply_geometric_adjoint(gt, *geo);
        detail::accumulate(g_clean, gt, w_all);
      }
    };

    if (regime.iv_t) {
      HcqtTensor xt;
      if (!s.eq_per_frame.empty()) xt = apply_eq_per_frame(s.hcqt, s.eq_per_frame);
      else if (s.eq) xt = apply_eq(s.hcqt, *s.eq);
      else fail_usage("sample ", s.track_id, " has no sampled EQ curve");
      branch(array_cast<T>(xt.unit_db), y_hat, nullptr, rep.l_iv_t, rep.n_iv_t);
    }
    if (regime.iv_p) {
      if (!s.percussive_hcqt) fail_usage("sample ", s.track_id, " has no percussion mix");
      branch(array_cast<T>(s.percussive_hcqt->unit_db), y_hat, nullptr, rep.l_iv_p, rep.n_iv_p);
    }
    if (regime.ev_g) {
      if (!s.geometric) fail_usage("sample ", s.track_id, " has no sampled geometric transform");
      branch(apply_geometric(x, *s.geometric), apply_geometric(y_hat, *s.geometric), &*s.geometric, rep.l_ev_g,
             rep.n_ev_g);
    }

    if (grads && !g_clean.empty()) model.backward(clean.trace, g_clean, *grads);
  }

  if (regime.spv) rep.l_total += rep.l_spv;
  if (regime.iv_t) rep.l_total += rep.l_iv_t;
  if (regime.iv_p) rep.l_total += rep.l_iv_p;
  if (regime.ev_g) rep.l_total += rep.l_ev_g;
  if (regime.eg) rep.l_total += rep.l_eg + rep.l_spr;
  return rep;
}

}  // namespace mpe
