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

// Batch composition, AdamW with per-group rates, warmup, clipping, periodic
// validation and the on-disk training record.

#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpe/common.hpp"
#include "mpe/config.hpp"
#include "mpe/dataio.hpp"
#include "mpe/diagnostics.hpp"
#include "mpe/eval.hpp"
#include "mpe/losses.hpp"
#include "mpe/model.hpp"
#include "mpe/spectral.hpp"
#include "mpe/targets.hpp"
#include "mpe/transforms.hpp"

namespace mpe {

struct TrainConfig {
  std::size_t batch_supervised = 8;
  std::size_t batch_unsupervised = 0;
  double lr_encoder = 5e-4;
  double lr_decoder = 2.5e-4;
  std::size_t warmup_epochs = 100;
  double clip_norm = 1.0;
  std::size_t epochs = 2500;
  double excerpt_seconds = 4.0;
  std::string regime = "spv";
  bool symmetric_gradients = false;
  bool finetune = false;
  std::size_t validation_every = 25;
  std::size_t seed = 0;
  /// Fresh EQ curve per frame instead of one per excerpt.
  bool eq_per_frame = false;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double threshold = 0.5;
  /// Synthetic percussion clips generated for the percussion-mix transform.
  std::size_t percussion_clips = 8;
  double percussion_seconds = 8.0;
  /// Optional comma-separated WAV files added to the percussion bank.
  std::string percussion_files;

  LossRegime loss_regime() const {
    LossRegime r = LossRegime::parse(regime);
    r.symmetric_gradients = symmetric_gradients;
    return r;
  }

  double rate_scale() const { return finetune ? 0.2 : 1.0; }

  void validate() const {
    if (batch_supervised == 0) fail_usage("batch_supervised must be positive");
    if (!(lr_encoder >= 0) || !(lr_decoder >= 0)) fail_usage("learning rates must be non-negative");
    if (!(clip_norm > 0)) fail_usage("clip_norm must be positive");
    if (!(excerpt_seconds > 0)) fail_usage("excerpt_seconds must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail_usage("moment decay rates must lie in [0, 1)");
    if (!(adam_eps > 0)) fail_usage("adam_eps must be positive");
    if (!(weight_decay >= 0)) fail_usage("weight_decay must be non-negative");
    check_threshold(threshold);
    const LossRegime r = loss_regime();
    if (r.eg && batch_unsupervised == 0) fail_usage("regime eg needs batch_unsupervised > 0");
    if (r.iv_p && percussion_clips == 0 && percussion_files.empty())
      fail_usage("regime iv_p needs percussion clips or files");
  }
};

// ---------------------------------------------------------------------------
// Experiment config: spectral + model + training + data keys in one file.

struct ExperimentConfig {
  SpectralConfig spectral;
  ModelConfig model;
  TrainConfig train;
  std::string manifest;
  std::string split_scheme = "by_role";
  std::size_t t2_size = 10;
  std::string init_checkpoint;
  double degeneration_drop = 0.5;
  std::size_t degeneration_window = 5;

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k = [] {
      std::vector<std::string> v = {
          // spectral
          "sample_rate", "hop", "f_min", "bins_total", "bins_per_semitone", "harmonics", "vq_offset", "db_floor",
          "nyquist_policy",
          // training
          "batch_supervised", "batch_unsupervised", "lr_encoder", "lr_decoder", "warmup_epochs", "clip_norm",
          "epochs", "excerpt_seconds", "regime", "symmetric_gradients", "finetune", "validation_every",
          "eq_per_frame", "weight_decay", "beta1", "beta2", "adam_eps", "threshold", "percussion_clips",
          "percussion_seconds", "percussion_files",
          // data and diagnostics
          "manifest", "split_scheme", "t2_size", "init_checkpoint", "degeneration_drop", "degeneration_window"};
      for (const auto& m : model_config_keys()) v.push_back(m);
      return v;
    }();
    return k;
  }

  static ExperimentConfig from(const KeyValues& kv) {
    kv.check_known(keys());
    ExperimentConfig c;
    auto& s = c.spectral;
    kv.read("sample_rate", s.sample_rate);
    kv.read("hop", s.hop);
    kv.read("f_min", s.f_min);
    kv.read("bins_total", s.bins_total);
    kv.read("bins_per_semitone", s.bins_per_semitone);
    kv.read("harmonics", s.harmonics);
    kv.read("vq_offset", s.vq_offset);
    kv.read("db_floor", s.db_floor);
    std::string policy = "zero_fill";
    kv.read("nyquist_policy", policy);
    if (policy == "zero_fill") s.nyquist_policy = NyquistPolicy::zero_fill;
    else if (policy == "strict") s.nyquist_policy = NyquistPolicy::strict;
    else fail_usage("nyquist_policy must be zero_fill or strict");

    auto& t = c.train;
    kv.read("batch_supervised", t.batch_supervised);
    kv.read("batch_unsupervised", t.batch_unsupervised);
    kv.read("lr_encoder", t.lr_encoder);
    kv.read("lr_decoder", t.lr_decoder);
    kv.read("warmup_epochs", t.warmup_epochs);
    kv.read("clip_norm", t.clip_norm);
    kv.read("epochs", t.epochs);
    kv.read("excerpt_seconds", t.excerpt_seconds);
    kv.read("regime", t.regime);
    kv.read("symmetric_gradients", t.symmetric_gradients);
    kv.read("finetune", t.finetune);
    kv.read("validation_every", t.validation_every);
    kv.read("seed", t.seed);
    kv.read("eq_per_frame", t.eq_per_frame);
    kv.read("weight_decay", t.weight_decay);
    kv.read("beta1", t.beta1);
    kv.read("beta2", t.beta2);
    kv.read("adam_eps", t.adam_eps);
    kv.read("threshold", t.threshold);
    kv.read("percussion_clips", t.percussion_clips);
    kv.read("percussion_seconds", t.percussion_seconds);
    kv.read("percussion_files", t.percussion_files);

    c.model.in_channels = s.harmonics.size();
    c.model.bins = s.bins_total;
    read_model_config(kv, c.model);
    kv.read("manifest", c.manifest);
    kv.read("split_scheme", c.split_scheme);
    kv.read("t2_size", c.t2_size);
    kv.read("init_checkpoint", c.init_checkpoint);
    kv.read("degeneration_drop", c.degeneration_drop);
    kv.read("degeneration_window", c.degeneration_window);
    c.validate();
    return c;
  }

  void validate() const {
    spectral.validate();
    model.validate();
    train.validate();
    if (model.bins != spectral.bins_total) fail_usage("bins_model must equal bins_total");
    if (model.in_channels != spectral.harmonics.size()) fail_usage("in_channels must equal the harmonic count");
    split_kind();
  }

  SplitKind split_kind() const {
    if (split_scheme == "by_role") return SplitKind::by_role;
    if (split_scheme == "t1t2") return SplitKind::t1t2;
    if (split_scheme == "reference") return SplitKind::reference;
    fail_usage("split_scheme must be by_role, t1t2 or reference");
  }

  /// Fully resolved key set (defaults included).
  KeyValues to_kv() const {
    KeyValues kv;
    const auto& s = spectral;
    kv.set("sample_rate", KeyValues::format(s.sample_rate));
    kv.set("hop", KeyValues::format(s.hop));
    kv.set("f_min", KeyValues::format(s.f_min));
    kv.set("bins_total", KeyValues::format(s.bins_total));
    kv.set("bins_per_semitone", KeyValues::format(s.bins_per_semitone));
    kv.set("harmonics", KeyValues::format(s.harmonics));
    kv.set("vq_offset", KeyValues::format(s.vq_offset));
    kv.set("db_floor", KeyValues::format(s.db_floor));
    kv.set("nyquist_policy", s.nyquist_policy == NyquistPolicy::strict ? "strict" : "zero_fill");
    const auto& t = train;
    kv.set("batch_supervised", KeyValues::format(t.batch_supervised));
    kv.set("batch_unsupervised", KeyValues::format(t.batch_unsupervised));
    kv.set("lr_encoder", KeyValues::format(t.lr_encoder));
    kv.set("lr_decoder", KeyValues::format(t.lr_decoder));
    kv.set("warmup_epochs", KeyValues::format(t.warmup_epochs));
    kv.set("clip_norm", KeyValues::format(t.clip_norm));
    kv.set("epochs", KeyValues::format(t.epochs));
    kv.set("excerpt_seconds", KeyValues::format(t.excerpt_seconds));
    kv.set("regime", t.regime);
    kv.set("symmetric_gradients", KeyValues::format(t.symmetric_gradients));
    kv.set("finetune", KeyValues::format(t.finetune));
    kv.set("validation_every", KeyValues::format(t.validation_every));
    kv.set("eq_per_frame", KeyValues::format(t.eq_per_frame));
    kv.set("weight_decay", KeyValues::format(t.weight_decay));
    kv.set("beta1", KeyValues::format(t.beta1));
    kv.set("beta2", KeyValues::format(t.beta2));
    kv.set("adam_eps", KeyValues::format(t.adam_eps));
    kv.set("threshold", KeyValues::format(t.threshold));
    kv.set("percussion_clips", KeyValues::format(t.percussion_clips));
    kv.set("percussion_seconds", KeyValues::format(t.percussion_seconds));
    kv.set("percussion_files", t.percussion_files);
    write_model_config(kv, model);  // also writes "seed"
    kv.set("manifest", manifest);
    kv.set("split_scheme", split_scheme);
    kv.set("t2_size", KeyValues::format(t2_size));
    kv.set("init_checkpoint", init_checkpoint);
    kv.set("degeneration_drop", KeyValues::format(degeneration_drop));
    kv.set("degeneration_window", KeyValues::format(degeneration_window));
    return kv;
  }
};

// ---------------------------------------------------------------------------
// Training data

/// A whole track held in memory: audio (for waveform-level mixing), its
/// spectrogram and, for annotated tracks, the blurred target.
struct TrainTrack {
  std::string id;
  std::vector<float> audio;
  HcqtTensor hcqt;
  std::optional<PitchAnnotation> annotation;
  std::optional<SalienceGram> target;
};

inline TrainTrack prepare_track(std::string id, std::vector<float> audio, std::optional<PitchAnnotation> annotation,
                                const HcqtPlan& plan) {
  TrainTrack t;
  t.id = std::move(id);
  t.hcqt = plan.compute(audio);
  t.audio = std::move(audio);
  if (annotation) {
    annotation->source_id = t.id;
    const auto act = annotations_to_activations(*annotation, t.hcqt.frame_times, plan.config());
    t.target = blur_target(act.grid);
    t.annotation = std::move(annotation);
  }
  return t;
}

/// Loads audio and (when present) annotations for manifest records.
inline std::vector<TrainTrack> load_train_tracks(const std::vector<TrackRecord>& records, const HcqtPlan& plan) {
  std::vector<TrainTrack> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    std::optional<PitchAnnotation> ann;
    if (r.annotation_path) ann = read_annotation(*r.annotation_path);
    out.push_back(prepare_track(r.id, load_audio(r.audio_path, plan.config().sample_rate), std::move(ann), plan));
  }
  return out;
}

inline EvalTrack to_eval_track(const TrainTrack& t) {
  if (!t.annotation) fail_data(t.id, ": evaluation needs an annotation");
  return EvalTrack{t.id, t.hcqt, *t.annotation};
}

struct PercussionBank {
  std::vector<std::string> names;
  std::vector<std::vector<float>> clips;

  bool empty() const { return clips.empty(); }
};

inline PercussionBank make_percussion_bank(const TrainConfig& cfg, const SpectralConfig& spectral) {
  PercussionBank bank;
  std::seed_seq seq{static_cast<std::uint64_t>(cfg.seed), std::uint64_t{0x70657263}};
  Rng rng(seq);
  for (std::size_t i = 0; i < cfg.percussion_clips; ++i) {
    bank.names.push_back("synth:" + std::to_string(i));
    bank.clips.push_back(synth_percussion(rng, cfg.percussion_seconds, spectral.sample_rate));
  }
  for (const auto& path : KeyValues::split_list(cfg.percussion_files)) {
    bank.names.push_back(path);
    bank.clips.push_back(load_audio(path, spectral.sample_rate));
  }
  return bank;
}

struct TrainData {
  std::vector<TrainTrack> supervised;
  std::vector<TrainTrack> ssl;
  std::vector<EvalTrack> validation;
  /// Extra splits tracked in the density log besides "validation".
  std::vector<DiagnosticSplit> diagnostics;
  PercussionBank percussion;
};

// ---------------------------------------------------------------------------
// Batches

struct BatchContext {
  const SpectralConfig& spectral;
  const HcqtPlan& plan;
  const TrainConfig& train;
  const LossRegime& regime;
  const PercussionBank* percussion = nullptr;
  std::size_t excerpt_frames = 0;
};

inline std::size_t excerpt_frames(const TrainConfig& t, const SpectralConfig& s) {
  const auto samples = static_cast<std::size_t>(std::llround(t.excerpt_seconds * s.sample_rate));
  return std::max<std::size_t>(1, (samples + s.hop - 1) / s.hop);
}

namespace detail {

inline SalienceGram slice_grid(const SalienceGram& src, std::size_t first, std::size_t count,
                               const SpectralConfig& config) {
  SalienceGram out{Grid<float>(src.bins(), count), make_frame_times(count, config, first)};
  for (std::size_t k = 0; k < src.bins(); ++k)
    for (std::size_t n = 0; n < count && first + n < src.frames(); ++n) out.values(k, n) = src.values(k, first + n);
  return out;
}

// Spectrogram of the excerpt after mixing percussion into the waveform. Only
// the samples the excerpt's frames read are mixed.
inline HcqtTensor percussive_excerpt(const TrainTrack& track, std::size_t first, std::size_t count,
                                     const PercussionMixSpec& spec, std::span<const float> clip,
                                     const BatchContext& ctx) {
  const std::size_t hop = ctx.spectral.hop;
  const std::size_t half = ctx.plan.fft_size() / 2;
  const std::size_t len = track.audio.size();
  const std::size_t lo = std::min(len, first * hop > half ? first * hop - half : 0);
  const std::size_t hi = std::min(len, (first + count) * hop + half);
  std::vector<float> audio = track.audio;
  if (hi > lo) {
    const auto mixed = mix_percussion(std::span<const float>(audio).subspan(lo, hi - lo), ctx.spectral.sample_rate,
                                      clip, ctx.spectral.sample_rate, spec.volume, spec.offset);
    std::copy(mixed.begin(), mixed.end(), audio.begin() + static_cast<std::ptrdiff_t>(lo));
  }
  HcqtTensor out;
  out.linear = ctx.plan.compute_linear(audio, first, count);
  out.unit_db = amplitude_to_unit_db(out.linear, ctx.spectral.db_floor);
  out.frame_times = make_frame_times(count, ctx.spectral, first);
  return out;
}

inline Sample make_sample(const TrainTrack& track, SampleRole role, const BatchContext& ctx, Rng& rng,
                          std::vector<std::string>* log) {
  const std::size_t N = ctx.excerpt_frames;
  const std::size_t total = track.hcqt.frames();
  const std::size_t last_start = total > N ? total - N : 0;
  Sample s;
  s.track_id = track.id;
  s.role = role;
  s.first_frame = std::uniform_int_distribution<std::size_t>(0, last_start)(rng);
  s.hcqt = slice_frames(track.hcqt, s.first_frame, N, ctx.spectral);
  auto note = [&](const TransformSpec& spec) {
    if (log) log->push_back(track.id + "\t" + std::to_string(s.first_frame) + "\t" + to_string(spec));
  };
  if (role == SampleRole::supervised) {
    if (!track.target) fail_data("supervised track ", track.id, " has no annotation");
    s.target = slice_grid(*track.target, s.first_frame, N, ctx.spectral);
  }
  if (ctx.regime.eg && role == SampleRole::ssl_only) s.energy_target = harmonic_energy_target(s.hcqt, ctx.spectral);
  if (ctx.regime.iv_t) {
    if (ctx.train.eq_per_frame) {
      for (std::size_t n = 0; n < N; ++n) {
        s.eq_per_frame.push_back(sample_eq_curve(rng, ctx.spectral.bins_total));
        note(s.eq_per_frame.back());
      }
    } else {
      s.eq = sample_eq_curve(rng, ctx.spectral.bins_total);
      note(*s.eq);
    }
  }
  if (ctx.regime.iv_p) {
    if (!ctx.percussion || ctx.percussion->empty()) fail_usage("percussion mixing needs a percussion bank");
    const auto& bank = *ctx.percussion;
    const std::size_t which = std::uniform_int_distribution<std::size_t>(0, bank.clips.size() - 1)(rng);
    s.percussion = sample_percussion_mix(rng, bank.names[which], bank.clips[which].size());
    note(*s.percussion);
    s.percussive_hcqt = percussive_excerpt(track, s.first_frame, N, *s.percussion, bank.clips[which], ctx);
  }
  if (ctx.regime.ev_g) {
    s.geometric = sample_geometric(rng, N, static_cast<int>(ctx.spectral.bins_per_octave()));
    note(*s.geometric);
  }
  return s;
}

}  // namespace detail

/// Draws `batch_supervised` tracks from `sup_pool` and `batch_unsupervised`
/// from `ssl_pool` without replacement, one random excerpt each, and samples
/// a fresh transform for every enabled objective.
inline Batch compose_batch(std::span<const TrainTrack* const> sup_pool, std::span<const TrainTrack* const> ssl_pool,
                           const BatchContext& ctx, Rng& rng, std::vector<std::string>* log = nullptr) {
  const std::size_t ns = ctx.train.batch_supervised, nu = ctx.train.batch_unsupervised;
  if (sup_pool.size() < ns)
    fail_usage("supervised pool has ", sup_pool.size(), " tracks, batch needs ", ns, " (short by ",
               ns - sup_pool.size(), ")");
  if (ssl_pool.size() < nu)
    fail_usage("ssl pool has ", ssl_pool.size(), " tracks, batch needs ", nu, " (short by ", nu - ssl_pool.size(),
               ")");
  auto draw = [&](std::span<const TrainTrack* const> pool, std::size_t count) {
    std::vector<const TrainTrack*> v(pool.begin(), pool.end());
    std::shuffle(v.begin(), v.end(), rng);
    v.resize(count);
    return v;
  };
  Batch b;
  for (const TrainTrack* t : draw(sup_pool, ns)) b.samples.push_back(detail::make_sample(*t, SampleRole::supervised, ctx, rng, log));
  for (const TrainTrack* t : draw(ssl_pool, nu)) b.samples.push_back(detail::make_sample(*t, SampleRole::ssl_only, ctx, rng, log));
  return b;
}

// ---------------------------------------------------------------------------
// Optimisation

/// min(1, epoch / warmup) with 1-indexed epochs; no warmup when warmup == 0.
inline double warmup_multiplier(std::size_t epoch, std::size_t warmup_epochs) {
  if (warmup_epochs == 0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(warmup_epochs));
}

/// Rescales `grads` so the global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
template <typename T>
double clip_gradients(ParameterSet<T>& grads, double max_norm) {
  const double norm = grads.l2_norm();
  if (norm > max_norm) grads.scale(static_cast<T>(max_norm / norm));
  return norm;
}

/// Adam with decoupled weight decay and one rate per parameter group.
template <typename T>
class AdamW {
 public:
  AdamW(const ParameterSet<T>& like, double beta1, double beta2, double eps, double weight_decay)
      : m_(like.zeros_like()), v_(like.zeros_like()), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(ParameterSet<T>& params, const ParameterSet<T>& grads, double lr_encoder, double lr_decoder) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      auto& p = params.tensors[i];
      const double lr = p.group == ParamGroup::encoder ? lr_encoder : lr_decoder;
      if (lr == 0.0) continue;
      const auto& g = grads.tensors[i].values;
      auto& m = m_.tensors[i].values;
      auto& v = v_.tensors[i].values;
      for (std::size_t j = 0; j < p.values.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = static_cast<T>(beta1_ * static_cast<double>(m[j]) + (1.0 - beta1_) * gj);
        v[j] = static_cast<T>(beta2_ * static_cast<double>(v[j]) + (1.0 - beta2_) * gj * gj);
        const double mhat = static_cast<double>(m[j]) / c1;
        const double vhat = static_cast<double>(v[j]) / c2;
        double w = static_cast<double>(p.values[j]);
        w -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * w);
        p.values[j] = static_cast<T>(w);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  ParameterSet<T> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct ValidationRow {
  std::size_t epoch = 0;
  double precision = 0, recall = 0, f1 = 0;
  std::string checkpoint;
};

struct TrainingRecord {
  std::vector<std::pair<std::size_t, LossReport>> losses;  // per-epoch means
  std::vector<ValidationRow> validation;
  DensityTrajectory density;
  std::size_t best_index = 0;
  bool interrupted = false;

  const ValidationRow& best() const {
    if (validation.empty()) fail_usage("training record has no validation rows");
    return validation[best_index];
  }
};

/// Index of the maximal F1; ties go to the earliest row.
inline std::size_t select_best(const std::vector<ValidationRow>& rows) {
  if (rows.empty()) fail_usage("no validation rows to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].f1 > rows[best].f1) best = i;
  return best;
}

struct RunOptions {
  std::string out_dir;
  std::size_t workers = 1;
  /// Polled between steps; when set the run checkpoints and returns.
  const std::atomic<bool>* interrupt = nullptr;
  /// Records written into every checkpoint's config block.
  KeyValues config_record;
  /// Extra validation epochs (for example a fixed checkpoint epoch).
  std::vector<std::size_t> checkpoint_epochs;
};

namespace detail {

template <typename T>
std::vector<TrackEvaluation> evaluate_tracks(const Model<T>& model, const std::vector<EvalTrack>& tracks,
                                             const SpectralConfig& config, std::size_t tile, double threshold,
                                             std::size_t workers) {
  std::vector<TrackEvaluation> out(tracks.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < tracks.size(); ++i)
      out[i] = evaluate_track(model, tracks[i], config, tile, threshold);
    return out;
  }
  for (std::size_t start = 0; start < tracks.size(); start += workers) {
    std::vector<std::future<TrackEvaluation>> jobs;
    for (std::size_t i = start; i < std::min(tracks.size(), start + workers); ++i)
      jobs.push_back(std::async(std::launch::async, [&, i] {
        return evaluate_track(model, tracks[i], config, tile, threshold);
      }));
    for (std::size_t i = 0; i < jobs.size(); ++i) out[start + i] = jobs[i].get();
  }
  return out;
}

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

/// Throws a usage error when a pool cannot fill its share of the batch.
inline void check_pools(const TrainData& data, const TrainConfig& cfg) {
  if (data.supervised.size() < cfg.batch_supervised)
    fail_usage("supervised pool has ", data.supervised.size(), " tracks, batch needs ", cfg.batch_supervised,
               " (short by ", cfg.batch_supervised - data.supervised.size(), ")");
  if (data.ssl.size() < cfg.batch_unsupervised)
    fail_usage("ssl pool has ", data.ssl.size(), " tracks, batch needs ", cfg.batch_unsupervised, " (short by ",
               cfg.batch_unsupervised - data.ssl.size(), ")");
  if (data.validation.empty()) fail_usage("validation set is empty");
}

/// Runs the optimisation loop, writing `checkpoints/epoch_<n>.mpck` and
/// `log/{losses.tsv,validation.tsv,transforms.log,density.tsv}` under
/// `opts.out_dir`. Validation happens before the first epoch, every
/// `validation_every` epochs and after the last one.
template <typename T>
TrainingRecord train_run(Model<T>& model, const TrainData& data, const TrainConfig& cfg,
                         const SpectralConfig& spectral, const RunOptions& opts) {
  namespace fs = std::filesystem;
  cfg.validate();
  const LossRegime regime = cfg.loss_regime();
  if (model.config().bins != spectral.bins_total) fail_usage("model bins do not match bins_total");
  check_pools(data, cfg);

  const fs::path root(opts.out_dir);
  fs::create_directories(root / "checkpoints");
  fs::create_directories(root / "log");
  std::ofstream loss_log(root / "log" / "losses.tsv");
  std::ofstream val_log(root / "log" / "validation.tsv");
  std::ofstream tf_log(root / "log" / "transforms.log");
  if (!loss_log || !val_log || !tf_log) fail_data("cannot create logs under ", opts.out_dir);
  val_log << "epoch\tP\tR\tF1\tcheckpoint\n";
  write_density_tsv((root / "log" / "density.tsv").string(), {}, true);

  const HcqtPlan plan(spectral);
  const std::size_t N = excerpt_frames(cfg, spectral);
  const BatchContext ctx{spectral, plan, cfg, regime, &data.percussion, N};
  std::vector<DiagnosticSplit> splits;
  splits.push_back({"validation", data.validation});
  for (const auto& d : data.diagnostics) splits.push_back(d);

  std::seed_seq seq{static_cast<std::uint64_t>(cfg.seed), std::uint64_t{0x747261696e}};
  Rng rng(seq);
  AdamW<T> opt(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  TrainingRecord rec;
  std::string last_good;

  auto validate = [&](std::size_t epoch) {
    const std::string ck = "checkpoints/epoch_" + std::to_string(epoch) + ".mpck";
    save_checkpoint((root / ck).string(), model, opts.config_record);
    last_good = ck;
    ValidationRow row;
    row.epoch = epoch;
    row.checkpoint = ck;
    std::vector<DensityRow> density;
    for (const auto& split : splits) {
      if (split.tracks.empty()) fail_usage("diagnostic split '", split.name, "' has no tracks");
      const auto evs = detail::evaluate_tracks(model, split.tracks, spectral, N, cfg.threshold, opts.workers);
      DensityRow d;
      d.epoch = epoch;
      d.split = split.name;
      std::vector<TrackMetrics> metrics;
      for (const auto& ev : evs) {
        d.mean_salience += ev.mean_salience;
        d.active_bins += ev.active_bins;
        metrics.push_back(ev.metrics);
      }
      const auto rep = aggregate(std::move(metrics));
      const double n = static_cast<double>(evs.size());
      d.mean_salience /= n;
      d.active_bins /= n;
      d.recall = rep.recall;
      d.f1 = rep.f1;
      density.push_back(d);
      if (split.name == "validation") {
        row.precision = rep.precision;
        row.recall = rep.recall;
        row.f1 = rep.f1;
      }
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu\t%.4f\t%.4f\t%.4f\t", epoch, row.precision, row.recall, row.f1);
    val_log << buf << ck << '\n' << std::flush;
    write_density_tsv((root / "log" / "density.tsv").string(), density, false, true);
    for (const auto& d : density) rec.density.rows.push_back(d);
    rec.validation.push_back(row);
  };

  auto due = [&](std::size_t epoch) {
    if (epoch == cfg.epochs) return true;
    if (cfg.validation_every > 0 && epoch % cfg.validation_every == 0) return true;
    return std::find(opts.checkpoint_epochs.begin(), opts.checkpoint_epochs.end(), epoch) !=
           opts.checkpoint_epochs.end();
  };

  validate(0);

  std::vector<const TrainTrack*> sup_order, ssl_order;
  for (const auto& t : data.supervised) sup_order.push_back(&t);
  for (const auto& t : data.ssl) ssl_order.push_back(&t);
  std::size_t ssl_cursor = ssl_order.size();  // forces a shuffle on first use
  const std::size_t steps = data.supervised.size() / cfg.batch_supervised;
  const double scale = cfg.rate_scale();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(sup_order.begin(), sup_order.end(), rng);
    const double mult = (cfg.finetune ? 1.0 : warmup_multiplier(epoch, cfg.warmup_epochs)) * scale;
    LossReport mean;
    for (std::size_t step = 0; step < steps; ++step) {
      if (opts.interrupt && opts.interrupt->load()) {
        rec.interrupted = true;
        validate(epoch - 1);
        rec.best_index = select_best(rec.validation);
        return rec;
      }
      const std::span<const TrainTrack* const> sup(sup_order.data() + step * cfg.batch_supervised,
                                                   cfg.batch_supervised);
      // The ssl pool cycles independently of the supervised epoch.
      std::vector<const TrainTrack*> ssl;
      for (std::size_t i = 0; i < cfg.batch_unsupervised; ++i) {
        if (ssl_cursor >= ssl_order.size()) {
          std::shuffle(ssl_order.begin(), ssl_order.end(), rng);
          ssl_cursor = 0;
        }
        ssl.push_back(ssl_order[ssl_cursor++]);
      }
      std::vector<std::string> notes;
      const Batch batch = compose_batch(sup, ssl, ctx, rng, &notes);
      for (const auto& n : notes) tf_log << epoch << '\t' << step << '\t' << n << '\n';

      ParameterSet<T> grads = model.params().zeros_like();
      const LossReport r = total_loss(batch, model, regime, &grads);
      if (!std::isfinite(r.l_total) || !grads.all_finite())
        fail_numerical("non-finite loss at epoch ", epoch, " step ", step, "; last good checkpoint ",
                       (root / last_good).string());
      clip_gradients(grads, cfg.clip_norm);
      opt.step(model.params(), grads, cfg.lr_encoder * mult, cfg.lr_decoder * mult);

      mean.l_spv += r.l_spv;
      mean.l_iv_t += r.l_iv_t;
      mean.l_iv_p += r.l_iv_p;
      mean.l_ev_g += r.l_ev_g;
      mean.l_eg += r.l_eg;
      mean.l_spr += r.l_spr;
      mean.l_total += r.l_total;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    mean.l_spv *= inv, mean.l_iv_t *= inv, mean.l_iv_p *= inv, mean.l_ev_g *= inv;
    mean.l_eg *= inv, mean.l_spr *= inv, mean.l_total *= inv;
    for (const auto& [term, value] : mean.terms()) loss_log << epoch << '\t' << term << '\t' << detail::fmt6(value) << '\n';
    loss_log.flush();
    tf_log.flush();
    rec.losses.emplace_back(epoch, mean);
    if (due(epoch)) validate(epoch);
  }
  rec.best_index = select_best(rec.validation);
  return rec;
}

/// Continues from a checkpoint with both rates scaled by 1/5 and no warmup.
template <typename T>
TrainingRecord finetune_run(const std::string& init_checkpoint, const ModelConfig& model_config,
                            const TrainData& data, TrainConfig cfg, const SpectralConfig& spectral,
                            const RunOptions& opts, Model<T>* out_model = nullptr) {
  Model<T> model = load_checkpoint<T>(init_checkpoint, &model_config);
  cfg.finetune = true;
  TrainingRecord rec = train_run(model, data, cfg, spectral, opts);
  if (out_model) *out_model = std::move(model);
  return rec;
}

}  // namespace mpe
