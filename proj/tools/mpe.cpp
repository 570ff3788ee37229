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

// mpe: train, finetune, eval, infer, transform, synth, plot.
//
// Exit status: 0 ok, 1 usage error, 2 data error, 3 numerical abort.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mpe/train.hpp"

namespace fs = std::filesystem;
using namespace mpe;

namespace {

std::atomic<bool> g_interrupt{false};

void on_sigint(int) { g_interrupt.store(true); }

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  long long seed = -1;
  std::size_t workers = 1;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--config", c.config, "key = value config file");
  cmd->add_option("--set", c.overrides, "override key=value (repeatable)");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
  cmd->add_option("--seed", c.seed, "seed (overrides the config)");
  cmd->add_option("--workers", c.workers, "evaluation threads")->check(CLI::PositiveNumber);
}

KeyValues resolve(const Common& c) {
  KeyValues kv = c.config.empty() ? KeyValues{} : KeyValues::load(c.config);
  for (const auto& o : c.overrides) kv.apply_override(o);
  if (c.seed >= 0) kv.set("seed", std::to_string(c.seed));
  return kv;
}

// Output directories are created only after every input has been validated.
void make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail_data("cannot create ", dir, ": ", ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  if (!os) fail_data("write failed: ", path.string());
}

void write_run_manifest(const std::string& dir, const std::string& command, const KeyValues& kv) {
  write_text(fs::path(dir) / "manifest.txt", "# mpe " + command + "\n" + kv.text());
}

// ---------------------------------------------------------------------------

int run_train(const Common& c, bool finetune) {
  const KeyValues raw = resolve(c);
  ExperimentConfig cfg = ExperimentConfig::from(raw);
  if (finetune) {
    cfg.train.finetune = true;
    if (cfg.init_checkpoint.empty()) fail_usage("finetune needs init_checkpoint");
    if (!fs::exists(cfg.init_checkpoint)) fail_usage("init_checkpoint ", cfg.init_checkpoint, " does not exist");
  }
  if (cfg.manifest.empty()) fail_usage("config key 'manifest' is required");
  const auto records = read_manifest(cfg.manifest);
  SplitScheme scheme{cfg.split_kind(), cfg.t2_size, cfg.train.seed};
  const SplitSet splits = make_splits(records, scheme);
  if (splits.supervised.empty()) fail_data("manifest has no train-supervised tracks");
  if (splits.validation.empty()) fail_data("manifest has no validation tracks");

  const HcqtPlan plan(cfg.spectral);
  TrainData data;
  data.supervised = load_train_tracks(splits.supervised, plan);
  auto ssl_records = splits.ssl;
  for (auto& r : ssl_records) r.annotation_path.reset();  // ssl tracks never see their labels
  data.ssl = load_train_tracks(ssl_records, plan);
  for (const auto& t : load_train_tracks(splits.validation, plan)) data.validation.push_back(to_eval_track(t));
  if (cfg.train.loss_regime().iv_p) data.percussion = make_percussion_bank(cfg.train, cfg.spectral);

  // Annotated ssl-role tracks double as a measurement split for the density log.
  std::vector<TrackRecord> ssl_measured;
  for (const auto& r : splits.ssl)
    if (r.annotation_path) ssl_measured.push_back(r);
  if (!ssl_measured.empty()) {
    DiagnosticSplit d{"ssl", {}};
    for (const auto& t : load_train_tracks(ssl_measured, plan)) d.tracks.push_back(to_eval_track(t));
    data.diagnostics.push_back(std::move(d));
  }

  check_pools(data, cfg.train);
  if (finetune) load_checkpoint<float>(cfg.init_checkpoint, &cfg.model);

  make_out_dir(c.out);
  const KeyValues resolved = cfg.to_kv();
  write_run_manifest(c.out, finetune ? "finetune" : "train", resolved);
  RunOptions opts;
  opts.out_dir = c.out;
  opts.workers = c.workers;
  opts.interrupt = &g_interrupt;
  opts.config_record = resolved;

  TrainingRecord rec;
  if (finetune) {
    rec = finetune_run<float>(cfg.init_checkpoint, cfg.model, data, cfg.train, cfg.spectral, opts);
  } else {
    Model<float> model(cfg.model);
    rec = train_run(model, data, cfg.train, cfg.spectral, opts);
  }
  const auto& best = rec.best();
  std::cout << "best\tepoch=" << best.epoch << "\tF1=" << best.f1 << "\t" << (fs::path(c.out) / best.checkpoint).string()
            << (rec.interrupted ? "\tinterrupted" : "") << '\n';
  write_text(fs::path(c.out) / "best.txt", best.checkpoint + "\n");
  for (const auto& v : detect_degeneration(rec.density, cfg.degeneration_window, cfg.degeneration_drop))
    std::cout << "degeneration\t" << v.split << '\t' << verdict_name(v.state) << '\n';
  return 0;
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& role) {
  const KeyValues raw = resolve(c);
  ExperimentConfig cfg = ExperimentConfig::from(raw);
  if (cfg.manifest.empty()) fail_usage("config key 'manifest' is required");
  const Role wanted = parse_role(role);
  const auto model = load_checkpoint<float>(checkpoint, &cfg.model);
  std::vector<TrackRecord> records;
  for (const auto& r : read_manifest(cfg.manifest))
    if (r.has_role(wanted)) records.push_back(r);
  if (records.empty()) fail_data("manifest has no '", role, "' tracks");
  std::vector<std::string> skipped;
  const auto tracks = load_eval_tracks(records, cfg.spectral, &skipped);
  const std::size_t tile = excerpt_frames(cfg.train, cfg.spectral);
  MetricsReport rep = evaluate_dataset(model, tracks, cfg.spectral, tile, cfg.train.threshold);
  rep.skipped = skipped;
  make_out_dir(c.out);
  write_run_manifest(c.out, "eval", cfg.to_kv());
  write_metrics_tsv((fs::path(c.out) / "metrics.tsv").string(), rep);
  write_metrics_json((fs::path(c.out) / "metrics.json").string(), rep);
  for (const auto& s : skipped) std::cerr << "skipped\t" << s << '\n';
  std::printf("mean\t%.4f\t%.4f\t%.4f\n", rep.precision, rep.recall, rep.f1);
  return 0;
}

int run_infer(const Common& c, const std::string& checkpoint, const std::string& audio_path) {
  const KeyValues raw = resolve(c);
  ExperimentConfig cfg = ExperimentConfig::from(raw);
  const auto model = load_checkpoint<float>(checkpoint, &cfg.model);
  const auto audio = load_audio(audio_path, cfg.spectral.sample_rate);
  const HcqtTensor hcqt = compute_hcqt(audio, cfg.spectral);
  const SalienceGram y = infer_track(model, hcqt, cfg.spectral, excerpt_frames(cfg.train, cfg.spectral));
  make_out_dir(c.out);
  write_run_manifest(c.out, "infer", cfg.to_kv());
  write_sfg((fs::path(c.out) / "salience.sfg").string(), y.values);
  write_estimate((fs::path(c.out) / "estimate.tsv").string(), peak_pick(y, cfg.spectral, cfg.train.threshold));
  return 0;
}

int run_transform(const Common& c, const std::string& audio_path, const std::string& kind,
                  const std::string& percussion_path) {
  const KeyValues raw = resolve(c);
  ExperimentConfig cfg = ExperimentConfig::from(raw);
  if (kind != "eq" && kind != "perc" && kind != "geo") fail_usage("--kind must be eq, perc or geo");
  const auto audio = load_audio(audio_path, cfg.spectral.sample_rate);
  const HcqtPlan plan(cfg.spectral);
  const HcqtTensor before = plan.compute(audio);
  Rng rng(cfg.train.seed);
  HcqtTensor after;
  TransformSpec spec;
  if (kind == "eq") {
    const auto s = sample_eq_curve(rng, cfg.spectral.bins_total);
    after = apply_eq(before, s);
    spec = s;
  } else if (kind == "geo") {
    const auto s = sample_geometric(rng, before.frames(), static_cast<int>(cfg.spectral.bins_per_octave()));
    after = apply_geometric(before, s);
    spec = s;
  } else {
    std::vector<float> perc;
    std::string source;
    if (percussion_path.empty()) {
      perc = synth_percussion(rng, static_cast<double>(audio.size()) / cfg.spectral.sample_rate,
                              cfg.spectral.sample_rate);
      source = "synth";
    } else {
      perc = load_audio(percussion_path, cfg.spectral.sample_rate);
      source = percussion_path;
    }
    const auto s = sample_percussion_mix(rng, source, perc.size());
    after = plan.compute(mix_percussion(audio, cfg.spectral.sample_rate, perc, cfg.spectral.sample_rate, s.volume,
                                        s.offset));
    spec = s;
  }
  make_out_dir(c.out);
  write_run_manifest(c.out, "transform", cfg.to_kv());
  write_sfg((fs::path(c.out) / "before.sfg").string(), before.unit_db);
  write_sfg((fs::path(c.out) / "after.sfg").string(), after.unit_db);
  write_text(fs::path(c.out) / "spec.txt", to_string(spec) + "\n");
  std::cout << to_string(spec) << '\n';
  return 0;
}

// synth keys: tracks, roles ("40:train-supervised,10:validation"), voices
// range, duration, bin range, partials, seed, plus spectral keys.
int run_synth(const Common& c) {
  KeyValues kv = resolve(c);
  // Experiment keys are accepted so one config file can drive synth and train.
  std::vector<std::string> known = ExperimentConfig::keys();
  for (const char* k : {"synth_roles", "synth_min_voices", "synth_max_voices", "synth_duration", "synth_lowest_bin",
                        "synth_highest_bin", "synth_partials", "synth_noise", "synth_prefix", "synth_unlabelled"})
    known.push_back(k);
  kv.check_known(known);
  KeyValues spectral_only;
  for (const auto& [k, v] : kv.entries())
    if (k.rfind("synth_", 0) != 0) spectral_only.set(k, v);
  const ExperimentConfig base = ExperimentConfig::from(spectral_only);
  RandomSynthOptions opt;
  opt.highest_bin = std::min<std::size_t>(opt.highest_bin, base.spectral.bins_total - 1);
  std::string roles = "40:train-supervised,10:validation,10:test";
  std::string prefix = "track";
  double noise = 1e-3;
  bool unlabelled = false;
  kv.read("synth_roles", roles);
  kv.read("synth_min_voices", opt.min_voices);
  kv.read("synth_max_voices", opt.max_voices);
  kv.read("synth_duration", opt.duration);
  kv.read("synth_lowest_bin", opt.lowest_bin);
  kv.read("synth_highest_bin", opt.highest_bin);
  kv.read("synth_partials", opt.partials);
  kv.read("synth_noise", noise);
  kv.read("synth_prefix", prefix);
  kv.read("synth_unlabelled", unlabelled);
  std::vector<std::pair<std::size_t, Role>> plan;
  for (const auto& tok : KeyValues::split_list(roles)) {
    const auto colon = tok.find(':');
    if (colon == std::string::npos) fail_usage("synth_roles entry '", tok, "' is not count:role");
    plan.emplace_back(std::stoul(tok.substr(0, colon)), parse_role(tok.substr(colon + 1)));
  }
  if (opt.min_voices > opt.max_voices || opt.lowest_bin > opt.highest_bin) fail_usage("bad synth ranges");

  make_out_dir(c.out);
  write_run_manifest(c.out, "synth", kv);
  std::vector<TrackRecord> records;
  std::size_t index = 0;
  for (const auto& [count, role] : plan) {
    for (std::size_t i = 0; i < count; ++i, ++index) {
      char id[64];
      std::snprintf(id, sizeof id, "%s%03zu", prefix.c_str(), index);
      SynthSpec spec = random_synth_spec(base.train.seed * 100003 + index, opt, base.spectral);
      spec.noise_floor = noise;
      const SynthTrack t = synth_track(spec);
      TrackRecord r;
      r.id = id;
      r.audio_path = std::string(id) + ".wav";
      write_wav((fs::path(c.out) / r.audio_path).string(), t.samples, spec.sample_rate, true);
      if (!(unlabelled && role == Role::train_ssl)) {
        r.annotation_path = std::string(id) + ".tsv";
        write_annotation((fs::path(c.out) / *r.annotation_path).string(), t.annotation);
      }
      r.roles = {role};
      records.push_back(std::move(r));
    }
  }
  write_manifest((fs::path(c.out) / "manifest.tsv").string(), records);
  std::cout << records.size() << " tracks\t" << (fs::path(c.out) / "manifest.tsv").string() << '\n';
  return 0;
}

int run_plot(const Common& c, const std::vector<std::string>& curves, std::size_t window, double drop) {
  if (curves.empty()) fail_usage("plot needs at least one --curve label=density.tsv");
  std::vector<RegimeCurve> rc;
  for (const auto& spec : curves) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) fail_usage("--curve expects label=path, got '", spec, "'");
    rc.push_back({spec.substr(0, eq), read_density_tsv(spec.substr(eq + 1))});
    if (rc.back().trajectory.rows.empty()) fail_data(spec.substr(eq + 1), ": no density rows");
  }
  make_out_dir(c.out);
  KeyValues kv;
  for (std::size_t i = 0; i < curves.size(); ++i) kv.set("curve_" + std::to_string(i), curves[i]);
  write_run_manifest(c.out, "plot", kv);
  for (const auto& p : emit_curves(rc, (fs::path(c.out) / "").string())) std::cout << p << '\n';
  for (const auto& r : rc)
    for (const auto& v : detect_degeneration(r.trajectory, window, drop))
      std::cout << "degeneration\t" << r.label << '\t' << v.split << '\t' << verdict_name(v.state) << '\n';
  return 0;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return 1;
    case ErrorKind::data: return 2;
    case ErrorKind::numerical: return 3;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-pitch estimation toolkit"};
  app.require_subcommand(1);
  Common train_c, ft_c, eval_c, infer_c, tf_c, synth_c, plot_c;
  std::string eval_ckpt, eval_role = "test", infer_ckpt, infer_audio, tf_audio, tf_kind = "eq", tf_perc;
  std::vector<std::string> plot_curves;
  std::size_t plot_window = 5;
  double plot_drop = 0.5;

  auto* train = app.add_subcommand("train", "train a model from a manifest");
  add_common(train, train_c);
  auto* ft = app.add_subcommand("finetune", "continue from init_checkpoint at 1/5 the rates");
  add_common(ft, ft_c);
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a manifest split");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", eval_ckpt)->required();
  ev->add_option("--role", eval_role, "manifest role to score");
  auto* inf = app.add_subcommand("infer", "salience and estimates for one audio file");
  add_common(inf, infer_c);
  inf->add_option("--checkpoint", infer_ckpt)->required();
  inf->add_option("--audio", infer_audio)->required();
  auto* tf = app.add_subcommand("transform", "apply one seeded transform to an audio file's spectrogram");
  add_common(tf, tf_c);
  tf->add_option("--audio", tf_audio)->required();
  tf->add_option("--kind", tf_kind, "eq, perc or geo");
  tf->add_option("--percussion", tf_perc, "percussion WAV (default: synthetic)");
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset and manifest");
  add_common(synth, synth_c);
  auto* plot = app.add_subcommand("plot", "render density curves");
  add_common(plot, plot_c);
  plot->add_option("--curve", plot_curves, "label=path/to/density.tsv (repeatable)");
  plot->add_option("--window", plot_window);
  plot->add_option("--drop", plot_drop);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error\tusage\t" << e.what() << '\n';
    return 1;
  }
  std::signal(SIGINT, on_sigint);
  try {
    if (*train) return run_train(train_c, false);
    if (*ft) return run_train(ft_c, true);
    if (*ev) return run_eval(eval_c, eval_ckpt, eval_role);
    if (*inf) return run_infer(infer_c, infer_ckpt, infer_audio);
    if (*tf) return run_transform(tf_c, tf_audio, tf_kind, tf_perc);
    if (*synth) return run_synth(synth_c);
    if (*plot) return run_plot(plot_c, plot_curves, plot_window, plot_drop);
  } catch (const Error& e) {
    const char* kind = e.kind() == ErrorKind::usage ? "usage" : e.kind() == ErrorKind::data ? "data" : "numerical";
    std::cerr << "error\t" << kind << '\t' << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error\tdata\t" << e.what() << '\n';
    return 2;
  }
  return 1;
}
