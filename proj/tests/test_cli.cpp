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

// Drives the mpe binary end to end.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mpe/train.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int status = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    work_ = new mpe::test::TempDir("cli");
    // A small synthetic set shared by every test.
    const auto r = run("synth --out " + q(dir() / "ds") + spectral() +
                       " --set synth_roles=6:train-supervised,2:validation,2:test --set synth_duration=1.5"
                       " --set synth_lowest_bin=0 --set synth_highest_bin=170 --set seed=3");
    ASSERT_EQ(r.status, 0) << r.err;
    std::ofstream cfg(dir() / "toy.cfg");
    cfg << "# toy\nmanifest = " << (dir() / "ds" / "manifest.tsv").string() << "\n"
        << "hop = 512\nf_min = 55\nbins_total = 180\nn_blocks = 2\nbase_filters = 2\n"
        << "batch_supervised = 3\nepochs = 4\nvalidation_every = 2\nexcerpt_seconds = 1\nwarmup_epochs = 2\n";
  }
  static void TearDownTestSuite() {
    delete work_;
    work_ = nullptr;
  }

  static fs::path dir() { return work_->path(); }
  static std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }
  static std::string spectral() { return " --set hop=512 --set f_min=55 --set bins_total=180"; }
  static std::string config() { return " --config " + q(dir() / "toy.cfg"); }

  static Result run(const std::string& args) {
    static int counter = 0;
    const fs::path out = dir() / ("stdout" + std::to_string(counter));
    const fs::path err = dir() / ("stderr" + std::to_string(counter++));
    const std::string cmd = std::string(MPE_CLI_PATH) + " " + args + " > " + q(out) + " 2> " + q(err);
    const int rc = std::system(cmd.c_str());
    Result r;
    r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    fs::remove(out);
    fs::remove(err);
    return r;
  }

  // Trains the shared toy run once.
  static const fs::path& trained() {
    static const fs::path run_dir = [] {
      const fs::path d = dir() / "run";
      const auto r = run("train" + config() + " --out " + q(d));
      EXPECT_EQ(r.status, 0) << r.err;
      return d;
    }();
    return run_dir;
  }

  static mpe::test::TempDir* work_;
};

mpe::test::TempDir* Cli::work_ = nullptr;

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_F(Cli, SynthWritesManifestAndAudio) {
  const fs::path ds = dir() / "ds";
  EXPECT_TRUE(fs::exists(ds / "manifest.tsv"));
  EXPECT_TRUE(fs::exists(ds / "manifest.txt"));
  EXPECT_TRUE(fs::exists(ds / "track000.wav"));
  EXPECT_TRUE(fs::exists(ds / "track009.tsv"));
  EXPECT_EQ(lines(slurp(ds / "manifest.tsv")), 10u);
}

TEST_F(Cli, UsageErrorsExitOneWithoutOutput) {
  const fs::path out = dir() / "never";
  for (const std::string& args : std::vector<std::string>{
           std::string("train") + config(),                                   // missing --out
           "train" + config() + " --set no_such_key=1 --out " + q(out),       // unknown key
           "train" + config() + " --set epochs=abc --out " + q(out),          // bad value
           "finetune" + config() + " --out " + q(out),                        // no init checkpoint
           "transform --audio " + q(dir() / "ds/track000.wav") + " --kind warp --out " + q(out),
           "plot --out " + q(out),
           std::string("bogus"),
           std::string(""),
       }) {
    const auto r = run(args);
    EXPECT_EQ(r.status, 1) << args << "\n" << r.err;
    EXPECT_FALSE(fs::exists(out)) << args;
  }
}

TEST_F(Cli, ErrorsAreOneMachineReadableLine) {
  const auto r = run("train" + config() + " --set no_such_key=1 --out " + q(dir() / "x"));
  EXPECT_EQ(lines(r.err), 1u);
  EXPECT_EQ(r.err.rfind("error\tusage\t", 0), 0u) << r.err;
  EXPECT_NE(r.err.find("no_such_key"), std::string::npos);
}

TEST_F(Cli, DataErrorsExitTwo) {
  const fs::path out = dir() / "never2";
  auto r = run("train" + config() + " --set manifest=" + q(dir() / "missing.tsv") + " --out " + q(out));
  EXPECT_EQ(r.status, 2) << r.err;
  EXPECT_EQ(r.err.rfind("error\tdata\t", 0), 0u) << r.err;
  EXPECT_FALSE(fs::exists(out));
  r = run("infer" + config() + " --checkpoint " + q(dir() / "missing.mpck") + " --audio " +
          q(dir() / "ds/track000.wav") + " --out " + q(out));
  EXPECT_EQ(r.status, 2) << r.err;
  EXPECT_FALSE(fs::exists(out));
}

TEST_F(Cli, TrainProducesRecordDirectory) {
  const fs::path d = trained();
  for (const char* f : {"manifest.txt", "best.txt", "log/losses.tsv", "log/validation.tsv", "log/density.tsv",
                        "log/transforms.log", "checkpoints/epoch_0.mpck", "checkpoints/epoch_4.mpck"})
    EXPECT_TRUE(fs::exists(d / f)) << f;
  const std::string manifest = slurp(d / "manifest.txt");
  EXPECT_EQ(manifest.rfind("# mpe train\n", 0), 0u);
  EXPECT_NE(manifest.find("regime = spv"), std::string::npos);
  EXPECT_NE(manifest.find("batch_unsupervised = 0"), std::string::npos);
  EXPECT_NE(manifest.find("base_filters = 2"), std::string::npos);
}

TEST_F(Cli, ManifestReproducesTheRunBitwise) {
  const fs::path d = trained();
  const fs::path again = dir() / "rerun";
  const auto r = run("train --config " + q(d / "manifest.txt") + " --workers 1 --out " + q(again));
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(again / "checkpoints/epoch_4.mpck"), slurp(d / "checkpoints/epoch_4.mpck"));
  EXPECT_EQ(slurp(again / "log/losses.tsv"), slurp(d / "log/losses.tsv"));
}

TEST_F(Cli, OverridesAndSeedFlagAreRecorded) {
  const fs::path d = dir() / "seeded";
  const auto r = run("train" + config() + " --set epochs=2 --seed 12 --workers 2 --out " + q(d));
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string manifest = slurp(d / "manifest.txt");
  EXPECT_NE(manifest.find("epochs = 2"), std::string::npos);
  EXPECT_NE(manifest.find("seed = 12"), std::string::npos);
  EXPECT_NE(r.out.find("best\tepoch="), std::string::npos);
}

TEST_F(Cli, EvalAndInferWriteReports) {
  const fs::path d = trained();
  const std::string ckpt = q(d / "checkpoints/epoch_4.mpck");
  const fs::path ev = dir() / "eval";
  auto r = run("eval" + config() + " --checkpoint " + ckpt + " --role test --out " + q(ev));
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(fs::exists(ev / "metrics.tsv"));
  EXPECT_TRUE(fs::exists(ev / "metrics.json"));
  EXPECT_TRUE(fs::exists(ev / "manifest.txt"));
  EXPECT_EQ(r.out.rfind("mean\t", 0), 0u);

  r = run("eval" + config() + " --checkpoint " + ckpt + " --role train-ssl --out " + q(dir() / "eval2"));
  EXPECT_EQ(r.status, 2);
  EXPECT_FALSE(fs::exists(dir() / "eval2"));

  const fs::path inf = dir() / "infer";
  r = run("infer" + config() + " --checkpoint " + ckpt + " --audio " + q(dir() / "ds/track000.wav") + " --out " +
          q(inf));
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(fs::exists(inf / "salience.sfg"));
  EXPECT_TRUE(fs::exists(inf / "estimate.tsv"));
  EXPECT_TRUE(fs::exists(inf / "manifest.txt"));
}

TEST_F(Cli, CheckpointConfigMismatchIsRejected) {
  const auto r = run("eval" + config() + " --set base_filters=3 --checkpoint " +
                     q(trained() / "checkpoints/epoch_0.mpck") + " --out " + q(dir() / "mismatch"));
  EXPECT_NE(r.status, 0);
  EXPECT_FALSE(fs::exists(dir() / "mismatch"));
}

TEST_F(Cli, FinetuneContinuesFromCheckpoint) {
  const fs::path d = dir() / "ft";
  const auto r = run("finetune" + config() + " --set epochs=2 --set init_checkpoint=" +
                     q(trained() / "checkpoints/epoch_4.mpck") + " --out " + q(d));
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(slurp(d / "manifest.txt").find("finetune = true"), std::string::npos);
  EXPECT_TRUE(fs::exists(d / "checkpoints/epoch_2.mpck"));
}

TEST_F(Cli, TransformIsSeedDeterministic) {
  for (const char* kind : {"eq", "geo", "perc"}) {
    const fs::path a = dir() / (std::string("tf_a_") + kind), b = dir() / (std::string("tf_b_") + kind);
    const std::string base = "transform" + spectral() + " --audio " + q(dir() / "ds/track001.wav") +
                             " --kind " + kind + " --seed 7 --out ";
    const auto ra = run(base + q(a));
    const auto rb = run(base + q(b));
    ASSERT_EQ(ra.status, 0) << ra.err;
    ASSERT_EQ(rb.status, 0) << rb.err;
    for (const char* f : {"before.sfg", "after.sfg", "spec.txt"}) {
      EXPECT_FALSE(slurp(a / f).empty()) << kind << f;
      EXPECT_EQ(slurp(a / f), slurp(b / f)) << kind << f;
    }
    EXPECT_NE(slurp(a / "before.sfg"), slurp(a / "after.sfg")) << kind;
    EXPECT_EQ(ra.out.substr(0, 2), std::string(kind).substr(0, 2));
  }
}

TEST_F(Cli, PlotRendersDensityCurves) {
  const fs::path p = dir() / "plots";
  const auto r = run("plot --curve Ref.=" + q(trained() / "log/density.tsv") + " --window 2 --out " + q(p));
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(fs::exists(p / "validation.svg"));
  EXPECT_TRUE(fs::exists(p / "curves.tsv"));
  EXPECT_NE(slurp(p / "validation.svg").find("Ref."), std::string::npos);
  EXPECT_NE(r.out.find("degeneration\tRef.\tvalidation\t"), std::string::npos);

  const auto bad = run("plot --curve nolabel --out " + q(dir() / "plots2"));
  EXPECT_EQ(bad.status, 1);
  EXPECT_FALSE(fs::exists(dir() / "plots2"));
}

TEST(Presets, EveryPresetResolvesToAValidConfig) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(MPE_PRESETS_DIR)) {
    if (e.path().extension() != ".cfg") continue;
    ++n;
    SCOPED_TRACE(e.path().filename().string());
    const auto kv = mpe::KeyValues::load(e.path().string());
    const auto cfg = mpe::ExperimentConfig::from(kv);
    EXPECT_NO_THROW(cfg.validate());
    // The regime named by the file name is what the config selects.
    const std::string name = e.path().stem().string();
    const auto r = cfg.train.loss_regime();
    if (name == "spv" || name == "toy") {
      EXPECT_EQ(r.name(), "spv");
    } else {
      EXPECT_TRUE(r.spv && r.iv_t && r.iv_p && r.ev_g);
    }
    EXPECT_EQ(r.eg, name == "ssl16_eg");
    EXPECT_EQ(cfg.train.finetune, name == "ssl16_ft");
    if (name.rfind("sweep_", 0) == 0) {
      EXPECT_EQ(std::to_string(cfg.train.batch_unsupervised), name.substr(6));
    }
    if (name.rfind("ssl16", 0) == 0) {
      EXPECT_EQ(cfg.train.batch_unsupervised, 16u);
    }
    if (name.rfind("t1", 0) == 0) {
      EXPECT_EQ(cfg.split_kind(), mpe::SplitKind::t1t2);
    }
  }
  EXPECT_EQ(n, 11u);
}
