// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Drives the promptagg binary end to end on a tiny config.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"
#include "promptagg/config.hpp"

namespace promptagg {
namespace {

namespace fs = std::filesystem;

constexpr const char* kSmallConfig = R"({
  "model": {"depth": 2, "d_text": 8, "d_vis": 12, "d_proj": 8, "n_heads": 2,
            "text_prompt_len": 2, "vis_prompt_len": 2, "n_classes": 3, "vocab_size": 6,
            "image_side": 8, "patch_side": 4, "mlp_ratio": 2, "init_std": 0.5},
  "data": {"samples_per_class": 6, "warmup": {"steps": 0}},
  "train": {"lr": 0.5, "aggregator_lr": 0.5, "batch_size": 8},
  "rounds": 3, "seed": 11})";

struct Result {
  int code = -1;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("promptagg_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "small.json") << kSmallConfig;
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args) const {
    const std::string cmd = "cd '" + dir_.string() + "' && PROMPTAGG_OUTPUT_ROOT='" +
                            (dir_ / "root").string() + "' '" PROMPTAGG_CLI_PATH "' " + args +
                            " 2>/dev/null";
    Result r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    char buf[4096];
    std::size_t n = 0;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  std::string slurp(const fs::path& p) const {
    std::ifstream in(dir_ / p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  static std::vector<std::string> lines(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string line;
    while (std::getline(ss, line)) {
      if (!line.empty()) out.push_back(line);
    }
    return out;
  }

  ExperimentConfig small() const { return config_from_json(kSmallConfig); }

  fs::path dir_;
};

TEST_F(Cli, RunEmitsOneRecordPerRound) {
  const Result r = run("run --config small.json --method plan --out a");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto records = lines(slurp("a/metrics.jsonl"));
  ASSERT_EQ(records.size(), 3u);
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_EQ(nlohmann::json::parse(records[i])["round"], i + 1);
  }
  for (const char* f : {"config.json", "manifest.json", "summary.csv", "timing.jsonl",
                        "global_prompts.ckpt", "aggregators.ckpt", "backbone.ckpt"}) {
    EXPECT_TRUE(fs::exists(dir_ / "a" / f)) << f;
  }
  EXPECT_NE(r.out.find("final target accuracy"), std::string::npos);
  EXPECT_NE(r.out.find("total tensor bytes"), std::string::npos);
  EXPECT_NE(r.out.find("wall time"), std::string::npos);
}

TEST_F(Cli, DefaultOutputGoesUnderTheRoot) {
  ASSERT_EQ(run("run --config small.json").code, 0);
  const fs::path expected = fs::path("root") / ("plan-" + config_hash(small()));
  EXPECT_TRUE(fs::exists(dir_ / expected / "metrics.jsonl"));
}

TEST_F(Cli, RunMatchesTheApiBitwise) {
  ASSERT_EQ(run("run --config small.json --out a").code, 0);
  const ExperimentConfig cfg = small();
  const auto api = run_experiment(cfg);
  std::string expected;
  for (const auto& m : api.rounds) expected += metrics_json(m) + "\n";
  EXPECT_EQ(slurp("a/metrics.jsonl"), expected);
}

TEST_F(Cli, AblateDisableKlMatchesAlphaZero) {
  ASSERT_EQ(run("run --config small.json --ablate disable_kl --out a").code, 0);
  ExperimentConfig cfg = small();
  cfg.train.alpha = 0.0;
  const auto api = run_experiment(cfg);
  std::string expected;
  for (const auto& m : api.rounds) expected += metrics_json(m) + "\n";
  EXPECT_EQ(slurp("a/metrics.jsonl"), expected);
  const Checkpoint ckpt = read_checkpoint(dir_ / "a/global_prompts.ckpt");
  EXPECT_EQ(content_hash(ckpt.tensors), api.final_state.prompts.content_hash());
}

TEST_F(Cli, AvgBaselineSendsNoStageTwoBytes) {
  ASSERT_EQ(run("run --config small.json --method avg_baseline --out a").code, 0);
  for (const auto& line : lines(slurp("a/metrics.jsonl"))) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["bytes_down_stage2"], 0);
    EXPECT_EQ(j["bytes_up_stage2"], 0);
  }
}

TEST_F(Cli, ReRunningTheSavedConfigReproducesTheRun) {
  ASSERT_EQ(run("run --config small.json --set train.alpha=0.3 --out a").code, 0);
  ASSERT_EQ(run("run --config a/config.json --out b").code, 0);
  for (const char* f : {"metrics.jsonl", "global_prompts.ckpt", "aggregators.ckpt",
                        "backbone.ckpt", "summary.csv"}) {
    EXPECT_EQ(slurp(fs::path("a") / f), slurp(fs::path("b") / f)) << f;
  }
}

TEST_F(Cli, EvalMatchesFinalInRunAccuracy) {
  ASSERT_EQ(run("run --config small.json --out a").code, 0);
  const Result e1 = run("eval --run a");
  const Result e2 = run("eval --run a");
  ASSERT_EQ(e1.code, 0);
  EXPECT_EQ(e1.out, e2.out);
  const auto out = lines(e1.out);
  ASSERT_EQ(out.size(), 5u);  // four domains plus the average
  const auto last = nlohmann::json::parse(lines(slurp("a/metrics.jsonl")).back());
  const std::string prefix = "domain 0 (held out) accuracy ";
  ASSERT_EQ(out[0].rfind(prefix, 0), 0u) << out[0];
  EXPECT_EQ(std::stod(out[0].substr(prefix.size())), last["target_accuracy"].get<double>());
  EXPECT_EQ(out.back().rfind("average accuracy", 0), 0u);
}

TEST_F(Cli, EvalLeavesTheRunUntouched) {
  ASSERT_EQ(run("run --config small.json --out a").code, 0);
  const std::string before = slurp("a/global_prompts.ckpt");
  ASSERT_EQ(run("eval --run a --domains 1,2").code, 0);
  EXPECT_EQ(slurp("a/global_prompts.ckpt"), before);
}

TEST_F(Cli, CorruptCheckpointExitsThree) {
  ASSERT_EQ(run("run --config small.json --out a").code, 0);
  const std::string good = slurp("a/global_prompts.ckpt");
  std::ofstream(dir_ / "bad.ckpt", std::ios::binary) << good.substr(0, good.size() / 2);
  EXPECT_EQ(run("eval --prompts bad.ckpt --backbone a/backbone.ckpt").code, 3);
  EXPECT_EQ(run("eval --prompts missing.ckpt --backbone a/backbone.ckpt").code, 3);
}

TEST_F(Cli, InvalidConfigExitsTwo) {
  EXPECT_EQ(run("run --config small.json --set train.bogus=1").code, 2);
  EXPECT_EQ(run("run --config small.json --set rounds=0").code, 2);
  EXPECT_EQ(run("run --config nowhere.json").code, 2);
  EXPECT_EQ(run("run --config small.json --ablate disable_all").code, 2);
  EXPECT_EQ(run("run --config small.json --method fedavg").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(Cli, SweepRowsMatchGridCardinality) {
  const Result r = run("sweep --config small.json --alpha 0,1 --prompt-len 1,2 --rounds 1 --out s");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(lines(r.out).size(), 1u + 4u);  // header plus one row per cell
  std::size_t cells = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "s")) cells += e.is_directory();
  EXPECT_EQ(cells, 4u);
}

TEST_F(Cli, OneCellSweepEqualsRun) {
  ASSERT_EQ(run("run --config small.json --out a").code, 0);
  ASSERT_EQ(run("sweep --config small.json --out s").code, 0);
  std::string cell;
  for (const auto& e : fs::directory_iterator(dir_ / "s")) cell = e.path().filename().string();
  EXPECT_EQ(slurp(fs::path("s") / cell / "metrics.jsonl"), slurp("a/metrics.jsonl"));
}

TEST_F(Cli, EmptySweepGridExitsTwo) {
  EXPECT_EQ(run("sweep --config small.json --alpha ''").code, 2);
}

TEST_F(Cli, ExportDatasetWritesEveryDomain) {
  ASSERT_EQ(run("export-dataset --config small.json --out ds.bin").code, 0);
  const Checkpoint c = read_checkpoint(dir_ / "ds.bin");
  const auto domains = experiment_domains(small());
  ASSERT_EQ(domains.size(), 4u);
  for (const auto& d : domains) {
    const std::string prefix = "domain." + std::to_string(d.domain_id) + ".";
    const DomainDataset back = DomainDataset::from_tensors(c.tensors, prefix);
    EXPECT_EQ(content_hash(back.to_tensors()), content_hash(d.to_tensors()));
  }
}

}  // namespace
}  // namespace promptagg
