// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Pass criterion numbers as arguments to run
// a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "promptagg/config.hpp"
#include "promptagg/losses.hpp"
#include "test_util.hpp"

namespace promptagg {
namespace {

using testing::max_fd_rel_error;
using testing::random_matrix;

// Tolerances.
constexpr Scalar kGradRelErr = 1e-4;
constexpr Scalar kGradSeconds = 60.0;
constexpr Scalar kNormTol = 1e-12;
constexpr Scalar kSelfKlTol = 1e-10;
constexpr Scalar kCollapseTol = 1e-12;
constexpr Scalar kChance = 0.25;
constexpr Scalar kOverChance = 0.20;
constexpr Scalar kE2eSeconds = 600.0;
constexpr int kRandomCases = 1000;
constexpr int kSeeds = 5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

/// Aggregators with O(1) weights so every parameter carries gradient.
AggregatorParams lively_aggregators(const ModelConfig& cfg, std::uint64_t seed) {
  AggregatorInit init;
  init.stddev = 0.5;
  init.fa_out_stddev = 0.3;
  AggregatorParams p = AggregatorParams::init(cfg, seed, init);
  std::mt19937_64 rng(seed + 1);
  for (Tensor* t : p.parameters()) {
    if (t->rows() == 1) t->value() = random_matrix(1, t->cols(), rng, -0.5, 0.5);
  }
  return p;
}

std::vector<PromptSet> random_locals(const ModelConfig& cfg, Index k, std::uint64_t seed,
                                     Scalar stddev = 0.5) {
  std::vector<PromptSet> out;
  for (Index i = 0; i < k; ++i) out.push_back(PromptSet::random(cfg, seed + i, stddev));
  return out;
}

Scalar mean(const std::vector<Scalar>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<Scalar>(v.size());
}

Scalar sample_var(const std::vector<Scalar>& v) {
  const Scalar m = mean(v);
  Scalar s = 0.0;
  for (Scalar x : v) s += (x - m) * (x - m);
  return s / static_cast<Scalar>(v.size() - 1);
}

Scalar pooled_sd(const std::vector<Scalar>& a, const std::vector<Scalar>& b) {
  return std::sqrt(0.5 * (sample_var(a) + sample_var(b)));
}

std::string join(const std::vector<Scalar>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt("%.4f", v[i]);
  return s;
}

// 1 ------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto start = std::chrono::steady_clock::now();
  const ModelConfig cfg = ModelConfig::gradient_toy();
  const BackboneParams backbone = BackboneParams::init(cfg, 101);
  const DomainDataset data = generate_domain(cfg, default_domain_specs(cfg, 3)[1], 7);

  PromptSet local = PromptSet::random(cfg, 102, 0.3);
  local.set_trainable(true);
  const PromptSet global = PromptSet::random(cfg, 103, 0.3);
  const Matrix ref = reference_distribution(backbone, global, ReferenceMode::global_prompts,
                                            data.images);
  std::vector<Tensor*> prompt_params;
  for (Tensor& t : local.text) prompt_params.push_back(&t);
  for (Tensor& t : local.visual) prompt_params.push_back(&t);
  const Scalar prompt_err = max_fd_rel_error(
      [&](Tape& tape) {
        return prompt_learning_loss(tape, backbone, local, data.images, data.labels, ref, 1.0);
      },
      prompt_params);

  const std::vector<PromptSet> locals = random_locals(cfg, 3, 104);
  AggregatorParams agg = lively_aggregators(cfg, 105);
  agg.set_trainable(true);
  const Scalar agg_err = max_fd_rel_error(
      [&](Tape& tape) {
        return aggregation_loss(tape, backbone, locals, agg, {}, data.images, data.labels);
      },
      agg.parameters());

  const double secs = seconds_since(start);
  const Scalar worst = std::max(prompt_err, agg_err);
  return {worst < kGradRelErr && secs < kGradSeconds,
          fmt("max rel err prompts %.2e, aggregators %.2e (< %.0e); %.1f s (< %.0f s)",
              prompt_err, agg_err, kGradRelErr, secs, kGradSeconds)};
}

// 2 ------------------------------------------------------------------------

Outcome normalization_suite() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<Index> small(1, 6);
  std::uniform_real_distribution<Scalar> scale(0.01, 50.0);
  Scalar worst_row = 0.0;
  Scalar worst_gamma = 0.0;
  Scalar min_gamma = 1.0;
  Scalar worst_kl = 0.0;
  const ModelConfig cfg = ModelConfig::gradient_toy();
  for (int i = 0; i < kRandomCases; ++i) {
    // classify() on random unit rows with random temperature.
    const Index c = small(rng) + 1;
    const Index n = small(rng);
    const Index d = small(rng) + 1;
    Matrix w = random_matrix(c, d, rng);
    Matrix f = random_matrix(n, d, rng);
    w.rowwise().normalize();
    f.rowwise().normalize();
    const Matrix p = classify(w, f, 1.0 / scale(rng));
    worst_row = std::max(worst_row, (p.rowwise().sum().array() - 1.0).abs().maxCoeff());

    // gamma over random aggregators and K local prompts.
    AggregatorInit init;
    init.stddev = scale(rng) / 10.0;
    const AggregatorParams agg = AggregatorParams::init(cfg, 1000 + i, init);
    std::vector<Matrix> prompts;
    const Index k = small(rng);
    for (Index j = 0; j < k; ++j) {
      prompts.push_back(random_matrix(cfg.text_prompt_len, cfg.d_text, rng, -3.0, 3.0));
    }
    const RowVector g = attention_weights(agg.text[static_cast<std::size_t>(i % cfg.depth)], prompts);
    worst_gamma = std::max(worst_gamma, std::abs(g.sum() - 1.0));
    min_gamma = std::min(min_gamma, g.minCoeff());

    worst_kl = std::max(worst_kl, std::abs(kl_divergence(p, p)));
  }
  const bool pass = worst_row <= kNormTol && worst_gamma <= kNormTol && min_gamma >= 0.0 &&
                    worst_kl <= kSelfKlTol;
  return {pass, fmt("%d cases: |row sum - 1| %.1e, |gamma sum - 1| %.1e (<= %.0e), "
                    "min gamma %.1e (>= 0), KL(p,p) %.1e (<= %.0e)",
                    kRandomCases, worst_row, worst_gamma, kNormTol, min_gamma, worst_kl,
                    kSelfKlTol)};
}

// 3 ------------------------------------------------------------------------

Outcome collapse_identities() {
  const ModelConfig cfg = ModelConfig::gradient_toy();
  std::mt19937_64 rng(3);
  Scalar worst_same = 0.0;
  Scalar worst_q = 0.0;
  Scalar worst_onehot = 0.0;
  for (int i = 0; i < 100; ++i) {
    AggregatorParams agg = lively_aggregators(cfg, 3000 + i);
    const Aggregator& a = agg.text[0];
    const Matrix t = random_matrix(cfg.text_prompt_len, cfg.d_text, rng, -2.0, 2.0);
    const Index k = 2 + i % 4;
    const std::vector<Matrix> same(static_cast<std::size_t>(k), t);
    const Matrix fa = apply_fa(a, t);
    const Matrix fused = aggregate(a, same, attention_weights(a, same));
    worst_same = std::max(worst_same, (fused - fa).cwiseAbs().maxCoeff());

    // Independent of Q.
    Aggregator other_q = a;
    other_q.query.value() = random_matrix(1, a.query.cols(), rng, -10.0, 10.0);
    const Matrix fused_q = aggregate(other_q, same, attention_weights(other_q, same));
    worst_q = std::max(worst_q, (fused_q - fused).cwiseAbs().maxCoeff());

    // One-hot gamma selects F_a of that client.
    std::vector<Matrix> distinct;
    for (Index j = 0; j < k; ++j) {
      distinct.push_back(random_matrix(cfg.text_prompt_len, cfg.d_text, rng, -2.0, 2.0));
    }
    const Index pick = i % k;
    RowVector onehot = RowVector::Zero(k);
    onehot(pick) = 1.0;
    const Matrix sel = aggregate(a, distinct, onehot);
    worst_onehot = std::max(
        worst_onehot, (sel - apply_fa(a, distinct[static_cast<std::size_t>(pick)])).cwiseAbs().maxCoeff());
  }
  const bool pass =
      worst_same < kCollapseTol && worst_q < kCollapseTol && worst_onehot < kCollapseTol;
  return {pass, fmt("100 aggregators: identical-prompt dev %.1e, Q-dependence %.1e (< %.0e), "
                    "one-hot dev %.1e (< %.0e)",
                    worst_same, worst_q, kCollapseTol, worst_onehot, kCollapseTol)};
}

// Shared small federated setup for criteria 4-6.

ExperimentConfig federated_config() {
  ExperimentConfig c = config_profile("toy");
  c.data.samples_per_class = 20;
  c.data.warmup.steps = 0;
  c.rounds = 5;
  c.seed = 4;
  return c;
}

// 4 ------------------------------------------------------------------------

Outcome freeze_contracts() {
  const ExperimentConfig cfg = federated_config();
  const BackboneParams backbone = build_backbone(cfg);
  const std::uint64_t backbone_before = backbone.content_hash();
  ExperimentSetup s = setup_experiment(cfg);
  InProcessTransport transport;
  std::vector<std::uint64_t> uploaded;
  std::vector<std::uint64_t> bundled;
  transport.set_observer([&](const Bytes& bytes) {
    const Frame f = decode_frame(bytes);
    if (f.type == MessageType::kLocalPrompts) {
      uploaded.push_back(PromptSet::from_tensors(f.tensors, cfg.model.depth).content_hash());
    } else if (f.type == MessageType::kAggregationBundle) {
      for (Index k = 0; k < cfg.clients; ++k) {
        bundled.push_back(PromptSet::from_tensors(f.tensors, cfg.model.depth,
                                                  "client." + std::to_string(k) + ".")
                              .content_hash());
      }
    }
  });
  std::size_t mismatches = 0;
  std::size_t checks = 0;
  const auto k = static_cast<std::size_t>(cfg.clients);
  for (Index r = 0; r < cfg.rounds; ++r) {
    uploaded.clear();
    bundled.clear();
    run_round(s.global, s.clients, backbone, cfg, transport);
    // Every bundle copy and every client's retained prompt equals its upload.
    for (std::size_t b = 0; b < bundled.size(); ++b) {
      ++checks;
      mismatches += bundled[b] != uploaded[b % k];
    }
    for (std::size_t j = 0; j < k; ++j) {
      ++checks;
      mismatches += s.clients[j].local.content_hash() != uploaded[j];
    }
  }
  const bool backbone_same = backbone.content_hash() == backbone_before;
  return {backbone_same && mismatches == 0 && checks > 0,
          fmt("R=%lld: backbone hash %s; %zu/%zu local-prompt hashes unchanged through stage 2",
              static_cast<long long>(cfg.rounds), backbone_same ? "unchanged" : "CHANGED",
              checks - mismatches, checks)};
}

// 5 ------------------------------------------------------------------------

Outcome communication_accounting() {
  const ExperimentConfig cfg = federated_config();
  const BackboneParams backbone = build_backbone(cfg);
  ExperimentSetup s = setup_experiment(cfg);
  InProcessTransport transport;
  const auto k = static_cast<std::size_t>(cfg.clients);
  const std::size_t pp = measure_payload(s.global.prompts);
  const std::size_t pa = measure_payload(s.global.aggregators);
  std::size_t bad = 0;
  for (Index r = 0; r < cfg.rounds; ++r) {
    const RoundMetrics m = run_round(s.global, s.clients, backbone, cfg, transport);
    bad += m.bytes_down_stage1 != k * pp;
    bad += m.bytes_up_stage1 != k * pp;
    bad += m.bytes_down_stage2 != k * (k * pp + pa);
    bad += m.bytes_up_stage2 != k * pa;
  }
  const PromptSet full = PromptSet::zeros(ModelConfig::full_scale());
  std::size_t text = 0;
  std::size_t vis = 0;
  for (const auto& t : full.text) text += 8 * static_cast<std::size_t>(t.size());
  for (const auto& t : full.visual) vis += 8 * static_cast<std::size_t>(t.size());
  const bool spot = text == 393216 && vis == 589824 && measure_payload(full) == text + vis;
  return {bad == 0 && spot,
          fmt("%lld rounds x 4 counters, %zu mismatches (payload P=%zu, A=%zu); full-scale "
              "PromptSet %zu + %zu bytes",
              static_cast<long long>(cfg.rounds), bad, pp, pa, text, vis)};
}

// 6 ------------------------------------------------------------------------

Outcome determinism() {
  namespace fs = std::filesystem;
  const ExperimentConfig cfg = federated_config();
  const fs::path a = fs::temp_directory_path() / "promptagg_accept_det_a";
  const fs::path b = fs::temp_directory_path() / "promptagg_accept_det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  // Two independent full runs, backbone included.
  run_experiment(cfg, {a});
  run_experiment(cfg, {b});
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  std::size_t same = 0;
  const char* files[] = {"metrics.jsonl", "global_prompts.ckpt", "aggregators.ckpt",
                         "backbone.ckpt", "summary.csv"};
  for (const char* f : files) {
    const std::string x = slurp(a / f);
    same += !x.empty() && x == slurp(b / f);
  }
  fs::remove_all(a);
  fs::remove_all(b);
  return {same == std::size(files),
          fmt("%zu/%zu artifacts bitwise identical across two runs", same, std::size(files))};
}

// 7 and 8 ------------------------------------------------------------------

struct E2eRuns {
  std::vector<Scalar> plan;
  std::vector<Scalar> baseline;
  std::vector<Scalar> no_kl;
  std::vector<Scalar> kl_prompt_diff;
  double e2e_seconds = 0.0;  // backbone plus PLAN and baseline runs
  std::string error;
};

ExperimentConfig e2e_config(int seed) {
  ExperimentConfig c = config_profile("toy");  // C=4, 100 samples/class, K=3, R=10
  c.seed = static_cast<std::uint64_t>(seed);
  c.held_out = seed % c.data.n_domains;
  return c;
}

const E2eRuns& e2e_runs() {
  static E2eRuns runs = [] {
    E2eRuns r;
    try {
      auto start = std::chrono::steady_clock::now();
      // One pretrained backbone serves every seed.
      const BackboneParams backbone = build_backbone(e2e_config(0));
      for (int s = 0; s < kSeeds; ++s) {
        ExperimentConfig cfg = e2e_config(s);
        const ExperimentResult plan = run_experiment(cfg, backbone);
        cfg.method = Method::avg_baseline;
        const ExperimentResult base = run_experiment(cfg, backbone);
        r.plan.push_back(plan.final_accuracy);
        r.baseline.push_back(base.final_accuracy);
        std::fprintf(stderr, "  seed %d: plan %.4f  avg_baseline %.4f\n", s, plan.final_accuracy,
                     base.final_accuracy);
        r.e2e_seconds = seconds_since(start);

        const auto t = std::chrono::steady_clock::now();
        cfg.method = Method::plan;
        cfg.train.alpha = 0.0;
        const ExperimentResult zero = run_experiment(cfg, backbone);
        r.no_kl.push_back(zero.final_accuracy);
        Scalar diff = 0.0;
        const TensorList x = plan.final_state.prompts.to_tensors();
        const TensorList y = zero.final_state.prompts.to_tensors();
        for (std::size_t i = 0; i < x.size(); ++i) {
          diff = std::max(diff, (x[i].value - y[i].value).cwiseAbs().maxCoeff());
        }
        r.kl_prompt_diff.push_back(diff);
        std::fprintf(stderr, "  seed %d: alpha=0 %.4f\n", s, zero.final_accuracy);
        start += std::chrono::steady_clock::now() - t;  // keep ablation time out of the budget
      }
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  }();
  return runs;
}

Outcome end_to_end() {
  const E2eRuns& r = e2e_runs();
  if (!r.error.empty()) return {false, "run failed: " + r.error};
  const Scalar plan = mean(r.plan);
  const Scalar base = mean(r.baseline);
  const Scalar sd = pooled_sd(r.plan, r.baseline);
  const bool a = plan >= kChance + kOverChance;
  const bool b = plan >= base - sd;
  const bool c = r.e2e_seconds < kE2eSeconds;
  return {a && b && c,
          fmt("PLAN mean %.4f [%s] (>= %.2f); avg_baseline mean %.4f [%s], pooled sd %.4f, "
              "PLAN - (baseline - sd) = %+.4f (>= 0); %.0f s (< %.0f s)",
              plan, join(r.plan).c_str(), kChance + kOverChance, base, join(r.baseline).c_str(),
              sd, plan - (base - sd), r.e2e_seconds, kE2eSeconds)};
}

Outcome kl_ablation() {
  const E2eRuns& r = e2e_runs();
  if (!r.error.empty()) return {false, "run failed: " + r.error};
  const Scalar with = mean(r.plan);
  const Scalar without = mean(r.no_kl);
  const Scalar sd = pooled_sd(r.plan, r.no_kl);
  const Scalar min_diff = *std::min_element(r.kl_prompt_diff.begin(), r.kl_prompt_diff.end());
  return {min_diff > 0.0 && with >= without - sd,
          fmt("alpha=1 mean %.4f, alpha=0 mean %.4f [%s], pooled sd %.4f, "
              "(alpha=1) - (alpha=0 - sd) = %+.4f (>= 0); min prompt diff %.2e (> 0)",
              with, without, join(r.no_kl).c_str(), sd, with - (without - sd), min_diff)};
}

// 9 ------------------------------------------------------------------------

Outcome codec_round_trip() {
  std::mt19937_64 rng(9);
  const ModelConfig configs[] = {ModelConfig::gradient_toy(), ModelConfig::desk()};
  std::size_t ok = 0;
  std::size_t truncations = 0;
  std::size_t rejected = 0;
  std::uniform_real_distribution<Scalar> sd(1e-3, 1e3);
  for (int i = 0; i < kRandomCases; ++i) {
    const ModelConfig& cfg = configs[i % 2];
    const PromptSet p = PromptSet::random(cfg, rng(), sd(rng));
    AggregatorInit init;
    init.stddev = sd(rng);
    init.fa_out_stddev = sd(rng);
    const AggregatorParams a = AggregatorParams::init(cfg, rng(), init);
    const Bytes pb = encode_frame({MessageType::kLocalPrompts, p.to_tensors()});
    const Bytes ab = encode_frame({MessageType::kLocalAggregators, a.to_tensors()});
    const bool p_ok =
        PromptSet::from_tensors(decode_frame(pb).tensors, cfg.depth).same_values(p) &&
        encode_frame(decode_frame(pb)) == pb;
    const bool a_ok = AggregatorParams::from_tensors(cfg, decode_frame(ab).tensors).same_values(a) &&
                      encode_frame(decode_frame(ab)) == ab;
    ok += p_ok && a_ok;
    // A few truncation points per frame, including every header byte.
    for (const Bytes* f : {&pb, &ab}) {
      std::vector<std::size_t> cuts = {0, 1, 4, 5, 8, 9, 10, f->size() / 2, f->size() - 1};
      cuts.push_back(std::uniform_int_distribution<std::size_t>(0, f->size() - 1)(rng));
      for (std::size_t n : cuts) {
        ++truncations;
        try {
          decode_frame(std::span(f->data(), n));
        } catch (const ProtocolError&) {
          ++rejected;
        }
      }
    }
  }
  return {ok == static_cast<std::size_t>(kRandomCases) && rejected == truncations,
          fmt("%zu/%d PromptSet+AggregatorParams pairs bitwise; %zu/%zu truncated frames "
              "rejected with ProtocolError",
              ok, kRandomCases, rejected, truncations)};
}

}  // namespace
}  // namespace promptagg

int main(int argc, char** argv) {
  using namespace promptagg;
  struct Entry {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Entry> all = {
      {1, "gradient suite", gradient_suite},
      {2, "normalization suite", normalization_suite},
      {3, "collapse identities", collapse_identities},
      {4, "freeze contracts", freeze_contracts},
      {5, "communication accounting", communication_accounting},
      {6, "determinism", determinism},
      {7, "end-to-end generalization", end_to_end},
      {8, "KL ablation ordering", kl_ablation},
      {9, "codec round-trip", codec_round_trip},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& e : all) {
    if (!only.empty() && !only.count(e.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = e.run();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    failed += !o.pass;
    std::printf("%s  criterion %d  %-26s %s  [%.1f s]\n", o.pass ? "PASS" : "FAIL", e.id, e.name,
                o.detail.c_str(), seconds_since(start));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
