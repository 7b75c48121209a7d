// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// promptagg: command-line experiment runner.
//
//   promptagg run     [--config NAME|FILE] [--set k=v]... [--method M] [--ablate F]...
//   promptagg eval    (--run DIR | --prompts FILE --backbone FILE) [--domains 0,2]
//   promptagg sweep   [--alpha 0,1] [--depth 2,4] [--prompt-len 4,8] [--rounds 10]
//   promptagg export-dataset --out FILE
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage,
// 3 unreadable or corrupt checkpoint. Output directories default to
// $PROMPTAGG_OUTPUT_ROOT (or ./runs).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "promptagg/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace promptagg;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kCorrupt = 3 };

struct ConfigArgs {
  std::string config = "toy";
  std::vector<std::string> overrides;
  std::string method;
  std::vector<std::string> ablations;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "profile name (toy, plan_toy, full) or JSON file")
        ->capture_default_str();
    cmd->add_option("--set", overrides, "override a field, e.g. train.alpha=0.5 (repeatable)");
    cmd->add_option("--method", method, "plan or avg_baseline");
    cmd->add_option("--ablate", ablations,
                    "disable_kl, disable_zsi, avg_text_agg, or avg_vis_agg (repeatable)");
    cmd->add_option("--seed", seed, "experiment seed");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = load_config(config);
    std::vector<std::string> all = overrides;
    if (!method.empty()) all.push_back("method=" + method);
    if (seed) all.push_back("seed=" + std::to_string(*seed));
    apply_overrides(cfg, all);
    for (const auto& a : ablations) apply_ablation(cfg, a);
    cfg.validate();
    return cfg;
  }
};

fs::path output_root() {
  const char* env = std::getenv("PROMPTAGG_OUTPUT_ROOT");
  return (env != nullptr && *env != '\0') ? fs::path(env) : fs::path("runs");
}

std::vector<Scalar> parse_scalars(const std::string& text, const char* flag) {
  std::vector<Scalar> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    Scalar v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) {
      throw ConfigError(std::string(flag) + ": '" + item + "' is not a number");
    }
    out.push_back(v);
  }
  return out;
}

std::vector<Index> parse_indices(const std::string& text, const char* flag) {
  std::vector<Index> out;
  for (Scalar v : parse_scalars(text, flag)) {
    if (v != static_cast<Scalar>(static_cast<Index>(v))) {
      throw ConfigError(std::string(flag) + ": " + std::to_string(v) + " is not an integer");
    }
    out.push_back(static_cast<Index>(v));
  }
  return out;
}

/// Warmed-up backbone for `cfg`, loaded from `path` when given.
BackboneParams obtain_backbone(const ExperimentConfig& cfg, const std::string& path) {
  if (path.empty()) {
    std::cerr << "building backbone...\n";
    return build_backbone(cfg);
  }
  const Checkpoint ckpt = read_checkpoint(path);
  BackboneParams b = BackboneParams::from_tensors(cfg.model, ckpt.tensors);
  b.freeze();
  return b;
}

void write_manifest(const fs::path& dir, const ExperimentConfig& cfg) {
  const json manifest = {
      {"config", json::parse(config_to_json(cfg))},
      {"config_hash", config_hash(cfg)},
      {"seed", cfg.seed},
      {"files",
       {{"config", "config.json"},
        {"metrics", "metrics.jsonl"},
        {"timing", "timing.jsonl"},
        {"summary", "summary.csv"},
        {"global_prompts", "global_prompts.ckpt"},
        {"aggregators", "aggregators.ckpt"},
        {"backbone", "backbone.ckpt"}}}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
}

Scalar total_wall(const ExperimentResult& r) {
  Scalar t = 0.0;
  for (const auto& m : r.rounds) t += m.wall_time_s;
  return t;
}

ExperimentResult run_one(const ExperimentConfig& cfg, const BackboneParams& backbone,
                         const fs::path& dir, bool dump_features, bool verbose) {
  OutputOptions out;
  out.dir = dir;
  out.dump_features = dump_features;
  ExperimentResult r = run_experiment(cfg, backbone, out);
  write_manifest(dir, cfg);
  if (verbose) {
    std::printf("zero-shot target accuracy %.4f\n", r.zero_shot_accuracy);
    for (const auto& m : r.rounds) {
      Scalar ce = 0.0;
      for (const auto& l : m.stage1) ce += l.ce / static_cast<Scalar>(m.stage1.size());
      std::printf("round %3lld  target_acc %.4f  stage1_ce %.4f  bytes %zu  %.2fs\n",
                  static_cast<long long>(m.round), m.target_accuracy, ce,
                  m.bytes_down_stage1 + m.bytes_up_stage1 + m.bytes_down_stage2 +
                      m.bytes_up_stage2,
                  m.wall_time_s);
    }
    std::printf("final target accuracy %.4f\n", r.final_accuracy);
    std::printf("total tensor bytes %zu (frames %zu bytes)\n", r.traffic.tensor_bytes,
                r.traffic.frame_bytes);
    std::printf("wall time %.2fs\n", total_wall(r));
    std::printf("output %s\n", dir.string().c_str());
  }
  return r;
}

int cmd_run(const ConfigArgs& args, const std::string& out_dir, const std::string& backbone_path,
            bool dump_features) {
  const ExperimentConfig cfg = args.resolve();
  const fs::path dir = out_dir.empty()
                           ? output_root() / (method_name(cfg.method) + "-" + config_hash(cfg))
                           : fs::path(out_dir);
  const BackboneParams backbone = obtain_backbone(cfg, backbone_path);
  run_one(cfg, backbone, dir, dump_features, true);
  return kOk;
}

int cmd_eval(const std::string& run_dir, std::string prompts_path, std::string backbone_path,
             const std::vector<std::string>& overrides, const std::string& domains_arg) {
  if (!run_dir.empty()) {
    if (prompts_path.empty()) prompts_path = (fs::path(run_dir) / "global_prompts.ckpt").string();
    if (backbone_path.empty()) backbone_path = (fs::path(run_dir) / "backbone.ckpt").string();
  }
  if (prompts_path.empty() || backbone_path.empty()) {
    throw ConfigError("eval needs --run or both --prompts and --backbone");
  }
  const Checkpoint pc = read_checkpoint(prompts_path);
  const Checkpoint bc = read_checkpoint(backbone_path);
  ExperimentConfig cfg = config_from_json(pc.config);
  apply_overrides(cfg, overrides);
  PromptSet prompts = PromptSet::from_tensors(pc.tensors, cfg.model.depth);
  BackboneParams backbone = BackboneParams::from_tensors(cfg.model, bc.tensors);
  backbone.freeze();

  const std::vector<DomainDataset> domains = experiment_domains(cfg);
  std::vector<Index> which = parse_indices(domains_arg, "--domains");
  if (which.empty()) {
    for (Index d = 0; d < static_cast<Index>(domains.size()); ++d) which.push_back(d);
  }
  Scalar sum = 0.0;
  for (Index d : which) {
    if (d < 0 || d >= static_cast<Index>(domains.size())) {
      throw ConfigError("--domains: no domain " + std::to_string(d));
    }
    const Scalar acc = evaluate(prompts, backbone, domains[static_cast<std::size_t>(d)]);
    sum += acc;
    std::printf("domain %lld%s accuracy %.17g\n", static_cast<long long>(d),
                d == cfg.held_out ? " (held out)" : "", acc);
  }
  std::printf("average accuracy %.17g\n", sum / static_cast<Scalar>(which.size()));
  return kOk;
}

struct SweepAxes {
  std::string alpha;
  std::string depth;
  std::string prompt_len;
  std::string rounds;
};

int cmd_sweep(const ConfigArgs& args, const SweepAxes& axes, const std::string& out_dir,
              const std::string& backbone_path) {
  const ExperimentConfig base = args.resolve();
  // An axis left unset sweeps only the configured value; an axis given as an
  // empty list empties the grid.
  auto axis_s = [](const std::string& text, const char* flag, Scalar dflt) {
    return text == "-" ? std::vector<Scalar>{dflt} : parse_scalars(text, flag);
  };
  auto axis_i = [](const std::string& text, const char* flag, Index dflt) {
    return text == "-" ? std::vector<Index>{dflt} : parse_indices(text, flag);
  };
  const auto alphas = axis_s(axes.alpha, "--alpha", base.train.alpha);
  const auto depths = axis_i(axes.depth, "--depth", base.model.depth);
  const auto lens = axis_i(axes.prompt_len, "--prompt-len", base.model.text_prompt_len);
  const auto rounds = axis_i(axes.rounds, "--rounds", base.rounds);
  if (alphas.empty() || depths.empty() || lens.empty() || rounds.empty()) {
    throw ConfigError("sweep grid is empty");
  }
  const fs::path root =
      out_dir.empty() ? output_root() / ("sweep-" + config_hash(base)) : fs::path(out_dir);

  std::map<std::string, BackboneParams> backbones;  // keyed by model JSON
  std::printf("%-5s %-8s %-6s %-10s %-6s %-14s %-12s %s\n", "cell", "alpha", "depth",
              "prompt_len", "rounds", "final_acc", "bytes", "dir");
  std::size_t cell = 0;
  for (Scalar a : alphas) {
    for (Index d : depths) {
      for (Index m : lens) {
        for (Index r : rounds) {
          ExperimentConfig cfg = base;
          cfg.train.alpha = a;
          cfg.model.depth = d;
          cfg.model.text_prompt_len = m;
          cfg.model.vis_prompt_len = m;
          cfg.rounds = r;
          cfg.validate();
          ExperimentConfig model_only;
          model_only.model = cfg.model;
          const std::string key = config_to_json(model_only);
          auto it = backbones.find(key);
          if (it == backbones.end()) {
            // A supplied backbone only fits cells whose model matches it.
            const bool reuse = !backbone_path.empty() && cfg.model == base.model;
            it = backbones.emplace(key, obtain_backbone(cfg, reuse ? backbone_path : "")).first;
          }
          const fs::path dir = root / ("cell-" + std::to_string(cell) + "-" + config_hash(cfg));
          const ExperimentResult res = run_one(cfg, it->second, dir, false, false);
          std::printf("%-5zu %-8g %-6lld %-10lld %-6lld %-14.6f %-12zu %s\n", cell, a,
                      static_cast<long long>(d), static_cast<long long>(m),
                      static_cast<long long>(r), res.final_accuracy, res.traffic.tensor_bytes,
                      dir.string().c_str());
          std::fflush(stdout);
          ++cell;
        }
      }
    }
  }
  return kOk;
}

int cmd_export(const ConfigArgs& args, const std::string& out) {
  const ExperimentConfig cfg = args.resolve();
  if (out.empty()) throw ConfigError("export-dataset needs --out");
  TensorList tensors;
  for (const auto& d : experiment_domains(cfg)) {
    for (auto& t : d.to_tensors("domain." + std::to_string(d.domain_id) + ".")) {
      tensors.push_back(std::move(t));
    }
  }
  write_checkpoint(out, {kBlobVersion, config_to_json(cfg), tensors});
  std::printf("wrote %lld domains to %s\n", static_cast<long long>(cfg.data.n_domains),
              out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated prompt learning with attention-based prompt aggregation"};
  app.require_subcommand(1);

  ConfigArgs run_args;
  std::string run_out;
  std::string run_backbone;
  bool dump_features = false;
  auto* run = app.add_subcommand("run", "run one experiment");
  run_args.attach(run);
  run->add_option("--out", run_out, "output directory");
  run->add_option("--backbone", run_backbone, "reuse a warmed-up backbone checkpoint");
  run->add_flag("--dump-features", dump_features, "write target-domain image features");

  std::string eval_run;
  std::string eval_prompts;
  std::string eval_backbone;
  std::vector<std::string> eval_overrides;
  std::string eval_domains;
  auto* eval = app.add_subcommand("eval", "evaluate saved global prompts on every domain");
  eval->add_option("--run", eval_run, "run directory");
  eval->add_option("--prompts", eval_prompts, "global prompt checkpoint");
  eval->add_option("--backbone", eval_backbone, "backbone checkpoint");
  eval->add_option("--set", eval_overrides, "override the dataset config (repeatable)");
  eval->add_option("--domains", eval_domains, "comma-separated domain ids (default all)");

  ConfigArgs sweep_args;
  SweepAxes axes{"-", "-", "-", "-"};
  std::string sweep_out;
  std::string sweep_backbone;
  auto* sweep = app.add_subcommand("sweep", "cartesian grid over alpha, depth, prompt length, R");
  sweep_args.attach(sweep);
  sweep->add_option("--alpha", axes.alpha, "comma-separated alpha values");
  sweep->add_option("--depth", axes.depth, "comma-separated prompt depths");
  sweep->add_option("--prompt-len", axes.prompt_len, "comma-separated prompt lengths");
  sweep->add_option("--rounds", axes.rounds, "comma-separated round counts");
  sweep->add_option("--out", sweep_out, "output root of the sweep");
  sweep->add_option("--backbone", sweep_backbone, "backbone checkpoint for the base model");

  ConfigArgs export_args;
  std::string export_out;
  auto* exp = app.add_subcommand("export-dataset", "write every experiment domain to a blob");
  export_args.attach(exp);
  exp->add_option("--out", export_out, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*run) return cmd_run(run_args, run_out, run_backbone, dump_features);
    if (*eval) return cmd_eval(eval_run, eval_prompts, eval_backbone, eval_overrides, eval_domains);
    if (*sweep) return cmd_sweep(sweep_args, axes, sweep_out, sweep_backbone);
    if (*exp) return cmd_export(export_args, export_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ProtocolError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCorrupt;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
