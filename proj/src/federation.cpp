// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/federation.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "promptagg/config.hpp"

namespace promptagg {

using nlohmann::json;

void ExperimentConfig::validate() const {
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  try {
    train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (data.n_domains < 2 || data.n_domains > 4) {
    throw ConfigError("data.n_domains must be in [2, 4]");
  }
  if (clients != data.n_domains - 1) {
    throw ConfigError("clients must equal data.n_domains - 1 (one client per source domain)");
  }
  if (held_out < 0 || held_out >= data.n_domains) {
    throw ConfigError("held_out must name one of the " + std::to_string(data.n_domains) +
                      " domains");
  }
  if (data.samples_per_class < 1) throw ConfigError("data.samples_per_class must be >= 1");
  if (data.warmup.steps < 0) throw ConfigError("data.warmup.steps must be >= 0");
  if (data.warmup.steps > 0 && (data.warmup_domains < 1 || data.warmup_samples_per_class < 1)) {
    throw ConfigError("data.warmup_domains and data.warmup_samples_per_class must be >= 1");
  }
  if (!(prompt_init_std >= 0.0)) throw ConfigError("prompt_init_std must be >= 0");
  if (!(aggregator_init.reduction > 0.0 && aggregator_init.reduction <= 1.0)) {
    throw ConfigError("aggregator.reduction must be in (0, 1]");
  }
}

AggregationFlags ExperimentConfig::aggregation_flags() const {
  if (method == Method::avg_baseline) return {false, false};
  return {!ablations.avg_text_agg, !ablations.avg_vis_agg};
}

TensorList GlobalState::to_tensors() const {
  TensorList out = prompts.to_tensors("prompts.");
  for (auto& t : aggregators.to_tensors("aggregators.")) out.push_back(std::move(t));
  return out;
}

std::uint64_t GlobalState::content_hash() const { return promptagg::content_hash(to_tensors()); }

std::size_t measure_payload(const PromptSet& prompts) {
  return tensor_data_bytes(prompts.to_tensors());
}

std::size_t measure_payload(const AggregatorParams& aggs) {
  return tensor_data_bytes(aggs.to_tensors());
}

std::size_t measure_payload(const AggregatorParams& aggs, const AggregationFlags& flags) {
  return tensor_data_bytes(aggs.to_tensors(flags.text_attention, flags.visual_attention));
}

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words = {static_cast<std::uint32_t>(base),
                                      static_cast<std::uint32_t>(base >> 32)};
  for (std::uint64_t p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

Scalar evaluate(const PromptSet& global, const BackboneParams& backbone,
                const DomainDataset& target) {
  if (target.size() == 0) throw DataError("evaluate: empty target dataset");
  return accuracy(predict(backbone, global, target.images), target.labels);
}

namespace {

// Seed purposes.
enum : std::uint64_t {
  kSeedBackbone = 1,
  kSeedData = 2,
  kSeedPrompts = 3,
  kSeedAggregators = 4,
  kSeedWarmupSpecs = 5,
  kSeedWarmupData = 6,
  kSeedWarmupSteps = 7,
  kSeedClient = 8,
  kSeedStage1 = 9,
  kSeedStage2 = 10,
};

Scalar entropy(const RowVector& p) {
  Scalar h = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    if (p(i) > 0.0) h -= p(i) * std::log(p(i));
  }
  return h;
}

std::string client_prefix(std::size_t k) { return "client." + std::to_string(k) + "."; }

/// Copies the enabled sides of `src` into `dst`.
void merge_sides(AggregatorParams& dst, const AggregatorParams& src, const AggregationFlags& f) {
  if (f.text_attention) dst.text = src.text;
  if (f.visual_attention) dst.visual = src.visual;
}

std::vector<DomainSpec> experiment_specs(const ExperimentConfig& cfg) {
  auto specs = default_domain_specs(cfg.model, cfg.data.samples_per_class, cfg.data.pattern_seed);
  specs.resize(static_cast<std::size_t>(cfg.data.n_domains));
  return specs;
}

}  // namespace

RoundMetrics run_round(GlobalState& global, std::vector<ClientState>& clients,
                       const BackboneParams& backbone, const ExperimentConfig& cfg,
                       InProcessTransport& transport, const FaultHook& fault) {
  const auto start = std::chrono::steady_clock::now();
  if (static_cast<Index>(clients.size()) != cfg.clients) {
    throw ConfigError("run_round: expected " + std::to_string(cfg.clients) + " clients, got " +
                      std::to_string(clients.size()));
  }
  const std::size_t k_count = clients.size();
  const Index depth = global.prompts.depth();
  const Index r = global.round + 1;
  const AggregationFlags flags = cfg.aggregation_flags();
  const bool stage2 = flags.text_attention || flags.visual_attention;
  auto hook = [&fault](RoundStep step, Index client) {
    if (fault) fault(step, client);
  };
  auto bytes = [&transport](MessageType t) { return transport.counter(t).tensor_bytes; };
  const std::size_t down1 = bytes(MessageType::kGlobalPrompts);
  const std::size_t up1 = bytes(MessageType::kLocalPrompts);
  const std::size_t down2 = bytes(MessageType::kAggregationBundle);
  const std::size_t up2 = bytes(MessageType::kLocalAggregators);

  RoundMetrics m;
  m.round = r;

  // (1) Broadcast global prompts.
  std::vector<PromptSet> received(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    hook(RoundStep::broadcast_globals, static_cast<Index>(k));
    const Frame got = transport.send({MessageType::kGlobalPrompts, global.prompts.to_tensors()});
    received[k] = PromptSet::from_tensors(got.tensors, depth);
  }

  // (2) Reference-based local prompt learning.
  const ReferenceMode mode = (r == 1 && !cfg.ablations.disable_zsi)
                                 ? ReferenceMode::zero_shot
                                 : ReferenceMode::global_prompts;
  TrainConfig tc = cfg.train;
  if (cfg.ablations.disable_kl) tc.alpha = 0.0;
  std::vector<PromptSet> locals(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    hook(RoundStep::local_training, static_cast<Index>(k));
    auto res = local_prompt_round(clients[k].data.train, backbone, received[k], mode, tc,
                                  derive_seed(clients[k].seed, {kSeedStage1, std::uint64_t(r)}));
    ClientLosses l;
    for (const auto& s : res.reports) {
      l.ce += s.ce_loss;
      l.kl += s.kl_loss;
      l.total += s.total_loss;
    }
    const auto n = static_cast<Scalar>(res.reports.size());
    m.stage1.push_back({l.ce / n, l.kl / n, l.total / n});
    locals[k] = std::move(res.prompts);
  }

  // (3) Upload local prompts; the server waits for all K.
  std::vector<PromptSet> uploaded(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    hook(RoundStep::upload_locals, static_cast<Index>(k));
    const Frame got = transport.send({MessageType::kLocalPrompts, locals[k].to_tensors()});
    uploaded[k] = PromptSet::from_tensors(got.tensors, depth);
  }

  AggregatorParams new_aggs = global.aggregators;
  std::vector<AggregatorParams> client_aggs(k_count);
  if (stage2) {
    // (4) Broadcast all local prompts plus the current aggregators.
    TensorList bundle;
    for (std::size_t k = 0; k < k_count; ++k) {
      for (auto& t : uploaded[k].to_tensors(client_prefix(k))) bundle.push_back(std::move(t));
    }
    for (auto& t : global.aggregators.to_tensors(flags.text_attention, flags.visual_attention,
                                                 "agg.")) {
      bundle.push_back(std::move(t));
    }
    std::vector<AggregatorParams> trained(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
      hook(RoundStep::broadcast_bundle, static_cast<Index>(k));
      const Frame got = transport.send({MessageType::kAggregationBundle, bundle});
      std::vector<PromptSet> view;
      for (std::size_t j = 0; j < k_count; ++j) {
        view.push_back(PromptSet::from_tensors(got.tensors, depth, client_prefix(j)));
      }
      const AggregatorParams aggs = AggregatorParams::from_tensors(cfg.model, got.tensors, "agg.");

      // (5) Local aggregator training on frozen prompts.
      hook(RoundStep::aggregator_training, static_cast<Index>(k));
      auto res = train_aggregators_locally(
          clients[k].data.train, backbone, view, aggs, tc,
          derive_seed(clients[k].seed, {kSeedStage2, std::uint64_t(r)}), flags);
      Scalar ce = 0.0;
      for (const auto& s : res.reports) ce += s.ce_loss;
      m.stage2_ce.push_back(ce / static_cast<Scalar>(res.reports.size()));
      trained[k] = std::move(res.aggregators);
    }

    // (6) Upload aggregators.
    std::vector<AggregatorParams> received_aggs;
    for (std::size_t k = 0; k < k_count; ++k) {
      hook(RoundStep::upload_aggregators, static_cast<Index>(k));
      const Frame got = transport.send(
          {MessageType::kLocalAggregators,
           trained[k].to_tensors(flags.text_attention, flags.visual_attention)});
      received_aggs.push_back(AggregatorParams::from_tensors(cfg.model, got.tensors));
      client_aggs[k] = global.aggregators;
      merge_sides(client_aggs[k], trained[k], flags);
    }
    hook(RoundStep::server_update, -1);
    merge_sides(new_aggs, fedavg_aggregators(received_aggs), flags);
  } else {
    hook(RoundStep::server_update, -1);
    for (std::size_t k = 0; k < k_count; ++k) client_aggs[k] = clients[k].aggregators;
  }

  // (7) Server-side aggregation with the averaged aggregators.
  AggregationTrace trace;
  PromptSet new_prompts = aggregate_promptset(uploaded, new_aggs, flags, &trace);
  for (const auto& g : trace.text_gamma) m.text_gamma_entropy.push_back(entropy(g));
  for (const auto& g : trace.visual_gamma) m.visual_gamma_entropy.push_back(entropy(g));

  m.bytes_down_stage1 = bytes(MessageType::kGlobalPrompts) - down1;
  m.bytes_up_stage1 = bytes(MessageType::kLocalPrompts) - up1;
  m.bytes_down_stage2 = bytes(MessageType::kAggregationBundle) - down2;
  m.bytes_up_stage2 = bytes(MessageType::kLocalAggregators) - up2;

  // Commit.
  global.prompts = std::move(new_prompts);
  global.aggregators = std::move(new_aggs);
  global.round = r;
  for (std::size_t k = 0; k < k_count; ++k) {
    clients[k].local = std::move(locals[k]);
    clients[k].aggregators = std::move(client_aggs[k]);
  }
  m.wall_time_s =
      std::chrono::duration<Scalar>(std::chrono::steady_clock::now() - start).count();
  return m;
}

std::vector<DomainDataset> experiment_domains(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::uint64_t seed = derive_seed(cfg.seed, {kSeedData});
  std::vector<DomainDataset> out;
  for (const auto& s : experiment_specs(cfg)) out.push_back(generate_domain(cfg.model, s, seed));
  return out;
}

ExperimentSetup setup_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentSetup s;
  s.split = leave_one_out(cfg.model, experiment_specs(cfg), cfg.held_out,
                          derive_seed(cfg.seed, {kSeedData}));
  const AggregatorParams agg0 = AggregatorParams::init(
      cfg.model, derive_seed(cfg.seed, {kSeedAggregators}), cfg.aggregator_init);
  for (std::size_t k = 0; k < s.split.clients.size(); ++k) {
    ClientState c;
    c.id = static_cast<Index>(k);
    c.data = s.split.clients[k];
    c.aggregators = agg0;
    c.seed = derive_seed(cfg.seed, {kSeedClient, k});
    s.clients.push_back(std::move(c));
  }
  s.global.prompts = PromptSet::random(cfg.model, derive_seed(cfg.seed, {kSeedPrompts}),
                                       cfg.prompt_init_std);
  s.global.aggregators = agg0;
  return s;
}

BackboneParams build_backbone(const ExperimentConfig& cfg) {
  cfg.validate();
  BackboneParams backbone =
      BackboneParams::init(cfg.model, derive_seed(cfg.seed, {kSeedBackbone}));
  if (cfg.data.warmup.steps == 0) return backbone;
  const auto warm_specs = warmup_domain_specs(cfg.model, cfg.data.warmup_domains,
                                              cfg.data.warmup_samples_per_class,
                                              derive_seed(cfg.seed, {kSeedWarmupSpecs}),
                                              cfg.data.pattern_seed);
  std::vector<DomainDataset> parts;
  for (const auto& s : warm_specs) {
    parts.push_back(generate_domain(cfg.model, s, derive_seed(cfg.seed, {kSeedWarmupData})));
  }
  const std::vector<DomainDataset> check = experiment_domains(cfg);
  WarmupOptions opts = cfg.data.warmup;
  opts.seed = derive_seed(cfg.seed, {kSeedWarmupSteps, cfg.data.warmup.seed});
  return warmup_backbone(std::move(backbone), concatenate(parts), opts, check);
}

std::string metrics_json(const RoundMetrics& m) {
  json stage1 = json::array();
  for (const auto& l : m.stage1) stage1.push_back({{"ce", l.ce}, {"kl", l.kl}, {"total", l.total}});
  json j = {{"round", m.round},
            {"stage1", stage1},
            {"stage2_ce", m.stage2_ce},
            {"text_gamma_entropy", m.text_gamma_entropy},
            {"visual_gamma_entropy", m.visual_gamma_entropy},
            {"bytes_down_stage1", m.bytes_down_stage1},
            {"bytes_up_stage1", m.bytes_up_stage1},
            {"bytes_down_stage2", m.bytes_down_stage2},
            {"bytes_up_stage2", m.bytes_up_stage2},
            {"target_accuracy", m.target_accuracy}};
  return j.dump();
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

Scalar mean_of(const std::vector<ClientLosses>& v, Scalar ClientLosses::*field) {
  Scalar s = 0.0;
  for (const auto& x : v) s += x.*field;
  return v.empty() ? 0.0 : s / static_cast<Scalar>(v.size());
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const BackboneParams& backbone,
                                const OutputOptions& out) {
  cfg.validate();
  if (!(backbone.config == cfg.model)) {
    throw ConfigError("backbone was built for a different model config");
  }
  ExperimentSetup setup = setup_experiment(cfg);
  const DomainSplit& split = setup.split;
  GlobalState& global = setup.global;
  std::vector<ClientState>& clients = setup.clients;

  ExperimentResult result;
  result.backbone_hash = backbone.content_hash();
  result.zero_shot_accuracy =
      accuracy(zero_shot_distribution(backbone, split.target.images), split.target.labels);

  std::ofstream metrics;
  std::ofstream timing;
  if (!out.dir.empty()) {
    std::filesystem::create_directories(out.dir);
    write_text(out.dir / "config.json", config_to_json(cfg, 2) + "\n");
    metrics.open(out.dir / "metrics.jsonl", std::ios::binary);
    timing.open(out.dir / "timing.jsonl", std::ios::binary);
  }

  InProcessTransport transport;
  for (Index r = 0; r < cfg.rounds; ++r) {
    RoundMetrics m = run_round(global, clients, backbone, cfg, transport);
    m.target_accuracy = evaluate(global.prompts, backbone, split.target);
    if (metrics.is_open()) {
      metrics << metrics_json(m) << "\n";
      metrics.flush();
      timing << json{{"round", m.round}, {"wall_time_s", m.wall_time_s}}.dump() << "\n";
    }
    result.rounds.push_back(std::move(m));
  }
  result.final_state = global;
  result.final_accuracy = result.rounds.back().target_accuracy;
  result.traffic = transport.total();
  if (out.keep_frame_log) result.frame_log = transport.log();

  if (!out.dir.empty()) {
    const std::string cfg_json = config_to_json(cfg);
    write_checkpoint(out.dir / "global_prompts.ckpt",
                     {kBlobVersion, cfg_json, global.prompts.to_tensors()});
    write_checkpoint(out.dir / "aggregators.ckpt",
                     {kBlobVersion, cfg_json, global.aggregators.to_tensors()});
    write_checkpoint(out.dir / "backbone.ckpt", {kBlobVersion, cfg_json, backbone.to_tensors()});

    std::ostringstream csv;
    csv << "round,target_accuracy,stage1_ce,stage1_kl,stage1_total,bytes_down_stage1,"
           "bytes_up_stage1,bytes_down_stage2,bytes_up_stage2\n";
    csv.precision(17);
    for (const auto& m : result.rounds) {
      csv << m.round << ',' << m.target_accuracy << ',' << mean_of(m.stage1, &ClientLosses::ce)
          << ',' << mean_of(m.stage1, &ClientLosses::kl) << ','
          << mean_of(m.stage1, &ClientLosses::total) << ',' << m.bytes_down_stage1 << ','
          << m.bytes_up_stage1 << ',' << m.bytes_down_stage2 << ',' << m.bytes_up_stage2 << '\n';
    }
    write_text(out.dir / "summary.csv", csv.str());

    if (out.dump_features) {
      Tape tape;
      PromptSet fixed = global.prompts;
      fixed.set_trainable(false);
      const auto vp = prompt_leaves(tape, fixed.visual);
      const Matrix feats = encode_images(tape, backbone, vp, split.target.images).value();
      Matrix labels(split.target.size(), 1);
      for (Index i = 0; i < split.target.size(); ++i) {
        labels(i, 0) = static_cast<Scalar>(split.target.labels[static_cast<std::size_t>(i)]);
      }
      write_checkpoint(out.dir / "features.ckpt",
                       {kBlobVersion, cfg_json, {{"features", feats}, {"labels", labels}}});
    }
  }
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const OutputOptions& out) {
  return run_experiment(cfg, build_backbone(cfg), out);
}

}  // namespace promptagg
