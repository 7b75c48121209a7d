// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Server/client orchestration of a federated prompt-learning experiment.
// Each round has two stages:
//
//   stage 1  server → clients: global prompts
//            clients train local prompts (CE + alpha·KL to the reference)
//            clients → server: local prompts
//   stage 2  server → clients: all K local prompt sets + aggregators
//            clients train aggregators on the aggregated-prompt CE
//            clients → server: aggregators
//   close    server averages aggregators and aggregates new global prompts
//
// The global state changes only at the close of a round.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "promptagg/aggregation.hpp"
#include "promptagg/dataset.hpp"
#include "promptagg/encoder.hpp"
#include "promptagg/local_training.hpp"
#include "promptagg/transport.hpp"

namespace promptagg {

enum class Method { plan, avg_baseline };

struct Ablations {
  bool disable_kl = false;    // alpha forced to 0
  bool disable_zsi = false;   // no zero-shot reference in round 1 (alpha 0 there)
  bool avg_text_agg = false;  // equal-weight mean instead of the text aggregator
  bool avg_vis_agg = false;   // equal-weight mean instead of the visual aggregator
};

struct DataConfig {
  Index n_domains = 4;
  Index samples_per_class = 100;
  std::uint64_t pattern_seed = 1234;
  Index warmup_domains = 32;
  Index warmup_samples_per_class = 10;
  WarmupOptions warmup;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  AggregatorInit aggregator_init;
  Scalar prompt_init_std = 0.02;
  Index clients = 3;  // K; must equal n_domains − 1
  Index rounds = 10;  // R
  Index held_out = 0;
  Method method = Method::plan;
  Ablations ablations;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  AggregationFlags aggregation_flags() const;
};

struct ClientState {
  Index id = 0;
  ClientData data;
  PromptSet local;
  AggregatorParams aggregators;
  std::uint64_t seed = 0;
};

struct GlobalState {
  PromptSet prompts;
  AggregatorParams aggregators;
  Index round = 0;  // rounds completed

  TensorList to_tensors() const;
  std::uint64_t content_hash() const;
};

struct ClientLosses {
  Scalar ce = 0.0;
  Scalar kl = 0.0;
  Scalar total = 0.0;
};

struct RoundMetrics {
  Index round = 0;  // 1-based
  std::vector<ClientLosses> stage1;  // mean over local steps, per client
  std::vector<Scalar> stage2_ce;     // mean over aggregator steps, per client
  std::vector<Scalar> text_gamma_entropy;    // per block, server-side aggregation
  std::vector<Scalar> visual_gamma_entropy;  // per block
  std::size_t bytes_down_stage1 = 0;
  std::size_t bytes_up_stage1 = 0;
  std::size_t bytes_down_stage2 = 0;
  std::size_t bytes_up_stage2 = 0;
  Scalar wall_time_s = 0.0;
  Scalar target_accuracy = 0.0;
};

/// Exact tensor-data size (Σ numel · 8) of what goes on the wire.
std::size_t measure_payload(const PromptSet& prompts);
std::size_t measure_payload(const AggregatorParams& aggs);
std::size_t measure_payload(const AggregatorParams& aggs, const AggregationFlags& flags);

enum class RoundStep {
  broadcast_globals = 1,
  local_training,
  upload_locals,
  broadcast_bundle,
  aggregator_training,
  upload_aggregators,
  server_update,
};

/// Called before each step; throwing aborts the round.
using FaultHook = std::function<void(RoundStep step, Index client)>;

/// One full round. Returns metrics without target accuracy (see evaluate).
/// On any exception `global` and `clients` are left unchanged.
RoundMetrics run_round(GlobalState& global, std::vector<ClientState>& clients,
                       const BackboneParams& backbone, const ExperimentConfig& cfg,
                       InProcessTransport& transport, const FaultHook& fault = {});

/// Accuracy of the global prompts on `target`; ties go to the lowest class.
Scalar evaluate(const PromptSet& global, const BackboneParams& backbone,
                const DomainDataset& target);

/// Deterministic per-purpose seed derived from the experiment seed.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts);

struct ExperimentSetup {
  DomainSplit split;
  GlobalState global;
  std::vector<ClientState> clients;
};

/// Every experiment domain in full, in domain order, generated exactly as the
/// experiment generates them (the held-out target is bitwise identical).
std::vector<DomainDataset> experiment_domains(const ExperimentConfig& cfg);

/// Seeded datasets, clients, initial prompts, and aggregators for `cfg`.
ExperimentSetup setup_experiment(const ExperimentConfig& cfg);

/// Seeded backbone init plus warmup on the extra domains, checked on every
/// experiment domain.
BackboneParams build_backbone(const ExperimentConfig& cfg);

struct ExperimentResult {
  std::vector<RoundMetrics> rounds;
  GlobalState final_state;
  Scalar zero_shot_accuracy = 0.0;  // prompt-free backbone on the target
  Scalar final_accuracy = 0.0;
  std::uint64_t backbone_hash = 0;
  TrafficCounter traffic;
  std::vector<FrameRecord> frame_log;
};

struct OutputOptions {
  std::filesystem::path dir;  // empty: no files written
  bool dump_features = false;
  bool keep_frame_log = false;
};

/// Builds datasets and clients, runs all rounds, evaluates after each, and
/// writes outputs. `backbone` must already be warmed up and frozen.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const BackboneParams& backbone,
                                const OutputOptions& out = {});
ExperimentResult run_experiment(const ExperimentConfig& cfg, const OutputOptions& out = {});

/// JSON line of the deterministic metric fields (wall time excluded).
std::string metrics_json(const RoundMetrics& m);

}  // namespace promptagg
