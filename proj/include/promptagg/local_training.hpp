// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reference-based prompt learning on one client. Local prompts start from
// the global prompts and minimize
//
//   L = CE(p_local, y) + alpha · KL(p_ref || p_local),
//
// where p_ref comes from the fixed global prompts (or from the prompt-free
// backbone in the first round) and carries no gradient.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "promptagg/dataset.hpp"
#include "promptagg/encoder.hpp"

namespace promptagg {

enum class OptimizerKind { sgd };

struct TrainConfig {
  Scalar alpha = 1.0;
  Scalar lr = 0.0015;
  /// Learning rate of aggregator training; negative means "same as lr".
  Scalar aggregator_lr = -1.0;
  Index batch_size = 32;
  Index epochs = 1;
  OptimizerKind optimizer = OptimizerKind::sgd;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  Scalar effective_aggregator_lr() const { return aggregator_lr < 0.0 ? lr : aggregator_lr; }
};

enum class ReferenceMode { global_prompts, zero_shot };

struct LocalStepReport {
  Scalar ce_loss = 0.0;
  Scalar kl_loss = 0.0;
  Scalar total_loss = 0.0;  // ce_loss + alpha·kl_loss
  Index samples_seen = 0;   // cumulative within the round
  bool kl_clamped = false;
};

/// Reference distribution for `images`, computed without gradients.
Matrix reference_distribution(const BackboneParams& backbone, const PromptSet& global,
                              ReferenceMode mode, const Matrix& images);

/// L^k on one minibatch with trainable `local` prompts recorded on `tape`.
/// Fills `report` when given. The KL term is left out of the graph when
/// alpha == 0 but its value is still reported.
Var prompt_learning_loss(Tape& tape, const BackboneParams& backbone, const PromptSet& local,
                         const Matrix& images, std::span<const Index> labels,
                         const Matrix& reference, Scalar alpha,
                         LocalStepReport* report = nullptr);

struct LocalRoundResult {
  PromptSet prompts;
  std::vector<LocalStepReport> reports;  // one per minibatch step
};

/// E epochs of minibatch SGD over `data`, shuffled by `seed`. The inputs are
/// not modified.
LocalRoundResult local_prompt_round(const DomainDataset& data, const BackboneParams& backbone,
                                    const PromptSet& global, ReferenceMode mode,
                                    const TrainConfig& cfg, std::uint64_t seed);

/// Minibatch row order for one epoch: a seeded shuffle cut into batches
/// (the last may be short).
std::vector<std::vector<Index>> minibatches(Index n, Index batch_size, std::uint64_t seed,
                                            Index epoch);

}  // namespace promptagg
