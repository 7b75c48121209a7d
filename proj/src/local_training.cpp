// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/local_training.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "promptagg/losses.hpp"
#include "promptagg/optim.hpp"

namespace promptagg {

void TrainConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
}

std::vector<std::vector<Index>> minibatches(Index n, Index batch_size, std::uint64_t seed,
                                            Index epoch) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0xba7c4u};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Index>> out;
  for (Index at = 0; at < n; at += batch_size) {
    const Index end = std::min(n, at + batch_size);
    out.emplace_back(order.begin() + at, order.begin() + end);
  }
  return out;
}

Matrix reference_distribution(const BackboneParams& backbone, const PromptSet& global,
                              ReferenceMode mode, const Matrix& images) {
  if (mode == ReferenceMode::zero_shot) return zero_shot_distribution(backbone, images);
  return predict(backbone, global, images);
}

Var prompt_learning_loss(Tape& tape, const BackboneParams& backbone, const PromptSet& local,
                         const Matrix& images, std::span<const Index> labels,
                         const Matrix& reference, Scalar alpha, LocalStepReport* report) {
  const auto tp = prompt_leaves(tape, local.text);
  const auto vp = prompt_leaves(tape, local.visual);
  Var w = encode_text(tape, backbone, tp, class_token_sequences(backbone.config));
  Var f = encode_images(tape, backbone, vp, images);
  Var probs = classify(w, f, backbone.config.tau);
  Var ce = cross_entropy(probs, labels);
  bool clamped = false;
  Var total = ce;
  Scalar kl_value = 0.0;
  if (alpha > 0.0) {
    Var kl = kl_divergence(reference, probs, &clamped);
    kl_value = kl.value()(0, 0);
    total = add(ce, scale(kl, alpha));
  } else {
    kl_value = kl_divergence(reference, probs.value(), &clamped);
  }
  if (report) {
    report->ce_loss = ce.value()(0, 0);
    report->kl_loss = kl_value;
    report->total_loss = report->ce_loss + alpha * kl_value;
    report->kl_clamped = clamped;
  }
  return total;
}

LocalRoundResult local_prompt_round(const DomainDataset& data, const BackboneParams& backbone,
                                    const PromptSet& global, ReferenceMode mode,
                                    const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (data.size() == 0) throw DataError("local_prompt_round: empty client dataset");
  LocalRoundResult result;
  result.prompts = global;
  PromptSet& local = result.prompts;
  local.set_trainable(true);
  local.zero_grad();

  std::vector<Tensor*> params;
  for (Tensor& t : local.text) params.push_back(&t);
  for (Tensor& t : local.visual) params.push_back(&t);

  Index seen = 0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& rows : minibatches(data.size(), cfg.batch_size, seed, epoch)) {
      const DomainDataset batch = data.subset(rows);
      const Matrix ref = reference_distribution(backbone, global, mode, batch.images);
      LocalStepReport report;
      Tape tape;
      Var loss = prompt_learning_loss(tape, backbone, local, batch.images, batch.labels, ref,
                                      cfg.alpha, &report);
      tape.backward(loss);
      sgd_step(params, cfg.lr);
      seen += batch.size();
      report.samples_seen = seen;
      result.reports.push_back(report);
    }
  }
  local.set_trainable(false);
  return result;
}

}  // namespace promptagg
