// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Attention-based prompt aggregation. For one block and one modality, K
// local prompt matrices T^k (m×d) are flattened to x_k (1×m·d) and fused as
//
//   gamma   = softmax_k( <Q, F_q(x_k)> )
//   T^g     = reshape( sum_k gamma_k · F_a(x_k), m, d )
//
// F_q and F_a are two-layer GELU perceptrons with a bottleneck of width
// ceil(m·d·r). F_a adds a residual skip from its input, so it is exactly the
// identity when its output layer is zero.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "promptagg/dataset.hpp"
#include "promptagg/encoder.hpp"
#include "promptagg/local_training.hpp"

namespace promptagg {

struct BottleneckMlp {
  Tensor w1, b1, w2, b2;  // (in × hidden), (1 × hidden), (hidden × out), (1 × out)
};

/// One aggregator, for a single block of a single modality.
struct Aggregator {
  Index m = 0;
  Index d = 0;
  Tensor query;  // 1 × d_q
  BottleneckMlp f_q;
  BottleneckMlp f_a;

  Index flat_dim() const { return m * d; }
  Index hidden_dim() const { return f_q.w1.cols(); }

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
};

struct AggregatorInit {
  Scalar reduction = 0.125;
  /// Scale of Q, F_q, and F_a's first layer; 0 selects 1/sqrt(fan_in).
  Scalar stddev = 0.0;
  /// Scale of F_a's output layer; 0 makes F_a the exact identity.
  Scalar fa_out_stddev = 1e-3;
};

/// Text and visual aggregators, one per block each.
struct AggregatorParams {
  std::vector<Aggregator> text;
  std::vector<Aggregator> visual;

  static AggregatorParams init(const ModelConfig& cfg, std::uint64_t seed,
                               const AggregatorInit& opts = {});

  Index depth() const { return static_cast<Index>(text.size()); }
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<Tensor*> text_parameters();
  std::vector<Tensor*> visual_parameters();
  void set_trainable(bool on);

  /// Names are `<prefix>text.<l>.query`, `<prefix>text.<l>.f_q.w1`, ...
  TensorList to_tensors(const std::string& prefix = "") const;
  /// Only the text or only the visual half.
  TensorList to_tensors(bool text_side, bool visual_side, const std::string& prefix = "") const;
  /// Loads whichever sides are present; prompt shapes come from `cfg`.
  static AggregatorParams from_tensors(const ModelConfig& cfg, const TensorList& tensors,
                                       const std::string& prefix = "");
  std::uint64_t content_hash() const;
  bool same_values(const AggregatorParams& other) const;
};

/// F(x) = gelu(x·W1 + b1)·W2 + b2, applied row-wise.
Var mlp_forward(Tape& tape, const BottleneckMlp& mlp, Var x);

/// Stacked flattened prompts: K × m·d.
Var stack_flat(std::span<const Var> prompts);

/// 1 × K attention weights.
Var attention_weights(Tape& tape, const Aggregator& agg, std::span<const Var> prompts);
/// m × d fused prompt.
Var aggregate(Tape& tape, const Aggregator& agg, std::span<const Var> prompts, Var gamma);

/// Value-level forms.
RowVector attention_weights(const Aggregator& agg, const std::vector<Matrix>& prompts);
Matrix aggregate(const Aggregator& agg, const std::vector<Matrix>& prompts,
                 const RowVector& gamma);
/// F_a applied to a single prompt matrix.
Matrix apply_fa(const Aggregator& agg, const Matrix& prompt);

/// Equal-weight mean of prompt matrices (the fixed-weight baseline).
Var mean_prompts(std::span<const Var> prompts);

/// Which modalities use attention; a disabled modality falls back to the
/// equal-weight mean of the raw local prompts.
struct AggregationFlags {
  bool text_attention = true;
  bool visual_attention = true;
};

/// Per-block, per-modality gammas of one aggregation.
struct AggregationTrace {
  std::vector<RowVector> text_gamma;
  std::vector<RowVector> visual_gamma;
};

/// Global prompts from K local prompt sets. Throws ProtocolError when the
/// sets disagree in depth.
PromptSet aggregate_promptset(std::span<const PromptSet> locals, const AggregatorParams& agg,
                              const AggregationFlags& flags = {},
                              AggregationTrace* trace = nullptr);

struct AggregatorStepReport {
  Scalar ce_loss = 0.0;
  Index samples_seen = 0;
};

struct AggregatorRoundResult {
  AggregatorParams aggregators;
  std::vector<AggregatorStepReport> reports;
};

/// L_ce of the aggregated global prompts on minibatch `images`, with
/// gradients flowing into the aggregators only.
Var aggregation_loss(Tape& tape, const BackboneParams& backbone,
                     std::span<const PromptSet> locals, const AggregatorParams& agg,
                     const AggregationFlags& flags, const Matrix& images,
                     std::span<const Index> labels);

/// E epochs of SGD on the aggregated-prompt cross-entropy over `data`.
/// Disabled modalities are not trained. Inputs are not modified.
AggregatorRoundResult train_aggregators_locally(const DomainDataset& data,
                                                const BackboneParams& backbone,
                                                std::span<const PromptSet> locals,
                                                const AggregatorParams& agg,
                                                const TrainConfig& cfg, std::uint64_t seed,
                                                const AggregationFlags& flags = {});

/// Elementwise mean of every parameter tensor, summed in client order.
/// Throws ProtocolError on topology mismatch.
AggregatorParams fedavg_aggregators(std::span<const AggregatorParams> locals);

}  // namespace promptagg
