// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-domain image classification data.
//
// Every class owns a grayscale spatial pattern drawn from a seed shared by
// all domains, so class semantics are identical everywhere. A domain renders
// the pattern through a per-channel color affine map (gain, offset), adds
// Gaussian pixel noise, optionally shifts it by a random jitter, and clamps
// to [0, 1].

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "promptagg/encoder.hpp"
#include "promptagg/serialize.hpp"

namespace promptagg {

struct DomainTransform {
  RowVector gain;    // per channel
  RowVector offset;  // per channel
  Scalar noise_std = 0.0;
  Index jitter = 0;  // max circular pixel shift per axis; 0 disables

  static DomainTransform identity(Index channels);
};

struct DomainSpec {
  Index id = 0;
  std::string name;
  std::uint64_t pattern_seed = 0;  // shared by all domains of one task
  DomainTransform transform;
  Index samples_per_class = 100;
};

struct DomainDataset {
  Index domain_id = 0;
  Matrix images;  // N × channels·side·side, channel-major, values in [0, 1]
  std::vector<Index> labels;

  Index size() const { return images.rows(); }
  DomainDataset subset(std::span<const Index> rows) const;
  /// Rows [begin, begin + count).
  DomainDataset slice(Index begin, Index count) const;

  TensorList to_tensors(const std::string& prefix = "") const;
  static DomainDataset from_tensors(const TensorList& tensors, const std::string& prefix = "");
};

/// Grayscale class pattern in [0, 1], side·side values, row-major.
RowVector class_pattern(const ModelConfig& cfg, std::uint64_t pattern_seed, Index label);

/// Deterministic under (spec, seed). Samples are ordered by class then index.
DomainDataset generate_domain(const ModelConfig& cfg, const DomainSpec& spec, std::uint64_t seed);

/// Four domains with distinct color palettes.
std::vector<DomainSpec> default_domain_specs(const ModelConfig& cfg,
                                             Index samples_per_class = 100,
                                             std::uint64_t pattern_seed = 1234);

/// Extra randomly colored domains used only to pretrain the backbone.
std::vector<DomainSpec> warmup_domain_specs(const ModelConfig& cfg, Index n_domains,
                                            Index samples_per_class, std::uint64_t seed,
                                            std::uint64_t pattern_seed = 1234);

struct ClientData {
  DomainDataset train;
  DomainDataset validation;
};

struct DomainSplit {
  std::vector<ClientData> clients;  // one per non-held-out domain, in spec order
  DomainDataset target;
};

/// One client per remaining domain, each split 90/10 into train/validation
/// with a seeded shuffle. The held-out domain is returned whole.
DomainSplit leave_one_out(const ModelConfig& cfg, const std::vector<DomainSpec>& specs,
                          Index held_out, std::uint64_t seed);

/// Concatenates datasets; the domain id of the result is that of the first.
DomainDataset concatenate(std::span<const DomainDataset> parts);

struct WarmupOptions {
  Index steps = 300;
  Index batch_size = 32;
  Scalar lr = 1.5e-4;
  std::uint64_t seed = 0;
  /// Required zero-shot accuracy on each check domain, as a multiple of 1/C.
  Scalar min_accuracy_over_chance = 1.5;
};

/// Trains every backbone tensor on the contrastive classification objective
/// over `pool` with Adam, then freezes. When `steps > 0`, zero-shot accuracy
/// on every dataset in `check` must exceed min_accuracy_over_chance / C, or
/// WarmupError is thrown.
BackboneParams warmup_backbone(BackboneParams backbone, const DomainDataset& pool,
                               const WarmupOptions& opts,
                               std::span<const DomainDataset> check = {});

/// Fraction of rows whose argmax (ties to lowest) equals the label.
Scalar accuracy(const Matrix& probs, std::span<const Index> labels);

}  // namespace promptagg
