// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Frozen dual encoder with deep prompt injection.
//
// Each tower is a stack of pre-norm transformer blocks. Block l of a tower
// sees the sequence ([cls]_l, prompts_l, content_l). After the block runs,
// the rows at prompt positions are dropped and the next block receives fresh
// prompts_{l+1}; the [cls] and content rows carry forward. The final [cls]
// row goes through a layer norm and a linear projection and is normalized to
// unit length. Prompts carry no positional embedding.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "promptagg/serialize.hpp"
#include "promptagg/tensor.hpp"

namespace promptagg {

struct ModelConfig {
  Index depth = 4;  // blocks per tower
  Index d_text = 32;
  Index d_vis = 48;
  Index d_proj = 32;
  Index n_heads = 4;
  Index text_prompt_len = 4;
  Index vis_prompt_len = 4;
  Index n_classes = 4;
  Index vocab_size = 16;
  Index text_len = 2;  // tokens per category description
  Index channels = 3;
  Index image_side = 16;
  Index patch_side = 4;
  Index mlp_ratio = 4;
  Scalar tau = 0.07;
  /// Gaussian init scale of backbone weights and embeddings. Narrow towers
  /// need more than the wide-model 0.02 to carry input signal to [cls].
  Scalar init_std = 0.1;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  Index n_patches() const { return (image_side / patch_side) * (image_side / patch_side); }
  Index patch_dim() const { return channels * patch_side * patch_side; }
  Index image_dim() const { return channels * image_side * image_side; }

  /// Desk-scale default.
  static ModelConfig desk();
  /// Sizes of the ViT-B/16 setting: 12 blocks, 512/768 widths, 8 prompts.
  static ModelConfig full_scale();
  /// Tiny two-block model for finite-difference checks.
  static ModelConfig gradient_toy();

  bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  AttentionParams attn;
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

/// One transformer stack plus its summary-token machinery.
struct Tower {
  Tensor cls;        // 1 × d
  Tensor pos;        // (1 + content_len) × d; row 0 belongs to [cls]
  std::vector<BlockParams> blocks;
  Tensor post_gain, post_bias;
  Tensor proj;       // d × d_proj
};

struct BackboneParams {
  ModelConfig config;
  Tensor token_embedding;  // vocab × d_text
  Tower text;
  Tensor patch_embedding;  // patch_dim × d_vis
  Tower vision;

  /// Seeded N(0, init_std²) weights, unit layer-norm gains, zero biases. All
  /// tensors start frozen.
  static BackboneParams init(const ModelConfig& cfg, std::uint64_t seed);

  void freeze();
  /// Unfreezes and marks every tensor trainable (warmup only).
  void unfreeze();

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  TensorList to_tensors() const;
  static BackboneParams from_tensors(const ModelConfig& cfg, const TensorList& tensors);
  std::uint64_t content_hash() const;
};

/// Per-block learnable prompts. text[l] is m_t × d_text, visual[l] is
/// m_v × d_vis.
struct PromptSet {
  std::vector<Tensor> text;
  std::vector<Tensor> visual;

  static PromptSet random(const ModelConfig& cfg, std::uint64_t seed, Scalar stddev = 0.02);
  static PromptSet zeros(const ModelConfig& cfg);
  /// Zero-length prompts in every block (prompt-free forward).
  static PromptSet empty(const ModelConfig& cfg);

  Index depth() const { return static_cast<Index>(text.size()); }
  void set_trainable(bool on);
  void zero_grad() const;

  /// Names are `<prefix>text.<l>` and `<prefix>visual.<l>`.
  TensorList to_tensors(const std::string& prefix = "") const;
  static PromptSet from_tensors(const TensorList& tensors, Index depth,
                                const std::string& prefix = "");
  std::uint64_t content_hash() const;

  /// Bitwise equality of all values.
  bool same_values(const PromptSet& other) const;
};

/// Token ids of the category descriptions: one row per category,
/// [template-token, class-token].
std::vector<std::vector<Index>> class_token_sequences(const ModelConfig& cfg);

/// Tape leaves for a list of prompt tensors.
std::vector<Var> prompt_leaves(Tape& tape, const std::vector<Tensor>& prompts);

/// One pre-norm transformer block on `batch` stacked sequences.
Var block_forward(Tape& tape, Var x, const BlockParams& block, Index n_heads, Index seq_len);

/// Splits images (N × channels·side·side, channel-major) into stacked patch
/// rows ((N·n_patches) × patch_dim), patches in raster order.
Matrix patchify(const ModelConfig& cfg, const Matrix& images);

/// Category text representations, C × d_proj with unit rows. `prompts` has
/// one entry per block, each m_t × d_text (m_t may be 0).
Var encode_text(Tape& tape, const BackboneParams& backbone, std::span<const Var> prompts,
                const std::vector<std::vector<Index>>& tokens);
/// Image features, N × d_proj with unit rows.
Var encode_images(Tape& tape, const BackboneParams& backbone, std::span<const Var> prompts,
                  const Matrix& images);

/// Prompt-free towers written without any splicing.
Var encode_text_plain(Tape& tape, const BackboneParams& backbone,
                      const std::vector<std::vector<Index>>& tokens);
Var encode_images_plain(Tape& tape, const BackboneParams& backbone, const Matrix& images);

/// Single-sequence conveniences.
RowVector text_forward(const BackboneParams& backbone, const std::vector<Tensor>& text_prompts,
                       const std::vector<Index>& category_tokens);
RowVector vision_forward(const BackboneParams& backbone,
                         const std::vector<Tensor>& visual_prompts, const RowVector& image);

/// p_c = softmax_c(<w_c, f> / tau), row per image. Inputs must be unit rows.
Var classify(Var text_reps, Var image_feats, Scalar tau);
Matrix classify(const Matrix& text_reps, const Matrix& image_feats, Scalar tau);

/// Class probabilities under the given prompts, computed without gradients.
Matrix predict(const BackboneParams& backbone, const PromptSet& prompts, const Matrix& images);

/// Prompt-free prediction with template descriptions.
Matrix zero_shot_distribution(const BackboneParams& backbone, const Matrix& images);

/// argmax per row, ties to the lowest index.
std::vector<Index> argmax_rows(const Matrix& probs);

}  // namespace promptagg
