// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "promptagg/encoder.hpp"
#include "test_util.hpp"

namespace promptagg {
namespace {

using testing::random_matrix;

/// Backbone with O(1) weights so prompt effects are far above round-off.
BackboneParams lively_backbone(const ModelConfig& cfg, std::uint64_t seed) {
  BackboneParams bb = BackboneParams::init(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  for (Tensor* t : bb.parameters()) t->value() += random_matrix(t->rows(), t->cols(), rng, -0.5, 0.5);
  return bb;
}

Matrix random_images(const ModelConfig& cfg, Index n, std::mt19937_64& rng) {
  return random_matrix(n, cfg.image_dim(), rng, 0.0, 1.0);
}

Matrix ln_value(const Matrix& x, const Tensor& g, const Tensor& b) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar mu = x.row(i).mean();
    const Scalar var = (x.row(i).array() - mu).square().mean();
    out.row(i) = ((x.row(i).array() - mu) / std::sqrt(var + 1e-5)).matrix();
    out.row(i) = out.row(i).cwiseProduct(g.value().row(0)) + b.value().row(0);
  }
  return out;
}

Matrix run_block(const BlockParams& block, const Matrix& x, Index heads) {
  Tape tape;
  return block_forward(tape, tape.constant(x), block, heads, x.rows()).value();
}

/// Step-by-step single-sequence tower with explicit row splicing. When
/// `scramble_prompt_outputs` is set, the prompt-position outputs of every
/// block are overwritten before being discarded.
RowVector splice_oracle(const Tower& tw, Matrix cls, Matrix content,
                        const std::vector<Tensor>& prompts, Index heads,
                        bool scramble_prompt_outputs) {
  const Index n = content.rows();
  for (std::size_t l = 0; l < tw.blocks.size(); ++l) {
    const Matrix& p = prompts[l].value();
    Matrix x(1 + p.rows() + n, cls.cols());
    x << cls, p, content;
    Matrix y = run_block(tw.blocks[l], x, heads);
    if (scramble_prompt_outputs && p.rows() > 0) y.middleRows(1, p.rows()).setConstant(1e6);
    cls = y.topRows(1);
    content = y.bottomRows(n);
  }
  Matrix h = ln_value(cls, tw.post_gain, tw.post_bias) * tw.proj.value();
  return h.row(0) / h.norm();
}

RowVector text_oracle(const BackboneParams& bb, const std::vector<Tensor>& prompts,
                      const std::vector<Index>& tokens, bool scramble) {
  Matrix cls = bb.text.cls.value() + bb.text.pos.value().topRows(1);
  Matrix content(static_cast<Index>(tokens.size()), bb.config.d_text);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    content.row(static_cast<Index>(j)) = bb.token_embedding.value().row(tokens[j]) +
                                         bb.text.pos.value().row(static_cast<Index>(j) + 1);
  }
  return splice_oracle(bb.text, cls, content, prompts, bb.config.n_heads, scramble);
}

RowVector vision_oracle(const BackboneParams& bb, const std::vector<Tensor>& prompts,
                        const RowVector& image, bool scramble) {
  const auto& cfg = bb.config;
  Matrix cls = bb.vision.cls.value() + bb.vision.pos.value().topRows(1);
  Matrix patches = patchify(cfg, image);
  Matrix content = patches * bb.patch_embedding.value() +
                   bb.vision.pos.value().bottomRows(cfg.n_patches());
  return splice_oracle(bb.vision, cls, content, prompts, cfg.n_heads, scramble);
}

TEST(Patchify, RasterOrderChannelMajor) {
  ModelConfig cfg = ModelConfig::gradient_toy();  // 8x8 image, 4x4 patches
  Matrix img(1, cfg.image_dim());
  for (Index i = 0; i < img.cols(); ++i) img(0, i) = static_cast<Scalar>(i);
  Matrix p = patchify(cfg, img);
  ASSERT_EQ(p.rows(), 4);
  ASSERT_EQ(p.cols(), 48);
  EXPECT_EQ(p(0, 0), 0.0);
  EXPECT_EQ(p(0, 1), 1.0);
  EXPECT_EQ(p(0, 4), 8.0);     // next pixel row
  EXPECT_EQ(p(0, 16), 64.0);   // channel 1
  EXPECT_EQ(p(1, 0), 4.0);     // patch to the right
  EXPECT_EQ(p(2, 0), 32.0);    // patch below
}

TEST(Patchify, GeometryMismatchIsConfigError) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  EXPECT_THROW(patchify(cfg, Matrix::Zero(1, 10)), ConfigError);
}

TEST(TextForward, EmptyPromptsEqualPlainForwardBitwise) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = lively_backbone(cfg, 3);
  PromptSet none = PromptSet::empty(cfg);
  const auto tokens = class_token_sequences(cfg);
  Tape tape;
  const auto leaves = prompt_leaves(tape, none.text);
  Matrix prompted = encode_text(tape, bb, leaves, tokens).value();
  Matrix plain = encode_text_plain(tape, bb, tokens).value();
  EXPECT_EQ(prompted, plain);
}

TEST(TextForward, DeterministicAndMatchesSpliceOracle) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = lively_backbone(cfg, 4);
  PromptSet prompts = PromptSet::random(cfg, 5, 0.5);
  const auto tokens = class_token_sequences(cfg);
  for (const auto& seq : tokens) {
    RowVector a = text_forward(bb, prompts.text, seq);
    RowVector b = text_forward(bb, prompts.text, seq);
    EXPECT_EQ(a, b);
    EXPECT_NEAR(a.norm(), 1.0, 1e-12);
    RowVector oracle = text_oracle(bb, prompts.text, seq, false);
    EXPECT_LT((a - oracle).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(TextForward, BatchedMatchesSingleSequence) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = lively_backbone(cfg, 6);
  PromptSet prompts = PromptSet::random(cfg, 7, 0.5);
  const auto tokens = class_token_sequences(cfg);
  Tape tape;
  const auto leaves = prompt_leaves(tape, prompts.text);
  Matrix all = encode_text(tape, bb, leaves, tokens).value();
  for (std::size_t c = 0; c < tokens.size(); ++c) {
    RowVector one = text_forward(bb, prompts.text, tokens[c]);
    EXPECT_LT((all.row(static_cast<Index>(c)) - one).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(TextForward, PromptOutputsAreDiscarded) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = lively_backbone(cfg, 8);
  PromptSet prompts = PromptSet::random(cfg, 9, 0.5);
  const auto seq = class_token_sequences(cfg)[1];
  RowVector clean = text_oracle(bb, prompts.text, seq, false);
  RowVector scrambled = text_oracle(bb, prompts.text, seq, true);
  EXPECT_EQ(clean, scrambled);
  // ...but each block's fresh prompts do matter.
  for (std::size_t l = 0; l < prompts.text.size(); ++l) {
    PromptSet moved = prompts;
    moved.text[l].value()(0, 0) += 0.5;
    EXPECT_GT((text_forward(bb, moved.text, seq) - clean).cwiseAbs().maxCoeff(), 1e-9) << l;
  }
}

TEST(TextForward, PromptShapeMismatchIsConfigError) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = BackboneParams::init(cfg, 1);
  PromptSet prompts = PromptSet::random(cfg, 2);
  prompts.text[1] = Tensor(Matrix::Zero(3, cfg.d_text));
  EXPECT_THROW(text_forward(bb, prompts.text, class_token_sequences(cfg)[0]), ConfigError);
  prompts.text.pop_back();
  EXPECT_THROW(text_forward(bb, prompts.text, class_token_sequences(cfg)[0]), ConfigError);
}

TEST(VisionForward, EmptyPromptsEqualPlainForwardBitwise) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = lively_backbone(cfg, 10);
  std::mt19937_64 rng(1);
  Matrix imgs = random_images(cfg, 3, rng);
  PromptSet none = PromptSet::empty(cfg);
  Tape tape;
  const auto leaves = prompt_leaves(tape, none.visual);
  EXPECT_EQ(encode_images(tape, bb, leaves, imgs).value(), encode_images_plain(tape, bb, imgs).value());
}

TEST(VisionForward, MatchesSpliceOracleAndIsBatchConsistent) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = lively_backbone(cfg, 11);
  PromptSet prompts = PromptSet::random(cfg, 12, 0.5);
  std::mt19937_64 rng(2);
  Matrix imgs = random_images(cfg, 3, rng);
  Tape tape;
  const auto leaves = prompt_leaves(tape, prompts.visual);
  Matrix batch = encode_images(tape, bb, leaves, imgs).value();
  for (Index i = 0; i < imgs.rows(); ++i) {
    RowVector one = vision_forward(bb, prompts.visual, imgs.row(i));
    EXPECT_LT((batch.row(i) - one).cwiseAbs().maxCoeff(), 1e-12);
    RowVector oracle = vision_oracle(bb, prompts.visual, imgs.row(i), false);
    EXPECT_LT((one - oracle).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(oracle, vision_oracle(bb, prompts.visual, imgs.row(i), true));
  }
}

TEST(VisionForward, ZeroImageWithZeroPositionsGivesIdenticalPatchTokens) {
  ModelConfig cfg = ModelConfig::desk();
  BackboneParams bb = BackboneParams::init(cfg, 13);
  bb.vision.pos.value().setZero();
  Matrix patches = patchify(cfg, Matrix::Zero(1, cfg.image_dim()));
  Matrix emb = patches * bb.patch_embedding.value() +
               bb.vision.pos.value().bottomRows(cfg.n_patches());
  for (Index i = 1; i < emb.rows(); ++i) EXPECT_EQ(emb.row(i), emb.row(0));
}

TEST(VisionForward, GeometryMismatchIsConfigError) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = BackboneParams::init(cfg, 1);
  PromptSet prompts = PromptSet::random(cfg, 2);
  EXPECT_THROW(vision_forward(bb, prompts.visual, RowVector::Zero(17)), ConfigError);
}

TEST(Classify, OrthogonalFeatureGivesUniform) {
  Matrix w = Matrix::Zero(3, 4);
  w(0, 0) = w(1, 1) = w(2, 2) = 1.0;
  Matrix f = Matrix::Zero(1, 4);
  f(0, 3) = 1.0;
  Matrix p = classify(w, f, 0.07);
  for (Index c = 0; c < 3; ++c) EXPECT_NEAR(p(0, c), 1.0 / 3.0, 1e-15);
}

TEST(Classify, SmallTemperatureConcentratesOnMatch) {
  Matrix w = Matrix::Identity(3, 3);
  Matrix f = w.topRows(1);
  EXPECT_GT(classify(w, f, 1e-3)(0, 0), 1.0 - 1e-12);
}

TEST(Classify, MatchesDirectFormulaOracle) {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix w = random_matrix(3, 5, rng);
    w = w.rowwise().normalized();
    Matrix f = random_matrix(2, 5, rng).rowwise().normalized();
    const Scalar tau = 0.07;
    Matrix p = classify(w, f, tau);
    for (Index i = 0; i < 2; ++i) {
      Scalar z = 0.0;
      for (Index c = 0; c < 3; ++c) z += std::exp(w.row(c).dot(f.row(i)) / tau);
      for (Index c = 0; c < 3; ++c) {
        EXPECT_NEAR(p(i, c), std::exp(w.row(c).dot(f.row(i)) / tau) / z, 1e-12);
      }
      EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
    }
  }
}

TEST(Classify, FewerThanTwoCategoriesIsConfigError) {
  EXPECT_THROW(classify(Matrix::Ones(1, 2), Matrix::Ones(1, 2), 0.07), ConfigError);
}

TEST(ZeroShot, EqualsClassifyWithEmptyPrompts) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = lively_backbone(cfg, 21);
  std::mt19937_64 rng(3);
  Matrix imgs = random_images(cfg, 4, rng);
  Matrix zs = zero_shot_distribution(bb, imgs);
  EXPECT_EQ(zs, predict(bb, PromptSet::empty(cfg), imgs));
  EXPECT_EQ(zs, zero_shot_distribution(bb, imgs));
}

TEST(Backbone, CheckpointTensorsRoundTripAndHashStable) {
  ModelConfig cfg = ModelConfig::gradient_toy();
  BackboneParams bb = lively_backbone(cfg, 22);
  BackboneParams back = BackboneParams::from_tensors(cfg, bb.to_tensors());
  EXPECT_EQ(back.content_hash(), bb.content_hash());
  for (const Tensor* t : back.parameters()) EXPECT_TRUE(t->frozen());
  back.text.proj.value()(0, 0) += 1e-12;
  EXPECT_NE(back.content_hash(), bb.content_hash());
}

TEST(ModelConfig, ValidationNamesTheField) {
  ModelConfig cfg;
  cfg.image_side = 15;
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("image_side"), std::string::npos);
  }
  cfg = ModelConfig{};
  cfg.tau = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.n_classes = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(ModelConfig::full_scale().validate());
}

}  // namespace
}  // namespace promptagg
