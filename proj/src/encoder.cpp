// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/encoder.hpp"

#include <algorithm>
#include <random>
#include <string>
#include <utility>

namespace promptagg {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

Matrix gaussian(Index rows, Index cols, Scalar stddev, std::mt19937_64& rng) {
  std::normal_distribution<Scalar> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

BlockParams init_block(Index d, Index mlp_ratio, Scalar kStd, std::mt19937_64& rng) {
  BlockParams b;
  b.ln1_gain = Tensor(Matrix::Ones(1, d));
  b.ln1_bias = Tensor(Matrix::Zero(1, d));
  b.attn.w_q = Tensor(gaussian(d, d, kStd, rng));
  b.attn.b_q = Tensor(Matrix::Zero(1, d));
  b.attn.w_k = Tensor(gaussian(d, d, kStd, rng));
  b.attn.b_k = Tensor(Matrix::Zero(1, d));
  b.attn.w_v = Tensor(gaussian(d, d, kStd, rng));
  b.attn.b_v = Tensor(Matrix::Zero(1, d));
  b.attn.w_o = Tensor(gaussian(d, d, kStd, rng));
  b.attn.b_o = Tensor(Matrix::Zero(1, d));
  b.ln2_gain = Tensor(Matrix::Ones(1, d));
  b.ln2_bias = Tensor(Matrix::Zero(1, d));
  b.mlp_w1 = Tensor(gaussian(d, d * mlp_ratio, kStd, rng));
  b.mlp_b1 = Tensor(Matrix::Zero(1, d * mlp_ratio));
  b.mlp_w2 = Tensor(gaussian(d * mlp_ratio, d, kStd, rng));
  b.mlp_b2 = Tensor(Matrix::Zero(1, d));
  return b;
}

Tower init_tower(Index d, Index content_len, const ModelConfig& cfg, std::mt19937_64& rng) {
  const Scalar kStd = cfg.init_std;
  Tower t;
  t.cls = Tensor(gaussian(1, d, kStd, rng));
  t.pos = Tensor(gaussian(1 + content_len, d, kStd, rng));
  for (Index l = 0; l < cfg.depth; ++l) t.blocks.push_back(init_block(d, cfg.mlp_ratio, kStd, rng));
  t.post_gain = Tensor(Matrix::Ones(1, d));
  t.post_bias = Tensor(Matrix::Zero(1, d));
  t.proj = Tensor(gaussian(d, cfg.d_proj, kStd, rng));
  return t;
}

template <typename TowerT, typename F>
void visit_tower(TowerT& t, const std::string& prefix, F&& f) {
  f(prefix + "cls", t.cls);
  f(prefix + "pos", t.pos);
  for (std::size_t l = 0; l < t.blocks.size(); ++l) {
    auto& b = t.blocks[l];
    const std::string p = prefix + "block." + std::to_string(l) + ".";
    f(p + "ln1.gain", b.ln1_gain);
    f(p + "ln1.bias", b.ln1_bias);
    f(p + "attn.w_q", b.attn.w_q);
    f(p + "attn.b_q", b.attn.b_q);
    f(p + "attn.w_k", b.attn.w_k);
    f(p + "attn.b_k", b.attn.b_k);
    f(p + "attn.w_v", b.attn.w_v);
    f(p + "attn.b_v", b.attn.b_v);
    f(p + "attn.w_o", b.attn.w_o);
    f(p + "attn.b_o", b.attn.b_o);
    f(p + "ln2.gain", b.ln2_gain);
    f(p + "ln2.bias", b.ln2_bias);
    f(p + "mlp.w1", b.mlp_w1);
    f(p + "mlp.b1", b.mlp_b1);
    f(p + "mlp.w2", b.mlp_w2);
    f(p + "mlp.b2", b.mlp_b2);
  }
  f(prefix + "post.gain", t.post_gain);
  f(prefix + "post.bias", t.post_bias);
  f(prefix + "proj", t.proj);
}

template <typename BackboneT, typename F>
void visit_backbone(BackboneT& b, F&& f) {
  f(std::string("text.token_embedding"), b.token_embedding);
  visit_tower(b.text, "text.", f);
  f(std::string("vision.patch_embedding"), b.patch_embedding);
  visit_tower(b.vision, "vision.", f);
}

void check_prompts(std::span<const Var> prompts, Index depth, Index expected_rows, Index width,
                   const char* tower) {
  require(static_cast<Index>(prompts.size()) == depth,
          std::string(tower) + " prompts: expected " + std::to_string(depth) + " blocks, got " +
              std::to_string(prompts.size()));
  const Index m = prompts.empty() ? 0 : prompts.front().rows();
  for (std::size_t l = 0; l < prompts.size(); ++l) {
    const Index r = prompts[l].rows();
    const Index c = prompts[l].cols();
    require((r == expected_rows || r == 0) && r == m && c == width,
            std::string(tower) + " prompt block " + std::to_string(l) + " has shape [" +
                std::to_string(r) + "x" + std::to_string(c) + "], expected [" +
                std::to_string(expected_rows) + "x" + std::to_string(width) +
                "] (or zero rows in every block)");
  }
}

std::vector<Index> strided(Index batch, Index stride, Index offset, Index count) {
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(batch * count));
  for (Index b = 0; b < batch; ++b) {
    for (Index j = 0; j < count; ++j) idx.push_back(b * stride + offset + j);
  }
  return idx;
}

Var tower_head(Tape& tape, const Tower& tw, Var cls_rows) {
  Var h = layer_norm(cls_rows, tape.leaf(tw.post_gain), tape.leaf(tw.post_bias));
  return l2_normalize_rows(matmul(h, tape.leaf(tw.proj)));
}

/// Deep-prompt forward over `batch` sequences whose content rows (with
/// positional embeddings already added) are stacked in `body`.
Var tower_forward(Tape& tape, const Tower& tw, Var head, Var body,
                  std::span<const Var> prompts, Index batch, Index n_heads) {
  const Index n = body.rows() / batch;
  for (std::size_t l = 0; l < tw.blocks.size(); ++l) {
    const Index m = prompts[l].rows();
    const Index seq = 1 + m + n;
    Var x = assemble_sequences(head, prompts[l], body, batch);
    x = block_forward(tape, x, tw.blocks[l], n_heads, seq);
    const auto cls_idx = strided(batch, seq, 0, 1);
    const auto body_idx = strided(batch, seq, 1 + m, n);
    head = gather_rows(x, cls_idx);
    body = gather_rows(x, body_idx);
  }
  return tower_head(tape, tw, head);
}

/// [cls] rows (cls + pos[0]) for a batch.
Var initial_head(Tape& tape, const Tower& tw, Index batch) {
  const std::vector<Index> zeros(static_cast<std::size_t>(batch), 0);
  Var cls = gather_rows(tape.leaf(tw.cls), zeros);
  Var pos = gather_rows(tape.leaf(tw.pos), zeros);
  return add(cls, pos);
}

Var text_body(Tape& tape, const BackboneParams& bb,
              const std::vector<std::vector<Index>>& tokens) {
  const auto& cfg = bb.config;
  std::vector<Index> ids;
  std::vector<Index> pos_ids;
  const Index n = static_cast<Index>(tokens.front().size());
  for (const auto& seq : tokens) {
    if (static_cast<Index>(seq.size()) != n) {
      throw ConfigError("category descriptions must share one length");
    }
    if (n + 1 > bb.text.pos.rows()) {
      throw ConfigError("category description longer than the positional table");
    }
    for (Index j = 0; j < n; ++j) {
      const Index tok = seq[static_cast<std::size_t>(j)];
      if (tok < 0 || tok >= cfg.vocab_size) {
        throw ConfigError("token id " + std::to_string(tok) + " outside vocabulary");
      }
      ids.push_back(tok);
      pos_ids.push_back(1 + j);
    }
  }
  return add(gather_rows(tape.leaf(bb.token_embedding), ids),
             gather_rows(tape.leaf(bb.text.pos), pos_ids));
}

Var image_body(Tape& tape, const BackboneParams& bb, const Matrix& images) {
  const auto& cfg = bb.config;
  const Index batch = images.rows();
  Var patches = tape.constant(patchify(cfg, images));
  std::vector<Index> pos_ids;
  pos_ids.reserve(static_cast<std::size_t>(batch * cfg.n_patches()));
  for (Index b = 0; b < batch; ++b) {
    for (Index j = 0; j < cfg.n_patches(); ++j) pos_ids.push_back(1 + j);
  }
  return add(matmul(patches, tape.leaf(bb.patch_embedding)),
             gather_rows(tape.leaf(bb.vision.pos), pos_ids));
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  require(depth >= 1, "depth must be >= 1");
  require(d_text >= 1 && d_vis >= 1 && d_proj >= 1, "widths must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_text % n_heads == 0, "d_text must be divisible by n_heads");
  require(d_vis % n_heads == 0, "d_vis must be divisible by n_heads");
  require(text_prompt_len >= 1, "text_prompt_len must be >= 1");
  require(vis_prompt_len >= 1, "vis_prompt_len must be >= 1");
  require(n_classes >= 2, "n_classes must be >= 2");
  require(text_len >= 2, "text_len must be >= 2 (template token + class token)");
  require(vocab_size >= n_classes + 1, "vocab_size must cover the template and class tokens");
  require(channels >= 1, "channels must be >= 1");
  require(patch_side >= 1 && image_side >= patch_side, "image_side must be >= patch_side >= 1");
  require(image_side % patch_side == 0, "image_side must be divisible by patch_side");
  require(mlp_ratio >= 1, "mlp_ratio must be >= 1");
  require(tau > 0.0, "tau must be positive");
  require(init_std > 0.0, "init_std must be positive");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.depth = 12;
  c.d_text = 512;
  c.d_vis = 768;
  c.d_proj = 512;
  c.n_heads = 8;
  c.text_prompt_len = 8;
  c.vis_prompt_len = 8;
  c.n_classes = 7;
  c.vocab_size = 64;
  c.image_side = 224;
  c.patch_side = 16;
  c.init_std = 0.02;
  return c;
}

ModelConfig ModelConfig::gradient_toy() {
  ModelConfig c;
  c.depth = 2;
  c.d_text = 8;
  c.d_vis = 12;
  c.d_proj = 8;
  c.n_heads = 2;
  c.text_prompt_len = 2;
  c.vis_prompt_len = 2;
  c.n_classes = 3;
  c.vocab_size = 6;
  c.image_side = 8;
  c.patch_side = 4;
  c.mlp_ratio = 2;
  c.init_std = 0.5;
  return c;
}

// ---------------------------------------------------------------------------
// BackboneParams

BackboneParams BackboneParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  BackboneParams b;
  b.config = cfg;
  b.token_embedding = Tensor(gaussian(cfg.vocab_size, cfg.d_text, cfg.init_std, rng));
  b.text = init_tower(cfg.d_text, cfg.text_len, cfg, rng);
  b.patch_embedding = Tensor(gaussian(cfg.patch_dim(), cfg.d_vis, cfg.init_std, rng));
  b.vision = init_tower(cfg.d_vis, cfg.n_patches(), cfg, rng);
  b.freeze();
  return b;
}

void BackboneParams::freeze() {
  for (Tensor* t : parameters()) {
    t->set_requires_grad(false);
    t->freeze();
  }
}

void BackboneParams::unfreeze() {
  for (Tensor* t : parameters()) {
    t->unfreeze();
    t->set_requires_grad(true);
  }
}

std::vector<Tensor*> BackboneParams::parameters() {
  std::vector<Tensor*> out;
  visit_backbone(*this, [&out](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<const Tensor*> BackboneParams::parameters() const {
  std::vector<const Tensor*> out;
  visit_backbone(*this, [&out](const std::string&, const Tensor& t) { out.push_back(&t); });
  return out;
}

TensorList BackboneParams::to_tensors() const {
  TensorList out;
  visit_backbone(*this, [&out](const std::string& name, const Tensor& t) {
    out.push_back({name, t.value()});
  });
  return out;
}

BackboneParams BackboneParams::from_tensors(const ModelConfig& cfg, const TensorList& tensors) {
  BackboneParams b = init(cfg, 0);
  visit_backbone(b, [&tensors](const std::string& name, Tensor& t) {
    const Matrix& v = find_tensor(tensors, name);
    if (v.rows() != t.rows() || v.cols() != t.cols()) {
      throw ProtocolError("tensor '" + name + "' has the wrong shape for this config");
    }
    t.value() = v;
  });
  b.freeze();
  return b;
}

std::uint64_t BackboneParams::content_hash() const { return promptagg::content_hash(to_tensors()); }

// ---------------------------------------------------------------------------
// PromptSet

PromptSet PromptSet::random(const ModelConfig& cfg, std::uint64_t seed, Scalar stddev) {
  std::mt19937_64 rng(seed);
  PromptSet p;
  for (Index l = 0; l < cfg.depth; ++l) {
    p.text.emplace_back(gaussian(cfg.text_prompt_len, cfg.d_text, stddev, rng));
  }
  for (Index l = 0; l < cfg.depth; ++l) {
    p.visual.emplace_back(gaussian(cfg.vis_prompt_len, cfg.d_vis, stddev, rng));
  }
  return p;
}

PromptSet PromptSet::zeros(const ModelConfig& cfg) {
  PromptSet p;
  for (Index l = 0; l < cfg.depth; ++l) {
    p.text.push_back(Tensor::zeros(cfg.text_prompt_len, cfg.d_text));
    p.visual.push_back(Tensor::zeros(cfg.vis_prompt_len, cfg.d_vis));
  }
  return p;
}

PromptSet PromptSet::empty(const ModelConfig& cfg) {
  PromptSet p;
  for (Index l = 0; l < cfg.depth; ++l) {
    p.text.push_back(Tensor::zeros(0, cfg.d_text));
    p.visual.push_back(Tensor::zeros(0, cfg.d_vis));
  }
  return p;
}

void PromptSet::set_trainable(bool on) {
  for (auto* group : {&text, &visual}) {
    for (Tensor& t : *group) {
      if (on) {
        t.unfreeze();
        t.set_requires_grad(true);
      } else {
        t.set_requires_grad(false);
        t.freeze();
      }
    }
  }
}

void PromptSet::zero_grad() const {
  for (const Tensor& t : text) t.zero_grad();
  for (const Tensor& t : visual) t.zero_grad();
}

TensorList PromptSet::to_tensors(const std::string& prefix) const {
  TensorList out;
  for (std::size_t l = 0; l < text.size(); ++l) {
    out.push_back({prefix + "text." + std::to_string(l), text[l].value()});
  }
  for (std::size_t l = 0; l < visual.size(); ++l) {
    out.push_back({prefix + "visual." + std::to_string(l), visual[l].value()});
  }
  return out;
}

PromptSet PromptSet::from_tensors(const TensorList& tensors, Index depth,
                                  const std::string& prefix) {
  PromptSet p;
  for (Index l = 0; l < depth; ++l) {
    p.text.emplace_back(find_tensor(tensors, prefix + "text." + std::to_string(l)));
  }
  for (Index l = 0; l < depth; ++l) {
    p.visual.emplace_back(find_tensor(tensors, prefix + "visual." + std::to_string(l)));
  }
  return p;
}

std::uint64_t PromptSet::content_hash() const { return promptagg::content_hash(to_tensors()); }

bool PromptSet::same_values(const PromptSet& other) const {
  if (text.size() != other.text.size() || visual.size() != other.visual.size()) return false;
  auto eq = [](const Tensor& a, const Tensor& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::equal(a.value().data(), a.value().data() + a.size(), b.value().data());
  };
  for (std::size_t l = 0; l < text.size(); ++l) {
    if (!eq(text[l], other.text[l])) return false;
  }
  for (std::size_t l = 0; l < visual.size(); ++l) {
    if (!eq(visual[l], other.visual[l])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Forward passes

std::vector<std::vector<Index>> class_token_sequences(const ModelConfig& cfg) {
  std::vector<std::vector<Index>> out;
  for (Index c = 0; c < cfg.n_classes; ++c) {
    std::vector<Index> seq(static_cast<std::size_t>(cfg.text_len), 0);
    seq.back() = 1 + c;
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<Var> prompt_leaves(Tape& tape, const std::vector<Tensor>& prompts) {
  std::vector<Var> out;
  out.reserve(prompts.size());
  for (const Tensor& t : prompts) out.push_back(tape.leaf(t));
  return out;
}

Var block_forward(Tape& tape, Var x, const BlockParams& b, Index n_heads, Index seq_len) {
  Var h = layer_norm(x, tape.leaf(b.ln1_gain), tape.leaf(b.ln1_bias));
  x = add(x, multihead_attention(tape, h, b.attn, n_heads, seq_len));
  h = layer_norm(x, tape.leaf(b.ln2_gain), tape.leaf(b.ln2_bias));
  Var m = gelu(linear(h, tape.leaf(b.mlp_w1), tape.leaf(b.mlp_b1)));
  m = linear(m, tape.leaf(b.mlp_w2), tape.leaf(b.mlp_b2));
  return add(x, m);
}

Matrix patchify(const ModelConfig& cfg, const Matrix& images) {
  if (images.cols() != cfg.image_dim()) {
    throw ConfigError("image has " + std::to_string(images.cols()) + " values, expected " +
                      std::to_string(cfg.image_dim()) + " (" + std::to_string(cfg.channels) +
                      "x" + std::to_string(cfg.image_side) + "x" +
                      std::to_string(cfg.image_side) + ")");
  }
  const Index side = cfg.image_side;
  const Index ps = cfg.patch_side;
  const Index grid = side / ps;
  const Index np = cfg.n_patches();
  Matrix out(images.rows() * np, cfg.patch_dim());
  for (Index b = 0; b < images.rows(); ++b) {
    for (Index gy = 0; gy < grid; ++gy) {
      for (Index gx = 0; gx < grid; ++gx) {
        const Index row = b * np + gy * grid + gx;
        Index col = 0;
        for (Index c = 0; c < cfg.channels; ++c) {
          for (Index dy = 0; dy < ps; ++dy) {
            for (Index dx = 0; dx < ps; ++dx) {
              out(row, col++) = images(b, c * side * side + (gy * ps + dy) * side + gx * ps + dx);
            }
          }
        }
      }
    }
  }
  return out;
}

Var encode_text(Tape& tape, const BackboneParams& bb, std::span<const Var> prompts,
                const std::vector<std::vector<Index>>& tokens) {
  const auto& cfg = bb.config;
  if (tokens.empty()) throw ConfigError("no category descriptions");
  check_prompts(prompts, cfg.depth, cfg.text_prompt_len, cfg.d_text, "text");
  const Index batch = static_cast<Index>(tokens.size());
  return tower_forward(tape, bb.text, initial_head(tape, bb.text, batch),
                       text_body(tape, bb, tokens), prompts, batch, cfg.n_heads);
}

Var encode_images(Tape& tape, const BackboneParams& bb, std::span<const Var> prompts,
                  const Matrix& images) {
  const auto& cfg = bb.config;
  if (images.rows() == 0) throw DataError("no images to encode");
  check_prompts(prompts, cfg.depth, cfg.vis_prompt_len, cfg.d_vis, "visual");
  const Index batch = images.rows();
  return tower_forward(tape, bb.vision, initial_head(tape, bb.vision, batch),
                       image_body(tape, bb, images), prompts, batch, cfg.n_heads);
}

Var encode_text_plain(Tape& tape, const BackboneParams& bb,
                      const std::vector<std::vector<Index>>& tokens) {
  if (tokens.empty()) throw ConfigError("no category descriptions");
  const Index batch = static_cast<Index>(tokens.size());
  Var empty = tape.constant(Matrix(0, bb.config.d_text));
  Var x = assemble_sequences(initial_head(tape, bb.text, batch), empty,
                             text_body(tape, bb, tokens), batch);
  const Index seq = x.rows() / batch;
  for (const auto& block : bb.text.blocks) x = block_forward(tape, x, block, bb.config.n_heads, seq);
  const auto cls_idx = strided(batch, seq, 0, 1);
  return tower_head(tape, bb.text, gather_rows(x, cls_idx));
}

Var encode_images_plain(Tape& tape, const BackboneParams& bb, const Matrix& images) {
  if (images.rows() == 0) throw DataError("no images to encode");
  const Index batch = images.rows();
  Var empty = tape.constant(Matrix(0, bb.config.d_vis));
  Var x = assemble_sequences(initial_head(tape, bb.vision, batch), empty,
                             image_body(tape, bb, images), batch);
  const Index seq = x.rows() / batch;
  for (const auto& block : bb.vision.blocks) {
    x = block_forward(tape, x, block, bb.config.n_heads, seq);
  }
  const auto cls_idx = strided(batch, seq, 0, 1);
  return tower_head(tape, bb.vision, gather_rows(x, cls_idx));
}

RowVector text_forward(const BackboneParams& backbone, const std::vector<Tensor>& text_prompts,
                       const std::vector<Index>& category_tokens) {
  Tape tape;
  const auto leaves = prompt_leaves(tape, text_prompts);
  return encode_text(tape, backbone, leaves, {category_tokens}).value().row(0);
}

RowVector vision_forward(const BackboneParams& backbone,
                         const std::vector<Tensor>& visual_prompts, const RowVector& image) {
  Tape tape;
  const auto leaves = prompt_leaves(tape, visual_prompts);
  Matrix img = image;
  return encode_images(tape, backbone, leaves, img).value().row(0);
}

Var classify(Var text_reps, Var image_feats, Scalar tau) {
  if (text_reps.rows() < 2) throw ConfigError("classification needs at least 2 categories");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  return softmax(scale(matmul(image_feats, transpose(text_reps)), 1.0 / tau));
}

Matrix classify(const Matrix& text_reps, const Matrix& image_feats, Scalar tau) {
  Tape tape;
  return classify(tape.constant(text_reps), tape.constant(image_feats), tau).value();
}

Matrix predict(const BackboneParams& backbone, const PromptSet& prompts, const Matrix& images) {
  Tape tape;
  // Read-only evaluation: copies are frozen so nothing is recorded.
  PromptSet fixed = prompts;
  fixed.set_trainable(false);
  const auto tp = prompt_leaves(tape, fixed.text);
  const auto vp = prompt_leaves(tape, fixed.visual);
  Var w = encode_text(tape, backbone, tp, class_token_sequences(backbone.config));
  Var f = encode_images(tape, backbone, vp, images);
  return classify(w, f, backbone.config.tau).value();
}

Matrix zero_shot_distribution(const BackboneParams& backbone, const Matrix& images) {
  Tape tape;
  Var w = encode_text_plain(tape, backbone, class_token_sequences(backbone.config));
  Var f = encode_images_plain(tape, backbone, images);
  return classify(w, f, backbone.config.tau).value();
}

std::vector<Index> argmax_rows(const Matrix& probs) {
  std::vector<Index> out(static_cast<std::size_t>(probs.rows()));
  for (Index i = 0; i < probs.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < probs.cols(); ++j) {
      if (probs(i, j) > probs(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

}  // namespace promptagg
