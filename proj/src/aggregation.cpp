// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/aggregation.hpp"

#include <cmath>
#include <random>
#include <string>

#include "promptagg/losses.hpp"
#include "promptagg/optim.hpp"

namespace promptagg {

namespace {

Matrix gaussian(Index rows, Index cols, Scalar stddev, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  if (stddev == 0.0) return Matrix::Zero(rows, cols);
  std::normal_distribution<Scalar> dist(0.0, stddev);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

BottleneckMlp init_mlp(Index in, Index hidden, Index out, Scalar std1, Scalar std2,
                       std::mt19937_64& rng) {
  BottleneckMlp f;
  f.w1 = Tensor(gaussian(in, hidden, std1, rng));
  f.b1 = Tensor(Matrix::Zero(1, hidden));
  f.w2 = Tensor(gaussian(hidden, out, std2, rng));
  f.b2 = Tensor(Matrix::Zero(1, out));
  return f;
}

Aggregator init_aggregator(Index m, Index d, const AggregatorInit& opts, std::mt19937_64& rng) {
  Aggregator a;
  a.m = m;
  a.d = d;
  const Index flat = m * d;
  const auto hidden =
      static_cast<Index>(std::ceil(static_cast<Scalar>(flat) * opts.reduction - 1e-9));
  if (hidden < 1) throw ConfigError("aggregator bottleneck width must be >= 1");
  auto init_scale = [&opts](Index fan_in) {
    return opts.stddev > 0.0 ? opts.stddev : 1.0 / std::sqrt(static_cast<Scalar>(fan_in));
  };
  a.query = Tensor(gaussian(1, hidden, init_scale(hidden), rng));
  a.f_q = init_mlp(flat, hidden, hidden, init_scale(flat), init_scale(hidden), rng);
  a.f_a = init_mlp(flat, hidden, flat, init_scale(flat), opts.fa_out_stddev, rng);
  return a;
}

template <typename AggT, typename F>
void visit_aggregator(AggT& a, const std::string& p, F&& f) {
  f(p + "query", a.query);
  f(p + "f_q.w1", a.f_q.w1);
  f(p + "f_q.b1", a.f_q.b1);
  f(p + "f_q.w2", a.f_q.w2);
  f(p + "f_q.b2", a.f_q.b2);
  f(p + "f_a.w1", a.f_a.w1);
  f(p + "f_a.b1", a.f_a.b1);
  f(p + "f_a.w2", a.f_a.w2);
  f(p + "f_a.b2", a.f_a.b2);
}

template <typename ParamsT, typename F>
void visit_side(ParamsT& params, bool text_side, const std::string& prefix, F&& f) {
  auto& side = text_side ? params.text : params.visual;
  const std::string name = text_side ? "text." : "visual.";
  for (std::size_t l = 0; l < side.size(); ++l) {
    visit_aggregator(side[l], prefix + name + std::to_string(l) + ".", f);
  }
}

const Matrix* lookup(const TensorList& tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

void check_prompts(const Aggregator& agg, std::span<const Var> prompts) {
  if (prompts.empty()) throw ConfigError("aggregation needs at least one local prompt");
  for (const Var& p : prompts) {
    if (p.value().rows() != agg.m || p.value().cols() != agg.d) {
      throw ConfigError("local prompt is " + std::to_string(p.value().rows()) + "x" +
                        std::to_string(p.value().cols()) + ", aggregator expects " +
                        std::to_string(agg.m) + "x" + std::to_string(agg.d));
    }
  }
}

std::vector<Var> constants(Tape& tape, const std::vector<Matrix>& values) {
  std::vector<Var> out;
  for (const Matrix& v : values) out.push_back(tape.constant(v));
  return out;
}

// Frozen view so value-level calls record nothing on the tape.
Aggregator frozen_copy(const Aggregator& agg) {
  Aggregator a = agg;
  for (Tensor* t : a.parameters()) {
    t->set_requires_grad(false);
    t->freeze();
  }
  return a;
}

}  // namespace

std::vector<Tensor*> Aggregator::parameters() {
  std::vector<Tensor*> out;
  visit_aggregator(*this, "", [&out](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<const Tensor*> Aggregator::parameters() const {
  std::vector<const Tensor*> out;
  visit_aggregator(*this, "",
                   [&out](const std::string&, const Tensor& t) { out.push_back(&t); });
  return out;
}

AggregatorParams AggregatorParams::init(const ModelConfig& cfg, std::uint64_t seed,
                                        const AggregatorInit& opts) {
  cfg.validate();
  if (!(opts.reduction > 0.0)) throw ConfigError("reduction ratio must be positive");
  if (!(opts.stddev >= 0.0) || !(opts.fa_out_stddev >= 0.0)) {
    throw ConfigError("aggregator init scales must be non-negative");
  }
  std::mt19937_64 rng(seed);
  AggregatorParams p;
  for (Index l = 0; l < cfg.depth; ++l) {
    p.text.push_back(init_aggregator(cfg.text_prompt_len, cfg.d_text, opts, rng));
  }
  for (Index l = 0; l < cfg.depth; ++l) {
    p.visual.push_back(init_aggregator(cfg.vis_prompt_len, cfg.d_vis, opts, rng));
  }
  p.set_trainable(false);
  return p;
}

std::vector<Tensor*> AggregatorParams::text_parameters() {
  std::vector<Tensor*> out;
  visit_side(*this, true, "", [&out](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<Tensor*> AggregatorParams::visual_parameters() {
  std::vector<Tensor*> out;
  visit_side(*this, false, "", [&out](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<Tensor*> AggregatorParams::parameters() {
  auto out = text_parameters();
  const auto vis = visual_parameters();
  out.insert(out.end(), vis.begin(), vis.end());
  return out;
}

std::vector<const Tensor*> AggregatorParams::parameters() const {
  std::vector<const Tensor*> out;
  auto add = [&out](const std::string&, const Tensor& t) { out.push_back(&t); };
  visit_side(*this, true, "", add);
  visit_side(*this, false, "", add);
  return out;
}

void AggregatorParams::set_trainable(bool on) {
  for (Tensor* t : parameters()) {
    if (on) {
      t->unfreeze();
      t->set_requires_grad(true);
    } else {
      t->set_requires_grad(false);
      t->freeze();
    }
  }
}

TensorList AggregatorParams::to_tensors(bool text_side, bool visual_side,
                                        const std::string& prefix) const {
  TensorList out;
  auto add = [&out](const std::string& name, const Tensor& t) {
    out.push_back({name, t.value()});
  };
  if (text_side) visit_side(*this, true, prefix, add);
  if (visual_side) visit_side(*this, false, prefix, add);
  return out;
}

TensorList AggregatorParams::to_tensors(const std::string& prefix) const {
  return to_tensors(true, true, prefix);
}

AggregatorParams AggregatorParams::from_tensors(const ModelConfig& cfg, const TensorList& tensors,
                                                const std::string& prefix) {
  AggregatorParams p;
  for (const bool text_side : {true, false}) {
    auto& side = text_side ? p.text : p.visual;
    const std::string name = text_side ? "text." : "visual.";
    for (Index l = 0;; ++l) {
      const std::string base = prefix + name + std::to_string(l) + ".";
      if (!lookup(tensors, base + "query")) break;
      Aggregator a;
      a.m = text_side ? cfg.text_prompt_len : cfg.vis_prompt_len;
      a.d = text_side ? cfg.d_text : cfg.d_vis;
      visit_aggregator(a, base, [&tensors](const std::string& n, Tensor& t) {
        const Matrix* v = lookup(tensors, n);
        if (!v) throw ProtocolError("aggregator tensor '" + n + "' missing");
        t = Tensor(*v);
      });
      if (a.f_q.w1.rows() != a.flat_dim() || a.f_a.w2.cols() != a.flat_dim() ||
          a.query.cols() != a.f_q.w2.cols()) {
        throw ProtocolError("aggregator '" + base + "' does not match the model config");
      }
      side.push_back(std::move(a));
    }
  }
  p.set_trainable(false);
  return p;
}

std::uint64_t AggregatorParams::content_hash() const {
  return promptagg::content_hash(to_tensors());
}

bool AggregatorParams::same_values(const AggregatorParams& other) const {
  const auto a = parameters();
  const auto b = other.parameters();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols()) return false;
    if (!std::equal(a[i]->value().data(), a[i]->value().data() + a[i]->size(),
                    b[i]->value().data())) {
      return false;
    }
  }
  return true;
}

Var mlp_forward(Tape& tape, const BottleneckMlp& mlp, Var x) {
  Var h = gelu(linear(x, tape.leaf(mlp.w1), tape.leaf(mlp.b1)));
  return linear(h, tape.leaf(mlp.w2), tape.leaf(mlp.b2));
}

Var stack_flat(std::span<const Var> prompts) {
  std::vector<Var> rows;
  rows.reserve(prompts.size());
  for (const Var& p : prompts) rows.push_back(reshape(p, 1, p.value().size()));
  return concat_rows(rows);
}

Var attention_weights(Tape& tape, const Aggregator& agg, std::span<const Var> prompts) {
  check_prompts(agg, prompts);
  Var x = stack_flat(prompts);
  Var keys = mlp_forward(tape, agg.f_q, x);               // K × d_q
  Var scores = matmul(tape.leaf(agg.query), transpose(keys));  // 1 × K
  return softmax(scores, 1);
}

Var aggregate(Tape& tape, const Aggregator& agg, std::span<const Var> prompts, Var gamma) {
  check_prompts(agg, prompts);
  const auto k = static_cast<Index>(prompts.size());
  if (gamma.value().rows() != 1 || gamma.value().cols() != k) {
    throw ConfigError("gamma must be 1x" + std::to_string(k));
  }
  Var x = stack_flat(prompts);
  Var fa = add(x, mlp_forward(tape, agg.f_a, x));  // K × m·d
  return reshape(matmul(gamma, fa), agg.m, agg.d);
}

RowVector attention_weights(const Aggregator& agg, const std::vector<Matrix>& prompts) {
  const Aggregator a = frozen_copy(agg);
  Tape tape;
  const auto vars = constants(tape, prompts);
  return attention_weights(tape, a, vars).value();
}

Matrix aggregate(const Aggregator& agg, const std::vector<Matrix>& prompts,
                 const RowVector& gamma) {
  const Aggregator a = frozen_copy(agg);
  Tape tape;
  const auto vars = constants(tape, prompts);
  return aggregate(tape, a, vars, tape.constant(gamma)).value();
}

Matrix apply_fa(const Aggregator& agg, const Matrix& prompt) {
  return aggregate(agg, {prompt}, RowVector::Ones(1));
}

Var mean_prompts(std::span<const Var> prompts) {
  if (prompts.empty()) throw ConfigError("mean of zero prompts");
  Var acc = prompts.front();
  for (std::size_t k = 1; k < prompts.size(); ++k) acc = add(acc, prompts[k]);
  return scale(acc, 1.0 / static_cast<Scalar>(prompts.size()));
}

namespace {

struct GlobalVars {
  std::vector<Var> text;
  std::vector<Var> visual;
};

void check_depths(std::span<const PromptSet> locals, const AggregatorParams& agg,
                  const AggregationFlags& flags) {
  if (locals.empty()) throw ProtocolError("aggregation received no local prompt sets");
  const std::size_t depth = locals.front().text.size();
  for (const auto& p : locals) {
    if (p.text.size() != depth || p.visual.size() != depth) {
      throw ProtocolError("local prompt sets disagree in depth");
    }
  }
  if ((flags.text_attention && agg.text.size() != depth) ||
      (flags.visual_attention && agg.visual.size() != depth)) {
    throw ProtocolError("aggregator depth does not match the prompt depth");
  }
}

GlobalVars aggregate_on_tape(Tape& tape, std::span<const PromptSet> locals,
                             const AggregatorParams& agg, const AggregationFlags& flags,
                             AggregationTrace* trace) {
  check_depths(locals, agg, flags);
  GlobalVars out;
  const std::size_t depth = locals.front().text.size();
  for (const bool text_side : {true, false}) {
    const bool attend = text_side ? flags.text_attention : flags.visual_attention;
    auto& dest = text_side ? out.text : out.visual;
    for (std::size_t l = 0; l < depth; ++l) {
      std::vector<Var> ks;
      for (const auto& p : locals) {
        ks.push_back(tape.constant((text_side ? p.text : p.visual)[l].value()));
      }
      if (!attend) {
        dest.push_back(mean_prompts(ks));
        continue;
      }
      const Aggregator& a = (text_side ? agg.text : agg.visual)[l];
      Var gamma = attention_weights(tape, a, ks);
      if (trace) (text_side ? trace->text_gamma : trace->visual_gamma).push_back(gamma.value());
      dest.push_back(aggregate(tape, a, ks, gamma));
    }
  }
  return out;
}

}  // namespace

PromptSet aggregate_promptset(std::span<const PromptSet> locals, const AggregatorParams& agg,
                              const AggregationFlags& flags, AggregationTrace* trace) {
  AggregatorParams fixed = agg;
  fixed.set_trainable(false);
  Tape tape;
  const GlobalVars g = aggregate_on_tape(tape, locals, fixed, flags, trace);
  PromptSet out;
  for (const Var& v : g.text) out.text.emplace_back(v.value());
  for (const Var& v : g.visual) out.visual.emplace_back(v.value());
  out.set_trainable(false);
  return out;
}

Var aggregation_loss(Tape& tape, const BackboneParams& backbone,
                     std::span<const PromptSet> locals, const AggregatorParams& agg,
                     const AggregationFlags& flags, const Matrix& images,
                     std::span<const Index> labels) {
  const GlobalVars g = aggregate_on_tape(tape, locals, agg, flags, nullptr);
  Var w = encode_text(tape, backbone, g.text, class_token_sequences(backbone.config));
  Var f = encode_images(tape, backbone, g.visual, images);
  return cross_entropy(classify(w, f, backbone.config.tau), labels);
}

AggregatorRoundResult train_aggregators_locally(const DomainDataset& data,
                                                const BackboneParams& backbone,
                                                std::span<const PromptSet> locals,
                                                const AggregatorParams& agg,
                                                const TrainConfig& cfg, std::uint64_t seed,
                                                const AggregationFlags& flags) {
  cfg.validate();
  if (data.size() == 0) throw DataError("train_aggregators_locally: empty client dataset");
  AggregatorRoundResult result;
  result.aggregators = agg;
  AggregatorParams& a = result.aggregators;
  a.set_trainable(false);
  std::vector<Tensor*> params;
  if (flags.text_attention) {
    for (Tensor* t : a.text_parameters()) params.push_back(t);
  }
  if (flags.visual_attention) {
    for (Tensor* t : a.visual_parameters()) params.push_back(t);
  }
  for (Tensor* t : params) {
    t->unfreeze();
    t->set_requires_grad(true);
    t->zero_grad();
  }

  Index seen = 0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& rows : minibatches(data.size(), cfg.batch_size, seed, epoch)) {
      const DomainDataset batch = data.subset(rows);
      Tape tape;
      Var loss = aggregation_loss(tape, backbone, locals, a, flags, batch.images, batch.labels);
      if (!params.empty()) {
        tape.backward(loss);
        sgd_step(params, cfg.effective_aggregator_lr());
      }
      seen += batch.size();
      result.reports.push_back({loss.value()(0, 0), seen});
    }
  }
  a.set_trainable(false);
  return result;
}

AggregatorParams fedavg_aggregators(std::span<const AggregatorParams> locals) {
  if (locals.empty()) throw ProtocolError("fedavg of zero aggregators");
  AggregatorParams out = locals.front();
  const auto dst = out.parameters();
  for (std::size_t k = 1; k < locals.size(); ++k) {
    const auto src = locals[k].parameters();
    if (src.size() != dst.size()) throw ProtocolError("aggregator topology mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (src[i]->rows() != dst[i]->rows() || src[i]->cols() != dst[i]->cols()) {
        throw ProtocolError("aggregator tensor shape mismatch");
      }
      dst[i]->value() += src[i]->value();
    }
  }
  const Scalar inv = static_cast<Scalar>(locals.size());
  for (Tensor* t : dst) t->value() /= inv;
  out.set_trainable(false);
  return out;
}

}  // namespace promptagg
