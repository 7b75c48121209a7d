// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "promptagg/losses.hpp"
#include "promptagg/optim.hpp"

namespace promptagg {

namespace {

std::mt19937_64 seeded(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

RowVector rgb(Scalar r, Scalar g, Scalar b, Index channels) {
  RowVector v = RowVector::Zero(channels);
  const Scalar src[3] = {r, g, b};
  for (Index c = 0; c < channels; ++c) v(c) = src[c % 3];
  return v;
}

}  // namespace

DomainTransform DomainTransform::identity(Index channels) {
  DomainTransform t;
  t.gain = RowVector::Ones(channels);
  t.offset = RowVector::Zero(channels);
  return t;
}

DomainDataset DomainDataset::subset(std::span<const Index> rows) const {
  DomainDataset out;
  out.domain_id = domain_id;
  out.images.resize(static_cast<Index>(rows.size()), images.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.images.row(static_cast<Index>(i)) = images.row(rows[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

DomainDataset DomainDataset::slice(Index begin, Index count) const {
  std::vector<Index> rows(static_cast<std::size_t>(count));
  std::iota(rows.begin(), rows.end(), begin);
  return subset(rows);
}

TensorList DomainDataset::to_tensors(const std::string& prefix) const {
  Matrix lab(static_cast<Index>(labels.size()), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    lab(static_cast<Index>(i), 0) = static_cast<Scalar>(labels[i]);
  }
  Matrix id(1, 1);
  id(0, 0) = static_cast<Scalar>(domain_id);
  return {{prefix + "images", images}, {prefix + "labels", lab}, {prefix + "domain_id", id}};
}

DomainDataset DomainDataset::from_tensors(const TensorList& tensors, const std::string& prefix) {
  DomainDataset d;
  d.images = find_tensor(tensors, prefix + "images");
  const Matrix& lab = find_tensor(tensors, prefix + "labels");
  if (lab.rows() != d.images.rows() || lab.cols() != 1) {
    throw ProtocolError("dataset labels do not match image count");
  }
  for (Index i = 0; i < lab.rows(); ++i) d.labels.push_back(static_cast<Index>(lab(i, 0)));
  d.domain_id = static_cast<Index>(find_tensor(tensors, prefix + "domain_id")(0, 0));
  return d;
}

RowVector class_pattern(const ModelConfig& cfg, std::uint64_t pattern_seed, Index label) {
  auto rng = seeded({pattern_seed, static_cast<std::uint64_t>(label), 0x9a77e42ULL});
  std::uniform_int_distribution<int> freq(-2, 2);
  std::uniform_real_distribution<Scalar> phase(0.0, 2.0 * std::numbers::pi);
  const Index side = cfg.image_side;
  RowVector z = RowVector::Zero(side * side);
  for (int comp = 0; comp < 3; ++comp) {
    int fx = 0;
    int fy = 0;
    while (fx == 0 && fy == 0) {
      fx = freq(rng);
      fy = freq(rng);
    }
    const Scalar ph = phase(rng);
    for (Index y = 0; y < side; ++y) {
      for (Index x = 0; x < side; ++x) {
        z(y * side + x) +=
            std::cos(2.0 * std::numbers::pi * (fx * x + fy * y) / static_cast<Scalar>(side) + ph);
      }
    }
  }
  const Scalar mu = z.mean();
  const Scalar sd = std::sqrt((z.array() - mu).square().mean());
  return z.unaryExpr([&](Scalar v) { return 1.0 / (1.0 + std::exp(-3.0 * (v - mu) / sd)); });
}

DomainDataset generate_domain(const ModelConfig& cfg, const DomainSpec& spec, std::uint64_t seed) {
  const auto& tr = spec.transform;
  if (tr.gain.size() != cfg.channels || tr.offset.size() != cfg.channels) {
    throw ConfigError("domain '" + spec.name + "' transform does not match channel count");
  }
  if (spec.samples_per_class < 1) throw ConfigError("samples_per_class must be >= 1");
  auto rng = seeded({seed, static_cast<std::uint64_t>(spec.id), 0xd0a1ULL});
  std::normal_distribution<Scalar> noise(0.0, 1.0);
  std::uniform_int_distribution<Index> shift(-tr.jitter, tr.jitter);

  const Index side = cfg.image_side;
  const Index plane = side * side;
  DomainDataset out;
  out.domain_id = spec.id;
  out.images.resize(cfg.n_classes * spec.samples_per_class, cfg.image_dim());
  Index row = 0;
  for (Index c = 0; c < cfg.n_classes; ++c) {
    const RowVector base = class_pattern(cfg, spec.pattern_seed, c);
    for (Index s = 0; s < spec.samples_per_class; ++s, ++row) {
      RowVector pat = base;
      if (tr.jitter > 0) {
        const Index dy = shift(rng);
        const Index dx = shift(rng);
        for (Index y = 0; y < side; ++y) {
          for (Index x = 0; x < side; ++x) {
            pat(y * side + x) = base(((y + dy + side) % side) * side + (x + dx + side) % side);
          }
        }
      }
      for (Index ch = 0; ch < cfg.channels; ++ch) {
        for (Index i = 0; i < plane; ++i) {
          Scalar v = tr.offset(ch) + tr.gain(ch) * pat(i);
          if (tr.noise_std > 0.0) v += tr.noise_std * noise(rng);
          out.images(row, ch * plane + i) = std::clamp(v, 0.0, 1.0);
        }
      }
      out.labels.push_back(c);
    }
  }
  return out;
}

std::vector<DomainSpec> default_domain_specs(const ModelConfig& cfg, Index samples_per_class,
                                             std::uint64_t pattern_seed) {
  struct Palette {
    const char* name;
    Scalar g[3];
  };
  // Sign patterns differ per domain, so channel-wise pixel statistics do not
  // transfer between domains while the spatial class structure does.
  const Palette palettes[4] = {
      {"bright", {0.70, 0.60, 0.50}},
      {"crimson", {0.70, -0.60, -0.50}},
      {"verdant", {-0.60, 0.70, -0.50}},
      {"azure", {-0.50, -0.50, 0.70}},
  };
  std::vector<DomainSpec> specs;
  for (Index d = 0; d < 4; ++d) {
    const Palette& p = palettes[d];
    DomainSpec s;
    s.id = d;
    s.name = p.name;
    s.pattern_seed = pattern_seed;
    s.transform.gain = rgb(p.g[0], p.g[1], p.g[2], cfg.channels);
    s.transform.offset.resize(cfg.channels);
    // Center every channel at 0.5.
    for (Index c = 0; c < cfg.channels; ++c) {
      const Scalar g = s.transform.gain(c);
      s.transform.offset(c) = std::max(0.0, -g) + 0.5 * (1.0 - std::abs(g));
    }
    s.transform.noise_std = 0.08;
    s.samples_per_class = samples_per_class;
    specs.push_back(std::move(s));
  }
  return specs;
}

std::vector<DomainSpec> warmup_domain_specs(const ModelConfig& cfg, Index n_domains,
                                            Index samples_per_class, std::uint64_t seed,
                                            std::uint64_t pattern_seed) {
  auto rng = seeded({seed, 0x3a5bULL});
  std::uniform_real_distribution<Scalar> magnitude(0.15, 1.0);
  std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
  std::vector<DomainSpec> specs;
  for (Index d = 0; d < n_domains; ++d) {
    DomainSpec s;
    s.id = 100 + d;
    s.name = "warmup-" + std::to_string(d);
    s.pattern_seed = pattern_seed;
    s.transform.gain.resize(cfg.channels);
    s.transform.offset.resize(cfg.channels);
    for (Index c = 0; c < cfg.channels; ++c) {
      // Domain d uses the channel sign pattern given by the bits of d.
      const bool negative = ((d >> (c % 3)) & 1) != 0;
      const Scalar g = magnitude(rng) * (negative ? -1.0 : 1.0);
      // Offset keeps offset + g·pattern inside [0, 1] for pattern in [0, 1].
      s.transform.gain(c) = g;
      s.transform.offset(c) = std::max(0.0, -g) + unit(rng) * (1.0 - std::abs(g));
    }
    s.transform.noise_std = 0.08;
    s.samples_per_class = samples_per_class;
    specs.push_back(std::move(s));
  }
  return specs;
}

DomainSplit leave_one_out(const ModelConfig& cfg, const std::vector<DomainSpec>& specs,
                          Index held_out, std::uint64_t seed) {
  if (specs.size() < 2) throw ConfigError("leave-one-out needs at least 2 domains");
  const bool present = std::any_of(specs.begin(), specs.end(),
                                   [held_out](const DomainSpec& s) { return s.id == held_out; });
  if (!present) {
    throw ConfigError("held-out domain " + std::to_string(held_out) + " is not among the specs");
  }
  DomainSplit split;
  for (const DomainSpec& spec : specs) {
    DomainDataset full = generate_domain(cfg, spec, seed);
    if (spec.id == held_out) {
      split.target = std::move(full);
      continue;
    }
    auto rng = seeded({seed, static_cast<std::uint64_t>(spec.id), 0x5711ULL});
    std::vector<Index> order(static_cast<std::size_t>(full.size()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const Index n_val = full.size() / 10;
    const std::span<const Index> all(order);
    ClientData cd;
    cd.validation = full.subset(all.first(static_cast<std::size_t>(n_val)));
    cd.train = full.subset(all.subspan(static_cast<std::size_t>(n_val)));
    split.clients.push_back(std::move(cd));
  }
  return split;
}

DomainDataset concatenate(std::span<const DomainDataset> parts) {
  DomainDataset out;
  if (parts.empty()) return out;
  Index rows = 0;
  for (const auto& p : parts) rows += p.size();
  out.domain_id = parts.front().domain_id;
  out.images.resize(rows, parts.front().images.cols());
  Index at = 0;
  for (const auto& p : parts) {
    out.images.middleRows(at, p.size()) = p.images;
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    at += p.size();
  }
  return out;
}

Scalar accuracy(const Matrix& probs, std::span<const Index> labels) {
  if (probs.rows() == 0) throw DataError("accuracy of an empty set");
  const auto pred = argmax_rows(probs);
  Index hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
  return static_cast<Scalar>(hits) / static_cast<Scalar>(probs.rows());
}

BackboneParams warmup_backbone(BackboneParams backbone, const DomainDataset& pool,
                               const WarmupOptions& opts, std::span<const DomainDataset> check) {
  if (opts.steps <= 0) return backbone;
  if (pool.size() == 0) throw DataError("empty warmup pool");
  const auto& cfg = backbone.config;
  backbone.unfreeze();
  Adam adam(backbone.parameters(), opts.lr);
  auto rng = seeded({opts.seed, 0x3a3aULL});
  std::uniform_int_distribution<Index> pick(0, pool.size() - 1);
  const auto tokens = class_token_sequences(cfg);

  for (Index step = 0; step < opts.steps; ++step) {
    std::vector<Index> rows(static_cast<std::size_t>(opts.batch_size));
    for (auto& r : rows) r = pick(rng);
    const DomainDataset batch = pool.subset(rows);
    Tape tape;
    Var w = encode_text_plain(tape, backbone, tokens);
    Var f = encode_images_plain(tape, backbone, batch.images);
    Var loss = cross_entropy(classify(w, f, cfg.tau), batch.labels);
    tape.backward(loss);
    adam.step();
  }
  backbone.freeze();

  const Scalar threshold = opts.min_accuracy_over_chance / static_cast<Scalar>(cfg.n_classes);
  for (const auto& ds : check) {
    const Scalar acc = accuracy(zero_shot_distribution(backbone, ds.images), ds.labels);
    if (!(acc > threshold)) {
      std::ostringstream os;
      os << "warmup left zero-shot accuracy " << acc << " on domain " << ds.domain_id
         << " (needs > " << threshold << " ); increase warmup steps (currently " << opts.steps
         << ")";
      throw WarmupError(os.str());
    }
  }
  return backbone;
}

}  // namespace promptagg
