// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <span>
#include <sstream>

#include "json.hpp"

namespace promptagg {

using nlohmann::json;

namespace {

// Reads typed fields out of one JSON object and rejects keys it never saw.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("expected a boolean");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!it->is_number_unsigned()) throw ConfigError("expected a non-negative integer");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("expected a number");
      } else {
        if (!it->is_string()) throw ConfigError("expected a string");
      }
      out = it->get<T>();
    } catch (const std::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json& child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    static const json empty = json::object();
    return it == obj_.end() ? empty : *it;
  }

  std::string child_path(const char* key) const { return where(key); }

  void finish() const {
    for (const auto& [key, _] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError(where(key) + ": unknown field");
    }
  }

 private:
  std::string where(const std::string& key) const {
    if (path_.empty()) return key.empty() ? "config" : key;
    return key.empty() ? path_ : path_ + "." + key;
  }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

json model_json(const ModelConfig& m) {
  return {{"depth", m.depth},
          {"d_text", m.d_text},
          {"d_vis", m.d_vis},
          {"d_proj", m.d_proj},
          {"n_heads", m.n_heads},
          {"text_prompt_len", m.text_prompt_len},
          {"vis_prompt_len", m.vis_prompt_len},
          {"n_classes", m.n_classes},
          {"vocab_size", m.vocab_size},
          {"text_len", m.text_len},
          {"channels", m.channels},
          {"image_side", m.image_side},
          {"patch_side", m.patch_side},
          {"mlp_ratio", m.mlp_ratio},
          {"tau", m.tau},
          {"init_std", m.init_std}};
}

void read_model(const json& j, const std::string& path, ModelConfig& m) {
  ObjectReader r(j, path);
  r.read("depth", m.depth);
  r.read("d_text", m.d_text);
  r.read("d_vis", m.d_vis);
  r.read("d_proj", m.d_proj);
  r.read("n_heads", m.n_heads);
  r.read("text_prompt_len", m.text_prompt_len);
  r.read("vis_prompt_len", m.vis_prompt_len);
  r.read("n_classes", m.n_classes);
  r.read("vocab_size", m.vocab_size);
  r.read("text_len", m.text_len);
  r.read("channels", m.channels);
  r.read("image_side", m.image_side);
  r.read("patch_side", m.patch_side);
  r.read("mlp_ratio", m.mlp_ratio);
  r.read("tau", m.tau);
  r.read("init_std", m.init_std);
  r.finish();
}

void read_train(const json& j, const std::string& path, TrainConfig& t) {
  ObjectReader r(j, path);
  r.read("alpha", t.alpha);
  r.read("lr", t.lr);
  r.read("aggregator_lr", t.aggregator_lr);
  r.read("batch_size", t.batch_size);
  r.read("epochs", t.epochs);
  std::string opt = "sgd";
  r.read("optimizer", opt);
  if (opt != "sgd") throw ConfigError(path + ".optimizer: only \"sgd\" is supported");
  r.finish();
}

void read_data(const json& j, const std::string& path, DataConfig& d) {
  ObjectReader r(j, path);
  r.read("n_domains", d.n_domains);
  r.read("samples_per_class", d.samples_per_class);
  r.read("pattern_seed", d.pattern_seed);
  r.read("warmup_domains", d.warmup_domains);
  r.read("warmup_samples_per_class", d.warmup_samples_per_class);
  {
    ObjectReader w(r.child("warmup"), r.child_path("warmup"));
    w.read("steps", d.warmup.steps);
    w.read("batch_size", d.warmup.batch_size);
    w.read("lr", d.warmup.lr);
    w.read("seed", d.warmup.seed);
    w.read("min_accuracy_over_chance", d.warmup.min_accuracy_over_chance);
    w.finish();
  }
  r.finish();
}

json to_json_object(const ExperimentConfig& c) {
  const auto& w = c.data.warmup;
  return {
      {"model", model_json(c.model)},
      {"train",
       {{"alpha", c.train.alpha},
        {"lr", c.train.lr},
        {"aggregator_lr", c.train.aggregator_lr},
        {"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"optimizer", "sgd"}}},
      {"data",
       {{"n_domains", c.data.n_domains},
        {"samples_per_class", c.data.samples_per_class},
        {"pattern_seed", c.data.pattern_seed},
        {"warmup_domains", c.data.warmup_domains},
        {"warmup_samples_per_class", c.data.warmup_samples_per_class},
        {"warmup",
         {{"steps", w.steps},
          {"batch_size", w.batch_size},
          {"lr", w.lr},
          {"seed", w.seed},
          {"min_accuracy_over_chance", w.min_accuracy_over_chance}}}}},
      {"aggregator",
       {{"reduction", c.aggregator_init.reduction},
        {"init_std", c.aggregator_init.stddev},
        {"fa_out_init_std", c.aggregator_init.fa_out_stddev}}},
      {"prompt_init_std", c.prompt_init_std},
      {"clients", c.clients},
      {"rounds", c.rounds},
      {"held_out", c.held_out},
      {"method", method_name(c.method)},
      {"ablations",
       {{"disable_kl", c.ablations.disable_kl},
        {"disable_zsi", c.ablations.disable_zsi},
        {"avg_text_agg", c.ablations.avg_text_agg},
        {"avg_vis_agg", c.ablations.avg_vis_agg}}},
      {"seed", c.seed},
  };
}

ExperimentConfig from_json_object(const json& j) {
  ExperimentConfig c = config_profile("toy");
  ObjectReader r(j, "");
  read_model(r.child("model"), "model", c.model);
  read_train(r.child("train"), "train", c.train);
  read_data(r.child("data"), "data", c.data);
  {
    ObjectReader a(r.child("aggregator"), "aggregator");
    a.read("reduction", c.aggregator_init.reduction);
    a.read("init_std", c.aggregator_init.stddev);
    a.read("fa_out_init_std", c.aggregator_init.fa_out_stddev);
    a.finish();
  }
  r.read("prompt_init_std", c.prompt_init_std);
  r.read("clients", c.clients);
  r.read("rounds", c.rounds);
  r.read("held_out", c.held_out);
  std::string method = method_name(c.method);
  r.read("method", method);
  try {
    c.method = parse_method(method);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("method: ") + e.what());
  }
  {
    ObjectReader a(r.child("ablations"), "ablations");
    a.read("disable_kl", c.ablations.disable_kl);
    a.read("disable_zsi", c.ablations.disable_zsi);
    a.read("avg_text_agg", c.ablations.avg_text_agg);
    a.read("avg_vis_agg", c.ablations.avg_vis_agg);
    a.finish();
  }
  r.read("seed", c.seed);
  r.finish();
  return c;
}

}  // namespace

std::string method_name(Method method) {
  return method == Method::plan ? "plan" : "avg_baseline";
}

Method parse_method(std::string_view name) {
  if (name == "plan") return Method::plan;
  if (name == "avg_baseline") return Method::avg_baseline;
  throw ConfigError("unknown method '" + std::string(name) + "' (expected plan or avg_baseline)");
}

std::string config_to_json(const ExperimentConfig& cfg, int indent) {
  return to_json_object(cfg).dump(indent);
}

ExperimentConfig config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = from_json_object(j);
  c.validate();
  return c;
}

std::vector<std::string> profile_names() { return {"toy", "plan_toy", "full"}; }

ExperimentConfig config_profile(std::string_view name) {
  ExperimentConfig c;
  if (name == "toy" || name == "plan_toy") {
    c.model = ModelConfig::desk();
    // Desk-scale prompts need a much larger step than the full-scale 0.0015.
    c.train.lr = 0.05;
    c.train.aggregator_lr = 0.05;
    c.rounds = 10;
    return c;
  }
  if (name == "full") {
    c.model = ModelConfig::full_scale();
    c.train = TrainConfig{};  // alpha 1, lr 0.0015, batch 32, E = 1
    c.rounds = 20;
    c.data.n_domains = 4;
    return c;
  }
  throw ConfigError("unknown config profile '" + std::string(name) + "'");
}

ExperimentConfig load_config(const std::string& name_or_path) {
  for (const auto& p : profile_names()) {
    if (p == name_or_path) return config_profile(p);
  }
  std::ifstream in(name_or_path);
  if (!in) {
    throw ConfigError("config '" + name_or_path + "' is neither a profile nor a readable file");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' must look like key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json j = to_json_object(cfg);
  json* node = &j;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (!node->is_object() || !node->contains(path[i])) {
      throw ConfigError(key + ": unknown field");
    }
    node = &(*node)[path[i]];
  }
  if (node->is_object()) throw ConfigError(key + ": cannot assign to a section");
  *node = value;
  cfg = from_json_object(j);
}

void apply_overrides(ExperimentConfig& cfg, std::span<const std::string> assignments) {
  ExperimentConfig updated = cfg;
  for (const auto& a : assignments) apply_override(updated, a);
  updated.validate();
  cfg = std::move(updated);
}

void apply_ablation(ExperimentConfig& cfg, std::string_view flag) {
  if (flag == "disable_kl") {
    cfg.ablations.disable_kl = true;
  } else if (flag == "disable_zsi") {
    cfg.ablations.disable_zsi = true;
  } else if (flag == "avg_text_agg") {
    cfg.ablations.avg_text_agg = true;
  } else if (flag == "avg_vis_agg") {
    cfg.ablations.avg_vis_agg = true;
  } else {
    throw ConfigError("unknown ablation '" + std::string(flag) +
                      "' (expected disable_kl, disable_zsi, avg_text_agg, avg_vis_agg)");
  }
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = config_to_json(cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace promptagg
