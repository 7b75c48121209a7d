// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration as JSON, named profiles, and `key=value`
// overrides addressed by dotted paths (e.g. `train.alpha=0.5`).

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "promptagg/federation.hpp"

namespace promptagg {

std::string method_name(Method method);
/// "plan" or "avg_baseline"; anything else is a ConfigError.
Method parse_method(std::string_view name);

std::string config_to_json(const ExperimentConfig& cfg, int indent = -1);
/// Strict: unknown keys and wrong types are ConfigErrors naming the field.
/// Missing keys keep the defaults of the desk profile.
ExperimentConfig config_from_json(std::string_view text);

/// "toy" (desk-scale, used by tests), "plan_toy" (alias), "full"
/// (full-scale sizes and hyperparameters).
ExperimentConfig config_profile(std::string_view name);
std::vector<std::string> profile_names();

/// A profile name or a path to a JSON file.
ExperimentConfig load_config(const std::string& name_or_path);

/// `path=value`; the value is parsed as JSON, falling back to a string.
/// Sets one dotted field from `key=value`; the value is parsed as JSON and
/// falls back to a plain string. Types are checked, cross-field rules are not.
void apply_override(ExperimentConfig& cfg, std::string_view assignment);
/// Applies every override, then validates the result once. `cfg` is left
/// unchanged on error.
void apply_overrides(ExperimentConfig& cfg, std::span<const std::string> assignments);
/// One of disable_kl, disable_zsi, avg_text_agg, avg_vis_agg.
void apply_ablation(ExperimentConfig& cfg, std::string_view flag);

/// 16 hex digits identifying the resolved configuration.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace promptagg
