// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Classification losses over probability rows. Logarithm arguments are
// clamped at 1e-12; where the clamp is active the gradient is zero.

#pragma once

#include <span>

#include "promptagg/tensor.hpp"

namespace promptagg {

inline constexpr Scalar kLogClamp = 1e-12;

/// -(1/N) Σ_i log p_{i, y_i}. Labels are 0-based; out of range is DataError.
Scalar cross_entropy(const Matrix& probs, std::span<const Index> labels);
Var cross_entropy(Var probs, std::span<const Index> labels);

/// (1/N) Σ_i Σ_j r_ij log(r_ij / p_ij) with the reference distribution `ref`
/// as the first argument. Terms with r_ij = 0 contribute 0. `clamped`, if
/// given, is set when some p_ij < 1e-12 had r_ij > 0.
Scalar kl_divergence(const Matrix& ref, const Matrix& probs, bool* clamped = nullptr);
/// Gradient flows into `probs` only.
Var kl_divergence(const Matrix& ref, Var probs, bool* clamped = nullptr);

}  // namespace promptagg
