// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace promptagg {

namespace {

void check_labels(const Matrix& probs, std::span<const Index> labels) {
  if (static_cast<Index>(labels.size()) != probs.rows()) {
    throw DataError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(probs.rows()) + " rows");
  }
  if (probs.rows() == 0) throw DataError("cross_entropy: empty batch");
  for (Index y : labels) {
    if (y < 0 || y >= probs.cols()) {
      throw DataError("label " + std::to_string(y) + " outside [0, " +
                      std::to_string(probs.cols()) + ")");
    }
  }
}

void check_pair(const Matrix& ref, const Matrix& probs) {
  if (ref.rows() != probs.rows() || ref.cols() != probs.cols()) {
    throw DimensionError("kl_divergence: reference and prediction shapes differ");
  }
  if (probs.rows() == 0) throw DataError("kl_divergence: empty batch");
}

}  // namespace

Scalar cross_entropy(const Matrix& probs, std::span<const Index> labels) {
  check_labels(probs, labels);
  Scalar total = 0.0;
  for (Index i = 0; i < probs.rows(); ++i) {
    total -= std::log(std::max(probs(i, labels[static_cast<std::size_t>(i)]), kLogClamp));
  }
  return total / static_cast<Scalar>(probs.rows());
}

Var cross_entropy(Var probs, std::span<const Index> labels) {
  Tape& t = *probs.tape;
  Matrix out(1, 1);
  out(0, 0) = cross_entropy(probs.value(), labels);
  std::vector<Index> ys(labels.begin(), labels.end());
  return t.record(std::move(out), t.needs_grad(probs), [probs, ys = std::move(ys)](Tape& tp, Var c) {
    const Matrix& p = tp.value(probs);
    const Scalar g = tp.grad(c)(0, 0);
    const Scalar n = static_cast<Scalar>(p.rows());
    Matrix d = Matrix::Zero(p.rows(), p.cols());
    for (Index i = 0; i < p.rows(); ++i) {
      const Index y = ys[static_cast<std::size_t>(i)];
      if (p(i, y) >= kLogClamp) d(i, y) = -g / (n * p(i, y));
    }
    tp.accumulate(probs, d);
  });
}

Scalar kl_divergence(const Matrix& ref, const Matrix& probs, bool* clamped) {
  check_pair(ref, probs);
  Scalar total = 0.0;
  bool hit = false;
  for (Index i = 0; i < ref.rows(); ++i) {
    for (Index j = 0; j < ref.cols(); ++j) {
      const Scalar r = ref(i, j);
      if (r <= 0.0) continue;
      if (probs(i, j) < kLogClamp) hit = true;
      total += r * (std::log(r) - std::log(std::max(probs(i, j), kLogClamp)));
    }
  }
  if (clamped) *clamped = hit;
  return total / static_cast<Scalar>(ref.rows());
}

Var kl_divergence(const Matrix& ref, Var probs, bool* clamped) {
  Tape& t = *probs.tape;
  Matrix out(1, 1);
  out(0, 0) = kl_divergence(ref, probs.value(), clamped);
  return t.record(std::move(out), t.needs_grad(probs), [probs, ref](Tape& tp, Var c) {
    const Matrix& p = tp.value(probs);
    const Scalar g = tp.grad(c)(0, 0);
    const Scalar n = static_cast<Scalar>(p.rows());
    Matrix d = Matrix::Zero(p.rows(), p.cols());
    for (Index i = 0; i < p.rows(); ++i) {
      for (Index j = 0; j < p.cols(); ++j) {
        if (ref(i, j) > 0.0 && p(i, j) >= kLogClamp) d(i, j) = -g * ref(i, j) / (n * p(i, j));
      }
    }
    tp.accumulate(probs, d);
  });
}

}  // namespace promptagg
