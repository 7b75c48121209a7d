// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Test-only oracles: central finite differences and seeded random matrices.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "promptagg/tensor.hpp"

namespace promptagg::testing {

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, Scalar lo = -1.0,
                            Scalar hi = 1.0) {
  std::uniform_real_distribution<Scalar> dist(lo, hi);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

/// Relative error with a 1e-6 floor on the magnitude.
inline Scalar rel_err(Scalar analytic, Scalar numeric) {
  const Scalar denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// Builds a scalar loss on a fresh tape. Must read parameters through
/// `tape.leaf` so perturbations are visible.
using LossFn = std::function<Var(Tape&)>;

inline Scalar eval_loss(const LossFn& f) {
  Tape tape;
  return f(tape).value()(0, 0);
}

/// Max relative error between tape gradients and central differences over
/// every entry of every tensor in `params`. Tensors must be trainable.
inline Scalar max_fd_rel_error(const LossFn& f, const std::vector<Tensor*>& params,
                               Scalar h = 1e-5) {
  for (Tensor* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  Scalar worst = 0.0;
  for (Tensor* p : params) {
    const Matrix analytic =
        p->has_grad() ? p->grad() : Matrix::Zero(p->rows(), p->cols()).eval();
    for (Index i = 0; i < p->size(); ++i) {
      Scalar& x = p->value().data()[i];
      const Scalar orig = x;
      x = orig + h;
      const Scalar fp = eval_loss(f);
      x = orig - h;
      const Scalar fm = eval_loss(f);
      x = orig;
      const Scalar numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic.data()[i], numeric));
    }
  }
  return worst;
}

}  // namespace promptagg::testing
