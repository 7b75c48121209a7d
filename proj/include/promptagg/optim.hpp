// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "promptagg/tensor.hpp"

namespace promptagg {

/// Plain SGD, no momentum: x -= lr * grad. Tensors without a gradient are
/// left alone. Clears gradients afterwards.
void sgd_step(std::span<Tensor* const> params, Scalar lr);

/// Adam with bias correction.
class Adam {
 public:
  explicit Adam(std::vector<Tensor*> params, Scalar lr = 1e-3, Scalar beta1 = 0.9,
                Scalar beta2 = 0.999, Scalar eps = 1e-8);

  void step();
  void zero_grad();

 private:
  std::vector<Tensor*> params_;
  std::vector<Matrix> m_, v_;
  Scalar lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace promptagg
