// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/optim.hpp"

#include <cmath>

namespace promptagg {

void sgd_step(std::span<Tensor* const> params, Scalar lr) {
  for (Tensor* p : params) {
    if (!p->has_grad()) continue;
    if (lr != 0.0) p->value() -= lr * p->grad();
    p->zero_grad();
  }
}

Adam::Adam(std::vector<Tensor*> params, Scalar lr, Scalar beta1, Scalar beta2, Scalar eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (Tensor* p : params_) {
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

void Adam::step() {
  ++t_;
  const Scalar c1 = 1.0 - std::pow(beta1_, static_cast<Scalar>(t_));
  const Scalar c2 = 1.0 - std::pow(beta2_, static_cast<Scalar>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor* p = params_[i];
    if (!p->has_grad()) continue;
    const Matrix& g = p->grad();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    p->value().array() -=
        lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

}  // namespace promptagg
