// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

namespace promptagg {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw ContractError("operands recorded on different tapes");
  }
  return *a.tape;
}

constexpr Scalar kGeluC = 0.044715;
const Scalar kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

const Matrix& Tensor::grad() const {
  if (!grad_) throw ContractError("tensor has no gradient");
  return *grad_;
}

void Tensor::accumulate_grad(const Matrix& g) const {
  if (frozen_) throw ContractError("frozen tensor cannot accumulate gradient");
  if (g.rows() != value_.rows() || g.cols() != value_.cols()) {
    throw DimensionError("gradient shape " + shape_str(g) + " does not match tensor " +
                         shape_str(value_));
  }
  if (grad_) {
    *grad_ += g;
  } else {
    grad_ = g;
  }
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::push(Slot slot) {
  slots_.push_back(std::move(slot));
  return Var{this, static_cast<std::uint32_t>(slots_.size() - 1)};
}

Var Tape::constant(Matrix value) {
  Slot s;
  s.owned = std::move(value);
  return push(std::move(s));
}

Var Tape::leaf(const Tensor& t) {
  Slot s;
  s.view = &t.value();
  s.needs_grad = t.trainable();
  s.leaf = s.needs_grad ? &t : nullptr;
  return push(std::move(s));
}

Var Tape::record(Matrix value, bool needs_grad, BackwardFn fn) {
  Slot s;
  s.owned = std::move(value);
  s.needs_grad = needs_grad;
  Var v = push(std::move(s));
  if (needs_grad) nodes_.push_back(Node{v.id, std::move(fn)});
  return v;
}

const Matrix& Tape::value(Var v) const {
  const Slot& s = slots_[v.id];
  return s.view ? *s.view : s.owned;
}

bool Tape::any_needs_grad(std::initializer_list<Var> vs) const {
  for (Var v : vs) {
    if (slots_[v.id].needs_grad) return true;
  }
  return false;
}

const Matrix& Tape::grad(Var v) {
  Slot& s = slots_[v.id];
  if (s.grad.size() == 0) {
    const Matrix& val = value(v);
    s.grad = Matrix::Zero(val.rows(), val.cols());
  }
  return s.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("loss was not recorded on this tape");
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_str(lv));
  }
  for (Slot& s : slots_) s.grad.resize(0, 0);
  if (!slots_[loss.id].needs_grad) return;
  slots_[loss.id].grad = Matrix::Ones(1, 1);

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output > loss.id) continue;
    if (slots_[it->output].grad.size() == 0) continue;
    it->fn(*this, Var{this, it->output});
  }
  for (Slot& s : slots_) {
    if (s.leaf != nullptr && s.grad.size() > 0) s.leaf->accumulate_grad(s.grad);
  }
}

// ---------------------------------------------------------------------------
// Primitives

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(av) + " x " +
                         shape_str(bv));
  }
  Matrix out(av.rows(), bv.cols());
  out.noalias() = av * bv;
  return t.record(std::move(out), t.any_needs_grad({a, b}), [a, b](Tape& tp, Var c) {
    const Matrix& g = tp.grad(c);
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw DimensionError("add: shapes differ, " + shape_str(av) + " vs " + shape_str(bv));
  }
  return t.record(av + bv, t.any_needs_grad({a, b}), [a, b](Tape& tp, Var c) {
    const Matrix& g = tp.grad(c);
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row: cannot broadcast " + shape_str(rv) + " over " +
                         shape_str(av));
  }
  Matrix out = av;
  out.rowwise() += rv.row(0);
  return t.record(std::move(out), t.any_needs_grad({a, row}), [a, row](Tape& tp, Var c) {
    const Matrix& g = tp.grad(c);
    tp.accumulate(a, g);
    if (tp.needs_grad(row)) tp.accumulate(row, g.colwise().sum());
  });
}

Var scale(Var a, Scalar s) {
  Tape& t = *a.tape;
  return t.record(a.value() * s, t.needs_grad(a),
                  [a, s](Tape& tp, Var c) { tp.accumulate(a, tp.grad(c) * s); });
}

Matrix gelu_value(const Matrix& x) {
  return x.unaryExpr([](Scalar v) {
    const Scalar u = kSqrt2OverPi * (v + kGeluC * v * v * v);
    return 0.5 * v * (1.0 + std::tanh(u));
  });
}

Var gelu(Var x) {
  Tape& t = *x.tape;
  return t.record(gelu_value(x.value()), t.needs_grad(x), [x](Tape& tp, Var c) {
    const Matrix& xv = tp.value(x);
    Matrix d = xv.unaryExpr([](Scalar v) {
      const Scalar u = kSqrt2OverPi * (v + kGeluC * v * v * v);
      const Scalar th = std::tanh(u);
      const Scalar du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * v * v);
      return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
    });
    tp.accumulate(x, tp.grad(c).cwiseProduct(d));
  });
}

Var layer_norm(Var x, Var gain, Var bias, Scalar eps) {
  Tape& t = same_tape(x, gain);
  same_tape(x, bias);
  const Matrix& xv = x.value();
  const Index d = xv.cols();
  if (d < 1) throw DimensionError("layer_norm: feature width must be >= 1");
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw DimensionError("layer_norm: affine parameters must be 1x" + std::to_string(d));
  }
  const Index n = xv.rows();
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar mu = xv.row(i).mean();
    const Scalar var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat;
  out.array().rowwise() *= gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return t.record(std::move(out), t.any_needs_grad({x, gain, bias}),
                  [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Tape& tp, Var c) {
                    const Matrix& g = tp.grad(c);
                    if (tp.needs_grad(gain)) {
                      tp.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                    }
                    if (tp.needs_grad(bias)) tp.accumulate(bias, g.colwise().sum());
                    if (!tp.needs_grad(x)) return;
                    Matrix dxhat = g;
                    dxhat.array().rowwise() *= tp.value(gain).row(0).array();
                    Matrix dx(g.rows(), g.cols());
                    for (Index i = 0; i < g.rows(); ++i) {
                      const Scalar m1 = dxhat.row(i).mean();
                      const Scalar m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                      dx.row(i) = inv_std(i) *
                                  (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
                    }
                    tp.accumulate(x, dx);
                  });
}

Matrix softmax_rows(const Matrix& x) {
  if (x.hasNaN()) throw NumericError("softmax: NaN input");
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    if (x.cols() == 0) continue;
    const Scalar mx = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - mx).unaryExpr([](Scalar v) { return std::exp(v); }).matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

namespace {

Var softmax_rows_var(Var x) {
  Tape& t = *x.tape;
  return t.record(softmax_rows(x.value()), t.needs_grad(x), [x](Tape& tp, Var c) {
    const Matrix& y = tp.value(c);
    const Matrix& g = tp.grad(c);
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = g;
    dx.colwise() -= dot;
    tp.accumulate(x, dx.cwiseProduct(y));
  });
}

}  // namespace

Var softmax(Var x, int axis) {
  if (axis == 1) return softmax_rows_var(x);
  if (axis == 0) return transpose(softmax_rows_var(transpose(x)));
  throw DimensionError("softmax: axis must be 0 or 1");
}

Var transpose(Var x) {
  Tape& t = *x.tape;
  return t.record(x.value().transpose(), t.needs_grad(x),
                  [x](Tape& tp, Var c) { tp.accumulate(x, tp.grad(c).transpose()); });
}

Var reshape(Var x, Index rows, Index cols) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  if (rows * cols != xv.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(xv) + " as [" +
                         std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  Matrix out = Eigen::Map<const Matrix>(xv.data(), rows, cols);
  return t.record(std::move(out), t.needs_grad(x), [x](Tape& tp, Var c) {
    const Matrix& g = tp.grad(c);
    const Matrix& xv2 = tp.value(x);
    tp.accumulate(x, Eigen::Map<const Matrix>(g.data(), xv2.rows(), xv2.cols()));
  });
}

Var sum(Var x) {
  Tape& t = *x.tape;
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return t.record(std::move(out), t.needs_grad(x), [x](Tape& tp, Var c) {
    const Matrix& xv = tp.value(x);
    tp.accumulate(x, Matrix::Constant(xv.rows(), xv.cols(), tp.grad(c)(0, 0)));
  });
}

Var mean(Var x) {
  const Index n = x.value().size();
  if (n == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<Scalar>(n));
}

Var l2_normalize_rows(Var x) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  Eigen::VectorXd norms = xv.rowwise().norm();
  if ((norms.array() == 0.0).any()) throw NumericError("l2_normalize_rows: zero-norm row");
  Matrix out = norms.asDiagonal().inverse() * xv;
  return t.record(std::move(out), t.needs_grad(x),
                  [x, norms = std::move(norms)](Tape& tp, Var c) {
                    const Matrix& y = tp.value(c);
                    const Matrix& g = tp.grad(c);
                    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
                    Matrix dx = g - dot.asDiagonal() * y;
                    tp.accumulate(x, norms.asDiagonal().inverse() * dx);
                  });
}

Var gather_rows(Var x, std::span<const Index> indices) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  Matrix out(static_cast<Index>(indices.size()), xv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= xv.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) +
                           " out of range for " + shape_str(xv));
    }
    out.row(static_cast<Index>(i)) = xv.row(indices[i]);
  }
  std::vector<Index> idx(indices.begin(), indices.end());
  return t.record(std::move(out), t.needs_grad(x), [x, idx = std::move(idx)](Tape& tp, Var c) {
    const Matrix& g = tp.grad(c);
    const Matrix& xv2 = tp.value(x);
    Matrix dx = Matrix::Zero(xv2.rows(), xv2.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) dx.row(idx[i]) += g.row(static_cast<Index>(i));
    tp.accumulate(x, dx);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  Tape& t = *parts.front().tape;
  Index rows = 0;
  bool grad = false;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    if (p.value().cols() != parts.front().value().cols()) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().value()) +
                           " vs " + shape_str(p.value()));
    }
    rows += p.value().rows();
    grad = grad || t.needs_grad(p);
  }
  Matrix out(rows, parts.front().value().cols());
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.value().rows()) = p.value();
    at += p.value().rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.record(std::move(out), grad, [ps = std::move(ps)](Tape& tp, Var c) {
    const Matrix& g = tp.grad(c);
    Index offset = 0;
    for (const Var& p : ps) {
      const Index n = tp.value(p).rows();
      if (tp.needs_grad(p)) tp.accumulate(p, g.middleRows(offset, n));
      offset += n;
    }
  });
}

Var assemble_sequences(Var head, Var prompts, Var body, Index batch) {
  Tape& t = same_tape(head, prompts);
  same_tape(head, body);
  const Matrix& hv = head.value();
  const Matrix& pv = prompts.value();
  const Matrix& bv = body.value();
  const Index d = hv.cols();
  if (batch < 1 || hv.rows() != batch || pv.cols() != d || bv.cols() != d ||
      bv.rows() % batch != 0) {
    throw DimensionError("assemble_sequences: head " + shape_str(hv) + ", prompts " +
                         shape_str(pv) + ", body " + shape_str(bv) + " for batch " +
                         std::to_string(batch));
  }
  const Index m = pv.rows();
  const Index n = bv.rows() / batch;
  const Index s = 1 + m + n;
  Matrix out(batch * s, d);
  for (Index b = 0; b < batch; ++b) {
    out.row(b * s) = hv.row(b);
    if (m > 0) out.middleRows(b * s + 1, m) = pv;
    if (n > 0) out.middleRows(b * s + 1 + m, n) = bv.middleRows(b * n, n);
  }
  return t.record(std::move(out), t.any_needs_grad({head, prompts, body}),
                  [head, prompts, body, batch, m, n, s](Tape& tp, Var c) {
                    const Matrix& g = tp.grad(c);
                    const Index d2 = g.cols();
                    if (tp.needs_grad(head)) {
                      Matrix dh(batch, d2);
                      for (Index b = 0; b < batch; ++b) dh.row(b) = g.row(b * s);
                      tp.accumulate(head, dh);
                    }
                    if (tp.needs_grad(prompts) && m > 0) {
                      Matrix dp = Matrix::Zero(m, d2);
                      for (Index b = 0; b < batch; ++b) dp += g.middleRows(b * s + 1, m);
                      tp.accumulate(prompts, dp);
                    }
                    if (tp.needs_grad(body) && n > 0) {
                      Matrix db(batch * n, d2);
                      for (Index b = 0; b < batch; ++b) {
                        db.middleRows(b * n, n) = g.middleRows(b * s + 1 + m, n);
                      }
                      tp.accumulate(body, db);
                    }
                  });
}

Var scaled_dot_attention(Var q, Var k, Var v, Index seq_len, Index n_heads) {
  Tape& t = same_tape(q, k);
  same_tape(q, v);
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  const Index rows = qv.rows();
  const Index d = qv.cols();
  if (kv.rows() != rows || vv.rows() != rows || kv.cols() != d || vv.cols() != d) {
    throw DimensionError("attention: q " + shape_str(qv) + ", k " + shape_str(kv) + ", v " +
                         shape_str(vv) + " must agree");
  }
  if (n_heads < 1 || d % n_heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  if (seq_len < 1 || rows % seq_len != 0) {
    throw DimensionError("attention: " + std::to_string(rows) +
                         " rows is not a whole number of sequences of length " +
                         std::to_string(seq_len));
  }
  const Index batch = rows / seq_len;
  const Index dh = d / n_heads;
  const Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(dh));

  Matrix out(rows, d);
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * n_heads));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < n_heads; ++h) {
      auto qb = qv.block(b * seq_len, h * dh, seq_len, dh);
      auto kb = kv.block(b * seq_len, h * dh, seq_len, dh);
      auto vb = vv.block(b * seq_len, h * dh, seq_len, dh);
      Matrix logits(seq_len, seq_len);
      logits.noalias() = (qb * kb.transpose()) * inv_sqrt;
      Matrix p = softmax_rows(logits);
      out.block(b * seq_len, h * dh, seq_len, dh).noalias() = p * vb;
      probs[static_cast<std::size_t>(b * n_heads + h)] = std::move(p);
    }
  }
  return t.record(
      std::move(out), t.any_needs_grad({q, k, v}),
      [q, k, v, seq_len, n_heads, batch, dh, inv_sqrt, probs = std::move(probs)](Tape& tp,
                                                                                 Var c) {
        const Matrix& g = tp.grad(c);
        const Matrix& qv2 = tp.value(q);
        const Matrix& kv2 = tp.value(k);
        const Matrix& vv2 = tp.value(v);
        const bool need_q = tp.needs_grad(q);
        const bool need_k = tp.needs_grad(k);
        const bool need_v = tp.needs_grad(v);
        Matrix dq = need_q ? Matrix::Zero(qv2.rows(), qv2.cols()) : Matrix();
        Matrix dk = need_k ? Matrix::Zero(kv2.rows(), kv2.cols()) : Matrix();
        Matrix dv = need_v ? Matrix::Zero(vv2.rows(), vv2.cols()) : Matrix();
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < n_heads; ++h) {
            const Matrix& p = probs[static_cast<std::size_t>(b * n_heads + h)];
            auto gb = g.block(b * seq_len, h * dh, seq_len, dh);
            auto vb = vv2.block(b * seq_len, h * dh, seq_len, dh);
            if (need_v) dv.block(b * seq_len, h * dh, seq_len, dh).noalias() = p.transpose() * gb;
            if (!need_q && !need_k) continue;
            Matrix dp(seq_len, seq_len);
            dp.noalias() = gb * vb.transpose();
            Eigen::VectorXd dot = dp.cwiseProduct(p).rowwise().sum();
            dp.colwise() -= dot;
            Matrix dlogits = p.cwiseProduct(dp) * inv_sqrt;
            if (need_q) {
              dq.block(b * seq_len, h * dh, seq_len, dh).noalias() =
                  dlogits * kv2.block(b * seq_len, h * dh, seq_len, dh);
            }
            if (need_k) {
              dk.block(b * seq_len, h * dh, seq_len, dh).noalias() =
                  dlogits.transpose() * qv2.block(b * seq_len, h * dh, seq_len, dh);
            }
          }
        }
        if (need_q) tp.accumulate(q, dq);
        if (need_k) tp.accumulate(k, dk);
        if (need_v) tp.accumulate(v, dv);
      });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var multihead_attention(Tape& tape, Var x, const AttentionParams& p, Index n_heads,
                        Index seq_len) {
  const Index d = x.cols();
  if (n_heads < 1 || d % n_heads != 0) {
    throw ConfigError("multihead_attention: width " + std::to_string(d) +
                      " not divisible by " + std::to_string(n_heads) + " heads");
  }
  Var q = linear(x, tape.leaf(p.w_q), tape.leaf(p.b_q));
  Var k = linear(x, tape.leaf(p.w_k), tape.leaf(p.b_k));
  Var v = linear(x, tape.leaf(p.w_v), tape.leaf(p.b_v));
  Var a = scaled_dot_attention(q, k, v, seq_len, n_heads);
  return linear(a, tape.leaf(p.w_o), tape.leaf(p.b_o));
}

Var multihead_attention(Tape& tape, Var x, const AttentionParams& p, Index n_heads) {
  return multihead_attention(tape, x, p, n_heads, x.rows());
}

}  // namespace promptagg
