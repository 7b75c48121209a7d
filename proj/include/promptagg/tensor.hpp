// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense 2-D tensors and a recorded-tape reverse-mode differentiator.
//
// Every numeric array in the library is a row-major `Matrix` of doubles.
// Vectors are 1×n rows. A `Tape` records primitive applications as they are
// evaluated; `Tape::backward` replays the recorded nodes in exact reverse
// order and accumulates gradients into every reachable trainable `Tensor`.
//
// Operations only record a node when at least one input needs a gradient, so
// a tape whose leaves are all frozen or constant is a plain evaluator.

#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "promptagg/errors.hpp"

namespace promptagg {

using Scalar = double;
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// A named parameter buffer with an optional gradient.
///
/// Shape is (rows, cols); data is row-major. A frozen tensor is never tracked
/// by a tape and refuses gradient accumulation.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false)
      : value_(std::move(value)), requires_grad_(requires_grad) {}

  static Tensor zeros(Index rows, Index cols) { return Tensor(Matrix::Zero(rows, cols)); }

  Index rows() const { return value_.rows(); }
  Index cols() const { return value_.cols(); }
  Index size() const { return value_.size(); }
  std::array<Index, 2> shape() const { return {value_.rows(), value_.cols()}; }

  const Matrix& value() const { return value_; }
  Matrix& value() { return value_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool frozen() const { return frozen_; }
  void freeze() {
    frozen_ = true;
    grad_.reset();
  }
  void unfreeze() { frozen_ = false; }

  /// True when the tape should track this tensor.
  bool trainable() const { return requires_grad_ && !frozen_; }

  bool has_grad() const { return grad_.has_value(); }
  const Matrix& grad() const;
  void zero_grad() const { grad_.reset(); }
  /// Gradient storage is not part of the tensor's logical value, so it may be
  /// accumulated through a const reference.
  void accumulate_grad(const Matrix& g) const;

 private:
  Matrix value_;
  mutable std::optional<Matrix> grad_;
  bool requires_grad_ = false;
  bool frozen_ = false;
};

class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; it and any reference
/// returned by `value()` stay valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A value with no gradient.
  Var constant(Matrix value);

  /// Reference to an externally owned tensor. The tensor must outlive the
  /// tape. Tracked iff `t.trainable()`; backward accumulates into its grad.
  Var leaf(const Tensor& t);

  /// Appends a primitive's output. `fn` runs during backward and should read
  /// `grad(out)` and push into inputs via `accumulate`. No node is
  /// recorded when `needs_grad` is false.
  Var record(Matrix value, bool needs_grad, BackwardFn fn);

  const Matrix& value(Var v) const;
  bool needs_grad(Var v) const { return slots_[v.id].needs_grad; }
  bool any_needs_grad(std::initializer_list<Var> vs) const;

  /// Gradient buffer of `v` during backward. Zeros if nothing flowed in.
  const Matrix& grad(Var v);

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    auto& s = slots_[v.id];
    if (!s.needs_grad) return;
    if (s.grad.size() == 0 && (value(v).size() > 0)) {
      s.grad = g;
    } else {
      s.grad += g;
    }
  }

  /// Reverse sweep from a 1×1 `loss`. Resets intermediate gradients first,
  /// so calling twice on the same tape adds the same contribution twice to
  /// leaf tensors (and is bitwise reproducible).
  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Slot {
    Matrix owned;
    const Matrix* view = nullptr;
    Matrix grad;
    bool needs_grad = false;
    const Tensor* leaf = nullptr;
  };
  struct Node {
    std::uint32_t output;
    BackwardFn fn;
  };

  Var push(Slot slot);

  std::deque<Slot> slots_;  // stable references across push_back
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitives. All operands must share a tape.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
/// `a` (n×d) plus a broadcast 1×d row.
Var add_row(Var a, Var row);
Var scale(Var a, Scalar s);
/// Tanh-approximation GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
Var gelu(Var x);
/// Row-wise layer normalization with affine 1×d gain and bias.
Var layer_norm(Var x, Var gain, Var bias, Scalar eps = 1e-5);
/// Numerically stable softmax along `axis` (1 = across each row).
Var softmax(Var x, int axis = 1);
Var transpose(Var x);
/// Row-major reinterpretation.
Var reshape(Var x, Index rows, Index cols);
Var sum(Var x);
Var mean(Var x);
Var l2_normalize_rows(Var x);
/// y_i = x_{indices_i}. Backward scatter-adds.
Var gather_rows(Var x, std::span<const Index> indices);
/// Stacks operands vertically; all must have the same column count.
Var concat_rows(std::span<const Var> parts);
/// Builds `batch` sequences, each laid out as (head_b, prompts, body_b).
/// head: batch×d, prompts: m×d (shared), body: (batch·n)×d.
Var assemble_sequences(Var head, Var prompts, Var body, Index batch);
/// Scaled dot-product attention over `batch` stacked sequences of
/// `seq_len` rows each, split into `n_heads` column groups. No masking.
Var scaled_dot_attention(Var q, Var k, Var v, Index seq_len, Index n_heads);

/// Self-attention projection weights. Weight matrices are (d_in × d_out).
struct AttentionParams {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
};

/// x·W + b.
Var linear(Var x, Var w, Var b);

/// Multi-head self-attention over a batch of stacked sequences.
Var multihead_attention(Tape& tape, Var x, const AttentionParams& p, Index n_heads,
                        Index seq_len);
/// Single sequence form: x is s×d.
Var multihead_attention(Tape& tape, Var x, const AttentionParams& p, Index n_heads);

// Value-only helpers.
Matrix softmax_rows(const Matrix& x);
Matrix gelu_value(const Matrix& x);

}  // namespace promptagg
