#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "hamil/tensor.hpp"

namespace hamil {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient record.
///
/// Nodes are appended in evaluation order, so the append order is already a
/// topological order and backward() simply walks it in reverse. A tape is
/// single-owner; build one per thread when sharding a batch.
class Tape {
 public:
  /// Receives the gradient flowing into the node and pushes contributions to
  /// its parents through accumulate().
  using BackwardFn = std::function<void(const Tensor& out_grad, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A trainable input; receives a gradient on backward().
  Var leaf(Tensor value);
  /// A fixed input; never receives a gradient.
  Var constant(Tensor value);

  /// Records an operation result. Used by the primitives and by custom
  /// operations such as the ground-state solve.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn fn, const char* op);

  /// Adds `g` into the gradient slot of `v` (no-op for constants).
  void accumulate(const Var& v, const Tensor& g);

  /// Backpropagates from a scalar loss. Throws if called twice without reset().
  void backward(const Var& loss);

  /// Gradient of the last backward() with respect to `v`; zeros if none flowed.
  Tensor grad(const Var& v) const;

  bool requires_grad(const Var& v) const { return nodes_.at(v.id()).requires_grad; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  std::size_t size() const { return nodes_.size(); }
  void reset();

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    const char* op = "";
  };

  // deque keeps references returned by value() stable while recording.
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// ---- primitives -----------------------------------------------------------
// Every primitive validates shapes, checks its result for NaN/Inf and records
// itself on the tape of its first operand.

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);             // elementwise
Var mul_scalar(const Var& a, const Var& s);      // a * s, s is 1x1
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_row_broadcast(const Var& a, const Var& row);  // a[i,:] + row
Var neg(const Var& a);
Var square(const Var& a);
Var reciprocal(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var relu(const Var& a);
Var clamp_min(const Var& a, double floor);
Var sum(const Var& a);        // -> 1x1
Var mean(const Var& a);       // -> 1x1
Var sum_rows(const Var& a);   // -> rows x 1, each row summed
Var diag_embed(const Var& v);  // 1xN or Nx1 -> NxN
Var transpose(const Var& a);
Var slice(const Var& a, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& a, std::span<const std::size_t> rows);
/// One entry per row: out[i] = a[i, cols[i]]; -> rows x 1.
Var select_cols(const Var& a, std::span<const std::size_t> cols);
/// Row-wise numerically stable log-softmax.
Var log_softmax_rows(const Var& a);
/// Symmetric NxN matrix with out[i,j] = out[j,i] = values[e] for edge e=(i,j).
Var scatter_symmetric(const Var& values, std::span<const std::pair<std::size_t, std::size_t>> edges,
                      std::size_t n);

}  // namespace hamil
