#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evl/tensor.hpp"

namespace evl {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

// Access to adjoints inside a backward rule.
class BackwardContext {
 public:
  BackwardContext(Tape& tape, std::uint32_t node) : tape_(tape), node_(node) {}

  const Tensor& out_value() const;
  const Tensor& out_grad() const;
  const Tensor& input(std::size_t k) const;
  // Adjoint buffer of input k, or nullptr when that input needs no gradient.
  Tensor* grad(std::size_t k);

 private:
  Tape& tape_;
  std::uint32_t node_;
};

using BackwardRule = std::function<void(BackwardContext&)>;

// Records primitive operations in execution order, which is a topological
// order, and replays adjoints in reverse. A tape supports exactly one
// backward() call; build a fresh tape for every evaluation.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);

  // Appends a node. The rule is dropped when no input requires a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardRule rule);

  void backward(Var root);
  bool backward_done() const { return backward_done_; }

  // Adjoint of a node after backward(); zeros when the node was not reached.
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::uint32_t> inputs;
    BackwardRule rule;
    bool requires_grad = false;
  };

  Tensor& grad_buffer(std::uint32_t id);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- primitives -----------------------------------------------------------
// Binary elementwise ops accept either equal shapes or a 1x1 right operand.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var neg(Var a);

Var matmul(Var a, Var b);
Var transpose(Var a);

Var sum(Var a);
Var mean(Var a);
// Column means of an m x n matrix as a 1 x n row.
Var mean_rows(Var a);
// Row sums of an m x n matrix as an m x 1 column.
Var row_sums(Var a);

Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var square(Var a);
// max(a, floor) elementwise; gradient passes where a > floor.
Var clamp_min(Var a, double floor);
Var gelu(Var a);

Var softmax_rows(Var a);
// Rows with norm below floor are divided by floor instead of their norm.
Var l2_normalize_rows(Var a, double floor);
// Euclidean norm of every row as an m x 1 column; zero rows get a zero gradient.
Var row_norms(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// X (m x n) plus a 1 x n row added to every row.
Var add_row(Var x, Var row);

Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var slice_rows(Var a, std::size_t begin, std::size_t count);

// out[i][j] = ||a_i - b_j||^2, computed from explicit differences.
Var sq_distance_matrix(Var a, Var b);
// out[i][j] = ||x_i - x_j||; zero distances get a zero subgradient.
Var pairwise_distance(Var x);

// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
Var bce_with_logits(Var logits, const Tensor& targets);

// Same value, no gradient path.
Var detach(Var a);

// ---- gradient checking -----------------------------------------------------

struct CheckReport {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_input = 0;
  std::size_t worst_coordinate = 0;
  bool passed = false;
};

using MultiFunction = std::function<Var(Tape&, std::span<const Var>)>;
using SingleFunction = std::function<Var(Tape&, Var)>;

// Compares reverse-mode gradients with central differences
// (f(x+he) - f(x-he)) / 2h on every coordinate of every input. The relative
// error of a coordinate is |analytic - numeric| / max(|analytic|, |numeric|,
// 1e-3 * max|numeric| over the input, 1e-10).
CheckReport finite_diff_check(const MultiFunction& f, const std::vector<Tensor>& inputs,
                              double step, double tol);
CheckReport finite_diff_check(const SingleFunction& f, const Tensor& x, double step, double tol);

}  // namespace evl
