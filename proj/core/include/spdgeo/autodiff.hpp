#pragma once

// Reverse-mode differentiation over matrix-valued nodes.
//
// A Tape records one forward pass. Every node stores its primal value and a
// closure that maps the node's adjoint onto its inputs. backward() walks the
// tape once in reverse, so the cost is linear in the number of input edges.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "spdgeo/spd.hpp"

namespace spdgeo::ad {

enum class Kind { Scalar, Vector, Matrix, Sym };

struct Shape {
  Kind kind;
  int rows;
  int cols;

  static Shape scalar() { return {Kind::Scalar, 1, 1}; }
  static Shape vector(int n) { return {Kind::Vector, n, 1}; }
  static Shape matrix(int r, int c) { return {Kind::Matrix, r, c}; }
  static Shape sym(int d) { return {Kind::Sym, d, d}; }
};

std::string to_string(const Shape& s);

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  int id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  const Mat& value() const;
  const Shape& shape() const;
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Receives one adjoint contribution per input edge.
class AdjointSink {
 public:
  void add(std::size_t input, const Mat& contribution);

 private:
  friend class Tape;
  AdjointSink(Tape& tape, std::span<const int> inputs) : tape_(tape), inputs_(inputs) {}
  Tape& tape_;
  std::span<const int> inputs_;
};

using BackwardFn = std::function<void(const Mat& out_grad, AdjointSink& sink)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Mat value, Kind kind = Kind::Matrix);
  /// Non-differentiable input; gradients are not propagated into it.
  Var constant(Mat value, Kind kind = Kind::Matrix);

  /// Records an operation node. `fn` may be empty for nodes without inputs.
  Var record(Mat value, Shape shape, std::vector<int> inputs, BackwardFn fn);

  /// Populates gradients for every node reachable from `loss`. Throws
  /// ShapeError if `loss` is not scalar. May be called once per tape.
  void backward(const Var& loss);

  /// Gradient of a node after backward(); zero if unreachable.
  Mat grad(const Var& v) const;

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Shape& shape(int id) const { return nodes_[static_cast<std::size_t>(id)].shape; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t edge_count() const noexcept;
  /// Number of adjoint accumulations performed by the last backward().
  std::size_t accumulations() const noexcept { return accumulations_; }

 private:
  friend class AdjointSink;

  struct Node {
    Mat value;
    Mat grad;
    Shape shape;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  void accumulate(int id, const Mat& contribution);

  std::vector<Node> nodes_;
  std::size_t accumulations_ = 0;
  bool backward_done_ = false;
};

// --- elementwise and linear ------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Multiply by a constant.
Var scale(const Var& a, double s);
/// Adds a constant to every entry.
Var add_scalar(const Var& a, double s);
/// Scalar node times any node.
Var mul(const Var& scalar, const Var& x);
/// Scalar division a / b.
Var div(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum(const Var& a);
/// Extracts entry i of a vector node as a scalar.
Var element(const Var& v, int i);
/// Arithmetic mean of equally shaped nodes.
Var mean(std::span<const Var> xs);

// --- matrix geometry --------------------------------------------------------

/// W^T C W. C is symmetric (d_in x d_in), W is d_in x d_out.
Var congruence(const Var& c, const Var& w);
/// C + eps I.
Var add_identity(const Var& c, double eps);
/// Ascending eigenvalues of a symmetric node.
Var eigenvalues(const Var& c);
/// Matrix logarithm of an SPD node (clamped spectrum), Daleckii-Krein adjoint.
Var matrix_log(const Var& c);
/// Matrix exponential of a symmetric node.
Var matrix_exp(const Var& s);
/// exp(A - A^T) for a square generator A. Pade(7) scaling and squaring.
Var matrix_exp_skew(const Var& a);
/// Log-Euclidean merge exp((log A + log B)/2).
Var merge(const Var& a, const Var& b);
/// log(W^T C W + eps I); forward value from mat::log_stabilized_congruence.
Var log_stabilized_congruence(const Var& c, const Var& w, double eps);

Var frobenius_norm_sq(const Var& x);
Var trace(const Var& x);
Var offdiag_norm_sq(const Var& x);
/// Upper-triangle vectorization with sqrt(2) off-diagonal weighting.
Var vec_upper(const Var& s);
Var softplus(const Var& x);

// --- batches and heads ------------------------------------------------------

/// Stacks N vector nodes of length p into an N x p matrix.
Var stack_rows(std::span<const Var> rows);
/// X W + 1 b^T with X (N x p), W (p x q), b (q). `b` may be a default Var.
Var linear(const Var& x, const Var& w, const Var& b = Var{});
/// Row-wise log-softmax.
Var log_softmax(const Var& logits);
/// Mean negative log-likelihood of the labelled entries of a log-prob matrix.
Var cross_entropy(const Var& log_probs, std::span<const int> labels);

/// Scatter statistics of the rows of Z. Output is a 4-vector
/// [W(A), B(A), W(S), B(S)]; see FisherStats for the definitions.
Var fisher_stats(const Var& z, std::span<const int> actions, std::span<const int> subjects);

// --- helpers shared with the non-differentiable code ------------------------

/// Divided-difference matrix of a spectral function for the Daleckii-Krein
/// adjoint. Gaps below 1e-12 * lambda_max fall back to f'(lambda_i).
Mat log_divided_differences(const Vec& lambda);
Mat exp_divided_differences(const Vec& lambda);

}  // namespace spdgeo::ad
