#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "moedis/tensor.hpp"

namespace moedis {

enum class Op {
  kLeaf,
  kMatMul,
  kTranspose,
  kReshape,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kShift,
  kSigmoid,
  kTanh,
  kRelu,
  kSqrt,
  kSum,
  kSumRows,
  kSumCols,
  kBroadcastRows,
  kBroadcastCols,
  kSoftmax,
  kConv1d,
  kBatchNormTrain,
  kBatchNormEval,
  kSliceRows,
  kConcatRows,
};

std::string_view op_name(Op op);

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  friend class Tape;

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Wengert list of primitive applications in creation order. Nodes only refer
/// to earlier nodes, so the list is acyclic and already topologically sorted.
///
/// Reverse mode walks it backwards accumulating adjoints; forward mode walks
/// it forwards pushing tangents through the same per-op rules.
class Tape {
 public:
  struct TangentSeed {
    Var var;
    Tensor tangent;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Seeds d(root)/d(root) = 1 and accumulates adjoints into every node that
  // requires grad. Resets any previous backward pass.
  void backward(Var root);
  Tensor grad(Var v) const;

  // Tangent of `output` given tangents on a set of input nodes (others zero).
  Tensor tangent(std::span<const TangentSeed> seeds, Var output) const;

  std::size_t size() const { return nodes_.size(); }
  Op op_at(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    double scalar = 0.0;
    std::size_t p0 = 0;
    std::size_t p1 = 0;
    std::vector<double> saved;
  };

  Var push(Node node, Shape shape, std::vector<double> data);
  void check_owned(Var v) const;

  const Node& node(Var v) const { return nodes_[v.id_]; }

  void backprop_node(std::size_t id);
  std::vector<double> tangent_node(std::size_t id, const std::vector<std::vector<double>>& tangents) const;
  std::vector<double>& grad_buffer(std::size_t id);

  std::deque<Node> nodes_;
  std::vector<std::vector<double>> grads_;

  friend class Var;
  friend struct OpBuilder;
};

// Primitive set. Elementwise binary ops accept equal shapes or a one-element
// operand on either side; anything else is a DimensionError.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double c);
Var shift(Var a, double c);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var sqrt(Var a);
Var sum(Var a);
Var sum_rows(Var a);  // m x n -> 1 x n
Var sum_cols(Var a);  // m x n -> m x 1
Var broadcast_rows(Var a, std::size_t rows);  // 1 x n -> rows x n
Var broadcast_cols(Var a, std::size_t cols);  // m x 1 -> m x cols
Var softmax(Var a, int axis = 1);
// Cross-correlation of every row of x with an odd-length kernel, zero "same" padding.
Var conv1d(Var x, Var kernel);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

struct BatchNormStats {
  Tensor running_mean;  // 1 x K
  Tensor running_var;   // 1 x K
};

// Train mode: normalizes with biased batch statistics, returns updated running
// stats through `stats` (momentum 0.1; running var uses the unbiased estimate
// and is left untouched when the batch has a single row).
Var batch_norm_train(Var x, Var gamma, Var beta, BatchNormStats& stats);
Var batch_norm_eval(Var x, Var gamma, Var beta, const BatchNormStats& stats);

using TracedFn = std::function<Var(Tape&, Var)>;

// J(z) v for f: R^{1xK} -> R^{1xF} by forward-mode tangent propagation.
Tensor jvp(const TracedFn& f, const Tensor& z, const Tensor& v);
// Full F x K Jacobian, one tangent sweep per standard basis vector over a single recording.
Tensor jacobian(const TracedFn& f, const Tensor& z);
// Reverse-mode gradient of a scalar-valued f.
Tensor gradient(const TracedFn& f, const Tensor& x);
Tensor evaluate(const TracedFn& f, const Tensor& x);

}  // namespace moedis
