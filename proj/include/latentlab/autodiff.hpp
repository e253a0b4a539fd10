#pragma once

#include "latentlab/core.hpp"
#include "latentlab/rng.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace latentlab::ad {

/// Dense row-major 2-D tensor; shape is {rows, cols}, scalars are 1 x 1.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
  std::size_t id = 0;
};

enum class Op {
  kLeaf,
  kMatMul,
  kAdd,
  kAddBias,
  kTanh,
  kRelu,
  kSoftplus,
  kExp,
  kLog,
  kSum,
  kSumRows,
  kSquare,
  kScale,
  kHadamard,
};

const char* op_name(Op op);

/// Records a computation over Tensors and replays it in reverse.
///
/// Nodes are appended in evaluation order, so the node list is a
/// topological order. A tape supports exactly one backward pass.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  /// a (n x k) plus bias (1 x k) broadcast over rows.
  Var add_bias(Var a, Var bias);
  Var tanh(Var a);
  /// Subgradient 0 at 0.
  Var relu(Var a);
  Var softplus(Var a);
  Var exp(Var a);
  Var log(Var a);
  /// Sum of all entries, 1 x 1.
  Var sum(Var a);
  /// Per-row sums, n x 1.
  Var sum_rows(Var a);
  Var square(Var a);
  Var scale(Var a, double factor);
  Var hadamard(Var a, Var b);

  Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

  const Tensor& value(Var v) const;
  /// Gradient of the backward seed w.r.t. `v`; zero for nodes that do not
  /// require gradients.
  const Tensor& grad(Var v) const;
  std::vector<Eigen::Index> shape(Var v) const;
  Op op(Var v) const;

  void backward(Var output, const Tensor& output_grad);
  /// Seeds a 1 x 1 output with 1.
  void backward(Var scalar_output);

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::size_t a = 0;
    std::size_t b = 0;
    double factor = 0.0;
    bool requires_grad = false;
    Tensor value;
    Tensor grad;
  };

  const Node& node(Var v) const;
  Var push(Op op, Tensor value, std::size_t a, std::size_t b, bool requires_grad, double factor = 0.0);
  Var unary(Op op, Var a, Tensor value, double factor = 0.0);

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

enum class Activation { kTanh, kRelu, kSoftplus, kIdentity };

const char* activation_name(Activation act);
Activation parse_activation(const std::string& name);

struct Layer {
  Tensor weights;  // in x out
  Tensor bias;     // 1 x out
  Activation activation = Activation::kIdentity;
};

struct Mlp {
  std::vector<Layer> layers;

  Eigen::Index in_dim() const;
  Eigen::Index out_dim() const;
  std::size_t parameter_count() const;
  void validate() const;

  /// Weights i.i.d. N(0, 1/fan_in), zero biases. `dims` has one more entry
  /// than `activations`.
  static Mlp random(const std::vector<Eigen::Index>& dims, const std::vector<Activation>& activations, Rng& rng);
  static Mlp zeros(const std::vector<Eigen::Index>& dims, const std::vector<Activation>& activations);
};

/// Tape handles of a network placed on a tape.
struct MlpBinding {
  Var output;
  std::vector<Var> weights;
  std::vector<Var> biases;
};

/// Records the parameters of `net` as leaves; `output` is left unset.
MlpBinding place(const Mlp& net, Tape& tape, bool requires_grad = true);

/// Applies the architecture of `net` to `input` using parameter Vars
/// already on the tape (one weight and one bias per layer).
Var apply(const Mlp& net, Tape& tape, std::span<const Var> weights, std::span<const Var> biases, Var input);

MlpBinding forward(const Mlp& net, Tape& tape, Var input, bool params_require_grad = true);

struct ForwardResult {
  Tensor output;
  Tape tape;
  Var input;
  MlpBinding binding;
};

ForwardResult forward(const Mlp& net, const Tensor& batch);

struct MlpGradients {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  Tensor input;
};

MlpGradients collect_gradients(const Tape& tape, const MlpBinding& binding);

/// Backpropagates `output_grad` through a recorded forward pass.
MlpGradients backward(ForwardResult& fwd, const Tensor& output_grad);

/// Plain evaluation without recording.
Tensor evaluate(const Mlp& net, const Tensor& batch);

Tensor apply_activation(Activation act, const Tensor& x);

/// Builds a scalar from leaf Vars bound to `params`.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Max over all parameter entries of |analytic - central difference| / max(1, |analytic|).
double grad_check(const ScalarFn& fn, std::span<const Tensor> params, double eps = 1e-5);

/// p <- p - lr * g for every pair.
void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, double lr);
void sgd_step(Mlp& net, const MlpGradients& grads, double lr);

}  // namespace latentlab::ad
