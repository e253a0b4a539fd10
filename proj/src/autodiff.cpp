#include "latentlab/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace latentlab::ad {

namespace {

std::string shape_str(const Tensor& t) {
  return "(" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")";
}

void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidArgument(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

Tensor softplus_value(const Tensor& x) {
  return x.unaryExpr([](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
}

Tensor sigmoid(const Tensor& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kAddBias: return "add_bias";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kSoftplus: return "softplus";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSum: return "sum";
    case Op::kSumRows: return "sum_rows";
    case Op::kSquare: return "square";
    case Op::kScale: return "scale";
    case Op::kHadamard: return "hadamard";
  }
  return "unknown";
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw InvalidArgument("Tape: variable does not belong to this tape");
  return nodes_[v.id];
}

Var Tape::push(Op op, Tensor value, std::size_t a, std::size_t b, bool requires_grad, double factor) {
  if (consumed_) throw Error("Tape: cannot record on a tape after backward");
  if (!value.allFinite()) throw NonFinite(std::string("Tape: non-finite result from ") + op_name(op));
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.factor = factor;
  n.requires_grad = requires_grad;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::unary(Op op, Var a, Tensor value, double factor) {
  return push(op, std::move(value), a.id, a.id, node(a).requires_grad, factor);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  return push(Op::kLeaf, std::move(value), 0, 0, requires_grad);
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& x = node(a).value;
  const Tensor& y = node(b).value;
  if (x.cols() != y.rows())
    throw InvalidArgument("matmul: inner dimensions differ " + shape_str(x) + " * " + shape_str(y));
  Tensor out = x * y;
  return push(Op::kMatMul, std::move(out), a.id, b.id, node(a).requires_grad || node(b).requires_grad);
}

Var Tape::add(Var a, Var b) {
  require_same_shape("add", node(a).value, node(b).value);
  Tensor out = node(a).value + node(b).value;
  return push(Op::kAdd, std::move(out), a.id, b.id, node(a).requires_grad || node(b).requires_grad);
}

Var Tape::add_bias(Var a, Var bias) {
  const Tensor& x = node(a).value;
  const Tensor& bv = node(bias).value;
  if (bv.rows() != 1 || bv.cols() != x.cols())
    throw InvalidArgument("add_bias: bias " + shape_str(bv) + " does not match " + shape_str(x));
  Tensor out = x.rowwise() + bv.row(0);
  return push(Op::kAddBias, std::move(out), a.id, bias.id, node(a).requires_grad || node(bias).requires_grad);
}

Var Tape::tanh(Var a) { return unary(Op::kTanh, a, node(a).value.array().tanh().matrix()); }

Var Tape::relu(Var a) { return unary(Op::kRelu, a, node(a).value.cwiseMax(0.0)); }

Var Tape::softplus(Var a) { return unary(Op::kSoftplus, a, softplus_value(node(a).value)); }

Var Tape::exp(Var a) { return unary(Op::kExp, a, node(a).value.array().exp().matrix()); }

Var Tape::log(Var a) { return unary(Op::kLog, a, node(a).value.array().log().matrix()); }

Var Tape::sum(Var a) {
  Tensor out(1, 1);
  out(0, 0) = node(a).value.sum();
  return unary(Op::kSum, a, std::move(out));
}

Var Tape::sum_rows(Var a) { return unary(Op::kSumRows, a, node(a).value.rowwise().sum()); }

Var Tape::square(Var a) { return unary(Op::kSquare, a, node(a).value.array().square().matrix()); }

Var Tape::scale(Var a, double factor) { return unary(Op::kScale, a, node(a).value * factor, factor); }

Var Tape::hadamard(Var a, Var b) {
  require_same_shape("hadamard", node(a).value, node(b).value);
  Tensor out = node(a).value.cwiseProduct(node(b).value);
  return push(Op::kHadamard, std::move(out), a.id, b.id, node(a).requires_grad || node(b).requires_grad);
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!consumed_) throw Error("Tape: gradients are available only after backward");
  return n.grad;
}

std::vector<Eigen::Index> Tape::shape(Var v) const {
  const Tensor& t = node(v).value;
  return {t.rows(), t.cols()};
}

Op Tape::op(Var v) const { return node(v).op; }

void Tape::backward(Var output) {
  const Tensor& out = node(output).value;
  if (out.rows() != 1 || out.cols() != 1) throw InvalidArgument("backward: output is not a scalar " + shape_str(out));
  backward(output, Tensor::Ones(1, 1));
}

void Tape::backward(Var output, const Tensor& output_grad) {
  if (consumed_) throw Error("Tape: backward already ran on this tape");
  require_same_shape("backward seed", node(output).value, output_grad);
  consumed_ = true;
  for (auto& n : nodes_) n.grad = Tensor::Zero(n.value.rows(), n.value.cols());
  nodes_[output.id].grad = output_grad;

  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.op == Op::kLeaf) continue;
    const Tensor& g = n.grad;
    Node& a = nodes_[n.a];
    Node& b = nodes_[n.b];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatMul:
        if (a.requires_grad) a.grad.noalias() += g * b.value.transpose();
        if (b.requires_grad) b.grad.noalias() += a.value.transpose() * g;
        break;
      case Op::kAdd:
        if (a.requires_grad) a.grad += g;
        if (b.requires_grad) b.grad += g;
        break;
      case Op::kAddBias:
        if (a.requires_grad) a.grad += g;
        if (b.requires_grad) b.grad += g.colwise().sum();
        break;
      case Op::kTanh:
        a.grad.array() += g.array() * (1.0 - n.value.array().square());
        break;
      case Op::kRelu:
        a.grad.array() += g.array() * (a.value.array() > 0.0).cast<double>();
        break;
      case Op::kSoftplus:
        a.grad.array() += g.array() * sigmoid(a.value).array();
        break;
      case Op::kExp:
        a.grad.array() += g.array() * n.value.array();
        break;
      case Op::kLog:
        a.grad.array() += g.array() / a.value.array();
        break;
      case Op::kSum:
        a.grad.array() += g(0, 0);
        break;
      case Op::kSumRows:
        a.grad.colwise() += g.col(0);
        break;
      case Op::kSquare:
        a.grad.array() += 2.0 * g.array() * a.value.array();
        break;
      case Op::kScale:
        a.grad += n.factor * g;
        break;
      case Op::kHadamard:
        if (n.a == n.b) {
          a.grad.array() += 2.0 * g.array() * a.value.array();
        } else {
          if (a.requires_grad) a.grad += g.cwiseProduct(b.value);
          if (b.requires_grad) b.grad += g.cwiseProduct(a.value);
        }
        break;
    }
  }
}

const char* activation_name(Activation act) {
  switch (act) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kSoftplus: return "softplus";
    case Activation::kIdentity: return "identity";
  }
  return "identity";
}

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  if (name == "softplus") return Activation::kSoftplus;
  if (name == "identity") return Activation::kIdentity;
  throw InvalidArgument("unknown activation '" + name + "'");
}

Eigen::Index Mlp::in_dim() const { return layers.empty() ? 0 : layers.front().weights.rows(); }

Eigen::Index Mlp::out_dim() const { return layers.empty() ? 0 : layers.back().weights.cols(); }

std::size_t Mlp::parameter_count() const {
  std::size_t count = 0;
  for (const auto& l : layers) count += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return count;
}

void Mlp::validate() const {
  if (layers.empty()) throw InvalidArgument("Mlp: no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.bias.rows() != 1 || l.bias.cols() != l.weights.cols())
      throw InvalidArgument("Mlp: layer " + std::to_string(i) + " bias does not match weights");
    if (i > 0 && layers[i - 1].weights.cols() != l.weights.rows())
      throw InvalidArgument("Mlp: layer " + std::to_string(i) + " input width does not match previous output");
    if (!l.weights.allFinite() || !l.bias.allFinite())
      throw NonFinite("Mlp: layer " + std::to_string(i) + " has non-finite parameters");
  }
}

Mlp Mlp::zeros(const std::vector<Eigen::Index>& dims, const std::vector<Activation>& activations) {
  if (dims.size() != activations.size() + 1 || activations.empty())
    throw InvalidArgument("Mlp: need one more dimension than activations");
  Mlp net;
  for (std::size_t i = 0; i < activations.size(); ++i)
    net.layers.push_back({Tensor::Zero(dims[i], dims[i + 1]), Tensor::Zero(1, dims[i + 1]), activations[i]});
  return net;
}

Mlp Mlp::random(const std::vector<Eigen::Index>& dims, const std::vector<Activation>& activations, Rng& rng) {
  Mlp net = zeros(dims, activations);
  for (auto& layer : net.layers) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(layer.weights.rows()));
    for (Eigen::Index i = 0; i < layer.weights.rows(); ++i)
      for (Eigen::Index j = 0; j < layer.weights.cols(); ++j) layer.weights(i, j) = scale * rng.normal();
  }
  return net;
}

namespace {

Var activate(Tape& tape, Activation act, Var x) {
  switch (act) {
    case Activation::kTanh: return tape.tanh(x);
    case Activation::kRelu: return tape.relu(x);
    case Activation::kSoftplus: return tape.softplus(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

}  // namespace

Tensor apply_activation(Activation act, const Tensor& x) {
  switch (act) {
    case Activation::kTanh: return x.array().tanh().matrix();
    case Activation::kRelu: return x.cwiseMax(0.0);
    case Activation::kSoftplus: return softplus_value(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

MlpBinding place(const Mlp& net, Tape& tape, bool requires_grad) {
  net.validate();
  MlpBinding binding;
  for (const Layer& layer : net.layers) {
    binding.weights.push_back(tape.leaf(layer.weights, requires_grad));
    binding.biases.push_back(tape.leaf(layer.bias, requires_grad));
  }
  return binding;
}

Var apply(const Mlp& net, Tape& tape, std::span<const Var> weights, std::span<const Var> biases, Var input) {
  if (weights.size() != net.layers.size() || biases.size() != net.layers.size())
    throw InvalidArgument("Mlp apply: parameter count does not match layer count");
  const auto width = tape.shape(input)[1];
  if (width != net.in_dim()) throw DimensionMismatch("Mlp forward input width", net.in_dim(), width);
  Var h = input;
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    h = activate(tape, net.layers[l].activation, tape.add_bias(tape.matmul(h, weights[l]), biases[l]));
  return h;
}

MlpBinding forward(const Mlp& net, Tape& tape, Var input, bool params_require_grad) {
  MlpBinding binding = place(net, tape, params_require_grad);
  binding.output = apply(net, tape, binding.weights, binding.biases, input);
  return binding;
}

ForwardResult forward(const Mlp& net, const Tensor& batch) {
  ForwardResult out;
  out.input = out.tape.leaf(batch, true);
  out.binding = forward(net, out.tape, out.input);
  out.output = out.tape.value(out.binding.output);
  return out;
}

MlpGradients collect_gradients(const Tape& tape, const MlpBinding& binding) {
  MlpGradients g;
  for (const Var w : binding.weights) g.weights.push_back(tape.grad(w));
  for (const Var b : binding.biases) g.biases.push_back(tape.grad(b));
  return g;
}

MlpGradients backward(ForwardResult& fwd, const Tensor& output_grad) {
  fwd.tape.backward(fwd.binding.output, output_grad);
  MlpGradients g = collect_gradients(fwd.tape, fwd.binding);
  g.input = fwd.tape.grad(fwd.input);
  return g;
}

Tensor evaluate(const Mlp& net, const Tensor& batch) {
  net.validate();
  if (batch.cols() != net.in_dim()) throw DimensionMismatch("Mlp evaluate input width", net.in_dim(), batch.cols());
  Tensor h = batch;
  for (const Layer& layer : net.layers) {
    Tensor pre = h * layer.weights;
    pre.rowwise() += layer.bias.row(0);
    h = apply_activation(layer.activation, pre);
    if (!h.allFinite()) throw NonFinite("Mlp evaluate: non-finite activation");
  }
  return h;
}

namespace {

double evaluate_scalar(const ScalarFn& fn, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.leaf(p, false));
  const Var out = fn(tape, vars);
  const Tensor& v = tape.value(out);
  if (v.rows() != 1 || v.cols() != 1) throw InvalidArgument("grad_check: function output is not a scalar");
  return v(0, 0);
}

}  // namespace

double grad_check(const ScalarFn& fn, std::span<const Tensor> params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw InvalidArgument("grad_check: eps must lie in (0, 1e-2]");
  Tape tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.leaf(p, true));
  const Var out = fn(tape, vars);
  tape.backward(out);

  std::vector<Tensor> work(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < work.size(); ++k) {
    const Tensor& analytic = tape.grad(vars[k]);
    for (Eigen::Index i = 0; i < work[k].rows(); ++i) {
      for (Eigen::Index j = 0; j < work[k].cols(); ++j) {
        const double saved = work[k](i, j);
        work[k](i, j) = saved + eps;
        const double up = evaluate_scalar(fn, work);
        work[k](i, j) = saved - eps;
        const double down = evaluate_scalar(fn, work);
        work[k](i, j) = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic(i, j);
        worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
      }
    }
  }
  return worst;
}

void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, double lr) {
  if (!(lr >= 0.0)) throw InvalidArgument("sgd_step: learning rate must be non-negative");
  if (params.size() != grads.size()) throw InvalidArgument("sgd_step: parameter and gradient counts differ");
  for (std::size_t k = 0; k < params.size(); ++k) {
    require_same_shape("sgd_step", params[k], grads[k]);
    params[k] -= lr * grads[k];
  }
}

void sgd_step(Mlp& net, const MlpGradients& grads, double lr) {
  if (grads.weights.size() != net.layers.size() || grads.biases.size() != net.layers.size())
    throw InvalidArgument("sgd_step: gradient layer count does not match network");
  if (!(lr >= 0.0)) throw InvalidArgument("sgd_step: learning rate must be non-negative");
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    require_same_shape("sgd_step weights", net.layers[l].weights, grads.weights[l]);
    require_same_shape("sgd_step bias", net.layers[l].bias, grads.biases[l]);
    net.layers[l].weights -= lr * grads.weights[l];
    net.layers[l].bias -= lr * grads.biases[l];
  }
}

}  // namespace latentlab::ad
