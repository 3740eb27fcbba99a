// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape owns every intermediate value of one forward pass. Ops append a node
// holding the output value, the input ids and a backward closure; ids are
// handed out in creation order, so the tape is topologically sorted by
// construction and backward() is a single reverse sweep.

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "carnet/tensor.hpp"

namespace carnet {

enum class OpKind {
  constant,
  variable,
  parameter,
  add,
  sub,
  hadamard,
  scale,
  add_scalar,
  matmul,
  linear,
  concat,
  slice,
  reshape,
  reduce_mean,
  reduce_sum,
  relu,
  sigmoid,
  tanh,
  softmax,
  log_softmax,
  exp,
  log,
  square,
  conv2d,
  conv_transpose2d,
  batchnorm2d,
  local_attention,
  ms_ssim_loss,
  smooth_l1,
  cross_entropy,
};

const char* op_name(OpKind op);

/// A trainable tensor with its gradient slot.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first backward pass that reaches it
  bool requires_grad = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() { grad = Tensor<T>(); }
  bool has_grad() const { return !grad.empty(); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v);
  /// A free leaf that accumulates a gradient on the tape (used for inputs).
  Var<T> variable(Tensor<T> v);
  /// Leaf bound to a parameter; repeated calls with the same parameter
  /// return the same node, so shared weights have one id.
  Var<T> param(Parameter<T>& p);

  Var<T> record(OpKind op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of a node after backward(); zeros if nothing reached it.
  Tensor<T> grad(std::size_t id) const;
  Tensor<T> grad(Var<T> v) const { return grad(v.id); }

  /// Adds `g` into the gradient slot of `id` if that node requires grad.
  void accumulate(std::size_t id, const Tensor<T>& g);
  /// Raw gradient buffer of `id`, allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id);
  const Tensor<T>& upstream(std::size_t id) const { return nodes_[id].grad; }

  /// Reverse sweep from a scalar loss; parameter gradients are added into
  /// Parameter::grad. The tape may be swept only once.
  void backward(Var<T> loss);
  bool consumed() const { return consumed_; }

 private:
  std::deque<Node> nodes_;  // deque: references to earlier nodes survive appends
  std::unordered_map<const Parameter<T>*, std::size_t> param_ids_;
  bool consumed_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// Elementwise ops. Binary ops broadcast by trailing-dimension expansion only:
// the smaller operand's shape must equal the trailing dims of the larger.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> hadamard(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> add_scalar(Var<T> a, T c);

/// (m,k)·(k,n) -> (m,n)
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// x:(B,in), W:(out,in), b:(out,) -> x·Wᵀ + b. `bias` may be omitted (id of a null Var).
template <typename T> Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);
template <typename T> Var<T> linear(Var<T> x, Var<T> weight);

template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T> Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> reduce_mean(Var<T> a);
template <typename T> Var<T> reduce_sum(Var<T> a);

template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> tanh(Var<T> a);
template <typename T> Var<T> exp(Var<T> a);
/// Natural log; inputs are clamped below at the smallest normal value.
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> square(Var<T> a);
/// Softmax over the last axis.
template <typename T> Var<T> softmax(Var<T> a);
template <typename T> Var<T> log_softmax(Var<T> a);

}  // namespace carnet
