#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "cainn/ops.hpp"
#include "cainn/tensor.hpp"

// Tape-based reverse-mode differentiation over the tensor-core primitives.
//
// A Tape records every primitive applied to its Vars in execution order, so
// node inputs always precede the node. backward() walks the tape once in
// reverse and accumulates vector-Jacobian products. Each tape belongs to one
// computation (one training step); it is neither copyable nor movable because
// Vars refer back to it.
namespace cainn::ad {

template <typename T>
class Tape;

// Handle to a node on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// dLoss/dNode for every node of a tape. Nodes the loss does not depend on
// carry zero tensors.
template <typename T>
class Gradients {
 public:
  explicit Gradients(std::vector<Tensor<T>> grads) : grads_(std::move(grads)) {}

  const Tensor<T>& operator[](const Var<T>& v) const { return grads_.at(v.id()); }
  const Tensor<T>& at(std::size_t id) const { return grads_.at(id); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor<T>> grads_;
};

template <typename T>
class Tape {
 public:
  // Accumulates the node's contribution into the gradients of its inputs.
  // A null slot means that input needs no gradient.
  using Backward = std::function<void(const Tensor<T>& grad_out, std::span<Tensor<T>* const> input_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) { return push(std::move(value), {}, nullptr, true); }
  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, nullptr, false); }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward vjp);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // `loss` must hold exactly one element.
  Gradients<T> backward(const Var<T>& loss) const;

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    Backward vjp;
    bool requires_grad = false;
  };

  Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, Backward vjp, bool requires_grad);

  std::vector<Node> nodes_;
};

// Differentiable counterparts of the tensor-core operations. Names follow the
// plain versions so composite code can be written once for both.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight);
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias);
template <typename T>
Var<T> global_pool(const Var<T>& input, PoolMode mode);
template <typename T>
Var<T> channelwise_pool(const Var<T>& input, PoolMode mode);
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> slice_channels(const Var<T>& input, std::size_t begin, std::size_t count);
template <typename T>
Var<T> map_unary(const Var<T>& input, UnaryOp op);
template <typename T>
Var<T> elementwise(const Var<T>& a, const Var<T>& b, BinaryOp op);
template <typename T>
Var<T> scale(const Var<T>& input, T factor);
template <typename T>
Var<T> permute_channels(const Var<T>& input, std::span<const std::size_t> perm);
template <typename T>
Var<T> unpermute_channels(const Var<T>& input, std::span<const std::size_t> perm);
// Sum of all elements as a (1,1,1,1) tensor.
template <typename T>
Var<T> sum(const Var<T>& input);
template <typename T>
Var<T> add_constant(const Var<T>& input, T constant);

template <typename T>
using ScalarFunction = std::function<Var<T>(Tape<T>&, const Var<T>&)>;

// Central-difference check of backward(): returns
// max_i |g_ad - g_fd| / max(1, |g_fd|) over every coordinate of `point`.
// Throws NumericError if `f` produces a non-finite value.
template <typename T>
double grad_check(const ScalarFunction<T>& f, const Tensor<T>& point, double eps = 1e-5);

}  // namespace cainn::ad
