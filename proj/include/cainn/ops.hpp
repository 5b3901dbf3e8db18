#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cainn/tensor.hpp"

namespace cainn {

enum class PoolMode { Avg, Max };
enum class UnaryOp { Exp, Tanh, Relu, Sigmoid };
enum class BinaryOp { Add, Mul };

// How the second operand of an elementwise op maps onto the first. Only the
// two attention-map shapes are accepted besides an exact match.
enum class Broadcast { None, Channel, Spatial };

Broadcast broadcast_kind(const Shape& a, const Shape& b);

// Cross-correlation with zero "same" padding of (k-1)/2. `bias` may be null.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight) {
  return conv2d<T>(input, weight, nullptr);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  return conv2d<T>(input, weight, &bias);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvKernel<T>& kernel) {
  return conv2d<T>(input, kernel.weight, &kernel.bias);
}

// Vector-Jacobian products of conv2d.
template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& weight, const Shape& input_shape);
template <typename T>
Tensor<T> conv2d_grad_weight(const Tensor<T>& grad_out, const Tensor<T>& input, const Shape& weight_shape);
template <typename T>
Tensor<T> conv2d_grad_bias(const Tensor<T>& grad_out);

// (N, C, 1, 1) mean or maximum over each H x W plane.
template <typename T>
Tensor<T> global_pool(const Tensor<T>& input, PoolMode mode);

// (N, 1, H, W) mean or maximum across channels at every site.
template <typename T>
Tensor<T> channelwise_pool(const Tensor<T>& input, PoolMode mode);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// Channels [begin, begin + count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin, std::size_t count);

template <typename T>
Tensor<T> map_unary(const Tensor<T>& input, UnaryOp op);

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, BinaryOp op);

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor);

// Throws ContractError unless `perm` is a bijection on {0..channels-1}.
void check_permutation(std::span<const std::size_t> perm, std::size_t channels);
std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm);

// Output channel i is input channel perm[i].
template <typename T>
Tensor<T> permute_channels(const Tensor<T>& input, std::span<const std::size_t> perm);

// Inverse of permute_channels for the same perm.
template <typename T>
Tensor<T> unpermute_channels(const Tensor<T>& input, std::span<const std::size_t> perm);

template <typename T>
bool all_finite(const Tensor<T>& t);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace cainn
