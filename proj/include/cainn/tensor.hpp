#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cainn/error.hpp"

namespace cainn {

// Extents of a batch x channels x height x width array.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  // Elements of one sample.
  constexpr std::size_t sample() const { return c * h * w; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

// Element precision tag used by the on-disk formats.
enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() {
  return Dtype::F32;
}
template <>
constexpr Dtype dtype_of<double>() {
  return Dtype::F64;
}

inline std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

// Dense 4-D array stored row-major in N, C, H, W order.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  const std::vector<T>& values() const { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[index(n, c, h, w)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Start of the H x W plane for (n, c).
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  std::vector<To> out(src.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(src[i]);
  return Tensor<To>(src.shape(), std::move(out));
}

// Convolution weights (C_out, C_in, k, k) with a per-output-channel bias
// stored as (1, C_out, 1, 1). k is odd so "same" padding keeps H and W.
template <typename T>
struct ConvKernel {
  Tensor<T> weight;
  Tensor<T> bias;

  ConvKernel() = default;
  ConvKernel(std::size_t out_channels, std::size_t in_channels, std::size_t k)
      : weight(Shape{out_channels, in_channels, k, k}), bias(Shape{1, out_channels, 1, 1}) {
    if (k % 2 == 0) throw ContractError("convolution kernel size must be odd, got " + std::to_string(k));
  }

  std::size_t out_channels() const { return weight.shape().n; }
  std::size_t in_channels() const { return weight.shape().c; }
  std::size_t size() const { return weight.shape().h; }
};

}  // namespace cainn
