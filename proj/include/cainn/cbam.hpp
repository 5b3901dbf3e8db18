#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cainn/autodiff.hpp"
#include "cainn/ops.hpp"
#include "cainn/tensor.hpp"

namespace cainn {

// Placement of the 3x3 convolutions and CBAM inside a coupling subnet:
//   CA  conv -> CBAM
//   AC  CBAM -> conv
//   CAC conv -> CBAM -> conv
//   CC  conv -> relu -> conv
enum class Variant : std::uint8_t { CA = 0, AC = 1, CAC = 2, CC = 3 };

inline constexpr Variant kAllVariants[] = {Variant::CA, Variant::AC, Variant::CAC, Variant::CC};

std::string_view variant_name(Variant v);
// Case-insensitive; throws ContractError for unknown names.
Variant parse_variant(std::string_view name);

// Hidden width of the channel-attention MLP: the ratio is clamped to the
// channel count and the width never drops below one.
std::size_t attention_hidden_width(std::size_t channels, std::size_t reduction);

// Shared MLP of the channel gate. w0 is (hidden, C, 1, 1) and w1 is
// (C, hidden, 1, 1), i.e. 1x1 convolutions without bias.
template <typename T>
struct ChannelAttentionParams {
  Tensor<T> w0;
  Tensor<T> w1;
};

// 7x7 convolution from the [avg; max] channel summary to one gate map.
template <typename T>
struct SpatialAttentionParams {
  ConvKernel<T> kernel;
};

// sigmoid(W1 relu(W0 avg(f)) + W1 relu(W0 max(f))), shape (N, C, 1, 1).
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& f, const ChannelAttentionParams<T>& p);

// sigmoid(conv7x7([mean_c(f); max_c(f)])), shape (N, 1, H, W).
template <typename T>
Tensor<T> spatial_attention(const Tensor<T>& f, const SpatialAttentionParams<T>& p);

// Channel gate first, then the spatial gate computed on the channel-refined map.
template <typename T>
Tensor<T> cbam_apply(const Tensor<T>& f, const ChannelAttentionParams<T>& cp, const SpatialAttentionParams<T>& sp);

struct SubnetConfig {
  Variant variant = Variant::CAC;
  std::size_t in_channels = 0;
  std::size_t hidden_channels = 0;
  // Twice the width of the coupling half being transformed: s then t.
  std::size_t out_channels = 0;
  std::size_t reduction = 16;
  std::uint64_t seed = 0;
};

struct ParamSpec {
  std::string name;
  Shape shape;
  // Zeroed by identity-start initialization.
  bool final_layer = false;
};

// Parameter tensors of a subnet, in the order SubnetParams stores them.
std::vector<ParamSpec> subnet_layout(const SubnetConfig& cfg);

template <typename T>
struct SubnetParams {
  std::vector<Tensor<T>> tensors;
};

enum class InitMode {
  // Final convolution zeroed so the subnet outputs exact zeros.
  IdentityStart,
  // Every tensor drawn at random, biases included; used to test non-trivial flows.
  Random,
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights from the config seed.
template <typename T>
SubnetParams<T> subnet_init(const SubnetConfig& cfg, InitMode mode = InitMode::IdentityStart);

template <typename T>
struct SubnetOutput {
  Tensor<T> s;
  Tensor<T> t;
};

// Runs the variant's layer sequence and splits the result into s and t.
template <typename T>
SubnetOutput<T> subnet_forward(const Tensor<T>& f, const SubnetConfig& cfg, const SubnetParams<T>& p);

// The raw 2*half-channel subnet output on an autodiff tape; `params` follow
// subnet_layout(cfg).
template <typename T>
ad::Var<T> subnet_forward(const ad::Var<T>& f, const SubnetConfig& cfg, std::span<const ad::Var<T>> params);

}  // namespace cainn
