#include "cainn/cbam.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "cainn/rng.hpp"
#include "subnet_graph.hpp"

namespace cainn {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::CA:
      return "CA";
    case Variant::AC:
      return "AC";
    case Variant::CAC:
      return "CAC";
    case Variant::CC:
      return "CC";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  for (Variant v : kAllVariants) {
    if (variant_name(v) == upper) return v;
  }
  throw ContractError("unknown subnet variant '" + std::string(name) + "' (expected ca, ac, cac or cc)");
}

std::size_t attention_hidden_width(std::size_t channels, std::size_t reduction) {
  if (channels == 0 || reduction == 0) throw ContractError("attention needs positive channels and reduction ratio");
  const std::size_t r = std::min(reduction, channels);
  return std::max<std::size_t>(1, channels / r);
}

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& f, const ChannelAttentionParams<T>& p) {
  return detail::channel_gate(f, p.w0, p.w1);
}

template <typename T>
Tensor<T> spatial_attention(const Tensor<T>& f, const SpatialAttentionParams<T>& p) {
  return detail::spatial_gate(f, p.kernel.weight, p.kernel.bias);
}

template <typename T>
Tensor<T> cbam_apply(const Tensor<T>& f, const ChannelAttentionParams<T>& cp, const SpatialAttentionParams<T>& sp) {
  const Tensor<T> params[] = {cp.w0, cp.w1, sp.kernel.weight, sp.kernel.bias};
  return detail::cbam(f, std::span<const Tensor<T>>(params));
}

namespace {

void append_conv(std::vector<ParamSpec>& out, const std::string& name, std::size_t cout, std::size_t cin,
                 std::size_t k, bool final_layer) {
  out.push_back({name + ".weight", Shape{cout, cin, k, k}, final_layer});
  out.push_back({name + ".bias", Shape{1, cout, 1, 1}, final_layer});
}

void append_cbam(std::vector<ParamSpec>& out, std::size_t channels, std::size_t reduction) {
  const std::size_t hidden = attention_hidden_width(channels, reduction);
  out.push_back({"channel.w0", Shape{hidden, channels, 1, 1}, false});
  out.push_back({"channel.w1", Shape{channels, hidden, 1, 1}, false});
  append_conv(out, "spatial", 1, 2, 7, false);
}

}  // namespace

std::vector<ParamSpec> subnet_layout(const SubnetConfig& cfg) {
  if (cfg.in_channels == 0 || cfg.out_channels == 0 || cfg.out_channels % 2 != 0) {
    throw ContractError("subnet needs positive input width and an even output width, got in=" +
                        std::to_string(cfg.in_channels) + " out=" + std::to_string(cfg.out_channels));
  }
  const bool needs_hidden = cfg.variant == Variant::CAC || cfg.variant == Variant::CC;
  if (needs_hidden && cfg.hidden_channels == 0) throw ContractError("subnet variant needs hidden_channels > 0");

  std::vector<ParamSpec> out;
  switch (cfg.variant) {
    case Variant::CA:
      append_conv(out, "conv", cfg.out_channels, cfg.in_channels, 3, true);
      append_cbam(out, cfg.out_channels, cfg.reduction);
      break;
    case Variant::AC:
      append_cbam(out, cfg.in_channels, cfg.reduction);
      append_conv(out, "conv", cfg.out_channels, cfg.in_channels, 3, true);
      break;
    case Variant::CAC:
      append_conv(out, "conv1", cfg.hidden_channels, cfg.in_channels, 3, false);
      append_cbam(out, cfg.hidden_channels, cfg.reduction);
      append_conv(out, "conv2", cfg.out_channels, cfg.hidden_channels, 3, true);
      break;
    case Variant::CC:
      append_conv(out, "conv1", cfg.hidden_channels, cfg.in_channels, 3, false);
      append_conv(out, "conv2", cfg.out_channels, cfg.hidden_channels, 3, true);
      break;
  }
  return out;
}

template <typename T>
SubnetParams<T> subnet_init(const SubnetConfig& cfg, InitMode mode) {
  Rng rng(cfg.seed);
  SubnetParams<T> params;
  for (const ParamSpec& spec : subnet_layout(cfg)) {
    Tensor<T> t(spec.shape);
    const bool is_bias = spec.name.ends_with(".bias");
    const bool zeroed = (mode == InitMode::IdentityStart && spec.final_layer) ||
                        (mode == InitMode::IdentityStart && is_bias);
    // Draw even for zeroed tensors so interior weights do not depend on the mode.
    const std::size_t fan_in = is_bias ? spec.shape.c : spec.shape.c * spec.shape.h * spec.shape.w;
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, fan_in)));
    for (T& v : t.data()) {
      const double draw = rng.uniform(-bound, bound);
      v = zeroed ? T(0) : static_cast<T>(draw);
    }
    params.tensors.push_back(std::move(t));
  }
  return params;
}

template <typename T>
SubnetOutput<T> subnet_forward(const Tensor<T>& f, const SubnetConfig& cfg, const SubnetParams<T>& p) {
  if (f.shape().c != cfg.in_channels) {
    throw ShapeError("subnet expects " + std::to_string(cfg.in_channels) + " input channels, got " +
                     std::to_string(f.shape().c));
  }
  const Tensor<T> out = detail::subnet_graph(f, cfg.variant, std::span<const Tensor<T>>(p.tensors));
  const std::size_t half = cfg.out_channels / 2;
  return {slice_channels(out, 0, half), slice_channels(out, half, half)};
}

template <typename T>
ad::Var<T> subnet_forward(const ad::Var<T>& f, const SubnetConfig& cfg, std::span<const ad::Var<T>> params) {
  if (f.shape().c != cfg.in_channels) {
    throw ShapeError("subnet expects " + std::to_string(cfg.in_channels) + " input channels, got " +
                     std::to_string(f.shape().c));
  }
  return detail::subnet_graph(f, cfg.variant, params);
}

#define CAINN_INSTANTIATE_CBAM(T)                                                                          \
  template Tensor<T> channel_attention<T>(const Tensor<T>&, const ChannelAttentionParams<T>&);             \
  template Tensor<T> spatial_attention<T>(const Tensor<T>&, const SpatialAttentionParams<T>&);             \
  template Tensor<T> cbam_apply<T>(const Tensor<T>&, const ChannelAttentionParams<T>&,                     \
                                   const SpatialAttentionParams<T>&);                                      \
  template SubnetParams<T> subnet_init<T>(const SubnetConfig&, InitMode);                                  \
  template SubnetOutput<T> subnet_forward<T>(const Tensor<T>&, const SubnetConfig&, const SubnetParams<T>&); \
  template ad::Var<T> subnet_forward<T>(const ad::Var<T>&, const SubnetConfig&, std::span<const ad::Var<T>>);

CAINN_INSTANTIATE_CBAM(float)
CAINN_INSTANTIATE_CBAM(double)

#undef CAINN_INSTANTIATE_CBAM

}  // namespace cainn
