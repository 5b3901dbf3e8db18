#pragma once

// Layer compositions written once over a value type V, which is either
// Tensor<T> (plain evaluation) or ad::Var<T> (recorded on a tape). Calls are
// unqualified so overload resolution picks the matching primitive set.

#include <span>

#include "cainn/autodiff.hpp"
#include "cainn/cbam.hpp"
#include "cainn/ops.hpp"

namespace cainn::detail {

using cainn::ad::channelwise_pool;
using cainn::ad::concat_channels;
using cainn::ad::conv2d;
using cainn::ad::elementwise;
using cainn::ad::global_pool;
using cainn::ad::map_unary;
using cainn::channelwise_pool;
using cainn::concat_channels;
using cainn::conv2d;
using cainn::elementwise;
using cainn::global_pool;
using cainn::map_unary;

template <class V>
V channel_gate(const V& f, const V& w0, const V& w1) {
  const V hidden_avg = map_unary(conv2d(global_pool(f, PoolMode::Avg), w0), UnaryOp::Relu);
  const V hidden_max = map_unary(conv2d(global_pool(f, PoolMode::Max), w0), UnaryOp::Relu);
  return map_unary(elementwise(conv2d(hidden_avg, w1), conv2d(hidden_max, w1), BinaryOp::Add), UnaryOp::Sigmoid);
}

template <class V>
V spatial_gate(const V& f, const V& weight, const V& bias) {
  const V summary = concat_channels(channelwise_pool(f, PoolMode::Avg), channelwise_pool(f, PoolMode::Max));
  return map_unary(conv2d(summary, weight, bias), UnaryOp::Sigmoid);
}

// p = {channel.w0, channel.w1, spatial.weight, spatial.bias}
template <class V>
V cbam(const V& f, std::span<const V> p) {
  const V refined = elementwise(f, channel_gate(f, p[0], p[1]), BinaryOp::Mul);
  return elementwise(refined, spatial_gate(refined, p[2], p[3]), BinaryOp::Mul);
}

template <class V>
V subnet_graph(const V& f, Variant variant, std::span<const V> p) {
  switch (variant) {
    case Variant::CA:
      return cbam(conv2d(f, p[0], p[1]), p.subspan(2, 4));
    case Variant::AC:
      return conv2d(cbam(f, p.subspan(0, 4)), p[4], p[5]);
    case Variant::CAC: {
      const V attended = cbam(conv2d(f, p[0], p[1]), p.subspan(2, 4));
      return conv2d(attended, p[6], p[7]);
    }
    case Variant::CC:
      return conv2d(map_unary(conv2d(f, p[0], p[1]), UnaryOp::Relu), p[2], p[3]);
  }
  throw ContractError("unknown subnet variant");
}

}  // namespace cainn::detail
