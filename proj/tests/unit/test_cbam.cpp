#include <gtest/gtest.h>

#include <cmath>

#include "cainn/cbam.hpp"
#include "test_util.hpp"

using namespace cainn;
using cainn::test::randn;
namespace ad = cainn::ad;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

ChannelAttentionParams<double> zero_channel(std::size_t c, std::size_t hidden) {
  return {Tensor<double>(Shape{hidden, c, 1, 1}), Tensor<double>(Shape{c, hidden, 1, 1})};
}

SpatialAttentionParams<double> zero_spatial() { return {ConvKernel<double>(1, 2, 7)}; }

SubnetConfig config(Variant v, std::size_t in = 3, std::size_t out = 4, std::uint64_t seed = 5) {
  return SubnetConfig{v, in, in, out, 16, seed};
}

}  // namespace

TEST(Variants, NamesRoundTrip) {
  for (Variant v : kAllVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_EQ(parse_variant("CaC"), Variant::CAC);
  EXPECT_THROW(parse_variant("cca"), ContractError);
}

TEST(AttentionWidth, ClampedAndPositive) {
  EXPECT_EQ(attention_hidden_width(64, 16), 4u);
  EXPECT_EQ(attention_hidden_width(4, 16), 1u);
  EXPECT_EQ(attention_hidden_width(2, 1), 2u);
  EXPECT_EQ(attention_hidden_width(20, 16), 1u);
}

TEST(ChannelAttention, ZeroWeightsGiveHalf) {
  const Tensor<double> gate = channel_attention(randn(Shape{2, 3, 4, 4}, 1), zero_channel(3, 1));
  EXPECT_EQ(gate.shape(), (Shape{2, 3, 1, 1}));
  for (double v : gate.data()) EXPECT_EQ(v, 0.5);
}

TEST(ChannelAttention, IdentityMlpHandValue) {
  // avg = [1, 3], max = [2, 4].
  const Tensor<double> f(Shape{1, 2, 1, 2}, {0, 2, 2, 4});
  ChannelAttentionParams<double> p = zero_channel(2, 2);
  p.w0.at(0, 0, 0, 0) = p.w0.at(1, 1, 0, 0) = 1.0;
  p.w1.at(0, 0, 0, 0) = p.w1.at(1, 1, 0, 0) = 1.0;
  const Tensor<double> gate = channel_attention(f, p);
  EXPECT_NEAR(gate[0], 0.952574, 1e-6);
  EXPECT_NEAR(gate[1], 0.999089, 1e-6);
  EXPECT_DOUBLE_EQ(gate[0], sigmoid(3.0));
  EXPECT_DOUBLE_EQ(gate[1], sigmoid(7.0));
}

TEST(ChannelAttention, ConstantInputUsesBothPathsEqually) {
  const Tensor<double> f(Shape{1, 2, 3, 3}, {1, 1, 1, 1, 1, 1, 1, 1, 1, -2, -2, -2, -2, -2, -2, -2, -2, -2});
  ChannelAttentionParams<double> p{randn(Shape{2, 2, 1, 1}, 3), randn(Shape{2, 2, 1, 1}, 4)};
  const Tensor<double> gate = channel_attention(f, p);
  const double c[2] = {1.0, -2.0};
  for (std::size_t out = 0; out < 2; ++out) {
    double mlp = 0.0;
    for (std::size_t h = 0; h < 2; ++h) {
      const double pre = p.w0.at(h, 0, 0, 0) * c[0] + p.w0.at(h, 1, 0, 0) * c[1];
      mlp += p.w1.at(out, h, 0, 0) * std::max(0.0, pre);
    }
    EXPECT_NEAR(gate[out], sigmoid(2.0 * mlp), 1e-14);
  }
}

TEST(ChannelAttention, ChannelMismatch) {
  EXPECT_THROW(channel_attention(randn(Shape{1, 3, 2, 2}, 1), zero_channel(4, 1)), ShapeError);
}

TEST(SpatialAttention, ZeroKernelGivesHalfAndBiasGivesSigmoid) {
  const Tensor<double> f = randn(Shape{2, 3, 4, 5}, 2);
  const Tensor<double> half = spatial_attention(f, zero_spatial());
  EXPECT_EQ(half.shape(), (Shape{2, 1, 4, 5}));
  for (double v : half.data()) EXPECT_EQ(v, 0.5);

  SpatialAttentionParams<double> p = zero_spatial();
  p.kernel.bias[0] = 1.25;
  const Tensor<double> biased = spatial_attention(f, p);
  for (double v : biased.data()) EXPECT_DOUBLE_EQ(v, sigmoid(1.25));
}

TEST(SpatialAttention, SingleChannelSummaryIsInputTwice) {
  // Centre taps on both summary channels: the gate is sigmoid(avg + max) =
  // sigmoid(2 f) for a one-channel map.
  const Tensor<double> f = randn(Shape{1, 1, 3, 3}, 6);
  SpatialAttentionParams<double> p = zero_spatial();
  p.kernel.weight.at(0, 0, 3, 3) = 1.0;
  p.kernel.weight.at(0, 1, 3, 3) = 1.0;
  const Tensor<double> gate = spatial_attention(f, p);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(gate[i], sigmoid(2.0 * f[i]), 1e-15);
}

TEST(Cbam, ZeroParametersQuarterInput) {
  const Tensor<double> f = randn(Shape{2, 4, 3, 3}, 7);
  const Tensor<double> out = cbam_apply(f, zero_channel(4, 1), zero_spatial());
  EXPECT_EQ(out, scale(f, 0.25));
}

TEST(Cbam, SaturatedGatesPassInputThrough) {
  const Tensor<double> f = map_unary(randn(Shape{1, 2, 3, 3}, 8), UnaryOp::Sigmoid);
  ChannelAttentionParams<double> cp = zero_channel(2, 2);
  cp.w0.at(0, 0, 0, 0) = cp.w0.at(1, 1, 0, 0) = 1.0;
  cp.w1.at(0, 0, 0, 0) = cp.w1.at(1, 1, 0, 0) = 1e4;
  SpatialAttentionParams<double> sp = zero_spatial();
  sp.kernel.bias[0] = 1e4;
  EXPECT_LT(max_abs_diff(cbam_apply(f, cp, sp), f), 1e-15);
}

TEST(CbamProperty, BoundsAndShape) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(2), c = 1 + rng.below(6), h = 1 + rng.below(5), w = 1 + rng.below(5);
    const std::size_t hidden = attention_hidden_width(c, 1 + rng.below(16));
    const Tensor<double> f = randn(Shape{n, c, h, w}, 100 + trial, 2.0);
    const ChannelAttentionParams<double> cp{randn(Shape{hidden, c, 1, 1}, 200 + trial, 0.5),
                                            randn(Shape{c, hidden, 1, 1}, 300 + trial, 0.5)};
    SpatialAttentionParams<double> sp{ConvKernel<double>(1, 2, 7)};
    sp.kernel.weight = randn(sp.kernel.weight.shape(), 400 + trial, 0.1);
    sp.kernel.bias = randn(sp.kernel.bias.shape(), 500 + trial, 0.1);

    const Tensor<double> mc = channel_attention(f, cp);
    for (double g : mc.data()) {
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
    const Tensor<double> ms = spatial_attention(f, sp);
    for (double g : ms.data()) {
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
    const Tensor<double> out = cbam_apply(f, cp, sp);
    ASSERT_EQ(out.shape(), f.shape());
    for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_LE(std::abs(out[i]), std::abs(f[i]));
  }
}

TEST(SubnetLayout, FinalLayerFlags) {
  const auto layout = subnet_layout(config(Variant::CAC));
  ASSERT_EQ(layout.size(), 8u);
  EXPECT_EQ(layout.front().name, "conv1.weight");
  EXPECT_EQ(layout.back().name, "conv2.bias");
  EXPECT_TRUE(layout[6].final_layer);
  EXPECT_TRUE(layout[7].final_layer);
  EXPECT_FALSE(layout[0].final_layer);
  EXPECT_EQ(layout[6].shape, (Shape{4, 3, 3, 3}));
}

TEST(SubnetLayout, OddOutputRejected) {
  EXPECT_THROW(subnet_layout(config(Variant::CA, 3, 3)), ContractError);
  SubnetConfig cfg = config(Variant::CC);
  cfg.hidden_channels = 0;
  EXPECT_THROW(subnet_layout(cfg), ContractError);
}

TEST(Subnet, FreshInitOutputsZeros) {
  for (Variant v : kAllVariants) {
    const SubnetConfig cfg = config(v);
    const SubnetParams<double> p = subnet_init<double>(cfg);
    const SubnetOutput<double> out = subnet_forward(randn(Shape{2, 3, 4, 4}, 10, 3.0), cfg, p);
    EXPECT_EQ(out.s.shape(), (Shape{2, 2, 4, 4}));
    for (double x : out.s.data()) EXPECT_EQ(x, 0.0) << variant_name(v);
    for (double x : out.t.data()) EXPECT_EQ(x, 0.0) << variant_name(v);
  }
}

TEST(Subnet, FinalLayerZeroForAnySeed) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (Variant v : kAllVariants) {
      const SubnetConfig cfg = config(v, 3, 4, seed);
      const auto layout = subnet_layout(cfg);
      const SubnetParams<double> p = subnet_init<double>(cfg);
      for (std::size_t i = 0; i < layout.size(); ++i) {
        if (!layout[i].final_layer) continue;
        for (double x : p.tensors[i].data()) EXPECT_EQ(x, 0.0);
      }
    }
  }
}

TEST(Subnet, CcIdentityKernelsSliceInput) {
  // in = 2, hidden = 2, out = 4; conv2 copies the hidden map twice so
  // s = t = relu(f).
  SubnetConfig cfg{Variant::CC, 2, 2, 4, 16, 0};
  SubnetParams<double> p = subnet_init<double>(cfg);
  for (auto& t : p.tensors) t = Tensor<double>(t.shape());
  p.tensors[0].at(0, 0, 1, 1) = p.tensors[0].at(1, 1, 1, 1) = 1.0;
  for (std::size_t o = 0; o < 4; ++o) p.tensors[2].at(o, o % 2, 1, 1) = 1.0;

  const Tensor<double> f = map_unary(randn(Shape{1, 2, 3, 3}, 11), UnaryOp::Exp);
  const SubnetOutput<double> out = subnet_forward(f, cfg, p);
  EXPECT_EQ(out.s, f);
  EXPECT_EQ(out.t, f);

  const Tensor<double> signed_f = randn(Shape{1, 2, 3, 3}, 12);
  EXPECT_EQ(subnet_forward(signed_f, cfg, p).s, map_unary(signed_f, UnaryOp::Relu));
}

TEST(Subnet, Deterministic) {
  for (Variant v : kAllVariants) {
    const SubnetConfig cfg = config(v, 3, 4, 99);
    const SubnetParams<double> a = subnet_init<double>(cfg, InitMode::Random);
    const SubnetParams<double> b = subnet_init<double>(cfg, InitMode::Random);
    EXPECT_EQ(a.tensors, b.tensors);
    const Tensor<double> f = randn(Shape{1, 3, 4, 4}, 13);
    EXPECT_EQ(subnet_forward(f, cfg, a).s, subnet_forward(f, cfg, b).s);
    EXPECT_EQ(subnet_forward(f, cfg, a).t, subnet_forward(f, cfg, b).t);
  }
}

TEST(Subnet, SeedsChangeInteriorKernels) {
  const SubnetParams<double> a = subnet_init<double>(config(Variant::CAC, 3, 4, 1));
  const SubnetParams<double> b = subnet_init<double>(config(Variant::CAC, 3, 4, 2));
  EXPECT_NE(a.tensors[0], b.tensors[0]);
  EXPECT_NE(a.tensors[2], b.tensors[2]);
}

TEST(Subnet, InitBoundedByFanIn) {
  const SubnetConfig cfg = config(Variant::CAC, 6, 4, 3);
  const auto layout = subnet_layout(cfg);
  const SubnetParams<double> p = subnet_init<double>(cfg, InitMode::Random);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const Shape& s = layout[i].shape;
    const bool bias = layout[i].name.ends_with(".bias");
    const double bound = 1.0 / std::sqrt(static_cast<double>(bias ? s.c : s.c * s.h * s.w));
    for (double x : p.tensors[i].data()) EXPECT_LE(std::abs(x), bound) << layout[i].name;
  }
}

TEST(Subnet, ChannelMismatch) {
  const SubnetConfig cfg = config(Variant::CA);
  EXPECT_THROW(subnet_forward(randn(Shape{1, 2, 3, 3}, 1), cfg, subnet_init<double>(cfg)), ShapeError);
}

TEST(Subnet, TapeForwardMatchesPlain) {
  for (Variant v : kAllVariants) {
    const SubnetConfig cfg = config(v, 3, 4, 21);
    const SubnetParams<double> p = subnet_init<double>(cfg, InitMode::Random);
    const Tensor<double> f = randn(Shape{2, 3, 3, 4}, 14);
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> vars;
    for (const auto& t : p.tensors) vars.push_back(tape.leaf(t));
    const ad::Var<double> out = subnet_forward(tape.constant(f), cfg, std::span<const ad::Var<double>>(vars));
    const SubnetOutput<double> plain = subnet_forward(f, cfg, p);
    EXPECT_EQ(slice_channels(out.value(), 0, 2), plain.s);
    EXPECT_EQ(slice_channels(out.value(), 2, 2), plain.t);
  }
}

// grad_check of a weighted sum of the subnet output with respect to the input
// and to every parameter tensor.
class SubnetGrad : public ::testing::TestWithParam<Variant> {};

TEST_P(SubnetGrad, BelowTolerance) {
  const SubnetConfig cfg = config(GetParam(), 3, 4, 31);
  const SubnetParams<double> p = subnet_init<double>(cfg, InitMode::Random);
  const Tensor<double> f = randn(Shape{2, 3, 3, 3}, 15);
  const Tensor<double> w = randn(Shape{2, 4, 3, 3}, 16);

  auto run = [&](std::size_t slot) {
    const ad::ScalarFunction<double> fn = [&](ad::Tape<double>& tape, const ad::Var<double>& x) {
      std::vector<ad::Var<double>> vars;
      for (std::size_t i = 0; i < p.tensors.size(); ++i) vars.push_back(i == slot ? x : tape.constant(p.tensors[i]));
      const ad::Var<double> input = slot == p.tensors.size() ? x : tape.constant(f);
      const ad::Var<double> out = subnet_forward(input, cfg, std::span<const ad::Var<double>>(vars));
      return ad::sum(ad::elementwise(out, tape.constant(w), BinaryOp::Mul));
    };
    return ad::grad_check(fn, slot == p.tensors.size() ? f : p.tensors[slot]);
  };

  for (std::size_t slot = 0; slot <= p.tensors.size(); ++slot) {
    EXPECT_LT(run(slot), 1e-4) << variant_name(GetParam()) << " slot " << slot;
  }
}

INSTANTIATE_TEST_SUITE_P(AllVariants, SubnetGrad, ::testing::ValuesIn(kAllVariants),
                         [](const auto& info) { return std::string(variant_name(info.param)); });
