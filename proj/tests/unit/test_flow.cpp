#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cainn/flow.hpp"
#include "test_util.hpp"

using namespace cainn;
using cainn::test::randn;
namespace ad = cainn::ad;

namespace {

const double kLn2Pi = std::log(2.0 * std::numbers::pi);

FlowConfig small_config(Variant v, std::size_t steps, std::uint64_t seed = 3) {
  FlowConfig cfg;
  cfg.channels = 4;
  cfg.height = 3;
  cfg.width = 3;
  cfg.steps = steps;
  cfg.variant = v;
  cfg.seed = seed;
  return cfg;
}

FeatureNorm<double> random_norm(std::size_t channels, std::uint64_t seed) {
  Rng rng(seed);
  FeatureNorm<double> norm;
  for (std::size_t c = 0; c < channels; ++c) {
    norm.mean.push_back(rng.uniform(-1.0, 1.0));
    norm.stddev.push_back(rng.uniform(0.5, 2.0));
  }
  return norm;
}

// C=2, H=W=1 flow whose CC subnets are constant: conv weights zero, output
// bias fixed. Subnet a emits (s2, t2), subnet b emits (s1, t1).
FlowModel<double> constant_coupling(double s2, double t2, double s1, double t1) {
  FlowConfig cfg;
  cfg.channels = 2;
  cfg.height = 1;
  cfg.width = 1;
  cfg.steps = 1;
  cfg.variant = Variant::CC;
  cfg.clamp_alpha = std::nullopt;
  FlowModel<double> model = FlowModel<double>::create(cfg);
  CouplingBlock<double>& block = model.blocks[0];
  block.perm = {0, 1};
  for (auto* params : {&block.subnet_a, &block.subnet_b}) {
    for (auto& t : params->tensors) t = Tensor<double>(t.shape());
  }
  block.subnet_a.tensors[3] = Tensor<double>(Shape{1, 2, 1, 1}, {s2, t2});
  block.subnet_b.tensors[3] = Tensor<double>(Shape{1, 2, 1, 1}, {s1, t1});
  return model;
}

// Larger final layers so s leaves the linear region of the clamp.
void amplify(FlowModel<double>& model, double factor) {
  for (Tensor<double>* p : model.parameters()) {
    for (double& v : p->data()) v *= factor;
  }
}

}  // namespace

TEST(Split, CeilingWidths) {
  auto [a, b] = split_channels(Tensor<double>(Shape{1, 4, 2, 2}));
  EXPECT_EQ(a.shape().c, 2u);
  EXPECT_EQ(b.shape().c, 2u);
  auto [c, d] = split_channels(Tensor<double>(Shape{1, 5, 2, 2}));
  EXPECT_EQ(c.shape().c, 3u);
  EXPECT_EQ(d.shape().c, 2u);
  EXPECT_THROW(split_channels(Tensor<double>(Shape{1, 1, 2, 2})), ContractError);
}

TEST(Split, MergeInverts) {
  for (std::size_t c = 2; c < 8; ++c) {
    const Tensor<double> x = randn(Shape{2, c, 3, 2}, c);
    auto [u1, u2] = split_channels(x);
    EXPECT_EQ(merge_channels(u1, u2), x);
  }
}

TEST(Coupling, HandComputedConstantSubnets) {
  const FlowModel<double> model = constant_coupling(std::log(2.0), 1.0, 0.0, 0.5);
  const Tensor<double> u(Shape{1, 2, 1, 1}, {1.0, 2.0});
  const CouplingOutput<double> out = coupling_forward(u, model.blocks[0]);
  EXPECT_DOUBLE_EQ(out.v[0], 3.0);
  EXPECT_DOUBLE_EQ(out.v[1], 2.5);
  ASSERT_EQ(out.logdet.size(), 1u);
  EXPECT_NEAR(out.logdet[0], 0.693147, 1e-6);

  const Tensor<double> back = coupling_inverse(Tensor<double>(Shape{1, 2, 1, 1}, {3.0, 2.5}), model.blocks[0]);
  EXPECT_DOUBLE_EQ(back[0], 1.0);
  EXPECT_DOUBLE_EQ(back[1], 2.0);
}

TEST(Coupling, PermutedBlockActsInPermutedOrder) {
  FlowModel<double> model = constant_coupling(std::log(2.0), 1.0, 0.0, 0.5);
  model.blocks[0].perm = {1, 0};
  // Channel 1 now plays u1 and channel 0 plays u2; the result is mapped back.
  const CouplingOutput<double> out = coupling_forward(Tensor<double>(Shape{1, 2, 1, 1}, {2.0, 1.0}), model.blocks[0]);
  EXPECT_DOUBLE_EQ(out.v[0], 2.5);
  EXPECT_DOUBLE_EQ(out.v[1], 3.0);
}

TEST(Coupling, ZeroSubnetsAreIdentity) {
  const FlowModel<double> model = FlowModel<double>::create(small_config(Variant::CAC, 1));
  const Tensor<double> u = randn(Shape{2, 4, 3, 3}, 4);
  const CouplingOutput<double> out = coupling_forward(u, model.blocks[0]);
  EXPECT_EQ(out.v, u);
  EXPECT_EQ(out.logdet, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(coupling_inverse(u, model.blocks[0]), u);
}

TEST(Coupling, NonFiniteSubnetOutputNamesBlock) {
  FlowModel<double> model = constant_coupling(std::numeric_limits<double>::infinity(), 0.0, 0.0, 0.0);
  try {
    coupling_forward(Tensor<double>(Shape{1, 2, 1, 1}, {1.0, 1.0}), model.blocks[0], 7);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find('7'), std::string::npos);
  }
}

TEST(Flow, OracleMatchesHandLogdet) {
  const FlowModel<double> model = constant_coupling(std::log(2.0), 1.0, 0.0, 0.5);
  const Tensor<double> x(Shape{1, 2, 1, 1}, {0.3, -0.7});
  EXPECT_NEAR(numerical_logdet_oracle(x, model), std::log(2.0), 1e-8);
}

TEST(Flow, OracleIsZeroForIdentity) {
  const FlowModel<double> model = FlowModel<double>::create(small_config(Variant::CA, 2));
  EXPECT_NEAR(numerical_logdet_oracle(randn(Shape{1, 4, 3, 3}, 5), model), 0.0, 1e-9);
}

TEST(Flow, OracleRejectsLargeOrBatchedInputs) {
  FlowConfig cfg = small_config(Variant::CA, 1);
  cfg.height = cfg.width = 5;
  const FlowModel<double> model = FlowModel<double>::create(cfg);
  EXPECT_THROW(numerical_logdet_oracle(randn(Shape{1, 4, 5, 5}, 1), model), ContractError);
  EXPECT_THROW(numerical_logdet_oracle(randn(Shape{2, 4, 5, 5}, 1), model), ContractError);
}

TEST(Flow, SingleStepIsOneCouplingOfNormalizedInput) {
  for (Variant v : kAllVariants) {
    FlowModel<double> model = FlowModel<double>::create(small_config(v, 1, 8), InitMode::Random);
    model.norm = random_norm(4, 9);
    const Tensor<double> x = randn(Shape{3, 4, 3, 3}, 10);
    const FlowOutput<double> out = flow_forward(x, model);
    const CouplingOutput<double> block = coupling_forward(normalize_features(x, model.norm), model.blocks[0]);
    EXPECT_EQ(out.z, block.v);
    EXPECT_EQ(out.logdet, block.logdet);
  }
}

TEST(Flow, IdentityStartEveryVariant) {
  for (Variant v : kAllVariants) {
    for (std::size_t k : {1, 2, 4}) {
      FlowModel<double> model = FlowModel<double>::create(small_config(v, k));
      model.norm = random_norm(4, 11);
      const Tensor<double> x = randn(Shape{2, 4, 3, 3}, 12, 3.0);
      const FlowOutput<double> out = flow_forward(x, model);
      EXPECT_EQ(out.z, normalize_features(x, model.norm));
      for (double ld : out.logdet) EXPECT_EQ(ld, 0.0);
      EXPECT_LT(max_abs_diff(flow_inverse(out.z, model), x), 1e-14);
    }
  }
}

TEST(FlowProperty, RoundTripDouble) {
  for (Variant v : kAllVariants) {
    for (std::size_t k : {1, 2, 4, 8}) {
      FlowModel<double> model = FlowModel<double>::create(small_config(v, k, 20 + k), InitMode::Random);
      model.norm = random_norm(4, 13);
      for (std::uint64_t s = 0; s < 5; ++s) {
        const Tensor<double> x = randn(Shape{4, 4, 3, 3}, 100 * k + s);
        EXPECT_LT(max_abs_diff(flow_inverse(flow_forward(x, model).z, model), x), 1e-10)
            << variant_name(v) << " K=" << k;
      }
      const Tensor<double> z = randn(Shape{2, 4, 3, 3}, 700 + k);
      EXPECT_LT(max_abs_diff(flow_forward(flow_inverse(z, model), model).z, z), 1e-10);
    }
  }
}

TEST(FlowProperty, RoundTripFloatSingleStep) {
  for (Variant v : kAllVariants) {
    const FlowModel<float> model = FlowModel<float>::create(small_config(v, 1, 30), InitMode::Random);
    const Tensor<float> x = randn<float>(Shape{8, 4, 3, 3}, 14);
    EXPECT_LT(max_abs_diff(flow_inverse(flow_forward(x, model).z, model), x), 1e-5f) << variant_name(v);
  }
}

TEST(FlowProperty, InverseIsInjective) {
  const FlowModel<double> model = FlowModel<double>::create(small_config(Variant::CAC, 2, 31), InitMode::Random);
  const Tensor<double> z1 = randn(Shape{1, 4, 3, 3}, 15);
  Tensor<double> z2 = z1;
  z2[5] += 1e-3;
  EXPECT_GT(max_abs_diff(flow_inverse(z1, model), flow_inverse(z2, model)), 0.0);
}

TEST(FlowProperty, AnalyticLogdetMatchesOracle) {
  for (Variant v : kAllVariants) {
    for (std::size_t k : {1, 2}) {
      FlowConfig cfg = small_config(v, k, 40 + k);
      cfg.height = cfg.width = 2;
      FlowModel<double> model = FlowModel<double>::create(cfg, InitMode::Random);
      model.norm = random_norm(4, 16);
      const Tensor<double> x = randn(Shape{1, 4, 2, 2}, 17);
      const double analytic = flow_forward(x, model).logdet[0];
      const double oracle = numerical_logdet_oracle(x, model);
      EXPECT_LT(std::abs(analytic - oracle) / std::max(1.0, std::abs(oracle)), 1e-3)
          << variant_name(v) << " K=" << k << " analytic " << analytic << " oracle " << oracle;
    }
  }
}

TEST(FlowProperty, ClampBoundsBlockLogdet) {
  for (Variant v : kAllVariants) {
    FlowModel<double> model = FlowModel<double>::create(small_config(v, 1, 50), InitMode::Random);
    amplify(model, 6.0);
    const double alpha = *model.config.clamp_alpha;
    const Tensor<double> x = randn(Shape{6, 4, 3, 3}, 18, 4.0);
    const CouplingOutput<double> out = coupling_forward(x, model.blocks[0]);
    // Two halves of 2 * 9 elements each.
    for (double ld : out.logdet) EXPECT_LE(std::abs(ld), 2.0 * alpha * 18.0);
    EXPECT_LT(max_abs_diff(coupling_inverse(out.v, model.blocks[0]), x), 1e-9);
  }
}

TEST(FlowProperty, ClampKeepsEachScaleInsideAlpha) {
  // With one-element halves, logdet per half is the effective s itself.
  FlowModel<double> model = constant_coupling(50.0, 0.0, -50.0, 0.0);
  model.blocks[0].clamp_alpha = 1.9;
  const CouplingOutput<double> out = coupling_forward(Tensor<double>(Shape{1, 2, 1, 1}, {1.0, 1.0}), model.blocks[0]);
  EXPECT_NEAR(out.v[0], std::exp(1.9 * std::tanh(50.0 / 1.9)), 1e-12);
  EXPECT_LE(out.v[0], std::exp(1.9));
  EXPECT_GE(out.v[1], std::exp(-1.9));
  EXPECT_NEAR(out.logdet[0], 0.0, 1e-12);
}

TEST(FlowModel, PermutationsAreSeededBijections) {
  const FlowModel<double> a = FlowModel<double>::create(small_config(Variant::CAC, 4, 60));
  const FlowModel<double> b = FlowModel<double>::create(small_config(Variant::CAC, 4, 60));
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(a.blocks[k].perm, b.blocks[k].perm);
    EXPECT_NO_THROW(check_permutation(std::span<const std::size_t>(a.blocks[k].perm), 4));
  }
  EXPECT_EQ(a.parameter_names().size(), a.parameters().size());
  std::size_t total = 0;
  for (const Tensor<double>* p : a.parameters()) total += p->numel();
  EXPECT_EQ(a.parameter_count(), total);
}

TEST(FlowModel, InvalidConfigsRejected) {
  FlowConfig cfg = small_config(Variant::CA, 1);
  cfg.channels = 1;
  EXPECT_THROW(FlowModel<double>::create(cfg), ContractError);
  cfg = small_config(Variant::CA, 0);
  EXPECT_THROW(FlowModel<double>::create(cfg), ContractError);
  cfg = small_config(Variant::CA, 1);
  cfg.clamp_alpha = -1.0;
  EXPECT_THROW(FlowModel<double>::create(cfg), ContractError);
}

TEST(Flow, DimensionMismatch) {
  const FlowModel<double> model = FlowModel<double>::create(small_config(Variant::CA, 1));
  EXPECT_THROW(flow_forward(randn(Shape{1, 4, 3, 2}, 1), model), ShapeError);
  EXPECT_THROW(flow_inverse(randn(Shape{1, 3, 3, 3}, 1), model), ShapeError);
}

TEST(Norm, StatisticsAndRoundTrip) {
  Tensor<double> data = randn(Shape{50, 3, 4, 4}, 19);
  for (std::size_t n = 0; n < 50; ++n) {
    for (std::size_t i = 0; i < 16; ++i) {
      data.plane(n, 1)[i] = 3.0 + 2.0 * data.plane(n, 1)[i];
      data.plane(n, 2)[i] = 7.0;
    }
  }
  const FeatureNorm<double> norm = compute_feature_norm(data);
  double mean1 = 0.0, sq1 = 0.0;
  for (std::size_t n = 0; n < 50; ++n) {
    for (std::size_t i = 0; i < 16; ++i) mean1 += data.plane(n, 1)[i];
  }
  mean1 /= 800.0;
  for (std::size_t n = 0; n < 50; ++n) {
    for (std::size_t i = 0; i < 16; ++i) sq1 += (data.plane(n, 1)[i] - mean1) * (data.plane(n, 1)[i] - mean1);
  }
  EXPECT_NEAR(norm.mean[1], mean1, 1e-12);
  EXPECT_NEAR(norm.stddev[1], std::sqrt(sq1 / 800.0), 1e-12);
  EXPECT_DOUBLE_EQ(norm.mean[2], 7.0);
  EXPECT_EQ(norm.stddev[2], 1.0);
  EXPECT_LT(max_abs_diff(denormalize_features(normalize_features(data, norm), norm), data), 1e-12);
}

TEST(Density, Examples) {
  EXPECT_NEAR(gaussian_logdensity(Tensor<double>(Shape{1, 2, 1, 1}))[0], -1.837877, 1e-6);
  EXPECT_NEAR(gaussian_logdensity(Tensor<double>(Shape{1, 1, 1, 1}, 1.0))[0], -1.418939, 1e-6);
  EXPECT_DOUBLE_EQ(gaussian_logdensity(Tensor<double>(Shape{1, 2, 1, 1}))[0], -kLn2Pi);
}

TEST(Density, DecreasesWithNorm) {
  double prev = 0.0;
  for (int i = 0; i < 10; ++i) {
    const Tensor<double> z(Shape{1, 3, 1, 1}, 0.3 * i);
    const double d = gaussian_logdensity(z)[0];
    if (i > 0) EXPECT_LT(d, prev);
    prev = d;
  }
}

TEST(Nll, Examples) {
  FlowOutput<double> out{Tensor<double>(Shape{1, 2, 2, 2}), {0.0}};
  EXPECT_NEAR(nll_loss(out), 0.918939, 1e-6);
  EXPECT_DOUBLE_EQ(nll_loss(out), 0.5 * kLn2Pi);
  out.logdet[0] = 1.0;
  EXPECT_LT(nll_loss(out), 0.5 * kLn2Pi);
  EXPECT_DOUBLE_EQ(nll_loss(out), 0.5 * kLn2Pi - 1.0 / 8.0);
}

TEST(Nll, IdentityModelIsNllOfNormalizedInput) {
  FlowModel<double> model = FlowModel<double>::create(small_config(Variant::AC, 2));
  model.norm = random_norm(4, 20);
  const Tensor<double> x = randn(Shape{3, 4, 3, 3}, 21);
  const Tensor<double> xn = normalize_features(x, model.norm);
  double expected = 0.0;
  for (double v : xn.data()) expected += 0.5 * (v * v + kLn2Pi);
  expected /= static_cast<double>(xn.numel());
  EXPECT_NEAR(nll_loss(flow_forward(x, model)), expected, 1e-12);
}

TEST(Nll, TapeValueMatchesPlain) {
  FlowModel<double> model = FlowModel<double>::create(small_config(Variant::CAC, 2, 70), InitMode::Random);
  model.norm = random_norm(4, 22);
  const Tensor<double> x = randn(Shape{3, 4, 3, 3}, 23);
  ad::Tape<double> tape;
  const auto params = bind_parameters(tape, model);
  const auto loss = flow_nll(tape, model, std::span<const ad::Var<double>>(params), x);
  EXPECT_NEAR(loss.value()[0], nll_loss(flow_forward(x, model)), 1e-12);
}

class NllGrad : public ::testing::TestWithParam<Variant> {};

TEST_P(NllGrad, EveryParameterTensor) {
  FlowConfig cfg = small_config(GetParam(), 2, 80);
  cfg.height = cfg.width = 2;
  FlowModel<double> model = FlowModel<double>::create(cfg, InitMode::Random);
  model.norm = random_norm(4, 24);
  const Tensor<double> x = randn(Shape{2, 4, 2, 2}, 25);
  const std::vector<const Tensor<double>*> params = std::as_const(model).parameters();

  for (std::size_t slot = 0; slot < params.size(); ++slot) {
    const ad::ScalarFunction<double> fn = [&](ad::Tape<double>& tape, const ad::Var<double>& p) {
      std::vector<ad::Var<double>> vars;
      for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(i == slot ? p : tape.constant(*params[i]));
      return flow_nll(tape, model, std::span<const ad::Var<double>>(vars), x);
    };
    EXPECT_LT(ad::grad_check(fn, *params[slot]), 1e-4) << model.parameter_names()[slot];
  }
}

INSTANTIATE_TEST_SUITE_P(AllVariants, NllGrad, ::testing::ValuesIn(kAllVariants),
                         [](const auto& info) { return std::string(variant_name(info.param)); });
