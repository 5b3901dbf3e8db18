#include "cainn/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "json.hpp"

#include "cainn/eval.hpp"
#include "cainn/flow.hpp"
#include "cainn/ops.hpp"
#include "cainn/rng.hpp"

namespace cainn {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

template <typename T>
Tensor<T> random_normal(Rng& rng, Shape shape) {
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(rng.normal());
  return t;
}

std::string config_label(Variant v, std::size_t k, std::size_t c, std::size_t h, std::size_t w) {
  std::ostringstream os;
  os << variant_name(v) << "/K=" << k << "/" << c << "x" << h << "x" << w;
  return os.str();
}

template <typename T>
Tensor<T> clamp_scale(const Tensor<T>& s, const std::optional<double>& alpha) {
  if (!alpha) return s;
  Tensor<T> out = s;
  for (T& v : out.data()) v = static_cast<T>(*alpha * std::tanh(static_cast<double>(v) / *alpha));
  return out;
}

// coupling_inverse with the sign of s1 flipped in the second-half update.
template <typename T>
Tensor<T> faulty_coupling_inverse(const Tensor<T>& v, const CouplingBlock<T>& block) {
  const std::size_t c1 = (v.shape().c + 1) / 2;
  const std::size_t c2 = v.shape().c - c1;
  const Tensor<T> permuted = permute_channels(v, std::span<const std::size_t>(block.perm));
  const Tensor<T> v1 = slice_channels(permuted, 0, c1);
  const Tensor<T> v2 = slice_channels(permuted, c1, c2);
  const auto b = subnet_forward(v1, block.subnet_b_config, block.subnet_b);
  const Tensor<T> u2 = elementwise(elementwise(v2, scale(b.t, T(-1)), BinaryOp::Add),
                                   map_unary(clamp_scale(b.s, block.clamp_alpha), UnaryOp::Exp), BinaryOp::Mul);
  const auto a = subnet_forward(u2, block.subnet_a_config, block.subnet_a);
  const Tensor<T> u1 = elementwise(elementwise(v1, scale(a.t, T(-1)), BinaryOp::Add),
                                   map_unary(scale(clamp_scale(a.s, block.clamp_alpha), T(-1)), UnaryOp::Exp),
                                   BinaryOp::Mul);
  return unpermute_channels(concat_channels(u1, u2), std::span<const std::size_t>(block.perm));
}

template <typename T>
Tensor<T> inverse_with_fault(const Tensor<T>& z, const FlowModel<T>& model, Fault fault) {
  if (fault == Fault::None) return flow_inverse(z, model);
  Tensor<T> x = z;
  for (std::size_t k = model.blocks.size(); k-- > 0;) x = faulty_coupling_inverse(x, model.blocks[k]);
  return denormalize_features(x, model.norm);
}

template <typename T>
FlowModel<T> random_model(Variant v, std::size_t k, std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  FlowConfig cfg;
  cfg.channels = c;
  cfg.height = h;
  cfg.width = w;
  cfg.steps = k;
  cfg.variant = v;
  cfg.seed = seed;
  return FlowModel<T>::create(cfg, InitMode::Random);
}

struct Dims {
  std::size_t c, h, w;
};

// An even and an odd channel count.
constexpr Dims kBijectivityDims[] = {{4, 4, 4}, {5, 3, 3}};

}  // namespace

template <typename T>
CheckResult check_bijectivity(const BijectivityOptions& opt) {
  const auto start = Clock::now();
  CheckResult r;
  r.invariant = "bijectivity";
  r.tolerance = opt.tolerance.value_or(std::is_same_v<T, float> ? 1e-6 : 1e-10);
  std::string worst;
  std::size_t configs = 0;
  Rng rng(opt.seed);
  for (Variant v : opt.variants) {
    for (std::size_t k : opt.steps) {
      for (const Dims& d : kBijectivityDims) {
        const FlowModel<T> model = random_model<T>(v, k, d.c, d.h, d.w, rng.next_u64());
        const Tensor<T> x = random_normal<T>(rng, Shape{opt.inputs_per_config, d.c, d.h, d.w});
        const Tensor<T> back = inverse_with_fault(flow_forward(x, model).z, model, opt.fault);
        const double err = max_abs_diff(x, back);
        ++configs;
        if (!(err <= r.measured) || !std::isfinite(err)) {
          r.measured = std::isfinite(err) ? err : INFINITY;
          worst = config_label(v, k, d.c, d.h, d.w);
        }
      }
    }
  }
  r.passed = r.measured < r.tolerance;
  r.detail = std::string(std::is_same_v<T, float> ? "f32" : "f64") + ", " + std::to_string(configs) + " configs x " +
             std::to_string(opt.inputs_per_config) + " inputs, worst " + worst;
  r.seconds = elapsed(start);
  return r;
}

CheckResult check_logdet(const LogdetOptions& opt) {
  const auto start = Clock::now();
  CheckResult r;
  r.invariant = "exact-likelihood";
  r.tolerance = opt.tolerance;
  Rng rng(opt.seed);
  std::size_t models = 0;
  std::string worst;
  for (Variant v : opt.variants) {
    for (std::size_t k : opt.steps) {
      for (std::size_t i = 0; i < opt.models_per_config; ++i) {
        FlowModel<double> model = random_model<double>(v, k, 4, 2, 2, rng.next_u64());
        for (std::size_t c = 0; c < 4; ++c) {
          model.norm.mean[c] = rng.uniform(-0.5, 0.5);
          model.norm.stddev[c] = rng.uniform(0.5, 2.0);
        }
        const Tensor<double> x = random_normal<double>(rng, Shape{1, 4, 2, 2});
        const double analytic = flow_forward(x, model).logdet[0];
        const double oracle = numerical_logdet_oracle(x, model);
        const double rel = std::abs(analytic - oracle) / std::max(1.0, std::abs(oracle));
        ++models;
        if (!(rel <= r.measured)) {
          r.measured = std::isfinite(rel) ? rel : INFINITY;
          worst = config_label(v, k, 4, 2, 2);
        }
      }
    }
  }
  r.passed = r.measured < r.tolerance;
  r.detail = std::to_string(models) + " random models, worst " + worst;
  r.seconds = elapsed(start);
  return r;
}

CheckResult check_gradients(const GradientOptions& opt) {
  const auto start = Clock::now();
  CheckResult r;
  r.invariant = "gradient";
  r.tolerance = opt.tolerance;
  Rng rng(opt.seed);
  std::size_t tensors = 0;
  std::string worst;
  for (Variant v : opt.variants) {
    for (std::size_t k : opt.steps) {
      const FlowModel<double> model = random_model<double>(v, k, 4, 2, 2, rng.next_u64());
      const Tensor<double> x = random_normal<double>(rng, Shape{2, 4, 2, 2});
      const auto params = model.parameters();
      const auto names = model.parameter_names();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const ad::ScalarFunction<double> f = [&, i](ad::Tape<double>& tape, const ad::Var<double>& p) {
          std::vector<ad::Var<double>> vars;
          for (std::size_t j = 0; j < params.size(); ++j) vars.push_back(j == i ? p : tape.constant(*params[j]));
          return flow_nll(tape, model, std::span<const ad::Var<double>>(vars), x);
        };
        const double err = ad::grad_check(f, *params[i]);
        ++tensors;
        if (!(err <= r.measured)) {
          r.measured = std::isfinite(err) ? err : INFINITY;
          worst = std::string(variant_name(v)) + "/K=" + std::to_string(k) + " " + names[i];
        }
      }
    }
  }
  r.passed = r.measured < r.tolerance;
  r.detail = std::to_string(tensors) + " parameter tensors, worst " + worst;
  r.seconds = elapsed(start);
  return r;
}

CheckResult check_auroc_oracle(std::size_t instances, std::uint64_t seed, double tolerance) {
  const auto start = Clock::now();
  CheckResult r;
  r.invariant = "auroc-oracle";
  r.tolerance = tolerance;
  Rng rng(seed);
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t m = 1 + rng.below(60);
    const std::size_t n = 1 + rng.below(60);
    // Few distinct levels on most instances so tie groups are common.
    const std::size_t levels = i % 3 == 0 ? 0 : 1 + rng.below(6);
    auto draw = [&](double shift) {
      return levels == 0 ? rng.normal() + shift : static_cast<double>(rng.below(levels)) + (shift > 0 ? rng.below(2) : 0);
    };
    std::vector<double> pos(m), neg(n);
    for (double& p : pos) p = draw(0.5);
    for (double& q : neg) q = draw(0.0);
    r.measured = std::max(r.measured, std::abs(auroc(pos, neg) - auroc_bruteforce(pos, neg)));
  }
  const double hand = auroc(std::vector<double>{0.9, 0.8}, std::vector<double>{0.1, 0.7});
  r.passed = r.measured < r.tolerance && hand == 1.0;
  r.detail = std::to_string(instances) + " instances; hand case gives " + std::to_string(hand);
  r.seconds = elapsed(start);
  return r;
}

CheckResult check_identity_start(std::uint64_t seed) {
  const auto start = Clock::now();
  CheckResult r;
  r.invariant = "identity-start";
  r.tolerance = 0.0;
  Rng rng(seed);
  std::size_t failures = 0;
  std::string failed;
  auto run = [&](auto tag, Variant v) {
    using T = decltype(tag);
    for (std::size_t k : {1, 2, 4}) {
      FlowConfig cfg{.channels = 5, .height = 4, .width = 3, .steps = k, .variant = v, .seed = rng.next_u64()};
      FlowModel<T> model = FlowModel<T>::create(cfg);
      const Tensor<T> x = random_normal<T>(rng, Shape{3, 5, 4, 3});
      model.norm = compute_feature_norm(x);
      const FlowOutput<T> out = flow_forward(x, model);
      const bool exact = out.z == normalize_features(x, model.norm) &&
                         std::all_of(out.logdet.begin(), out.logdet.end(), [](double d) { return d == 0.0; });
      if (!exact) {
        ++failures;
        failed += " " + config_label(v, k, 5, 4, 3);
      }
    }
  };
  for (Variant v : kAllVariants) {
    run(float{}, v);
    run(double{}, v);
  }
  r.measured = static_cast<double>(failures);
  r.passed = failures == 0;
  r.detail = failures == 0 ? "all variants, K in {1,2,4}, f32 and f64" : "not exact for" + failed;
  r.seconds = elapsed(start);
  return r;
}

CheckResult check_cbam_bounds(std::size_t trials, std::uint64_t seed) {
  const auto start = Clock::now();
  CheckResult r;
  r.invariant = "cbam-bounds";
  r.tolerance = 0.0;
  Rng rng(seed);
  std::size_t violations = 0;
  for (std::size_t i = 0; i < trials; ++i) {
    const std::size_t c = 1 + rng.below(8);
    const std::size_t h = 1 + rng.below(6);
    const std::size_t w = 1 + rng.below(6);
    const std::size_t hid = attention_hidden_width(c, 16);
    // Weights at a small multiple of the initialization scale: far larger
    // pre-activations round sigmoid to exactly 0 or 1 in floating point.
    const double gain = rng.uniform(0.5, 2.0);
    auto weights = [&](Shape s) {
      Tensor<double> t(s);
      const double bound = gain / std::sqrt(static_cast<double>(s.c * s.h * s.w));
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
      return t;
    };
    const ChannelAttentionParams<double> cp{weights(Shape{hid, c, 1, 1}), weights(Shape{c, hid, 1, 1})};
    SpatialAttentionParams<double> sp{ConvKernel<double>(1, 2, 7)};
    sp.kernel.weight = weights(sp.kernel.weight.shape());
    sp.kernel.bias = weights(Shape{1, 1, 1, 1});
    const double spread = rng.uniform(0.1, 3.0);
    Tensor<double> f(Shape{1 + rng.below(3), c, h, w});
    for (double& v : f.data()) v = spread * rng.normal();

    const Tensor<double> mc = channel_attention(f, cp);
    const Tensor<double> ms = spatial_attention(f, sp);
    const Tensor<double> out = cbam_apply(f, cp, sp);
    auto open_unit = [](const Tensor<double>& t) {
      return std::all_of(t.data().begin(), t.data().end(), [](double v) { return v > 0.0 && v < 1.0; });
    };
    bool ok = open_unit(mc) && open_unit(ms) && out.shape() == f.shape();
    for (std::size_t j = 0; ok && j < f.numel(); ++j) ok = std::abs(out[j]) <= std::abs(f[j]);
    if (!ok) ++violations;
  }
  r.measured = static_cast<double>(violations);
  r.passed = violations == 0;
  r.detail = std::to_string(trials) + " random shapes and parameters";
  r.seconds = elapsed(start);
  return r;
}

bool VerifyReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::string VerifyReport::json() const {
  nlohmann::ordered_json j;
  j["level"] = level == VerifyLevel::Fast ? "fast" : "full";
  j["passed"] = passed();
  auto arr = nlohmann::ordered_json::array();
  std::vector<std::string> failed;
  for (const auto& c : checks) {
    arr.push_back({{"invariant", c.invariant},
                   {"passed", c.passed},
                   {"measured", c.measured},
                   {"tolerance", c.tolerance},
                   {"detail", c.detail},
                   {"seconds", c.seconds}});
    if (!c.passed) failed.push_back(c.invariant);
  }
  j["checks"] = std::move(arr);
  j["failed"] = failed;
  return j.dump();
}

VerifyReport run_verify(VerifyLevel level, Fault fault) {
  VerifyReport report;
  report.level = level;
  BijectivityOptions bij;
  bij.fault = fault;
  report.checks.push_back(check_bijectivity<double>(bij));
  bij.tolerance = kVerifyFloatRoundTripTolerance;
  report.checks.push_back(check_bijectivity<float>(bij));
  report.checks.push_back(check_auroc_oracle());
  report.checks.push_back(check_cbam_bounds());
  report.checks.push_back(check_identity_start());
  if (level == VerifyLevel::Full) {
    report.checks.push_back(check_logdet(LogdetOptions{}));
    GradientOptions grad;
    grad.variants.assign(std::begin(kAllVariants), std::end(kAllVariants));
    grad.steps = {1, 2};
    report.checks.push_back(check_gradients(grad));
  }
  return report;
}

template CheckResult check_bijectivity<float>(const BijectivityOptions&);
template CheckResult check_bijectivity<double>(const BijectivityOptions&);

}  // namespace cainn
