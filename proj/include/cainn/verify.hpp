#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cainn/cbam.hpp"

namespace cainn {

struct CheckResult {
  std::string invariant;
  bool passed = false;
  // Worst observed error (or failure count) next to the bound it must meet.
  double measured = 0.0;
  double tolerance = 0.0;
  std::string detail;
  double seconds = 0.0;
};

// Mutations the suite must catch.
enum class Fault {
  None,
  // Flips the sign of the log-scale in the inverse of the second half.
  InverseScaleSign,
};

struct BijectivityOptions {
  std::vector<Variant> variants{std::begin(kAllVariants), std::end(kAllVariants)};
  std::vector<std::size_t> steps{1, 2, 4, 8};
  std::size_t inputs_per_config = 100;
  std::uint64_t seed = 11;
  Fault fault = Fault::None;
  // Defaults to 1e-6 for float and 1e-10 for double.
  std::optional<double> tolerance;
};

// flow_inverse(flow_forward(x).z) against x, max-abs, for random-init models
// on N(0, 1) inputs.
template <typename T>
CheckResult check_bijectivity(const BijectivityOptions& opt);

struct LogdetOptions {
  std::vector<Variant> variants{std::begin(kAllVariants), std::end(kAllVariants)};
  std::vector<std::size_t> steps{1, 2};
  // Random models per (variant, K) pair.
  std::size_t models_per_config = 5;
  std::uint64_t seed = 23;
  double tolerance = 1e-3;
};

// Analytic logdet against the finite-difference Jacobian on C=4, H=W=2.
// Relative error is |analytic - oracle| / max(1, |oracle|).
CheckResult check_logdet(const LogdetOptions& opt);

struct GradientOptions {
  std::vector<Variant> variants{Variant::CAC};
  std::vector<std::size_t> steps{2};
  std::uint64_t seed = 37;
  double tolerance = 1e-4;
};

// grad_check of the flow NLL with respect to every parameter tensor, double.
CheckResult check_gradients(const GradientOptions& opt);

// auroc against auroc_bruteforce on random tie-heavy instances, plus the
// fixed case pos = {0.9, 0.8}, neg = {0.1, 0.7} -> 1.
CheckResult check_auroc_oracle(std::size_t instances = 1000, std::uint64_t seed = 41, double tolerance = 1e-12);

// Fresh models give z = normalized x and logdet = 0 exactly, every variant.
CheckResult check_identity_start(std::uint64_t seed = 43);

// Attention maps inside (0, 1), CBAM output no larger than its input and
// shape-preserving, over random inputs and parameters.
CheckResult check_cbam_bounds(std::size_t trials = 200, std::uint64_t seed = 47);

enum class VerifyLevel { Fast, Full };

struct VerifyReport {
  VerifyLevel level = VerifyLevel::Fast;
  std::vector<CheckResult> checks;

  bool passed() const;
  std::string json() const;
};

// Float round trips drift by a few ulps per block, so the suite bounds them
// at this level rather than at 1e-6.
inline constexpr double kVerifyFloatRoundTripTolerance = 1e-4;

// fast: bijectivity (both precisions), AUROC oracle, CBAM bounds, identity
// start. full adds the logdet and gradient checks over every variant with
// K in {1, 2}.
VerifyReport run_verify(VerifyLevel level, Fault fault = Fault::None);

}  // namespace cainn
