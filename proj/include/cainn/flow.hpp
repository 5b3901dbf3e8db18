#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cainn/autodiff.hpp"
#include "cainn/cbam.hpp"
#include "cainn/tensor.hpp"

namespace cainn {

inline constexpr double kDefaultClampAlpha = 1.9;

struct FlowConfig {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  // Number of permutation + coupling blocks.
  std::size_t steps = 2;
  Variant variant = Variant::CAC;
  // Interior width of CAC/CC subnets; 0 means "same as the subnet input".
  std::size_t hidden_channels = 0;
  std::size_t reduction = 16;
  // Soft clamp s <- alpha * tanh(s / alpha); nullopt disables it.
  std::optional<double> clamp_alpha = kDefaultClampAlpha;
  std::uint64_t seed = 0;
};

// Per-channel standardization applied before the first block.
template <typename T>
struct FeatureNorm {
  std::vector<T> mean;
  std::vector<T> stddev;

  static FeatureNorm identity(std::size_t channels) {
    return {std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1))};
  }
};

// Mean and standard deviation of every channel over (N, H, W). Channels with
// zero spread keep unit scale.
template <typename T>
FeatureNorm<T> compute_feature_norm(const Tensor<T>& data);

template <typename T>
Tensor<T> normalize_features(const Tensor<T>& x, const FeatureNorm<T>& norm);
template <typename T>
Tensor<T> denormalize_features(const Tensor<T>& x, const FeatureNorm<T>& norm);

// One two-sided affine coupling acting on the channel order given by perm.
// Subnet a maps u2 to (s2, t2) for the first half; subnet b maps v1 to
// (s1, t1) for the second half.
template <typename T>
struct CouplingBlock {
  SubnetConfig subnet_a_config;
  SubnetConfig subnet_b_config;
  SubnetParams<T> subnet_a;
  SubnetParams<T> subnet_b;
  std::vector<std::size_t> perm;
  std::optional<double> clamp_alpha;
};

template <typename T>
struct FlowModel {
  FlowConfig config;
  FeatureNorm<T> norm;
  std::vector<CouplingBlock<T>> blocks;

  static FlowModel create(const FlowConfig& cfg, InitMode mode = InitMode::IdentityStart);

  // Every learnable tensor in a fixed order: block by block, subnet a then b.
  std::vector<Tensor<T>*> parameters();
  std::vector<const Tensor<T>*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;
};

template <typename T>
struct FlowOutput {
  Tensor<T> z;
  // Per-sample sum of block log-determinants.
  std::vector<double> logdet;
};

template <typename T>
struct CouplingOutput {
  Tensor<T> v;
  std::vector<double> logdet;
};

// First ceil(C/2) channels and the rest. Needs C >= 2.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x);

template <typename T>
Tensor<T> merge_channels(const Tensor<T>& u1, const Tensor<T>& u2) {
  return concat_channels(u1, u2);
}

// v1 = u1 * exp(s2(u2)) + t2(u2), v2 = u2 * exp(s1(v1)) + t1(v1), applied in the
// block's permuted channel order and mapped back to the input order.
template <typename T>
CouplingOutput<T> coupling_forward(const Tensor<T>& u, const CouplingBlock<T>& block, std::size_t block_index = 0);

template <typename T>
Tensor<T> coupling_inverse(const Tensor<T>& v, const CouplingBlock<T>& block, std::size_t block_index = 0);

// Normalizes, then runs every block. The constant log-determinant of the
// normalization is not part of `logdet`.
template <typename T>
FlowOutput<T> flow_forward(const Tensor<T>& x, const FlowModel<T>& model);

template <typename T>
Tensor<T> flow_inverse(const Tensor<T>& z, const FlowModel<T>& model);

// Standard-normal log-density summed over each sample.
template <typename T>
std::vector<double> gaussian_logdensity(const Tensor<T>& z);

// Batch mean of -(log N(z) + logdet) / (C*H*W).
template <typename T>
double nll_loss(const FlowOutput<T>& out);

// ln|det J| of the blocks for one sample, from a central-difference Jacobian
// of flow_forward. Needs C*H*W <= 64.
template <typename T>
double numerical_logdet_oracle(const Tensor<T>& x, const FlowModel<T>& model, double eps = 1e-5);

// Leaf Vars for model.parameters(), in the same order.
template <typename T>
std::vector<ad::Var<T>> bind_parameters(ad::Tape<T>& tape, const FlowModel<T>& model);

// nll_loss recorded on a tape, differentiable w.r.t. `params`.
template <typename T>
ad::Var<T> flow_nll(ad::Tape<T>& tape, const FlowModel<T>& model, std::span<const ad::Var<T>> params,
                    const Tensor<T>& x);

}  // namespace cainn
