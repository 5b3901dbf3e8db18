#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cainn/flow.hpp"
#include "cainn/tensor.hpp"

namespace cainn {

// Row-major H x W grid of non-negative anomaly scores.
struct AnomalyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> scores;

  double at(std::size_t h, std::size_t w) const { return scores[h * width + w]; }
};

// score(h, w) = 0.5 * sum_c z(c, h, w)^2 for one sample of z. This is the
// per-site negative log-density without its additive constant and without
// the flow log-determinant, which does not decompose over sites.
template <typename T>
AnomalyMap anomaly_map(const Tensor<T>& z, std::size_t sample = 0);

// Align-corners bilinear interpolation; upscaling only.
AnomalyMap upsample_bilinear(const AnomalyMap& map, std::size_t height, std::size_t width);

// Maximum site score.
double image_score(const AnomalyMap& map);

// Probability that a positive outranks a negative, ties counted as one half.
// Rank-sum implementation, O((M + N) log(M + N)).
double auroc(std::span<const double> positives, std::span<const double> negatives);

// Literal pair count over all M*N pairs. Guarded to M*N <= 1e7.
double auroc_bruteforce(std::span<const double> positives, std::span<const double> negatives);

template <typename T>
struct TestSample {
  std::string name;
  // (1, C, H, W) feature map.
  Tensor<T> features;
  bool anomalous = false;
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  // image_height * image_width bits; empty means all zero.
  std::vector<std::uint8_t> mask;
};

struct EvalResult {
  double image_auroc = 0.0;
  double pixel_auroc = 0.0;
  std::vector<std::string> names;
  std::vector<double> image_scores;
  std::vector<bool> labels;
  std::size_t n_images = 0;
  std::size_t n_anomalous_images = 0;
  std::size_t n_normal_images = 0;
  std::size_t n_pixels = 0;
  std::size_t n_anomalous_pixels = 0;
  std::size_t n_normal_pixels = 0;
};

// Image AUROC over max-site scores, pixel AUROC over upsampled maps pooled
// across the whole set. Returns the image-resolution maps through `maps`
// when it is non-null.
template <typename T>
EvalResult evaluate(const FlowModel<T>& model, const std::vector<TestSample<T>>& test_set,
                    std::vector<AnomalyMap>* maps = nullptr);

// {"image_auroc", "pixel_auroc", "n_images", "n_pixels", ..., "per_image": [...]}
std::string eval_result_json(const EvalResult& result);

struct LatentSite {
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;
};

// Adds `magnitude` at every listed (c, h, w) of every sample.
template <typename T>
Tensor<T> perturb_latent(const Tensor<T>& z, std::span<const LatentSite> sites, double magnitude);

// Maps a latent back to feature space.
template <typename T>
Tensor<T> generate_from_latent(const Tensor<T>& z, const FlowModel<T>& model) {
  return flow_inverse(z, model);
}

}  // namespace cainn
