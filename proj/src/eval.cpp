#include "cainn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "cainn/ops.hpp"

namespace cainn {

template <typename T>
AnomalyMap anomaly_map(const Tensor<T>& z, std::size_t sample) {
  const Shape& s = z.shape();
  if (sample >= s.n) throw ContractError("anomaly_map: sample " + std::to_string(sample) + " out of range " + s.str());
  AnomalyMap map{s.h, s.w, std::vector<double>(s.plane(), 0.0)};
  for (std::size_t c = 0; c < s.c; ++c) {
    const T* p = z.plane(sample, c);
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const double v = static_cast<double>(p[i]);
      map.scores[i] += v * v;
    }
  }
  for (double& v : map.scores) v *= 0.5;
  return map;
}

AnomalyMap upsample_bilinear(const AnomalyMap& map, std::size_t height, std::size_t width) {
  if (map.height == 0 || map.width == 0) throw ContractError("upsample_bilinear: empty map");
  if (height < map.height || width < map.width) {
    throw ContractError("upsample_bilinear: cannot downscale " + std::to_string(map.height) + "x" +
                        std::to_string(map.width) + " to " + std::to_string(height) + "x" + std::to_string(width));
  }
  AnomalyMap out{height, width, std::vector<double>(height * width)};
  // Align corners: output index i sits at source coordinate i * (in-1)/(out-1).
  auto coord = [](std::size_t i, std::size_t in, std::size_t out_n, std::size_t& i0, std::size_t& i1, double& frac) {
    if (in == 1 || out_n == 1) {
      i0 = i1 = 0;
      frac = 0.0;
      return;
    }
    const double pos = static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out_n - 1);
    i0 = std::min(static_cast<std::size_t>(pos), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    frac = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, map.height, height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, map.width, width, x0, x1, fx);
      const double top = map.at(y0, x0) + fx * (map.at(y0, x1) - map.at(y0, x0));
      const double bottom = map.at(y1, x0) + fx * (map.at(y1, x1) - map.at(y1, x0));
      out.scores[y * width + x] = top + fy * (bottom - top);
    }
  }
  return out;
}

double image_score(const AnomalyMap& map) {
  if (map.scores.empty()) throw ContractError("image_score: empty map");
  return *std::max_element(map.scores.begin(), map.scores.end());
}

namespace {

void check_scores(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty()) throw ContractError("auroc: no positive scores");
  if (negatives.empty()) throw ContractError("auroc: no negative scores");
  auto finite = [](double v) { return std::isfinite(v); };
  if (!std::all_of(positives.begin(), positives.end(), finite) ||
      !std::all_of(negatives.begin(), negatives.end(), finite)) {
    throw ContractError("auroc: scores must be finite");
  }
}

}  // namespace

double auroc(std::span<const double> positives, std::span<const double> negatives) {
  check_scores(positives, negatives);
  struct Entry {
    double score;
    bool positive;
  };
  std::vector<Entry> all;
  all.reserve(positives.size() + negatives.size());
  for (double v : positives) all.push_back({v, true});
  for (double v : negatives) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

  // Sum of 1-based ranks of the positives, tie groups sharing their mean rank.
  double positive_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    std::size_t group_positives = 0;
    while (j < all.size() && all[j].score == all[i].score) {
      if (all[j].positive) ++group_positives;
      ++j;
    }
    const double mean_rank = 0.5 * static_cast<double>(i + 1 + j);
    positive_rank_sum += mean_rank * static_cast<double>(group_positives);
    i = j;
  }
  const double m = static_cast<double>(positives.size());
  const double n = static_cast<double>(negatives.size());
  return (positive_rank_sum - m * (m + 1.0) / 2.0) / (m * n);
}

double auroc_bruteforce(std::span<const double> positives, std::span<const double> negatives) {
  check_scores(positives, negatives);
  if (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()) > 1e7) {
    throw ContractError("auroc_bruteforce: more than 1e7 pairs");
  }
  double credit = 0.0;
  for (double p : positives) {
    for (double q : negatives) {
      if (p > q) {
        credit += 1.0;
      } else if (p == q) {
        credit += 0.5;
      }
    }
  }
  return credit / (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

template <typename T>
EvalResult evaluate(const FlowModel<T>& model, const std::vector<TestSample<T>>& test_set,
                    std::vector<AnomalyMap>* maps) {
  EvalResult result;
  for (const auto& sample : test_set) {
    (sample.anomalous ? result.n_anomalous_images : result.n_normal_images) += 1;
  }
  if (result.n_anomalous_images == 0) throw ContractError("evaluate: test set has no anomalous images");
  if (result.n_normal_images == 0) throw ContractError("evaluate: test set has no normal images");
  result.n_images = test_set.size();
  if (maps != nullptr) maps->clear();

  std::vector<double> image_pos, image_neg, pixel_pos, pixel_neg;
  constexpr std::size_t kChunk = 64;
  const FlowConfig& cfg = model.config;
  for (std::size_t start = 0; start < test_set.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, test_set.size() - start);
    Tensor<T> batch(Shape{count, cfg.channels, cfg.height, cfg.width});
    for (std::size_t k = 0; k < count; ++k) {
      const Tensor<T>& f = test_set[start + k].features;
      if (f.shape() != Shape{1, cfg.channels, cfg.height, cfg.width}) {
        throw ShapeError("evaluate: sample '" + test_set[start + k].name + "' has features " + f.shape().str());
      }
      std::copy(f.data().begin(), f.data().end(), batch.data().begin() + k * f.numel());
    }
    const FlowOutput<T> out = flow_forward(batch, model);
    for (std::size_t k = 0; k < count; ++k) {
      const TestSample<T>& sample = test_set[start + k];
      const AnomalyMap local = anomaly_map(out.z, k);
      const double score = image_score(local);
      result.names.push_back(sample.name);
      result.image_scores.push_back(score);
      result.labels.push_back(sample.anomalous);
      (sample.anomalous ? image_pos : image_neg).push_back(score);

      const std::size_t ih = sample.image_height ? sample.image_height : local.height;
      const std::size_t iw = sample.image_width ? sample.image_width : local.width;
      const AnomalyMap full = upsample_bilinear(local, ih, iw);
      if (sample.anomalous && sample.mask.empty()) {
        throw ContractError("evaluate: anomalous sample '" + sample.name + "' has no mask");
      }
      if (!sample.mask.empty() && sample.mask.size() != ih * iw) {
        throw ShapeError("evaluate: mask of '" + sample.name + "' does not match " + std::to_string(ih) + "x" +
                         std::to_string(iw));
      }
      for (std::size_t i = 0; i < full.scores.size(); ++i) {
        const bool defect = !sample.mask.empty() && sample.mask[i] != 0;
        (defect ? pixel_pos : pixel_neg).push_back(full.scores[i]);
      }
      if (maps != nullptr) maps->push_back(full);
    }
  }
  result.n_anomalous_pixels = pixel_pos.size();
  result.n_normal_pixels = pixel_neg.size();
  result.n_pixels = pixel_pos.size() + pixel_neg.size();
  result.image_auroc = auroc(image_pos, image_neg);
  if (pixel_pos.empty()) throw ContractError("evaluate: masks contain no defect pixels");
  result.pixel_auroc = auroc(pixel_pos, pixel_neg);
  return result;
}

std::string eval_result_json(const EvalResult& result) {
  nlohmann::ordered_json j;
  j["image_auroc"] = result.image_auroc;
  j["pixel_auroc"] = result.pixel_auroc;
  j["n_images"] = result.n_images;
  j["n_pixels"] = result.n_pixels;
  j["n_anomalous_images"] = result.n_anomalous_images;
  j["n_normal_images"] = result.n_normal_images;
  j["n_anomalous_pixels"] = result.n_anomalous_pixels;
  j["n_normal_pixels"] = result.n_normal_pixels;
  auto per_image = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < result.image_scores.size(); ++i) {
    per_image.push_back({{"name", result.names[i]},
                         {"label", result.labels[i] ? "anomalous" : "normal"},
                         {"score", result.image_scores[i]}});
  }
  j["per_image"] = std::move(per_image);
  return j.dump();
}

template <typename T>
Tensor<T> perturb_latent(const Tensor<T>& z, std::span<const LatentSite> sites, double magnitude) {
  const Shape& s = z.shape();
  for (const LatentSite& site : sites) {
    if (site.c >= s.c || site.h >= s.h || site.w >= s.w) {
      throw ContractError("perturb_latent: site (" + std::to_string(site.c) + "," + std::to_string(site.h) + "," +
                          std::to_string(site.w) + ") outside latent " + s.str());
    }
  }
  Tensor<T> out = z;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (const LatentSite& site : sites) {
      out.at(n, site.c, site.h, site.w) = static_cast<T>(static_cast<double>(out.at(n, site.c, site.h, site.w)) + magnitude);
    }
  }
  return out;
}

#define CAINN_INSTANTIATE_EVAL(T)                                                                         \
  template AnomalyMap anomaly_map<T>(const Tensor<T>&, std::size_t);                                      \
  template EvalResult evaluate<T>(const FlowModel<T>&, const std::vector<TestSample<T>>&, std::vector<AnomalyMap>*); \
  template Tensor<T> perturb_latent<T>(const Tensor<T>&, std::span<const LatentSite>, double);

CAINN_INSTANTIATE_EVAL(float)
CAINN_INSTANTIATE_EVAL(double)

#undef CAINN_INSTANTIATE_EVAL

}  // namespace cainn
