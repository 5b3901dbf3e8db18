#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cainn/eval.hpp"
#include "cainn/tensor.hpp"

namespace cainn {

// CAFM feature container, all little-endian:
//   "CAFM" | u32 version = 1 | u32 N, C, H, W | u8 dtype (0 = f32, 1 = f64)
//   | N*C*H*W values row-major | u32 CRC32 of all preceding bytes
inline constexpr std::uint32_t kFeatureFileVersion = 1;

template <typename T>
void write_features(const Tensor<T>& t, const std::filesystem::path& path);

// Converts to T when the stored precision differs.
template <typename T>
Tensor<T> read_features(const std::filesystem::path& path);

struct FeatureFileInfo {
  Shape shape;
  Dtype dtype;
};

FeatureFileInfo read_feature_header(const std::filesystem::path& path);

// One manifest line: path<TAB>label<TAB>maskpath|-<TAB>Himg<TAB>Wimg
struct ManifestRecord {
  std::filesystem::path features;
  bool anomalous = false;
  // Empty for records without a mask.
  std::filesystem::path mask;
  std::size_t image_height = 0;
  std::size_t image_width = 0;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
};

// Relative paths are resolved against the manifest's directory. Lines that
// are empty or start with '#' are skipped.
DatasetManifest read_manifest(const std::filesystem::path& path);

// Paths are written relative to the manifest's directory when possible.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Stacks every record's features into one (N, C, H, W) tensor.
template <typename T>
Tensor<T> load_feature_set(const DatasetManifest& manifest);

// Features, labels and masks for evaluation.
template <typename T>
std::vector<TestSample<T>> load_test_set(const DatasetManifest& manifest);

struct SynthConfig {
  std::size_t n_train = 200;
  std::size_t n_test_normal = 40;
  std::size_t n_test_anomalous = 40;
  std::size_t image_size = 32;
  std::uint64_t texture_seed = 1;
  std::uint64_t extractor_seed = 2;
  // Side lengths of injected defects, inclusive.
  std::size_t anomaly_min = 6;
  std::size_t anomaly_max = 12;
  // Added to the texture (unit marginal std) inside the defect.
  double intensity = 2.0;
  // Standard deviation of the texture's Gaussian smoothing, in pixels.
  double smoothing = 2.0;
};

struct SynthImages {
  // (N, 1, S, S) textures.
  Tensor<double> train;
  Tensor<double> test;
  std::vector<bool> test_anomalous;
  // (N_test, 1, S, S) binary masks.
  Tensor<double> test_masks;
};

// Band-limited noise textures; anomalous test images get a rectangle or an
// ellipse whose intensity is shifted by cfg.intensity.
SynthImages synth_images(const SynthConfig& cfg);

struct SynthManifests {
  std::filesystem::path train;
  std::filesystem::path test;
};

// Writes images, extracted features, masks and the train.tsv / test.tsv
// manifests under `out_dir`.
SynthManifests synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir, Dtype dtype = Dtype::F32);

inline constexpr std::size_t kExtractorChannels = 16;

// Frozen random two-layer extractor: 3x3 conv (-> 8 channels) at stride 2,
// relu, 3x3 conv (-> 16 channels) at stride 2. Needs H and W divisible by 4.
template <typename T>
Tensor<T> toy_extractor(const Tensor<T>& images, std::uint64_t seed);

// Binary PGM (P5, maxval 255), value floor(255 * (s - min) / (max - min)).
void export_pgm(const AnomalyMap& map, const std::filesystem::path& path);

}  // namespace cainn
