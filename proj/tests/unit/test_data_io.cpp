#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "cainn/data_io.hpp"
#include "test_util.hpp"

using namespace cainn;
using cainn::test::randn;
using cainn::test::TempDir;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
std::uint32_t reference_crc(const std::uint8_t* data, std::size_t n) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    crc ^= data[i];
    for (int b = 0; b < 8; ++b) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return b[at] | (b[at + 1] << 8) | (b[at + 2] << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

SynthConfig tiny_synth() {
  SynthConfig cfg;
  cfg.n_train = 6;
  cfg.n_test_normal = 3;
  cfg.n_test_anomalous = 4;
  cfg.image_size = 16;
  cfg.anomaly_min = 4;
  cfg.anomaly_max = 8;
  return cfg;
}

}  // namespace

TEST(Crc, ReferenceCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(reference_crc(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), 0xCBF43926u);
}

TEST(FeatureFile, HeaderBytes) {
  TempDir dir("cafm_header");
  const fs::path p = dir / "x.cafm";
  write_features(Tensor<float>(Shape{2, 8, 4, 4}, 1.0f), p);
  const auto b = slurp(p);
  ASSERT_EQ(b.size(), 4 + 4 + 16 + 1 + 2 * 8 * 4 * 4 * 4 + 4u);
  const std::vector<std::uint8_t> expected{'C', 'A', 'F', 'M', 1, 0, 0, 0, 2, 0, 0, 0, 8, 0, 0, 0,
                                           4,   0,   0,   0,   4, 0, 0, 0, 0};
  EXPECT_TRUE(std::equal(expected.begin(), expected.end(), b.begin()));
  EXPECT_EQ(le32(b, b.size() - 4), reference_crc(b.data(), b.size() - 4));

  const FeatureFileInfo info = read_feature_header(p);
  EXPECT_EQ(info.shape, (Shape{2, 8, 4, 4}));
  EXPECT_EQ(info.dtype, Dtype::F32);
}

TEST(FeatureFile, BitwiseRoundTripBothPrecisions) {
  TempDir dir("cafm_rt");
  const Tensor<double> d = randn(Shape{3, 2, 5, 7}, 1);
  write_features(d, dir / "d.cafm");
  EXPECT_EQ(read_features<double>(dir / "d.cafm"), d);
  const Tensor<float> f = randn<float>(Shape{1, 4, 2, 2}, 2);
  write_features(f, dir / "f.cafm");
  EXPECT_EQ(read_features<float>(dir / "f.cafm"), f);
  EXPECT_EQ(read_features<double>(dir / "f.cafm"), tensor_cast<double>(f));
  EXPECT_EQ(read_feature_header(dir / "d.cafm").dtype, Dtype::F64);
}

TEST(FeatureFile, DistinctErrors) {
  TempDir dir("cafm_err");
  const fs::path p = dir / "x.cafm";
  write_features(randn(Shape{1, 2, 3, 3}, 3), p);
  const auto good = slurp(p);

  auto flipped = good;
  flipped[30] ^= 0x04;
  spill(p, flipped);
  EXPECT_THROW(read_features<double>(p), ChecksumMismatchError);

  auto magic = good;
  magic[0] = 'X';
  spill(p, magic);
  EXPECT_THROW(read_features<double>(p), MagicMismatchError);

  auto version = good;
  version[4] = 2;
  spill(p, version);
  EXPECT_THROW(read_features<double>(p), VersionMismatchError);

  spill(p, std::vector<std::uint8_t>(good.begin(), good.end() - 9));
  EXPECT_THROW(read_features<double>(p), TruncatedFileError);

  spill(p, std::vector<std::uint8_t>(good.begin(), good.begin() + 10));
  EXPECT_THROW(read_features<double>(p), TruncatedFileError);

  EXPECT_THROW(read_features<double>(dir / "absent.cafm"), IoError);
}

TEST(Manifest, ParsesAndResolvesRelativePaths) {
  TempDir dir("manifest");
  {
    std::ofstream out(dir / "m.tsv");
    out << "# comment\n\nnormal.cafm\tnormal\t-\t32\t32\n"
        << "sub/bad.cafm\tanomalous\tsub/bad.mask.cafm\t16\t24\n";
  }
  const DatasetManifest m = read_manifest(dir / "m.tsv");
  ASSERT_EQ(m.records.size(), 2u);
  EXPECT_EQ(m.records[0].features, dir / "normal.cafm");
  EXPECT_FALSE(m.records[0].anomalous);
  EXPECT_TRUE(m.records[0].mask.empty());
  EXPECT_TRUE(m.records[1].anomalous);
  EXPECT_EQ(m.records[1].mask, dir / "sub/bad.mask.cafm");
  EXPECT_EQ(m.records[1].image_height, 16u);
  EXPECT_EQ(m.records[1].image_width, 24u);

  write_manifest(m, dir / "copy.tsv");
  const DatasetManifest again = read_manifest(dir / "copy.tsv");
  ASSERT_EQ(again.records.size(), 2u);
  EXPECT_EQ(again.records[1].mask, m.records[1].mask);
  std::ifstream copy(dir / "copy.tsv");
  std::string first;
  std::getline(copy, first);
  EXPECT_EQ(first.rfind("normal.cafm\t", 0), 0u) << first;
}

TEST(Manifest, Errors) {
  TempDir dir("manifest_err");
  auto write = [&](const std::string& body) {
    std::ofstream(dir / "m.tsv") << body;
    return dir / "m.tsv";
  };
  EXPECT_THROW(read_manifest(write("a.cafm\tweird\t-\t4\t4\n")), FormatError);
  EXPECT_THROW(read_manifest(write("a.cafm\tnormal\t-\t4\n")), FormatError);
  EXPECT_THROW(read_manifest(write("a.cafm\tnormal\t-\tx\t4\n")), FormatError);
  EXPECT_THROW(read_manifest(write("a.cafm\tanomalous\t-\t4\t4\n")), ContractError);
  EXPECT_THROW(read_manifest(dir / "missing.tsv"), IoError);
}

TEST(Manifest, LoadSetsCheckShapes) {
  TempDir dir("load_sets");
  write_features(randn(Shape{1, 2, 2, 2}, 1), dir / "a.cafm");
  write_features(randn(Shape{1, 2, 2, 2}, 2), dir / "b.cafm");
  write_features(randn(Shape{1, 3, 2, 2}, 3), dir / "c.cafm");
  write_features(Tensor<double>(Shape{1, 1, 4, 4}, 1.0), dir / "mask.cafm");

  DatasetManifest m{{{dir / "a.cafm", false, {}, 4, 4}, {dir / "b.cafm", false, {}, 4, 4}}};
  const Tensor<double> stacked = load_feature_set<double>(m);
  EXPECT_EQ(stacked.shape(), (Shape{2, 2, 2, 2}));
  EXPECT_EQ(stacked.at(1, 1, 1, 1), read_features<double>(dir / "b.cafm").at(0, 1, 1, 1));

  m.records.push_back({dir / "c.cafm", false, {}, 4, 4});
  EXPECT_THROW(load_feature_set<double>(m), ShapeError);
  EXPECT_THROW(load_feature_set<double>(DatasetManifest{}), ContractError);

  DatasetManifest t{{{dir / "a.cafm", false, {}, 4, 4}, {dir / "b.cafm", true, dir / "mask.cafm", 4, 4}}};
  const auto set = load_test_set<double>(t);
  ASSERT_EQ(set.size(), 2u);
  EXPECT_TRUE(set[0].mask.empty());
  EXPECT_EQ(set[1].mask, std::vector<std::uint8_t>(16, 1));

  t.records[1].image_height = 5;
  EXPECT_THROW(load_test_set<double>(t), ShapeError);
}

TEST(Synth, DeterministicAndSeeded) {
  const SynthConfig cfg = tiny_synth();
  const SynthImages a = synth_images(cfg);
  const SynthImages b = synth_images(cfg);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.test_masks, b.test_masks);
  SynthConfig other = cfg;
  other.texture_seed = 9;
  EXPECT_NE(synth_images(other).train, a.train);
}

TEST(Synth, MasksMatchLabels) {
  const SynthImages img = synth_images(tiny_synth());
  ASSERT_EQ(img.test_anomalous.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) {
    double set = 0.0;
    for (std::size_t p = 0; p < 256; ++p) {
      const double m = img.test_masks.plane(i, 0)[p];
      EXPECT_TRUE(m == 0.0 || m == 1.0);
      set += m;
    }
    EXPECT_EQ(img.test_anomalous[i], i >= 3);
    if (img.test_anomalous[i]) {
      EXPECT_GE(set, 1.0);
    } else {
      EXPECT_EQ(set, 0.0);
    }
  }
}

TEST(Synth, TextureHasUnitScale) {
  SynthConfig cfg = tiny_synth();
  cfg.n_train = 200;
  cfg.image_size = 32;
  const SynthImages img = synth_images(cfg);
  double sum = 0.0, sq = 0.0;
  for (double v : img.train.data()) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(img.train.numel());
  EXPECT_NEAR(sum / n, 0.0, 0.05);
  EXPECT_NEAR(sq / n, 1.0, 0.15);
}

TEST(Synth, GeneratedFilesCarryIntensityShift) {
  TempDir dir("synth");
  SynthConfig cfg = tiny_synth();
  cfg.n_test_anomalous = 12;
  const SynthManifests paths = synth_generate(cfg, dir.path());
  const DatasetManifest test = read_manifest(paths.test);
  ASSERT_EQ(test.records.size(), 15u);
  double inside = 0.0, outside = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (const ManifestRecord& rec : test.records) {
    if (!rec.anomalous) continue;
    std::string image = rec.features.string();
    image.replace(image.find(".features."), 10, ".image.");
    const Tensor<double> img = read_features<double>(image);
    const Tensor<double> mask = read_features<double>(rec.mask);
    for (std::size_t p = 0; p < img.numel(); ++p) {
      if (mask[p] > 0.5) {
        inside += img[p];
        ++n_in;
      } else {
        outside += img[p];
        ++n_out;
      }
    }
  }
  const double shift = inside / n_in - outside / n_out;
  EXPECT_GT(shift, cfg.intensity - 0.7);
  EXPECT_LT(shift, cfg.intensity + 0.7);

  const DatasetManifest train = read_manifest(paths.train);
  ASSERT_EQ(train.records.size(), 6u);
  EXPECT_EQ(load_feature_set<float>(train).shape(), (Shape{6, kExtractorChannels, 4, 4}));

  // Regeneration is byte-identical.
  TempDir again("synth_again");
  synth_generate(cfg, again.path());
  EXPECT_EQ(slurp(dir / "test/0004.features.cafm"), slurp(again / "test/0004.features.cafm"));
  EXPECT_EQ(slurp(dir / "test/0004.mask.cafm"), slurp(again / "test/0004.mask.cafm"));
}

TEST(Synth, ContractErrors) {
  SynthConfig cfg = tiny_synth();
  cfg.anomaly_max = 17;
  EXPECT_THROW(synth_images(cfg), ContractError);
  cfg = tiny_synth();
  cfg.n_test_anomalous = 0;
  EXPECT_THROW(synth_images(cfg), ContractError);
  cfg = tiny_synth();
  cfg.anomaly_min = 9;
  EXPECT_THROW(synth_images(cfg), ContractError);
  cfg = tiny_synth();
  cfg.smoothing = 0.0;
  EXPECT_THROW(synth_images(cfg), ContractError);
}

TEST(Extractor, ShapesAndSeeds) {
  const Tensor<double> img = randn(Shape{1, 1, 32, 32}, 4);
  const Tensor<double> f = toy_extractor(img, 2);
  EXPECT_EQ(f.shape(), (Shape{1, 16, 8, 8}));
  EXPECT_EQ(toy_extractor(img, 2), f);
  EXPECT_NE(toy_extractor(img, 3), f);
  EXPECT_EQ(toy_extractor(randn(Shape{2, 3, 8, 12}, 5), 1).shape(), (Shape{2, 16, 2, 3}));
  EXPECT_THROW(toy_extractor(randn(Shape{1, 1, 30, 32}, 6), 1), ContractError);
  EXPECT_THROW(toy_extractor(randn(Shape{1, 2, 32, 32}, 6), 1), ShapeError);
}

TEST(Extractor, BatchEqualsStackedSingles) {
  const Tensor<double> a = randn(Shape{1, 1, 16, 16}, 7);
  const Tensor<double> b = randn(Shape{1, 1, 16, 16}, 8);
  std::vector<double> both(a.data().begin(), a.data().end());
  both.insert(both.end(), b.data().begin(), b.data().end());
  const Tensor<double> fb = toy_extractor(Tensor<double>(Shape{2, 1, 16, 16}, both), 3);
  const Tensor<double> fa = toy_extractor(a, 3), f2 = toy_extractor(b, 3);
  EXPECT_TRUE(std::equal(fa.data().begin(), fa.data().end(), fb.data().begin()));
  EXPECT_TRUE(std::equal(f2.data().begin(), f2.data().end(), fb.data().begin() + fa.numel()));
}

TEST(Extractor, ZeroImageGivesZeroFeatures) {
  const Tensor<double> fz = toy_extractor(Tensor<double>(Shape{1, 1, 8, 8}), 5);
  for (double v : fz.data()) EXPECT_EQ(v, 0.0);
}

TEST(Pgm, HandExample) {
  TempDir dir("pgm");
  export_pgm(AnomalyMap{2, 2, {0.0, 1.0, 0.5, 0.25}}, dir / "m.pgm");
  const auto b = slurp(dir / "m.pgm");
  const std::string header = "P5\n2 2\n255\n";
  ASSERT_EQ(b.size(), header.size() + 4);
  EXPECT_TRUE(std::equal(header.begin(), header.end(), b.begin()));
  EXPECT_EQ(std::vector<std::uint8_t>(b.end() - 4, b.end()), (std::vector<std::uint8_t>{0, 255, 127, 63}));
}

TEST(Pgm, ConstantMapAllZeroAndNonSquareHeader) {
  TempDir dir("pgm_const");
  export_pgm(AnomalyMap{2, 3, std::vector<double>(6, 4.0)}, dir / "c.pgm");
  const auto b = slurp(dir / "c.pgm");
  const std::string header = "P5\n3 2\n255\n";
  EXPECT_TRUE(std::equal(header.begin(), header.end(), b.begin()));
  EXPECT_EQ(std::vector<std::uint8_t>(b.begin() + header.size(), b.end()), std::vector<std::uint8_t>(6, 0));
  EXPECT_THROW(export_pgm(AnomalyMap{}, dir / "e.pgm"), ContractError);
  EXPECT_THROW(export_pgm(AnomalyMap{1, 2, {0.0, 1.0}}, dir / "no/such/dir/x.pgm"), IoError);
}
