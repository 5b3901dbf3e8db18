#include "cainn/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "cainn/ops.hpp"
#include "cainn/rng.hpp"

namespace cainn {

namespace fs = std::filesystem;

namespace {

constexpr char kFeatureMagic[4] = {'C', 'A', 'F', 'M'};
constexpr std::size_t kFeatureHeaderBytes = 4 + 4 + 16 + 1;

FeatureFileInfo parse_feature_header(detail::ByteReader& reader, const std::string& context) {
  const auto magic = reader.take(4);
  if (!std::equal(magic.begin(), magic.end(), kFeatureMagic)) {
    throw MagicMismatchError(context + ": not a CAFM feature file (bad magic)");
  }
  const auto version = reader.get<std::uint32_t>();
  if (version != kFeatureFileVersion) {
    throw VersionMismatchError(context + ": unsupported CAFM version " + std::to_string(version));
  }
  FeatureFileInfo info;
  info.shape.n = reader.get<std::uint32_t>();
  info.shape.c = reader.get<std::uint32_t>();
  info.shape.h = reader.get<std::uint32_t>();
  info.shape.w = reader.get<std::uint32_t>();
  const auto dtype = reader.get<std::uint8_t>();
  if (dtype > 1) throw FormatError(context + ": unknown dtype flag " + std::to_string(dtype));
  info.dtype = static_cast<Dtype>(dtype);
  return info;
}

template <typename Stored, typename T>
Tensor<T> decode_payload(detail::ByteReader& reader, const Shape& shape) {
  std::vector<Stored> raw(shape.numel());
  reader.get_array(std::span<Stored>(raw));
  std::vector<T> values(raw.begin(), raw.end());
  return Tensor<T>(shape, std::move(values));
}

std::string field_or_throw(std::istringstream& line, const std::string& context) {
  std::string field;
  if (!std::getline(line, field, '\t')) throw FormatError(context + ": expected 5 tab-separated fields");
  return field;
}

std::size_t parse_extent(const std::string& s, const std::string& context) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty()) throw FormatError(context + ": bad image extent '" + s + "'");
  return static_cast<std::size_t>(v);
}

fs::path relative_if_possible(const fs::path& p, const fs::path& base) {
  std::error_code ec;
  const fs::path rel = fs::relative(p, base, ec);
  if (ec || rel.empty()) return p;
  return rel;
}

// 3x3 "same" convolution followed by keeping every second row and column,
// i.e. a stride-2 convolution with padding 1.
template <typename T>
Tensor<T> strided_conv(const Tensor<T>& input, const ConvKernel<T>& kernel) {
  const Tensor<T> full = conv2d(input, kernel);
  const Shape& s = full.shape();
  Tensor<T> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t h = 0; h < s.h / 2; ++h) {
        for (std::size_t w = 0; w < s.w / 2; ++w) out.at(n, c, h, w) = full.at(n, c, 2 * h, 2 * w);
      }
    }
  }
  return out;
}

template <typename T>
ConvKernel<T> random_kernel(Rng& rng, std::size_t out_channels, std::size_t in_channels) {
  ConvKernel<T> k(out_channels, in_channels, 3);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * 9));
  for (T& v : k.weight.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return k;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  return k;
}

// White noise smoothed by a separable Gaussian, rescaled to unit marginal variance.
void fill_texture(Rng& rng, const std::vector<double>& kernel, std::size_t size, double* out) {
  const std::size_t radius = kernel.size() / 2;
  const std::size_t padded = size + 2 * radius;
  std::vector<double> noise(padded * padded);
  for (double& v : noise) v = rng.normal();
  double norm2 = 0.0;
  for (double a : kernel) norm2 += a * a;
  const double gain = 1.0 / norm2;  // separable: variance is (sum k^2)^2
  std::vector<double> rows(padded * size, 0.0);
  for (std::size_t y = 0; y < padded; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < kernel.size(); ++i) acc += kernel[i] * noise[y * padded + x + i];
      rows[y * size + x] = acc;
    }
  }
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < kernel.size(); ++i) acc += kernel[i] * rows[(y + i) * size + x];
      out[y * size + x] = acc * gain;
    }
  }
}

// Marks a rectangle or an axis-aligned ellipse inside the image.
void draw_defect(Rng& rng, const SynthConfig& cfg, double* mask) {
  const std::size_t size = cfg.image_size;
  const std::size_t span = cfg.anomaly_max - cfg.anomaly_min + 1;
  const std::size_t dh = cfg.anomaly_min + rng.below(span);
  const std::size_t dw = cfg.anomaly_min + rng.below(span);
  const std::size_t top = rng.below(size - dh + 1);
  const std::size_t left = rng.below(size - dw + 1);
  const bool ellipse = rng.below(2) == 1;
  const double cy = static_cast<double>(top) + 0.5 * static_cast<double>(dh);
  const double cx = static_cast<double>(left) + 0.5 * static_cast<double>(dw);
  for (std::size_t y = top; y < top + dh; ++y) {
    for (std::size_t x = left; x < left + dw; ++x) {
      bool inside = true;
      if (ellipse) {
        const double ny = (static_cast<double>(y) + 0.5 - cy) / (0.5 * static_cast<double>(dh));
        const double nx = (static_cast<double>(x) + 0.5 - cx) / (0.5 * static_cast<double>(dw));
        inside = nx * nx + ny * ny <= 1.0;
      }
      if (inside) mask[y * size + x] = 1.0;
    }
  }
}

std::string indexed_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

}  // namespace

template <typename T>
void write_features(const Tensor<T>& t, const fs::path& path) {
  const Shape& s = t.shape();
  detail::ByteWriter writer;
  writer.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kFeatureMagic), 4));
  writer.put(kFeatureFileVersion);
  for (std::size_t extent : {s.n, s.c, s.h, s.w}) {
    if (extent > UINT32_MAX) throw ContractError("write_features: extent exceeds u32");
    writer.put(static_cast<std::uint32_t>(extent));
  }
  writer.put(static_cast<std::uint8_t>(dtype_of<T>()));
  writer.put_array(t.data());
  writer.put_crc();
  detail::write_file(path, writer.bytes());
}

FeatureFileInfo read_feature_header(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader reader(bytes, path.string());
  return parse_feature_header(reader, path.string());
}

template <typename T>
Tensor<T> read_features(const fs::path& path) {
  const std::string context = path.string();
  const auto bytes = detail::read_file(path);
  detail::ByteReader reader(bytes, context);
  const FeatureFileInfo info = parse_feature_header(reader, context);
  const std::size_t expected = kFeatureHeaderBytes + info.shape.numel() * dtype_size(info.dtype) + 4;
  if (bytes.size() < expected) throw TruncatedFileError(context + ": payload is truncated");
  if (bytes.size() > expected) throw FormatError(context + ": unexpected trailing bytes");
  detail::verify_trailing_crc(bytes, context);
  if (info.dtype == Dtype::F32) return decode_payload<float, T>(reader, info.shape);
  return decode_payload<double, T>(reader, info.shape);
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  const fs::path base = path.parent_path();
  DatasetManifest manifest;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::string context = path.string() + ":" + std::to_string(line_no);
    std::istringstream fields(line);
    ManifestRecord rec;
    const std::string features = field_or_throw(fields, context);
    const std::string label = field_or_throw(fields, context);
    const std::string mask = field_or_throw(fields, context);
    rec.image_height = parse_extent(field_or_throw(fields, context), context);
    std::string width;
    std::getline(fields, width);
    rec.image_width = parse_extent(width, context);

    if (label == "normal") {
      rec.anomalous = false;
    } else if (label == "anomalous") {
      rec.anomalous = true;
    } else {
      throw FormatError(context + ": label must be 'normal' or 'anomalous', got '" + label + "'");
    }
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
    rec.features = resolve(features);
    if (mask != "-") rec.mask = resolve(mask);
    if (rec.anomalous && rec.mask.empty()) throw ContractError(context + ": anomalous record without a mask");
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open manifest '" + path.string() + "' for writing");
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  for (const auto& rec : manifest.records) {
    out << relative_if_possible(rec.features, base).generic_string() << '\t'
        << (rec.anomalous ? "anomalous" : "normal") << '\t'
        << (rec.mask.empty() ? std::string("-") : relative_if_possible(rec.mask, base).generic_string()) << '\t'
        << rec.image_height << '\t' << rec.image_width << '\n';
  }
  if (!out) throw IoError("error while writing manifest '" + path.string() + "'");
}

template <typename T>
Tensor<T> load_feature_set(const DatasetManifest& manifest) {
  if (manifest.records.empty()) throw ContractError("manifest lists no records");
  std::vector<T> values;
  Shape shape{};
  for (const auto& rec : manifest.records) {
    const Tensor<T> f = read_features<T>(rec.features);
    const Shape fs = f.shape();
    const Shape per_sample{1, fs.c, fs.h, fs.w};
    if (shape.n == 0) {
      shape = Shape{0, fs.c, fs.h, fs.w};
    } else if (Shape{1, shape.c, shape.h, shape.w} != per_sample) {
      throw ShapeError("feature file '" + rec.features.string() + "' has shape " + fs.str() +
                       ", expected per-sample " + Shape{1, shape.c, shape.h, shape.w}.str());
    }
    shape.n += fs.n;
    values.insert(values.end(), f.data().begin(), f.data().end());
  }
  return Tensor<T>(shape, std::move(values));
}

template <typename T>
std::vector<TestSample<T>> load_test_set(const DatasetManifest& manifest) {
  std::vector<TestSample<T>> out;
  for (const auto& rec : manifest.records) {
    TestSample<T> sample;
    sample.name = rec.features.filename().string();
    sample.features = read_features<T>(rec.features);
    if (sample.features.shape().n != 1) {
      throw ShapeError("test feature file '" + rec.features.string() + "' must hold exactly one sample");
    }
    sample.anomalous = rec.anomalous;
    sample.image_height = rec.image_height;
    sample.image_width = rec.image_width;
    if (!rec.mask.empty()) {
      const Tensor<double> mask = read_features<double>(rec.mask);
      if (mask.shape() != Shape{1, 1, rec.image_height, rec.image_width}) {
        throw ShapeError("mask '" + rec.mask.string() + "' has shape " + mask.shape().str() + ", expected " +
                         Shape{1, 1, rec.image_height, rec.image_width}.str());
      }
      sample.mask.resize(mask.numel());
      for (std::size_t i = 0; i < mask.numel(); ++i) sample.mask[i] = mask[i] != 0.0 ? 1 : 0;
    }
    out.push_back(std::move(sample));
  }
  return out;
}

SynthImages synth_images(const SynthConfig& cfg) {
  if (cfg.n_test_normal == 0 || cfg.n_test_anomalous == 0) {
    throw ContractError("synthetic test split needs at least one normal and one anomalous image");
  }
  if (cfg.image_size == 0) throw ContractError("synthetic image size must be positive");
  if (cfg.anomaly_min == 0 || cfg.anomaly_min > cfg.anomaly_max) {
    throw ContractError("anomaly size range must satisfy 0 < min <= max");
  }
  if (cfg.anomaly_max > cfg.image_size) {
    throw ContractError("anomaly size " + std::to_string(cfg.anomaly_max) + " does not fit a " +
                        std::to_string(cfg.image_size) + "-pixel image");
  }
  if (!(cfg.smoothing > 0.0)) throw ContractError("texture smoothing must be positive");

  const std::size_t size = cfg.image_size;
  const std::size_t plane = size * size;
  const auto kernel = gaussian_kernel(cfg.smoothing);
  const std::size_t n_test = cfg.n_test_normal + cfg.n_test_anomalous;

  SynthImages out;
  out.train = Tensor<double>(Shape{cfg.n_train, 1, size, size});
  out.test = Tensor<double>(Shape{n_test, 1, size, size});
  out.test_masks = Tensor<double>(Shape{n_test, 1, size, size});

  Rng train_rng(mix_seed(cfg.texture_seed, 0));
  for (std::size_t i = 0; i < cfg.n_train; ++i) fill_texture(train_rng, kernel, size, out.train.plane(i, 0));

  Rng test_rng(mix_seed(cfg.texture_seed, 1));
  Rng defect_rng(mix_seed(cfg.texture_seed, 2));
  for (std::size_t i = 0; i < n_test; ++i) {
    double* img = out.test.plane(i, 0);
    fill_texture(test_rng, kernel, size, img);
    const bool anomalous = i >= cfg.n_test_normal;
    out.test_anomalous.push_back(anomalous);
    if (!anomalous) continue;
    double* mask = out.test_masks.plane(i, 0);
    draw_defect(defect_rng, cfg, mask);
    for (std::size_t p = 0; p < plane; ++p) img[p] += mask[p] * cfg.intensity;
  }
  return out;
}

SynthManifests synth_generate(const SynthConfig& cfg, const fs::path& out_dir, Dtype dtype) {
  const SynthImages images = synth_images(cfg);
  std::error_code ec;
  fs::create_directories(out_dir / "train", ec);
  fs::create_directories(out_dir / "test", ec);
  if (ec) throw IoError("cannot create dataset directory '" + out_dir.string() + "': " + ec.message());

  const std::size_t size = cfg.image_size;
  const Tensor<double> train_features = toy_extractor(images.train, cfg.extractor_seed);
  const Tensor<double> test_features = toy_extractor(images.test, cfg.extractor_seed);

  auto write_at = [dtype](const Tensor<double>& t, const fs::path& p) {
    if (dtype == Dtype::F32) {
      write_features(tensor_cast<float>(t), p);
    } else {
      write_features(t, p);
    }
  };
  auto sample_of = [](const Tensor<double>& t, std::size_t i) {
    const Shape s = t.shape();
    std::vector<double> v(t.data().begin() + i * s.sample(), t.data().begin() + (i + 1) * s.sample());
    return Tensor<double>(Shape{1, s.c, s.h, s.w}, std::move(v));
  };

  DatasetManifest train;
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    const fs::path stem = out_dir / "train" / indexed_name(i);
    write_at(sample_of(images.train, i), stem.string() + ".image.cafm");
    write_at(sample_of(train_features, i), stem.string() + ".features.cafm");
    train.records.push_back({stem.string() + ".features.cafm", false, {}, size, size});
  }
  DatasetManifest test;
  for (std::size_t i = 0; i < images.test_anomalous.size(); ++i) {
    const fs::path stem = out_dir / "test" / indexed_name(i);
    write_at(sample_of(images.test, i), stem.string() + ".image.cafm");
    write_at(sample_of(test_features, i), stem.string() + ".features.cafm");
    ManifestRecord rec{stem.string() + ".features.cafm", images.test_anomalous[i], {}, size, size};
    if (rec.anomalous) {
      rec.mask = stem.string() + ".mask.cafm";
      write_at(sample_of(images.test_masks, i), rec.mask);
    }
    test.records.push_back(std::move(rec));
  }
  SynthManifests paths{out_dir / "train.tsv", out_dir / "test.tsv"};
  write_manifest(train, paths.train);
  write_manifest(test, paths.test);
  return paths;
}

template <typename T>
Tensor<T> toy_extractor(const Tensor<T>& images, std::uint64_t seed) {
  const Shape& s = images.shape();
  if (s.c != 1 && s.c != 3) throw ShapeError("toy_extractor: expects 1 or 3 image channels, got " + std::to_string(s.c));
  if (s.h % 4 != 0 || s.w % 4 != 0 || s.h == 0 || s.w == 0) {
    throw ContractError("toy_extractor: image extents must be positive multiples of 4, got " + s.str());
  }
  Rng rng(mix_seed(seed, s.c));
  const ConvKernel<T> first = random_kernel<T>(rng, 8, s.c);
  const ConvKernel<T> second = random_kernel<T>(rng, kExtractorChannels, 8);
  const Tensor<T> hidden = map_unary(strided_conv(images, first), UnaryOp::Relu);
  return strided_conv(hidden, second);
}

void export_pgm(const AnomalyMap& map, const fs::path& path) {
  if (map.scores.empty() || map.scores.size() != map.height * map.width) {
    throw ContractError("export_pgm: empty or inconsistent map");
  }
  const auto [lo_it, hi_it] = std::minmax_element(map.scores.begin(), map.scores.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  std::string header = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (double s : map.scores) {
    double v = range > 0.0 ? std::floor(255.0 * (s - lo) / range) : 0.0;
    v = std::clamp(v, 0.0, 255.0);
    bytes.push_back(static_cast<std::uint8_t>(v));
  }
  detail::write_file(path, bytes);
}

#define CAINN_INSTANTIATE_IO(T)                                                  \
  template void write_features<T>(const Tensor<T>&, const fs::path&);            \
  template Tensor<T> read_features<T>(const fs::path&);                          \
  template Tensor<T> load_feature_set<T>(const DatasetManifest&);                \
  template std::vector<TestSample<T>> load_test_set<T>(const DatasetManifest&);  \
  template Tensor<T> toy_extractor<T>(const Tensor<T>&, std::uint64_t);

CAINN_INSTANTIATE_IO(float)
CAINN_INSTANTIATE_IO(double)

#undef CAINN_INSTANTIATE_IO

}  // namespace cainn
