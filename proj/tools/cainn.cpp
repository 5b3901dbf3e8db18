// cainn: command-line front end for synthetic data generation, training,
// evaluation, scoring, reverse generation and the verification suite.
//
// stdout carries one JSON document per command; progress and errors go to
// stderr. Exit codes: 0 ok, 1 contract/shape/numeric error, 2 I/O or format
// error, 3 verification failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cainn/data_io.hpp"
#include "cainn/eval.hpp"
#include "cainn/rng.hpp"
#include "cainn/trainer.hpp"
#include "cainn/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace cainn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitContract = 1;
constexpr int kExitIo = 2;
constexpr int kExitVerify = 3;

Dtype precision_from_env() {
  const char* env = std::getenv("CAINN_PRECISION");
  if (env == nullptr || *env == '\0') return Dtype::F32;
  const std::string v = env;
  if (v == "f32") return Dtype::F32;
  if (v == "f64") return Dtype::F64;
  throw ContractError("CAINN_PRECISION must be f32 or f64, got '" + v + "'");
}

const char* dtype_label(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

void emit(const json& j) { std::cout << j.dump() << std::endl; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct GenArgs {
  std::string out;
  SynthConfig cfg;
  std::string dtype;
};

int cmd_gen_data(const GenArgs& a) {
  const Dtype dtype = a.dtype.empty() ? precision_from_env() : (a.dtype == "f64" ? Dtype::F64 : Dtype::F32);
  const auto t0 = std::chrono::steady_clock::now();
  const SynthManifests m = synth_generate(a.cfg, a.out, dtype);
  std::cerr << "wrote " << a.cfg.n_train << " training and " << a.cfg.n_test_normal + a.cfg.n_test_anomalous
            << " test records under " << a.out << "\n";
  emit({{"train_manifest", m.train.string()},
        {"test_manifest", m.test.string()},
        {"n_train", a.cfg.n_train},
        {"n_test_normal", a.cfg.n_test_normal},
        {"n_test_anomalous", a.cfg.n_test_anomalous},
        {"image_size", a.cfg.image_size},
        {"feature_shape", {kExtractorChannels, a.cfg.image_size / 4, a.cfg.image_size / 4}},
        {"dtype", dtype_label(dtype)},
        {"wall_seconds", seconds_since(t0)}});
  return kExitOk;
}

struct TrainArgs {
  std::string manifest;
  std::string out;
  std::string variant = "cac";
  TrainConfig cfg;
  double clamp_alpha = kDefaultClampAlpha;
  bool no_clamp = false;
  std::size_t log_every = 10;
};

template <typename T>
int run_train(const TrainArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetManifest manifest = read_manifest(a.manifest);
  for (const auto& rec : manifest.records) {
    if (rec.anomalous) throw ContractError("training manifest lists anomalous record '" + rec.features.string() + "'");
  }
  const Tensor<T> data = load_feature_set<T>(manifest);
  TrainConfig cfg = a.cfg;
  cfg.variant = parse_variant(a.variant);
  cfg.clamp_alpha = a.no_clamp ? std::nullopt : std::optional<double>(a.clamp_alpha);
  std::cerr << "training " << variant_name(cfg.variant) << " K=" << cfg.steps << " on " << data.shape().str() << " ("
            << dtype_label(dtype_of<T>()) << "), " << cfg.epochs << " epochs\n";

  TrainResult<T> result;
  try {
    result = train(data, cfg, [&](std::size_t epoch, double loss) {
      if (a.log_every != 0 && (epoch % a.log_every == 0 || epoch == 1 || epoch == cfg.epochs)) {
        std::cerr << "epoch " << epoch << "/" << cfg.epochs << " loss " << loss << "\n";
      }
    });
  } catch (const TrainingDiverged<T>& e) {
    const fs::path rescue = a.out + ".last_good";
    save_checkpoint(Checkpoint<T>{cfg, e.last_good().model, e.last_good().history}, rescue);
    std::cerr << "last good model saved to " << rescue << "\n";
    throw;
  }
  save_checkpoint(Checkpoint<T>{cfg, result.model, result.history}, a.out);

  double initial = 0.0;
  double final_loss = 0.0;
  if (result.history.empty()) {
    initial = final_loss = nll_loss(flow_forward(data, result.model));
  } else {
    initial = result.history.front();
    final_loss = result.history.back();
  }
  emit({{"final_loss", final_loss},
        {"initial_loss", initial},
        {"epochs", cfg.epochs},
        {"wall_seconds", seconds_since(t0)},
        {"variant", variant_name(cfg.variant)},
        {"steps", cfg.steps},
        {"parameters", result.model.parameter_count()},
        {"dtype", dtype_label(dtype_of<T>())},
        {"checkpoint", a.out},
        {"history", result.history}});
  return kExitOk;
}

struct EvalArgs {
  std::string manifest;
  std::string checkpoint;
  std::string heatmap_dir;
};

template <typename T>
int run_eval(const EvalArgs& a) {
  const Checkpoint<T> ckpt = load_checkpoint<T>(a.checkpoint);
  const auto test_set = load_test_set<T>(read_manifest(a.manifest));
  std::vector<AnomalyMap> maps;
  const EvalResult result = evaluate(ckpt.model, test_set, a.heatmap_dir.empty() ? nullptr : &maps);
  if (!a.heatmap_dir.empty()) {
    std::error_code ec;
    fs::create_directories(a.heatmap_dir, ec);
    if (ec) throw IoError("cannot create heatmap directory '" + a.heatmap_dir + "': " + ec.message());
    std::size_t written = 0;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
      if (!test_set[i].anomalous) continue;
      const fs::path stem = fs::path(test_set[i].name).stem();
      export_pgm(maps[i], fs::path(a.heatmap_dir) / (stem.string() + ".pgm"));
      ++written;
    }
    std::cerr << "wrote " << written << " heatmaps to " << a.heatmap_dir << "\n";
  }
  std::cout << eval_result_json(result) << std::endl;
  return kExitOk;
}

struct ScoreArgs {
  std::string checkpoint;
  std::string features;
  std::string heatmap;
};

template <typename T>
int run_score(const ScoreArgs& a) {
  const Checkpoint<T> ckpt = load_checkpoint<T>(a.checkpoint);
  const Tensor<T> x = read_features<T>(a.features);
  const FlowOutput<T> out = flow_forward(x, ckpt.model);
  json samples = json::array();
  for (std::size_t n = 0; n < x.shape().n; ++n) {
    const AnomalyMap map = anomaly_map(out.z, n);
    samples.push_back({{"index", n}, {"image_score", image_score(map)}, {"logdet", out.logdet[n]}, {"map", map.scores}});
    if (!a.heatmap.empty()) {
      fs::path p = a.heatmap;
      if (x.shape().n > 1) p.replace_filename(p.stem().string() + "_" + std::to_string(n) + p.extension().string());
      export_pgm(map, p);
    }
  }
  emit({{"features", a.features},
        {"height", x.shape().h},
        {"width", x.shape().w},
        {"nll", nll_loss(out)},
        {"samples", std::move(samples)}});
  return kExitOk;
}

struct GenerateArgs {
  std::string checkpoint;
  std::string latent;
  std::string from_features;
  std::vector<std::string> perturb;
  std::size_t samples = 1;
  std::uint64_t seed = 0;
  std::string out;
};

struct Perturbation {
  LatentSite site;
  double magnitude = 0.0;
};

Perturbation parse_perturbation(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) parts.push_back(item);
  if (parts.size() != 4) throw ContractError("--perturb expects c,h,w,magnitude, got '" + text + "'");
  try {
    std::size_t pos = 0;
    Perturbation p;
    auto index = [&](const std::string& s) {
      const long long v = std::stoll(s, &pos);
      if (pos != s.size() || v < 0) throw std::invalid_argument(s);
      return static_cast<std::size_t>(v);
    };
    p.site = {index(parts[0]), index(parts[1]), index(parts[2])};
    p.magnitude = std::stod(parts[3], &pos);
    if (pos != parts[3].size() || !std::isfinite(p.magnitude)) throw std::invalid_argument(parts[3]);
    return p;
  } catch (const std::exception&) {
    throw ContractError("--perturb expects c,h,w,magnitude, got '" + text + "'");
  }
}

template <typename T>
int run_generate(const GenerateArgs& a) {
  const Checkpoint<T> ckpt = load_checkpoint<T>(a.checkpoint);
  const FlowConfig& cfg = ckpt.model.config;
  std::string source;
  Tensor<T> z;
  if (!a.latent.empty()) {
    z = read_features<T>(a.latent);
    source = "latent";
  } else if (!a.from_features.empty()) {
    z = flow_forward(read_features<T>(a.from_features), ckpt.model).z;
    source = "forward";
  } else {
    if (a.samples == 0) throw ContractError("--samples must be positive");
    z = Tensor<T>(Shape{a.samples, cfg.channels, cfg.height, cfg.width});
    Rng rng(a.seed);
    for (T& v : z.data()) v = static_cast<T>(rng.normal());
    source = "sampled";
  }
  json sites = json::array();
  for (const std::string& text : a.perturb) {
    const Perturbation p = parse_perturbation(text);
    z = perturb_latent(z, std::span<const LatentSite>(&p.site, 1), p.magnitude);
    sites.push_back({p.site.c, p.site.h, p.site.w, p.magnitude});
  }
  const Tensor<T> x = generate_from_latent(z, ckpt.model);
  write_features(x, a.out);
  emit({{"out", a.out}, {"source", source}, {"shape", {x.shape().n, x.shape().c, x.shape().h, x.shape().w}},
        {"perturbations", std::move(sites)}, {"finite", all_finite(x)}});
  return kExitOk;
}

template <template <typename> class Fn, typename Args>
int dispatch(Dtype d, const Args& a) {
  return d == Dtype::F64 ? Fn<double>{}(a) : Fn<float>{}(a);
}

template <typename T>
struct TrainFn {
  int operator()(const TrainArgs& a) const { return run_train<T>(a); }
};
template <typename T>
struct EvalFn {
  int operator()(const EvalArgs& a) const { return run_eval<T>(a); }
};
template <typename T>
struct ScoreFn {
  int operator()(const ScoreArgs& a) const { return run_score<T>(a); }
};
template <typename T>
struct GenerateFn {
  int operator()(const GenerateArgs& a) const { return run_generate<T>(a); }
};

int cmd_verify(const std::string& level, const std::string& fault) {
  Fault f = Fault::None;
  if (fault == "inverse-sign") {
    f = Fault::InverseScaleSign;
  } else if (!fault.empty()) {
    throw ContractError("unknown fault '" + fault + "'");
  }
  const VerifyReport report = run_verify(level == "full" ? VerifyLevel::Full : VerifyLevel::Fast, f);
  for (const auto& c : report.checks) {
    std::cerr << (c.passed ? "[PASS] " : "[FAIL] ") << c.invariant << ": " << c.measured << " (bound " << c.tolerance
              << "), " << c.detail << ", " << c.seconds << " s\n";
  }
  std::cout << report.json() << std::endl;
  if (report.passed()) return kExitOk;
  std::vector<std::string> failed;
  for (const auto& c : report.checks) {
    if (!c.passed && std::find(failed.begin(), failed.end(), c.invariant) == failed.end()) failed.push_back(c.invariant);
  }
  std::cerr << "verification failed:";
  for (const auto& name : failed) std::cerr << " " << name;
  std::cerr << "\n";
  return kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CBAM-augmented normalizing flow for anomaly detection on feature maps"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic texture benchmark");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n-train", gen.cfg.n_train, "Normal training images")->capture_default_str();
  gen_cmd->add_option("--n-test-normal", gen.cfg.n_test_normal)->capture_default_str();
  gen_cmd->add_option("--n-test-anomalous", gen.cfg.n_test_anomalous)->capture_default_str();
  gen_cmd->add_option("--image-size", gen.cfg.image_size, "Square image side, a multiple of 4")->capture_default_str();
  gen_cmd->add_option("--seed", gen.cfg.texture_seed, "Texture and defect seed")->capture_default_str();
  gen_cmd->add_option("--extractor-seed", gen.cfg.extractor_seed)->capture_default_str();
  gen_cmd->add_option("--anomaly-min", gen.cfg.anomaly_min, "Smallest defect side")->capture_default_str();
  gen_cmd->add_option("--anomaly-max", gen.cfg.anomaly_max, "Largest defect side")->capture_default_str();
  gen_cmd->add_option("--intensity", gen.cfg.intensity, "Intensity shift inside defects")->capture_default_str();
  gen_cmd->add_option("--smoothing", gen.cfg.smoothing, "Texture smoothing sigma (pixels)")->capture_default_str();
  gen_cmd->add_option("--dtype", gen.dtype, "Stored precision (defaults to CAINN_PRECISION)")
      ->check(CLI::IsMember({"f32", "f64"}));

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Fit a flow to normal training features");
  train_cmd->add_option("--manifest", tr.manifest, "Training manifest")->required();
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_option("--variant", tr.variant, "Subnet variant")
      ->check(CLI::IsMember({"ca", "ac", "cac", "cc"}, CLI::ignore_case))
      ->capture_default_str();
  train_cmd->add_option("--steps", tr.cfg.steps, "Coupling blocks K")->capture_default_str();
  train_cmd->add_option("--lr", tr.cfg.learning_rate, "Learning rate")->capture_default_str();
  train_cmd->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
  train_cmd->add_option("--batch", tr.cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--seed", tr.cfg.seed)->capture_default_str();
  train_cmd->add_option("--hidden", tr.cfg.hidden_channels, "Subnet interior width, 0 = input width")
      ->capture_default_str();
  train_cmd->add_option("--reduction", tr.cfg.reduction, "Channel attention reduction ratio")->capture_default_str();
  train_cmd->add_option("--clamp-alpha", tr.clamp_alpha, "Soft clamp bound for log-scales")->capture_default_str();
  train_cmd->add_flag("--no-clamp", tr.no_clamp, "Disable the soft clamp");
  train_cmd->add_option("--log-every", tr.log_every, "Epochs between progress lines, 0 = quiet")
      ->capture_default_str();

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Image and pixel AUROC on a labelled test manifest");
  eval_cmd->add_option("--manifest", ev.manifest)->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--heatmap-dir", ev.heatmap_dir, "Write one PGM per anomalous image");

  ScoreArgs sc;
  auto* score_cmd = app.add_subcommand("score", "Anomaly maps for a feature file");
  score_cmd->add_option("--checkpoint", sc.checkpoint)->required();
  score_cmd->add_option("--features", sc.features)->required();
  score_cmd->add_option("--heatmap", sc.heatmap, "PGM output path");

  GenerateArgs gn;
  auto* gen_latent_cmd = app.add_subcommand("generate", "Invert a (perturbed) latent back to feature space");
  gen_latent_cmd->add_option("--checkpoint", gn.checkpoint)->required();
  auto* latent_opt = gen_latent_cmd->add_option("--latent", gn.latent, "Latent CAFM file");
  gen_latent_cmd->add_option("--from-features", gn.from_features, "Use the latent of these features")
      ->excludes(latent_opt);
  gen_latent_cmd->add_option("--perturb", gn.perturb, "c,h,w,magnitude; repeatable")->take_all();
  gen_latent_cmd->add_option("--samples", gn.samples, "Latents drawn from N(0, I) when none is given")
      ->capture_default_str();
  gen_latent_cmd->add_option("--seed", gn.seed)->capture_default_str();
  gen_latent_cmd->add_option("--out", gn.out, "Generated features (CAFM)")->required();

  std::string level = "fast";
  std::string fault;
  auto* verify_cmd = app.add_subcommand("verify", "Run the invariant suite");
  verify_cmd->add_option("--level", level)->check(CLI::IsMember({"fast", "full"}))->capture_default_str();
  verify_cmd->add_option("--inject-fault", fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitContract;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return dispatch<TrainFn>(precision_from_env(), tr);
    if (*eval_cmd) return dispatch<EvalFn>(peek_checkpoint_dtype(ev.checkpoint), ev);
    if (*score_cmd) return dispatch<ScoreFn>(peek_checkpoint_dtype(sc.checkpoint), sc);
    if (*gen_latent_cmd) return dispatch<GenerateFn>(peek_checkpoint_dtype(gn.checkpoint), gn);
    if (*verify_cmd) return cmd_verify(level, fault);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitContract;
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    return kExitContract;
  }
  return kExitContract;
}
