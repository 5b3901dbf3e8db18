#include "cainn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "binary_io.hpp"
#include "cainn/rng.hpp"

namespace cainn {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ContractError("learning rate must be positive, got " + std::to_string(learning_rate));
  }
  if (batch_size == 0) throw ContractError("batch size must be positive");
  if (steps == 0) throw ContractError("step count must be positive");
  if (clamp_alpha && !(*clamp_alpha > 0.0)) throw ContractError("clamp alpha must be positive");
  if (reduction == 0) throw ContractError("attention reduction ratio must be positive");
}

FlowConfig flow_config_for(const TrainConfig& cfg, std::size_t channels, std::size_t height, std::size_t width) {
  FlowConfig out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.steps = cfg.steps;
  out.variant = cfg.variant;
  out.hidden_channels = cfg.hidden_channels;
  out.reduction = cfg.reduction;
  out.clamp_alpha = cfg.clamp_alpha;
  out.seed = cfg.seed;
  return out;
}

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros_like(std::span<Tensor<T>* const> params) {
  OptimizerState state;
  for (const Tensor<T>* p : params) {
    state.m.emplace_back(p->shape());
    state.v.emplace_back(p->shape());
  }
  return state;
}

template <typename T>
void optimizer_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, OptimizerState<T>& state,
                    double learning_rate, std::span<const std::string> names) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("optimizer_step: " + std::to_string(params.size()) + " parameters, " +
                        std::to_string(grads.size()) + " gradients, " + std::to_string(state.m.size()) + " moments");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string label = i < names.size() ? names[i] : "parameter " + std::to_string(i);
    const Shape& s = params[i]->shape();
    if (grads[i].shape() != s || state.m[i].shape() != s || state.v[i].shape() != s) {
      throw ShapeError("optimizer_step: shape mismatch for " + label + " " + s.str());
    }
    if (!all_finite(grads[i])) throw NumericError("optimizer_step: non-finite gradient for " + label);
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = state.beta1 * static_cast<double>(m[j]) + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * static_cast<double>(v[j]) + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = learning_rate * (mj / correction1) / (std::sqrt(vj / correction2) + state.epsilon);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
    }
  }
}

namespace {

// Stream index of the minibatch shuffler, kept apart from the model's seeds.
constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;

template <typename T>
Tensor<T> gather(const Tensor<T>& data, std::span<const std::size_t> rows) {
  const Shape& s = data.shape();
  Tensor<T> out(Shape{rows.size(), s.c, s.h, s.w});
  const std::size_t stride = s.sample();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(data.data().begin() + rows[i] * stride, stride, out.data().begin() + i * stride);
  }
  return out;
}

}  // namespace

template <typename T>
TrainResult<T> train(const Tensor<T>& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const Shape& s = data.shape();
  if (s.n == 0) throw ContractError("train: empty training set");
  if (!all_finite(data)) throw NumericError("train: training features contain non-finite values");

  TrainResult<T> result{FlowModel<T>::create(flow_config_for(cfg, s.c, s.h, s.w)), {}};
  if (cfg.epochs == 0) return result;
  result.model.norm = compute_feature_norm(data);

  auto params = result.model.parameters();
  const auto names = result.model.parameter_names();
  auto state = OptimizerState<T>::zeros_like(params);
  Rng shuffler(mix_seed(cfg.seed, kShuffleStream));
  std::vector<std::size_t> order(s.n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffler.shuffle(order.begin(), order.end());
    double weighted = 0.0;
    for (std::size_t start = 0; start < s.n; start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, s.n - start);
      const Tensor<T> batch = gather(data, std::span<const std::size_t>(order).subspan(start, count));

      ad::Tape<T> tape;
      const auto vars = bind_parameters(tape, result.model);
      const std::string where = "epoch " + std::to_string(epoch + 1) + ", batch at sample " + std::to_string(start);
      std::optional<ad::Var<T>> recorded;
      try {
        recorded = flow_nll(tape, result.model, std::span<const ad::Var<T>>(vars), batch);
      } catch (const NumericError& e) {
        throw TrainingDiverged<T>("training diverged: " + std::string(e.what()) + " at " + where, result);
      }
      const ad::Var<T> loss = *recorded;
      const double value = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(value)) throw TrainingDiverged<T>("training diverged: non-finite loss at " + where, result);

      const auto grads = tape.backward(loss);
      std::vector<Tensor<T>> param_grads;
      param_grads.reserve(vars.size());
      for (const auto& v : vars) param_grads.push_back(grads[v]);
      try {
        optimizer_step(std::span<Tensor<T>* const>(params), std::span<const Tensor<T>>(param_grads), state,
                       cfg.learning_rate, std::span<const std::string>(names));
      } catch (const NumericError& e) {
        throw TrainingDiverged<T>(std::string(e.what()) + " at " + where, result);
      }
      weighted += value * static_cast<double>(count);
    }
    result.history.push_back(weighted / static_cast<double>(s.n));
    if (on_epoch) on_epoch(epoch + 1, result.history.back());
  }
  return result;
}

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'A', 'F', 'W'};

struct CheckpointHeader {
  TrainConfig config;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Dtype dtype = Dtype::F32;
};

CheckpointHeader parse_header(detail::ByteReader& r, const std::string& context) {
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) {
    throw MagicMismatchError(context + ": not a CAFW checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionMismatchError(context + ": unsupported checkpoint version " + std::to_string(version));
  }
  CheckpointHeader h;
  h.config.epochs = r.get<std::uint64_t>();
  h.config.learning_rate = r.get<double>();
  h.config.batch_size = r.get<std::uint64_t>();
  h.config.steps = r.get<std::uint64_t>();
  const auto variant = r.get<std::uint8_t>();
  if (variant > 3) throw FormatError(context + ": unknown variant tag " + std::to_string(variant));
  h.config.variant = static_cast<Variant>(variant);
  h.config.seed = r.get<std::uint64_t>();
  const bool clamp = r.get<std::uint8_t>() != 0;
  const double alpha = r.get<double>();
  h.config.clamp_alpha = clamp ? std::optional<double>(alpha) : std::nullopt;
  h.config.hidden_channels = r.get<std::uint64_t>();
  h.config.reduction = r.get<std::uint64_t>();
  h.channels = r.get<std::uint32_t>();
  h.height = r.get<std::uint32_t>();
  h.width = r.get<std::uint32_t>();
  const auto dtype = r.get<std::uint8_t>();
  if (dtype > 1) throw FormatError(context + ": unknown dtype flag " + std::to_string(dtype));
  h.dtype = static_cast<Dtype>(dtype);
  return h;
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw ContractError(std::string("checkpoint: ") + what + " exceeds u32");
  return static_cast<std::uint32_t>(v);
}

template <typename T>
void put_tensor(detail::ByteWriter& w, const std::string& name, const Tensor<T>& t) {
  w.put_string(name);
  const Shape& s = t.shape();
  for (std::size_t e : {s.n, s.c, s.h, s.w}) w.put(checked_u32(e, "tensor extent"));
  w.put_array(t.data());
}

template <typename Stored, typename T>
Tensor<T> get_tensor_as(detail::ByteReader& r, const Shape& shape) {
  std::vector<Stored> raw(shape.numel());
  r.get_array(std::span<Stored>(raw));
  return Tensor<T>(shape, std::vector<T>(raw.begin(), raw.end()));
}

}  // namespace

template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const fs::path& path) {
  const TrainConfig& c = ckpt.config;
  const FlowModel<T>& m = ckpt.model;
  detail::ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4));
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint64_t>(c.epochs));
  w.put(c.learning_rate);
  w.put(static_cast<std::uint64_t>(c.batch_size));
  w.put(static_cast<std::uint64_t>(m.config.steps));
  w.put(static_cast<std::uint8_t>(m.config.variant));
  w.put(static_cast<std::uint64_t>(m.config.seed));
  w.put(static_cast<std::uint8_t>(m.config.clamp_alpha.has_value()));
  w.put(m.config.clamp_alpha.value_or(0.0));
  w.put(static_cast<std::uint64_t>(m.config.hidden_channels));
  w.put(static_cast<std::uint64_t>(m.config.reduction));
  w.put(checked_u32(m.config.channels, "channel count"));
  w.put(checked_u32(m.config.height, "height"));
  w.put(checked_u32(m.config.width, "width"));
  w.put(static_cast<std::uint8_t>(dtype_of<T>()));

  w.put(checked_u32(m.blocks.size(), "block count"));
  for (const auto& block : m.blocks) {
    for (std::size_t p : block.perm) w.put(checked_u32(p, "permutation entry"));
  }
  w.put(checked_u32(ckpt.history.size(), "history length"));
  w.put_array(std::span<const double>(ckpt.history));

  const std::size_t channels = m.config.channels;
  const auto names = m.parameter_names();
  const auto params = m.parameters();
  w.put(checked_u32(params.size() + 2, "tensor count"));
  put_tensor(w, "norm.mean", Tensor<T>(Shape{1, channels, 1, 1}, m.norm.mean));
  put_tensor(w, "norm.std", Tensor<T>(Shape{1, channels, 1, 1}, m.norm.stddev));
  for (std::size_t i = 0; i < params.size(); ++i) put_tensor(w, names[i], *params[i]);
  w.put_crc();
  detail::write_file(path, w.bytes());
}

namespace {

template <typename T>
Checkpoint<T> parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& context) {
  detail::ByteReader r(bytes, context);
  const CheckpointHeader h = parse_header(r, context);

  if (h.config.steps > 4096 || h.channels > 65536 || h.config.hidden_channels > 65536) {
    throw FormatError(context + ": implausible model dimensions");
  }
  Checkpoint<T> ckpt;
  ckpt.config = h.config;
  try {
    ckpt.model = FlowModel<T>::create(flow_config_for(h.config, h.channels, h.height, h.width));
  } catch (const ContractError& e) {
    throw FormatError(context + ": invalid model configuration: " + e.what());
  }
  FlowModel<T>& m = ckpt.model;

  const auto blocks = r.get<std::uint32_t>();
  if (blocks != m.blocks.size()) {
    throw FormatError(context + ": " + std::to_string(blocks) + " permutations for " +
                      std::to_string(m.blocks.size()) + " blocks");
  }
  for (auto& block : m.blocks) {
    for (std::size_t& p : block.perm) p = r.get<std::uint32_t>();
    try {
      check_permutation(block.perm, h.channels);
    } catch (const ContractError& e) {
      throw FormatError(context + ": " + e.what());
    }
  }
  const auto history = r.get<std::uint32_t>();
  if (static_cast<std::size_t>(history) * sizeof(double) > r.remaining()) {
    throw TruncatedFileError(context + ": file is truncated");
  }
  ckpt.history.resize(history);
  r.get_array(std::span<double>(ckpt.history));

  const auto names = m.parameter_names();
  auto params = m.parameters();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size() + 2) {
    throw FormatError(context + ": " + std::to_string(count) + " tensors, expected " +
                      std::to_string(params.size() + 2));
  }
  auto next = [&](const std::string& expected_name, const Shape& expected_shape) {
    const std::string name = r.get_string();
    if (name != expected_name) throw FormatError(context + ": tensor '" + name + "' where '" + expected_name + "' was expected");
    Shape s;
    s.n = r.get<std::uint32_t>();
    s.c = r.get<std::uint32_t>();
    s.h = r.get<std::uint32_t>();
    s.w = r.get<std::uint32_t>();
    if (s != expected_shape) {
      throw FormatError(context + ": tensor '" + name + "' has shape " + s.str() + ", expected " + expected_shape.str());
    }
    return h.dtype == Dtype::F32 ? get_tensor_as<float, T>(r, s) : get_tensor_as<double, T>(r, s);
  };
  const Shape norm_shape{1, h.channels, 1, 1};
  m.norm.mean = next("norm.mean", norm_shape).values();
  m.norm.stddev = next("norm.std", norm_shape).values();
  for (std::size_t i = 0; i < params.size(); ++i) *params[i] = next(names[i], params[i]->shape());

  if (r.remaining() < 4) throw TruncatedFileError(context + ": file is truncated");
  if (r.remaining() > 4) throw FormatError(context + ": unexpected trailing bytes");
  return ckpt;
}

}  // namespace

// Structural problems in a file whose checksum is also wrong are reported as
// checksum mismatches; truncation and bad magic or version keep their own errors.
template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
  const std::string context = path.string();
  const auto bytes = detail::read_file(path);
  try {
    Checkpoint<T> ckpt = parse_checkpoint<T>(bytes, context);
    detail::verify_trailing_crc(bytes, context);
    return ckpt;
  } catch (const MagicMismatchError&) {
    throw;
  } catch (const VersionMismatchError&) {
    throw;
  } catch (const TruncatedFileError&) {
    throw;
  } catch (const FormatError&) {
    detail::verify_trailing_crc(bytes, context);
    throw;
  }
}

Dtype peek_checkpoint_dtype(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes, path.string());
  return parse_header(r, path.string()).dtype;
}

#define CAINN_INSTANTIATE_TRAINER(T)                                                                             \
  template struct OptimizerState<T>;                                                                             \
  template void optimizer_step<T>(std::span<Tensor<T>* const>, std::span<const Tensor<T>>, OptimizerState<T>&,   \
                                  double, std::span<const std::string>);                                         \
  template TrainResult<T> train<T>(const Tensor<T>&, const TrainConfig&, const EpochCallback&);                  \
  template void save_checkpoint<T>(const Checkpoint<T>&, const fs::path&);                                       \
  template Checkpoint<T> load_checkpoint<T>(const fs::path&);

CAINN_INSTANTIATE_TRAINER(float)
CAINN_INSTANTIATE_TRAINER(double)

#undef CAINN_INSTANTIATE_TRAINER

}  // namespace cainn
