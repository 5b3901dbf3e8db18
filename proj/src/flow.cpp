#include "cainn/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cainn/ops.hpp"
#include "cainn/rng.hpp"
#include "subnet_graph.hpp"

namespace cainn {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2*pi)

using ad::Var;

template <typename T>
const Tensor<T>& value_of(const Tensor<T>& t) {
  return t;
}
template <typename T>
const Tensor<T>& value_of(const Var<T>& v) {
  return v.value();
}

template <typename T>
std::span<const Tensor<T>> param_span(const SubnetParams<T>& p) {
  return std::span<const Tensor<T>>(p.tensors);
}

template <class V>
struct CouplingTrace {
  V v;
  // Effective (clamped) log-scales of both halves.
  V log_scale_1;
  V log_scale_2;
};

template <class V>
V soft_clamp(const V& s, const std::optional<double>& alpha) {
  using cainn::scale;
  using cainn::ad::scale;
  if (!alpha) return s;
  using Scalar = typename std::decay_t<decltype(value_of(s))>::value_type;
  const auto a = static_cast<Scalar>(*alpha);
  return scale(map_unary(scale(s, Scalar(1) / a), UnaryOp::Tanh), a);
}

template <class V>
void require_finite(const V& out, std::size_t block_index) {
  if (!all_finite(value_of(out))) {
    throw NumericError("non-finite subnet output in coupling block " + std::to_string(block_index));
  }
}

template <class V, typename T>
CouplingTrace<V> coupling_graph(const V& u, const CouplingBlock<T>& block, std::span<const V> params_a,
                                std::span<const V> params_b, std::size_t block_index) {
  using cainn::permute_channels;
  using cainn::slice_channels;
  using cainn::unpermute_channels;
  using cainn::ad::permute_channels;
  using cainn::ad::slice_channels;
  using cainn::ad::unpermute_channels;
  using detail::concat_channels;
  using detail::elementwise;
  using detail::map_unary;

  const std::size_t channels = value_of(u).shape().c;
  const std::size_t c1 = (channels + 1) / 2;
  const std::size_t c2 = channels - c1;
  const std::span<const std::size_t> perm(block.perm);

  const V permuted = permute_channels(u, perm);
  const V u1 = slice_channels(permuted, 0, c1);
  const V u2 = slice_channels(permuted, c1, c2);

  const V out_a = detail::subnet_graph(u2, block.subnet_a_config.variant, params_a);
  require_finite(out_a, block_index);
  const V s2 = soft_clamp(slice_channels(out_a, 0, c1), block.clamp_alpha);
  const V t2 = slice_channels(out_a, c1, c1);
  const V v1 = elementwise(elementwise(u1, map_unary(s2, UnaryOp::Exp), BinaryOp::Mul), t2, BinaryOp::Add);

  const V out_b = detail::subnet_graph(v1, block.subnet_b_config.variant, params_b);
  require_finite(out_b, block_index);
  const V s1 = soft_clamp(slice_channels(out_b, 0, c2), block.clamp_alpha);
  const V t1 = slice_channels(out_b, c2, c2);
  const V v2 = elementwise(elementwise(u2, map_unary(s1, UnaryOp::Exp), BinaryOp::Mul), t1, BinaryOp::Add);

  return {unpermute_channels(concat_channels(v1, v2), perm), s2, s1};
}

template <typename T>
void add_per_sample_sums(const Tensor<T>& t, std::vector<double>& acc) {
  const std::size_t per = t.shape().sample();
  for (std::size_t n = 0; n < t.shape().n; ++n) {
    double s = 0.0;
    const T* p = t.data().data() + n * per;
    for (std::size_t i = 0; i < per; ++i) s += static_cast<double>(p[i]);
    acc[n] += s;
  }
}

void check_dims(const Shape& s, const FlowConfig& cfg, const char* what) {
  if (s.c != cfg.channels || s.h != cfg.height || s.w != cfg.width) {
    throw ShapeError(std::string(what) + ": expected (N," + std::to_string(cfg.channels) + "," +
                     std::to_string(cfg.height) + "," + std::to_string(cfg.width) + ") input, got " + s.str());
  }
}

}  // namespace

template <typename T>
FeatureNorm<T> compute_feature_norm(const Tensor<T>& data) {
  const Shape& s = data.shape();
  if (s.n * s.plane() == 0) throw ContractError("feature statistics need at least one sample");
  FeatureNorm<T> norm;
  const double count = static_cast<double>(s.n * s.plane());
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = data.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) sum += static_cast<double>(p[i]);
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = data.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const double d = static_cast<double>(p[i]) - mean;
        sq += d * d;
      }
    }
    double sd = std::sqrt(sq / count);
    if (!(sd > 1e-12)) sd = 1.0;
    norm.mean.push_back(static_cast<T>(mean));
    norm.stddev.push_back(static_cast<T>(sd));
  }
  return norm;
}

template <typename T>
Tensor<T> normalize_features(const Tensor<T>& x, const FeatureNorm<T>& norm) {
  const Shape& s = x.shape();
  if (norm.mean.size() != s.c || norm.stddev.size() != s.c) {
    throw ShapeError("feature normalization has " + std::to_string(norm.mean.size()) + " channels, input " + s.str());
  }
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = x.plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = (src[i] - norm.mean[c]) / norm.stddev[c];
    }
  }
  return out;
}

template <typename T>
Tensor<T> denormalize_features(const Tensor<T>& x, const FeatureNorm<T>& norm) {
  const Shape& s = x.shape();
  if (norm.mean.size() != s.c || norm.stddev.size() != s.c) {
    throw ShapeError("feature normalization has " + std::to_string(norm.mean.size()) + " channels, input " + s.str());
  }
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = x.plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = src[i] * norm.stddev[c] + norm.mean[c];
    }
  }
  return out;
}

template <typename T>
FlowModel<T> FlowModel<T>::create(const FlowConfig& cfg, InitMode mode) {
  if (cfg.channels < 2) throw ContractError("coupling needs at least 2 channels, got " + std::to_string(cfg.channels));
  if (cfg.height == 0 || cfg.width == 0) throw ContractError("flow needs a non-empty spatial extent");
  if (cfg.steps == 0) throw ContractError("flow needs at least one step");
  if (cfg.clamp_alpha && !(*cfg.clamp_alpha > 0.0)) throw ContractError("clamp alpha must be positive");

  FlowModel model;
  model.config = cfg;
  model.norm = FeatureNorm<T>::identity(cfg.channels);
  const std::size_t c1 = (cfg.channels + 1) / 2;
  const std::size_t c2 = cfg.channels - c1;
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    CouplingBlock<T> block;
    block.clamp_alpha = cfg.clamp_alpha;
    block.perm.resize(cfg.channels);
    std::iota(block.perm.begin(), block.perm.end(), std::size_t{0});
    Rng perm_rng(mix_seed(cfg.seed, 3 * k));
    perm_rng.shuffle(block.perm.begin(), block.perm.end());

    block.subnet_a_config = SubnetConfig{cfg.variant, c2, cfg.hidden_channels ? cfg.hidden_channels : c2, 2 * c1,
                                         cfg.reduction, mix_seed(cfg.seed, 3 * k + 1)};
    block.subnet_b_config = SubnetConfig{cfg.variant, c1, cfg.hidden_channels ? cfg.hidden_channels : c1, 2 * c2,
                                         cfg.reduction, mix_seed(cfg.seed, 3 * k + 2)};
    block.subnet_a = subnet_init<T>(block.subnet_a_config, mode);
    block.subnet_b = subnet_init<T>(block.subnet_b_config, mode);
    model.blocks.push_back(std::move(block));
  }
  return model;
}

template <typename T>
std::vector<Tensor<T>*> FlowModel<T>::parameters() {
  std::vector<Tensor<T>*> out;
  for (auto& block : blocks) {
    for (auto& t : block.subnet_a.tensors) out.push_back(&t);
    for (auto& t : block.subnet_b.tensors) out.push_back(&t);
  }
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> FlowModel<T>::parameters() const {
  std::vector<const Tensor<T>*> out;
  for (const auto& block : blocks) {
    for (const auto& t : block.subnet_a.tensors) out.push_back(&t);
    for (const auto& t : block.subnet_b.tensors) out.push_back(&t);
  }
  return out;
}

template <typename T>
std::vector<std::string> FlowModel<T>::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const std::string prefix = "block" + std::to_string(k);
    for (const auto& spec : subnet_layout(blocks[k].subnet_a_config)) out.push_back(prefix + ".a." + spec.name);
    for (const auto& spec : subnet_layout(blocks[k].subnet_b_config)) out.push_back(prefix + ".b." + spec.name);
  }
  return out;
}

template <typename T>
std::size_t FlowModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor<T>* t : parameters()) n += t->numel();
  return n;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x) {
  const std::size_t channels = x.shape().c;
  if (channels < 2) throw ContractError("split_channels: coupling needs at least 2 channels, got " + std::to_string(channels));
  const std::size_t c1 = (channels + 1) / 2;
  return {slice_channels(x, 0, c1), slice_channels(x, c1, channels - c1)};
}

template <typename T>
CouplingOutput<T> coupling_forward(const Tensor<T>& u, const CouplingBlock<T>& block, std::size_t block_index) {
  const auto trace = coupling_graph<Tensor<T>>(u, block, param_span(block.subnet_a), param_span(block.subnet_b),
                                               block_index);
  CouplingOutput<T> out{trace.v, std::vector<double>(u.shape().n, 0.0)};
  add_per_sample_sums(trace.log_scale_1, out.logdet);
  add_per_sample_sums(trace.log_scale_2, out.logdet);
  return out;
}

template <typename T>
Tensor<T> coupling_inverse(const Tensor<T>& v, const CouplingBlock<T>& block, std::size_t block_index) {
  const std::size_t channels = v.shape().c;
  const std::size_t c1 = (channels + 1) / 2;
  const std::size_t c2 = channels - c1;
  const std::span<const std::size_t> perm(block.perm);

  const Tensor<T> permuted = permute_channels(v, perm);
  const Tensor<T> v1 = slice_channels(permuted, 0, c1);
  const Tensor<T> v2 = slice_channels(permuted, c1, c2);

  const Tensor<T> out_b = detail::subnet_graph(v1, block.subnet_b_config.variant, param_span(block.subnet_b));
  require_finite(out_b, block_index);
  const Tensor<T> s1 = soft_clamp(slice_channels(out_b, 0, c2), block.clamp_alpha);
  const Tensor<T> t1 = slice_channels(out_b, c2, c2);
  const Tensor<T> u2 = elementwise(elementwise(v2, scale(t1, T(-1)), BinaryOp::Add),
                                   map_unary(scale(s1, T(-1)), UnaryOp::Exp), BinaryOp::Mul);

  const Tensor<T> out_a = detail::subnet_graph(u2, block.subnet_a_config.variant, param_span(block.subnet_a));
  require_finite(out_a, block_index);
  const Tensor<T> s2 = soft_clamp(slice_channels(out_a, 0, c1), block.clamp_alpha);
  const Tensor<T> t2 = slice_channels(out_a, c1, c1);
  const Tensor<T> u1 = elementwise(elementwise(v1, scale(t2, T(-1)), BinaryOp::Add),
                                   map_unary(scale(s2, T(-1)), UnaryOp::Exp), BinaryOp::Mul);

  return unpermute_channels(concat_channels(u1, u2), perm);
}

template <typename T>
FlowOutput<T> flow_forward(const Tensor<T>& x, const FlowModel<T>& model) {
  check_dims(x.shape(), model.config, "flow_forward");
  FlowOutput<T> out{normalize_features(x, model.norm), std::vector<double>(x.shape().n, 0.0)};
  for (std::size_t k = 0; k < model.blocks.size(); ++k) {
    CouplingOutput<T> step = coupling_forward(out.z, model.blocks[k], k);
    out.z = std::move(step.v);
    for (std::size_t n = 0; n < out.logdet.size(); ++n) out.logdet[n] += step.logdet[n];
  }
  return out;
}

template <typename T>
Tensor<T> flow_inverse(const Tensor<T>& z, const FlowModel<T>& model) {
  check_dims(z.shape(), model.config, "flow_inverse");
  Tensor<T> x = z;
  for (std::size_t k = model.blocks.size(); k-- > 0;) x = coupling_inverse(x, model.blocks[k], k);
  return denormalize_features(x, model.norm);
}

template <typename T>
std::vector<double> gaussian_logdensity(const Tensor<T>& z) {
  const std::size_t per = z.shape().sample();
  std::vector<double> out(z.shape().n, 0.0);
  for (std::size_t n = 0; n < z.shape().n; ++n) {
    double sq = 0.0;
    const T* p = z.data().data() + n * per;
    for (std::size_t i = 0; i < per; ++i) sq += static_cast<double>(p[i]) * static_cast<double>(p[i]);
    out[n] = -0.5 * sq - kHalfLog2Pi * static_cast<double>(per);
  }
  return out;
}

template <typename T>
double nll_loss(const FlowOutput<T>& out) {
  const std::size_t batch = out.z.shape().n;
  if (batch == 0 || out.logdet.size() != batch) throw ContractError("nll_loss: empty or inconsistent flow output");
  const double dims = static_cast<double>(out.z.shape().sample());
  const std::vector<double> logp = gaussian_logdensity(out.z);
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) total += -(logp[n] + out.logdet[n]) / dims;
  return total / static_cast<double>(batch);
}

template <typename T>
double numerical_logdet_oracle(const Tensor<T>& x, const FlowModel<T>& model, double eps) {
  const Shape& s = x.shape();
  if (s.n != 1) throw ContractError("numerical_logdet_oracle: expects a single sample, got " + s.str());
  const std::size_t dims = s.sample();
  if (dims > 64) throw ContractError("numerical_logdet_oracle: dense Jacobian limited to 64 dims, got " + std::to_string(dims));

  std::vector<double> jac(dims * dims);
  Tensor<T> probe = x;
  for (std::size_t j = 0; j < dims; ++j) {
    const T original = probe[j];
    probe[j] = static_cast<T>(static_cast<double>(original) + eps);
    const Tensor<T> up = flow_forward(probe, model).z;
    probe[j] = static_cast<T>(static_cast<double>(original) - eps);
    const Tensor<T> down = flow_forward(probe, model).z;
    probe[j] = original;
    for (std::size_t i = 0; i < dims; ++i) {
      jac[i * dims + j] = (static_cast<double>(up[i]) - static_cast<double>(down[i])) / (2.0 * eps);
    }
  }

  // Gaussian elimination with partial pivoting; ln|det| is the sum of ln|pivot|.
  double scale_ref = 0.0;
  for (double v : jac) scale_ref = std::max(scale_ref, std::abs(v));
  double log_abs_det = 0.0;
  for (std::size_t col = 0; col < dims; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < dims; ++r) {
      if (std::abs(jac[r * dims + col]) > std::abs(jac[pivot * dims + col])) pivot = r;
    }
    const double p = jac[pivot * dims + col];
    if (std::abs(p) <= scale_ref * 1e-14) throw NumericError("numerical_logdet_oracle: Jacobian is singular");
    if (pivot != col) {
      for (std::size_t c = 0; c < dims; ++c) std::swap(jac[col * dims + c], jac[pivot * dims + c]);
    }
    log_abs_det += std::log(std::abs(p));
    for (std::size_t r = col + 1; r < dims; ++r) {
      const double f = jac[r * dims + col] / p;
      if (f == 0.0) continue;
      for (std::size_t c = col; c < dims; ++c) jac[r * dims + c] -= f * jac[col * dims + c];
    }
  }

  // Remove the standardization's diagonal contribution, -H*W * sum ln(std).
  for (T sd : model.norm.stddev) log_abs_det += static_cast<double>(s.plane()) * std::log(static_cast<double>(sd));
  return log_abs_det;
}

template <typename T>
std::vector<ad::Var<T>> bind_parameters(ad::Tape<T>& tape, const FlowModel<T>& model) {
  std::vector<ad::Var<T>> vars;
  for (const Tensor<T>* t : model.parameters()) vars.push_back(tape.leaf(*t));
  return vars;
}

template <typename T>
ad::Var<T> flow_nll(ad::Tape<T>& tape, const FlowModel<T>& model, std::span<const ad::Var<T>> params,
                    const Tensor<T>& x) {
  check_dims(x.shape(), model.config, "flow_nll");
  if (params.size() != model.parameters().size()) {
    throw ContractError("flow_nll: expected " + std::to_string(model.parameters().size()) + " parameter vars, got " +
                        std::to_string(params.size()));
  }
  Var<T> z = tape.constant(normalize_features(x, model.norm));
  Var<T> log_scale_total = tape.constant(Tensor<T>(Shape{1, 1, 1, 1}));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < model.blocks.size(); ++k) {
    const auto& block = model.blocks[k];
    const auto pa = params.subspan(offset, block.subnet_a.tensors.size());
    offset += pa.size();
    const auto pb = params.subspan(offset, block.subnet_b.tensors.size());
    offset += pb.size();
    auto trace = coupling_graph<Var<T>>(z, block, pa, pb, k);
    z = trace.v;
    log_scale_total = ad::elementwise(log_scale_total, ad::sum(trace.log_scale_1), BinaryOp::Add);
    log_scale_total = ad::elementwise(log_scale_total, ad::sum(trace.log_scale_2), BinaryOp::Add);
  }
  const Var<T> half_sq = ad::scale(ad::sum(ad::elementwise(z, z, BinaryOp::Mul)), T(0.5));
  const Var<T> total = ad::elementwise(half_sq, ad::scale(log_scale_total, T(-1)), BinaryOp::Add);
  const double denom = static_cast<double>(x.shape().n * x.shape().sample());
  return ad::add_constant(ad::scale(total, static_cast<T>(1.0 / denom)), static_cast<T>(kHalfLog2Pi));
}

#define CAINN_INSTANTIATE_FLOW(T)                                                                                 \
  template FeatureNorm<T> compute_feature_norm<T>(const Tensor<T>&);                                              \
  template Tensor<T> normalize_features<T>(const Tensor<T>&, const FeatureNorm<T>&);                              \
  template Tensor<T> denormalize_features<T>(const Tensor<T>&, const FeatureNorm<T>&);                            \
  template struct FlowModel<T>;                                                                                   \
  template std::pair<Tensor<T>, Tensor<T>> split_channels<T>(const Tensor<T>&);                                   \
  template CouplingOutput<T> coupling_forward<T>(const Tensor<T>&, const CouplingBlock<T>&, std::size_t);         \
  template Tensor<T> coupling_inverse<T>(const Tensor<T>&, const CouplingBlock<T>&, std::size_t);                 \
  template FlowOutput<T> flow_forward<T>(const Tensor<T>&, const FlowModel<T>&);                                  \
  template Tensor<T> flow_inverse<T>(const Tensor<T>&, const FlowModel<T>&);                                      \
  template std::vector<double> gaussian_logdensity<T>(const Tensor<T>&);                                          \
  template double nll_loss<T>(const FlowOutput<T>&);                                                              \
  template double numerical_logdet_oracle<T>(const Tensor<T>&, const FlowModel<T>&, double);                      \
  template std::vector<ad::Var<T>> bind_parameters<T>(ad::Tape<T>&, const FlowModel<T>&);                         \
  template ad::Var<T> flow_nll<T>(ad::Tape<T>&, const FlowModel<T>&, std::span<const ad::Var<T>>, const Tensor<T>&);

CAINN_INSTANTIATE_FLOW(float)
CAINN_INSTANTIATE_FLOW(double)

#undef CAINN_INSTANTIATE_FLOW

}  // namespace cainn
