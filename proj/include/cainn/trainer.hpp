#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cainn/error.hpp"
#include "cainn/flow.hpp"
#include "cainn/tensor.hpp"

namespace cainn {

struct TrainConfig {
  std::size_t epochs = 750;
  double learning_rate = 5e-4;
  std::size_t batch_size = 32;
  std::size_t steps = 2;
  Variant variant = Variant::CAC;
  std::uint64_t seed = 0;
  std::optional<double> clamp_alpha = kDefaultClampAlpha;
  std::size_t hidden_channels = 0;
  std::size_t reduction = 16;

  // Throws ContractError on a non-positive rate, batch size or step count.
  void validate() const;
};

FlowConfig flow_config_for(const TrainConfig& cfg, std::size_t channels, std::size_t height, std::size_t width);

// Adam moments, one pair of accumulators per parameter tensor.
template <typename T>
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  static OptimizerState zeros_like(std::span<Tensor<T>* const> params);
};

// One bias-corrected Adam update. Every gradient is checked before any
// parameter moves; a non-finite one raises NumericError naming the tensor.
template <typename T>
void optimizer_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads, OptimizerState<T>& state,
                    double learning_rate, std::span<const std::string> names = {});

template <typename T>
struct TrainResult {
  FlowModel<T> model;
  // Sample-weighted mean of the minibatch losses seen during each epoch.
  std::vector<double> history;
};

// Raised when a minibatch loss turns non-finite. Carries the model as it was
// before the failing step.
template <typename T>
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, TrainResult<T> last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const TrainResult<T>& last_good() const { return last_good_; }

 private:
  TrainResult<T> last_good_;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

// Minibatch NLL descent over `data` (N, C, H, W), all normal samples.
template <typename T>
TrainResult<T> train(const Tensor<T>& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// CAFW checkpoint, little-endian:
//   "CAFW" | u32 version = 1
//   | u64 epochs | f64 lr | u64 batch | u64 steps | u8 variant | u64 seed
//   | u8 clamp enabled | f64 alpha | u64 hidden | u64 reduction
//   | u32 C, H, W | u8 dtype
//   | u32 K, then K permutations of C u32 each
//   | u32 history length, f64 values
//   | u32 tensor count, per tensor: u32 name length, name, u32 N, C, H, W, values
//   | u32 CRC32 of all preceding bytes
// The tensor records hold norm.mean and norm.std (1, C, 1, 1) followed by
// every model parameter in FlowModel::parameter_names() order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  TrainConfig config;
  FlowModel<T> model;
  std::vector<double> history;
};

template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path);

// Converts to T when the stored precision differs.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

// Stored element precision, read from the header only.
Dtype peek_checkpoint_dtype(const std::filesystem::path& path);

}  // namespace cainn
