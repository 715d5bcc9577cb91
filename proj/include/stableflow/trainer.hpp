#pragma once

#include "stableflow/dataset.hpp"
#include "stableflow/policy.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stableflow {

/// Architecture choice for the weight network, written `mlp:32,32` or `conv`
/// (optionally `conv:32,32`). Image datasets always get a conv front-end;
/// the widths describe the dense layers behind it.
struct NetDescriptor {
  bool conv = false;
  std::vector<std::size_t> hidden = {32, 32};

  std::string to_string() const;
  bool operator==(const NetDescriptor&) const = default;
};

/// Throws ValidationError on malformed text.
NetDescriptor parse_net_descriptor(std::string_view text);

struct TrainConfig {
  std::size_t n_systems = 5;
  std::size_t epochs = 1000;
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  NetDescriptor net;
  double diag_floor = 1e-6;
  bool standardize = false;  ///< per-dimension standardization of the weight-net inputs
  std::size_t smoothing_window = 1;

  /// Throws ValidationError when a field is out of range.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Reads a JSON object of TrainConfig fields; absent keys keep the values of
/// `base`, unknown keys are rejected. Throws ValidationError / ParseError.
TrainConfig parse_train_config(std::string_view json_text, const TrainConfig& base = {});
std::string train_config_to_json(const TrainConfig& config);

/// Weight-net architecture for a dataset layout.
WeightNetSpec make_net_spec(const TrainConfig& config, const DatasetLayout& layout);

/// (1/B) sum ||policy_eval(x) - target||^2. Throws ValidationError on an empty batch.
double imitation_loss(const PolicyParams& params, std::span<const Sample> batch);

/// Trainable parameters as one flat vector: per system the lower triangle of
/// L_raw (column-major) and C, then the weight network. The attractor and any
/// input standardization are fixed and excluded.
std::size_t trainable_count(const PolicyParams& params);
Vector flatten_trainable(const PolicyParams& params);
void assign_trainable(PolicyParams& params, const Vector& flat);

struct LossGradient {
  double loss = 0.0;
  Vector gradient;  ///< laid out like flatten_trainable
};

/// Loss and its gradient by reverse-mode differentiation on a fresh tape.
LossGradient imitation_loss_gradient(const PolicyParams& params, std::span<const Sample* const> batch);

struct TrainProgress {
  std::size_t epoch = 0;  ///< 1-based count of finished epochs
  std::size_t epochs = 0;
  double loss = 0.0;  ///< mean mini-batch loss over the epoch
  const PolicyParams* params = nullptr;  ///< current parameters, valid during the callback
};

/// Return false to stop after the current epoch.
using ProgressCallback = std::function<bool(const TrainProgress&)>;

struct TrainingMetadata {
  double initial_loss = 0.0;  ///< full-dataset loss at initialization
  double final_loss = 0.0;    ///< full-dataset loss of the returned parameters
  std::size_t epochs_run = 0;
  std::vector<double> loss_history;  ///< one entry per finished epoch
  std::string dataset_fingerprint;
  double dataset_dt = 0.0;  ///< default rollout step
};

struct Checkpoint {
  int version = 1;
  TrainConfig config;
  PolicyParams params;
  TrainingMetadata training;
};

/// Adam on the imitation loss. Deterministic given config.seed.
/// Throws TrainingDivergedError (carrying the epoch) on a non-finite loss.
Checkpoint train(const Dataset& data, const TrainConfig& config, const ProgressCallback& progress = {});

inline constexpr int kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws ParseError on corrupt input and UnsupportedVersionError for other versions.
Checkpoint parse_checkpoint(std::string_view json_text);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stableflow
