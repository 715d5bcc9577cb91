#pragma once

#include "stableflow/autodiff.hpp"
#include "stableflow/rng.hpp"
#include "stableflow/state.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace stableflow {

enum class Activation { kTanh, kRelu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct DenseLayerSpec {
  std::size_t width = 32;
  Activation activation = Activation::kTanh;
  bool operator==(const DenseLayerSpec&) const = default;
};

/// One conv -> activation -> max-pool stage of the image front-end.
struct ConvLayerSpec {
  std::size_t channels = 8;
  std::size_t kernel = 5;
  std::size_t pool = 2;
  bool operator==(const ConvLayerSpec&) const = default;
};

/// Output layer of the weight network. Only softmax is supported: it is the
/// positivity-preserving head the stability certificate relies on.
enum class WeightHead { kSoftmax };

/// Architecture of the weight network Psi.
///
/// Vector observations feed [x_c; x_nc] straight into the MLP. Image
/// observations go through the conv stack first and the flattened features
/// are appended to x_c.
struct WeightNetSpec {
  ObservationKind input_kind = ObservationKind::kVector;
  std::size_t dim_controllable = 2;
  std::size_t dim_observation = 0;  ///< d_nc, vector inputs only
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::vector<ConvLayerSpec> conv;
  Activation conv_activation = Activation::kRelu;
  std::vector<DenseLayerSpec> hidden = {{32, Activation::kTanh}, {32, Activation::kTanh}};
  std::size_t output_dim = 5;
  WeightHead head = WeightHead::kSoftmax;

  /// Defaults for image inputs: 8 then 16 channels, 5x5 kernels, 2x2 pooling.
  static std::vector<ConvLayerSpec> default_conv();

  /// Length of the part of the MLP input that is standardized (x_c, plus x_nc for vectors).
  std::size_t raw_input_size() const;
  /// Length of the conv feature vector (0 for vector inputs).
  std::size_t feature_size() const;
  std::size_t mlp_input_size() const;
  std::vector<ad::ConvShape> conv_shapes() const;
  std::vector<ad::PoolShape> pool_shapes() const;

  /// Throws InvalidParameterError when the architecture is inconsistent.
  void validate() const;
  bool operator==(const WeightNetSpec&) const = default;
};

/// Trainable parameters psi plus a fixed input standardization.
struct WeightNetParams {
  WeightNetSpec spec;
  std::vector<Matrix> conv_kernels;  ///< out_channels x (in_channels * k * k)
  std::vector<Vector> conv_biases;
  std::vector<Matrix> weights;  ///< hidden layers then the output layer
  std::vector<Vector> biases;
  Vector input_offset;  ///< subtracted from the raw input (defaults to zeros)
  Vector input_scale;   ///< then divided by this (defaults to ones)

  std::size_t parameter_count() const;
  /// Throws InvalidParameterError on shape mismatches or non-finite entries.
  void validate() const;
};

/// Hidden weights ~ U(+-1/sqrt(fan_in)); biases zero; identity standardization.
WeightNetParams init_weight_net(const WeightNetSpec& spec, Rng& rng);

/// Observation part of the MLP input, precomputable once per payload:
/// the standardized x_nc for vector inputs, the flattened conv features for images.
Vector observation_features(const WeightNetParams& params, const Observation& obs);

/// Raw logits before the softmax head.
Vector weight_logits(const WeightNetParams& params, const Vector& controllable, const Vector& features);

/// w = softmax(Psi(x)); strictly positive and sums to one.
Vector weight_forward(const WeightNetParams& params, const StateVector& state);
Vector weight_forward(const WeightNetParams& params, const Vector& controllable, const Vector& features);

/// Non-controllable payloads for a batch, laid out for the tape.
/// Images are deduplicated by identity so each distinct frame is convolved once.
struct ObservationBatch {
  ObservationKind kind = ObservationKind::kVector;
  Matrix vectors;        ///< d_nc x B (vector inputs)
  Matrix unique_images;  ///< (H*W) x U (image inputs)
  std::vector<Eigen::Index> image_index;  ///< column of unique_images per sample
};

ObservationBatch batch_observations(const WeightNetSpec& spec, const std::vector<const Observation*>& payloads);

/// Parameter leaves registered on a tape, in WeightNetParams order.
struct WeightNetNodes {
  std::vector<ad::NodeId> conv_kernels;
  std::vector<ad::NodeId> conv_biases;
  std::vector<ad::NodeId> weights;
  std::vector<ad::NodeId> biases;
};

WeightNetNodes register_weight_net(ad::Tape& tape, const WeightNetParams& params);

/// Softmax weights (N x B) for a batch, recorded on the tape.
ad::NodeId weight_forward(ad::Tape& tape, const WeightNetParams& params, const WeightNetNodes& nodes,
                          ad::NodeId controllable, const ObservationBatch& obs);

}  // namespace stableflow
