#pragma once

#include "stableflow/autodiff.hpp"
#include "stableflow/dataset.hpp"
#include "stableflow/policy.hpp"
#include "stableflow/rng.hpp"

#include <cstddef>
#include <vector>

namespace stableflow::testing {

/// Vector-observation weight net with the default MLP.
WeightNetSpec vector_net(std::size_t dc, std::size_t dnc, std::size_t n_systems);

/// Random raw parameters: strict-lower L and C ~ N(0, 1), raw diagonal
/// ~ U(-2, 2), weight-net entries inflated by `net_gain` so the mixture
/// varies visibly over the state space.
PolicyParams random_policy(Rng& rng, std::size_t dc, std::size_t n_systems, std::size_t dnc = 0,
                           double net_gain = 3.0);

/// Same draw with a custom hidden-layer stack (small nets keep long rollouts cheap).
PolicyParams random_policy(Rng& rng, std::size_t dc, std::size_t n_systems, std::size_t dnc, double net_gain,
                           const std::vector<DenseLayerSpec>& hidden);

/// min_i lambda_min((A_i + A_i^T) / 2), computed with Eigen as an independent
/// oracle. Any softmax mixture contracts ||e|| at least this fast.
double guaranteed_rate(const PolicyParams& params);

Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0);

/// Uniform direction scaled to a norm drawn from U(0, max_norm].
Vector random_offset(Rng& rng, std::size_t n, double max_norm);

/// One autodiff primitive wrapped in a scalar graph over a flat point of `size` entries.
struct PrimitiveCase {
  const char* name;
  Eigen::Index size;
  ad::ScalarGraph graph;
};

/// A case for every tape operation.
std::vector<PrimitiveCase> primitive_cases();

/// Relative error of the tape gradient of the imitation loss against central
/// differences of the plain (tape-free) loss, over every trainable parameter.
double loss_gradient_error(const PolicyParams& params, const std::vector<Sample>& samples, double step);

}  // namespace stableflow::testing
