#pragma once

#include "stableflow/state.hpp"
#include "stableflow/weight_net.hpp"

#include <cstddef>
#include <optional>
#include <vector>

namespace stableflow {

/// One elementary linear system A (x* - x_c), stored through its raw,
/// unconstrained parameters.
struct ElementaryDS {
  /// Square; only the lower triangle is read. Diagonal entries are raw
  /// values that reconstruct_L maps to strictly positive ones.
  Matrix lower_raw;
  /// Free matrix C; only C - C^T enters A.
  Matrix skew_raw;
  /// Test hook: a materialized A that bypasses the reconstruction entirely.
  /// Never produced by training; lets certificate checks see a bad matrix.
  std::optional<Matrix> override_A;
};

struct PolicyParams {
  std::vector<ElementaryDS> systems;
  WeightNetParams weight_net;
  Vector attractor;
  double diag_floor = 1e-6;

  std::size_t dim() const { return static_cast<std::size_t>(attractor.size()); }
  std::size_t system_count() const { return systems.size(); }
};

/// Throws InvalidParameterError if the parameter set breaks an invariant.
void validate_params(const PolicyParams& params);

/// Copy of `raw` restricted to its lower triangle, diagonal mapped to softplus(.) + eps.
Matrix reconstruct_L(const Matrix& raw, double eps);

/// A = L L^T + C - C^T, so (A + A^T) / 2 = L L^T.
Matrix reconstruct_A(const ElementaryDS& sys, double eps);

/// Raw diagonal value whose reconstruction is exactly `target` (inverse of softplus(.) + eps).
double raw_diagonal_for(double target, double eps);

/// N = net.output_dim systems starting at A_i = I (L = I, C = 0) and a
/// freshly initialized weight network.
PolicyParams init_policy(const WeightNetSpec& net, const Vector& attractor, double diag_floor, Rng& rng);

/// Immutable evaluator: materializes every A_i once for repeated queries.
class Policy {
 public:
  explicit Policy(PolicyParams params);

  const PolicyParams& params() const { return params_; }
  const std::vector<Matrix>& matrices() const { return matrices_; }
  std::size_t dim() const { return params_.dim(); }

  /// Observation part of the weight-net input; reuse it while the payload is unchanged.
  Vector features(const Observation& obs) const;

  Vector weights(const Vector& controllable, const Vector& features) const;
  /// x_c' = sum_i w_i A_i (x* - x_c).
  Vector velocity(const Vector& controllable, const Vector& features) const;
  Vector velocity(const StateVector& state) const;
  /// dV/dt = -2 e^T (sum_i w_i A_i) e with e = x* - x_c.
  double lyapunov_rate(const Vector& controllable, const Vector& features) const;
  /// sum_i w_i A_i at the given state.
  Matrix mixture(const Vector& controllable, const Vector& features) const;

 private:
  void check_dim(const Vector& controllable) const;

  PolicyParams params_;
  std::vector<Matrix> matrices_;
};

Vector policy_eval(const PolicyParams& params, const StateVector& state);

/// V = ||x* - x_c||^2.
double lyapunov_value(const PolicyParams& params, const Vector& controllable);
double lyapunov_value(const Vector& attractor, const Vector& controllable);

double lyapunov_rate(const PolicyParams& params, const StateVector& state);

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
/// Converged when the off-diagonal Frobenius norm is <= tolerance * ||S||_F;
/// throws NumericalFailure (index = `tag`) after `max_sweeps` sweeps.
Vector symmetric_eigenvalues(const Matrix& symmetric, double tolerance = 1e-12, int max_sweeps = 100,
                             std::size_t tag = 0);

struct StabilityCertificate {
  std::vector<double> per_system_min_eig;  ///< min eigenvalue of (A_i + A_i^T) / 2
  WeightHead weight_head = WeightHead::kSoftmax;
  bool verdict = false;
};

/// Checks the stability conditions: every symmetric part strictly positive
/// definite and a positivity-preserving weight head.
StabilityCertificate verify_certificate(const PolicyParams& params);

}  // namespace stableflow
