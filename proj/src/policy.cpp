#include "stableflow/policy.hpp"

#include "stableflow/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace stableflow {

void validate_params(const PolicyParams& params) {
  if (params.systems.empty()) throw InvalidParameterError("policy needs at least one elementary system");
  if (params.attractor.size() < 1) throw InvalidParameterError("attractor must have d_c >= 1 entries");
  if (!params.attractor.allFinite()) throw InvalidParameterError("attractor is not finite");
  if (!(params.diag_floor > 0.0) || !std::isfinite(params.diag_floor)) {
    throw InvalidParameterError("diag_floor must be positive");
  }
  const auto d = params.attractor.size();
  for (std::size_t i = 0; i < params.systems.size(); ++i) {
    const auto& sys = params.systems[i];
    const std::string which = "system " + std::to_string(i);
    if (sys.override_A) {
      if (sys.override_A->rows() != d || sys.override_A->cols() != d) {
        throw InvalidParameterError(which + ": override matrix has the wrong shape");
      }
      continue;
    }
    if (sys.lower_raw.rows() != d || sys.lower_raw.cols() != d || sys.skew_raw.rows() != d ||
        sys.skew_raw.cols() != d) {
      throw InvalidParameterError(which + ": parameter blocks must be " + std::to_string(d) + "x" +
                                  std::to_string(d));
    }
    if (!sys.lower_raw.allFinite() || !sys.skew_raw.allFinite()) {
      throw InvalidParameterError(which + ": non-finite parameters");
    }
    if (Matrix(sys.lower_raw.triangularView<Eigen::StrictlyUpper>()).cwiseAbs().maxCoeff() != 0.0) {
      throw InvalidParameterError(which + ": L_raw must be zero above the diagonal");
    }
  }
  params.weight_net.validate();
  if (params.weight_net.spec.output_dim != params.systems.size()) {
    throw InvalidParameterError("weight net output size does not match the number of systems");
  }
  if (params.weight_net.spec.dim_controllable != static_cast<std::size_t>(d)) {
    throw InvalidParameterError("weight net d_c does not match the attractor");
  }
}

Matrix reconstruct_L(const Matrix& raw, double eps) { return ad::kernels::lower_softplus_diag(raw, eps); }

Matrix reconstruct_A(const ElementaryDS& sys, double eps) {
  if (sys.override_A) return *sys.override_A;
  if (sys.lower_raw.rows() != sys.skew_raw.rows() || sys.lower_raw.cols() != sys.skew_raw.cols()) {
    throw InvalidParameterError("L_raw and C must have the same shape");
  }
  if (!sys.skew_raw.allFinite()) throw InvalidParameterError("C has non-finite entries");
  const Matrix lower = reconstruct_L(sys.lower_raw, eps);
  return lower * lower.transpose() + sys.skew_raw - sys.skew_raw.transpose();
}

double raw_diagonal_for(double target, double eps) {
  const double y = target - eps;
  if (!(y > 0.0)) throw InvalidParameterError("diagonal target must exceed the floor");
  // softplus^-1(y) = log(expm1(y)), rewritten to stay finite for large y.
  return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

PolicyParams init_policy(const WeightNetSpec& net, const Vector& attractor, double diag_floor, Rng& rng) {
  PolicyParams params;
  params.attractor = attractor;
  params.diag_floor = diag_floor;
  const auto d = attractor.size();
  Matrix lower = Matrix::Zero(d, d);
  lower.diagonal().setConstant(raw_diagonal_for(1.0, diag_floor));
  params.systems.assign(net.output_dim, ElementaryDS{lower, Matrix::Zero(d, d), std::nullopt});
  params.weight_net = init_weight_net(net, rng);
  validate_params(params);
  return params;
}

Policy::Policy(PolicyParams params) : params_(std::move(params)) {
  validate_params(params_);
  matrices_.reserve(params_.systems.size());
  for (const auto& sys : params_.systems) matrices_.push_back(reconstruct_A(sys, params_.diag_floor));
}

void Policy::check_dim(const Vector& controllable) const {
  if (controllable.size() != params_.attractor.size()) {
    throw ObservationShapeError("controllable state has length " + std::to_string(controllable.size()) +
                                ", policy expects " + std::to_string(params_.attractor.size()));
  }
}

Vector Policy::features(const Observation& obs) const { return observation_features(params_.weight_net, obs); }

Vector Policy::weights(const Vector& controllable, const Vector& features) const {
  check_dim(controllable);
  return weight_forward(params_.weight_net, controllable, features);
}

Vector Policy::velocity(const Vector& controllable, const Vector& features) const {
  const Vector w = weights(controllable, features);
  const Vector error = params_.attractor - controllable;
  Vector out = Vector::Zero(error.size());
  for (std::size_t i = 0; i < matrices_.size(); ++i) out += w(static_cast<Eigen::Index>(i)) * (matrices_[i] * error);
  return out;
}

Vector Policy::velocity(const StateVector& state) const {
  return velocity(state.controllable, features(state.non_controllable));
}

Matrix Policy::mixture(const Vector& controllable, const Vector& features) const {
  const Vector w = weights(controllable, features);
  Matrix m = Matrix::Zero(controllable.size(), controllable.size());
  for (std::size_t i = 0; i < matrices_.size(); ++i) m += w(static_cast<Eigen::Index>(i)) * matrices_[i];
  return m;
}

double Policy::lyapunov_rate(const Vector& controllable, const Vector& features) const {
  const Vector error = params_.attractor - controllable;
  return -2.0 * error.dot(mixture(controllable, features) * error);
}

Vector policy_eval(const PolicyParams& params, const StateVector& state) { return Policy(params).velocity(state); }

double lyapunov_value(const Vector& attractor, const Vector& controllable) {
  if (attractor.size() != controllable.size()) throw ValidationError("lyapunov_value: dimension mismatch");
  return (attractor - controllable).squaredNorm();
}

double lyapunov_value(const PolicyParams& params, const Vector& controllable) {
  return lyapunov_value(params.attractor, controllable);
}

double lyapunov_rate(const PolicyParams& params, const StateVector& state) {
  const Policy policy(params);
  return policy.lyapunov_rate(state.controllable, policy.features(state.non_controllable));
}

Vector symmetric_eigenvalues(const Matrix& symmetric, double tolerance, int max_sweeps, std::size_t tag) {
  if (symmetric.rows() != symmetric.cols()) throw InvalidParameterError("eigen-solve needs a square matrix");
  if (!symmetric.allFinite()) throw NumericalFailure("eigen-solve: non-finite matrix", tag);
  Matrix a = 0.5 * (symmetric + symmetric.transpose());
  const Eigen::Index n = a.rows();
  const double scale = a.norm();
  auto off_norm = [&a, n]() {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i != j) s += a(i, j) * a(i, j);
      }
    }
    return std::sqrt(s);
  };
  int sweep = 0;
  while (off_norm() > tolerance * scale) {
    if (sweep++ >= max_sweeps) {
      throw NumericalFailure("eigen-solve did not converge in " + std::to_string(max_sweeps) + " sweeps", tag);
    }
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        // Rotation angle that zeroes a(p, q) (Golub & Van Loan, symmetric Schur).
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  Vector eig = a.diagonal();
  std::sort(eig.data(), eig.data() + eig.size());
  return eig;
}

StabilityCertificate verify_certificate(const PolicyParams& params) {
  validate_params(params);
  StabilityCertificate cert;
  cert.weight_head = params.weight_net.spec.head;
  bool all_positive = true;
  for (std::size_t i = 0; i < params.systems.size(); ++i) {
    const Matrix a = reconstruct_A(params.systems[i], params.diag_floor);
    const Vector eig = symmetric_eigenvalues(0.5 * (a + a.transpose()), 1e-12, 100, i);
    cert.per_system_min_eig.push_back(eig(0));
    all_positive = all_positive && eig(0) > 0.0;
  }
  cert.verdict = all_positive && cert.weight_head == WeightHead::kSoftmax;
  return cert;
}

}  // namespace stableflow
