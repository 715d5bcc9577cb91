#include "support.hpp"

#include "stableflow/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace stableflow::testing {

WeightNetSpec vector_net(std::size_t dc, std::size_t dnc, std::size_t n_systems) {
  WeightNetSpec spec;
  spec.input_kind = ObservationKind::kVector;
  spec.dim_controllable = dc;
  spec.dim_observation = dnc;
  spec.output_dim = n_systems;
  return spec;
}

Vector random_vector(Rng& rng, std::size_t n, double scale) {
  Vector v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

Vector random_offset(Rng& rng, std::size_t n, double max_norm) {
  Vector v = random_vector(rng, n);
  while (v.norm() == 0.0) v = random_vector(rng, n);
  double r = rng.uniform() * max_norm;
  while (r == 0.0) r = rng.uniform() * max_norm;
  return v.normalized() * r;
}

PolicyParams random_policy(Rng& rng, std::size_t dc, std::size_t n_systems, std::size_t dnc, double net_gain) {
  return random_policy(rng, dc, n_systems, dnc, net_gain, WeightNetSpec{}.hidden);
}

PolicyParams random_policy(Rng& rng, std::size_t dc, std::size_t n_systems, std::size_t dnc, double net_gain,
                           const std::vector<DenseLayerSpec>& hidden) {
  WeightNetSpec spec = vector_net(dc, dnc, n_systems);
  spec.hidden = hidden;
  PolicyParams p = init_policy(spec, random_vector(rng, dc), 1e-6, rng);
  const auto d = static_cast<Eigen::Index>(dc);
  for (auto& sys : p.systems) {
    sys.lower_raw = Matrix::Zero(d, d);
    for (Eigen::Index r = 0; r < d; ++r) {
      for (Eigen::Index c = 0; c < r; ++c) sys.lower_raw(r, c) = rng.normal();
      sys.lower_raw(r, r) = rng.uniform(-2.0, 2.0);
    }
    sys.skew_raw = Matrix(d, d);
    for (auto& x : sys.skew_raw.reshaped()) x = rng.normal();
  }
  for (auto& w : p.weight_net.weights) w *= net_gain;
  for (auto& b : p.weight_net.biases) b = random_vector(rng, static_cast<std::size_t>(b.size()));
  return p;
}

double guaranteed_rate(const PolicyParams& params) {
  double rate = std::numeric_limits<double>::infinity();
  for (const auto& sys : params.systems) {
    const Matrix a = sys.override_A ? *sys.override_A : reconstruct_A(sys, params.diag_floor);
    const Matrix sym = 0.5 * (a + a.transpose());
    rate = std::min(rate, Eigen::SelfAdjointEigenSolver<Matrix>(sym).eigenvalues().minCoeff());
  }
  return rate;
}

namespace {

using ad::ConvShape;
using ad::NodeId;
using ad::PoolShape;
using ad::Tape;

// Reshapes the flat evaluation point into a rows x cols leaf-derived node.
NodeId as_matrix(Tape& tape, NodeId point, Eigen::Index rows, Eigen::Index cols) {
  // point is (rows*cols) x 1, column-major; rebuilt through selector matmuls.
  NodeId result{};
  bool first = true;
  for (Eigen::Index c = 0; c < cols; ++c) {
    Matrix pick = Matrix::Zero(rows, rows * cols);
    for (Eigen::Index r = 0; r < rows; ++r) pick(r, c * rows + r) = 1.0;
    Matrix place = Matrix::Zero(1, cols);
    place(0, c) = 1.0;
    const NodeId column = tape.matmul(tape.constant(pick), point);
    const NodeId placed = tape.matmul(column, tape.constant(place));
    result = first ? placed : tape.add(result, placed);
    first = false;
  }
  return result;
}

// Entries [offset, offset + length) of a column node.
NodeId slice(Tape& tape, NodeId point, Eigen::Index offset, Eigen::Index length) {
  Matrix pick = Matrix::Zero(length, tape.value(point).rows());
  for (Eigen::Index i = 0; i < length; ++i) pick(i, offset + i) = 1.0;
  return tape.matmul(tape.constant(pick), point);
}

// Contracts a node with fixed random weights so every entry of its adjoint is exercised.
NodeId project(Tape& tape, NodeId x, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix& v = tape.value(x);
  Matrix weights(v.rows(), v.cols());
  for (auto& w : weights.reshaped()) w = rng.normal();
  return tape.sum(tape.mul(x, tape.constant(weights)));
}

}  // namespace

std::vector<PrimitiveCase> primitive_cases() {
  return {
      {"add", 6, [](Tape& t, NodeId p) { NodeId m = as_matrix(t, p, 2, 3); return project(t, t.add(m, t.mul(m, m)), 1); }},
      {"sub", 6, [](Tape& t, NodeId p) { NodeId m = as_matrix(t, p, 3, 2); return project(t, t.sub(t.tanh(m), m), 2); }},
      {"mul", 6, [](Tape& t, NodeId p) { NodeId m = as_matrix(t, p, 2, 3); return project(t, t.mul(m, t.exp(m)), 3); }},
      {"scale", 4, [](Tape& t, NodeId p) { return project(t, t.scale(t.mul(p, p), -2.5), 4); }},
      {"matmul", 12, [](Tape& t, NodeId p) {
         NodeId a = as_matrix(t, p, 3, 4);
         return project(t, t.matmul(a, t.transpose(a)), 5);
       }},
      {"transpose", 6, [](Tape& t, NodeId p) { return project(t, t.transpose(as_matrix(t, p, 2, 3)), 6); }},
      {"add_bias", 6, [](Tape& t, NodeId p) {
         NodeId m = as_matrix(t, p, 2, 3);
         NodeId bias = t.matmul(m, t.constant(Matrix::Constant(3, 1, 0.3)));
         return project(t, t.add_bias(t.mul(m, m), bias), 7);
       }},
      {"mul_rows", 6, [](Tape& t, NodeId p) {
         NodeId m = as_matrix(t, p, 2, 3);
         return project(t, t.mul_rows(m, t.row(t.tanh(m), 1)), 8);
       }},
      {"row", 6, [](Tape& t, NodeId p) { return project(t, t.row(t.exp(as_matrix(t, p, 3, 2)), 2), 9); }},
      {"concat_rows", 6, [](Tape& t, NodeId p) {
         NodeId m = as_matrix(t, p, 2, 3);
         return project(t, t.concat_rows(t.tanh(m), t.mul(m, m)), 10);
       }},
      {"gather_cols", 6, [](Tape& t, NodeId p) {
         return project(t, t.gather_cols(t.exp(as_matrix(t, p, 2, 3)), {2, 0, 2, 1}), 11);
       }},
      {"tanh", 5, [](Tape& t, NodeId p) { return project(t, t.tanh(p), 12); }},
      {"relu", 5, [](Tape& t, NodeId p) { return project(t, t.mul(t.relu(p), p), 13); }},
      {"softplus", 5, [](Tape& t, NodeId p) { return project(t, t.softplus(t.scale(p, 4.0)), 14); }},
      {"exp", 5, [](Tape& t, NodeId p) { return project(t, t.exp(p), 15); }},
      {"sum", 5, [](Tape& t, NodeId p) { return t.sum(t.mul(p, t.tanh(p))); }},
      {"softmax", 12, [](Tape& t, NodeId p) { return project(t, t.softmax(as_matrix(t, p, 4, 3)), 16); }},
      {"lower_softplus_diag", 9, [](Tape& t, NodeId p) {
         return project(t, t.lower_softplus_diag(as_matrix(t, p, 3, 3), 1e-6), 17);
       }},
      {"conv2d", 72 + 27 + 3, [](Tape& t, NodeId p) {
         // Two 6x6 single-channel samples, 3 output channels, 3x3 kernel; all trainable.
         const ConvShape s{1, 6, 6, 3, 3};
         const NodeId input = as_matrix(t, slice(t, p, 0, 72), 36, 2);
         const NodeId kernel = as_matrix(t, slice(t, p, 72, 27), 3, 9);
         const NodeId bias = slice(t, p, 99, 3);
         return project(t, t.tanh(t.conv2d(input, kernel, bias, s)), 18);
       }},
      {"maxpool", 2 * 3 * 16, [](Tape& t, NodeId p) {
         const PoolShape s{3, 4, 4, 2};
         return project(t, t.maxpool(t.tanh(as_matrix(t, p, 48, 2)), s), 19);
       }},
  };
}

double loss_gradient_error(const PolicyParams& params, const std::vector<Sample>& samples, double step) {
  std::vector<const Sample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  const LossGradient lg = imitation_loss_gradient(params, ptrs);
  const Vector theta = flatten_trainable(params);
  PolicyParams probe = params;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    Vector t = theta;
    t(k) += step;
    assign_trainable(probe, t);
    const double up = imitation_loss(probe, samples);
    t(k) = theta(k) - step;
    assign_trainable(probe, t);
    const double down = imitation_loss(probe, samples);
    const double fd = (up - down) / (2.0 * step);
    worst = std::max(worst, std::abs(lg.gradient(k) - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace stableflow::testing
