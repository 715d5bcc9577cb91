#include "stableflow/autodiff.hpp"
#include "stableflow/error.hpp"
#include "stableflow/weight_net.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

namespace stableflow::ad {
namespace {

using stableflow::testing::primitive_cases;
using stableflow::testing::PrimitiveCase;

constexpr double kStep = 1e-5;
constexpr double kTolerance = 1e-4;

Vector random_point(std::uint64_t seed, Eigen::Index n, double scale = 1.0) {
  Rng rng(seed);
  return stableflow::testing::random_vector(rng, static_cast<std::size_t>(n), scale);
}

TEST(Backward, SquareAtThree) {
  Tape tape;
  const NodeId x = tape.leaf(Matrix::Constant(1, 1, 3.0));
  const NodeId loss = tape.mul(x, x);
  EXPECT_DOUBLE_EQ(tape.backward(loss)[x](0, 0), 6.0);
}

TEST(Backward, SoftplusAtZero) {
  Tape tape;
  const NodeId x = tape.leaf(Matrix::Zero(1, 1));
  const NodeId loss = tape.softplus(x);
  EXPECT_DOUBLE_EQ(tape.value(loss)(0, 0), std::numbers::ln2);
  EXPECT_DOUBLE_EQ(tape.backward(loss)[x](0, 0), 0.5);
}

TEST(Backward, NonScalarLossIsAContractError) {
  Tape tape;
  const NodeId x = tape.leaf(Matrix::Ones(2, 1));
  EXPECT_THROW(tape.backward(tape.tanh(x)), ContractError);
}

TEST(Backward, UnreachedLeavesGetZero) {
  Tape tape;
  const NodeId x = tape.leaf(Matrix::Ones(2, 3));
  const NodeId y = tape.leaf(Matrix::Ones(1, 1));
  const Gradients g = tape.backward(tape.mul(y, y));
  EXPECT_EQ(g[x].rows(), 2);
  EXPECT_EQ(g[x].cols(), 3);
  EXPECT_EQ(g[x].cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, FanOutAccumulates) {
  Tape tape;
  const NodeId x = tape.leaf(Matrix::Constant(1, 1, 2.0));
  const NodeId loss = tape.add(tape.mul(x, x), tape.scale(x, 3.0));
  EXPECT_DOUBLE_EQ(tape.backward(loss)[x](0, 0), 7.0);
}

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const auto cases = primitive_cases();
  const PrimitiveCase& c = cases[static_cast<std::size_t>(GetParam())];
  const double err = grad_check(c.graph, random_point(100 + static_cast<std::uint64_t>(GetParam()), c.size), kStep);
  EXPECT_LT(err, kTolerance) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient,
                         ::testing::Range(0, static_cast<int>(primitive_cases().size())),
                         [](const ::testing::TestParamInfo<int>& info) {
                           return std::string(primitive_cases()[static_cast<std::size_t>(info.param)].name);
                         });

TEST(GradCheck, LinearFunctionIsExact) {
  Vector coeff(4);
  coeff << 1.5, -2.0, 0.25, 3.0;
  const double err = grad_check(
      [&coeff](Tape& t, NodeId p) { return t.matmul(t.constant(coeff.transpose()), p); }, Vector::Ones(4), kStep);
  EXPECT_LT(err, 1e-10);
}

TEST(GradCheck, ZeroStepIsRejected) {
  EXPECT_THROW(grad_check([](Tape& t, NodeId p) { return t.sum(p); }, Vector::Ones(2), 0.0), ValidationError);
}

TEST(GradCheck, NonFiniteEvaluationIsANumericalFailure) {
  EXPECT_THROW(grad_check([](Tape& t, NodeId p) { return t.sum(t.exp(t.scale(p, 1e6))); }, Vector::Ones(2), kStep),
               NumericalFailure);
}

TEST(Softmax, EqualLogitsGiveUniformWeights) {
  const Matrix w = kernels::softmax_columns(Matrix::Constant(4, 1, 0.7));
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(w(i, 0), 0.25, 1e-15);
}

TEST(Softmax, LogTwoVersusZero) {
  Matrix z(2, 1);
  z << std::numbers::ln2, 0.0;
  const Matrix w = kernels::softmax_columns(z);
  EXPECT_NEAR(w(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(w(1, 0), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Matrix z(2, 1);
  z << 1000.0, 0.0;
  const Matrix w = kernels::softmax_columns(z);
  EXPECT_TRUE(w.allFinite());
  EXPECT_NEAR(w(0, 0), 1.0, 1e-15);
  EXPECT_GE(w(1, 0), 0.0);
  EXPECT_LT(w(1, 0), 1e-300);
}

TEST(Softmax, ShiftInvariantPositiveAndNormalized) {
  Rng rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    Matrix z(5, 1);
    for (auto& x : z.reshaped()) x = 10.0 * rng.normal();
    const Matrix w = kernels::softmax_columns(z);
    const Matrix shifted = kernels::softmax_columns(z.array() + rng.uniform(-50.0, 50.0));
    EXPECT_GT(w.minCoeff(), 0.0);
    EXPECT_NEAR(w.sum(), 1.0, 1e-12);
    EXPECT_LT((w - shifted).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Conv2d, MatchesDirectConvolution) {
  Rng rng(21);
  const ConvShape s{2, 7, 6, 3, 3};
  Matrix input(static_cast<Eigen::Index>(s.in_size()), 2);
  for (auto& x : input.reshaped()) x = rng.normal();
  Matrix kernel(3, 2 * 9);
  for (auto& x : kernel.reshaped()) x = rng.normal();
  Vector bias = stableflow::testing::random_vector(rng, 3);
  const Matrix out = kernels::conv2d(input, kernel, bias, s);
  for (Eigen::Index b = 0; b < 2; ++b) {
    for (std::size_t co = 0; co < 3; ++co) {
      for (std::size_t r = 0; r < s.out_height(); ++r) {
        for (std::size_t c = 0; c < s.out_width(); ++c) {
          double acc = bias(static_cast<Eigen::Index>(co));
          for (std::size_t ci = 0; ci < 2; ++ci) {
            for (std::size_t kr = 0; kr < 3; ++kr) {
              for (std::size_t kc = 0; kc < 3; ++kc) {
                acc += kernel(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(ci * 9 + kr * 3 + kc)) *
                       input(static_cast<Eigen::Index>(ci * 42 + (r + kr) * 6 + c + kc), b);
              }
            }
          }
          const auto o = static_cast<Eigen::Index>((co * s.out_height() + r) * s.out_width() + c);
          EXPECT_NEAR(out(o, b), acc, 1e-12);
        }
      }
    }
  }
}

TEST(WeightNet, TapeForwardMatchesPlainForwardForVectors) {
  Rng rng(12);
  WeightNetSpec spec = stableflow::testing::vector_net(2, 3, 4);
  WeightNetParams p = init_weight_net(spec, rng);
  p.input_offset = stableflow::testing::random_vector(rng, 5);
  p.input_scale = Vector::Constant(5, 0.5);
  Matrix xc(2, 6);
  for (auto& x : xc.reshaped()) x = rng.normal();
  std::vector<Observation> obs;
  for (int i = 0; i < 6; ++i) obs.emplace_back(stableflow::testing::random_vector(rng, 3));
  std::vector<const Observation*> ptrs;
  for (const auto& o : obs) ptrs.push_back(&o);

  Tape tape;
  const NodeId w = weight_forward(tape, p, register_weight_net(tape, p), tape.constant(xc), batch_observations(spec, ptrs));
  for (Eigen::Index j = 0; j < 6; ++j) {
    const Vector plain = weight_forward(p, StateVector(xc.col(j), obs[static_cast<std::size_t>(j)]));
    EXPECT_LT((tape.value(w).col(j) - plain).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(WeightNet, TapeForwardMatchesPlainForwardForImages) {
  Rng rng(13);
  WeightNetSpec spec;
  spec.input_kind = ObservationKind::kImage;
  spec.dim_controllable = 2;
  spec.image_height = 16;
  spec.image_width = 16;
  spec.conv = {{4, 3, 2}, {6, 3, 2}};
  spec.output_dim = 3;
  const WeightNetParams p = init_weight_net(spec, rng);
  std::vector<Observation> images;
  for (int i = 0; i < 2; ++i) {
    std::vector<double> px(256);
    for (auto& x : px) x = rng.uniform();
    images.emplace_back(std::make_shared<const Image>(16, 16, px));
  }
  const std::vector<const Observation*> ptrs{&images[0], &images[1], &images[0]};
  Matrix xc(2, 3);
  for (auto& x : xc.reshaped()) x = rng.normal();
  const ObservationBatch batch = batch_observations(spec, ptrs);
  EXPECT_EQ(batch.unique_images.cols(), 2);

  Tape tape;
  const NodeId w = weight_forward(tape, p, register_weight_net(tape, p), tape.constant(xc), batch);
  for (Eigen::Index j = 0; j < 3; ++j) {
    const Vector plain = weight_forward(p, StateVector(xc.col(j), *ptrs[static_cast<std::size_t>(j)]));
    EXPECT_LT((tape.value(w).col(j) - plain).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(WeightNet, WrongImageSizeIsAnObservationShapeError) {
  Rng rng(14);
  WeightNetSpec spec;
  spec.input_kind = ObservationKind::kImage;
  spec.image_height = 32;
  spec.image_width = 32;
  spec.conv = WeightNetSpec::default_conv();
  spec.output_dim = 2;
  const WeightNetParams p = init_weight_net(spec, rng);
  EXPECT_EQ(spec.feature_size(), 16u * 5u * 5u);
  auto small = std::make_shared<const Image>(8, 8, std::vector<double>(64, 0.0));
  EXPECT_THROW(weight_forward(p, StateVector(Vector::Zero(2), small)), ObservationShapeError);
  EXPECT_THROW(weight_forward(p, StateVector(Vector::Zero(2), Vector::Zero(1))), ObservationShapeError);
}

TEST(WeightNet, ForwardIsDeterministic) {
  Rng a(5);
  Rng b(5);
  const auto spec = stableflow::testing::vector_net(3, 1, 5);
  const WeightNetParams pa = init_weight_net(spec, a);
  const WeightNetParams pb = init_weight_net(spec, b);
  const StateVector s(Vector::LinSpaced(3, -1.0, 2.0), Vector::Constant(1, 0.5));
  const Vector wa = weight_forward(pa, s);
  const Vector wb = weight_forward(pb, s);
  for (Eigen::Index i = 0; i < wa.size(); ++i) EXPECT_EQ(wa(i), wb(i));
}

}  // namespace
}  // namespace stableflow::ad
