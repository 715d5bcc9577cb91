#include "stableflow/error.hpp"
#include "stableflow/evalsuite.hpp"
#include "stableflow/fixtures.hpp"
#include "stableflow/trainer.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <cmath>

namespace stableflow {
namespace {

using fixtures::Shape;

// Demo recorded from the policy itself at the eval integrator and dt.
Trajectory self_demo(const PolicyParams& p, const Vector& x0, const Observation& obs, double dt, std::size_t samples) {
  RolloutOptions o;
  o.dt = dt;
  o.horizon = dt * static_cast<double>(samples - 1);
  const RolloutRecord rec = integrate(Policy(p), x0, ObservationProvider(obs), {}, o);
  Trajectory t;
  t.dt = dt;
  for (const auto& x : rec.states) t.states.emplace_back(x, obs);
  return t;
}

TEST(Fixtures, ShapedDemosRunFromStartToGoal) {
  const fixtures::ShapedDemoOptions opt;
  for (Shape s : fixtures::all_shapes()) {
    const Trajectory t = fixtures::shaped_demo(s, opt);
    ASSERT_EQ(t.size(), opt.samples);
    EXPECT_EQ(t.dt, opt.dt);
    EXPECT_NEAR((t.states.front().controllable - opt.start).norm(), 0.0, 1e-15) << to_string(s);
    EXPECT_EQ(t.states.back().controllable, opt.goal) << to_string(s);
    EXPECT_EQ(t.label, to_string(s));
  }
}

TEST(Fixtures, DistanceToTheGoalStrictlyDecreases) {
  const fixtures::ShapedDemoOptions opt;
  for (Shape s : fixtures::all_shapes()) {
    const Trajectory t = fixtures::shaped_demo(s, opt);
    for (std::size_t k = 1; k < t.size(); ++k) {
      EXPECT_LT((t.states[k].controllable - opt.goal).norm(), (t.states[k - 1].controllable - opt.goal).norm())
          << to_string(s) << " step " << k;
    }
  }
}

TEST(Fixtures, ShapesAreDistinctMidway) {
  const Vector sine = fixtures::shape_point(Shape::kSine, 0.25);
  const Vector line = fixtures::shape_point(Shape::kLine, 0.25);
  const Vector curve = fixtures::shape_point(Shape::kCurve, 0.25);
  EXPECT_GT((sine - line).norm(), 0.1);
  EXPECT_GT((curve - line).norm(), 0.1);
  EXPECT_GT((curve - sine).norm(), 0.1);
  EXPECT_NEAR((line - Vector::Constant(2, 0.5)).norm(), 0.75, 1e-12);
}

TEST(Fixtures, LinearDemoSolvesTheLinearField) {
  const fixtures::LinearDemoOptions opt;
  const Trajectory t = fixtures::linear_demo(opt);
  EXPECT_NEAR((opt.start - opt.goal).norm(), 1.0, 1e-12);
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double time = opt.dt * static_cast<double>(k);
    const Vector expected = opt.goal + (opt.start - opt.goal) * std::exp(-opt.rate * time);
    EXPECT_NEAR((t.states[k].controllable - expected).norm(), 0.0, 1e-14);
  }
}

TEST(Fixtures, ObservationsAndSigns) {
  EXPECT_EQ(fixtures::one_hot(Shape::kSine), Vector::Unit(3, 0));
  EXPECT_EQ(fixtures::one_hot(Shape::kLine), Vector::Unit(3, 1));
  EXPECT_EQ(fixtures::one_hot(Shape::kCurve), Vector::Unit(3, 2));
  std::vector<ImagePtr> signs;
  for (Shape s : fixtures::all_shapes()) {
    signs.push_back(fixtures::sign_image(s));
    ASSERT_EQ(signs.back()->height, 32u);
    ASSERT_EQ(signs.back()->width, 32u);
    double ink = 0.0;
    for (double v : signs.back()->pixels) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      ink += v;
    }
    EXPECT_GT(ink, 5.0) << to_string(s);
  }
  EXPECT_NE(signs[0]->pixels, signs[1]->pixels);
  EXPECT_NE(signs[0]->pixels, signs[2]->pixels);
  EXPECT_NE(signs[1]->pixels, signs[2]->pixels);
  EXPECT_THROW(fixtures::shape_from_string("square"), ValidationError);
  EXPECT_EQ(fixtures::shape_from_string("curve"), Shape::kCurve);
}

TEST(Fixtures, MultitaskSetsShareTheAttractor) {
  const auto onehot = fixtures::multitask_onehot();
  const auto images = fixtures::multitask_images({}, 16);
  ASSERT_EQ(onehot.size(), 3u);
  ASSERT_EQ(images.size(), 3u);
  EXPECT_EQ(compute_attractor(onehot), Vector::Constant(2, 0.5));
  EXPECT_EQ(common_layout(images).image_height, 16u);
  EXPECT_EQ(std::get<Vector>(onehot[2].states[7].non_controllable), Vector::Unit(3, 2));
}

TEST(ReproductionError, SelfRecordedDemoReproducesExactly) {
  Rng rng(21);
  for (int draw = 0; draw < 10; ++draw) {
    const PolicyParams p = testing::random_policy(rng, 2, 3, 3);
    const Trajectory demo =
        self_demo(p, p.attractor + testing::random_offset(rng, 2, 1.0), Vector::Unit(3, draw % 3), 0.01, 150);
    const ReproductionError err = reproduction_error(Policy(p), demo);
    EXPECT_LE(err.rmse, 1e-12);
    EXPECT_NEAR(err.bbox_diagonal, bounding_box_diagonal(demo), 0.0);
    EXPECT_EQ(err.convergence.lyapunov_violations, 0u);
  }
}

TEST(ReproductionError, RmseOracleForAShiftedDemo) {
  // the demo is the policy's own rollout shifted by a constant except at k = 0,
  // so the rmse is |shift| sqrt((M - 1) / M)
  Rng rng(22);
  const PolicyParams p = testing::random_policy(rng, 2, 2);
  Trajectory demo = self_demo(p, p.attractor + Vector::Ones(2), Vector{}, 0.02, 50);
  const Vector shift = (Vector(2) << 0.03, -0.04).finished();
  for (std::size_t k = 1; k < demo.size(); ++k) demo.states[k].controllable += shift;
  const ReproductionError err = reproduction_error(Policy(p), demo);
  EXPECT_NEAR(err.rmse, 0.05 * std::sqrt(49.0 / 50.0), 1e-12);
  EXPECT_NEAR(err.normalized_rmse, err.rmse / bounding_box_diagonal(demo), 1e-15);
}

TEST(ReproductionError, MismatchedDimensionIsRejected) {
  Rng rng(23);
  const PolicyParams p = testing::random_policy(rng, 3, 2);
  EXPECT_THROW(reproduction_error(Policy(p), fixtures::linear_demo()), ValidationError);
  EvalOptions bad;
  bad.horizon_factor = 0.5;
  const PolicyParams q = testing::random_policy(rng, 2, 2);
  EXPECT_THROW(reproduction_error(Policy(q), fixtures::linear_demo(), bad), ValidationError);
}

TEST(DemoObservations, SwitchesWhereThePayloadChanges) {
  Trajectory t = fixtures::with_observation(fixtures::linear_demo(), Vector::Unit(3, 0));
  for (std::size_t k = 120; k < t.size(); ++k) t.states[k].non_controllable = Vector::Unit(3, 1);
  const ObservationProvider p = demo_observations(t);
  ASSERT_EQ(p.switches().size(), 1u);
  EXPECT_NEAR(p.switches()[0].time, 1.2, 1e-12);
  EXPECT_EQ(std::get<Vector>(p.initial()), Vector::Unit(3, 0));
}

class TrainedLinear : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    TrainConfig config;
    config.epochs = 500;
    config.n_systems = 3;
    demo_ = new Trajectory(fixtures::linear_demo());
    demo_->label.clear();
    ckpt_ = new Checkpoint(train(build_dataset({*demo_}), config));
    TrainConfig none = config;
    none.epochs = 0;
    untrained_ = new Checkpoint(train(build_dataset({*demo_}), none));
  }
  static void TearDownTestSuite() {
    delete demo_;
    delete ckpt_;
    delete untrained_;
  }
  static Trajectory* demo_;
  static Checkpoint* ckpt_;
  static Checkpoint* untrained_;
};

Trajectory* TrainedLinear::demo_ = nullptr;
Checkpoint* TrainedLinear::ckpt_ = nullptr;
Checkpoint* TrainedLinear::untrained_ = nullptr;

TEST_F(TrainedLinear, TrainingImprovesReproduction) {
  const ReproductionError trained = reproduction_error(Policy(ckpt_->params), *demo_);
  const ReproductionError before = reproduction_error(Policy(untrained_->params), *demo_);
  EXPECT_LT(trained.normalized_rmse, 0.05);
  EXPECT_GT(before.rmse, trained.rmse);
  EXPECT_TRUE(trained.converged);
  EXPECT_EQ(trained.convergence.lyapunov_violations, 0u);
}

TEST_F(TrainedLinear, SingleTaskReportMatchesReproductionError) {
  const Policy policy(ckpt_->params);
  const EvalReport report = evaluate(policy, {*demo_});
  const ReproductionError direct = reproduction_error(policy, *demo_);
  ASSERT_EQ(report.tasks.size(), 1u);
  EXPECT_EQ(report.tasks[0].label, "task0");
  EXPECT_EQ(report.tasks[0].error.rmse, direct.rmse);
  EXPECT_EQ(report.worst_normalized_rmse, direct.normalized_rmse);
  EXPECT_EQ(report.all_converged, direct.converged);
  EXPECT_TRUE(report.certificate.verdict);
}

TEST_F(TrainedLinear, ReportFormats) {
  const EvalReport report = evaluate(Policy(ckpt_->params), {*demo_});
  const auto doc = nlohmann::json::parse(eval_report_json(report));
  EXPECT_EQ(doc["tasks"][0]["label"], "task0");
  EXPECT_EQ(doc["certificate"]["verdict"], true);
  EXPECT_EQ(doc["certificate"]["per_system_min_eig"].size(), 3u);
  EXPECT_EQ(doc["all_converged"], report.all_converged);
  EXPECT_DOUBLE_EQ(doc["worst_normalized_rmse"].get<double>(), report.worst_normalized_rmse);
  const std::string table = eval_report_table(report);
  EXPECT_EQ(table.rfind("task", 0), 0u);
  EXPECT_NE(table.find("\ntask0 "), std::string::npos);
  EXPECT_NE(table.find("certificate holds"), std::string::npos);
}

TEST(MultitaskEval, EndpointMismatchIsAFixtureError) {
  Rng rng(24);
  const PolicyParams p = testing::random_policy(rng, 2, 2, 3);
  auto demos = fixtures::multitask_onehot();
  EXPECT_EQ(multitask_eval(Policy(p), demos).size(), 3u);
  demos[1].states.back().controllable(0) += 1e-3;
  try {
    multitask_eval(Policy(p), demos);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("fixture error"), std::string::npos);
  }
  EXPECT_THROW(multitask_eval(Policy(p), {}), ValidationError);
}

TEST(MultitaskEval, LabelsAndSeparation) {
  Rng rng(25);
  const PolicyParams p = testing::random_policy(rng, 2, 3, 3);
  const auto demos = fixtures::multitask_onehot();
  const auto reports = multitask_eval(Policy(p), demos);
  EXPECT_EQ(reports[0].label, "sine");
  EXPECT_EQ(reports[1].label, "line");
  const auto sep = task_separation(Policy(p), demos);
  ASSERT_EQ(sep.size(), 3u);
  for (std::size_t a = 0; a < 3; ++a) {
    EXPECT_EQ(sep[a][a], 0.0);
    for (std::size_t b = 0; b < 3; ++b) {
      EXPECT_EQ(sep[a][b], sep[b][a]);
      EXPECT_LE(sep[a][b], 1.0);
    }
  }
  EXPECT_GT(sep[0][1], 0.0);
}

}  // namespace
}  // namespace stableflow
