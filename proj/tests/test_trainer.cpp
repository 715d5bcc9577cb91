#include "stableflow/error.hpp"
#include "stableflow/fixtures.hpp"
#include "stableflow/trainer.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

namespace stableflow {
namespace {

using testing::loss_gradient_error;
using testing::random_policy;

std::vector<Sample> five_samples(const Dataset& data) {
  std::vector<Sample> out;
  for (std::size_t k = 0; k < 5; ++k) out.push_back(data.samples[k * data.samples.size() / 5]);
  return out;
}

TrainConfig small_config() {
  TrainConfig c;
  c.n_systems = 3;
  c.epochs = 20;
  c.net = parse_net_descriptor("mlp:8,8");
  c.seed = 11;
  return c;
}

TEST(ImitationLoss, ZeroWhenTargetsMatchOutputs) {
  Rng rng(1);
  const PolicyParams p = random_policy(rng, 2, 3);
  std::vector<Sample> batch;
  for (int k = 0; k < 10; ++k) {
    StateVector s(testing::random_vector(rng, 2), Vector{});
    batch.push_back({s, policy_eval(p, s)});
  }
  EXPECT_EQ(imitation_loss(p, batch), 0.0);
}

TEST(ImitationLoss, UnitErrorOnOneSample) {
  Rng rng(2);
  const PolicyParams p = random_policy(rng, 2, 2);
  // x_c at the attractor commands zero velocity
  const std::vector<Sample> batch{{StateVector(p.attractor, Vector{}), (Vector(2) << 1.0, 0.0).finished()}};
  EXPECT_EQ(imitation_loss(p, batch), 1.0);
}

TEST(ImitationLoss, EmptyBatchIsRejected) {
  Rng rng(3);
  const PolicyParams p = random_policy(rng, 2, 2);
  EXPECT_THROW(imitation_loss(p, {}), ValidationError);
  EXPECT_THROW(imitation_loss_gradient(p, {}), ValidationError);
}

TEST(ImitationLoss, PermutationInvariant) {
  Rng rng(4);
  const PolicyParams p = random_policy(rng, 2, 4, 3);
  const Dataset data = build_dataset(fixtures::multitask_onehot());
  std::vector<Sample> batch(data.samples.begin(), data.samples.begin() + 40);
  const double reference = imitation_loss(p, batch);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> order(batch.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::vector<Sample> shuffled;
    for (auto i : order) shuffled.push_back(batch[i]);
    EXPECT_NEAR(imitation_loss(p, shuffled), reference, 1e-12 * reference);
  }
}

TEST(ImitationLoss, TapeValueMatchesPlainForward) {
  Rng rng(5);
  const PolicyParams p = random_policy(rng, 2, 4, 3);
  const Dataset data = build_dataset(fixtures::multitask_onehot());
  std::vector<const Sample*> ptrs;
  for (const auto& s : data.samples) ptrs.push_back(&s);
  const double plain = imitation_loss(p, data.samples);
  EXPECT_NEAR(imitation_loss_gradient(p, ptrs).loss, plain, 1e-12 * plain);
}

TEST(TrainableVector, FlattenAssignRoundTrip) {
  Rng rng(6);
  PolicyParams p = random_policy(rng, 3, 4, 2);
  const Vector theta = flatten_trainable(p);
  // lower triangles (6 each) and C (9 each) for 4 systems, then the net
  EXPECT_EQ(static_cast<std::size_t>(theta.size()), 4 * (6 + 9) + p.weight_net.parameter_count());
  PolicyParams q = p;
  assign_trainable(q, theta * 2.0);
  EXPECT_EQ(flatten_trainable(q), theta * 2.0);
  EXPECT_EQ(q.systems[0].lower_raw(0, 2), 0.0);
  EXPECT_THROW(assign_trainable(q, Vector::Zero(3)), InvalidParameterError);
}

TEST(GradientFidelity, VectorObservationLoss) {
  Rng rng(7);
  const PolicyParams p = random_policy(rng, 2, 3, 3, 1.0);
  const Dataset data = build_dataset(fixtures::multitask_onehot());
  EXPECT_LT(loss_gradient_error(p, five_samples(data), 1e-6), 1e-4);
}

TEST(GradientFidelity, AtInitializationAndAfterTraining) {
  const Dataset data = build_dataset({fixtures::linear_demo()});
  TrainConfig config = small_config();
  config.epochs = 0;
  const Checkpoint init = train(data, config);
  EXPECT_LT(loss_gradient_error(init.params, five_samples(data), 1e-6), 1e-4);
  config.epochs = 50;
  const Checkpoint trained = train(data, config);
  EXPECT_LT(loss_gradient_error(trained.params, five_samples(data), 1e-6), 1e-4);
}

TEST(GradientFidelity, ImageObservationLoss) {
  const Dataset data = build_dataset(fixtures::multitask_images({}, 8));
  TrainConfig config = small_config();
  config.epochs = 0;
  const Checkpoint init = train(data, config);
  ASSERT_FALSE(init.params.weight_net.conv_kernels.empty());
  EXPECT_LT(loss_gradient_error(init.params, five_samples(data), 1e-6), 1e-4);
}

TEST(Train, LinearDemoFitsWell) {
  const Dataset data = build_dataset({fixtures::linear_demo()});
  TrainConfig config;
  config.n_systems = 3;
  config.epochs = 500;
  const Checkpoint ckpt = train(data, config);
  EXPECT_LT(ckpt.training.final_loss, 1e-3);
  ASSERT_EQ(ckpt.training.loss_history.size(), 500u);
  EXPECT_LT(ckpt.training.loss_history.back(), ckpt.training.loss_history.front());
  EXPECT_TRUE(verify_certificate(ckpt.params).verdict);
}

TEST(Train, CertificateHoldsAfterEveryEpochAndUpperTriangleStaysZero) {
  const Dataset data = build_dataset(fixtures::multitask_onehot());
  TrainConfig config = small_config();
  config.learning_rate = 5e-2;  // aggressive steps stress the reparameterization
  std::size_t checked = 0;
  train(data, config, [&](const TrainProgress& p) {
    EXPECT_TRUE(verify_certificate(*p.params).verdict) << "epoch " << p.epoch;
    for (const auto& s : p.params->systems) EXPECT_EQ(s.lower_raw(0, 1), 0.0);
    ++checked;
    return true;
  });
  EXPECT_EQ(checked, config.epochs);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  const Dataset data = build_dataset({fixtures::linear_demo()});
  TrainConfig config = small_config();
  config.epochs = 0;
  const Checkpoint ckpt = train(data, config);
  Rng rng(config.seed);
  const PolicyParams init = init_policy(make_net_spec(config, data.layout), data.attractor, config.diag_floor, rng);
  EXPECT_EQ(flatten_trainable(ckpt.params), flatten_trainable(init));
  EXPECT_TRUE(ckpt.training.loss_history.empty());
  EXPECT_EQ(ckpt.training.initial_loss, ckpt.training.final_loss);
}

TEST(Train, SameSeedIsBitIdentical) {
  const Dataset data = build_dataset(fixtures::multitask_onehot());
  const TrainConfig config = small_config();
  const Checkpoint a = train(data, config);
  const Checkpoint b = train(data, config);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  EXPECT_EQ(a.training.loss_history, b.training.loss_history);
  TrainConfig other = config;
  other.seed = config.seed + 1;
  EXPECT_NE(serialize_checkpoint(train(data, other)), serialize_checkpoint(a));
}

TEST(Train, ProgressCallbackCanStopEarly) {
  const Dataset data = build_dataset({fixtures::linear_demo()});
  const Checkpoint ckpt = train(data, small_config(), [](const TrainProgress& p) { return p.epoch < 3; });
  EXPECT_EQ(ckpt.training.epochs_run, 3u);
}

TEST(Train, SmallDatasetUsesFullBatch) {
  Trajectory t;
  t.dt = 0.1;
  for (int k = 0; k < 5; ++k) t.states.emplace_back(Vector::Constant(2, 1.0 - 0.2 * k), Vector{});
  TrainConfig config = small_config();
  config.batch_size = 64;
  const Checkpoint ckpt = train(build_dataset({t}), config);
  EXPECT_EQ(ckpt.training.loss_history.size(), config.epochs);
}

TEST(Train, OverflowingTargetsDiverge) {
  Trajectory t;
  t.dt = 1e-3;
  for (int k = 0; k < 5; ++k) t.states.emplace_back(Vector::Constant(2, 1e200 * k), Vector{});
  try {
    train(build_dataset({t}), small_config());
    FAIL() << "expected TrainingDivergedError";
  } catch (const TrainingDivergedError& e) {
    EXPECT_EQ(e.epoch(), 0u);
  }
}

TEST(Train, StandardizationIsStoredAndUsed) {
  const Dataset data = build_dataset(fixtures::multitask_onehot());
  TrainConfig config = small_config();
  config.standardize = true;
  config.epochs = 5;
  const Checkpoint ckpt = train(data, config);
  const InputStandardization s = compute_input_standardization(data);
  EXPECT_EQ(ckpt.params.weight_net.input_offset, s.mean);
  EXPECT_EQ(ckpt.params.weight_net.input_scale, s.stddev);
  EXPECT_EQ(ckpt.params.attractor, data.attractor);
}

TEST(TrainConfig, ValidationAndParsing) {
  TrainConfig c;
  c.n_systems = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(parse_train_config(R"({"n_systems":0})"), ValidationError);
  EXPECT_THROW(parse_train_config(R"({"learning_rte":0.1})"), ValidationError);
  EXPECT_THROW(parse_train_config(R"({"epochs":-1})"), ParseError);
  const TrainConfig parsed = parse_train_config(R"({"n_systems":7,"net":"mlp:16","standardize":true})");
  EXPECT_EQ(parsed.n_systems, 7u);
  EXPECT_EQ(parsed.epochs, 1000u);
  EXPECT_EQ(parsed.net.hidden, std::vector<std::size_t>{16});
  EXPECT_TRUE(parsed.standardize);
  EXPECT_EQ(parse_train_config(train_config_to_json(parsed)), parsed);
}

TEST(NetDescriptor, Grammar) {
  EXPECT_EQ(parse_net_descriptor("mlp:32,32").hidden, (std::vector<std::size_t>{32, 32}));
  EXPECT_TRUE(parse_net_descriptor("conv").conv);
  EXPECT_EQ(parse_net_descriptor("conv:16").hidden, std::vector<std::size_t>{16});
  EXPECT_EQ(parse_net_descriptor("mlp:4,8").to_string(), "mlp:4,8");
  for (const char* bad : {"", "rnn", "mlp:", "mlp:0", "mlp:3,", "mlp:x"}) {
    EXPECT_THROW(parse_net_descriptor(bad), ValidationError) << bad;
  }
  TrainConfig config;
  config.net = parse_net_descriptor("conv");
  EXPECT_THROW(make_net_spec(config, build_dataset({fixtures::linear_demo()}).layout), ValidationError);
}

class CheckpointFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    data_ = build_dataset(fixtures::multitask_onehot());
    ckpt_ = train(data_, small_config());
    path_ = std::filesystem::temp_directory_path() / "stableflow_ckpt_test.json";
  }
  void TearDown() override { std::filesystem::remove(path_); }

  Dataset data_;
  Checkpoint ckpt_;
  std::filesystem::path path_;
};

TEST_F(CheckpointFiles, RoundTripIsBitIdentical) {
  save_checkpoint(ckpt_, path_);
  const Checkpoint back = load_checkpoint(path_);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ckpt_));
  EXPECT_EQ(back.config, ckpt_.config);
  Rng rng(9);
  for (int k = 0; k < 200; ++k) {
    const StateVector s(testing::random_vector(rng, 2), fixtures::one_hot(fixtures::all_shapes()[k % 3]));
    const Vector a = policy_eval(ckpt_.params, s);
    const Vector b = policy_eval(back.params, s);
    EXPECT_EQ(a(0), b(0));
    EXPECT_EQ(a(1), b(1));
  }
}

TEST_F(CheckpointFiles, ImageCheckpointRoundTrips) {
  TrainConfig config = small_config();
  config.epochs = 2;
  const Checkpoint img = train(build_dataset(fixtures::multitask_images({}, 16)), config);
  EXPECT_EQ(serialize_checkpoint(parse_checkpoint(serialize_checkpoint(img))), serialize_checkpoint(img));
}

TEST_F(CheckpointFiles, OverrideIsPersisted) {
  ckpt_.params.systems[1].override_A = -Matrix::Identity(2, 2);
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(ckpt_));
  ASSERT_TRUE(back.params.systems[1].override_A.has_value());
  EXPECT_FALSE(verify_certificate(back.params).verdict);
}

TEST_F(CheckpointFiles, TruncatedFileIsAParseError) {
  const std::string text = serialize_checkpoint(ckpt_);
  for (std::size_t cut : {std::size_t{0}, text.size() / 3, text.size() - 3}) {
    EXPECT_THROW(parse_checkpoint(text.substr(0, cut)), ParseError) << cut;
  }
}

TEST_F(CheckpointFiles, VersionZeroIsUnsupported) {
  std::string text = serialize_checkpoint(ckpt_);
  const auto pos = text.find("\"version\": 1");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 12, "\"version\": 0");
  try {
    parse_checkpoint(text);
    FAIL() << "expected UnsupportedVersionError";
  } catch (const UnsupportedVersionError& e) {
    EXPECT_EQ(e.version(), 0);
  }
  EXPECT_THROW(parse_checkpoint(R"({"version":0})"), UnsupportedVersionError);
}

TEST_F(CheckpointFiles, CorruptValuesAreParseErrors) {
  std::string text = serialize_checkpoint(ckpt_);
  const auto pos = text.find("\"attractor\"");
  ASSERT_NE(pos, std::string::npos);
  const auto quote = text.find('"', text.find('[', pos));
  text.replace(quote + 1, 3, "zzz");
  EXPECT_THROW(parse_checkpoint(text), ParseError);
}

}  // namespace
}  // namespace stableflow
