#include "stableflow/trainer.hpp"

#include "stableflow/encoding.hpp"
#include "stableflow/error.hpp"

#include "json_support.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <numeric>

namespace stableflow {

using namespace detail;

std::string NetDescriptor::to_string() const {
  std::string out = conv ? "conv" : "mlp";
  for (std::size_t i = 0; i < hidden.size(); ++i) out += (i == 0 ? ":" : ",") + std::to_string(hidden[i]);
  return out;
}

NetDescriptor parse_net_descriptor(std::string_view text) {
  NetDescriptor d;
  const auto colon = text.find(':');
  const std::string_view kind = text.substr(0, colon);
  if (kind == "mlp") {
    d.conv = false;
  } else if (kind == "conv") {
    d.conv = true;
  } else {
    throw ValidationError("net must be mlp:<widths> or conv[:<widths>], got '" + std::string(text) + "'");
  }
  if (colon == std::string_view::npos) return d;
  d.hidden.clear();
  std::string_view rest = text.substr(colon + 1);
  while (true) {
    const auto comma = rest.find(',');
    const std::string_view token = rest.substr(0, comma);
    std::size_t width = 0;
    const auto [end, ec] = std::from_chars(token.data(), token.data() + token.size(), width);
    if (ec != std::errc() || end != token.data() + token.size() || width == 0) {
      throw ValidationError("net: bad layer width '" + std::string(token) + "'");
    }
    d.hidden.push_back(width);
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return d;
}

void TrainConfig::validate() const {
  if (n_systems < 1) throw ValidationError("config: n_systems must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("config: learning_rate must be positive and finite");
  }
  if (batch_size < 1) throw ValidationError("config: batch_size must be >= 1");
  if (!(diag_floor > 0.0) || !std::isfinite(diag_floor)) {
    throw ValidationError("config: diag_floor must be positive and finite");
  }
  if (smoothing_window < 1 || smoothing_window % 2 == 0) {
    throw ValidationError("config: smoothing_window must be odd and >= 1");
  }
  for (std::size_t w : net.hidden) {
    if (w < 1) throw ValidationError("config: hidden widths must be >= 1");
  }
}

namespace {

TrainConfig config_from_json(const json& obj, const std::string& path, TrainConfig cfg) {
  if (!obj.is_object()) throw ParseError(path.empty() ? "config" : path, "expected an object");
  for (const auto& [key, value] : obj.items()) {
    const std::string where = child(path, key.c_str());
    if (key == "n_systems") {
      cfg.n_systems = count(value, where);
    } else if (key == "epochs") {
      cfg.epochs = count(value, where);
    } else if (key == "learning_rate") {
      cfg.learning_rate = real(value, where);
    } else if (key == "batch_size") {
      cfg.batch_size = count(value, where);
    } else if (key == "seed") {
      if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<long long>() >= 0)) {
        throw ParseError(where, "expected a non-negative integer");
      }
      cfg.seed = value.get<std::uint64_t>();
    } else if (key == "net") {
      cfg.net = parse_net_descriptor(text(value, where));
    } else if (key == "diag_floor") {
      cfg.diag_floor = real(value, where);
    } else if (key == "standardize") {
      cfg.standardize = boolean(value, where);
    } else if (key == "smoothing_window") {
      cfg.smoothing_window = count(value, where);
    } else {
      throw ValidationError("config: unknown field '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

ordered_json config_to_json(const TrainConfig& c) {
  ordered_json o;
  o["n_systems"] = c.n_systems;
  o["epochs"] = c.epochs;
  o["learning_rate"] = c.learning_rate;
  o["batch_size"] = c.batch_size;
  o["seed"] = c.seed;
  o["net"] = c.net.to_string();
  o["diag_floor"] = c.diag_floor;
  o["standardize"] = c.standardize;
  o["smoothing_window"] = c.smoothing_window;
  return o;
}

}  // namespace

TrainConfig parse_train_config(std::string_view json_text, const TrainConfig& base) {
  return config_from_json(parse_json(json_text), "", base);
}

std::string train_config_to_json(const TrainConfig& config) { return config_to_json(config).dump(); }

namespace {

std::vector<ConvLayerSpec> conv_stack_for(WeightNetSpec spec) {
  // The default stack needs roughly 16x16 pixels; smaller frames get a
  // single 3x3 stage, and tiny ones a 1x1 channel mixer.
  for (auto candidate : {WeightNetSpec::default_conv(), std::vector<ConvLayerSpec>{{8, 3, 2}},
                         std::vector<ConvLayerSpec>{{4, 1, 1}}}) {
    spec.conv = candidate;
    try {
      spec.validate();
      return candidate;
    } catch (const InvalidParameterError&) {
    }
  }
  return {};
}

}  // namespace

WeightNetSpec make_net_spec(const TrainConfig& config, const DatasetLayout& layout) {
  WeightNetSpec spec;
  spec.dim_controllable = layout.dim_controllable;
  spec.output_dim = config.n_systems;
  spec.hidden.clear();
  for (std::size_t w : config.net.hidden) spec.hidden.push_back({w, Activation::kTanh});
  if (layout.obs_kind == ObservationKind::kImage) {
    spec.input_kind = ObservationKind::kImage;
    spec.image_height = layout.image_height;
    spec.image_width = layout.image_width;
    spec.conv = conv_stack_for(spec);
  } else {
    if (config.net.conv) throw ValidationError("net: the conv front-end needs image observations");
    spec.input_kind = ObservationKind::kVector;
    spec.dim_observation = layout.dim_observation;
  }
  try {
    spec.validate();
  } catch (const InvalidParameterError& e) {
    throw ValidationError(e.what());
  }
  return spec;
}

namespace {

// Visits every trainable block in flatten order. `lower` marks blocks whose
// strict upper triangle is structurally zero and is skipped.
template <class Params, class Fn>
void visit_blocks(Params& p, Fn&& fn) {
  for (auto& s : p.systems) {
    fn(s.lower_raw, true);
    fn(s.skew_raw, false);
  }
  auto& net = p.weight_net;
  for (std::size_t l = 0; l < net.conv_kernels.size(); ++l) {
    fn(net.conv_kernels[l], false);
    fn(net.conv_biases[l], false);
  }
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    fn(net.weights[l], false);
    fn(net.biases[l], false);
  }
}

template <class Block>
void pack(const Block& block, bool lower, Vector& out, Eigen::Index& pos) {
  for (Eigen::Index j = 0; j < block.cols(); ++j) {
    for (Eigen::Index i = lower ? j : 0; i < block.rows(); ++i) out(pos++) = block(i, j);
  }
}

template <class Block>
void unpack(Block& block, bool lower, const Vector& in, Eigen::Index& pos) {
  for (Eigen::Index j = 0; j < block.cols(); ++j) {
    for (Eigen::Index i = lower ? j : 0; i < block.rows(); ++i) block(i, j) = in(pos++);
  }
}

Eigen::Index packed_size(Eigen::Index rows, Eigen::Index cols, bool lower) {
  if (!lower) return rows * cols;
  Eigen::Index n = 0;
  for (Eigen::Index j = 0; j < cols; ++j) n += std::max<Eigen::Index>(rows - j, 0);
  return n;
}

}  // namespace

std::size_t trainable_count(const PolicyParams& params) {
  Eigen::Index n = 0;
  visit_blocks(params, [&](const auto& b, bool lower) { n += packed_size(b.rows(), b.cols(), lower); });
  return static_cast<std::size_t>(n);
}

Vector flatten_trainable(const PolicyParams& params) {
  Vector out(static_cast<Eigen::Index>(trainable_count(params)));
  Eigen::Index pos = 0;
  visit_blocks(params, [&](const auto& b, bool lower) { pack(b, lower, out, pos); });
  return out;
}

void assign_trainable(PolicyParams& params, const Vector& flat) {
  if (flat.size() != static_cast<Eigen::Index>(trainable_count(params))) {
    throw InvalidParameterError("assign_trainable: expected " + std::to_string(trainable_count(params)) +
                                " values, got " + std::to_string(flat.size()));
  }
  Eigen::Index pos = 0;
  visit_blocks(params, [&](auto& b, bool lower) { unpack(b, lower, flat, pos); });
}

namespace {

Vector features_cached(const Policy& policy, const Observation& obs, std::map<const Image*, Vector>& cache) {
  if (const auto* img = std::get_if<ImagePtr>(&obs)) {
    auto it = cache.find(img->get());
    if (it == cache.end()) it = cache.emplace(img->get(), policy.features(obs)).first;
    return it->second;
  }
  return policy.features(obs);
}

}  // namespace

double imitation_loss(const PolicyParams& params, std::span<const Sample> batch) {
  if (batch.empty()) throw ValidationError("imitation_loss: empty batch");
  const Policy policy(params);
  std::map<const Image*, Vector> cache;
  double total = 0.0;
  for (const Sample& s : batch) {
    const Vector f = features_cached(policy, s.state.non_controllable, cache);
    total += (policy.velocity(s.state.controllable, f) - s.target_velocity).squaredNorm();
  }
  return total / static_cast<double>(batch.size());
}

LossGradient imitation_loss_gradient(const PolicyParams& params, std::span<const Sample* const> batch) {
  if (batch.empty()) throw ValidationError("imitation_loss: empty batch");
  validate_params(params);
  const auto dc = static_cast<Eigen::Index>(params.dim());
  const auto b = static_cast<Eigen::Index>(batch.size());

  Matrix xc(dc, b);
  Matrix target(dc, b);
  std::vector<const Observation*> payloads;
  payloads.reserve(batch.size());
  for (Eigen::Index k = 0; k < b; ++k) {
    const Sample& s = *batch[static_cast<std::size_t>(k)];
    if (s.state.controllable.size() != dc || s.target_velocity.size() != dc) {
      throw ValidationError("imitation_loss: sample dimension does not match the policy");
    }
    xc.col(k) = s.state.controllable;
    target.col(k) = s.target_velocity;
    payloads.push_back(&s.state.non_controllable);
  }
  const ObservationBatch obs = batch_observations(params.weight_net.spec, payloads);

  ad::Tape tape;
  std::vector<ad::NodeId> lower;
  std::vector<ad::NodeId> skew;
  for (const auto& s : params.systems) {
    lower.push_back(tape.leaf(s.lower_raw));
    skew.push_back(tape.leaf(s.skew_raw));
  }
  const WeightNetNodes net = register_weight_net(tape, params.weight_net);

  const ad::NodeId x = tape.constant(xc);
  const ad::NodeId w = weight_forward(tape, params.weight_net, net, x, obs);
  const Matrix error_cols = (-xc).colwise() + params.attractor;
  const ad::NodeId e = tape.constant(error_cols);
  ad::NodeId velocity{};
  for (std::size_t i = 0; i < params.systems.size(); ++i) {
    ad::NodeId a{};
    if (params.systems[i].override_A) {
      a = tape.constant(*params.systems[i].override_A);
    } else {
      const ad::NodeId l = tape.lower_softplus_diag(lower[i], params.diag_floor);
      a = tape.add(tape.matmul(l, tape.transpose(l)), tape.sub(skew[i], tape.transpose(skew[i])));
    }
    const ad::NodeId term = tape.mul_rows(tape.matmul(a, e), tape.row(w, i));
    velocity = i == 0 ? term : tape.add(velocity, term);
  }
  const ad::NodeId diff = tape.sub(velocity, tape.constant(target));
  const ad::NodeId loss = tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / static_cast<double>(b));
  const ad::Gradients grads = tape.backward(loss);

  std::vector<ad::NodeId> order;
  for (std::size_t i = 0; i < params.systems.size(); ++i) {
    order.push_back(lower[i]);
    order.push_back(skew[i]);
  }
  for (std::size_t l = 0; l < net.conv_kernels.size(); ++l) {
    order.push_back(net.conv_kernels[l]);
    order.push_back(net.conv_biases[l]);
  }
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    order.push_back(net.weights[l]);
    order.push_back(net.biases[l]);
  }

  LossGradient out;
  out.loss = tape.value(loss)(0, 0);
  out.gradient.resize(static_cast<Eigen::Index>(trainable_count(params)));
  Eigen::Index pos = 0;
  std::size_t k = 0;
  visit_blocks(params, [&](const auto&, bool is_lower) { pack(grads[order[k++]], is_lower, out.gradient, pos); });
  return out;
}

Checkpoint train(const Dataset& data, const TrainConfig& config, const ProgressCallback& progress) {
  config.validate();
  if (data.samples.empty()) throw ValidationError("train: dataset has no samples");

  Rng rng(config.seed);
  Checkpoint ckpt;
  ckpt.version = kCheckpointVersion;
  ckpt.config = config;
  ckpt.params = init_policy(make_net_spec(config, data.layout), data.attractor, config.diag_floor, rng);
  if (config.standardize) {
    const InputStandardization s = compute_input_standardization(data);
    ckpt.params.weight_net.input_offset = s.mean;
    ckpt.params.weight_net.input_scale = s.stddev;
  }
  ckpt.training.dataset_fingerprint = dataset_fingerprint(data.trajectories);
  ckpt.training.dataset_dt = data.layout.dt;
  ckpt.training.initial_loss = imitation_loss(ckpt.params, data.samples);
  if (!std::isfinite(ckpt.training.initial_loss)) throw TrainingDivergedError("non-finite initial loss", 0);

  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEpsilon = 1e-8;
  Vector theta = flatten_trainable(ckpt.params);
  Vector m = Vector::Zero(theta.size());
  Vector v = Vector::Zero(theta.size());
  double beta1_power = 1.0;
  double beta2_power = 1.0;

  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<const Sample*> batch;
  const std::size_t batch_size = std::min(config.batch_size, data.samples.size());

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(start + batch_size, order.size()); ++k) {
        batch.push_back(&data.samples[order[k]]);
      }
      const LossGradient lg = imitation_loss_gradient(ckpt.params, batch);
      if (!std::isfinite(lg.loss) || !lg.gradient.allFinite()) {
        throw TrainingDivergedError("non-finite loss in epoch " + std::to_string(epoch), epoch);
      }
      beta1_power *= kBeta1;
      beta2_power *= kBeta2;
      m = kBeta1 * m + (1.0 - kBeta1) * lg.gradient;
      v = kBeta2 * v + (1.0 - kBeta2) * lg.gradient.cwiseAbs2();
      const Vector m_hat = m / (1.0 - beta1_power);
      const Vector v_hat = v / (1.0 - beta2_power);
      theta.array() -= config.learning_rate * m_hat.array() / (v_hat.array().sqrt() + kEpsilon);
      assign_trainable(ckpt.params, theta);
      epoch_loss += lg.loss;
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);
    ckpt.training.loss_history.push_back(epoch_loss);
    ckpt.training.epochs_run = epoch + 1;
    if (progress && !progress({epoch + 1, config.epochs, epoch_loss, &ckpt.params})) break;
  }

  ckpt.training.final_loss = imitation_loss(ckpt.params, data.samples);
  if (!std::isfinite(ckpt.training.final_loss)) {
    throw TrainingDivergedError("non-finite final loss", ckpt.training.epochs_run);
  }
  return ckpt;
}

// ---- checkpoint files ----

namespace {

ordered_json hex_array(const auto& values) {
  ordered_json out = ordered_json::array();
  for (double x : values) out.push_back(encoding::double_to_hex(x));
  return out;
}

ordered_json hex_matrix(const Matrix& m) {
  ordered_json out;
  out["rows"] = m.rows();
  out["cols"] = m.cols();
  ordered_json data = ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(encoding::double_to_hex(m(i, j)));
  }
  out["data"] = std::move(data);
  return out;
}

double hex_value(const json& v, const std::string& path) {
  if (!v.is_string()) throw ParseError(path, "expected a 16-digit hex double");
  try {
    return encoding::double_from_hex(v.get_ref<const std::string&>());
  } catch (const ParseError& e) {
    throw ParseError(path, e.what());
  }
}

Vector hex_vector(const json& v, const std::string& path) {
  if (!v.is_array()) throw ParseError(path, "expected an array of hex doubles");
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = hex_value(v[i], item(path, i));
  return out;
}

Matrix hex_matrix_from(const json& v, const std::string& path) {
  const std::size_t rows = count(field(v, "rows", path), child(path, "rows"));
  const std::size_t cols = count(field(v, "cols", path), child(path, "cols"));
  const Vector data = hex_vector(field(v, "data", path), child(path, "data"));
  if (static_cast<std::size_t>(data.size()) != rows * cols) throw ParseError(child(path, "data"), "size != rows*cols");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = data(static_cast<Eigen::Index>(i * cols + j));
  }
  return m;
}

ordered_json spec_to_json(const WeightNetSpec& s) {
  ordered_json o;
  o["input_kind"] = s.input_kind == ObservationKind::kImage ? "image" : "vector";
  o["d_c"] = s.dim_controllable;
  o["d_nc"] = s.dim_observation;
  o["image_shape"] = {s.image_height, s.image_width};
  o["conv"] = ordered_json::array();
  for (const auto& c : s.conv) o["conv"].push_back({{"channels", c.channels}, {"kernel", c.kernel}, {"pool", c.pool}});
  o["conv_activation"] = to_string(s.conv_activation);
  o["hidden"] = ordered_json::array();
  for (const auto& h : s.hidden) o["hidden"].push_back({{"width", h.width}, {"activation", to_string(h.activation)}});
  o["output_dim"] = s.output_dim;
  o["head"] = "softmax";
  return o;
}

Activation activation_at(const json& v, const std::string& path) {
  try {
    return activation_from_string(text(v, path));
  } catch (const InvalidParameterError& e) {
    throw ParseError(path, e.what());
  }
}

WeightNetSpec spec_from_json(const json& o, const std::string& path) {
  WeightNetSpec s;
  const std::string kind = text(field(o, "input_kind", path), child(path, "input_kind"));
  if (kind != "vector" && kind != "image") throw ParseError(child(path, "input_kind"), "expected vector or image");
  s.input_kind = kind == "image" ? ObservationKind::kImage : ObservationKind::kVector;
  s.dim_controllable = count(field(o, "d_c", path), child(path, "d_c"));
  s.dim_observation = count(field(o, "d_nc", path), child(path, "d_nc"));
  const json& shape = field(o, "image_shape", path);
  if (!shape.is_array() || shape.size() != 2) throw ParseError(child(path, "image_shape"), "expected [H, W]");
  s.image_height = count(shape[0], child(path, "image_shape[0]"));
  s.image_width = count(shape[1], child(path, "image_shape[1]"));
  const json& conv = field(o, "conv", path);
  if (!conv.is_array()) throw ParseError(child(path, "conv"), "expected an array");
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const std::string p = item(child(path, "conv"), i);
    s.conv.push_back({count(field(conv[i], "channels", p), child(p, "channels")),
                      count(field(conv[i], "kernel", p), child(p, "kernel")),
                      count(field(conv[i], "pool", p), child(p, "pool"))});
  }
  s.conv_activation = activation_at(field(o, "conv_activation", path), child(path, "conv_activation"));
  const json& hidden = field(o, "hidden", path);
  if (!hidden.is_array()) throw ParseError(child(path, "hidden"), "expected an array");
  s.hidden.clear();
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const std::string p = item(child(path, "hidden"), i);
    s.hidden.push_back({count(field(hidden[i], "width", p), child(p, "width")),
                        activation_at(field(hidden[i], "activation", p), child(p, "activation"))});
  }
  s.output_dim = count(field(o, "output_dim", path), child(path, "output_dim"));
  if (text(field(o, "head", path), child(path, "head")) != "softmax") {
    throw ParseError(child(path, "head"), "only the softmax head is supported");
  }
  return s;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const PolicyParams& p = ckpt.params;
  ordered_json doc;
  doc["format"] = "stableflow-checkpoint";
  doc["version"] = ckpt.version;
  doc["config"] = config_to_json(ckpt.config);

  ordered_json policy;
  policy["d_c"] = p.dim();
  policy["n_systems"] = p.system_count();
  policy["diag_floor"] = encoding::double_to_hex(p.diag_floor);
  policy["attractor"] = hex_array(p.attractor);
  policy["systems"] = ordered_json::array();
  for (const auto& s : p.systems) {
    ordered_json sys;
    sys["lower_raw"] = hex_matrix(s.lower_raw);
    sys["skew_raw"] = hex_matrix(s.skew_raw);
    if (s.override_A) sys["A_override"] = hex_matrix(*s.override_A);
    policy["systems"].push_back(std::move(sys));
  }
  const WeightNetParams& n = p.weight_net;
  ordered_json net;
  net["spec"] = spec_to_json(n.spec);
  net["input_offset"] = hex_array(n.input_offset);
  net["input_scale"] = hex_array(n.input_scale);
  net["conv_kernels"] = ordered_json::array();
  for (const auto& k : n.conv_kernels) net["conv_kernels"].push_back(hex_matrix(k));
  net["conv_biases"] = ordered_json::array();
  for (const auto& b : n.conv_biases) net["conv_biases"].push_back(hex_array(b));
  net["weights"] = ordered_json::array();
  for (const auto& w : n.weights) net["weights"].push_back(hex_matrix(w));
  net["biases"] = ordered_json::array();
  for (const auto& b : n.biases) net["biases"].push_back(hex_array(b));
  policy["weight_net"] = std::move(net);
  doc["policy"] = std::move(policy);

  ordered_json training;
  training["initial_loss"] = encoding::double_to_hex(ckpt.training.initial_loss);
  training["final_loss"] = encoding::double_to_hex(ckpt.training.final_loss);
  training["epochs_run"] = ckpt.training.epochs_run;
  training["loss_history"] = hex_array(ckpt.training.loss_history);
  training["dataset_fingerprint"] = ckpt.training.dataset_fingerprint;
  training["dataset_dt"] = encoding::double_to_hex(ckpt.training.dataset_dt);
  doc["training"] = std::move(training);
  return doc.dump(1) + "\n";
}

Checkpoint parse_checkpoint(std::string_view json_text) {
  const json doc = parse_json(json_text);
  if (!doc.is_object()) throw ParseError("", "checkpoint must be a JSON object");
  const json& version = field(doc, "version", "");
  if (!version.is_number_integer()) throw ParseError("version", "expected an integer");
  if (version.get<long long>() != kCheckpointVersion) {
    throw UnsupportedVersionError(static_cast<int>(version.get<long long>()));
  }
  if (text(field(doc, "format", ""), "format") != "stableflow-checkpoint") {
    throw ParseError("format", "not a stableflow checkpoint");
  }

  Checkpoint ckpt;
  ckpt.version = kCheckpointVersion;
  try {
    ckpt.config = config_from_json(field(doc, "config", ""), "config", TrainConfig{});
  } catch (const ValidationError& e) {
    throw ParseError("config", e.what());
  }

  const json& policy = field(doc, "policy", "");
  PolicyParams& p = ckpt.params;
  p.diag_floor = hex_value(field(policy, "diag_floor", "policy"), "policy.diag_floor");
  p.attractor = hex_vector(field(policy, "attractor", "policy"), "policy.attractor");
  const json& systems = field(policy, "systems", "policy");
  if (!systems.is_array()) throw ParseError("policy.systems", "expected an array");
  for (std::size_t i = 0; i < systems.size(); ++i) {
    const std::string path = item("policy.systems", i);
    ElementaryDS s;
    s.lower_raw = hex_matrix_from(field(systems[i], "lower_raw", path), child(path, "lower_raw"));
    s.skew_raw = hex_matrix_from(field(systems[i], "skew_raw", path), child(path, "skew_raw"));
    if (systems[i].contains("A_override")) {
      s.override_A = hex_matrix_from(systems[i]["A_override"], child(path, "A_override"));
    }
    p.systems.push_back(std::move(s));
  }
  if (count(field(policy, "n_systems", "policy"), "policy.n_systems") != p.systems.size()) {
    throw ParseError("policy.n_systems", "does not match the systems list");
  }
  if (count(field(policy, "d_c", "policy"), "policy.d_c") != p.dim()) {
    throw ParseError("policy.d_c", "does not match the attractor");
  }

  const json& net = field(policy, "weight_net", "policy");
  const std::string np = "policy.weight_net";
  WeightNetParams& n = p.weight_net;
  n.spec = spec_from_json(field(net, "spec", np), np + ".spec");
  n.input_offset = hex_vector(field(net, "input_offset", np), np + ".input_offset");
  n.input_scale = hex_vector(field(net, "input_scale", np), np + ".input_scale");
  auto matrices = [&](const char* key) {
    const json& list = field(net, key, np);
    const std::string path = child(np, key);
    if (!list.is_array()) throw ParseError(path, "expected an array");
    std::vector<Matrix> out;
    for (std::size_t i = 0; i < list.size(); ++i) out.push_back(hex_matrix_from(list[i], item(path, i)));
    return out;
  };
  auto vectors = [&](const char* key) {
    const json& list = field(net, key, np);
    const std::string path = child(np, key);
    if (!list.is_array()) throw ParseError(path, "expected an array");
    std::vector<Vector> out;
    for (std::size_t i = 0; i < list.size(); ++i) out.push_back(hex_vector(list[i], item(path, i)));
    return out;
  };
  n.conv_kernels = matrices("conv_kernels");
  n.conv_biases = vectors("conv_biases");
  n.weights = matrices("weights");
  n.biases = vectors("biases");
  try {
    validate_params(p);
  } catch (const InvalidParameterError& e) {
    throw ParseError("policy", e.what());
  }

  const json& training = field(doc, "training", "");
  TrainingMetadata& t = ckpt.training;
  t.initial_loss = hex_value(field(training, "initial_loss", "training"), "training.initial_loss");
  t.final_loss = hex_value(field(training, "final_loss", "training"), "training.final_loss");
  t.epochs_run = count(field(training, "epochs_run", "training"), "training.epochs_run");
  const Vector history = hex_vector(field(training, "loss_history", "training"), "training.loss_history");
  t.loss_history.assign(history.begin(), history.end());
  t.dataset_fingerprint = text(field(training, "dataset_fingerprint", "training"), "training.dataset_fingerprint");
  t.dataset_dt = hex_value(field(training, "dataset_dt", "training"), "training.dataset_dt");
  if (!(t.dataset_dt > 0.0)) throw ParseError("training.dataset_dt", "must be positive");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

}  // namespace stableflow
