#include "stableflow/weight_net.hpp"

#include "stableflow/error.hpp"

#include <cmath>
#include <map>

namespace stableflow {

std::string to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  throw InvalidParameterError("unknown activation '" + name + "'");
}

std::vector<ConvLayerSpec> WeightNetSpec::default_conv() { return {{8, 5, 2}, {16, 5, 2}}; }

std::size_t WeightNetSpec::raw_input_size() const {
  return dim_controllable + (input_kind == ObservationKind::kVector ? dim_observation : 0);
}

std::vector<ad::ConvShape> WeightNetSpec::conv_shapes() const {
  std::vector<ad::ConvShape> shapes;
  std::size_t channels = 1;
  std::size_t h = image_height;
  std::size_t w = image_width;
  for (const auto& layer : conv) {
    ad::ConvShape s{channels, h, w, layer.channels, layer.kernel};
    shapes.push_back(s);
    channels = layer.channels;
    h = layer.pool == 0 ? 0 : s.out_height() / layer.pool;
    w = layer.pool == 0 ? 0 : s.out_width() / layer.pool;
  }
  return shapes;
}

std::vector<ad::PoolShape> WeightNetSpec::pool_shapes() const {
  std::vector<ad::PoolShape> pools;
  const auto shapes = conv_shapes();
  for (std::size_t i = 0; i < conv.size(); ++i) {
    pools.push_back({conv[i].channels, shapes[i].out_height(), shapes[i].out_width(), conv[i].pool});
  }
  return pools;
}

std::size_t WeightNetSpec::feature_size() const {
  if (input_kind != ObservationKind::kImage) return 0;
  if (conv.empty()) return image_height * image_width;
  return pool_shapes().back().out_size();
}

std::size_t WeightNetSpec::mlp_input_size() const { return raw_input_size() + feature_size(); }

void WeightNetSpec::validate() const {
  if (dim_controllable < 1) throw InvalidParameterError("weight net: d_c must be >= 1");
  if (output_dim < 1) throw InvalidParameterError("weight net: N must be >= 1");
  for (const auto& layer : hidden) {
    if (layer.width < 1) throw InvalidParameterError("weight net: hidden width must be >= 1");
  }
  if (input_kind == ObservationKind::kVector) {
    if (!conv.empty()) throw InvalidParameterError("weight net: conv front-end needs image inputs");
    return;
  }
  if (image_height < 1 || image_width < 1) throw InvalidParameterError("weight net: image shape must be >= 1x1");
  std::size_t h = image_height;
  std::size_t w = image_width;
  for (const auto& layer : conv) {
    if (layer.channels < 1 || layer.kernel < 1 || layer.pool < 1) {
      throw InvalidParameterError("weight net: conv layer sizes must be >= 1");
    }
    if (layer.kernel > h || layer.kernel > w) {
      throw InvalidParameterError("weight net: conv kernel larger than its input at " + std::to_string(h) + "x" +
                                  std::to_string(w));
    }
    h = (h - layer.kernel + 1) / layer.pool;
    w = (w - layer.kernel + 1) / layer.pool;
    if (h < 1 || w < 1) throw InvalidParameterError("weight net: conv stack reduces the image to nothing");
  }
}

std::size_t WeightNetParams::parameter_count() const {
  std::size_t count = 0;
  for (const auto& k : conv_kernels) count += static_cast<std::size_t>(k.size());
  for (const auto& b : conv_biases) count += static_cast<std::size_t>(b.size());
  for (const auto& w : weights) count += static_cast<std::size_t>(w.size());
  for (const auto& b : biases) count += static_cast<std::size_t>(b.size());
  return count;
}

void WeightNetParams::validate() const {
  spec.validate();
  const auto shapes = spec.conv_shapes();
  if (conv_kernels.size() != spec.conv.size() || conv_biases.size() != spec.conv.size()) {
    throw InvalidParameterError("weight net: conv parameter count does not match the architecture");
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& s = shapes[i];
    if (conv_kernels[i].rows() != static_cast<Eigen::Index>(s.out_channels) ||
        conv_kernels[i].cols() != static_cast<Eigen::Index>(s.in_channels * s.kernel * s.kernel) ||
        conv_biases[i].size() != static_cast<Eigen::Index>(s.out_channels)) {
      throw InvalidParameterError("weight net: conv layer " + std::to_string(i) + " has the wrong shape");
    }
    if (!conv_kernels[i].allFinite() || !conv_biases[i].allFinite()) {
      throw InvalidParameterError("weight net: non-finite conv parameters");
    }
  }
  if (weights.size() != spec.hidden.size() + 1 || biases.size() != weights.size()) {
    throw InvalidParameterError("weight net: dense parameter count does not match the architecture");
  }
  std::size_t fan_in = spec.mlp_input_size();
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const std::size_t fan_out = i < spec.hidden.size() ? spec.hidden[i].width : spec.output_dim;
    if (weights[i].rows() != static_cast<Eigen::Index>(fan_out) ||
        weights[i].cols() != static_cast<Eigen::Index>(fan_in) ||
        biases[i].size() != static_cast<Eigen::Index>(fan_out)) {
      throw InvalidParameterError("weight net: dense layer " + std::to_string(i) + " has the wrong shape");
    }
    if (!weights[i].allFinite() || !biases[i].allFinite()) {
      throw InvalidParameterError("weight net: non-finite dense parameters");
    }
    fan_in = fan_out;
  }
  const auto raw = static_cast<Eigen::Index>(spec.raw_input_size());
  if (input_offset.size() != raw || input_scale.size() != raw) {
    throw InvalidParameterError("weight net: standardization vectors have the wrong length");
  }
  if (!input_offset.allFinite() || !input_scale.allFinite() || (input_scale.array() <= 0.0).any()) {
    throw InvalidParameterError("weight net: standardization scale must be positive and finite");
  }
}

WeightNetParams init_weight_net(const WeightNetSpec& spec, Rng& rng) {
  spec.validate();
  WeightNetParams p;
  p.spec = spec;
  auto uniform_matrix = [&rng](std::size_t rows, std::size_t cols, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    // Column-major fill order is part of the reproducibility contract.
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.uniform(-bound, bound);
    }
    return m;
  };
  for (const auto& s : spec.conv_shapes()) {
    const std::size_t fan_in = s.in_channels * s.kernel * s.kernel;
    p.conv_kernels.push_back(uniform_matrix(s.out_channels, fan_in, fan_in));
    p.conv_biases.push_back(Vector::Zero(static_cast<Eigen::Index>(s.out_channels)));
  }
  std::size_t fan_in = spec.mlp_input_size();
  for (std::size_t i = 0; i <= spec.hidden.size(); ++i) {
    const std::size_t fan_out = i < spec.hidden.size() ? spec.hidden[i].width : spec.output_dim;
    p.weights.push_back(uniform_matrix(fan_out, fan_in, fan_in));
    p.biases.push_back(Vector::Zero(static_cast<Eigen::Index>(fan_out)));
    fan_in = fan_out;
  }
  const auto raw = static_cast<Eigen::Index>(spec.raw_input_size());
  p.input_offset = Vector::Zero(raw);
  p.input_scale = Vector::Ones(raw);
  return p;
}

namespace {

Matrix activate(const Matrix& x, Activation a) {
  return a == Activation::kTanh ? Matrix(x.array().tanh().matrix()) : Matrix(x.cwiseMax(0.0));
}

ad::NodeId activate(ad::Tape& tape, ad::NodeId x, Activation a) {
  return a == Activation::kTanh ? tape.tanh(x) : tape.relu(x);
}

void check_observation(const WeightNetSpec& spec, const Observation& obs) {
  if (kind_of(obs) != spec.input_kind) {
    throw ObservationShapeError(std::string("weight net expects ") +
                                (spec.input_kind == ObservationKind::kImage ? "an image" : "a vector") +
                                " observation");
  }
  if (const auto* v = std::get_if<Vector>(&obs)) {
    if (v->size() != static_cast<Eigen::Index>(spec.dim_observation)) {
      throw ObservationShapeError("observation has length " + std::to_string(v->size()) + ", expected " +
                                  std::to_string(spec.dim_observation));
    }
    return;
  }
  const auto& img = std::get<ImagePtr>(obs);
  if (!img || img->height != spec.image_height || img->width != spec.image_width) {
    throw ObservationShapeError("image observation must be " + std::to_string(spec.image_height) + "x" +
                                std::to_string(spec.image_width));
  }
}

Matrix conv_features(const WeightNetParams& p, const Matrix& images) {
  const auto shapes = p.spec.conv_shapes();
  const auto pools = p.spec.pool_shapes();
  Matrix h = images;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    h = ad::kernels::conv2d(h, p.conv_kernels[i], p.conv_biases[i], shapes[i]);
    h = activate(h, p.spec.conv_activation);
    h = ad::kernels::maxpool(h, pools[i]);
  }
  return h;
}

Vector inverse_scale(const WeightNetParams& p) { return p.input_scale.cwiseInverse(); }

}  // namespace

Vector observation_features(const WeightNetParams& params, const Observation& obs) {
  check_observation(params.spec, obs);
  if (const auto* v = std::get_if<Vector>(&obs)) {
    const auto dc = static_cast<Eigen::Index>(params.spec.dim_controllable);
    const auto dnc = v->size();
    const Vector inv = inverse_scale(params);
    return (*v - params.input_offset.segment(dc, dnc)).cwiseProduct(inv.segment(dc, dnc));
  }
  const auto& img = *std::get<ImagePtr>(obs);
  const Matrix column = Eigen::Map<const Vector>(img.pixels.data(), static_cast<Eigen::Index>(img.pixels.size()));
  return conv_features(params, column).col(0);
}

Vector weight_logits(const WeightNetParams& params, const Vector& controllable, const Vector& features) {
  const auto dc = static_cast<Eigen::Index>(params.spec.dim_controllable);
  if (controllable.size() != dc) {
    throw ObservationShapeError("controllable state has length " + std::to_string(controllable.size()) +
                                ", expected " + std::to_string(dc));
  }
  const auto expected = static_cast<Eigen::Index>(params.spec.mlp_input_size()) - dc;
  if (features.size() != expected) throw ObservationShapeError("observation features have the wrong length");
  const Vector inv = inverse_scale(params);
  Matrix h(dc + features.size(), 1);
  h.topRows(dc) = (controllable - params.input_offset.head(dc)).cwiseProduct(inv.head(dc));
  h.bottomRows(features.size()) = features;
  for (std::size_t i = 0; i < params.spec.hidden.size(); ++i) {
    Matrix z = params.weights[i] * h;
    z.col(0) += params.biases[i];
    h = activate(z, params.spec.hidden[i].activation);
  }
  Matrix logits = params.weights.back() * h;
  logits.col(0) += params.biases.back();
  return logits.col(0);
}

Vector weight_forward(const WeightNetParams& params, const Vector& controllable, const Vector& features) {
  const Vector logits = weight_logits(params, controllable, features);
  return ad::kernels::softmax_columns(logits).col(0);
}

Vector weight_forward(const WeightNetParams& params, const StateVector& state) {
  return weight_forward(params, state.controllable, observation_features(params, state.non_controllable));
}

ObservationBatch batch_observations(const WeightNetSpec& spec, const std::vector<const Observation*>& payloads) {
  ObservationBatch batch;
  batch.kind = spec.input_kind;
  const auto count = static_cast<Eigen::Index>(payloads.size());
  if (spec.input_kind == ObservationKind::kVector) {
    batch.vectors.resize(static_cast<Eigen::Index>(spec.dim_observation), count);
    for (Eigen::Index j = 0; j < count; ++j) {
      check_observation(spec, *payloads[static_cast<std::size_t>(j)]);
      batch.vectors.col(j) = std::get<Vector>(*payloads[static_cast<std::size_t>(j)]);
    }
    return batch;
  }
  std::map<const Image*, Eigen::Index> seen;
  std::vector<const Image*> unique;
  batch.image_index.reserve(payloads.size());
  for (const Observation* obs : payloads) {
    check_observation(spec, *obs);
    const Image* img = std::get<ImagePtr>(*obs).get();
    auto [it, inserted] = seen.emplace(img, static_cast<Eigen::Index>(unique.size()));
    if (inserted) unique.push_back(img);
    batch.image_index.push_back(it->second);
  }
  batch.unique_images.resize(static_cast<Eigen::Index>(spec.image_height * spec.image_width),
                             static_cast<Eigen::Index>(unique.size()));
  for (std::size_t u = 0; u < unique.size(); ++u) {
    batch.unique_images.col(static_cast<Eigen::Index>(u)) =
        Eigen::Map<const Vector>(unique[u]->pixels.data(), static_cast<Eigen::Index>(unique[u]->pixels.size()));
  }
  return batch;
}

WeightNetNodes register_weight_net(ad::Tape& tape, const WeightNetParams& params) {
  WeightNetNodes nodes;
  for (const auto& k : params.conv_kernels) nodes.conv_kernels.push_back(tape.leaf(k));
  for (const auto& b : params.conv_biases) nodes.conv_biases.push_back(tape.leaf(b));
  for (const auto& w : params.weights) nodes.weights.push_back(tape.leaf(w));
  for (const auto& b : params.biases) nodes.biases.push_back(tape.leaf(b));
  return nodes;
}

ad::NodeId weight_forward(ad::Tape& tape, const WeightNetParams& params, const WeightNetNodes& nodes,
                          ad::NodeId controllable, const ObservationBatch& obs) {
  const WeightNetSpec& spec = params.spec;
  const auto dc = static_cast<Eigen::Index>(spec.dim_controllable);
  const Eigen::Index batch = tape.value(controllable).cols();
  if (tape.value(controllable).rows() != dc) throw ObservationShapeError("controllable batch has the wrong row count");
  if (obs.kind != spec.input_kind) throw ObservationShapeError("observation batch kind does not match the network");

  const Vector inv = inverse_scale(params);
  auto standardize = [&](ad::NodeId x, Eigen::Index offset, Eigen::Index rows) {
    const ad::NodeId shifted = tape.add_bias(x, tape.constant(-params.input_offset.segment(offset, rows)));
    const Matrix factor = inv.segment(offset, rows) * Eigen::RowVectorXd::Ones(tape.value(x).cols());
    return tape.mul(shifted, tape.constant(factor));
  };

  ad::NodeId h = standardize(controllable, 0, dc);
  if (spec.input_kind == ObservationKind::kVector) {
    if (obs.vectors.cols() != batch) throw ObservationShapeError("observation batch size mismatch");
    if (spec.dim_observation > 0) {
      const auto dnc = static_cast<Eigen::Index>(spec.dim_observation);
      h = tape.concat_rows(h, standardize(tape.constant(obs.vectors), dc, dnc));
    }
  } else {
    if (static_cast<Eigen::Index>(obs.image_index.size()) != batch) {
      throw ObservationShapeError("observation batch size mismatch");
    }
    const auto shapes = spec.conv_shapes();
    const auto pools = spec.pool_shapes();
    ad::NodeId f = tape.constant(obs.unique_images);
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      f = tape.conv2d(f, nodes.conv_kernels[i], nodes.conv_biases[i], shapes[i]);
      f = activate(tape, f, spec.conv_activation);
      f = tape.maxpool(f, pools[i]);
    }
    h = tape.concat_rows(h, tape.gather_cols(f, obs.image_index));
  }
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    h = activate(tape, tape.add_bias(tape.matmul(nodes.weights[i], h), nodes.biases[i]), spec.hidden[i].activation);
  }
  const ad::NodeId logits = tape.add_bias(tape.matmul(nodes.weights.back(), h), nodes.biases.back());
  return tape.softmax(logits);
}

}  // namespace stableflow
