#include "stableflow/dataset.hpp"

#include "stableflow/encoding.hpp"
#include "stableflow/error.hpp"

#include "json_support.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace stableflow {

using namespace detail;

void validate_trajectory(const Trajectory& traj) {
  if (!(traj.dt > 0.0) || !std::isfinite(traj.dt)) throw ValidationError("dt must be positive and finite");
  if (traj.states.size() < 3) {
    throw ValidationError("trajectory has M = " + std::to_string(traj.states.size()) + " states; need M ≥ 3");
  }
  const StateVector& first = traj.states.front();
  for (std::size_t t = 0; t < traj.states.size(); ++t) {
    const StateVector& s = traj.states[t];
    try {
      validate_state(s);
    } catch (const ValidationError& e) {
      throw ValidationError("state " + std::to_string(t) + ": " + e.what());
    }
    if (s.dim_controllable() != first.dim_controllable()) {
      throw ValidationError("state " + std::to_string(t) + ": d_c differs within the trajectory");
    }
    if (s.obs_kind() != first.obs_kind()) {
      throw ValidationError("state " + std::to_string(t) + ": observation kind differs within the trajectory");
    }
    if (const auto* v = std::get_if<Vector>(&s.non_controllable)) {
      if (v->size() != std::get<Vector>(first.non_controllable).size()) {
        throw ValidationError("state " + std::to_string(t) + ": d_nc differs within the trajectory");
      }
    } else {
      const auto& a = *std::get<ImagePtr>(s.non_controllable);
      const auto& b = *std::get<ImagePtr>(first.non_controllable);
      if (a.height != b.height || a.width != b.width) {
        throw ValidationError("state " + std::to_string(t) + ": image shape differs within the trajectory");
      }
    }
  }
}

namespace {

DatasetLayout layout_of(const Trajectory& traj) {
  DatasetLayout layout;
  const StateVector& s = traj.states.front();
  layout.dim_controllable = s.dim_controllable();
  layout.obs_kind = s.obs_kind();
  layout.dt = traj.dt;
  if (const auto* v = std::get_if<Vector>(&s.non_controllable)) {
    layout.dim_observation = static_cast<std::size_t>(v->size());
  } else {
    const auto& img = *std::get<ImagePtr>(s.non_controllable);
    layout.image_height = img.height;
    layout.image_width = img.width;
  }
  return layout;
}

}  // namespace

DatasetLayout common_layout(const std::vector<Trajectory>& trajs) {
  if (trajs.empty()) throw ValidationError("need at least one trajectory");
  DatasetLayout layout;
  for (std::size_t k = 0; k < trajs.size(); ++k) {
    try {
      validate_trajectory(trajs[k]);
    } catch (const ValidationError& e) {
      throw ValidationError("trajectory " + std::to_string(k) + ": " + e.what());
    }
    const DatasetLayout here = layout_of(trajs[k]);
    if (k == 0) {
      layout = here;
      continue;
    }
    if (here.dim_controllable != layout.dim_controllable) {
      throw ValidationError("trajectory " + std::to_string(k) + ": d_c differs from trajectory 0");
    }
    if (here.dt != layout.dt) throw ValidationError("trajectory " + std::to_string(k) + ": dt is not uniform");
    if (!(here == layout)) {
      throw ValidationError("trajectory " + std::to_string(k) + ": observation layout differs from trajectory 0");
    }
  }
  return layout;
}

std::vector<Trajectory> parse_trajectories(std::string_view json_text) {
  const json doc = parse_json(json_text);
  const std::string root;
  const json& version = field(doc, "version", root);
  if (!version.is_number_integer() || version.get<long long>() != 1) {
    throw ParseError("version", "unsupported dataset version " + version.dump());
  }
  const double dt = real(field(doc, "dt", root), "dt");
  const std::size_t dc = count(field(doc, "d_c", root), "d_c");
  const json& kind_field = field(doc, "obs_kind", root);
  if (!kind_field.is_string()) throw ParseError("obs_kind", "expected \"vector\" or \"image\"");
  const std::string kind = kind_field.get<std::string>();
  if (kind != "vector" && kind != "image") throw ParseError("obs_kind", "expected \"vector\" or \"image\"");
  const bool image = kind == "image";

  std::size_t dnc = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  if (image) {
    const json& shape = field(doc, "image_shape", root);
    if (!shape.is_array() || shape.size() != 2) throw ParseError("image_shape", "expected [H, W]");
    height = count(shape[0], "image_shape[0]");
    width = count(shape[1], "image_shape[1]");
  } else {
    dnc = doc.contains("d_nc") ? count(doc["d_nc"], "d_nc") : 0;
  }

  const json& list = field(doc, "trajectories", root);
  if (!list.is_array()) throw ParseError("trajectories", "expected an array");
  std::map<std::string, ImagePtr> interned;
  std::vector<Trajectory> trajs;
  for (std::size_t k = 0; k < list.size(); ++k) {
    const std::string tpath = item("trajectories", k);
    Trajectory traj;
    traj.dt = dt;
    if (list[k].is_object() && list[k].contains("label")) {
      if (!list[k]["label"].is_string()) throw ParseError(child(tpath, "label"), "expected a string");
      traj.label = list[k]["label"].get<std::string>();
    }
    const json& states = field(list[k], "states", tpath);
    const std::string spath_root = child(tpath, "states");
    if (!states.is_array()) throw ParseError(spath_root, "expected an array");
    for (std::size_t t = 0; t < states.size(); ++t) {
      const std::string spath = item(spath_root, t);
      Vector xc = real_vector(field(states[t], "xc", spath), child(spath, "xc"));
      if (xc.size() != static_cast<Eigen::Index>(dc)) {
        throw ValidationError(child(spath, "xc") + ": length " + std::to_string(xc.size()) +
                              " does not match d_c = " + std::to_string(dc));
      }
      if (image) {
        const json& payload = field(states[t], "xnc_image", spath);
        const std::string ipath = child(spath, "xnc_image");
        if (!payload.is_string()) throw ParseError(ipath, "expected a base64 string");
        const std::string& text = payload.get_ref<const std::string&>();
        auto it = interned.find(text);
        if (it == interned.end()) {
          std::vector<double> px;
          try {
            px = encoding::decode_doubles_base64(text);
          } catch (const ParseError& e) {
            throw ParseError(ipath, e.what());
          }
          if (px.size() != height * width) {
            throw ValidationError(ipath + ": " + std::to_string(px.size()) + " pixels, image_shape needs " +
                                  std::to_string(height * width));
          }
          it = interned.emplace(text, std::make_shared<const Image>(height, width, std::move(px))).first;
        }
        traj.states.emplace_back(std::move(xc), it->second);
      } else {
        Vector xnc = states[t].contains("xnc") ? real_vector(states[t]["xnc"], child(spath, "xnc")) : Vector{};
        if (xnc.size() != static_cast<Eigen::Index>(dnc)) {
          throw ValidationError(child(spath, "xnc") + ": length " + std::to_string(xnc.size()) +
                                " does not match d_nc = " + std::to_string(dnc));
        }
        traj.states.emplace_back(std::move(xc), std::move(xnc));
      }
    }
    trajs.push_back(std::move(traj));
  }
  common_layout(trajs);
  return trajs;
}

std::vector<Trajectory> load_trajectories(const std::filesystem::path& path) {
  return parse_trajectories(read_file(path));
}

std::string serialize_trajectories(const std::vector<Trajectory>& trajs) {
  const DatasetLayout layout = common_layout(trajs);
  ordered_json doc;
  doc["version"] = 1;
  doc["dt"] = layout.dt;
  doc["d_c"] = layout.dim_controllable;
  if (layout.obs_kind == ObservationKind::kImage) {
    doc["obs_kind"] = "image";
    doc["image_shape"] = {layout.image_height, layout.image_width};
  } else {
    doc["obs_kind"] = "vector";
    doc["d_nc"] = layout.dim_observation;
  }
  doc["trajectories"] = ordered_json::array();
  std::map<const Image*, std::string> encoded;
  for (const Trajectory& traj : trajs) {
    ordered_json t;
    if (!traj.label.empty()) t["label"] = traj.label;
    t["states"] = ordered_json::array();
    for (const StateVector& s : traj.states) {
      ordered_json state;
      state["xc"] = std::vector<double>(s.controllable.begin(), s.controllable.end());
      if (const auto* v = std::get_if<Vector>(&s.non_controllable)) {
        state["xnc"] = std::vector<double>(v->begin(), v->end());
      } else {
        const Image* img = std::get<ImagePtr>(s.non_controllable).get();
        auto it = encoded.find(img);
        if (it == encoded.end()) it = encoded.emplace(img, encoding::encode_doubles_base64(img->pixels)).first;
        state["xnc_image"] = it->second;
      }
      t["states"].push_back(std::move(state));
    }
    doc["trajectories"].push_back(std::move(t));
  }
  return doc.dump();
}

void save_trajectories(const std::vector<Trajectory>& trajs, const std::filesystem::path& path) {
  const std::string text = serialize_trajectories(trajs);
  write_file(path, text);
}

std::vector<Vector> estimate_velocities(const Trajectory& traj) {
  if (!(traj.dt > 0.0)) throw ValidationError("dt must be positive");
  if (traj.states.size() < 3) throw ValidationError("need M ≥ 3 states for velocity estimates");
  const std::size_t m = traj.states.size();
  std::vector<Vector> v(m);
  const auto& x = traj.states;
  v[0] = (x[1].controllable - x[0].controllable) / traj.dt;
  for (std::size_t t = 1; t + 1 < m; ++t) {
    v[t] = (x[t + 1].controllable - x[t - 1].controllable) / (2.0 * traj.dt);
  }
  v[m - 1] = (x[m - 1].controllable - x[m - 2].controllable) / traj.dt;
  return v;
}

Vector compute_attractor(const std::vector<Trajectory>& trajs) {
  if (trajs.empty()) throw ValidationError("cannot compute an attractor from zero trajectories");
  Vector sum = Vector::Zero(trajs.front().states.back().controllable.size());
  for (const Trajectory& t : trajs) {
    if (t.states.empty()) throw ValidationError("empty trajectory");
    if (t.states.back().controllable.size() != sum.size()) throw ValidationError("trajectories disagree on d_c");
    sum += t.states.back().controllable;
  }
  return sum / static_cast<double>(trajs.size());
}

Trajectory smooth_moving_average(const Trajectory& traj, std::size_t window) {
  if (window == 0 || window % 2 == 0) throw ValidationError("smoothing window must be odd");
  Trajectory out = traj;
  const std::size_t half = window / 2;
  const std::size_t m = traj.states.size();
  for (std::size_t t = 0; t < m; ++t) {
    const std::size_t reach = std::min({half, t, m - 1 - t});
    Vector sum = Vector::Zero(traj.states[t].controllable.size());
    for (std::size_t k = t - reach; k <= t + reach; ++k) sum += traj.states[k].controllable;
    out.states[t].controllable = sum / static_cast<double>(2 * reach + 1);
  }
  return out;
}

Dataset build_dataset(std::vector<Trajectory> trajs, const DatasetOptions& options) {
  Dataset data;
  data.layout = common_layout(trajs);
  if (options.smoothing_window > 1) {
    for (auto& t : trajs) t = smooth_moving_average(t, options.smoothing_window);
  }
  data.trajectories = std::move(trajs);
  data.attractor = compute_attractor(data.trajectories);
  for (const Trajectory& t : data.trajectories) {
    const auto velocities = estimate_velocities(t);
    for (std::size_t i = 0; i < t.states.size(); ++i) {
      if (!velocities[i].allFinite()) throw ValidationError("derived velocity is not finite");
      data.samples.push_back({t.states[i], velocities[i]});
    }
  }
  return data;
}

InputStandardization compute_input_standardization(const Dataset& data) {
  const std::size_t dc = data.layout.dim_controllable;
  const std::size_t dnc = data.layout.obs_kind == ObservationKind::kVector ? data.layout.dim_observation : 0;
  const auto n = static_cast<Eigen::Index>(dc + dnc);
  Vector sum = Vector::Zero(n);
  Vector sq = Vector::Zero(n);
  for (const Sample& s : data.samples) {
    Vector raw(n);
    raw.head(static_cast<Eigen::Index>(dc)) = s.state.controllable;
    if (dnc > 0) raw.tail(static_cast<Eigen::Index>(dnc)) = std::get<Vector>(s.state.non_controllable);
    sum += raw;
    sq += raw.cwiseProduct(raw);
  }
  const double count = static_cast<double>(data.samples.size());
  InputStandardization out;
  out.mean = sum / count;
  out.stddev = (sq / count - out.mean.cwiseProduct(out.mean)).cwiseMax(0.0).cwiseSqrt();
  for (auto& s : out.stddev) {
    if (s < 1e-12) s = 1.0;
  }
  return out;
}

DatasetSummary summarize(const Dataset& data) {
  DatasetSummary out;
  out.trajectories = data.trajectories.size();
  out.samples = data.samples.size();
  const auto dc = static_cast<Eigen::Index>(data.layout.dim_controllable);
  out.lower = Vector::Constant(dc, std::numeric_limits<double>::infinity());
  out.upper = Vector::Constant(dc, -std::numeric_limits<double>::infinity());
  for (const Sample& s : data.samples) {
    out.lower = out.lower.cwiseMin(s.state.controllable);
    out.upper = out.upper.cwiseMax(s.state.controllable);
    out.max_speed = std::max(out.max_speed, s.target_velocity.norm());
  }
  return out;
}

double bounding_box_diagonal(const Trajectory& traj) {
  if (traj.states.empty()) return 0.0;
  Vector lo = traj.states.front().controllable;
  Vector hi = lo;
  for (const StateVector& s : traj.states) {
    lo = lo.cwiseMin(s.controllable);
    hi = hi.cwiseMax(s.controllable);
  }
  return (hi - lo).norm();
}

std::string dataset_fingerprint(const std::vector<Trajectory>& trajs) {
  return encoding::sha256_hex(serialize_trajectories(trajs));
}

}  // namespace stableflow
