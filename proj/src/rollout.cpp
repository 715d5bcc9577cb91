#include "stableflow/rollout.hpp"

#include "stableflow/encoding.hpp"
#include "stableflow/error.hpp"
#include "stableflow/image_io.hpp"

#include "json_support.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

namespace stableflow {

using detail::ordered_json;

std::string to_string(Integrator method) { return method == Integrator::kEuler ? "euler" : "rk4"; }

Integrator integrator_from_string(std::string_view name) {
  if (name == "euler") return Integrator::kEuler;
  if (name == "rk4") return Integrator::kRk4;
  throw ValidationError("method must be euler or rk4, got '" + std::string(name) + "'");
}

ObservationProvider::ObservationProvider(Observation initial, std::vector<ScheduledObservation> switches)
    : initial_(std::move(initial)), switches_(std::move(switches)) {
  double last = -1.0;
  for (const auto& s : switches_) {
    if (!std::isfinite(s.time) || s.time < 0.0) throw ValidationError("switch times must be finite and >= 0");
    if (s.time <= last) throw ValidationError("switch times must be strictly increasing");
    if (kind_of(s.payload) != kind_of(initial_)) {
      throw ValidationError("a switch changes the observation kind");
    }
    last = s.time;
  }
}

void RolloutOptions::validate() const {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("dt must be positive and finite");
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ValidationError("horizon must be positive and finite");
  if (max_speed && (!(*max_speed > 0.0) || !std::isfinite(*max_speed))) {
    throw ValidationError("max speed must be positive and finite");
  }
}

RolloutStepper::RolloutStepper(const Policy& policy, Vector x0, const Observation& obs,
                               const RolloutOptions& options)
    : policy_(&policy), options_(options), x_(std::move(x0)) {
  options_.validate();
  if (x_.size() != static_cast<Eigen::Index>(policy.dim())) {
    throw ValidationError("x0 has " + std::to_string(x_.size()) + " entries, the policy expects " +
                          std::to_string(policy.dim()));
  }
  if (!x_.allFinite()) throw ValidationError("x0 must be finite");
  features_ = policy.features(obs);
  refresh();
  if (policy.params().attractor.size() > 0 && (x_ - policy.params().attractor).norm() < kConvergenceTolerance) {
    streak_ = 1;
  }
}

double RolloutStepper::lyapunov() const { return lyapunov_value(policy_->params().attractor, x_); }

Vector RolloutStepper::field(const Vector& x) const {
  Vector v = policy_->velocity(x, features_);
  if (options_.max_speed) {
    const double speed = v.norm();
    if (speed > *options_.max_speed) v *= *options_.max_speed / speed;
  }
  return v;
}

void RolloutStepper::refresh() {
  v_ = field(x_);
  if (!v_.allFinite()) throw RolloutDivergedError("non-finite velocity", steps_);
}

void RolloutStepper::perturb(const Vector& delta) {
  if (delta.size() != x_.size() || !delta.allFinite()) {
    throw ValidationError("perturbation must be a finite vector of length d_c");
  }
  x_ += delta;
  if (!x_.allFinite()) throw RolloutDivergedError("non-finite state after perturbation", steps_);
  refresh();
  const bool inside = (x_ - policy_->params().attractor).norm() < kConvergenceTolerance;
  if (!inside) {
    streak_ = 0;
  } else if (streak_ == 0) {
    streak_ = 1;
  }
}

void RolloutStepper::set_observation(const Observation& obs) {
  features_ = policy_->features(obs);
  refresh();
}

void RolloutStepper::step() {
  const double dt = options_.dt;
  if (options_.method == Integrator::kEuler) {
    x_ += dt * v_;
  } else {
    const Vector& k1 = v_;
    const Vector k2 = field(x_ + 0.5 * dt * k1);
    const Vector k3 = field(x_ + 0.5 * dt * k2);
    const Vector k4 = field(x_ + dt * k3);
    x_ += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  ++steps_;
  if (!x_.allFinite()) throw RolloutDivergedError("non-finite state at step " + std::to_string(steps_), steps_);
  refresh();
  if ((x_ - policy_->params().attractor).norm() < kConvergenceTolerance) {
    ++streak_;
  } else {
    streak_ = 0;
  }
}

namespace {

// Index of the first step whose time t_k = k dt reaches `time`; the small
// slack keeps an event at exactly k dt from slipping to k + 1 through rounding.
std::size_t step_for(double time, double dt) {
  return static_cast<std::size_t>(std::max(0.0, std::ceil(time / dt - 1e-9)));
}

}  // namespace

RolloutRecord integrate(const Policy& policy, const Vector& x0, const ObservationProvider& provider,
                        const std::vector<PerturbationEvent>& perturbations, const RolloutOptions& options) {
  options.validate();
  std::vector<PerturbationEvent> pushes = perturbations;
  for (const auto& p : pushes) {
    if (!std::isfinite(p.time) || p.time < 0.0) throw ValidationError("perturbation time must be finite and >= 0");
    if (p.delta.size() != static_cast<Eigen::Index>(policy.dim()) || !p.delta.allFinite()) {
      throw ValidationError("perturbation delta must be a finite vector of length d_c");
    }
  }
  std::stable_sort(pushes.begin(), pushes.end(), [](const auto& a, const auto& b) { return a.time < b.time; });
  const auto& switches = provider.switches();

  RolloutStepper stepper(policy, x0, provider.initial(), options);
  RolloutRecord rec;
  rec.dt = options.dt;
  rec.attractor = policy.params().attractor;
  const auto n_steps = static_cast<std::size_t>(std::max(1.0, std::round(options.horizon / options.dt)));
  std::size_t next_push = 0;
  std::size_t next_switch = 0;

  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) * options.dt;
    while (next_switch < switches.size() && step_for(switches[next_switch].time, options.dt) <= k) {
      stepper.set_observation(switches[next_switch].payload);
      rec.events.push_back({EventKind::kObservationSwitch, k, t, Vector{}});
      ++next_switch;
    }
    while (next_push < pushes.size() && step_for(pushes[next_push].time, options.dt) <= k) {
      stepper.perturb(pushes[next_push].delta);
      rec.events.push_back({EventKind::kPerturbation, k, t, pushes[next_push].delta});
      ++next_push;
    }
    rec.times.push_back(t);
    rec.states.push_back(stepper.state());
    rec.velocities.push_back(stepper.velocity());
    rec.lyapunov.push_back(stepper.lyapunov());
    if (k >= n_steps) break;
    const bool pending = next_push < pushes.size() || next_switch < switches.size();
    if (options.stop_when_converged && stepper.converged() && !pending) break;
    stepper.step();
  }

  std::size_t streak = 0;
  for (std::size_t i = rec.states.size(); i-- > 0;) {
    if ((rec.states[i] - rec.attractor).norm() >= kConvergenceTolerance) break;
    ++streak;
  }
  rec.converged = streak >= kConvergenceWindow;
  if (rec.converged) rec.convergence_time = rec.times[rec.states.size() - streak];
  return rec;
}

RolloutRecord integrate(const PolicyParams& params, const StateVector& x0,
                        const std::vector<PerturbationEvent>& perturbations, const RolloutOptions& options) {
  const Policy policy(params);
  return integrate(policy, x0.controllable, ObservationProvider(x0.non_controllable), perturbations, options);
}

ConvergenceStats convergence_stats(const RolloutRecord& record) {
  if (record.states.empty() || record.lyapunov.size() != record.states.size()) {
    throw ValidationError("convergence_stats: empty or inconsistent record");
  }
  ConvergenceStats stats;
  stats.final_error = (record.states.back() - record.attractor).norm();
  stats.convergence_time = record.convergence_time;
  std::vector<bool> event_step(record.states.size(), false);
  for (const auto& e : record.events) {
    if (e.step < event_step.size()) event_step[e.step] = true;
  }
  for (std::size_t k = 1; k < record.lyapunov.size(); ++k) {
    if (!event_step[k] && record.lyapunov[k] - record.lyapunov[k - 1] > kLyapunovSlack) ++stats.lyapunov_violations;
  }
  return stats;
}

FieldGrid vector_field_grid(const Policy& policy, const Observation& obs, const Vector& lo, const Vector& hi,
                            std::size_t nx, std::size_t ny) {
  if (policy.dim() != 2) throw ValidationError("vector field grids need d_c = 2");
  if (nx < 2 || ny < 2) throw ValidationError("grid resolution must be >= 2 per dimension");
  if (lo.size() != 2 || hi.size() != 2 || !lo.allFinite() || !hi.allFinite() || !(lo.array() < hi.array()).all()) {
    throw ValidationError("grid bounds need finite lo < hi in both dimensions");
  }
  const Vector features = policy.features(obs);
  FieldGrid grid;
  grid.nx = nx;
  grid.ny = ny;
  grid.points.reserve(nx * ny);
  grid.velocities.reserve(nx * ny);
  for (std::size_t iy = 0; iy < ny; ++iy) {
    for (std::size_t ix = 0; ix < nx; ++ix) {
      Vector p(2);
      p(0) = lo(0) + (hi(0) - lo(0)) * static_cast<double>(ix) / static_cast<double>(nx - 1);
      p(1) = lo(1) + (hi(1) - lo(1)) * static_cast<double>(iy) / static_cast<double>(ny - 1);
      grid.velocities.push_back(policy.velocity(p, features));
      grid.points.push_back(std::move(p));
    }
  }
  return grid;
}

namespace {

void put(std::string& out, double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  out.append(buf, res.ptr);
}

ordered_json vec(const Vector& v) { return std::vector<double>(v.begin(), v.end()); }

}  // namespace

std::string rollout_csv(const RolloutRecord& record) {
  const Eigen::Index dc = record.attractor.size();
  std::string out = "t";
  for (Eigen::Index i = 0; i < dc; ++i) out += ",xc_" + std::to_string(i);
  for (Eigen::Index i = 0; i < dc; ++i) out += ",v_" + std::to_string(i);
  out += ",V\n";
  for (std::size_t k = 0; k < record.states.size(); ++k) {
    put(out, record.times[k]);
    for (Eigen::Index i = 0; i < dc; ++i) out += ',', put(out, record.states[k](i));
    for (Eigen::Index i = 0; i < dc; ++i) out += ',', put(out, record.velocities[k](i));
    out += ',';
    put(out, record.lyapunov[k]);
    out += '\n';
  }
  return out;
}

std::string rollout_json(const RolloutRecord& record) {
  ordered_json doc;
  doc["dt"] = record.dt;
  doc["attractor"] = vec(record.attractor);
  doc["converged"] = record.converged;
  doc["convergence_time"] = record.convergence_time ? ordered_json(*record.convergence_time) : ordered_json();
  doc["events"] = ordered_json::array();
  for (const auto& e : record.events) {
    ordered_json ev;
    ev["kind"] = e.kind == EventKind::kPerturbation ? "perturbation" : "observation_switch";
    ev["step"] = e.step;
    ev["t"] = e.time;
    if (e.kind == EventKind::kPerturbation) ev["delta"] = vec(e.delta);
    doc["events"].push_back(std::move(ev));
  }
  doc["t"] = record.times;
  doc["xc"] = ordered_json::array();
  doc["v"] = ordered_json::array();
  for (std::size_t k = 0; k < record.states.size(); ++k) {
    doc["xc"].push_back(vec(record.states[k]));
    doc["v"].push_back(vec(record.velocities[k]));
  }
  doc["V"] = record.lyapunov;
  return doc.dump();
}

std::string field_csv(const FieldGrid& grid) {
  std::string out = "x0,x1,v0,v1\n";
  for (std::size_t i = 0; i < grid.points.size(); ++i) {
    put(out, grid.points[i](0));
    out += ',';
    put(out, grid.points[i](1));
    out += ',';
    put(out, grid.velocities[i](0));
    out += ',';
    put(out, grid.velocities[i](1));
    out += '\n';
  }
  return out;
}

std::string field_json(const FieldGrid& grid) {
  ordered_json doc;
  doc["nx"] = grid.nx;
  doc["ny"] = grid.ny;
  doc["points"] = ordered_json::array();
  doc["velocities"] = ordered_json::array();
  for (std::size_t i = 0; i < grid.points.size(); ++i) {
    doc["points"].push_back(vec(grid.points[i]));
    doc["velocities"].push_back(vec(grid.velocities[i]));
  }
  return doc.dump();
}

namespace {

double parse_real(std::string_view text, const char* what) {
  double value = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size() || !std::isfinite(value)) {
    throw ValidationError(std::string("bad ") + what + " '" + std::string(text) + "'");
  }
  return value;
}

Observation parse_payload(std::string_view text, const WeightNetSpec& net) {
  const auto colon = text.find(':');
  const std::string_view kind = text.substr(0, colon);
  const std::string_view arg = colon == std::string_view::npos ? std::string_view{} : text.substr(colon + 1);
  const bool vector_net = net.input_kind == ObservationKind::kVector;
  if (kind == "none") {
    if (!vector_net || net.dim_observation != 0) throw ValidationError("this policy needs an observation");
    return Vector{};
  }
  if (kind == "onehot") {
    if (!vector_net || net.dim_observation == 0) throw ValidationError("onehot needs a vector observation policy");
    std::size_t k = 0;
    const auto [end, ec] = std::from_chars(arg.data(), arg.data() + arg.size(), k);
    if (arg.empty() || ec != std::errc() || end != arg.data() + arg.size()) {
      throw ValidationError("bad onehot index '" + std::string(arg) + "'");
    }
    if (k >= net.dim_observation) {
      throw ValidationError("onehot index " + std::to_string(k) + " out of range for d_nc = " +
                            std::to_string(net.dim_observation));
    }
    Vector v = Vector::Zero(static_cast<Eigen::Index>(net.dim_observation));
    v(static_cast<Eigen::Index>(k)) = 1.0;
    return v;
  }
  if (kind == "vector") {
    if (!vector_net) throw ValidationError("vector payload given to an image policy");
    std::vector<double> values;
    std::string_view rest = arg;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      values.push_back(parse_real(rest.substr(0, comma), "vector entry"));
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
    if (values.size() != net.dim_observation) {
      throw ValidationError("vector payload has " + std::to_string(values.size()) + " entries, d_nc = " +
                            std::to_string(net.dim_observation));
    }
    return Vector(Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size())));
  }
  if (kind == "image") {
    if (vector_net) throw ValidationError("image payload given to a vector policy");
    ImagePtr img;
    try {
      img = load_pgm(std::string(arg));
    } catch (const ParseError& e) {
      throw ValidationError(std::string(arg) + ": " + e.what());
    }
    if (img->height != net.image_height || img->width != net.image_width) {
      throw ValidationError("image is " + std::to_string(img->height) + "x" + std::to_string(img->width) +
                            ", the policy expects " + std::to_string(net.image_height) + "x" +
                            std::to_string(net.image_width));
    }
    return img;
  }
  if (kind == "image64") {
    if (vector_net) throw ValidationError("image payload given to a vector policy");
    std::vector<double> px;
    try {
      px = encoding::decode_doubles_base64(arg);
    } catch (const ParseError& e) {
      throw ValidationError(std::string("image64: ") + e.what());
    }
    if (px.size() != net.image_height * net.image_width) {
      throw ValidationError("image64 payload has " + std::to_string(px.size()) + " pixels, the policy expects " +
                            std::to_string(net.image_height) + "x" + std::to_string(net.image_width));
    }
    for (double v : px) {
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("image64 pixels must lie in [0, 1]");
    }
    return std::make_shared<const Image>(net.image_height, net.image_width, std::move(px));
  }
  throw ValidationError("unknown observation payload '" + std::string(text) + "'");
}

}  // namespace

ObservationSpec parse_observation_spec(std::string_view text, const WeightNetSpec& net) {
  ObservationSpec spec;
  if (text.starts_with("static:")) {
    text.remove_prefix(7);
  } else if (text.starts_with("switch:")) {
    text.remove_prefix(7);
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) throw ValidationError("switch needs switch:<t>:<payload>");
    spec.switch_time = parse_real(text.substr(0, colon), "switch time");
    if (*spec.switch_time < 0.0) throw ValidationError("switch time must be >= 0");
    text.remove_prefix(colon + 1);
  }
  spec.payload = parse_payload(text, net);
  return spec;
}

ObservationProvider make_provider(const std::vector<ObservationSpec>& specs, const WeightNetSpec& net) {
  std::size_t first = 0;
  Observation initial;
  if (!specs.empty() && !specs.front().switch_time) {
    initial = specs.front().payload;
    first = 1;
  } else if (net.input_kind == ObservationKind::kVector && net.dim_observation == 0) {
    initial = Vector{};
  } else {
    throw ValidationError("the first observation must be static, e.g. static:onehot:0");
  }
  std::vector<ScheduledObservation> switches;
  for (std::size_t i = first; i < specs.size(); ++i) {
    if (!specs[i].switch_time) throw ValidationError("only the first observation may be static");
    switches.push_back({*specs[i].switch_time, specs[i].payload});
  }
  return ObservationProvider(std::move(initial), std::move(switches));
}

}  // namespace stableflow
