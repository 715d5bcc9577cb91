#include "live_rollout.hpp"

#include "stableflow/error.hpp"

#include "json_support.hpp"

#include <spdlog/spdlog.h>

namespace stableflow::service {

using detail::ordered_json;

namespace {

ordered_json vec(const Vector& v) { return std::vector<double>(v.begin(), v.end()); }

}  // namespace

LiveRollout::LiveRollout(std::string id, std::shared_ptr<const LoadedModel> model, Vector x0, Observation obs,
                         std::string obs_label, LiveRolloutOptions options)
    : id_(std::move(id)),
      model_(std::move(model)),
      options_(std::move(options)),
      stepper_(model_->policy, std::move(x0), obs, options_.rollout),
      obs_label_(std::move(obs_label)) {
  if (!(options_.tick_hz > 0.0) || !std::isfinite(options_.tick_hz)) throw ValidationError("tick_hz must be positive");
  if (options_.steps_per_tick == 0) throw ValidationError("steps_per_tick must be >= 1");
  emit("state", state_json(), false);
  ticker_ = std::thread([this] { run(); });
}

LiveRollout::~LiveRollout() { stop(); }

std::string LiveRollout::state_json() const {
  ordered_json d;
  d["t"] = stepper_.time();
  d["step"] = stepper_.steps();
  d["xc"] = vec(stepper_.state());
  d["v"] = vec(stepper_.velocity());
  d["V"] = stepper_.lyapunov();
  return d.dump();
}

void LiveRollout::emit(const std::string& kind, const std::string& data_json, bool terminal) {
  {
    std::lock_guard lock(mutex_);
    if (closed_) return;
    log_.push_back("id: " + std::to_string(log_.size()) + "\nevent: " + kind + "\ndata: " + data_json + "\n\n");
    last_t_ = stepper_.time();
    last_step_ = stepper_.steps();
    if (terminal) {
      closed_ = true;
      terminal_kind_ = kind;
    }
  }
  changed_.notify_all();
}

bool LiveRollout::perturb(Vector delta) {
  {
    std::lock_guard lock(mutex_);
    if (closed_) return false;
    commands_.push_back({true, std::move(delta), Vector{}, {}});
  }
  changed_.notify_all();
  return true;
}

bool LiveRollout::switch_observation(Observation obs, std::string label) {
  {
    std::lock_guard lock(mutex_);
    if (closed_) return false;
    commands_.push_back({false, Vector{}, std::move(obs), std::move(label)});
  }
  changed_.notify_all();
  return true;
}

void LiveRollout::stop() {
  {
    std::lock_guard lock(mutex_);
    stop_requested_ = true;
  }
  changed_.notify_all();
  std::lock_guard join_lock(join_mutex_);
  if (ticker_.joinable()) ticker_.join();
}

bool LiveRollout::closed() const {
  std::lock_guard lock(mutex_);
  return closed_;
}

bool LiveRollout::read_events(std::size_t cursor, std::vector<std::string>& out,
                              std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mutex_);
  changed_.wait_for(lock, timeout, [&] { return log_.size() > cursor || closed_; });
  for (std::size_t i = cursor; i < log_.size(); ++i) out.push_back(log_[i]);
  return closed_;
}

std::string LiveRollout::status_json() const {
  std::lock_guard lock(mutex_);
  ordered_json d;
  d["rollout_id"] = id_;
  d["model_id"] = model_->id;
  d["t"] = last_t_;
  d["step"] = last_step_;
  d["dt"] = options_.rollout.dt;
  d["tick_hz"] = options_.tick_hz;
  d["steps_per_tick"] = options_.steps_per_tick;
  d["obs"] = obs_label_;
  d["events"] = log_.size();
  d["closed"] = closed_;
  d["terminal"] = closed_ ? ordered_json(terminal_kind_) : ordered_json();
  return d.dump();
}

void LiveRollout::run() {
  using clock = std::chrono::steady_clock;
  const auto period = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / options_.tick_hz));
  const double dt = options_.rollout.dt;
  auto next = clock::now();
  try {
    while (true) {
      next += period;
      std::deque<Command> commands;
      {
        std::unique_lock lock(mutex_);
        if (changed_.wait_until(lock, next, [&] { return stop_requested_; })) break;
        commands.swap(commands_);
      }
      for (Command& c : commands) {
        ordered_json d;
        d["t"] = stepper_.time();
        d["step"] = stepper_.steps();
        if (c.is_perturbation) {
          stepper_.perturb(c.delta);
          d["delta"] = vec(c.delta);
          d["xc"] = vec(stepper_.state());
          d["V"] = stepper_.lyapunov();
          emit("perturb", d.dump(), false);
        } else {
          stepper_.set_observation(c.obs);
          {
            std::lock_guard lock(mutex_);
            obs_label_ = c.label;
          }
          d["obs"] = c.label;
          emit("obs", d.dump(), false);
        }
      }
      for (std::size_t k = 0; k < options_.steps_per_tick && !stepper_.converged(); ++k) stepper_.step();
      emit("state", state_json(), false);

      bool pending = false;
      {
        std::lock_guard lock(mutex_);
        pending = !commands_.empty();
      }
      if (stepper_.converged() && !pending) {
        ordered_json d;
        d["t"] = stepper_.time();
        d["step"] = stepper_.steps();
        d["convergence_time"] = static_cast<double>(stepper_.steps() + 1 - stepper_.streak()) * dt;
        d["xc"] = vec(stepper_.state());
        d["V"] = stepper_.lyapunov();
        emit("converged", d.dump(), true);
        return;
      }
      if (stepper_.time() >= options_.rollout.horizon - 0.5 * dt) {
        emit("horizon", state_json(), true);
        return;
      }
      // a stalled ticker resumes at the current time instead of bursting to catch up
      if (clock::now() > next + 10 * period) next = clock::now();
    }
  } catch (const RolloutDivergedError& e) {
    ordered_json d;
    d["step"] = e.step();
    d["message"] = e.what();
    emit("diverged", d.dump(), true);
    return;
  } catch (const std::exception& e) {
    spdlog::warn("rollout {} failed: {}", id_, e.what());
    ordered_json d;
    d["message"] = e.what();
    emit("failed", d.dump(), true);
    return;
  }
  emit("stopped", state_json(), true);
}

}  // namespace stableflow::service
