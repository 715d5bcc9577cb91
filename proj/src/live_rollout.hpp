#pragma once

#include "stableflow/rollout.hpp"
#include "stableflow/trainer.hpp"

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace stableflow::service {

/// A checkpoint with its materialized evaluator; shared read-only by rollouts.
struct LoadedModel {
  LoadedModel(std::string model_id, Checkpoint c) : id(std::move(model_id)), ckpt(std::move(c)), policy(ckpt.params) {}
  std::string id;
  Checkpoint ckpt;
  Policy policy;
};

struct LiveRolloutOptions {
  RolloutOptions rollout;  ///< horizon bounds the simulated time
  double tick_hz = 60.0;
  std::size_t steps_per_tick = 1;
};

/// Interactive rollout. A ticker thread owns the integrator; other threads only
/// queue commands and read the event log. Every tick drains the queue (echoing
/// each command as an event), advances steps_per_tick steps and appends a
/// state event. The log ends with one terminal event: converged, horizon,
/// diverged or stopped.
class LiveRollout {
 public:
  LiveRollout(std::string id, std::shared_ptr<const LoadedModel> model, Vector x0, Observation obs,
              std::string obs_label, LiveRolloutOptions options);
  ~LiveRollout();

  LiveRollout(const LiveRollout&) = delete;
  LiveRollout& operator=(const LiveRollout&) = delete;

  const std::string& id() const { return id_; }
  const LoadedModel& model() const { return *model_; }

  /// False once the log is closed; the command is then dropped.
  bool perturb(Vector delta);
  bool switch_observation(Observation obs, std::string label);
  /// Closes with a `stopped` event unless already closed; joins the ticker.
  void stop();
  bool closed() const;

  /// Waits up to `timeout` for events past `cursor` and appends them to `out`.
  /// Returns true when the log is closed and `out` reaches its end.
  bool read_events(std::size_t cursor, std::vector<std::string>& out, std::chrono::milliseconds timeout) const;
  std::string status_json() const;

 private:
  struct Command {
    bool is_perturbation = true;
    Vector delta;
    Observation obs;
    std::string label;
  };

  void run();
  void emit(const std::string& kind, const std::string& data_json, bool terminal);
  std::string state_json() const;

  const std::string id_;
  const std::shared_ptr<const LoadedModel> model_;
  const LiveRolloutOptions options_;
  RolloutStepper stepper_;  // ticker thread only after construction

  mutable std::mutex mutex_;
  mutable std::condition_variable changed_;
  std::deque<Command> commands_;
  std::vector<std::string> log_;
  bool closed_ = false;
  bool stop_requested_ = false;
  std::string terminal_kind_;
  std::string obs_label_;
  double last_t_ = 0.0;
  std::size_t last_step_ = 0;
  std::mutex join_mutex_;
  std::thread ticker_;
};

}  // namespace stableflow::service
