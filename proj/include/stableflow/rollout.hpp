#pragma once

#include "stableflow/policy.hpp"

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace stableflow {

/// Convergence: ||x_c - x*|| below this tolerance for kConvergenceWindow consecutive steps.
inline constexpr double kConvergenceTolerance = 1e-4;
inline constexpr std::size_t kConvergenceWindow = 10;
/// V increases larger than this count as Lyapunov violations.
inline constexpr double kLyapunovSlack = 1e-10;

enum class Integrator { kEuler, kRk4 };

std::string to_string(Integrator method);
/// Throws ValidationError for anything but "euler" / "rk4".
Integrator integrator_from_string(std::string_view name);

struct ScheduledObservation {
  double time = 0.0;
  Observation payload;
};

/// Non-controllable state over the course of a rollout: a fixed payload,
/// optionally replaced at strictly increasing switch times.
class ObservationProvider {
 public:
  explicit ObservationProvider(Observation initial, std::vector<ScheduledObservation> switches = {});

  const Observation& initial() const { return initial_; }
  const std::vector<ScheduledObservation>& switches() const { return switches_; }

 private:
  Observation initial_;
  std::vector<ScheduledObservation> switches_;
};

/// Instantaneous displacement of x_c (the kinematic stand-in for a push).
struct PerturbationEvent {
  double time = 0.0;
  Vector delta;
};

struct RolloutOptions {
  double dt = 1e-3;
  double horizon = 10.0;
  Integrator method = Integrator::kRk4;
  std::optional<double> max_speed;  ///< direction-preserving clamp on ||x_c'||
  /// End early once converged and no event is pending.
  bool stop_when_converged = false;

  void validate() const;
};

enum class EventKind { kPerturbation, kObservationSwitch };

struct AppliedEvent {
  EventKind kind = EventKind::kPerturbation;
  std::size_t step = 0;
  double time = 0.0;
  Vector delta;  ///< perturbations only
};

struct RolloutRecord {
  double dt = 0.0;
  Vector attractor;
  std::vector<double> times;
  std::vector<Vector> states;      ///< x_c after any events of that step
  std::vector<Vector> velocities;  ///< commanded x_c' at each recorded state
  std::vector<double> lyapunov;    ///< V at each recorded state
  std::vector<AppliedEvent> events;
  bool converged = false;
  std::optional<double> convergence_time;  ///< start of the final in-tolerance streak

  std::size_t size() const { return states.size(); }
};

/// Single-owner integrator state, used for batch rollouts and live sessions.
class RolloutStepper {
 public:
  /// `policy` must outlive the stepper.
  RolloutStepper(const Policy& policy, Vector x0, const Observation& obs, const RolloutOptions& options);

  double time() const { return static_cast<double>(steps_) * options_.dt; }
  std::size_t steps() const { return steps_; }
  const Vector& state() const { return x_; }
  const Vector& velocity() const { return v_; }
  double lyapunov() const;
  /// Consecutive steps (including this one) with the error inside tolerance.
  std::size_t streak() const { return streak_; }
  bool converged() const { return streak_ >= kConvergenceWindow; }

  void perturb(const Vector& delta);
  void set_observation(const Observation& obs);
  /// Advances one dt. Throws RolloutDivergedError on a non-finite state.
  void step();

 private:
  Vector field(const Vector& x) const;
  void refresh();

  const Policy* policy_;
  RolloutOptions options_;
  Vector x_;
  Vector v_;
  Vector features_;
  std::size_t steps_ = 0;
  std::size_t streak_ = 0;
};

/// Closed-loop rollout from x0. Perturbations and observation switches are
/// applied at the first step whose time reaches the event time.
RolloutRecord integrate(const Policy& policy, const Vector& x0, const ObservationProvider& provider,
                        const std::vector<PerturbationEvent>& perturbations, const RolloutOptions& options);
RolloutRecord integrate(const PolicyParams& params, const StateVector& x0,
                        const std::vector<PerturbationEvent>& perturbations, const RolloutOptions& options);

struct ConvergenceStats {
  double final_error = 0.0;
  std::optional<double> convergence_time;
  std::size_t lyapunov_violations = 0;
};

/// Throws ValidationError on an empty record.
ConvergenceStats convergence_stats(const RolloutRecord& record);

struct FieldGrid {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::vector<Vector> points;      ///< row-major: index = iy * nx + ix
  std::vector<Vector> velocities;
};

/// Policy velocities on a regular 2D grid at a fixed observation.
/// Throws ValidationError unless d_c = 2, resolution >= 2 and lo < hi.
FieldGrid vector_field_grid(const Policy& policy, const Observation& obs, const Vector& lo, const Vector& hi,
                            std::size_t nx, std::size_t ny);

/// `t,xc_0..,v_0..,V`
std::string rollout_csv(const RolloutRecord& record);
std::string rollout_json(const RolloutRecord& record);
/// `x0,x1,v0,v1`
std::string field_csv(const FieldGrid& grid);
std::string field_json(const FieldGrid& grid);

/// One item of the observation mini-grammar:
///   static:onehot:<k> | static:vector:<a,b,..> | static:image:<pgm path> | static:none
///   static:image64:<base64 of row-major little-endian float64 pixels>
///   switch:<t>:<payload>
/// The `static:` prefix may be omitted.
struct ObservationSpec {
  std::optional<double> switch_time;
  Observation payload;
};

/// Throws ValidationError when the text is malformed or the payload does not
/// fit the weight network (one-hot index, d_nc, image shape).
ObservationSpec parse_observation_spec(std::string_view text, const WeightNetSpec& net);

/// First entry must be static (or absent when the policy takes no observation);
/// the rest must be switches.
ObservationProvider make_provider(const std::vector<ObservationSpec>& specs, const WeightNetSpec& net);

}  // namespace stableflow
