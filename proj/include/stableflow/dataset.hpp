#pragma once

#include "stableflow/state.hpp"

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace stableflow {

/// State-only demonstration sampled at a uniform rate.
struct Trajectory {
  double dt = 0.0;
  std::vector<StateVector> states;
  std::string label;  ///< optional task name, carried through files

  std::size_t size() const { return states.size(); }
  double duration() const { return dt * static_cast<double>(states.empty() ? 0 : states.size() - 1); }
};

/// Throws ValidationError unless M >= 3, dt > 0 and all states share shape.
void validate_trajectory(const Trajectory& traj);

/// Layout shared by every state of a trajectory set.
struct DatasetLayout {
  std::size_t dim_controllable = 0;
  ObservationKind obs_kind = ObservationKind::kVector;
  std::size_t dim_observation = 0;
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  double dt = 0.0;

  bool operator==(const DatasetLayout&) const = default;
};

/// Validates every trajectory and that they agree on layout and dt.
DatasetLayout common_layout(const std::vector<Trajectory>& trajs);

/// Parses the trajectory JSON document. Schema problems raise ParseError
/// naming the field path (or line for syntax errors); invariant violations
/// raise ValidationError.
std::vector<Trajectory> parse_trajectories(std::string_view json_text);
std::vector<Trajectory> load_trajectories(const std::filesystem::path& path);

/// Canonical JSON for a trajectory set; parse_trajectories reads it back bit-exactly.
std::string serialize_trajectories(const std::vector<Trajectory>& trajs);
void save_trajectories(const std::vector<Trajectory>& trajs, const std::filesystem::path& path);

/// Velocity targets: central differences inside, one-sided at both ends.
std::vector<Vector> estimate_velocities(const Trajectory& traj);

/// Mean of the final controllable state over all trajectories.
Vector compute_attractor(const std::vector<Trajectory>& trajs);

/// Centered moving average of x_c with an odd window (1 = identity); the
/// window shrinks near the ends. Observations are left untouched.
Trajectory smooth_moving_average(const Trajectory& traj, std::size_t window);

struct Sample {
  StateVector state;
  Vector target_velocity;
};

struct DatasetOptions {
  std::size_t smoothing_window = 1;  ///< 1 disables smoothing
};

/// Immutable training set derived from demonstrations.
struct Dataset {
  std::vector<Trajectory> trajectories;
  std::vector<Sample> samples;
  Vector attractor;
  DatasetLayout layout;
};

Dataset build_dataset(std::vector<Trajectory> trajs, const DatasetOptions& options = {});

/// Per-dimension mean and standard deviation of the weight-net raw inputs
/// ([x_c; x_nc] for vectors, x_c for images). Constant dimensions get std 1.
struct InputStandardization {
  Vector mean;
  Vector stddev;
};

InputStandardization compute_input_standardization(const Dataset& data);

struct DatasetSummary {
  std::size_t trajectories = 0;
  std::size_t samples = 0;
  Vector lower;  ///< bounding box of x_c
  Vector upper;
  double max_speed = 0.0;
};

DatasetSummary summarize(const Dataset& data);

/// Axis-aligned bounding-box diagonal of a trajectory's x_c.
double bounding_box_diagonal(const Trajectory& traj);

/// SHA-256 of the canonical serialization.
std::string dataset_fingerprint(const std::vector<Trajectory>& trajs);

}  // namespace stableflow
