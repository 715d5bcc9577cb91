#pragma once

#include "stableflow/dataset.hpp"
#include "stableflow/rollout.hpp"

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace stableflow {

struct EvalOptions {
  Integrator method = Integrator::kRk4;
  /// The convergence check rolls out for this multiple of the demo duration.
  double horizon_factor = 1.5;
};

struct ReproductionError {
  double rmse = 0.0;             ///< task units, time-indexed
  double normalized_rmse = 0.0;  ///< rmse / demo bounding-box diagonal
  double bbox_diagonal = 0.0;
  ConvergenceStats convergence;  ///< of the extended rollout
  bool converged = false;
};

/// Replays the demo's initial state and observations through the policy at
/// the demo dt, compares x_c sample by sample, then checks convergence on a
/// rollout of horizon_factor times the demo duration.
ReproductionError reproduction_error(const Policy& policy, const Trajectory& demo, const EvalOptions& options = {});

/// Observation schedule of a demo: its first payload plus a switch wherever it changes.
ObservationProvider demo_observations(const Trajectory& demo);

struct TaskReport {
  std::string label;
  ReproductionError error;
};

/// Per-task reproduction. Throws ValidationError when the demos do not share
/// their final point to within 1e-6 (the fixed-attractor assumption).
std::vector<TaskReport> multitask_eval(const Policy& policy, const std::vector<Trajectory>& demos,
                                       const EvalOptions& options = {});

/// max over t of ||w_a(t) - w_b(t)||_inf between the weight trajectories of
/// every pair of task reproductions (entry [a][b]); rollouts are compared up
/// to the shorter one.
std::vector<std::vector<double>> task_separation(const Policy& policy, const std::vector<Trajectory>& demos);

struct EvalReport {
  std::vector<TaskReport> tasks;
  StabilityCertificate certificate;
  double worst_normalized_rmse = 0.0;
  bool all_converged = false;
};

EvalReport evaluate(const Policy& policy, const std::vector<Trajectory>& demos, const EvalOptions& options = {});

std::string eval_report_json(const EvalReport& report);
/// Fixed-width table for humans.
std::string eval_report_table(const EvalReport& report);

}  // namespace stableflow
