#include "stableflow/evalsuite.hpp"

#include "stableflow/error.hpp"

#include "json_support.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace stableflow {

using detail::ordered_json;

ObservationProvider demo_observations(const Trajectory& demo) {
  if (demo.states.empty()) throw ValidationError("demo has no states");
  std::vector<ScheduledObservation> switches;
  const Observation* current = &demo.states.front().non_controllable;
  for (std::size_t k = 1; k < demo.states.size(); ++k) {
    const Observation& obs = demo.states[k].non_controllable;
    if (!same_payload(obs, *current)) {
      switches.push_back({static_cast<double>(k) * demo.dt, obs});
      current = &obs;
    }
  }
  return ObservationProvider(demo.states.front().non_controllable, std::move(switches));
}

ReproductionError reproduction_error(const Policy& policy, const Trajectory& demo, const EvalOptions& options) {
  validate_trajectory(demo);
  if (demo.states.front().dim_controllable() != policy.dim()) {
    throw ValidationError("demo d_c = " + std::to_string(demo.states.front().dim_controllable()) +
                          " does not match the policy d_c = " + std::to_string(policy.dim()));
  }
  if (!(options.horizon_factor >= 1.0)) throw ValidationError("horizon factor must be >= 1");
  const ObservationProvider provider = demo_observations(demo);
  RolloutOptions ro;
  ro.dt = demo.dt;
  ro.method = options.method;
  ro.horizon = demo.duration();
  const RolloutRecord replay = integrate(policy, demo.states.front().controllable, provider, {}, ro);

  ReproductionError out;
  double sum = 0.0;
  for (std::size_t k = 0; k < demo.states.size(); ++k) {
    sum += (replay.states[k] - demo.states[k].controllable).squaredNorm();
  }
  out.rmse = std::sqrt(sum / static_cast<double>(demo.states.size()));
  out.bbox_diagonal = bounding_box_diagonal(demo);
  out.normalized_rmse = out.bbox_diagonal > 0.0 ? out.rmse / out.bbox_diagonal : out.rmse;

  ro.horizon = options.horizon_factor * demo.duration();
  const RolloutRecord extended = integrate(policy, demo.states.front().controllable, provider, {}, ro);
  out.convergence = convergence_stats(extended);
  out.converged = extended.converged;
  return out;
}

namespace {

std::string task_label(const Trajectory& demo, std::size_t index) {
  return demo.label.empty() ? "task" + std::to_string(index) : demo.label;
}

}  // namespace

std::vector<TaskReport> multitask_eval(const Policy& policy, const std::vector<Trajectory>& demos,
                                       const EvalOptions& options) {
  if (demos.empty()) throw ValidationError("no demonstrations to evaluate");
  const Vector& goal = demos.front().states.back().controllable;
  for (std::size_t k = 1; k < demos.size(); ++k) {
    const double gap = (demos[k].states.back().controllable - goal).norm();
    if (gap > 1e-6) {
      throw ValidationError("fixture error: demo " + std::to_string(k) + " ends " + std::to_string(gap) +
                            " away from demo 0; the tasks must share one attractor");
    }
  }
  std::vector<TaskReport> out;
  for (std::size_t k = 0; k < demos.size(); ++k) {
    out.push_back({task_label(demos[k], k), reproduction_error(policy, demos[k], options)});
  }
  return out;
}

std::vector<std::vector<double>> task_separation(const Policy& policy, const std::vector<Trajectory>& demos) {
  std::vector<std::vector<Vector>> weights(demos.size());
  for (std::size_t k = 0; k < demos.size(); ++k) {
    const ObservationProvider provider = demo_observations(demos[k]);
    RolloutOptions ro;
    ro.dt = demos[k].dt;
    ro.horizon = demos[k].duration();
    const RolloutRecord rec = integrate(policy, demos[k].states.front().controllable, provider, {}, ro);
    // the weights follow the demo's observation schedule along the rollout
    for (std::size_t t = 0; t < rec.states.size(); ++t) {
      const Vector f = policy.features(demos[k].states[std::min(t, demos[k].size() - 1)].non_controllable);
      weights[k].push_back(policy.weights(rec.states[t], f));
    }
  }
  std::vector<std::vector<double>> sep(demos.size(), std::vector<double>(demos.size(), 0.0));
  for (std::size_t a = 0; a < demos.size(); ++a) {
    for (std::size_t b = 0; b < demos.size(); ++b) {
      const std::size_t n = std::min(weights[a].size(), weights[b].size());
      for (std::size_t t = 0; t < n; ++t) {
        sep[a][b] = std::max(sep[a][b], (weights[a][t] - weights[b][t]).cwiseAbs().maxCoeff());
      }
    }
  }
  return sep;
}

EvalReport evaluate(const Policy& policy, const std::vector<Trajectory>& demos, const EvalOptions& options) {
  EvalReport report;
  report.tasks = multitask_eval(policy, demos, options);
  report.certificate = verify_certificate(policy.params());
  report.all_converged = true;
  for (const auto& t : report.tasks) {
    report.worst_normalized_rmse = std::max(report.worst_normalized_rmse, t.error.normalized_rmse);
    report.all_converged = report.all_converged && t.error.converged;
  }
  return report;
}

std::string eval_report_json(const EvalReport& report) {
  ordered_json doc;
  doc["tasks"] = ordered_json::array();
  for (const auto& t : report.tasks) {
    ordered_json o;
    o["label"] = t.label;
    o["rmse"] = t.error.rmse;
    o["normalized_rmse"] = t.error.normalized_rmse;
    o["bbox_diagonal"] = t.error.bbox_diagonal;
    o["converged"] = t.error.converged;
    const auto& c = t.error.convergence;
    o["convergence_time"] = c.convergence_time ? ordered_json(*c.convergence_time) : ordered_json();
    o["final_error"] = c.final_error;
    o["lyapunov_violations"] = c.lyapunov_violations;
    doc["tasks"].push_back(std::move(o));
  }
  ordered_json cert;
  cert["per_system_min_eig"] = report.certificate.per_system_min_eig;
  cert["weight_head"] = "softmax";
  cert["verdict"] = report.certificate.verdict;
  doc["certificate"] = std::move(cert);
  doc["worst_normalized_rmse"] = report.worst_normalized_rmse;
  doc["all_converged"] = report.all_converged;
  return doc.dump();
}

std::string eval_report_table(const EvalReport& report) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %12s %10s %10s %10s %6s\n", "task", "rmse", "nrmse", "conv_t", "final_err",
                "viol");
  out += line;
  for (const auto& t : report.tasks) {
    const auto& c = t.error.convergence;
    char conv[32];
    if (c.convergence_time) {
      std::snprintf(conv, sizeof conv, "%.3f", *c.convergence_time);
    } else {
      std::snprintf(conv, sizeof conv, "-");
    }
    std::snprintf(line, sizeof line, "%-12.12s %12.6f %10.5f %10s %10.2e %6zu\n", t.label.c_str(), t.error.rmse,
                  t.error.normalized_rmse, conv, c.final_error, c.lyapunov_violations);
    out += line;
  }
  double min_eig = report.certificate.per_system_min_eig.empty()
                       ? 0.0
                       : *std::min_element(report.certificate.per_system_min_eig.begin(),
                                           report.certificate.per_system_min_eig.end());
  std::snprintf(line, sizeof line, "certificate %s (min eig %.3e), all converged: %s\n",
                report.certificate.verdict ? "holds" : "FAILS", min_eig, report.all_converged ? "yes" : "no");
  out += line;
  return out;
}

}  // namespace stableflow
