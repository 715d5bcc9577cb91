#include "stableflow/cli.hpp"

#include "stableflow/dataset.hpp"
#include "stableflow/error.hpp"
#include "stableflow/evalsuite.hpp"
#include "stableflow/fixtures.hpp"
#include "stableflow/image_io.hpp"
#include "stableflow/rollout.hpp"
#include "stableflow/service.hpp"
#include "stableflow/trainer.hpp"

#include "json_support.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <ostream>

namespace stableflow::cli {

using detail::ordered_json;

namespace {

std::shared_ptr<spdlog::logger> make_logger(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
  sink->set_pattern("%v");
  auto log = std::make_shared<spdlog::logger>("stableflow", std::move(sink));
  log->set_level(spdlog::level::info);
  if (const char* env = std::getenv("STABLEFLOW_LOG")) {
    const std::string level = env;
    if (level == "debug" || level == "info" || level == "warn" || level == "error" || level == "off") {
      log->set_level(spdlog::level::from_str(level));
    } else if (!level.empty()) {
      log->warn("STABLEFLOW_LOG={} is not one of debug|info|warn|error|off; using info", level);
    }
  }
  return log;
}

std::vector<double> parse_reals(std::string_view text, const std::string& what) {
  std::vector<double> values;
  std::string_view rest = text;
  if (rest.empty()) throw ValidationError(what + " is empty");
  while (true) {
    const auto comma = rest.find(',');
    const std::string_view item = rest.substr(0, comma);
    double v = 0.0;
    const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || end != item.data() + item.size() || !std::isfinite(v)) {
      throw ValidationError("bad " + what + " '" + std::string(text) + "'");
    }
    values.push_back(v);
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return values;
}

Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// `t:dx,dy,..`
PerturbationEvent parse_perturbation(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ValidationError("perturbation '" + text + "' must look like t:dx,dy");
  const auto t = parse_reals(std::string_view(text).substr(0, colon), "perturbation time");
  if (t.size() != 1) throw ValidationError("perturbation '" + text + "' must look like t:dx,dy");
  return {t[0], to_vector(parse_reals(std::string_view(text).substr(colon + 1), "perturbation delta"))};
}

ordered_json certificate_json(const StabilityCertificate& cert) {
  ordered_json c;
  c["per_system_min_eig"] = cert.per_system_min_eig;
  c["weight_head"] = "softmax";
  c["verdict"] = cert.verdict;
  return c;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config;
  std::optional<std::size_t> systems;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> batch;
  std::optional<std::string> net;
  std::optional<std::size_t> smooth;
  bool standardize = false;
  std::size_t log_every = 1;
};

int cmd_train(const TrainArgs& a, std::ostream& out, spdlog::logger& log) {
  TrainConfig config;
  if (!a.config.empty()) config = parse_train_config(detail::read_file(a.config), config);
  if (a.systems) config.n_systems = *a.systems;
  if (a.epochs) config.epochs = *a.epochs;
  if (a.lr) config.learning_rate = *a.lr;
  if (a.seed) config.seed = *a.seed;
  if (a.batch) config.batch_size = *a.batch;
  if (a.net) config.net = parse_net_descriptor(*a.net);
  if (a.smooth) config.smoothing_window = *a.smooth;
  if (a.standardize) config.standardize = true;
  config.validate();

  DatasetOptions dopt;
  dopt.smoothing_window = config.smoothing_window;
  const Dataset data = build_dataset(load_trajectories(a.data), dopt);
  make_net_spec(config, data.layout);
  log.info("training N={} net={} on {} samples for {} epochs", config.n_systems, config.net.to_string(),
           data.samples.size(), config.epochs);
  const Checkpoint ckpt = train(data, config, [&](const TrainProgress& p) {
    if (p.epoch % a.log_every == 0 || p.epoch == p.epochs) {
      log.info("epoch {}/{} loss {:.6e}", p.epoch, p.epochs, p.loss);
    }
    return true;
  });
  save_checkpoint(ckpt, a.out);

  ordered_json summary;
  summary["checkpoint"] = a.out;
  summary["d_c"] = ckpt.params.dim();
  summary["n_systems"] = ckpt.params.system_count();
  summary["epochs_run"] = ckpt.training.epochs_run;
  summary["initial_loss"] = ckpt.training.initial_loss;
  summary["final_loss"] = ckpt.training.final_loss;
  summary["dataset_fingerprint"] = ckpt.training.dataset_fingerprint;
  summary["certificate"] = verify_certificate(ckpt.params).verdict;
  out << summary.dump() << "\n";
  return kOk;
}

struct RolloutArgs {
  std::string ckpt;
  std::string x0;
  std::vector<std::string> obs;
  std::vector<std::string> perturb;
  std::optional<double> dt;
  double horizon = 30.0;
  std::string method = "rk4";
  std::optional<double> max_speed;
  std::string out;
  std::string format = "csv";
};

int cmd_rollout(const RolloutArgs& a, std::ostream& out, spdlog::logger& log) {
  RolloutOptions options;
  options.method = integrator_from_string(a.method);
  options.horizon = a.horizon;
  options.max_speed = a.max_speed;
  if (a.format != "csv" && a.format != "json") throw ValidationError("--format must be csv or json");
  const Vector x0 = to_vector(parse_reals(a.x0, "--x0"));
  std::vector<PerturbationEvent> pushes;
  for (const auto& p : a.perturb) pushes.push_back(parse_perturbation(p));

  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  options.dt = a.dt ? *a.dt : ckpt.training.dataset_dt;
  options.validate();
  const WeightNetSpec& net = ckpt.params.weight_net.spec;
  std::vector<ObservationSpec> specs;
  for (const auto& o : a.obs) specs.push_back(parse_observation_spec(o, net));
  const ObservationProvider provider = make_provider(specs, net);

  const Policy policy(ckpt.params);
  const RolloutRecord rec = integrate(policy, x0, provider, pushes, options);
  detail::write_file(a.out, a.format == "csv" ? rollout_csv(rec) : rollout_json(rec));
  const ConvergenceStats stats = convergence_stats(rec);
  if (stats.lyapunov_violations > 0) {
    log.warn("{} Lyapunov increase(s) outside event steps; try a smaller --dt or rk4", stats.lyapunov_violations);
  }

  ordered_json summary;
  summary["out"] = a.out;
  summary["converged"] = rec.converged;
  summary["convergence_time"] = stats.convergence_time ? ordered_json(*stats.convergence_time) : ordered_json();
  summary["final_error"] = stats.final_error;
  summary["lyapunov_violations"] = stats.lyapunov_violations;
  summary["steps"] = rec.size();
  summary["dt"] = rec.dt;
  summary["events"] = ordered_json::array();
  for (const auto& e : rec.events) {
    ordered_json j;
    j["kind"] = e.kind == EventKind::kPerturbation ? "perturbation" : "observation_switch";
    j["t"] = e.time;
    j["step"] = e.step;
    summary["events"].push_back(std::move(j));
  }
  out << summary.dump() << "\n";
  return kOk;
}

int cmd_verify(const std::string& path, std::ostream& out, spdlog::logger& log) {
  const StabilityCertificate cert = verify_certificate(load_checkpoint(path).params);
  out << certificate_json(cert).dump() << "\n";
  if (!cert.verdict) {
    log.error("certificate fails: some symmetric part is not positive definite");
    return kCertificateFailed;
  }
  return kOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string method = "rk4";
  double horizon_factor = 1.5;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  EvalOptions options;
  options.method = integrator_from_string(a.method);
  options.horizon_factor = a.horizon_factor;
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const std::vector<Trajectory> demos = load_trajectories(a.data);
  const EvalReport report = evaluate(Policy(ckpt.params), demos, options);
  err << eval_report_table(report);
  out << eval_report_json(report) << "\n";
  return kOk;
}

struct FieldArgs {
  std::string ckpt;
  std::string lo;
  std::string hi;
  std::size_t res = 20;
  std::optional<std::size_t> nx;
  std::optional<std::size_t> ny;
  std::string obs;
  std::string out;
};

int cmd_field(const FieldArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const Vector lo = to_vector(parse_reals(a.lo, "--lo"));
  const Vector hi = to_vector(parse_reals(a.hi, "--hi"));
  const WeightNetSpec& net = ckpt.params.weight_net.spec;
  std::vector<ObservationSpec> specs;
  if (!a.obs.empty()) specs.push_back(parse_observation_spec(a.obs, net));
  const ObservationProvider provider = make_provider(specs, net);
  const FieldGrid grid =
      vector_field_grid(Policy(ckpt.params), provider.initial(), lo, hi, a.nx.value_or(a.res), a.ny.value_or(a.res));
  detail::write_file(a.out, field_csv(grid));
  ordered_json summary;
  summary["out"] = a.out;
  summary["nx"] = grid.nx;
  summary["ny"] = grid.ny;
  summary["points"] = grid.points.size();
  out << summary.dump() << "\n";
  return kOk;
}

struct FixtureArgs {
  std::string kind;
  std::string out;
  std::size_t image_size = 32;
  std::string signs_dir;
};

int cmd_fixture(const FixtureArgs& a, std::ostream& out) {
  std::vector<Trajectory> trajs;
  if (a.kind == "linear") {
    trajs.push_back(fixtures::linear_demo());
  } else if (a.kind == "onehot") {
    trajs = fixtures::multitask_onehot();
  } else if (a.kind == "images") {
    trajs = fixtures::multitask_images({}, a.image_size);
  } else {
    trajs.push_back(fixtures::shaped_demo(fixtures::shape_from_string(a.kind)));
  }
  save_trajectories(trajs, a.out);
  ordered_json summary;
  summary["out"] = a.out;
  summary["trajectories"] = trajs.size();
  summary["samples"] = trajs.front().size();
  summary["signs"] = ordered_json::array();
  if (!a.signs_dir.empty()) {
    std::filesystem::create_directories(a.signs_dir);
    for (const auto shape : fixtures::all_shapes()) {
      const auto path = std::filesystem::path(a.signs_dir) / (fixtures::to_string(shape) + ".pgm");
      save_pgm(*fixtures::sign_image(shape, a.image_size, a.image_size), path);
      summary["signs"].push_back(path.string());
    }
  }
  out << summary.dump() << "\n";
  return kOk;
}

struct ServeArgs {
  std::string bind = "127.0.0.1:8080";
  std::string store = "stableflow-store";
  std::size_t max_jobs = 2;
  std::string cors_origin = "*";
  std::size_t max_body_mib = 32;
};

int cmd_serve(const ServeArgs& a, std::ostream& out, const std::shared_ptr<spdlog::logger>& log) {
  service::ServiceOptions options;
  options.store_dir = a.store;
  options.max_concurrent_jobs = a.max_jobs;
  options.cors_origin = a.cors_origin;
  options.max_body_bytes = a.max_body_mib << 20;
  service::BindAddress address = service::parse_bind(a.bind);
  spdlog::set_default_logger(log);
  service::Server server(options);
  address.port = server.bind(address);
  ordered_json hello;
  hello["listening"] = address.host + ":" + std::to_string(address.port);
  hello["store"] = a.store;
  out << hello.dump() << std::endl;
  log->info("serving on http://{}:{}", address.host, address.port);
  server.run();
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const auto log = make_logger(err);
  CLI::App app{"stableflow: stable neural dynamical policies"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Fit a policy to demonstrations and write a checkpoint");
  train_cmd->add_option("--data", ta.data, "Demonstration file (JSON)")->required();
  train_cmd->add_option("--out", ta.out, "Checkpoint to write")->required();
  train_cmd->add_option("--config", ta.config, "TrainConfig JSON; flags override it");
  train_cmd->add_option("--systems", ta.systems, "Number of linear systems N");
  train_cmd->add_option("--epochs", ta.epochs, "Training epochs");
  train_cmd->add_option("--lr", ta.lr, "Adam learning rate");
  train_cmd->add_option("--seed", ta.seed, "Seed for initialization and shuffling");
  train_cmd->add_option("--batch", ta.batch, "Mini-batch size");
  train_cmd->add_option("--net", ta.net, "mlp:32,32 | conv | conv:32,32");
  train_cmd->add_option("--smooth", ta.smooth, "Odd moving-average window applied to x_c before differencing");
  train_cmd->add_flag("--standardize", ta.standardize, "Standardize the weight-net inputs");
  train_cmd->add_option("--log-every", ta.log_every, "Log the loss every k epochs")->check(CLI::PositiveNumber);

  RolloutArgs ra;
  auto* rollout_cmd = app.add_subcommand("rollout", "Integrate the closed loop from x0 and write the trajectory");
  rollout_cmd->add_option("--ckpt", ra.ckpt, "Checkpoint")->required();
  rollout_cmd->add_option("--x0", ra.x0, "Initial x_c, comma-separated")->required();
  rollout_cmd->add_option("--obs", ra.obs, "static:<payload> then switch:<t>:<payload>, repeatable");
  rollout_cmd->add_option("--perturb", ra.perturb, "t:dx,dy displacement, repeatable");
  rollout_cmd->add_option("--dt", ra.dt, "Step (default: the training data dt)");
  rollout_cmd->add_option("--horizon", ra.horizon, "Simulated seconds")->capture_default_str();
  rollout_cmd->add_option("--method", ra.method, "euler | rk4")->capture_default_str();
  rollout_cmd->add_option("--max-speed", ra.max_speed, "Direction-preserving speed clamp");
  rollout_cmd->add_option("--out", ra.out, "Output file")->required();
  rollout_cmd->add_option("--format", ra.format, "csv | json")->capture_default_str();

  std::string verify_path;
  auto* verify_cmd = app.add_subcommand("verify", "Check the stability certificate of a checkpoint");
  verify_cmd->add_option("--ckpt", verify_path, "Checkpoint")->required();

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Reproduction error and convergence on demonstrations");
  eval_cmd->add_option("--ckpt", ea.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", ea.data, "Demonstration file (JSON)")->required();
  eval_cmd->add_option("--method", ea.method, "euler | rk4")->capture_default_str();
  eval_cmd->add_option("--horizon-factor", ea.horizon_factor, "Convergence rollout length / demo duration")
      ->capture_default_str();

  FieldArgs fa;
  auto* field_cmd = app.add_subcommand("field", "Sample the policy velocity on a 2D grid");
  field_cmd->add_option("--ckpt", fa.ckpt, "Checkpoint")->required();
  field_cmd->add_option("--lo", fa.lo, "Lower corner x,y")->required();
  field_cmd->add_option("--hi", fa.hi, "Upper corner x,y")->required();
  field_cmd->add_option("--res", fa.res, "Points per axis")->capture_default_str();
  field_cmd->add_option("--nx", fa.nx, "Points along x (overrides --res)");
  field_cmd->add_option("--ny", fa.ny, "Points along y (overrides --res)");
  field_cmd->add_option("--obs", fa.obs, "Static observation");
  field_cmd->add_option("--out", fa.out, "CSV to write")->required();

  FixtureArgs xa;
  auto* fixture_cmd = app.add_subcommand("fixture", "Write a synthetic demonstration set");
  fixture_cmd->add_option("--kind", xa.kind, "linear | sine | line | curve | onehot | images")->required();
  fixture_cmd->add_option("--out", xa.out, "Demonstration file to write")->required();
  fixture_cmd->add_option("--image-size", xa.image_size, "Sign image side for --kind images")
      ->capture_default_str()
      ->check(CLI::Range(4, 256));
  fixture_cmd->add_option("--signs-dir", xa.signs_dir, "Also write the sign images as PGM files here");

  ServeArgs sa;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("--bind", sa.bind, "host:port")->capture_default_str();
  serve_cmd->add_option("--store", sa.store, "Directory for datasets and models")->capture_default_str();
  serve_cmd->add_option("--max-jobs", sa.max_jobs, "Concurrent training jobs")->capture_default_str();
  serve_cmd->add_option("--cors-origin", sa.cors_origin, "Access-Control-Allow-Origin")->capture_default_str();
  serve_cmd->add_option("--max-body-mib", sa.max_body_mib, "Request size limit")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, err, err);
    return code == 0 ? kOk : kInvalidInput;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(ta, out, *log);
    if (rollout_cmd->parsed()) return cmd_rollout(ra, out, *log);
    if (verify_cmd->parsed()) return cmd_verify(verify_path, out, *log);
    if (eval_cmd->parsed()) return cmd_eval(ea, out, err);
    if (field_cmd->parsed()) return cmd_field(fa, out);
    if (fixture_cmd->parsed()) return cmd_fixture(xa, out);
    if (serve_cmd->parsed()) return cmd_serve(sa, out, log);
  } catch (const TrainingDivergedError& e) {
    log->error("training diverged at epoch {}: {}", e.epoch(), e.what());
    return kTrainingDiverged;
  } catch (const RolloutDivergedError& e) {
    log->error("rollout diverged at step {}: {}", e.step(), e.what());
    return kRolloutDiverged;
  } catch (const ParseError& e) {
    log->error("error: {}", e.what());
    return kInvalidInput;
  } catch (const ValidationError& e) {
    log->error("error: {}", e.what());
    return kInvalidInput;
  } catch (const ObservationShapeError& e) {
    log->error("error: {}", e.what());
    return kInvalidInput;
  } catch (const UnsupportedVersionError& e) {
    log->error("error: {}", e.what());
    return kInvalidInput;
  } catch (const InvalidParameterError& e) {
    log->error("error: {}", e.what());
    return kInvalidInput;
  } catch (const std::exception& e) {
    log->error("internal error: {}", e.what());
    return kFailure;
  }
  return kFailure;
}

}  // namespace stableflow::cli
