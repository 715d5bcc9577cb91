#include "stableflow/service.hpp"

#include "stableflow/dataset.hpp"
#include "stableflow/error.hpp"
#include "stableflow/rollout.hpp"
#include "stableflow/trainer.hpp"

#include "json_support.hpp"
#include "live_rollout.hpp"
#include "service_store.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <thread>

namespace stableflow::service {

using detail::json;
using detail::ordered_json;

BindAddress parse_bind(std::string_view text) {
  BindAddress out;
  std::string_view port = text;
  const auto colon = text.rfind(':');
  if (colon != std::string_view::npos) {
    if (colon > 0) out.host = std::string(text.substr(0, colon));
    port = text.substr(colon + 1);
  }
  int value = -1;
  const auto [end, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
  if (port.empty() || ec != std::errc() || end != port.data() + port.size() || value < 0 || value > 65535) {
    throw ValidationError("bad bind address '" + std::string(text) + "', expected host:port");
  }
  out.port = value;
  return out;
}

namespace {

constexpr const char* kJson = "application/json";

/// Thrown by handlers to answer with a specific status.
struct HttpError : std::runtime_error {
  HttpError(int s, const std::string& what, std::string f = {})
      : std::runtime_error(what), status(s), field(std::move(f)) {}
  int status;
  std::string field;
};

void send_error(httplib::Response& res, int status, const std::string& message, const std::string& field = {}) {
  ordered_json body;
  body["error"] = message;
  if (!field.empty()) body["field"] = field;
  res.status = status;
  res.set_content(body.dump(), kJson);
}

json body_json(const httplib::Request& req) {
  try {
    const json doc = detail::parse_json(req.body);
    if (!doc.is_object()) throw HttpError(400, "request body must be a JSON object");
    return doc;
  } catch (const ParseError& e) {
    throw HttpError(400, std::string("malformed JSON: ") + e.what(), e.where());
  } catch (const ValidationError& e) {
    throw HttpError(400, e.what());
  }
}

/// ValidationError from request contents that are well-formed but do not fit the model.
template <typename F>
auto unprocessable(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ValidationError& e) {
    throw HttpError(422, e.what());
  } catch (const ObservationShapeError& e) {
    throw HttpError(422, e.what());
  }
}

Vector parse_pair(const std::string& text, const char* what) {
  std::vector<double> values;
  std::string_view rest = text;
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string_view item = rest.substr(0, comma);
    double v = 0.0;
    const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || end != item.data() + item.size() || !std::isfinite(v)) {
      throw HttpError(400, std::string("bad ") + what + " '" + text + "'", what);
    }
    values.push_back(v);
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
  }
  if (values.size() != 2) throw HttpError(400, std::string(what) + " needs two comma-separated numbers", what);
  return (Vector(2) << values[0], values[1]).finished();
}

std::size_t parse_size(const std::string& text, const char* what) {
  std::size_t v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || end != text.data() + text.size()) {
    throw HttpError(400, std::string("bad ") + what + " '" + text + "'", what);
  }
  return v;
}

/// Observation from a request; file paths are never read on behalf of a client.
ObservationSpec observation_from(const std::string& spec, const WeightNetSpec& net) {
  if (spec.find("image:") != std::string::npos) {
    throw HttpError(422, "image file paths are not accepted over HTTP; send image64:<base64> instead");
  }
  return unprocessable([&] { return parse_observation_spec(spec, net); });
}

std::string default_spec(const WeightNetSpec& net) {
  if (net.input_kind == ObservationKind::kVector && net.dim_observation == 0) return "none";
  throw HttpError(422, "this model needs an observation (obs)", "obs");
}

ordered_json vec(const Vector& v) { return std::vector<double>(v.begin(), v.end()); }

ordered_json observation_layout(const WeightNetSpec& net) {
  ordered_json o;
  if (net.input_kind == ObservationKind::kImage) {
    o["kind"] = "image";
    o["image_shape"] = {net.image_height, net.image_width};
  } else {
    o["kind"] = "vector";
    o["d_nc"] = net.dim_observation;
  }
  return o;
}

enum class JobState { kQueued, kRunning, kDone, kFailed };

const char* to_string(JobState s) {
  switch (s) {
    case JobState::kQueued: return "queued";
    case JobState::kRunning: return "running";
    case JobState::kDone: return "done";
    case JobState::kFailed: return "failed";
  }
  return "failed";
}

struct Job {
  std::string id;
  std::string dataset_id;
  TrainConfig config;
  JobState state = JobState::kQueued;
  std::size_t epoch = 0;
  std::optional<double> loss;
  std::optional<double> final_loss;
  std::string model_id;
  std::string error;

  std::string to_json() const {
    ordered_json d;
    d["job_id"] = id;
    d["dataset_id"] = dataset_id;
    d["state"] = to_string(state);
    ordered_json p;
    p["epoch"] = epoch;
    p["epochs"] = config.epochs;
    p["loss"] = loss ? ordered_json(*loss) : ordered_json();
    d["progress"] = std::move(p);
    d["model_id"] = model_id.empty() ? ordered_json() : ordered_json(model_id);
    if (final_loss) d["final_loss"] = *final_loss;
    if (state == JobState::kFailed) d["error"] = error;
    return d.dump();
  }
};

}  // namespace

struct Server::Impl {
  explicit Impl(ServiceOptions opts) : options(std::move(opts)), store(options.store_dir), ids(std::random_device{}()) {
    if (options.max_concurrent_jobs == 0) throw ValidationError("max_concurrent_jobs must be >= 1");
    if (!(options.default_tick_hz > 0.0) || options.default_tick_hz > options.max_tick_hz) {
      throw ValidationError("default tick rate must lie in (0, max_tick_hz]");
    }
    routes();
    for (std::size_t i = 0; i < options.max_concurrent_jobs; ++i) workers.emplace_back([this] { work(); });
  }

  ~Impl() { shutdown(); }

  ServiceOptions options;
  Store store;
  httplib::Server http;
  std::atomic<bool> stopping{false};
  std::once_flag shutdown_once;
  std::thread listener;

  std::mutex id_mutex;
  std::mt19937_64 ids;

  std::mutex jobs_mutex;
  std::condition_variable jobs_cv;
  std::map<std::string, Job> jobs;
  std::deque<std::string> queue;
  std::vector<std::thread> workers;

  std::mutex models_mutex;
  std::map<std::string, std::shared_ptr<const LoadedModel>> models;

  std::mutex rollouts_mutex;
  std::map<std::string, std::shared_ptr<LiveRollout>> rollouts;
  std::deque<std::string> rollout_order;

  std::string fresh_id() {
    std::lock_guard lock(id_mutex);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(ids()));
    return buf;
  }

  void shutdown() {
    std::call_once(shutdown_once, [this] {
      stopping = true;
      jobs_cv.notify_all();
      std::vector<std::shared_ptr<LiveRollout>> live;
      {
        std::lock_guard lock(rollouts_mutex);
        for (auto& [id, r] : rollouts) live.push_back(r);
      }
      for (auto& r : live) r->stop();
      http.stop();
      if (listener.joinable()) listener.join();
      for (auto& w : workers) w.join();
    });
  }

  // ---- training jobs ----

  void work() {
    while (true) {
      std::string id;
      std::string dataset_id;
      TrainConfig config;
      {
        std::unique_lock lock(jobs_mutex);
        jobs_cv.wait(lock, [&] { return stopping || !queue.empty(); });
        if (stopping) return;
        id = queue.front();
        queue.pop_front();
        Job& job = jobs.at(id);
        job.state = JobState::kRunning;
        dataset_id = job.dataset_id;
        config = job.config;
      }
      try {
        const auto content = store.content("datasets", dataset_id);
        if (!content) throw ValidationError("dataset " + dataset_id + " disappeared from the store");
        DatasetOptions dopt;
        dopt.smoothing_window = config.smoothing_window;
        const Dataset data = build_dataset(parse_trajectories(*content), dopt);
        spdlog::info("job {}: training on dataset {}", id, dataset_id);
        const Checkpoint ckpt = train(data, config, [&](const TrainProgress& p) {
          std::lock_guard lock(jobs_mutex);
          Job& job = jobs.at(id);
          job.epoch = p.epoch;
          job.loss = p.loss;
          return !stopping.load();
        });
        if (stopping) throw Error("cancelled: the server stopped");
        const StabilityCertificate cert = verify_certificate(ckpt.params);
        ordered_json meta;
        meta["dataset_id"] = dataset_id;
        meta["job_id"] = id;
        meta["d_c"] = ckpt.params.dim();
        meta["n_systems"] = ckpt.params.system_count();
        meta["observation"] = observation_layout(ckpt.params.weight_net.spec);
        meta["attractor"] = vec(ckpt.params.attractor);
        meta["certificate"] = cert.verdict;
        meta["epochs_run"] = ckpt.training.epochs_run;
        meta["final_loss"] = ckpt.training.final_loss;
        meta["dataset_dt"] = ckpt.training.dataset_dt;
        const std::string model_id = store.put("models", serialize_checkpoint(ckpt), meta.dump());
        std::lock_guard lock(jobs_mutex);
        Job& job = jobs.at(id);
        job.state = JobState::kDone;
        job.model_id = model_id;
        job.final_loss = ckpt.training.final_loss;
        spdlog::info("job {}: done, model {}", id, model_id);
      } catch (const std::exception& e) {
        spdlog::warn("job {} failed: {}", id, e.what());
        std::lock_guard lock(jobs_mutex);
        Job& job = jobs.at(id);
        job.state = JobState::kFailed;
        job.error = e.what();
      }
    }
  }

  // ---- models ----

  std::shared_ptr<const LoadedModel> model(const std::string& id) {
    {
      std::lock_guard lock(models_mutex);
      const auto it = models.find(id);
      if (it != models.end()) return it->second;
    }
    const auto content = store.content("models", id);
    if (!content) throw HttpError(404, "unknown model " + id);
    auto loaded = std::make_shared<const LoadedModel>(id, parse_checkpoint(*content));
    std::lock_guard lock(models_mutex);
    return models.emplace(id, std::move(loaded)).first->second;
  }

  // ---- live rollouts ----

  std::shared_ptr<LiveRollout> rollout(const std::string& id) {
    std::lock_guard lock(rollouts_mutex);
    const auto it = rollouts.find(id);
    if (it == rollouts.end()) throw HttpError(404, "unknown rollout " + id);
    return it->second;
  }

  /// Drops the oldest finished rollouts beyond the retention limit. Caller holds rollouts_mutex.
  void evict_closed() {
    std::size_t closed = 0;
    for (const auto& [id, r] : rollouts) closed += r->closed() ? 1 : 0;
    for (auto it = rollout_order.begin(); it != rollout_order.end() && closed > options.retained_closed_rollouts;) {
      const auto found = rollouts.find(*it);
      if (found != rollouts.end() && found->second->closed()) {
        rollouts.erase(found);
        it = rollout_order.erase(it);
        --closed;
      } else {
        ++it;
      }
    }
  }

  // ---- routes ----

  template <typename F>
  httplib::Server::Handler guard(F handler) {
    return [handler](const httplib::Request& req, httplib::Response& res) {
      try {
        handler(req, res);
      } catch (const HttpError& e) {
        send_error(res, e.status, e.what(), e.field);
      } catch (const ParseError& e) {
        send_error(res, 400, e.what(), e.where());
      } catch (const ValidationError& e) {
        send_error(res, 400, e.what());
      } catch (const std::exception& e) {
        spdlog::error("{} {}: {}", req.method, req.path, e.what());
        send_error(res, 500, e.what());
      }
    };
  }

  void routes() {
    http.set_payload_max_length(options.max_body_bytes);
    http.set_default_headers({{"Access-Control-Allow-Origin", options.cors_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type, Last-Event-ID"}});
    http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status, httplib::status_message(res.status));
    });
    http.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    http.Post("/api/datasets", guard([this](const httplib::Request& req, httplib::Response& res) {
      const Dataset data = build_dataset(parse_trajectories(req.body));
      const DatasetSummary summary = summarize(data);
      ordered_json meta;
      meta["trajectories"] = summary.trajectories;
      meta["samples"] = summary.samples;
      meta["d_c"] = data.layout.dim_controllable;
      ordered_json obs;
      if (data.layout.obs_kind == ObservationKind::kImage) {
        obs["kind"] = "image";
        obs["image_shape"] = {data.layout.image_height, data.layout.image_width};
      } else {
        obs["kind"] = "vector";
        obs["d_nc"] = data.layout.dim_observation;
      }
      meta["observation"] = std::move(obs);
      meta["dt"] = data.layout.dt;
      meta["attractor"] = vec(data.attractor);
      meta["lower"] = vec(summary.lower);
      meta["upper"] = vec(summary.upper);
      const std::string id = store.put("datasets", req.body, meta.dump());
      meta["dataset_id"] = id;
      res.status = 201;
      res.set_content(meta.dump(), kJson);
    }));

    http.Get(R"(/api/datasets/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto meta = store.meta("datasets", id);
      if (!meta) throw HttpError(404, "unknown dataset " + id);
      json doc = json::parse(*meta);
      doc["dataset_id"] = id;
      res.set_content(doc.dump(), kJson);
    }));

    http.Post("/api/train", guard([this](const httplib::Request& req, httplib::Response& res) {
      const json body = body_json(req);
      const std::string dataset_id = detail::text(detail::field(body, "dataset_id", ""), "dataset_id");
      const auto content = store.content("datasets", dataset_id);
      if (!content) throw HttpError(404, "unknown dataset " + dataset_id);
      TrainConfig config;
      if (body.contains("config")) {
        try {
          config = parse_train_config(body["config"].dump());
        } catch (const ParseError& e) {
          throw HttpError(422, e.what(), e.where());
        } catch (const ValidationError& e) {
          throw HttpError(422, e.what());
        }
      }
      // architecture problems (conv on vector data) surface now, not in the worker
      unprocessable([&] { return make_net_spec(config, common_layout(parse_trajectories(*content))); });
      Job job;
      job.id = fresh_id();
      job.dataset_id = dataset_id;
      job.config = config;
      const std::string reply = job.to_json();
      {
        std::lock_guard lock(jobs_mutex);
        queue.push_back(job.id);
        jobs.emplace(job.id, std::move(job));
      }
      jobs_cv.notify_one();
      res.status = 202;
      res.set_content(reply, kJson);
    }));

    http.Get(R"(/api/jobs/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(jobs_mutex);
      const auto it = jobs.find(req.matches[1]);
      if (it == jobs.end()) throw HttpError(404, "unknown job " + std::string(req.matches[1]));
      res.set_content(it->second.to_json(), kJson);
    }));

    http.Get(R"(/api/models/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto meta = store.meta("models", id);
      if (!meta) throw HttpError(404, "unknown model " + id);
      json doc = json::parse(*meta);
      doc["model_id"] = id;
      res.set_content(doc.dump(), kJson);
    }));

    http.Get(R"(/api/models/([^/]+)/field)", guard([this](const httplib::Request& req, httplib::Response& res) {
      const auto m = model(req.matches[1]);
      const PolicyParams& p = m->ckpt.params;
      if (p.dim() != 2) throw HttpError(422, "vector fields need d_c = 2, this model has d_c = " + std::to_string(p.dim()));
      const WeightNetSpec& net = p.weight_net.spec;
      const std::string spec = req.has_param("obs") ? req.get_param_value("obs") : default_spec(net);
      const ObservationSpec obs = observation_from(spec, net);
      if (obs.switch_time) throw HttpError(422, "field queries take a static observation", "obs");
      const Vector lo = req.has_param("lo") ? parse_pair(req.get_param_value("lo"), "lo") : Vector(p.attractor.array() - 1.0);
      const Vector hi = req.has_param("hi") ? parse_pair(req.get_param_value("hi"), "hi") : Vector(p.attractor.array() + 1.0);
      std::size_t nx = req.has_param("res") ? parse_size(req.get_param_value("res"), "res") : 20;
      std::size_t ny = nx;
      if (req.has_param("nx")) nx = parse_size(req.get_param_value("nx"), "nx");
      if (req.has_param("ny")) ny = parse_size(req.get_param_value("ny"), "ny");
      if (nx > 512 || ny > 512) throw HttpError(422, "resolution is capped at 512 per axis");
      const FieldGrid grid = unprocessable([&] { return vector_field_grid(m->policy, obs.payload, lo, hi, nx, ny); });
      res.set_content(field_json(grid), kJson);
    }));

    http.Post("/api/rollouts", guard([this](const httplib::Request& req, httplib::Response& res) {
      const json body = body_json(req);
      const std::string model_id = detail::text(detail::field(body, "model_id", ""), "model_id");
      const auto m = model(model_id);
      const WeightNetSpec& net = m->ckpt.params.weight_net.spec;
      const Vector x0 = detail::real_vector(detail::field(body, "x0", ""), "x0");
      const std::string spec = body.contains("obs") ? detail::text(body["obs"], "obs") : default_spec(net);
      const ObservationSpec obs = observation_from(spec, net);
      if (obs.switch_time) throw HttpError(422, "start with a static observation; switch later via /obs", "obs");

      LiveRolloutOptions lo;
      lo.rollout.dt = body.contains("dt") ? detail::real(body["dt"], "dt")
                                          : (m->ckpt.training.dataset_dt > 0.0 ? m->ckpt.training.dataset_dt : 0.01);
      lo.rollout.horizon = body.contains("horizon") ? detail::real(body["horizon"], "horizon") : 120.0;
      if (body.contains("method")) {
        lo.rollout.method = unprocessable([&] { return integrator_from_string(detail::text(body["method"], "method")); });
      }
      if (body.contains("max_speed") && !body["max_speed"].is_null()) {
        lo.rollout.max_speed = detail::real(body["max_speed"], "max_speed");
      }
      lo.tick_hz = body.contains("tick_hz") ? detail::real(body["tick_hz"], "tick_hz") : options.default_tick_hz;
      lo.steps_per_tick = body.contains("steps_per_tick") ? detail::count(body["steps_per_tick"], "steps_per_tick") : 1;
      if (!(lo.tick_hz > 0.0) || lo.tick_hz > options.max_tick_hz) {
        throw HttpError(422, "tick_hz must lie in (0, " + std::to_string(options.max_tick_hz) + "]", "tick_hz");
      }
      if (lo.rollout.horizon > 3600.0) throw HttpError(422, "horizon is capped at 3600 s", "horizon");

      std::lock_guard lock(rollouts_mutex);
      std::size_t live = 0;
      for (const auto& [id, r] : rollouts) live += r->closed() ? 0 : 1;
      if (live >= options.max_live_rollouts) throw HttpError(429, "too many live rollouts");
      const std::string id = fresh_id();
      auto r = unprocessable([&] { return std::make_shared<LiveRollout>(id, m, x0, obs.payload, spec, lo); });
      rollouts.emplace(id, std::move(r));
      rollout_order.push_back(id);
      evict_closed();
      ordered_json reply;
      reply["rollout_id"] = id;
      reply["stream"] = "/api/rollouts/" + id + "/stream";
      reply["dt"] = lo.rollout.dt;
      reply["tick_hz"] = lo.tick_hz;
      res.status = 201;
      res.set_content(reply.dump(), kJson);
    }));

    http.Get(R"(/api/rollouts/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
      res.set_content(rollout(req.matches[1])->status_json(), kJson);
    }));

    http.Delete(R"(/api/rollouts/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto r = rollout(id);
      r->stop();
      std::lock_guard lock(rollouts_mutex);
      rollouts.erase(id);
      rollout_order.erase(std::remove(rollout_order.begin(), rollout_order.end(), id), rollout_order.end());
      res.status = 204;
    }));

    http.Get(R"(/api/rollouts/([^/]+)/stream)", guard([this](const httplib::Request& req, httplib::Response& res) {
      const auto r = rollout(req.matches[1]);
      auto cursor = std::make_shared<std::size_t>(0);
      if (req.has_header("Last-Event-ID")) {
        *cursor = parse_size(req.get_header_value("Last-Event-ID"), "Last-Event-ID") + 1;
      }
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider("text/event-stream", [this, r, cursor](std::size_t, httplib::DataSink& sink) {
        std::vector<std::string> frames;
        const bool final = r->read_events(*cursor, frames, std::chrono::milliseconds(200));
        for (const auto& f : frames) {
          if (!sink.write(f.data(), f.size())) return false;
        }
        *cursor += frames.size();
        if (final || stopping) sink.done();
        return true;
      });
    }));

    http.Post(R"(/api/rollouts/([^/]+)/perturb)", guard([this](const httplib::Request& req, httplib::Response& res) {
      const auto r = rollout(req.matches[1]);
      const json body = body_json(req);
      const Vector delta = detail::real_vector(detail::field(body, "delta", ""), "delta");
      if (delta.size() != static_cast<Eigen::Index>(r->model().ckpt.params.dim())) {
        throw HttpError(422, "delta needs d_c = " + std::to_string(r->model().ckpt.params.dim()) + " entries", "delta");
      }
      if (!r->perturb(delta)) throw HttpError(409, "rollout is closed");
      res.status = 202;
      res.set_content(R"({"queued":true})", kJson);
    }));

    http.Post(R"(/api/rollouts/([^/]+)/obs)", guard([this](const httplib::Request& req, httplib::Response& res) {
      const auto r = rollout(req.matches[1]);
      const json body = body_json(req);
      const std::string spec = detail::text(detail::field(body, "spec", ""), "spec");
      const ObservationSpec obs = observation_from(spec, r->model().ckpt.params.weight_net.spec);
      if (obs.switch_time) throw HttpError(422, "switches take effect on the next tick; send the payload only", "spec");
      if (!r->switch_observation(obs.payload, spec)) throw HttpError(409, "rollout is closed");
      res.status = 202;
      res.set_content(R"({"queued":true})", kJson);
    }));
  }
};

Server::Server(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}

Server::~Server() { impl_->shutdown(); }

int Server::bind(const BindAddress& address) {
  int port = address.port;
  if (port == 0) {
    port = impl_->http.bind_to_any_port(address.host);
  } else if (!impl_->http.bind_to_port(address.host, port)) {
    port = -1;
  }
  if (port < 0) throw Error("cannot bind " + address.host + ":" + std::to_string(address.port));
  return port;
}

void Server::run() { impl_->http.listen_after_bind(); }

int Server::start(const BindAddress& address) {
  const int port = bind(address);
  impl_->listener = std::thread([this] { run(); });
  impl_->http.wait_until_ready();
  return port;
}

void Server::stop() { impl_->shutdown(); }

}  // namespace stableflow::service
