#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

namespace stableflow::service {

struct ServiceOptions {
  std::filesystem::path store_dir = "stableflow-store";
  std::size_t max_concurrent_jobs = 2;
  std::size_t max_body_bytes = std::size_t{32} << 20;
  std::string cors_origin = "*";
  double default_tick_hz = 60.0;
  double max_tick_hz = 1000.0;
  /// Rollouts still running; creating one more answers 429.
  std::size_t max_live_rollouts = 32;
  /// Finished rollouts kept for late stream readers and status queries.
  std::size_t retained_closed_rollouts = 64;
};

struct BindAddress {
  std::string host = "127.0.0.1";
  int port = 8080;
};

/// "host:port", ":port" (loopback) or "port". Throws ValidationError.
BindAddress parse_bind(std::string_view text);

/// HTTP front end: dataset store, training jobs, vector fields and live rollouts.
class Server {
 public:
  explicit Server(ServiceOptions options);
  ~Server();

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Port 0 picks a free port. Returns the bound port; throws Error on failure.
  int bind(const BindAddress& address);
  /// Serves until stop(). Requires bind().
  void run();
  /// bind() then run() on a background thread; returns once requests are accepted.
  int start(const BindAddress& address);
  /// Cancels running jobs, closes live rollouts and stops the listener.
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace stableflow::service
