#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "dpsr/common.hpp"
#include "dpsr/eval.hpp"
#include "dpsr/servable.hpp"

// After the Eigen headers: <resolv.h>, pulled in by httplib, defines a _res macro.
#include <httplib.h>

namespace dpsr {

/// Request counters and a sliding window of recent latencies.
class RequestStats {
 public:
  explicit RequestStats(std::size_t window = 10000) : window_(window) {}

  void record(double ms, bool ok) {
    std::lock_guard lock(mu_);
    ++requests_;
    if (!ok) ++errors_;
    latencies_.push_back(ms);
    if (latencies_.size() > window_) latencies_.pop_front();
  }

  nlohmann::json to_json() const {
    std::lock_guard lock(mu_);
    const double up = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    std::vector<double> lat(latencies_.begin(), latencies_.end());
    return {{"requests", requests_},
            {"errors", errors_},
            {"uptime_s", up},
            {"qps", up > 0 ? static_cast<double>(requests_) / up : 0.0},
            {"p50_ms", percentile(lat, 0.50)},
            {"p99_ms", percentile(lat, 0.99)}};
  }

 private:
  mutable std::mutex mu_;
  std::size_t window_;
  std::deque<double> latencies_;
  std::uint64_t requests_ = 0;
  std::uint64_t errors_ = 0;
  std::chrono::steady_clock::time_point started_ = std::chrono::steady_clock::now();
};

struct ServerOptions {
  std::size_t threads = 64;     // each keep-alive connection holds a worker
  std::size_t max_queue = 1024;  // pending connections beyond this are refused
  std::size_t payload_limit = 1 << 20;
};

inline int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNotFound: return 404;
    case ErrorKind::kUnavailable: return 503;
    case ErrorKind::kParse:
    case ErrorKind::kInvalidArgument:
    case ErrorKind::kDimensionMismatch: return 400;
    default: return 500;
  }
}

inline void send_error(httplib::Response& res, ErrorKind kind, std::string_view message) {
  res.status = http_status(kind);
  res.set_content(error_json(kind, message).dump(), "application/json");
}

/// HTTP front end for one servable: POST /v1/retrieve, GET /healthz, GET /stats.
class RetrievalServer {
 public:
  explicit RetrievalServer(std::shared_ptr<const Servable> servable, ServerOptions options = {})
      : servable_(std::move(servable)), options_(options) {
    server_.new_task_queue = [this] { return new httplib::ThreadPool(options_.threads, options_.max_queue); };
    server_.set_payload_max_length(options_.payload_limit);
    server_.Post("/v1/retrieve", [this](const httplib::Request& req, httplib::Response& res) { handle(req, res); });
    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"status":"ok"})", "application/json");
    });
    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      auto j = stats_.to_json();
      j["model"] = servable_->name();
      j["items"] = servable_->index().size();
      res.set_content(j.dump(), "application/json");
    });
  }

  ~RetrievalServer() { stop(); }

  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
    } else {
      require(server_.bind_to_port(host, port), ErrorKind::kUnavailable,
              "cannot bind " + host + ":" + std::to_string(port));
      port_ = port;
    }
    require(port_ > 0, ErrorKind::kUnavailable, "cannot bind " + host);
    return port_;
  }

  /// Blocks until stop().
  void run() { server_.listen_after_bind(); }

  void start() {
    thread_ = std::thread([this] { run(); });
    server_.wait_until_ready();
  }

  /// Stops accepting, lets in-flight requests finish, joins the listener.
  void stop() {
    if (server_.is_running()) server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  nlohmann::json stats() const { return stats_.to_json(); }

 private:
  void handle(const httplib::Request& req, httplib::Response& res) {
    const auto started = std::chrono::steady_clock::now();
    bool ok = false;
    try {
      const auto r = parse_request(req.body);
      require(r.model == servable_->name(), ErrorKind::kNotFound, "unknown model '" + r.model + "'");
      const auto k = r.k ? r.k : servable_->defaults().k;
      const auto response = servable_->retrieve(r.query, r.user_features, k);
      res.set_content(render_response(response, r.debug), "application/json");
      ok = true;
    } catch (const Error& e) {
      send_error(res, e.kind(), e.what());
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(nlohmann::json{{"error", {{"kind", "internal"}, {"message", e.what()}}}}.dump(),
                      "application/json");
    }
    stats_.record(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count(), ok);
  }

  std::shared_ptr<const Servable> servable_;
  ServerOptions options_;
  httplib::Server server_;
  RequestStats stats_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace dpsr
