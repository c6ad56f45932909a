#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "dpsr/binary_io.hpp"
#include "dpsr/common.hpp"
#include "dpsr/server.hpp"

// After the Eigen headers: <resolv.h>, pulled in by httplib, defines a _res macro.
#include <httplib.h>

namespace dpsr {

struct BackendHealth {
  bool healthy = true;
  int strikes = 0;
};

enum class RouteStatus { kOk, kUnknownModel, kNoHealthyBackend };

struct Route {
  RouteStatus status = RouteStatus::kOk;
  std::string backend;
};

/// model -> backend URLs, plus per-backend health. The model map is fixed at
/// construction; health lives in an immutable snapshot swapped whole, so a
/// reader never sees a half-applied update.
class ShardTable {
 public:
  using Health = std::map<std::string, BackendHealth>;

  explicit ShardTable(std::map<std::string, std::vector<std::string>> models, int max_strikes = 3)
      : models_(std::move(models)), max_strikes_(max_strikes) {
    auto health = std::make_shared<Health>();
    for (const auto& [model, urls] : models_) {
      require(!urls.empty(), ErrorKind::kInvalidArgument, "shard table: model '" + model + "' has no backends");
      for (const auto& u : urls) (*health)[u];
      cursors_.emplace(model, std::make_unique<std::atomic<std::uint64_t>>(0));
    }
    health_ = std::move(health);
  }

  static std::shared_ptr<ShardTable> from_json(const nlohmann::json& j, int max_strikes = 3) {
    require(j.is_object(), ErrorKind::kParse, "shard table must be an object of model -> [backend url]");
    std::map<std::string, std::vector<std::string>> models;
    for (const auto& [model, urls] : j.items()) {
      require(urls.is_array() && !urls.empty(), ErrorKind::kParse,
              "shard table: '" + model + "' must map to a non-empty array");
      for (const auto& u : urls) {
        require(u.is_string(), ErrorKind::kParse, "shard table: backend urls must be strings");
        models[model].push_back(u.get<std::string>());
      }
    }
    return std::make_shared<ShardTable>(std::move(models), max_strikes);
  }

  static std::shared_ptr<ShardTable> load(const std::filesystem::path& path, int max_strikes = 3) {
    const auto text = io::read_file(path);
    try {
      return from_json(nlohmann::json::parse(text), max_strikes);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::kParse, path.string() + ": " + e.what());
    }
  }

  /// Round-robin over the model's currently healthy backends.
  Route route(const std::string& model) const {
    auto it = models_.find(model);
    if (it == models_.end()) return {RouteStatus::kUnknownModel, {}};
    const auto health = snapshot();
    std::vector<const std::string*> healthy;
    for (const auto& u : it->second) {
      if (health->at(u).healthy) healthy.push_back(&u);
    }
    if (healthy.empty()) return {RouteStatus::kNoHealthyBackend, {}};
    const auto n = cursors_.at(model)->fetch_add(1, std::memory_order_relaxed);
    return {RouteStatus::kOk, *healthy[n % healthy.size()]};
  }

  /// A success clears strikes and restores the backend; a failure adds a
  /// strike and ejects it at max_strikes.
  void report(const std::string& backend, bool ok) {
    update([&](Health& h) {
      auto& b = h.at(backend);
      if (ok) {
        b = {true, 0};
      } else {
        ++b.strikes;
        if (b.strikes >= max_strikes_) b.healthy = false;
      }
    });
  }

  void set_healthy(const std::string& backend, bool healthy) {
    update([&](Health& h) { h.at(backend) = {healthy, healthy ? 0 : max_strikes_}; });
  }

  std::shared_ptr<const Health> snapshot() const {
    std::lock_guard lock(mu_);
    return health_;
  }

  std::set<std::string> backends() const {
    std::set<std::string> out;
    for (const auto& [model, urls] : models_) out.insert(urls.begin(), urls.end());
    return out;
  }

  std::size_t backend_count(const std::string& model) const {
    auto it = models_.find(model);
    return it == models_.end() ? 0 : it->second.size();
  }

  const std::map<std::string, std::vector<std::string>>& models() const { return models_; }

 private:
  template <typename F>
  void update(F&& f) {
    std::lock_guard lock(mu_);
    auto next = std::make_shared<Health>(*health_);
    f(*next);
    health_ = std::move(next);
  }

  std::map<std::string, std::vector<std::string>> models_;
  std::map<std::string, std::unique_ptr<std::atomic<std::uint64_t>>> cursors_;
  int max_strikes_;
  mutable std::mutex mu_;
  std::shared_ptr<const Health> health_;
};

struct ProxyOptions {
  int backend_timeout_ms = 1000;
  int health_interval_ms = 2000;
  std::size_t threads = 64;
  std::size_t max_queue = 1024;
};

/// Forwards /v1/retrieve bodies untouched to a backend holding the requested
/// model and relays the backend's reply, tagged with a `routed-to` header.
class ProxyServer {
 public:
  ProxyServer(std::shared_ptr<ShardTable> table, ProxyOptions options = {})
      : table_(std::move(table)), options_(options) {
    server_.new_task_queue = [this] { return new httplib::ThreadPool(options_.threads, options_.max_queue); };
    server_.Post("/v1/retrieve", [this](const httplib::Request& req, httplib::Response& res) { forward(req, res); });
    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"status":"ok"})", "application/json");
    });
    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      auto j = stats_.to_json();
      nlohmann::json backends = nlohmann::json::object();
      for (const auto& [url, h] : *table_->snapshot()) {
        backends[url] = {{"healthy", h.healthy}, {"strikes", h.strikes}};
      }
      j["backends"] = std::move(backends);
      res.set_content(j.dump(), "application/json");
    });
  }

  ~ProxyServer() { stop(); }

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

  void run() {
    start_health_checks();
    server_.listen_after_bind();
  }

  void start() {
    start_health_checks();
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  void stop() {
    {
      std::lock_guard lock(health_mu_);
      stopping_ = true;
    }
    health_cv_.notify_all();
    if (health_thread_.joinable()) health_thread_.join();
    if (server_.is_running()) server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  /// One round of /healthz probes against every backend.
  void check_health() {
    for (const auto& url : table_->backends()) {
      httplib::Client cli(url);
      set_timeouts(cli);
      auto res = cli.Get("/healthz");
      table_->report(url, res && res->status == 200);
    }
  }

  int port() const { return port_; }
  const ShardTable& table() const { return *table_; }

 private:
  void set_timeouts(httplib::Client& cli) const {
    const auto ms = std::chrono::milliseconds(options_.backend_timeout_ms);
    cli.set_connection_timeout(ms);
    cli.set_read_timeout(ms);
    cli.set_write_timeout(ms);
  }

  void start_health_checks() {
    if (health_thread_.joinable() || options_.health_interval_ms <= 0) return;
    health_thread_ = std::thread([this] {
      std::unique_lock lock(health_mu_);
      while (!stopping_) {
        if (health_cv_.wait_for(lock, std::chrono::milliseconds(options_.health_interval_ms),
                                [this] { return stopping_; })) {
          break;
        }
        lock.unlock();
        check_health();
        lock.lock();
      }
    });
  }

  void forward(const httplib::Request& req, httplib::Response& res) {
    const auto started = std::chrono::steady_clock::now();
    bool ok = false;
    auto finish = [&] {
      stats_.record(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count(),
                    ok);
    };
    std::string model;
    try {
      const auto j = nlohmann::json::parse(req.body);
      require(j.is_object() && j.contains("model") && j["model"].is_string(), ErrorKind::kParse,
              "'model' must be a string");
      model = j["model"].get<std::string>();
    } catch (const nlohmann::json::parse_error& e) {
      send_error(res, ErrorKind::kParse, std::string("malformed JSON: ") + e.what());
      return finish();
    } catch (const Error& e) {
      send_error(res, e.kind(), e.what());
      return finish();
    }

    // A refused or reset connection costs the backend a strike and the
    // request moves on; a backend that is slow past the budget is a 504.
    const auto attempts = std::max<std::size_t>(1, table_->backend_count(model));
    for (std::size_t attempt = 0; attempt < attempts; ++attempt) {
      const auto route = table_->route(model);
      if (route.status == RouteStatus::kUnknownModel) {
        send_error(res, ErrorKind::kNotFound, "unknown model '" + model + "'");
        return finish();
      }
      if (route.status == RouteStatus::kNoHealthyBackend) break;
      httplib::Client cli(route.backend);
      set_timeouts(cli);
      const auto sent = std::chrono::steady_clock::now();
      auto reply = cli.Post("/v1/retrieve", req.body, "application/json");
      if (reply) {
        res.status = reply->status;
        res.set_content(reply->body, reply->get_header_value("Content-Type"));
        res.set_header("routed-to", route.backend);
        ok = reply->status < 400;
        return finish();
      }
      const auto waited = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - sent).count();
      if (reply.error() == httplib::Error::Read && waited >= options_.backend_timeout_ms) {
        res.status = 504;
        res.set_content(nlohmann::json{{"error", {{"kind", "timeout"},
                                                  {"message", "backend " + route.backend + " timed out"}}}}
                            .dump(),
                        "application/json");
        res.set_header("routed-to", route.backend);
        return finish();
      }
      table_->report(route.backend, false);
    }
    send_error(res, ErrorKind::kUnavailable, "no healthy backend for model '" + model + "'");
    finish();
  }

  std::shared_ptr<ShardTable> table_;
  ProxyOptions options_;
  httplib::Server server_;
  RequestStats stats_;
  std::thread thread_;
  std::thread health_thread_;
  std::mutex health_mu_;
  std::condition_variable health_cv_;
  bool stopping_ = false;
  int port_ = 0;
};

}  // namespace dpsr
