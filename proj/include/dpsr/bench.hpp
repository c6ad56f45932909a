#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "dpsr/common.hpp"
#include "dpsr/eval.hpp"
#include "dpsr/servable.hpp"

// After the Eigen headers: <resolv.h>, pulled in by httplib, defines a _res macro.
#include <httplib.h>

namespace dpsr {

struct BenchOptions {
  std::string endpoint;  // e.g. http://127.0.0.1:8080
  std::string model;
  std::size_t k = 1000;
  std::size_t concurrency = 1;
  double duration_s = 10;
  std::size_t max_requests = 0;  // 0 = until the duration runs out
  int timeout_ms = 5000;
};

/// Replays `queries` round-robin from `concurrency` clients. Non-200 replies
/// count as errors; the run still completes.
inline LatencyReport latency_bench(const BenchOptions& opt, const std::vector<std::string>& queries) {
  require(!queries.empty(), ErrorKind::kInvalidArgument, "bench: no queries");
  require(opt.concurrency >= 1, ErrorKind::kInvalidArgument, "bench: concurrency must be >= 1");
  {
    httplib::Client probe(opt.endpoint);
    probe.set_connection_timeout(std::chrono::milliseconds(opt.timeout_ms));
    probe.set_read_timeout(std::chrono::milliseconds(opt.timeout_ms));
    auto res = probe.Get("/healthz");
    require(res && res->status == 200, ErrorKind::kUnavailable,
            "bench: endpoint " + opt.endpoint + " is not healthy" +
                (res ? " (status " + std::to_string(res->status) + ")" : " (" + httplib::to_string(res.error()) + ")"));
  }

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::vector<double> latencies;
  std::size_t errors = 0;
  const auto started = std::chrono::steady_clock::now();
  const auto deadline = started + std::chrono::duration<double>(opt.duration_s);

  auto worker = [&] {
    httplib::Client cli(opt.endpoint);
    cli.set_connection_timeout(std::chrono::milliseconds(opt.timeout_ms));
    cli.set_read_timeout(std::chrono::milliseconds(opt.timeout_ms));
    cli.set_keep_alive(true);
    std::vector<double> mine;
    std::size_t my_errors = 0;
    while (std::chrono::steady_clock::now() < deadline) {
      const auto n = next.fetch_add(1);
      if (opt.max_requests && n >= opt.max_requests) break;
      RetrievalRequest r{opt.model, queries[n % queries.size()], opt.k, {}, false};
      const auto body = request_json(r).dump();
      const auto t0 = std::chrono::steady_clock::now();
      auto res = cli.Post("/v1/retrieve", body, "application/json");
      mine.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
      if (!res || res->status != 200) ++my_errors;
    }
    std::lock_guard lock(mu);
    latencies.insert(latencies.end(), mine.begin(), mine.end());
    errors += my_errors;
  };
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < opt.concurrency; ++i) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  LatencyReport r;
  r.requests = latencies.size();
  r.errors = errors;
  r.p50_ms = percentile(latencies, 0.50);
  r.p99_ms = percentile(latencies, 0.99);
  r.qps = elapsed > 0 ? static_cast<double>(r.requests) / elapsed : 0.0;
  return r;
}

}  // namespace dpsr
