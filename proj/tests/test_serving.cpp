#include <gtest/gtest.h>

#include <set>
#include <thread>

#include "dpsr/bench.hpp"
#include "dpsr/proxy.hpp"
#include "dpsr/server.hpp"
#include "support.hpp"

// After the Eigen headers: <resolv.h>, pulled in by httplib, defines a _res macro.
#include <httplib.h>

using namespace dpsr;

namespace {

std::string url(int port) { return "http://127.0.0.1:" + std::to_string(port); }

std::string body(const std::string& model, const std::string& query, std::size_t k = 0, bool debug = false) {
  return request_json({model, query, k, {}, debug}).dump();
}

httplib::Result post(int port, const std::string& payload) {
  httplib::Client cli(url(port));
  cli.set_read_timeout(std::chrono::seconds(10));
  return cli.Post("/v1/retrieve", payload, "application/json");
}

// Global top-k by best head score over every item, computed without the index.
std::vector<std::pair<std::string, float>> oracle_retrieve(const Servable& s, const std::string& q, std::size_t k) {
  const auto heads = query_forward<float>(s.params(), encode(s.vocabulary(), q));
  const auto& index = s.index();
  std::vector<std::pair<std::string, float>> all;
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto v = index.vector(i);
    float best = -1e30f;
    for (const auto& e : heads.heads) {
      float dot = 0;
      for (std::size_t d = 0; d < v.size(); ++d) dot += e[static_cast<Eigen::Index>(d)] * v[d];
      best = std::max(best, dot);
    }
    all.push_back({index.ids()[i], best});
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

class Backend {
 public:
  explicit Backend(std::shared_ptr<const Servable> s) : server_(std::move(s)) {
    port_ = server_.bind("127.0.0.1", 0);
    server_.start();
  }
  int port() const { return port_; }
  RetrievalServer& server() { return server_; }
  void stop() { server_.stop(); }

 private:
  RetrievalServer server_;
  int port_ = 0;
};

}  // namespace

TEST(Servable, MatchesBestHeadOracle) {
  const auto s = support::small_servable();
  for (const std::string q : {"red shoe", "phone case", "blue", "desk lamp chair"}) {
    const auto r = s->retrieve(q, 25);
    const auto want = oracle_retrieve(*s, q, 25);
    ASSERT_EQ(r.hits.size(), want.size()) << q;
    std::set<std::string> got_ids, want_ids;
    for (std::size_t i = 0; i < want.size(); ++i) {
      got_ids.insert(r.hits[i].item_id);
      want_ids.insert(want[i].first);
      EXPECT_NEAR(r.hits[i].score, want[i].second, 1e-5);
      if (i) EXPECT_GE(r.hits[i - 1].score, r.hits[i].score);
    }
    EXPECT_EQ(got_ids, want_ids) << q;
    EXPECT_FALSE(r.empty_query);
  }
}

TEST(Servable, HeadLabelsAreArgmax) {
  const auto s = support::small_servable("m", 200, 3);
  const auto r = s->retrieve("green watch", 10);
  const auto heads = query_forward<float>(s->params(), r.tokens);
  for (const auto& h : r.hits) {
    std::size_t pos = 0;
    while (s->index().ids()[pos] != h.item_id) ++pos;
    const auto v = s->index().vector(pos);
    const Eigen::Map<const Vector<float>> g(v.data(), static_cast<Eigen::Index>(v.size()));
    std::size_t best = 0;
    for (std::size_t k = 1; k < heads.heads.size(); ++k) {
      if (heads.heads[k].dot(g) > heads.heads[best].dot(g)) best = k;
    }
    EXPECT_EQ(h.head, best);
  }
}

TEST(Servable, UnknownQueryIsEmptyWithWarning) {
  const auto s = support::small_servable();
  const auto r = s->retrieve("zzzz qqqq", 10);
  EXPECT_TRUE(r.empty_query);
  EXPECT_TRUE(r.hits.empty());
  const auto j = nlohmann::json::parse(render_response(r, true));
  EXPECT_TRUE(j.contains("warning"));
  EXPECT_EQ(j["debug"]["token_ids"], nlohmann::json::array({0}));
  EXPECT_THROW(s->retrieve("red", 0), Error);
}

TEST(Servable, RejectsMismatchedArtifacts) {
  const auto s = support::small_servable();
  auto kind = [](auto fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kUnavailable;
  };
  const auto items = std::vector<EmbeddingIndex::Item>{{"a", std::vector<float>(16, 0.25f)}};
  EXPECT_EQ(kind([&] {
              Servable("x", s->vocabulary(), Checkpoint{s->params(), "deadbeef", {}}, EmbeddingIndex::build(items));
            }),
            ErrorKind::kHashMismatch);
  const auto narrow = std::vector<EmbeddingIndex::Item>{{"a", {1.0f, 0.0f}}};
  EXPECT_EQ(kind([&] {
              Servable("x", s->vocabulary(), Checkpoint{s->params(), s->vocabulary().hash(), {}},
                       EmbeddingIndex::build(narrow));
            }),
            ErrorKind::kDimensionMismatch);
}

TEST(WireFormat, ParseRequest) {
  const auto r = parse_request(R"({"model":"m","query":"q","k":5,"user_features":[3,4],"debug":true})");
  EXPECT_EQ(r.model, "m");
  EXPECT_EQ(r.k, 5u);
  EXPECT_EQ(r.user_features, (std::vector<TokenId>{3, 4}));
  EXPECT_TRUE(r.debug);
  EXPECT_EQ(parse_request(request_json(r).dump()).user_features, r.user_features);
  for (const char* bad : {"{", "[]", R"({"query":"q"})", R"({"model":"m","query":7})",
                          R"({"model":"m","query":"q","k":0})", R"({"model":"m","query":"q","k":1.5})",
                          R"({"model":"m","query":"q","user_features":[-1]})",
                          R"({"model":"m","query":"q","debug":"yes"})"}) {
    try {
      parse_request(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kParse) << bad;
    }
  }
}

TEST(Server, ServesRetrievalAndErrors) {
  auto s = support::small_servable("shop");
  Backend b(s);
  auto res = post(b.port(), body("shop", "red shoe", 7, true));
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto direct = render_response(s->retrieve("red shoe", 7), true);
  EXPECT_EQ(support::strip_took_ms(res->body), support::strip_took_ms(direct));
  const auto j = nlohmann::json::parse(res->body);
  EXPECT_EQ(j["hits"].size(), 7u);
  EXPECT_TRUE(j["took_ms"].is_number());

  res = post(b.port(), body("shop", "red"));
  EXPECT_EQ(nlohmann::json::parse(res->body)["hits"].size(), 10u);

  res = post(b.port(), "{nope");
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(nlohmann::json::parse(res->body)["error"]["kind"], "parse");
  res = post(b.port(), body("other", "red"));
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(nlohmann::json::parse(res->body)["error"]["kind"], "not_found");
  res = post(b.port(), R"({"model":"shop","query":"red","user_features":[999999]})");
  EXPECT_EQ(res->status, 400);

  httplib::Client cli(url(b.port()));
  EXPECT_EQ(cli.Get("/healthz")->status, 200);
  const auto stats = nlohmann::json::parse(cli.Get("/stats")->body);
  EXPECT_EQ(stats["requests"], 5);
  EXPECT_EQ(stats["errors"], 3);
  EXPECT_EQ(stats["model"], "shop");
}

TEST(Server, ConcurrentMatchesSequential) {
  auto s = support::small_servable("m", 400);
  Backend b(s);
  const std::vector<std::string> queries{"red", "blue shoe", "phone case", "lamp", "desk chair", "sock hat"};
  std::vector<std::string> want;
  for (const auto& q : queries) want.push_back(support::strip_took_ms(post(b.port(), body("m", q, 20))->body));
  std::atomic<int> mismatches{0}, failures{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 16; ++t) {
    threads.emplace_back([&, t] {
      httplib::Client cli(url(b.port()));
      cli.set_keep_alive(true);
      for (int i = 0; i < 30; ++i) {
        const auto q = static_cast<std::size_t>(t + i) % queries.size();
        auto res = cli.Post("/v1/retrieve", body("m", queries[q], 20), "application/json");
        if (!res || res->status != 200) {
          ++failures;
        } else if (support::strip_took_ms(res->body) != want[q]) {
          ++mismatches;
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(failures.load(), 0);
  EXPECT_EQ(mismatches.load(), 0);
}

TEST(ShardTable, RoundRobinAndEjection) {
  ShardTable t({{"m", {"a", "b", "c"}}, {"n", {"d"}}});
  std::vector<std::string> seen;
  for (int i = 0; i < 6; ++i) seen.push_back(t.route("m").backend);
  EXPECT_EQ(seen, (std::vector<std::string>{"a", "b", "c", "a", "b", "c"}));
  EXPECT_EQ(t.route("zz").status, RouteStatus::kUnknownModel);
  t.report("b", false);
  t.report("b", false);
  EXPECT_TRUE(t.snapshot()->at("b").healthy);
  t.report("b", false);
  EXPECT_FALSE(t.snapshot()->at("b").healthy);
  for (int i = 0; i < 10; ++i) EXPECT_NE(t.route("m").backend, "b");
  t.report("b", true);
  EXPECT_TRUE(t.snapshot()->at("b").healthy);
  EXPECT_EQ(t.snapshot()->at("b").strikes, 0);
  t.set_healthy("d", false);
  EXPECT_EQ(t.route("n").status, RouteStatus::kNoHealthyBackend);
}

TEST(ShardTable, SnapshotsAreStable) {
  ShardTable t(std::map<std::string, std::vector<std::string>>{{"m", {"a"}}});
  const auto before = t.snapshot();
  t.set_healthy("a", false);
  EXPECT_TRUE(before->at("a").healthy);
  EXPECT_FALSE(t.snapshot()->at("a").healthy);
}

TEST(ShardTable, FromJsonValidates) {
  EXPECT_EQ(ShardTable::from_json(nlohmann::json::parse(R"({"m":["x","y"]})"))->backend_count("m"), 2u);
  EXPECT_THROW(ShardTable::from_json(nlohmann::json::parse(R"(["x"])")), Error);
  EXPECT_THROW(ShardTable::from_json(nlohmann::json::parse(R"({"m":"x"})")), Error);
  EXPECT_THROW(ShardTable::from_json(nlohmann::json::parse(R"({"m":[]})")), Error);
  EXPECT_THROW(ShardTable::from_json(nlohmann::json::parse(R"({"m":[1]})")), Error);
}

TEST(Proxy, ForwardsByteIdenticalAndSurvivesBackendLoss) {
  auto s = support::small_servable("m");
  auto other = support::small_servable("n", 100, 1, 7);
  Backend b1(s), b2(s), b3(other);
  auto table = std::make_shared<ShardTable>(std::map<std::string, std::vector<std::string>>{
      {"m", {url(b1.port()), url(b2.port())}}, {"n", {url(b3.port())}}});
  ProxyOptions opt;
  opt.health_interval_ms = 0;
  ProxyServer proxy(table, opt);
  const int port = proxy.bind("127.0.0.1", 0);
  proxy.start();

  std::set<std::string> routed;
  for (const std::string q : {"red", "phone case", "zzzz"}) {
    const auto payload = body("m", q, 12, true);
    auto via = post(port, payload);
    auto direct = post(b1.port(), payload);
    ASSERT_TRUE(via && direct);
    EXPECT_EQ(via->status, 200);
    EXPECT_EQ(support::strip_took_ms(via->body), support::strip_took_ms(direct->body));
    routed.insert(via->get_header_value("routed-to"));
  }
  EXPECT_EQ(routed.size(), 2u);
  auto n = post(port, body("n", "red"));
  EXPECT_EQ(n->get_header_value("routed-to"), url(b3.port()));
  EXPECT_EQ(post(port, body("zz", "red"))->status, 404);
  EXPECT_EQ(post(port, "[1,2")->status, 400);

  b2.stop();
  int errors = 0;
  for (int i = 0; i < 100; ++i) {
    auto res = post(port, body("m", "blue shoe", 5));
    if (!res || res->status != 200) ++errors;
  }
  EXPECT_EQ(errors, 0);
  EXPECT_FALSE(proxy.table().snapshot()->at(url(b2.port())).healthy);

  b3.stop();
  proxy.check_health();
  proxy.check_health();
  proxy.check_health();
  auto gone = post(port, body("n", "red"));
  EXPECT_EQ(gone->status, 503);
  EXPECT_EQ(nlohmann::json::parse(gone->body)["error"]["kind"], "unavailable");
  proxy.stop();
}

TEST(Proxy, SlowBackendTimesOut) {
  httplib::Server slow;
  slow.Post("/v1/retrieve", [](const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(800));
    res.set_content("{}", "application/json");
  });
  const int slow_port = slow.bind_to_any_port("127.0.0.1");
  std::thread th([&] { slow.listen_after_bind(); });
  slow.wait_until_ready();
  auto table = std::make_shared<ShardTable>(std::map<std::string, std::vector<std::string>>{{"m", {url(slow_port)}}});
  ProxyOptions opt;
  opt.backend_timeout_ms = 200;
  opt.health_interval_ms = 0;
  ProxyServer proxy(table, opt);
  const int port = proxy.bind("127.0.0.1", 0);
  proxy.start();
  auto res = post(port, body("m", "red"));
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 504);
  proxy.stop();
  slow.stop();
  th.join();
}

TEST(Bench, ReportsRequestsAndRejectsDeadEndpoint) {
  auto s = support::small_servable("m");
  Backend b(s);
  BenchOptions opt;
  opt.endpoint = url(b.port());
  opt.model = "m";
  opt.k = 50;
  opt.concurrency = 4;
  opt.max_requests = 200;
  opt.duration_s = 60;
  const auto r = latency_bench(opt, {"red", "blue shoe"});
  EXPECT_EQ(r.requests, 200u);
  EXPECT_EQ(r.errors, 0u);
  EXPECT_GT(r.p99_ms, 0.0);
  EXPECT_GE(r.p99_ms, r.p50_ms);
  const int dead = b.port();
  b.stop();
  opt.endpoint = url(dead);
  opt.timeout_ms = 500;
  try {
    latency_bench(opt, {"red"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUnavailable);
  }
}
