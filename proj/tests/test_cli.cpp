#include <gtest/gtest.h>

#include <csignal>
#include <fstream>
#include <sstream>
#include <thread>

#include <spawn.h>
#include <sys/wait.h>

#include "dpsr/checkpoint.hpp"
#include "dpsr/eval.hpp"
#include "dpsr/index.hpp"
#include "dpsr/manifest.hpp"
#include "dpsr/servable.hpp"
#include "support.hpp"

// After the Eigen headers: <resolv.h>, pulled in by httplib, defines a _res macro.
#include <httplib.h>

extern char** environ;

using namespace dpsr;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return out + "'";
}

Run run(const fs::path& dir, const std::vector<std::string>& args) {
  std::string cmd = quote(DPSR_CLI_PATH);
  for (const auto& a : args) cmd += " " + quote(a);
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  cmd += " > " + quote(out.string()) + " 2> " + quote(err.string());
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

nlohmann::json last_error(const Run& r) {
  const auto pos = r.err.rfind("{\"error\"");
  return pos == std::string::npos ? nlohmann::json() : nlohmann::json::parse(r.err.substr(pos));
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(support::temp_dir("cli"));
    const auto& d = *dir_;
    auto must = [&](const std::vector<std::string>& args) {
      const auto r = run(d, args);
      ASSERT_EQ(r.code, 0) << r.err;
    };
    must({"synth", "--out", (d / "data").string(), "--clusters", "8", "--items-per-cluster", "15",
          "--queries-per-cluster", "6", "--clicks", "6000", "--heldout-clicks", "200", "--users", "40", "--seed", "3"});
    must({"build-vocab", "--users", s("data/users.tsv"), "--items", s("data/items.tsv"), "--interactions",
          s("data/interactions.tsv"), "--out", s("vocab.tsv")});
    must({"train", "--users", s("data/users.tsv"), "--items", s("data/items.tsv"), "--interactions",
          s("data/interactions.tsv"), "--vocab", s("vocab.tsv"), "--out", s("model.ckpt"), "--dim", "16",
          "--heads", "2", "--agg-dim", "16", "--hidden", "32", "--batch-size", "32", "--n-rand", "32",
          "--n-neg", "16", "--epochs", "4", "--lr", "0.05", "--seed", "5"});
    must({"build-index", "--checkpoint", s("model.ckpt"), "--items", s("data/items.tsv"), "--vocab",
          s("vocab.tsv"), "--out", s("items.idx")});
  }
  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete dir_;
  }
  static std::string s(const std::string& rel) { return (*dir_ / rel).string(); }
  static const fs::path& dir() { return *dir_; }

  static fs::path* dir_;
};

fs::path* Pipeline::dir_ = nullptr;

}  // namespace

TEST_F(Pipeline, ArtifactsCarryVerifiedManifests) {
  for (const auto* name : {"vocab.tsv", "model.ckpt", "items.idx", "data/items.tsv"}) {
    EXPECT_TRUE(verify_artifact(s(name))) << name;
  }
  const auto m = nlohmann::json::parse(slurp(manifest_path(s("model.ckpt"))));
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["seed"], 5);
  EXPECT_EQ(m["config"]["towers"]["heads"], 2);
  EXPECT_TRUE(m["inputs"].contains("vocab"));
  const auto ckpt = load_checkpoint(s("model.ckpt"));
  EXPECT_EQ(ckpt.vocab_hash, Vocabulary::load(s("vocab.tsv")).hash());
  EXPECT_EQ(ckpt.extra["train"]["epochs"], 4);
  EXPECT_EQ(EmbeddingIndex::load(s("items.idx")).size(), 120u);
}

TEST_F(Pipeline, EvalPrintsSummaryAndReport) {
  const auto r = run(dir(), {"eval", "--checkpoint", s("model.ckpt"), "--index", s("items.idx"), "--vocab",
                             s("vocab.tsv"), "--items", s("data/items.tsv"), "--heldout", s("data/heldout.tsv"),
                             "--auc-labels", s("data/auc_labels.tsv"), "--item-truth", s("data/item_clusters.tsv"),
                             "--query-truth", s("data/query_clusters.tsv"), "--n", "50", "--out", s("report.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("top1\t", 0), 0u) << r.out;
  const auto report = nlohmann::json::parse(slurp(s("report.json")));
  EXPECT_EQ(report["cases"], 200);
  EXPECT_GT(report["top_k"]["top10"].get<double>(), 0.5);
  EXPECT_GT(report["auc"].get<double>(), 0.7);
  EXPECT_TRUE(verify_artifact(s("report.json")));
}

TEST_F(Pipeline, ExportWritesEmbeddings) {
  std::ofstream(s("queries.txt")) << "alpha\nbeta gamma\n";
  const auto r = run(dir(), {"export", "--checkpoint", s("model.ckpt"), "--vocab", s("vocab.tsv"), "--items",
                             s("data/items.tsv"), "--queries", s("queries.txt"), "--out-items", s("items.emb"),
                             "--out-queries", s("queries.emb")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto items = load_export(s("items.emb"), false);
  ASSERT_EQ(items.size(), 120u);
  EXPECT_EQ(items[0].values.size(), 16u);
  EXPECT_EQ(load_export(s("queries.emb"), true).size(), 4u);
}

TEST_F(Pipeline, ZeroStepsWritesInitialisation) {
  const auto r = run(dir(), {"train", "--users", s("data/users.tsv"), "--items", s("data/items.tsv"),
                             "--interactions", s("data/interactions.tsv"), "--vocab", s("vocab.tsv"), "--out",
                             s("init.ckpt"), "--dim", "8", "--heads", "3", "--agg-dim", "8", "--hidden", "12,10",
                             "--steps", "0", "--seed", "77"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ckpt = load_checkpoint(s("init.ckpt"));
  TowerConfig c;
  c.dim = 8;
  c.heads = 3;
  c.agg_dim = 8;
  c.mlp_hidden = {12, 10};
  c.vocab_size = Vocabulary::load(s("vocab.tsv")).size();
  EXPECT_EQ(ckpt.params.config, c);
  const auto want = serialize_checkpoint({init_params<float>(c, 77), ckpt.vocab_hash, ckpt.extra});
  EXPECT_EQ(slurp(s("init.ckpt")), want);
}

TEST_F(Pipeline, DimensionMismatchExitCode) {
  const auto r = run(dir(), {"build-index", "--checkpoint", s("model.ckpt"), "--items", s("data/items.tsv"),
                             "--vocab", s("vocab.tsv"), "--out", s("bad.idx"), "--dim", "7"});
  EXPECT_EQ(r.code, 6);
  const auto e = last_error(r);
  EXPECT_EQ(e["error"], "dimension_mismatch");
  EXPECT_EQ(e["exit_code"], 6);
  EXPECT_FALSE(fs::exists(s("bad.idx")));
}

TEST_F(Pipeline, HashMismatchExitCode) {
  // A vocabulary built with a different min-count is not the training vocabulary.
  auto r = run(dir(), {"build-vocab", "--users", s("data/users.tsv"), "--items", s("data/items.tsv"),
                       "--interactions", s("data/interactions.tsv"), "--min-count", "3", "--out", s("vocab3.tsv")});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run(dir(), {"build-index", "--checkpoint", s("model.ckpt"), "--items", s("data/items.tsv"), "--vocab",
                  s("vocab3.tsv"), "--out", s("bad.idx")});
  EXPECT_EQ(r.code, 5);
  EXPECT_EQ(last_error(r)["error"], "hash_mismatch");

  // An artifact edited after its manifest was written.
  fs::copy_file(s("model.ckpt"), s("edited.ckpt"), fs::copy_options::overwrite_existing);
  fs::copy_file(manifest_path(s("model.ckpt")), manifest_path(s("edited.ckpt")),
                fs::copy_options::overwrite_existing);
  auto m = nlohmann::json::parse(slurp(manifest_path(s("edited.ckpt"))));
  m["outputs"]["checkpoint"]["path"] = s("edited.ckpt");
  std::ofstream(manifest_path(s("edited.ckpt"))) << m.dump();
  {
    std::fstream f(s("edited.ckpt"), std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x42');
  }
  r = run(dir(), {"build-index", "--checkpoint", s("edited.ckpt"), "--items", s("data/items.tsv"), "--vocab",
                  s("vocab.tsv"), "--out", s("bad.idx")});
  EXPECT_EQ(r.code, 5);
}

TEST_F(Pipeline, UsageAndLookupErrors) {
  auto r = run(dir(), {"train", "--no-such-flag"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(last_error(r)["error"], "usage");
  r = run(dir(), {});
  EXPECT_EQ(r.code, 2);
  r = run(dir(), {"build-index", "--checkpoint", s("missing.ckpt"), "--items", s("data/items.tsv"), "--vocab",
                  s("vocab.tsv"), "--out", s("bad.idx")});
  EXPECT_EQ(r.code, 4);
  EXPECT_EQ(last_error(r)["error"], "not_found");
  r = run(dir(), {"train", "--users", s("data/users.tsv"), "--items", s("data/items.tsv"), "--interactions",
                  s("data/interactions.tsv"), "--vocab", s("vocab.tsv"), "--out", s("x.ckpt"), "--alpha", "2"});
  EXPECT_EQ(r.code, 3);
  std::ofstream(s("junk.ckpt")) << "not a checkpoint";
  r = run(dir(), {"build-index", "--checkpoint", s("junk.ckpt"), "--items", s("data/items.tsv"), "--vocab",
                  s("vocab.tsv"), "--out", s("bad.idx")});
  EXPECT_EQ(r.code, 7);
}

TEST_F(Pipeline, ConfigFileWithCommandLineOverride) {
  std::ofstream(s("synth.json")) << R"({"clusters": 3, "items-per-cluster": 4, "clicks": 100, "heldout-clicks": 5,
                                       "users": 2, "queries-per-cluster": 2, "seed": 9})";
  const auto r = run(dir(), {"synth", "--config", s("synth.json"), "--out", s("cfg"), "--clusters", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_items(s("cfg/items.tsv")).size(), 16u);
  const auto m = nlohmann::json::parse(slurp(manifest_path(s("cfg/items.tsv"))));
  EXPECT_EQ(m["config"]["clicks"], 100);
  EXPECT_EQ(m["seed"], 9);
}

TEST_F(Pipeline, ServeAnswersUntilSignalled) {
  const std::string port_file = s("serve.port");
  fs::remove(port_file);
  std::vector<std::string> args{DPSR_CLI_PATH, "serve",      "--checkpoint", s("model.ckpt"), "--index",
                                s("items.idx"), "--vocab",    s("vocab.tsv"), "--model",       "shop",
                                "--port",       "0",          "--port-file",  port_file,       "--threads", "4"};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  pid_t pid = 0;
  ASSERT_EQ(posix_spawn(&pid, DPSR_CLI_PATH, nullptr, nullptr, argv.data(), environ), 0);
  for (int i = 0; i < 200 && !fs::exists(port_file); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  ASSERT_TRUE(fs::exists(port_file));
  const int port = std::stoi(slurp(port_file));
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(std::chrono::seconds(10));
  httplib::Result res;
  for (int i = 0; i < 100 && !(res = cli.Get("/healthz")); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  ASSERT_TRUE(res);
  res = cli.Post("/v1/retrieve", R"({"model":"shop","query":"anything at all","k":5})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto servable = Servable::load("shop", s("model.ckpt"), s("items.idx"), s("vocab.tsv"));
  EXPECT_EQ(support::strip_took_ms(res->body),
            support::strip_took_ms(render_response(servable.retrieve("anything at all", 5), false)));
  kill(pid, SIGTERM);
  int status = 0;
  waitpid(pid, &status, 0);
  EXPECT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
}
