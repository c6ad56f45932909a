// dpsr: synth | build-vocab | train | build-index | serve | proxy | eval | export

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "dpsr/bench.hpp"
#include "dpsr/checkpoint.hpp"
#include "dpsr/eval.hpp"
#include "dpsr/index.hpp"
#include "dpsr/ingest.hpp"
#include "dpsr/manifest.hpp"
#include "dpsr/proxy.hpp"
#include "dpsr/servable.hpp"
#include "dpsr/server.hpp"
#include "dpsr/synthetic.hpp"
#include "dpsr/tokenizer.hpp"
#include "dpsr/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dpsr;

namespace {

// Exit statuses. 1 is an unexpected internal error, 2 a usage error.
int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return 3;
    case ErrorKind::kNotFound: return 4;
    case ErrorKind::kHashMismatch: return 5;
    case ErrorKind::kDimensionMismatch: return 6;
    case ErrorKind::kCorrupt: return 7;
    case ErrorKind::kVersionMismatch: return 8;
    case ErrorKind::kNumeric: return 9;
    case ErrorKind::kParse: return 10;
    case ErrorKind::kUnavailable: return 11;
  }
  return 1;
}

int report_error(std::string_view kind, std::string_view message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << std::endl;
  return code;
}

/// Splices a subcommand's `--config FILE` into its argument list. Keys are
/// long flag names; a flag already on the command line keeps its value.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  const auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.starts_with(flag + "="); });
  };
  std::string file;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      file = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].starts_with("--config=")) {
      file = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (file.empty()) return args;
  json j;
  try {
    j = json::parse(io::read_file(file));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, file + ": " + e.what());
  }
  require(j.is_object(), ErrorKind::kParse, file + ": config must be a JSON object of flag values");
  const auto scalar = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
  for (const auto& [key, value] : j.items()) {
    const auto flag = "--" + key;
    if (given(flag)) continue;
    require(!value.is_object() && !value.is_null(), ErrorKind::kParse, file + ": '" + key + "' must be a scalar or array");
    if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + scalar(v);
      args.push_back(flag + "=" + joined);
    } else {
      args.push_back(flag + "=" + scalar(value));
    }
  }
  return args;
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

template <typename S>
void serve_until_signaled(S& server) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::thread watcher([&] {
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    server.stop();
  });
  server.run();
  g_stop = true;
  watcher.join();
}

void write_port_file(const std::string& path, int port) {
  if (!path.empty()) io::write_file_atomic(path, std::to_string(port) + "\n");
}

void add_config(CLI::App* sub) {
  sub->add_option("--config")->description("JSON file of flag values (flags given on the command line win)");
}

/// Checks the manifest hash of an artifact (if it has one) and records it.
void consume(RunManifest& m, const std::string& role, const fs::path& path) {
  if (!verify_artifact(path)) std::clog << "note: " << path.string() << " has no manifest; hash not verified\n";
  m.add_input(role, path);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  SyntheticSpec spec;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  RunManifest m("synth", a.spec, a.spec.seed);
  const auto corpus = generate_synthetic(a.spec);
  write_synthetic(corpus, a.out);
  const SyntheticFiles files(a.out);
  const auto storage = storage_report(corpus.users, corpus.items, corpus.interactions);
  for (const auto& p : files.all()) m.add_output(p.stem().string(), p);
  m.set_report({{"users", corpus.users.size()},
                {"items", corpus.items.size()},
                {"queries", corpus.queries.size()},
                {"interactions", corpus.interactions.size()},
                {"three_file_bytes", storage.three_file_bytes},
                {"denormalized_bytes", storage.denormalized_bytes},
                {"storage_ratio", storage.ratio()}});
  m.write();
  std::clog << "synth: " << corpus.items.size() << " items, " << corpus.interactions.size()
            << " clicks; three-file size is " << storage.ratio() << " of the denormalised form\n";
  return 0;
}

struct DataArgs {
  std::string users, items, interactions;
  bool strict = false;
};

void add_data_flags(CLI::App* sub, DataArgs& d) {
  sub->add_option("--users", d.users, "users.tsv")->required();
  sub->add_option("--items", d.items, "items.tsv")->required();
  sub->add_option("--interactions", d.interactions, "interactions.tsv")->required();
  sub->add_flag("--strict", d.strict, "fail on dangling user/item ids instead of skipping them");
}

struct VocabArgs {
  DataArgs data;
  std::uint64_t min_count = 1;
  std::string out;
};

int run_build_vocab(const VocabArgs& a) {
  json config{{"users", a.data.users}, {"items", a.data.items}, {"interactions", a.data.interactions},
              {"min_count", a.min_count}, {"out", a.out}};
  RunManifest m("build-vocab", config, 0);
  const auto store = FeatureStore::load(a.data.users, a.data.items);
  const auto rows = read_interactions(a.data.interactions);
  VocabularyBuilder builder;
  feed_vocabulary(builder, store, rows);
  const auto vocab = builder.build(a.min_count);
  vocab.save(a.out);
  m.add_input("users", a.data.users);
  m.add_input("items", a.data.items);
  m.add_input("interactions", a.data.interactions);
  m.add_output("vocab", a.out);
  m.set_report({{"size", vocab.size()}, {"vocab_hash", vocab.hash()}});
  m.write();
  std::clog << "build-vocab: " << vocab.size() << " entries\n";
  return 0;
}

struct TrainArgs {
  DataArgs data;
  std::string vocab, supervision, out, user_features = "none";
  TowerConfig towers;
  TrainConfig train;
};

int run_train(TrainArgs a) {
  const auto mode = parse_user_feature_mode(a.user_features);
  const auto vocab = Vocabulary::load(a.vocab);
  a.towers.vocab_size = vocab.size();
  a.towers.validate();
  a.train.validate();
  json config{{"towers", a.towers},           {"train", a.train},  {"user_features", a.user_features},
              {"users", a.data.users},        {"items", a.data.items}, {"interactions", a.data.interactions},
              {"supervision", a.supervision}, {"vocab", a.vocab},  {"out", a.out}, {"strict", a.data.strict}};
  RunManifest m("train", config, a.train.seed);
  consume(m, "vocab", a.vocab);
  m.add_input("users", a.data.users);
  m.add_input("items", a.data.items);
  m.add_input("interactions", a.data.interactions);

  auto ds = load_dataset(a.data.users, a.data.items, a.data.interactions,
                         a.data.strict ? DanglingPolicy::kStrict : DanglingPolicy::kSkip);
  if (ds->skipped) std::clog << "train: skipped " << ds->skipped << " interactions with dangling ids\n";
  std::optional<Supervision> sup;
  if (!a.supervision.empty()) {
    sup = load_supervision(a.supervision);
    m.add_input("supervision", a.supervision);
    if (sup->duplicate_positives) {
      std::clog << "train: dropped " << sup->duplicate_positives << " duplicate supervision positives\n";
    }
  }
  const auto data = assemble_training_data(ds->store, ds->examples, vocab, mode, sup ? &*sup : nullptr);

  const json extra{{"train", a.train}, {"user_features", a.user_features}};
  auto save = [&](const TowerParams<float>& params, const fs::path& path) {
    save_checkpoint(path, Checkpoint{params, vocab.hash(), extra});
  };
  TrainOptions opts;
  opts.log = &std::clog;
  opts.on_checkpoint = [&](const TowerParams<float>& p, std::size_t step) {
    save(p, a.out + ".step" + std::to_string(step));
  };
  std::clog << "step\tloss\texamples_per_sec\n";
  const auto result = data.pairs.empty() && a.train.max_steps == 0
                          ? TrainResult{init_params<float>(a.towers, a.train.seed), 0, {}}
                          : train(data, a.train, a.towers, opts);
  save(result.params, a.out);
  m.add_output("checkpoint", a.out);
  m.set_report({{"steps", result.steps},
                {"pairs", data.pairs.size()},
                {"items", data.items.size()},
                {"skipped_interactions", ds->skipped},
                {"final_loss", result.losses.empty() ? 0.0 : result.losses.back()}});
  m.write();
  return 0;
}

struct IndexArgs {
  std::string checkpoint, items, vocab, out;
  std::size_t dim = 0;
  IndexParams params;
};

int run_build_index(const IndexArgs& a) {
  RunManifest m("build-index",
                {{"checkpoint", a.checkpoint}, {"items", a.items}, {"vocab", a.vocab}, {"out", a.out},
                 {"dim", a.dim}, {"params", a.params}},
                a.params.seed);
  consume(m, "checkpoint", a.checkpoint);
  consume(m, "vocab", a.vocab);
  m.add_input("items", a.items);
  const auto ckpt = load_checkpoint(a.checkpoint);
  const auto vocab = Vocabulary::load(a.vocab);
  require(ckpt.vocab_hash == vocab.hash(), ErrorKind::kHashMismatch,
          "vocabulary " + a.vocab + " is not the one the checkpoint was trained with");
  require(a.dim == 0 || a.dim == ckpt.params.config.dim, ErrorKind::kDimensionMismatch,
          "checkpoint embedding dim " + std::to_string(ckpt.params.config.dim) + " != requested --dim " +
              std::to_string(a.dim));
  std::vector<EmbeddingIndex::Item> items;
  for (const auto& r : read_items(a.items)) {
    const auto g = item_forward<float>(ckpt.params, encode_item(vocab, r)).g;
    items.push_back({r.id, std::vector<float>(g.data(), g.data() + g.size())});
  }
  const auto index = EmbeddingIndex::build(std::move(items), a.params);
  index.save(a.out);
  m.add_output("index", a.out);
  m.set_report({{"items", index.size()}, {"dim", index.dim()}, {"exact", index.is_exact()}});
  m.write();
  std::clog << "build-index: " << index.size() << " items, " << (index.is_exact() ? "flat" : "graph") << "\n";
  return 0;
}

struct ServeArgs {
  std::string checkpoint, index, vocab, model = "default", host = "127.0.0.1", port_file;
  int port = 8080;
  ServableDefaults defaults;
  ServerOptions server;
};

int run_serve(const ServeArgs& a) {
  for (const auto& p : {a.checkpoint, a.index, a.vocab}) {
    if (!verify_artifact(p)) std::clog << "note: " << p << " has no manifest; hash not verified\n";
  }
  auto servable = std::make_shared<const Servable>(
      Servable::load(a.model, a.checkpoint, a.index, a.vocab, a.defaults));
  RetrievalServer server(servable, a.server);
  const int port = server.bind(a.host, a.port);
  write_port_file(a.port_file, port);
  std::clog << "serve: model '" << a.model << "' on " << a.host << ":" << port << "\n";
  serve_until_signaled(server);
  return 0;
}

struct ProxyArgs {
  std::string table, host = "127.0.0.1", port_file;
  int port = 8000;
  ProxyOptions options;
};

int run_proxy(const ProxyArgs& a) {
  auto table = ShardTable::load(a.table);
  ProxyServer proxy(table, a.options);
  const int port = proxy.bind(a.host, a.port);
  write_port_file(a.port_file, port);
  std::clog << "proxy: " << table->models().size() << " models on " << a.host << ":" << port << "\n";
  serve_until_signaled(proxy);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, index, vocab, items, users, heldout, auc_labels, item_truth, query_truth, out;
  std::size_t n_candidates = 1024;
  std::vector<std::size_t> ks{1, 10};
  std::size_t popularity_k = 100;
  std::uint64_t seed = 1;
  BenchOptions bench;
  std::string bench_queries;
};

int run_eval(const EvalArgs& a) {
  json config{{"checkpoint", a.checkpoint}, {"index", a.index}, {"vocab", a.vocab}, {"items", a.items},
              {"users", a.users}, {"heldout", a.heldout}, {"auc_labels", a.auc_labels},
              {"item_truth", a.item_truth}, {"query_truth", a.query_truth}, {"n", a.n_candidates},
              {"ks", a.ks}, {"popularity_k", a.popularity_k}, {"seed", a.seed},
              {"endpoint", a.bench.endpoint}, {"concurrency", a.bench.concurrency},
              {"duration", a.bench.duration_s}, {"bench_k", a.bench.k}, {"out", a.out}};
  RunManifest m("eval", config, a.seed);
  consume(m, "checkpoint", a.checkpoint);
  consume(m, "index", a.index);
  consume(m, "vocab", a.vocab);
  m.add_input("items", a.items);
  m.add_input("heldout", a.heldout);

  const auto servable = Servable::load("eval", a.checkpoint, a.index, a.vocab);
  const auto& vocab = servable.vocabulary();
  const auto& params = servable.params();
  const auto extra_train = load_checkpoint(a.checkpoint).extra;
  const double beta = extra_train.contains("train") ? extra_train["train"].value("beta", 1.0) : 1.0;
  const auto mode = parse_user_feature_mode(extra_train.value("user_features", std::string("none")));

  const auto items = read_items(a.items);
  std::map<std::string, std::size_t> item_pos;
  std::vector<TokenSequence> item_seqs;
  std::map<std::string, double> popularity;
  for (std::size_t i = 0; i < items.size(); ++i) {
    item_pos.emplace(items[i].id, i);
    item_seqs.push_back(encode_item(vocab, items[i]));
    popularity[items[i].id] = static_cast<double>(items[i].popularity);
  }
  std::optional<FeatureStore> users;
  if (mode != UserFeatureMode::kNone) {
    require(!a.users.empty(), ErrorKind::kInvalidArgument,
            "this checkpoint was trained with user features; pass --users");
    users.emplace(read_users(a.users), std::vector<ItemRecord>{});
  }
  auto query_seq = [&](const Interaction& r) {
    std::vector<TokenId> f;
    if (users) {
      if (const auto* u = users->user(r.user_id)) f = user_feature_ids(vocab, *u, mode);
    }
    return encode_query(vocab, r.query, f);
  };

  TowerScorer scorer(params, item_seqs, beta);
  const auto heldout = read_interactions(a.heldout);
  std::vector<TokenSequence> queries;
  std::vector<std::string> query_text;
  std::vector<EvalCase> cases;
  for (const auto& r : heldout) {
    if (!is_positive(r.label)) continue;
    auto it = item_pos.find(r.item_id);
    if (it == item_pos.end()) continue;
    cases.push_back({queries.size(), it->second});
    queries.push_back(query_seq(r));
    query_text.push_back(r.query);
  }

  ExcludeFn exclude;
  std::map<std::string, std::vector<std::size_t>> item_clusters, query_clusters;
  if (!a.item_truth.empty() && !a.query_truth.empty()) {
    item_clusters = read_cluster_map(a.item_truth);
    query_clusters = read_cluster_map(a.query_truth);
    std::vector<std::size_t> cluster_of(items.size(), SIZE_MAX);
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto it = item_clusters.find(items[i].id);
      if (it != item_clusters.end()) cluster_of[i] = it->second.front();
    }
    exclude = [&, cluster_of](std::size_t q, std::size_t item) {
      auto it = query_clusters.find(query_text[q]);
      if (it == query_clusters.end()) return false;
      return std::find(it->second.begin(), it->second.end(), cluster_of[item]) != it->second.end();
    };
  }

  Rng rng(a.seed);
  const auto rates = top_k_rates(cases, items.size(), a.ks, a.n_candidates, rng,
                                 [&](std::size_t q) { return scorer.score_all(queries[q]); }, exclude);
  json report;
  json top_k = json::object();
  for (std::size_t i = 0; i < a.ks.size(); ++i) top_k["top" + std::to_string(a.ks[i])] = rates[i];
  report["top_k"] = top_k;
  report["cases"] = cases.size();

  MetricReport metrics;
  for (std::size_t i = 0; i < a.ks.size(); ++i) {
    if (a.ks[i] == 1) metrics.top1 = rates[i];
    if (a.ks[i] == 10) metrics.top10 = rates[i];
  }
  if (!a.auc_labels.empty()) {
    m.add_input("auc_labels", a.auc_labels);
    std::vector<LabeledScore> labeled;
    for (const auto& r : read_interactions(a.auc_labels)) {
      auto it = item_pos.find(r.item_id);
      if (it == item_pos.end()) continue;
      labeled.push_back({scorer.score(query_seq(r), it->second), is_positive(r.label)});
    }
    metrics.auc = auc(labeled);
    report["auc"] = metrics.auc;
  }

  std::set<std::string> distinct(query_text.begin(), query_text.end());
  std::vector<std::vector<std::string>> retrieved;
  for (const auto& q : distinct) {
    std::vector<std::string> ids;
    for (const auto& h : servable.retrieve(q, a.popularity_k).hits) ids.push_back(h.item_id);
    retrieved.push_back(std::move(ids));
  }
  metrics.mean_popularity = mean_retrieved_popularity(retrieved, popularity);
  report["mean_popularity"] = metrics.mean_popularity;

  if (!a.bench.endpoint.empty()) {
    std::vector<std::string> bench_queries(distinct.begin(), distinct.end());
    if (!a.bench_queries.empty()) {
      bench_queries.clear();
      std::ifstream in(a.bench_queries);
      require(static_cast<bool>(in), ErrorKind::kNotFound, "cannot open " + a.bench_queries);
      for (std::string line; std::getline(in, line);) {
        if (!line.empty()) bench_queries.push_back(line);
      }
    }
    metrics.latency = latency_bench(a.bench, bench_queries);
    report["latency"] = metrics.latency;
  }

  report["metrics"] = metrics.to_json();
  std::cout << metrics.summary_line() << std::endl;
  std::clog << report.dump() << "\n";
  if (!a.out.empty()) {
    io::write_file_atomic(a.out, report.dump(2) + "\n");
    m.add_output("report", a.out);
  }
  m.set_report(report);
  m.write(a.out.empty() ? fs::path{} : fs::path(a.out));
  return 0;
}

struct ExportArgs {
  std::string checkpoint, vocab, items, queries, out_items, out_queries;
};

int run_export(const ExportArgs& a) {
  RunManifest m("export",
                {{"checkpoint", a.checkpoint}, {"vocab", a.vocab}, {"items", a.items}, {"queries", a.queries},
                 {"out_items", a.out_items}, {"out_queries", a.out_queries}},
                0);
  consume(m, "checkpoint", a.checkpoint);
  consume(m, "vocab", a.vocab);
  const auto ckpt = load_checkpoint(a.checkpoint);
  const auto vocab = Vocabulary::load(a.vocab);
  require(ckpt.vocab_hash == vocab.hash(), ErrorKind::kHashMismatch,
          "vocabulary " + a.vocab + " is not the one the checkpoint was trained with");
  require(!a.out_items.empty() || !a.out_queries.empty(), ErrorKind::kInvalidArgument,
          "export: give --out-items and/or --out-queries");
  if (!a.out_items.empty()) {
    require(!a.items.empty(), ErrorKind::kInvalidArgument, "export: --out-items needs --items");
    m.add_input("items", a.items);
    export_item_embeddings(ckpt.params, vocab, read_items(a.items), a.out_items);
    m.add_output("item_embeddings", a.out_items);
  }
  if (!a.out_queries.empty()) {
    require(!a.queries.empty(), ErrorKind::kInvalidArgument, "export: --out-queries needs --queries");
    m.add_input("queries", a.queries);
    std::vector<std::string> queries;
    std::ifstream in(a.queries);
    require(static_cast<bool>(in), ErrorKind::kNotFound, "cannot open " + a.queries);
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) queries.push_back(line);
    }
    export_query_embeddings(ckpt.params, vocab, queries, a.out_queries);
    m.add_output("query_embeddings", a.out_queries);
  }
  m.write();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-tower embedding retrieval: data, training, indexing, serving and evaluation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic click-log corpus");
  add_config(s);
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--clusters", synth.spec.clusters)->capture_default_str();
  s->add_option("--items-per-cluster", synth.spec.items_per_cluster)->capture_default_str();
  s->add_option("--queries-per-cluster", synth.spec.queries_per_cluster)->capture_default_str();
  s->add_option("--clicks", synth.spec.clicks)->capture_default_str();
  s->add_option("--heldout-clicks", synth.spec.heldout_clicks)->capture_default_str();
  s->add_option("--users", synth.spec.users)->capture_default_str();
  s->add_option("--polysemous", synth.spec.polysemous, "one-word queries shared by two clusters")->capture_default_str();
  s->add_option("--noise", synth.spec.noise)->capture_default_str();
  s->add_option("--skew", synth.spec.skew, "popularity power-law exponent")->capture_default_str();
  s->add_option("--cluster-words", synth.spec.cluster_words)->capture_default_str();
  s->add_option("--title-words", synth.spec.title_words)->capture_default_str();
  s->add_option("--noise-words", synth.spec.noise_words)->capture_default_str();
  s->add_option("--seed", synth.spec.seed)->capture_default_str();

  VocabArgs vocab;
  auto* v = app.add_subcommand("build-vocab", "count tokens over features and queries");
  add_config(v);
  add_data_flags(v, vocab.data);
  v->add_option("--min-count", vocab.min_count)->capture_default_str();
  v->add_option("--out", vocab.out)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the two towers");
  add_config(t);
  add_data_flags(t, tr.data);
  t->add_option("--vocab", tr.vocab)->required();
  t->add_option("--supervision", tr.supervision, "human_pos / human_neg rows");
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--user-features", tr.user_features, "none | profile | history")->capture_default_str();
  t->add_option("--dim", tr.towers.dim, "embedding dimension d")->capture_default_str();
  t->add_option("--heads", tr.towers.heads, "query heads m")->capture_default_str();
  t->add_option("--agg-dim", tr.towers.agg_dim)->capture_default_str();
  t->add_option("--hidden", tr.towers.mlp_hidden, "MLP hidden widths")->delimiter(',')->capture_default_str();
  t->add_option("--batch-size", tr.train.batch_size)->capture_default_str();
  t->add_option("--steps", tr.train.max_steps, "maximum optimizer steps")->capture_default_str();
  t->add_option("--epochs", tr.train.epochs)->capture_default_str();
  t->add_option("--alpha", tr.train.alpha, "share of random negatives")->capture_default_str();
  t->add_option("--beta", tr.train.beta, "softmax temperature")->capture_default_str();
  t->add_option("--margin", tr.train.margin)->capture_default_str();
  t->add_option("--lr", tr.train.learning_rate)->capture_default_str();
  t->add_option("--n-neg", tr.train.n_neg)->capture_default_str();
  t->add_option("--n-rand", tr.train.n_rand)->capture_default_str();
  t->add_option("--seed", tr.train.seed)->capture_default_str();
  t->add_option("--log-every", tr.train.log_every)->capture_default_str();
  t->add_option("--checkpoint-every", tr.train.checkpoint_every)->capture_default_str();

  IndexArgs ix;
  auto* b = app.add_subcommand("build-index", "embed items and build the search index");
  add_config(b);
  b->add_option("--checkpoint", ix.checkpoint)->required();
  b->add_option("--items", ix.items)->required();
  b->add_option("--vocab", ix.vocab)->required();
  b->add_option("--out", ix.out)->required();
  b->add_option("--dim", ix.dim, "expected embedding dimension (0 = accept the checkpoint's)");
  b->add_option("--degree", ix.params.degree)->capture_default_str();
  b->add_option("--build-beam", ix.params.build_beam)->capture_default_str();
  b->add_option("--search-beam", ix.params.search_beam)->capture_default_str();
  b->add_option("--exact-threshold", ix.params.exact_threshold)->capture_default_str();
  b->add_option("--seed", ix.params.seed)->capture_default_str();

  ServeArgs sv;
  auto* se = app.add_subcommand("serve", "answer /v1/retrieve over HTTP");
  add_config(se);
  se->add_option("--checkpoint", sv.checkpoint)->required();
  se->add_option("--index", sv.index)->required();
  se->add_option("--vocab", sv.vocab)->required();
  se->add_option("--model", sv.model)->capture_default_str();
  se->add_option("--host", sv.host)->capture_default_str();
  se->add_option("--port", sv.port, "0 picks a free port")->capture_default_str();
  se->add_option("--port-file", sv.port_file, "write the bound port here");
  se->add_option("--k", sv.defaults.k, "default k")->capture_default_str();
  se->add_option("--fanout", sv.defaults.fanout, "per-head fetch = ceil(k * fanout)")->capture_default_str();
  se->add_option("--threads", sv.server.threads)->capture_default_str();
  se->add_option("--max-queue", sv.server.max_queue)->capture_default_str();

  ProxyArgs px;
  auto* p = app.add_subcommand("proxy", "route requests to model shards");
  add_config(p);
  p->add_option("--table", px.table, "JSON {model: [backend urls]}")->required();
  p->add_option("--host", px.host)->capture_default_str();
  p->add_option("--port", px.port)->capture_default_str();
  p->add_option("--port-file", px.port_file);
  p->add_option("--timeout-ms", px.options.backend_timeout_ms)->capture_default_str();
  p->add_option("--health-interval-ms", px.options.health_interval_ms)->capture_default_str();
  p->add_option("--threads", px.options.threads)->capture_default_str();
  p->add_option("--max-queue", px.options.max_queue)->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "top-k, AUC, popularity and latency");
  add_config(e);
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--index", ev.index)->required();
  e->add_option("--vocab", ev.vocab)->required();
  e->add_option("--items", ev.items)->required();
  e->add_option("--heldout", ev.heldout, "held-out clicks (interaction schema)")->required();
  e->add_option("--users", ev.users);
  e->add_option("--auc-labels", ev.auc_labels, "human_pos / human_neg rows");
  e->add_option("--item-truth", ev.item_truth, "id<TAB>cluster; same-cluster items are not drawn as distractors");
  e->add_option("--query-truth", ev.query_truth);
  e->add_option("--n", ev.n_candidates, "candidates per trial (relevant + N-1 distractors)")->capture_default_str();
  e->add_option("--ks", ev.ks)->delimiter(',')->capture_default_str();
  e->add_option("--popularity-k", ev.popularity_k)->capture_default_str();
  e->add_option("--seed", ev.seed)->capture_default_str();
  e->add_option("--out", ev.out, "report JSON");
  e->add_option("--endpoint", ev.bench.endpoint, "run the latency bench against this server");
  e->add_option("--model", ev.bench.model)->capture_default_str();
  e->add_option("--concurrency", ev.bench.concurrency)->capture_default_str();
  e->add_option("--duration", ev.bench.duration_s, "seconds")->capture_default_str();
  e->add_option("--bench-k", ev.bench.k)->capture_default_str();
  e->add_option("--queries", ev.bench_queries, "bench query file, one per line");
  ev.bench.model = "default";

  ExportArgs ex;
  auto* x = app.add_subcommand("export", "write embeddings as TSV");
  add_config(x);
  x->add_option("--checkpoint", ex.checkpoint)->required();
  x->add_option("--vocab", ex.vocab)->required();
  x->add_option("--items", ex.items);
  x->add_option("--queries", ex.queries, "one query per line");
  x->add_option("--out-items", ex.out_items);
  x->add_option("--out-queries", ex.out_queries);

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = expand_config(std::move(args));
  } catch (const Error& err) {
    return report_error(to_string(err.kind()), err.what(), exit_code(err.kind()));
  }
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    return report_error("usage", err.what(), 2);
  }

  try {
    if (*s) return run_synth(synth);
    if (*v) return run_build_vocab(vocab);
    if (*t) return run_train(tr);
    if (*b) return run_build_index(ix);
    if (*se) return run_serve(sv);
    if (*p) return run_proxy(px);
    if (*e) return run_eval(ev);
    if (*x) return run_export(ex);
  } catch (const Error& err) {
    return report_error(to_string(err.kind()), err.what(), exit_code(err.kind()));
  } catch (const std::exception& err) {
    return report_error("internal", err.what(), 1);
  }
  return 1;
}
