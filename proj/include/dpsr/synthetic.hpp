#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "dpsr/binary_io.hpp"
#include "dpsr/common.hpp"
#include "dpsr/ingest.hpp"
#include "dpsr/negatives.hpp"

namespace dpsr {

/// Latent-cluster click-log model. Items and queries draw their words from a
/// per-cluster word list, swapping each word for a global noise word with
/// probability `noise`; clicks join a query to an item of its cluster chosen
/// with weight rank^-skew.
struct SyntheticSpec {
  std::size_t clusters = 50;
  std::size_t items_per_cluster = 40;
  std::size_t queries_per_cluster = 20;
  std::size_t clicks = 100000;
  std::size_t heldout_clicks = 2000;
  std::size_t users = 500;
  std::size_t polysemous = 0;  // extra one-word queries shared by two clusters
  double noise = 0.1;
  double skew = 1.0;
  std::size_t cluster_words = 10;
  std::size_t title_words = 4;
  std::size_t noise_words = 500;
  std::uint64_t seed = 1;

  void validate() const {
    require(clusters >= 2, ErrorKind::kInvalidArgument, "synthetic: need at least 2 clusters");
    require(items_per_cluster >= 1, ErrorKind::kInvalidArgument, "synthetic: items_per_cluster must be >= 1");
    require(queries_per_cluster >= 1, ErrorKind::kInvalidArgument, "synthetic: queries_per_cluster must be >= 1");
    require(users >= 1, ErrorKind::kInvalidArgument, "synthetic: users must be >= 1");
    require(noise >= 0.0 && noise <= 1.0, ErrorKind::kInvalidArgument, "synthetic: noise must lie in [0, 1]");
    require(skew >= 0.0, ErrorKind::kInvalidArgument, "synthetic: skew must be >= 0");
    require(cluster_words >= 2 && title_words >= 1 && title_words <= cluster_words, ErrorKind::kInvalidArgument,
            "synthetic: need 2 <= cluster_words and 1 <= title_words <= cluster_words");
    require(noise_words >= 1, ErrorKind::kInvalidArgument, "synthetic: noise_words must be >= 1");
    require(polysemous <= clusters / 2, ErrorKind::kInvalidArgument,
            "synthetic: polysemous queries need two unused clusters each");
  }

  NLOHMANN_DEFINE_TYPE_INTRUSIVE(SyntheticSpec, clusters, items_per_cluster, queries_per_cluster, clicks,
                                 heldout_clicks, users, polysemous, noise, skew, cluster_words, title_words,
                                 noise_words, seed)
};

struct SyntheticQuery {
  std::string text;
  std::vector<std::size_t> clusters;  // two entries for polysemous queries
};

struct SyntheticCorpus {
  std::vector<UserRecord> users;
  std::vector<ItemRecord> items;
  std::vector<std::size_t> item_cluster;  // parallel to items
  std::vector<SyntheticQuery> queries;
  std::vector<Interaction> interactions;  // training clicks
  std::vector<Interaction> heldout;       // held-out clicks, same process
  std::vector<Interaction> auc_labels;    // human_pos / human_neg pairs
};

namespace detail {

inline std::string pseudo_word(Rng& rng) {
  static constexpr std::string_view kConsonants = "bcdfghjklmnprstvwz";
  static constexpr std::string_view kVowels = "aeiou";
  std::uniform_int_distribution<int> len(5, 8);
  std::uniform_int_distribution<std::size_t> pc(0, kConsonants.size() - 1), pv(0, kVowels.size() - 1);
  std::string w;
  const int n = len(rng);
  for (int i = 0; i < n; ++i) w += (i % 2 == 0) ? kConsonants[pc(rng)] : kVowels[pv(rng)];
  return w;
}

inline std::string fresh_word(Rng& rng, std::unordered_set<std::string>& used) {
  while (true) {
    auto w = pseudo_word(rng);
    if (used.insert(w).second) return w;
  }
}

}  // namespace detail

inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::unordered_set<std::string> used;
  std::vector<std::vector<std::string>> words(spec.clusters);
  for (auto& list : words) {
    for (std::size_t i = 0; i < spec.cluster_words; ++i) list.push_back(detail::fresh_word(rng, used));
  }
  std::vector<std::string> noise_pool;
  for (std::size_t i = 0; i < spec.noise_words; ++i) noise_pool.push_back(detail::fresh_word(rng, used));

  SyntheticCorpus out;
  // Polysemous word p belongs to clusters 2p and 2p+1.
  for (std::size_t p = 0; p < spec.polysemous; ++p) {
    auto w = detail::fresh_word(rng, used);
    words[2 * p].push_back(w);
    words[2 * p + 1].push_back(w);
    out.queries.push_back({w, {2 * p, 2 * p + 1}});
  }

  std::bernoulli_distribution swap(spec.noise);
  std::uniform_int_distribution<std::size_t> pick_noise(0, noise_pool.size() - 1);
  auto noisy = [&](const std::string& w) { return swap(rng) ? noise_pool[pick_noise(rng)] : w; };

  // Items, and per-cluster popularity weights over a random rank order.
  std::vector<std::vector<std::size_t>> cluster_items(spec.clusters);
  std::vector<std::discrete_distribution<std::size_t>> item_pick;
  for (std::size_t c = 0; c < spec.clusters; ++c) {
    for (std::size_t j = 0; j < spec.items_per_cluster; ++j) {
      std::vector<std::string> title_words = detail::sample_without_replacement<std::string>(
          words[c], spec.title_words, rng);
      std::string title;
      for (const auto& w : title_words) title += (title.empty() ? "" : " ") + noisy(w);
      char id[32];
      std::snprintf(id, sizeof id, "item%06zu", out.items.size());
      cluster_items[c].push_back(out.items.size());
      out.items.push_back({id, title, "c" + std::to_string(c), 0});
      out.item_cluster.push_back(c);
    }
    std::shuffle(cluster_items[c].begin(), cluster_items[c].end(), rng);
    std::vector<double> weight;
    for (std::size_t r = 0; r < cluster_items[c].size(); ++r) {
      weight.push_back(std::pow(static_cast<double>(r + 1), -spec.skew));
    }
    item_pick.emplace_back(weight.begin(), weight.end());
  }

  std::set<std::string> seen_queries;
  for (const auto& q : out.queries) seen_queries.insert(q.text);
  std::uniform_int_distribution<std::size_t> query_len(1, 3);
  for (std::size_t c = 0; c < spec.clusters; ++c) {
    for (std::size_t j = 0; j < spec.queries_per_cluster; ++j) {
      std::string text;
      for (int attempt = 0;; ++attempt) {
        require(attempt < 10000, ErrorKind::kInvalidArgument,
                "synthetic: cannot form enough distinct queries; raise cluster_words");
        const auto n = std::min(query_len(rng), spec.cluster_words);
        text.clear();
        for (const auto& w : detail::sample_without_replacement<std::string>(
                 std::span<const std::string>(words[c].data(), spec.cluster_words), n, rng)) {
          text += (text.empty() ? "" : " ") + noisy(w);
        }
        if (seen_queries.insert(text).second) break;
      }
      out.queries.push_back({text, {c}});
    }
  }

  static const std::vector<std::string> kLocales{"cn", "us", "de", "jp", "uk"};
  std::uniform_int_distribution<std::size_t> pick_item(0, out.items.size() - 1);
  std::uniform_int_distribution<int> history_len(0, 3);
  for (std::size_t u = 0; u < spec.users; ++u) {
    UserRecord user;
    user.id = "user" + std::to_string(u);
    user.gender = (rng() & 1) ? "f" : "m";
    user.power = std::to_string(rng() % 5);
    user.locale = kLocales[rng() % kLocales.size()];
    const int h = history_len(rng);
    for (int i = 0; i < h; ++i) user.history.push_back(out.items[pick_item(rng)].id);
    out.users.push_back(std::move(user));
  }

  std::uniform_int_distribution<std::size_t> pick_query(0, out.queries.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_user(0, out.users.size() - 1);
  auto click = [&]() {
    const auto& q = out.queries[pick_query(rng)];
    const auto c = q.clusters[rng() % q.clusters.size()];
    const auto item = cluster_items[c][item_pick[c](rng)];
    return Interaction{q.text, out.users[pick_user(rng)].id, out.items[item].id, Label::kClick};
  };
  for (std::size_t i = 0; i < spec.clicks; ++i) out.interactions.push_back(click());
  for (std::size_t i = 0; i < spec.heldout_clicks; ++i) out.heldout.push_back(click());

  std::map<std::string, std::size_t> item_pos;
  for (std::size_t i = 0; i < out.items.size(); ++i) item_pos.emplace(out.items[i].id, i);
  std::map<std::string, const SyntheticQuery*> query_of;
  for (const auto& q : out.queries) query_of.emplace(q.text, &q);
  for (const auto& h : out.heldout) {
    out.auc_labels.push_back({h.query, h.user_id, h.item_id, Label::kHumanPos});
    const auto& clusters = query_of.at(h.query)->clusters;
    std::size_t neg;
    do {
      neg = pick_item(rng);
    } while (std::find(clusters.begin(), clusters.end(), out.item_cluster[neg]) != clusters.end());
    out.auc_labels.push_back({h.query, h.user_id, out.items[neg].id, Label::kHumanNeg});
  }

  for (const auto& x : out.interactions) ++out.items[item_pos.at(x.item_id)].popularity;
  return out;
}

struct SyntheticFiles {
  std::filesystem::path users, items, interactions, heldout, auc_labels, item_truth, query_truth;

  explicit SyntheticFiles(const std::filesystem::path& dir)
      : users(dir / "users.tsv"),
        items(dir / "items.tsv"),
        interactions(dir / "interactions.tsv"),
        heldout(dir / "heldout.tsv"),
        auc_labels(dir / "auc_labels.tsv"),
        item_truth(dir / "item_clusters.tsv"),
        query_truth(dir / "query_clusters.tsv") {}

  std::vector<std::filesystem::path> all() const {
    return {users, items, interactions, heldout, auc_labels, item_truth, query_truth};
  }
};

inline void write_synthetic(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const SyntheticFiles f(dir);
  write_users(f.users, corpus.users);
  write_items(f.items, corpus.items);
  write_interactions(f.interactions, corpus.interactions);
  write_interactions(f.heldout, corpus.heldout);
  write_interactions(f.auc_labels, corpus.auc_labels);
  std::string items = "id\tcluster\n";
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    items += corpus.items[i].id + "\t" + std::to_string(corpus.item_cluster[i]) + "\n";
  }
  io::write_file_atomic(f.item_truth, items);
  std::string queries = "id\tcluster\n";
  for (const auto& q : corpus.queries) {
    for (auto c : q.clusters) queries += q.text + "\t" + std::to_string(c) + "\n";
  }
  io::write_file_atomic(f.query_truth, queries);
}

/// Ground-truth map: id -> clusters (a polysemous query lists two).
inline std::map<std::string, std::vector<std::size_t>> read_cluster_map(const std::filesystem::path& path) {
  tsv::Reader in(path, {"id", "cluster"});
  std::map<std::string, std::vector<std::size_t>> out;
  while (auto f = in.next()) {
    out[std::string((*f)[0])].push_back(static_cast<std::size_t>(tsv::parse_count((*f)[1], in.where())));
  }
  return out;
}

}  // namespace dpsr
