#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "dpsr/binary_io.hpp"
#include "dpsr/common.hpp"
#include "dpsr/ingest.hpp"
#include "dpsr/negatives.hpp"
#include "dpsr/scoring.hpp"
#include "dpsr/towers.hpp"

namespace dpsr {

/// One top-k trial: a query and its single relevant item (indices into the
/// caller's query list and item universe).
struct EvalCase {
  std::size_t query = 0;
  std::size_t relevant = 0;
};

/// Scores of every item in the universe for one query.
using ScoreAll = std::function<std::vector<double>(std::size_t query)>;
/// Items that must never be drawn as distractors for a query.
using ExcludeFn = std::function<bool(std::size_t query, std::size_t item)>;

/// Hit rate at each k: the relevant item is scored against N-1 distinct
/// uniform-random distractors and counts as a hit when its rank is <= k.
/// Ties rank against the relevant item. All ks share the same draws.
inline std::vector<double> top_k_rates(std::span<const EvalCase> cases, std::size_t n_items,
                                       std::span<const std::size_t> ks, std::size_t n_candidates, Rng& rng,
                                       const ScoreAll& scores, const ExcludeFn& exclude = {}) {
  require(n_candidates >= 1, ErrorKind::kInvalidArgument, "top_k: N must be >= 1");
  for (auto k : ks) require(k >= 1 && k <= n_candidates, ErrorKind::kInvalidArgument, "top_k: need 1 <= k <= N");
  std::vector<std::size_t> hits(ks.size(), 0);
  if (cases.empty()) return std::vector<double>(ks.size(), 0.0);
  std::vector<std::size_t> eligible;
  for (const auto& c : cases) {
    require(c.relevant < n_items, ErrorKind::kInvalidArgument, "top_k: relevant item outside the universe");
    eligible.clear();
    for (std::size_t i = 0; i < n_items; ++i) {
      if (i != c.relevant && !(exclude && exclude(c.query, i))) eligible.push_back(i);
    }
    require(eligible.size() >= n_candidates - 1, ErrorKind::kInvalidArgument,
            "top_k: only " + std::to_string(eligible.size()) + " distractors available, need " +
                std::to_string(n_candidates - 1));
    const auto distractors = detail::sample_without_replacement<std::size_t>(eligible, n_candidates - 1, rng);
    const auto s = scores(c.query);
    require(s.size() == n_items, ErrorKind::kDimensionMismatch, "top_k: scorer returned wrong length");
    const double target = s[c.relevant];
    std::size_t rank = 1;
    for (auto d : distractors) rank += s[d] >= target ? 1 : 0;
    for (std::size_t j = 0; j < ks.size(); ++j) hits[j] += rank <= ks[j] ? 1 : 0;
  }
  std::vector<double> out;
  for (auto h : hits) out.push_back(static_cast<double>(h) / static_cast<double>(cases.size()));
  return out;
}

struct LabeledScore {
  double score = 0;
  bool positive = false;
};

/// Rank-sum AUC; tied scores share their average rank, so a tie counts 1/2.
inline double auc(std::span<const LabeledScore> pairs) {
  std::vector<LabeledScore> v(pairs.begin(), pairs.end());
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j].score == v[i].score) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (v[t].positive) {
        pos += 1;
        rank_sum += avg_rank;
      } else {
        neg += 1;
      }
    }
    i = j;
  }
  require(pos > 0 && neg > 0, ErrorKind::kInvalidArgument, "auc: need at least one positive and one negative");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

/// Mean popularity over every hit of every query's top-k list.
inline double mean_retrieved_popularity(const std::vector<std::vector<std::string>>& retrieved,
                                        const std::map<std::string, double>& popularity) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& hits : retrieved) {
    for (const auto& id : hits) {
      auto it = popularity.find(id);
      require(it != popularity.end(), ErrorKind::kNotFound, "popularity unknown for item '" + id + "'");
      total += it->second;
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// Item embeddings computed once; queries are scored against all of them
/// with the soft dot product.
class TowerScorer {
 public:
  TowerScorer(const TowerParams<float>& params, std::span<const TokenSequence> items, double beta)
      : params_(params), beta_(beta), items_(params.config.dim, static_cast<Eigen::Index>(items.size())) {
    for (std::size_t i = 0; i < items.size(); ++i) {
      items_.col(static_cast<Eigen::Index>(i)) = item_forward<float>(params_, items[i]).g;
    }
  }

  std::vector<double> score_all(const TokenSequence& query) const {
    const auto heads = query_forward<float>(params_, query);
    const auto n = items_.cols();
    const auto m = heads.heads.size();
    Matrix<float> E(params_.config.dim, static_cast<Eigen::Index>(m));
    for (std::size_t h = 0; h < m; ++h) E.col(static_cast<Eigen::Index>(h)) = heads.heads[h];
    const Matrix<float> S = E.transpose() * items_;
    std::vector<double> out(static_cast<std::size_t>(n));
    std::vector<double> s(m);
    for (Eigen::Index c = 0; c < n; ++c) {
      for (std::size_t h = 0; h < m; ++h) s[h] = S(static_cast<Eigen::Index>(h), c);
      out[static_cast<std::size_t>(c)] = soft_dot<double>(s, beta_);
    }
    return out;
  }

  double score(const TokenSequence& query, std::size_t item) const { return score_all(query)[item]; }

  const Matrix<float>& item_embeddings() const { return items_; }

 private:
  const TowerParams<float>& params_;
  double beta_;
  Matrix<float> items_;
};

struct LatencyReport {
  std::size_t requests = 0;
  std::size_t errors = 0;
  double p50_ms = 0;
  double p99_ms = 0;
  double qps = 0;
  NLOHMANN_DEFINE_TYPE_INTRUSIVE(LatencyReport, requests, errors, p50_ms, p99_ms, qps)
};

/// Nearest-rank percentile, q in [0, 1].
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

struct MetricReport {
  double top1 = 0;
  double top10 = 0;
  double auc = 0;
  double mean_popularity = 0;
  LatencyReport latency;

  nlohmann::json to_json() const {
    return {{"top1", top1}, {"top10", top10}, {"auc", auc}, {"mean_popularity", mean_popularity},
            {"latency", latency}};
  }
  std::string summary_line() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "top1\t%.6g\ttop10\t%.6g\tauc\t%.6g\tmean_popularity\t%.6g\tp50_ms\t%.6g\tp99_ms\t%.6g\tqps\t%.6g",
                  top1, top10, auc, mean_popularity, latency.p50_ms, latency.p99_ms, latency.qps);
    return buf;
  }
};

// ---------------------------------------------------------------------------
// Embedding export: items as "id<TAB>v..." and queries as
// "id<TAB>head<TAB>v...", floats at 6 significant digits.

struct ExportRow {
  std::string id;
  int head = -1;  // -1 for items
  std::vector<float> values;
};

namespace detail {

template <typename V>
std::string format_row(const std::string& id, int head, const V& v) {
  std::string line = id;
  if (head >= 0) line += "\t" + std::to_string(head);
  char buf[32];
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "\t%.6g", static_cast<double>(v[i]));
    line += buf;
  }
  return line + "\n";
}

}  // namespace detail

inline void export_item_embeddings(const TowerParams<float>& params, const Vocabulary& vocab,
                                   const std::vector<ItemRecord>& items, const std::filesystem::path& path) {
  std::string out;
  for (const auto& item : items) {
    tsv::check_value(item.id, "item id");
    out += detail::format_row(item.id, -1, item_forward<float>(params, encode_item(vocab, item)).g);
  }
  io::write_file_atomic(path, out);
}

inline void export_query_embeddings(const TowerParams<float>& params, const Vocabulary& vocab,
                                    const std::vector<std::string>& queries, const std::filesystem::path& path) {
  std::string out;
  for (const auto& q : queries) {
    tsv::check_value(q, "query");
    const auto heads = query_forward<float>(params, encode_query(vocab, q));
    for (std::size_t h = 0; h < heads.heads.size(); ++h) {
      out += detail::format_row(q, static_cast<int>(h), heads.heads[h]);
    }
  }
  io::write_file_atomic(path, out);
}

/// Reads an export back; `with_head` selects the query layout.
inline std::vector<ExportRow> load_export(const std::filesystem::path& path, bool with_head) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kNotFound, "cannot open " + path.string());
  std::vector<ExportRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = tsv::split(line);
    require(f.size() >= (with_head ? 3u : 2u), ErrorKind::kParse, "export row too short");
    ExportRow r{std::string(f[0]), -1, {}};
    std::size_t start = 1;
    if (with_head) r.head = std::stoi(std::string(f[start++]));
    for (std::size_t i = start; i < f.size(); ++i) r.values.push_back(std::stof(std::string(f[i])));
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace dpsr
