#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "dpsr/binary_io.hpp"
#include "dpsr/common.hpp"

namespace dpsr {

struct IndexParams {
  std::size_t degree = 16;              // M; level 0 keeps up to 2M links
  std::size_t build_beam = 200;         // ef_construction
  std::size_t search_beam = 1000;       // candidate list size; never below k
  std::size_t exact_threshold = 10000;  // below this many items search is exact
  std::uint64_t seed = 42;

  NLOHMANN_DEFINE_TYPE_INTRUSIVE(IndexParams, degree, build_beam, search_beam, exact_threshold, seed)
};

struct SearchHit {
  std::string item_id;
  float score = 0;

  friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

/// Inner product with eight independent partial sums. Every scoring path in
/// the project goes through this kernel, so equal inputs give equal bits.
inline float dot_product(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  for (std::size_t j = 0; i < n && j < 8; ++i, ++j) acc[j] += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

/// Higher score first, then ascending id.
inline bool hit_before(const SearchHit& a, const SearchHit& b) {
  return a.score != b.score ? a.score > b.score : a.item_id < b.item_id;
}

/// Exact top-k by inner product over `vectors` (row-major, ids.size() x dim).
inline std::vector<SearchHit> brute_force_search(std::span<const std::string> ids,
                                                 std::span<const float> vectors, std::size_t dim,
                                                 std::span<const float> query, std::size_t k) {
  require(query.size() == dim, ErrorKind::kDimensionMismatch,
          "brute force: query dim " + std::to_string(query.size()) + " != " + std::to_string(dim));
  std::vector<SearchHit> all;
  all.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    all.push_back({ids[i], dot_product(vectors.data() + i * dim, query.data(), dim)});
  }
  std::sort(all.begin(), all.end(), hit_before);
  if (all.size() > k) all.resize(k);
  return all;
}

inline constexpr std::string_view kIndexMagic = "DPSX";
inline constexpr std::uint32_t kIndexVersion = 1;

namespace detail {

// Per-search visited marks; epochs avoid clearing between searches.
struct VisitedList {
  std::vector<std::uint32_t> marks;
  std::uint32_t epoch = 0;

  explicit VisitedList(std::size_t n) : marks(n, 0) {}

  void next() {
    if (++epoch == 0) {
      std::fill(marks.begin(), marks.end(), 0);
      epoch = 1;
    }
  }
  bool visit(std::uint32_t i) {
    if (marks[i] == epoch) return false;
    marks[i] = epoch;
    return true;
  }
};

class VisitedPool {
 public:
  explicit VisitedPool(std::size_t n) : n_(n) {}

  std::unique_ptr<VisitedList> acquire() {
    std::lock_guard lock(mu_);
    if (free_.empty()) return std::make_unique<VisitedList>(n_);
    auto v = std::move(free_.back());
    free_.pop_back();
    return v;
  }
  void release(std::unique_ptr<VisitedList> v) {
    std::lock_guard lock(mu_);
    free_.push_back(std::move(v));
  }

 private:
  std::size_t n_;
  std::mutex mu_;
  std::vector<std::unique_ptr<VisitedList>> free_;
};

// Similarity with the node index as tie-breaker; nodes are stored in ascending
// id order so the index order is the id order.
struct Scored {
  float sim;
  std::uint32_t node;
};
inline bool better(const Scored& a, const Scored& b) {
  return a.sim != b.sim ? a.sim > b.sim : a.node < b.node;
}
struct WorstOnTop {
  bool operator()(const Scored& a, const Scored& b) const { return better(a, b); }
};
struct BestOnTop {
  bool operator()(const Scored& a, const Scored& b) const { return better(b, a); }
};

}  // namespace detail

/// Immutable top-K inner-product index over unit-norm vectors. Small corpora
/// are stored flat and searched exactly; larger ones get a layered proximity
/// graph. Concurrent searches are safe.
class EmbeddingIndex {
 public:
  struct Item {
    std::string id;
    std::vector<float> vector;
  };

  static EmbeddingIndex build(std::vector<Item> items, const IndexParams& params = {}) {
    require(!items.empty(), ErrorKind::kInvalidArgument, "build_index: no items");
    require(params.degree >= 2, ErrorKind::kInvalidArgument, "build_index: degree must be >= 2");
    EmbeddingIndex index;
    index.params_ = params;
    index.dim_ = items.front().vector.size();
    require(index.dim_ >= 1, ErrorKind::kInvalidArgument, "build_index: zero-dimensional vectors");
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.id < b.id; });
    index.ids_.reserve(items.size());
    index.vectors_.reserve(items.size() * index.dim_);
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto& item = items[i];
      require(item.vector.size() == index.dim_, ErrorKind::kDimensionMismatch,
              "build_index: item '" + item.id + "' has dim " + std::to_string(item.vector.size()) +
                  ", expected " + std::to_string(index.dim_));
      require(i == 0 || index.ids_.back() != item.id, ErrorKind::kInvalidArgument,
              "build_index: duplicate item id '" + item.id + "'");
      double norm2 = 0;
      for (float x : item.vector) norm2 += static_cast<double>(x) * x;
      require(std::abs(std::sqrt(norm2) - 1.0) <= 1e-5, ErrorKind::kInvalidArgument,
              "build_index: item '" + item.id + "' is not unit-norm");
      index.ids_.push_back(std::move(item.id));
      index.vectors_.insert(index.vectors_.end(), item.vector.begin(), item.vector.end());
    }
    index.pool_ = std::make_unique<detail::VisitedPool>(index.ids_.size());
    if (index.ids_.size() >= params.exact_threshold) index.build_graph();
    return index;
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  bool is_exact() const { return !graph_; }
  const IndexParams& params() const { return params_; }
  std::span<const std::string> ids() const { return ids_; }
  std::span<const float> vectors() const { return vectors_; }
  std::span<const float> vector(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }

  /// Up to k hits sorted by score descending then id ascending.
  /// `beam` overrides the configured search beam for this call (0 = default).
  std::vector<SearchHit> search(std::span<const float> query, std::size_t k, std::size_t beam = 0) const {
    require(k >= 1, ErrorKind::kInvalidArgument, "search: k must be >= 1");
    require(query.size() == dim_, ErrorKind::kDimensionMismatch,
            "search: query dim " + std::to_string(query.size()) + " != index dim " +
                std::to_string(dim_));
    k = std::min(k, ids_.size());
    std::vector<detail::Scored> found = graph_ ? graph_search(query.data(), k, beam ? beam : params_.search_beam) : flat_search(query.data(), k);
    std::vector<SearchHit> hits;
    hits.reserve(found.size());
    for (const auto& s : found) hits.push_back({ids_[s.node], s.sim});
    return hits;
  }

  std::string serialize() const {
    nlohmann::json header;
    header["dim"] = dim_;
    header["count"] = ids_.size();
    header["params"] = params_;
    header["mode"] = graph_ ? "graph" : "flat";
    header["max_level"] = max_level_;
    header["entry"] = entry_;
    const auto text = header.dump();
    io::ByteWriter out;
    out.put_bytes(kIndexMagic);
    out.put<std::uint32_t>(kIndexVersion);
    out.put<std::uint64_t>(text.size());
    out.put_bytes(text);
    for (const auto& id : ids_) out.put_string(id);
    out.put_span<float>(vectors_);
    if (graph_) {
      out.put_span<std::int32_t>(levels_);
      out.put_span<std::uint32_t>(level0_);
      for (std::size_t i = 0; i < ids_.size(); ++i) out.put_span<std::uint32_t>(upper_[i]);
    }
    return out.bytes();
  }

  static EmbeddingIndex parse(std::string_view bytes, const std::string& what = "index") {
    io::ByteReader in(bytes, what);
    require(in.take(4) == kIndexMagic, ErrorKind::kCorrupt, what + ": bad magic");
    const auto version = in.get<std::uint32_t>();
    require(version == kIndexVersion, ErrorKind::kVersionMismatch,
            what + ": unsupported index version " + std::to_string(version) + " (expected " +
                std::to_string(kIndexVersion) + ")");
    const auto header_len = in.get<std::uint64_t>();
    EmbeddingIndex index;
    std::size_t count = 0;
    std::string mode;
    try {
      const auto header = nlohmann::json::parse(in.take(header_len));
      index.dim_ = header.at("dim").get<std::size_t>();
      count = header.at("count").get<std::size_t>();
      index.params_ = header.at("params").get<IndexParams>();
      mode = header.at("mode").get<std::string>();
      index.max_level_ = header.at("max_level").get<int>();
      index.entry_ = header.at("entry").get<std::uint32_t>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kCorrupt, what + ": bad header: " + e.what());
    }
    require(count >= 1 && index.dim_ >= 1, ErrorKind::kCorrupt, what + ": empty index");
    require(count <= in.remaining() / 4, ErrorKind::kCorrupt, what + ": truncated id block");
    index.ids_.reserve(count);
    for (std::size_t i = 0; i < count; ++i) index.ids_.push_back(in.get_string());
    require(count * index.dim_ <= in.remaining() / sizeof(float), ErrorKind::kCorrupt,
            what + ": truncated vector block");
    index.vectors_.resize(count * index.dim_);
    in.get_into<float>(index.vectors_);
    if (mode == "graph") {
      index.graph_ = true;
      const std::size_t m = index.params_.degree;
      require(count <= in.remaining() / 4, ErrorKind::kCorrupt, what + ": truncated level block");
      index.levels_.resize(count);
      in.get_into<std::int32_t>(index.levels_);
      require(count * (2 * m + 1) <= in.remaining() / 4, ErrorKind::kCorrupt,
              what + ": truncated adjacency block");
      index.level0_.resize(count * (2 * m + 1));
      in.get_into<std::uint32_t>(index.level0_);
      index.upper_.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto lv = index.levels_[i];
        require(lv >= 0 && lv <= index.max_level_, ErrorKind::kCorrupt, what + ": bad node level");
        const std::size_t n = static_cast<std::size_t>(lv) * (m + 1);
        require(n <= in.remaining() / 4, ErrorKind::kCorrupt, what + ": truncated adjacency block");
        index.upper_[i].resize(n);
        in.get_into<std::uint32_t>(index.upper_[i]);
      }
      require(index.entry_ < count, ErrorKind::kCorrupt, what + ": bad entry point");
      index.validate_links();
    } else {
      require(mode == "flat", ErrorKind::kCorrupt, what + ": unknown mode '" + mode + "'");
    }
    in.expect_end();
    index.pool_ = std::make_unique<detail::VisitedPool>(count);
    return index;
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

  static EmbeddingIndex load(const std::filesystem::path& path) {
    return parse(io::read_file(path), path.string());
  }

 private:
  float sim(const float* q, std::uint32_t node) const {
    return dot_product(vectors_.data() + static_cast<std::size_t>(node) * dim_, q, dim_);
  }

  std::size_t max_links(int level) const {
    return level == 0 ? 2 * params_.degree : params_.degree;
  }

  // Link list of `node` at `level`: element 0 is the count.
  std::uint32_t* links(std::uint32_t node, int level) {
    if (level == 0) return level0_.data() + static_cast<std::size_t>(node) * (2 * params_.degree + 1);
    return upper_[node].data() + static_cast<std::size_t>(level - 1) * (params_.degree + 1);
  }
  const std::uint32_t* links(std::uint32_t node, int level) const {
    return const_cast<EmbeddingIndex*>(this)->links(node, level);
  }

  std::vector<detail::Scored> flat_search(const float* q, std::size_t k) const {
    std::vector<detail::Scored> all(ids_.size());
    for (std::uint32_t i = 0; i < all.size(); ++i) all[i] = {sim(q, i), i};
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), detail::better);
    all.resize(k);
    return all;
  }

  std::uint32_t greedy_descend(const float* q, std::uint32_t ep, int from_level, int to_level) const {
    detail::Scored cur{sim(q, ep), ep};
    for (int level = from_level; level > to_level; --level) {
      bool changed = true;
      while (changed) {
        changed = false;
        const auto* l = links(cur.node, level);
        for (std::uint32_t j = 1; j <= l[0]; ++j) {
          detail::Scored cand{sim(q, l[j]), l[j]};
          if (detail::better(cand, cur)) {
            cur = cand;
            changed = true;
          }
        }
      }
    }
    return cur.node;
  }

  // Beam search restricted to one layer; returns up to `ef` best nodes, unsorted.
  std::vector<detail::Scored> search_layer(const float* q, std::uint32_t ep, std::size_t ef, int level,
                                           detail::VisitedList& visited) const {
    visited.next();
    std::priority_queue<detail::Scored, std::vector<detail::Scored>, detail::BestOnTop> candidates;
    std::priority_queue<detail::Scored, std::vector<detail::Scored>, detail::WorstOnTop> results;
    const detail::Scored start{sim(q, ep), ep};
    visited.visit(ep);
    candidates.push(start);
    results.push(start);
    while (!candidates.empty()) {
      const auto c = candidates.top();
      if (results.size() >= ef && detail::better(results.top(), c)) break;
      candidates.pop();
      const auto* l = links(c.node, level);
      for (std::uint32_t j = 1; j <= l[0]; ++j) {
        __builtin_prefetch(vectors_.data() + static_cast<std::size_t>(l[j]) * dim_);
      }
      for (std::uint32_t j = 1; j <= l[0]; ++j) {
        const auto nb = l[j];
        if (!visited.visit(nb)) continue;
        const detail::Scored s{sim(q, nb), nb};
        if (results.size() < ef || detail::better(s, results.top())) {
          candidates.push(s);
          results.push(s);
          if (results.size() > ef) results.pop();
        }
      }
    }
    std::vector<detail::Scored> out;
    out.reserve(results.size());
    while (!results.empty()) {
      out.push_back(results.top());
      results.pop();
    }
    return out;
  }

  std::vector<detail::Scored> graph_search(const float* q, std::size_t k, std::size_t beam) const {
    auto visited = pool_->acquire();
    const auto ep = greedy_descend(q, entry_, max_level_, 0);
    auto found = search_layer(q, ep, std::max(k, beam), 0, *visited);
    pool_->release(std::move(visited));
    std::sort(found.begin(), found.end(), detail::better);
    if (found.size() > k) found.resize(k);
    return found;
  }

  // Keeps a candidate only if it is closer to the base than to every neighbour
  // already kept, which spreads links across directions.
  std::vector<detail::Scored> select_neighbors(std::vector<detail::Scored> candidates, std::size_t limit) const {
    std::sort(candidates.begin(), candidates.end(), detail::better);
    if (candidates.size() <= limit) return candidates;
    std::vector<detail::Scored> kept;
    kept.reserve(limit);
    for (const auto& c : candidates) {
      if (kept.size() >= limit) break;
      const float* cv = vectors_.data() + static_cast<std::size_t>(c.node) * dim_;
      bool good = true;
      for (const auto& r : kept) {
        if (sim(cv, r.node) > c.sim) {
          good = false;
          break;
        }
      }
      if (good) kept.push_back(c);
    }
    return kept;
  }

  void connect(std::uint32_t node, const std::vector<detail::Scored>& neighbors, int level) {
    auto* own = links(node, level);
    own[0] = static_cast<std::uint32_t>(neighbors.size());
    for (std::size_t j = 0; j < neighbors.size(); ++j) own[j + 1] = neighbors[j].node;
    const auto cap = max_links(level);
    const float* nv = vectors_.data() + static_cast<std::size_t>(node) * dim_;
    for (const auto& nb : neighbors) {
      auto* l = links(nb.node, level);
      if (l[0] < cap) {
        l[++l[0]] = node;
        continue;
      }
      const float* base = vectors_.data() + static_cast<std::size_t>(nb.node) * dim_;
      std::vector<detail::Scored> pool;
      pool.reserve(cap + 1);
      pool.push_back({dot_product(base, nv, dim_), node});
      for (std::uint32_t j = 1; j <= l[0]; ++j) pool.push_back({sim(base, l[j]), l[j]});
      auto pruned = select_neighbors(std::move(pool), cap);
      l[0] = static_cast<std::uint32_t>(pruned.size());
      for (std::size_t j = 0; j < pruned.size(); ++j) l[j + 1] = pruned[j].node;
    }
  }

  void build_graph() {
    graph_ = true;
    const auto n = ids_.size();
    const std::size_t m = params_.degree;
    std::mt19937_64 rng(params_.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double level_mult = 1.0 / std::log(static_cast<double>(m));
    levels_.resize(n);
    upper_.resize(n);
    level0_.assign(n * (2 * m + 1), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = 1.0 - unit(rng);  // (0, 1]
      levels_[i] = static_cast<std::int32_t>(std::floor(-std::log(u) * level_mult));
      upper_[i].assign(static_cast<std::size_t>(levels_[i]) * (m + 1), 0);
    }
    auto visited = pool_->acquire();
    entry_ = 0;
    max_level_ = levels_[0];
    for (std::uint32_t node = 1; node < n; ++node) {
      const float* q = vectors_.data() + static_cast<std::size_t>(node) * dim_;
      const int level = levels_[node];
      std::uint32_t ep = greedy_descend(q, entry_, max_level_, level);
      for (int l = std::min(level, max_level_); l >= 0; --l) {
        auto found = search_layer(q, ep, params_.build_beam, l, *visited);
        ep = std::max_element(found.begin(), found.end(), [](const auto& a, const auto& b) {
               return detail::better(b, a);
             })->node;
        connect(node, select_neighbors(std::move(found), m), l);
      }
      if (level > max_level_) {
        max_level_ = level;
        entry_ = node;
      }
    }
    pool_->release(std::move(visited));
  }

  void validate_links() const {
    const auto n = static_cast<std::uint32_t>(ids_.size());
    for (std::uint32_t node = 0; node < n; ++node) {
      for (int level = 0; level <= levels_[node]; ++level) {
        const auto* l = links(node, level);
        require(l[0] <= max_links(level), ErrorKind::kCorrupt, "index: link count overflow");
        for (std::uint32_t j = 1; j <= l[0]; ++j) {
          require(l[j] < n && levels_[l[j]] >= level, ErrorKind::kCorrupt, "index: dangling link");
        }
      }
    }
  }

  std::size_t dim_ = 0;
  IndexParams params_;
  std::vector<std::string> ids_;
  std::vector<float> vectors_;
  bool graph_ = false;
  std::vector<std::int32_t> levels_;
  std::vector<std::uint32_t> level0_;
  std::vector<std::vector<std::uint32_t>> upper_;
  std::uint32_t entry_ = 0;
  int max_level_ = 0;
  std::unique_ptr<detail::VisitedPool> pool_;
};

}  // namespace dpsr
