#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpsr/checkpoint.hpp"
#include "dpsr/common.hpp"
#include "dpsr/index.hpp"
#include "dpsr/ingest.hpp"
#include "dpsr/tokenizer.hpp"
#include "dpsr/towers.hpp"

namespace dpsr {

struct RetrievalHit {
  std::string item_id;
  float score = 0;
  std::size_t head = 0;

  friend bool operator==(const RetrievalHit&, const RetrievalHit&) = default;
};

struct RetrievalResponse {
  std::vector<RetrievalHit> hits;
  bool empty_query = false;  // query encoded to <UNK> only
  TokenSequence tokens;
  double took_ms = 0;
};

struct ServableDefaults {
  std::size_t k = 100;
  double fanout = 1.0;  // each head fetches ceil(k * fanout)
};

/// Query tower and item index in one process: the query embedding reaches the
/// index through memory. Immutable once constructed.
class Servable {
 public:
  Servable(std::string name, Vocabulary vocab, Checkpoint checkpoint, EmbeddingIndex index,
           ServableDefaults defaults = {})
      : name_(std::move(name)),
        vocab_(std::move(vocab)),
        params_(std::move(checkpoint.params)),
        index_(std::move(index)),
        defaults_(defaults) {
    require(checkpoint.vocab_hash == vocab_.hash(), ErrorKind::kHashMismatch,
            "servable: vocabulary hash " + vocab_.hash() + " differs from the one recorded at training (" +
                checkpoint.vocab_hash + ")");
    require(params_.config.vocab_size == vocab_.size(), ErrorKind::kDimensionMismatch,
            "servable: checkpoint vocabulary size " + std::to_string(params_.config.vocab_size) +
                " != vocabulary size " + std::to_string(vocab_.size()));
    require(index_.dim() == params_.config.dim, ErrorKind::kDimensionMismatch,
            "servable: index dim " + std::to_string(index_.dim()) + " != tower output dim " +
                std::to_string(params_.config.dim));
    require(defaults_.fanout > 0.0, ErrorKind::kInvalidArgument, "servable: fanout must be > 0");
  }

  static Servable load(std::string name, const std::filesystem::path& checkpoint,
                       const std::filesystem::path& index, const std::filesystem::path& vocab,
                       ServableDefaults defaults = {}) {
    return Servable(std::move(name), Vocabulary::load(vocab), load_checkpoint(checkpoint),
                    EmbeddingIndex::load(index), defaults);
  }

  const std::string& name() const { return name_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const TowerParams<float>& params() const { return params_; }
  const EmbeddingIndex& index() const { return index_; }
  const ServableDefaults& defaults() const { return defaults_; }

  /// Each head searches for ceil(k * fanout) items; duplicates keep their
  /// highest head score; sorted by score desc, id asc and cut to k.
  RetrievalResponse retrieve(std::string_view text, std::span<const TokenId> user_features, std::size_t k) const {
    const auto started = std::chrono::steady_clock::now();
    require(k >= 1, ErrorKind::kInvalidArgument, "retrieve: k must be >= 1");
    for (auto id : user_features) {
      require(id < vocab_.size(), ErrorKind::kInvalidArgument,
              "retrieve: user feature id " + std::to_string(id) + " outside the vocabulary");
    }
    RetrievalResponse out;
    auto text_seq = encode(vocab_, text);
    out.empty_query = is_unknown_only(text_seq);
    out.tokens = encode_query(vocab_, text, user_features);
    if (!out.empty_query) {
      const auto heads = query_forward<float>(params_, out.tokens);
      const auto fetch = static_cast<std::size_t>(std::ceil(static_cast<double>(k) * defaults_.fanout));
      std::unordered_map<std::string, std::size_t> position;
      for (std::size_t h = 0; h < heads.heads.size(); ++h) {
        const auto& e = heads.heads[h];
        for (auto& hit : index_.search(std::span<const float>(e.data(), static_cast<std::size_t>(e.size())), fetch)) {
          auto [it, fresh] = position.emplace(hit.item_id, out.hits.size());
          if (fresh) {
            out.hits.push_back({std::move(hit.item_id), hit.score, h});
          } else if (hit.score > out.hits[it->second].score) {
            out.hits[it->second].score = hit.score;
            out.hits[it->second].head = h;
          }
        }
      }
      std::sort(out.hits.begin(), out.hits.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
        return a.score != b.score ? a.score > b.score : a.item_id < b.item_id;
      });
      if (out.hits.size() > k) out.hits.resize(k);
    }
    out.took_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    return out;
  }

  RetrievalResponse retrieve(std::string_view text, std::size_t k) const { return retrieve(text, {}, k); }

 private:
  std::string name_;
  Vocabulary vocab_;
  TowerParams<float> params_;
  EmbeddingIndex index_;
  ServableDefaults defaults_;
};

// ---------------------------------------------------------------------------
// Wire format.

struct RetrievalRequest {
  std::string model;
  std::string query;
  std::size_t k = 0;  // 0 = servable default
  std::vector<TokenId> user_features;
  bool debug = false;
};

/// Parses a /v1/retrieve body; anything off-schema is a kParse error.
inline RetrievalRequest parse_request(std::string_view body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::kParse, std::string("malformed JSON: ") + e.what());
  }
  require(j.is_object(), ErrorKind::kParse, "request body must be a JSON object");
  RetrievalRequest r;
  auto field = [&](const char* name) -> const nlohmann::json* {
    auto it = j.find(name);
    return it == j.end() || it->is_null() ? nullptr : &*it;
  };
  const auto* model = field("model");
  require(model && model->is_string(), ErrorKind::kParse, "'model' must be a string");
  r.model = model->get<std::string>();
  const auto* query = field("query");
  require(query && query->is_string(), ErrorKind::kParse, "'query' must be a string");
  r.query = query->get<std::string>();
  if (const auto* k = field("k")) {
    require(k->is_number_integer() && k->get<std::int64_t>() >= 1, ErrorKind::kParse, "'k' must be an integer >= 1");
    r.k = k->get<std::size_t>();
  }
  if (const auto* f = field("user_features")) {
    require(f->is_array(), ErrorKind::kParse, "'user_features' must be an array of integers");
    for (const auto& v : *f) {
      require(v.is_number_integer() && v.get<std::int64_t>() >= 0, ErrorKind::kParse,
              "'user_features' must be an array of non-negative integers");
      r.user_features.push_back(v.get<TokenId>());
    }
  }
  if (const auto* d = field("debug")) {
    require(d->is_boolean(), ErrorKind::kParse, "'debug' must be a boolean");
    r.debug = d->get<bool>();
  }
  return r;
}

inline nlohmann::json request_json(const RetrievalRequest& r) {
  nlohmann::json j{{"model", r.model}, {"query", r.query}};
  if (r.k) j["k"] = r.k;
  if (!r.user_features.empty()) j["user_features"] = r.user_features;
  if (r.debug) j["debug"] = true;
  return j;
}

inline std::string render_response(const RetrievalResponse& r, bool debug) {
  nlohmann::json hits = nlohmann::json::array();
  for (const auto& h : r.hits) hits.push_back({{"item_id", h.item_id}, {"score", h.score}, {"head", h.head}});
  nlohmann::json j{{"hits", std::move(hits)}};
  if (r.empty_query) j["warning"] = "query has no known tokens";
  if (debug) j["debug"] = {{"token_ids", r.tokens.ids}};
  j["took_ms"] = r.took_ms;
  return j.dump();
}

inline nlohmann::json error_json(ErrorKind kind, std::string_view message) {
  return {{"error", {{"kind", to_string(kind)}, {"message", message}}}};
}

}  // namespace dpsr
