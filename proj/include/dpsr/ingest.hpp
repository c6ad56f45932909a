#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "dpsr/binary_io.hpp"
#include "dpsr/common.hpp"
#include "dpsr/tokenizer.hpp"
#include "dpsr/trainer.hpp"

namespace dpsr {

struct ItemRecord {
  std::string id;
  std::string title;
  std::string category;
  std::uint64_t popularity = 0;  // raw click count

  friend bool operator==(const ItemRecord&, const ItemRecord&) = default;
};

struct UserRecord {
  std::string id;
  std::string gender;
  std::string power;
  std::string locale;
  std::vector<std::string> history;

  friend bool operator==(const UserRecord&, const UserRecord&) = default;
};

enum class Label { kClick, kSkip, kHumanPos, kHumanNeg };

inline std::string_view to_string(Label label) {
  switch (label) {
    case Label::kClick: return "click";
    case Label::kSkip: return "skip";
    case Label::kHumanPos: return "human_pos";
    case Label::kHumanNeg: return "human_neg";
  }
  return "?";
}

inline Label parse_label(std::string_view s) {
  if (s == "click") return Label::kClick;
  if (s == "skip") return Label::kSkip;
  if (s == "human_pos") return Label::kHumanPos;
  if (s == "human_neg") return Label::kHumanNeg;
  fail(ErrorKind::kParse, "unknown label '" + std::string(s) + "'");
}

inline bool is_positive(Label label) { return label == Label::kClick || label == Label::kHumanPos; }

struct Interaction {
  std::string query;
  std::string user_id;
  std::string item_id;
  Label label = Label::kClick;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

/// Which user features ride along with the query: none, profile
/// (gender/power/locale) or profile plus purchase history.
enum class UserFeatureMode { kNone, kProfile, kHistory };

inline UserFeatureMode parse_user_feature_mode(std::string_view s) {
  if (s == "none") return UserFeatureMode::kNone;
  if (s == "profile") return UserFeatureMode::kProfile;
  if (s == "history") return UserFeatureMode::kHistory;
  fail(ErrorKind::kInvalidArgument, "unknown user feature mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// TSV plumbing. Every file starts with a header line; TAB and newline cannot
// appear inside a value.

namespace tsv {

inline const std::vector<std::string>& users_header() {
  static const std::vector<std::string> h{"user_id", "gender", "power", "locale", "history"};
  return h;
}
inline const std::vector<std::string>& items_header() {
  static const std::vector<std::string> h{"item_id", "title", "category", "popularity"};
  return h;
}
inline const std::vector<std::string>& interactions_header() {
  static const std::vector<std::string> h{"query", "user_id", "item_id", "label"};
  return h;
}

inline std::vector<std::string_view> split(std::string_view line, char sep = '\t') {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline void check_value(std::string_view v, std::string_view what) {
  if (v.find_first_of("\t\n\r") != std::string_view::npos) {
    fail(ErrorKind::kInvalidArgument, std::string(what) + ": value contains TAB or newline");
  }
}

/// Line reader that checks the header and the field count of every row.
class Reader {
 public:
  Reader(const std::filesystem::path& path, const std::vector<std::string>& header)
      : in_(path), path_(path.string()), width_(header.size()) {
    require(static_cast<bool>(in_), ErrorKind::kNotFound, "cannot open " + path_);
    std::string first;
    require(static_cast<bool>(std::getline(in_, first)), ErrorKind::kParse, path_ + ": missing header line");
    if (!first.empty() && first.back() == '\r') first.pop_back();
    auto got = split(first);
    bool ok = got.size() == header.size();
    for (std::size_t i = 0; ok && i < got.size(); ++i) ok = got[i] == header[i];
    require(ok, ErrorKind::kParse, path_ + ": unexpected header '" + first + "'");
    line_no_ = 1;
  }

  std::optional<std::vector<std::string_view>> next() {
    while (std::getline(in_, line_)) {
      ++line_no_;
      if (!line_.empty() && line_.back() == '\r') line_.pop_back();
      if (line_.empty()) continue;
      auto fields = split(line_);
      require(fields.size() == width_, ErrorKind::kParse,
              path_ + ":" + std::to_string(line_no_) + ": expected " + std::to_string(width_) +
                  " fields, got " + std::to_string(fields.size()));
      return fields;
    }
    return std::nullopt;
  }

  std::string where() const { return path_ + ":" + std::to_string(line_no_); }

 private:
  std::ifstream in_;
  std::string path_;
  std::size_t width_;
  std::string line_;
  std::size_t line_no_ = 0;
};

inline std::string join(const std::vector<std::string>& values, char sep) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += values[i];
  }
  return out;
}

inline std::string header_line(const std::vector<std::string>& header) { return join(header, '\t') + "\n"; }

inline std::uint64_t parse_count(std::string_view s, const std::string& where) {
  try {
    std::size_t used = 0;
    auto v = std::stoull(std::string(s), &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::kParse, where + ": bad integer '" + std::string(s) + "'");
}

}  // namespace tsv

inline std::string render_item(const ItemRecord& r) {
  return r.id + "\t" + r.title + "\t" + r.category + "\t" + std::to_string(r.popularity) + "\n";
}
inline std::string render_user(const UserRecord& r) {
  return r.id + "\t" + r.gender + "\t" + r.power + "\t" + r.locale + "\t" + tsv::join(r.history, ',') + "\n";
}
inline std::string render_interaction(const Interaction& r) {
  return r.query + "\t" + r.user_id + "\t" + r.item_id + "\t" + std::string(to_string(r.label)) + "\n";
}

inline void write_items(const std::filesystem::path& path, const std::vector<ItemRecord>& items) {
  std::string out = tsv::header_line(tsv::items_header());
  for (const auto& r : items) {
    tsv::check_value(r.id, "item id");
    tsv::check_value(r.title, "item title");
    tsv::check_value(r.category, "item category");
    out += render_item(r);
  }
  io::write_file_atomic(path, out);
}

inline void write_users(const std::filesystem::path& path, const std::vector<UserRecord>& users) {
  std::string out = tsv::header_line(tsv::users_header());
  for (const auto& r : users) {
    for (const auto& v : {r.id, r.gender, r.power, r.locale}) tsv::check_value(v, "user field");
    out += render_user(r);
  }
  io::write_file_atomic(path, out);
}

inline void write_interactions(const std::filesystem::path& path, const std::vector<Interaction>& rows) {
  std::string out = tsv::header_line(tsv::interactions_header());
  for (const auto& r : rows) {
    for (const auto& v : {r.query, r.user_id, r.item_id}) tsv::check_value(v, "interaction field");
    out += render_interaction(r);
  }
  io::write_file_atomic(path, out);
}

inline std::vector<ItemRecord> read_items(const std::filesystem::path& path) {
  tsv::Reader in(path, tsv::items_header());
  std::vector<ItemRecord> out;
  while (auto f = in.next()) {
    auto& v = *f;
    out.push_back({std::string(v[0]), std::string(v[1]), std::string(v[2]), tsv::parse_count(v[3], in.where())});
  }
  return out;
}

inline std::vector<UserRecord> read_users(const std::filesystem::path& path) {
  tsv::Reader in(path, tsv::users_header());
  std::vector<UserRecord> out;
  while (auto f = in.next()) {
    auto& v = *f;
    UserRecord u{std::string(v[0]), std::string(v[1]), std::string(v[2]), std::string(v[3]), {}};
    if (!v[4].empty()) {
      for (auto h : tsv::split(v[4], ',')) u.history.emplace_back(h);
    }
    out.push_back(std::move(u));
  }
  return out;
}

inline std::vector<Interaction> read_interactions(const std::filesystem::path& path) {
  tsv::Reader in(path, tsv::interactions_header());
  std::vector<Interaction> out;
  while (auto f = in.next()) {
    auto& v = *f;
    out.push_back({std::string(v[0]), std::string(v[1]), std::string(v[2]), parse_label(v[3])});
  }
  return out;
}

/// In-memory lookup dictionaries built from the user and item feature files.
/// Immutable after load.
class FeatureStore {
 public:
  FeatureStore(std::vector<UserRecord> users, std::vector<ItemRecord> items)
      : users_(std::move(users)), items_(std::move(items)) {
    for (std::size_t i = 0; i < users_.size(); ++i) {
      require(user_index_.emplace(users_[i].id, i).second, ErrorKind::kInvalidArgument,
              "duplicate user id '" + users_[i].id + "'");
    }
    for (std::size_t i = 0; i < items_.size(); ++i) {
      require(item_index_.emplace(items_[i].id, i).second, ErrorKind::kInvalidArgument,
              "duplicate item id '" + items_[i].id + "'");
    }
  }

  static FeatureStore load(const std::filesystem::path& users, const std::filesystem::path& items) {
    return FeatureStore(read_users(users), read_items(items));
  }

  const std::vector<UserRecord>& users() const { return users_; }
  const std::vector<ItemRecord>& items() const { return items_; }

  const UserRecord* user(std::string_view id) const {
    auto it = user_index_.find(std::string(id));
    return it == user_index_.end() ? nullptr : &users_[it->second];
  }
  std::optional<std::size_t> item_position(std::string_view id) const {
    auto it = item_index_.find(std::string(id));
    if (it == item_index_.end()) return std::nullopt;
    return it->second;
  }
  const ItemRecord* item(std::string_view id) const {
    auto pos = item_position(id);
    return pos ? &items_[*pos] : nullptr;
  }

 private:
  std::vector<UserRecord> users_;
  std::vector<ItemRecord> items_;
  std::unordered_map<std::string, std::size_t> user_index_;
  std::unordered_map<std::string, std::size_t> item_index_;
};

struct JoinedExample {
  std::string query;
  Label label = Label::kClick;
  const UserRecord* user = nullptr;
  const ItemRecord* item = nullptr;
};

enum class DanglingPolicy { kSkip, kStrict };

/// Streams the interaction file, attaching user and item features from the
/// store. Dangling references are counted and skipped, or fatal in strict mode.
class InteractionStream {
 public:
  InteractionStream(const FeatureStore& store, const std::filesystem::path& interactions,
                    DanglingPolicy policy = DanglingPolicy::kSkip)
      : store_(store), reader_(interactions, tsv::interactions_header()), policy_(policy) {}

  std::optional<JoinedExample> next() {
    while (auto f = reader_.next()) {
      auto& v = *f;
      JoinedExample ex{std::string(v[0]), parse_label(v[3]), store_.user(v[1]), store_.item(v[2])};
      if (ex.user == nullptr || ex.item == nullptr) {
        if (policy_ == DanglingPolicy::kStrict) {
          fail(ErrorKind::kNotFound, reader_.where() + ": unresolved " +
                                         (ex.item == nullptr ? "item id '" + std::string(v[2])
                                                             : "user id '" + std::string(v[1])) +
                                         "'");
        }
        ++skipped_;
        continue;
      }
      return ex;
    }
    return std::nullopt;
  }

  std::size_t skipped() const { return skipped_; }

 private:
  const FeatureStore& store_;
  tsv::Reader reader_;
  DanglingPolicy policy_;
  std::size_t skipped_ = 0;
};

struct Dataset {
  FeatureStore store;
  std::vector<JoinedExample> examples;  // point into `store`
  std::size_t skipped = 0;
};

inline std::unique_ptr<Dataset> load_dataset(const std::filesystem::path& users,
                                             const std::filesystem::path& items,
                                             const std::filesystem::path& interactions,
                                             DanglingPolicy policy = DanglingPolicy::kSkip) {
  auto ds = std::make_unique<Dataset>(Dataset{FeatureStore::load(users, items), {}, 0});
  InteractionStream stream(ds->store, interactions, policy);
  while (auto ex = stream.next()) ds->examples.push_back(std::move(*ex));
  ds->skipped = stream.skipped();
  return ds;
}

// ---------------------------------------------------------------------------
// Denormalised single-file form, used to measure the three-file savings and as
// an independent join oracle in tests.

inline const std::vector<std::string>& denormalized_header() {
  static const std::vector<std::string> h{"query", "user_id", "gender", "power", "locale", "history",
                                          "item_id", "title", "category", "popularity", "label"};
  return h;
}

inline std::string render_denormalized(const Interaction& row, const UserRecord& u, const ItemRecord& it) {
  return row.query + "\t" + u.id + "\t" + u.gender + "\t" + u.power + "\t" + u.locale + "\t" +
         tsv::join(u.history, ',') + "\t" + it.id + "\t" + it.title + "\t" + it.category + "\t" +
         std::to_string(it.popularity) + "\t" + std::string(to_string(row.label)) + "\n";
}

struct StorageReport {
  std::uint64_t three_file_bytes = 0;
  std::uint64_t denormalized_bytes = 0;
  double ratio() const {
    return denormalized_bytes ? static_cast<double>(three_file_bytes) / static_cast<double>(denormalized_bytes) : 0.0;
  }
};

/// Bytes of the three-file layout versus the same data with features repeated
/// on every interaction row.
inline StorageReport storage_report(const std::vector<UserRecord>& users, const std::vector<ItemRecord>& items,
                                    const std::vector<Interaction>& interactions) {
  StorageReport r;
  r.three_file_bytes += tsv::header_line(tsv::users_header()).size();
  for (const auto& u : users) r.three_file_bytes += render_user(u).size();
  r.three_file_bytes += tsv::header_line(tsv::items_header()).size();
  for (const auto& i : items) r.three_file_bytes += render_item(i).size();
  r.three_file_bytes += tsv::header_line(tsv::interactions_header()).size();
  for (const auto& x : interactions) r.three_file_bytes += render_interaction(x).size();

  FeatureStore store(users, items);
  r.denormalized_bytes = tsv::header_line(denormalized_header()).size();
  for (const auto& x : interactions) {
    const auto* u = store.user(x.user_id);
    const auto* it = store.item(x.item_id);
    if (u && it) r.denormalized_bytes += render_denormalized(x, *u, *it).size();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Human supervision.

struct Supervision {
  std::vector<Interaction> positives;
  std::vector<Interaction> negatives;
  std::size_t duplicate_positives = 0;
};

/// human_pos rows become extra positives (deduplicated); human_neg and skip
/// rows become negatives for their query.
inline Supervision split_supervision(const std::vector<Interaction>& rows) {
  Supervision s;
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  for (const auto& r : rows) {
    switch (r.label) {
      case Label::kHumanPos:
        if (seen.emplace(r.query, r.user_id, r.item_id).second) {
          s.positives.push_back(r);
        } else {
          ++s.duplicate_positives;
        }
        break;
      case Label::kHumanNeg:
      case Label::kSkip:
        s.negatives.push_back(r);
        break;
      case Label::kClick:
        fail(ErrorKind::kParse, "supervision: 'click' rows belong in the interaction file");
    }
  }
  return s;
}

inline Supervision load_supervision(const std::filesystem::path& path) {
  return split_supervision(read_interactions(path));
}

// ---------------------------------------------------------------------------
// Feature rendering. Categorical features become '@name:value' tokens so they
// go through the one tokenizer like any other text.

inline std::uint64_t popularity_bucket(std::uint64_t popularity) {
  std::uint64_t b = 0;
  for (auto p = popularity + 1; p > 1; p >>= 1) ++b;
  return b;
}

inline std::string item_feature_text(const ItemRecord& item) {
  return item.title + " @cat:" + item.category + " @pop:" + std::to_string(popularity_bucket(item.popularity));
}

inline std::string user_feature_text(const UserRecord& user, UserFeatureMode mode) {
  if (mode == UserFeatureMode::kNone) return {};
  std::string out = "@gender:" + user.gender + " @power:" + user.power + " @locale:" + user.locale;
  if (mode == UserFeatureMode::kHistory) {
    for (const auto& h : user.history) out += " @hist:" + h;
  }
  return out;
}

/// Vocabulary ids of a user's feature tokens; unknown features are dropped.
inline std::vector<TokenId> user_feature_ids(const Vocabulary& vocab, const UserRecord& user, UserFeatureMode mode) {
  std::vector<TokenId> ids;
  const auto text = user_feature_text(user, mode);
  if (text.empty()) return ids;
  for (auto id : encode(vocab, text).ids) {
    if (id != kUnkId) ids.push_back(id);
  }
  return ids;
}

/// The single query-side encoding used by training, evaluation and serving.
inline TokenSequence encode_query(const Vocabulary& vocab, std::string_view text,
                                  std::span<const TokenId> user_features = {}) {
  auto seq = encode(vocab, text);
  seq.ids.insert(seq.ids.end(), user_features.begin(), user_features.end());
  return seq;
}

inline TokenSequence encode_item(const Vocabulary& vocab, const ItemRecord& item) {
  return encode(vocab, item_feature_text(item));
}

/// Every text the vocabulary is counted over: item feature text, user feature
/// text (history mode, so all feature tokens are covered) and query strings.
inline void feed_vocabulary(VocabularyBuilder& builder, const FeatureStore& store,
                            const std::vector<Interaction>& interactions) {
  for (const auto& item : store.items()) builder.add(item_feature_text(item));
  for (const auto& user : store.users()) builder.add(user_feature_text(user, UserFeatureMode::kHistory));
  for (const auto& row : interactions) builder.add(row.query);
}

/// Encodes joined examples into the trainer's inputs. Positive labels become
/// pairs; skip/human_neg rows and supervision negatives feed the per-query
/// negative source. Every item of the store is a random-negative candidate.
inline TrainingData assemble_training_data(const FeatureStore& store, const std::vector<JoinedExample>& examples,
                                           const Vocabulary& vocab, UserFeatureMode mode,
                                           const Supervision* supervision = nullptr) {
  TrainingData data;
  data.items.reserve(store.items().size());
  for (const auto& item : store.items()) data.items.push_back({item.id, encode_item(vocab, item)});

  auto add = [&](const std::string& query, const UserRecord* user, const std::string& item_id, Label label) {
    auto pos = store.item_position(item_id);
    if (!pos) return;
    if (is_positive(label)) {
      std::vector<TokenId> features;
      if (user) features = user_feature_ids(vocab, *user, mode);
      data.pairs.push_back({query, encode_query(vocab, query, features), *pos});
    } else {
      data.supervised_negatives[query].push_back(*pos);
    }
  };
  for (const auto& ex : examples) add(ex.query, ex.user, ex.item->id, ex.label);
  if (supervision) {
    for (const auto& r : supervision->positives) add(r.query, store.user(r.user_id), r.item_id, r.label);
    for (const auto& r : supervision->negatives) add(r.query, store.user(r.user_id), r.item_id, r.label);
  }
  return data;
}

}  // namespace dpsr
