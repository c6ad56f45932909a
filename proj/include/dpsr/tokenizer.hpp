#pragma once

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/locid.h>
#include <unicode/uscript.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dpsr/binary_io.hpp"
#include "dpsr/common.hpp"
#include "dpsr/hashing.hpp"

namespace dpsr {

enum class TokenKind : std::uint8_t { kUnigram, kTrigram };

struct Token {
  std::string text;
  TokenKind kind = TokenKind::kUnigram;

  friend bool operator==(const Token&, const Token&) = default;
};

using TokenId = std::uint32_t;
inline constexpr TokenId kUnkId = 0;
inline constexpr std::string_view kUnkToken = "<UNK>";

struct TokenSequence {
  std::vector<TokenId> ids;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

namespace detail {

inline bool is_cjk(UChar32 c) {
  UErrorCode status = U_ZERO_ERROR;
  const UScriptCode script = uscript_getScript(c, &status);
  if (U_FAILURE(status)) return false;
  return script == USCRIPT_HAN || script == USCRIPT_HIRAGANA ||
         script == USCRIPT_KATAKANA || script == USCRIPT_HANGUL ||
         u_hasBinaryProperty(c, UCHAR_IDEOGRAPHIC);
}

inline std::string to_utf8(const icu::UnicodeString& s) {
  std::string out;
  s.toUTF8String(out);
  return out;
}

// NFKC, root-locale lowercase, then NFKC again since case mapping can leave
// a string unnormalised.
inline icu::UnicodeString normalize(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfkc = icu::Normalizer2::getNFKCInstance(status);
  if (U_FAILURE(status)) fail(ErrorKind::kUnavailable, "ICU NFKC normaliser unavailable");
  auto s = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  s = nfkc->normalize(s, status);
  s.toLower(icu::Locale::getRoot());
  s = nfkc->normalize(s, status);
  if (U_FAILURE(status)) fail(ErrorKind::kInvalidArgument, "normalisation failed");
  return s;
}

inline std::vector<icu::UnicodeString> split_unigrams(const icu::UnicodeString& s) {
  std::vector<icu::UnicodeString> out;
  icu::UnicodeString current;
  auto flush = [&] {
    if (!current.isEmpty()) {
      out.push_back(current);
      current.remove();
    }
  };
  for (int32_t i = 0; i < s.length();) {
    const UChar32 c = s.char32At(i);
    i += U16_LENGTH(c);
    if (u_isUWhiteSpace(c)) {
      flush();
    } else if (is_cjk(c)) {
      flush();
      out.emplace_back(c);
    } else {
      current.append(c);
    }
  }
  flush();
  return out;
}

inline bool is_alphanumeric(const icu::UnicodeString& word) {
  for (int32_t i = 0; i < word.length();) {
    const UChar32 c = word.char32At(i);
    if (!u_isalnum(c)) return false;
    i += U16_LENGTH(c);
  }
  return true;
}

inline void append_trigrams(const icu::UnicodeString& word, std::vector<Token>& out) {
  if (word.countChar32() < 2 || !is_alphanumeric(word)) return;
  std::vector<UChar32> padded;
  padded.push_back(U'#');
  for (int32_t i = 0; i < word.length();) {
    const UChar32 c = word.char32At(i);
    padded.push_back(c);
    i += U16_LENGTH(c);
  }
  padded.push_back(U'#');
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    icu::UnicodeString tri;
    for (std::size_t j = 0; j < 3; ++j) tri.append(padded[i + j]);
    out.push_back({to_utf8(tri), TokenKind::kTrigram});
  }
}

}  // namespace detail

/// Splits raw text into normalised unigrams followed by the letter trigrams of
/// every alphanumeric unigram of length >= 2. Each CJK character is its own
/// unigram. Pure and thread-safe; this is the only tokenizer in the project.
inline std::vector<Token> tokenize(std::string_view text) {
  const auto words = detail::split_unigrams(detail::normalize(text));
  std::vector<Token> tokens;
  tokens.reserve(words.size() * 4);
  for (const auto& w : words) tokens.push_back({detail::to_utf8(w), TokenKind::kUnigram});
  for (const auto& w : words) detail::append_trigrams(w, tokens);
  return tokens;
}

/// Token-to-id map. Id 0 is reserved for <UNK>; real tokens occupy 1..size()-1
/// ordered by descending count, ties lexicographic. Immutable once built.
class Vocabulary {
 public:
  struct Entry {
    TokenId id;
    std::uint64_t count;
  };

  Vocabulary() : tokens_{std::string(kUnkToken)}, counts_{0} {}

  /// Number of ids including <UNK>.
  std::size_t size() const { return tokens_.size(); }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::uint64_t count(TokenId id) const { return counts_.at(id); }

  std::string serialize() const {
    std::string out;
    for (std::size_t id = 0; id < tokens_.size(); ++id) {
      out += tokens_[id];
      out += '\t';
      out += std::to_string(id);
      out += '\t';
      out += std::to_string(counts_[id]);
      out += '\n';
    }
    return out;
  }

  std::string hash() const { return sha256_hex(serialize()); }

  static Vocabulary parse(std::string_view text) {
    Vocabulary v;
    v.tokens_.clear();
    v.counts_.clear();
    std::size_t line_no = 0;
    while (!text.empty()) {
      auto nl = text.find('\n');
      require(nl != std::string_view::npos, ErrorKind::kParse,
              "vocabulary: missing newline on line " + std::to_string(line_no));
      auto line = text.substr(0, nl);
      text.remove_prefix(nl + 1);
      auto t1 = line.find('\t');
      auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
      require(t2 != std::string_view::npos && line.find('\t', t2 + 1) == std::string_view::npos,
              ErrorKind::kParse, "vocabulary: line " + std::to_string(line_no) + " needs 3 fields");
      std::string token(line.substr(0, t1));
      const auto id = std::stoull(std::string(line.substr(t1 + 1, t2 - t1 - 1)));
      const auto count = std::stoull(std::string(line.substr(t2 + 1)));
      require(id == line_no, ErrorKind::kParse,
              "vocabulary: ids must be dense and ascending (line " + std::to_string(line_no) + ")");
      if (id == 0) {
        require(token == kUnkToken && count == 0, ErrorKind::kParse,
                "vocabulary: line 0 must be <UNK> 0 0");
      } else {
        require(v.index_.emplace(token, static_cast<TokenId>(id)).second, ErrorKind::kParse,
                "vocabulary: duplicate token '" + token + "'");
      }
      v.tokens_.push_back(std::move(token));
      v.counts_.push_back(count);
      ++line_no;
    }
    require(!v.tokens_.empty(), ErrorKind::kParse, "vocabulary: empty file");
    return v;
  }

  void save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

  static Vocabulary load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

  static Vocabulary from_counts(const std::unordered_map<std::string, std::uint64_t>& counts,
                                std::uint64_t min_count) {
    require(min_count >= 1, ErrorKind::kInvalidArgument, "min_count must be >= 1");
    std::vector<std::pair<std::string, std::uint64_t>> kept;
    for (const auto& [tok, n] : counts) {
      if (n >= min_count) kept.emplace_back(tok, n);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocabulary v;
    for (auto& [tok, n] : kept) {
      v.index_.emplace(tok, static_cast<TokenId>(v.tokens_.size()));
      v.tokens_.push_back(std::move(tok));
      v.counts_.push_back(n);
    }
    return v;
  }

 private:
  std::unordered_map<std::string, TokenId> index_;
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
};

/// Streaming token counter feeding build_vocabulary.
class VocabularyBuilder {
 public:
  void add(std::string_view text) {
    for (auto& t : tokenize(text)) ++counts_[std::move(t.text)];
  }

  Vocabulary build(std::uint64_t min_count) const { return Vocabulary::from_counts(counts_, min_count); }

 private:
  std::unordered_map<std::string, std::uint64_t> counts_;
};

template <typename Range>
Vocabulary build_vocabulary(const Range& corpus, std::uint64_t min_count) {
  require(min_count >= 1, ErrorKind::kInvalidArgument, "min_count must be >= 1");
  VocabularyBuilder builder;
  for (const auto& line : corpus) builder.add(line);
  return builder.build(min_count);
}

/// Maps known tokens to ids. Unknown tokens are dropped; a sequence with no
/// known token collapses to [<UNK>].
inline TokenSequence encode(const Vocabulary& vocab, std::string_view text) {
  TokenSequence seq;
  for (const auto& t : tokenize(text)) {
    if (auto id = vocab.find(t.text)) seq.ids.push_back(*id);
  }
  if (seq.ids.empty()) seq.ids.push_back(kUnkId);
  return seq;
}

inline bool is_unknown_only(const TokenSequence& seq) {
  return seq.ids.size() == 1 && seq.ids.front() == kUnkId;
}

}  // namespace dpsr
