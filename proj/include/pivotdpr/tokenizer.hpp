// Copyright 2026 The pivotdpr Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// WordPiece tokenization, lexicon-driven word segmentation for scripts
// written without spaces, and vocabulary extension with UNK-harvested words.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pivotdpr/common.hpp"
#include "pivotdpr/text.hpp"

namespace pivotdpr {

using TokenId = std::int32_t;

enum class Provenance : std::uint8_t { kBase, kExtended };

struct SpecialTokens {
  static constexpr std::string_view kPad = "[PAD]";
  static constexpr std::string_view kUnk = "[UNK]";
  static constexpr std::string_view kCls = "[CLS]";
  static constexpr std::string_view kSep = "[SEP]";
  static constexpr std::string_view kMask = "[MASK]";
};

/// Dense id ↔ token table. Ids are positions in the vocab file.
class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens,
                      std::string continuation_prefix = "##")
      : continuation_prefix_(std::move(continuation_prefix)) {
    for (auto& t : tokens) push(std::move(t), Provenance::kBase);
    resolve_specials();
  }

  /// One token per line, id = 0-based line number.
  static Vocabulary from_text(std::string_view bytes) {
    text::require_utf8(bytes);
    std::vector<std::string> tokens;
    for (std::string_view line : split_lines(bytes)) {
      if (line.empty()) throw DataError("vocab line " + std::to_string(tokens.size() + 1) + " is empty");
      tokens.emplace_back(line);
    }
    return Vocabulary(std::move(tokens));
  }

  std::string to_text() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view tok) const { return index_.count(std::string(tok)) != 0; }

  std::optional<TokenId> find(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id(std::string_view tok) const {
    auto found = find(tok);
    return found ? *found : unk_id_;
  }

  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  Provenance provenance(TokenId id) const { return provenance_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& continuation_prefix() const { return continuation_prefix_; }

  TokenId pad_id() const { return pad_id_; }
  TokenId unk_id() const { return unk_id_; }
  TokenId cls_id() const { return cls_id_; }
  TokenId sep_id() const { return sep_id_; }
  TokenId mask_id() const { return mask_id_; }

  bool is_special(TokenId id) const {
    return id == pad_id_ || id == unk_id_ || id == cls_id_ || id == sep_id_ || id == mask_id_;
  }

  /// Appends a token; returns false when it already exists.
  bool append(std::string token, Provenance prov) {
    if (token.empty()) throw DataError("cannot add an empty token to the vocabulary");
    if (index_.count(token)) return false;
    push(std::move(token), prov);
    return true;
  }

 private:
  void push(std::string token, Provenance prov) {
    if (token.empty()) throw DataError("empty vocabulary token");
    const auto id = static_cast<TokenId>(tokens_.size());
    if (!index_.emplace(token, id).second) throw DataError("duplicate vocabulary token: " + token);
    tokens_.push_back(std::move(token));
    provenance_.push_back(prov);
  }

  void resolve_specials() {
    auto require = [&](std::string_view name) {
      auto id = find(name);
      if (!id) throw DataError("vocabulary is missing special token " + std::string(name));
      return *id;
    };
    pad_id_ = require(SpecialTokens::kPad);
    unk_id_ = require(SpecialTokens::kUnk);
    cls_id_ = require(SpecialTokens::kCls);
    sep_id_ = require(SpecialTokens::kSep);
    mask_id_ = require(SpecialTokens::kMask);
  }

  std::vector<std::string> tokens_;
  std::vector<Provenance> provenance_;
  std::unordered_map<std::string, TokenId> index_;
  std::string continuation_prefix_ = "##";
  TokenId pad_id_ = -1, unk_id_ = -1, cls_id_ = -1, sep_id_ = -1, mask_id_ = -1;
};

struct TokenizerModel {
  Vocabulary vocab;
  std::size_t max_chars_per_word = 100;
  bool lowercase = false;
};

/// Whitespace split with every punctuation code point isolated as its own word.
inline std::vector<std::string> pre_tokenize(std::string_view input, bool lowercase = false) {
  const std::string lowered = lowercase ? text::lowercase(input) : std::string();
  const std::string_view s = lowercase ? std::string_view(lowered) : input;
  std::vector<std::string> words;
  std::string cur;
  std::size_t i = 0;
  while (i < s.size()) {
    const std::size_t start = i;
    const char32_t cp = text::decode_at(s, i);
    if (text::is_space(cp) || text::is_punct(cp)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
      if (!text::is_space(cp)) words.emplace_back(s.substr(start, i - start));
    } else {
      cur.append(s.substr(start, i - start));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

namespace detail {

// Greedy longest-match-first split of one pre-tokenized word.
inline void wordpiece_word(const std::string& word, const TokenizerModel& model,
                           std::vector<std::string>& out) {
  const auto& vocab = model.vocab;
  const auto cps = text::code_points(word);
  if (cps.size() > model.max_chars_per_word) {
    out.push_back(vocab.token(vocab.unk_id()));
    return;
  }
  // Byte offset of each code point boundary.
  std::vector<std::size_t> offs(cps.size() + 1, 0);
  for (std::size_t k = 0; k < cps.size(); ++k) offs[k + 1] = offs[k] + cps[k].size();

  std::vector<std::string> pieces;
  std::size_t start = 0;
  std::string candidate;
  while (start < cps.size()) {
    std::size_t end = cps.size();
    bool found = false;
    while (start < end) {
      candidate.clear();
      if (start > 0) candidate = vocab.continuation_prefix();
      candidate.append(word, offs[start], offs[end] - offs[start]);
      if (vocab.contains(candidate)) {
        found = true;
        break;
      }
      --end;
    }
    if (!found) {
      out.push_back(vocab.token(vocab.unk_id()));
      return;
    }
    pieces.push_back(candidate);
    start = end;
  }
  out.insert(out.end(), pieces.begin(), pieces.end());
}

}  // namespace detail

inline std::vector<std::string> wordpiece_tokenize(std::string_view input,
                                                   const TokenizerModel& model) {
  std::vector<std::string> out;
  for (const auto& word : pre_tokenize(input, model.lowercase)) {
    detail::wordpiece_word(word, model, out);
  }
  return out;
}

inline std::vector<TokenId> encode(std::string_view input, const TokenizerModel& model) {
  std::vector<TokenId> ids;
  for (const auto& tok : wordpiece_tokenize(input, model)) ids.push_back(model.vocab.id(tok));
  return ids;
}

// ---------------------------------------------------------------------------
// Longest-match segmentation

class Lexicon {
 public:
  Lexicon() = default;

  explicit Lexicon(const std::vector<std::string>& words) {
    for (const auto& w : words) add(w);
  }

  /// One word per line; blank lines ignored.
  static Lexicon from_text(std::string_view bytes) {
    text::require_utf8(bytes);
    Lexicon lex;
    for (std::string_view line : split_lines(bytes)) {
      std::string w = text::trim(line);
      if (!w.empty()) lex.add(w);
    }
    return lex;
  }

  void add(std::string_view word) {
    if (word.empty()) throw DataError("lexicon words must be non-empty");
    words_.emplace(word);
    max_len_ = std::max(max_len_, text::code_point_count(word));
  }

  bool contains(std::string_view w) const { return words_.count(std::string(w)) != 0; }
  std::size_t max_word_len() const { return max_len_; }
  std::size_t size() const { return words_.size(); }

 private:
  std::unordered_set<std::string> words_;
  std::size_t max_len_ = 0;
};

/// Left-to-right longest match over `lexicon`. White space separates runs and
/// is dropped; maximal stretches matching no lexicon word come out as one
/// unknown chunk. Concatenating the output reproduces the input minus spaces.
inline std::vector<std::string> segment_longest_match(std::string_view input,
                                                      const Lexicon& lexicon) {
  std::vector<std::string> out;
  for (const auto& run : text::split_whitespace(input)) {
    const auto cps = text::code_points(run);
    std::string unknown;
    std::size_t i = 0;
    while (i < cps.size()) {
      const std::size_t longest = std::min(lexicon.max_word_len(), cps.size() - i);
      std::size_t matched = 0;
      std::string cand;
      for (std::size_t len = longest; len >= 1; --len) {
        cand.clear();
        for (std::size_t k = i; k < i + len; ++k) cand += cps[k];
        if (lexicon.contains(cand)) {
          matched = len;
          break;
        }
      }
      if (matched == 0) {
        unknown += cps[i];
        ++i;
        continue;
      }
      if (!unknown.empty()) {
        out.push_back(std::move(unknown));
        unknown.clear();
      }
      out.push_back(cand);
      i += matched;
    }
    if (!unknown.empty()) out.push_back(std::move(unknown));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary extension

using WordSegmenter = std::function<std::vector<std::string>(std::string_view)>;

/// Unique donor words that the base model can only render as [UNK], sorted.
/// Skips words that pre-tokenization splits and words over the length cap.
inline std::vector<std::string> harvest_new_tokens(const std::vector<std::string>& sentences,
                                                   const WordSegmenter& donor,
                                                   const TokenizerModel& base) {
  std::set<std::string> found;
  std::unordered_set<std::string> checked;
  const std::vector<std::string> unk_only{base.vocab.token(base.vocab.unk_id())};
  for (const auto& sentence : sentences) {
    for (const auto& raw : donor(sentence)) {
      if (!checked.insert(raw).second) continue;
      const auto words = pre_tokenize(raw, base.lowercase);
      if (words.size() != 1) continue;
      const std::string& w = words.front();
      if (text::code_point_count(w) > base.max_chars_per_word) continue;
      if (wordpiece_tokenize(w, base) == unk_only) found.insert(w);
    }
  }
  return {found.begin(), found.end()};
}

struct ExtendResult {
  Vocabulary vocab;
  std::size_t skipped = 0;  // tokens already present
};

/// Appends `new_tokens` (sorted, deduplicated) after the existing ids.
inline ExtendResult extend_vocab(const Vocabulary& base, const std::vector<std::string>& new_tokens) {
  std::vector<std::string> sorted = new_tokens;
  std::sort(sorted.begin(), sorted.end());
  ExtendResult result{base, 0};
  for (const auto& t : sorted) {
    if (t.empty()) throw DataError("cannot extend vocabulary with an empty token");
    if (t.find_first_of("\n\r") != std::string::npos) {
      throw DataError("vocabulary tokens cannot contain line breaks");
    }
    if (!result.vocab.append(t, Provenance::kExtended)) ++result.skipped;
  }
  return result;
}

}  // namespace pivotdpr
