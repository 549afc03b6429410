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

// Aligned-corpus curation: English-pivot joining of two bilingual corpora,
// translation-similarity filtering, deduplication and calibration sampling.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pivotdpr/common.hpp"
#include "pivotdpr/corpus.hpp"
#include "pivotdpr/text.hpp"

namespace pivotdpr {

struct TriJoinRecord {
  std::string pivot_text;
  std::string low_text;
  std::string high_text;
  std::optional<double> low_similarity;
  std::optional<double> high_similarity;

  friend bool operator==(const TriJoinRecord&, const TriJoinRecord&) = default;
};

inline bool canonical_less(const TriJoinRecord& a, const TriJoinRecord& b) {
  return std::tie(a.pivot_text, a.low_text, a.high_text, a.low_similarity, a.high_similarity) <
         std::tie(b.pivot_text, b.low_text, b.high_text, b.low_similarity, b.high_similarity);
}

/// Which column of a bilingual pair holds the English pivot sentence.
enum class PivotSide { kA, kB };

inline std::string pivot_key(std::string_view english) { return text::nfc(text::trim(english)); }

/// Joins low↔en and high↔en pairs on their shared English sentence. Every
/// (low, high) combination inside a pivot group is emitted; output is in
/// canonical (pivot, low, high) order regardless of `workers`.
inline std::vector<TriJoinRecord> pivot_join(const std::vector<SentencePair>& low_en,
                                             const std::vector<SentencePair>& high_en,
                                             PivotSide low_side = PivotSide::kB,
                                             PivotSide high_side = PivotSide::kB,
                                             unsigned workers = 1) {
  auto english = [](const SentencePair& p, PivotSide s) -> const std::string& {
    return s == PivotSide::kA ? p.text_a : p.text_b;
  };
  auto foreign = [](const SentencePair& p, PivotSide s) -> const std::string& {
    return s == PivotSide::kA ? p.text_b : p.text_a;
  };

  workers = std::max(1u, workers);
  // Shard both sides by pivot hash; shards never share a pivot.
  std::vector<std::unordered_map<std::string, std::vector<std::size_t>>> high_groups(workers);
  std::vector<std::vector<std::pair<std::string, std::size_t>>> low_items(workers);
  for (std::size_t i = 0; i < high_en.size(); ++i) {
    std::string key = pivot_key(english(high_en[i], high_side));
    const auto shard = fnv1a64(key) % workers;
    high_groups[shard][std::move(key)].push_back(i);
  }
  for (std::size_t i = 0; i < low_en.size(); ++i) {
    std::string key = pivot_key(english(low_en[i], low_side));
    const auto shard = fnv1a64(key) % workers;
    low_items[shard].emplace_back(std::move(key), i);
  }

  std::vector<std::vector<TriJoinRecord>> partial(workers);
  auto run_shard = [&](unsigned s) {
    for (const auto& [key, li] : low_items[s]) {
      auto it = high_groups[s].find(key);
      if (it == high_groups[s].end()) continue;
      const SentencePair& low = low_en[li];
      for (std::size_t hi : it->second) {
        const SentencePair& high = high_en[hi];
        partial[s].push_back({key, foreign(low, low_side), foreign(high, high_side),
                              low.similarity, high.similarity});
      }
    }
  };
  if (workers == 1) {
    run_shard(0);
  } else {
    std::vector<std::thread> threads;
    for (unsigned s = 0; s < workers; ++s) threads.emplace_back(run_shard, s);
    for (auto& t : threads) t.join();
  }

  std::vector<TriJoinRecord> out;
  for (auto& p : partial) std::move(p.begin(), p.end(), std::back_inserter(out));
  std::sort(out.begin(), out.end(), canonical_less);
  return out;
}

/// Projects joined records onto low↔high sentence pairs.
inline std::vector<SentencePair> to_low_high_pairs(const std::vector<TriJoinRecord>& records,
                                                   const std::string& low_lang,
                                                   const std::string& high_lang) {
  std::vector<SentencePair> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    std::optional<double> sim;
    if (r.low_similarity && r.high_similarity) sim = std::min(*r.low_similarity, *r.high_similarity);
    out.push_back(make_pair(low_lang, high_lang, r.low_text, r.high_text, sim));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Similarity scoring

/// Cosine of term-frequency vectors over NFKC-lowercased whitespace tokens.
inline double bow_cosine(std::string_view a, std::string_view b) {
  auto counts = [](std::string_view s) {
    std::map<std::string, double> tf;
    for (auto& tok : text::split_whitespace(text::lowercase(text::nfkc(s)))) tf[tok] += 1.0;
    return tf;
  };
  const auto ta = counts(a);
  const auto tb = counts(b);
  if (ta.empty() || tb.empty()) return 0.0;
  double dot = 0, na = 0, nb = 0;
  for (const auto& [tok, c] : ta) {
    na += c * c;
    if (auto it = tb.find(tok); it != tb.end()) dot += c * it->second;
  }
  for (const auto& [tok, c] : tb) nb += c * c;
  if (dot == 0) return 0.0;
  if (ta == tb) return 1.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 1.0);
}

struct SimilarityScorer {
  std::string name;
  std::function<double(std::string_view, std::string_view)> score;
};

inline SimilarityScorer bow_scorer() { return {"bow", bow_cosine}; }

// ---------------------------------------------------------------------------
// Translators

class TranslationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Maps a sentence into the pivot language. Implementations throw
/// TranslationError when a sentence cannot be translated.
class Translator {
 public:
  virtual ~Translator() = default;
  virtual std::string translate(std::string_view sentence) const = 0;
  virtual std::string name() const = 0;
};

class IdentityTranslator final : public Translator {
 public:
  std::string translate(std::string_view sentence) const override { return std::string(sentence); }
  std::string name() const override { return "identity"; }
};

/// Token-by-token substitution from a `source<TAB>target` dictionary.
/// Unknown tokens pass through unchanged unless `strict` is set, in which
/// case they make the translation fail.
class DictionaryTranslator final : public Translator {
 public:
  explicit DictionaryTranslator(std::unordered_map<std::string, std::string> entries,
                                bool strict = false)
      : entries_(std::move(entries)), strict_(strict) {}

  static DictionaryTranslator from_tsv(std::string_view bytes, bool strict = false) {
    text::require_utf8(bytes);
    std::unordered_map<std::string, std::string> entries;
    std::size_t line_no = 0;
    for (std::string_view line : split_lines(bytes)) {
      ++line_no;
      if (is_blank(line)) continue;
      const auto cols = split_tabs(line);
      if (cols.size() != 2 || cols[0].empty()) {
        throw DataError("dictionary line " + std::to_string(line_no) +
                        ": expected source<TAB>target");
      }
      entries.emplace(text::nfc(cols[0]), std::string(cols[1]));
    }
    return DictionaryTranslator(std::move(entries), strict);
  }

  std::string translate(std::string_view sentence) const override {
    std::string out;
    for (const auto& tok : text::split_whitespace(text::nfc(sentence))) {
      std::string_view mapped = tok;
      if (auto it = entries_.find(tok); it != entries_.end()) {
        mapped = it->second;
      } else if (strict_) {
        throw TranslationError("no dictionary entry for token '" + tok + "'");
      }
      if (!out.empty()) out.push_back(' ');
      out.append(mapped);
    }
    return out;
  }

  std::string name() const override { return "dict"; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<std::string, std::string> entries_;
  bool strict_;
};

// ---------------------------------------------------------------------------
// Filtering

struct FilterReject {
  std::uint64_t pair_id = 0;
  std::string reason;
};

struct FilterResult {
  std::vector<SentencePair> kept;
  std::vector<FilterReject> rejects;
  std::size_t below_threshold = 0;
};

inline void check_threshold(double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw UsageError("threshold must lie in [0,1], got " + std::to_string(threshold));
  }
}

/// Keeps pairs with score(translate(text_a), text_b) >= threshold and stamps
/// each kept pair's similarity with the computed score.
inline FilterResult similarity_filter(const std::vector<SentencePair>& pairs,
                                      const SimilarityScorer& scorer,
                                      const Translator& translator, double threshold) {
  check_threshold(threshold);
  FilterResult result;
  for (const auto& p : pairs) {
    std::string translated;
    try {
      translated = translator.translate(p.text_a);
    } catch (const TranslationError& e) {
      result.rejects.push_back({p.pair_id, std::string("translation failed: ") + e.what()});
      continue;
    }
    const double s = scorer.score(translated, p.text_b);
    if (!(s >= 0.0 && s <= 1.0)) {
      result.rejects.push_back({p.pair_id, "scorer returned value outside [0,1]"});
      continue;
    }
    if (s >= threshold) {
      SentencePair kept = p;
      kept.similarity = s;
      result.kept.push_back(std::move(kept));
    } else {
      ++result.below_threshold;
    }
  }
  return result;
}

/// Threshold filter over externally supplied scores (the TSV similarity
/// column). Pairs without a score are rejected.
inline FilterResult column_filter(const std::vector<SentencePair>& pairs, double threshold) {
  check_threshold(threshold);
  FilterResult result;
  for (const auto& p : pairs) {
    if (!p.similarity) {
      result.rejects.push_back({p.pair_id, "missing similarity column"});
    } else if (*p.similarity >= threshold) {
      result.kept.push_back(p);
    } else {
      ++result.below_threshold;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Deduplication: keeps the first occurrence of each key in input order.

inline std::vector<SentencePair> dedup(const std::vector<SentencePair>& pairs) {
  std::set<std::pair<std::string_view, std::string_view>> seen;
  std::vector<SentencePair> out;
  for (const auto& p : pairs) {
    if (seen.emplace(p.text_a, p.text_b).second) out.push_back(p);
  }
  return out;
}

inline std::vector<TriJoinRecord> dedup(const std::vector<TriJoinRecord>& records) {
  std::set<std::pair<std::string_view, std::string_view>> seen;
  std::vector<TriJoinRecord> out;
  for (const auto& r : records) {
    if (seen.emplace(r.low_text, r.high_text).second) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Calibration sampling

/// Uniform sample without replacement of min(n, |pairs|) pairs, in the order
/// produced by a seeded shuffle.
inline std::vector<SentencePair> calibration_sample(const std::vector<SentencePair>& pairs,
                                                    std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(std::min(n, idx.size()));
  std::vector<SentencePair> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(pairs[i]);
  return out;
}

/// Review sheet for manual assessment; the verdict column is left blank.
inline std::string write_review_tsv(const std::vector<SentencePair>& sample) {
  std::string out = "pair_id\ttext_a\ttext_b\tsimilarity\tverdict\n";
  for (const auto& p : sample) {
    out += hex64(p.pair_id) + '\t' + p.text_a + '\t' + p.text_b + '\t';
    if (p.similarity) out += detail::format_real(*p.similarity);
    out += "\t\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tri-join TSV: pivot<TAB>low<TAB>high<TAB>low_sim<TAB>high_sim (scores may be empty)

inline std::string write_trijoin_tsv(const std::vector<TriJoinRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.pivot_text + '\t' + r.low_text + '\t' + r.high_text + '\t';
    if (r.low_similarity) out += detail::format_real(*r.low_similarity);
    out += '\t';
    if (r.high_similarity) out += detail::format_real(*r.high_similarity);
    out += '\n';
  }
  return out;
}

inline std::vector<TriJoinRecord> parse_trijoin_tsv(std::string_view bytes) {
  text::require_utf8(bytes);
  std::vector<TriJoinRecord> out;
  std::size_t line_no = 0;
  for (std::string_view line : split_lines(bytes)) {
    ++line_no;
    if (is_blank(line)) continue;
    const auto cols = split_tabs(line);
    if (cols.size() != 5) {
      throw DataError("tri-join line " + std::to_string(line_no) + ": expected 5 columns");
    }
    TriJoinRecord r{std::string(cols[0]), std::string(cols[1]), std::string(cols[2]), {}, {}};
    if (!cols[3].empty()) r.low_similarity = detail::parse_real(cols[3]);
    if (!cols[4].empty()) r.high_similarity = detail::parse_real(cols[4]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pivotdpr
