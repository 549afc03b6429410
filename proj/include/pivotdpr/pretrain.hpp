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

// Masked-LM and translation-LM instance generation. Each emitted record is
// seeded from (global seed, record index), so output does not depend on how
// records are scheduled.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivotdpr/common.hpp"
#include "pivotdpr/tokenizer.hpp"

namespace pivotdpr {

inline constexpr double kDefaultMaskRate = 0.15;
inline constexpr std::uint64_t kDefaultSeed = 12345;
inline constexpr std::size_t kDefaultTlmMaxLen = 256;
inline constexpr std::size_t kMinTailTokens = 8;

struct MaskCounts {
  std::size_t mask = 0;    // replaced by [MASK]
  std::size_t random = 0;  // replaced by a random non-special token
  std::size_t keep = 0;    // selected but left unchanged

  std::size_t selected() const { return mask + random + keep; }
  MaskCounts& operator+=(const MaskCounts& o) {
    mask += o.mask;
    random += o.random;
    keep += o.keep;
    return *this;
  }
  friend bool operator==(const MaskCounts&, const MaskCounts&) = default;
};

struct MaskedExample {
  std::vector<TokenId> input_ids;
  std::map<std::uint32_t, TokenId> labels;  // position -> original id
  std::vector<std::uint8_t> segment_ids;
  std::size_t attention_len = 0;
  MaskCounts counts;

  friend bool operator==(const MaskedExample&, const MaskedExample&) = default;
};

enum class SpanOrder { kLowFirst, kHighFirst };

struct TlmExample {
  MaskedExample example;
  SpanOrder order = SpanOrder::kLowFirst;
  std::uint64_t pair_id = 0;
  std::size_t span1_len = 0;
  std::size_t span2_len = 0;
  std::size_t span1_selected = 0;
  std::size_t span2_selected = 0;

  friend bool operator==(const TlmExample&, const TlmExample&) = default;
};

// ---------------------------------------------------------------------------
// Chunking

struct ChunkResult {
  std::vector<std::vector<TokenId>> chunks;
  std::size_t dropped_tails = 0;
};

/// Splits each document into consecutive chunks of chunk_len - 2 content
/// tokens (two slots are reserved for [CLS] and [SEP]). A final short piece
/// is kept only if it has at least `min_tail` tokens.
inline ChunkResult chunk_documents(const std::vector<std::vector<TokenId>>& docs,
                                   std::size_t chunk_len, std::size_t min_tail = kMinTailTokens) {
  if (chunk_len < 8) throw UsageError("chunk_len must be at least 8");
  const std::size_t content = chunk_len - 2;
  ChunkResult result;
  for (const auto& doc : docs) {
    std::size_t pos = 0;
    while (pos < doc.size()) {
      const std::size_t take = std::min(content, doc.size() - pos);
      if (take < content && take < min_tail) {
        ++result.dropped_tails;
        break;
      }
      result.chunks.emplace_back(doc.begin() + static_cast<std::ptrdiff_t>(pos),
                                 doc.begin() + static_cast<std::ptrdiff_t>(pos + take));
      pos += take;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Corruption

/// 80/10/10 corruption with a cached pool of random-replacement ids.
class Masker {
 public:
  Masker(const Vocabulary& vocab, double rate) : vocab_(&vocab), rate_(rate) {
    if (!(rate > 0.0 && rate < 1.0)) throw UsageError("mask rate must lie in (0,1)");
    for (std::size_t id = 0; id < vocab.size(); ++id) {
      if (!vocab.is_special(static_cast<TokenId>(id))) pool_.push_back(static_cast<TokenId>(id));
    }
    if (pool_.empty()) throw DataError("vocabulary has no non-special tokens to sample from");
  }

  double rate() const { return rate_; }

  /// Corrupts positions [begin, end) of `ex.input_ids`; returns the number
  /// of positions selected.
  std::size_t corrupt(MaskedExample& ex, std::size_t begin, std::size_t end, Rng& rng) const {
    std::size_t selected = 0;
    for (std::size_t pos = begin; pos < end; ++pos) {
      if (rng.uniform() >= rate_) continue;
      ++selected;
      TokenId& id = ex.input_ids[pos];
      ex.labels.emplace(static_cast<std::uint32_t>(pos), id);
      const double r = rng.uniform();
      if (r < 0.8) {
        id = vocab_->mask_id();
        ++ex.counts.mask;
      } else if (r < 0.9) {
        id = pool_[rng.below(pool_.size())];
        ++ex.counts.random;
      } else {
        ++ex.counts.keep;
      }
    }
    return selected;
  }

 private:
  const Vocabulary* vocab_;
  double rate_;
  std::vector<TokenId> pool_;
};

/// Builds [CLS] chunk [SEP] and corrupts the content positions.
inline MaskedExample mlm_mask(const std::vector<TokenId>& chunk, const Masker& masker,
                              const Vocabulary& vocab, std::uint64_t seed) {
  if (chunk.empty()) throw DataError("cannot mask a chunk with no content tokens");
  MaskedExample ex;
  ex.input_ids.reserve(chunk.size() + 2);
  ex.input_ids.push_back(vocab.cls_id());
  ex.input_ids.insert(ex.input_ids.end(), chunk.begin(), chunk.end());
  ex.input_ids.push_back(vocab.sep_id());
  ex.segment_ids.assign(ex.input_ids.size(), 0);
  ex.attention_len = ex.input_ids.size();
  Rng rng(seed);
  masker.corrupt(ex, 1, 1 + chunk.size(), rng);
  return ex;
}

inline MaskedExample mlm_mask(const std::vector<TokenId>& chunk, const Vocabulary& vocab,
                              double rate = kDefaultMaskRate, std::uint64_t seed = kDefaultSeed) {
  return mlm_mask(chunk, Masker(vocab, rate), vocab, seed);
}

inline std::vector<MaskedExample> generate_mlm(const std::vector<std::vector<TokenId>>& chunks,
                                               const Vocabulary& vocab, double rate,
                                               std::uint64_t seed) {
  const Masker masker(vocab, rate);
  std::vector<MaskedExample> out;
  out.reserve(chunks.size());
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    out.push_back(mlm_mask(chunks[i], masker, vocab, derive_seed(seed, i)));
  }
  return out;
}

/// Undoes corruption using the recorded labels.
inline std::vector<TokenId> restore_original(const MaskedExample& ex) {
  auto ids = ex.input_ids;
  for (const auto& [pos, orig] : ex.labels) ids[pos] = orig;
  return ids;
}

// ---------------------------------------------------------------------------
// Translation LM

struct TokenizedPair {
  std::uint64_t pair_id = 0;
  std::vector<TokenId> low;
  std::vector<TokenId> high;
};

struct TlmResult {
  std::vector<TlmExample> examples;
  std::size_t skipped_empty = 0;
  std::size_t truncated = 0;
};

/// Longest-first truncation: trims one token from the end of the longer span
/// (the first span on ties) until both fit in `budget` tokens.
inline std::pair<std::size_t, std::size_t> truncate_lengths(std::size_t len1, std::size_t len2,
                                                            std::size_t budget) {
  while (len1 + len2 > budget) {
    if (len1 >= len2) {
      --len1;
    } else {
      --len2;
    }
  }
  return {len1, len2};
}

/// Emits two examples per pair, [CLS] span1 [SEP] span2 [SEP], once with
/// the low-resource sentence first and once with it second.
inline TlmResult tlm_pairs(const std::vector<TokenizedPair>& pairs, const Vocabulary& vocab,
                           std::size_t max_len = kDefaultTlmMaxLen,
                           double rate = kDefaultMaskRate, std::uint64_t seed = kDefaultSeed) {
  if (max_len < 8) throw UsageError("TLM max_len must be at least 8");
  const Masker masker(vocab, rate);
  TlmResult result;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& pair = pairs[i];
    if (pair.low.empty() || pair.high.empty()) {
      ++result.skipped_empty;
      continue;
    }
    for (int variant = 0; variant < 2; ++variant) {
      const SpanOrder order = variant == 0 ? SpanOrder::kLowFirst : SpanOrder::kHighFirst;
      const auto& first = order == SpanOrder::kLowFirst ? pair.low : pair.high;
      const auto& second = order == SpanOrder::kLowFirst ? pair.high : pair.low;
      const auto [len1, len2] = truncate_lengths(first.size(), second.size(), max_len - 3);
      if (len1 != first.size() || len2 != second.size()) ++result.truncated;

      TlmExample t;
      t.order = order;
      t.pair_id = pair.pair_id;
      t.span1_len = len1;
      t.span2_len = len2;
      auto& ex = t.example;
      ex.input_ids.reserve(len1 + len2 + 3);
      ex.input_ids.push_back(vocab.cls_id());
      ex.input_ids.insert(ex.input_ids.end(), first.begin(), first.begin() + static_cast<std::ptrdiff_t>(len1));
      ex.input_ids.push_back(vocab.sep_id());
      ex.input_ids.insert(ex.input_ids.end(), second.begin(), second.begin() + static_cast<std::ptrdiff_t>(len2));
      ex.input_ids.push_back(vocab.sep_id());
      ex.segment_ids.assign(ex.input_ids.size(), 1);
      std::fill_n(ex.segment_ids.begin(), len1 + 2, std::uint8_t{0});
      ex.attention_len = ex.input_ids.size();

      Rng rng(derive_seed(seed, 2 * i + static_cast<std::size_t>(variant)));
      t.span1_selected = masker.corrupt(ex, 1, 1 + len1, rng);
      t.span2_selected = masker.corrupt(ex, len1 + 2, len1 + 2 + len2, rng);
      result.examples.push_back(std::move(t));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// JSONL serialization

inline nlohmann::ordered_json to_json(const MaskedExample& ex) {
  nlohmann::ordered_json j;
  j["input_ids"] = ex.input_ids;
  j["segment_ids"] = ex.segment_ids;
  std::vector<std::uint32_t> positions;
  std::vector<TokenId> originals;
  for (const auto& [pos, id] : ex.labels) {
    positions.push_back(pos);
    originals.push_back(id);
  }
  j["masked_positions"] = positions;
  j["masked_labels"] = originals;
  j["attention_len"] = ex.attention_len;
  j["corruption"] = {ex.counts.mask, ex.counts.random, ex.counts.keep};
  return j;
}

inline nlohmann::ordered_json to_json(const TlmExample& t) {
  nlohmann::ordered_json j = to_json(t.example);
  j["order"] = t.order == SpanOrder::kLowFirst ? "low_first" : "high_first";
  j["pair_id"] = hex64(t.pair_id);
  j["span_lens"] = {t.span1_len, t.span2_len};
  j["span_masked"] = {t.span1_selected, t.span2_selected};
  return j;
}

inline MaskedExample masked_example_from_json(const nlohmann::json& j) {
  MaskedExample ex;
  ex.input_ids = j.at("input_ids").get<std::vector<TokenId>>();
  ex.segment_ids = j.at("segment_ids").get<std::vector<std::uint8_t>>();
  const auto positions = j.at("masked_positions").get<std::vector<std::uint32_t>>();
  const auto originals = j.at("masked_labels").get<std::vector<TokenId>>();
  if (positions.size() != originals.size()) throw DataError("masked_positions/labels length mismatch");
  for (std::size_t i = 0; i < positions.size(); ++i) ex.labels.emplace(positions[i], originals[i]);
  ex.attention_len = j.at("attention_len").get<std::size_t>();
  const auto c = j.at("corruption").get<std::vector<std::size_t>>();
  if (c.size() != 3) throw DataError("corruption must have 3 counts");
  ex.counts = {c[0], c[1], c[2]};
  return ex;
}

template <typename Example>
std::string write_jsonl(const std::vector<Example>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += to_json(ex).dump();
    out += '\n';
  }
  return out;
}

}  // namespace pivotdpr
