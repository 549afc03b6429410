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

// Exact maximum-inner-product top-k search over a passage embedding matrix.
// Results are ordered by (score desc, pid asc).

#include <algorithm>
#include <cstdint>
#include <exception>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "pivotdpr/common.hpp"
#include "pivotdpr/corpus.hpp"
#include "pivotdpr/encoder.hpp"

namespace pivotdpr {

struct Hit {
  std::string pid;
  double score = 0;

  friend bool operator==(const Hit&, const Hit&) = default;
};

class Index {
 public:
  Index() = default;

  Index(EmbeddingMatrix embeddings, std::vector<std::string> languages)
      : emb_(std::move(embeddings)), languages_(std::move(languages)) {
    // Rank of each row in pid order; ties are broken on this integer.
    std::vector<std::uint32_t> by_pid(emb_.rows());
    std::iota(by_pid.begin(), by_pid.end(), 0u);
    std::sort(by_pid.begin(), by_pid.end(),
              [&](auto a, auto b) { return emb_.ids[a] < emb_.ids[b]; });
    pid_rank_.resize(by_pid.size());
    for (std::uint32_t r = 0; r < by_pid.size(); ++r) pid_rank_[by_pid[r]] = r;
  }

  std::size_t size() const { return emb_.rows(); }
  std::uint32_t dim() const { return emb_.dim; }
  const std::string& pid(std::size_t row) const { return emb_.ids[row]; }
  const std::string& language(std::size_t row) const { return languages_[row]; }
  const float* vector(std::size_t row) const { return emb_.row(row); }
  std::uint32_t pid_rank(std::size_t row) const { return pid_rank_[row]; }

 private:
  EmbeddingMatrix emb_;
  std::vector<std::string> languages_;
  std::vector<std::uint32_t> pid_rank_;
};

/// Pairs each embedding row with its passage's language. Every embedding id
/// must name a passage.
inline Index build_index(EmbeddingMatrix embeddings, const std::vector<Passage>& passages) {
  std::unordered_map<std::string_view, const Passage*> by_pid;
  for (const auto& p : passages) by_pid.emplace(p.pid, &p);
  std::vector<std::string> languages;
  std::vector<std::string> missing;
  for (const auto& id : embeddings.ids) {
    auto it = by_pid.find(id);
    if (it == by_pid.end()) {
      missing.push_back(id);
      continue;
    }
    languages.push_back(it->second->language);
  }
  if (!missing.empty()) {
    std::string msg = "embedding ids without a passage row:";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ... (" + std::to_string(missing.size()) + " total)";
    throw DataError(msg);
  }
  return Index(std::move(embeddings), std::move(languages));
}

inline double inner_product(const float* a, const float* b, std::size_t dim) {
  double s = 0;
  for (std::size_t d = 0; d < dim; ++d) s += static_cast<double>(a[d]) * static_cast<double>(b[d]);
  return s;
}

namespace detail {

struct Candidate {
  double score;
  std::uint32_t rank;
  std::uint32_t row;
};

// Strict total order: higher score first, then lower pid rank.
inline bool ranks_before(const Candidate& a, const Candidate& b) {
  return a.score > b.score || (a.score == b.score && a.rank < b.rank);
}

// Bounded selection over rows [begin, end): a heap whose front is the worst
// retained candidate.
inline std::vector<Candidate> scan_block(const Index& index, const float* query, std::size_t k,
                                         std::size_t begin, std::size_t end) {
  std::vector<Candidate> heap;
  heap.reserve(k + 1);
  for (std::size_t row = begin; row < end; ++row) {
    const Candidate c{inner_product(query, index.vector(row), index.dim()), index.pid_rank(row),
                      static_cast<std::uint32_t>(row)};
    if (heap.size() < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end(), ranks_before);
    } else if (ranks_before(c, heap.front())) {
      std::pop_heap(heap.begin(), heap.end(), ranks_before);
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end(), ranks_before);
    }
  }
  return heap;
}

}  // namespace detail

/// The k best passages for `query`. With workers > 1 the passage rows are
/// scanned in parallel blocks and merged; the result does not depend on the
/// worker count.
inline std::vector<Hit> top_k(const Index& index, std::span<const float> query,
                              std::size_t k = 20, unsigned workers = 1) {
  if (k == 0) throw UsageError("k must be at least 1");
  if (index.size() == 0) return {};
  if (query.size() != index.dim()) {
    throw UsageError("query dim " + std::to_string(query.size()) + " != index dim " +
                     std::to_string(index.dim()));
  }
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(index.size())));
  std::vector<detail::Candidate> merged;
  if (workers == 1) {
    merged = detail::scan_block(index, query.data(), k, 0, index.size());
  } else {
    std::vector<std::vector<detail::Candidate>> parts(workers);
    std::vector<std::thread> threads;
    const std::size_t per = (index.size() + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t b = std::min(index.size(), w * per);
      const std::size_t e = std::min(index.size(), b + per);
      threads.emplace_back(
          [&, b, e, w] { parts[w] = detail::scan_block(index, query.data(), k, b, e); });
    }
    for (auto& t : threads) t.join();
    for (auto& p : parts) merged.insert(merged.end(), p.begin(), p.end());
  }
  std::sort(merged.begin(), merged.end(), detail::ranks_before);
  if (merged.size() > k) merged.resize(k);
  std::vector<Hit> hits;
  hits.reserve(merged.size());
  for (const auto& c : merged) hits.push_back({index.pid(c.row), c.score});
  return hits;
}

struct QueryResult {
  std::string qid;
  std::vector<Hit> hits;

  friend bool operator==(const QueryResult&, const QueryResult&) = default;
};

struct RetrievalRun {
  std::size_t k = 0;
  std::string index_fingerprint;
  std::string model_fingerprint;
  std::vector<QueryResult> results;

  friend bool operator==(const RetrievalRun&, const RetrievalRun&) = default;
};

/// One ranked list per query row, in query order. Queries are partitioned
/// across `workers` threads.
inline RetrievalRun batch_retrieve(const Index& index, const EmbeddingMatrix& queries,
                                   std::size_t k = 20, unsigned workers = 1) {
  if (k == 0) throw UsageError("k must be at least 1");
  if (queries.rows() > 0 && index.size() > 0 && queries.dim != index.dim()) {
    throw UsageError("query dim " + std::to_string(queries.dim) + " != index dim " +
                     std::to_string(index.dim()));
  }
  RetrievalRun run;
  run.k = k;
  run.results.resize(queries.rows());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      run.results[i].qid = queries.ids[i];
      run.results[i].hits = top_k(index, std::span<const float>(queries.row(i), queries.dim), k);
    }
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(1, queries.rows()))));
  if (workers == 1) {
    work(0, queries.rows());
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t per = (queries.rows() + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t b = std::min(queries.rows(), w * per);
      const std::size_t e = std::min(queries.rows(), b + per);
      threads.emplace_back([&, b, e, w] {
        try {
          work(b, e);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& err : errors) if (err) std::rethrow_exception(err);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Run file: one {"qid":..., "hits":[{"pid":..., "score":...}, ...]} per line.
// Run metadata lives in a sidecar JSON object.

inline std::string write_run_jsonl(const RetrievalRun& run) {
  std::string out;
  for (const auto& r : run.results) {
    nlohmann::ordered_json j;
    j["qid"] = r.qid;
    auto& hits = j["hits"] = nlohmann::ordered_json::array();
    for (const auto& h : r.hits) {
      nlohmann::ordered_json hj;
      hj["pid"] = h.pid;
      hj["score"] = h.score;
      hits.push_back(std::move(hj));
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::string write_run_meta(const RetrievalRun& run) {
  nlohmann::ordered_json j;
  j["k"] = run.k;
  j["index_fingerprint"] = run.index_fingerprint;
  j["model_fingerprint"] = run.model_fingerprint;
  j["queries"] = run.results.size();
  return j.dump(2) + "\n";
}

/// Parses a run file. When no metadata is supplied, k is the longest list.
inline RetrievalRun parse_run_jsonl(std::string_view bytes, std::string_view meta = {}) {
  text::require_utf8(bytes);
  RetrievalRun run;
  std::size_t line_no = 0;
  std::unordered_set<std::string> seen;
  for (std::string_view line : split_lines(bytes)) {
    ++line_no;
    if (is_blank(line)) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      QueryResult r;
      r.qid = j.at("qid").get<std::string>();
      for (const auto& h : j.at("hits")) {
        r.hits.push_back({h.at("pid").get<std::string>(), h.at("score").get<double>()});
      }
      if (!seen.insert(r.qid).second) throw DataError("duplicate qid '" + r.qid + "'");
      run.k = std::max(run.k, r.hits.size());
      run.results.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("run line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("run line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!meta.empty()) {
    try {
      const auto m = nlohmann::json::parse(meta);
      run.k = m.at("k").get<std::size_t>();
      run.index_fingerprint = m.value("index_fingerprint", "");
      run.model_fingerprint = m.value("model_fingerprint", "");
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("run metadata: ") + e.what());
    }
  }
  return run;
}

}  // namespace pivotdpr
