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

// Answer-level evaluation of retrieval runs: normalized string / pattern
// matching, Recall@k, ROUGE-1 (max over retrieved passages), retrieved
// language distribution and McNemar's paired test against a baseline run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "pivotdpr/common.hpp"
#include "pivotdpr/corpus.hpp"
#include "pivotdpr/retrieval.hpp"
#include "pivotdpr/text.hpp"

namespace pivotdpr {

// Bumped whenever normalize_text changes behaviour.
inline constexpr int kNormalizationVersion = 1;

/// NFKC, lowercase, punctuation to space, collapse white space, strip.
inline std::string normalize_text(std::string_view s) {
  const std::string folded = text::lowercase(text::nfkc(s));
  std::string out;
  out.reserve(folded.size());
  bool pending_space = false;
  std::size_t i = 0;
  while (i < folded.size()) {
    const std::size_t start = i;
    const char32_t cp = text::decode_at(folded, i);
    if (text::is_space(cp) || text::is_punct(cp)) {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out.push_back(' ');
    pending_space = false;
    out.append(folded, start, i - start);
  }
  return out;
}

// Tokens of already-normalized text (single-space separated).
inline std::vector<std::string_view> normalized_tokens(std::string_view norm) {
  std::vector<std::string_view> toks;
  std::size_t start = 0;
  while (start < norm.size()) {
    std::size_t end = norm.find(' ', start);
    if (end == std::string_view::npos) end = norm.size();
    toks.push_back(norm.substr(start, end - start));
    start = end + 1;
  }
  return toks;
}

inline std::string escape_regex(std::string_view s) {
  static constexpr std::string_view kMeta = "\\^$.|?*+()[]{}";
  std::string out;
  for (char c : s) {
    if (kMeta.find(c) != std::string_view::npos) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

enum class Matcher { kString, kRegex };

inline std::string to_string(Matcher m) { return m == Matcher::kString ? "string" : "regex"; }

inline Matcher parse_matcher(std::string_view s) {
  if (s == "string") return Matcher::kString;
  if (s == "regex") return Matcher::kRegex;
  throw UsageError("unknown matcher '" + std::string(s) + "' (expected string|regex)");
}

/// Counts answers that normalize to nothing; such answers never match.
struct MatchWarnings {
  std::size_t empty_answers = 0;
};

/// An answer normalized once and reused against many passages.
class PreparedAnswer {
 public:
  PreparedAnswer(std::string_view answer, Matcher matcher)
      : matcher_(matcher), norm_(normalize_text(answer)) {
    for (auto t : normalized_tokens(norm_)) tokens_.emplace_back(t);
    if (!norm_.empty() && matcher_ == Matcher::kRegex) {
      pattern_.emplace(escape_regex(norm_), std::regex::ECMAScript | std::regex::optimize);
    }
  }

  bool empty() const { return norm_.empty(); }
  const std::string& normalized() const { return norm_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// `passage_norm` must already be normalized.
  bool matches(std::string_view passage_norm) const {
    if (norm_.empty()) return false;
    if (matcher_ == Matcher::kRegex) {
      return std::regex_search(passage_norm.begin(), passage_norm.end(), *pattern_);
    }
    const auto ptoks = normalized_tokens(passage_norm);
    if (ptoks.size() < tokens_.size()) return false;
    for (std::size_t s = 0; s + tokens_.size() <= ptoks.size(); ++s) {
      bool ok = true;
      for (std::size_t k = 0; k < tokens_.size() && ok; ++k) ok = ptoks[s + k] == tokens_[k];
      if (ok) return true;
    }
    return false;
  }

 private:
  Matcher matcher_;
  std::string norm_;
  std::vector<std::string> tokens_;
  std::optional<std::regex> pattern_;
};

/// Answer token sequence occurs contiguously in the passage token sequence.
inline bool match_string(std::string_view answer, std::string_view passage,
                         MatchWarnings* warnings = nullptr) {
  PreparedAnswer a(answer, Matcher::kString);
  if (a.empty()) {
    if (warnings) ++warnings->empty_answers;
    return false;
  }
  return a.matches(normalize_text(passage));
}

/// Escaped answer pattern occurs anywhere in the passage, intra-word included.
inline bool match_regex(std::string_view answer, std::string_view passage,
                        MatchWarnings* warnings = nullptr) {
  PreparedAnswer a(answer, Matcher::kRegex);
  if (a.empty()) {
    if (warnings) ++warnings->empty_answers;
    return false;
  }
  return a.matches(normalize_text(passage));
}

// ---------------------------------------------------------------------------

struct HitVector {
  std::vector<std::string> qids;
  std::vector<bool> hits;

  std::size_t count() const { return static_cast<std::size_t>(std::count(hits.begin(), hits.end(), true)); }
  friend bool operator==(const HitVector&, const HitVector&) = default;
};

/// Normalized passage text keyed by pid, computed on first use.
class PassageStore {
 public:
  explicit PassageStore(const std::vector<Passage>& passages) {
    for (const auto& p : passages) by_pid_.emplace(p.pid, &p);
  }

  const Passage& get(const std::string& pid) const {
    auto it = by_pid_.find(pid);
    if (it == by_pid_.end()) throw DataError("run references unknown pid '" + pid + "'");
    return *it->second;
  }

  const std::string& normalized(const std::string& pid) const {
    auto it = norm_.find(pid);
    if (it != norm_.end()) return it->second;
    return norm_.emplace(pid, normalize_text(get(pid).text)).first->second;
  }

 private:
  std::unordered_map<std::string, const Passage*> by_pid_;
  mutable std::unordered_map<std::string, std::string> norm_;
};

namespace detail {

// Maps each QA question to its run entry (nullptr when the run has none).
inline std::vector<const QueryResult*> align_run(const RetrievalRun& run,
                                                 const std::vector<QaExample>& qa,
                                                 std::size_t k) {
  if (k == 0) throw UsageError("k must be at least 1");
  if (run.k < k) {
    throw UsageError("run was retrieved with k=" + std::to_string(run.k) +
                     ", cannot evaluate at k=" + std::to_string(k));
  }
  std::unordered_map<std::string_view, std::size_t> qa_index;
  for (std::size_t i = 0; i < qa.size(); ++i) qa_index.emplace(qa[i].qid, i);
  std::vector<const QueryResult*> aligned(qa.size(), nullptr);
  for (const auto& r : run.results) {
    auto it = qa_index.find(r.qid);
    if (it == qa_index.end()) throw DataError("run qid '" + r.qid + "' is not in the QA file");
    aligned[it->second] = &r;
  }
  return aligned;
}

}  // namespace detail

struct RecallResult {
  double recall = 0;
  HitVector hits;
  MatchWarnings warnings;
};

/// A question is a hit when any gold answer matches any of its top-k passages.
inline RecallResult recall_at_k(const RetrievalRun& run, const std::vector<QaExample>& qa,
                                const PassageStore& passages, std::size_t k, Matcher matcher) {
  const auto aligned = detail::align_run(run, qa, k);
  RecallResult res;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    std::vector<PreparedAnswer> answers;
    for (const auto& a : qa[i].answers) {
      answers.emplace_back(a, matcher);
      if (answers.back().empty()) ++res.warnings.empty_answers;
    }
    bool hit = false;
    if (const auto* r = aligned[i]) {
      const std::size_t depth = std::min(k, r->hits.size());
      for (std::size_t h = 0; h < depth && !hit; ++h) {
        const auto& norm = passages.normalized(r->hits[h].pid);
        for (const auto& a : answers) {
          if (a.matches(norm)) {
            hit = true;
            break;
          }
        }
      }
    }
    res.hits.qids.push_back(qa[i].qid);
    res.hits.hits.push_back(hit);
  }
  res.recall = qa.empty() ? 0.0 : static_cast<double>(res.hits.count()) / static_cast<double>(qa.size());
  return res;
}

// ---------------------------------------------------------------------------
// ROUGE-1

struct RougeScores {
  double recall = 0;
  double precision = 0;
  double f1 = 0;

  friend bool operator==(const RougeScores&, const RougeScores&) = default;
};

/// Unigram overlap with multiplicity clipping; the answer is the reference.
inline RougeScores rouge1(std::string_view answer_norm, std::string_view passage_norm) {
  const auto at = normalized_tokens(answer_norm);
  const auto pt = normalized_tokens(passage_norm);
  if (at.empty() || pt.empty()) return {};
  std::unordered_map<std::string_view, std::size_t> pc;
  for (auto t : pt) ++pc[t];
  std::size_t overlap = 0;
  for (auto t : at) {
    auto it = pc.find(t);
    if (it != pc.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  RougeScores s;
  s.recall = static_cast<double>(overlap) / static_cast<double>(at.size());
  s.precision = static_cast<double>(overlap) / static_cast<double>(pt.size());
  s.f1 = overlap == 0 ? 0.0 : 2 * s.recall * s.precision / (s.recall + s.precision);
  return s;
}

struct Rouge1Result {
  RougeScores mean;                 // each component maximized per question, then averaged
  std::vector<double> per_question; // best recall per question
  std::size_t skipped_answers = 0;
};

inline Rouge1Result rouge1_max(const RetrievalRun& run, const std::vector<QaExample>& qa,
                               const PassageStore& passages, std::size_t k) {
  const auto aligned = detail::align_run(run, qa, k);
  Rouge1Result res;
  for (std::size_t i = 0; i < qa.size(); ++i) {
    std::vector<std::string> answers;
    for (const auto& a : qa[i].answers) {
      auto n = normalize_text(a);
      if (n.empty()) {
        ++res.skipped_answers;
      } else {
        answers.push_back(std::move(n));
      }
    }
    RougeScores best;
    if (const auto* r = aligned[i]) {
      const std::size_t depth = std::min(k, r->hits.size());
      for (std::size_t h = 0; h < depth; ++h) {
        const auto& norm = passages.normalized(r->hits[h].pid);
        for (const auto& a : answers) {
          const auto s = rouge1(a, norm);
          best.recall = std::max(best.recall, s.recall);
          best.precision = std::max(best.precision, s.precision);
          best.f1 = std::max(best.f1, s.f1);
        }
      }
    }
    res.per_question.push_back(best.recall);
    res.mean.recall += best.recall;
    res.mean.precision += best.precision;
    res.mean.f1 += best.f1;
  }
  if (!qa.empty()) {
    const double n = static_cast<double>(qa.size());
    res.mean.recall /= n;
    res.mean.precision /= n;
    res.mean.f1 /= n;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Language distribution

struct LanguageDistribution {
  std::size_t total = 0;
  std::map<std::string, std::size_t> counts;
  std::map<std::string, double> fractions;  // all languages, before thresholding

  /// Languages whose share is at least `threshold`.
  std::map<std::string, double> reported(double threshold = 0.01) const {
    std::map<std::string, double> out;
    for (const auto& [lang, f] : fractions) {
      if (f >= threshold) out.emplace(lang, f);
    }
    return out;
  }
};

inline LanguageDistribution language_distribution(const RetrievalRun& run,
                                                  const PassageStore& passages,
                                                  std::size_t k = 20) {
  LanguageDistribution d;
  for (const auto& r : run.results) {
    const std::size_t depth = std::min(k, r.hits.size());
    for (std::size_t h = 0; h < depth; ++h) {
      ++d.counts[passages.get(r.hits[h].pid).language];
      ++d.total;
    }
  }
  for (const auto& [lang, c] : d.counts) {
    d.fractions[lang] = static_cast<double>(c) / static_cast<double>(d.total);
  }
  return d;
}

// ---------------------------------------------------------------------------
// McNemar's paired test

enum class McNemarMethod { kExact, kChiSquareCc };

struct McNemarResult {
  std::size_t b = 0;  // a hit, b miss
  std::size_t c = 0;  // a miss, b hit
  double statistic = 0;
  double p_value = 1;
  McNemarMethod method = McNemarMethod::kExact;
};

inline constexpr std::size_t kMcNemarExactBelow = 25;

/// Two-sided exact binomial p for the smaller discordant count:
/// 2 * P(X <= min(b, c)), X ~ Binomial(b + c, 1/2), capped at 1.
inline double binomial_two_sided_p(std::size_t b, std::size_t c) {
  const std::size_t n = b + c;
  const std::size_t m = std::min(b, c);
  if (n <= 60) {
    // Exact integer arithmetic; C(60, 30) < 2^63.
    std::uint64_t coeff = 1;
    std::uint64_t tail = 0;
    for (std::size_t i = 0; i <= m; ++i) {
      if (i > 0) coeff = coeff * (n - i + 1) / i;
      tail += coeff;
    }
    return std::min(1.0, std::ldexp(static_cast<double>(tail), 1 - static_cast<int>(n)));
  }
  double tail = 0;
  for (std::size_t i = 0; i <= m; ++i) {
    tail += std::exp(std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(i) + 1) -
                     std::lgamma(static_cast<double>(n - i) + 1) - static_cast<double>(n) * std::log(2.0));
  }
  return std::min(1.0, 2.0 * tail);
}

inline McNemarResult mcnemar(const HitVector& a, const HitVector& b) {
  if (a.hits.size() != b.hits.size()) throw DataError("hit vectors differ in length");
  if (a.qids != b.qids) throw DataError("hit vectors are not in the same qid order");
  McNemarResult r;
  for (std::size_t i = 0; i < a.hits.size(); ++i) {
    if (a.hits[i] && !b.hits[i]) ++r.b;
    if (!a.hits[i] && b.hits[i]) ++r.c;
  }
  const std::size_t n = r.b + r.c;
  if (n == 0) return r;
  if (n < kMcNemarExactBelow) {
    r.method = McNemarMethod::kExact;
    r.statistic = static_cast<double>(std::min(r.b, r.c));
    r.p_value = binomial_two_sided_p(r.b, r.c);
  } else {
    r.method = McNemarMethod::kChiSquareCc;
    const double diff = std::fabs(static_cast<double>(r.b) - static_cast<double>(r.c)) - 1.0;
    r.statistic = diff * diff / static_cast<double>(n);
    // Upper tail of chi-square with one degree of freedom.
    r.p_value = std::erfc(std::sqrt(r.statistic / 2.0));
  }
  return r;
}

inline std::string to_string(McNemarMethod m) { return m == McNemarMethod::kExact ? "exact" : "chi2_cc"; }

inline constexpr double kSignificanceLevel = 0.05;

inline bool significant(const McNemarResult& r) { return r.p_value < kSignificanceLevel; }

// ---------------------------------------------------------------------------
// Report

struct EvalBlock {
  std::string language;
  Matcher matcher = Matcher::kRegex;
  std::size_t n_questions = 0;
  std::map<std::size_t, double> recall;
  std::map<std::size_t, RougeScores> rouge1;
  std::map<std::size_t, HitVector> hits;
  std::size_t distribution_k = 20;
  LanguageDistribution distribution;
  std::size_t empty_answers = 0;
  // Present when a baseline run was supplied.
  std::map<std::size_t, double> baseline_recall;
  std::map<std::size_t, RougeScores> baseline_rouge1;
  std::map<std::size_t, McNemarResult> mcnemar;
};

struct EvalReport {
  std::string model = "model";
  std::string baseline;  // empty when no baseline run
  std::vector<std::size_t> k_values{10, 20};
  double report_threshold = 0.01;
  std::vector<EvalBlock> blocks;
};

struct EvalOptions {
  std::vector<std::size_t> k_values{10, 20};
  std::vector<Matcher> matchers{Matcher::kRegex};
  double report_threshold = 0.01;
  std::string model = "model";
  std::string baseline = "baseline";
};

namespace detail {

inline RetrievalRun restrict_run(const RetrievalRun& run, const std::vector<QaExample>& qa) {
  std::unordered_set<std::string_view> keep;
  for (const auto& q : qa) keep.insert(q.qid);
  RetrievalRun out;
  out.k = run.k;
  out.index_fingerprint = run.index_fingerprint;
  out.model_fingerprint = run.model_fingerprint;
  for (const auto& r : run.results) {
    if (keep.count(r.qid)) out.results.push_back(r);
  }
  return out;
}

}  // namespace detail

/// Scores `run` (and optionally `baseline`) per (question language, matcher).
inline EvalReport evaluate(const RetrievalRun& run, const std::vector<QaExample>& qa,
                           const std::vector<Passage>& passages, const EvalOptions& opts,
                           const RetrievalRun* baseline = nullptr) {
  if (opts.k_values.empty()) throw UsageError("at least one k value is required");
  auto ks = opts.k_values;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

  // Validate every run qid against the QA file before grouping.
  detail::align_run(run, qa, ks.back());
  if (baseline) detail::align_run(*baseline, qa, ks.back());

  EvalReport report;
  report.model = opts.model;
  report.baseline = baseline ? opts.baseline : "";
  report.k_values = ks;
  report.report_threshold = opts.report_threshold;

  std::map<std::string, std::vector<QaExample>> by_lang;
  for (const auto& q : qa) by_lang[q.language].push_back(q);
  const PassageStore store(passages);

  for (const auto& [lang, questions] : by_lang) {
    const RetrievalRun sub = detail::restrict_run(run, questions);
    const RetrievalRun base_sub = baseline ? detail::restrict_run(*baseline, questions) : RetrievalRun{};
    for (Matcher m : opts.matchers) {
      EvalBlock block;
      block.language = lang;
      block.matcher = m;
      block.n_questions = questions.size();
      block.distribution_k = ks.back();
      block.distribution = language_distribution(sub, store, ks.back());
      for (std::size_t k : ks) {
        auto rec = recall_at_k(sub, questions, store, k, m);
        block.recall[k] = rec.recall;
        block.empty_answers = rec.warnings.empty_answers;
        block.rouge1[k] = rouge1_max(sub, questions, store, k).mean;
        if (baseline) {
          auto brec = recall_at_k(base_sub, questions, store, k, m);
          block.baseline_recall[k] = brec.recall;
          block.baseline_rouge1[k] = rouge1_max(base_sub, questions, store, k).mean;
          block.mcnemar[k] = mcnemar(brec.hits, rec.hits);
        }
        block.hits[k] = std::move(rec.hits);
      }
      report.blocks.push_back(std::move(block));
    }
  }
  return report;
}

inline std::string hit_string(const HitVector& h) {
  std::string s;
  for (bool b : h.hits) s.push_back(b ? '1' : '0');
  return s;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["normalization_version"] = kNormalizationVersion;
  j["model"] = report.model;
  if (!report.baseline.empty()) j["baseline"] = report.baseline;
  j["k_values"] = report.k_values;
  j["report_threshold"] = report.report_threshold;
  auto& blocks = j["blocks"] = nlohmann::ordered_json::array();
  auto rouge_json = [](const RougeScores& s) {
    nlohmann::ordered_json r;
    r["recall"] = s.recall;
    r["precision"] = s.precision;
    r["f1"] = s.f1;
    return r;
  };
  for (const auto& b : report.blocks) {
    nlohmann::ordered_json bj;
    bj["language"] = b.language;
    bj["matcher"] = to_string(b.matcher);
    bj["n_questions"] = b.n_questions;
    bj["empty_answers"] = b.empty_answers;
    for (const auto& [k, v] : b.recall) bj["recall"][std::to_string(k)] = v;
    for (const auto& [k, v] : b.rouge1) bj["rouge1"][std::to_string(k)] = rouge_json(v);
    bj["language_distribution_k"] = b.distribution_k;
    bj["language_counts"] = b.distribution.counts;
    bj["language_distribution"] = b.distribution.fractions;
    bj["language_distribution_reported"] = b.distribution.reported(report.report_threshold);
    for (const auto& [k, v] : b.baseline_recall) bj["baseline_recall"][std::to_string(k)] = v;
    for (const auto& [k, v] : b.baseline_rouge1) bj["baseline_rouge1"][std::to_string(k)] = rouge_json(v);
    for (const auto& [k, m] : b.mcnemar) {
      auto& mj = bj["mcnemar"][std::to_string(k)];
      mj["b"] = m.b;
      mj["c"] = m.c;
      mj["statistic"] = m.statistic;
      mj["p_value"] = m.p_value;
      mj["method"] = to_string(m.method);
      mj["significant"] = significant(m);
    }
    for (const auto& [k, h] : b.hits) {
      bj["hits"][std::to_string(k)]["qids"] = h.qids;
      bj["hits"][std::to_string(k)]["hits"] = hit_string(h);
    }
    blocks.push_back(std::move(bj));
  }
  return j;
}

inline std::string render_json(const EvalReport& report) { return report_to_json(report).dump(2) + "\n"; }

/// Recall / ROUGE-1 fraction as a percentage with two decimals.
inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
  return buf;
}

inline std::string table_header(const std::vector<std::size_t>& ks) {
  std::string h = "| Model |";
  std::string sep = "|---|";
  for (auto k : ks) {
    h += " Recall@" + std::to_string(k) + " |";
    sep += "---:|";
  }
  for (auto k : ks) {
    h += " ROUGE-1 Top" + std::to_string(k) + " |";
    sep += "---:|";
  }
  return h + "\n" + sep + "\n";
}

/// Markdown with one table per (language, matcher) block. Rows are the
/// baseline (when present) and the evaluated model; values are percentages
/// and a `*` marks a McNemar p < 0.05 difference from the baseline.
inline std::string render_markdown(const EvalReport& report) {
  std::string out = "# Retrieval evaluation\n\n";
  if (report.blocks.empty()) return out + table_header(report.k_values);
  for (const auto& b : report.blocks) {
    out += "## " + b.language + " (" + to_string(b.matcher) + " match, n=" +
           std::to_string(b.n_questions) + ")\n\n";
    out += table_header(report.k_values);
    if (!report.baseline.empty()) {
      out += "| " + report.baseline + " |";
      for (auto k : report.k_values) out += " " + percent(b.baseline_recall.at(k)) + " |";
      for (auto k : report.k_values) out += " " + percent(b.baseline_rouge1.at(k).recall) + " |";
      out += "\n";
    }
    out += "| " + report.model + " |";
    for (auto k : report.k_values) {
      std::string cell = percent(b.recall.at(k));
      if (auto it = b.mcnemar.find(k); it != b.mcnemar.end() && significant(it->second)) cell += "*";
      out += " " + cell + " |";
    }
    for (auto k : report.k_values) out += " " + percent(b.rouge1.at(k).recall) + " |";
    out += "\n\n";

    out += "Languages in top-" + std::to_string(b.distribution_k) + " results (at least " +
           percent(report.report_threshold) + "%):\n\n| Language | Share |\n|---|---:|\n";
    for (const auto& [lang, f] : b.distribution.reported(report.report_threshold)) {
      out += "| " + lang + " | " + percent(f) + " |\n";
    }
    out += "\n";
  }
  return out;
}

}  // namespace pivotdpr
