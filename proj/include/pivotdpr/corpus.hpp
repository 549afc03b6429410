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

// Parsers and writers for the three external data formats:
//   aligned-pair TSV   text_a<TAB>text_b[<TAB>similarity]
//   QA JSONL           {"qid","question","answers","language","positive_contexts"?}
//   passage TSV        pid<TAB>text<TAB>title<TAB>language
// TSV cells carry no escapes; blank lines are skipped.

#include <charconv>
#include <cstdint>
#include <istream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "pivotdpr/common.hpp"
#include "pivotdpr/text.hpp"

namespace pivotdpr {

struct SentencePair {
  std::uint64_t pair_id = 0;
  std::string lang_a;
  std::string lang_b;
  std::string text_a;
  std::string text_b;
  std::optional<double> similarity;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct Passage {
  std::string pid;
  std::string title;
  std::string text;
  std::string language;

  friend bool operator==(const Passage&, const Passage&) = default;
};

struct QaExample {
  std::string qid;
  std::string question;
  std::vector<std::string> answers;
  std::vector<Passage> positive_contexts;
  std::string language;

  friend bool operator==(const QaExample&, const QaExample&) = default;
};

struct Reject {
  std::size_t line = 0;  // 1-based
  std::string reason;
};

template <typename Record>
struct ParseResult {
  std::vector<Record> records;
  std::vector<Reject> rejects;
  std::size_t skipped_lines = 0;
};

/// Stable pair identifier: FNV-1a 64 over NFC(text_a) + U+0000 + NFC(text_b).
inline std::uint64_t make_pair_id(std::string_view text_a, std::string_view text_b) {
  std::string key = text::nfc(text_a);
  key.push_back('\0');
  key += text::nfc(text_b);
  return fnv1a64(key);
}

inline SentencePair make_pair(std::string lang_a, std::string lang_b, std::string text_a,
                              std::string text_b, std::optional<double> similarity = {}) {
  SentencePair p;
  p.pair_id = make_pair_id(text_a, text_b);
  p.lang_a = std::move(lang_a);
  p.lang_b = std::move(lang_b);
  p.text_a = std::move(text_a);
  p.text_b = std::move(text_b);
  p.similarity = similarity;
  return p;
}

namespace detail {

inline std::string slurp(std::istream& in) {
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::optional<double> parse_real(std::string_view s) {
  s = text::trim_ascii(s);
  if (s.empty()) return std::nullopt;
  double v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

// Shortest representation that parses back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

inline ParseResult<SentencePair> parse_aligned_tsv(std::string_view bytes,
                                                   const std::string& lang_a,
                                                   const std::string& lang_b) {
  text::require_utf8(bytes);
  ParseResult<SentencePair> result;
  std::size_t line_no = 0;
  for (std::string_view line : split_lines(bytes)) {
    ++line_no;
    if (is_blank(line)) {
      ++result.skipped_lines;
      continue;
    }
    const auto cols = split_tabs(line);
    if (cols.size() < 2 || cols.size() > 3) {
      result.rejects.push_back({line_no, "expected 2 or 3 tab-separated columns, got " +
                                             std::to_string(cols.size())});
      continue;
    }
    std::string a = text::trim(cols[0]);
    std::string b = text::trim(cols[1]);
    if (a.empty() || b.empty()) {
      result.rejects.push_back({line_no, "empty sentence"});
      continue;
    }
    std::optional<double> sim;
    if (cols.size() == 3) {
      sim = detail::parse_real(cols[2]);
      if (!sim) {
        result.rejects.push_back({line_no, "similarity is not a real number"});
        continue;
      }
      if (!(*sim >= 0.0 && *sim <= 1.0)) {
        result.rejects.push_back({line_no, "similarity outside [0,1]"});
        continue;
      }
    }
    result.records.push_back(make_pair(lang_a, lang_b, std::move(a), std::move(b), sim));
  }
  return result;
}

inline ParseResult<SentencePair> parse_aligned_tsv(std::istream& in, const std::string& lang_a,
                                                   const std::string& lang_b) {
  return parse_aligned_tsv(detail::slurp(in), lang_a, lang_b);
}

inline std::string write_aligned_tsv(const std::vector<SentencePair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += p.text_a;
    out += '\t';
    out += p.text_b;
    if (p.similarity) {
      out += '\t';
      out += detail::format_real(*p.similarity);
    }
    out += '\n';
  }
  return out;
}

namespace detail {

inline const nlohmann::json& require_key(const nlohmann::json& obj, const char* key,
                                         std::size_t line_no) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw DataError("line " + std::to_string(line_no) + ": missing required key '" + key + "'");
  }
  return *it;
}

inline std::string require_string(const nlohmann::json& v, const char* key, std::size_t line_no) {
  if (!v.is_string()) {
    throw DataError("line " + std::to_string(line_no) + ": key '" + key + "' must be a string");
  }
  return v.get<std::string>();
}

}  // namespace detail

inline ParseResult<QaExample> parse_qa_jsonl(std::string_view bytes) {
  text::require_utf8(bytes);
  ParseResult<QaExample> result;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  for (std::string_view line : split_lines(bytes)) {
    ++line_no;
    if (is_blank(line)) {
      ++result.skipped_lines;
      continue;
    }
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
    }
    if (!obj.is_object()) throw DataError("line " + std::to_string(line_no) + ": not an object");

    QaExample ex;
    ex.qid = detail::require_string(detail::require_key(obj, "qid", line_no), "qid", line_no);
    ex.question =
        detail::require_string(detail::require_key(obj, "question", line_no), "question", line_no);
    ex.language =
        detail::require_string(detail::require_key(obj, "language", line_no), "language", line_no);
    const auto& answers = detail::require_key(obj, "answers", line_no);
    if (!answers.is_array()) {
      throw DataError("line " + std::to_string(line_no) + ": 'answers' must be a list");
    }
    for (const auto& a : answers) ex.answers.push_back(detail::require_string(a, "answers", line_no));
    if (ex.answers.empty()) {
      throw DataError("line " + std::to_string(line_no) + ": empty answers list for qid '" +
                      ex.qid + "'");
    }
    if (auto it = obj.find("positive_contexts"); it != obj.end() && !it->is_null()) {
      if (!it->is_array()) {
        throw DataError("line " + std::to_string(line_no) + ": 'positive_contexts' must be a list");
      }
      for (const auto& c : *it) {
        Passage p;
        p.pid = detail::require_string(detail::require_key(c, "pid", line_no), "pid", line_no);
        p.title = c.contains("title") ? detail::require_string(c["title"], "title", line_no) : "";
        p.text = detail::require_string(detail::require_key(c, "text", line_no), "text", line_no);
        p.language = c.contains("language")
                         ? detail::require_string(c["language"], "language", line_no)
                         : ex.language;
        ex.positive_contexts.push_back(std::move(p));
      }
    }
    if (!seen.insert(ex.qid).second) {
      throw DataError("line " + std::to_string(line_no) + ": duplicate qid '" + ex.qid + "'");
    }
    result.records.push_back(std::move(ex));
  }
  return result;
}

inline ParseResult<QaExample> parse_qa_jsonl(std::istream& in) {
  return parse_qa_jsonl(detail::slurp(in));
}

inline std::string write_qa_jsonl(const std::vector<QaExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    nlohmann::ordered_json obj;
    obj["qid"] = ex.qid;
    obj["question"] = ex.question;
    obj["answers"] = ex.answers;
    obj["language"] = ex.language;
    if (!ex.positive_contexts.empty()) {
      auto& ctx = obj["positive_contexts"] = nlohmann::ordered_json::array();
      for (const auto& p : ex.positive_contexts) {
        nlohmann::ordered_json c;
        c["pid"] = p.pid;
        c["title"] = p.title;
        c["text"] = p.text;
        if (p.language != ex.language) c["language"] = p.language;
        ctx.push_back(std::move(c));
      }
    }
    out += obj.dump();
    out += '\n';
  }
  return out;
}

inline ParseResult<Passage> parse_passages_tsv(std::string_view bytes) {
  text::require_utf8(bytes);
  ParseResult<Passage> result;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  bool first_row = true;
  for (std::string_view line : split_lines(bytes)) {
    ++line_no;
    if (is_blank(line)) {
      ++result.skipped_lines;
      continue;
    }
    const auto cols = split_tabs(line);
    if (first_row) {
      first_row = false;
      if (cols.size() == 4 && cols[0] == "pid" && cols[1] == "text" && cols[2] == "title" &&
          cols[3] == "language") {
        ++result.skipped_lines;  // header row
        continue;
      }
    }
    if (cols.size() != 4) {
      result.rejects.push_back(
          {line_no, "expected 4 tab-separated columns, got " + std::to_string(cols.size())});
      continue;
    }
    Passage p{std::string(cols[0]), std::string(cols[2]), std::string(cols[1]),
              std::string(cols[3])};
    if (p.pid.empty() || text::trim(p.text).empty()) {
      result.rejects.push_back({line_no, "empty pid or text"});
      continue;
    }
    if (!seen.insert(p.pid).second) {
      throw DataError("line " + std::to_string(line_no) + ": duplicate pid '" + p.pid + "'");
    }
    result.records.push_back(std::move(p));
  }
  return result;
}

inline ParseResult<Passage> parse_passages_tsv(std::istream& in) {
  return parse_passages_tsv(detail::slurp(in));
}

inline std::string write_passages_tsv(const std::vector<Passage>& passages,
                                      bool with_header = true) {
  std::string out = with_header ? "pid\ttext\ttitle\tlanguage\n" : "";
  for (const auto& p : passages) {
    out += p.pid + '\t' + p.text + '\t' + p.title + '\t' + p.language + '\n';
  }
  return out;
}

inline std::string format_rejects(const std::vector<Reject>& rejects) {
  std::string out;
  for (const auto& r : rejects) out += std::to_string(r.line) + '\t' + r.reason + '\n';
  return out;
}

}  // namespace pivotdpr
