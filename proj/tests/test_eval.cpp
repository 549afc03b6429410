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

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "pivotdpr/eval.hpp"
#include "test_support.hpp"

using namespace pivotdpr;

namespace {

RetrievalRun make_run(std::size_t k, const std::vector<std::pair<std::string, std::vector<std::string>>>& lists) {
  RetrievalRun run;
  run.k = k;
  for (const auto& [qid, pids] : lists) {
    QueryResult r{qid, {}};
    double s = 100;
    for (const auto& p : pids) r.hits.push_back({p, s--});
    run.results.push_back(std::move(r));
  }
  return run;
}

HitVector hv(const std::string& bits) {
  HitVector h;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    h.qids.push_back("q" + std::to_string(i));
    h.hits.push_back(bits[i] == '1');
  }
  return h;
}

HitVector discordant(std::size_t b, std::size_t c, std::size_t same, bool a_side) {
  std::string s;
  for (std::size_t i = 0; i < b; ++i) s += a_side ? '1' : '0';
  for (std::size_t i = 0; i < c; ++i) s += a_side ? '0' : '1';
  s += std::string(same, '1');
  return hv(s);
}

}  // namespace

TEST(Normalize, Rules) {
  EXPECT_EQ(normalize_text("Addis\xE2\x80\x94" "Ababa!"), "addis ababa");
  EXPECT_EQ(normalize_text("addis ababa"), "addis ababa");
  EXPECT_EQ(normalize_text(""), "");
  EXPECT_EQ(normalize_text("  ሰላም፣  ዓለም። "), "ሰላም ዓለም");
  EXPECT_EQ(normalize_text("ﬁne　ＡＢ"), "fine ab");  // NFKC folds ligature and full width
  EXPECT_EQ(normalize_text("!!!"), "");
}

TEST(Match, StringIsTokenLevel) {
  EXPECT_TRUE(match_string("Ababa", "in addis ababa today"));
  EXPECT_FALSE(match_string("ab", "a slab of stone"));
  EXPECT_FALSE(match_string("new york city", "york city new"));
  EXPECT_TRUE(match_string("New-York", "i love new york!"));
  MatchWarnings w;
  EXPECT_FALSE(match_string("?!", "anything", &w));
  EXPECT_EQ(w.empty_answers, 1u);
}

TEST(Match, RegexIsEscapedSubstring) {
  EXPECT_TRUE(match_regex("ab", "a slab of stone"));
  EXPECT_FALSE(match_regex("ab", ""));
  EXPECT_EQ(escape_regex("a+b(c)"), "a\\+b\\(c\\)");
  const std::regex r(escape_regex("a+b"));
  EXPECT_TRUE(std::regex_search("x a+b y", r));
  EXPECT_FALSE(std::regex_search("aab", r));
  EXPECT_TRUE(match_regex("a+b", "a+b"));
  EXPECT_FALSE(match_regex("a+b", "aab"));
}

TEST(Match, StringImpliesRegexProperty) {
  Rng rng(5);
  const std::vector<std::string> alphabet{"a", "b", "ab", "ba", "x", "+", ".", "ሰ", "A", "-"};
  auto random_text = [&](std::size_t max_tokens) {
    std::string s;
    const auto n = rng.below(max_tokens + 1);
    for (std::size_t i = 0; i < n; ++i) {
      if (i) s += rng.below(4) ? " " : "";
      s += alphabet[rng.below(alphabet.size())];
    }
    return s;
  };
  for (int i = 0; i < 2000; ++i) {
    const auto a = random_text(3);
    const auto p = random_text(12);
    if (match_string(a, p)) EXPECT_TRUE(match_regex(a, p)) << "'" << a << "' in '" << p << "'";
  }
}

TEST(Recall, TenQuestionFixture) {
  std::vector<QaExample> qa;
  std::vector<Passage> passages;
  std::vector<std::pair<std::string, std::vector<std::string>>> lists;
  for (int p = 0; p < 20; ++p) passages.push_back({"n" + std::to_string(p), "", "nothing here", "am"});
  for (int i = 0; i < 10; ++i) {
    const auto s = std::to_string(i);
    qa.push_back({"q" + s, "?", {"gold" + s}, {}, "am"});
    passages.push_back({"g" + s, "", "the gold" + s + " answer", "am"});
    std::vector<std::string> list;
    for (int p = 0; p < 20; ++p) list.push_back("n" + std::to_string(p));
    if (i < 3) list[4] = "g" + s;        // top-10
    else if (i < 5) list[15] = "g" + s;  // ranks 11..20
    lists.emplace_back("q" + s, list);
  }
  const auto run = make_run(20, lists);
  const PassageStore store(passages);
  const auto r10 = recall_at_k(run, qa, store, 10, Matcher::kString);
  const auto r20 = recall_at_k(run, qa, store, 20, Matcher::kString);
  EXPECT_DOUBLE_EQ(r10.recall, 0.3);
  EXPECT_DOUBLE_EQ(r20.recall, 0.5);
  EXPECT_EQ(r10.hits.count(), 3u);
  EXPECT_EQ(r20.hits.qids[4], "q4");
  EXPECT_TRUE(r20.hits.hits[4]);
  EXPECT_DOUBLE_EQ(recall_at_k(run, qa, store, 20, Matcher::kRegex).recall, 0.5);
  EXPECT_THROW(recall_at_k(run, qa, store, 21, Matcher::kString), UsageError);
  auto stray = run;
  stray.results[0].qid = "nope";
  EXPECT_THROW(recall_at_k(stray, qa, store, 10, Matcher::kString), DataError);
  auto bad_pid = run;
  bad_pid.results[0].hits[0].pid = "missing";
  EXPECT_THROW(recall_at_k(bad_pid, qa, store, 10, Matcher::kString), DataError);
}

TEST(Rouge, HandCases) {
  EXPECT_NEAR(rouge1("addis ababa", "addis ababa").recall, 1.0, 1e-9);
  EXPECT_NEAR(rouge1("addis ababa ethiopia", "the city addis ababa").recall, 2.0 / 3.0, 1e-9);
  EXPECT_NEAR(rouge1("a a b", "a b").recall, 2.0 / 3.0, 1e-9);  // clipping
  EXPECT_NEAR(rouge1("a a b", "a b").precision, 1.0, 1e-9);
  EXPECT_EQ(rouge1("x", "y z").recall, 0.0);

  const std::vector<Passage> passages{{"p1", "", "Addis Ababa is big", "am"}, {"p2", "", "nothing", "am"}};
  const std::vector<QaExample> qa{{"q1", "?", {"Addis Ababa Ethiopia", "!!"}, {}, "am"},
                                  {"q2", "?", {"zzz"}, {}, "am"}};
  const auto run = make_run(2, {{"q1", {"p2", "p1"}}, {"q2", {"p1"}}});
  const auto r = rouge1_max(run, qa, PassageStore(passages), 2);
  EXPECT_NEAR(r.per_question[0], 2.0 / 3.0, 1e-9);
  EXPECT_EQ(r.per_question[1], 0.0);
  EXPECT_NEAR(r.mean.recall, 1.0 / 3.0, 1e-9);
  EXPECT_EQ(r.skipped_answers, 1u);
}

TEST(LanguageDistribution, CountsAndThreshold) {
  std::vector<Passage> passages;
  std::vector<std::string> list;
  for (int i = 0; i < 20; ++i) {
    passages.push_back({"p" + std::to_string(i), "", "t", i < 18 ? "th" : "en"});
    list.push_back("p" + std::to_string(i));
  }
  const PassageStore store(passages);
  const auto d = language_distribution(make_run(20, {{"q", list}}), store, 20);
  EXPECT_EQ(d.counts.at("th"), 18u);
  EXPECT_DOUBLE_EQ(d.fractions.at("th"), 0.9);
  EXPECT_DOUBLE_EQ(d.fractions.at("en"), 0.1);

  // 1 of 200 below the 1% cut
  std::vector<Passage> many{{"x", "", "t", "km"}};
  std::vector<std::pair<std::string, std::vector<std::string>>> lists;
  for (int i = 0; i < 199; ++i) many.push_back({"y" + std::to_string(i), "", "t", "en"});
  for (int q = 0; q < 10; ++q) {
    std::vector<std::string> l;
    for (int i = 0; i < 20; ++i) l.push_back(q == 0 && i == 0 ? "x" : "y" + std::to_string(q * 19 + i));
    lists.emplace_back("q" + std::to_string(q), l);
  }
  const auto d2 = language_distribution(make_run(20, lists), PassageStore(many), 20);
  EXPECT_EQ(d2.total, 200u);
  EXPECT_DOUBLE_EQ(d2.fractions.at("km"), 0.005);
  EXPECT_FALSE(d2.reported(0.01).count("km"));
  EXPECT_TRUE(d2.reported(0.01).count("en"));
  double sum = 0;
  for (const auto& [l, f] : d2.fractions) sum += f;
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(McNemar, ExactAndChiSquare) {
  const auto same = mcnemar(hv("1010"), hv("1010"));
  EXPECT_EQ(same.b + same.c, 0u);
  EXPECT_EQ(same.p_value, 1.0);
  EXPECT_EQ(same.method, McNemarMethod::kExact);

  const auto exact = mcnemar(discordant(10, 2, 5, true), discordant(10, 2, 5, false));
  EXPECT_EQ(exact.b, 10u);
  EXPECT_EQ(exact.c, 2u);
  EXPECT_EQ(exact.method, McNemarMethod::kExact);
  EXPECT_NEAR(exact.p_value, 158.0 / 4096.0, 1e-12);

  const auto chi = mcnemar(discordant(40, 20, 3, true), discordant(40, 20, 3, false));
  EXPECT_EQ(chi.method, McNemarMethod::kChiSquareCc);
  EXPECT_NEAR(chi.statistic, 361.0 / 60.0, 1e-12);
  EXPECT_NEAR(chi.p_value, 0.0142, 1e-3);

  const auto swapped = mcnemar(discordant(40, 20, 3, false), discordant(40, 20, 3, true));
  EXPECT_EQ(swapped.p_value, chi.p_value);
  EXPECT_EQ(swapped.b, 20u);

  EXPECT_DOUBLE_EQ(binomial_two_sided_p(5, 5), 1.0);
  EXPECT_THROW(mcnemar(hv("10"), hv("1")), DataError);
  auto renamed = hv("10");
  renamed.qids[0] = "other";
  EXPECT_THROW(mcnemar(hv("10"), renamed), DataError);
}

TEST(McNemar, AsteriskThreshold) {
  McNemarResult r;
  r.p_value = 0.049;
  EXPECT_TRUE(significant(r));
  r.p_value = 0.05;
  EXPECT_FALSE(significant(r));
  r.p_value = 0.051;
  EXPECT_FALSE(significant(r));
}

namespace {

struct ReportFixture {
  std::vector<Passage> passages{{"p1", "", "Addis Ababa is the capital", "am"},
                                {"p2", "", "Phnom Penh lies on the river", "km"},
                                {"p3", "", "unrelated text", "en"}};
  std::vector<QaExample> qa{{"a1", "capital?", {"Addis Ababa"}, {}, "am"},
                            {"a2", "river?", {"Mekong"}, {}, "am"},
                            {"k1", "city?", {"Phnom Penh"}, {}, "km"}};
  RetrievalRun run = make_run(2, {{"a1", {"p1", "p3"}}, {"a2", {"p3", "p2"}}, {"k1", {"p2", "p1"}}});
  RetrievalRun base = make_run(2, {{"a1", {"p3", "p2"}}, {"a2", {"p3", "p2"}}, {"k1", {"p3", "p1"}}});

  EvalReport report() const {
    EvalOptions opts;
    opts.k_values = {1, 2};
    opts.matchers = {Matcher::kRegex, Matcher::kString};
    opts.model = "mDPR+MLM+TLM";
    opts.baseline = "mDPR";
    return evaluate(run, qa, passages, opts, &base);
  }
};

}  // namespace

TEST(Report, EvaluateBlocks) {
  const auto rep = ReportFixture{}.report();
  ASSERT_EQ(rep.blocks.size(), 4u);
  const auto& am = rep.blocks[0];
  EXPECT_EQ(am.language, "am");
  EXPECT_EQ(am.matcher, Matcher::kRegex);
  EXPECT_EQ(am.n_questions, 2u);
  EXPECT_DOUBLE_EQ(am.recall.at(1), 0.5);
  EXPECT_DOUBLE_EQ(am.baseline_recall.at(2), 0.0);
  EXPECT_EQ(am.mcnemar.at(1).c, 1u);
  EXPECT_LE(am.recall.at(1), am.recall.at(2));
  EXPECT_EQ(am.distribution.counts.at("en"), 2u);
}

TEST(Report, GoldenMarkdown) {
  const auto md = render_markdown(ReportFixture{}.report());
  std::ifstream in(pivotdpr::testing::data_path("golden_report.md"), std::ios::binary);
  ASSERT_TRUE(in) << "missing golden file";
  const std::string golden((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(md, golden);
  EXPECT_EQ(render_json(ReportFixture{}.report()), render_json(ReportFixture{}.report()));
}

TEST(Report, EmptyReportIsHeaderOnly) {
  EvalReport empty;
  empty.k_values = {10, 20};
  EXPECT_EQ(render_markdown(empty),
            "# Retrieval evaluation\n\n| Model | Recall@10 | Recall@20 | ROUGE-1 Top10 | ROUGE-1 Top20 |\n"
            "|---|---:|---:|---:|---:|\n");
}

TEST(Report, AsteriskOnlyBelowFivePercent) {
  EvalReport rep;
  rep.k_values = {10};
  rep.model = "m";
  EvalBlock b;
  b.language = "am";
  b.recall[10] = 0.5;
  b.rouge1[10] = {};
  b.mcnemar[10].p_value = 0.049;
  rep.blocks.push_back(b);
  EXPECT_NE(render_markdown(rep).find("50.00* |"), std::string::npos);
  rep.blocks[0].mcnemar[10].p_value = 0.051;
  EXPECT_EQ(render_markdown(rep).find("50.00*"), std::string::npos);
}
