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

// Command-line front end. Each subcommand wraps one module; `pipeline`
// drives the whole chain from a JSON config.

#include <CLI11.hpp>

#include <iostream>
#include <memory>
#include <optional>

#include "pivotdpr/pivotdpr.hpp"

namespace {

using namespace pivotdpr;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

std::uint64_t seed_or(const Globals& g, std::uint64_t fallback) { return g.seed.value_or(fallback); }

fs::path under_out(const Globals& g, const std::string& p) {
  if (g.out_dir.empty() || fs::path(p).is_absolute()) return p;
  return fs::path(g.out_dir) / p;
}

void emit(const Globals& g, const std::string& path, const std::string& bytes) {
  if (path.empty() || path == "-") {
    std::cout << bytes;
    return;
  }
  const auto p = under_out(g, path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_file(p, bytes);
}

std::vector<SentencePair> read_pairs(const std::string& path, const std::string& a, const std::string& b) {
  auto parsed = parse_aligned_tsv(read_file(path), a, b);
  for (const auto& r : parsed.rejects) std::cerr << path << ":" << r.line << ": " << r.reason << "\n";
  return std::move(parsed.records);
}

TokenizerModel load_tokenizer(const std::string& vocab_path, bool lowercase) {
  return {Vocabulary::from_text(read_file(vocab_path)), 100, lowercase};
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    const auto item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw UsageError("bad --k value '" + item + "'");
    }
    if (ks.size() > 1 && ks[ks.size() - 2] >= ks.back()) throw UsageError("--k values must be strictly ascending");
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return ks;
}

std::unique_ptr<Translator> make_translator(const std::string& arg) {
  if (arg == "identity") return std::make_unique<IdentityTranslator>();
  if (arg.rfind("dict:", 0) == 0) {
    return std::make_unique<DictionaryTranslator>(DictionaryTranslator::from_tsv(read_file(arg.substr(5))));
  }
  throw UsageError("unknown translator '" + arg + "' (identity or dict:<path>)");
}

void add_curate(CLI::App& app, Globals& g) {
  auto* cur = app.add_subcommand("curate", "Pivot join, similarity filter, calibration sample");
  cur->require_subcommand(1);

  static std::string low, high, out, low_lang = "am", high_lang = "ar";
  static unsigned workers = 1;
  auto* join = cur->add_subcommand("join", "Join low-en and high-en pairs on the English side");
  join->add_option("--low", low, "low<TAB>en TSV")->required();
  join->add_option("--high", high, "high<TAB>en TSV")->required();
  join->add_option("--low-lang", low_lang);
  join->add_option("--high-lang", high_lang);
  join->add_option("--workers", workers)->check(CLI::Range(1u, 256u));
  join->add_option("--out", out, "tri-join TSV")->required();
  join->callback([&g] {
    const auto joined = dedup(pivot_join(read_pairs(low, low_lang, "en"), read_pairs(high, high_lang, "en"),
                                         PivotSide::kB, PivotSide::kB, workers));
    emit(g, out, write_trijoin_tsv(joined));
    std::cerr << "joined " << joined.size() << " records\n";
  });

  static std::string in, scorer = "bow", translator = "identity", lang_a = "am", lang_b = "en";
  static double threshold = 0.7;
  auto* filt = cur->add_subcommand("filter", "Keep pairs whose similarity reaches the threshold");
  filt->add_option("--in", in)->required();
  filt->add_option("--threshold", threshold)->check(CLI::Range(0.0, 1.0));
  filt->add_option("--scorer", scorer)->check(CLI::IsMember({"bow", "column"}));
  filt->add_option("--translator", translator, "identity | dict:<path>");
  filt->add_option("--lang-a", lang_a);
  filt->add_option("--lang-b", lang_b);
  filt->add_option("--out", out)->required();
  filt->callback([&g] {
    const auto pairs = read_pairs(in, lang_a, lang_b);
    const auto tr = make_translator(translator);
    const auto r = scorer == "column" ? column_filter(pairs, threshold)
                                      : similarity_filter(pairs, bow_scorer(), *tr, threshold);
    emit(g, out, write_aligned_tsv(r.kept));
    std::cerr << "kept " << r.kept.size() << " of " << pairs.size() << "\n";
  });

  static std::size_t n = 50;
  static std::uint64_t seed = kDefaultSeed;
  auto* samp = cur->add_subcommand("sample", "Seeded sample for manual review");
  samp->add_option("--in", in)->required();
  samp->add_option("--n", n);
  samp->add_option("--seed", seed);
  samp->add_option("--lang-a", lang_a);
  samp->add_option("--lang-b", lang_b);
  samp->add_option("--out", out);
  samp->callback([&g] {
    emit(g, out, write_review_tsv(calibration_sample(read_pairs(in, lang_a, lang_b), n, seed_or(g, seed))));
  });
}

void add_vocab(CLI::App& app, Globals& g) {
  auto* voc = app.add_subcommand("vocab", "Harvest and append new tokens");
  voc->require_subcommand(1);

  static std::string corpus, lexicon, base, out, add;
  static bool lowercase = false;
  auto* harvest = voc->add_subcommand("harvest", "Words the base vocabulary maps to [UNK]");
  harvest->add_option("--corpus", corpus, "one sentence per line")->required();
  harvest->add_option("--donor-lexicon", lexicon)->required();
  harvest->add_option("--base-vocab", base)->required();
  harvest->add_flag("--lowercase", lowercase);
  harvest->add_option("--out", out);
  harvest->callback([&g] {
    const auto model = load_tokenizer(base, lowercase);
    const auto lex = Lexicon::from_text(read_file(lexicon));
    std::vector<std::string> sentences;
    const std::string bytes = read_file(corpus);
    for (auto line : split_lines(bytes)) {
      if (!is_blank(line)) sentences.emplace_back(line);
    }
    std::string listing;
    for (const auto& t : harvest_new_tokens(
             sentences, [&](std::string_view s) { return segment_longest_match(s, lex); }, model)) {
      listing += t + '\n';
    }
    emit(g, out, listing);
  });

  auto* extend = voc->add_subcommand("extend", "Append tokens after the existing ids");
  extend->add_option("--base", base)->required();
  extend->add_option("--add", add)->required();
  extend->add_option("--out", out);
  extend->callback([&g] {
    std::vector<std::string> toks;
    const std::string bytes = read_file(add);
    for (auto line : split_lines(bytes)) {
      if (!is_blank(line)) toks.emplace_back(line);
    }
    const auto r = extend_vocab(Vocabulary::from_text(read_file(base)), toks);
    emit(g, out, r.vocab.to_text());
    std::cerr << "added " << toks.size() - r.skipped << ", skipped " << r.skipped << "\n";
  });
}

void add_gen(CLI::App& app, Globals& g) {
  auto* gen = app.add_subcommand("gen", "Masked-LM and translation-LM example generation");
  gen->require_subcommand(1);

  static std::string corpus, vocab, pairs, out, lang_a = "am", lang_b = "ar";
  static std::size_t chunk_len = 128, max_len = kDefaultTlmMaxLen;
  static double rate = kDefaultMaskRate;
  static std::uint64_t seed = kDefaultSeed;
  static bool lowercase = false;

  auto* mlm = gen->add_subcommand("mlm", "Chunk documents and mask");
  mlm->add_option("--corpus", corpus, "documents separated by blank lines")->required();
  mlm->add_option("--vocab", vocab)->required();
  mlm->add_option("--chunk-len", chunk_len)->check(CLI::Range(std::size_t{8}, std::size_t{1} << 20));
  mlm->add_option("--rate", rate)->check(CLI::Range(0.0, 1.0));
  mlm->add_option("--seed", seed);
  mlm->add_flag("--lowercase", lowercase);
  mlm->add_option("--out", out);
  mlm->callback([&g] {
    const auto tok = load_tokenizer(vocab, lowercase);
    std::vector<std::vector<TokenId>> docs;
    for (const auto& doc : detail::read_documents(read_file(corpus))) {
      std::vector<TokenId> ids;
      for (const auto& line : doc) {
        const auto l = encode(line, tok);
        ids.insert(ids.end(), l.begin(), l.end());
      }
      docs.push_back(std::move(ids));
    }
    const auto chunks = chunk_documents(docs, chunk_len);
    emit(g, out, write_jsonl(generate_mlm(chunks.chunks, tok.vocab, rate, seed_or(g, seed))));
    std::cerr << chunks.chunks.size() << " chunks, " << chunks.dropped_tails << " short tails dropped\n";
  });

  auto* tlm = gen->add_subcommand("tlm", "Concatenated aligned pairs, both orders");
  tlm->add_option("--pairs", pairs, "aligned TSV")->required();
  tlm->add_option("--vocab", vocab)->required();
  tlm->add_option("--max-len", max_len)->check(CLI::Range(std::size_t{5}, std::size_t{1} << 20));
  tlm->add_option("--rate", rate)->check(CLI::Range(0.0, 1.0));
  tlm->add_option("--seed", seed);
  tlm->add_option("--lang-a", lang_a);
  tlm->add_option("--lang-b", lang_b);
  tlm->add_flag("--lowercase", lowercase);
  tlm->add_option("--out", out);
  tlm->callback([&g] {
    const auto tok = load_tokenizer(vocab, lowercase);
    std::vector<TokenizedPair> tp;
    for (const auto& p : read_pairs(pairs, lang_a, lang_b)) {
      tp.push_back({p.pair_id, encode(p.text_a, tok), encode(p.text_b, tok)});
    }
    const auto r = tlm_pairs(tp, tok.vocab, max_len, rate, seed_or(g, seed));
    emit(g, out, write_jsonl(r.examples));
    std::cerr << r.examples.size() << " examples, " << r.truncated << " truncated, " << r.skipped_empty
              << " skipped\n";
  });
}

void add_encoder(CLI::App& app, Globals& g) {
  auto* enc = app.add_subcommand("encoder", "Dual encoder training and embedding export");
  enc->require_subcommand(1);

  static std::string data, vocab, out, params_path, passages, questions, side = "passage";
  static std::size_t dim = 128, feat_dim = 65536, batch = 8, steps = 2000;
  static double lr = 0.5;
  static std::uint64_t seed = kDefaultSeed;
  static unsigned workers = 1;
  static bool lowercase = false;

  auto* tr = enc->add_subcommand("train", "In-batch softmax training on question/positive pairs");
  tr->add_option("--data", data, "QA JSONL with positive_contexts")->required();
  tr->add_option("--vocab", vocab)->required();
  tr->add_option("--dim", dim)->check(CLI::Range(std::size_t{1}, std::size_t{4096}));
  tr->add_option("--feat-dim", feat_dim)->check(CLI::Range(std::size_t{1}, std::size_t{1} << 24));
  tr->add_option("--lr", lr)->check(CLI::PositiveNumber);
  tr->add_option("--batch", batch)->check(CLI::Range(std::size_t{2}, std::size_t{1} << 16));
  tr->add_option("--steps", steps);
  tr->add_option("--seed", seed);
  tr->add_flag("--lowercase", lowercase);
  tr->add_option("--out", out)->required();
  tr->callback([&g] {
    const auto tok = load_tokenizer(vocab, lowercase);
    std::vector<TrainingPair> pairs;
    for (const auto& q : parse_qa_jsonl(read_file(data)).records) {
      for (const auto& ctx : q.positive_contexts) {
        pairs.push_back({featurize(wordpiece_tokenize(q.question, tok), feat_dim),
                         featurize(wordpiece_tokenize(ctx.text, tok), feat_dim), q.language});
      }
    }
    if (pairs.size() < 2) throw DataError("training needs at least 2 question-passage pairs");
    const auto s = seed_or(g, seed);
    const auto r = train(init_params(dim, feat_dim, s), pairs, {lr, batch, steps, s});
    emit(g, out, write_params(r.params));
    std::cerr << "loss " << r.loss_history.front() << " -> " << r.loss_history.back() << "\n";
  });

  auto* em = enc->add_subcommand("embed", "Export passage or question embeddings");
  em->add_option("--params", params_path)->required();
  em->add_option("--vocab", vocab)->required();
  em->add_option("--passages", passages, "passages TSV (side passage)");
  em->add_option("--questions", questions, "QA JSONL (side question)");
  em->add_option("--side", side)->check(CLI::IsMember({"passage", "question"}));
  em->add_option("--workers", workers)->check(CLI::Range(1u, 256u));
  em->add_flag("--lowercase", lowercase);
  em->add_option("--out", out)->required();
  em->callback([&g] {
    const auto tok = load_tokenizer(vocab, lowercase);
    const auto params = read_params(read_file(params_path));
    std::vector<EncodeItem> items;
    if (side == "passage") {
      if (passages.empty()) throw UsageError("--side passage needs --passages");
      for (const auto& p : parse_passages_tsv(read_file(passages)).records) {
        items.push_back({p.pid, featurize(wordpiece_tokenize(p.text, tok), params.feature_dim)});
      }
    } else {
      if (questions.empty()) throw UsageError("--side question needs --questions");
      for (const auto& q : parse_qa_jsonl(read_file(questions)).records) {
        items.push_back({q.qid, featurize(wordpiece_tokenize(q.question, tok), params.feature_dim)});
      }
    }
    const Side s = side == "passage" ? Side::kPassage : Side::kQuestion;
    emit(g, out, write_xemb(export_embeddings(params, items, s, workers)));
  });
}

void add_retrieve(CLI::App& app, Globals& g) {
  static std::string index_path, passages, queries, out;
  static std::size_t k = 20;
  static unsigned workers = 1;
  auto* r = app.add_subcommand("retrieve", "Exact top-k inner-product search");
  r->add_option("--index", index_path, "passage XEMB")->required();
  r->add_option("--passages", passages)->required();
  r->add_option("--queries", queries, "question XEMB")->required();
  r->add_option("--k", k)->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20));
  r->add_option("--workers", workers)->check(CLI::Range(1u, 256u));
  r->add_option("--out", out)->required();
  r->callback([&g] {
    const auto index_bytes = read_file(index_path);
    const Index index = build_index(read_xemb(index_bytes), parse_passages_tsv(read_file(passages)).records);
    auto run = batch_retrieve(index, read_xemb(read_file(queries)), k, workers);
    run.index_fingerprint = hex64(fnv1a64(index_bytes));
    emit(g, out, write_run_jsonl(run));
    fs::path meta = under_out(g, out);
    meta.replace_extension(".meta.json");
    write_file(meta, write_run_meta(run));
  });
}

RetrievalRun load_run(const std::string& path) {
  fs::path meta = path;
  meta.replace_extension(".meta.json");
  return parse_run_jsonl(read_file(path), fs::exists(meta) ? read_file(meta) : "");
}

void add_eval(CLI::App& app, Globals& g) {
  static std::string run, qa, passages, ks = "10,20", baseline, out, md, model = "model";
  static std::vector<std::string> matchers{"regex"};
  auto* e = app.add_subcommand("eval", "Recall@k, ROUGE-1, language mix, McNemar");
  e->add_option("--run", run)->required();
  e->add_option("--qa", qa)->required();
  e->add_option("--passages", passages)->required();
  e->add_option("--k", ks, "comma-separated, ascending");
  e->add_option("--matcher", matchers)->check(CLI::IsMember({"string", "regex"}));
  e->add_option("--baseline-run", baseline);
  e->add_option("--model-name", model);
  e->add_option("--out", out);
  e->add_option("--md", md);
  e->callback([&g] {
    EvalOptions opts;
    opts.k_values = parse_ks(ks);
    opts.matchers.clear();
    for (const auto& m : matchers) opts.matchers.push_back(parse_matcher(m));
    opts.model = model;
    std::optional<RetrievalRun> base;
    if (!baseline.empty()) base = load_run(baseline);
    const auto report = evaluate(load_run(run), parse_qa_jsonl(read_file(qa)).records,
                                 parse_passages_tsv(read_file(passages)).records, opts, base ? &*base : nullptr);
    emit(g, out, render_json(report));
    if (!md.empty()) emit(g, md, render_markdown(report));
  });
}

void add_pipeline(CLI::App& app, Globals& g) {
  auto* p = app.add_subcommand("pipeline", "Config-driven end-to-end runs");
  p->require_subcommand(1);

  auto* run = p->add_subcommand("run", "Run every stage, reusing cached outputs");
  run->callback([&g] {
    if (g.config.empty()) throw UsageError("pipeline run needs --config");
    if (g.out_dir.empty()) throw UsageError("pipeline run needs --out-dir");
    auto cfg = load_config(g.config);
    if (g.seed) cfg.seed = *g.seed;
    const auto m = run_pipeline(cfg, g.out_dir);
    for (const auto& s : m.stages) std::cerr << s.name << (s.cache_hit ? "  cached\n" : "  ran\n");
  });

  static std::string a, b, name_a = "A", name_b = "B", out;
  auto* cmp = p->add_subcommand("compare", "Side-by-side recall with McNemar tests");
  cmp->add_option("run_a", a)->required();
  cmp->add_option("run_b", b)->required();
  cmp->add_option("--name-a", name_a);
  cmp->add_option("--name-b", name_b);
  cmp->add_option("--out", out);
  cmp->callback([&g] { emit(g, out, render_comparison(compare_runs(a, b), name_a, name_b)); });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense passage retrieval toolkit for low-resource languages"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "pipeline config JSON");
  app.add_option("--seed", g.seed, "overrides the configured seed");
  app.add_option("--out-dir", g.out_dir, "output directory; relative --out paths land here");
  add_curate(app, g);
  add_vocab(app, g);
  add_gen(app, g);
  add_encoder(app, g);
  add_retrieve(app, g);
  add_eval(app, g);
  add_pipeline(app, g);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  } catch (const PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const TranslationError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
