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

// End-to-end orchestration: curate -> vocab -> mlm -> tlm -> train -> embed
// -> retrieve -> eval, with per-stage fingerprint caching and a manifest.

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pivotdpr/common.hpp"
#include "pivotdpr/corpus.hpp"
#include "pivotdpr/curate.hpp"
#include "pivotdpr/encoder.hpp"
#include "pivotdpr/eval.hpp"
#include "pivotdpr/pretrain.hpp"
#include "pivotdpr/retrieval.hpp"
#include "pivotdpr/tokenizer.hpp"

namespace pivotdpr {

inline constexpr const char* kToolVersion = "pivotdpr 0.1.0";

namespace fs = std::filesystem;

struct EncoderConfig {
  std::size_t embed_dim = 128;
  std::size_t feature_dim = 65536;
  double lr = 0.5;
  std::size_t batch = 8;
  std::size_t steps = 2000;
};

/// Pipeline inputs. Relative paths resolve against the config file's directory.
struct PipelineInputs {
  std::string low_en;         // low-resource <TAB> English
  std::string high_en;        // high-resource <TAB> English
  std::string mono_corpus;    // low-resource documents, blank-line separated
  std::string donor_lexicon;  // word list driving the donor segmenter
  std::string base_vocab;
  std::string qa_train;
  std::string qa_test;
  std::string passages;
  std::string dictionary;           // optional: translator for similarity filtering
  std::string question_dictionary;  // optional: English -> low-resource question translation
  std::string baseline_run;         // optional: run.jsonl to test against
};

struct PipelineConfig {
  std::string low = "am";
  std::string high = "ar";
  PipelineInputs inputs;
  std::map<std::string, double> thresholds{{"low_en", 0.7}, {"high_en", 0.8}};
  std::string scorer = "bow";           // bow | column
  std::string filter_order = "before_join";  // before_join | after_join
  std::size_t calibration_n = 50;
  std::uint64_t seed = kDefaultSeed;
  std::vector<std::size_t> chunk_lens{128, 512};
  std::size_t tlm_max_len = kDefaultTlmMaxLen;
  double mask_rate = kDefaultMaskRate;
  std::vector<std::size_t> k_values{10, 20};
  std::vector<std::string> matchers{"regex", "string"};
  EncoderConfig encoder;
  bool mlm_only = false;
  bool translate_questions = false;
  std::size_t max_chars_per_word = 100;
  bool lowercase = false;
  unsigned workers = 1;
  // Neural post-training settings. Informational, not executed.
  std::string provenance =
      "mBERT post-training: Adam lr 2e-5, linear schedule, warmup 10,000 steps, weight decay 0.01; "
      "MLM seq 128 for 500,000 steps (train batch 32, eval batch 8), then seq 512 for 100,000 "
      "steps (batch 8); TLM max length 256, 300,000 steps, batch 16; seed 12345.";
  fs::path base_dir;  // directory of the config file; not serialized

  void validate() const {
    if (!(mask_rate > 0 && mask_rate < 1)) throw UsageError("mask_rate must lie in (0,1)");
    if (chunk_lens.empty() || k_values.empty()) throw UsageError("chunk_lens and k_values must be non-empty");
    for (auto c : chunk_lens) if (c < 8) throw UsageError("chunk lengths must be >= 8");
    for (auto k : k_values) if (k < 1) throw UsageError("k values must be >= 1");
    if (!std::is_sorted(k_values.begin(), k_values.end())) throw UsageError("k_values must be sorted ascending");
    if (tlm_max_len < 8) throw UsageError("tlm_max_len must be >= 8");
    if (encoder.embed_dim < 1 || encoder.feature_dim < 1 || encoder.batch < 2 || encoder.steps < 1 ||
        !(encoder.lr > 0)) {
      throw UsageError("encoder settings must be positive (batch >= 2)");
    }
    for (const auto& [name, t] : thresholds) check_threshold(t);
    if (scorer != "bow" && scorer != "column") throw UsageError("scorer must be bow or column");
    if (filter_order != "before_join" && filter_order != "after_join") {
      throw UsageError("filter_order must be before_join or after_join");
    }
    for (const auto& m : matchers) parse_matcher(m);
  }

  fs::path resolve(const std::string& p) const {
    if (p.empty()) return {};
    fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["language_pair"] = {{"low", c.low}, {"high", c.high}};
  j["inputs"] = {{"low_en", c.inputs.low_en},
                 {"high_en", c.inputs.high_en},
                 {"mono_corpus", c.inputs.mono_corpus},
                 {"donor_lexicon", c.inputs.donor_lexicon},
                 {"base_vocab", c.inputs.base_vocab},
                 {"qa_train", c.inputs.qa_train},
                 {"qa_test", c.inputs.qa_test},
                 {"passages", c.inputs.passages},
                 {"dictionary", c.inputs.dictionary},
                 {"question_dictionary", c.inputs.question_dictionary},
                 {"baseline_run", c.inputs.baseline_run}};
  j["thresholds"] = c.thresholds;
  j["curate"] = {{"scorer", c.scorer}, {"filter_order", c.filter_order}, {"calibration_n", c.calibration_n}};
  j["seeds"] = {{"global", c.seed}};
  j["chunk_lens"] = c.chunk_lens;
  j["tlm_max_len"] = c.tlm_max_len;
  j["mask_rate"] = c.mask_rate;
  j["k_values"] = c.k_values;
  j["matchers"] = c.matchers;
  j["encoder"] = {{"embed_dim", c.encoder.embed_dim}, {"feature_dim", c.encoder.feature_dim},
                  {"lr", c.encoder.lr}, {"batch", c.encoder.batch}, {"steps", c.encoder.steps}};
  j["ablation"] = {{"mlm_only", c.mlm_only}};
  j["translate_questions"] = c.translate_questions;
  j["tokenizer"] = {{"max_chars_per_word", c.max_chars_per_word}, {"lowercase", c.lowercase}};
  j["workers"] = c.workers;
  j["provenance"] = c.provenance;
  return j;
}

/// Reads a JSON config; absent keys keep their defaults.
inline PipelineConfig config_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
  PipelineConfig c;
  c.base_dir = base_dir;
  try {
    if (auto lp = j.find("language_pair"); lp != j.end()) {
      c.low = lp->value("low", c.low);
      c.high = lp->value("high", c.high);
    }
    if (auto in = j.find("inputs"); in != j.end()) {
      auto& i = c.inputs;
      i.low_en = in->value("low_en", i.low_en);
      i.high_en = in->value("high_en", i.high_en);
      i.mono_corpus = in->value("mono_corpus", i.mono_corpus);
      i.donor_lexicon = in->value("donor_lexicon", i.donor_lexicon);
      i.base_vocab = in->value("base_vocab", i.base_vocab);
      i.qa_train = in->value("qa_train", i.qa_train);
      i.qa_test = in->value("qa_test", i.qa_test);
      i.passages = in->value("passages", i.passages);
      i.dictionary = in->value("dictionary", i.dictionary);
      i.question_dictionary = in->value("question_dictionary", i.question_dictionary);
      i.baseline_run = in->value("baseline_run", i.baseline_run);
    }
    if (auto t = j.find("thresholds"); t != j.end()) {
      for (auto it = t->begin(); it != t->end(); ++it) c.thresholds[it.key()] = it->get<double>();
    }
    if (auto cu = j.find("curate"); cu != j.end()) {
      c.scorer = cu->value("scorer", c.scorer);
      c.filter_order = cu->value("filter_order", c.filter_order);
      c.calibration_n = cu->value("calibration_n", c.calibration_n);
    }
    if (auto s = j.find("seeds"); s != j.end()) c.seed = s->value("global", c.seed);
    c.chunk_lens = j.value("chunk_lens", c.chunk_lens);
    c.tlm_max_len = j.value("tlm_max_len", c.tlm_max_len);
    c.mask_rate = j.value("mask_rate", c.mask_rate);
    c.k_values = j.value("k_values", c.k_values);
    c.matchers = j.value("matchers", c.matchers);
    if (auto e = j.find("encoder"); e != j.end()) {
      c.encoder.embed_dim = e->value("embed_dim", c.encoder.embed_dim);
      c.encoder.feature_dim = e->value("feature_dim", c.encoder.feature_dim);
      c.encoder.lr = e->value("lr", c.encoder.lr);
      c.encoder.batch = e->value("batch", c.encoder.batch);
      c.encoder.steps = e->value("steps", c.encoder.steps);
    }
    if (auto a = j.find("ablation"); a != j.end()) c.mlm_only = a->value("mlm_only", c.mlm_only);
    c.translate_questions = j.value("translate_questions", c.translate_questions);
    if (auto t = j.find("tokenizer"); t != j.end()) {
      c.max_chars_per_word = t->value("max_chars_per_word", c.max_chars_per_word);
      c.lowercase = t->value("lowercase", c.lowercase);
    }
    c.workers = j.value("workers", c.workers);
    c.provenance = j.value("provenance", c.provenance);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  const std::string bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

/// JSON-pointer paths whose values differ between two documents.
inline std::vector<std::string> config_diff(const nlohmann::json& a, const nlohmann::json& b) {
  std::set<std::string> paths;
  for (const auto& op : nlohmann::json::diff(a, b)) paths.insert(op.at("path").get<std::string>());
  return {paths.begin(), paths.end()};
}

// ---------------------------------------------------------------------------

struct StageRecord {
  std::string name;
  std::string key;
  nlohmann::json config;
  std::map<std::string, std::string> inputs;   // path -> fingerprint
  std::map<std::string, std::string> outputs;  // path relative to out_dir -> fingerprint
  nlohmann::json summary;
  bool cache_hit = false;
  double seconds = 0;
};

struct RunManifest {
  std::string tool_version = kToolVersion;
  std::string config_hash;
  nlohmann::json config;
  std::map<std::string, std::string> input_fingerprints;
  std::vector<StageRecord> stages;
  std::string status = "ok";
  std::string failed_stage;
  std::string error;
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kTimingsFile = "timings.json";

inline nlohmann::ordered_json manifest_to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["tool_version"] = m.tool_version;
  j["status"] = m.status;
  if (!m.failed_stage.empty()) {
    j["failed_stage"] = m.failed_stage;
    j["error"] = m.error;
  }
  j["config_hash"] = m.config_hash;
  j["config"] = m.config;
  j["input_fingerprints"] = m.input_fingerprints;
  auto& stages = j["stages"] = nlohmann::ordered_json::array();
  for (const auto& s : m.stages) {
    nlohmann::ordered_json sj;
    sj["name"] = s.name;
    sj["key"] = s.key;
    sj["config"] = s.config;
    sj["inputs"] = s.inputs;
    sj["outputs"] = s.outputs;
    sj["summary"] = s.summary;
    stages.push_back(std::move(sj));
  }
  j["volatile_outputs"] = {kTimingsFile};
  return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    m.tool_version = j.at("tool_version").get<std::string>();
    m.status = j.at("status").get<std::string>();
    m.failed_stage = j.value("failed_stage", "");
    m.error = j.value("error", "");
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config");
    m.input_fingerprints = j.at("input_fingerprints").get<std::map<std::string, std::string>>();
    for (const auto& sj : j.at("stages")) {
      StageRecord s;
      s.name = sj.at("name").get<std::string>();
      s.key = sj.at("key").get<std::string>();
      s.config = sj.at("config");
      s.inputs = sj.at("inputs").get<std::map<std::string, std::string>>();
      s.outputs = sj.at("outputs").get<std::map<std::string, std::string>>();
      s.summary = sj.value("summary", nlohmann::json::object());
      m.stages.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid manifest: ") + e.what());
  }
  return m;
}

inline RunManifest load_manifest(const fs::path& path) {
  try {
    return manifest_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
}

class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, const std::string& what, int exit_code)
      : std::runtime_error("stage '" + stage + "' failed: " + what),
        stage_(std::move(stage)),
        exit_code_(exit_code) {}
  const std::string& stage() const { return stage_; }
  int exit_code() const { return exit_code_; }

 private:
  std::string stage_;
  int exit_code_;
};

namespace detail {

inline std::vector<std::vector<std::string>> read_documents(std::string_view bytes) {
  text::require_utf8(bytes);
  std::vector<std::vector<std::string>> docs(1);
  for (std::string_view line : split_lines(bytes)) {
    if (is_blank(line)) {
      if (!docs.back().empty()) docs.emplace_back();
      continue;
    }
    docs.back().emplace_back(line);
  }
  if (docs.back().empty()) docs.pop_back();
  return docs;
}

inline std::vector<std::string> token_strings(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(vocab.token(id));
  return out;
}

inline std::vector<SentencePair> load_pairs(const fs::path& path, const std::string& lang_a,
                                            const std::string& lang_b = "en") {
  const auto parsed = parse_aligned_tsv(read_file(path), lang_a, lang_b);
  return parsed.records;
}

}  // namespace detail

/// Runs (or reuses) every stage in order and writes manifest.json into
/// `out_dir`. On failure a partial manifest is written before rethrowing.
class Pipeline {
 public:
  Pipeline(PipelineConfig config, fs::path out_dir)
      : cfg_(std::move(config)), out_(std::move(out_dir)) {}

  RunManifest run() {
    cfg_.validate();
    fs::create_directories(out_);
    if (fs::exists(out_ / kManifestFile)) {
      try {
        previous_ = load_manifest(out_ / kManifestFile);
      } catch (const DataError&) {
        previous_.reset();
      }
    }
    manifest_ = RunManifest{};
    manifest_.config = to_json(cfg_);
    manifest_.config_hash = hex64(fnv1a64(manifest_.config.dump()));

    const std::vector<std::pair<std::string, std::function<void(StageRecord&)>>> stages = {
        {"curate", [&](StageRecord& s) { stage_curate(s); }},
        {"vocab", [&](StageRecord& s) { stage_vocab(s); }},
        {"mlm", [&](StageRecord& s) { stage_mlm(s); }},
        {"tlm", [&](StageRecord& s) { stage_tlm(s); }},
        {"train", [&](StageRecord& s) { stage_train(s); }},
        {"embed", [&](StageRecord& s) { stage_embed(s); }},
        {"retrieve", [&](StageRecord& s) { stage_retrieve(s); }},
        {"eval", [&](StageRecord& s) { stage_eval(s); }},
    };
    for (const auto& [name, fn] : stages) {
      if (name == "tlm" && cfg_.mlm_only) continue;
      run_stage(name, fn);
    }
    write_manifest();
    return manifest_;
  }

 private:
  // ---- stage plumbing ----------------------------------------------------

  struct StagePlan {
    nlohmann::json config;
    std::vector<fs::path> inputs;        // absolute or config-relative files
    std::vector<std::string> outputs;    // relative to out_dir
  };

  StagePlan plan(const std::string& name) const {
    StagePlan p;
    const auto& in = cfg_.inputs;
    auto add_input = [&](const std::string& path) {
      if (!path.empty()) p.inputs.push_back(cfg_.resolve(path));
    };
    if (name == "curate") {
      p.config = {{"thresholds", cfg_.thresholds}, {"scorer", cfg_.scorer},
                  {"filter_order", cfg_.filter_order}, {"calibration_n", cfg_.calibration_n},
                  {"seed", cfg_.seed}, {"low", cfg_.low}, {"high", cfg_.high}};
      add_input(in.low_en);
      add_input(in.high_en);
      add_input(in.dictionary);
      p.outputs = {"curate/joined.tsv", "curate/pairs.tsv", "curate/calibration.tsv",
                   "curate/rejects.tsv"};
    } else if (name == "vocab") {
      p.config = {{"max_chars_per_word", cfg_.max_chars_per_word}, {"lowercase", cfg_.lowercase}};
      add_input(in.mono_corpus);
      add_input(in.donor_lexicon);
      add_input(in.base_vocab);
      p.inputs.push_back(out_ / "curate/pairs.tsv");
      p.outputs = {"vocab/vocab.txt", "vocab/new_tokens.txt"};
    } else if (name == "mlm") {
      p.config = {{"chunk_lens", cfg_.chunk_lens}, {"mask_rate", cfg_.mask_rate}, {"seed", cfg_.seed},
                  {"max_chars_per_word", cfg_.max_chars_per_word}, {"lowercase", cfg_.lowercase}};
      add_input(in.mono_corpus);
      p.inputs.push_back(out_ / "vocab/vocab.txt");
      for (auto len : cfg_.chunk_lens) p.outputs.push_back("mlm/mlm_" + std::to_string(len) + ".jsonl");
    } else if (name == "tlm") {
      p.config = {{"max_len", cfg_.tlm_max_len}, {"mask_rate", cfg_.mask_rate}, {"seed", cfg_.seed},
                  {"max_chars_per_word", cfg_.max_chars_per_word}, {"lowercase", cfg_.lowercase}};
      p.inputs.push_back(out_ / "curate/pairs.tsv");
      p.inputs.push_back(out_ / "vocab/vocab.txt");
      p.outputs = {"tlm/tlm.jsonl"};
    } else if (name == "train") {
      p.config = {{"encoder", to_json(cfg_)["encoder"]}, {"seed", cfg_.seed},
                  {"translate_questions", cfg_.translate_questions},
                  {"data", {{"qa", true}, {"tlm_pairs", !cfg_.mlm_only}}}};
      add_input(in.qa_train);
      if (cfg_.translate_questions) add_input(in.question_dictionary);
      p.inputs.push_back(out_ / "vocab/vocab.txt");
      if (!cfg_.mlm_only) p.inputs.push_back(out_ / "tlm/tlm.jsonl");
      p.outputs = {"train/params.bin", "train/train_log.json"};
    } else if (name == "embed") {
      p.config = {{"feature_dim", cfg_.encoder.feature_dim}, {"workers_independent", true}};
      add_input(in.passages);
      add_input(in.qa_test);
      p.inputs.push_back(out_ / "vocab/vocab.txt");
      p.inputs.push_back(out_ / "train/params.bin");
      p.outputs = {"embed/passages.xemb", "embed/questions.xemb"};
    } else if (name == "retrieve") {
      p.config = {{"k", cfg_.k_values.back()}};
      add_input(in.passages);
      p.inputs.push_back(out_ / "embed/passages.xemb");
      p.inputs.push_back(out_ / "embed/questions.xemb");
      p.outputs = {"retrieve/run.jsonl", "retrieve/run.meta.json"};
    } else if (name == "eval") {
      p.config = {{"k_values", cfg_.k_values}, {"matchers", cfg_.matchers},
                  {"report_threshold", 0.01}, {"normalization_version", kNormalizationVersion}};
      add_input(in.qa_test);
      add_input(in.passages);
      add_input(in.baseline_run);
      p.inputs.push_back(out_ / "retrieve/run.jsonl");
      p.inputs.push_back(out_ / "retrieve/run.meta.json");
      p.outputs = {"eval/report.json", "eval/report.md"};
    }
    return p;
  }

  std::string display_path(const fs::path& p) const {
    // $OUT/... inside the run dir, else relative to the config.
    const auto rel = p.lexically_relative(out_);
    if (!rel.empty() && *rel.begin() != "..") return "$OUT/" + rel.generic_string();
    return p.lexically_relative(cfg_.base_dir).generic_string();
  }

  void run_stage(const std::string& name, const std::function<void(StageRecord&)>& fn) {
    const auto start = std::chrono::steady_clock::now();
    StageRecord rec;
    rec.name = name;
    try {
      const StagePlan p = plan(name);
      rec.config = p.config;
      for (const auto& in : p.inputs) {
        if (!fs::exists(in)) throw DataError("missing input file: " + in.string());
        const auto fp = file_fingerprint(in);
        rec.inputs[display_path(in)] = fp;
        if (display_path(in).rfind("$OUT/", 0) != 0) manifest_.input_fingerprints[display_path(in)] = fp;
      }
      std::string key_material = name + "\n" + rec.config.dump() + "\n" + kToolVersion;
      for (const auto& [path, fp] : rec.inputs) key_material += "\n" + path + "=" + fp;
      rec.key = hex64(fnv1a64(key_material));

      if (const StageRecord* prev = cached(rec.key, name)) {
        rec.outputs = prev->outputs;
        rec.summary = prev->summary;
        rec.cache_hit = true;
      } else {
        fn(rec);
        for (const auto& out : p.outputs) rec.outputs[out] = file_fingerprint(out_ / out);
      }
    } catch (const std::exception& e) {
      manifest_.status = "failed";
      manifest_.failed_stage = name;
      manifest_.error = e.what();
      rec.seconds = elapsed(start);
      timings_[name] = {rec.seconds, false};
      write_manifest();
      int code = kExitData;
      if (dynamic_cast<const UsageError*>(&e)) code = kExitUsage;
      if (dynamic_cast<const NumericError*>(&e)) code = kExitNumeric;
      throw PipelineError(name, e.what(), code);
    }
    rec.seconds = elapsed(start);
    timings_[name] = {rec.seconds, rec.cache_hit};
    manifest_.stages.push_back(std::move(rec));
  }

  const StageRecord* cached(const std::string& key, const std::string& name) const {
    if (!previous_ || previous_->status != "ok") return nullptr;
    for (const auto& s : previous_->stages) {
      if (s.name != name || s.key != key) continue;
      for (const auto& [path, fp] : s.outputs) {
        if (!fs::exists(out_ / path) || file_fingerprint(out_ / path) != fp) return nullptr;
      }
      return &s;
    }
    return nullptr;
  }

  static double elapsed(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }

  void write_manifest() {
    write_file(out_ / kManifestFile, manifest_to_json(manifest_).dump(2) + "\n");
    nlohmann::ordered_json t;
    for (const auto& [name, v] : timings_) {
      t[name] = {{"seconds", v.first}, {"cache_hit", v.second}};
    }
    write_file(out_ / kTimingsFile, t.dump(2) + "\n");
  }

  void put(const std::string& rel, std::string_view bytes) const { write_file(out_ / rel, bytes); }

  TokenizerModel tokenizer() const {
    return TokenizerModel{Vocabulary::from_text(read_file(out_ / "vocab/vocab.txt")),
                          cfg_.max_chars_per_word, cfg_.lowercase};
  }

  // ---- stages --------------------------------------------------------------

  std::unique_ptr<Translator> translator() const {
    if (cfg_.inputs.dictionary.empty()) return std::make_unique<IdentityTranslator>();
    return std::make_unique<DictionaryTranslator>(
        DictionaryTranslator::from_tsv(read_file(cfg_.resolve(cfg_.inputs.dictionary))));
  }

  double threshold(const std::string& corpus) const {
    auto it = cfg_.thresholds.find(corpus);
    return it == cfg_.thresholds.end() ? 0.7 : it->second;
  }

  void stage_curate(StageRecord& rec) {
    auto low = detail::load_pairs(cfg_.resolve(cfg_.inputs.low_en), cfg_.low);
    auto high = detail::load_pairs(cfg_.resolve(cfg_.inputs.high_en), cfg_.high);
    const auto tr = translator();
    const auto scorer = bow_scorer();
    std::string rejects;

    auto filter = [&](const std::vector<SentencePair>& pairs, const std::string& corpus) {
      const double t = threshold(corpus);
      FilterResult r = cfg_.scorer == "column" ? column_filter(pairs, t)
                                               : similarity_filter(pairs, scorer, *tr, t);
      for (const auto& rj : r.rejects) rejects += corpus + '\t' + hex64(rj.pair_id) + '\t' + rj.reason + '\n';
      return r;
    };

    std::vector<TriJoinRecord> joined;
    std::size_t low_kept = low.size(), high_kept = high.size();
    if (cfg_.filter_order == "before_join") {
      auto lf = filter(low, "low_en");
      auto hf = filter(high, "high_en");
      low_kept = lf.kept.size();
      high_kept = hf.kept.size();
      joined = pivot_join(lf.kept, hf.kept, PivotSide::kB, PivotSide::kB, cfg_.workers);
    } else {
      auto all = pivot_join(low, high, PivotSide::kB, PivotSide::kB, cfg_.workers);
      for (auto& r : all) {
        const double ls = scorer.score(tr->translate(r.low_text), r.pivot_text);
        const double hs = scorer.score(tr->translate(r.high_text), r.pivot_text);
        if (cfg_.scorer == "bow") {
          r.low_similarity = ls;
          r.high_similarity = hs;
        }
        if (r.low_similarity.value_or(0) >= threshold("low_en") &&
            r.high_similarity.value_or(0) >= threshold("high_en")) {
          joined.push_back(std::move(r));
        }
      }
    }
    const std::size_t joined_count = joined.size();
    joined = dedup(joined);
    const auto pairs = to_low_high_pairs(joined, cfg_.low, cfg_.high);
    const auto sample = calibration_sample(pairs, cfg_.calibration_n, cfg_.seed);

    put("curate/joined.tsv", write_trijoin_tsv(joined));
    put("curate/pairs.tsv", write_aligned_tsv(pairs));
    put("curate/calibration.tsv", write_review_tsv(sample));
    put("curate/rejects.tsv", rejects);
    rec.summary = {{"low_en_pairs", low.size()}, {"high_en_pairs", high.size()},
                   {"low_en_kept", low_kept}, {"high_en_kept", high_kept},
                   {"joined", joined_count}, {"unique", joined.size()},
                   {"calibration_sample", sample.size()}};
  }

  void stage_vocab(StageRecord& rec) {
    const TokenizerModel base{Vocabulary::from_text(read_file(cfg_.resolve(cfg_.inputs.base_vocab))),
                              cfg_.max_chars_per_word, cfg_.lowercase};
    const Lexicon lexicon = Lexicon::from_text(read_file(cfg_.resolve(cfg_.inputs.donor_lexicon)));
    std::vector<std::string> sentences;
    for (const auto& p : detail::load_pairs(out_ / "curate/pairs.tsv", cfg_.low, cfg_.high)) sentences.push_back(p.text_a);
    for (const auto& doc : detail::read_documents(read_file(cfg_.resolve(cfg_.inputs.mono_corpus)))) {
      sentences.insert(sentences.end(), doc.begin(), doc.end());
    }
    const auto harvested = harvest_new_tokens(
        sentences, [&](std::string_view s) { return segment_longest_match(s, lexicon); }, base);
    const auto extended = extend_vocab(base.vocab, harvested);
    put("vocab/vocab.txt", extended.vocab.to_text());
    std::string listing;
    for (const auto& t : harvested) listing += t + '\n';
    put("vocab/new_tokens.txt", listing);
    rec.summary = {{"base_size", base.vocab.size()}, {"harvested", harvested.size()},
                   {"skipped", extended.skipped}, {"extended_size", extended.vocab.size()}};
  }

  void stage_mlm(StageRecord& rec) {
    const auto tok = tokenizer();
    std::vector<std::vector<TokenId>> docs;
    for (const auto& doc : detail::read_documents(read_file(cfg_.resolve(cfg_.inputs.mono_corpus)))) {
      std::vector<TokenId> ids;
      for (const auto& line : doc) {
        const auto l = encode(line, tok);
        ids.insert(ids.end(), l.begin(), l.end());
      }
      docs.push_back(std::move(ids));
    }
    for (auto len : cfg_.chunk_lens) {
      const auto chunks = chunk_documents(docs, len);
      const auto examples = generate_mlm(chunks.chunks, tok.vocab, cfg_.mask_rate, cfg_.seed);
      MaskCounts counts;
      std::size_t content = 0;
      for (const auto& e : examples) {
        counts += e.counts;
        content += e.input_ids.size() - 2;
      }
      put("mlm/mlm_" + std::to_string(len) + ".jsonl", write_jsonl(examples));
      rec.summary[std::to_string(len)] = {{"chunks", chunks.chunks.size()},
                                          {"dropped_tails", chunks.dropped_tails},
                                          {"content_tokens", content},
                                          {"selected", counts.selected()}};
    }
  }

  void stage_tlm(StageRecord& rec) {
    const auto tok = tokenizer();
    std::vector<TokenizedPair> pairs;
    for (const auto& p : detail::load_pairs(out_ / "curate/pairs.tsv", cfg_.low, cfg_.high)) {
      pairs.push_back({p.pair_id, encode(p.text_a, tok), encode(p.text_b, tok)});
    }
    const auto result = tlm_pairs(pairs, tok.vocab, cfg_.tlm_max_len, cfg_.mask_rate, cfg_.seed);
    put("tlm/tlm.jsonl", write_jsonl(result.examples));
    rec.summary = {{"pairs", pairs.size()}, {"examples", result.examples.size()},
                   {"skipped_empty", result.skipped_empty}, {"truncated", result.truncated}};
  }

  void stage_train(StageRecord& rec) {
    const auto tok = tokenizer();
    const std::size_t fd = cfg_.encoder.feature_dim;
    auto features = [&](std::string_view s) { return featurize(wordpiece_tokenize(s, tok), fd); };

    std::vector<TrainingPair> data;
    std::map<std::string, std::size_t> composition;
    const auto qa = parse_qa_jsonl(read_file(cfg_.resolve(cfg_.inputs.qa_train))).records;
    std::unique_ptr<DictionaryTranslator> qtr;
    if (cfg_.translate_questions) {
      qtr = std::make_unique<DictionaryTranslator>(DictionaryTranslator::from_tsv(
          read_file(cfg_.resolve(cfg_.inputs.question_dictionary))));
    }
    for (const auto& q : qa) {
      for (const auto& ctx : q.positive_contexts) {
        data.push_back({features(q.question), features(ctx.text), q.language});
        ++composition["qa"];
        if (qtr) {
          data.push_back({features(qtr->translate(q.question)), features(ctx.text), cfg_.low});
          ++composition["qa_translated"];
        }
      }
    }
    if (!cfg_.mlm_only) {
      // Aligned sentence pairs recovered from the low-first TLM instances.
      const std::string tlm_bytes = read_file(out_ / "tlm/tlm.jsonl");
      for (std::string_view line : split_lines(tlm_bytes)) {
        if (is_blank(line)) continue;
        const auto j = nlohmann::json::parse(line);
        if (j.at("order") != "low_first") continue;
        const auto ids = restore_original(masked_example_from_json(j));
        const auto lens = j.at("span_lens").get<std::vector<std::size_t>>();
        const std::vector<TokenId> span1(ids.begin() + 1, ids.begin() + 1 + static_cast<std::ptrdiff_t>(lens[0]));
        const std::vector<TokenId> span2(ids.begin() + 2 + static_cast<std::ptrdiff_t>(lens[0]),
                                         ids.begin() + 2 + static_cast<std::ptrdiff_t>(lens[0] + lens[1]));
        data.push_back({featurize(detail::token_strings(span1, tok.vocab), fd),
                        featurize(detail::token_strings(span2, tok.vocab), fd), "tlm:" + cfg_.low});
        ++composition["tlm_pairs"];
      }
    }
    if (data.size() < 2) throw DataError("training needs at least 2 question-passage pairs");

    auto params = init_params(cfg_.encoder.embed_dim, fd, cfg_.seed);
    const auto result = train(std::move(params), data,
                              {cfg_.encoder.lr, cfg_.encoder.batch, cfg_.encoder.steps, cfg_.seed});
    put("train/params.bin", write_params(result.params));
    nlohmann::ordered_json log;
    log["loss_history"] = result.loss_history;
    log["language_mix"] = result.language_mix;
    log["composition"] = composition;
    put("train/train_log.json", log.dump(2) + "\n");
    rec.summary = {{"training_pairs", data.size()}, {"composition", composition},
                   {"initial_loss", result.loss_history.front()},
                   {"final_loss", result.loss_history.back()}};
  }

  void stage_embed(StageRecord& rec) {
    const auto tok = tokenizer();
    const auto params = read_params(read_file(out_ / "train/params.bin"));
    const auto passages = parse_passages_tsv(read_file(cfg_.resolve(cfg_.inputs.passages))).records;
    const auto qa = parse_qa_jsonl(read_file(cfg_.resolve(cfg_.inputs.qa_test))).records;
    std::vector<EncodeItem> pitems, qitems;
    for (const auto& p : passages) {
      pitems.push_back({p.pid, featurize(wordpiece_tokenize(p.text, tok), params.feature_dim)});
    }
    for (const auto& q : qa) {
      qitems.push_back({q.qid, featurize(wordpiece_tokenize(q.question, tok), params.feature_dim)});
    }
    put("embed/passages.xemb", write_xemb(export_embeddings(params, pitems, Side::kPassage, cfg_.workers)));
    put("embed/questions.xemb", write_xemb(export_embeddings(params, qitems, Side::kQuestion, cfg_.workers)));
    rec.summary = {{"passages", pitems.size()}, {"questions", qitems.size()}};
  }

  void stage_retrieve(StageRecord& rec) {
    const auto passages = parse_passages_tsv(read_file(cfg_.resolve(cfg_.inputs.passages))).records;
    const std::string index_bytes = read_file(out_ / "embed/passages.xemb");
    const Index index = build_index(read_xemb(index_bytes), passages);
    const auto queries = read_xemb(read_file(out_ / "embed/questions.xemb"));
    RetrievalRun run = batch_retrieve(index, queries, cfg_.k_values.back(), cfg_.workers);
    run.index_fingerprint = hex64(fnv1a64(index_bytes));
    run.model_fingerprint = file_fingerprint(out_ / "train/params.bin");
    put("retrieve/run.jsonl", write_run_jsonl(run));
    put("retrieve/run.meta.json", write_run_meta(run));
    rec.summary = {{"queries", run.results.size()}, {"k", run.k}, {"index_size", index.size()}};
  }

  void stage_eval(StageRecord& rec) {
    const auto qa = parse_qa_jsonl(read_file(cfg_.resolve(cfg_.inputs.qa_test))).records;
    const auto passages = parse_passages_tsv(read_file(cfg_.resolve(cfg_.inputs.passages))).records;
    const auto run = parse_run_jsonl(read_file(out_ / "retrieve/run.jsonl"),
                                     read_file(out_ / "retrieve/run.meta.json"));
    std::optional<RetrievalRun> baseline;
    if (!cfg_.inputs.baseline_run.empty()) {
      const auto bpath = cfg_.resolve(cfg_.inputs.baseline_run);
      fs::path meta = bpath;
      meta.replace_extension(".meta.json");
      baseline = parse_run_jsonl(read_file(bpath), fs::exists(meta) ? read_file(meta) : "");
    }
    EvalOptions opts;
    opts.k_values = cfg_.k_values;
    opts.matchers.clear();
    for (const auto& m : cfg_.matchers) opts.matchers.push_back(parse_matcher(m));
    opts.model = cfg_.mlm_only ? "mlm_only" : "mlm_tlm";
    const auto report = evaluate(run, qa, passages, opts, baseline ? &*baseline : nullptr);
    put("eval/report.json", render_json(report));
    put("eval/report.md", render_markdown(report));
    for (const auto& b : report.blocks) {
      for (const auto& [k, r] : b.recall) {
        rec.summary[b.language + "/" + to_string(b.matcher)]["recall@" + std::to_string(k)] = r;
      }
    }
  }

  PipelineConfig cfg_;
  fs::path out_;
  RunManifest manifest_;
  std::optional<RunManifest> previous_;
  std::map<std::string, std::pair<double, bool>> timings_;
};

inline RunManifest run_pipeline(const PipelineConfig& config, const fs::path& out_dir) {
  return Pipeline(config, out_dir).run();
}

// ---------------------------------------------------------------------------
// Run comparison

struct ComparisonRow {
  std::string language;
  std::string matcher;
  std::size_t k = 0;
  double recall_a = 0;
  double recall_b = 0;
  double rouge1_a = 0;
  double rouge1_b = 0;
  McNemarResult mcnemar;
};

struct Comparison {
  std::string qa_fingerprint;
  std::vector<ComparisonRow> rows;
};

namespace detail {

inline HitVector hits_from_json(const nlohmann::json& j) {
  HitVector h;
  h.qids = j.at("qids").get<std::vector<std::string>>();
  for (char c : j.at("hits").get<std::string>()) h.hits.push_back(c == '1');
  return h;
}

inline std::string qa_fingerprint(const RunManifest& m) {
  for (const auto& s : m.stages) {
    if (s.name != "eval") continue;
    const auto qa_path = m.config.at("inputs").at("qa_test").get<std::string>();
    for (const auto& [path, fp] : s.inputs) {
      if (fs::path(path).filename() == fs::path(qa_path).filename()) return fp;
    }
  }
  throw DataError("manifest has no evaluated QA file");
}

}  // namespace detail

/// Side-by-side metrics of two evaluated runs plus McNemar between their
/// hit vectors (a = first run, b = second run).
inline Comparison compare_runs(const fs::path& run_dir_a, const fs::path& run_dir_b) {
  const auto ma = load_manifest(run_dir_a / kManifestFile);
  const auto mb = load_manifest(run_dir_b / kManifestFile);
  Comparison cmp;
  const auto fa = detail::qa_fingerprint(ma);
  const auto fb = detail::qa_fingerprint(mb);
  if (fa != fb) {
    throw DataError("runs were evaluated on different QA files (fingerprints " + fa + " vs " + fb + ")");
  }
  cmp.qa_fingerprint = fa;
  nlohmann::json ra, rb;
  try {
    ra = nlohmann::json::parse(read_file(run_dir_a / "eval/report.json"));
    rb = nlohmann::json::parse(read_file(run_dir_b / "eval/report.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  for (const auto& ba : ra.at("blocks")) {
    for (const auto& bb : rb.at("blocks")) {
      if (ba.at("language") != bb.at("language") || ba.at("matcher") != bb.at("matcher")) continue;
      for (auto it = ba.at("recall").begin(); it != ba.at("recall").end(); ++it) {
        const std::string k = it.key();
        if (!bb.at("recall").contains(k)) continue;
        ComparisonRow row;
        row.language = ba.at("language");
        row.matcher = ba.at("matcher");
        row.k = std::stoul(k);
        row.recall_a = it->get<double>();
        row.recall_b = bb.at("recall").at(k).get<double>();
        row.rouge1_a = ba.at("rouge1").at(k).at("recall").get<double>();
        row.rouge1_b = bb.at("rouge1").at(k).at("recall").get<double>();
        row.mcnemar = mcnemar(detail::hits_from_json(ba.at("hits").at(k)),
                              detail::hits_from_json(bb.at("hits").at(k)));
        cmp.rows.push_back(row);
      }
    }
  }
  std::sort(cmp.rows.begin(), cmp.rows.end(), [](const auto& x, const auto& y) {
    return std::tie(x.language, x.matcher, x.k) < std::tie(y.language, y.matcher, y.k);
  });
  return cmp;
}

inline std::string render_comparison(const Comparison& cmp, const std::string& name_a,
                                     const std::string& name_b) {
  std::string out = "# Run comparison\n\nQA fingerprint: " + cmp.qa_fingerprint + "\n\n";
  out += "| Language | Matcher | k | Recall " + name_a + " | Recall " + name_b +
         " | Delta | ROUGE-1 " + name_a + " | ROUGE-1 " + name_b + " | b | c | p |\n";
  out += "|---|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& r : cmp.rows) {
    char p[32];
    std::snprintf(p, sizeof(p), "%.4g", r.mcnemar.p_value);
    out += "| " + r.language + " | " + r.matcher + " | " + std::to_string(r.k) + " | " +
           percent(r.recall_a) + " | " + percent(r.recall_b) + (significant(r.mcnemar) ? "*" : "") +
           " | " + percent(r.recall_b - r.recall_a) + " | " + percent(r.rouge1_a) + " | " +
           percent(r.rouge1_b) + " | " + std::to_string(r.mcnemar.b) + " | " +
           std::to_string(r.mcnemar.c) + " | " + p + " |\n";
  }
  return out;
}

}  // namespace pivotdpr
