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

#include "pivotdpr/pipeline.hpp"
#include "test_support.hpp"

using namespace pivotdpr;
using pivotdpr::testing::TempDir;
using pivotdpr::testing::data_path;

namespace {

PipelineConfig toy_config(const std::string& name = "config.json") {
  return load_config(data_path("toy/" + name));
}

std::string slurp(const fs::path& p) { return read_file(p); }

const StageRecord* find_stage(const RunManifest& m, const std::string& name) {
  for (const auto& s : m.stages) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

}  // namespace

TEST(Config, DefaultsAndValidation) {
  const auto c = config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.seed, 12345u);
  EXPECT_EQ(c.chunk_lens, (std::vector<std::size_t>{128, 512}));
  EXPECT_EQ(c.tlm_max_len, 256u);
  EXPECT_DOUBLE_EQ(c.mask_rate, 0.15);
  EXPECT_EQ(c.k_values, (std::vector<std::size_t>{10, 20}));
  EXPECT_DOUBLE_EQ(c.thresholds.at("low_en"), 0.7);
  EXPECT_FALSE(c.mlm_only);
  EXPECT_NE(c.provenance.find("2e-5"), std::string::npos);
  EXPECT_EQ(config_from_json(to_json(c)).seed, c.seed);

  EXPECT_THROW(config_from_json({{"mask_rate", 1.0}}), UsageError);
  EXPECT_THROW(config_from_json({{"k_values", {20, 10}}}), UsageError);
  EXPECT_THROW(config_from_json({{"k_values", {0, 10}}}), UsageError);
  EXPECT_THROW(config_from_json({{"encoder", {{"batch", 1}}}}), UsageError);
  EXPECT_THROW(config_from_json({{"thresholds", {{"low_en", 1.2}}}}), UsageError);
  EXPECT_THROW(config_from_json({{"seeds", {{"global", "x"}}}}), UsageError);
}

TEST(Config, DiffPaths) {
  const auto a = to_json(config_from_json(nlohmann::json::object()));
  auto b = a;
  b["ablation"]["mlm_only"] = true;
  EXPECT_EQ(config_diff(a, b), (std::vector<std::string>{"/ablation/mlm_only"}));
  EXPECT_TRUE(config_diff(a, a).empty());
}

TEST(Pipeline, DeterministicAcrossDirectories) {
  TempDir d1("run1"), d2("run2");
  const auto m1 = run_pipeline(toy_config(), d1.path());
  run_pipeline(toy_config(), d2.path());
  EXPECT_EQ(m1.status, "ok");
  ASSERT_EQ(m1.stages.size(), 8u);
  for (const char* f : {"manifest.json", "eval/report.json", "eval/report.md", "retrieve/run.jsonl",
                        "train/params.bin", "tlm/tlm.jsonl", "mlm/mlm_16.jsonl"}) {
    EXPECT_EQ(slurp(d1 / f), slurp(d2 / f)) << f;
  }
}

TEST(Pipeline, RerunHitsCacheAndInputChangeInvalidates) {
  TempDir d("cache");
  const auto first = run_pipeline(toy_config(), d.path());
  const auto manifest = slurp(d / "manifest.json");
  const auto report = slurp(d / "eval/report.md");
  const auto second = run_pipeline(toy_config(), d.path());
  for (const auto& s : first.stages) EXPECT_FALSE(s.cache_hit) << s.name;
  for (const auto& s : second.stages) EXPECT_TRUE(s.cache_hit) << s.name;
  EXPECT_EQ(slurp(d / "manifest.json"), manifest);
  EXPECT_EQ(slurp(d / "eval/report.md"), report);
  const auto timings = nlohmann::json::parse(slurp(d / "timings.json"));
  EXPECT_TRUE(timings.at("eval").at("cache_hit").get<bool>());

  // A changed k invalidates only the stages that depend on it.
  auto cfg = toy_config();
  cfg.k_values = {5, 8};
  const auto third = run_pipeline(cfg, d.path());
  EXPECT_TRUE(find_stage(third, "train")->cache_hit);
  EXPECT_FALSE(find_stage(third, "retrieve")->cache_hit);
  EXPECT_FALSE(find_stage(third, "eval")->cache_hit);

  // Tampered outputs are regenerated.
  write_file(d / "vocab/vocab.txt", "garbage\n");
  const auto fourth = run_pipeline(cfg, d.path());
  EXPECT_FALSE(find_stage(fourth, "vocab")->cache_hit);
  EXPECT_EQ(fourth.status, "ok");
}

TEST(Pipeline, ManifestIsComplete) {
  TempDir d("complete");
  const auto m = run_pipeline(toy_config(), d.path());
  std::map<std::string, std::string> listed;
  for (const auto& s : m.stages) listed.insert(s.outputs.begin(), s.outputs.end());
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(d.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = e.path().lexically_relative(d.path()).generic_string();
    if (rel == kManifestFile || rel == kTimingsFile) continue;
    ++files;
    ASSERT_TRUE(listed.count(rel)) << rel << " not in manifest";
    EXPECT_EQ(listed.at(rel), file_fingerprint(e.path())) << rel;
  }
  EXPECT_EQ(files, listed.size());
  const auto j = nlohmann::json::parse(slurp(d / kManifestFile));
  EXPECT_EQ(j.at("tool_version"), kToolVersion);
  EXPECT_TRUE(j.at("input_fingerprints").contains("qa_test.jsonl"));
  EXPECT_EQ(j.dump().find(d.path().string()), std::string::npos);
}

TEST(Pipeline, AblationChangesOnlyTrainingData) {
  TempDir full("full"), ablation("mlm");
  const auto mf = run_pipeline(toy_config(), full.path());
  const auto ma = run_pipeline(toy_config("config_mlm_only.json"), ablation.path());
  EXPECT_EQ(find_stage(ma, "tlm"), nullptr);
  EXPECT_NE(find_stage(mf, "tlm"), nullptr);
  EXPECT_FALSE(fs::exists(ablation / "tlm"));
  EXPECT_EQ(config_diff(mf.config, ma.config), (std::vector<std::string>{"/ablation/mlm_only"}));
  for (const char* s : {"curate", "vocab", "mlm", "embed", "retrieve", "eval"}) {
    EXPECT_EQ(find_stage(mf, s)->config, find_stage(ma, s)->config) << s;
  }
  EXPECT_EQ(config_diff(find_stage(mf, "train")->config, find_stage(ma, "train")->config),
            (std::vector<std::string>{"/data/tlm_pairs"}));
  EXPECT_EQ(slurp(full / "mlm/mlm_32.jsonl"), slurp(ablation / "mlm/mlm_32.jsonl"));
  const auto composition = find_stage(mf, "train")->summary.at("composition");
  EXPECT_GT(composition.at("tlm_pairs").get<int>(), 0);
  EXPECT_FALSE(find_stage(ma, "train")->summary.at("composition").contains("tlm_pairs"));
}

TEST(Pipeline, MissingQaFileAbortsWithPartialManifest) {
  TempDir d("missing");
  auto cfg = toy_config();
  cfg.inputs.qa_test = "does_not_exist.jsonl";
  try {
    run_pipeline(cfg, d.path());
    FAIL() << "expected PipelineError";
  } catch (const PipelineError& e) {
    EXPECT_EQ(e.stage(), "embed");
    EXPECT_EQ(e.exit_code(), kExitData);
    EXPECT_NE(std::string(e.what()).find("does_not_exist.jsonl"), std::string::npos);
  }
  const auto m = load_manifest(d / kManifestFile);
  EXPECT_EQ(m.status, "failed");
  EXPECT_EQ(m.failed_stage, "embed");
  EXPECT_EQ(m.stages.size(), 5u);  // curate..train completed
}

TEST(Compare, SelfFullVsAblationAndMismatch) {
  TempDir full("cmpfull"), ablation("cmpmlm"), other("cmpother");
  run_pipeline(toy_config(), full.path());
  run_pipeline(toy_config("config_mlm_only.json"), ablation.path());

  const auto self = compare_runs(full.path(), full.path());
  ASSERT_FALSE(self.rows.empty());
  for (const auto& r : self.rows) {
    EXPECT_EQ(r.recall_a, r.recall_b);
    EXPECT_EQ(r.mcnemar.p_value, 1.0);
  }

  const auto cmp = compare_runs(ablation.path(), full.path());
  const auto ra = nlohmann::json::parse(slurp(ablation / "eval/report.json"));
  const auto rb = nlohmann::json::parse(slurp(full / "eval/report.json"));
  for (const auto& row : cmp.rows) {
    for (std::size_t bi = 0; bi < ra["blocks"].size(); ++bi) {
      const auto& ba = ra["blocks"][bi];
      const auto& bb = rb["blocks"][bi];
      if (ba["language"] != row.language || ba["matcher"] != row.matcher) continue;
      const auto k = std::to_string(row.k);
      const std::string ha = ba["hits"][k]["hits"], hb = bb["hits"][k]["hits"];
      std::size_t b = 0, c = 0, hits_b = 0;
      for (std::size_t i = 0; i < ha.size(); ++i) {
        b += ha[i] == '1' && hb[i] == '0';
        c += ha[i] == '0' && hb[i] == '1';
        hits_b += hb[i] == '1';
      }
      EXPECT_EQ(row.mcnemar.b, b);
      EXPECT_EQ(row.mcnemar.c, c);
      EXPECT_DOUBLE_EQ(row.recall_b, static_cast<double>(hits_b) / static_cast<double>(hb.size()));
    }
  }
  const auto md = render_comparison(cmp, "mlm", "mlm+tlm");
  EXPECT_NE(md.find("| Recall mlm |"), std::string::npos);

  // Same pipeline on a different QA file.
  TempDir qa_copy("qa");
  for (const auto& e : fs::directory_iterator(data_path("toy"))) fs::copy(e.path(), qa_copy / e.path().filename().string());
  write_file(qa_copy / "qa_test.jsonl", read_file(qa_copy / "qa_test.jsonl") + "\n");
  run_pipeline(load_config(qa_copy / "config.json"), other.path());
  try {
    compare_runs(full.path(), other.path());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(file_fingerprint(data_path("toy/qa_test.jsonl"))), std::string::npos) << msg;
    EXPECT_NE(msg.find(file_fingerprint(qa_copy / "qa_test.jsonl")), std::string::npos) << msg;
  }
}
