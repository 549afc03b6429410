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

// Synthetic fixtures shared by the unit tests and the acceptance runner.

#include <string>
#include <vector>

#include "pivotdpr/encoder.hpp"
#include "pivotdpr/retrieval.hpp"

namespace pivotdpr::fixtures {

/// `n` question/passage pairs whose token sets are pairwise disjoint.
inline std::vector<TrainingPair> separable_pairs(std::size_t n, std::size_t feature_dim) {
  std::vector<TrainingPair> data;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = std::to_string(i);
    data.push_back({featurize({"q" + s + "a", "q" + s + "b", "q" + s + "c"}, feature_dim),
                    featurize({"p" + s + "a", "p" + s + "b", "p" + s + "c", "p" + s + "d"}, feature_dim),
                    "x"});
  }
  return data;
}

struct SelfRetrieval {
  double recall_at_1 = 0;
  double recall_at_10 = 0;
  std::string passage_bytes;  // exported XEMB, for determinism checks
};

/// Encodes every passage and question and checks where question i's own
/// passage lands in its ranked list.
inline SelfRetrieval self_retrieval(const DualEncoderParams& params, const std::vector<TrainingPair>& data) {
  std::vector<EncodeItem> qs, ps;
  std::vector<Passage> passages;
  for (std::size_t i = 0; i < data.size(); ++i) {
    qs.push_back({"q" + std::to_string(i), data[i].question});
    ps.push_back({"p" + std::to_string(i), data[i].passage});
    passages.push_back({"p" + std::to_string(i), "", "-", "x"});
  }
  const auto pm = export_embeddings(params, ps, Side::kPassage);
  const auto index = build_index(pm, passages);
  const auto run = batch_retrieve(index, export_embeddings(params, qs, Side::kQuestion), 10);
  SelfRetrieval out;
  out.passage_bytes = write_xemb(pm);
  std::size_t at1 = 0, at10 = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto want = "p" + std::to_string(i);
    const auto& hits = run.results[i].hits;
    if (!hits.empty() && hits[0].pid == want) ++at1;
    for (const auto& h : hits) {
      if (h.pid == want) {
        ++at10;
        break;
      }
    }
  }
  out.recall_at_1 = static_cast<double>(at1) / static_cast<double>(data.size());
  out.recall_at_10 = static_cast<double>(at10) / static_cast<double>(data.size());
  return out;
}

/// Random sparse training batch for gradient checks.
inline std::vector<TrainingPair> random_batch(Rng& rng, std::size_t b, std::size_t feature_dim) {
  std::vector<TrainingPair> batch;
  auto random_features = [&] {
    std::vector<std::string> toks;
    const auto n = 1 + rng.below(4);
    for (std::size_t k = 0; k < n; ++k) toks.push_back("t" + std::to_string(rng.below(1000)));
    return featurize(toks, feature_dim);
  };
  for (std::size_t i = 0; i < b; ++i) batch.push_back({random_features(), random_features(), "x"});
  return batch;
}

/// Max relative error between loss_grad and central differences (h = 1e-5)
/// over every coordinate of both matrices.
inline double gradient_check(const DualEncoderParams& params, const std::vector<TrainingPair>& batch,
                             double h = 1e-5) {
  const auto g = loss_grad(params, batch);
  double worst = 0;
  auto probe = [&](bool question) {
    auto p = params;
    auto& w = question ? p.w_q : p.w_p;
    const auto& gw = question ? g.w_q : g.w_p;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = inbatch_loss(p, batch);
      w[i] = orig - h;
      const double down = inbatch_loss(p, batch);
      w[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double scale = std::max({std::fabs(numeric), std::fabs(gw[i]), 1e-7});
      worst = std::max(worst, std::fabs(numeric - gw[i]) / scale);
    }
  };
  probe(true);
  probe(false);
  return worst;
}

}  // namespace pivotdpr::fixtures

namespace pivotdpr::fixtures {

/// Index with values on a small grid; tied scores are common.
inline Index random_index(Rng& rng, std::size_t n, std::uint32_t dim, int levels = 3) {
  EmbeddingMatrix m;
  m.dim = dim;
  std::vector<Passage> passages;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);  // row order differs from pid order
  for (auto i : order) {
    m.ids.push_back("p" + std::to_string(i));
    passages.push_back({m.ids.back(), "", "-", i % 3 ? "am" : "en"});
  }
  for (std::size_t k = 0; k < n * dim; ++k) {
    m.values.push_back(static_cast<float>(static_cast<int>(rng.below(2 * levels + 1)) - levels) / 2.0f);
  }
  return build_index(std::move(m), passages);
}

/// Scores every row, sorts by (score desc, pid asc) and truncates.
inline std::vector<Hit> full_sort_top_k(const Index& index, const std::vector<float>& q, std::size_t k) {
  std::vector<Hit> all;
  for (std::size_t r = 0; r < index.size(); ++r) {
    double s = 0;
    for (std::size_t d = 0; d < q.size(); ++d) s += static_cast<double>(q[d]) * index.vector(r)[d];
    all.push_back({index.pid(r), s});
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    return a.score != b.score ? a.score > b.score : a.pid < b.pid;
  });
  if (all.size() > k) all.resize(k);
  return all;
}

}  // namespace pivotdpr::fixtures
