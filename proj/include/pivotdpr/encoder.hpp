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

// Linear dual encoder over hashed bag-of-subword features, trained with the
// in-batch-negatives softmax loss. Scores are raw inner products. Parameters
// and loss arithmetic are 64-bit; exported embeddings are 32-bit.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <map>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pivotdpr/common.hpp"

namespace pivotdpr {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with native little-endian layout");

struct SparseVector {
  std::size_t dim = 0;
  std::vector<std::pair<std::uint32_t, double>> entries;  // sorted by index, unique

  double norm() const {
    double s = 0;
    for (const auto& [i, v] : entries) s += v * v;
    return std::sqrt(s);
  }
};

inline std::uint32_t feature_bucket(std::string_view token, std::size_t feature_dim) {
  return static_cast<std::uint32_t>(fnv1a64(token) % feature_dim);
}

/// Hashed bag of subwords, L2-normalized when non-empty.
inline SparseVector featurize(const std::vector<std::string>& tokens, std::size_t feature_dim) {
  if (feature_dim == 0) throw UsageError("feature_dim must be at least 1");
  std::map<std::uint32_t, double> counts;
  for (const auto& t : tokens) counts[feature_bucket(t, feature_dim)] += 1.0;
  SparseVector v;
  v.dim = feature_dim;
  v.entries.assign(counts.begin(), counts.end());
  const double n = v.norm();
  if (n > 0) {
    for (auto& e : v.entries) e.second /= n;
  }
  return v;
}

/// W_q and W_p, each embed_dim x feature_dim, column-major.
struct DualEncoderParams {
  std::size_t embed_dim = 0;
  std::size_t feature_dim = 0;
  std::vector<double> w_q;
  std::vector<double> w_p;

  DualEncoderParams() = default;
  DualEncoderParams(std::size_t embed, std::size_t features)
      : embed_dim(embed), feature_dim(features), w_q(embed * features, 0.0),
        w_p(embed * features, 0.0) {
    if (embed == 0 || features == 0) throw UsageError("encoder dimensions must be positive");
  }

  double& q(std::size_t row, std::size_t col) { return w_q[col * embed_dim + row]; }
  double& p(std::size_t row, std::size_t col) { return w_p[col * embed_dim + row]; }
  double q(std::size_t row, std::size_t col) const { return w_q[col * embed_dim + row]; }
  double p(std::size_t row, std::size_t col) const { return w_p[col * embed_dim + row]; }

  friend bool operator==(const DualEncoderParams&, const DualEncoderParams&) = default;
};

/// Uniform in [-scale, scale] from the run seed.
inline DualEncoderParams init_params(std::size_t embed_dim, std::size_t feature_dim,
                                     std::uint64_t seed, double scale = 0.01) {
  DualEncoderParams params(embed_dim, feature_dim);
  Rng rng(seed);
  for (auto& w : params.w_q) w = rng.uniform(-scale, scale);
  for (auto& w : params.w_p) w = rng.uniform(-scale, scale);
  return params;
}

enum class Side { kQuestion, kPassage };

namespace detail {

inline std::vector<double> matvec(const std::vector<double>& w, std::size_t embed_dim,
                                  std::size_t feature_dim, const SparseVector& x) {
  if (x.dim != feature_dim) {
    throw UsageError("feature vector has dim " + std::to_string(x.dim) + ", encoder expects " +
                     std::to_string(feature_dim));
  }
  std::vector<double> out(embed_dim, 0.0);
  for (const auto& [col, v] : x.entries) {
    if (col >= feature_dim) throw UsageError("feature index out of range");
    const double* c = w.data() + static_cast<std::size_t>(col) * embed_dim;
    for (std::size_t r = 0; r < embed_dim; ++r) out[r] += v * c[r];
  }
  return out;
}

}  // namespace detail

inline std::vector<double> encode_q(const DualEncoderParams& params, const SparseVector& x) {
  return detail::matvec(params.w_q, params.embed_dim, params.feature_dim, x);
}

inline std::vector<double> encode_p(const DualEncoderParams& params, const SparseVector& x) {
  return detail::matvec(params.w_p, params.embed_dim, params.feature_dim, x);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct TrainingPair {
  SparseVector question;
  SparseVector passage;
  std::string language;  // language of the question side
};

// ---------------------------------------------------------------------------
// Loss and gradient

/// Loss plus its gradient with respect to each encoded question and passage.
/// The parameter gradient is sum_i d_question[i] x_i^T (and likewise for
/// passages), which the trainer applies column-sparsely.
struct BatchGradient {
  double loss = 0;
  std::vector<std::vector<double>> d_question;
  std::vector<std::vector<double>> d_passage;
};

inline BatchGradient batch_loss_and_grad(const DualEncoderParams& params,
                                         const std::vector<TrainingPair>& batch) {
  const std::size_t b = batch.size();
  if (b < 2) throw UsageError("in-batch loss needs a batch of at least 2 pairs");
  std::vector<std::vector<double>> qs(b), ps(b);
  for (std::size_t i = 0; i < b; ++i) {
    qs[i] = encode_q(params, batch[i].question);
    ps[i] = encode_p(params, batch[i].passage);
  }

  BatchGradient g;
  g.d_question.assign(b, std::vector<double>(params.embed_dim, 0.0));
  g.d_passage.assign(b, std::vector<double>(params.embed_dim, 0.0));
  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<double> row(b);
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < b; ++j) {
      row[j] = dot(qs[i], ps[j]);
      if (!std::isfinite(row[j])) throw NumericError("non-finite similarity score");
      mx = std::max(mx, row[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < b; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    g.loss += (log_z - row[i]) * inv_b;
    // dL/ds_ij = (softmax_ij - [i == j]) / B
    for (std::size_t j = 0; j < b; ++j) {
      const double coeff = (std::exp(row[j] - log_z) - (i == j ? 1.0 : 0.0)) * inv_b;
      if (coeff == 0.0) continue;
      for (std::size_t r = 0; r < params.embed_dim; ++r) {
        g.d_question[i][r] += coeff * ps[j][r];
        g.d_passage[j][r] += coeff * qs[i][r];
      }
    }
  }
  if (!std::isfinite(g.loss)) throw NumericError("non-finite loss");
  return g;
}

/// Mean over i of -log softmax(s_i1..s_iB)[i], s_ij = q_i . p_j.
inline double inbatch_loss(const DualEncoderParams& params, const std::vector<TrainingPair>& batch) {
  const std::size_t b = batch.size();
  if (b < 2) throw UsageError("in-batch loss needs a batch of at least 2 pairs");
  std::vector<std::vector<double>> qs(b), ps(b);
  for (std::size_t i = 0; i < b; ++i) {
    qs[i] = encode_q(params, batch[i].question);
    ps[i] = encode_p(params, batch[i].passage);
  }
  double loss = 0;
  std::vector<double> row(b);
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < b; ++j) {
      row[j] = dot(qs[i], ps[j]);
      if (!std::isfinite(row[j])) throw NumericError("non-finite similarity score");
      mx = std::max(mx, row[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < b; ++j) z += std::exp(row[j] - mx);
    loss += mx + std::log(z) - row[i];
  }
  loss /= static_cast<double>(b);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");
  return loss;
}

/// Dense gradient, same layout as the parameters.
struct ParamGradient {
  std::vector<double> w_q;
  std::vector<double> w_p;

  double norm() const {
    double s = 0;
    for (double v : w_q) s += v * v;
    for (double v : w_p) s += v * v;
    return std::sqrt(s);
  }
};

inline ParamGradient loss_grad(const DualEncoderParams& params,
                               const std::vector<TrainingPair>& batch) {
  const auto g = batch_loss_and_grad(params, batch);
  ParamGradient out{std::vector<double>(params.w_q.size(), 0.0),
                    std::vector<double>(params.w_p.size(), 0.0)};
  const std::size_t e = params.embed_dim;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (const auto& [col, v] : batch[i].question.entries) {
      for (std::size_t r = 0; r < e; ++r) out.w_q[col * e + r] += g.d_question[i][r] * v;
    }
    for (const auto& [col, v] : batch[i].passage.entries) {
      for (std::size_t r = 0; r < e; ++r) out.w_p[col * e + r] += g.d_passage[i][r] * v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 0.5;
  std::size_t batch_size = 8;
  std::size_t steps = 2000;
  std::uint64_t seed = 12345;
};

struct TrainResult {
  DualEncoderParams params;
  std::vector<double> loss_history;  // batch loss before each update
  // Per-language question counts summed over all batches.
  std::map<std::string, std::size_t> language_mix;
};

/// Plain gradient descent over seeded, reshuffled in-batch batches. Examples
/// of all languages are mixed uniformly; a trailing batch smaller than 2 is
/// discarded at each epoch boundary.
inline TrainResult train(DualEncoderParams params, const std::vector<TrainingPair>& data,
                         const TrainConfig& cfg) {
  if (!(cfg.lr > 0)) throw UsageError("learning rate must be positive");
  if (cfg.batch_size < 2) throw UsageError("batch size must be at least 2");
  TrainResult result;
  if (cfg.steps == 0) {
    result.params = std::move(params);
    return result;
  }
  if (data.size() < 2) throw UsageError("training needs at least 2 pairs");
  const std::size_t batch_size = std::min(cfg.batch_size, data.size());
  const std::size_t e = params.embed_dim;

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  std::vector<TrainingPair> batch;
  batch.reserve(batch_size);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (order.size() - cursor < 2) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      cursor = 0;
    }
    const std::size_t take = std::min(batch_size, order.size() - cursor);
    batch.clear();
    for (std::size_t k = 0; k < take; ++k) {
      const auto& item = data[order[cursor + k]];
      batch.push_back(item);
      ++result.language_mix[item.language];
    }
    cursor += take;

    BatchGradient g;
    try {
      g = batch_loss_and_grad(params, batch);
    } catch (const NumericError& err) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + err.what());
    }
    result.loss_history.push_back(g.loss);

    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (const auto& [col, v] : batch[i].question.entries) {
        double* c = params.w_q.data() + static_cast<std::size_t>(col) * e;
        for (std::size_t r = 0; r < e; ++r) c[r] -= cfg.lr * g.d_question[i][r] * v;
      }
      for (const auto& [col, v] : batch[i].passage.entries) {
        double* c = params.w_p.data() + static_cast<std::size_t>(col) * e;
        for (std::size_t r = 0; r < e; ++r) c[r] -= cfg.lr * g.d_passage[i][r] * v;
      }
    }
  }
  result.params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Parameter file: "XDEP", u32 version, u32 embed_dim, u32 feature_dim,
// then W_q and W_p as column-major 64-bit little-endian reals.

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(what_ + ": truncated file");
  }
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kParamsVersion = 1;

inline std::string write_params(const DualEncoderParams& params) {
  std::string out = "XDEP";
  detail::put<std::uint32_t>(out, kParamsVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.embed_dim));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.feature_dim));
  out.reserve(out.size() + 16 * params.w_q.size());
  for (double v : params.w_q) detail::put(out, v);
  for (double v : params.w_p) detail::put(out, v);
  return out;
}

inline DualEncoderParams read_params(std::string_view bytes) {
  detail::ByteReader in(bytes, "encoder params");
  if (in.take(4) != "XDEP") throw DataError("encoder params: bad magic");
  if (in.get<std::uint32_t>() != kParamsVersion) throw DataError("encoder params: unsupported version");
  const auto e = in.get<std::uint32_t>();
  const auto f = in.get<std::uint32_t>();
  DualEncoderParams params(e, f);
  if (in.remaining() != 2 * params.w_q.size() * sizeof(double)) {
    throw DataError("encoder params: payload size does not match dimensions");
  }
  for (auto& v : params.w_q) v = in.get<double>();
  for (auto& v : params.w_p) v = in.get<double>();
  for (double v : params.w_q) if (!std::isfinite(v)) throw DataError("encoder params: non-finite weight");
  for (double v : params.w_p) if (!std::isfinite(v)) throw DataError("encoder params: non-finite weight");
  return params;
}

// ---------------------------------------------------------------------------
// Embedding matrix and the XEMB file:
//   "XEMB" | u32 version | u32 dim | u64 count | count x (u32 len, bytes) |
//   count*dim f32, row-major, little-endian

struct EmbeddingMatrix {
  std::vector<std::string> ids;
  std::uint32_t dim = 0;
  std::vector<float> values;  // row-major

  std::size_t rows() const { return ids.size(); }
  const float* row(std::size_t i) const { return values.data() + i * dim; }

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

inline constexpr std::uint32_t kEmbeddingVersion = 1;

inline std::string write_xemb(const EmbeddingMatrix& m) {
  if (m.values.size() != m.ids.size() * m.dim) throw DataError("embedding matrix shape mismatch");
  std::string out = "XEMB";
  detail::put<std::uint32_t>(out, kEmbeddingVersion);
  detail::put<std::uint32_t>(out, m.dim);
  detail::put<std::uint64_t>(out, m.ids.size());
  for (const auto& id : m.ids) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
    out += id;
  }
  for (float v : m.values) detail::put(out, v);
  return out;
}

inline EmbeddingMatrix read_xemb(std::string_view bytes) {
  detail::ByteReader in(bytes, "embedding file");
  if (in.take(4) != "XEMB") throw DataError("embedding file: bad magic");
  if (in.get<std::uint32_t>() != kEmbeddingVersion) throw DataError("embedding file: unsupported version");
  EmbeddingMatrix m;
  m.dim = in.get<std::uint32_t>();
  const auto count = in.get<std::uint64_t>();
  std::unordered_set<std::string> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint32_t>();
    std::string id(in.take(len));
    if (!seen.insert(id).second) throw DataError("embedding file: duplicate id '" + id + "'");
    m.ids.push_back(std::move(id));
  }
  if (in.remaining() != count * m.dim * sizeof(float)) {
    throw DataError("embedding file: payload size does not match count and dim");
  }
  m.values.resize(count * m.dim);
  for (auto& v : m.values) {
    v = in.get<float>();
    if (!std::isfinite(v)) throw DataError("embedding file: non-finite value");
  }
  return m;
}

struct EncodeItem {
  std::string id;
  SparseVector features;
};

/// Encodes every item with the chosen tower; row order follows input order.
inline EmbeddingMatrix export_embeddings(const DualEncoderParams& params,
                                         const std::vector<EncodeItem>& items, Side side,
                                         unsigned workers = 1) {
  EmbeddingMatrix m;
  m.dim = static_cast<std::uint32_t>(params.embed_dim);
  std::unordered_set<std::string> seen;
  for (const auto& it : items) {
    if (!seen.insert(it.id).second) throw DataError("duplicate id in export: '" + it.id + "'");
    m.ids.push_back(it.id);
  }
  m.values.assign(items.size() * m.dim, 0.0f);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto v = side == Side::kQuestion ? encode_q(params, items[i].features)
                                             : encode_p(params, items[i].features);
      for (std::size_t r = 0; r < m.dim; ++r) {
        const auto f = static_cast<float>(v[r]);
        if (!std::isfinite(f)) throw NumericError("non-finite embedding for id '" + items[i].id + "'");
        m.values[i * m.dim + r] = f;
      }
    }
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(1, items.size()))));
  if (workers == 1) {
    work(0, items.size());
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t per = (items.size() + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t b = std::min(items.size(), w * per);
      const std::size_t e = std::min(items.size(), b + per);
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
  return m;
}

}  // namespace pivotdpr
