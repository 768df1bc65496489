#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "frametrace/error.hpp"
#include "frametrace/model.hpp"
#include "frametrace/numkernel.hpp"

namespace frametrace {

struct ActivationDataset {
  Matrix features;  // [n x d]
  std::vector<int> labels;
  std::vector<std::string> story_ids;
  std::size_t layer = 0;
  std::string position_policy = "last_token";

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (features.rows != labels.size() || labels.size() != story_ids.size())
      throw Error(ErrorCategory::shape, "activation dataset: length mismatch");
  }
};

struct ProbeModel {
  std::vector<std::size_t> selected_dims;  // ascending, original indices
  Vector weights;                          // over selected dims
  float bias = 0.0f;
  Vector means;  // standardization stats over selected dims
  Vector stds;
  float l2 = 0.0f;
};

struct Metrics {
  float precision = 0.0f;
  float recall = 0.0f;
  float f1 = 0.0f;
  float accuracy = 0.0f;
  // confusion counts: [actual][predicted]
  std::size_t confusion[2][2] = {{0, 0}, {0, 0}};
};

struct FitParams {
  float l2 = 1e-2f;
  float learning_rate = 0.1f;
  std::size_t max_iters = 5000;
  float tol = 1e-8f;
};

// One row per story: resid_post state at (layer, final token).
inline ActivationDataset extract_activations(
    const ModelBundle& bundle, const std::vector<std::string>& story_ids,
    const std::vector<std::string>& texts, const std::vector<int>& labels,
    std::size_t layer, const std::string& position_policy = "last_token") {
  if (texts.empty())
    throw Error(ErrorCategory::insufficient_data, "no stories given");
  if (texts.size() != labels.size() || texts.size() != story_ids.size())
    throw Error(ErrorCategory::shape, "stories/labels length mismatch");
  if (layer >= bundle.config.n_layers)
    throw Error(ErrorCategory::range,
                "layer " + std::to_string(layer) + " out of range for " +
                    std::to_string(bundle.config.n_layers) + "-layer model");
  if (position_policy != "last_token")
    throw Error(ErrorCategory::config,
                "unknown position policy: " + position_policy);
  ActivationDataset ds;
  ds.layer = layer;
  ds.features = Matrix(texts.size(), bundle.config.d_model);
  ds.labels = labels;
  ds.story_ids = story_ids;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto tokens = tokenize(bundle.tokenizer, texts[i]);
    if (tokens.size() > bundle.config.max_seq)
      throw Error(ErrorCategory::capacity,
                  "story " + story_ids[i] + " exceeds max_seq");
    if (tokens.empty())
      throw Error(ErrorCategory::validation,
                  "story " + story_ids[i] + " tokenizes to nothing");
    std::size_t last = tokens.size() - 1;
    ForwardResult fr =
        forward(bundle, tokens, {{{HookKind::resid_post, layer}, last}});
    const Vector& h = fr.captured.at({{HookKind::resid_post, layer}, last});
    std::copy(h.begin(), h.end(), ds.features.row(i));
  }
  return ds;
}

// Per-class seeded shuffle; round(n_class * holdout) rows go to test.
inline std::pair<ActivationDataset, ActivationDataset> split_stratified(
    const ActivationDataset& ds, float holdout_fraction, std::uint64_t seed) {
  ds.validate();
  if (holdout_fraction < 0.0f || holdout_fraction > 1.0f)
    throw Error(ErrorCategory::range, "holdout fraction must be in [0,1]");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    int y = ds.labels[i];
    if (y != 0 && y != 1)
      throw Error(ErrorCategory::validation, "labels must be binary");
    by_class[y].push_back(i);
  }
  for (int y = 0; y < 2; ++y)
    if (by_class[y].size() < 2)
      throw Error(ErrorCategory::insufficient_data,
                  "class " + std::to_string(y) + " has fewer than 2 rows");
  std::vector<bool> is_test(ds.size(), false);
  std::mt19937_64 gen(seed);
  for (int y = 0; y < 2; ++y) {
    auto& idx = by_class[y];
    std::shuffle(idx.begin(), idx.end(), gen);
    auto n_test = static_cast<std::size_t>(std::llround(
        static_cast<double>(idx.size()) * holdout_fraction));
    for (std::size_t i = 0; i < n_test; ++i) is_test[idx[i]] = true;
  }
  auto take = [&](bool test) {
    ActivationDataset out;
    out.layer = ds.layer;
    out.position_policy = ds.position_policy;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (is_test[i] == test) rows.push_back(i);
    out.features = Matrix(rows.size(), ds.features.cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy(ds.features.row(rows[r]),
                ds.features.row(rows[r]) + ds.features.cols,
                out.features.row(r));
      out.labels.push_back(ds.labels[rows[r]]);
      out.story_ids.push_back(ds.story_ids[rows[r]]);
    }
    return out;
  };
  return {take(false), take(true)};
}

namespace detail {

inline Matrix select_columns(const Matrix& x,
                             const std::vector<std::size_t>& dims) {
  Matrix out(x.rows, dims.size());
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < dims.size(); ++j)
      out.at(i, j) = x.at(i, dims[j]);
  return out;
}

inline float sigmoid(float z) { return 1.0f / (1.0f + std::exp(-z)); }

inline float logistic_loss(const Matrix& x, const std::vector<int>& y,
                           const Vector& w, float b, float l2) {
  float loss = 0.0f;
  for (std::size_t i = 0; i < x.rows; ++i) {
    float z = dot(x.row(i), w.data(), x.cols) + b;
    // numerically stable cross entropy
    float t = static_cast<float>(y[i]);
    float m = std::max(z, 0.0f);
    loss += m - z * t + std::log(std::exp(-m) + std::exp(z - m));
  }
  loss /= static_cast<float>(x.rows);
  float reg = 0.0f;
  for (float wi : w) reg += wi * wi;
  return loss + 0.5f * l2 * reg;
}

inline void logistic_gradient(const Matrix& x, const std::vector<int>& y,
                              const Vector& w, float b, float l2, Vector& gw,
                              float& gb) {
  gw.assign(w.size(), 0.0f);
  gb = 0.0f;
  for (std::size_t i = 0; i < x.rows; ++i) {
    float z = dot(x.row(i), w.data(), x.cols) + b;
    float e = sigmoid(z) - static_cast<float>(y[i]);
    const float* xr = x.row(i);
    for (std::size_t j = 0; j < w.size(); ++j) gw[j] += e * xr[j];
    gb += e;
  }
  float inv = 1.0f / static_cast<float>(x.rows);
  for (std::size_t j = 0; j < w.size(); ++j) gw[j] = gw[j] * inv + l2 * w[j];
  gb *= inv;  // bias unregularized
}

}  // namespace detail

// Full-batch gradient descent on mean cross entropy + (l2/2)||w||^2 over
// train-standardized features of the given dims. Zero init, so the fit is
// a deterministic function of its inputs.
inline ProbeModel fit_logistic(const ActivationDataset& train,
                               const std::vector<std::size_t>& dims,
                               const FitParams& params = {}) {
  train.validate();
  bool has0 = false, has1 = false;
  for (int y : train.labels) (y == 1 ? has1 : has0) = true;
  if (!has0 || !has1)
    throw Error(ErrorCategory::degenerate,
                "fit_logistic: training data has a single class");
  if (params.l2 < 0.0f)
    throw Error(ErrorCategory::range, "fit_logistic: l2 must be >= 0");

  ProbeModel pm;
  pm.selected_dims = dims;
  pm.l2 = params.l2;
  Matrix xs = detail::select_columns(train.features, dims);
  auto std_res = standardize(xs);
  pm.means = std_res.means;
  pm.stds = std_res.stds;
  const Matrix& x = std_res.x;

  pm.weights.assign(dims.size(), 0.0f);
  pm.bias = 0.0f;
  Vector gw;
  float gb = 0.0f;
  float prev = detail::logistic_loss(x, train.labels, pm.weights, pm.bias,
                                     params.l2);
  for (std::size_t it = 0; it < params.max_iters; ++it) {
    detail::logistic_gradient(x, train.labels, pm.weights, pm.bias, params.l2,
                              gw, gb);
    for (std::size_t j = 0; j < pm.weights.size(); ++j)
      pm.weights[j] -= params.learning_rate * gw[j];
    pm.bias -= params.learning_rate * gb;
    float loss = detail::logistic_loss(x, train.labels, pm.weights, pm.bias,
                                       params.l2);
    if (prev - loss < params.tol && prev >= loss) break;
    prev = loss;
  }
  return pm;
}

inline ProbeModel fit_logistic(const ActivationDataset& train,
                               const FitParams& params = {}) {
  std::vector<std::size_t> dims(train.features.cols);
  std::iota(dims.begin(), dims.end(), 0);
  return fit_logistic(train, dims, params);
}

// Refit-and-drop: drop floor(current/2) lowest-|standardized weight| dims
// while current > 2*target_k, else drop 1; ties drop the higher index.
inline std::vector<std::size_t> rfe_select(const ActivationDataset& train,
                                           std::size_t target_k,
                                           const FitParams& params = {}) {
  std::size_t d = train.features.cols;
  if (target_k < 1 || target_k >= d)
    throw Error(ErrorCategory::range,
                "rfe_select: target_k must satisfy 1 <= k < d");
  std::vector<std::size_t> dims(d);
  std::iota(dims.begin(), dims.end(), 0);
  while (dims.size() > target_k) {
    ProbeModel pm = fit_logistic(train, dims, params);
    std::size_t drop =
        dims.size() > 2 * target_k ? dims.size() / 2 : std::size_t{1};
    drop = std::min(drop, dims.size() - target_k);
    // order candidates by |w| ascending, higher original index first on ties
    std::vector<std::size_t> order(dims.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      float wa = std::fabs(pm.weights[a]), wb = std::fabs(pm.weights[b]);
      if (wa != wb) return wa < wb;
      return dims[a] > dims[b];
    });
    std::vector<bool> dead(dims.size(), false);
    for (std::size_t i = 0; i < drop; ++i) dead[order[i]] = true;
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < dims.size(); ++i)
      if (!dead[i]) kept.push_back(dims[i]);
    dims = std::move(kept);
  }
  return dims;
}

inline int probe_predict(const ProbeModel& pm, const float* row_full) {
  float z = pm.bias;
  for (std::size_t j = 0; j < pm.selected_dims.size(); ++j) {
    float v = row_full[pm.selected_dims[j]];
    v = pm.stds[j] < 1e-12f ? 0.0f : (v - pm.means[j]) / pm.stds[j];
    z += pm.weights[j] * v;
  }
  return detail::sigmoid(z) >= 0.5f ? 1 : 0;
}

inline Metrics evaluate_probe(const ProbeModel& pm,
                              const ActivationDataset& test) {
  test.validate();
  if (test.size() == 0)
    throw Error(ErrorCategory::insufficient_data, "empty test set");
  Metrics m;
  for (std::size_t i = 0; i < test.size(); ++i) {
    int pred = probe_predict(pm, test.features.row(i));
    m.confusion[test.labels[i]][pred]++;
  }
  auto tp = static_cast<float>(m.confusion[1][1]);
  auto fp = static_cast<float>(m.confusion[0][1]);
  auto fn = static_cast<float>(m.confusion[1][0]);
  auto tn = static_cast<float>(m.confusion[0][0]);
  m.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0f;
  m.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0f;
  m.f1 = m.precision + m.recall > 0
             ? 2 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0f;
  m.accuracy = (tp + tn) / static_cast<float>(test.size());
  return m;
}

// ---- persistence ----

// JSON-lines rows plus a sidecar <path>.meta.json with layer/policy.
inline void save_activations(const ActivationDataset& ds,
                             const std::string& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw Error(ErrorCategory::io, "cannot write dataset: " + path);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    nlohmann::json j;
    j["story_id"] = ds.story_ids[i];
    j["label"] = ds.labels[i];
    j["features"] = std::vector<float>(
        ds.features.row(i), ds.features.row(i) + ds.features.cols);
    out << j.dump() << "\n";
  }
  nlohmann::json meta = {{"layer", ds.layer},
                         {"position_policy", ds.position_policy},
                         {"n", ds.size()},
                         {"d", ds.features.cols}};
  std::ofstream mout(path + ".meta.json");
  if (!mout) throw Error(ErrorCategory::io, "cannot write sidecar: " + path);
  mout << meta.dump(2) << "\n";
}

inline ActivationDataset load_activations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open dataset: " + path);
  ActivationDataset ds;
  std::vector<std::vector<float>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCategory::parse, "dataset line " +
                                            std::to_string(lineno) + ": " +
                                            e.what());
    }
    ds.story_ids.push_back(j.at("story_id").get<std::string>());
    ds.labels.push_back(j.at("label").get<int>());
    rows.push_back(j.at("features").get<std::vector<float>>());
  }
  std::size_t d = rows.empty() ? 0 : rows[0].size();
  ds.features = Matrix(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d)
      throw Error(ErrorCategory::shape, "dataset: ragged feature rows");
    std::copy(rows[i].begin(), rows[i].end(), ds.features.row(i));
  }
  std::ifstream min(path + ".meta.json");
  if (min) {
    nlohmann::json meta;
    min >> meta;
    ds.layer = meta.value("layer", std::size_t{0});
    ds.position_policy = meta.value("position_policy", "last_token");
  }
  ds.validate();
  return ds;
}

struct ProbeReportRow {
  std::string frame;
  float f1_5_train = 0.0f;
  float f1_5_test = 0.0f;
  float f1_1_train = 0.0f;
  float f1_1_test = 0.0f;
  std::size_t top_dim = 0;
};

inline std::string probe_report_csv(const std::vector<ProbeReportRow>& rows) {
  std::ostringstream out;
  out << "frame,f1_5_train,f1_5_test,f1_1_train,f1_1_test,top_dim\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.2f,%.2f,%.2f,%.2f,%zu\n",
                  r.frame.c_str(), r.f1_5_train, r.f1_5_test, r.f1_1_train,
                  r.f1_1_test, r.top_dim);
    out << buf;
  }
  return out.str();
}

}  // namespace frametrace
