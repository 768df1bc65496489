#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "frametrace/error.hpp"
#include "frametrace/numkernel.hpp"
#include "frametrace/rng.hpp"
#include "frametrace/safetensors.hpp"
#include "frametrace/tokenizer.hpp"

namespace frametrace {

enum class NormKind { rms, layer };

struct ModelConfig {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_ff = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq = 0;
  NormKind norm_kind = NormKind::rms;
  ActKind act_kind = ActKind::silu;
  float rope_theta = 10000.0f;
  float eps = 1e-5f;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || n_kv_heads < 1 ||
        d_ff < 1 || vocab_size < 1 || max_seq < 1)
      throw Error(ErrorCategory::config, "config: all counts must be >= 1");
    if (d_model % n_heads != 0)
      throw Error(ErrorCategory::config,
                  "config: d_model not divisible by n_heads");
    if (n_heads % n_kv_heads != 0)
      throw Error(ErrorCategory::config,
                  "config: n_heads not divisible by n_kv_heads");
  }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"n_layers", c.n_layers},
      {"d_model", c.d_model},
      {"n_heads", c.n_heads},
      {"n_kv_heads", c.n_kv_heads},
      {"d_ff", c.d_ff},
      {"vocab_size", c.vocab_size},
      {"max_seq", c.max_seq},
      {"norm_kind", c.norm_kind == NormKind::rms ? "rms" : "layer"},
      {"act_kind", c.act_kind == ActKind::silu ? "silu" : "gelu_tanh"},
      {"rope_theta", c.rope_theta},
      {"eps", c.eps},
  };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  std::string nk = j.at("norm_kind").get<std::string>();
  if (nk == "rms")
    c.norm_kind = NormKind::rms;
  else if (nk == "layer")
    c.norm_kind = NormKind::layer;
  else
    throw Error(ErrorCategory::config, "config: unknown norm_kind " + nk);
  c.act_kind = act_kind_from_string(j.at("act_kind").get<std::string>());
  c.rope_theta = j.at("rope_theta").get<float>();
  c.eps = j.at("eps").get<float>();
  c.validate();
  return c;
}

// Immutable after load; shareable across threads.
struct ModelBundle {
  ModelConfig config;
  std::map<std::string, Matrix> weights;
  TokenizerSpec tokenizer;

  const Matrix& tensor(const std::string& name) const {
    auto it = weights.find(name);
    if (it == weights.end())
      throw Error(ErrorCategory::not_found, "missing tensor: " + name);
    return it->second;
  }
};

enum class HookKind { embedding, resid_post, attn_out, mlp_out };

inline const char* hook_kind_name(HookKind k) {
  switch (k) {
    case HookKind::embedding: return "embedding";
    case HookKind::resid_post: return "resid_post";
    case HookKind::attn_out: return "attn_out";
    case HookKind::mlp_out: return "mlp_out";
  }
  return "?";
}

inline HookKind hook_kind_from_string(const std::string& s) {
  if (s == "embedding") return HookKind::embedding;
  if (s == "resid_post") return HookKind::resid_post;
  if (s == "attn_out") return HookKind::attn_out;
  if (s == "mlp_out") return HookKind::mlp_out;
  throw Error(ErrorCategory::config, "unknown hook kind: " + s);
}

struct HookPoint {
  HookKind kind = HookKind::resid_post;
  std::size_t layer = 0;  // ignored for embedding

  friend bool operator<(const HookPoint& a, const HookPoint& b) {
    if (a.kind != b.kind) return a.kind < b.kind;
    return a.layer < b.layer;
  }
  friend bool operator==(const HookPoint& a, const HookPoint& b) {
    return a.kind == b.kind && a.layer == b.layer;
  }
};

struct SetAction {
  Vector value;
};
struct AddGaussianAction {
  float sigma = 0.0f;
  std::uint64_t sample_seed = 0;
};

struct Intervention {
  HookPoint hook;
  std::size_t position = 0;
  std::variant<SetAction, AddGaussianAction> action;
};

struct ForwardResult {
  Matrix logits;  // [n_tokens x vocab]
  std::map<std::pair<HookPoint, std::size_t>, Vector> captured;
};

namespace detail {

// rotate_half rotary encoding, pairs (i, i + hd/2), theta^(-2i/hd).
inline void rope_in_place(float* v, float pos, float theta, std::size_t hd) {
  std::size_t half = hd / 2;
  for (std::size_t i = 0; i < half; ++i) {
    float f = std::pow(theta, -2.0f * static_cast<float>(i) /
                                  static_cast<float>(hd));
    float ang = pos * f;
    float c = std::cos(ang), s = std::sin(ang);
    float a = v[i], b = v[i + half];
    v[i] = a * c - b * s;
    v[i + half] = a * s + b * c;
  }
}

inline void norm_row(const ModelConfig& cfg, const float* x, const float* gain,
                     float* out) {
  std::size_t d = cfg.d_model;
  if (cfg.norm_kind == NormKind::rms) {
    float ms = 0.0f;
    for (std::size_t i = 0; i < d; ++i) ms += x[i] * x[i];
    ms /= static_cast<float>(d);
    float inv = 1.0f / std::sqrt(ms + cfg.eps);
    for (std::size_t i = 0; i < d; ++i) out[i] = gain[i] * x[i] * inv;
  } else {
    float mean = 0.0f;
    for (std::size_t i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (std::size_t i = 0; i < d; ++i) {
      float dx = x[i] - mean;
      var += dx * dx;
    }
    var /= static_cast<float>(d);
    float inv = 1.0f / std::sqrt(var + cfg.eps);
    for (std::size_t i = 0; i < d; ++i) out[i] = gain[i] * (x[i] - mean) * inv;
  }
}

}  // namespace detail

// Pre-norm decoder stack: embed -> per layer [x += attn(norm(x));
// x += mlp(norm(x))] -> final norm -> unembed. Interventions apply at their
// hook point in declared order, before capture at the same point. Pure
// function of (bundle, tokens, interventions); bitwise repeatable.
inline ForwardResult forward(
    const ModelBundle& bundle, const std::vector<int>& tokens,
    const std::vector<std::pair<HookPoint, std::size_t>>& capture = {},
    const std::vector<Intervention>& interventions = {}) {
  const ModelConfig& cfg = bundle.config;
  std::size_t n = tokens.size();
  std::size_t d = cfg.d_model;
  std::size_t hd = cfg.head_dim();
  std::size_t nh = cfg.n_heads;
  std::size_t nkv = cfg.n_kv_heads;
  if (n == 0) throw Error(ErrorCategory::range, "forward: empty token list");
  if (n > cfg.max_seq)
    throw Error(ErrorCategory::capacity,
                "forward: sequence length " + std::to_string(n) +
                    " exceeds max_seq " + std::to_string(cfg.max_seq));
  for (const auto& iv : interventions) {
    if (iv.position >= n)
      throw Error(ErrorCategory::range, "intervention position out of range");
    if (iv.hook.kind != HookKind::embedding && iv.hook.layer >= cfg.n_layers)
      throw Error(ErrorCategory::range, "intervention layer out of range");
  }
  for (const auto& [hp, pos] : capture) {
    if (pos >= n)
      throw Error(ErrorCategory::range, "capture position out of range");
    if (hp.kind != HookKind::embedding && hp.layer >= cfg.n_layers)
      throw Error(ErrorCategory::range, "capture layer out of range");
  }

  ForwardResult res;
  const Matrix& embed = bundle.tensor("embed.weight");

  Matrix x(n, d);
  for (std::size_t t = 0; t < n; ++t) {
    int id = tokens[t];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
      throw Error(ErrorCategory::range,
                  "forward: token id out of vocab: " + std::to_string(id));
    std::copy(embed.row(id), embed.row(id) + d, x.row(t));
  }

  auto apply_hooks = [&](HookKind kind, std::size_t layer, Matrix& arr) {
    for (const auto& iv : interventions) {
      if (iv.hook.kind != kind) continue;
      if (kind != HookKind::embedding && iv.hook.layer != layer) continue;
      float* row = arr.row(iv.position);
      if (std::holds_alternative<SetAction>(iv.action)) {
        const auto& sa = std::get<SetAction>(iv.action);
        if (sa.value.size() != d)
          throw Error(ErrorCategory::shape,
                      "intervention set vector length != d_model");
        std::copy(sa.value.begin(), sa.value.end(), row);
      } else {
        const auto& ga = std::get<AddGaussianAction>(iv.action);
        if (ga.sigma < 0.0f)
          throw Error(ErrorCategory::range, "add_gaussian: sigma < 0");
        if (ga.sigma > 0.0f) {
          // noise stream depends on (sample_seed, position) only, so results
          // are independent of evaluation order
          GaussianRng g(mix_seed(ga.sample_seed, iv.position));
          for (std::size_t i = 0; i < d; ++i)
            row[i] += static_cast<float>(g.next()) * ga.sigma;
        }
      }
    }
    for (const auto& [hp, pos] : capture) {
      if (hp.kind != kind) continue;
      if (kind != HookKind::embedding && hp.layer != layer) continue;
      res.captured[{hp, pos}] =
          Vector(arr.row(pos), arr.row(pos) + d);
    }
  };

  apply_hooks(HookKind::embedding, 0, x);

  Vector xn(d), q(nh * hd), k(nkv * hd), v(nkv * hd);
  Matrix qs(n, nh * hd), ks(n, nkv * hd), vs(n, nkv * hd);
  Matrix attn_cat(n, nh * hd);
  Vector scores, weights;

  for (std::size_t L = 0; L < cfg.n_layers; ++L) {
    std::string p = "layers." + std::to_string(L) + ".";
    const Matrix& attn_norm = bundle.tensor(p + "attn_norm.weight");
    const Matrix& wq = bundle.tensor(p + "attn.wq.weight");
    const Matrix& wk = bundle.tensor(p + "attn.wk.weight");
    const Matrix& wv = bundle.tensor(p + "attn.wv.weight");
    const Matrix& wo = bundle.tensor(p + "attn.wo.weight");

    for (std::size_t t = 0; t < n; ++t) {
      detail::norm_row(cfg, x.row(t), attn_norm.row(0), xn.data());
      matvec(wq, xn.data(), qs.row(t));
      matvec(wk, xn.data(), ks.row(t));
      matvec(wv, xn.data(), vs.row(t));
      for (std::size_t h = 0; h < nh; ++h)
        detail::rope_in_place(qs.row(t) + h * hd, static_cast<float>(t), cfg.rope_theta, hd);
      for (std::size_t h = 0; h < nkv; ++h)
        detail::rope_in_place(ks.row(t) + h * hd, static_cast<float>(t), cfg.rope_theta, hd);
    }

    float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t h = 0; h < nh; ++h) {
        std::size_t kvh = h / (nh / nkv);
        const float* qrow = qs.row(t) + h * hd;
        scores.assign(t + 1, 0.0f);
        for (std::size_t j = 0; j <= t; ++j)
          scores[j] = dot(qrow, ks.row(j) + kvh * hd, hd) * inv_sqrt_hd;
        weights = softmax(scores);
        float* out = attn_cat.row(t) + h * hd;
        std::fill(out, out + hd, 0.0f);
        for (std::size_t j = 0; j <= t; ++j) {
          const float* vrow = vs.row(j) + kvh * hd;
          for (std::size_t i = 0; i < hd; ++i) out[i] += weights[j] * vrow[i];
        }
      }
    }

    Matrix ao(n, d);
    for (std::size_t t = 0; t < n; ++t)
      matvec(wo, attn_cat.row(t), ao.row(t));
    apply_hooks(HookKind::attn_out, L, ao);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < d; ++i) x.at(t, i) += ao.at(t, i);

    const Matrix& mlp_norm = bundle.tensor(p + "mlp_norm.weight");
    const Matrix& gate = bundle.tensor(p + "mlp.gate.weight");
    const Matrix& up = bundle.tensor(p + "mlp.up.weight");
    const Matrix& down = bundle.tensor(p + "mlp.down.weight");
    Matrix mo(n, d);
    Vector gbuf(cfg.d_ff), ubuf(cfg.d_ff);
    for (std::size_t t = 0; t < n; ++t) {
      detail::norm_row(cfg, x.row(t), mlp_norm.row(0), xn.data());
      matvec(gate, xn.data(), gbuf.data());
      matvec(up, xn.data(), ubuf.data());
      for (std::size_t i = 0; i < cfg.d_ff; ++i) {
        float g = cfg.act_kind == ActKind::silu ? silu(gbuf[i])
                                                : gelu_tanh(gbuf[i]);
        gbuf[i] = g * ubuf[i];
      }
      matvec(down, gbuf.data(), mo.row(t));
    }
    apply_hooks(HookKind::mlp_out, L, mo);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < d; ++i) x.at(t, i) += mo.at(t, i);

    apply_hooks(HookKind::resid_post, L, x);
  }

  const Matrix& final_norm = bundle.tensor("final_norm.weight");
  const Matrix& unembed = bundle.tensor("unembed.weight");
  res.logits = Matrix(n, cfg.vocab_size);
  for (std::size_t t = 0; t < n; ++t) {
    detail::norm_row(cfg, x.row(t), final_norm.row(0), xn.data());
    matvec(unembed, xn.data(), res.logits.row(t));
  }
  return res;
}

struct GenerateResult {
  std::string text;           // detokenized completion
  std::vector<int> tokens;    // full sequence including prompt
  std::size_t n_prompt = 0;
};

// No KV cache: each step recomputes the full prefix. T=0 is argmax with
// lowest-id tie break; T>0 samples from softmax(logits/T) with a seeded
// generator. Stops at eos (when configured) or max_new.
inline GenerateResult generate(const ModelBundle& bundle,
                               const std::string& prompt_text,
                               std::size_t max_new, float temperature,
                               std::uint64_t seed) {
  if (max_new < 1)
    throw Error(ErrorCategory::range, "generate: max_new must be >= 1");
  GenerateResult r;
  r.tokens = tokenize(bundle.tokenizer, prompt_text);
  r.n_prompt = r.tokens.size();
  if (r.n_prompt > bundle.config.max_seq)
    throw Error(ErrorCategory::capacity, "generate: prompt exceeds max_seq");
  std::mt19937_64 gen(seed);
  for (std::size_t step = 0; step < max_new; ++step) {
    if (r.tokens.size() >= bundle.config.max_seq) break;
    ForwardResult fr = forward(bundle, r.tokens);
    const float* logits = fr.logits.row(r.tokens.size() - 1);
    std::size_t vocab = bundle.config.vocab_size;
    int next = 0;
    if (temperature == 0.0f) {
      float best = logits[0];
      for (std::size_t i = 1; i < vocab; ++i)
        if (logits[i] > best) {  // strict: ties keep the lowest id
          best = logits[i];
          next = static_cast<int>(i);
        }
    } else {
      Vector probs = softmax(Vector(logits, logits + vocab), temperature);
      double u = static_cast<double>(gen() >> 11) / 9007199254740992.0;
      double acc = 0.0;
      next = static_cast<int>(vocab) - 1;
      for (std::size_t i = 0; i < vocab; ++i) {
        acc += probs[i];
        if (u < acc) {
          next = static_cast<int>(i);
          break;
        }
      }
    }
    r.tokens.push_back(next);
    if (bundle.tokenizer.eos && next == *bundle.tokenizer.eos) break;
  }
  r.text = detokenize(
      bundle.tokenizer,
      std::vector<int>(r.tokens.begin() + static_cast<std::ptrdiff_t>(r.n_prompt),
                       r.tokens.end()));
  return r;
}

namespace detail {

// Internal tensor names implied by a config.
inline std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>>
required_tensors(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> v;
  std::size_t hd = c.head_dim();
  v.push_back({"embed.weight", {c.vocab_size, c.d_model}});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    std::string p = "layers." + std::to_string(i) + ".";
    v.push_back({p + "attn_norm.weight", {1, c.d_model}});
    v.push_back({p + "attn.wq.weight", {c.n_heads * hd, c.d_model}});
    v.push_back({p + "attn.wk.weight", {c.n_kv_heads * hd, c.d_model}});
    v.push_back({p + "attn.wv.weight", {c.n_kv_heads * hd, c.d_model}});
    v.push_back({p + "attn.wo.weight", {c.d_model, c.n_heads * hd}});
    v.push_back({p + "mlp_norm.weight", {1, c.d_model}});
    v.push_back({p + "mlp.gate.weight", {c.d_ff, c.d_model}});
    v.push_back({p + "mlp.up.weight", {c.d_ff, c.d_model}});
    v.push_back({p + "mlp.down.weight", {c.d_model, c.d_ff}});
  }
  v.push_back({"final_norm.weight", {1, c.d_model}});
  v.push_back({"unembed.weight", {c.vocab_size, c.d_model}});
  return v;
}

}  // namespace detail

inline void validate_weights(const ModelConfig& cfg,
                             const std::map<std::string, Matrix>& weights) {
  for (const auto& [name, shape] : detail::required_tensors(cfg)) {
    auto it = weights.find(name);
    if (it == weights.end())
      throw Error(ErrorCategory::not_found, "missing tensor: " + name);
    const Matrix& m = it->second;
    // 1-D tensors come back from safetensors as 1 x n
    if (m.rows != shape.first || m.cols != shape.second)
      throw Error(ErrorCategory::shape,
                  "tensor " + name + ": expected " +
                      std::to_string(shape.first) + "x" +
                      std::to_string(shape.second) + ", got " +
                      std::to_string(m.rows) + "x" + std::to_string(m.cols));
  }
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::parse, "config json: " + std::string(e.what()));
  }
  return config_from_json(j);
}

inline ModelBundle load_bundle(const std::string& config_path,
                               const std::string& weights_path,
                               const std::string& tokenizer_path) {
  ModelBundle b;
  b.config = load_config(config_path);
  auto raw = load_safetensors(weights_path);
  for (auto& [name, m] : raw) {
    std::string internal = name;
    // public Llama naming -> internal scheme
    if (name.rfind("model.", 0) == 0 || name == "lm_head.weight") {
      internal = name;
      auto sub = [&](const std::string& from, const std::string& to) {
        auto pos = internal.find(from);
        if (pos != std::string::npos)
          internal = internal.substr(0, pos) + to +
                     internal.substr(pos + from.size());
      };
      sub("model.embed_tokens.weight", "embed.weight");
      sub("model.norm.weight", "final_norm.weight");
      sub("lm_head.weight", "unembed.weight");
      sub("model.layers.", "layers.");
      sub(".input_layernorm.weight", ".attn_norm.weight");
      sub(".post_attention_layernorm.weight", ".mlp_norm.weight");
      sub(".self_attn.q_proj.weight", ".attn.wq.weight");
      sub(".self_attn.k_proj.weight", ".attn.wk.weight");
      sub(".self_attn.v_proj.weight", ".attn.wv.weight");
      sub(".self_attn.o_proj.weight", ".attn.wo.weight");
      sub(".mlp.gate_proj.weight", ".mlp.gate.weight");
      sub(".mlp.up_proj.weight", ".mlp.up.weight");
      sub(".mlp.down_proj.weight", ".mlp.down.weight");
    }
    b.weights.emplace(internal, std::move(m));
  }
  validate_weights(b.config, b.weights);
  b.tokenizer = load_tokenizer(tokenizer_path);
  return b;
}

inline void save_bundle(const ModelBundle& b, const std::string& dir) {
  {
    std::ofstream out(dir + "/config.json");
    if (!out) throw Error(ErrorCategory::io, "cannot write config in " + dir);
    out << config_to_json(b.config).dump(2) << "\n";
  }
  save_safetensors(b.weights, dir + "/model.safetensors");
  save_tokenizer(b.tokenizer, dir + "/tokenizer.json");
}

inline ModelBundle load_bundle_dir(const std::string& dir) {
  return load_bundle(dir + "/config.json", dir + "/model.safetensors",
                     dir + "/tokenizer.json");
}

}  // namespace frametrace
