#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "frametrace/error.hpp"
#include "frametrace/model.hpp"
#include "frametrace/rng.hpp"

namespace frametrace {

// Desk-scale stand-in model. Constructed (not trained) so that for every
// prompt of the form synthetic_prompt(name) the single correct target token
// gets probability >= 0.99 at the final position, the information flows
// exactly through two sites (layer-0 MLP at the last subject token, layer-1
// attention to the final token), and Gaussian corruption of the subject
// embeddings destroys the prediction.
//
// Mechanism: token embeddings live in dims 0..31 plus a constant bias
// channel in dim 63. The layer-0 MLP holds one matched filter per frame
// token; a hit writes a per-frame signal direction (dims 32, 33, ...) into
// the residual stream. Layer-1 head 0 carries content-free rotary keys and
// a query pre-rotated by the fixed template offset, so the final position
// attends exactly to the last subject token and copies its signal dims.
// The unembedding reads the signal dims into the target-token logits.

inline constexpr const char* kSynthPromptPrefix = "In the \"";
inline constexpr const char* kSynthPromptSuffix =
    "\" frame, misbehavior is met with";

inline std::string synthetic_prompt(const std::string& frame_name) {
  return std::string(kSynthPromptPrefix) + frame_name + kSynthPromptSuffix;
}

// The builder keys on the last token of the frame name. Callers that map
// names to frame tokens must satisfy this slot assumption.
inline void check_synthetic_template(const std::string& frame_name,
                                     int frame_token) {
  if (frame_name.empty() ||
      static_cast<int>(static_cast<unsigned char>(frame_name.back())) !=
          frame_token)
    throw Error(ErrorCategory::validation,
                "synthetic template: frame token must be the last byte of "
                "the frame name '" +
                    frame_name + "'");
}

// Shipped synthetic frames: name -> (frame token, target token). Names end
// in distinct bytes because the construction distinguishes frames by the
// last subject token.
struct SyntheticFrame {
  std::string name;
  int frame_token;
  int target_token;
};

inline std::vector<SyntheticFrame> synthetic_default_frames() {
  return {
      {"stern", 'n', 'p'},
      {"gentle", 'e', 'c'},
  };
}

inline ModelBundle build_synthetic_model(
    const std::vector<int>& frame_tokens,
    const std::map<int, int>& target_map, std::uint64_t seed) {
  constexpr std::size_t d = 64, nh = 4, nkv = 2, dff = 32, vocab = 256;
  constexpr std::size_t hd = d / nh, half = hd / 2;
  const std::size_t nf = frame_tokens.size();

  if (nf < 2)
    throw Error(ErrorCategory::validation,
                "synthetic: need >= 2 distinct frame tokens");
  if (nf > 8)
    throw Error(ErrorCategory::validation,
                "synthetic: at most 8 frames supported");
  for (std::size_t i = 0; i < nf; ++i) {
    int f = frame_tokens[i];
    if (f < 0 || f > 255)
      throw Error(ErrorCategory::range, "synthetic: frame token out of range");
    for (std::size_t j = i + 1; j < nf; ++j)
      if (frame_tokens[j] == f)
        throw Error(ErrorCategory::validation,
                    "synthetic: duplicate frame token");
    auto it = target_map.find(f);
    if (it == target_map.end())
      throw Error(ErrorCategory::validation,
                  "synthetic: frame token has no target");
    int t = it->second;
    if (t < 0 || t > 255)
      throw Error(ErrorCategory::range, "synthetic: target token out of range");
    for (int g : frame_tokens)
      if (t == g)
        throw Error(ErrorCategory::validation,
                    "synthetic: target collides with a frame token");
  }

  // construction constants (see the trace margins asserted in tests)
  const float kBeta = 0.8f;      // constant bias channel (dim 63)
  const float kKappa = 2.0f;     // matched-filter gain
  const float kGateBias = -10.0f;
  const float kSigAmp = 0.35f;   // signal amplitude at resid_post(0)
  const float kGamma = 2.57f;    // key/query channel scale
  const float kNu = 1.0f;        // value read gain
  const float kMu = 2.5f;        // target logit gain
  const float kEcho = 0.1f;      // identity echo for non-target logits
  const float kFinalSig = 8.0f;  // signal amplitude at the final residual
  // per-frequency key weights, LP-optimized for single-offset selectivity
  const float kComb[half] = {0.707f, 0.064f, 0.087f, 0.0f,
                             0.061f, 0.001f, 0.08f, 0.0f};

  ModelBundle b;
  b.config.n_layers = 2;
  b.config.d_model = d;
  b.config.n_heads = nh;
  b.config.n_kv_heads = nkv;
  b.config.d_ff = dff;
  b.config.vocab_size = vocab;
  b.config.max_seq = 128;
  b.config.norm_kind = NormKind::rms;
  b.config.act_kind = ActKind::silu;
  b.config.rope_theta = 25.0f;
  b.config.eps = 1e-5f;
  b.config.validate();
  b.tokenizer.mode = TokenizerMode::byte_mode;

  GaussianRng rng(seed);

  // token embeddings: unit-norm identity part in dims 0..31, bias channel
  // in dim 63, decorrelated from the frame-token rows
  Matrix embed(vocab, d);
  std::vector<std::vector<float>> act(vocab);
  auto sample_row = [&]() {
    std::vector<float> r(32);
    float norm2 = 0.0f;
    for (auto& x : r) {
      x = static_cast<float>(rng.next());
      norm2 += x * x;
    }
    float inv = 1.0f / std::sqrt(norm2);
    for (auto& x : r) x *= inv;
    return r;
  };
  for (std::size_t c = 0; c < vocab; ++c) act[c] = sample_row();
  for (std::size_t c = 0; c < vocab; ++c) {
    bool ok = false;
    while (!ok) {
      ok = true;
      for (int f : frame_tokens) {
        if (static_cast<std::size_t>(f) == c) continue;
        float cs = dot(act[c].data(), act[static_cast<std::size_t>(f)].data(), 32);
        if (std::fabs(cs) > 0.35f) {
          act[c] = sample_row();
          ok = false;
          break;
        }
      }
    }
  }
  for (std::size_t c = 0; c < vocab; ++c) {
    for (std::size_t i = 0; i < 32; ++i) embed.at(c, i) = act[c][i];
    embed.at(c, 63) = kBeta;
  }
  b.weights.emplace("embed.weight", std::move(embed));

  auto zeros = [](std::size_t r, std::size_t c) { return Matrix(r, c); };
  auto ones_row = [&](std::size_t c) {
    Matrix m(1, c);
    std::fill(m.data.begin(), m.data.end(), 1.0f);
    return m;
  };

  for (std::size_t L = 0; L < 2; ++L) {
    std::string p = "layers." + std::to_string(L) + ".";
    b.weights.emplace(p + "attn_norm.weight", ones_row(d));
    b.weights.emplace(p + "mlp_norm.weight", ones_row(d));
    b.weights.emplace(p + "attn.wq.weight", zeros(nh * hd, d));
    b.weights.emplace(p + "attn.wk.weight", zeros(nkv * hd, d));
    b.weights.emplace(p + "attn.wv.weight", zeros(nkv * hd, d));
    b.weights.emplace(p + "attn.wo.weight", zeros(d, nh * hd));
    b.weights.emplace(p + "mlp.gate.weight", zeros(dff, d));
    b.weights.emplace(p + "mlp.up.weight", zeros(dff, d));
    b.weights.emplace(p + "mlp.down.weight", zeros(d, dff));
  }

  const float rms_e = std::sqrt((1.0f + kBeta * kBeta) / d);
  {
    Matrix& gate = b.weights.at("layers.0.mlp.gate.weight");
    Matrix& up = b.weights.at("layers.0.mlp.up.weight");
    Matrix& down = b.weights.at("layers.0.mlp.down.weight");
    for (std::size_t r = 0; r < nf; ++r) {
      int f = frame_tokens[r];
      for (std::size_t i = 0; i < 32; ++i) {
        gate.at(r, i) = kKappa * act[static_cast<std::size_t>(f)][i];
        up.at(r, i) = act[static_cast<std::size_t>(f)][i];
      }
      // bias emulated through the constant channel; calibrated so the
      // matched filter only fires on a clean frame-token embedding
      gate.at(r, 63) = kGateBias / (kBeta / rms_e);
      float a_clean = kKappa / rms_e + kGateBias;
      float prod = silu(a_clean) * (1.0f / rms_e);
      down.at(32 + r, r) = kSigAmp / prod;
    }
  }

  // layer 1, head 0: fixed-relative-offset attention via rotary keys
  const std::size_t delta = std::string(kSynthPromptSuffix).size();
  {
    Matrix& wq = b.weights.at("layers.1.attn.wq.weight");
    Matrix& wk = b.weights.at("layers.1.attn.wk.weight");
    Matrix& wv = b.weights.at("layers.1.attn.wv.weight");
    Matrix& wo = b.weights.at("layers.1.attn.wo.weight");
    Vector k0(hd, 0.0f), q0(hd, 0.0f);
    for (std::size_t i = 0; i < half; ++i) k0[i] = std::sqrt(kComb[i]);
    q0 = k0;
    detail::rope_in_place(q0.data(), -static_cast<float>(delta),
                          b.config.rope_theta, hd);
    for (std::size_t i = 0; i < hd; ++i) {
      wk.at(i, 63) = kGamma * k0[i];
      wq.at(i, 63) = kGamma * q0[i];
    }
    for (std::size_t r = 0; r < nf; ++r) wv.at(r, 32 + r) = kNu;
    const float rms_ls =
        std::sqrt((1.0f + kBeta * kBeta + kSigAmp * kSigAmp) / d);
    const float omega = kFinalSig / (kNu * kSigAmp / rms_ls);
    for (std::size_t r = 0; r < nf; ++r) wo.at(32 + r, r) = omega;
  }

  {
    Matrix unembed(vocab, d);
    for (std::size_t c = 0; c < vocab; ++c)
      for (std::size_t i = 0; i < 32; ++i)
        unembed.at(c, i) = kEcho * act[c][i];
    for (std::size_t r = 0; r < nf; ++r) {
      std::size_t t = static_cast<std::size_t>(target_map.at(frame_tokens[r]));
      for (std::size_t i = 0; i < d; ++i) unembed.at(t, i) = 0.0f;
      unembed.at(t, 32 + r) = kMu;
    }
    b.weights.emplace("unembed.weight", std::move(unembed));
  }
  b.weights.emplace("final_norm.weight", ones_row(d));

  validate_weights(b.config, b.weights);
  return b;
}

inline ModelBundle build_synthetic_default(std::uint64_t seed) {
  std::vector<int> tokens;
  std::map<int, int> targets;
  for (const auto& f : synthetic_default_frames()) {
    check_synthetic_template(f.name, f.frame_token);
    tokens.push_back(f.frame_token);
    targets[f.frame_token] = f.target_token;
  }
  return build_synthetic_model(tokens, targets, seed);
}

}  // namespace frametrace
