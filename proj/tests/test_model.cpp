#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "frametrace/model.hpp"
#include "frametrace/safetensors.hpp"
#include "frametrace/synthetic.hpp"

using namespace frametrace;

namespace {

ModelBundle& synth() {
  static ModelBundle b = build_synthetic_default(42);
  return b;
}

std::filesystem::path temp_dir(const char* tag) {
  auto p = std::filesystem::temp_directory_path() /
           (std::string("ft_model_") + tag);
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  ModelConfig c = synth().config;
  ModelConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(back.n_layers, c.n_layers);
  EXPECT_EQ(back.d_model, c.d_model);
  EXPECT_EQ(back.n_heads, c.n_heads);
  EXPECT_EQ(back.n_kv_heads, c.n_kv_heads);
  EXPECT_EQ(back.d_ff, c.d_ff);
  EXPECT_EQ(back.vocab_size, c.vocab_size);
  EXPECT_EQ(back.max_seq, c.max_seq);
  EXPECT_FLOAT_EQ(back.rope_theta, c.rope_theta);
  EXPECT_FLOAT_EQ(back.eps, c.eps);
}

TEST(Config, ValidateRejectsBadShapes) {
  ModelConfig c = synth().config;
  c.n_heads = 3;  // 64 % 3 != 0
  EXPECT_THROW(c.validate(), Error);
  c = synth().config;
  c.n_kv_heads = 3;  // 4 % 3 != 0
  EXPECT_THROW(c.validate(), Error);
  c = synth().config;
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(F16, KnownBitPatterns) {
  EXPECT_FLOAT_EQ(f16_to_f32(0x3C00), 1.0f);
  EXPECT_FLOAT_EQ(f16_to_f32(0x3800), 0.5f);
  EXPECT_FLOAT_EQ(f16_to_f32(0xC000), -2.0f);
  EXPECT_FLOAT_EQ(f16_to_f32(0x0000), 0.0f);
  EXPECT_FLOAT_EQ(f16_to_f32(0x7BFF), 65504.0f);
  // smallest subnormal
  EXPECT_FLOAT_EQ(f16_to_f32(0x0001), 5.9604645e-8f);
}

TEST(Safetensors, RoundTripAndByteDeterminism) {
  auto dir = temp_dir("st");
  auto path = (dir / "w.safetensors").string();
  save_safetensors(synth().weights, path);
  auto loaded = load_safetensors(path);
  ASSERT_EQ(loaded.size(), synth().weights.size());
  for (const auto& [name, m] : synth().weights) {
    const Matrix& l = loaded.at(name);
    ASSERT_EQ(l.rows, m.rows) << name;
    ASSERT_EQ(l.cols, m.cols) << name;
    EXPECT_EQ(l.data, m.data) << name;
  }
  auto path2 = (dir / "w2.safetensors").string();
  save_safetensors(loaded, path2);
  EXPECT_EQ(slurp(path), slurp(path2));
}

TEST(Safetensors, RejectsTruncatedFile) {
  auto dir = temp_dir("bad");
  auto path = (dir / "trunc.safetensors").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "\x08\x00";
  }
  EXPECT_THROW(load_safetensors(path), Error);
}

TEST(Weights, ValidationCatchesMissingAndMisshaped) {
  auto w = synth().weights;
  w.erase("final_norm.weight");
  EXPECT_THROW(validate_weights(synth().config, w), Error);
  w = synth().weights;
  w.at("embed.weight") = Matrix(2, 2);
  EXPECT_THROW(validate_weights(synth().config, w), Error);
}

TEST(Bundle, SaveLoadRoundTrip) {
  auto dir = temp_dir("bundle");
  save_bundle(synth(), dir.string());
  ModelBundle back = load_bundle_dir(dir.string());
  EXPECT_EQ(back.config.d_model, synth().config.d_model);
  for (const auto& [name, m] : synth().weights)
    EXPECT_EQ(back.tensor(name).data, m.data) << name;
}

TEST(Bundle, AcceptsPublicLlamaNames) {
  auto dir = temp_dir("llama");
  std::map<std::string, Matrix> pub;
  for (const auto& [name, m] : synth().weights) {
    std::string n = name;
    auto sub = [&](const std::string& from, const std::string& to) {
      auto pos = n.find(from);
      if (pos != std::string::npos)
        n = n.substr(0, pos) + to + n.substr(pos + from.size());
    };
    if (n == "embed.weight") n = "model.embed_tokens.weight";
    if (n == "final_norm.weight") n = "model.norm.weight";
    if (n == "unembed.weight") n = "lm_head.weight";
    if (n.rfind("layers.", 0) == 0) n = "model." + n;
    sub(".attn_norm.weight", ".input_layernorm.weight");
    sub(".mlp_norm.weight", ".post_attention_layernorm.weight");
    sub(".attn.wq.weight", ".self_attn.q_proj.weight");
    sub(".attn.wk.weight", ".self_attn.k_proj.weight");
    sub(".attn.wv.weight", ".self_attn.v_proj.weight");
    sub(".attn.wo.weight", ".self_attn.o_proj.weight");
    sub(".mlp.gate.weight", ".mlp.gate_proj.weight");
    sub(".mlp.up.weight", ".mlp.up_proj.weight");
    sub(".mlp.down.weight", ".mlp.down_proj.weight");
    pub.emplace(n, m);
  }
  save_safetensors(pub, (dir / "model.safetensors").string());
  {
    std::ofstream out(dir / "config.json");
    out << config_to_json(synth().config).dump(2) << "\n";
  }
  save_tokenizer(synth().tokenizer, (dir / "tokenizer.json").string());
  ModelBundle back = load_bundle_dir(dir.string());
  for (const auto& [name, m] : synth().weights)
    EXPECT_EQ(back.tensor(name).data, m.data) << name;
}

TEST(Rope, RotatesKnownAngle) {
  // pair (0, 2) at frequency theta^0 = 1 rotates by exactly pos radians
  Vector v = {1.0f, 0.0f, 0.0f, 0.0f};
  detail::rope_in_place(v.data(), 1.5707963f, 10000.0f, 4);
  EXPECT_NEAR(v[0], 0.0f, 1e-5f);
  EXPECT_NEAR(v[2], 1.0f, 1e-5f);
  // rotation by pos then -pos is the identity
  Vector w = {0.3f, -0.7f, 1.1f, 0.2f};
  Vector orig = w;
  detail::rope_in_place(w.data(), 5.0f, 25.0f, 4);
  detail::rope_in_place(w.data(), -5.0f, 25.0f, 4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w[i], orig[i], 1e-5f);
}

TEST(Forward, ShapesAndDeterminism) {
  auto tokens = tokenize(synth().tokenizer, synthetic_prompt("stern"));
  ForwardResult a = forward(synth(), tokens);
  ForwardResult b = forward(synth(), tokens);
  EXPECT_EQ(a.logits.rows, tokens.size());
  EXPECT_EQ(a.logits.cols, synth().config.vocab_size);
  EXPECT_EQ(a.logits.data, b.logits.data);
}

TEST(Forward, RejectsBadInputs) {
  EXPECT_THROW(forward(synth(), {}), Error);
  std::vector<int> too_long(synth().config.max_seq + 1, 65);
  EXPECT_THROW(forward(synth(), too_long), Error);
  std::vector<int> ok = {65, 66};
  Intervention bad_pos{{HookKind::resid_post, 0}, 9, SetAction{Vector(64)}};
  EXPECT_THROW(forward(synth(), ok, {}, {bad_pos}), Error);
  Intervention bad_layer{{HookKind::resid_post, 7}, 0, SetAction{Vector(64)}};
  EXPECT_THROW(forward(synth(), ok, {}, {bad_layer}), Error);
}

TEST(Forward, SelfPatchingIdentity) {
  auto tokens = tokenize(synth().tokenizer, synthetic_prompt("gentle"));
  ForwardResult clean = forward(synth(), tokens);
  std::mt19937_64 gen(23);
  std::uniform_int_distribution<std::size_t> pos(0, tokens.size() - 1);
  std::uniform_int_distribution<std::size_t> layer(0, 1);
  std::uniform_int_distribution<int> kind(0, 2);
  for (int trial = 0; trial < 100; ++trial) {
    int k = kind(gen);
    HookKind hk = k == 0   ? HookKind::resid_post
                  : k == 1 ? HookKind::attn_out
                           : HookKind::mlp_out;
    HookPoint hp{hk, layer(gen)};
    std::size_t p = pos(gen);
    ForwardResult cap = forward(synth(), tokens, {{hp, p}});
    Intervention iv{hp, p, SetAction{cap.captured.at({hp, p})}};
    ForwardResult patched = forward(synth(), tokens, {}, {iv});
    ASSERT_EQ(patched.logits.data, clean.logits.data)
        << hook_kind_name(hk) << " layer " << hp.layer << " pos " << p;
  }
}

TEST(Forward, CausalityInvariance) {
  std::mt19937_64 gen(31);
  std::uniform_int_distribution<int> byte(32, 126);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> tokens(12);
    for (auto& t : tokens) t = byte(gen) + synth().tokenizer.special_count();
    ForwardResult full = forward(synth(), tokens);
    std::uniform_int_distribution<std::size_t> cut(1, tokens.size() - 1);
    std::size_t c = cut(gen);
    std::vector<int> prefix(tokens.begin(),
                            tokens.begin() + static_cast<std::ptrdiff_t>(c));
    ForwardResult part = forward(synth(), prefix);
    for (std::size_t p = 0; p < c; ++p)
      for (std::size_t v = 0; v < synth().config.vocab_size; ++v)
        ASSERT_EQ(part.logits.at(p, v), full.logits.at(p, v))
            << "pos " << p << " after cut " << c;
  }
}

TEST(Forward, GaussianInterventionSeededAndSigmaZeroIsIdentity) {
  auto tokens = tokenize(synth().tokenizer, synthetic_prompt("stern"));
  ForwardResult clean = forward(synth(), tokens);
  Intervention zero{{HookKind::embedding, 0}, 9, AddGaussianAction{0.0f, 1}};
  ForwardResult z = forward(synth(), tokens, {}, {zero});
  EXPECT_EQ(z.logits.data, clean.logits.data);

  Intervention g1{{HookKind::embedding, 0}, 9, AddGaussianAction{0.5f, 1}};
  Intervention g2{{HookKind::embedding, 0}, 9, AddGaussianAction{0.5f, 2}};
  ForwardResult a = forward(synth(), tokens, {}, {g1});
  ForwardResult b = forward(synth(), tokens, {}, {g1});
  ForwardResult c = forward(synth(), tokens, {}, {g2});
  EXPECT_EQ(a.logits.data, b.logits.data);
  EXPECT_NE(a.logits.data, c.logits.data);
}

TEST(Generate, ArgmaxPredictsSyntheticTargets) {
  for (const auto& f : synthetic_default_frames()) {
    GenerateResult r =
        generate(synth(), synthetic_prompt(f.name), 1, 0.0f, 0);
    ASSERT_EQ(r.tokens.size(), r.n_prompt + 1);
    EXPECT_EQ(r.tokens.back(), f.target_token) << f.name;
    EXPECT_EQ(r.text, std::string(1, static_cast<char>(f.target_token)));
  }
}

TEST(Generate, SamplingIsSeedDeterministic) {
  GenerateResult a = generate(synth(), "hello", 8, 0.9f, 123);
  GenerateResult b = generate(synth(), "hello", 8, 0.9f, 123);
  EXPECT_EQ(a.tokens, b.tokens);
}

TEST(SyntheticBuilder, ContractChecks) {
  EXPECT_THROW(build_synthetic_model({'n'}, {{'n', 'p'}}, 1), Error);
  EXPECT_THROW(build_synthetic_model({'n', 'n'}, {{'n', 'p'}}, 1), Error);
  EXPECT_THROW(build_synthetic_model({'n', 'e'}, {{'n', 'p'}}, 1), Error);
  // target colliding with a frame token
  EXPECT_THROW(build_synthetic_model({'n', 'e'}, {{'n', 'e'}, {'e', 'c'}}, 1),
               Error);
  EXPECT_THROW(check_synthetic_template("stern", 'x'), Error);
  EXPECT_NO_THROW(check_synthetic_template("stern", 'n'));
}

TEST(SyntheticBuilder, CleanProbabilityContract) {
  for (const auto& f : synthetic_default_frames()) {
    auto tokens = tokenize(synth().tokenizer, synthetic_prompt(f.name));
    ForwardResult fr = forward(synth(), tokens);
    const float* row = fr.logits.row(tokens.size() - 1);
    Vector probs = softmax(Vector(row, row + synth().config.vocab_size));
    EXPECT_GE(probs[static_cast<std::size_t>(f.target_token)], 0.99f)
        << f.name;
  }
}
