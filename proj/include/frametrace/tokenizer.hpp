#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "frametrace/error.hpp"

namespace frametrace {

enum class TokenizerMode { byte_mode, bpe };

struct TokenizerSpec {
  TokenizerMode mode = TokenizerMode::byte_mode;
  std::map<std::string, int> vocab;                       // bpe only
  std::vector<std::pair<std::string, std::string>> merges;  // bpe, rank order
  std::optional<int> bos;
  std::optional<int> eos;

  int special_count() const {
    return (bos ? 1 : 0) + (eos ? 1 : 0);
  }
};

// Byte mode: one id per byte, offset past the special ids.
inline std::vector<int> tokenize(const TokenizerSpec& spec,
                                 const std::string& text) {
  std::vector<int> ids;
  if (spec.mode == TokenizerMode::byte_mode) {
    int off = spec.special_count();
    if (spec.bos) ids.push_back(*spec.bos);
    for (unsigned char c : text) ids.push_back(static_cast<int>(c) + off);
    return ids;
  }
  // bpe: byte-level pre-tokenization, then merges applied in rank order.
  std::vector<std::string> parts;
  parts.reserve(text.size());
  for (char c : text) parts.emplace_back(1, c);
  bool merged = true;
  while (merged && parts.size() > 1) {
    merged = false;
    std::size_t best_rank = spec.merges.size();
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      for (std::size_t r = 0; r < best_rank; ++r) {
        if (parts[i] == spec.merges[r].first &&
            parts[i + 1] == spec.merges[r].second) {
          best_rank = r;
          best_pos = i;
          break;
        }
      }
    }
    if (best_rank < spec.merges.size()) {
      parts[best_pos] += parts[best_pos + 1];
      parts.erase(parts.begin() + best_pos + 1);
      merged = true;
    }
  }
  if (spec.bos) ids.push_back(*spec.bos);
  for (const auto& p : parts) {
    auto it = spec.vocab.find(p);
    if (it == spec.vocab.end())
      throw Error(ErrorCategory::tokenizer,
                  "token missing from vocab after merging: '" + p + "'");
    ids.push_back(it->second);
  }
  return ids;
}

inline std::string detokenize(const TokenizerSpec& spec,
                              const std::vector<int>& ids) {
  std::string out;
  if (spec.mode == TokenizerMode::byte_mode) {
    int off = spec.special_count();
    for (int id : ids) {
      if ((spec.bos && id == *spec.bos) || (spec.eos && id == *spec.eos))
        continue;
      int b = id - off;
      if (b < 0 || b > 255)
        throw Error(ErrorCategory::range,
                    "detokenize: id out of range: " + std::to_string(id));
      out.push_back(static_cast<char>(static_cast<unsigned char>(b)));
    }
    return out;
  }
  // bpe: invert the vocab map
  std::map<int, const std::string*> inv;
  for (const auto& [tok, id] : spec.vocab) inv[id] = &tok;
  for (int id : ids) {
    if ((spec.bos && id == *spec.bos) || (spec.eos && id == *spec.eos))
      continue;
    auto it = inv.find(id);
    if (it == inv.end())
      throw Error(ErrorCategory::range,
                  "detokenize: unknown id: " + std::to_string(id));
    out += *it->second;
  }
  return out;
}

inline nlohmann::json tokenizer_to_json(const TokenizerSpec& spec) {
  nlohmann::json j;
  j["mode"] = spec.mode == TokenizerMode::byte_mode ? "byte" : "bpe";
  j["vocab"] = spec.vocab;
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [a, b] : spec.merges) merges.push_back({a, b});
  j["merges"] = merges;
  nlohmann::json specials = nlohmann::json::object();
  if (spec.bos) specials["bos"] = *spec.bos;
  if (spec.eos) specials["eos"] = *spec.eos;
  j["specials"] = specials;
  return j;
}

inline TokenizerSpec tokenizer_from_json(const nlohmann::json& j) {
  TokenizerSpec spec;
  std::string mode = j.at("mode").get<std::string>();
  if (mode == "byte")
    spec.mode = TokenizerMode::byte_mode;
  else if (mode == "bpe")
    spec.mode = TokenizerMode::bpe;
  else
    throw Error(ErrorCategory::format, "tokenizer: unknown mode " + mode);
  if (j.contains("vocab"))
    spec.vocab = j["vocab"].get<std::map<std::string, int>>();
  if (j.contains("merges"))
    for (const auto& m : j["merges"])
      spec.merges.emplace_back(m.at(0).get<std::string>(),
                               m.at(1).get<std::string>());
  if (j.contains("specials")) {
    const auto& s = j["specials"];
    if (s.contains("bos")) spec.bos = s["bos"].get<int>();
    if (s.contains("eos")) spec.eos = s["eos"].get<int>();
  }
  return spec;
}

inline TokenizerSpec load_tokenizer(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open tokenizer: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::parse,
                "tokenizer json: " + std::string(e.what()));
  }
  return tokenizer_from_json(j);
}

inline void save_tokenizer(const TokenizerSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCategory::io, "cannot write tokenizer: " + path);
  out << tokenizer_to_json(spec).dump(2) << "\n";
}

}  // namespace frametrace
