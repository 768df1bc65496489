#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "frametrace/error.hpp"
#include "frametrace/model.hpp"

namespace frametrace {

struct SubjectSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive

  std::size_t last_subject_index() const { return end - 1; }
};

struct CleanTrace {
  std::vector<int> tokens;
  // saved_states[layer * n_tokens + position]
  std::vector<Vector> saved_states;
  Matrix clean_logits;
  int target_token = 0;
  float clean_target_prob = 0.0f;

  const Vector& state(std::size_t layer, std::size_t pos,
                      std::size_t n_tokens) const {
    return saved_states[layer * n_tokens + pos];
  }
};

struct TraceGrid {
  std::vector<std::string> token_strings;
  std::size_t n_layers = 0;
  Matrix cells;  // [n_tokens x n_layers], mean restored target probability
  float clean_prob = 0.0f;
  float corrupted_prob = 0.0f;
  float sigma = 0.0f;
  std::size_t n_samples = 0;
  std::uint64_t base_seed = 0;
  HookKind hook_kind = HookKind::resid_post;
};

struct TraceParams {
  float sigma = 0.0f;  // <0 means "use default_noise_sigma"
  std::size_t n_samples = 10;
  std::uint64_t base_seed = 42;
  HookKind hook_kind = HookKind::resid_post;
  unsigned threads = 1;
};

// 3x the standard deviation of the embedding-matrix entries, the usual
// causal-tracing convention (the source method leaves the magnitude open).
inline float default_noise_sigma(const ModelBundle& bundle) {
  const Matrix& e = bundle.tensor("embed.weight");
  double sum = 0.0, sum2 = 0.0;
  for (float x : e.data) {
    sum += x;
    sum2 += static_cast<double>(x) * x;
  }
  double n = static_cast<double>(e.data.size());
  double mean = sum / n;
  return 3.0f * static_cast<float>(std::sqrt(sum2 / n - mean * mean));
}

// First contiguous occurrence of frame_name_tokens inside tokens. Multiple
// occurrences require an explicit occurrence index.
inline SubjectSpan locate_subject_span(
    const std::vector<int>& tokens, const std::vector<int>& frame_name_tokens,
    std::optional<std::size_t> occurrence = std::nullopt) {
  if (tokens.empty() || frame_name_tokens.empty())
    throw Error(ErrorCategory::range, "locate_subject_span: empty input");
  std::vector<std::size_t> hits;
  if (frame_name_tokens.size() <= tokens.size()) {
    for (std::size_t i = 0; i + frame_name_tokens.size() <= tokens.size();
         ++i) {
      bool match = true;
      for (std::size_t j = 0; j < frame_name_tokens.size(); ++j)
        if (tokens[i + j] != frame_name_tokens[j]) {
          match = false;
          break;
        }
      if (match) hits.push_back(i);
    }
  }
  if (hits.empty())
    throw Error(ErrorCategory::not_found,
                "subject tokens not found in prompt");
  if (hits.size() > 1 && !occurrence)
    throw Error(ErrorCategory::ambiguous,
                "subject tokens occur " + std::to_string(hits.size()) +
                    " times; pass an occurrence index");
  std::size_t idx = occurrence.value_or(0);
  if (idx >= hits.size())
    throw Error(ErrorCategory::range, "occurrence index out of range");
  return {hits[idx], hits[idx] + frame_name_tokens.size()};
}

inline float target_prob_at_final(const Matrix& logits, int target) {
  const float* row = logits.row(logits.rows - 1);
  Vector v(row, row + logits.cols);
  return softmax(v)[static_cast<std::size_t>(target)];
}

inline CleanTrace clean_run(const ModelBundle& bundle,
                            const std::string& prompt_text, int target_token) {
  if (target_token < 0 ||
      static_cast<std::size_t>(target_token) >= bundle.config.vocab_size)
    throw Error(ErrorCategory::range, "clean_run: target token out of vocab");
  CleanTrace ct;
  ct.tokens = tokenize(bundle.tokenizer, prompt_text);
  ct.target_token = target_token;
  std::size_t n = ct.tokens.size();
  std::vector<std::pair<HookPoint, std::size_t>> capture;
  for (std::size_t l = 0; l < bundle.config.n_layers; ++l)
    for (std::size_t p = 0; p < n; ++p)
      capture.push_back({{HookKind::resid_post, l}, p});
  ForwardResult fr = forward(bundle, ct.tokens, capture);
  ct.saved_states.resize(bundle.config.n_layers * n);
  for (std::size_t l = 0; l < bundle.config.n_layers; ++l)
    for (std::size_t p = 0; p < n; ++p)
      ct.saved_states[l * n + p] =
          std::move(fr.captured.at({{HookKind::resid_post, l}, p}));
  ct.clean_logits = std::move(fr.logits);
  ct.clean_target_prob = target_prob_at_final(ct.clean_logits, target_token);
  return ct;
}

inline std::vector<Intervention> corruption_interventions(
    const SubjectSpan& span, float sigma, std::uint64_t sample_seed) {
  std::vector<Intervention> iv;
  for (std::size_t p = span.start; p < span.end; ++p)
    iv.push_back({{HookKind::embedding, 0}, p,
                  AddGaussianAction{sigma, sample_seed}});
  return iv;
}

inline float corrupted_baseline(const ModelBundle& bundle,
                                const std::vector<int>& tokens,
                                const SubjectSpan& span, float sigma,
                                std::size_t n_samples, std::uint64_t base_seed,
                                int target) {
  if (n_samples < 1)
    throw Error(ErrorCategory::range, "corrupted_baseline: n_samples >= 1");
  if (span.start >= span.end || span.end > tokens.size())
    throw Error(ErrorCategory::range, "corrupted_baseline: span out of range");
  float acc = 0.0f;
  for (std::size_t s = 0; s < n_samples; ++s) {
    auto iv = corruption_interventions(span, sigma, base_seed + s);
    ForwardResult fr = forward(bundle, tokens, {}, iv);
    acc += target_prob_at_final(fr.logits, target);
  }
  return acc / static_cast<float>(n_samples);
}

// Per cell (position, layer): corrupted run plus a single set() restoration
// of the clean state at that cell, averaged over the same noise seeds the
// baseline uses, so (cell - corrupted_prob) isolates the restoration effect.
inline TraceGrid restore_sweep(const ModelBundle& bundle,
                               const std::string& prompt_text,
                               const SubjectSpan& span, int target,
                               const TraceParams& params) {
  float sigma = params.sigma < 0.0f ? default_noise_sigma(bundle)
                                    : params.sigma;
  CleanTrace ct = clean_run(bundle, prompt_text, target);
  std::size_t n = ct.tokens.size();
  std::size_t nl = bundle.config.n_layers;
  if (span.start >= span.end || span.end > n)
    throw Error(ErrorCategory::range, "restore_sweep: span out of range");

  TraceGrid grid;
  grid.n_layers = nl;
  grid.cells = Matrix(n, nl);
  grid.clean_prob = ct.clean_target_prob;
  grid.sigma = sigma;
  grid.n_samples = params.n_samples;
  grid.base_seed = params.base_seed;
  grid.hook_kind = params.hook_kind;
  for (std::size_t p = 0; p < n; ++p)
    grid.token_strings.push_back(
        detokenize(bundle.tokenizer, {ct.tokens[p]}));

  grid.corrupted_prob = corrupted_baseline(
      bundle, ct.tokens, span, sigma, params.n_samples, params.base_seed,
      target);

  auto eval_cell = [&](std::size_t p, std::size_t l) {
    float acc = 0.0f;
    for (std::size_t s = 0; s < params.n_samples; ++s) {
      auto iv = corruption_interventions(span, sigma, params.base_seed + s);
      iv.push_back({{params.hook_kind, l}, p, SetAction{ct.state(l, p, n)}});
      ForwardResult fr = forward(bundle, ct.tokens, {}, iv);
      acc += target_prob_at_final(fr.logits, target);
    }
    return acc / static_cast<float>(params.n_samples);
  };

  std::size_t n_cells = n * nl;
  unsigned workers = std::max(1u, params.threads);
  if (workers == 1) {
    for (std::size_t c = 0; c < n_cells; ++c)
      grid.cells.data[c] = eval_cell(c / nl, c % nl);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&]() {
        for (;;) {
          std::size_t c = next.fetch_add(1);
          if (c >= n_cells) return;
          grid.cells.data[c] = eval_cell(c / nl, c % nl);
        }
      });
    for (auto& t : pool) t.join();
  }
  return grid;
}

// ---- emission ----

enum class GridFormat { csv, json, svg };

inline GridFormat grid_format_from_string(const std::string& s) {
  if (s == "csv") return GridFormat::csv;
  if (s == "json") return GridFormat::json;
  if (s == "svg") return GridFormat::svg;
  throw Error(ErrorCategory::config, "unknown grid format: " + s);
}

inline nlohmann::json grid_to_json(const TraceGrid& g) {
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t p = 0; p < g.cells.rows; ++p) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t l = 0; l < g.cells.cols; ++l)
      row.push_back(g.cells.at(p, l));
    cells.push_back(row);
  }
  return {
      {"token_strings", g.token_strings},
      {"n_layers", g.n_layers},
      {"cells", cells},
      {"clean_prob", g.clean_prob},
      {"corrupted_prob", g.corrupted_prob},
      {"sigma", g.sigma},
      {"n_samples", g.n_samples},
      {"base_seed", g.base_seed},
      {"hook_kind", hook_kind_name(g.hook_kind)},
  };
}

inline TraceGrid grid_from_json(const nlohmann::json& j) {
  TraceGrid g;
  g.token_strings = j.at("token_strings").get<std::vector<std::string>>();
  g.n_layers = j.at("n_layers").get<std::size_t>();
  const auto& cells = j.at("cells");
  g.cells = Matrix(cells.size(), g.n_layers);
  for (std::size_t p = 0; p < cells.size(); ++p)
    for (std::size_t l = 0; l < g.n_layers; ++l)
      g.cells.at(p, l) = cells[p][l].get<float>();
  g.clean_prob = j.at("clean_prob").get<float>();
  g.corrupted_prob = j.at("corrupted_prob").get<float>();
  g.sigma = j.at("sigma").get<float>();
  g.n_samples = j.at("n_samples").get<std::size_t>();
  g.base_seed = j.at("base_seed").get<std::uint64_t>();
  g.hook_kind = hook_kind_from_string(j.at("hook_kind").get<std::string>());
  return g;
}

inline TraceGrid load_grid_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open grid: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::parse, "grid json: " + std::string(e.what()));
  }
  return grid_from_json(j);
}

inline std::string grid_to_csv(const TraceGrid& g) {
  std::ostringstream out;
  out << "token";
  for (std::size_t l = 0; l < g.n_layers; ++l) out << ",layer" << l;
  out << "\n";
  char buf[32];
  for (std::size_t p = 0; p < g.cells.rows; ++p) {
    std::string tok = g.token_strings[p];
    // csv-escape the token text
    bool quote = tok.find_first_of(",\"\n") != std::string::npos;
    if (quote) {
      std::string esc = "\"";
      for (char c : tok) {
        if (c == '"') esc += '"';
        esc += c;
      }
      esc += '"';
      tok = esc;
    }
    out << tok;
    for (std::size_t l = 0; l < g.n_layers; ++l) {
      std::snprintf(buf, sizeof buf, ",%.6f", g.cells.at(p, l));
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

// One rect per cell; color interpolated linearly from corrupted_prob
// (light) to clean_prob (dark). Output is byte-deterministic.
inline std::string grid_to_svg(const TraceGrid& g) {
  const int cell_w = 24, cell_h = 18, left = 130, top = 34, pad = 10;
  std::size_t n = g.cells.rows;
  int width = left + cell_w * static_cast<int>(g.n_layers) + pad;
  int height = top + cell_h * static_cast<int>(n) + pad;
  const int light[3] = {0xff, 0xf7, 0xe6};
  const int dark[3] = {0x8b, 0x1a, 0x1a};
  float denom = g.clean_prob - g.corrupted_prob;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  out << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"#ffffff\"/>\n";
  char buf[128];
  for (std::size_t l = 0; l < g.n_layers; ++l) {
    out << "<text x=\"" << (left + static_cast<int>(l) * cell_w + cell_w / 2)
        << "\" y=\"" << (top - 8)
        << "\" font-size=\"10\" text-anchor=\"middle\" "
           "font-family=\"monospace\">"
        << l << "</text>\n";
  }
  for (std::size_t p = 0; p < n; ++p) {
    out << "<text x=\"" << (left - 6) << "\" y=\""
        << (top + static_cast<int>(p) * cell_h + cell_h - 5)
        << "\" font-size=\"10\" text-anchor=\"end\" "
           "font-family=\"monospace\">"
        << detail::xml_escape(g.token_strings[p]) << "</text>\n";
    for (std::size_t l = 0; l < g.n_layers; ++l) {
      float v = g.cells.at(p, l);
      float t = std::fabs(denom) < 1e-9f
                    ? 1.0f
                    : (v - g.corrupted_prob) / denom;
      t = std::min(1.0f, std::max(0.0f, t));
      int rgb[3];
      for (int k = 0; k < 3; ++k)
        rgb[k] = static_cast<int>(std::lround(
            static_cast<float>(light[k]) +
            t * static_cast<float>(dark[k] - light[k])));
      std::snprintf(buf, sizeof buf,
                    "<rect class=\"cell\" x=\"%d\" y=\"%d\" width=\"%d\" "
                    "height=\"%d\" fill=\"#%02x%02x%02x\"/>\n",
                    left + static_cast<int>(l) * cell_w,
                    top + static_cast<int>(p) * cell_h, cell_w - 1,
                    cell_h - 1, rgb[0], rgb[1], rgb[2]);
      out << buf;
    }
  }
  out << "</svg>\n";
  return out.str();
}

inline void emit_grid(const TraceGrid& g, GridFormat format,
                      const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCategory::io, "cannot write grid: " + path);
  switch (format) {
    case GridFormat::csv: out << grid_to_csv(g); break;
    case GridFormat::json: out << grid_to_json(g).dump(2) << "\n"; break;
    case GridFormat::svg: out << grid_to_svg(g); break;
  }
  if (!out) throw Error(ErrorCategory::io, "write failed: " + path);
}

}  // namespace frametrace
