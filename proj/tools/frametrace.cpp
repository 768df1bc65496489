#include <cstdio>
#include <filesystem>
#include <memory>
#include <numeric>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "frametrace/corpus.hpp"
#include "frametrace/llmclient.hpp"
#include "frametrace/model.hpp"
#include "frametrace/probing.hpp"
#include "frametrace/synthetic.hpp"
#include "frametrace/tracing.hpp"

namespace ft = frametrace;

namespace {

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ft::Error(ft::ErrorCategory::io, "cannot write: " + path);
  out << text;
}

struct ModelFlags {
  std::string model_dir;
  std::string weights;
  std::string tokenizer;
  std::string model_config;
  std::string model_name;  // "synthetic" selects the shipped model
  std::uint64_t seed = 42;
};

void add_model_flags(CLI::App* cmd, ModelFlags& mf) {
  cmd->add_option("--model", mf.model_name,
                  "Model selector; 'synthetic' uses the shipped desk-scale "
                  "model");
  cmd->add_option("--model-dir", mf.model_dir,
                  "Directory with config.json, model.safetensors, "
                  "tokenizer.json");
  cmd->add_option("--weights", mf.weights, "Safetensors weights file");
  cmd->add_option("--tokenizer", mf.tokenizer, "Tokenizer JSON file");
  cmd->add_option("--model-config", mf.model_config,
                  "Model config JSON (with --weights)");
}

ft::ModelBundle load_model(const ModelFlags& mf) {
  if (mf.model_name == "synthetic")
    return ft::build_synthetic_default(mf.seed);
  if (!mf.model_dir.empty()) return ft::load_bundle_dir(mf.model_dir);
  if (!mf.weights.empty()) {
    if (mf.model_config.empty() || mf.tokenizer.empty())
      throw ft::Error(ft::ErrorCategory::config,
                      "--weights requires --model-config and --tokenizer");
    return ft::load_bundle(mf.model_config, mf.weights, mf.tokenizer);
  }
  throw ft::Error(ft::ErrorCategory::config,
                  "no model given; pass --model synthetic or --model-dir");
}

ft::Endpoint make_endpoint(const std::string& url, const std::string& key_env,
                           const std::string& model, double timeout,
                           int retries, double backoff) {
  ft::Endpoint ep;
  ep.base_url = url;
  ep.api_key_env = key_env;
  ep.model = model;
  ep.timeout_s = timeout;
  ep.max_retries = retries;
  ep.backoff_base_s = backoff;
  return ep;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Frame interpretability pipeline: corpus management, "
               "generation, zero-shot recognition, causal tracing, probing"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Flat key=value config file");
  app.allow_config_extras(CLI::config_extras_mode::error);

  // ---- frames ----
  auto* c_frames = app.add_subcommand(
      "frames", "Print the ten-frame registry as CSV");
  std::string frames_out;
  c_frames->add_option("--out", frames_out, "Output path (default stdout)");
  c_frames->callback([&]() {
    std::ostringstream s;
    s << "name,description,counter_frame\n";
    for (const auto& f : ft::frame_registry())
      s << csv_field(f.name) << "," << csv_field(f.description) << ","
        << csv_field(f.counter_frame.value_or("")) << "\n";
    write_text(frames_out, s.str());
  });

  // shared endpoint flags
  std::string ep_url, ep_key_env, ep_model = "gpt-4";
  double ep_timeout = 30.0, ep_backoff = 0.5;
  int ep_retries = 3;
  auto add_endpoint_flags = [&](CLI::App* cmd) {
    cmd->add_option("--endpoint", ep_url, "Chat-completions base URL")
        ->required();
    cmd->add_option("--api-key-env", ep_key_env,
                    "Environment variable holding the API key");
    cmd->add_option("--remote-model", ep_model, "Remote model name");
    cmd->add_option("--timeout", ep_timeout, "Request timeout in seconds");
    cmd->add_option("--retries", ep_retries, "Max retries on 429/5xx");
    cmd->add_option("--backoff", ep_backoff, "Backoff base in seconds");
  };

  // ---- generate ----
  auto* c_gen = app.add_subcommand(
      "generate", "Generate frame-evoking stories via a chat endpoint");
  add_endpoint_flags(c_gen);
  std::string gen_frame, gen_source = "original", gen_out, gen_transcript,
              gen_prefix = "story";
  int gen_count = 1;
  c_gen->add_option("--frame", gen_frame, "Frame name")->required();
  c_gen->add_option("--source", gen_source,
                    "Template kind: original, bible, scifi");
  c_gen->add_option("--count", gen_count, "Stories to generate");
  c_gen->add_option("--out", gen_out, "Stories JSONL output")->required();
  c_gen->add_option("--transcript", gen_transcript,
                    "Append request/response JSONL transcript");
  c_gen->add_option("--id-prefix", gen_prefix, "Story id prefix");
  c_gen->callback([&]() {
    if (!ft::is_registered_frame(gen_frame))
      throw ft::Error(ft::ErrorCategory::validation,
                      "unknown frame '" + gen_frame + "'");
    auto ep = make_endpoint(ep_url, ep_key_env, ep_model, ep_timeout,
                            ep_retries, ep_backoff);
    std::unique_ptr<ft::TranscriptWriter> tw;
    if (!gen_transcript.empty())
      tw = std::make_unique<ft::TranscriptWriter>(gen_transcript);
    std::vector<ft::StoryRecord> stories;
    for (int i = 0; i < gen_count; ++i) {
      ft::StoryRecord r;
      r.id = gen_prefix + "-" + std::to_string(i);
      r.frame_label = gen_frame;
      r.source = gen_source;
      r.generator = ep_model;
      r.text = ft::generate_story(ep, gen_frame, gen_source, tw.get());
      stories.push_back(std::move(r));
    }
    ft::save_stories(stories, gen_out);
  });

  // ---- zeroshot ----
  auto* c_zs = app.add_subcommand(
      "zeroshot",
      "Ask per-frame evocation percentages and tally them; with --records, "
      "re-tally an existing record file offline");
  std::string zs_stories, zs_records_in, zs_records_out, zs_out,
      zs_transcript;
  std::vector<std::string> zs_frames = {"Strict Father", "Nurturing Parent"};
  int zs_threshold = 80;
  c_zs->add_option("--stories", zs_stories, "Stories JSONL to query");
  c_zs->add_option("--records", zs_records_in,
                   "Existing zero-shot records JSONL (offline tally)");
  c_zs->add_option("--records-out", zs_records_out,
                   "Write raw zero-shot records JSONL");
  c_zs->add_option("--frames", zs_frames, "Frames to ask about");
  c_zs->add_option("--threshold", zs_threshold,
                   "Inclusive percentage threshold");
  c_zs->add_option("--out", zs_out, "Tally CSV output (default stdout)");
  c_zs->add_option("--transcript", zs_transcript, "Transcript JSONL");
  c_zs->add_option("--endpoint", ep_url, "Chat-completions base URL");
  c_zs->add_option("--api-key-env", ep_key_env,
                   "Environment variable holding the API key");
  c_zs->add_option("--remote-model", ep_model, "Remote model name");
  c_zs->add_option("--timeout", ep_timeout, "Request timeout in seconds");
  c_zs->add_option("--retries", ep_retries, "Max retries on 429/5xx");
  c_zs->add_option("--backoff", ep_backoff, "Backoff base in seconds");
  c_zs->callback([&]() {
    if (zs_stories.empty() && zs_records_in.empty())
      throw ft::Error(ft::ErrorCategory::config,
                      "pass --stories (live) or --records (offline)");
    std::vector<ft::ZeroShotRecord> records;
    std::map<std::string, std::string> group_of;
    if (!zs_records_in.empty()) {
      records = ft::load_zeroshot(zs_records_in);
      if (!zs_stories.empty())
        for (const auto& s : ft::load_stories(zs_stories))
          group_of[s.id] = s.frame_label;
      else
        for (const auto& r : records) group_of[r.story_id] = r.story_id;
    } else {
      if (ep_url.empty())
        throw ft::Error(ft::ErrorCategory::config,
                        "--stories requires --endpoint");
      auto ep = make_endpoint(ep_url, ep_key_env, ep_model, ep_timeout,
                              ep_retries, ep_backoff);
      std::unique_ptr<ft::TranscriptWriter> tw;
      if (!zs_transcript.empty())
        tw = std::make_unique<ft::TranscriptWriter>(zs_transcript);
      auto stories = ft::load_stories(zs_stories);
      for (const auto& s : stories) {
        group_of[s.id] = s.frame_label;
        for (const auto& f : zs_frames) {
          ft::ZeroShotRecord r;
          r.story_id = s.id;
          r.frame_asked = f;
          r.percent = ft::query_frame_percentage(ep, s.text, f, tw.get());
          r.model = ep_model;
          records.push_back(std::move(r));
        }
      }
    }
    if (!zs_records_out.empty()) {
      std::ofstream out(zs_records_out);
      if (!out)
        throw ft::Error(ft::ErrorCategory::io,
                        "cannot write: " + zs_records_out);
      for (const auto& r : records) {
        nlohmann::json j = {{"story_id", r.story_id},
                            {"frame_asked", r.frame_asked},
                            {"percent", r.percent},
                            {"model", r.model}};
        out << j.dump() << "\n";
      }
    }
    auto tally = ft::tally_zeroshot(records, group_of, zs_threshold);
    write_text(zs_out, ft::tally_csv(tally));
  });

  // ---- agreement ----
  auto* c_agree = app.add_subcommand(
      "agreement", "Intercoder agreement between two annotation files");
  std::string ag_a, ag_b;
  c_agree->add_option("--a", ag_a, "First annotation JSONL")->required();
  c_agree->add_option("--b", ag_b, "Second annotation JSONL")->required();
  c_agree->callback([&]() {
    long pct = ft::agreement(ft::load_annotations(ag_a),
                             ft::load_annotations(ag_b));
    std::cout << pct << "\n";
  });

  // ---- report-correctness ----
  auto* c_corr = app.add_subcommand(
      "report-correctness",
      "Per-(generator, source) correctness/faithfulness CSV");
  std::string corr_stories, corr_out;
  c_corr->add_option("--stories", corr_stories, "Annotated stories JSONL")
      ->required();
  c_corr->add_option("--out", corr_out, "CSV output (default stdout)");
  c_corr->callback([&]() {
    auto rows = ft::correctness_report(ft::load_stories(corr_stories));
    write_text(corr_out, ft::correctness_csv(rows));
  });

  // ---- synth-model ----
  auto* c_synth = app.add_subcommand(
      "synth-model", "Build the shipped synthetic model and save it");
  std::string synth_out;
  std::uint64_t synth_seed = 42;
  c_synth->add_option("--out", synth_out, "Output directory")->required();
  c_synth->add_option("--seed", synth_seed, "Embedding seed");
  c_synth->callback([&]() {
    std::filesystem::create_directories(synth_out);
    ft::save_bundle(ft::build_synthetic_default(synth_seed), synth_out);
  });

  // ---- trace ----
  auto* c_trace = app.add_subcommand(
      "trace", "Causal-tracing restore sweep over (token, layer)");
  ModelFlags trace_mf;
  add_model_flags(c_trace, trace_mf);
  std::string tr_prompt_frame, tr_prompt, tr_subject, tr_out,
      tr_format = "csv";
  int tr_target = -1;
  double tr_sigma = -1.0;
  std::size_t tr_samples = 10;
  std::uint64_t tr_seed = 42;
  unsigned tr_threads = 1;
  std::optional<std::size_t> tr_occurrence;
  c_trace->add_option("--prompt-frame", tr_prompt_frame,
                      "Shipped synthetic frame name; implies prompt, "
                      "subject, target");
  c_trace->add_option("--prompt", tr_prompt, "Prompt text");
  c_trace->add_option("--subject", tr_subject, "Subject substring to corrupt");
  c_trace->add_option("--target-token", tr_target, "Target token id");
  c_trace->add_option("--occurrence", tr_occurrence,
                      "Subject occurrence index when it repeats");
  c_trace->add_option("--sigma", tr_sigma,
                      "Corruption noise std; default 3x embedding std");
  c_trace->add_option("--samples", tr_samples, "Noise samples per cell");
  c_trace->add_option("--seed", tr_seed, "Base noise seed");
  c_trace->add_option("--threads", tr_threads, "Worker threads");
  c_trace->add_option("--out", tr_out, "Output path")->required();
  c_trace->add_option("--format", tr_format, "csv, json, or svg");
  c_trace->callback([&]() {
    trace_mf.seed = tr_seed;
    ft::ModelBundle bundle = load_model(trace_mf);
    std::string prompt = tr_prompt, subject = tr_subject;
    int target = tr_target;
    if (!tr_prompt_frame.empty()) {
      bool found = false;
      for (const auto& f : ft::synthetic_default_frames())
        if (f.name == tr_prompt_frame) {
          prompt = ft::synthetic_prompt(f.name);
          subject = f.name;
          target = f.target_token;
          found = true;
        }
      if (!found)
        throw ft::Error(ft::ErrorCategory::not_found,
                        "unknown synthetic frame '" + tr_prompt_frame + "'");
    }
    if (prompt.empty() || subject.empty() || target < 0)
      throw ft::Error(ft::ErrorCategory::config,
                      "need --prompt-frame, or --prompt with --subject and "
                      "--target-token");
    auto tokens = ft::tokenize(bundle.tokenizer, prompt);
    auto subject_tokens = ft::tokenize(bundle.tokenizer, subject);
    auto span = ft::locate_subject_span(tokens, subject_tokens,
                                        tr_occurrence);
    ft::TraceParams params;
    params.sigma = static_cast<float>(tr_sigma);
    params.n_samples = tr_samples;
    params.base_seed = tr_seed;
    params.threads = tr_threads;
    auto grid = ft::restore_sweep(bundle, prompt, span, target, params);
    ft::emit_grid(grid, ft::grid_format_from_string(tr_format), tr_out);
  });

  // ---- extract ----
  auto* c_ext = app.add_subcommand(
      "extract", "Extract last-token residual activations for probing");
  ModelFlags ext_mf;
  add_model_flags(c_ext, ext_mf);
  std::string ext_stories, ext_label_frame, ext_out;
  std::size_t ext_layer = 17;
  c_ext->add_option("--stories", ext_stories, "Stories JSONL")->required();
  c_ext->add_option("--label-frame", ext_label_frame,
                    "Frame label treated as the positive class")
      ->required();
  c_ext->add_option("--layer", ext_layer, "Layer to read (default 17)");
  c_ext->add_option("--out", ext_out, "Activation dataset path")->required();
  c_ext->callback([&]() {
    ft::ModelBundle bundle = load_model(ext_mf);
    auto stories = ft::load_stories(ext_stories);
    std::vector<std::string> ids, texts;
    std::vector<int> labels;
    for (const auto& s : stories) {
      ids.push_back(s.id);
      texts.push_back(s.text);
      labels.push_back(s.frame_label == ext_label_frame ? 1 : 0);
    }
    auto ds = ft::extract_activations(bundle, ids, texts, labels, ext_layer);
    ft::save_activations(ds, ext_out);
  });

  // ---- probe ----
  auto* c_probe = app.add_subcommand(
      "probe", "Fit sparse logistic probes (RFE) on an activation dataset");
  ModelFlags probe_mf;
  add_model_flags(c_probe, probe_mf);
  std::string pr_data, pr_stories, pr_label_frame, pr_out, pr_name;
  std::size_t pr_layer = 17;
  std::vector<std::size_t> pr_ks = {5, 1};
  double pr_holdout = 0.2, pr_l2 = 1e-2;
  std::uint64_t pr_seed = 42;
  c_probe->add_option("--data", pr_data, "Pre-extracted activation dataset");
  c_probe->add_option("--stories", pr_stories,
                      "Stories JSONL (extracted on the fly)");
  c_probe->add_option("--label-frame", pr_label_frame,
                      "Positive-class frame for --stories");
  c_probe->add_option("--layer", pr_layer, "Layer to read (default 17)");
  c_probe->add_option("--k", pr_ks, "RFE target dimensionalities");
  c_probe->add_option("--holdout", pr_holdout, "Heldout fraction");
  c_probe->add_option("--seed", pr_seed, "Split seed");
  c_probe->add_option("--l2", pr_l2, "Ridge penalty");
  c_probe->add_option("--name", pr_name, "Row label in the report");
  c_probe->add_option("--out", pr_out, "Report CSV (default stdout)");
  c_probe->callback([&]() {
    ft::ActivationDataset ds;
    if (!pr_data.empty()) {
      ds = ft::load_activations(pr_data);
    } else if (!pr_stories.empty()) {
      if (pr_label_frame.empty())
        throw ft::Error(ft::ErrorCategory::config,
                        "--stories requires --label-frame");
      ft::ModelBundle bundle = load_model(probe_mf);
      auto stories = ft::load_stories(pr_stories);
      std::vector<std::string> ids, texts;
      std::vector<int> labels;
      for (const auto& s : stories) {
        ids.push_back(s.id);
        texts.push_back(s.text);
        labels.push_back(s.frame_label == pr_label_frame ? 1 : 0);
      }
      ds = ft::extract_activations(bundle, ids, texts, labels, pr_layer);
    } else {
      throw ft::Error(ft::ErrorCategory::config,
                      "pass --data or --stories");
    }
    auto [train, test] =
        ft::split_stratified(ds, static_cast<float>(pr_holdout), pr_seed);
    ft::FitParams fp;
    fp.l2 = static_cast<float>(pr_l2);
    ft::ProbeReportRow row;
    row.frame = pr_name.empty()
                    ? (pr_label_frame.empty() ? "probe" : pr_label_frame)
                    : pr_name;
    for (std::size_t k : pr_ks) {
      auto dims = k < ds.features.cols
                      ? ft::rfe_select(train, k, fp)
                      : [&] {
                          std::vector<std::size_t> all(ds.features.cols);
                          std::iota(all.begin(), all.end(), 0);
                          return all;
                        }();
      auto pm = ft::fit_logistic(train, dims, fp);
      float f1_train = ft::evaluate_probe(pm, train).f1;
      float f1_test = ft::evaluate_probe(pm, test).f1;
      if (k == pr_ks.front()) {
        row.f1_5_train = f1_train;
        row.f1_5_test = f1_test;
      } else {
        row.f1_1_train = f1_train;
        row.f1_1_test = f1_test;
      }
      if (k == 1 && !dims.empty()) row.top_dim = dims[0];
    }
    write_text(pr_out, ft::probe_report_csv({row}));
  });

  // ---- render ----
  auto* c_render = app.add_subcommand(
      "render", "Re-emit a saved JSON trace grid as csv, json, or svg");
  std::string rd_grid, rd_out, rd_format = "svg";
  c_render->add_option("--grid", rd_grid, "Grid JSON input")->required();
  c_render->add_option("--out", rd_out, "Output path")->required();
  c_render->add_option("--format", rd_format, "csv, json, or svg");
  c_render->callback([&]() {
    auto grid = ft::load_grid_json(rd_grid);
    ft::emit_grid(grid, ft::grid_format_from_string(rd_format), rd_out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "ERROR:usage: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CLI::ParseError&) {
    return 2;  // unreachable; CLI11_PARSE handles it
  } catch (const ft::Error& e) {
    std::cerr << "ERROR:" << ft::category_name(e.category()) << ": "
              << e.what() << "\n";
    return e.category() == ft::ErrorCategory::transport ? 3 : 1;
  } catch (const std::exception& e) {
    std::cerr << "ERROR:internal: " << e.what() << "\n";
    return 1;
  }
}
