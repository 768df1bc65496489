#pragma once

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "frametrace/error.hpp"

namespace frametrace {

struct Endpoint {
  std::string base_url;
  std::string api_key_env;
  std::string model;
  double timeout_s = 30.0;
  int max_retries = 3;
  double backoff_base_s = 0.5;

  void validate() const {
    if (base_url.empty())
      throw Error(ErrorCategory::config, "endpoint base_url is empty");
    if (model.empty())
      throw Error(ErrorCategory::config, "endpoint model is empty");
    if (timeout_s <= 0)
      throw Error(ErrorCategory::config, "endpoint timeout must be positive");
    if (max_retries < 0)
      throw Error(ErrorCategory::config, "endpoint max_retries negative");
  }
};

struct ChatMessage {
  std::string role;  // system | user | assistant
  std::string content;
};

// Serializes appends from concurrent requests.
class TranscriptWriter {
 public:
  explicit TranscriptWriter(const std::string& path) : path_(path) {}

  void append(const nlohmann::json& request, const nlohmann::json& response,
              int attempt_count) {
    std::lock_guard<std::mutex> lock(mu_);
    std::ofstream out(path_, std::ios::app);
    if (!out) throw Error(ErrorCategory::io, "cannot append: " + path_);
    nlohmann::json j;
    j["timestamp"] = now_iso();
    j["request"] = request;
    j["response"] = response;
    j["attempt_count"] = attempt_count;
    out << j.dump() << "\n";
  }

 private:
  static std::string now_iso() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::tm tm_utc;
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
  }

  std::string path_;
  std::mutex mu_;
};

struct ChatResult {
  std::string content;
  int attempts = 1;  // total requests sent
};

inline ChatResult chat_complete(const Endpoint& ep,
                                const std::vector<ChatMessage>& messages,
                                double temperature,
                                std::optional<int> max_tokens = std::nullopt,
                                TranscriptWriter* transcript = nullptr) {
  ep.validate();
  for (const auto& m : messages)
    if (m.role == "user" && m.content.empty())
      throw Error(ErrorCategory::validation, "empty user message");

  nlohmann::json body;
  body["model"] = ep.model;
  body["messages"] = nlohmann::json::array();
  for (const auto& m : messages)
    body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  body["temperature"] = temperature;
  if (max_tokens) body["max_tokens"] = *max_tokens;

  httplib::Client cli(ep.base_url);
  cli.set_connection_timeout(std::chrono::milliseconds(
      static_cast<long>(ep.timeout_s * 1000)));
  cli.set_read_timeout(
      std::chrono::milliseconds(static_cast<long>(ep.timeout_s * 1000)));

  httplib::Headers headers;
  if (!ep.api_key_env.empty()) {
    const char* key = std::getenv(ep.api_key_env.c_str());
    if (!key)
      throw Error(ErrorCategory::config,
                  "API key environment variable not set: " + ep.api_key_env);
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  std::string payload = body.dump();
  std::string last_failure = "no attempt made";
  for (int attempt = 0; attempt <= ep.max_retries; ++attempt) {
    if (attempt > 0) {
      double wait = ep.backoff_base_s * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(
          std::chrono::milliseconds(static_cast<long>(wait * 1000)));
    }
    auto res = cli.Post("/v1/chat/completions", headers, payload,
                        "application/json");
    if (!res) {
      last_failure = "connection failure: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_failure = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status >= 400)
      throw Error(ErrorCategory::request,
                  "HTTP " + std::to_string(res->status) + ": " + res->body);
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCategory::protocol,
                  "response is not JSON: " + res->body.substr(0, 200));
    }
    if (!reply.contains("choices") || !reply["choices"].is_array() ||
        reply["choices"].empty() ||
        !reply["choices"][0].contains("message") ||
        !reply["choices"][0]["message"].contains("content"))
      throw Error(ErrorCategory::protocol,
                  "response missing choices[0].message.content");
    ChatResult out;
    out.content = reply["choices"][0]["message"]["content"].get<std::string>();
    out.attempts = attempt + 1;
    if (transcript) transcript->append(body, reply, out.attempts);
    return out;
  }
  throw Error(ErrorCategory::transport,
              "retries exhausted after " +
                  std::to_string(ep.max_retries + 1) + " attempts (" +
                  last_failure + ")");
}

// ---- prompt templates ----

inline std::string substitute_frame(const std::string& tmpl,
                                    const std::string& frame_name) {
  std::string out = tmpl;
  auto pos = out.find("XXX");
  out.replace(pos, 3, frame_name);
  return out;
}

inline std::string build_generation_prompt(const std::string& frame_name,
                                           const std::string& source_kind) {
  std::string tmpl;
  if (source_kind == "original")
    tmpl =
        "Please write a short original story which evokes/invokes the "
        "\"XXX\" frame (max one paragraph).";
  else if (source_kind == "bible")
    tmpl =
        "Please pick a short passage from the Bible which evokes/invokes "
        "the \"XXX\" frame (max one paragraph).";
  else if (source_kind == "scifi")
    tmpl =
        "Please describe a short story from a scifi novel or movie which "
        "evokes/invokes the \"XXX\" frame (max one paragraph).";
  else
    throw Error(ErrorCategory::config,
                "unknown source kind '" + source_kind + "'");
  return substitute_frame(tmpl, frame_name);
}

inline std::string build_percentage_prompt(const std::string& frame_name,
                                           const std::string& text) {
  std::string tmpl =
      "What percentage does the following text evoke the \"XXX\" frame? "
      "(Please give just the percentage with no additional words)";
  return substitute_frame(tmpl, frame_name) + "\n\n" + text;
}

inline std::string build_open_frames_prompt(const std::string& text) {
  return std::string(
             "Can you tell me which major cognitive frames are evoked by "
             "the following text? (Please keep your answer strictly short "
             "and name max 5 frames with no explanation)") +
         "\n\n" + text;
}

constexpr double kGenerationTemperature = 0.7;
constexpr double kRecognitionTemperature = 0.0;

// first maximal digit run, optional trailing %
inline int parse_percentage(const std::string& reply) {
  std::size_t i = 0;
  while (i < reply.size() && !std::isdigit(static_cast<unsigned char>(reply[i])))
    ++i;
  if (i == reply.size())
    throw Error(ErrorCategory::parse, "no percentage in reply: " + reply);
  std::size_t j = i;
  long v = 0;
  while (j < reply.size() &&
         std::isdigit(static_cast<unsigned char>(reply[j]))) {
    v = v * 10 + (reply[j] - '0');
    if (v > 1000) break;
    ++j;
  }
  if (v > 100)
    throw Error(ErrorCategory::range,
                "percentage out of range in reply: " + reply);
  return static_cast<int>(v);
}

inline std::vector<std::string> split_frames_reply(const std::string& reply) {
  std::vector<std::string> items;
  std::string cur;
  auto flush = [&]() {
    // trim whitespace, then strip a leading bullet or "N." numbering
    std::size_t b = cur.find_first_not_of(" \t\r");
    std::size_t e = cur.find_last_not_of(" \t\r");
    std::string s = (b == std::string::npos) ? "" : cur.substr(b, e - b + 1);
    std::size_t k = 0;
    while (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) ++k;
    if (k > 0 && k < s.size() && (s[k] == '.' || s[k] == ')'))
      s = s.substr(k + 1);
    else if (!s.empty() && (s[0] == '-' || s[0] == '*'))
      s = s.substr(1);
    b = s.find_first_not_of(" \t");
    e = s.find_last_not_of(" \t");
    s = (b == std::string::npos) ? "" : s.substr(b, e - b + 1);
    if (!s.empty() && items.size() < 5) items.push_back(s);
    cur.clear();
  };
  for (char c : reply) {
    if (c == '\n' || c == ',')
      flush();
    else
      cur.push_back(c);
  }
  flush();
  if (items.empty())
    throw Error(ErrorCategory::parse, "no frames in reply: " + reply);
  return items;
}

inline std::string generate_story(const Endpoint& ep,
                                  const std::string& frame_name,
                                  const std::string& source_kind,
                                  TranscriptWriter* transcript = nullptr) {
  std::vector<ChatMessage> msgs = {
      {"user", build_generation_prompt(frame_name, source_kind)}};
  return chat_complete(ep, msgs, kGenerationTemperature, std::nullopt,
                       transcript)
      .content;
}

inline int query_frame_percentage(const Endpoint& ep, const std::string& text,
                                  const std::string& frame_name,
                                  TranscriptWriter* transcript = nullptr) {
  if (text.empty()) throw Error(ErrorCategory::validation, "empty story text");
  std::vector<ChatMessage> msgs = {
      {"user", build_percentage_prompt(frame_name, text)}};
  std::string reply =
      chat_complete(ep, msgs, kRecognitionTemperature, std::nullopt,
                    transcript)
          .content;
  return parse_percentage(reply);
}

inline std::vector<std::string> query_open_frames(
    const Endpoint& ep, const std::string& text,
    TranscriptWriter* transcript = nullptr) {
  if (text.empty()) throw Error(ErrorCategory::validation, "empty story text");
  std::vector<ChatMessage> msgs = {{"user", build_open_frames_prompt(text)}};
  std::string reply =
      chat_complete(ep, msgs, kRecognitionTemperature, std::nullopt,
                    transcript)
          .content;
  return split_frames_reply(reply);
}

}  // namespace frametrace
