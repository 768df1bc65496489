#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>
#include <json.hpp>

#include "frametrace/llmclient.hpp"

using namespace frametrace;

namespace {

struct MockServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::vector<nlohmann::json> requests;
  std::vector<std::string> auth_headers;
  std::mutex mu;

  explicit MockServer(
      std::function<void(const nlohmann::json&, httplib::Response&)> handler) {
    server.Post("/v1/chat/completions", [this, handler](
                                            const httplib::Request& req,
                                            httplib::Response& res) {
      nlohmann::json body = nlohmann::json::parse(req.body);
      {
        std::lock_guard<std::mutex> lock(mu);
        requests.push_back(body);
        auth_headers.push_back(req.get_header_value("Authorization"));
      }
      handler(body, res);
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this]() { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  ~MockServer() {
    server.stop();
    thread.join();
  }

  Endpoint endpoint() const {
    Endpoint ep;
    ep.base_url = "http://127.0.0.1:" + std::to_string(port);
    ep.model = "mock-model";
    ep.max_retries = 3;
    ep.backoff_base_s = 0.0;
    return ep;
  }
};

void reply_content(httplib::Response& res, const std::string& content) {
  nlohmann::json body = {
      {"choices",
       {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
  res.set_content(body.dump(), "application/json");
}

}  // namespace

TEST(ChatComplete, PassesThroughContent) {
  MockServer mock([](const nlohmann::json&, httplib::Response& res) {
    reply_content(res, "hello there");
  });
  ChatResult r = chat_complete(mock.endpoint(), {{"user", "hi"}}, 0.0);
  EXPECT_EQ(r.content, "hello there");
  EXPECT_EQ(r.attempts, 1);
}

TEST(ChatComplete, RetriesOn429ThenSucceeds) {
  std::atomic<int> calls{0};
  MockServer mock([&](const nlohmann::json&, httplib::Response& res) {
    if (calls.fetch_add(1) < 2) {
      res.status = 429;
      res.set_content("slow down", "text/plain");
    } else {
      reply_content(res, "ok");
    }
  });
  ChatResult r = chat_complete(mock.endpoint(), {{"user", "hi"}}, 0.0);
  EXPECT_EQ(r.content, "ok");
  EXPECT_EQ(r.attempts, 3);
}

TEST(ChatComplete, TransportErrorAfterExhaustedRetries) {
  MockServer mock([](const nlohmann::json&, httplib::Response& res) {
    res.status = 503;
  });
  Endpoint ep = mock.endpoint();
  ep.max_retries = 1;
  try {
    chat_complete(ep, {{"user", "hi"}}, 0.0);
    FAIL() << "expected transport error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::transport);
  }
  EXPECT_EQ(mock.requests.size(), 2u);
}

TEST(ChatComplete, ClientErrorDoesNotRetry) {
  MockServer mock([](const nlohmann::json&, httplib::Response& res) {
    res.status = 400;
    res.set_content("bad request", "text/plain");
  });
  try {
    chat_complete(mock.endpoint(), {{"user", "hi"}}, 0.0);
    FAIL() << "expected request error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::request);
  }
  EXPECT_EQ(mock.requests.size(), 1u);
}

TEST(ChatComplete, MalformedJsonIsProtocolErrorWithoutRetry) {
  MockServer mock([](const nlohmann::json&, httplib::Response& res) {
    res.set_content("not json at all", "application/json");
  });
  try {
    chat_complete(mock.endpoint(), {{"user", "hi"}}, 0.0);
    FAIL() << "expected protocol error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::protocol);
  }
  EXPECT_EQ(mock.requests.size(), 1u);

  MockServer missing([](const nlohmann::json&, httplib::Response& res) {
    res.set_content(R"({"choices":[]})", "application/json");
  });
  EXPECT_THROW(chat_complete(missing.endpoint(), {{"user", "hi"}}, 0.0),
               Error);
}

TEST(ChatComplete, SendsBearerKeyFromEnvironment) {
  setenv("FT_TEST_KEY", "sk-fixture", 1);
  MockServer mock([](const nlohmann::json&, httplib::Response& res) {
    reply_content(res, "ok");
  });
  Endpoint ep = mock.endpoint();
  ep.api_key_env = "FT_TEST_KEY";
  chat_complete(ep, {{"user", "hi"}}, 0.0);
  ASSERT_EQ(mock.auth_headers.size(), 1u);
  EXPECT_EQ(mock.auth_headers[0], "Bearer sk-fixture");
  ep.api_key_env = "FT_TEST_KEY_MISSING";
  EXPECT_THROW(chat_complete(ep, {{"user", "hi"}}, 0.0), Error);
}

TEST(Prompts, GenerationTemplatesAreByteExact) {
  EXPECT_EQ(build_generation_prompt("strict father", "original"),
            "Please write a short original story which evokes/invokes the "
            "\"strict father\" frame (max one paragraph).");
  EXPECT_EQ(build_generation_prompt("nurturing parent", "bible"),
            "Please pick a short passage from the Bible which evokes/invokes "
            "the \"nurturing parent\" frame (max one paragraph).");
  EXPECT_EQ(build_generation_prompt("Us vs. Them", "scifi"),
            "Please describe a short story from a scifi novel or movie which "
            "evokes/invokes the \"Us vs. Them\" frame (max one paragraph).");
  EXPECT_THROW(build_generation_prompt("x", "tweet"), Error);
}

TEST(Prompts, RecognitionTemplatesAreByteExact) {
  EXPECT_EQ(build_percentage_prompt("Strict Father", "Once upon a time."),
            "What percentage does the following text evoke the \"Strict "
            "Father\" frame? (Please give just the percentage with no "
            "additional words)\n\nOnce upon a time.");
  EXPECT_EQ(build_open_frames_prompt("A story."),
            "Can you tell me which major cognitive frames are evoked by the "
            "following text? (Please keep your answer strictly short and "
            "name max 5 frames with no explanation)\n\nA story.");
}

TEST(Wire, TemperaturesAndPromptsMatchOnTheWire) {
  MockServer mock([](const nlohmann::json&, httplib::Response& res) {
    reply_content(res, "85%");
  });
  Endpoint ep = mock.endpoint();
  generate_story(ep, "Strict Father", "original");
  query_frame_percentage(ep, "Some story.", "Strict Father");
  query_open_frames(ep, "Some story.");
  ASSERT_EQ(mock.requests.size(), 3u);
  EXPECT_DOUBLE_EQ(mock.requests[0]["temperature"].get<double>(), 0.7);
  EXPECT_EQ(mock.requests[0]["messages"][0]["content"],
            build_generation_prompt("Strict Father", "original"));
  EXPECT_DOUBLE_EQ(mock.requests[1]["temperature"].get<double>(), 0.0);
  EXPECT_EQ(mock.requests[1]["messages"][0]["content"],
            build_percentage_prompt("Strict Father", "Some story."));
  EXPECT_DOUBLE_EQ(mock.requests[2]["temperature"].get<double>(), 0.0);
  EXPECT_EQ(mock.requests[2]["messages"][0]["content"],
            build_open_frames_prompt("Some story."));
}

TEST(Parsing, PercentageRules) {
  EXPECT_EQ(parse_percentage("85%"), 85);
  EXPECT_EQ(parse_percentage("I'd say 70 percent."), 70);
  EXPECT_EQ(parse_percentage("0"), 0);
  EXPECT_EQ(parse_percentage("100%"), 100);
  try {
    parse_percentage("high");
    FAIL() << "expected parse error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::parse);
    EXPECT_NE(std::string(e.what()).find("high"), std::string::npos);
  }
  try {
    parse_percentage("150%");
    FAIL() << "expected range error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::range);
  }
}

TEST(Parsing, OpenFrameSplitRules) {
  EXPECT_EQ(split_frames_reply("1. Strict Father\n2. Us vs. Them"),
            (std::vector<std::string>{"Strict Father", "Us vs. Them"}));
  EXPECT_EQ(split_frames_reply("a, b, c, d, e, f, g"),
            (std::vector<std::string>{"a", "b", "c", "d", "e"}));
  EXPECT_EQ(split_frames_reply("Strict Father"),
            (std::vector<std::string>{"Strict Father"}));
  EXPECT_EQ(split_frames_reply("- Mastery Over Nature\n* Us vs. Them"),
            (std::vector<std::string>{"Mastery Over Nature", "Us vs. Them"}));
  EXPECT_THROW(split_frames_reply("  \n \n"), Error);
}

TEST(Transcript, AppendsOneLinePerCall) {
  MockServer mock([](const nlohmann::json&, httplib::Response& res) {
    reply_content(res, "50");
  });
  auto dir = std::filesystem::temp_directory_path() / "ft_llm";
  std::filesystem::create_directories(dir);
  auto path = (dir / "transcript.jsonl").string();
  std::remove(path.c_str());
  TranscriptWriter tw(path);
  query_frame_percentage(mock.endpoint(), "text", "Strict Father", &tw);
  query_frame_percentage(mock.endpoint(), "text", "Nurturing Parent", &tw);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("timestamp"));
    EXPECT_TRUE(j.contains("request"));
    EXPECT_TRUE(j.contains("response"));
    EXPECT_EQ(j["attempt_count"], 1);
    ++lines;
  }
  EXPECT_EQ(lines, 2);
}
