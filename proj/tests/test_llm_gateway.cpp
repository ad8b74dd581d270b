#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <thread>

#include "diagann/errors.hpp"
#include "diagann/llm_gateway.hpp"
#include "httplib.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace diagann;
using nlohmann::json;

namespace {

// In-process OpenAI-compatible stub. Statuses are served from a queue; once
// empty every request succeeds.
class StubServer {
 public:
  StubServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const int now = ++in_flight_;
      int seen = max_in_flight_.load();
      while (now > seen && !max_in_flight_.compare_exchange_weak(seen, now)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms_));
      ++requests_;
      {
        std::lock_guard lock(mu_);
        last_auth_ = req.get_header_value("Authorization");
      }
      int status = 200;
      {
        std::lock_guard lock(mu_);
        if (!statuses_.empty()) {
          status = statuses_.front();
          statuses_.pop_front();
        }
      }
      res.status = status;
      if (status == 200) {
        const auto body = json::parse(req.body);
        const std::string last = body["messages"].back()["content"];
        res.set_content(json{{"choices", {{{"message", {{"role", "assistant"}, {"content", "echo:" + last}}}}}}}.dump(),
                        "application/json");
      } else {
        res.set_content(R"({"error":{"message":"nope"}})", "application/json");
      }
      --in_flight_;
    });
    server_.Post("/v1/embeddings", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests_;
      const auto body = json::parse(req.body);
      json data = json::array();
      const auto& input = body["input"];
      // reversed order on the wire; index decides placement
      for (std::size_t i = input.size(); i-- > 0;) {
        const std::string t = input[i];
        data.push_back({{"index", i}, {"embedding", {static_cast<double>(t.size()), 3.0, 4.0}}});
      }
      res.set_content(json{{"data", data}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  void queue(std::initializer_list<int> statuses) {
    std::lock_guard lock(mu_);
    statuses_.insert(statuses_.end(), statuses);
  }
  void set_delay(int ms) { delay_ms_ = ms; }
  int requests() const { return requests_; }
  int max_in_flight() const { return max_in_flight_; }
  std::string last_auth() {
    std::lock_guard lock(mu_);
    return last_auth_;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mu_;
  std::deque<int> statuses_;
  std::string last_auth_;
  std::atomic<int> delay_ms_{0};
  std::atomic<int> requests_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
};

ModelEndpoint endpoint_for(const StubServer& s) {
  ModelEndpoint e;
  e.name = "stub";
  e.base_url = s.base_url();
  e.model = "stub-model";
  e.timeout_seconds = 10;
  return e;
}

RateLimitPolicy fast_policy(int in_flight = 2) {
  RateLimitPolicy p;
  p.max_in_flight = in_flight;
  p.requests_per_minute = 60000;
  p.retry.max_attempts = 5;
  p.retry.base = std::chrono::milliseconds(1);
  p.retry.cap = std::chrono::milliseconds(4);
  return p;
}

RenderedPrompt prompt(const std::string& text) {
  RenderedPrompt p;
  p.messages.push_back({"user", text});
  p.target_post_id = "p";
  return p;
}

struct RecordingSleeper {
  std::shared_ptr<std::vector<std::chrono::milliseconds>> delays =
      std::make_shared<std::vector<std::chrono::milliseconds>>();
  Sleeper fn() {
    auto d = delays;
    return [d](std::chrono::milliseconds ms) { d->push_back(ms); };
  }
};

}  // namespace

TEST(Gateway, RetriesThroughRateLimitsThenSucceeds) {
  StubServer stub;
  stub.queue({429, 429});
  RecordingSleeper sleeper;
  Gateway gw(fast_policy(), nullptr, sleeper.fn());
  auto cassette = Cassette::in_memory(CassetteMode::kPassthrough);
  const auto ex = gw.complete(endpoint_for(stub), prompt("hello"), cassette);
  EXPECT_EQ(ex.attempts, 3);
  EXPECT_EQ(ex.response_text, "echo:hello");
  EXPECT_FALSE(ex.replayed);
  EXPECT_EQ(stub.requests(), 3);
  EXPECT_EQ(gw.network_calls(), 3u);
  ASSERT_EQ(sleeper.delays->size(), 2u);
  EXPECT_EQ((*sleeper.delays)[0], std::chrono::milliseconds(1));
  EXPECT_EQ((*sleeper.delays)[1], std::chrono::milliseconds(2));
}

TEST(Gateway, ServerErrorsExhaustRetries) {
  StubServer stub;
  stub.queue({500, 502, 503});
  auto policy = fast_policy();
  policy.retry.max_attempts = 3;
  Gateway gw(policy, nullptr, [](auto) {});
  auto cassette = Cassette::in_memory(CassetteMode::kPassthrough);
  try {
    gw.complete(endpoint_for(stub), prompt("x"), cassette);
    FAIL();
  } catch (const ExhaustedRetries& e) {
    EXPECT_EQ(e.attempts(), 3);
    EXPECT_EQ(e.status(), 503);
  }
}

TEST(Gateway, AuthErrorIsNotRetried) {
  StubServer stub;
  stub.queue({401});
  Gateway gw(fast_policy(), nullptr, [](auto) {});
  auto cassette = Cassette::in_memory(CassetteMode::kPassthrough);
  EXPECT_THROW(gw.complete(endpoint_for(stub), prompt("x"), cassette), AuthError);
  EXPECT_EQ(stub.requests(), 1);
}

TEST(Gateway, ClientErrorIsNotRetried) {
  StubServer stub;
  stub.queue({400});
  Gateway gw(fast_policy(), nullptr, [](auto) {});
  auto cassette = Cassette::in_memory(CassetteMode::kPassthrough);
  try {
    gw.complete(endpoint_for(stub), prompt("x"), cassette);
    FAIL();
  } catch (const AuthError&) {
    FAIL();
  } catch (const EndpointError& e) {
    EXPECT_EQ(e.status(), 400);
  }
  EXPECT_EQ(stub.requests(), 1);
}

TEST(Gateway, TransportFailureIsRetried) {
  ModelEndpoint e;
  e.name = "dead";
  e.base_url = "http://127.0.0.1:1/v1";
  e.model = "m";
  e.timeout_seconds = 1;
  auto policy = fast_policy();
  policy.retry.max_attempts = 2;
  Gateway gw(policy, nullptr, [](auto) {});
  auto cassette = Cassette::in_memory(CassetteMode::kPassthrough);
  try {
    gw.complete(e, prompt("x"), cassette);
    FAIL();
  } catch (const ExhaustedRetries& err) {
    EXPECT_EQ(err.status(), 0);
  }
  EXPECT_EQ(gw.network_calls(), 2u);
}

TEST(Gateway, BearerTokenFromEnvironment) {
  StubServer stub;
  ::setenv("DIAGANN_TEST_KEY", "sk-test-value", 1);
  auto e = endpoint_for(stub);
  e.api_key_env = "DIAGANN_TEST_KEY";
  Gateway gw(fast_policy(), nullptr, [](auto) {});
  auto cassette = Cassette::in_memory(CassetteMode::kPassthrough);
  gw.complete(e, prompt("x"), cassette);
  EXPECT_EQ(stub.last_auth(), "Bearer sk-test-value");
  e.api_key_env = "DIAGANN_TEST_KEY_UNSET";
  ::unsetenv("DIAGANN_TEST_KEY_UNSET");
  EXPECT_THROW(gw.complete(e, prompt("x"), cassette), EndpointError);
}

TEST(Gateway, InFlightNeverExceedsBound) {
  StubServer stub;
  stub.set_delay(20);
  Gateway gw(fast_policy(3), nullptr, [](auto) {});
  auto cassette = Cassette::in_memory(CassetteMode::kPassthrough);
  std::vector<RenderedPrompt> prompts;
  for (int i = 0; i < 24; ++i) prompts.push_back(prompt("p" + std::to_string(i)));
  std::size_t last_done = 0;
  const auto results = gw.complete_all(endpoint_for(stub), prompts, cassette,
                                       [&](std::size_t done, std::size_t total) {
                                         EXPECT_EQ(total, 24u);
                                         EXPECT_GT(done, last_done);
                                         last_done = done;
                                       });
  EXPECT_EQ(last_done, 24u);
  ASSERT_EQ(results.size(), 24u);
  for (std::size_t i = 0; i < results.size(); ++i) {
    ASSERT_TRUE(results[i].exchange.has_value());
    EXPECT_EQ(results[i].exchange->response_text, "echo:p" + std::to_string(i));
  }
  EXPECT_LE(stub.max_in_flight(), 3);
  EXPECT_GE(stub.max_in_flight(), 2);
}

TEST(Gateway, SharedBoundAcrossCallerThreads) {
  StubServer stub;
  stub.set_delay(10);
  Gateway gw(fast_policy(2), nullptr, [](auto) {});
  auto cassette = Cassette::in_memory(CassetteMode::kPassthrough);
  const auto e = endpoint_for(stub);
  {
    std::vector<std::jthread> callers;
    for (int t = 0; t < 6; ++t)
      callers.emplace_back([&, t] {
        for (int i = 0; i < 3; ++i) gw.complete(e, prompt(std::to_string(t * 10 + i)), cassette);
      });
  }
  EXPECT_EQ(stub.requests(), 18);
  EXPECT_LE(stub.max_in_flight(), 2);
}

TEST(Gateway, TokenBucketPacesRequests) {
  StubServer stub;
  auto policy = fast_policy(1);
  policy.requests_per_minute = 600;  // one token per 100 ms, burst of 1
  Gateway gw(policy, nullptr, [](auto) {});
  auto cassette = Cassette::in_memory(CassetteMode::kPassthrough);
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < 4; ++i) gw.complete(endpoint_for(stub), prompt(std::to_string(i)), cassette);
  const auto elapsed = std::chrono::steady_clock::now() - start;
  EXPECT_GE(elapsed, std::chrono::milliseconds(280));
}

TEST(Gateway, RecordThenReplayMakesNoNetworkCalls) {
  StubServer stub;
  const auto dir = std::filesystem::temp_directory_path() / "diagann_gateway_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto path = dir / "cassette.jsonl";
  std::vector<RenderedPrompt> prompts = {prompt("one"), prompt("two"), prompt("three")};
  {
    Gateway gw(fast_policy(), nullptr, [](auto) {});
    auto rec = Cassette::open(path, CassetteMode::kRecord);
    for (const auto& p : prompts) gw.complete(endpoint_for(stub), p, rec);
    EXPECT_EQ(gw.network_calls(), 3u);
  }
  const int before = stub.requests();
  Gateway gw(fast_policy(), nullptr, [](auto) {});
  auto replay = Cassette::open(path, CassetteMode::kReplay);
  EXPECT_EQ(replay.size(), 3u);
  for (const auto& p : prompts) {
    const auto ex = gw.complete(endpoint_for(stub), p, replay);
    EXPECT_TRUE(ex.replayed);
    EXPECT_EQ(ex.attempts, 0);
    EXPECT_EQ(ex.response_text, "echo:" + p.messages[0].content);
  }
  EXPECT_EQ(gw.network_calls(), 0u);
  EXPECT_EQ(stub.requests(), before);
  try {
    gw.complete(endpoint_for(stub), prompt("four"), replay);
    FAIL();
  } catch (const ReplayMiss& e) {
    EXPECT_EQ(e.fingerprint(), request_fingerprint(endpoint_for(stub), prompt("four").messages));
  }
  EXPECT_EQ(gw.network_calls(), 0u);
  std::filesystem::remove_all(dir);
}

TEST(Gateway, ReplayNeedsExistingCassette) {
  EXPECT_THROW(Cassette::open("/nonexistent/dir/cassette.jsonl", CassetteMode::kReplay), Error);
}

TEST(Gateway, FingerprintCoversModelTemperatureAndMessages) {
  ModelEndpoint a;
  a.model = "m";
  const auto msgs = prompt("hi").messages;
  const std::string base = request_fingerprint(a, msgs);
  EXPECT_EQ(base.size(), 64u);
  EXPECT_EQ(base, request_fingerprint(a, msgs));
  ModelEndpoint b = a;
  b.base_url = "http://elsewhere";
  b.timeout_seconds = 3;
  b.api_key_env = "OTHER";
  EXPECT_EQ(request_fingerprint(b, msgs), base);
  b.temperature = 0.5;
  EXPECT_NE(request_fingerprint(b, msgs), base);
  ModelEndpoint c = a;
  c.model = "n";
  EXPECT_NE(request_fingerprint(c, msgs), base);
  EXPECT_NE(request_fingerprint(a, prompt("hi!").messages), base);
  EXPECT_NE(embedding_fingerprint(a, {"hi"}), base);
}

TEST(Gateway, CassetteLinesRoundTripAndRejectGarbage) {
  ChatExchange ex;
  ex.fingerprint = "abc";
  ex.model = "m";
  ex.messages = {{"user", "q \"quoted\"\nline"}};
  ex.response_text = "r";
  const auto back = Cassette::parse_lines(Cassette::to_line(ex) + "\n");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].response_text, "r");
  EXPECT_EQ(back[0].messages, ex.messages);
  try {
    Cassette::parse_lines(Cassette::to_line(ex) + "\nnot json\n");
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.record(), 1u);
  }
}

TEST(Gateway, EmbeddingsAreUnitNormAndOrdered) {
  StubServer stub;
  Gateway gw(fast_policy(), nullptr, [](auto) {});
  auto cassette = Cassette::in_memory(CassetteMode::kRecord);
  const auto vecs = gw.embed(endpoint_for(stub), {"", "abcd"}, cassette);
  ASSERT_EQ(vecs.size(), 2u);
  for (const auto& v : vecs) {
    double norm = 0;
    for (const double x : v) norm += x * x;
    EXPECT_NEAR(norm, 1.0, 1e-12);
  }
  EXPECT_NEAR(vecs[0][0], 0.0, 1e-12);
  EXPECT_NEAR(vecs[1][0], 4.0 / std::sqrt(41.0), 1e-12);
  EXPECT_THROW(gw.embed(endpoint_for(stub), {}, cassette), PreconditionError);

  EmbeddingSimilarity sim(gw, endpoint_for(stub), cassette);
  EXPECT_NEAR(sim.similarity("abcd", "wxyz"), 1.0, 1e-12);
  const std::size_t calls = gw.network_calls();
  sim.similarity("abcd", "wxyz");
  EXPECT_EQ(gw.network_calls(), calls);
}

TEST(Gateway, BackoffSchedule) {
  RetrySchedule s;
  s.base = std::chrono::milliseconds(100);
  s.cap = std::chrono::milliseconds(1000);
  EXPECT_EQ(s.delay_after(1).count(), 100);
  EXPECT_EQ(s.delay_after(2).count(), 200);
  EXPECT_EQ(s.delay_after(4).count(), 800);
  EXPECT_EQ(s.delay_after(5).count(), 1000);
  EXPECT_EQ(s.delay_after(60).count(), 1000);
}

TEST(Gateway, PolicyValidation) {
  RateLimitPolicy p;
  p.max_in_flight = 0;
  EXPECT_THROW(Gateway(p, nullptr, nullptr), PreconditionError);
}
