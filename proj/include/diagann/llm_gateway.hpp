#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "diagann/evaluation.hpp"
#include "diagann/prompting.hpp"

namespace diagann {

/// An OpenAI-compatible model. The API key is referenced by environment
/// variable name and read at call time.
struct ModelEndpoint {
  std::string name;
  std::string base_url;  // e.g. https://api.openai.com/v1
  std::string model;
  std::string api_key_env;  // empty: no Authorization header
  double temperature = 0.0;
  int max_tokens = 2048;
  double timeout_seconds = 120.0;

  void validate() const;
};

struct RetrySchedule {
  int max_attempts = 5;
  std::chrono::milliseconds base{1000};
  std::chrono::milliseconds cap{30000};

  /// Backoff after the `failed_attempt`-th failure (1-based):
  /// min(cap, base * 2^(failed_attempt - 1)).
  std::chrono::milliseconds delay_after(int failed_attempt) const;
};

struct RateLimitPolicy {
  int max_in_flight = 4;
  double requests_per_minute = 60.0;
  RetrySchedule retry;

  void validate() const;
};

struct ChatExchange {
  std::string fingerprint;
  std::string model;
  std::vector<ChatMessage> messages;
  std::string response_text;
  std::vector<std::vector<double>> embedding;  // embeddings exchanges only
  double latency_ms = 0;
  int attempts = 0;  // 0 when served from a cassette
  bool replayed = false;
};

/// SHA-256 over model, temperature and messages. No clock or retry state
/// enters the hash.
std::string request_fingerprint(const ModelEndpoint& endpoint,
                                const std::vector<ChatMessage>& messages);
std::string embedding_fingerprint(const ModelEndpoint& endpoint,
                                  const std::vector<std::string>& texts);

enum class CassetteMode { kRecord, kReplay, kPassthrough };
std::string_view to_string(CassetteMode m);
CassetteMode parse_cassette_mode(std::string_view s);

/// JSON-lines log of exchanges keyed by fingerprint. Appends go through one
/// mutex and are flushed before record() returns; on load a later line for
/// the same fingerprint replaces an earlier one.
class Cassette {
 public:
  /// In replay mode the file must exist. In record mode it is created if
  /// missing and appended to otherwise.
  static Cassette open(const std::filesystem::path& path, CassetteMode mode);
  static Cassette in_memory(CassetteMode mode);

  Cassette(Cassette&& other) noexcept;
  Cassette& operator=(Cassette&&) = delete;

  CassetteMode mode() const { return mode_; }
  std::optional<ChatExchange> find(const std::string& fingerprint) const;
  void record(const ChatExchange& exchange);
  std::size_t size() const;

  /// Parses cassette lines; throws SchemaError with the line index.
  static std::vector<ChatExchange> parse_lines(std::string_view content);
  static std::string to_line(const ChatExchange& exchange);

 private:
  explicit Cassette(CassetteMode mode) : mode_(mode) {}

  CassetteMode mode_;
  mutable std::mutex mu_;
  std::map<std::string, ChatExchange> by_fingerprint_;
  std::unique_ptr<std::ofstream> appender_;
};

struct HttpResponse {
  int status = 0;  // 0: transport failure (connect, timeout)
  std::string body;
  std::string error;
};

class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post_json(const std::string& base_url,
                                 const std::string& path,
                                 const std::string& body,
                                 const std::string& bearer_token,
                                 double timeout_seconds) = 0;
};

/// cpp-httplib client; one connection per request.
class HttplibTransport final : public HttpTransport {
 public:
  HttpResponse post_json(const std::string& base_url, const std::string& path,
                         const std::string& body,
                         const std::string& bearer_token,
                         double timeout_seconds) override;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

struct CompletionResult {
  std::optional<ChatExchange> exchange;
  std::exception_ptr error;
};

/// Shared chat/embedding client. Thread-safe: concurrent calls share the
/// in-flight bound and the per-minute token bucket.
class Gateway {
 public:
  explicit Gateway(RateLimitPolicy policy,
                   std::shared_ptr<HttpTransport> transport = nullptr,
                   Sleeper sleeper = nullptr);

  /// Throws ReplayMiss, AuthError, ExhaustedRetries or EndpointError.
  ChatExchange complete(const ModelEndpoint& endpoint,
                        const RenderedPrompt& prompt, Cassette& cassette);

  /// One unit-norm vector per text, in order. PreconditionError on empty.
  std::vector<std::vector<double>> embed(const ModelEndpoint& endpoint,
                                         const std::vector<std::string>& texts,
                                         Cassette& cassette);

  /// Runs complete() for every prompt on a pool of max_in_flight workers.
  /// Results keep the prompts' order; failures are captured per prompt.
  std::vector<CompletionResult> complete_all(
      const ModelEndpoint& endpoint, const std::vector<RenderedPrompt>& prompts,
      Cassette& cassette,
      const std::function<void(std::size_t done, std::size_t total)>& progress = {});

  /// Requests actually sent to the transport, retries included.
  std::size_t network_calls() const { return network_calls_.load(); }
  const RateLimitPolicy& policy() const { return policy_; }

 private:
  HttpResponse send_with_retry(const ModelEndpoint& endpoint,
                               const std::string& path, const std::string& body,
                               int& attempts);
  void acquire_rate_token();

  RateLimitPolicy policy_;
  std::shared_ptr<HttpTransport> transport_;
  Sleeper sleeper_;
  std::atomic<std::size_t> network_calls_{0};

  std::mutex slot_mu_;
  std::condition_variable slot_cv_;
  int in_flight_ = 0;

  std::mutex bucket_mu_;
  double tokens_;
  std::chrono::steady_clock::time_point last_refill_;
};

/// Similarity through endpoint embeddings (cosine of unit vectors), cached
/// per text.
class EmbeddingSimilarity final : public SimilarityBackend {
 public:
  EmbeddingSimilarity(Gateway& gateway, ModelEndpoint endpoint, Cassette& cassette)
      : gateway_(gateway), endpoint_(std::move(endpoint)), cassette_(cassette) {}

  double similarity(std::string_view a, std::string_view b) override;
  std::string name() const override { return "endpoint:" + endpoint_.model; }

 private:
  const std::vector<double>& vector_for(std::string_view text);

  Gateway& gateway_;
  ModelEndpoint endpoint_;
  Cassette& cassette_;
  std::map<std::string, std::vector<double>, std::less<>> cache_;
};

}  // namespace diagann
