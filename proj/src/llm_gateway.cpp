#include "diagann/llm_gateway.hpp"

#include <cmath>
#include <cstdlib>
#include <thread>

#include <openssl/evp.h>

#include "httplib.h"
#include "json.hpp"

#include "diagann/errors.hpp"

namespace diagann {

using nlohmann::json;
using nlohmann::ordered_json;

void ModelEndpoint::validate() const {
  if (base_url.empty()) throw PreconditionError("endpoint " + name + ": base_url is empty");
  if (model.empty()) throw PreconditionError("endpoint " + name + ": model is empty");
  if (!(temperature >= 0.0)) throw PreconditionError("endpoint " + name + ": temperature < 0");
  if (!(timeout_seconds > 0.0)) throw PreconditionError("endpoint " + name + ": timeout must be > 0");
}

std::chrono::milliseconds RetrySchedule::delay_after(int failed_attempt) const {
  const int shift = std::clamp(failed_attempt - 1, 0, 30);
  const auto scaled = base.count() * (std::int64_t{1} << shift);
  return std::chrono::milliseconds(std::min<std::int64_t>(scaled, cap.count()));
}

void RateLimitPolicy::validate() const {
  if (retry.max_attempts < 1) throw PreconditionError("retry max_attempts must be >= 1");
  if (max_in_flight < 1) throw PreconditionError("max_in_flight must be >= 1");
  if (!(requests_per_minute > 0.0)) throw PreconditionError("requests_per_minute must be > 0");
}

namespace {

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

ordered_json messages_json(const std::vector<ChatMessage>& messages) {
  ordered_json arr = ordered_json::array();
  for (const auto& m : messages) arr.push_back({{"role", m.role}, {"content", m.content}});
  return arr;
}

// "https://host:port/v1" -> ("https://host:port", "/v1")
std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto path = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path == std::string::npos) return {url, ""};
  std::string prefix = url.substr(path);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, path), prefix};
}

bool retryable(int status) { return status == 0 || status == 429 || status >= 500; }

std::vector<double> unit(std::vector<double> v) {
  double norm = 0;
  for (const double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0) || !std::isfinite(norm))
    throw EndpointError(200, "embedding has zero or non-finite norm");
  for (double& x : v) x /= norm;
  return v;
}

}  // namespace

std::string request_fingerprint(const ModelEndpoint& endpoint,
                                const std::vector<ChatMessage>& messages) {
  ordered_json j;
  j["kind"] = "chat";
  j["model"] = endpoint.model;
  j["temperature"] = endpoint.temperature;
  j["messages"] = messages_json(messages);
  return sha256_hex(j.dump());
}

std::string embedding_fingerprint(const ModelEndpoint& endpoint,
                                  const std::vector<std::string>& texts) {
  ordered_json j;
  j["kind"] = "embeddings";
  j["model"] = endpoint.model;
  j["input"] = texts;
  return sha256_hex(j.dump());
}

std::string_view to_string(CassetteMode m) {
  switch (m) {
    case CassetteMode::kRecord:
      return "record";
    case CassetteMode::kReplay:
      return "replay";
    case CassetteMode::kPassthrough:
      return "passthrough";
  }
  return "replay";
}

CassetteMode parse_cassette_mode(std::string_view s) {
  if (s == "record") return CassetteMode::kRecord;
  if (s == "replay") return CassetteMode::kReplay;
  if (s == "passthrough") return CassetteMode::kPassthrough;
  throw PreconditionError("cassette mode must be record, replay or passthrough");
}

// -- Cassette --

Cassette::Cassette(Cassette&& other) noexcept : mode_(other.mode_) {
  std::lock_guard lock(other.mu_);
  by_fingerprint_ = std::move(other.by_fingerprint_);
  appender_ = std::move(other.appender_);
}

Cassette Cassette::in_memory(CassetteMode mode) { return Cassette(mode); }

Cassette Cassette::open(const std::filesystem::path& path, CassetteMode mode) {
  Cassette c(mode);
  const bool exists = std::filesystem::exists(path);
  if (mode == CassetteMode::kReplay && !exists)
    throw Error("replay cassette not found: " + path.string());
  if (exists) {
    for (auto& ex : parse_lines(read_file(path))) {
      auto key = ex.fingerprint;
      c.by_fingerprint_.insert_or_assign(std::move(key), std::move(ex));
    }
  }
  if (mode == CassetteMode::kRecord) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    c.appender_ = std::make_unique<std::ofstream>(path, std::ios::app | std::ios::binary);
    if (!*c.appender_) throw Error("cannot open cassette for append: " + path.string());
  }
  return c;
}

std::optional<ChatExchange> Cassette::find(const std::string& fingerprint) const {
  std::lock_guard lock(mu_);
  const auto it = by_fingerprint_.find(fingerprint);
  if (it == by_fingerprint_.end()) return std::nullopt;
  return it->second;
}

void Cassette::record(const ChatExchange& exchange) {
  std::lock_guard lock(mu_);
  if (appender_) {
    *appender_ << to_line(exchange) << '\n';
    appender_->flush();
    if (!*appender_) throw SinkError("cassette append failed");
  }
  by_fingerprint_.insert_or_assign(exchange.fingerprint, exchange);
}

std::size_t Cassette::size() const {
  std::lock_guard lock(mu_);
  return by_fingerprint_.size();
}

std::string Cassette::to_line(const ChatExchange& ex) {
  ordered_json j;
  j["fingerprint"] = ex.fingerprint;
  j["kind"] = ex.embedding.empty() ? "chat" : "embeddings";
  j["model"] = ex.model;
  j["messages"] = messages_json(ex.messages);
  j["response_text"] = ex.response_text;
  if (!ex.embedding.empty()) j["embedding"] = ex.embedding;
  return j.dump();
}

std::vector<ChatExchange> Cassette::parse_lines(std::string_view content) {
  std::vector<ChatExchange> out;
  std::size_t index = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t nl = content.find('\n', pos);
    if (nl == std::string_view::npos) nl = content.size();
    const std::string_view line = content.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw SchemaError(index, "cassette line is not a JSON object");
    try {
      ChatExchange ex;
      ex.fingerprint = j.at("fingerprint").get<std::string>();
      ex.model = j.at("model").get<std::string>();
      for (const auto& m : j.at("messages"))
        ex.messages.push_back({m.at("role").get<std::string>(),
                               m.at("content").get<std::string>()});
      ex.response_text = j.at("response_text").get<std::string>();
      if (const auto it = j.find("embedding"); it != j.end())
        ex.embedding = it->get<std::vector<std::vector<double>>>();
      ex.replayed = true;
      out.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw SchemaError(index, std::string("bad cassette line: ") + e.what());
    }
    ++index;
  }
  return out;
}

// -- transport --

HttpResponse HttplibTransport::post_json(const std::string& base_url,
                                         const std::string& path,
                                         const std::string& body,
                                         const std::string& bearer_token,
                                         double timeout_seconds) {
  const auto [host, prefix] = split_url(base_url);
  httplib::Client client(host);
  const auto secs = static_cast<time_t>(timeout_seconds);
  const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!bearer_token.empty()) headers.emplace("Authorization", "Bearer " + bearer_token);
  auto res = client.Post(prefix + path, headers, body, "application/json");
  HttpResponse out;
  if (!res) {
    out.error = httplib::to_string(res.error());
    return out;
  }
  out.status = res->status;
  out.body = res->body;
  return out;
}

// -- Gateway --

Gateway::Gateway(RateLimitPolicy policy, std::shared_ptr<HttpTransport> transport,
                 Sleeper sleeper)
    : policy_(std::move(policy)),
      transport_(transport ? std::move(transport)
                           : std::make_shared<HttplibTransport>()),
      sleeper_(sleeper ? std::move(sleeper)
                       : Sleeper([](std::chrono::milliseconds d) {
                           std::this_thread::sleep_for(d);
                         })),
      tokens_(std::max(1.0, static_cast<double>(policy_.max_in_flight))),
      last_refill_(std::chrono::steady_clock::now()) {
  policy_.validate();
}

void Gateway::acquire_rate_token() {
  const double per_second = policy_.requests_per_minute / 60.0;
  const double capacity = std::max(1.0, static_cast<double>(policy_.max_in_flight));
  std::unique_lock lock(bucket_mu_);
  while (true) {
    const auto now = std::chrono::steady_clock::now();
    const double elapsed = std::chrono::duration<double>(now - last_refill_).count();
    tokens_ = std::min(capacity, tokens_ + elapsed * per_second);
    last_refill_ = now;
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return;
    }
    const auto wait = std::chrono::duration<double>((1.0 - tokens_) / per_second);
    lock.unlock();
    std::this_thread::sleep_for(wait);
    lock.lock();
  }
}

HttpResponse Gateway::send_with_retry(const ModelEndpoint& endpoint,
                                      const std::string& path,
                                      const std::string& body, int& attempts) {
  std::string token;
  if (!endpoint.api_key_env.empty()) {
    const char* value = std::getenv(endpoint.api_key_env.c_str());
    if (value == nullptr || *value == '\0')
      throw EndpointError(0, "environment variable " + endpoint.api_key_env +
                                 " is not set");
    token = value;
  }
  int last_status = 0;
  for (attempts = 1; attempts <= policy_.retry.max_attempts; ++attempts) {
    acquire_rate_token();
    HttpResponse res;
    {
      std::unique_lock lock(slot_mu_);
      slot_cv_.wait(lock, [&] { return in_flight_ < policy_.max_in_flight; });
      ++in_flight_;
    }
    try {
      ++network_calls_;
      res = transport_->post_json(endpoint.base_url, path, body, token,
                                  endpoint.timeout_seconds);
    } catch (...) {
      res.status = 0;
      res.error = "transport threw";
    }
    {
      std::lock_guard lock(slot_mu_);
      --in_flight_;
    }
    slot_cv_.notify_one();

    last_status = res.status;
    if (res.status >= 200 && res.status < 300) return res;
    if (res.status == 401 || res.status == 403) throw AuthError(res.status);
    if (!retryable(res.status))
      throw EndpointError(res.status, "endpoint returned HTTP " +
                                          std::to_string(res.status) + ": " +
                                          res.body.substr(0, 200));
    if (attempts < policy_.retry.max_attempts)
      sleeper_(policy_.retry.delay_after(attempts));
  }
  attempts = policy_.retry.max_attempts;
  throw ExhaustedRetries(last_status, attempts);
}

ChatExchange Gateway::complete(const ModelEndpoint& endpoint,
                               const RenderedPrompt& prompt, Cassette& cassette) {
  ChatExchange ex;
  ex.model = endpoint.model;
  ex.messages = prompt.messages;
  ex.fingerprint = request_fingerprint(endpoint, prompt.messages);

  if (cassette.mode() == CassetteMode::kReplay) {
    auto hit = cassette.find(ex.fingerprint);
    if (!hit) throw ReplayMiss(ex.fingerprint);
    hit->replayed = true;
    hit->attempts = 0;
    hit->latency_ms = 0;
    return *hit;
  }

  endpoint.validate();
  ordered_json req;
  req["model"] = endpoint.model;
  req["messages"] = messages_json(prompt.messages);
  req["temperature"] = endpoint.temperature;
  req["max_tokens"] = endpoint.max_tokens;

  const auto started = std::chrono::steady_clock::now();
  const HttpResponse res = send_with_retry(endpoint, "/chat/completions", req.dump(), ex.attempts);
  ex.latency_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - started).count();
  const json body = json::parse(res.body, nullptr, false);
  try {
    ex.response_text = body.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    throw EndpointError(res.status, "malformed chat completion response");
  }
  if (cassette.mode() == CassetteMode::kRecord) cassette.record(ex);
  return ex;
}

std::vector<std::vector<double>> Gateway::embed(const ModelEndpoint& endpoint,
                                                const std::vector<std::string>& texts,
                                                Cassette& cassette) {
  if (texts.empty()) throw PreconditionError("embed needs at least one text");
  const std::string fp = embedding_fingerprint(endpoint, texts);
  if (cassette.mode() == CassetteMode::kReplay) {
    const auto hit = cassette.find(fp);
    if (!hit) throw ReplayMiss(fp);
    if (hit->embedding.size() != texts.size())
      throw EndpointError(200, "cassette embedding count does not match input");
    std::vector<std::vector<double>> out;
    for (const auto& v : hit->embedding) out.push_back(unit(v));
    return out;
  }

  endpoint.validate();
  ordered_json req;
  req["model"] = endpoint.model;
  req["input"] = texts;
  int attempts = 0;
  const HttpResponse res = send_with_retry(endpoint, "/embeddings", req.dump(), attempts);
  const json body = json::parse(res.body, nullptr, false);
  std::vector<std::vector<double>> out(texts.size());
  try {
    const auto& data = body.at("data");
    if (data.size() != texts.size()) throw EndpointError(res.status, "embedding count mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::size_t index = data[i].contains("index") ? data[i].at("index").get<std::size_t>() : i;
      if (index >= out.size()) throw EndpointError(res.status, "embedding index out of range");
      out[index] = unit(data[i].at("embedding").get<std::vector<double>>());
    }
  } catch (const json::exception&) {
    throw EndpointError(res.status, "malformed embeddings response");
  }
  if (cassette.mode() == CassetteMode::kRecord) {
    ChatExchange ex;
    ex.fingerprint = fp;
    ex.model = endpoint.model;
    for (const auto& t : texts) ex.messages.push_back({"input", t});
    ex.embedding = out;
    ex.attempts = attempts;
    cassette.record(ex);
  }
  return out;
}

std::vector<CompletionResult> Gateway::complete_all(
    const ModelEndpoint& endpoint, const std::vector<RenderedPrompt>& prompts,
    Cassette& cassette,
    const std::function<void(std::size_t, std::size_t)>& progress) {
  std::vector<CompletionResult> results(prompts.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  std::mutex progress_mu;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= prompts.size()) return;
      try {
        results[i].exchange = complete(endpoint, prompts[i], cassette);
      } catch (...) {
        results[i].error = std::current_exception();
      }
      const std::size_t finished = ++done;
      if (progress) {
        std::lock_guard lock(progress_mu);
        progress(finished, prompts.size());
      }
    }
  };
  const auto workers = static_cast<std::size_t>(policy_.max_in_flight);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, prompts.size()); ++w)
      pool.emplace_back(worker);
  }
  return results;
}

// -- EmbeddingSimilarity --

const std::vector<double>& EmbeddingSimilarity::vector_for(std::string_view text) {
  if (const auto it = cache_.find(text); it != cache_.end()) return it->second;
  auto vecs = gateway_.embed(endpoint_, {std::string(text)}, cassette_);
  return cache_.emplace(std::string(text), std::move(vecs.front())).first->second;
}

double EmbeddingSimilarity::similarity(std::string_view a, std::string_view b) {
  const auto& va = vector_for(a);
  const auto& vb = vector_for(b);
  if (va.size() != vb.size()) throw EndpointError(200, "embedding dimensions differ");
  double dot = 0;
  for (std::size_t i = 0; i < va.size(); ++i) dot += va[i] * vb[i];
  return dot;
}

}  // namespace diagann
