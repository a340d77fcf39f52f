// SPDX-License-Identifier: Apache-2.0
//
// Model backends: the chat/embedding interface every pipeline stage talks to,
// and an HTTP client for chat-completions style endpoints with bounded
// concurrency, exponential backoff, and usage accounting.
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "halludiag/io.hpp"
#include "halludiag/types.hpp"

namespace halludiag::llm {

using json = nlohmann::json;

enum class Role { System, User, Assistant };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "user";
}

struct Message {
  Role role = Role::User;
  std::string content;
};

/// Stage tags let a backend (notably the mock) know what output is expected.
namespace stage {
inline constexpr std::string_view kSeedInstruction = "seed.instruction";
inline constexpr std::string_view kSeedAnswer = "seed.answer";
inline constexpr std::string_view kInjectDirect = "inject.direct";
inline constexpr std::string_view kInjectChain = "inject.chain";
inline constexpr std::string_view kFuzzyReplace = "fuzzy.replace";
inline constexpr std::string_view kJudgeQuality = "judge.quality";
inline constexpr std::string_view kJudgeLabel = "judge.label";
inline constexpr std::string_view kEnrichTrace = "enrich.trace";
inline constexpr std::string_view kDiagnoseSingle = "diagnose.single";
inline constexpr std::string_view kPipelineDetect = "pipeline.detect";
inline constexpr std::string_view kPipelineLocate = "pipeline.locate";
inline constexpr std::string_view kPipelineFix = "pipeline.fix";
}  // namespace stage

struct ChatRequest {
  std::vector<Message> messages;
  std::string stage;
};

struct Usage {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  std::int64_t total_tokens = 0;
};

struct ChatExchange {
  std::vector<Message> messages;
  std::string completion;
  Usage usage;
  double latency_ms = 0.0;
  int attempts = 1;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

/// Retries exhausted on transport failures, 429, or 5xx.
class TransportError : public BackendError {
 public:
  TransportError(const std::string& what, int attempts) : BackendError(what), attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

/// Non-retryable rejection (4xx other than 429).
class PermanentError : public BackendError {
 public:
  PermanentError(const std::string& what, int status) : BackendError(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

/// Optional system message first, then user/assistant alternating, ending on user.
inline void validate_messages(const std::vector<Message>& messages) {
  if (messages.empty()) throw DataError("chat request has no messages");
  std::size_t i = 0;
  if (messages[0].role == Role::System) ++i;
  if (i == messages.size()) throw DataError("chat request has no user message");
  for (std::size_t k = i; k < messages.size(); ++k) {
    const Role expect = ((k - i) % 2 == 0) ? Role::User : Role::Assistant;
    if (messages[k].role != expect)
      throw DataError("chat roles must alternate user/assistant after an optional system message");
  }
  if (messages.back().role != Role::User) throw DataError("chat request must end with a user message");
}

struct BackendConfig {
  std::string type = "mock";  ///< "http" or "mock"
  std::string base_url;
  std::string model_name;
  std::string embedding_model;  ///< defaults to model_name
  std::string api_key_env;      ///< name of the env var holding the bearer token
  int max_in_flight = 4;
  double timeout_s = 60.0;
  int retries = 3;
  double temperature = 0.7;
  double top_p = 1.0;
  int max_tokens = 2048;
  double backoff_base_ms = 500.0;
  double backoff_max_ms = 30000.0;
  double jitter = 0.25;  ///< fraction of the base delay added uniformly at random
  double cost_per_1k_prompt = 0.0;
  double cost_per_1k_completion = 0.0;
  std::uint64_t seed = 0;
  std::string script;  ///< mock only: path to a scripted-response file

  void validate() const {
    if (type != "http" && type != "mock") throw ConfigError("backend.type must be \"http\" or \"mock\"");
    if (max_in_flight < 1) throw ConfigError("backend.max_in_flight must be >= 1");
    if (retries < 0 || retries > 10) throw ConfigError("backend.retries must be in [0, 10]");
    if (!(timeout_s > 0)) throw ConfigError("backend.timeout_s must be positive");
    if (type == "http" && base_url.empty()) throw ConfigError("backend.base_url is required for http");
    if (!(backoff_base_ms >= 0) || backoff_max_ms < backoff_base_ms)
      throw ConfigError("backend backoff bounds are inconsistent");
  }

  static BackendConfig from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("backend: expected an object");
    BackendConfig c;
    auto str = [&](const char* k, std::string& dst) {
      if (auto it = j.find(k); it != j.end()) {
        if (!it->is_string()) throw ConfigError(std::string("backend.") + k + ": expected a string");
        dst = it->get<std::string>();
      }
    };
    auto num = [&](const char* k, auto& dst) {
      if (auto it = j.find(k); it != j.end()) {
        if (!it->is_number()) throw ConfigError(std::string("backend.") + k + ": expected a number");
        dst = it->get<std::remove_reference_t<decltype(dst)>>();
      }
    };
    if (j.contains("api_key")) throw ConfigError("backend: API keys are read from api_key_env, not config");
    str("type", c.type);
    str("base_url", c.base_url);
    str("model", c.model_name);
    str("model_name", c.model_name);
    str("embedding_model", c.embedding_model);
    str("api_key_env", c.api_key_env);
    str("script", c.script);
    num("max_in_flight", c.max_in_flight);
    num("timeout_s", c.timeout_s);
    num("retries", c.retries);
    num("temperature", c.temperature);
    num("top_p", c.top_p);
    num("max_tokens", c.max_tokens);
    num("backoff_base_ms", c.backoff_base_ms);
    num("backoff_max_ms", c.backoff_max_ms);
    num("jitter", c.jitter);
    num("cost_per_1k_prompt", c.cost_per_1k_prompt);
    num("cost_per_1k_completion", c.cost_per_1k_completion);
    num("seed", c.seed);
    c.validate();
    return c;
  }
};

/// Backoff before retry number `retry` (1-based), without jitter:
/// base * 2^(retry-1), capped at the configured maximum.
inline double backoff_base_delay_ms(const BackendConfig& cfg, int retry) {
  const double d = cfg.backoff_base_ms * std::pow(2.0, std::max(0, retry - 1));
  return std::min(d, cfg.backoff_max_ms);
}

/// Running totals shared by every call through one backend.
class UsageMeter {
 public:
  void record(const Usage& u, int attempts) {
    requests_.fetch_add(1, std::memory_order_relaxed);
    attempts_.fetch_add(attempts, std::memory_order_relaxed);
    prompt_.fetch_add(u.prompt_tokens, std::memory_order_relaxed);
    completion_.fetch_add(u.completion_tokens, std::memory_order_relaxed);
  }
  void record_failure(int attempts) {
    failures_.fetch_add(1, std::memory_order_relaxed);
    attempts_.fetch_add(attempts, std::memory_order_relaxed);
  }

  std::int64_t requests() const { return requests_.load(); }
  std::int64_t failures() const { return failures_.load(); }
  std::int64_t attempts() const { return attempts_.load(); }
  std::int64_t prompt_tokens() const { return prompt_.load(); }
  std::int64_t completion_tokens() const { return completion_.load(); }

  double cost(const BackendConfig& cfg) const {
    return static_cast<double>(prompt_tokens()) / 1000.0 * cfg.cost_per_1k_prompt +
           static_cast<double>(completion_tokens()) / 1000.0 * cfg.cost_per_1k_completion;
  }

  json to_json(const BackendConfig& cfg) const {
    return {{"requests", requests()},           {"failures", failures()},
            {"attempts", attempts()},           {"prompt_tokens", prompt_tokens()},
            {"completion_tokens", completion_tokens()}, {"estimated_cost", cost(cfg)}};
  }

 private:
  std::atomic<std::int64_t> requests_{0}, failures_{0}, attempts_{0}, prompt_{0}, completion_{0};
};

/// Chat completion and embedding provider. Implementations are shareable
/// across threads.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual ChatExchange chat(const ChatRequest& request) = 0;
  /// One L2-normalized vector per input text.
  virtual std::vector<std::vector<float>> embed(const std::vector<std::string>& texts) = 0;
  virtual std::string name() const = 0;

  const UsageMeter& usage() const { return meter_; }

 protected:
  UsageMeter meter_;
};

using BackendPtr = std::shared_ptr<Backend>;

/// Scales to unit L2 norm; throws on an all-zero vector.
inline void normalize_l2(std::vector<float>& v) {
  double ss = 0.0;
  for (float x : v) ss += static_cast<double>(x) * x;
  if (ss <= 0.0 || !std::isfinite(ss)) throw BackendError("embedding has zero or non-finite norm");
  const double inv = 1.0 / std::sqrt(ss);
  for (float& x : v) x = static_cast<float>(x * inv);
}

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  const auto n = std::min(a.size(), b.size());
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

struct HttpResponse {
  int status = 0;  ///< 0 means the request never produced an HTTP status
  std::string body;
  std::string error;
};

using HttpHeaders = std::multimap<std::string, std::string>;

/// Minimal POST transport; swapped out in tests to count or fail requests.
class HttpTransport {
 public:
  virtual ~HttpTransport() = default;
  virtual HttpResponse post(const std::string& path, const std::string& body,
                            const HttpHeaders& headers, std::chrono::milliseconds timeout) = 0;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline void real_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

class HttpBackend final : public Backend {
 public:
  HttpBackend(BackendConfig cfg, std::shared_ptr<HttpTransport> transport, Sleeper sleeper = real_sleep)
      : cfg_(std::move(cfg)),
        transport_(std::move(transport)),
        sleeper_(std::move(sleeper)),
        slots_(cfg_.max_in_flight),
        jitter_rng_(cfg_.seed) {
    cfg_.validate();
  }

  ChatExchange chat(const ChatRequest& request) override {
    validate_messages(request.messages);
    json body = {{"model", cfg_.model_name},
                 {"temperature", cfg_.temperature},
                 {"top_p", cfg_.top_p},
                 {"max_tokens", cfg_.max_tokens}};
    auto& msgs = body["messages"] = json::array();
    for (const auto& m : request.messages)
      msgs.push_back({{"role", std::string(to_string(m.role))}, {"content", m.content}});

    const auto start = std::chrono::steady_clock::now();
    auto [resp, attempts] = post_with_retry("/v1/chat/completions", io::dump(body));
    ChatExchange ex;
    ex.messages = request.messages;
    ex.attempts = attempts;
    try {
      const auto j = json::parse(resp.body);
      ex.completion = j.at("choices").at(0).at("message").at("content").get<std::string>();
      if (auto u = j.find("usage"); u != j.end() && u->is_object()) {
        ex.usage.prompt_tokens = u->value("prompt_tokens", 0);
        ex.usage.completion_tokens = u->value("completion_tokens", 0);
        ex.usage.total_tokens = u->value("total_tokens", ex.usage.prompt_tokens + ex.usage.completion_tokens);
      }
    } catch (const json::exception& e) {
      meter_.record_failure(attempts);
      throw BackendError(std::string("unexpected chat completion payload: ") + e.what());
    }
    ex.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    meter_.record(ex.usage, attempts);
    return ex;
  }

  std::vector<std::vector<float>> embed(const std::vector<std::string>& texts) override {
    if (texts.empty()) throw DataError("embed needs at least one text");
    json body = {{"model", cfg_.embedding_model.empty() ? cfg_.model_name : cfg_.embedding_model},
                 {"input", texts}};
    auto [resp, attempts] = post_with_retry("/v1/embeddings", io::dump(body));
    std::vector<std::vector<float>> out(texts.size());
    try {
      const auto j = json::parse(resp.body);
      const auto& data = j.at("data");
      if (data.size() != texts.size()) throw BackendError("embedding count does not match input count");
      for (std::size_t k = 0; k < data.size(); ++k) {
        const auto idx = data[k].value("index", k);
        if (idx >= out.size()) throw BackendError("embedding index out of range");
        out[idx] = data[k].at("embedding").get<std::vector<float>>();
      }
    } catch (const json::exception& e) {
      meter_.record_failure(attempts);
      throw BackendError(std::string("unexpected embeddings payload: ") + e.what());
    }
    for (auto& v : out) normalize_l2(v);
    meter_.record({}, attempts);
    return out;
  }

  std::string name() const override { return "http:" + cfg_.model_name; }
  const BackendConfig& config() const { return cfg_; }

 private:
  std::pair<HttpResponse, int> post_with_retry(const std::string& path, const std::string& body) {
    HttpHeaders headers{{"Content-Type", "application/json"}};
    if (!cfg_.api_key_env.empty()) {
      if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    const auto timeout = std::chrono::milliseconds(static_cast<std::int64_t>(cfg_.timeout_s * 1000));
    std::string last_error;
    for (int attempt = 1;; ++attempt) {
      HttpResponse resp;
      {
        slots_.acquire();
        struct Release {
          std::counting_semaphore<>& s;
          ~Release() { s.release(); }
        } release{slots_};
        resp = transport_->post(path, body, headers, timeout);
      }
      if (resp.status >= 200 && resp.status < 300) return {std::move(resp), attempt};
      const bool retryable = resp.status == 0 || resp.status == 429 || resp.status >= 500;
      if (!retryable) {
        meter_.record_failure(attempt);
        throw PermanentError("HTTP " + std::to_string(resp.status) + " from " + path + ": " +
                                 resp.body.substr(0, 256),
                             resp.status);
      }
      last_error = resp.status == 0 ? resp.error : "HTTP " + std::to_string(resp.status);
      if (attempt > cfg_.retries) {
        meter_.record_failure(attempt);
        throw TransportError(path + " failed after " + std::to_string(attempt) + " attempts: " + last_error,
                             attempt);
      }
      sleeper_(std::chrono::milliseconds(static_cast<std::int64_t>(delay_ms(attempt))));
    }
  }

  double delay_ms(int retry) {
    const double base = backoff_base_delay_ms(cfg_, retry);
    std::lock_guard lock(jitter_mu_);
    std::uniform_real_distribution<double> u(0.0, base * cfg_.jitter);
    return base + u(jitter_rng_);
  }

  BackendConfig cfg_;
  std::shared_ptr<HttpTransport> transport_;
  Sleeper sleeper_;
  std::counting_semaphore<> slots_;
  std::mutex jitter_mu_;
  std::mt19937_64 jitter_rng_;
};

}  // namespace halludiag::llm
