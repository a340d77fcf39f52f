// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <deque>
#include <thread>

#include "halludiag/http_transport.hpp"
#include "halludiag/llm.hpp"
#include "halludiag/mock_backend.hpp"

using namespace halludiag;
using namespace halludiag::llm;
using namespace std::chrono_literals;

namespace {

/// Replays a fixed list of statuses, recording what was sent.
class ScriptedTransport : public HttpTransport {
 public:
  explicit ScriptedTransport(std::deque<HttpResponse> replies) : replies_(std::move(replies)) {}

  HttpResponse post(const std::string& path, const std::string& body, const HttpHeaders& headers,
                    std::chrono::milliseconds) override {
    std::lock_guard lock(mu);
    paths.push_back(path);
    bodies.push_back(body);
    last_headers = headers;
    if (replies_.empty()) return {500, "", ""};
    auto r = replies_.front();
    replies_.pop_front();
    return r;
  }

  std::mutex mu;
  std::vector<std::string> paths, bodies;
  HttpHeaders last_headers;

 private:
  std::deque<HttpResponse> replies_;
};

std::string chat_ok(const std::string& text) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", text}}}}}},
                        {"usage", {{"prompt_tokens", 5}, {"completion_tokens", 2}, {"total_tokens", 7}}}}
      .dump();
}

BackendConfig http_cfg(int retries = 3, int in_flight = 4) {
  BackendConfig c;
  c.type = "http";
  c.base_url = "http://127.0.0.1:1";
  c.model_name = "m";
  c.retries = retries;
  c.max_in_flight = in_flight;
  c.backoff_base_ms = 100;
  c.backoff_max_ms = 1000;
  return c;
}

ChatRequest hello() { return {{{Role::System, "sys"}, {Role::User, "hello"}}, "test"}; }

}  // namespace

TEST_CASE("validate_messages enforces role order", "[llm]") {
  CHECK_NOTHROW(validate_messages({{Role::User, "a"}}));
  CHECK_NOTHROW(validate_messages({{Role::System, "s"}, {Role::User, "a"}, {Role::Assistant, "b"}, {Role::User, "c"}}));
  CHECK_THROWS_AS(validate_messages({}), DataError);
  CHECK_THROWS_AS(validate_messages({{Role::System, "s"}}), DataError);
  CHECK_THROWS_AS(validate_messages({{Role::User, "a"}, {Role::User, "b"}}), DataError);
  CHECK_THROWS_AS(validate_messages({{Role::User, "a"}, {Role::Assistant, "b"}}), DataError);
  CHECK_THROWS_AS(validate_messages({{Role::Assistant, "b"}, {Role::User, "a"}}), DataError);
}

TEST_CASE("BackendConfig parsing and bounds", "[llm]") {
  auto c = BackendConfig::from_json({{"type", "http"}, {"base_url", "http://x"}, {"model", "q"}, {"retries", 10}});
  CHECK(c.model_name == "q");
  CHECK(c.retries == 10);
  CHECK_THROWS_AS(BackendConfig::from_json({{"type", "mock"}, {"retries", 11}}), ConfigError);
  CHECK_THROWS_AS(BackendConfig::from_json({{"type", "mock"}, {"max_in_flight", 0}}), ConfigError);
  CHECK_THROWS_AS(BackendConfig::from_json({{"type", "http"}}), ConfigError);
  CHECK_THROWS_AS(BackendConfig::from_json({{"type", "mock"}, {"api_key", "sk-123"}}), ConfigError);
  CHECK_THROWS_AS(BackendConfig::from_json({{"type", "grpc"}}), ConfigError);
}

TEST_CASE("retry: two transient 500s then success", "[llm]") {
  auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResponse>{{500, "", ""}, {500, "", ""}, {200, chat_ok("hi"), ""}});
  std::vector<std::chrono::milliseconds> sleeps;
  HttpBackend b(http_cfg(3), t, [&](std::chrono::milliseconds d) { sleeps.push_back(d); });
  auto ex = b.chat(hello());
  CHECK(ex.completion == "hi");
  CHECK(ex.attempts == 3);
  CHECK(ex.usage.total_tokens == 7);
  CHECK(t->paths.size() == 3);
  CHECK(t->paths[0] == "/v1/chat/completions");
  REQUIRE(sleeps.size() == 2);
  CHECK(sleeps[0] >= 100ms);
  CHECK(sleeps[0] <= 125ms);
  CHECK(sleeps[1] >= 200ms);
  CHECK(sleeps[1] <= 250ms);

  const auto body = nlohmann::json::parse(t->bodies[0]);
  CHECK(body["model"] == "m");
  CHECK(body["messages"][0]["role"] == "system");
  CHECK(body["messages"][1]["content"] == "hello");
}

TEST_CASE("retry: 429 and transport failures are retried", "[llm]") {
  auto t = std::make_shared<ScriptedTransport>(
      std::deque<HttpResponse>{{429, "", ""}, {0, "", "connection refused"}, {200, chat_ok("ok"), ""}});
  HttpBackend b(http_cfg(2), t, [](auto) {});
  CHECK(b.chat(hello()).attempts == 3);
}

TEST_CASE("retry: 401 is permanent and not retried", "[llm]") {
  auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResponse>{{401, "bad key", ""}, {200, chat_ok("x"), ""}});
  int sleeps = 0;
  HttpBackend b(http_cfg(5), t, [&](auto) { ++sleeps; });
  try {
    b.chat(hello());
    FAIL("expected PermanentError");
  } catch (const PermanentError& e) {
    CHECK(e.status() == 401);
  }
  CHECK(t->paths.size() == 1);
  CHECK(sleeps == 0);
}

TEST_CASE("retry: exhaustion raises a transport error after retries + 1 attempts", "[llm]") {
  for (int retries : {0, 1, 3, 10}) {
    auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResponse>{});
    HttpBackend b(http_cfg(retries), t, [](auto) {});
    try {
      b.chat(hello());
      FAIL("expected TransportError");
    } catch (const TransportError& e) {
      CHECK(e.attempts() == retries + 1);
    }
    CHECK(t->paths.size() == static_cast<std::size_t>(retries + 1));
    CHECK(b.usage().failures() == 1);
  }
}

TEST_CASE("backoff base delays are nondecreasing and capped", "[llm][property]") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 500; ++i) {
    BackendConfig c;
    c.backoff_base_ms = static_cast<double>(rng() % 1000);
    c.backoff_max_ms = c.backoff_base_ms + static_cast<double>(rng() % 100000);
    double prev = 0.0;
    for (int k = 1; k <= 10; ++k) {
      const double d = backoff_base_delay_ms(c, k);
      REQUIRE(d >= prev);
      REQUIRE(d <= c.backoff_max_ms);
      prev = d;
    }
  }
}

TEST_CASE("bearer token comes from the configured environment variable", "[llm]") {
  ::setenv("HALLUDIAG_TEST_KEY", "sk-test", 1);
  auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResponse>{{200, chat_ok("x"), ""}});
  auto cfg = http_cfg();
  cfg.api_key_env = "HALLUDIAG_TEST_KEY";
  HttpBackend b(cfg, t, [](auto) {});
  b.chat(hello());
  auto it = t->last_headers.find("Authorization");
  REQUIRE(it != t->last_headers.end());
  CHECK(it->second == "Bearer sk-test");
  ::unsetenv("HALLUDIAG_TEST_KEY");
}

TEST_CASE("in-flight cap holds under concurrent callers", "[llm]") {
  class Counting : public HttpTransport {
   public:
    HttpResponse post(const std::string&, const std::string&, const HttpHeaders&, std::chrono::milliseconds) override {
      const int now = ++current;
      int seen = peak.load();
      while (now > seen && !peak.compare_exchange_weak(seen, now)) {
      }
      std::this_thread::sleep_for(5ms);
      --current;
      return {200, chat_ok("x"), ""};
    }
    std::atomic<int> current{0}, peak{0};
  };
  for (int cap : {1, 3}) {
    auto t = std::make_shared<Counting>();
    HttpBackend b(http_cfg(0, cap), t);
    std::vector<std::jthread> threads;
    for (int i = 0; i < 12; ++i)
      threads.emplace_back([&] {
        for (int k = 0; k < 4; ++k) b.chat(hello());
      });
    threads.clear();
    CHECK(t->peak.load() <= cap);
    CHECK(t->peak.load() >= 1);
    CHECK(b.usage().requests() == 48);
  }
}

TEST_CASE("embeddings are normalized client-side", "[llm]") {
  const auto reply = nlohmann::json{{"data", {{{"index", 1}, {"embedding", {0.0, 2.0}}}, {{"index", 0}, {"embedding", {3.0, 4.0}}}}}}.dump();
  auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResponse>{{200, reply, ""}});
  HttpBackend b(http_cfg(), t, [](auto) {});
  auto v = b.embed({"a", "b"});
  REQUIRE(v.size() == 2);
  CHECK(v[0][0] == Catch::Approx(0.6f));
  CHECK(v[0][1] == Catch::Approx(0.8f));
  CHECK(v[1][1] == Catch::Approx(1.0f));
  CHECK(t->paths[0] == "/v1/embeddings");

  auto zero = std::make_shared<ScriptedTransport>(
      std::deque<HttpResponse>{{200, R"({"data":[{"index":0,"embedding":[0,0]}]})", ""}});
  HttpBackend bz(http_cfg(), zero, [](auto) {});
  CHECK_THROWS_AS(bz.embed({"a"}), BackendError);
  CHECK_THROWS_AS(b.embed({}), DataError);
}

TEST_CASE("parse_base_url", "[llm]") {
  auto p = parse_base_url("http://localhost:8080/api/");
  CHECK(p.origin == "http://localhost:8080");
  CHECK(p.prefix == "/api");
  CHECK(parse_base_url("https://h").prefix.empty());
  CHECK_THROWS_AS(parse_base_url("localhost:8080"), ConfigError);
  CHECK_THROWS_AS(parse_base_url("ftp://h"), ConfigError);
}

TEST_CASE("wire: HttpBackend against a local chat-completions server", "[llm][wire]") {
  httplib::Server srv;
  std::atomic<int> hits{0};
  std::string auth;
  srv.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    if (++hits <= 2) {
      res.status = 503;
      return;
    }
    auth = req.get_header_value("Authorization");
    const auto body = nlohmann::json::parse(req.body);
    res.set_content(chat_ok("echo:" + body["messages"].back()["content"].get<std::string>()), "application/json");
  });
  srv.Post("/v1/embeddings", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"data":[{"index":0,"embedding":[1,1,1,1]}]})", "application/json");
  });
  const int port = srv.bind_to_any_port("127.0.0.1");
  std::jthread th([&] { srv.listen_after_bind(); });
  srv.wait_until_ready();

  auto cfg = http_cfg(3);
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
  HttpBackend b(cfg, std::make_shared<HttplibTransport>(cfg.base_url), [](auto) {});
  auto ex = b.chat(hello());
  CHECK(ex.completion == "echo:hello");
  CHECK(ex.attempts == 3);
  auto v = b.embed({"x"});
  CHECK(v[0][0] == Catch::Approx(0.5f));

  // Nothing listening: transport errors exhaust the retries.
  srv.stop();
  th.join();
  CHECK_THROWS_AS(b.chat(hello()), TransportError);
}

TEST_CASE("HttpConsistencyScorer", "[llm]") {
  auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResponse>{{500, "", ""}, {200, R"({"score":0.25})", ""}});
  HttpConsistencyScorer s(t, 1.0, 2);
  CHECK(s.score("ctx", "claim") == 0.25);
  CHECK(t->paths[0] == "/v1/score");
  auto bad = std::make_shared<ScriptedTransport>(std::deque<HttpResponse>{});
  HttpConsistencyScorer s2(bad, 1.0, 1);
  CHECK_THROWS_AS(s2.score("c", "x"), ScorerError);
  auto range = std::make_shared<ScriptedTransport>(std::deque<HttpResponse>{{200, R"({"score":1.5})", ""}});
  HttpConsistencyScorer s3(range, 1.0, 0);
  CHECK_THROWS_AS(s3.score("c", "x"), ScorerError);
}

TEST_CASE("mock: deterministic, seed-sensitive, scriptable", "[llm][mock]") {
  const std::string user =
      "### Input Data\n\nContext:\nThe bridge has 4 arches. It opened in 1901.\n\nQuery: Describe it.\n"
      "Answer: The bridge has 7 arches.\n\n### Begin Execution";
  ChatRequest req{{{Role::System, "s"}, {Role::User, user}}, std::string(stage::kDiagnoseSingle)};
  MockBackend a(7), b(7);
  const auto first = a.chat(req).completion;
  CHECK(first == b.chat(req).completion);

  bool any_diff = false;
  for (std::uint64_t s = 0; s < 16 && !any_diff; ++s) any_diff |= MockBackend(s).chat(req).completion != first;
  CHECK(any_diff);

  a.script(user, "SCRIPTED");
  CHECK(a.chat(req).completion == "SCRIPTED");
  CHECK(a.calls() == 2);
  CHECK(a.calls(stage::kDiagnoseSingle) == 2);
  CHECK(a.call_log().size() == 2);

  MockBackend c(1);
  c.load_script(R"({"user": "hello", "response": "from file"})" "\n");
  CHECK(c.chat(hello()).completion == "from file");
  CHECK_THROWS_AS(c.load_script("{\"response\": \"x\"}\n"), ConfigError);
}

TEST_CASE("mock: synthesized diagnosis is a valid report that flags unsupported sentences", "[llm][mock]") {
  const std::string user =
      "### Input Data\n\nContext:\nThe bridge has 4 arches. It opened in 1901.\n\nQuery: Describe it.\n"
      "Answer: The bridge has 7 arches. It opened in 1901.\n\n### Begin Execution";
  MockBackend m(3);
  const auto out = m.chat({{{Role::System, "s"}, {Role::User, user}}, std::string(stage::kDiagnoseSingle)});
  const auto parsed = extract_report(out.completion);
  REQUIRE(parsed.status == ParseStatus::Valid);
  CHECK(parsed.report->conclusion == Conclusion::Fail);
  REQUIRE(parsed.report->hallucinations.size() == 1);
  CHECK(parsed.report->hallucinations[0] == "The bridge has 7 arches.");
  CHECK(parsed.report->corrected_answer == "The bridge has 4 arches. It opened in 1901.");
}

TEST_CASE("mock: responder hook and failure simulation", "[llm][mock]") {
  MockBackend m(0);
  m.set_responder([](const ChatRequest& r) -> std::optional<std::string> {
    if (r.stage == "fail") throw TransportError("simulated", 1);
    if (r.stage == "hook") return "hooked";
    return std::nullopt;
  });
  CHECK(m.chat({{{Role::User, "x"}}, "hook"}).completion == "hooked");
  CHECK_THROWS_AS(m.chat({{{Role::User, "x"}}, "fail"}), TransportError);
  CHECK_FALSE(m.chat({{{Role::User, "x"}}, "other"}).completion.empty());
}

TEST_CASE("mock embeddings: unit norm, deterministic, similarity-bearing", "[llm][mock]") {
  MockBackend m(5);
  auto v = m.embed({"a", "a", "the red rose blooms", "red rose garden", "copper mining tunnels"});
  for (const auto& x : v) {
    double ss = 0;
    for (float f : x) ss += double(f) * f;
    CHECK(std::sqrt(ss) == Catch::Approx(1.0).margin(1e-6));
  }
  CHECK(v[0] == v[1]);
  CHECK(cosine(v[0], v[1]) == Catch::Approx(1.0).margin(1e-6));
  CHECK(cosine(v[2], v[3]) > cosine(v[2], v[4]));
  CHECK(MockBackend(5).embed({"a"})[0] == v[0]);

  m.script_embedding("custom", {0.0f, 2.0f});
  CHECK(m.embed({"custom"})[0] == std::vector<float>{0.0f, 1.0f});
}

TEST_CASE("mock usage accounting", "[llm][mock]") {
  MockBackend m(0);
  m.chat(hello());
  m.chat(hello());
  CHECK(m.usage().requests() == 2);
  CHECK(m.usage().prompt_tokens() == 4);
  BackendConfig cfg;
  cfg.cost_per_1k_prompt = 1000.0;
  CHECK(m.usage().cost(cfg) == Catch::Approx(4.0));
}

TEST_CASE("mock helpers: perturbation and softening", "[llm][mock]") {
  CHECK(mock::soften_number("The town had 3,900 people.") == "The town had nearly 4,000 people.");
  CHECK(mock::soften_number("It drew 4,000 visitors.") == "It drew about 4,000 visitors.");
  CHECK(mock::soften_number("It has 42 arches.") == "It has more than 40 arches.");
  CHECK_FALSE(mock::soften_number("No digits here.").has_value());

  const auto ctx = mock::token_set("The rose is red and it has 4 petals.");
  auto p = mock::perturb("It has 4 petals.", ctx, 0);
  REQUIRE(p);
  CHECK(*p != "It has 4 petals.");
  CHECK_FALSE(mock::supported(*p, ctx));
  auto w = mock::perturb("The rose is red.", ctx, 1);
  REQUIRE(w);
  CHECK_FALSE(mock::supported(*w, ctx));
}
