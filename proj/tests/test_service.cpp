// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <random>
#include <thread>

#include "halludiag/service.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace halludiag;
using namespace halludiag::service;
using nlohmann::json;

namespace {

const std::string kPerfect =
    R"({"conclusion":"Fail","diagnosis":"The arch count is wrong.","hallucinations":["The bridge has 7 arches."],"corrected_answer":"The bridge has 4 arches."})";

json halu_gt() { return {{"label", "Halu"}, {"gt_sentences", {"The bridge has 7 arches."}}}; }

json parse(const Reply& r) { return json::parse(r.body); }

/// Exact (bitwise) equality of the numeric fields of two breakdown objects.
bool same_numbers(const json& a, const json& b) {
  for (const char* k : {"r_struct", "r_acc", "r_loc", "r_loc_raw", "total"})
    if (std::bit_cast<std::uint64_t>(a.at(k).get<double>()) != std::bit_cast<std::uint64_t>(b.at(k).get<double>()))
      return false;
  return a.at("parse_status") == b.at("parse_status") && a.at("loc_detail") == b.at("loc_detail");
}

/// A random request body and the in-process expectation for it.
std::pair<json, json> random_case(std::mt19937_64& rng, const ServiceConfig& cfg) {
  DiagnosisReport rep = testing::random_report(rng);
  rep.hallucinations = oracle::small_set(rng);
  std::string completion;
  switch (rng() % 5) {
    case 0: completion = serialize_report(rep); break;
    case 1: completion = "Analysis first.\n```json\n" + serialize_report(rep) + "\n```"; break;
    case 2: completion = serialize_report(rep).substr(0, rng() % 60); break;
    case 3: completion = testing::random_utf8(rng, 200); break;
    default: completion = testing::random_bytes(rng, 200);
  }
  // Whatever reaches the wire is what the JSON encoder makes of it.
  completion = json::parse(io::dump(json(completion))).get<std::string>();
  GroundTruth gt;
  gt.label = (rng() & 1) ? Label::Halu : Label::NonHalu;
  if (gt.label == Label::Halu) {
    do gt.gt_sentences = oracle::small_set(rng);
    while (gt.gt_sentences.empty());
  }
  json body = {{"completion", completion}};
  RewardConfig rc = cfg.reward;
  const auto gt_json = halludiag::to_json(gt);
  if (rng() & 1)
    body["ground_truth"] = gt_json;
  else
    for (const auto& [k, v] : gt_json.items()) body[k] = v;
  if (rng() % 4 == 0) {
    rc.weights = {double(rng() % 5) / 2.0, double(rng() % 7) / 3.0, 0.1 * double(rng() % 9)};
    body["weights"] = {{"w_struct", rc.weights.w_struct}, {"w_acc", rc.weights.w_acc}, {"w_loc", rc.weights.w_loc}};
  }
  return {body, json::parse(io::dump_ordered(halludiag::to_json(compute_reward(completion, gt, rc))))};
}

struct LiveServer {
  RewardServer server;
  std::jthread thread;
  explicit LiveServer(ServiceConfig cfg) : server([&] {
      cfg.port = 0;
      return cfg;
    }()) {
    REQUIRE(server.bind());
    thread = std::jthread([this] { server.listen(); });
    server.wait_until_ready();
  }
  ~LiveServer() { server.stop(); }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", server.port());
    c.set_keep_alive(true);
    c.set_tcp_nodelay(true);
    return c;
  }
};

}  // namespace

TEST_CASE("reward endpoint: documented cases", "[service]") {
  ServiceConfig cfg;
  auto r = handle_reward(json{{"completion", kPerfect}, {"ground_truth", halu_gt()}}.dump(), cfg);
  REQUIRE(r.status == 200);
  auto j = parse(r);
  CHECK(j["r_struct"] == 1.0);
  CHECK(j["r_acc"] == 1.0);
  CHECK(j["r_loc"] == 1.0);
  CHECK(j["total"] == 2.0);
  CHECK(j["version"] == std::string(kVersion));
  CHECK(j["config_fingerprint"] == cfg.fingerprint());

  r = handle_reward(json{{"ground_truth", halu_gt()}}.dump(), cfg);
  CHECK(r.status == 400);
  CHECK(parse(r)["field"] == "completion");

  ServiceConfig small = cfg;
  small.max_body_bytes = 1u << 20;
  const std::string big(10u << 20, 'a');
  r = handle_reward(json{{"completion", big}, {"ground_truth", halu_gt()}}.dump(), small);
  CHECK(r.status == 413);
}

TEST_CASE("reward endpoint: ground truth shapes, weights, field paths", "[service]") {
  ServiceConfig cfg;
  json inline_body = halu_gt();
  inline_body["completion"] = kPerfect;
  const auto a = parse(handle_reward(inline_body.dump(), cfg));
  const auto b = parse(handle_reward(json{{"completion", kPerfect}, {"ground_truth", halu_gt()}}.dump(), cfg));
  CHECK(a == b);

  auto w = parse(handle_reward(
      json{{"completion", kPerfect}, {"ground_truth", halu_gt()}, {"weights", {{"w_acc", 2.0}}}}.dump(), cfg));
  CHECK(w["total"] == 1.0 + 2.0 + 0.5);

  auto err = [&](const json& body) { return parse(handle_reward(body.dump(), cfg))["field"].get<std::string>(); };
  CHECK(err({{"completion", 3}, {"ground_truth", halu_gt()}}) == "completion");
  CHECK(err({{"completion", "x"}}) == "label");
  CHECK(err({{"completion", "x"}, {"ground_truth", {{"label", "Halu"}}}}) == "ground_truth.gt_sentences");
  CHECK(err({{"completion", "x"}, {"ground_truth", {{"label", "Halu"}, {"gt_sentences", {1}}}}}) ==
        "ground_truth.gt_sentences[0]");
  CHECK(err({{"completion", "x"}, {"ground_truth", halu_gt()}, {"weights", {{"w_acc", "high"}}}}) == "weights.w_acc");
  CHECK(err({{"completion", "x"}, {"ground_truth", halu_gt()}, {"weights", {{"w_bonus", 1}}}}) == "weights.w_bonus");
  CHECK(err({{"completion", "x"}, {"ground_truth", halu_gt()}, {"weights", {{"w_acc", -1}}}}) == "weights");
  CHECK(handle_reward("{not json", cfg).status == 400);
  CHECK(handle_reward("[]", cfg).status == 400);
}

TEST_CASE("batch endpoint: order, inline errors, envelope errors", "[service]") {
  ServiceConfig cfg;
  const json good = {{"completion", kPerfect}, {"ground_truth", halu_gt()}};
  const json pass = {{"completion", R"({"conclusion":"Pass"})"}, {"label", "NonHalu"}};
  auto r = handle_batch(json::array({good, pass, good}).dump(), cfg);
  REQUIRE(r.status == 200);
  auto j = parse(r);
  REQUIRE(j.size() == 3);
  CHECK(j[0]["total"] == 2.0);
  CHECK(j[1] == parse(handle_reward(pass.dump(), cfg)));
  CHECK(j[2] == j[0]);

  r = handle_batch(json{{"items", {good, {{"completion", 1}}, pass}}}.dump(), cfg);
  j = parse(r);
  REQUIRE(j.size() == 3);
  CHECK(j[0]["total"] == 2.0);
  CHECK(j[1]["index"] == 1);
  CHECK(j[1]["field"] == "items[1].completion");
  CHECK(j[2].contains("total"));

  CHECK(handle_batch("[]", cfg).status == 400);
  CHECK(handle_batch("{}", cfg).status == 400);
  CHECK(handle_batch("{\"items\": 3}", cfg).status == 400);
  ServiceConfig tiny = cfg;
  tiny.batch_max = 2;
  CHECK(handle_batch(json::array({good, good, good}).dump(), tiny).status == 400);
}

TEST_CASE("healthz: version and fingerprint", "[service]") {
  ServiceConfig cfg;
  const auto a = parse(handle_health(cfg));
  CHECK(a["status"] == "ok");
  CHECK(a["version"] == std::string(kVersion));
  CHECK(parse(handle_health(cfg)) == a);
  ServiceConfig other = cfg;
  other.reward.weights.w_loc = 0.25;
  CHECK(parse(handle_health(other))["config_fingerprint"] != a["config_fingerprint"]);
}

TEST_CASE("config parsing and env overrides", "[service]") {
  auto c = ServiceConfig::from_json({{"port", 9000}, {"batch_max", 64}});
  CHECK(c.port == 9000);
  CHECK(c.batch_max == 64);
  CHECK_THROWS_AS(ServiceConfig::from_json({{"port", 70000}}), ConfigError);
  CHECK_THROWS_AS(ServiceConfig::from_json({{"port", "x"}}), ConfigError);
  ::setenv("HALLUDIAG_SERVE_PORT", "9100", 1);
  c.apply_env();
  CHECK(c.port == 9100);
  ::setenv("HALLUDIAG_SERVE_PORT", "abc", 1);
  CHECK_THROWS_AS(c.apply_env(), ConfigError);
  ::unsetenv("HALLUDIAG_SERVE_PORT");
}

TEST_CASE("service equivalence through the wire: 1000 random pairs", "[service][wire][property]") {
  ServiceConfig cfg;
  LiveServer live(cfg);
  auto cli = live.client();
  std::mt19937_64 rng(20240612);
  std::vector<json> bodies, expected;
  for (int i = 0; i < 1000; ++i) {
    auto [body, want] = random_case(rng, cfg);
    auto res = cli.Post("/v1/reward", body.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    const auto got = json::parse(res->body);
    INFO(body.dump());
    REQUIRE(same_numbers(got, want));
    bodies.push_back(std::move(body));
    expected.push_back(std::move(want));
  }
  // Batches equal element-wise singles.
  for (std::size_t start = 0; start < bodies.size(); start += 100) {
    json batch = json::array();
    for (std::size_t k = start; k < start + 100; ++k) batch.push_back(bodies[k]);
    auto res = cli.Post("/v1/reward/batch", batch.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    const auto got = json::parse(res->body);
    REQUIRE(got.size() == 100);
    for (std::size_t k = 0; k < 100; ++k) REQUIRE(same_numbers(got[k], expected[start + k]));
  }
}

TEST_CASE("wire: limits, health, concurrency, hostile input", "[service][wire]") {
  ServiceConfig cfg;
  cfg.max_body_bytes = 1u << 20;
  LiveServer live(cfg);
  auto cli = live.client();

  auto h = cli.Get("/healthz");
  REQUIRE(h);
  CHECK(h->status == 200);
  CHECK(json::parse(h->body)["config_fingerprint"] == cfg.fingerprint());

  const std::string big = json{{"completion", std::string(10u << 20, 'a')}, {"ground_truth", halu_gt()}}.dump();
  auto res = cli.Post("/v1/reward", big, "application/json");
  REQUIRE(res);
  CHECK(res->status == 413);

  res = cli.Post("/v1/reward", "{\"completion\": \"\xff\"}", "application/json");
  REQUIRE(res);
  CHECK(res->status == 400);
  CHECK(cli.Get("/nope")->status == 404);

  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const json body = {{"completion", testing::random_utf8(rng, 300)}, {"ground_truth", halu_gt()}};
    res = cli.Post("/v1/reward", body.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
  }

  // Identical concurrent requests get identical answers.
  const std::string body = json{{"completion", kPerfect}, {"ground_truth", halu_gt()}}.dump();
  std::vector<std::string> replies(32);
  {
    std::vector<std::jthread> ts;
    for (std::size_t t = 0; t < replies.size(); ++t)
      ts.emplace_back([&, t] {
        httplib::Client c("127.0.0.1", live.server.port());
        c.set_tcp_nodelay(true);
        if (auto r = c.Post("/v1/reward", body, "application/json"))
          replies[t] = r->body;
        else
          replies[t] = "error: " + httplib::to_string(r.error());
      });
  }
  for (const auto& r : replies) CHECK(r == replies[0]);
  CHECK_FALSE(replies[0].empty());
}

TEST_CASE("wire: busy port fails to bind", "[service][wire]") {
  LiveServer live(ServiceConfig{});
  ServiceConfig clash;
  clash.port = live.server.port();
  RewardServer second(clash);
  CHECK_FALSE(second.bind());
}
