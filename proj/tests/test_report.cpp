// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "halludiag/report.hpp"
#include "support.hpp"

using namespace halludiag;

TEST_CASE("extract_report: minimal well-formed report", "[report]") {
  auto out = extract_report(
      R"({"conclusion":"Pass","diagnosis":"ok","hallucinations":[],"corrected_answer":""})");
  CHECK(out.status == ParseStatus::Valid);
  CHECK(out.field_flags.all());
  REQUIRE(out.report);
  CHECK(out.report->conclusion == Conclusion::Pass);
  CHECK(out.report->hallucinations.empty());
}

TEST_CASE("extract_report: fenced block after prose", "[report]") {
  auto out = extract_report(
      "I think it fails. ```json {\"conclusion\":\"Fail\",\"diagnosis\":\"d\",\"hallucinations\":"
      "[\"x\"],\"corrected_answer\":\"c\"} ``` ");
  REQUIRE(out.status == ParseStatus::Valid);
  CHECK(out.report->conclusion == Conclusion::Fail);
  CHECK(out.report->hallucinations == std::vector<std::string>{"x"});
  CHECK(out.report->corrected_answer == "c");
}

TEST_CASE("extract_report: fenced block wins over an earlier prose object", "[report]") {
  auto out = extract_report(
      "Thinking about {\"conclusion\":\"Pass\"} first...\n```json\n{\"conclusion\":\"Fail\","
      "\"diagnosis\":\"d\",\"hallucinations\":[],\"corrected_answer\":\"c\"}\n```\n");
  REQUIRE(out.status == ParseStatus::Valid);
  CHECK(out.report->conclusion == Conclusion::Fail);
}

TEST_CASE("extract_report: bad conclusion and missing keys", "[report]") {
  auto out = extract_report(R"({"conclusion":"maybe"})");
  CHECK(out.status == ParseStatus::MissingFields);
  CHECK(out.field_flags == FieldFlags{false, false, false, false});
  CHECK_FALSE(out.report);
}

TEST_CASE("extract_report: no braces at all", "[report]") {
  auto out = extract_report("no braces at all");
  CHECK(out.status == ParseStatus::Malformed);
  CHECK_FALSE(out.report);
  CHECK(out.field_flags.count() == 0);
  CHECK(out.raw_excerpt == "no braces at all");
}

TEST_CASE("extract_report: conclusion is case-insensitive and trimmed", "[report]") {
  for (const char* c : {"Pass", "pass", " PASS ", "\tFail\n", "fAiL"}) {
    nlohmann::json j = {{"conclusion", c}, {"diagnosis", ""}, {"hallucinations", nlohmann::json::array()},
                        {"corrected_answer", ""}};
    CHECK(extract_report(j.dump()).status == ParseStatus::Valid);
  }
}

TEST_CASE("extract_report: non-string hallucination item clears only that flag", "[report]") {
  auto out = extract_report(
      R"({"conclusion":"Fail","diagnosis":"d","hallucinations":["a",3],"corrected_answer":"c"})");
  CHECK(out.status == ParseStatus::MissingFields);
  CHECK(out.field_flags == FieldFlags{true, true, false, true});
  CHECK_FALSE(out.hallucinations);
  CHECK(out.conclusion == Conclusion::Fail);
}

TEST_CASE("extract_report: extra keys are ignored", "[report]") {
  auto out = extract_report(
      R"({"conclusion":"Pass","diagnosis":"","hallucinations":[],"corrected_answer":"","score":0.9})");
  CHECK(out.status == ParseStatus::Valid);
}

TEST_CASE("extract_report: skips an unparsable brace region", "[report]") {
  auto out = extract_report(
      "set {x | x > 0} then {\"conclusion\":\"Pass\",\"diagnosis\":\"\",\"hallucinations\":[],"
      "\"corrected_answer\":\"\"}");
  CHECK(out.status == ParseStatus::Valid);
}

TEST_CASE("extract_report: braces inside strings do not confuse the scanner", "[report]") {
  auto out = extract_report(
      "prefix {\"conclusion\":\"Fail\",\"diagnosis\":\"has } and { inside\",\"hallucinations\":"
      "[\"a\"],\"corrected_answer\":\"x\"} suffix");
  REQUIRE(out.status == ParseStatus::Valid);
  CHECK(out.report->diagnosis == "has } and { inside");
}

TEST_CASE("extract_report: unterminated input is Malformed", "[report]") {
  CHECK(extract_report("{\"conclusion\": \"Pass\"").status == ParseStatus::Malformed);
  CHECK(extract_report(std::string(100000, '{')).status == ParseStatus::Malformed);
  CHECK(extract_report("").status == ParseStatus::Malformed);
  CHECK(extract_report("[1,2,3]").status == ParseStatus::Malformed);
}

TEST_CASE("validate flags Pass-with-spans and Fail-without-spans", "[report]") {
  DiagnosisReport r{Conclusion::Pass, "d", {"s"}, ""};
  CHECK(validate(r).pass_with_spans);
  r.conclusion = Conclusion::Fail;
  CHECK_FALSE(validate(r).any());
  r.hallucinations.clear();
  CHECK(validate(r).fail_without_spans);
}

TEST_CASE("serialize_report: canonical key order", "[report]") {
  DiagnosisReport r{Conclusion::Pass, "ok", {}, ""};
  CHECK(serialize_report(r) ==
        R"({"conclusion":"Pass","diagnosis":"ok","hallucinations":[],"corrected_answer":""})");
}

TEST_CASE("serialize_report: round-trips order and special characters", "[report]") {
  DiagnosisReport a{Conclusion::Fail, "d", {"s1", "s2"}, "c"};
  auto back = extract_report(serialize_report(a));
  REQUIRE(back.status == ParseStatus::Valid);
  CHECK(*back.report == a);

  DiagnosisReport b{Conclusion::Fail, "said \"no\"\nthen ```json {\"a\":1}``` left", {"x\ty"}, "}{"};
  back = extract_report(serialize_report(b));
  REQUIRE(back.status == ParseStatus::Valid);
  CHECK(*back.report == b);
}

TEST_CASE("property: serialize/extract round-trip over random reports", "[report][property]") {
  std::mt19937_64 rng(20240611);
  for (int i = 0; i < 2000; ++i) {
    const auto r = testing::random_report(rng);
    const auto out = extract_report(serialize_report(r));
    REQUIRE(out.status == ParseStatus::Valid);
    REQUIRE(*out.report == r);
  }
}

TEST_CASE("property: extraction is total and status-consistent", "[report][property]") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 5000; ++i) {
    const auto s = testing::random_bytes(rng, 200);
    const auto out = extract_report(s);
    if (out.status == ParseStatus::Valid) {
      REQUIRE(out.field_flags.all());
      REQUIRE(out.report);
    } else {
      REQUIRE_FALSE(out.report);
      if (out.status == ParseStatus::Malformed) REQUIRE(out.field_flags.count() == 0);
      else REQUIRE_FALSE(out.field_flags.all());
    }
  }
}
