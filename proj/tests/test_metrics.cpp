// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "halludiag/metrics.hpp"
#include "oracles.hpp"

using namespace halludiag;

namespace {
constexpr auto H = Label::Halu;
constexpr auto N = Label::NonHalu;

ConfusionCounts counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn, std::uint64_t tn) {
  ConfusionCounts c;
  c.tp = tp;
  c.fp = fp;
  c.fn = fn;
  c.tn = tn;
  return c;
}
}  // namespace

TEST_CASE("accumulate", "[metrics]") {
  auto c = accumulate({H, N}, {H, N});
  CHECK(c == counts(1, 0, 0, 1));
  CHECK(accumulate({H}, {N}).fp == 1);
  c = accumulate({H, N, H, N}, {N, N, H, H});
  CHECK(c.n() == 4);
  CHECK(c == counts(1, 1, 1, 1));
  CHECK_THROWS_AS(accumulate({H}, {H, N}), DataError);
}

TEST_CASE("detection_metrics: hand-computed fixtures", "[metrics]") {
  // Expected values computed by hand from the confusion matrices.
  auto r = detection_metrics(counts(5, 0, 0, 5));
  CHECK(r.macro_f1 == 1.0);
  CHECK(r.accuracy == 1.0);
  CHECK(r.macro_p == 1.0);
  CHECK(r.macro_r == 1.0);

  r = detection_metrics(counts(1, 1, 1, 1));
  CHECK(r.macro_f1 == Catch::Approx(0.5).margin(1e-9));
  CHECK(r.accuracy == Catch::Approx(0.5).margin(1e-9));

  // Halu precision is 0/0 -> 0; NonHalu P = 0.5, R = 1, F1 = 2/3.
  r = detection_metrics(counts(0, 0, 2, 2));
  CHECK(r.halu.precision == 0.0);
  CHECK(r.halu.f1 == 0.0);
  CHECK(r.non_halu.f1 == Catch::Approx(2.0 / 3.0).margin(1e-9));
  CHECK(r.macro_f1 == Catch::Approx(1.0 / 3.0).margin(1e-9));
  CHECK(r.macro_p == Catch::Approx(0.25).margin(1e-9));
  CHECK(r.macro_r == Catch::Approx(0.5).margin(1e-9));

  // NonHalu class absent: its recall is 0/0 -> 0.
  r = detection_metrics(counts(7, 0, 0, 0));
  CHECK(r.non_halu.recall == 0.0);
  CHECK(r.macro_f1 == Catch::Approx(0.5).margin(1e-9));
  CHECK(r.accuracy == 1.0);

  CHECK_THROWS_AS(detection_metrics(ConfusionCounts{}), DataError);
}

TEST_CASE("property: metrics match the oracle and are label-symmetric", "[metrics][property]") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 5000; ++i) {
    const auto c = counts(rng() % 6, rng() % 6, rng() % 6, rng() % 6);
    if (c.n() == 0) continue;
    const auto r = detection_metrics(c);
    const auto o = oracle::macro_from_counts(double(c.tp), double(c.fp), double(c.fn), double(c.tn));
    REQUIRE(std::abs(r.macro_p - o.macro_p) <= 1e-9);
    REQUIRE(std::abs(r.macro_r - o.macro_r) <= 1e-9);
    REQUIRE(std::abs(r.macro_f1 - o.macro_f1) <= 1e-9);
    REQUIRE(std::abs(r.accuracy - o.accuracy) <= 1e-9);

    // Swap the roles of the two classes.
    const auto s = detection_metrics(counts(c.tn, c.fn, c.fp, c.tp));
    REQUIRE(std::abs(s.macro_f1 - r.macro_f1) <= 1e-12);
    REQUIRE(std::abs(s.macro_p - r.macro_p) <= 1e-12);
    REQUIRE(std::abs(s.accuracy - r.accuracy) <= 1e-12);

    const bool error_free = c.fp == 0 && c.fn == 0 && c.tp > 0 && c.tn > 0;
    REQUIRE((r.macro_f1 == 1.0) == error_free);
  }
}

TEST_CASE("property: counts are order-invariant and mergeable", "[metrics][property]") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 500; ++i) {
    std::vector<Label> p(1 + rng() % 30), g(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] = (rng() & 1) ? H : N;
      g[k] = (rng() & 1) ? H : N;
    }
    const auto whole = accumulate(p, g);
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<Label> ps, gs;
    for (auto k : idx) {
      ps.push_back(p[k]);
      gs.push_back(g[k]);
    }
    REQUIRE(accumulate(ps, gs) == whole);
    const auto cut = p.size() / 2;
    auto left = accumulate({p.begin(), p.begin() + cut}, {g.begin(), g.begin() + cut});
    left += accumulate({p.begin() + cut, p.end()}, {g.begin() + cut, g.end()});
    REQUIRE(left == whole);
  }
}

TEST_CASE("hit_rate equals clamped reward_loc", "[metrics]") {
  CHECK(hit_rate({"a b c"}, {"a b c", "d e f"}) == 0.5);
  CHECK(hit_rate({"a b c", "a b"}, {"a b c"}) == 1.0);
  CHECK(hit_rate({}, {}) == 1.0);
  CHECK(hit_rate({}, {"a"}) == 0.0);

  std::mt19937_64 rng(12);
  for (int i = 0; i < 1000; ++i) {
    auto p = oracle::small_set(rng);
    auto g = oracle::small_set(rng);
    REQUIRE(hit_rate(p, g) == reward_loc(p, g).clamped);
  }
}

TEST_CASE("span_validity", "[metrics]") {
  const std::string answer = "The rose is pink. It grew in May.";
  DiagnosisReport r{Conclusion::Fail, "", {"The rose is pink.", "It grew in May."}, ""};
  CHECK(span_validity(r, answer) == 1.0);
  r.hallucinations = {"The rose is pink.", "It was grown in May."};
  CHECK(span_validity(r, answer) == 0.5);
  r.hallucinations.clear();
  CHECK(span_validity(r, answer) == 1.0);
}

TEST_CASE("mitigation_score with the lexical fallback", "[metrics]") {
  LexicalOverlapScorer lex;
  const std::string ctx = "The committee met on Tuesday and approved the budget.";
  CHECK(mitigation_score(ctx, ctx, lex) == 1.0);
  CHECK(mitigation_score("Zebras gallop quickly.", ctx, lex) == 0.0);
  CHECK(mitigation_score("the cat sat", "the cat sat on the mat", lex) == 1.0);
  CHECK(mitigation_score("The committee rejected it.", ctx, lex) == Catch::Approx(0.5));
  CHECK(mitigation_score("", ctx, lex) == 0.0);
}

TEST_CASE("report rendering", "[metrics]") {
  DiagnosisReportCard card{1.0, 0.5, 0.75, 0.8, 0.6, 20};
  const auto table = format_table(card, "single");
  CHECK(table.find("Det-Acc") < table.find("HR"));
  CHECK(table.find("HR") < table.find("SV"));
  CHECK(table.find("SV") < table.find("Mit"));
  CHECK(table.find("Original Result") != std::string::npos);
  CHECK(table.find("75.00") != std::string::npos);
  CHECK(to_json(card)["hit_rate"] == 0.5);

  const auto det = detection_metrics(counts(1, 1, 1, 1));
  CHECK(to_json(det)["macro_f1"] == 0.5);
  CHECK(format_table(det, "x").find("50.00") != std::string::npos);
}
