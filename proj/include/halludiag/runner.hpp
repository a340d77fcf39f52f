// SPDX-License-Identifier: Apache-2.0
//
// Diagnosis methods (single prompt, three-step pipeline) and the detection /
// diagnosis evaluation harnesses that run them over benchmark files.
#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "halludiag/io.hpp"
#include "halludiag/llm.hpp"
#include "halludiag/metrics.hpp"
#include "halludiag/report.hpp"
#include "halludiag/types.hpp"

namespace halludiag::runner {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

// Kept byte-identical to assets/prompts/*.txt (checked by the test suite).
inline constexpr std::string_view kDiagnosisSystem = R"PROMPT(### Role & Objective

You are a **Hallucination Diagnosis Expert**. Your expertise lies in the meticulous, evidence-based analysis of AI-generated answers to identify and explain any deviations from factual accuracy or contextual relevance.
Your mission is to analyze a given `Answer` against its source `Context` and the user's `Query`. Based on this analysis, you will produce a comprehensive Diagnosis Report. If the answer is hallucinated, the conclusion should be "Fail" and you should provide a detailed explanation of the hallucinations. If the answer is correct, the conclusion should be "Pass".

### Output Format

You should output a JSON object with the following keys:
- `conclusion`: A string indicating whether the answer is "Pass" or "Fail".
- `diagnosis`: A string providing a detailed explanation of the analysis, including any hallucinations
- `hallucinations`: A list of strings, each representing a hallucinated segment of the answer, if any. If there are no hallucinations, this list should be empty.
- `corrected_answer`: A string containing the corrected answer if the original answer is hallucinated, or an empty string if the answer is correct.)PROMPT";

inline constexpr std::string_view kDiagnosisUser = R"PROMPT(### Input Data

Context:
{context}

Query: {query}
Answer: {answer}

### Begin Execution)PROMPT";

inline constexpr std::string_view kPipelineDetect = R"PROMPT(### Role & Objective

You check whether an `Answer` contains any claim that is not supported by its source `Context` or that misreads the user's `Query`.

### Output Format

You should output a JSON object with the following keys:
- `hallucinated`: true if the answer contains at least one unsupported or contradicted claim, otherwise false.
- `reason`: A short explanation of the decision.)PROMPT";

inline constexpr std::string_view kPipelineLocate = R"PROMPT(### Role & Objective

The `Answer` below is known to contain claims that its source `Context` does not support. List every sentence of the answer that contains such a claim.

### Output Format

You should output a JSON object with the following keys:
- `hallucinations`: A list of strings, each copied verbatim from the answer.)PROMPT";

inline constexpr std::string_view kPipelineFix = R"PROMPT(### Role & Objective

The `Answer` below contains claims that its source `Context` does not support. Rewrite the answer so that every claim is supported by the context, changing as little as possible.

### Output Format

You should output a JSON object with the following keys:
- `corrected_answer`: A string containing the corrected answer.)PROMPT";

struct PromptSet {
  std::string system{kDiagnosisSystem};
  std::string user{kDiagnosisUser};
  std::string detect{kPipelineDetect};
  std::string locate{kPipelineLocate};
  std::string fix{kPipelineFix};

  /// Reads whichever of the five asset files exist in `dir`; the rest keep
  /// their built-in text.
  static PromptSet load(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ConfigError("prompt directory not found: " + dir.string());
    PromptSet p;
    auto maybe = [&](const char* name, std::string& slot) {
      if (fs::exists(dir / name)) slot = io::read_file(dir / name);
    };
    maybe("diagnosis_system.txt", p.system);
    maybe("diagnosis_user.txt", p.user);
    maybe("pipeline_detect.txt", p.detect);
    maybe("pipeline_locate.txt", p.locate);
    maybe("pipeline_fix.txt", p.fix);
    return p;
  }
};

/// Substitutes {context}, {query}, {answer} in one left-to-right pass, so
/// braces inside the substituted values are never re-expanded.
inline std::string fill_template(std::string_view tpl, std::string_view context, std::string_view query,
                                 std::string_view answer) {
  std::string out;
  out.reserve(tpl.size() + context.size() + query.size() + answer.size());
  for (std::size_t i = 0; i < tpl.size();) {
    if (tpl[i] == '{') {
      if (tpl.substr(i, 9) == "{context}") {
        out += context;
        i += 9;
        continue;
      }
      if (tpl.substr(i, 7) == "{query}") {
        out += query;
        i += 7;
        continue;
      }
      if (tpl.substr(i, 8) == "{answer}") {
        out += answer;
        i += 8;
        continue;
      }
    }
    out += tpl[i++];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark items
// ---------------------------------------------------------------------------

struct BenchmarkItem {
  std::string id;
  std::string context;
  std::string query;
  std::string answer;
  Label label = Label::NonHalu;
  std::optional<std::vector<std::string>> gt_sentences;
  std::optional<std::string> reference_answer;
};

namespace detail {

/// First present key among the aliases.
inline const json* field(const json& j, std::initializer_list<const char*> names) {
  for (const char* n : names)
    if (auto it = j.find(n); it != j.end() && !it->is_null()) return &*it;
  return nullptr;
}

}  // namespace detail

/// Accepts the common field spellings (passage/context, question/query,
/// answer/response, gt_sentences/halu_sentences, reference_answer/ground_truth_answer).
inline BenchmarkItem item_from_json(const json& j, std::size_t line_no) {
  if (!j.is_object()) throw DataError("expected an object");
  BenchmarkItem it;
  auto str = [&](std::initializer_list<const char*> names, const char* what, bool required) -> std::optional<std::string> {
    const json* v = detail::field(j, names);
    if (!v) {
      if (required) throw DataError(std::string(what) + ": missing");
      return std::nullopt;
    }
    if (!v->is_string()) throw DataError(std::string(what) + ": expected a string");
    return v->get<std::string>();
  };
  if (const json* id = detail::field(j, {"id", "uid", "idx"}))
    it.id = id->is_string() ? id->get<std::string>() : id->dump();
  else
    it.id = "line-" + std::to_string(line_no);
  it.context = *str({"context", "passage", "premise", "source"}, "context", true);
  it.query = str({"query", "question", "instruction"}, "query", false).value_or("");
  it.answer = *str({"answer", "response", "hypothesis", "output"}, "answer", true);

  const json* lab = detail::field(j, {"label", "gold_label"});
  if (!lab) throw DataError("label: missing");
  if (lab->is_boolean()) {
    it.label = lab->get<bool>() ? Label::Halu : Label::NonHalu;
  } else if (lab->is_string()) {
    auto l = parse_label(lab->get<std::string>());
    if (!l) throw DataError("label: unrecognized value \"" + lab->get<std::string>() + "\"");
    it.label = *l;
  } else if (lab->is_number_integer()) {
    it.label = lab->get<int>() != 0 ? Label::Halu : Label::NonHalu;
  } else {
    throw DataError("label: expected a string");
  }

  if (const json* gs = detail::field(j, {"gt_sentences", "halu_sentences", "hallucinated_sentences"})) {
    if (!gs->is_array()) throw DataError("gt_sentences: expected a list of strings");
    std::vector<std::string> v;
    for (std::size_t i = 0; i < gs->size(); ++i) {
      if (!(*gs)[i].is_string()) throw DataError("gt_sentences[" + std::to_string(i) + "]: expected a string");
      v.push_back((*gs)[i].get<std::string>());
    }
    it.gt_sentences = std::move(v);
  }
  it.reference_answer = str({"reference_answer", "ground_truth_answer"}, "reference_answer", false);
  return it;
}

struct BenchmarkLoad {
  std::vector<BenchmarkItem> items;
  std::size_t skipped = 0;
  std::vector<std::string> errors;  ///< "line N: problem"
};

inline BenchmarkLoad parse_benchmark(std::string_view jsonl) {
  BenchmarkLoad out;
  io::for_each_line(jsonl, [&](std::size_t line_no, std::string_view line) {
    try {
      out.items.push_back(item_from_json(json::parse(line), line_no));
    } catch (const json::exception& e) {
      ++out.skipped;
      out.errors.push_back("line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
    } catch (const DataError& e) {
      ++out.skipped;
      out.errors.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  });
  return out;
}

inline BenchmarkLoad load_benchmark(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("dataset not found: " + path.string());
  auto out = parse_benchmark(io::read_file(path));
  for (const auto& e : out.errors) spdlog::warn("{}: skipped {}", path.string(), e);
  return out;
}

// ---------------------------------------------------------------------------
// Diagnosis methods
// ---------------------------------------------------------------------------

enum class Method { Single, Pipeline };

inline std::string_view to_string(Method m) { return m == Method::Single ? "single" : "pipeline"; }

inline std::optional<Method> parse_method(std::string_view s) {
  if (s == "single") return Method::Single;
  if (s == "pipeline") return Method::Pipeline;
  return std::nullopt;
}

struct DiagnosisRun {
  DiagnosisReport report;                 ///< best-effort; partial fields on parse failure
  std::optional<Conclusion> conclusion;   ///< absent when no verdict could be read
  ParseStatus parse_status = ParseStatus::Malformed;
  int calls = 0;
  bool degraded = false;  ///< a later pipeline step failed
  bool errored = false;   ///< the backend gave up; excluded from aggregates
  std::string error;
  double latency_ms = 0.0;
};

namespace detail {

inline llm::ChatRequest request(std::string_view stage, std::string system, std::string user) {
  llm::ChatRequest r;
  r.stage = std::string(stage);
  r.messages = {{llm::Role::System, std::move(system)}, {llm::Role::User, std::move(user)}};
  return r;
}

inline double since_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline std::optional<bool> read_flag(const json& v) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    if (auto l = parse_label(v.get<std::string>())) return *l == Label::Halu;
  }
  return std::nullopt;
}

}  // namespace detail

/// The request the single-prompt method sends for an item.
inline llm::ChatRequest single_prompt_request(const BenchmarkItem& item, const PromptSet& prompts = {}) {
  return detail::request(llm::stage::kDiagnoseSingle, prompts.system,
                         fill_template(prompts.user, item.context, item.query, item.answer));
}

inline DiagnosisRun diagnose_single_prompt(const BenchmarkItem& item, llm::Backend& backend,
                                           const PromptSet& prompts = {}) {
  DiagnosisRun run;
  const auto t0 = std::chrono::steady_clock::now();
  run.calls = 1;
  try {
    const auto ex = backend.chat(single_prompt_request(item, prompts));
    const auto outcome = extract_report(ex.completion);
    run.parse_status = outcome.status;
    if (outcome.report) {
      run.report = *outcome.report;
      run.conclusion = outcome.report->conclusion;
    } else {
      run.conclusion = outcome.conclusion;
      if (outcome.conclusion) run.report.conclusion = *outcome.conclusion;
      if (outcome.hallucinations) run.report.hallucinations = *outcome.hallucinations;
    }
  } catch (const llm::BackendError& e) {
    run.errored = true;
    run.error = e.what();
  }
  run.latency_ms = detail::since_ms(t0);
  return run;
}

/// Detect, then (only when positive) locate and fix, one exchange each.
inline DiagnosisRun diagnose_pipeline(const BenchmarkItem& item, llm::Backend& backend,
                                      const PromptSet& prompts = {}) {
  DiagnosisRun run;
  const auto t0 = std::chrono::steady_clock::now();
  const auto user = fill_template(prompts.user, item.context, item.query, item.answer);

  std::optional<bool> positive;
  std::string reason;
  try {
    ++run.calls;
    const auto ex = backend.chat(detail::request(llm::stage::kPipelineDetect, prompts.detect, user));
    if (auto obj = locate_json_object(ex.completion); obj && obj->value.is_object()) {
      if (auto it = obj->value.find("hallucinated"); it != obj->value.end()) positive = detail::read_flag(*it);
      if (auto it = obj->value.find("reason"); it != obj->value.end() && it->is_string()) reason = it->get<std::string>();
    }
  } catch (const llm::BackendError& e) {
    run.errored = true;
    run.error = e.what();
    run.latency_ms = detail::since_ms(t0);
    return run;
  }
  if (!positive) {
    // Unreadable verdict: no conclusion, scored as wrong.
    run.latency_ms = detail::since_ms(t0);
    return run;
  }
  run.parse_status = ParseStatus::Valid;
  if (!*positive) {
    run.conclusion = Conclusion::Pass;
    run.report = {Conclusion::Pass, reason, {}, item.answer};
    run.latency_ms = detail::since_ms(t0);
    return run;
  }

  run.conclusion = Conclusion::Fail;
  run.report.conclusion = Conclusion::Fail;
  run.report.diagnosis = reason;
  auto step = [&](std::string_view stage, const std::string& system, const char* key) -> std::optional<json> {
    ++run.calls;
    try {
      const auto ex = backend.chat(detail::request(stage, system, user));
      if (auto obj = locate_json_object(ex.completion); obj && obj->value.is_object())
        if (auto it = obj->value.find(key); it != obj->value.end()) return *it;
    } catch (const llm::BackendError& e) {
      run.error = std::string(stage) + ": " + e.what();
    }
    run.degraded = true;
    return std::nullopt;
  };
  if (auto spans = step(llm::stage::kPipelineLocate, prompts.locate, "hallucinations"); spans && spans->is_array()) {
    for (const auto& s : *spans)
      if (s.is_string()) run.report.hallucinations.push_back(s.get<std::string>());
  } else if (spans) {
    run.degraded = true;
  }
  if (auto fixed = step(llm::stage::kPipelineFix, prompts.fix, "corrected_answer"); fixed && fixed->is_string())
    run.report.corrected_answer = fixed->get<std::string>();
  else if (fixed)
    run.degraded = true;
  if (run.degraded) run.parse_status = ParseStatus::MissingFields;
  run.latency_ms = detail::since_ms(t0);
  return run;
}

inline DiagnosisRun diagnose(Method m, const BenchmarkItem& item, llm::Backend& backend, const PromptSet& prompts = {}) {
  return m == Method::Single ? diagnose_single_prompt(item, backend, prompts) : diagnose_pipeline(item, backend, prompts);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
  Method method = Method::Single;
  int concurrency = 4;
  PromptSet prompts;
  std::optional<fs::path> run_log;  ///< per-item JSONL audit log
};

/// Runs every item with at most `concurrency` in flight; results are indexed
/// by item so aggregation never depends on completion order.
inline std::vector<DiagnosisRun> run_items(const std::vector<BenchmarkItem>& items, llm::Backend& backend,
                                           const EvalOptions& opt) {
  std::vector<DiagnosisRun> runs(items.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < items.size();)
      runs[i] = diagnose(opt.method, items[i], backend, opt.prompts);
  };
  const auto n = static_cast<std::size_t>(std::max(1, opt.concurrency));
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < std::min(n, items.size()); ++t) pool.emplace_back(worker);
  }
  return runs;
}

namespace detail {

inline ojson log_entry(const BenchmarkItem& item, const DiagnosisRun& r, Method m) {
  ojson j;
  j["id"] = item.id;
  j["method"] = std::string(to_string(m));
  j["calls"] = r.calls;
  j["errored"] = r.errored;
  j["degraded"] = r.degraded;
  j["parse_status"] = std::string(halludiag::to_string(r.parse_status));
  j["conclusion"] = r.conclusion ? ojson(std::string(halludiag::to_string(*r.conclusion))) : ojson();
  j["truth"] = std::string(halludiag::to_string(item.label));
  j["hallucinations"] = r.report.hallucinations;
  j["corrected_answer"] = r.report.corrected_answer;
  j["latency_ms"] = r.latency_ms;
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

inline void write_log(const std::optional<fs::path>& path, const std::vector<ojson>& entries) {
  if (!path) return;
  std::string out;
  for (const auto& e : entries) out += io::dump_ordered(e) + "\n";
  io::write_file_atomic(*path, out);
}

}  // namespace detail

struct DetectionRun {
  DetectionReport metrics;
  ConfusionCounts counts;
  std::size_t attempted = 0, scored = 0, skipped = 0, errored = 0, no_verdict = 0, calls = 0;
  double wall_ms = 0.0;
  std::vector<ojson> log;
};

/// Fail maps to Halu, Pass to NonHalu; an item without a verdict is counted
/// as the class opposite to its label.
inline DetectionRun evaluate_detection(const BenchmarkLoad& data, llm::Backend& backend, const EvalOptions& opt = {}) {
  DetectionRun out;
  out.skipped = data.skipped;
  const auto t0 = std::chrono::steady_clock::now();
  const auto runs = run_items(data.items, backend, opt);
  out.wall_ms = detail::since_ms(t0);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& item = data.items[i];
    const auto& r = runs[i];
    ++out.attempted;
    out.calls += static_cast<std::size_t>(r.calls);
    auto entry = detail::log_entry(item, r, opt.method);
    if (r.errored) {
      ++out.errored;
    } else {
      const Label predicted = r.conclusion ? to_label(*r.conclusion) : opposite(item.label);
      if (!r.conclusion) ++out.no_verdict;
      out.counts.add(predicted, item.label);
      ++out.scored;
      entry["predicted"] = std::string(halludiag::to_string(predicted));
      entry["correct"] = predicted == item.label;
    }
    out.log.push_back(std::move(entry));
  }
  detail::write_log(opt.run_log, out.log);
  if (out.scored == 0) throw Error("no item could be scored");
  out.metrics = detection_metrics(out.counts);
  return out;
}

inline DetectionRun evaluate_detection(const fs::path& dataset, llm::Backend& backend, const EvalOptions& opt = {}) {
  return evaluate_detection(load_benchmark(dataset), backend, opt);
}

struct DiagnosisEval {
  DiagnosisReportCard card;
  std::size_t attempted = 0, scored = 0, skipped = 0, errored = 0, degraded = 0, scorer_errors = 0, calls = 0;
  double wall_ms = 0.0;
  std::vector<ojson> log;
};

/// Det-Acc, hit rate, span validity and mitigation over Halu items with
/// sentence annotations. Span validity averages only items that predicted at
/// least one span; mitigation scores the corrected answer, or the original
/// answer when the correction is empty.
inline DiagnosisEval evaluate_diagnosis(const BenchmarkLoad& data, llm::Backend& backend, ConsistencyScorer& scorer,
                                        const EvalOptions& opt = {}) {
  for (const auto& item : data.items)
    if (!item.gt_sentences) throw DataError("item " + item.id + ": diagnosis evaluation needs gt_sentences");
  DiagnosisEval out;
  out.skipped = data.skipped;
  const auto t0 = std::chrono::steady_clock::now();
  const auto runs = run_items(data.items, backend, opt);
  out.wall_ms = detail::since_ms(t0);

  double det = 0, hr = 0, sv = 0, mit = 0, orig = 0;
  std::size_t sv_n = 0, mit_n = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& item = data.items[i];
    const auto& r = runs[i];
    ++out.attempted;
    out.calls += static_cast<std::size_t>(r.calls);
    auto entry = detail::log_entry(item, r, opt.method);
    if (r.errored) {
      ++out.errored;
      out.log.push_back(std::move(entry));
      continue;
    }
    ++out.scored;
    out.degraded += r.degraded;
    const bool fail = r.conclusion == Conclusion::Fail;
    const double item_hr = hit_rate(r.report.hallucinations, *item.gt_sentences);
    det += fail;
    hr += item_hr;
    entry["hit_rate"] = item_hr;
    if (!r.report.hallucinations.empty()) {
      const double item_sv = span_validity(r.report.hallucinations, item.answer);
      sv += item_sv;
      ++sv_n;
      entry["span_validity"] = item_sv;
    }
    const auto& corrected = r.report.corrected_answer.empty() ? item.answer : r.report.corrected_answer;
    try {
      const double m = mitigation_score(corrected, item.context, scorer);
      const double o = mitigation_score(item.answer, item.context, scorer);
      mit += m;
      orig += o;
      ++mit_n;
      entry["mitigation"] = m;
      entry["original_mitigation"] = o;
    } catch (const Error& e) {
      ++out.scorer_errors;
      entry["scorer_error"] = e.what();
    }
    out.log.push_back(std::move(entry));
  }
  detail::write_log(opt.run_log, out.log);
  if (out.scored == 0) throw Error("no item could be scored");
  const auto n = static_cast<double>(out.scored);
  out.card.n = out.scored;
  out.card.det_acc = det / n;
  out.card.hit_rate = hr / n;
  out.card.span_validity = sv_n ? sv / static_cast<double>(sv_n) : 0.0;
  out.card.mitigation = mit_n ? mit / static_cast<double>(mit_n) : 0.0;
  out.card.original_mitigation = mit_n ? orig / static_cast<double>(mit_n) : 0.0;
  return out;
}

inline DiagnosisEval evaluate_diagnosis(const fs::path& dataset, llm::Backend& backend, ConsistencyScorer& scorer,
                                        const EvalOptions& opt = {}) {
  return evaluate_diagnosis(load_benchmark(dataset), backend, scorer, opt);
}

inline ojson to_json(const DetectionRun& r) {
  ojson j = halludiag::to_json(r.metrics);
  j["confusion"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}};
  j["attempted"] = r.attempted;
  j["skipped"] = r.skipped;
  j["errored"] = r.errored;
  j["no_verdict"] = r.no_verdict;
  j["backend_calls"] = r.calls;
  j["wall_ms"] = r.wall_ms;
  return j;
}

inline ojson to_json(const DiagnosisEval& r) {
  ojson j = halludiag::to_json(r.card);
  j["attempted"] = r.attempted;
  j["skipped"] = r.skipped;
  j["errored"] = r.errored;
  j["degraded"] = r.degraded;
  j["scorer_errors"] = r.scorer_errors;
  j["backend_calls"] = r.calls;
  j["wall_ms"] = r.wall_ms;
  return j;
}

}  // namespace halludiag::runner
