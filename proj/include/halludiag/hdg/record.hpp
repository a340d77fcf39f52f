// SPDX-License-Identifier: Apache-2.0
//
// Sample and dataset-record types produced by the generator, with JSON
// (de)serialization and the schema validation pass.
#pragma once

#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "halludiag/io.hpp"
#include "halludiag/textspan.hpp"
#include "halludiag/types.hpp"

namespace halludiag::hdg {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

enum class Strategy { ContextAdd, ContextDelete, DirectInject, ReasoningChainInject, FuzzyReplace, None };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::ContextAdd: return "ContextAdd";
    case Strategy::ContextDelete: return "ContextDelete";
    case Strategy::DirectInject: return "DirectInject";
    case Strategy::ReasoningChainInject: return "ReasoningChainInject";
    case Strategy::FuzzyReplace: return "FuzzyReplace";
    case Strategy::None: return "None";
  }
  return "None";
}

inline std::optional<Strategy> parse_strategy(std::string_view s) {
  for (auto v : {Strategy::ContextAdd, Strategy::ContextDelete, Strategy::DirectInject,
                 Strategy::ReasoningChainInject, Strategy::FuzzyReplace, Strategy::None})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

/// Whether a strategy may be applied to a task (fuzzy edits and direct entity
/// swaps are summary-only; chain perturbation needs a reasoning chain).
inline bool strategy_allowed(Strategy s, TaskType t) {
  switch (s) {
    case Strategy::DirectInject:
    case Strategy::FuzzyReplace: return t == TaskType::Summary;
    case Strategy::ReasoningChainInject: return t != TaskType::Summary;
    default: return true;
  }
}

struct SeedSample {
  std::string context;
  std::string query;
  std::string answer;
  std::optional<std::string> cot_answer;
  TaskType task_type = TaskType::Summary;

  /// The text shown as the record's response: the reasoning chain when present.
  const std::string& response() const { return cot_answer ? *cot_answer : answer; }
};

struct AugmentationTag {
  Strategy strategy = Strategy::None;
  std::string detail;
};

struct JudgeVote {
  std::string judge;
  Label label = Label::NonHalu;
  double confidence = 0.0;  ///< in [0,1]
  bool operator==(const JudgeVote&) const = default;
};

struct DatasetRecord {
  std::string id;
  std::string context;
  std::string query;
  std::string response;
  Label label = Label::NonHalu;
  std::vector<std::string> halu_sentences;
  int difficulty = 1;
  std::string reasoning_trace;
  std::string ground_truth_answer;
  TaskType task_type = TaskType::Summary;
  AugmentationTag augmentation;
  double quality_score = 0.0;
  std::vector<JudgeVote> judge_votes;
};

/// Lines beginning with "Step N:" (or "Step N.") in a reasoning chain.
inline int count_step_markers(std::string_view cot) {
  static const std::regex marker(R"((^|\n)[ \t]*Step[ \t]+\d+[ \t]*[:.])", std::regex::icase);
  const std::string s(cot);
  return static_cast<int>(std::distance(std::sregex_iterator(s.begin(), s.end(), marker), std::sregex_iterator()));
}

struct ReasoningChain {
  std::vector<std::string> steps;  ///< step bodies without markers
  std::string final_answer;        ///< body of a "Final answer:" line, if any
};

inline ReasoningChain parse_chain(std::string_view cot) {
  static const std::regex step(R"(^[ \t]*Step[ \t]+\d+[ \t]*[:.][ \t]*(.*)$)", std::regex::icase);
  static const std::regex fin(R"(^[ \t]*Final answer[ \t]*[:.][ \t]*(.*)$)", std::regex::icase);
  ReasoningChain c;
  std::string buf(cot);
  std::size_t i = 0;
  while (i <= buf.size()) {
    auto j = buf.find('\n', i);
    if (j == std::string::npos) j = buf.size();
    const std::string line = buf.substr(i, j - i);
    std::smatch m;
    if (std::regex_match(line, m, step))
      c.steps.push_back(m[1].str());
    else if (std::regex_match(line, m, fin))
      c.final_answer = m[1].str();
    i = j + 1;
  }
  return c;
}

inline ojson to_json(const DatasetRecord& r) {
  ojson votes = ojson::array();
  for (const auto& v : r.judge_votes)
    votes.push_back({{"judge", v.judge}, {"label", std::string(to_string(v.label))}, {"confidence", v.confidence}});
  return {{"id", r.id},
          {"context", r.context},
          {"query", r.query},
          {"response", r.response},
          {"label", std::string(to_string(r.label))},
          {"halu_sentences", r.halu_sentences},
          {"difficulty", r.difficulty},
          {"reasoning_trace", r.reasoning_trace},
          {"ground_truth_answer", r.ground_truth_answer},
          {"task_type", std::string(to_string(r.task_type))},
          {"augmentation", {{"strategy", std::string(to_string(r.augmentation.strategy))},
                            {"detail", r.augmentation.detail}}},
          {"quality_score", r.quality_score},
          {"judge_votes", votes}};
}

/// Parses one record; throws DataError naming the offending field.
inline DatasetRecord record_from_json(const json& j) {
  if (!j.is_object()) throw DataError("record: expected an object");
  auto need = [&](const char* key) -> const json& {
    auto it = j.find(key);
    if (it == j.end()) throw DataError(std::string("record.") + key + ": missing");
    return *it;
  };
  auto need_str = [&](const char* key) {
    const auto& v = need(key);
    if (!v.is_string()) throw DataError(std::string("record.") + key + ": expected a string");
    return v.get<std::string>();
  };
  DatasetRecord r;
  r.id = need_str("id");
  r.context = need_str("context");
  r.query = need_str("query");
  r.response = need_str("response");
  if (auto l = parse_label(need_str("label")))
    r.label = *l;
  else
    throw DataError("record.label: expected Halu or NonHalu");
  const auto& hs = need("halu_sentences");
  if (!hs.is_array()) throw DataError("record.halu_sentences: expected a list");
  for (const auto& s : hs) {
    if (!s.is_string()) throw DataError("record.halu_sentences: expected strings");
    r.halu_sentences.push_back(s.get<std::string>());
  }
  const auto& d = need("difficulty");
  if (!d.is_number_integer()) throw DataError("record.difficulty: expected an integer");
  r.difficulty = d.get<int>();
  r.reasoning_trace = need_str("reasoning_trace");
  r.ground_truth_answer = need_str("ground_truth_answer");
  if (auto t = parse_task_type(need_str("task_type")))
    r.task_type = *t;
  else
    throw DataError("record.task_type: expected Summary, Logical, or Math");
  const auto& aug = need("augmentation");
  if (!aug.is_object() || !aug.contains("strategy") || !aug["strategy"].is_string())
    throw DataError("record.augmentation.strategy: missing");
  if (auto s = parse_strategy(aug["strategy"].get<std::string>()))
    r.augmentation.strategy = *s;
  else
    throw DataError("record.augmentation.strategy: unknown strategy");
  if (aug.contains("detail") && aug["detail"].is_string()) r.augmentation.detail = aug["detail"].get<std::string>();
  const auto& q = need("quality_score");
  if (!q.is_number()) throw DataError("record.quality_score: expected a number");
  r.quality_score = q.get<double>();
  const auto& votes = need("judge_votes");
  if (!votes.is_array()) throw DataError("record.judge_votes: expected a list");
  for (const auto& v : votes) {
    if (!v.is_object() || !v.contains("judge") || !v.contains("label") || !v.contains("confidence"))
      throw DataError("record.judge_votes: each vote needs judge, label, confidence");
    JudgeVote jv;
    jv.judge = v["judge"].get<std::string>();
    jv.label = parse_label(v["label"].get<std::string>()).value_or(Label::NonHalu);
    jv.confidence = v["confidence"].get<double>();
    r.judge_votes.push_back(std::move(jv));
  }
  return r;
}

/// Schema problems of one record; empty means valid.
inline std::vector<std::string> validate_record(const DatasetRecord& r) {
  std::vector<std::string> problems;
  if (r.id.empty()) problems.emplace_back("id is empty");
  if (text::normalize(r.context).empty()) problems.emplace_back("context is empty");
  if (text::normalize(r.query).empty()) problems.emplace_back("query is empty");
  if (text::normalize(r.response).empty()) problems.emplace_back("response is empty");
  if ((r.label == Label::Halu) != !r.halu_sentences.empty())
    problems.emplace_back("label Halu must coincide with non-empty halu_sentences");
  const auto response = text::normalize(r.response);
  for (const auto& s : r.halu_sentences) {
    const auto ns = text::normalize(s);
    if (ns.empty() || response.find(ns) == std::string::npos)
      problems.emplace_back("halu sentence not found in response: " + s.substr(0, 80));
  }
  if (r.difficulty < 1) problems.emplace_back("difficulty must be >= 1");
  if (!(r.quality_score >= 0.0 && r.quality_score <= 1.0)) problems.emplace_back("quality_score outside [0,1]");
  if (!strategy_allowed(r.augmentation.strategy, r.task_type))
    problems.emplace_back(std::string(to_string(r.augmentation.strategy)) + " is not allowed for " +
                          std::string(to_string(r.task_type)));
  for (const auto& v : r.judge_votes)
    if (!(v.confidence >= 0.0 && v.confidence <= 1.0)) problems.emplace_back("judge confidence outside [0,1]");
  return problems;
}

struct ValidationSummary {
  std::size_t lines = 0, valid = 0, invalid = 0;
  std::vector<std::string> errors;  ///< "line N: problem"
};

/// Validates every line of a dataset JSONL document.
inline ValidationSummary validate_dataset(std::string_view jsonl) {
  ValidationSummary s;
  io::for_each_line(jsonl, [&](std::size_t line_no, std::string_view line) {
    ++s.lines;
    std::vector<std::string> problems;
    try {
      problems = validate_record(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      problems.push_back(std::string("invalid JSON: ") + e.what());
    } catch (const DataError& e) {
      problems.push_back(e.what());
    }
    if (problems.empty()) {
      ++s.valid;
    } else {
      ++s.invalid;
      for (auto& p : problems) s.errors.push_back("line " + std::to_string(line_no) + ": " + p);
    }
  });
  return s;
}

}  // namespace halludiag::hdg
