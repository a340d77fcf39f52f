// SPDX-License-Identifier: Apache-2.0
//
// Diagnosis-report data model: extraction of the four-key JSON object from
// raw model completions, field validation, and canonical serialization.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "halludiag/io.hpp"
#include "halludiag/types.hpp"

namespace halludiag {

using json = nlohmann::json;

/// Structured output of a diagnosis model.
struct DiagnosisReport {
  Conclusion conclusion = Conclusion::Pass;
  std::string diagnosis;
  std::vector<std::string> hallucinations;  ///< predicted hallucinatory sentences, in order
  std::string corrected_answer;             ///< empty when conclusion is Pass

  bool operator==(const DiagnosisReport&) const = default;
};

/// Consistency problems that are flagged, never repaired.
struct ReportViolations {
  bool pass_with_spans = false;     ///< Pass verdict but hallucinations listed
  bool fail_without_spans = false;  ///< Fail verdict with no localized span

  bool any() const { return pass_with_spans || fail_without_spans; }
};

inline ReportViolations validate(const DiagnosisReport& r) {
  ReportViolations v;
  v.pass_with_spans = r.conclusion == Conclusion::Pass && !r.hallucinations.empty();
  v.fail_without_spans = r.conclusion == Conclusion::Fail && r.hallucinations.empty();
  return v;
}

enum class ParseStatus { Valid, MissingFields, Malformed };

inline std::string_view to_string(ParseStatus s) {
  switch (s) {
    case ParseStatus::Valid: return "Valid";
    case ParseStatus::MissingFields: return "MissingFields";
    case ParseStatus::Malformed: return "Malformed";
  }
  return "Malformed";
}

/// One flag per required key: present and of the right type.
struct FieldFlags {
  bool conclusion = false;
  bool diagnosis = false;
  bool hallucinations = false;
  bool corrected_answer = false;

  int count() const {
    return int(conclusion) + int(diagnosis) + int(hallucinations) + int(corrected_answer);
  }
  bool all() const { return count() == 4; }
  bool operator==(const FieldFlags&) const = default;
};

struct ParseOutcome {
  ParseStatus status = ParseStatus::Malformed;
  std::optional<DiagnosisReport> report;  ///< present iff status is Valid
  FieldFlags field_flags;
  std::string raw_excerpt;

  // Individually valid fields, available even when the object is incomplete.
  std::optional<Conclusion> conclusion;
  std::optional<std::vector<std::string>> hallucinations;
};

namespace detail {

inline constexpr std::size_t kExcerptBytes = 512;
inline constexpr int kMaxBraceCandidates = 64;

inline std::optional<json> parse_object(std::string_view s) {
  auto j = json::parse(s.begin(), s.end(), nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

inline std::optional<std::string_view> fenced_tag_body(std::string_view raw, std::size_t open,
                                                        std::size_t close) {
  auto inner = raw.substr(open + 3, close - open - 3);
  std::size_t tag_end = 0;
  while (tag_end < inner.size() && !std::isspace(static_cast<unsigned char>(inner[tag_end])))
    ++tag_end;
  if (ascii_lower(inner.substr(0, tag_end)) != "json") return std::nullopt;
  return inner.substr(tag_end);
}

}  // namespace detail

/// A JSON object located inside free text.
struct LocatedObject {
  json value;
  std::string_view text;
};

/// Finds the first JSON object in `raw`: the whole (trimmed) text if it is one,
/// else the first ```json fenced block that parses, else the first balanced
/// `{...}` region that parses. Linear in practice; brace candidates are capped.
inline std::optional<LocatedObject> locate_json_object(std::string_view raw) {
  const auto whole = detail::trim_ascii(raw);
  if (!whole.empty() && whole.front() == '{' && whole.back() == '}') {
    if (auto o = detail::parse_object(whole)) return LocatedObject{std::move(*o), whole};
  }

  for (std::size_t open = raw.find("```"); open != std::string_view::npos;) {
    const auto close = raw.find("```", open + 3);
    if (close == std::string_view::npos) break;
    if (auto body = detail::fenced_tag_body(raw, open, close)) {
      const auto text = detail::trim_ascii(*body);
      if (auto o = detail::parse_object(text)) return LocatedObject{std::move(*o), text};
    }
    open = raw.find("```", close + 3);
  }

  std::size_t start = raw.find('{');
  for (int tries = 0; start != std::string_view::npos && tries < detail::kMaxBraceCandidates;
       ++tries) {
    int depth = 0;
    bool in_str = false;
    bool esc = false;
    std::size_t end = std::string_view::npos;
    for (std::size_t i = start; i < raw.size(); ++i) {
      const char c = raw[i];
      if (in_str) {
        if (esc)
          esc = false;
        else if (c == '\\')
          esc = true;
        else if (c == '"')
          in_str = false;
        continue;
      }
      if (c == '"') {
        in_str = true;
      } else if (c == '{') {
        ++depth;
      } else if (c == '}' && --depth == 0) {
        end = i + 1;
        break;
      }
    }
    if (end == std::string_view::npos) {
      start = raw.find('{', start + 1);
      continue;
    }
    const auto text = raw.substr(start, end - start);
    if (auto o = detail::parse_object(text)) return LocatedObject{std::move(*o), text};
    start = raw.find('{', end);
  }
  return std::nullopt;
}

/// Never throws; every input maps to exactly one status.
inline ParseOutcome extract_report(std::string_view raw_completion) {
  ParseOutcome out;
  auto located = locate_json_object(raw_completion);
  if (!located) {
    out.raw_excerpt = std::string(raw_completion.substr(0, detail::kExcerptBytes));
    return out;
  }
  out.raw_excerpt = std::string(located->text.substr(0, detail::kExcerptBytes));
  const json& obj = located->value;

  if (auto it = obj.find("conclusion"); it != obj.end() && it->is_string()) {
    out.conclusion = parse_conclusion(it->get_ref<const std::string&>());
    out.field_flags.conclusion = out.conclusion.has_value();
  }
  if (auto it = obj.find("diagnosis"); it != obj.end() && it->is_string())
    out.field_flags.diagnosis = true;
  if (auto it = obj.find("hallucinations"); it != obj.end() && it->is_array()) {
    std::vector<std::string> spans;
    bool ok = true;
    for (const auto& item : *it) {
      if (!item.is_string()) {
        ok = false;
        break;
      }
      spans.push_back(item.get<std::string>());
    }
    if (ok) {
      out.field_flags.hallucinations = true;
      out.hallucinations = std::move(spans);
    }
  }
  if (auto it = obj.find("corrected_answer"); it != obj.end() && it->is_string())
    out.field_flags.corrected_answer = true;

  if (!out.field_flags.all()) {
    out.status = ParseStatus::MissingFields;
    return out;
  }
  out.status = ParseStatus::Valid;
  out.report = DiagnosisReport{*out.conclusion, obj["diagnosis"].get<std::string>(),
                               *out.hallucinations, obj["corrected_answer"].get<std::string>()};
  return out;
}

inline nlohmann::ordered_json to_json(const DiagnosisReport& r) {
  nlohmann::ordered_json o;
  o["conclusion"] = std::string(to_string(r.conclusion));
  o["diagnosis"] = r.diagnosis;
  o["hallucinations"] = r.hallucinations;
  o["corrected_answer"] = r.corrected_answer;
  return o;
}

/// Canonical single-line form, keys in conclusion/diagnosis/hallucinations/corrected_answer order.
inline std::string serialize_report(const DiagnosisReport& r) { return io::dump_ordered(to_json(r)); }

}  // namespace halludiag
