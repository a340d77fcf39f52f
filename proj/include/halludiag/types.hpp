// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace halludiag {

#ifndef HALLUDIAG_VERSION
#define HALLUDIAG_VERSION "0.1.0"
#endif

inline constexpr std::string_view kVersion = HALLUDIAG_VERSION;

/// Base of every error the toolkit throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad configuration or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Corrupted or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Verdict a diagnosis report carries.
enum class Conclusion { Pass, Fail };

/// Ground-truth class; "positive" is Halu throughout.
enum class Label { Halu, NonHalu };

enum class TaskType { Summary, Logical, Math };

namespace detail {

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::string_view trim_ascii(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string_view to_string(Conclusion c) { return c == Conclusion::Pass ? "Pass" : "Fail"; }
inline std::string_view to_string(Label l) { return l == Label::Halu ? "Halu" : "NonHalu"; }

inline std::string_view to_string(TaskType t) {
  switch (t) {
    case TaskType::Summary: return "Summary";
    case TaskType::Logical: return "Logical";
    case TaskType::Math: return "Math";
  }
  return "Summary";
}

/// Case-insensitive, whitespace-trimmed match against "pass"/"fail".
inline std::optional<Conclusion> parse_conclusion(std::string_view s) {
  const auto v = detail::ascii_lower(detail::trim_ascii(s));
  if (v == "pass") return Conclusion::Pass;
  if (v == "fail") return Conclusion::Fail;
  return std::nullopt;
}

/// Accepts "Halu"/"NonHalu" plus the common benchmark spellings
/// (hallucinated/faithful, FAIL/PASS, true/false-style strings).
inline std::optional<Label> parse_label(std::string_view s) {
  const auto v = detail::ascii_lower(detail::trim_ascii(s));
  if (v == "halu" || v == "hallucinated" || v == "hallucination" || v == "fail" || v == "1" ||
      v == "true" || v == "yes")
    return Label::Halu;
  if (v == "nonhalu" || v == "non-halu" || v == "non_halu" || v == "faithful" || v == "pass" ||
      v == "0" || v == "false" || v == "no")
    return Label::NonHalu;
  return std::nullopt;
}

inline std::optional<TaskType> parse_task_type(std::string_view s) {
  const auto v = detail::ascii_lower(detail::trim_ascii(s));
  if (v == "summary" || v == "summarization") return TaskType::Summary;
  if (v == "logical" || v == "logic" || v == "reasoning") return TaskType::Logical;
  if (v == "math" || v == "mathematics") return TaskType::Math;
  return std::nullopt;
}

/// Detection mapping: Fail means the answer was judged hallucinated.
inline Label to_label(Conclusion c) { return c == Conclusion::Fail ? Label::Halu : Label::NonHalu; }

inline Label opposite(Label l) { return l == Label::Halu ? Label::NonHalu : Label::Halu; }

}  // namespace halludiag
