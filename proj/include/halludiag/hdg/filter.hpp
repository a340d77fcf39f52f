// SPDX-License-Identifier: Apache-2.0
//
// Corpus intake: paragraph loading, heuristic quality filters standing in
// for a perplexity model, and a recursive character splitter.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <regex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <unicode/uchar.h>
#include <json.hpp>

#include "halludiag/io.hpp"
#include "halludiag/textspan.hpp"
#include "halludiag/types.hpp"

namespace halludiag::hdg {

using json = nlohmann::json;

struct FilterRules {
  std::size_t min_chars = 200;          ///< Unicode scalars after whitespace collapse
  double min_alpha_ratio = 0.6;         ///< letters / non-space characters
  double max_char_trigram_ratio = 0.2;  ///< share of the most frequent character trigram
  double max_word_trigram_dup = 0.3;    ///< share of word trigrams repeating an earlier one

  void validate() const {
    if (min_alpha_ratio < 0 || min_alpha_ratio > 1) throw ConfigError("filter.min_alpha_ratio must be in [0,1]");
    if (max_char_trigram_ratio <= 0 || max_char_trigram_ratio > 1)
      throw ConfigError("filter.max_char_trigram_ratio must be in (0,1]");
    if (max_word_trigram_dup < 0 || max_word_trigram_dup > 1)
      throw ConfigError("filter.max_word_trigram_dup must be in [0,1]");
  }
};

enum class FilterVerdict { Keep, TooShort, LowAlpha, Repetitive, Unprintable };

inline std::string_view to_string(FilterVerdict v) {
  switch (v) {
    case FilterVerdict::Keep: return "kept";
    case FilterVerdict::TooShort: return "too_short";
    case FilterVerdict::LowAlpha: return "low_alpha";
    case FilterVerdict::Repetitive: return "repetitive";
    case FilterVerdict::Unprintable: return "unprintable";
  }
  return "kept";
}

struct FilterStats {
  std::uint64_t seen = 0, kept = 0, too_short = 0, low_alpha = 0, repetitive = 0, unprintable = 0;

  void add(FilterVerdict v) {
    ++seen;
    switch (v) {
      case FilterVerdict::Keep: ++kept; break;
      case FilterVerdict::TooShort: ++too_short; break;
      case FilterVerdict::LowAlpha: ++low_alpha; break;
      case FilterVerdict::Repetitive: ++repetitive; break;
      case FilterVerdict::Unprintable: ++unprintable; break;
    }
  }
  std::uint64_t dropped() const { return too_short + low_alpha + repetitive + unprintable; }
  bool operator==(const FilterStats&) const = default;
};

inline json to_json(const FilterStats& s) {
  return {{"seen", s.seen},           {"kept", s.kept},           {"too_short", s.too_short},
          {"low_alpha", s.low_alpha}, {"repetitive", s.repetitive}, {"unprintable", s.unprintable}};
}

/// Share of all character-trigram occurrences taken by the most frequent one.
inline double max_char_trigram_ratio(std::string_view normalized) {
  std::vector<char32_t> cps;
  for (std::size_t i = 0; i < normalized.size();) {
    auto d = text::utf8::decode(normalized, i);
    cps.push_back(d.cp);
    i += d.len;
  }
  if (cps.size() < 3) return 0.0;
  std::unordered_map<std::uint64_t, std::uint32_t> counts;
  std::uint32_t best = 0;
  for (std::size_t i = 0; i + 2 < cps.size(); ++i) {
    const std::uint64_t key = (std::uint64_t(cps[i]) << 42) ^ (std::uint64_t(cps[i + 1]) << 21) ^ cps[i + 2];
    best = std::max(best, ++counts[key]);
  }
  return static_cast<double>(best) / static_cast<double>(cps.size() - 2);
}

/// Share of word-trigram occurrences that repeat an earlier trigram.
inline double word_trigram_dup_ratio(std::string_view normalized) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < normalized.size()) {
    auto j = normalized.find(' ', i);
    if (j == std::string_view::npos) j = normalized.size();
    if (j > i) words.push_back(normalized.substr(i, j - i));
    i = j + 1;
  }
  if (words.size() < 3) return 0.0;
  std::unordered_map<std::string, int> seen;
  std::size_t dup = 0;
  for (std::size_t k = 0; k + 2 < words.size(); ++k) {
    std::string key;
    key.append(words[k]).append(1, '\x1f').append(words[k + 1]).append(1, '\x1f').append(words[k + 2]);
    if (seen[key]++ > 0) ++dup;
  }
  return static_cast<double>(dup) / static_cast<double>(words.size() - 2);
}

inline FilterVerdict filter_paragraph(std::string_view paragraph, const FilterRules& rules) {
  if (!text::utf8::valid(paragraph)) return FilterVerdict::Unprintable;
  for (std::size_t i = 0; i < paragraph.size();) {
    auto d = text::utf8::decode(paragraph, i);
    i += d.len;
    if (d.cp == '\n' || d.cp == '\t' || d.cp == '\r') continue;
    const auto type = u_charType(static_cast<UChar32>(d.cp));
    if (type == U_CONTROL_CHAR || type == U_UNASSIGNED || type == U_PRIVATE_USE_CHAR || type == U_SURROGATE ||
        d.cp == 0xFFFD)
      return FilterVerdict::Unprintable;
  }
  const auto norm = text::normalize(paragraph);
  if (text::utf8::length(norm) < rules.min_chars) return FilterVerdict::TooShort;
  std::size_t letters = 0, visible = 0;
  for (std::size_t i = 0; i < norm.size();) {
    auto d = text::utf8::decode(norm, i);
    i += d.len;
    if (d.cp == ' ') continue;
    ++visible;
    if (u_isalpha(static_cast<UChar32>(d.cp))) ++letters;
  }
  if (visible == 0 || static_cast<double>(letters) / static_cast<double>(visible) < rules.min_alpha_ratio)
    return FilterVerdict::LowAlpha;
  if (max_char_trigram_ratio(norm) > rules.max_char_trigram_ratio ||
      word_trigram_dup_ratio(norm) > rules.max_word_trigram_dup)
    return FilterVerdict::Repetitive;
  return FilterVerdict::Keep;
}

/// Survivors in input order; `stats` accumulates per-rule counters.
inline std::vector<std::string> filter_corpus(const std::vector<std::string>& paragraphs, const FilterRules& rules,
                                              FilterStats& stats) {
  std::vector<std::string> out;
  for (const auto& p : paragraphs) {
    const auto v = filter_paragraph(p, rules);
    stats.add(v);
    if (v == FilterVerdict::Keep) out.push_back(p);
  }
  return out;
}

/// Splits plain text on blank lines, or reads JSONL records with a `text` field.
inline std::vector<std::string> parse_corpus(std::string_view data, bool jsonl) {
  std::vector<std::string> out;
  if (jsonl) {
    io::for_each_line(data, [&](std::size_t line_no, std::string_view line) {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception&) {
        throw DataError("corpus line " + std::to_string(line_no) + ": not valid JSON");
      }
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
        throw DataError("corpus line " + std::to_string(line_no) + ": missing string field \"text\"");
      out.push_back(j["text"].get<std::string>());
    });
    return out;
  }
  static const std::regex blank(R"(\r?\n[ \t\r]*\n)");
  const std::string s(data);
  for (std::sregex_token_iterator it(s.begin(), s.end(), blank, -1), end; it != end; ++it) {
    std::string para(halludiag::detail::trim_ascii(it->str()));
    if (!para.empty()) out.push_back(std::move(para));
  }
  return out;
}

inline std::vector<std::string> load_corpus(const std::filesystem::path& path) {
  std::string data;
  try {
    data = io::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read corpus " + path.string() + ": " + e.what());
  }
  const auto first = halludiag::detail::trim_ascii(data);
  const bool jsonl = path.extension() == ".jsonl" || (!first.empty() && first.front() == '{');
  return parse_corpus(data, jsonl);
}

namespace detail {

inline std::size_t scalars(std::string_view s) { return text::utf8::length(s); }

/// Packs parts into chunks of at most `max_chars`, joining with `joiner`.
/// Oversized parts are handed to `split_further`.
template <typename Fn>
std::vector<std::string> pack(const std::vector<std::string>& parts, std::string_view joiner, std::size_t max_chars,
                              Fn&& split_further) {
  std::vector<std::string> out;
  std::string cur;
  std::size_t cur_len = 0;
  const std::size_t jlen = scalars(joiner);
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
    cur_len = 0;
  };
  for (const auto& p : parts) {
    const auto len = scalars(p);
    if (len > max_chars) {
      flush();
      for (auto& c : split_further(p)) out.push_back(std::move(c));
      continue;
    }
    if (!cur.empty() && cur_len + jlen + len > max_chars) flush();
    if (!cur.empty()) {
      cur += joiner;
      cur_len += jlen;
    }
    cur += p;
    cur_len += len;
  }
  flush();
  return out;
}

inline std::vector<std::string> hard_cut(std::string_view s, std::size_t max_chars) {
  std::vector<std::string> out;
  std::string cur;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size();) {
    auto d = text::utf8::decode(s, i);
    cur.append(s.substr(i, d.len));
    i += d.len;
    if (++n == max_chars) {
      out.push_back(std::move(cur));
      cur.clear();
      n = 0;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::vector<std::string> split_level(std::string_view s, int level, std::size_t max_chars) {
  const std::string_view trimmed = halludiag::detail::trim_ascii(s);
  if (trimmed.empty()) return {};
  if (scalars(trimmed) <= max_chars) return {std::string(trimmed)};
  if (level >= 3) return hard_cut(trimmed, max_chars);

  std::vector<std::string> parts;
  std::string_view joiner = " ";
  if (level == 0) {
    static const std::regex blank(R"(\n[ \t\r]*\n)");
    const std::string str(trimmed);
    for (std::sregex_token_iterator it(str.begin(), str.end(), blank, -1), end; it != end; ++it) {
      std::string p(halludiag::detail::trim_ascii(it->str()));
      if (!p.empty()) parts.push_back(std::move(p));
    }
    joiner = "\n\n";
  } else if (level == 1) {
    for (const auto& sp : text::split_sentences(trimmed))
      parts.emplace_back(trimmed.substr(sp.start, sp.end - sp.start));
  } else {
    std::size_t i = 0;
    while (i < trimmed.size()) {
      while (i < trimmed.size()) {
        auto d = text::utf8::decode(trimmed, i);
        if (!text::is_space(d.cp)) break;
        i += d.len;
      }
      std::size_t j = i;
      while (j < trimmed.size()) {
        auto d = text::utf8::decode(trimmed, j);
        if (text::is_space(d.cp)) break;
        j += d.len;
      }
      if (j > i) parts.emplace_back(trimmed.substr(i, j - i));
      i = j;
    }
  }
  if (parts.size() <= 1) return split_level(trimmed, level + 1, max_chars);
  return pack(parts, joiner, max_chars,
              [&](const std::string& p) { return split_level(p, level + 1, max_chars); });
}

}  // namespace detail

/// Splits on the strongest separator available (blank line, sentence
/// boundary, whitespace, then a hard cut) until every chunk fits.
inline std::vector<std::string> recursive_split(std::string_view text, std::size_t max_chars) {
  if (max_chars < 200) throw ConfigError("recursive_split: max_chars must be >= 200");
  return detail::split_level(text, 0, max_chars);
}

}  // namespace halludiag::hdg
