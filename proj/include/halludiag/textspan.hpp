// SPDX-License-Identifier: Apache-2.0
//
// Sentence segmentation, text normalization, and the containment / length
// primitives behind localization scoring and span validity.
#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/uscript.h>

#include "halludiag/io.hpp"
#include "halludiag/types.hpp"

namespace halludiag::text {

namespace utf8 {

struct Decoded {
  char32_t cp;
  std::size_t len;
  bool valid;
};

/// Decodes one scalar at `pos`; malformed input yields U+FFFD consuming one byte.
inline Decoded decode(std::string_view s, std::size_t pos) {
  const auto b0 = static_cast<unsigned char>(s[pos]);
  if (b0 < 0x80) return {b0, 1, true};
  std::size_t need = 0;
  char32_t cp = 0;
  char32_t min = 0;
  if ((b0 & 0xE0) == 0xC0) {
    need = 1;
    cp = b0 & 0x1F;
    min = 0x80;
  } else if ((b0 & 0xF0) == 0xE0) {
    need = 2;
    cp = b0 & 0x0F;
    min = 0x800;
  } else if ((b0 & 0xF8) == 0xF0) {
    need = 3;
    cp = b0 & 0x07;
    min = 0x10000;
  } else {
    return {0xFFFD, 1, false};
  }
  if (pos + need >= s.size()) return {0xFFFD, 1, false};
  for (std::size_t i = 1; i <= need; ++i) {
    const auto b = static_cast<unsigned char>(s[pos + i]);
    if ((b & 0xC0) != 0x80) return {0xFFFD, 1, false};
    cp = (cp << 6) | (b & 0x3F);
  }
  if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return {0xFFFD, 1, false};
  return {cp, need + 1, true};
}

/// Number of Unicode scalar values (malformed bytes count one each).
inline std::size_t length(std::string_view s) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size(); i += decode(s, i).len) ++n;
  return n;
}

inline bool valid(std::string_view s) {
  for (std::size_t i = 0; i < s.size();) {
    auto d = decode(s, i);
    if (!d.valid) return false;
    i += d.len;
  }
  return true;
}

inline void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

}  // namespace utf8

inline bool is_space(char32_t cp) {
  if (cp < 0x80) return cp == ' ' || (cp >= '\t' && cp <= '\r');
  return u_isUWhiteSpace(static_cast<UChar32>(cp));
}

namespace detail {

inline std::string collapse_ascii(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending = false;
  for (char c : s) {
    if (is_space(static_cast<unsigned char>(c))) {
      pending = !out.empty();
      continue;
    }
    if (pending) out += ' ';
    pending = false;
    out += c;
  }
  return out;
}

inline bool is_ascii(std::string_view s) {
  for (unsigned char c : s)
    if (c >= 0x80) return false;
  return true;
}

}  // namespace detail

/// Whitespace runs become one space, ends trimmed, NFC composition applied.
/// Malformed UTF-8 is replaced with U+FFFD. Idempotent.
inline std::string normalize(std::string_view s) {
  if (detail::is_ascii(s)) return detail::collapse_ascii(s);

  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  auto us = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
  icu::UnicodeString composed = U_SUCCESS(status) ? nfc->normalize(us, status) : us;
  if (U_FAILURE(status)) composed = us;

  icu::UnicodeString collapsed;
  bool pending = false;
  for (int32_t i = 0; i < composed.length();) {
    const UChar32 cp = composed.char32At(i);
    i += U16_LENGTH(cp);
    if (is_space(static_cast<char32_t>(cp))) {
      pending = !collapsed.isEmpty();
      continue;
    }
    if (pending) collapsed.append(static_cast<UChar>(u' '));
    pending = false;
    collapsed.append(cp);
  }
  std::string out;
  collapsed.toUTF8String(out);
  return out;
}

/// Length used by localization scoring: scalar count of the normalized text.
inline std::size_t normalized_length(std::string_view s) { return utf8::length(normalize(s)); }

/// True iff one normalized string contains the other. Case-sensitive;
/// empty-after-normalization inputs never hit.
inline bool containment_hit(std::string_view a, std::string_view b) {
  const auto na = normalize(a);
  const auto nb = normalize(b);
  if (na.empty() || nb.empty()) return false;
  return nb.find(na) != std::string::npos || na.find(nb) != std::string::npos;
}

/// Same test on strings already passed through normalize().
inline bool containment_hit_normalized(std::string_view na, std::string_view nb) {
  if (na.empty() || nb.empty()) return false;
  return nb.find(na) != std::string_view::npos || na.find(nb) != std::string_view::npos;
}

/// Fraction of spans occurring verbatim (byte-exact) in `source`.
/// An empty list scores 1.0; an empty span never counts as verbatim.
inline double verbatim_fraction(const std::vector<std::string>& spans, std::string_view source) {
  if (spans.empty()) return 1.0;
  std::size_t hits = 0;
  for (const auto& s : spans)
    if (!s.empty() && source.find(s) != std::string_view::npos) ++hits;
  return static_cast<double>(hits) / static_cast<double>(spans.size());
}

/// Tokens (with their trailing period) that do not end a sentence.
class AbbreviationList {
 public:
  AbbreviationList() = default;
  explicit AbbreviationList(const std::vector<std::string>& tokens) {
    for (const auto& t : tokens) add(t);
  }

  /// Built-in list; identical to assets/abbreviations.txt.
  static const AbbreviationList& builtin() {
    static const AbbreviationList list = parse(kBuiltinText);
    return list;
  }

  /// One token per line; blank lines and lines starting with '#' are skipped.
  static AbbreviationList parse(std::string_view text) {
    AbbreviationList list;
    io::for_each_line(text, [&](std::size_t, std::string_view line) {
      auto tok = halludiag::detail::trim_ascii(line);
      if (!tok.empty() && tok.front() != '#') list.add(std::string(tok));
    });
    return list;
  }

  static AbbreviationList load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

  void add(std::string token) {
    if (token.empty()) return;
    if (token.back() != '.') token += '.';
    tokens_.insert(std::move(token));
  }

  bool contains(std::string_view token) const { return tokens_.count(std::string(token)) > 0; }
  std::size_t size() const { return tokens_.size(); }

  static constexpr std::string_view kBuiltinText =
      "Mr.\nMrs.\nMs.\nDr.\nProf.\nSr.\nJr.\nSt.\nMt.\nFt.\nGen.\nGov.\nSen.\nRep.\nRev.\n"
      "Capt.\nCol.\nLt.\nSgt.\nInc.\nLtd.\nCo.\nCorp.\nvs.\ne.g.\ni.e.\ncf.\nal.\napprox.\n"
      "No.\nFig.\nVol.\nJan.\nFeb.\nMar.\nApr.\nJun.\nJul.\nAug.\nSep.\nSept.\nOct.\nNov.\nDec.\n"
      "U.S.\nU.K.\nU.N.\na.m.\np.m.\n";

 private:
  std::unordered_set<std::string> tokens_;
};

/// One segmented sentence. Offsets are byte offsets into the source, so
/// `source.substr(start, end - start)` is the raw sentence.
struct SentenceSpan {
  std::string text;        ///< normalized sentence
  std::size_t start = 0;   ///< inclusive byte offset
  std::size_t end = 0;     ///< exclusive byte offset
  std::size_t length = 0;  ///< scalar count of `text`

  bool operator==(const SentenceSpan&) const = default;
};

namespace detail {

inline bool is_closer(char32_t cp) {
  switch (cp) {
    case '"': case '\'': case ')': case ']': case 0x201D: case 0x2019: case 0x00BB:
    case 0x300D: case 0x300F: case 0xFF09: case 0x3011:
      return true;
    default:
      return false;
  }
}

inline bool is_opener(char32_t cp) {
  switch (cp) {
    case '"': case '\'': case '(': case '[': case 0x201C: case 0x2018: case 0x00AB:
      return true;
    default:
      return false;
  }
}

inline bool is_cjk(char32_t cp) {
  if (cp < 0x2E80) return false;
  UErrorCode st = U_ZERO_ERROR;
  const auto script = uscript_getScript(static_cast<UChar32>(cp), &st);
  return U_SUCCESS(st) && (script == USCRIPT_HAN || script == USCRIPT_HIRAGANA ||
                           script == USCRIPT_KATAKANA || script == USCRIPT_HANGUL);
}

inline bool starts_sentence(char32_t cp) {
  const auto c = static_cast<UChar32>(cp);
  return u_isupper(c) || u_istitle(c) || is_cjk(cp);
}

inline bool is_ascii_terminal(char32_t cp) { return cp == '.' || cp == '!' || cp == '?'; }
inline bool is_cjk_terminal(char32_t cp) { return cp == 0x3002 || cp == 0xFF01 || cp == 0xFF1F; }

}  // namespace detail

/// Rule-based segmentation: a sentence ends at . ! ? followed by whitespace and
/// an uppercase or CJK character (abbreviations excepted), or right after
/// 。！？. Deterministic; spans are ordered and non-overlapping.
inline std::vector<SentenceSpan> split_sentences(
    std::string_view source, const AbbreviationList& abbreviations = AbbreviationList::builtin()) {
  std::vector<SentenceSpan> spans;
  const std::size_t n = source.size();

  auto emit = [&](std::size_t b, std::size_t e) {
    while (b < e) {  // skip leading whitespace
      auto d = utf8::decode(source, b);
      if (!is_space(d.cp)) break;
      b += d.len;
    }
    if (b >= e) return;
    SentenceSpan span;
    span.text = normalize(source.substr(b, e - b));
    if (span.text.empty()) return;
    span.start = b;
    span.end = e;
    span.length = utf8::length(span.text);
    spans.push_back(std::move(span));
  };

  std::size_t sent_start = 0;
  std::size_t last_non_space_end = 0;
  std::size_t word_start = 0;  // start of the current whitespace-delimited token
  std::size_t i = 0;
  while (i < n) {
    const auto d = utf8::decode(source, i);
    if (is_space(d.cp)) {
      i += d.len;
      word_start = i;
      continue;
    }
    const bool ascii_term = detail::is_ascii_terminal(d.cp);
    const bool cjk_term = detail::is_cjk_terminal(d.cp);
    if (!ascii_term && !cjk_term) {
      i += d.len;
      last_non_space_end = i;
      continue;
    }

    // Run of terminals and closing quotes/brackets.
    const std::size_t term_pos = i;
    std::size_t j = i + d.len;
    while (j < n) {
      auto dj = utf8::decode(source, j);
      if (!(detail::is_ascii_terminal(dj.cp) || detail::is_cjk_terminal(dj.cp) ||
            detail::is_closer(dj.cp)))
        break;
      j += dj.len;
    }
    last_non_space_end = j;

    bool boundary = false;
    if (cjk_term) {
      boundary = true;
    } else {
      std::size_t k = j;
      bool saw_space = false;
      while (k < n) {
        auto dk = utf8::decode(source, k);
        if (!is_space(dk.cp)) break;
        saw_space = true;
        k += dk.len;
      }
      if (saw_space && k < n) {
        auto next = utf8::decode(source, k);
        while (detail::is_opener(next.cp) && k + next.len < n) {
          k += next.len;
          next = utf8::decode(source, k);
        }
        boundary = detail::starts_sentence(next.cp);
      }
      if (boundary && d.cp == '.' && j == term_pos + 1) {
        auto token = source.substr(word_start, term_pos + 1 - word_start);
        while (!token.empty() && detail::is_opener(static_cast<unsigned char>(token.front())))
          token.remove_prefix(1);
        if (abbreviations.contains(token)) boundary = false;
      }
    }

    if (boundary) {
      emit(sent_start, j);
      sent_start = j;
    }
    i = j;
  }
  if (sent_start < n) emit(sent_start, std::max(last_non_space_end, sent_start));
  return spans;
}

/// Normalized sentence texts only.
inline std::vector<std::string> sentence_texts(std::string_view source,
                                               const AbbreviationList& abbreviations =
                                                   AbbreviationList::builtin()) {
  std::vector<std::string> out;
  for (auto& s : split_sentences(source, abbreviations)) out.push_back(std::move(s.text));
  return out;
}

}  // namespace halludiag::text
