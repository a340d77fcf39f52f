// SPDX-License-Identifier: Apache-2.0
// Shared generators and helpers for the test suites.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "halludiag/report.hpp"
#include "halludiag/textspan.hpp"

namespace halludiag::testing {

/// Random valid UTF-8, biased toward JSON- and fence-significant characters.
inline std::string random_utf8(std::mt19937_64& rng, std::size_t max_len) {
  static const std::vector<char32_t> special = {'"', '\\', '\n', '\t', '{', '}', '[', ']', '`',
                                                ':', ',', ' ', 0x00E9, 0x4E2D, 0x1F600, 0x0301,
                                                0x0000, 0x007F, 0x2028};
  std::uniform_int_distribution<std::size_t> len_d(0, max_len);
  std::uniform_int_distribution<int> kind(0, 9);
  std::uniform_int_distribution<std::size_t> sp(0, special.size() - 1);
  std::uniform_int_distribution<char32_t> ascii(0x20, 0x7E);
  std::uniform_int_distribution<char32_t> bmp(0xA0, 0xD7FF);
  std::string out;
  const auto n = len_d(rng);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = kind(rng);
    char32_t cp = k < 5 ? ascii(rng) : k < 8 ? special[sp(rng)] : bmp(rng);
    text::utf8::append(out, cp);
  }
  return out;
}

inline std::string random_bytes(std::mt19937_64& rng, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len_d(0, max_len);
  std::uniform_int_distribution<int> byte(0, 255);
  std::uniform_int_distribution<int> mode(0, 3);
  static const std::string alphabet = "{}[]\":,`json \n\\abc0123truefalsenull";
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::string out;
  const auto n = len_d(rng);
  const bool structured = mode(rng) != 0;
  for (std::size_t i = 0; i < n; ++i)
    out += structured ? alphabet[pick(rng)] : static_cast<char>(byte(rng));
  return out;
}

inline DiagnosisReport random_report(std::mt19937_64& rng) {
  DiagnosisReport r;
  r.conclusion = (rng() & 1) ? Conclusion::Fail : Conclusion::Pass;
  r.diagnosis = random_utf8(rng, 40);
  const auto k = static_cast<std::size_t>(rng() % 4);
  for (std::size_t i = 0; i < k; ++i) r.hallucinations.push_back(random_utf8(rng, 20));
  r.corrected_answer = random_utf8(rng, 40);
  return r;
}

}  // namespace halludiag::testing
