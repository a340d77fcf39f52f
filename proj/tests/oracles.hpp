// SPDX-License-Identifier: Apache-2.0
// Independent reference computations. These deliberately avoid the library's
// normalization and scoring code paths; inputs are ASCII sentences built from
// single-space-joined words, for which normalization is the identity.
#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace halludiag::oracle {

/// Pair score written directly from the definition: hit if either string
/// contains the other, then min of the two length ratios.
inline double pair_score(const std::string& p, const std::string& g) {
  if (p.empty() || g.empty()) return 0.0;
  const bool hit = g.find(p) != std::string::npos || p.find(g) != std::string::npos;
  if (!hit) return 0.0;
  const double lp = static_cast<double>(p.size());
  const double lg = static_cast<double>(g.size());
  return std::min(lp / lg, lg / lp);
}

/// Unclamped localization sum over distinct predictions.
inline double localization_raw(std::vector<std::string> pred, const std::vector<std::string>& gt) {
  std::vector<std::string> distinct;
  for (auto& p : pred)
    if (std::find(distinct.begin(), distinct.end(), p) == distinct.end()) distinct.push_back(p);
  if (gt.empty()) return distinct.empty() ? 1.0 : 0.0;
  double total = 0.0;
  for (const auto& p : distinct) {
    double best = 0.0;
    for (const auto& g : gt) best = std::max(best, pair_score(p, g));
    total += best;
  }
  return total / static_cast<double>(gt.size());
}

/// Random sentence of 1..4 words over a three-word alphabet.
inline std::string small_sentence(std::mt19937_64& rng) {
  static const char* words[] = {"red", "rose", "blooms"};
  const auto n = 1 + rng() % 4;
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += words[rng() % 3];
  }
  return s;
}

inline std::vector<std::string> small_set(std::mt19937_64& rng) {
  std::vector<std::string> out(rng() % 6);
  for (auto& s : out) s = small_sentence(rng);
  return out;
}

/// Confusion-matrix metrics computed from first principles.
struct MacroOracle {
  double macro_p, macro_r, macro_f1, accuracy;
};

inline MacroOracle macro_from_counts(double tp, double fp, double fn, double tn) {
  auto div = [](double a, double b) { return b == 0 ? 0.0 : a / b; };
  auto f1 = [](double p, double r) { return p + r == 0 ? 0.0 : 2 * p * r / (p + r); };
  const double ph = div(tp, tp + fp), rh = div(tp, tp + fn);
  const double pn = div(tn, tn + fn), rn = div(tn, tn + fp);
  return {(ph + pn) / 2, (rh + rn) / 2, (f1(ph, rh) + f1(pn, rn)) / 2,
          div(tp + tn, tp + fp + fn + tn)};
}

}  // namespace halludiag::oracle
