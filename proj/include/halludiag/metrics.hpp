// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: binary detection (per-class and macro P/R/F1, accuracy)
// and the diagnosis card (detection accuracy, hit rate, span validity,
// mitigation consistency).
#pragma once

#include <cctype>
#include <cstdint>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "halludiag/report.hpp"
#include "halludiag/reward.hpp"
#include "halludiag/textspan.hpp"
#include "halludiag/types.hpp"

namespace halludiag {

/// Confusion counts with Halu as the positive class.
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t n() const { return tp + fp + tn + fn; }

  void add(Label predicted, Label truth) {
    if (truth == Label::Halu)
      ++(predicted == Label::Halu ? tp : fn);
    else
      ++(predicted == Label::Halu ? fp : tn);
  }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts accumulate(const std::vector<Label>& predicted, const std::vector<Label>& truth) {
  if (predicted.size() != truth.size())
    throw DataError("prediction/label count mismatch: " + std::to_string(predicted.size()) + " vs " +
                    std::to_string(truth.size()));
  ConfusionCounts c;
  for (std::size_t i = 0; i < predicted.size(); ++i) c.add(predicted[i], truth[i]);
  return c;
}

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct DetectionReport {
  ClassMetrics halu;
  ClassMetrics non_halu;
  double macro_p = 0.0;
  double macro_r = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  std::uint64_t n = 0;
};

namespace detail {

// 0/0 is taken as 0.
inline double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

inline ClassMetrics class_metrics(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  ClassMetrics m;
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  const double s = m.precision + m.recall;
  m.f1 = s == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / s;
  return m;
}

}  // namespace detail

inline DetectionReport detection_metrics(const ConfusionCounts& c) {
  if (c.n() == 0) throw DataError("detection metrics need at least one scored sample");
  DetectionReport r;
  r.n = c.n();
  r.halu = detail::class_metrics(c.tp, c.fp, c.fn);
  r.non_halu = detail::class_metrics(c.tn, c.fn, c.fp);
  r.macro_p = (r.halu.precision + r.non_halu.precision) / 2.0;
  r.macro_r = (r.halu.recall + r.non_halu.recall) / 2.0;
  r.macro_f1 = (r.halu.f1 + r.non_halu.f1) / 2.0;
  r.accuracy = detail::ratio(c.tp + c.tn, c.n());
  return r;
}

/// Localization hit rate; the same computation as the clamped localization reward.
inline double hit_rate(const std::vector<std::string>& predicted,
                       const std::vector<std::string>& ground_truth) {
  return reward_loc(predicted, ground_truth).clamped;
}

/// Fraction of reported spans copied verbatim from the original answer.
inline double span_validity(const DiagnosisReport& report, std::string_view original_answer) {
  return text::verbatim_fraction(report.hallucinations, original_answer);
}

inline double span_validity(const std::vector<std::string>& spans, std::string_view original_answer) {
  return text::verbatim_fraction(spans, original_answer);
}

/// Scores how well `claim` is supported by `context`, in [0,1].
class ConsistencyScorer {
 public:
  virtual ~ConsistencyScorer() = default;
  virtual double score(std::string_view context, std::string_view claim) = 0;
  virtual std::string name() const = 0;
};

/// Raised when an external scorer cannot be reached; carries the sample id.
class ScorerError : public Error {
 public:
  ScorerError(std::string sample_id, const std::string& what)
      : Error(what), sample_id_(std::move(sample_id)) {}
  const std::string& sample_id() const { return sample_id_; }

 private:
  std::string sample_id_;
};

namespace detail {

inline const std::unordered_set<std::string>& stopwords() {
  static const std::unordered_set<std::string> words = {
      "a",     "an",    "the",   "and",   "or",    "but",   "if",    "of",    "at",   "by",
      "for",   "with",  "about", "to",    "from",  "in",    "on",    "into",  "over", "under",
      "is",    "are",   "was",   "were",  "be",    "been",  "being", "am",    "do",   "does",
      "did",   "has",   "have",  "had",   "it",    "its",   "this",  "that",  "these",
      "those", "as",    "so",    "than",  "then",  "there", "their", "they",  "them", "he",
      "she",   "his",   "her",   "we",    "our",   "you",   "your",  "i",     "me",   "my",
      "not",   "no",    "can",   "will",  "would", "could", "should", "may",  "might",
      "which", "who",   "whom",  "what",  "when",  "where", "why",   "how",   "also", "very"};
  return words;
}

/// Lower-cased word tokens; non-ASCII bytes are kept as word characters.
inline std::vector<std::string> word_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c >= 0x80) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

/// Offline fallback: recall of the claim's distinct content words in the context.
class LexicalOverlapScorer final : public ConsistencyScorer {
 public:
  double score(std::string_view context, std::string_view claim) override {
    const auto ctx_tokens = detail::word_tokens(context);
    const std::unordered_set<std::string> ctx(ctx_tokens.begin(), ctx_tokens.end());
    std::unordered_set<std::string> content;
    std::unordered_set<std::string> all;
    for (auto& t : detail::word_tokens(claim)) {
      if (!detail::stopwords().count(t)) content.insert(t);
      all.insert(std::move(t));
    }
    // A claim made only of stopwords is judged on all of its words.
    const auto& words = content.empty() ? all : content;
    if (words.empty()) return 0.0;
    std::size_t hit = 0;
    for (const auto& w : words) hit += ctx.count(w);
    return static_cast<double>(hit) / static_cast<double>(words.size());
  }
  std::string name() const override { return "lexical"; }
};

inline double mitigation_score(std::string_view corrected_answer, std::string_view context,
                               ConsistencyScorer& scorer) {
  return scorer.score(context, corrected_answer);
}

struct DiagnosisReportCard {
  double det_acc = 0.0;
  double hit_rate = 0.0;
  double span_validity = 0.0;
  double mitigation = 0.0;
  double original_mitigation = 0.0;  ///< scorer applied to the uncorrected answers
  std::uint64_t n = 0;
};

inline nlohmann::ordered_json to_json(const DetectionReport& r) {
  auto cls = [](const ClassMetrics& m) {
    nlohmann::ordered_json j;
    j["precision"] = m.precision;
    j["recall"] = m.recall;
    j["f1"] = m.f1;
    return j;
  };
  nlohmann::ordered_json j;
  j["n"] = r.n;
  j["macro_p"] = r.macro_p;
  j["macro_r"] = r.macro_r;
  j["macro_f1"] = r.macro_f1;
  j["accuracy"] = r.accuracy;
  j["per_class"] = {{"Halu", cls(r.halu)}, {"NonHalu", cls(r.non_halu)}};
  return j;
}

inline nlohmann::ordered_json to_json(const DiagnosisReportCard& c) {
  nlohmann::ordered_json j;
  j["n"] = c.n;
  j["det_acc"] = c.det_acc;
  j["hit_rate"] = c.hit_rate;
  j["span_validity"] = c.span_validity;
  j["mitigation"] = c.mitigation;
  j["original_mitigation"] = c.original_mitigation;
  return j;
}

namespace detail {

inline std::string pct(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v * 100.0;
  return ss.str();
}

inline std::string table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& r : rows) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream ss;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == 0)
        ss << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
      else
        ss << "  " << std::right << std::setw(static_cast<int>(width[c])) << cells[c];
    }
    ss << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (auto w : width) total += w;
  ss << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : rows) line(r);
  return ss.str();
}

}  // namespace detail

/// Plain-text table, values in percent.
inline std::string format_table(const DetectionReport& r, const std::string& row_name) {
  return detail::table({"Method", "P", "R", "F1", "Acc", "N"},
                       {{row_name, detail::pct(r.macro_p), detail::pct(r.macro_r),
                         detail::pct(r.macro_f1), detail::pct(r.accuracy), std::to_string(r.n)}});
}

/// Columns Det-Acc, HR, SV, Mit; the "Original Result" row carries only Mit.
inline std::string format_table(const DiagnosisReportCard& c, const std::string& row_name) {
  return detail::table({"Method", "Det-Acc", "HR", "SV", "Mit"},
                       {{row_name, detail::pct(c.det_acc), detail::pct(c.hit_rate),
                         detail::pct(c.span_validity), detail::pct(c.mitigation)},
                        {"Original Result", "-", "-", "-", detail::pct(c.original_mitigation)}});
}

}  // namespace halludiag
