// SPDX-License-Identifier: Apache-2.0
//
// Rule-based reward for a diagnosis completion: structure, detection
// accuracy, and sentence localization, combined as a weighted sum.
#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "halludiag/report.hpp"
#include "halludiag/textspan.hpp"
#include "halludiag/types.hpp"

namespace halludiag {

struct RewardWeights {
  double w_struct = 1.0;
  double w_acc = 0.5;
  double w_loc = 0.5;

  void validate() const {
    if (!(w_struct >= 0.0) || !(w_acc >= 0.0) || !(w_loc >= 0.0))
      throw ConfigError("reward weights must be non-negative");
  }
  bool operator==(const RewardWeights&) const = default;
};

/// Weights plus the two localization switches (both on by default).
struct RewardConfig {
  RewardWeights weights;
  bool clamp_loc = true;   ///< feed min(raw, 1) into the total
  bool dedup_pred = true;  ///< collapse predictions equal after normalization

  bool operator==(const RewardConfig&) const = default;
};

inline RewardConfig reward_config_from_json(const nlohmann::json& j, RewardConfig base = {}) {
  if (!j.is_object()) throw ConfigError("reward: expected an object");
  auto num = [&](const char* key, double& dst) {
    if (auto it = j.find(key); it != j.end()) {
      if (!it->is_number()) throw ConfigError(std::string("reward.") + key + ": expected a number");
      dst = it->get<double>();
    }
  };
  auto flag = [&](const char* key, bool& dst) {
    if (auto it = j.find(key); it != j.end()) {
      if (!it->is_boolean()) throw ConfigError(std::string("reward.") + key + ": expected a boolean");
      dst = it->get<bool>();
    }
  };
  num("w_struct", base.weights.w_struct);
  num("w_acc", base.weights.w_acc);
  num("w_loc", base.weights.w_loc);
  flag("clamp_loc", base.clamp_loc);
  flag("dedup_pred", base.dedup_pred);
  base.weights.validate();
  return base;
}

inline nlohmann::ordered_json to_json(const RewardConfig& c) {
  nlohmann::ordered_json j;
  j["w_struct"] = c.weights.w_struct;
  j["w_acc"] = c.weights.w_acc;
  j["w_loc"] = c.weights.w_loc;
  j["clamp_loc"] = c.clamp_loc;
  j["dedup_pred"] = c.dedup_pred;
  return j;
}

struct GroundTruth {
  Label label = Label::NonHalu;
  std::vector<std::string> gt_sentences;
  std::string reference_answer;

  /// Describes the first invariant violation, if any.
  std::optional<std::string> check() const {
    if (label == Label::Halu && gt_sentences.empty())
      return "label Halu requires non-empty gt_sentences";
    if (label == Label::NonHalu && !gt_sentences.empty())
      return "label NonHalu requires empty gt_sentences";
    return std::nullopt;
  }
};

/// One prediction's best match; `gt_index` is empty when nothing hit.
struct LocMatch {
  std::string prediction;
  std::optional<std::size_t> gt_index;
  double score = 0.0;
};

struct LocResult {
  double raw = 0.0;
  double clamped = 0.0;
  std::vector<LocMatch> detail;
};

struct RewardComponents {
  double r_struct = 0.0;
  double r_acc = 0.0;
  double r_loc = 0.0;
};

struct RewardBreakdown {
  double r_struct = 0.0;
  double r_acc = 0.0;
  double r_loc = 0.0;      ///< value fed into the total (clamped unless disabled)
  double r_loc_raw = 0.0;  ///< unclamped localization sum, for diagnostics
  double total = 0.0;
  ParseStatus parse_status = ParseStatus::Malformed;
  std::vector<LocMatch> loc_detail;
};

/// 0 for a malformed object, otherwise the mean of the four field flags.
inline double reward_struct(const ParseOutcome& outcome) {
  if (outcome.status == ParseStatus::Malformed) return 0.0;
  return static_cast<double>(outcome.field_flags.count()) / 4.0;
}

/// Indicator of a correct verdict; a missing verdict counts as wrong.
inline double reward_acc(std::optional<Conclusion> predicted, Label gt) {
  if (!predicted) return 0.0;
  return to_label(*predicted) == gt ? 1.0 : 0.0;
}

namespace detail {

struct NormSentence {
  std::string text;
  std::size_t length;
};

inline NormSentence norm_sentence(std::string_view s) {
  auto t = text::normalize(s);
  const auto len = text::utf8::length(t);
  return {std::move(t), len};
}

inline double loc_score_normalized(const NormSentence& p, const NormSentence& g) {
  if (!text::containment_hit_normalized(p.text, g.text)) return 0.0;
  const double lp = static_cast<double>(p.length);
  const double lg = static_cast<double>(g.length);
  return std::min(lp / lg, lg / lp);
}

}  // namespace detail

/// Length-ratio score of a hit between two sentences, 0 without a hit.
inline double loc_score(std::string_view predicted, std::string_view ground_truth) {
  return detail::loc_score_normalized(detail::norm_sentence(predicted),
                                      detail::norm_sentence(ground_truth));
}

/// Sum over predictions of the best score against any ground-truth sentence,
/// divided by the number of ground-truth sentences.
///
/// Empty ground truth scores 1 when nothing is predicted and 0 otherwise.
inline LocResult reward_loc(const std::vector<std::string>& predicted,
                            const std::vector<std::string>& ground_truth, bool dedup_pred = true) {
  LocResult result;

  std::vector<detail::NormSentence> preds;
  std::unordered_set<std::string> seen;
  for (const auto& p : predicted) {
    auto ns = detail::norm_sentence(p);
    if (dedup_pred && !seen.insert(ns.text).second) continue;
    preds.push_back(std::move(ns));
  }

  if (ground_truth.empty()) {
    result.raw = result.clamped = preds.empty() ? 1.0 : 0.0;
    for (auto& p : preds) result.detail.push_back({std::move(p.text), std::nullopt, 0.0});
    return result;
  }

  std::vector<detail::NormSentence> gts;
  gts.reserve(ground_truth.size());
  for (const auto& g : ground_truth) gts.push_back(detail::norm_sentence(g));

  double sum = 0.0;
  for (auto& p : preds) {
    double best = 0.0;
    std::optional<std::size_t> best_idx;
    for (std::size_t k = 0; k < gts.size(); ++k) {
      const double s = detail::loc_score_normalized(p, gts[k]);
      if (s > best) {
        best = s;
        best_idx = k;
      }
    }
    sum += best;
    result.detail.push_back({std::move(p.text), best_idx, best});
  }
  result.raw = sum / static_cast<double>(gts.size());
  result.clamped = std::min(result.raw, 1.0);
  return result;
}

inline double total_reward(const RewardComponents& c, const RewardWeights& w = {}) {
  return w.w_struct * c.r_struct + w.w_acc * c.r_acc + w.w_loc * c.r_loc;
}

/// Parses the completion and scores it against one ground-truth record.
/// Never throws on completion content.
inline RewardBreakdown compute_reward(std::string_view raw_completion, const GroundTruth& gt,
                                      const RewardConfig& cfg = {}) {
  RewardBreakdown b;
  const auto outcome = extract_report(raw_completion);
  b.parse_status = outcome.status;
  b.r_struct = reward_struct(outcome);
  b.r_acc = reward_acc(outcome.conclusion, gt.label);

  // Without a well-typed hallucinations list there is nothing to localize.
  if (!outcome.hallucinations) {
    b.r_loc = b.r_loc_raw = 0.0;
  } else {
    auto loc = reward_loc(*outcome.hallucinations, gt.gt_sentences, cfg.dedup_pred);
    b.r_loc_raw = loc.raw;
    b.r_loc = cfg.clamp_loc ? loc.clamped : loc.raw;
    b.loc_detail = std::move(loc.detail);
  }
  b.total = total_reward({b.r_struct, b.r_acc, b.r_loc}, cfg.weights);
  return b;
}

inline nlohmann::ordered_json to_json(const RewardBreakdown& b) {
  nlohmann::ordered_json j;
  j["r_struct"] = b.r_struct;
  j["r_acc"] = b.r_acc;
  j["r_loc"] = b.r_loc;
  j["r_loc_raw"] = b.r_loc_raw;
  j["total"] = b.total;
  j["parse_status"] = std::string(to_string(b.parse_status));
  auto detail = nlohmann::ordered_json::array();
  for (const auto& m : b.loc_detail) {
    nlohmann::ordered_json d;
    d["prediction"] = m.prediction;
    d["gt_index"] = m.gt_index ? nlohmann::ordered_json(*m.gt_index) : nlohmann::ordered_json();
    d["score"] = m.score;
    detail.push_back(std::move(d));
  }
  j["loc_detail"] = std::move(detail);
  return j;
}

/// Parses `label`, `gt_sentences`, `reference_answer`. Throws DataError naming
/// the offending field path (prefixed with `where`).
inline GroundTruth ground_truth_from_json(const nlohmann::json& j, const std::string& where = "") {
  auto path = [&](const char* f) { return where.empty() ? std::string(f) : where + "." + f; };
  if (!j.is_object()) throw DataError((where.empty() ? std::string("ground_truth") : where) +
                                      ": expected an object");
  GroundTruth gt;
  auto lit = j.find("label");
  if (lit == j.end()) throw DataError(path("label") + ": missing");
  if (lit->is_string()) {
    auto l = parse_label(lit->get_ref<const std::string&>());
    if (!l) throw DataError(path("label") + ": expected \"Halu\" or \"NonHalu\"");
    gt.label = *l;
  } else if (lit->is_boolean()) {
    gt.label = lit->get<bool>() ? Label::Halu : Label::NonHalu;
  } else {
    throw DataError(path("label") + ": expected a string");
  }
  if (auto it = j.find("gt_sentences"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw DataError(path("gt_sentences") + ": expected an array of strings");
    for (std::size_t i = 0; i < it->size(); ++i) {
      if (!(*it)[i].is_string())
        throw DataError(path("gt_sentences") + "[" + std::to_string(i) + "]: expected a string");
      gt.gt_sentences.push_back((*it)[i].get<std::string>());
    }
  }
  if (auto it = j.find("reference_answer"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw DataError(path("reference_answer") + ": expected a string");
    gt.reference_answer = it->get<std::string>();
  }
  if (auto bad = gt.check()) throw DataError(path("gt_sentences") + ": " + *bad);
  return gt;
}

inline nlohmann::ordered_json to_json(const GroundTruth& gt) {
  nlohmann::ordered_json j;
  j["label"] = std::string(to_string(gt.label));
  j["gt_sentences"] = gt.gt_sentences;
  j["reference_answer"] = gt.reference_answer;
  return j;
}

}  // namespace halludiag
