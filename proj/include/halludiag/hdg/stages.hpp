// SPDX-License-Identifier: Apache-2.0
//
// The four generator stages applied to one sample: seed generation,
// augmentation (context edits, injected errors, fuzzy replacement), quality
// and label verification by a weighted judge ensemble, and metadata
// enrichment into a DatasetRecord.
#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "halludiag/hdg/record.hpp"
#include "halludiag/io.hpp"
#include "halludiag/llm.hpp"
#include "halludiag/report.hpp"
#include "halludiag/textspan.hpp"

namespace halludiag::hdg {

/// A sample dropped by a stage; `reason` is a stable code for stats.
class Discard : public Error {
 public:
  Discard(std::string reason, const std::string& what) : Error(what), reason_(std::move(reason)) {}
  const std::string& reason() const { return reason_; }

 private:
  std::string reason_;
};

/// Verification could not run at all; the sample is set aside for retry.
class Quarantine : public Error {
 public:
  using Error::Error;
};

/// Caller violated a stage precondition (wrong task type, empty pool).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

namespace prompts {

inline constexpr std::string_view kSystem =
    "You produce data for training hallucination diagnosis models. Follow the task instructions exactly and "
    "reply with a single JSON object.";

inline constexpr std::string_view kSeedInstruction =
    "Write one instruction for the task type given in the input that can be answered from the context alone. "
    "Summary: ask for a short summary. Logical: ask for a conclusion that requires reasoning over stated facts. "
    "Math: ask for a quantity computable from numbers in the context.\n"
    "Return JSON with the key \"query\".";

inline constexpr std::string_view kSeedAnswer =
    "Answer the query using only the context. Return JSON with the key \"answer\" holding a direct answer. "
    "For Logical and Math tasks also return \"cot_answer\": a reasoning chain with one step per line, each line "
    "starting with \"Step N:\", followed by a last line starting with \"Final answer:\".";

inline constexpr std::string_view kInjectDirect =
    "Make one minimal edit to the response that introduces a factual error about a key entity, such as a "
    "changed name, attribute, or number. Leave every other sentence untouched.\n"
    "Return JSON with keys \"response\" (the full edited response) and \"edited_sentences\" (the edited "
    "sentences exactly as they appear in the new response).";

inline constexpr std::string_view kInjectChain =
    "Perturb one key step of the reasoning chain so that it becomes wrong, keep all earlier steps unchanged, "
    "and let the error carry through to the final answer.\n"
    "Return JSON with keys \"response\" (the full edited chain), \"edited_sentences\" (the edited sentences "
    "exactly as they appear in the new chain), and \"perturbed_step\" (its number).";

inline constexpr std::string_view kFuzzyReplace =
    "Replace one piece of precise information in the response, such as an exact figure, with a vague "
    "expression that sounds plausible but is no longer exact.\n"
    "Return JSON with keys \"response\", \"edited_sentences\" (exactly as they appear in the new response), "
    "and \"detail\" (original and replacement).";

inline constexpr std::string_view kJudgeQuality =
    "Rate the clarity, fluency, and coherence of the sample from 1 to 10. Do not consider factual accuracy.\n"
    "Return JSON with the key \"score\" (an integer).";

inline constexpr std::string_view kJudgeLabel =
    "Decide whether the response contains information that the context does not support or that contradicts "
    "it.\nReturn JSON with keys \"label\" (\"Halu\" or \"NonHalu\") and \"confidence\" (an integer from 0 to "
    "100).";

inline constexpr std::string_view kEnrichTrace =
    "Explain in a few sentences why the response carries the given label, referring to the numbered context "
    "sentences that support or contradict it.\n"
    "Return JSON with keys \"trace\" and \"cited_sentences\" (a list of sentence numbers).";

inline std::string user_message(std::string_view instruction, const json& payload) {
  return std::string(instruction) + "\n\nInput:\n```json\n" + io::dump(payload, 2) + "\n```";
}

}  // namespace prompts

namespace detail {

/// Sends one stage exchange and returns the JSON object found in the reply.
inline json exchange(llm::Backend& backend, std::string_view stage, std::string_view instruction,
                     const json& payload) {
  llm::ChatRequest req;
  req.stage = std::string(stage);
  req.messages = {{llm::Role::System, std::string(prompts::kSystem)},
                  {llm::Role::User, prompts::user_message(instruction, payload)}};
  llm::ChatExchange ex;
  try {
    ex = backend.chat(req);
  } catch (const llm::BackendError& e) {
    throw Discard(std::string(stage) + ":backend", e.what());
  }
  auto obj = locate_json_object(ex.completion);
  if (!obj) throw Discard(std::string(stage) + ":unparseable", "no JSON object in reply");
  return std::move(obj->value);
}

inline std::string get_string(const json& j, const char* key) {
  auto it = j.find(key);
  return (it != j.end() && it->is_string()) ? it->get<std::string>() : std::string();
}

}  // namespace detail

/// Instruction exchange, then answer exchange. Logical and Math samples must
/// carry a step-marked reasoning chain; Summary samples never do.
inline SeedSample generate_seed(const std::string& context, TaskType task, llm::Backend& backend) {
  const std::string task_name(to_string(task));
  const auto q = detail::exchange(backend, llm::stage::kSeedInstruction, prompts::kSeedInstruction,
                                  {{"task_type", task_name}, {"context", context}});
  SeedSample s;
  s.context = context;
  s.task_type = task;
  s.query = detail::get_string(q, "query");
  if (text::normalize(s.query).empty()) throw Discard("seed:invalid", "empty query");

  const auto a = detail::exchange(backend, llm::stage::kSeedAnswer, prompts::kSeedAnswer,
                                  {{"task_type", task_name}, {"context", context}, {"query", s.query}});
  s.answer = detail::get_string(a, "answer");
  if (text::normalize(s.answer).empty()) throw Discard("seed:invalid", "empty answer");
  if (task != TaskType::Summary) {
    auto cot = detail::get_string(a, "cot_answer");
    if (count_step_markers(cot) < 1) throw Discard("seed:no_steps", "reasoning chain without step markers");
    s.cot_answer = std::move(cot);
  }
  return s;
}

/// A sample after augmentation, carrying the label its construction implies.
struct Augmented {
  SeedSample sample;
  std::string response;
  Label expected = Label::NonHalu;
  std::vector<std::string> halu_sentences;  ///< normalized
  AugmentationTag tag;
  std::string ground_truth_answer;
};

inline Augmented no_augmentation(const SeedSample& s) {
  Augmented a;
  a.sample = s;
  a.response = s.response();
  a.ground_truth_answer = a.response;
  return a;
}

enum class ContextMode { Add, Delete };

namespace detail {

inline std::size_t argmax_cosine(const std::vector<float>& query, const std::vector<std::vector<float>>& items) {
  std::size_t best = 0;
  double best_sim = -2.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const double c = llm::cosine(query, items[i]);
    if (c > best_sim) {
      best = i;
      best_sim = c;
    }
  }
  return best;
}

/// Removes the sentences whose indices are in `drop`, each together with the
/// whitespace that follows it.
inline std::string cut_sentences(const std::string& text, const std::vector<text::SentenceSpan>& spans,
                                 const std::set<std::size_t>& drop) {
  std::string out = spans.empty() ? text : text.substr(0, spans[0].start);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto end = i + 1 < spans.size() ? spans[i + 1].start : text.size();
    if (!drop.count(i)) out += text.substr(spans[i].start, end - spans[i].start);
  }
  return std::string(halludiag::detail::trim_ascii(out));
}

inline std::string cut_sentence(const std::string& text, const std::vector<text::SentenceSpan>& spans, std::size_t k) {
  return cut_sentences(text, spans, {k});
}

inline std::vector<std::vector<float>> embed_or_discard(llm::Backend& embedder, const std::vector<std::string>& texts) {
  try {
    return embedder.embed(texts);
  } catch (const llm::BackendError& e) {
    throw Discard("augment:embed", e.what());
  }
}

}  // namespace detail

/// Add: append the pool paragraph most similar to the context (a distractor;
/// the answer stays supported). Delete: drop the context sentence most
/// similar to the answer, leaving the answer unsupported.
inline Augmented augment_context(const SeedSample& s, ContextMode mode, llm::Backend& embedder,
                                 const std::vector<std::string>& pool) {
  Augmented a = no_augmentation(s);
  if (mode == ContextMode::Add) {
    if (pool.empty()) throw PreconditionError("context add needs a non-empty distractor pool");
    std::vector<std::string> texts{s.context};
    texts.insert(texts.end(), pool.begin(), pool.end());
    auto vecs = detail::embed_or_discard(embedder, texts);
    const std::vector<std::vector<float>> cands(vecs.begin() + 1, vecs.end());
    const auto best = detail::argmax_cosine(vecs[0], cands);
    a.sample.context = s.context + "\n\n" + pool[best];
    a.tag = {Strategy::ContextAdd, "appended distractor: " + text::normalize(pool[best]).substr(0, 120)};
    return a;
  }

  const auto ctx = text::split_sentences(s.context);
  if (ctx.size() < 2) throw Discard("augment:context_too_short", "context delete needs at least two sentences");
  std::vector<std::string> texts{s.answer};
  for (const auto& sp : ctx) texts.push_back(sp.text);
  auto vecs = detail::embed_or_discard(embedder, texts);
  const std::vector<std::vector<float>> cands(vecs.begin() + 1, vecs.end());
  const auto del = detail::argmax_cosine(vecs[0], cands);

  a.sample.context = detail::cut_sentence(s.context, ctx, del);

  const auto& response = a.response;
  const auto resp = text::split_sentences(response);
  if (resp.empty()) throw Discard("augment:empty_response", "response has no sentences");
  std::vector<std::string> rtexts{ctx[del].text};
  for (const auto& sp : resp) rtexts.push_back(sp.text);
  auto rvecs = detail::embed_or_discard(embedder, rtexts);
  const std::vector<std::vector<float>> rc(rvecs.begin() + 1, rvecs.end());
  // Sentences that restate the removed fact verbatim (a step and the final
  // answer repeating it) are all unsupported; otherwise the closest one is.
  std::set<std::size_t> marked;
  const auto removed = text::normalize(ctx[del].text);
  for (std::size_t i = 0; i < resp.size(); ++i)
    if (text::normalize(resp[i].text).find(removed) != std::string::npos) marked.insert(i);
  if (marked.empty()) marked.insert(detail::argmax_cosine(rvecs[0], rc));

  a.expected = Label::Halu;
  for (auto i : marked) a.halu_sentences.push_back(resp[i].text);
  a.tag = {Strategy::ContextDelete, "removed context sentence: " + ctx[del].text};
  a.ground_truth_answer = detail::cut_sentences(response, resp, marked);
  return a;
}

namespace detail {

/// Checks a backend edit: the response changed, and every edited sentence is
/// present in the new response but absent from the original.
inline std::vector<std::string> verify_edit(const std::string& original, const json& reply, std::string& edited,
                                            std::string_view stage) {
  edited = get_string(reply, "response");
  const auto norm_new = text::normalize(edited);
  const auto norm_old = text::normalize(original);
  if (norm_new.empty()) throw Discard(std::string(stage) + ":empty", "edited response is empty");
  if (norm_new == norm_old) throw Discard(std::string(stage) + ":no_change", "response unchanged");
  auto it = reply.find("edited_sentences");
  if (it == reply.end() || !it->is_array() || it->empty())
    throw Discard(std::string(stage) + ":no_sentences", "no edited sentences reported");
  std::vector<std::string> out;
  for (const auto& s : *it) {
    if (!s.is_string()) throw Discard(std::string(stage) + ":no_sentences", "edited sentence is not a string");
    auto ns = text::normalize(s.get<std::string>());
    if (ns.empty() || norm_new.find(ns) == std::string::npos)
      throw Discard(std::string(stage) + ":not_in_response", "edited sentence not found in the new response");
    if (norm_old.find(ns) != std::string::npos)
      throw Discard(std::string(stage) + ":unchanged_sentence", "edited sentence also appears in the original");
    if (std::find(out.begin(), out.end(), ns) == out.end()) out.push_back(std::move(ns));
  }
  return out;
}

}  // namespace detail

enum class InjectMode { Direct, ReasoningChain };

inline Augmented inject_hallucination(const SeedSample& s, InjectMode mode, llm::Backend& backend) {
  if (mode == InjectMode::Direct && s.task_type != TaskType::Summary)
    throw PreconditionError("direct injection applies to summary tasks only");
  if (mode == InjectMode::ReasoningChain && !s.cot_answer)
    throw PreconditionError("reasoning-chain injection needs a reasoning chain");
  const auto stage = mode == InjectMode::Direct ? llm::stage::kInjectDirect : llm::stage::kInjectChain;
  const auto instruction = mode == InjectMode::Direct ? prompts::kInjectDirect : prompts::kInjectChain;
  Augmented a = no_augmentation(s);
  const auto reply =
      detail::exchange(backend, stage, instruction, {{"context", s.context}, {"query", s.query}, {"response", a.response}});
  std::string edited;
  a.halu_sentences = detail::verify_edit(a.response, reply, edited, stage);
  a.ground_truth_answer = a.response;
  a.response = std::move(edited);
  a.expected = Label::Halu;
  a.tag.strategy = mode == InjectMode::Direct ? Strategy::DirectInject : Strategy::ReasoningChainInject;
  a.tag.detail = "edited: " + a.halu_sentences.front();
  if (auto it = reply.find("perturbed_step"); it != reply.end() && it->is_number_integer())
    a.tag.detail = "perturbed step " + std::to_string(it->get<int>()) + ": " + a.halu_sentences.front();
  return a;
}

/// Softens precise facts into vague ones; the result is labeled Halu.
inline Augmented fuzzy_replace(const SeedSample& s, llm::Backend& backend) {
  if (s.task_type != TaskType::Summary) throw PreconditionError("fuzzy replacement applies to summary tasks only");
  Augmented a = no_augmentation(s);
  const auto reply = detail::exchange(backend, llm::stage::kFuzzyReplace, prompts::kFuzzyReplace,
                                      {{"context", s.context}, {"query", s.query}, {"response", a.response}});
  std::string edited;
  a.halu_sentences = detail::verify_edit(a.response, reply, edited, llm::stage::kFuzzyReplace);
  a.ground_truth_answer = a.response;
  a.response = std::move(edited);
  a.expected = Label::Halu;
  a.tag.strategy = Strategy::FuzzyReplace;
  a.tag.detail = detail::get_string(reply, "detail");
  if (a.tag.detail.empty()) a.tag.detail = "replaced: " + a.halu_sentences.front();
  return a;
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

class Judge {
 public:
  virtual ~Judge() = default;
  /// Throws on failure; the ensemble tolerates individual failures.
  virtual JudgeVote vote(const Augmented& a) = 0;
  virtual std::string id() const = 0;
};

/// LLM judge reporting a 0-100 confidence, rescaled to [0,1].
class LlmJudge final : public Judge {
 public:
  LlmJudge(std::string id, llm::BackendPtr backend) : id_(std::move(id)), backend_(std::move(backend)) {}

  JudgeVote vote(const Augmented& a) override {
    const auto reply = detail::exchange(*backend_, llm::stage::kJudgeLabel, prompts::kJudgeLabel,
                                        {{"context", a.sample.context}, {"query", a.sample.query}, {"response", a.response}});
    const auto label = parse_label(detail::get_string(reply, "label"));
    auto it = reply.find("confidence");
    if (!label || it == reply.end() || !it->is_number()) throw Discard("verify:judge_unparseable", "bad judge reply");
    const double c = it->get<double>();
    if (!(c >= 0.0 && c <= 100.0)) throw Discard("verify:judge_unparseable", "judge confidence outside 0-100");
    return {id_, *label, c / 100.0};
  }
  std::string id() const override { return id_; }

 private:
  std::string id_;
  llm::BackendPtr backend_;
};

/// Wraps a probabilistic classifier; its probability passes through unchanged.
class ClassifierJudge final : public Judge {
 public:
  using Fn = std::function<std::pair<Label, double>(const std::string& context, const std::string& response)>;
  ClassifierJudge(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}

  JudgeVote vote(const Augmented& a) override {
    auto [label, p] = fn_(a.sample.context, a.response);
    if (!(p >= 0.0 && p <= 1.0)) throw Error("classifier probability outside [0,1]");
    return {id_, label, p};
  }
  std::string id() const override { return id_; }

 private:
  std::string id_;
  Fn fn_;
};

struct WeightedJudge {
  std::shared_ptr<Judge> judge;
  double weight = 1.0;
};

struct VerifyRules {
  double min_quality = 0.5;
  double min_confidence = 0.6;
};

struct QualityVerdict {
  double quality = 0.0;
  Label ensemble_label = Label::NonHalu;
  double ensemble_confidence = 0.0;
  bool accepted = false;
  std::string reason;  ///< empty when accepted
  std::vector<JudgeVote> votes;
};

struct EnsembleResult {
  Label label = Label::Halu;
  double confidence = 0.0;
};

/// Weighted vote: each judge adds weight x confidence to its label; the
/// winner's share of the total mass is the ensemble confidence. Ties go to Halu.
inline EnsembleResult weighted_vote(const std::vector<JudgeVote>& votes, const std::vector<double>& weights) {
  if (votes.size() != weights.size()) throw DataError("weighted_vote: one weight per vote required");
  double halu = 0.0, clean = 0.0;
  for (std::size_t i = 0; i < votes.size(); ++i) {
    const double m = weights[i] * votes[i].confidence;
    (votes[i].label == Label::Halu ? halu : clean) += m;
  }
  const double total = halu + clean;
  EnsembleResult r;
  r.label = clean > halu ? Label::NonHalu : Label::Halu;
  r.confidence = total > 0.0 ? std::max(halu, clean) / total : 0.0;
  return r;
}

/// Rubric 1..10 mapped linearly onto [0,1].
inline double rescale_quality(double score) { return (std::clamp(score, 1.0, 10.0) - 1.0) / 9.0; }

inline QualityVerdict verify_quality(const Augmented& a, const std::vector<WeightedJudge>& judges,
                                     llm::Backend& quality_backend, const VerifyRules& rules) {
  if (judges.empty()) throw PreconditionError("verification needs at least one judge");
  QualityVerdict v;
  try {
    const auto reply = detail::exchange(quality_backend, llm::stage::kJudgeQuality, prompts::kJudgeQuality,
                                        {{"task_type", std::string(to_string(a.sample.task_type))},
                                         {"context", a.sample.context},
                                         {"query", a.sample.query},
                                         {"response", a.response}});
    auto it = reply.find("score");
    if (it == reply.end() || !it->is_number()) throw Discard("verify:quality_unparseable", "no score");
    v.quality = rescale_quality(it->get<double>());
  } catch (const Discard& e) {
    throw Quarantine(std::string("quality judge failed: ") + e.what());
  }

  std::vector<double> weights;
  for (const auto& wj : judges) {
    try {
      v.votes.push_back(wj.judge->vote(a));
      weights.push_back(wj.weight);
    } catch (const std::exception&) {
      // An individual judge failure only shrinks the ensemble.
    }
  }
  if (v.votes.empty()) throw Quarantine("all label judges failed");
  const auto e = weighted_vote(v.votes, weights);
  v.ensemble_label = e.label;
  v.ensemble_confidence = e.confidence;
  if (v.quality < rules.min_quality)
    v.reason = "low_quality";
  else if (v.ensemble_confidence < rules.min_confidence)
    v.reason = "low_confidence";
  else if (v.ensemble_label != a.expected)
    v.reason = "label_mismatch";
  v.accepted = v.reason.empty();
  return v;
}

// ---------------------------------------------------------------------------
// Enrichment
// ---------------------------------------------------------------------------

inline DatasetRecord enrich_metadata(const Augmented& a, const QualityVerdict& verdict, llm::Backend& backend,
                                     std::string id) {
  if (!verdict.accepted) throw PreconditionError("enrichment requires an accepted verdict");
  DatasetRecord r;
  r.id = std::move(id);
  r.context = a.sample.context;
  r.query = a.sample.query;
  r.response = a.response;
  r.label = a.expected;
  r.task_type = a.sample.task_type;
  r.augmentation = a.tag;
  r.quality_score = verdict.quality;
  r.judge_votes = verdict.votes;
  r.ground_truth_answer = a.ground_truth_answer;

  const auto norm_response = text::normalize(a.response);
  for (const auto& s : a.halu_sentences) {
    if (norm_response.find(text::normalize(s)) == std::string::npos)
      throw Discard("enrich:span_mismatch", "annotated sentence no longer in response");
    r.halu_sentences.push_back(text::normalize(s));
  }
  if ((r.label == Label::Halu) != !r.halu_sentences.empty())
    throw Discard("enrich:label_mismatch", "label and annotations disagree");

  json numbered = json::array();
  const auto ctx = text::split_sentences(a.sample.context);
  for (const auto& sp : ctx) numbered.push_back(sp.text);
  const auto reply = detail::exchange(backend, llm::stage::kEnrichTrace, prompts::kEnrichTrace,
                                      {{"context", a.sample.context},
                                       {"context_sentences", numbered},
                                       {"query", a.sample.query},
                                       {"response", a.response},
                                       {"label", std::string(to_string(r.label))},
                                       {"halu_sentences", r.halu_sentences}});
  r.reasoning_trace = detail::get_string(reply, "trace");
  if (text::normalize(r.reasoning_trace).empty()) throw Discard("enrich:no_trace", "empty reasoning trace");

  if (a.sample.cot_answer) {
    r.difficulty = std::max(1, count_step_markers(a.response));
  } else {
    std::vector<int> cited;
    if (auto it = reply.find("cited_sentences"); it != reply.end() && it->is_array())
      for (const auto& c : *it)
        if (c.is_number_integer() && c.get<int>() >= 1 && c.get<int>() <= static_cast<int>(ctx.size()) &&
            std::find(cited.begin(), cited.end(), c.get<int>()) == cited.end())
          cited.push_back(c.get<int>());
    r.difficulty = std::max<int>(1, static_cast<int>(cited.size()));
  }
  return r;
}

}  // namespace halludiag::hdg
