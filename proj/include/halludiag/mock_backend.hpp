// SPDX-License-Identifier: Apache-2.0
//
// Deterministic offline backend. Responses come from a script keyed by a
// hash of the last user message, an optional responder hook, or a
// stage-aware synthesizer that produces well-formed output for every stage.
// Everything is a function of (seed, request); no clocks, no global state.
#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "halludiag/io.hpp"
#include "halludiag/llm.hpp"
#include "halludiag/metrics.hpp"
#include "halludiag/report.hpp"
#include "halludiag/textspan.hpp"

namespace halludiag::llm {

namespace mock {

struct Sentence {
  std::string raw;   ///< verbatim slice of the source
  std::string norm;  ///< normalized text
};

inline std::vector<Sentence> sentences(std::string_view text) {
  std::vector<Sentence> out;
  for (const auto& sp : text::split_sentences(text))
    out.push_back({std::string(text.substr(sp.start, sp.end - sp.start)), sp.text});
  return out;
}

/// Removes reasoning-chain markers ("Step 3:", "Final answer:") so they are
/// not mistaken for unsupported content.
inline std::string strip_markers(std::string_view s) {
  static const std::regex marker(R"((^|\n)[ \t]*(step[ \t]+\d+|final answer)[ \t]*[:.])", std::regex::icase);
  return std::regex_replace(std::string(s), marker, "$1");
}

inline std::vector<std::string> content_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (auto& t : detail::word_tokens(strip_markers(s)))
    if (!detail::stopwords().count(t)) out.push_back(std::move(t));
  return out;
}

inline std::unordered_set<std::string> token_set(std::string_view s) {
  auto v = detail::word_tokens(s);
  return {v.begin(), v.end()};
}

inline bool supported(std::string_view sentence, const std::unordered_set<std::string>& context_tokens) {
  for (const auto& t : content_tokens(sentence))
    if (!context_tokens.count(t)) return false;
  return true;
}

/// Indices of answer sentences containing content words absent from the context.
inline std::vector<std::size_t> unsupported(const std::vector<Sentence>& answer, std::string_view context) {
  const auto ctx = token_set(context);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < answer.size(); ++i)
    if (!supported(answer[i].raw, ctx)) out.push_back(i);
  return out;
}

inline std::size_t overlap(std::string_view a, std::string_view b) {
  const auto tb = token_set(b);
  std::unordered_set<std::string> seen;
  std::size_t n = 0;
  for (const auto& t : content_tokens(a))
    if (seen.insert(t).second && tb.count(t)) ++n;
  return n;
}

/// Context sentence with the largest content-word overlap; first on ties.
inline std::string closest_sentence(std::string_view claim, const std::vector<Sentence>& context) {
  std::size_t best = 0, best_n = 0;
  for (std::size_t i = 0; i < context.size(); ++i) {
    const auto n = overlap(claim, context[i].raw);
    if (n > best_n) {
      best = i;
      best_n = n;
    }
  }
  return context.empty() ? std::string() : context[best].norm;
}

inline std::string with_commas(std::uint64_t v) {
  auto s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

inline const std::regex& number_re() {
  static const std::regex re(R"(\d{1,3}(,\d{3})+|\d+)");
  return re;
}

/// Changes the first number, else one content word, to something the context
/// does not contain. Returns nullopt when nothing can be changed.
inline std::optional<std::string> perturb(const std::string& sentence, const std::unordered_set<std::string>& ctx,
                                          std::uint64_t h) {
  std::smatch m;
  if (std::regex_search(sentence, m, number_re())) {
    std::string digits = m.str();
    const bool commas = digits.find(',') != std::string::npos;
    digits.erase(std::remove(digits.begin(), digits.end(), ','), digits.end());
    if (digits.size() <= 15) {
      const std::uint64_t v = std::stoull(digits);
      for (std::uint64_t k = 0; k < 20; ++k) {
        const std::uint64_t nv = v + 1 + (h + k) % 9;
        const std::string repl = commas ? with_commas(nv) : std::to_string(nv);
        bool fresh = false;
        for (const auto& t : detail::word_tokens(repl)) fresh |= !ctx.count(t);
        if (!fresh) continue;
        return sentence.substr(0, static_cast<std::size_t>(m.position())) + repl +
               sentence.substr(static_cast<std::size_t>(m.position() + m.length()));
      }
    }
  }
  static const char* substitutes[] = {"pink",    "northern", "copper", "violet", "wooden",
                                      "ancient", "silent",   "distant", "frozen", "hollow"};
  // Word positions eligible for replacement: alphabetic, >= 4 letters, not a stopword.
  std::vector<std::pair<std::size_t, std::size_t>> words;
  for (std::size_t i = 0; i < sentence.size();) {
    if (std::isalpha(static_cast<unsigned char>(sentence[i]))) {
      std::size_t j = i;
      while (j < sentence.size() && std::isalpha(static_cast<unsigned char>(sentence[j]))) ++j;
      const auto w = detail::ascii_lower(sentence.substr(i, j - i));
      const bool boundary = j == sentence.size() || !(static_cast<unsigned char>(sentence[j]) >= 0x80);
      if (w.size() >= 4 && boundary && !detail::stopwords().count(w) && w != "step" && w != "final" &&
          w != "answer")
        words.emplace_back(i, j - i);
      i = j;
    } else {
      ++i;
    }
  }
  if (words.empty()) return std::nullopt;
  const auto [pos, len] = words[h % words.size()];
  for (std::size_t k = 0; k < std::size(substitutes); ++k) {
    std::string sub = substitutes[(h / 7 + k) % std::size(substitutes)];
    if (ctx.count(sub)) continue;
    if (std::isupper(static_cast<unsigned char>(sentence[pos]))) sub[0] = static_cast<char>(std::toupper(sub[0]));
    return sentence.substr(0, pos) + sub + sentence.substr(pos + len);
  }
  return std::nullopt;
}

/// "3,900" -> "nearly 4,000": rounds the first multi-digit number to one
/// significant figure and hedges it.
inline std::optional<std::string> soften_number(const std::string& sentence) {
  static const std::regex multi(R"(\d{1,3}(,\d{3})+|\d{2,})");
  std::smatch m;
  if (!std::regex_search(sentence, m, multi)) return std::nullopt;
  std::string digits = m.str();
  const bool commas = digits.find(',') != std::string::npos;
  digits.erase(std::remove(digits.begin(), digits.end(), ','), digits.end());
  if (digits.size() > 15) return std::nullopt;
  const std::uint64_t v = std::stoull(digits);
  std::uint64_t unit = 1;
  for (std::size_t i = 1; i < digits.size(); ++i) unit *= 10;
  const std::uint64_t rounded = (v + unit / 2) / unit * unit;
  const char* hedge = rounded > v ? "nearly " : rounded < v ? "more than " : "about ";
  const std::string repl = hedge + (commas || rounded >= 10000 ? with_commas(rounded) : std::to_string(rounded));
  return sentence.substr(0, static_cast<std::size_t>(m.position())) + repl +
         sentence.substr(static_cast<std::size_t>(m.position() + m.length()));
}

/// Replaces sentence `index` of `text` (by raw slice) with `replacement`.
inline std::string replace_sentence(const std::string& text, const std::string& raw, const std::string& replacement) {
  const auto pos = text.find(raw);
  if (pos == std::string::npos) return text;
  return text.substr(0, pos) + replacement + text.substr(pos + raw.size());
}

/// The context/query/answer block of the diagnosis prompts.
struct DiagnosisInput {
  std::string context, query, answer;
};

inline std::optional<DiagnosisInput> parse_diagnosis_input(std::string_view user) {
  const std::string_view ctx_tag = "Context:\n", query_tag = "\n\nQuery: ", answer_tag = "\nAnswer: ";
  const auto c = user.find(ctx_tag);
  auto end = user.rfind("\n\n### Begin Execution");
  if (c == std::string_view::npos || end == std::string_view::npos) return std::nullopt;
  if (auto h = user.rfind("\n\nHallucinated sentences:\n", end); h != std::string_view::npos && h > c) end = h;
  const auto a = user.rfind(answer_tag, end);
  if (a == std::string_view::npos || a < c) return std::nullopt;
  const auto q = user.rfind(query_tag, a);
  if (q == std::string_view::npos || q < c) return std::nullopt;
  DiagnosisInput in;
  in.context = std::string(user.substr(c + ctx_tag.size(), q - c - ctx_tag.size()));
  in.query = std::string(user.substr(q + query_tag.size(), a - q - query_tag.size()));
  in.answer = std::string(user.substr(a + answer_tag.size(), end - a - answer_tag.size()));
  return in;
}

}  // namespace mock

class MockBackend final : public Backend {
 public:
  /// Returning nullopt falls through to synthesis; throwing simulates a failure.
  using Responder = std::function<std::optional<std::string>(const ChatRequest&)>;

  explicit MockBackend(std::uint64_t seed = 0) : seed_(seed) {}

  static std::string key_for(std::string_view last_user_message) {
    return io::hex64(io::fnv1a64(last_user_message));
  }

  void script(std::string_view user_message, std::string response) {
    std::lock_guard lock(mu_);
    script_[key_for(user_message)] = std::move(response);
  }
  void script_key(std::string key, std::string response) {
    std::lock_guard lock(mu_);
    script_[std::move(key)] = std::move(response);
  }
  void script_embedding(std::string_view text, std::vector<float> v) {
    normalize_l2(v);
    std::lock_guard lock(mu_);
    embed_script_[std::string(text)] = std::move(v);
  }
  void set_responder(Responder r) {
    std::lock_guard lock(mu_);
    responder_ = std::move(r);
  }

  /// Script file: JSONL lines {"user": text | "key": hex, "response": text}.
  void load_script(std::string_view jsonl) {
    io::for_each_line(jsonl, [&](std::size_t line_no, std::string_view line) {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception&) {
        throw ConfigError("mock script line " + std::to_string(line_no) + ": not valid JSON");
      }
      if (!j.is_object() || !j.contains("response") || !j["response"].is_string())
        throw ConfigError("mock script line " + std::to_string(line_no) + ": needs a string \"response\"");
      if (j.contains("user") && j["user"].is_string())
        script(j["user"].get<std::string>(), j["response"].get<std::string>());
      else if (j.contains("key") && j["key"].is_string())
        script_key(j["key"].get<std::string>(), j["response"].get<std::string>());
      else
        throw ConfigError("mock script line " + std::to_string(line_no) + ": needs \"user\" or \"key\"");
    });
  }

  ChatExchange chat(const ChatRequest& request) override {
    validate_messages(request.messages);
    const auto& user = request.messages.back().content;
    calls_.fetch_add(1);
    Responder responder;
    std::optional<std::string> scripted;
    {
      std::lock_guard lock(mu_);
      log_.push_back(request);
      ++stage_calls_[request.stage];
      if (auto it = script_.find(key_for(user)); it != script_.end()) scripted = it->second;
      responder = responder_;
    }
    ChatExchange ex;
    ex.messages = request.messages;
    if (scripted) {
      ex.completion = *scripted;
    } else if (auto r = responder ? responder(request) : std::nullopt) {
      ex.completion = std::move(*r);
    } else {
      ex.completion = synthesize(request);
    }
    for (const auto& m : request.messages) ex.usage.prompt_tokens += static_cast<std::int64_t>(detail::word_tokens(m.content).size());
    ex.usage.completion_tokens = static_cast<std::int64_t>(detail::word_tokens(ex.completion).size());
    ex.usage.total_tokens = ex.usage.prompt_tokens + ex.usage.completion_tokens;
    meter_.record(ex.usage, 1);
    return ex;
  }

  std::vector<std::vector<float>> embed(const std::vector<std::string>& texts) override {
    if (texts.empty()) throw DataError("embed needs at least one text");
    std::vector<std::vector<float>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
      {
        std::lock_guard lock(mu_);
        if (auto it = embed_script_.find(t); it != embed_script_.end()) {
          out.push_back(it->second);
          continue;
        }
      }
      out.push_back(hashed_embedding(t));
    }
    meter_.record({}, 1);
    return out;
  }

  std::string name() const override { return "mock:" + std::to_string(seed_); }

  std::size_t calls() const { return calls_.load(); }
  std::size_t calls(std::string_view stage) const {
    std::lock_guard lock(mu_);
    auto it = stage_calls_.find(std::string(stage));
    return it == stage_calls_.end() ? 0 : it->second;
  }
  std::vector<ChatRequest> call_log() const {
    std::lock_guard lock(mu_);
    return log_;
  }
  void reset_counters() {
    std::lock_guard lock(mu_);
    calls_ = 0;
    stage_calls_.clear();
    log_.clear();
  }

  static constexpr std::size_t kEmbeddingDim = 256;

  /// Bag of content words hashed into a fixed number of buckets, so texts
  /// sharing vocabulary have high cosine similarity.
  std::vector<float> hashed_embedding(std::string_view t) const {
    std::vector<float> v(kEmbeddingDim, 0.0f);
    auto words = mock::content_tokens(t);
    if (words.empty()) words = detail::word_tokens(t);
    if (words.empty()) words.emplace_back(t);
    for (const auto& w : words) v[io::mix64(seed_ ^ io::fnv1a64(w)) % kEmbeddingDim] += 1.0f;
    normalize_l2(v);
    return v;
  }

 private:
  std::uint64_t request_hash(const ChatRequest& r) const {
    std::uint64_t h = io::mix64(seed_ ^ io::fnv1a64(r.stage));
    for (const auto& m : r.messages) h = io::mix64(h ^ io::fnv1a64(m.content));
    return h;
  }

  static std::optional<json> payload(const ChatRequest& r) {
    if (auto o = locate_json_object(r.messages.back().content)) return std::move(o->value);
    return std::nullopt;
  }

  static std::string str(const json& j, const char* key) {
    auto it = j.find(key);
    return (it != j.end() && it->is_string()) ? it->get<std::string>() : std::string();
  }

  std::string synthesize(const ChatRequest& r) const {
    const auto h = request_hash(r);
    const auto& st = r.stage;
    if (st == stage::kDiagnoseSingle || st == stage::kPipelineDetect || st == stage::kPipelineLocate ||
        st == stage::kPipelineFix)
      return synthesize_diagnosis(r, h);
    const auto p = payload(r).value_or(json::object());
    const auto context = str(p, "context");
    const auto ctx_sents = mock::sentences(context);
    const auto ctx_tokens = mock::token_set(context);

    if (st == stage::kSeedInstruction) {
      const auto task = parse_task_type(str(p, "task_type")).value_or(TaskType::Summary);
      static const char* summary[] = {"Summarize the passage in two sentences.",
                                      "Give a short summary of the key facts in the passage.",
                                      "Briefly summarize what the passage reports."};
      static const char* logical[] = {"What conclusion follows from the facts stated in the passage?",
                                      "Reason through the passage and state what it implies.",
                                      "Which statement is best supported by the passage, and why?"};
      static const char* math[] = {"Using the figures in the passage, work out the key quantity step by step.",
                                   "Compute the result implied by the numbers in the passage.",
                                   "Work through the numeric details of the passage to a final answer."};
      const char** pool = task == TaskType::Summary ? summary : task == TaskType::Logical ? logical : math;
      return io::dump(json{{"query", pool[h % 3]}});
    }
    if (st == stage::kSeedAnswer) {
      const auto task = parse_task_type(str(p, "task_type")).value_or(TaskType::Summary);
      if (ctx_sents.empty()) return io::dump(json{{"answer", ""}});
      if (task == TaskType::Summary) {
        std::string answer = ctx_sents[0].norm;
        for (std::size_t i = 1; i < ctx_sents.size(); ++i) {
          if (std::regex_search(ctx_sents[i].norm, mock::number_re())) {
            answer += " " + ctx_sents[i].norm;
            break;
          }
        }
        return io::dump(json{{"answer", answer}});
      }
      const auto steps = 1 + h % std::min<std::size_t>(ctx_sents.size(), 5);
      std::string cot;
      for (std::size_t i = 0; i < steps; ++i) cot += "Step " + std::to_string(i + 1) + ": " + ctx_sents[i].norm + "\n";
      cot += "Final answer: " + ctx_sents[steps - 1].norm;
      return io::dump(json{{"answer", ctx_sents[steps - 1].norm}, {"cot_answer", cot}});
    }
    if (st == stage::kInjectDirect || st == stage::kInjectChain || st == stage::kFuzzyReplace) {
      const auto response = str(p, "response");
      auto sents = mock::sentences(response);
      json out = {{"response", response}, {"edited_sentences", json::array()}};
      if (sents.empty()) return io::dump(out);
      if (st == stage::kInjectChain) {
        // Perturb the last reasoning step; the final answer repeats it.
        std::size_t last = sents.size();
        for (std::size_t i = 0; i < sents.size(); ++i)
          if (mock::strip_markers(sents[i].raw) != sents[i].raw && sents[i].raw.rfind("Final", 0) != 0) last = i;
        if (last == sents.size()) return io::dump(out);
        const auto body = std::string(halludiag::detail::trim_ascii(mock::strip_markers(sents[last].raw)));
        auto changed = mock::perturb(body, ctx_tokens, h);
        if (!changed) return io::dump(out);
        std::string edited = response;
        for (std::size_t pos = 0; (pos = edited.find(body, pos)) != std::string::npos; pos += changed->size())
          edited.replace(pos, body.size(), *changed);
        out["response"] = edited;
        out["edited_sentences"] = {*changed};
        out["perturbed_step"] = last + 1;
        return io::dump(out);
      }
      for (std::size_t k = 0; k < sents.size(); ++k) {
        const auto& s = sents[(h + k) % sents.size()];
        auto changed = st == stage::kFuzzyReplace ? mock::soften_number(s.raw) : mock::perturb(s.raw, ctx_tokens, h);
        if (!changed) continue;
        out["response"] = mock::replace_sentence(response, s.raw, *changed);
        out["edited_sentences"] = {*changed};
        if (st == stage::kFuzzyReplace) out["detail"] = s.raw + " -> " + *changed;
        break;
      }
      return io::dump(out);
    }
    if (st == stage::kJudgeQuality) return io::dump(json{{"score", 6 + h % 5}});
    if (st == stage::kJudgeLabel) {
      const auto bad = mock::unsupported(mock::sentences(str(p, "response")), context);
      return io::dump(json{{"label", bad.empty() ? "NonHalu" : "Halu"}, {"confidence", 70 + h % 30}});
    }
    if (st == stage::kEnrichTrace) {
      const auto response = str(p, "response");
      json cited = json::array();
      for (std::size_t i = 0; i < ctx_sents.size(); ++i)
        if (mock::overlap(ctx_sents[i].raw, response) >= 2) cited.push_back(i + 1);
      const auto label = str(p, "label");
      std::string trace = label == "Halu"
                              ? "The response contains statements that the context does not support; "
                                "the marked sentences differ from the cited source sentences."
                              : "Every statement in the response is supported by the cited context sentences.";
      return io::dump(json{{"trace", trace}, {"cited_sentences", cited}});
    }
    return io::dump(json{{"text", "mock response " + io::hex64(h)}});
  }

  std::string synthesize_diagnosis(const ChatRequest& r, std::uint64_t h) const {
    const auto in = mock::parse_diagnosis_input(r.messages.back().content);
    if (!in) return "I could not find the input data.";
    const auto answer = mock::sentences(in->answer);
    const auto context = mock::sentences(in->context);
    const auto bad = mock::unsupported(answer, in->context);

    std::vector<std::string> spans;
    std::string corrected = in->answer;
    for (auto i : bad) {
      spans.push_back(answer[i].raw);
      corrected = mock::replace_sentence(corrected, answer[i].raw, mock::closest_sentence(answer[i].raw, context));
    }
    if (r.stage == stage::kPipelineDetect)
      return io::dump(json{{"hallucinated", !bad.empty()},
                           {"reason", bad.empty() ? "All claims are supported." : "Unsupported claims found."}});
    if (r.stage == stage::kPipelineLocate) return io::dump(json{{"hallucinations", spans}});
    if (r.stage == stage::kPipelineFix) return io::dump(json{{"corrected_answer", corrected}});

    DiagnosisReport rep;
    if (bad.empty()) {
      rep.conclusion = Conclusion::Pass;
      rep.diagnosis = "Every claim in the answer is supported by the context.";
    } else {
      rep.conclusion = Conclusion::Fail;
      rep.diagnosis = "The answer makes " + std::to_string(bad.size()) +
                      " claim(s) that the context does not support: \"" + answer[bad[0]].norm + "\"";
      rep.hallucinations = spans;
      rep.corrected_answer = corrected;
    }
    const auto body = serialize_report(rep);
    if (h % 2 == 0) return body;
    return "Let me compare each sentence of the answer with the context.\n```json\n" + body + "\n```";
  }

  std::uint64_t seed_;
  mutable std::mutex mu_;
  std::atomic<std::size_t> calls_{0};
  std::map<std::string, std::size_t> stage_calls_;
  std::vector<ChatRequest> log_;
  std::unordered_map<std::string, std::string> script_;
  std::unordered_map<std::string, std::vector<float>> embed_script_;
  Responder responder_;
};

}  // namespace halludiag::llm
