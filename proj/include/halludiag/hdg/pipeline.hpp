// SPDX-License-Identifier: Apache-2.0
//
// End-to-end generator run: corpus -> filter -> split -> seed -> augment ->
// verify -> enrich -> JSONL, with exact stratified task/strategy quotas,
// per-sample checkpoints, and conserved stage counters.
#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>
#include <json.hpp>

#include "halludiag/hdg/filter.hpp"
#include "halludiag/hdg/record.hpp"
#include "halludiag/hdg/stages.hpp"
#include "halludiag/io.hpp"
#include "halludiag/llm.hpp"

namespace halludiag::hdg {

namespace fs = std::filesystem;

struct TaskMix {
  double summary = 0.5, logical = 0.25, math = 0.25;
};

/// Relative weights of augmentation families. `inject` means entity injection
/// for summaries and chain perturbation otherwise; `fuzzy` weight is dropped
/// for non-summary tasks.
struct StrategyMix {
  double context_add = 1.0 / 6.0;
  double context_delete = 1.0 / 6.0;
  double inject = 1.0 / 3.0;
  double fuzzy = 1.0 / 3.0;
  double none = 0.0;
};

struct PipelineConfig {
  fs::path corpus;
  fs::path out;             ///< dataset JSONL
  fs::path stats;           ///< defaults to <out>.stats.json
  fs::path quarantine;      ///< defaults to <out>.quarantine.jsonl
  fs::path checkpoint_dir;  ///< empty disables checkpointing
  std::uint64_t seed = 0;
  int workers = 4;
  std::size_t max_chars = 1500;
  std::size_t max_samples = 0;  ///< 0 = every chunk
  std::size_t distractor_pool = 8;
  FilterRules filter;
  TaskMix task_mix;
  StrategyMix strategy_mix;
  VerifyRules verify;

  void validate() const {
    filter.validate();
    if (workers < 1) throw ConfigError("generate.workers must be >= 1");
    if (max_chars < 200) throw ConfigError("generate.max_chars must be >= 200");
    for (double w : {task_mix.summary, task_mix.logical, task_mix.math})
      if (!(w >= 0)) throw ConfigError("generate.task_mix weights must be non-negative");
    if (task_mix.summary + task_mix.logical + task_mix.math <= 0) throw ConfigError("generate.task_mix is all zero");
    const auto& s = strategy_mix;
    for (double w : {s.context_add, s.context_delete, s.inject, s.fuzzy, s.none})
      if (!(w >= 0)) throw ConfigError("generate.strategy_mix weights must be non-negative");
    if (s.context_add + s.context_delete + s.inject + s.fuzzy + s.none <= 0)
      throw ConfigError("generate.strategy_mix is all zero");
    if (verify.min_quality < 0 || verify.min_quality > 1 || verify.min_confidence < 0 || verify.min_confidence > 1)
      throw ConfigError("generate.verify thresholds must be in [0,1]");
  }

  /// Canonical JSON of everything that affects outputs (paths excluded).
  json fingerprint_json() const {
    return {{"seed", seed},
            {"max_chars", max_chars},
            {"max_samples", max_samples},
            {"distractor_pool", distractor_pool},
            {"filter",
             {filter.min_chars, filter.min_alpha_ratio, filter.max_char_trigram_ratio, filter.max_word_trigram_dup}},
            {"task_mix", {task_mix.summary, task_mix.logical, task_mix.math}},
            {"strategy_mix",
             {strategy_mix.context_add, strategy_mix.context_delete, strategy_mix.inject, strategy_mix.fuzzy,
              strategy_mix.none}},
            {"verify", {verify.min_quality, verify.min_confidence}}};
  }
};

struct PipelineBackends {
  llm::BackendPtr generator;
  llm::BackendPtr embedder;
  llm::BackendPtr quality;
  std::vector<WeightedJudge> judges;
};

struct StageCounter {
  std::uint64_t attempted = 0, passed = 0, dropped = 0, quarantined = 0;
  std::map<std::string, std::uint64_t> reasons;

  bool conserves() const { return attempted == passed + dropped + quarantined; }
};

struct TaskStats {
  std::uint64_t samples = 0;  ///< seed samples assigned to the task
  std::uint64_t records = 0;
  std::uint64_t halu = 0, non_halu = 0;
  double context_chars = 0.0, context_tokens = 0.0;  ///< sums; averaged on output
};

struct PipelineResult {
  std::vector<DatasetRecord> records;
  FilterStats filter;
  std::uint64_t paragraphs = 0, chunks = 0, short_chunks = 0;
  std::map<std::string, StageCounter> stages;  ///< seed, augment, verify, enrich
  std::map<TaskType, TaskStats> tasks;
  std::uint64_t quarantined = 0;
  json stats;
};

// ---------------------------------------------------------------------------
// Deterministic assignment
// ---------------------------------------------------------------------------

/// Largest-remainder apportionment of n items to weights; exact totals.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  std::vector<std::size_t> q(weights.size(), 0);
  if (total <= 0.0 || n == 0) return q;
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t given = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(n) * weights[i] / total;
    q[i] = static_cast<std::size_t>(exact);
    given += q[i];
    rem.emplace_back(exact - static_cast<double>(q[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; given < n; ++k, ++given) ++q[rem[k % rem.size()].second];
  return q;
}

/// Fisher-Yates on a standard-defined engine, so orders match across platforms.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

struct Assignment {
  TaskType task;
  Strategy strategy;
};

inline std::vector<Assignment> assign(std::size_t n, const TaskMix& tm, const StrategyMix& sm, std::uint64_t seed) {
  const std::vector<TaskType> task_order{TaskType::Summary, TaskType::Logical, TaskType::Math};
  const auto tq = apportion(n, {tm.summary, tm.logical, tm.math});
  std::vector<TaskType> tasks;
  for (std::size_t t = 0; t < 3; ++t) tasks.insert(tasks.end(), tq[t], task_order[t]);
  seeded_shuffle(tasks, io::mix64(seed ^ 0x7461736bULL));

  std::vector<Assignment> out(n);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto task = task_order[t];
    const bool summary = task == TaskType::Summary;
    const Strategy inject = summary ? Strategy::DirectInject : Strategy::ReasoningChainInject;
    const std::vector<Strategy> kinds{Strategy::ContextAdd, Strategy::ContextDelete, inject, Strategy::FuzzyReplace,
                                      Strategy::None};
    const auto sq = apportion(tq[t], {sm.context_add, sm.context_delete, sm.inject, summary ? sm.fuzzy : 0.0, sm.none});
    std::vector<Strategy> strategies;
    for (std::size_t k = 0; k < kinds.size(); ++k) strategies.insert(strategies.end(), sq[k], kinds[k]);
    seeded_shuffle(strategies, io::mix64(seed ^ (0x737472ULL + t)));
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (tasks[i] == task) out[i] = {task, strategies[k++]};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-sample processing
// ---------------------------------------------------------------------------

enum class SampleStage { Seed = 0, Augment = 1, Verify = 2, Enrich = 3, Done = 4 };

inline constexpr const char* kStageNames[] = {"seed", "augment", "verify", "enrich"};

struct SampleOutcome {
  std::string id;
  TaskType task = TaskType::Summary;
  Strategy strategy = Strategy::None;
  SampleStage stage = SampleStage::Seed;  ///< where it stopped; Done if emitted
  bool quarantined = false;
  std::string reason;
  std::optional<DatasetRecord> record;
};

inline json outcome_to_json(const SampleOutcome& o) {
  json j = {{"id", o.id},
            {"task_type", std::string(to_string(o.task))},
            {"strategy", std::string(to_string(o.strategy))},
            {"stage", static_cast<int>(o.stage)},
            {"quarantined", o.quarantined},
            {"reason", o.reason}};
  if (o.record) j["record"] = json::parse(to_json(*o.record).dump());
  return j;
}

inline SampleOutcome outcome_from_json(const json& j) {
  SampleOutcome o;
  o.id = j.at("id").get<std::string>();
  o.task = parse_task_type(j.at("task_type").get<std::string>()).value();
  o.strategy = parse_strategy(j.at("strategy").get<std::string>()).value();
  o.stage = static_cast<SampleStage>(j.at("stage").get<int>());
  o.quarantined = j.at("quarantined").get<bool>();
  o.reason = j.at("reason").get<std::string>();
  if (j.contains("record")) o.record = record_from_json(j["record"]);
  return o;
}

inline json seed_to_json(const SeedSample& s) {
  json j = {{"context", s.context}, {"query", s.query}, {"answer", s.answer},
            {"task_type", std::string(to_string(s.task_type))}};
  if (s.cot_answer) j["cot_answer"] = *s.cot_answer;
  return j;
}

inline SeedSample seed_from_json(const json& j) {
  SeedSample s;
  s.context = j.at("context").get<std::string>();
  s.query = j.at("query").get<std::string>();
  s.answer = j.at("answer").get<std::string>();
  s.task_type = parse_task_type(j.at("task_type").get<std::string>()).value();
  if (j.contains("cot_answer")) s.cot_answer = j["cot_answer"].get<std::string>();
  return s;
}

namespace detail {

inline std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "hdg-%06zu", index + 1);
  return buf;
}

inline std::size_t whitespace_tokens(std::string_view s) {
  const auto n = text::normalize(s);
  if (n.empty()) return 0;
  return static_cast<std::size_t>(std::count(n.begin(), n.end(), ' ')) + 1;
}

class Checkpoint {
 public:
  Checkpoint(fs::path dir, const std::string& fingerprint) : dir_(std::move(dir)) {
    if (dir_.empty()) return;
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw ConfigError("cannot create checkpoint dir " + dir_.string() + ": " + ec.message());
    const auto manifest = dir_ / "checkpoint.json";
    if (fs::exists(manifest)) {
      const auto j = json::parse(io::read_file(manifest), nullptr, false);
      if (j.is_discarded() || j.value("fingerprint", "") != fingerprint)
        throw ConfigError("checkpoint dir " + dir_.string() + " belongs to a different corpus or config");
    } else {
      io::write_file_atomic(manifest, io::dump(json{{"fingerprint", fingerprint}}, 2) + "\n");
    }
  }

  bool enabled() const { return !dir_.empty(); }

  std::optional<json> load(const std::string& id, const char* kind) const {
    if (!enabled()) return std::nullopt;
    const auto p = dir_ / (id + "." + kind + ".json");
    if (!fs::exists(p)) return std::nullopt;
    auto j = json::parse(io::read_file(p), nullptr, false);
    if (j.is_discarded()) return std::nullopt;  // torn file: redo the work
    return j;
  }

  void store(const std::string& id, const char* kind, const json& j) const {
    if (enabled()) io::write_file_atomic(dir_ / (id + "." + kind + ".json"), io::dump(j) + "\n");
  }

 private:
  fs::path dir_;
};

}  // namespace detail

/// Runs every stage for one sample. Never throws for per-sample failures.
inline SampleOutcome process_sample(std::size_t index, const std::vector<std::string>& contexts,
                                    const Assignment& asg, const PipelineConfig& cfg, const PipelineBackends& be,
                                    const detail::Checkpoint& ckpt) {
  SampleOutcome o;
  o.id = detail::sample_id(index);
  o.task = asg.task;
  o.strategy = asg.strategy;
  try {
    o.stage = SampleStage::Seed;
    SeedSample seed;
    if (auto saved = ckpt.load(o.id, "seed")) {
      seed = seed_from_json(*saved);
    } else {
      seed = generate_seed(contexts[index], asg.task, *be.generator);
      ckpt.store(o.id, "seed", seed_to_json(seed));
    }

    o.stage = SampleStage::Augment;
    Augmented aug;
    try {
      switch (asg.strategy) {
        case Strategy::ContextAdd: {
          std::vector<std::string> pool;
          for (std::size_t k = 1; k < contexts.size() && pool.size() < cfg.distractor_pool; ++k)
            pool.push_back(contexts[(index + k) % contexts.size()]);
          aug = augment_context(seed, ContextMode::Add, *be.embedder, pool);
          break;
        }
        case Strategy::ContextDelete: aug = augment_context(seed, ContextMode::Delete, *be.embedder, {}); break;
        case Strategy::DirectInject: aug = inject_hallucination(seed, InjectMode::Direct, *be.generator); break;
        case Strategy::ReasoningChainInject:
          aug = inject_hallucination(seed, InjectMode::ReasoningChain, *be.generator);
          break;
        case Strategy::FuzzyReplace: aug = fuzzy_replace(seed, *be.generator); break;
        case Strategy::None: aug = no_augmentation(seed); break;
      }
    } catch (const PreconditionError& e) {
      throw Discard("augment:precondition", e.what());
    }

    o.stage = SampleStage::Verify;
    const auto verdict = verify_quality(aug, be.judges, *be.quality, cfg.verify);
    if (!verdict.accepted) throw Discard("verify:" + verdict.reason, "rejected by verification");

    o.stage = SampleStage::Enrich;
    auto record = enrich_metadata(aug, verdict, *be.generator, o.id);
    if (auto problems = validate_record(record); !problems.empty())
      throw Discard("enrich:schema", problems.front());
    o.record = std::move(record);
    o.stage = SampleStage::Done;
  } catch (const Discard& d) {
    o.reason = d.reason();
  } catch (const Quarantine& q) {
    o.quarantined = true;
    o.reason = std::string("quarantine: ") + q.what();
  } catch (const std::exception& e) {
    o.reason = std::string(kStageNames[std::min<int>(static_cast<int>(o.stage), 3)]) + ":error";
    spdlog::warn("sample {} failed at {}: {}", o.id, o.reason, e.what());
  }
  return o;
}

inline json stats_to_json(const PipelineResult& r) {
  json stages = json::object();
  for (const auto& [name, c] : r.stages)
    stages[name] = {{"attempted", c.attempted},
                    {"passed", c.passed},
                    {"dropped", c.dropped},
                    {"quarantined", c.quarantined},
                    {"reasons", c.reasons}};
  json tasks = json::object();
  std::uint64_t halu = 0, non_halu = 0;
  for (const auto& [t, s] : r.tasks) {
    const double n = s.records ? static_cast<double>(s.records) : 1.0;
    tasks[std::string(to_string(t))] = {{"samples", s.samples},
                                        {"records", s.records},
                                        {"avg_context_chars", s.records ? s.context_chars / n : 0.0},
                                        {"avg_context_tokens", s.records ? s.context_tokens / n : 0.0},
                                        {"halu", s.halu},
                                        {"non_halu", s.non_halu}};
    halu += s.halu;
    non_halu += s.non_halu;
  }
  return {{"corpus",
           {{"paragraphs", r.paragraphs},
            {"filter", to_json(r.filter)},
            {"chunks", r.chunks},
            {"short_chunks", r.short_chunks}}},
          {"stages", stages},
          {"tasks", tasks},
          {"totals",
           {{"records", r.records.size()}, {"halu", halu}, {"non_halu", non_halu}, {"quarantined", r.quarantined}}}};
}

/// Runs the generator with pre-loaded paragraphs. Writes nothing.
inline PipelineResult run_pipeline_on(const std::vector<std::string>& paragraphs, const PipelineConfig& cfg,
                                      const PipelineBackends& be, const std::string& corpus_fingerprint = "") {
  cfg.validate();
  if (!be.generator || !be.embedder || !be.quality || be.judges.empty())
    throw ConfigError("generator, embedder, quality judge and at least one label judge are required");

  PipelineResult res;
  res.paragraphs = paragraphs.size();
  const auto kept = filter_corpus(paragraphs, cfg.filter, res.filter);

  std::vector<std::string> contexts;
  for (const auto& p : kept) {
    for (auto& chunk : recursive_split(p, cfg.max_chars)) {
      ++res.chunks;
      if (text::normalized_length(chunk) < cfg.filter.min_chars) {
        ++res.short_chunks;
        continue;
      }
      contexts.push_back(std::move(chunk));
    }
  }
  if (cfg.max_samples && contexts.size() > cfg.max_samples) contexts.resize(cfg.max_samples);

  const auto assignments = assign(contexts.size(), cfg.task_mix, cfg.strategy_mix, cfg.seed);
  const std::string fingerprint =
      io::hex64(io::fnv1a64(corpus_fingerprint + io::dump(cfg.fingerprint_json())));
  const detail::Checkpoint ckpt(cfg.checkpoint_dir, fingerprint);

  std::vector<SampleOutcome> outcomes(contexts.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < contexts.size();) {
      const auto id = detail::sample_id(i);
      if (auto done = ckpt.load(id, "done")) {
        try {
          outcomes[i] = outcome_from_json(*done);
          continue;
        } catch (const std::exception&) {
          // Unreadable checkpoint: recompute.
        }
      }
      outcomes[i] = process_sample(i, contexts, assignments[i], cfg, be, ckpt);
      if (!outcomes[i].quarantined) ckpt.store(id, "done", outcome_to_json(outcomes[i]));
    }
  };
  {
    std::vector<std::jthread> pool;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), std::max<std::size_t>(1, contexts.size()));
    for (std::size_t w = 0; w < n; ++w) pool.emplace_back(worker);
  }

  for (const char* s : kStageNames) res.stages[s];
  for (auto t : {TaskType::Summary, TaskType::Logical, TaskType::Math}) res.tasks[t];
  for (auto& o : outcomes) {
    ++res.tasks[o.task].samples;
    const int reached = static_cast<int>(o.stage);
    for (int s = 0; s < 4; ++s) {
      if (s > reached) break;
      auto& c = res.stages[kStageNames[s]];
      ++c.attempted;
      if (s < reached) {
        ++c.passed;
      } else if (o.quarantined) {
        ++c.quarantined;
        ++c.reasons["quarantine"];
      } else {
        ++c.dropped;
        ++c.reasons[o.reason];
      }
    }
    if (o.quarantined) ++res.quarantined;
    if (o.record) {
      auto& ts = res.tasks[o.task];
      ++ts.records;
      (o.record->label == Label::Halu ? ts.halu : ts.non_halu) += 1;
      ts.context_chars += static_cast<double>(text::normalized_length(o.record->context));
      ts.context_tokens += static_cast<double>(detail::whitespace_tokens(o.record->context));
      res.records.push_back(std::move(*o.record));
    }
  }
  res.stats = stats_to_json(res);

  json quarantine = json::array();
  for (const auto& o : outcomes)
    if (o.quarantined) quarantine.push_back(o.id);
  res.stats["quarantined_ids"] = quarantine;
  return res;
}

inline std::string dataset_jsonl(const std::vector<DatasetRecord>& records) {
  std::string out;
  for (const auto& r : records) out += io::dump_ordered(to_json(r)) + "\n";
  return out;
}

/// Full run from the configured corpus path; writes dataset, stats and
/// quarantine files atomically.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const PipelineBackends& be) {
  cfg.validate();
  std::string corpus_bytes;
  try {
    corpus_bytes = io::read_file(cfg.corpus);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read corpus " + cfg.corpus.string() + ": " + e.what());
  }
  const auto first = halludiag::detail::trim_ascii(corpus_bytes);
  const bool jsonl = cfg.corpus.extension() == ".jsonl" || (!first.empty() && first.front() == '{');
  const auto paragraphs = parse_corpus(corpus_bytes, jsonl);
  auto res = run_pipeline_on(paragraphs, cfg, be, io::hex64(io::fnv1a64(corpus_bytes)));

  const auto stats_path = cfg.stats.empty() ? fs::path(cfg.out.string() + ".stats.json") : cfg.stats;
  const auto quarantine_path =
      cfg.quarantine.empty() ? fs::path(cfg.out.string() + ".quarantine.jsonl") : cfg.quarantine;
  io::write_file_atomic(cfg.out, dataset_jsonl(res.records));
  io::write_file_atomic(stats_path, io::dump(res.stats, 2) + "\n");
  std::string q;
  for (const auto& id : res.stats["quarantined_ids"]) q += io::dump(json{{"id", id}}) + "\n";
  io::write_file_atomic(quarantine_path, q);
  spdlog::info("generated {} records from {} chunks ({} quarantined)", res.records.size(), res.chunks,
               res.quarantined);
  return res;
}

}  // namespace halludiag::hdg
