// SPDX-License-Identifier: Apache-2.0
//
// The single JSON config file shared by every CLI subcommand, backend and
// scorer factories, and the run manifest.
#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include <json.hpp>

#include "halludiag/hdg/pipeline.hpp"
#include "halludiag/http_transport.hpp"
#include "halludiag/io.hpp"
#include "halludiag/llm.hpp"
#include "halludiag/metrics.hpp"
#include "halludiag/mock_backend.hpp"
#include "halludiag/reward.hpp"
#include "halludiag/runner.hpp"
#include "halludiag/service.hpp"

namespace halludiag::config {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

struct JudgeSpec {
  std::string backend;
  double weight = 1.0;
};

struct GenerateSection {
  hdg::PipelineConfig pipeline;
  std::string generator = "mock", embedder = "mock", quality = "mock";
  std::vector<JudgeSpec> judges{{"mock", 1.0}};
};

struct ScorerSpec {
  std::string type = "lexical";  ///< "lexical" or "http"
  std::string url;
  double timeout_s = 30.0;
  int retries = 2;
};

struct EvalSection {
  std::string backend = "mock";
  runner::Method method = runner::Method::Single;
  int concurrency = 4;
  ScorerSpec scorer;
  fs::path prompt_dir;  ///< empty: built-in prompts
};

struct AppConfig {
  fs::path path;  ///< where it was loaded from; empty for defaults
  std::uint64_t seed = 0;
  RewardConfig reward;
  std::map<std::string, llm::BackendConfig> backends{{"mock", {}}};
  GenerateSection generate;
  EvalSection eval;
  service::ServiceConfig serve;
};

namespace detail {

inline void only_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError(section + "." + k + ": unknown key");
}

template <class T>
void get(const json& j, const char* key, T& dst, const std::string& section) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    dst = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type");
  }
}

inline void get_path(const json& j, const char* key, fs::path& dst, const std::string& section, const fs::path& base) {
  std::string s;
  get(j, key, s, section);
  if (!s.empty()) dst = fs::path(s).is_absolute() ? fs::path(s) : base / s;
}

inline void parse_generate(const json& j, GenerateSection& g, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("generate: expected an object");
  only_keys(j, "generate", {"corpus", "out", "stats", "quarantine", "checkpoint_dir", "workers", "max_chars",
                            "max_samples", "distractor_pool", "filter", "task_mix", "strategy_mix", "verify",
                            "generator", "embedder", "quality", "judges"});
  auto& p = g.pipeline;
  get_path(j, "corpus", p.corpus, "generate", base);
  get_path(j, "out", p.out, "generate", base);
  get_path(j, "stats", p.stats, "generate", base);
  get_path(j, "quarantine", p.quarantine, "generate", base);
  get_path(j, "checkpoint_dir", p.checkpoint_dir, "generate", base);
  get(j, "workers", p.workers, "generate");
  get(j, "max_chars", p.max_chars, "generate");
  get(j, "max_samples", p.max_samples, "generate");
  get(j, "distractor_pool", p.distractor_pool, "generate");
  if (auto f = j.find("filter"); f != j.end()) {
    only_keys(*f, "generate.filter", {"min_chars", "min_alpha_ratio", "max_char_trigram_ratio", "max_word_trigram_dup"});
    get(*f, "min_chars", p.filter.min_chars, "generate.filter");
    get(*f, "min_alpha_ratio", p.filter.min_alpha_ratio, "generate.filter");
    get(*f, "max_char_trigram_ratio", p.filter.max_char_trigram_ratio, "generate.filter");
    get(*f, "max_word_trigram_dup", p.filter.max_word_trigram_dup, "generate.filter");
  }
  if (auto t = j.find("task_mix"); t != j.end()) {
    only_keys(*t, "generate.task_mix", {"summary", "logical", "math"});
    get(*t, "summary", p.task_mix.summary, "generate.task_mix");
    get(*t, "logical", p.task_mix.logical, "generate.task_mix");
    get(*t, "math", p.task_mix.math, "generate.task_mix");
  }
  if (auto s = j.find("strategy_mix"); s != j.end()) {
    only_keys(*s, "generate.strategy_mix", {"context_add", "context_delete", "inject", "fuzzy", "none"});
    get(*s, "context_add", p.strategy_mix.context_add, "generate.strategy_mix");
    get(*s, "context_delete", p.strategy_mix.context_delete, "generate.strategy_mix");
    get(*s, "inject", p.strategy_mix.inject, "generate.strategy_mix");
    get(*s, "fuzzy", p.strategy_mix.fuzzy, "generate.strategy_mix");
    get(*s, "none", p.strategy_mix.none, "generate.strategy_mix");
  }
  if (auto v = j.find("verify"); v != j.end()) {
    only_keys(*v, "generate.verify", {"min_quality", "min_confidence"});
    get(*v, "min_quality", p.verify.min_quality, "generate.verify");
    get(*v, "min_confidence", p.verify.min_confidence, "generate.verify");
  }
  get(j, "generator", g.generator, "generate");
  get(j, "embedder", g.embedder, "generate");
  get(j, "quality", g.quality, "generate");
  if (auto js = j.find("judges"); js != j.end()) {
    if (!js->is_array() || js->empty()) throw ConfigError("generate.judges: expected a non-empty list");
    g.judges.clear();
    for (const auto& e : *js) {
      JudgeSpec s;
      if (e.is_string()) {
        s.backend = e.get<std::string>();
      } else if (e.is_object()) {
        only_keys(e, "generate.judges[]", {"backend", "weight"});
        get(e, "backend", s.backend, "generate.judges[]");
        get(e, "weight", s.weight, "generate.judges[]");
      } else {
        throw ConfigError("generate.judges[]: expected a backend name or {backend, weight}");
      }
      if (!(s.weight > 0)) throw ConfigError("generate.judges[].weight: must be positive");
      g.judges.push_back(std::move(s));
    }
  }
}

inline void parse_eval(const json& j, EvalSection& e, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("eval: expected an object");
  only_keys(j, "eval", {"backend", "method", "concurrency", "scorer", "prompt_dir"});
  get(j, "backend", e.backend, "eval");
  std::string method;
  get(j, "method", method, "eval");
  if (!method.empty()) {
    auto m = runner::parse_method(method);
    if (!m) throw ConfigError("eval.method: expected \"single\" or \"pipeline\"");
    e.method = *m;
  }
  get(j, "concurrency", e.concurrency, "eval");
  if (e.concurrency < 1) throw ConfigError("eval.concurrency: must be >= 1");
  get_path(j, "prompt_dir", e.prompt_dir, "eval", base);
  if (auto s = j.find("scorer"); s != j.end()) {
    if (s->is_string()) {
      e.scorer.type = s->get<std::string>();
    } else if (s->is_object()) {
      only_keys(*s, "eval.scorer", {"type", "url", "timeout_s", "retries"});
      get(*s, "type", e.scorer.type, "eval.scorer");
      get(*s, "url", e.scorer.url, "eval.scorer");
      get(*s, "timeout_s", e.scorer.timeout_s, "eval.scorer");
      get(*s, "retries", e.scorer.retries, "eval.scorer");
    } else {
      throw ConfigError("eval.scorer: expected a string or an object");
    }
    if (e.scorer.type != "lexical" && e.scorer.type != "http")
      throw ConfigError("eval.scorer.type: expected \"lexical\" or \"http\"");
    if (e.scorer.type == "http" && e.scorer.url.empty()) throw ConfigError("eval.scorer.url: required for http");
  }
}

}  // namespace detail

inline AppConfig parse_config(const json& j, const fs::path& base = {}) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  detail::only_keys(j, "config", {"seed", "reward", "backends", "generate", "eval", "serve"});
  AppConfig c;
  detail::get(j, "seed", c.seed, "config");
  if (auto r = j.find("reward"); r != j.end()) c.reward = reward_config_from_json(*r);
  if (auto b = j.find("backends"); b != j.end()) {
    if (!b->is_object()) throw ConfigError("backends: expected an object of named backends");
    for (const auto& [name, v] : b->items()) {
      try {
        c.backends[name] = llm::BackendConfig::from_json(v);
      } catch (const ConfigError& e) {
        throw ConfigError("backends." + name + ": " + e.what());
      }
    }
  }
  if (auto g = j.find("generate"); g != j.end()) detail::parse_generate(*g, c.generate, base);
  if (auto e = j.find("eval"); e != j.end()) detail::parse_eval(*e, c.eval, base);
  c.serve = service::ServiceConfig::from_json(j.contains("serve") ? j["serve"] : json(), c.reward);
  return c;
}

/// Reads and parses a config file; every failure is a ConfigError.
inline AppConfig load_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  auto c = parse_config(j, fs::absolute(path).parent_path());
  c.path = path;
  return c;
}

/// Mock backends are seeded from the run seed and the backend's own seed, so
/// one run seed fixes every mock output.
inline llm::BackendPtr make_backend(const AppConfig& c, const std::string& name, std::uint64_t run_seed) {
  auto it = c.backends.find(name);
  if (it == c.backends.end()) throw ConfigError("unknown backend \"" + name + "\"");
  const auto& b = it->second;
  if (b.type == "http") return std::make_shared<llm::HttpBackend>(b, std::make_shared<llm::HttplibTransport>(b.base_url));
  auto m = std::make_shared<llm::MockBackend>(io::mix64(run_seed ^ io::mix64(b.seed)));
  if (!b.script.empty()) {
    const fs::path p = c.path.empty() || fs::path(b.script).is_absolute()
                           ? fs::path(b.script)
                           : fs::absolute(c.path).parent_path() / b.script;
    if (!fs::is_regular_file(p)) throw ConfigError("mock script not found: " + p.string());
    m->load_script(io::read_file(p));
  }
  return m;
}

/// Instances are shared across roles that name the same backend.
inline hdg::PipelineBackends make_pipeline_backends(const AppConfig& c, std::uint64_t run_seed) {
  std::map<std::string, llm::BackendPtr> made;
  auto get = [&](const std::string& name) {
    auto& slot = made[name];
    if (!slot) slot = make_backend(c, name, run_seed);
    return slot;
  };
  hdg::PipelineBackends be;
  be.generator = get(c.generate.generator);
  be.embedder = get(c.generate.embedder);
  be.quality = get(c.generate.quality);
  for (const auto& j : c.generate.judges)
    be.judges.push_back({std::make_shared<hdg::LlmJudge>(j.backend, get(j.backend)), j.weight});
  return be;
}

inline std::unique_ptr<ConsistencyScorer> make_scorer(const ScorerSpec& s) {
  if (s.type == "http")
    return std::make_unique<HttpConsistencyScorer>(std::make_shared<llm::HttplibTransport>(s.url), s.timeout_s,
                                                   s.retries);
  return std::make_unique<LexicalOverlapScorer>();
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t seed = 0;
  ojson inputs = ojson::object();
  ojson outputs = ojson::object();
  std::string started_at = utc_now();
  std::string finished_at;
  ojson counters = ojson::object();
  std::string status = "ok";

  ojson to_json() const {
    ojson j;
    j["command"] = command;
    j["config_path"] = config_path;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["started_at"] = started_at;
    j["finished_at"] = finished_at;
    j["version"] = std::string(kVersion);
    j["status"] = status;
    j["counters"] = counters;
    return j;
  }

  void write(const fs::path& path) {
    finished_at = utc_now();
    io::write_file_atomic(path, io::dump_ordered(to_json(), 2) + "\n");
  }
};

}  // namespace halludiag::config
