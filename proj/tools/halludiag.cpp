// SPDX-License-Identifier: Apache-2.0
//
// halludiag: generate, validate, eval-detect, eval-diagnose, reward, serve.
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <pthread.h>

#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "halludiag/config.hpp"
#include "halludiag/hdg.hpp"
#include "halludiag/io.hpp"
#include "halludiag/reward.hpp"
#include "halludiag/runner.hpp"
#include "halludiag/service.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
using namespace halludiag;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

config::AppConfig load(const Common& c) {
  auto cfg = c.config.empty() ? config::AppConfig{} : config::load_config(c.config);
  if (c.seed_opt && c.seed_opt->count()) cfg.seed = c.seed;
  return cfg;
}

void ensure_parent(const fs::path& p) {
  const auto dir = p.parent_path();
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir.string() + ": " + ec.message());
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

// ---------------------------------------------------------------------------

struct GenerateArgs {
  Common common;
  std::string corpus, out, checkpoint_dir, manifest;
  int workers = 0;
  std::size_t max_samples = 0;
  CLI::Option *workers_opt = nullptr, *max_samples_opt = nullptr;
};

int run_generate(const GenerateArgs& a) {
  auto cfg = load(a.common);
  auto& p = cfg.generate.pipeline;
  if (!a.corpus.empty()) p.corpus = a.corpus;
  if (!a.out.empty()) p.out = a.out;
  if (!a.checkpoint_dir.empty()) p.checkpoint_dir = a.checkpoint_dir;
  if (a.workers_opt->count()) p.workers = a.workers;
  if (a.max_samples_opt->count()) p.max_samples = a.max_samples;
  if (p.corpus.empty()) throw ConfigError("generate: no corpus (use --corpus or generate.corpus)");
  if (p.out.empty()) throw ConfigError("generate: no output path (use --out or generate.out)");
  p.seed = cfg.seed;

  config::RunManifest m;
  m.command = "generate";
  m.config_path = cfg.path.string();
  m.seed = cfg.seed;
  m.inputs["corpus"] = p.corpus.string();

  const auto be = config::make_pipeline_backends(cfg, cfg.seed);
  ensure_parent(p.out);
  if (!p.checkpoint_dir.empty()) ensure_parent(p.checkpoint_dir / "x");
  const auto res = hdg::run_pipeline(p, be);

  m.outputs["dataset"] = p.out.string();
  m.outputs["stats"] = (p.stats.empty() ? with_suffix(p.out, ".stats.json") : p.stats).string();
  m.outputs["quarantine"] = (p.quarantine.empty() ? with_suffix(p.out, ".quarantine.jsonl") : p.quarantine).string();
  m.counters["paragraphs"] = res.paragraphs;
  m.counters["chunks"] = res.chunks;
  m.counters["records"] = res.records.size();
  m.counters["quarantined"] = res.quarantined;
  m.counters["stages"] = res.stats["stages"];
  m.write(a.manifest.empty() ? with_suffix(p.out, ".manifest.json") : fs::path(a.manifest));
  std::cout << res.records.size() << " records written to " << p.out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int run_validate(const std::string& data) {
  std::string bytes;
  try {
    bytes = io::read_file(data);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  const auto s = hdg::validate_dataset(bytes);
  ojson j;
  j["lines"] = s.lines;
  j["valid"] = s.valid;
  j["invalid"] = s.invalid;
  j["errors"] = s.errors;
  std::cout << io::dump_ordered(j, 2) << "\n";
  return s.invalid ? 1 : 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string data, method, backend, out, run_log, scorer, prompts;
  int concurrency = 0;
  CLI::Option* concurrency_opt = nullptr;
};

int run_eval(const EvalArgs& a, bool diagnose) {
  const auto cfg = load(a.common);
  runner::EvalOptions opt;
  opt.method = cfg.eval.method;
  if (!a.method.empty()) {
    auto m = runner::parse_method(a.method);
    if (!m) throw ConfigError("--method: expected \"single\" or \"pipeline\"");
    opt.method = *m;
  }
  opt.concurrency = a.concurrency_opt->count() ? a.concurrency : cfg.eval.concurrency;
  if (opt.concurrency < 1) throw ConfigError("--concurrency: must be >= 1");
  const fs::path prompt_dir = a.prompts.empty() ? cfg.eval.prompt_dir : fs::path(a.prompts);
  if (!prompt_dir.empty()) opt.prompts = runner::PromptSet::load(prompt_dir);
  const fs::path out = a.out;
  opt.run_log = a.run_log.empty() ? with_suffix(out, ".runlog.jsonl") : fs::path(a.run_log);

  auto scorer_spec = cfg.eval.scorer;
  if (!a.scorer.empty()) {
    if (a.scorer == "lexical") {
      scorer_spec = {};
    } else if (a.scorer.rfind("http://", 0) == 0 || a.scorer.rfind("https://", 0) == 0) {
      scorer_spec.type = "http";
      scorer_spec.url = a.scorer;
    } else {
      throw ConfigError("--scorer: expected \"lexical\" or an http(s) URL");
    }
  }

  const std::string backend_name = a.backend.empty() ? cfg.eval.backend : a.backend;
  auto backend = config::make_backend(cfg, backend_name, cfg.seed);
  const auto data = runner::load_benchmark(a.data);
  if (data.skipped) spdlog::warn("{} malformed line(s) skipped in {}", data.skipped, a.data);

  config::RunManifest m;
  m.command = diagnose ? "eval-diagnose" : "eval-detect";
  m.config_path = cfg.path.string();
  m.seed = cfg.seed;
  m.inputs["data"] = a.data;
  m.inputs["backend"] = backend_name;
  m.inputs["method"] = std::string(runner::to_string(opt.method));
  ensure_parent(out);
  ensure_parent(*opt.run_log);

  const std::string row = std::string(runner::to_string(opt.method)) + " (" + backend_name + ")";
  ojson metrics;
  std::string table;
  if (diagnose) {
    auto scorer = config::make_scorer(scorer_spec);
    m.inputs["scorer"] = scorer_spec.type == "http" ? scorer_spec.url : "lexical";
    const auto r = runner::evaluate_diagnosis(data, *backend, *scorer, opt);
    metrics = runner::to_json(r);
    table = format_table(r.card, row);
    m.counters = {{"attempted", r.attempted}, {"scored", r.scored},   {"skipped", r.skipped},
                  {"errored", r.errored},     {"degraded", r.degraded}, {"scorer_errors", r.scorer_errors},
                  {"backend_calls", r.calls}};
  } else {
    const auto r = runner::evaluate_detection(data, *backend, opt);
    metrics = runner::to_json(r);
    table = format_table(r.metrics, row);
    m.counters = {{"attempted", r.attempted}, {"scored", r.scored},         {"skipped", r.skipped},
                  {"errored", r.errored},     {"no_verdict", r.no_verdict}, {"backend_calls", r.calls}};
  }
  metrics["method"] = std::string(runner::to_string(opt.method));
  metrics["backend"] = backend_name;
  io::write_file_atomic(out, io::dump_ordered(metrics, 2) + "\n");
  m.outputs["metrics"] = out.string();
  m.outputs["run_log"] = opt.run_log->string();
  m.write(with_suffix(out, ".manifest.json"));
  std::cout << table;
  return 0;
}

// ---------------------------------------------------------------------------

// A stdin line may be {"completion": ...}, a JSON string, or raw text.
std::string completion_of(const std::string& line) {
  try {
    const auto j = json::parse(line);
    if (j.is_string()) return j.get<std::string>();
    if (j.is_object())
      if (auto c = j.find("completion"); c != j.end() && c->is_string()) return c->get<std::string>();
  } catch (const json::exception&) {
  }
  return line;
}

int run_reward(const Common& common, const std::string& gt_file) {
  const auto cfg = load(common);
  std::string bytes;
  try {
    bytes = io::read_file(gt_file);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  // A bad ground-truth line stays in place so stdin lines keep their pairing.
  std::vector<std::optional<GroundTruth>> gts;
  std::vector<std::string> gt_errors;
  io::for_each_line(bytes, [&](std::size_t line_no, std::string_view line) {
    try {
      const auto j = json::parse(line);
      const auto g = j.is_object() ? j.find("ground_truth") : j.end();
      gts.push_back(ground_truth_from_json(g != j.end() ? *g : j));
      gt_errors.emplace_back();
    } catch (const std::exception& e) {
      gts.push_back(std::nullopt);
      gt_errors.push_back("ground truth line " + std::to_string(line_no) + ": " + e.what());
    }
  });

  std::size_t n = 0;
  for (std::string line; std::getline(std::cin, line); ++n) {
    ojson out;
    if (n >= gts.size()) {
      out["line"] = n + 1;
      out["error"] = "no ground truth for this line";
    } else if (!gts[n]) {
      out["line"] = n + 1;
      out["error"] = gt_errors[n];
    } else {
      out = to_json(compute_reward(completion_of(line), *gts[n], cfg.reward));
    }
    std::cout << io::dump_ordered(out) << '\n';
  }
  std::cout.flush();
  if (n != gts.size()) {
    spdlog::error("{} completion line(s) for {} ground-truth line(s)", n, gts.size());
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  Common common;
  std::string host;
  int port = 0;
  CLI::Option* port_opt = nullptr;
};

int run_serve(const ServeArgs& a) {
  auto cfg = load(a.common);
  auto sc = cfg.serve;
  sc.apply_env();
  if (!a.host.empty()) sc.host = a.host;
  if (a.port_opt->count()) sc.port = a.port;
  sc.validate();

  // Block the signals before any thread starts so only sigwait sees them.
  sigset_t sigs;
  sigemptyset(&sigs);
  sigaddset(&sigs, SIGINT);
  sigaddset(&sigs, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &sigs, nullptr);

  service::RewardServer server(sc);
  if (!server.bind()) {
    spdlog::error("cannot bind {}:{}", sc.host, sc.port);
    return 1;
  }
  spdlog::info("listening on {}:{} (config {})", sc.host, server.port(), sc.fingerprint());
  std::thread t([&] { server.listen(); });
  int sig = 0;
  sigwait(&sigs, &sig);
  spdlog::info("signal {} received, draining", sig);
  server.stop();
  t.join();
  spdlog::info("stopped");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = std::make_shared<spdlog::logger>("halludiag", std::make_shared<spdlog::sinks::stderr_sink_mt>());
  spdlog::set_default_logger(logger);

  CLI::App app{"Hallucination diagnosis toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  auto add_common = [](CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON config file");
    c.seed_opt = sub->add_option("--seed", c.seed, "run seed; fixes every mock backend output");
  };

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "build a diagnosis dataset from a text corpus");
  add_common(g, gen.common);
  g->add_option("--corpus", gen.corpus, "plain text (blank-line separated) or JSONL corpus");
  g->add_option("--out", gen.out, "dataset JSONL");
  g->add_option("--checkpoint-dir", gen.checkpoint_dir, "resume directory");
  g->add_option("--manifest", gen.manifest, "run manifest (default <out>.manifest.json)");
  gen.workers_opt = g->add_option("--workers", gen.workers, "parallel samples");
  gen.max_samples_opt = g->add_option("--max-samples", gen.max_samples, "cap on seed samples (0 = all)");

  std::string validate_data;
  auto* v = app.add_subcommand("validate", "check a generated dataset against the record schema");
  v->add_option("--data", validate_data, "dataset JSONL")->required();

  EvalArgs det, dia;
  auto add_eval = [&](CLI::App* sub, EvalArgs& e) {
    add_common(sub, e.common);
    sub->add_option("--data", e.data, "benchmark JSONL")->required();
    sub->add_option("--out", e.out, "metrics JSON")->required();
    sub->add_option("--method", e.method, "single or pipeline");
    sub->add_option("--backend", e.backend, "backend name from the config");
    e.concurrency_opt = sub->add_option("--concurrency", e.concurrency, "items in flight");
    sub->add_option("--run-log", e.run_log, "per-item JSONL log (default <out>.runlog.jsonl)");
    sub->add_option("--prompts", e.prompts, "prompt directory overriding the built-in prompts");
  };
  auto* ed = app.add_subcommand("eval-detect", "binary detection metrics over a benchmark");
  add_eval(ed, det);
  auto* eg = app.add_subcommand("eval-diagnose", "Det-Acc, HR, SV and Mit over an annotated benchmark");
  add_eval(eg, dia);
  eg->add_option("--scorer", dia.scorer, "\"lexical\" or the URL of a consistency scorer");

  Common rew;
  std::string gt_file;
  auto* r = app.add_subcommand("reward", "score stdin completions against a ground-truth JSONL");
  add_common(r, rew);
  r->add_option("--gt-file", gt_file, "one ground truth per line, aligned with stdin")->required();

  ServeArgs srv;
  auto* s = app.add_subcommand("serve", "run the reward HTTP service until SIGINT/SIGTERM");
  add_common(s, srv.common);
  s->add_option("--host", srv.host, "bind address");
  srv.port_opt = s->add_option("--port", srv.port, "bind port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*g) return run_generate(gen);
    if (*v) return run_validate(validate_data);
    if (*ed) return run_eval(det, false);
    if (*eg) return run_eval(dia, true);
    if (*r) return run_reward(rew, gt_file);
    if (*s) return run_serve(srv);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const DataError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 2;
}
