// SPDX-License-Identifier: Apache-2.0
//
// HTTP reward endpoint for RL trainers: POST /v1/reward, POST /v1/reward/batch,
// GET /healthz. Request handling is a pure function of (body, config); the
// server is a thin httplib shell around it.
#pragma once

#include <chrono>
#include <cstdlib>
#include <string>

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "halludiag/io.hpp"
#include "halludiag/reward.hpp"
#include "halludiag/types.hpp"

namespace halludiag::service {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;                         ///< 0 picks a free port
  std::size_t max_body_bytes = 8u << 20;   ///< larger bodies get 413
  std::size_t batch_max = 512;
  int threads = 8;
  RewardConfig reward;

  void validate() const {
    if (port < 0 || port > 65535) throw ConfigError("serve.port: out of range");
    if (max_body_bytes == 0) throw ConfigError("serve.max_body_bytes: must be positive");
    if (batch_max == 0) throw ConfigError("serve.batch_max: must be positive");
    if (threads < 1) throw ConfigError("serve.threads: must be at least 1");
    reward.weights.validate();
  }

  /// Parses the `serve` config section; `reward` is the shared reward section.
  static ServiceConfig from_json(const json& j, const RewardConfig& reward = {}) {
    ServiceConfig c;
    c.reward = reward;
    if (j.is_null()) return c;
    if (!j.is_object()) throw ConfigError("serve: expected an object");
    try {
      if (j.contains("host")) c.host = j.at("host").get<std::string>();
      if (j.contains("port")) c.port = j.at("port").get<int>();
      if (j.contains("max_body_bytes")) c.max_body_bytes = j.at("max_body_bytes").get<std::size_t>();
      if (j.contains("batch_max")) c.batch_max = j.at("batch_max").get<std::size_t>();
      if (j.contains("threads")) c.threads = j.at("threads").get<int>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("serve: ") + e.what());
    }
    c.validate();
    return c;
  }

  /// HALLUDIAG_SERVE_{HOST,PORT,MAX_BODY_BYTES,BATCH_MAX} override the file.
  void apply_env() {
    auto num = [](const char* name, auto& dst) {
      if (const char* v = std::getenv(name); v && *v) {
        char* end = nullptr;
        const auto x = std::strtoll(v, &end, 10);
        if (*end != '\0' || x < 0) throw ConfigError(std::string(name) + ": expected a non-negative integer");
        dst = static_cast<std::remove_reference_t<decltype(dst)>>(x);
      }
    };
    if (const char* h = std::getenv("HALLUDIAG_SERVE_HOST"); h && *h) host = h;
    num("HALLUDIAG_SERVE_PORT", port);
    num("HALLUDIAG_SERVE_MAX_BODY_BYTES", max_body_bytes);
    num("HALLUDIAG_SERVE_BATCH_MAX", batch_max);
    validate();
  }

  /// Hash of everything that can change a response.
  std::string fingerprint() const {
    ojson j;
    j["reward"] = halludiag::to_json(reward);
    j["batch_max"] = batch_max;
    j["max_body_bytes"] = max_body_bytes;
    return io::hex64(io::fnv1a64(io::dump_ordered(j)));
  }
};

struct Reply {
  int status = 200;
  std::string body;
};

/// Field-path error for request validation.
class RequestError : public DataError {
 public:
  RequestError(const std::string& field, const std::string& what) : DataError(field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct RewardRequest {
  std::string completion;
  GroundTruth ground_truth;
  RewardConfig config;
};

/// Ground truth may be nested under `ground_truth` or given inline.
inline RewardRequest parse_request(const json& j, const RewardConfig& base, const std::string& where = "") {
  auto path = [&](const std::string& f) { return where.empty() ? f : where + "." + f; };
  if (!j.is_object()) throw RequestError(where.empty() ? "body" : where, "expected an object");
  RewardRequest r;
  auto c = j.find("completion");
  if (c == j.end()) throw RequestError(path("completion"), "missing");
  if (!c->is_string()) throw RequestError(path("completion"), "expected a string");
  r.completion = c->get<std::string>();
  try {
    if (auto g = j.find("ground_truth"); g != j.end())
      r.ground_truth = ground_truth_from_json(*g, path("ground_truth"));
    else
      r.ground_truth = ground_truth_from_json(j, where);
  } catch (const DataError& e) {
    std::string msg = e.what();
    throw RequestError(msg.substr(0, msg.find(':')), msg.substr(msg.find(':') + 2));
  }
  r.config = base;
  if (auto w = j.find("weights"); w != j.end() && !w->is_null()) {
    if (!w->is_object()) throw RequestError(path("weights"), "expected an object");
    for (const auto& [k, v] : w->items()) {
      if (k != "w_struct" && k != "w_acc" && k != "w_loc") throw RequestError(path("weights." + k), "unknown weight");
      if (!v.is_number()) throw RequestError(path("weights." + k), "expected a number");
    }
    try {
      r.config = reward_config_from_json(*w, base);
    } catch (const ConfigError& e) {
      throw RequestError(path("weights"), e.what());
    }
  }
  return r;
}

inline ojson reward_response(const RewardRequest& r, const ServiceConfig& cfg) {
  ojson j = halludiag::to_json(compute_reward(r.completion, r.ground_truth, r.config));
  j["version"] = std::string(kVersion);
  j["config_fingerprint"] = cfg.fingerprint();
  return j;
}

inline std::string error_body(const std::string& message, const std::string& field = "") {
  ojson j;
  j["error"] = message;
  if (!field.empty()) j["field"] = field;
  return io::dump_ordered(j);
}

inline Reply handle_reward(std::string_view body, const ServiceConfig& cfg) {
  if (body.size() > cfg.max_body_bytes) return {413, error_body("request body exceeds " + std::to_string(cfg.max_body_bytes) + " bytes")};
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    return {400, error_body(std::string("invalid JSON: ") + e.what(), "body")};
  }
  try {
    return {200, io::dump_ordered(reward_response(parse_request(j, cfg.reward), cfg))};
  } catch (const RequestError& e) {
    return {400, error_body(e.what(), e.field())};
  }
}

/// Accepts a bare array or {"items": [...]}. Item errors are reported inline.
inline Reply handle_batch(std::string_view body, const ServiceConfig& cfg) {
  if (body.size() > cfg.max_body_bytes) return {413, error_body("request body exceeds " + std::to_string(cfg.max_body_bytes) + " bytes")};
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    return {400, error_body(std::string("invalid JSON: ") + e.what(), "body")};
  }
  const json* items = &j;
  if (j.is_object()) {
    auto it = j.find("items");
    if (it == j.end()) return {400, error_body("items: missing", "items")};
    items = &*it;
  }
  if (!items->is_array()) return {400, error_body("items: expected an array", "items")};
  if (items->empty() || items->size() > cfg.batch_max)
    return {400, error_body("items: batch size must be between 1 and " + std::to_string(cfg.batch_max), "items")};
  ojson out = ojson::array();
  for (std::size_t i = 0; i < items->size(); ++i) {
    const auto where = "items[" + std::to_string(i) + "]";
    try {
      out.push_back(reward_response(parse_request((*items)[i], cfg.reward, where), cfg));
    } catch (const RequestError& e) {
      ojson err;
      err["index"] = i;
      err["error"] = e.what();
      err["field"] = e.field();
      out.push_back(std::move(err));
    }
  }
  return {200, io::dump_ordered(out)};
}

inline Reply handle_health(const ServiceConfig& cfg) {
  ojson j;
  j["status"] = "ok";
  j["version"] = std::string(kVersion);
  j["config_fingerprint"] = cfg.fingerprint();
  return {200, io::dump_ordered(j)};
}

class RewardServer {
 public:
  explicit RewardServer(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto threads = static_cast<std::size_t>(cfg_.threads);
    svr_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    svr_.set_payload_max_length(cfg_.max_body_bytes);
    svr_.set_tcp_nodelay(true);
    // SO_REUSEADDR only: the default SO_REUSEPORT would let a second server
    // share a busy port instead of failing.
    svr_.set_socket_options([](socket_t sock) {
      int yes = 1;
      ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    auto send = [](httplib::Response& res, const Reply& r) {
      res.status = r.status;
      res.set_content(r.body, "application/json");
    };
    svr_.Post("/v1/reward", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, handle_reward(req.body, cfg_));
    });
    svr_.Post("/v1/reward/batch", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, handle_batch(req.body, cfg_));
    });
    svr_.Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) { send(res, handle_health(cfg_)); });
    svr_.set_pre_routing_handler([](const httplib::Request&, httplib::Response&) {
      started() = std::chrono::steady_clock::now();
      return httplib::Server::HandlerResponse::Unhandled;
    });
    svr_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty())
        res.set_content(error_body(res.status == 413 ? "request body too large" : httplib::status_message(res.status)),
                        "application/json");
    });
    svr_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      spdlog::error("request failed: {}", what);
      res.status = 500;
      res.set_content(error_body("internal error"), "application/json");
    });
    // One line per request; bodies are never logged.
    svr_.set_logger([](const httplib::Request& req, const httplib::Response& res) {
      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started()).count();
      spdlog::info("{} {} {} {}B {:.2f}ms", req.method, req.path, res.status, req.body.size(), ms);
    });
  }

  /// Binds the listening socket; false when the address is unavailable.
  bool bind() {
    if (cfg_.port == 0) {
      port_ = svr_.bind_to_any_port(cfg_.host);
      return port_ > 0;
    }
    if (!svr_.bind_to_port(cfg_.host, cfg_.port)) return false;
    port_ = cfg_.port;
    return true;
  }

  /// Serves until stop(); in-flight requests finish before it returns.
  bool listen() { return svr_.listen_after_bind(); }
  void stop() { svr_.stop(); }
  void wait_until_ready() const { svr_.wait_until_ready(); }
  int port() const { return port_; }
  const ServiceConfig& config() const { return cfg_; }

 private:
  static std::chrono::steady_clock::time_point& started() {
    thread_local std::chrono::steady_clock::time_point t;
    return t;
  }

  ServiceConfig cfg_;
  httplib::Server svr_;
  int port_ = 0;
};

}  // namespace halludiag::service
