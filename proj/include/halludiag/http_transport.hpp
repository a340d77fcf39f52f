// SPDX-License-Identifier: Apache-2.0
//
// cpp-httplib implementation of HttpTransport, and an HTTP adapter for an
// external consistency-model scorer.
#pragma once

#include <chrono>
#include <memory>
#include <string>

#include <httplib.h>

#include "halludiag/llm.hpp"
#include "halludiag/metrics.hpp"

namespace halludiag::llm {

struct ParsedUrl {
  std::string origin;  ///< scheme://host[:port]
  std::string prefix;  ///< path prefix without trailing slash
};

inline ParsedUrl parse_base_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("base_url must include a scheme: " + url);
  const auto scheme = detail::ascii_lower(url.substr(0, scheme_end));
  if (scheme != "http" && scheme != "https") throw ConfigError("base_url scheme must be http or https: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl p;
  p.origin = url.substr(0, path_start);
  if (path_start != std::string::npos) p.prefix = url.substr(path_start);
  while (!p.prefix.empty() && p.prefix.back() == '/') p.prefix.pop_back();
  if (p.origin.size() <= scheme_end + 3) throw ConfigError("base_url has no host: " + url);
  return p;
}

/// One client per request, so concurrent callers never share a connection.
class HttplibTransport final : public HttpTransport {
 public:
  explicit HttplibTransport(const std::string& base_url) : url_(parse_base_url(base_url)) {}

  HttpResponse post(const std::string& path, const std::string& body, const HttpHeaders& headers,
                    std::chrono::milliseconds timeout) override {
    httplib::Client cli(url_.origin);
    cli.set_tcp_nodelay(true);
    const auto secs = timeout.count() / 1000;
    const auto usecs = (timeout.count() % 1000) * 1000;
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers h;
    std::string content_type = "application/json";
    for (const auto& [k, v] : headers) {
      if (detail::ascii_lower(k) == "content-type")
        content_type = v;
      else
        h.emplace(k, v);
    }
    auto res = cli.Post(url_.prefix + path, h, body, content_type);
    HttpResponse out;
    if (!res) {
      out.error = httplib::to_string(res.error());
      return out;
    }
    out.status = res->status;
    out.body = res->body;
    return out;
  }

 private:
  ParsedUrl url_;
};

}  // namespace halludiag::llm

namespace halludiag {

/// Calls an external consistency model: POST {base}/v1/score with
/// {"context", "claim"}, expecting {"score": number in [0,1]}.
class HttpConsistencyScorer final : public ConsistencyScorer {
 public:
  HttpConsistencyScorer(std::shared_ptr<llm::HttpTransport> transport, double timeout_s = 30.0, int retries = 2)
      : transport_(std::move(transport)), timeout_s_(timeout_s), retries_(retries) {}

  double score(std::string_view context, std::string_view claim) override {
    const nlohmann::json body = {{"context", std::string(context)}, {"claim", std::string(claim)}};
    const auto timeout = std::chrono::milliseconds(static_cast<long long>(timeout_s_ * 1000));
    std::string last;
    for (int attempt = 0; attempt <= retries_; ++attempt) {
      const auto res = transport_->post("/v1/score", io::dump(body), {{"Content-Type", "application/json"}}, timeout);
      if (res.status == 200) {
        try {
          const double s = nlohmann::json::parse(res.body).at("score").get<double>();
          if (!(s >= 0.0 && s <= 1.0)) throw ScorerError("", "scorer returned out-of-range score");
          return s;
        } catch (const nlohmann::json::exception& e) {
          throw ScorerError("", std::string("bad scorer payload: ") + e.what());
        }
      }
      last = res.status ? "HTTP " + std::to_string(res.status) : res.error;
      if (res.status != 0 && res.status < 500 && res.status != 429) break;
    }
    throw ScorerError("", "consistency scorer unavailable: " + last);
  }

  std::string name() const override { return "http"; }

 private:
  std::shared_ptr<llm::HttpTransport> transport_;
  double timeout_s_;
  int retries_;
};

}  // namespace halludiag
