#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "capt/backend.hpp"
#include "capt/errors.hpp"
#include "capt/text.hpp"
#include "capt/tokenizer.hpp"
#include "capt/wire.hpp"

namespace capt {

struct RemoteOptions {
  std::string url;  // scheme://host:port
  PromptTemplate prompt;
  int timeout_ms = 30000;
  int retries = 2;
};

// Client side of the logprob wire protocol. The remote must list its
// vocabulary; encoding is greedy longest match over that listing, which is
// exact for the toy server and an approximation for real tokenizers.
class RemoteBackend final : public Backend {
 public:
  static std::shared_ptr<RemoteBackend> connect(std::string id, RemoteOptions opts) {
    if (opts.timeout_ms <= 0) throw ConfigError("timeout_ms must be positive");
    if (opts.retries < 0) throw ConfigError("retries must be >= 0");
    auto b = std::shared_ptr<RemoteBackend>(new RemoteBackend(std::move(id), std::move(opts)));
    b->handshake();
    return b;
  }

  const std::string& id() const override { return id_; }
  const TokenizerPtr& tokenizer() const override { return tokenizer_; }
  BackendKind kind() const override { return BackendKind::remote; }
  bool supports_token_scoring() const override { return scoring_; }
  const RemoteOptions& options() const { return opts_; }

  NextTokenDistribution next_logprobs(const Context& ctx, std::optional<std::size_t> top_k) const override {
    check_query(ctx, top_k);
    nlohmann::json req{{"context", wire_context(ctx)},
                       {"top_k", top_k ? nlohmann::json(*top_k) : nlohmann::json(nullptr)}};
    const auto body = call("POST", "/v1/next_logprobs", req.dump());
    NextTokenDistribution d;
    d.entries = wire::parse_entries(body, tokenizer_->vocab_size());
    d.complete = body.value("complete", !top_k.has_value());
    std::sort(d.entries.begin(), d.entries.end(), ranks_before);
    std::set<TokenId> seen;
    for (const auto& e : d.entries) {
      if (!seen.insert(e.token).second) throw Error("remote '" + id_ + "' returned a duplicate token id");
    }
    if (top_k && d.entries.size() > *top_k) {
      d.entries.resize(*top_k);
      d.complete = false;
    }
    return d;
  }

  std::map<TokenId, double> score_tokens(const Context& ctx, std::span<const TokenId> tokens) const override {
    if (tokens.empty()) return {};
    if (!scoring_) throw ConfigError("remote '" + id_ + "' does not support token scoring");
    check_query(ctx, std::nullopt);
    nlohmann::json ids = nlohmann::json::array();
    for (TokenId t : tokens) {
      tokenizer_->check(t);
      ids.push_back(t.value);
    }
    const auto body = call("POST", "/v1/score_tokens", nlohmann::json{{"context", wire_context(ctx)}, {"token_ids", ids}}.dump());
    std::map<TokenId, double> out;
    for (const auto& e : wire::parse_entries(body, tokenizer_->vocab_size())) out[e.token] = e.logprob;
    for (TokenId t : tokens) {
      if (!out.count(t)) throw Error("remote '" + id_ + "' did not score token " + std::to_string(t.value));
    }
    return out;
  }

 private:
  RemoteBackend(std::string id, RemoteOptions opts) : id_(std::move(id)), opts_(std::move(opts)) {}

  void handshake() {
    const auto info = call("GET", "/v1/tokenizer", {});
    if (!info.contains("vocab") || info["vocab"].is_null()) {
      throw ConfigError("remote '" + id_ + "' does not list its vocabulary");
    }
    auto vocab = info["vocab"].get<std::vector<std::string>>();
    if (info.contains("vocab_size") && info["vocab_size"].get<std::size_t>() != vocab.size()) {
      throw ConfigError("remote '" + id_ + "' reports vocab_size inconsistent with its listing");
    }
    std::optional<std::int32_t> eos;
    if (info.contains("eos_token_id") && !info["eos_token_id"].is_null()) eos = info["eos_token_id"].get<std::int32_t>();
    tokenizer_ = GreedyTokenizer::from_listing(info.value("name", id_), std::move(vocab), eos);

    // An empty request tells us whether the endpoint exists at all.
    try {
      call("POST", "/v1/score_tokens", R"({"context":" ","token_ids":[]})");
      scoring_ = true;
    } catch (const NotFound&) {
      scoring_ = false;
    }
  }

  // JSON strings carry text, so contexts ending inside a split byte
  // sequence cannot be sent.
  std::string wire_context(const Context& ctx) const {
    std::string rendered = opts_.prompt.render(ctx);
    if (!text::valid_utf8(rendered)) {
      throw InvalidArgument("remote '" + id_ + "': context is not valid UTF-8 and cannot be sent over the wire");
    }
    return rendered;
  }

  struct NotFound : Error {
    using Error::Error;
  };

  nlohmann::json call(const std::string& method, const std::string& path, const std::string& payload) const {
    std::int64_t backoff_ms = 100;
    std::string last_error;
    std::int64_t retry_hint = 0;
    for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(std::min<std::int64_t>(std::max(backoff_ms, retry_hint), 5000)));
        backoff_ms *= 2;
      }
      httplib::Client cli(opts_.url);
      const auto timeout = std::chrono::milliseconds(opts_.timeout_ms);
      cli.set_connection_timeout(timeout);
      cli.set_read_timeout(timeout);
      cli.set_write_timeout(timeout);
      auto res = method == "GET" ? cli.Get(path) : cli.Post(path, payload, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        retry_hint = 0;
        continue;
      }
      const std::string detail = error_detail(res->body);
      switch (res->status) {
        case 200:
          try {
            return nlohmann::json::parse(res->body);
          } catch (const nlohmann::json::exception& e) {
            throw Error("remote '" + id_ + "' sent malformed JSON: " + e.what());
          }
        case 422:
          throw InvalidToken("remote '" + id_ + "': " + detail);
        case 413:
          throw ContextTooLong("remote '" + id_ + "': " + detail);
        case 404:
        case 405:
          throw NotFound("remote '" + id_ + "' has no " + path);
        case 400:
          throw InvalidArgument("remote '" + id_ + "' rejected the request: " + detail);
        case 503:
          last_error = "503 " + detail;
          retry_hint = res->has_header("Retry-After") ? 1000 * std::stoll(res->get_header_value("Retry-After")) : 0;
          continue;
        default:
          last_error = "HTTP " + std::to_string(res->status) + " " + detail;
          retry_hint = 0;
          continue;
      }
    }
    throw BackendUnavailable("remote '" + id_ + "' at " + opts_.url + " unavailable: " + last_error,
                             std::max<std::int64_t>(retry_hint, backoff_ms));
  }

  static std::string error_detail(const std::string& body) {
    try {
      const auto j = nlohmann::json::parse(body);
      if (j.is_object() && j.contains("error")) return j["error"].get<std::string>();
    } catch (const std::exception&) {
    }
    return body;
  }

  std::string id_;
  RemoteOptions opts_;
  TokenizerPtr tokenizer_;
  bool scoring_ = false;
};

}  // namespace capt
