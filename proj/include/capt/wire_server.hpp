#pragma once

#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "capt/backend.hpp"
#include "capt/errors.hpp"
#include "capt/wire.hpp"

namespace capt {

// Hosts any Backend behind the logprob wire protocol. Incoming context
// strings are treated as fully rendered prompts.
class WireServer {
 public:
  explicit WireServer(BackendPtr backend) : backend_(std::move(backend)) { install(); }

  WireServer(const WireServer&) = delete;
  WireServer& operator=(const WireServer&) = delete;

  ~WireServer() { stop(); }

  // Binds and serves on a background thread. Port 0 picks a free port; the
  // bound port is returned.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  // Blocking variant for the CLI.
  void serve(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  static void reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), "application/json");
  }

  template <class F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      reply(res, 200, f());
    } catch (const InvalidToken& e) {
      reply(res, 422, {{"error", e.what()}});
    } catch (const ContextTooLong& e) {
      reply(res, 413, {{"error", e.what()}});
    } catch (const BackendUnavailable& e) {
      res.set_header("Retry-After", std::to_string((e.retry_after_ms() + 999) / 1000));
      reply(res, 503, {{"error", e.what()}});
    } catch (const InvalidArgument& e) {
      reply(res, 400, {{"error", e.what()}});
    } catch (const nlohmann::json::exception& e) {
      reply(res, 400, {{"error", e.what()}});
    } catch (const std::exception& e) {
      reply(res, 500, {{"error", e.what()}});
    }
  }

  void install() {
    server_.Post("/v1/next_logprobs", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        std::optional<std::size_t> top_k;
        if (body.contains("top_k") && !body["top_k"].is_null()) {
          const auto k = body["top_k"].get<std::int64_t>();
          if (k < 1) throw InvalidArgument("top_k must be >= 1");
          top_k = static_cast<std::size_t>(k);
        }
        const Context ctx{body.at("context").get<std::string>(), {}};
        return wire::distribution_json(*backend_->tokenizer(), backend_->next_logprobs(ctx, top_k));
      });
    });
    server_.Post("/v1/score_tokens", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = nlohmann::json::parse(req.body);
        std::vector<TokenId> ids;
        for (const auto& v : body.at("token_ids")) ids.push_back(TokenId{v.get<std::int32_t>()});
        const Context ctx{body.at("context").get<std::string>(), {}};
        const auto scores = backend_->score_tokens(ctx, ids);
        return wire::scores_json(*backend_->tokenizer(), ids, scores);
      });
    });
    server_.Get("/v1/tokenizer", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { return wire::tokenizer_json(*backend_->tokenizer()); });
    });
  }

  BackendPtr backend_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace capt
