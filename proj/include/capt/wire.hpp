#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capt/backend.hpp"
#include "capt/errors.hpp"
#include "capt/tokenizer.hpp"

// JSON bodies of the logprob wire protocol.
//
//   POST /v1/next_logprobs  {"context": str, "top_k": int|null}
//        -> {"entries": [{"token_id": int, "text": str, "logprob": float}], "complete": bool}
//   POST /v1/score_tokens   {"context": str, "token_ids": [int]} -> {"entries": [...]}
//   GET  /v1/tokenizer      -> {"vocab_size": int, "vocab": [str]|null, "name": str,
//                               "eos_token_id": int|null}
//
// Errors: 400 malformed request, 422 invalid token, 413 context too long,
// 503 unavailable. "eos_token_id" is an optional extension; clients must
// accept its absence.
namespace capt::wire {

inline nlohmann::json entry_json(const Tokenizer& tok, TokenId id, double logprob) {
  return {{"token_id", id.value}, {"text", tok.display_text(id)}, {"logprob", logprob}};
}

inline nlohmann::json distribution_json(const Tokenizer& tok, const NextTokenDistribution& d) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : d.entries) entries.push_back(entry_json(tok, e.token, e.logprob));
  return {{"entries", entries}, {"complete", d.complete}};
}

inline nlohmann::json scores_json(const Tokenizer& tok, const std::vector<TokenId>& order,
                                  const std::map<TokenId, double>& scores) {
  nlohmann::json entries = nlohmann::json::array();
  for (TokenId id : order) entries.push_back(entry_json(tok, id, scores.at(id)));
  return {{"entries", entries}};
}

inline nlohmann::json tokenizer_json(const Tokenizer& tok) {
  nlohmann::json vocab = nlohmann::json::array();
  for (std::size_t i = 0; i < tok.vocab_size(); ++i) vocab.push_back(tok.display_text(TokenId{static_cast<std::int32_t>(i)}));
  return {{"vocab_size", tok.vocab_size()},
          {"vocab", vocab},
          {"name", tok.name()},
          {"eos_token_id", tok.eos() ? nlohmann::json(tok.eos()->value) : nlohmann::json(nullptr)}};
}

inline std::vector<TokenLogprob> parse_entries(const nlohmann::json& body, std::size_t vocab_size) {
  std::vector<TokenLogprob> out;
  for (const auto& e : body.at("entries")) {
    const TokenId id{e.at("token_id").get<std::int32_t>()};
    if (id.value < 0 || static_cast<std::size_t>(id.value) >= vocab_size) {
      throw InvalidToken("server returned out-of-range token id " + std::to_string(id.value));
    }
    out.push_back({id, e.at("logprob").get<double>()});
  }
  return out;
}

}  // namespace capt::wire
