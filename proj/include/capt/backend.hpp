#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capt/errors.hpp"
#include "capt/tokenizer.hpp"

namespace capt {

// Shared text context x_{1:t}. Every backend tokenizes it on its own; the
// prompt is kept apart from the generated continuation so that per-backend
// templates can wrap the prompt only.
struct Context {
  std::string prompt;
  std::string generated;

  std::string text() const { return prompt + generated; }
  bool empty() const { return prompt.empty() && generated.empty(); }
};

struct PromptTemplate {
  std::string prefix;
  std::string suffix;

  std::string render(const Context& ctx) const { return prefix + ctx.prompt + suffix + ctx.generated; }
};

struct TokenLogprob {
  TokenId token;
  double logprob = 0.0;

  friend bool operator==(const TokenLogprob&, const TokenLogprob&) = default;
};

// Highest logprob first; equal logprobs ordered by ascending token id.
inline bool ranks_before(const TokenLogprob& a, const TokenLogprob& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return a.token < b.token;
}

struct NextTokenDistribution {
  std::vector<TokenLogprob> entries;  // sorted with ranks_before, no duplicate ids
  bool complete = false;

  std::optional<double> logprob_of(TokenId id) const {
    for (const auto& e : entries) {
      if (e.token == id) return e.logprob;
    }
    return std::nullopt;
  }

  // Index-by-id view; ids without an entry get -inf.
  std::vector<double> dense(std::size_t vocab_size) const {
    std::vector<double> out(vocab_size, -std::numeric_limits<double>::infinity());
    for (const auto& e : entries) out.at(static_cast<std::size_t>(e.token.value)) = e.logprob;
    return out;
  }
};

// Builds a distribution from per-id logprobs. With `top_k` the result holds
// the min(top_k, size) best entries and is marked incomplete.
inline NextTokenDistribution distribution_from_dense(std::span<const double> logprobs,
                                                     std::optional<std::size_t> top_k) {
  NextTokenDistribution d;
  d.entries.reserve(logprobs.size());
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    d.entries.push_back({TokenId{static_cast<std::int32_t>(i)}, logprobs[i]});
  }
  if (top_k) {
    const std::size_t k = std::min(*top_k, d.entries.size());
    std::partial_sort(d.entries.begin(), d.entries.begin() + static_cast<std::ptrdiff_t>(k),
                      d.entries.end(), ranks_before);
    d.entries.resize(k);
    d.complete = false;
  } else {
    std::sort(d.entries.begin(), d.entries.end(), ranks_before);
    d.complete = true;
  }
  return d;
}

enum class BackendKind { toy, remote };

inline const char* to_string(BackendKind k) { return k == BackendKind::toy ? "toy" : "remote"; }

// A model that reports next-token log-probabilities over its own vocabulary.
// Implementations must be safe for concurrent queries.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual const std::string& id() const = 0;
  virtual const TokenizerPtr& tokenizer() const = 0;
  virtual BackendKind kind() const = 0;

  virtual NextTokenDistribution next_logprobs(const Context& ctx,
                                              std::optional<std::size_t> top_k) const = 0;

  virtual std::map<TokenId, double> score_tokens(const Context& ctx,
                                                 std::span<const TokenId> tokens) const = 0;

  // Whether score_tokens works for arbitrary ids. Remotes that can only
  // report their own top-k cannot serve as the contrastive pair.
  virtual bool supports_token_scoring() const { return true; }

 protected:
  static void check_query(const Context& ctx, std::optional<std::size_t> top_k) {
    if (ctx.empty()) throw InvalidArgument("context must not be empty");
    if (top_k && *top_k == 0) throw InvalidArgument("top_k must be at least 1");
  }
};

using BackendPtr = std::shared_ptr<const Backend>;

}  // namespace capt
