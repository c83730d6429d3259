#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "capt/backend.hpp"
#include "capt/ensemble.hpp"
#include "capt/tokenizer.hpp"
#include "capt/toy_model.hpp"

namespace fixtures {

inline std::string config_path(const std::string& rel) { return std::string(CAPT_CONFIG_DIR) + "/" + rel; }

inline capt::TokenizerPtr tokenizer(std::vector<std::string> vocab, bool byte_fallback = false,
                                    const std::string& name = "toy") {
  nlohmann::json j{{"vocab", vocab}, {"byte_fallback", byte_fallback}, {"name", name}};
  return capt::GreedyTokenizer::from_json(j);
}

// 64 pieces with unique texts: 26 letters, 26 " "-prefixed letters, and 12
// common pairs. Every string over a-z and spaces is encodable.
inline capt::TokenizerPtr shared64() {
  std::vector<std::string> v;
  for (char c = 'a'; c <= 'z'; ++c) v.emplace_back(1, c);
  for (char c = 'a'; c <= 'z'; ++c) v.push_back(std::string(" ") + c);
  for (const char* p : {"th", "he", "in", "er", "an", "re", "on", "at", "en", "nd", "ti", " "}) v.push_back(p);
  return tokenizer(v, false, "shared64");
}

// A differently segmented vocabulary over the same alphabet.
inline capt::TokenizerPtr other_vocab() {
  std::vector<std::string> v;
  for (char c = 'a'; c <= 'z'; ++c) v.emplace_back(1, c);
  for (const char* p : {" ", "the", "ing", "ion", "ent", "he", "and", " t", " a", "ou", "is"}) v.push_back(p);
  return tokenizer(v, false, "other");
}

inline std::shared_ptr<capt::ToyBackend> bigram(const capt::TokenizerPtr& tok, std::uint64_t seed,
                                                const std::string& id, double smoothing = 0.1,
                                                std::size_t length = 1500, std::size_t branching = 3) {
  const auto corpus = capt::BigramToy::generate_corpus(tok->vocab_size(), seed, length, branching);
  const auto counts = capt::BigramToy::count_sequences(tok->vocab_size(), {corpus});
  auto model = std::make_shared<capt::BigramToy>(tok, counts, smoothing);
  return std::make_shared<capt::ToyBackend>(id, tok, model);
}

// Random non-empty contexts built from whole tokens of `tok`.
inline std::vector<capt::Context> contexts(const capt::TokenizerPtr& tok, std::size_t n, std::uint64_t seed,
                                           std::size_t max_tokens = 12) {
  std::mt19937_64 rng(seed);
  std::vector<capt::Context> out;
  while (out.size() < n) {
    const std::size_t len = 1 + rng() % max_tokens;
    std::string s;
    for (std::size_t i = 0; i < len; ++i) s += tok->token_text(capt::TokenId{static_cast<std::int32_t>(rng() % tok->vocab_size())});
    if (!s.empty()) out.push_back({s, {}});
  }
  return out;
}

// Greedy argmax of a backend: highest logprob, lowest id on ties, computed
// from the dense distribution.
inline capt::TokenId greedy(const capt::Backend& b, const capt::Context& ctx) {
  const auto d = b.next_logprobs(ctx, std::nullopt).dense(b.tokenizer()->vocab_size());
  std::size_t best = 0;
  for (std::size_t i = 1; i < d.size(); ++i) {
    if (d[i] > d[best]) best = i;
  }
  return capt::TokenId{static_cast<std::int32_t>(best)};
}

// True when `chosen` is among the k best of `lp` restricted to `allowed`
// (ties at the boundary count as inside).
inline bool in_top_k(const std::vector<double>& lp, std::size_t k, capt::TokenId chosen,
                     const capt::TokenMask* allowed = nullptr) {
  const auto ok = [&](std::size_t i) { return !allowed || allowed->contains(capt::TokenId{static_cast<std::int32_t>(i)}); };
  const std::size_t c = static_cast<std::size_t>(chosen.value);
  if (!ok(c)) return false;
  std::size_t strictly_better = 0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (ok(i) && lp[i] > lp[c]) ++strictly_better;
  }
  return strictly_better < k;
}

}  // namespace fixtures
