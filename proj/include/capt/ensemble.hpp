#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "capt/backend.hpp"
#include "capt/constraint.hpp"
#include "capt/errors.hpp"
#include "capt/method.hpp"
#include "capt/tokenizer.hpp"
#include "capt/vocab_map.hpp"

namespace capt {

struct EnsembleConfig {
  Method method = Method::capt;
  std::size_t k = 20;
  double alpha = 1.0;
  std::size_t max_tokens = 256;
  std::vector<std::string> stop_sequences;

  void validate() const {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
    if (!std::isfinite(alpha)) throw ConfigError("alpha must be finite");
    for (const auto& s : stop_sequences) {
      if (s.empty()) throw ConfigError("stop sequences must be non-empty");
    }
  }
};

constexpr ApplyPoint apply_point(const EnsembleConfig& cfg) { return apply_point(cfg.method); }

// One scored candidate. For CAPT:
//   offset = logp_clin - logp_base   (0 when the token has no mapping)
//   total  = logp_new + alpha * offset
struct CandidateScore {
  TokenId token;
  std::string text;
  double logp_new = 0.0;
  std::optional<TokenId> mapped;
  std::optional<double> logp_clin;
  std::optional<double> logp_base;
  double offset = 0.0;
  double total = 0.0;
};

struct StepRecord {
  std::size_t step_index = 0;
  std::vector<CandidateScore> candidates;
  TokenId chosen;
  bool top_choice_changed = false;
  bool constraint_applied = false;

  const CandidateScore& chosen_candidate() const {
    for (const auto& c : candidates) {
      if (c.token == chosen) return c;
    }
    throw InvalidArgument("step record does not contain its chosen token");
  }
};

enum class FinishReason { stop, max_tokens, constraint_complete };

inline const char* to_string(FinishReason r) {
  switch (r) {
    case FinishReason::stop: return "stop";
    case FinishReason::max_tokens: return "max_tokens";
    case FinishReason::constraint_complete: return "constraint_complete";
  }
  return "?";
}

struct GenerationResult {
  Method method = Method::capt;
  std::string text;
  std::vector<StepRecord> steps;
  FinishReason finish_reason = FinishReason::max_tokens;
};

namespace detail {

// Best candidate: highest total, then highest logp_new, then lowest id.
inline bool better_candidate(const CandidateScore& a, const CandidateScore& b) {
  if (a.total != b.total) return a.total > b.total;
  if (a.logp_new != b.logp_new) return a.logp_new > b.logp_new;
  return a.token < b.token;
}

inline std::size_t argmax_total(const std::vector<CandidateScore>& cands) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < cands.size(); ++i) {
    if (better_candidate(cands[i], cands[best])) best = i;
  }
  return best;
}

inline TokenId argmax_logp_new(const std::vector<CandidateScore>& cands) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < cands.size(); ++i) {
    const auto& c = cands[i];
    const auto& b = cands[best];
    if (c.logp_new > b.logp_new || (c.logp_new == b.logp_new && c.token < b.token)) best = i;
  }
  return cands[best].token;
}

inline StepRecord finish_step(std::vector<CandidateScore> cands, bool masked) {
  if (cands.empty()) throw EmptyCandidateSet("no candidate token survived");
  StepRecord rec;
  const auto best = argmax_total(cands);
  rec.chosen = cands[best].token;
  rec.top_choice_changed = rec.chosen != argmax_logp_new(cands);
  rec.constraint_applied = masked;
  rec.candidates = std::move(cands);
  return rec;
}

// The leader's top-k, taken after masking when a mask is given.
inline NextTokenDistribution masked_top_k(const Backend& b, const Context& ctx, std::size_t k,
                                          const TokenMask* mask) {
  if (!mask) return b.next_logprobs(ctx, k);
  auto full = b.next_logprobs(ctx, std::nullopt);
  if (!full.complete) throw ConfigError("backend '" + b.id() + "' did not return a full distribution");
  NextTokenDistribution out;
  for (const auto& e : full.entries) {
    if (out.entries.size() == k) break;
    if (mask->contains(e.token)) out.entries.push_back(e);
  }
  return out;
}

template <class F, class G>
auto run_pair(bool parallel, F&& f, G&& g) {
  if (!parallel) {
    auto a = f();
    auto b = g();
    return std::make_pair(std::move(a), std::move(b));
  }
  auto fb = std::async(std::launch::async, std::forward<G>(g));
  auto a = f();
  return std::make_pair(std::move(a), fb.get());
}

inline bool any_remote(std::initializer_list<const Backend*> bs) {
  return std::any_of(bs.begin(), bs.end(), [](const Backend* b) { return b->kind() == BackendKind::remote; });
}

}  // namespace detail

// CAPT: re-rank the leader's top-k with the contrastive offset of the
// (clin, base) pair, evaluated at each candidate's projection into their
// shared vocabulary.
inline StepRecord capt_step(const Context& ctx, const Backend& leader, const Backend& clin, const Backend& base,
                            const CrossVocabMap& map, const EnsembleConfig& cfg,
                            const TokenMask* mask = nullptr) {
  if (clin.tokenizer()->vocab_size() != base.tokenizer()->vocab_size()) {
    throw VocabMismatch("clinical and base backends must share a tokenizer");
  }
  const auto candidates = detail::masked_top_k(leader, ctx, cfg.k, mask);

  std::vector<std::optional<TokenId>> mapped;
  std::vector<TokenId> query;
  mapped.reserve(candidates.entries.size());
  for (const auto& e : candidates.entries) {
    mapped.push_back(map.map_token(e.token));
    if (mapped.back() && std::find(query.begin(), query.end(), *mapped.back()) == query.end()) {
      query.push_back(*mapped.back());
    }
  }
  std::map<TokenId, double> clin_lp;
  std::map<TokenId, double> base_lp;
  if (!query.empty()) {
    std::tie(clin_lp, base_lp) = detail::run_pair(
        detail::any_remote({&clin, &base}), [&] { return clin.score_tokens(ctx, query); },
        [&] { return base.score_tokens(ctx, query); });
  }

  const auto& tok = *leader.tokenizer();
  std::vector<CandidateScore> scored;
  scored.reserve(candidates.entries.size());
  for (std::size_t i = 0; i < candidates.entries.size(); ++i) {
    const auto& e = candidates.entries[i];
    CandidateScore c;
    c.token = e.token;
    c.text = tok.token_text(e.token);
    c.logp_new = e.logprob;
    c.mapped = mapped[i];
    if (c.mapped) {
      c.logp_clin = clin_lp.at(*c.mapped);
      c.logp_base = base_lp.at(*c.mapped);
      c.offset = *c.logp_clin - *c.logp_base;
    }
    c.total = c.logp_new + cfg.alpha * c.offset;
    scored.push_back(std::move(c));
  }
  return detail::finish_step(std::move(scored), mask != nullptr);
}

// Proxy tuning over one shared vocabulary: large + (tuned - base) for every
// token. The trace keeps the `trace_k` best-scoring tokens.
inline StepRecord proxy_tuning_step(const Context& ctx, const Backend& large, const Backend& tuned,
                                    const Backend& base, const TokenMask* mask = nullptr,
                                    std::size_t trace_k = 20) {
  const auto& tok = *large.tokenizer();
  if (tok.vocab_size() != tuned.tokenizer()->vocab_size() || tok.vocab_size() != base.tokenizer()->vocab_size()) {
    throw VocabMismatch("proxy tuning needs one shared tokenizer");
  }
  const bool parallel = detail::any_remote({&large, &tuned, &base});
  auto fetch = [&](const Backend& b) {
    auto d = b.next_logprobs(ctx, std::nullopt);
    if (!d.complete) throw ConfigError("backend '" + b.id() + "' did not return a full distribution");
    return d.dense(tok.vocab_size());
  };
  auto [large_lp, tuned_lp] = detail::run_pair(parallel, [&] { return fetch(large); }, [&] { return fetch(tuned); });
  const auto base_lp = fetch(base);

  std::vector<CandidateScore> all;
  all.reserve(tok.vocab_size());
  for (std::size_t i = 0; i < tok.vocab_size(); ++i) {
    const TokenId id{static_cast<std::int32_t>(i)};
    if (mask && !mask->contains(id)) continue;
    CandidateScore c;
    c.token = id;
    c.logp_new = large_lp[i];
    c.mapped = id;
    c.logp_clin = tuned_lp[i];
    c.logp_base = base_lp[i];
    c.offset = tuned_lp[i] - base_lp[i];
    c.total = c.logp_new + c.offset;
    all.push_back(std::move(c));
  }
  if (all.empty()) throw EmptyCandidateSet("mask removed every token");
  const std::size_t keep = std::min(std::max<std::size_t>(trace_k, 1), all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                    detail::better_candidate);
  all.resize(keep);
  for (auto& c : all) c.text = tok.token_text(c.token);
  return detail::finish_step(std::move(all), mask != nullptr);
}

// UNiTE-style top-k union over two vocabularies. Members live in a's
// vocabulary; each is scored 0.5 * (p_a + p_b) and renormalized over the
// union. A member that came from b's top-k uses the probability of its most
// likely originating b token; any other member uses p_b(map_ab(i)), or 0 when
// unmappable. For the trace, logp_clin holds log p_b and offset is
// total - logp_new.
inline StepRecord unite_step(const Context& ctx, const Backend& a, const Backend& b, const CrossVocabMap& map_ab,
                             const CrossVocabMap& map_ba, std::size_t k, const TokenMask* mask = nullptr) {
  const bool parallel = detail::any_remote({&a, &b});
  const auto& tok_a = *a.tokenizer();

  auto b_top = [&]() -> std::vector<std::pair<TokenId, TokenLogprob>> {
    // (member in a's vocab, originating b entry)
    std::vector<std::pair<TokenId, TokenLogprob>> out;
    if (!mask) {
      for (const auto& e : b.next_logprobs(ctx, k).entries) {
        if (auto m = map_ba.map_token(e.token)) out.emplace_back(*m, e);
      }
      return out;
    }
    auto full = b.next_logprobs(ctx, std::nullopt);
    if (!full.complete) throw ConfigError("backend '" + b.id() + "' did not return a full distribution");
    for (const auto& e : full.entries) {
      if (out.size() == k) break;
      auto m = map_ba.map_token(e.token);
      if (m && mask->contains(*m)) out.emplace_back(*m, e);
    }
    return out;
  };
  auto [top_a, top_b] = detail::run_pair(parallel, [&] { return detail::masked_top_k(a, ctx, k, mask); }, b_top);

  std::vector<TokenId> members;
  std::map<TokenId, double> p_a;
  std::map<TokenId, double> p_b;
  for (const auto& e : top_a.entries) {
    members.push_back(e.token);
    p_a[e.token] = std::exp(e.logprob);
  }
  for (const auto& [m, e] : top_b) {
    if (std::find(members.begin(), members.end(), m) == members.end()) members.push_back(m);
    if (!p_b.count(m)) p_b[m] = std::exp(e.logprob);  // entries arrive best-first
  }
  if (members.empty()) throw EmptyCandidateSet("union of top-k sets is empty");

  std::vector<TokenId> need_a;
  std::vector<TokenId> need_b;
  std::map<TokenId, std::optional<TokenId>> mapped;
  for (TokenId m : members) {
    mapped[m] = map_ab.map_token(m);
    if (!p_a.count(m)) need_a.push_back(m);
    if (!p_b.count(m) && mapped[m]) need_b.push_back(*mapped[m]);
  }
  std::sort(need_b.begin(), need_b.end());
  need_b.erase(std::unique(need_b.begin(), need_b.end()), need_b.end());
  auto [score_a, score_b] = detail::run_pair(
      parallel, [&] { return need_a.empty() ? std::map<TokenId, double>{} : a.score_tokens(ctx, need_a); },
      [&] { return need_b.empty() ? std::map<TokenId, double>{} : b.score_tokens(ctx, need_b); });
  for (const auto& [t, lp] : score_a) p_a[t] = std::exp(lp);

  std::vector<CandidateScore> cands;
  double norm = 0.0;
  for (TokenId m : members) {
    CandidateScore c;
    c.token = m;
    c.text = tok_a.token_text(m);
    const double pa = p_a.at(m);
    double pb = 0.0;
    if (auto it = p_b.find(m); it != p_b.end()) {
      pb = it->second;
    } else if (mapped[m]) {
      pb = std::exp(score_b.at(*mapped[m]));
    }
    c.logp_new = std::log(pa);
    c.mapped = mapped[m];
    if (pb > 0.0) c.logp_clin = std::log(pb);
    c.total = 0.5 * (pa + pb);  // unnormalized for now
    norm += c.total;
    cands.push_back(std::move(c));
  }
  for (auto& c : cands) {
    c.total = std::log(c.total / norm);
    c.offset = c.total - c.logp_new;
  }
  std::sort(cands.begin(), cands.end(), detail::better_candidate);
  if (cands.size() > k) cands.resize(k);
  return detail::finish_step(std::move(cands), mask != nullptr);
}

// Leader alone, greedy over its (masked) top-k.
inline StepRecord single_step(const Context& ctx, const Backend& leader, std::size_t k,
                              const TokenMask* mask = nullptr) {
  const auto candidates = detail::masked_top_k(leader, ctx, k, mask);
  std::vector<CandidateScore> scored;
  for (const auto& e : candidates.entries) {
    CandidateScore c;
    c.token = e.token;
    c.text = leader.tokenizer()->token_text(e.token);
    c.logp_new = e.logprob;
    c.total = e.logprob;
    scored.push_back(std::move(c));
  }
  return detail::finish_step(std::move(scored), mask != nullptr);
}

// Backends by role. CAPT: leader = M_new, tuned = M_old-clin, base = M_old.
// Proxy tuning: leader = the large shared-vocabulary model. UNiTE: leader and
// tuned are the two ensembled models. Single: leader only.
struct ModelSet {
  BackendPtr leader;
  BackendPtr tuned;
  BackendPtr base;
};

// Decode-retokenize map between two vocabularies, or the identity when they
// coincide.
inline CrossVocabMap make_vocab_map(const TokenizerPtr& src, const TokenizerPtr& dst) {
  if (same_vocabulary(*src, *dst)) return CrossVocabMap::identity(src);
  return build_map(src, dst);
}

class Ensemble {
 public:
  Ensemble(ModelSet models, EnsembleConfig cfg) : models_(std::move(models)), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (!models_.leader) throw ConfigError("ensemble needs a leader backend");
    switch (cfg_.method) {
      case Method::capt:
      case Method::proxy_tuning:
        if (!models_.tuned || !models_.base) throw ConfigError(std::string(to_string(cfg_.method)) + " needs tuned and base backends");
        if (!same_vocabulary(*models_.tuned->tokenizer(), *models_.base->tokenizer())) {
          throw VocabMismatch("tuned and base backends must share a tokenizer");
        }
        if (!models_.tuned->supports_token_scoring() || !models_.base->supports_token_scoring()) {
          throw ConfigError("tuned and base backends must support arbitrary-token scoring");
        }
        if (cfg_.method == Method::proxy_tuning &&
            !same_vocabulary(*models_.leader->tokenizer(), *models_.tuned->tokenizer())) {
          throw VocabMismatch("proxy tuning needs one tokenizer shared by all three models");
        }
        forward_.emplace(make_vocab_map(models_.leader->tokenizer(), models_.tuned->tokenizer()));
        break;
      case Method::unite:
        if (!models_.tuned) throw ConfigError("unite needs a second backend in the tuned role");
        forward_.emplace(make_vocab_map(models_.leader->tokenizer(), models_.tuned->tokenizer()));
        backward_.emplace(make_vocab_map(models_.tuned->tokenizer(), models_.leader->tokenizer()));
        break;
      case Method::single:
        break;
    }
  }

  const EnsembleConfig& config() const { return cfg_; }
  const ModelSet& models() const { return models_; }

  StepRecord step(const Context& ctx, const TokenMask* mask = nullptr) const {
    switch (cfg_.method) {
      case Method::capt:
        return capt_step(ctx, *models_.leader, *models_.tuned, *models_.base, *forward_, cfg_, mask);
      case Method::proxy_tuning:
        return proxy_tuning_step(ctx, *models_.leader, *models_.tuned, *models_.base, mask, cfg_.k);
      case Method::unite:
        return unite_step(ctx, *models_.leader, *models_.tuned, *forward_, *backward_, cfg_.k, mask);
      case Method::single:
        return single_step(ctx, *models_.leader, cfg_.k, mask);
    }
    throw ConfigError("unknown method");
  }

  // Greedy decoding loop. Stops on a configured stop string, the leader's
  // end-of-sequence token, max_tokens, or when the constraint closes the
  // object. The stop string stays in the returned text.
  GenerationResult generate(const std::string& prompt, const ConstraintMatcher* constraint = nullptr) const {
    if (prompt.empty()) throw InvalidArgument("prompt must not be empty");
    const auto& tok = *models_.leader->tokenizer();
    if (constraint && !same_vocabulary(*constraint->tokenizer(), tok)) {
      throw VocabMismatch("constraint matcher must be built over the leader's tokenizer");
    }
    GenerationResult result;
    result.method = cfg_.method;
    Context ctx{prompt, {}};
    std::optional<ConstraintState> state;
    if (constraint) state = constraint->initial();

    for (std::size_t i = 0; i < cfg_.max_tokens; ++i) {
      std::optional<TokenMask> mask;
      if (state) mask = constraint->allowed_tokens(*state);
      StepRecord rec = step(ctx, mask ? &*mask : nullptr);
      rec.step_index = i;
      const TokenId chosen = rec.chosen;
      const std::string piece = tok.token_text(chosen);
      result.steps.push_back(std::move(rec));
      ctx.generated += piece;

      if (state) {
        state = constraint->advance(*state, chosen);
        if (state->done()) {
          result.finish_reason = FinishReason::constraint_complete;
          break;
        }
      }
      if (tok.eos() && chosen == *tok.eos()) {
        result.finish_reason = FinishReason::stop;
        break;
      }
      if (hits_stop(ctx.generated, piece.size())) {
        result.finish_reason = FinishReason::stop;
        break;
      }
    }
    result.text = std::move(ctx.generated);
    return result;
  }

 private:
  bool hits_stop(const std::string& generated, std::size_t appended) const {
    for (const auto& s : cfg_.stop_sequences) {
      const std::size_t window = std::min(generated.size(), appended + s.size() - 1);
      if (generated.find(s, generated.size() - window) != std::string::npos) return true;
    }
    return false;
  }

  ModelSet models_;
  EnsembleConfig cfg_;
  std::optional<CrossVocabMap> forward_;
  std::optional<CrossVocabMap> backward_;
};

inline GenerationResult generate(const std::string& prompt, const EnsembleConfig& cfg, const ModelSet& models,
                                 const std::optional<JsonSchemaConstraint>& constraint = std::nullopt) {
  Ensemble ensemble(models, cfg);
  if (!constraint) return ensemble.generate(prompt);
  ConstraintMatcher matcher(*constraint, models.leader->tokenizer());
  return ensemble.generate(prompt, &matcher);
}

}  // namespace capt
