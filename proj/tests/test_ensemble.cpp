#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "capt/constraint.hpp"
#include "capt/ensemble.hpp"
#include "capt/trace_io.hpp"
#include "support/fixtures.hpp"
#include "support/json_oracle.hpp"

using namespace capt;

namespace {

const std::vector<std::string> kLetters = {"A", "B", "C", "D", "E", "F", "G", "H"};

std::shared_ptr<ToyBackend> table(const TokenizerPtr& tok, const std::string& id,
                                  const std::map<std::string, double>& weights) {
  std::vector<double> w(tok->vocab_size(), 0.0);
  for (const auto& [text, weight] : weights) w[static_cast<std::size_t>(tok->encode(text).at(0).value)] = weight;
  auto model = std::make_shared<TableToy>(std::vector<TableToy::Row>{{"", TableToy::normalize_row(w)}});
  return std::make_shared<ToyBackend>(id, tok, model);
}

struct CrossTriple {
  TokenizerPtr new_tok = fixtures::shared64();
  TokenizerPtr old_tok = fixtures::other_vocab();
  std::shared_ptr<ToyBackend> leader = fixtures::bigram(new_tok, 101, "new");
  std::shared_ptr<ToyBackend> clin = fixtures::bigram(old_tok, 202, "clin");
  std::shared_ptr<ToyBackend> base = fixtures::bigram(old_tok, 303, "base");
  CrossVocabMap map = build_map(new_tok, old_tok);
};

}  // namespace

TEST(Ensemble, DefaultsAreTopTwentyAndUnitAlpha) {
  const EnsembleConfig cfg;
  EXPECT_EQ(cfg.k, 20u);
  EXPECT_EQ(cfg.alpha, 1.0);
  EXPECT_EQ(cfg.method, Method::capt);
}

TEST(Ensemble, VocabEightHandExample) {
  const auto new_tok = fixtures::tokenizer(kLetters, false, "new8");
  const auto old_tok = fixtures::tokenizer({"H", "G", "F", "E", "D", "C", "B", "A"}, false, "old8");
  // p_new: A .5, B .3, rest 1/30; p_base: A .2, B .1, rest 7/60; p_clin: A .2, B .2, rest .1
  const auto leader = table(new_tok, "new", {{"A", 30}, {"B", 18}, {"C", 2}, {"D", 2}, {"E", 2}, {"F", 2}, {"G", 2}, {"H", 2}});
  const auto base = table(old_tok, "base", {{"A", 12}, {"B", 6}, {"C", 7}, {"D", 7}, {"E", 7}, {"F", 7}, {"G", 7}, {"H", 7}});
  const auto clin = table(old_tok, "clin", {{"A", 12}, {"B", 12}, {"C", 6}, {"D", 6}, {"E", 6}, {"F", 6}, {"G", 6}, {"H", 6}});
  const auto map = build_map(new_tok, old_tok);
  EnsembleConfig cfg;
  cfg.k = 8;
  const auto rec = capt_step({"A", ""}, *leader, *clin, *base, map, cfg);

  const std::map<std::string, std::array<double, 3>> hand = {
      {"A", {0.5, 0.2, 0.2}}, {"B", {0.3, 0.2, 0.1}}, {"C", {1.0 / 30, 0.1, 7.0 / 60}}, {"D", {1.0 / 30, 0.1, 7.0 / 60}},
      {"E", {1.0 / 30, 0.1, 7.0 / 60}}, {"F", {1.0 / 30, 0.1, 7.0 / 60}}, {"G", {1.0 / 30, 0.1, 7.0 / 60}},
      {"H", {1.0 / 30, 0.1, 7.0 / 60}}};
  ASSERT_EQ(rec.candidates.size(), 8u);
  std::string best;
  double best_score = -INFINITY;
  for (const auto& c : rec.candidates) {
    const auto& h = hand.at(c.text);
    const double s = std::log(h[0]) + (std::log(h[1]) - std::log(h[2]));
    EXPECT_NEAR(c.total, s, 1e-12) << c.text;
    ASSERT_TRUE(c.mapped);
    EXPECT_EQ(old_tok->token_text(*c.mapped), c.text);
    if (s > best_score) best_score = s, best = c.text;
  }
  EXPECT_EQ(best, "B");
  EXPECT_EQ(new_tok->token_text(rec.chosen), "B");
  EXPECT_TRUE(rec.top_choice_changed);
  EXPECT_NEAR(rec.chosen_candidate().offset, std::log(2.0), 1e-12);
  for (const auto& c : rec.candidates) {
    if (c.text == "A") {
      EXPECT_EQ(c.offset, 0.0);
    }
  }
}

TEST(Ensemble, AlphaZeroIsGreedy) {
  CrossTriple t;
  EnsembleConfig cfg;
  cfg.alpha = 0.0;
  for (const auto& ctx : fixtures::contexts(t.new_tok, 150, 1)) {
    const auto rec = capt_step(ctx, *t.leader, *t.clin, *t.base, t.map, cfg);
    EXPECT_EQ(rec.chosen, fixtures::greedy(*t.leader, ctx));
    EXPECT_FALSE(rec.top_choice_changed);
  }
}

TEST(Ensemble, IdenticalExpertsGiveZeroOffsets) {
  CrossTriple t;
  const EnsembleConfig cfg;
  for (const auto& ctx : fixtures::contexts(t.new_tok, 150, 2)) {
    const auto rec = capt_step(ctx, *t.leader, *t.clin, *t.clin, t.map, cfg);
    for (const auto& c : rec.candidates) EXPECT_EQ(c.offset, 0.0);
    EXPECT_EQ(rec.chosen, fixtures::greedy(*t.leader, ctx));
  }
}

TEST(Ensemble, LinearInAlpha) {
  CrossTriple t;
  for (double alpha : {0.0, 0.5, 1.0, 2.0}) {
    EnsembleConfig cfg;
    cfg.alpha = alpha;
    for (const auto& ctx : fixtures::contexts(t.new_tok, 40, 3)) {
      const auto rec = capt_step(ctx, *t.leader, *t.clin, *t.base, t.map, cfg);
      const auto leader_lp = t.leader->full_logprobs(ctx);
      const auto clin_lp = t.clin->full_logprobs(ctx);
      const auto base_lp = t.base->full_logprobs(ctx);
      for (const auto& c : rec.candidates) {
        EXPECT_EQ(c.logp_new, leader_lp[static_cast<std::size_t>(c.token.value)]);
        const double off = c.mapped ? clin_lp[static_cast<std::size_t>(c.mapped->value)] -
                                          base_lp[static_cast<std::size_t>(c.mapped->value)]
                                    : 0.0;
        EXPECT_EQ(c.offset, off);
        EXPECT_LE(std::fabs(c.total - (c.logp_new + alpha * c.offset)), 1e-12);
      }
    }
  }
}

TEST(Ensemble, ChosenStaysInLeaderTopK) {
  CrossTriple t;
  for (std::size_t k : {1u, 3u, 20u}) {
    EnsembleConfig cfg;
    cfg.k = k;
    cfg.alpha = 3.0;
    for (const auto& ctx : fixtures::contexts(t.new_tok, 60, 4)) {
      const auto rec = capt_step(ctx, *t.leader, *t.clin, *t.base, t.map, cfg);
      EXPECT_EQ(rec.candidates.size(), k);
      EXPECT_TRUE(fixtures::in_top_k(t.leader->full_logprobs(ctx), k, rec.chosen));
    }
  }
}

TEST(Ensemble, UnmappableCandidatesGetZeroOffset) {
  const auto new_tok = fixtures::tokenizer({"a", "b", " ", "z"});
  const auto old_tok = fixtures::tokenizer({"a", "b"});
  const auto leader = std::make_shared<ToyBackend>("n", new_tok, std::make_shared<UniformToy>(4));
  const auto clin = table(old_tok, "c", {{"a", 1}, {"b", 3}});
  const auto base = table(old_tok, "b", {{"a", 1}, {"b", 1}});
  const auto map = build_map(new_tok, old_tok);
  EnsembleConfig cfg;
  cfg.k = 4;
  const auto rec = capt_step({"a", ""}, *leader, *clin, *base, map, cfg);
  for (const auto& c : rec.candidates) {
    if (c.text == " " || c.text == "z") {
      EXPECT_FALSE(c.mapped);
      EXPECT_FALSE(c.logp_clin);
      EXPECT_EQ(c.offset, 0.0);
    }
  }
  EXPECT_EQ(new_tok->token_text(rec.chosen), "b");
}

TEST(Ensemble, MaskAppliesBeforeTopK) {
  CrossTriple t;
  TokenMask mask = TokenMask::none(t.new_tok->vocab_size());
  for (std::int32_t i = 0; i < 64; i += 3) mask.allow(TokenId{i});
  EnsembleConfig cfg;
  cfg.k = 5;
  for (const auto& ctx : fixtures::contexts(t.new_tok, 40, 5)) {
    const auto rec = capt_step(ctx, *t.leader, *t.clin, *t.base, t.map, cfg, &mask);
    EXPECT_TRUE(rec.constraint_applied);
    ASSERT_EQ(rec.candidates.size(), 5u);
    for (const auto& c : rec.candidates) EXPECT_TRUE(mask.contains(c.token));
    // the five candidates are exactly the five best allowed tokens
    const auto lp = t.leader->full_logprobs(ctx);
    for (const auto& c : rec.candidates) EXPECT_TRUE(fixtures::in_top_k(lp, 5, c.token, &mask));
  }
}

TEST(Ensemble, ProxyTuningMatchesExhaustiveOracle) {
  const auto tok = fixtures::shared64();
  const auto large = fixtures::bigram(tok, 11, "large");
  const auto tuned = fixtures::bigram(tok, 12, "tuned");
  const auto base = fixtures::bigram(tok, 13, "base");
  for (const auto& ctx : fixtures::contexts(tok, 100, 6)) {
    const auto rec = proxy_tuning_step(ctx, *large, *tuned, *base);
    const auto l = large->full_logprobs(ctx);
    const auto tn = tuned->full_logprobs(ctx);
    const auto b = base->full_logprobs(ctx);
    std::size_t best = 0;
    for (std::size_t i = 1; i < l.size(); ++i) {
      const double si = l[i] + (tn[i] - b[i]);
      const double sb = l[best] + (tn[best] - b[best]);
      if (si > sb || (si == sb && l[i] > l[best])) best = i;
    }
    EXPECT_EQ(rec.chosen.value, static_cast<std::int32_t>(best));
    EXPECT_EQ(rec.candidates.size(), 20u);
    for (const auto& c : rec.candidates) {
      const auto i = static_cast<std::size_t>(c.token.value);
      EXPECT_EQ(c.total, l[i] + (tn[i] - b[i]));
    }
  }
}

TEST(Ensemble, ProxyTuningDegenerateCases) {
  const auto tok = fixtures::shared64();
  const auto large = fixtures::bigram(tok, 21, "large");
  const auto other = fixtures::bigram(tok, 22, "other");
  for (const auto& ctx : fixtures::contexts(tok, 50, 7)) {
    EXPECT_EQ(proxy_tuning_step(ctx, *large, *other, *other).chosen, fixtures::greedy(*large, ctx));
    EXPECT_EQ(proxy_tuning_step(ctx, *large, *large, *large).chosen, fixtures::greedy(*large, ctx));
  }
}

TEST(Ensemble, SharedVocabCaptEqualsProxyTuning) {
  const auto tok = fixtures::shared64();
  const auto large = fixtures::bigram(tok, 31, "large");
  const auto tuned = fixtures::bigram(tok, 32, "tuned");
  const auto base = fixtures::bigram(tok, 33, "base");
  const auto map = make_vocab_map(tok, tok);
  EnsembleConfig cfg;
  cfg.k = 64;
  for (const auto& ctx : fixtures::contexts(tok, 200, 8)) {
    EXPECT_EQ(capt_step(ctx, *large, *tuned, *base, map, cfg).chosen, proxy_tuning_step(ctx, *large, *tuned, *base).chosen);
  }
}

TEST(Ensemble, UniteDisjointSupportAveragesProbabilities) {
  const auto tok = fixtures::tokenizer(kLetters);
  const auto a = table(tok, "a", {{"A", 3}, {"B", 1}});
  const auto b = table(tok, "b", {{"C", 1}, {"D", 1}});
  const auto map = CrossVocabMap::identity(tok);
  const Context ctx{"A", ""};
  const auto rec = unite_step(ctx, *a, *b, map, map, 4);
  const auto pa = a->full_logprobs(ctx);
  const auto pb = b->full_logprobs(ctx);
  std::map<std::string, double> hand;
  double norm = 0.0;
  for (const char* s : {"A", "B", "C", "D"}) {
    const auto i = static_cast<std::size_t>(tok->encode(s)[0].value);
    hand[s] = 0.5 * (std::exp(pa[i]) + std::exp(pb[i]));
    norm += hand[s];
  }
  ASSERT_EQ(rec.candidates.size(), 4u);
  for (const auto& c : rec.candidates) EXPECT_NEAR(std::exp(c.total), hand.at(c.text) / norm, 1e-12) << c.text;
  EXPECT_EQ(tok->token_text(rec.chosen), "A");
}

TEST(Ensemble, UniteSameModelIsGreedy) {
  const auto tok = fixtures::shared64();
  const auto a = fixtures::bigram(tok, 41, "a");
  const auto id = CrossVocabMap::identity(tok);
  for (const auto& ctx : fixtures::contexts(tok, 100, 9)) {
    EXPECT_EQ(unite_step(ctx, *a, *a, id, id, 20).chosen, fixtures::greedy(*a, ctx));
    EXPECT_EQ(unite_step(ctx, *a, *a, id, id, 1).chosen, fixtures::greedy(*a, ctx));
  }
}

TEST(Ensemble, UniteAcrossVocabularies) {
  CrossTriple t;
  const auto back = build_map(t.old_tok, t.new_tok);
  for (const auto& ctx : fixtures::contexts(t.new_tok, 40, 10)) {
    const auto rec = unite_step(ctx, *t.leader, *t.clin, t.map, back, 5);
    double mass = 0.0;
    for (const auto& c : rec.candidates) {
      mass += std::exp(c.total);
      EXPECT_DOUBLE_EQ(c.offset, c.total - c.logp_new);
    }
    EXPECT_LE(rec.candidates.size(), 5u);
    EXPECT_LE(mass, 1.0 + 1e-12);
  }
}

TEST(Ensemble, SingleIsGreedy) {
  CrossTriple t;
  for (const auto& ctx : fixtures::contexts(t.new_tok, 40, 11)) EXPECT_EQ(single_step(ctx, *t.leader, 20).chosen, fixtures::greedy(*t.leader, ctx));
}

TEST(Ensemble, ApplyPoints) {
  EXPECT_EQ(apply_point(Method::capt), ApplyPoint::mask_leader_before_topk);
  EXPECT_EQ(apply_point(Method::single), ApplyPoint::mask_leader_before_topk);
  EXPECT_EQ(apply_point(Method::unite), ApplyPoint::mask_union_candidates);
  EXPECT_EQ(apply_point(Method::proxy_tuning), ApplyPoint::mask_union_candidates);
}

TEST(Ensemble, ConstructorValidatesRoles) {
  CrossTriple t;
  EnsembleConfig cfg;
  EXPECT_THROW(Ensemble(ModelSet{t.leader, t.clin, nullptr}, cfg), ConfigError);
  EXPECT_THROW(Ensemble(ModelSet{t.leader, t.clin, fixtures::bigram(t.new_tok, 1, "x")}, cfg), VocabMismatch);
  cfg.method = Method::proxy_tuning;
  EXPECT_THROW(Ensemble(ModelSet{t.leader, t.clin, t.base}, cfg), VocabMismatch);
  cfg.method = Method::unite;
  EXPECT_THROW(Ensemble(ModelSet{t.leader, nullptr, nullptr}, cfg), ConfigError);
  cfg.method = Method::single;
  EXPECT_NO_THROW(Ensemble(ModelSet{t.leader, nullptr, nullptr}, cfg));
  cfg.k = 0;
  EXPECT_THROW(Ensemble(ModelSet{t.leader, nullptr, nullptr}, cfg), ConfigError);
}

TEST(Ensemble, GenerateStopsAtMaxTokens) {
  CrossTriple t;
  EnsembleConfig cfg;
  cfg.max_tokens = 1;
  const Ensemble e(ModelSet{t.leader, t.clin, t.base}, cfg);
  const auto r = e.generate("the");
  EXPECT_EQ(r.steps.size(), 1u);
  EXPECT_EQ(r.finish_reason, FinishReason::max_tokens);
  EXPECT_THROW(e.generate(""), InvalidArgument);
}

TEST(Ensemble, GenerateStopsOnStopString) {
  CrossTriple t;
  EnsembleConfig cfg;
  cfg.max_tokens = 10;
  const Ensemble probe(ModelSet{t.leader, t.clin, t.base}, cfg);
  const auto first = probe.generate("the").steps.at(0).chosen_candidate().text;
  cfg.stop_sequences = {first};
  const auto r = Ensemble(ModelSet{t.leader, t.clin, t.base}, cfg).generate("the");
  EXPECT_EQ(r.steps.size(), 1u);
  EXPECT_EQ(r.finish_reason, FinishReason::stop);
  EXPECT_EQ(r.text, first);
}

TEST(Ensemble, GenerateStopsOnLeaderEos) {
  const auto tok = GreedyTokenizer::from_json({{"vocab", {"a", "b"}}, {"eos", "</s>"}});
  nlohmann::json spec{{"tokenizer", {{"vocab", {"a", "b"}}, {"eos", "</s>"}}},
                      {"model", "table"},
                      {"rows", {{{"suffix", ""}, {"probs", {{"a", 1}}}}, {{"suffix", "aa"}, {"probs", {{"</s>", 1}}}}}}};
  const auto leader = make_toy_model(spec);
  EnsembleConfig cfg;
  cfg.method = Method::single;
  const auto r = Ensemble(ModelSet{leader, nullptr, nullptr}, cfg).generate("a");
  EXPECT_EQ(r.finish_reason, FinishReason::stop);
  EXPECT_EQ(r.text, "a");
  EXPECT_EQ(r.steps.size(), 2u);
}

TEST(Ensemble, ConstrainedGenerationIsSchemaValid) {
  const auto new_tok = GreedyTokenizer::from_json({{"vocab", oracle::constraint_vocab()}, {"eos", "</s>"}});
  const auto old_tok = fixtures::other_vocab();
  const auto leader = fixtures::bigram(new_tok, 51, "new");
  const auto clin = fixtures::bigram(old_tok, 52, "clin");
  const auto base = fixtures::bigram(old_tok, 53, "base");
  JsonSchemaConstraint c;
  c.label_set = {"ab", "b", "ca"};
  c.reason_max_chars = 20;
  const ConstraintMatcher matcher(c, new_tok);
  const oracle::Language lang({c.label_set, false, c.reason_max_chars});
  for (Method m : {Method::capt, Method::single, Method::unite}) {
    EnsembleConfig cfg;
    cfg.method = m;
    cfg.max_tokens = 200;
    const Ensemble e(ModelSet{leader, clin, base}, cfg);
    for (const char* prompt : {"ab", "{", "zzz", "ca ca"}) {
      const auto r = e.generate(prompt, &matcher);
      EXPECT_EQ(r.finish_reason, FinishReason::constraint_complete) << to_string(m) << " " << r.text;
      EXPECT_TRUE(lang.schema_valid(r.text)) << r.text;
      for (const auto& s : r.steps) EXPECT_TRUE(s.constraint_applied);
    }
  }
}

TEST(Ensemble, GenerationIsReproducible) {
  CrossTriple t;
  EnsembleConfig cfg;
  cfg.max_tokens = 30;
  const Ensemble e(ModelSet{t.leader, t.clin, t.base}, cfg);
  EXPECT_EQ(write_trace_jsonl(e.generate("the ")), write_trace_jsonl(e.generate("the ")));
}
