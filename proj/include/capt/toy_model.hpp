#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "capt/backend.hpp"
#include "capt/errors.hpp"
#include "capt/text.hpp"
#include "capt/tokenizer.hpp"

namespace capt {

// Probability assigned to tokens a table row does not mention.
inline constexpr double kLogprobFloorEpsilon = 1e-10;

// Conditional next-token model over a fixed tokenizer. `rendered` is the
// templated context text.
class ToyModel {
 public:
  virtual ~ToyModel() = default;
  virtual std::vector<double> logprobs(std::string_view rendered) const = 0;
};

class UniformToy final : public ToyModel {
 public:
  explicit UniformToy(std::size_t vocab_size) : vocab_size_(vocab_size) {}

  std::vector<double> logprobs(std::string_view) const override {
    return std::vector<double>(vocab_size_, -std::log(static_cast<double>(vocab_size_)));
  }

 private:
  std::size_t vocab_size_;
};

// Rows keyed by context suffix; the longest matching suffix wins and the row
// with suffix "" is the default.
class TableToy final : public ToyModel {
 public:
  struct Row {
    std::string suffix;
    std::vector<double> logprobs;
  };

  TableToy(std::vector<Row> rows) : rows_(std::move(rows)) {
    std::sort(rows_.begin(), rows_.end(),
              [](const Row& a, const Row& b) { return a.suffix.size() > b.suffix.size(); });
    if (rows_.empty() || !rows_.back().suffix.empty()) {
      throw MalformedSpec("table model needs a default row with suffix \"\"");
    }
  }

  // Listed weights are normalized to share 1 - m*eps where m is the number of
  // unlisted tokens; unlisted tokens get exactly ln(eps).
  static std::vector<double> normalize_row(const std::vector<double>& weights) {
    double total = 0.0;
    std::size_t unlisted = 0;
    for (double w : weights) {
      if (w < 0.0 || !std::isfinite(w)) throw MalformedSpec("table weights must be finite and >= 0");
      if (w > 0.0) {
        total += w;
      } else {
        ++unlisted;
      }
    }
    if (total <= 0.0) throw MalformedSpec("table row has no positive weight");
    const double listed_mass = 1.0 - static_cast<double>(unlisted) * kLogprobFloorEpsilon;
    std::vector<double> out(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out[i] = weights[i] > 0.0 ? std::log(weights[i] / total * listed_mass)
                                : std::log(kLogprobFloorEpsilon);
    }
    return out;
  }

  std::vector<double> logprobs(std::string_view rendered) const override {
    for (const auto& row : rows_) {
      if (rendered.size() >= row.suffix.size() &&
          rendered.substr(rendered.size() - row.suffix.size()) == row.suffix) {
        return row.logprobs;
      }
    }
    return rows_.back().logprobs;
  }

 private:
  std::vector<Row> rows_;
};

// Add-lambda smoothed bigram model conditioned on the last context token.
// Contexts the tokenizer cannot encode fall back to the smoothed unigram row.
class BigramToy final : public ToyModel {
 public:
  struct Counts {
    // pair_counts[prev][next], unigram[next]
    std::vector<std::vector<std::uint64_t>> pair_counts;
    std::vector<std::uint64_t> unigram;
  };

  BigramToy(TokenizerPtr tokenizer, const Counts& counts, double smoothing)
      : tokenizer_(std::move(tokenizer)) {
    if (!(smoothing > 0.0)) throw MalformedSpec("bigram smoothing must be > 0");
    const std::size_t v = tokenizer_->vocab_size();
    const double vd = static_cast<double>(v);
    auto row_logprobs = [&](const std::vector<std::uint64_t>& row) {
      std::uint64_t total = 0;
      for (auto c : row) total += c;
      const double denom = static_cast<double>(total) + smoothing * vd;
      std::vector<double> out(v);
      for (std::size_t j = 0; j < v; ++j) out[j] = std::log((static_cast<double>(row[j]) + smoothing) / denom);
      return out;
    };
    rows_.reserve(v + 1);
    for (std::size_t i = 0; i < v; ++i) rows_.push_back(row_logprobs(counts.pair_counts[i]));
    rows_.push_back(row_logprobs(counts.unigram));
  }

  static Counts count_sequences(std::size_t vocab_size,
                                const std::vector<std::vector<TokenId>>& sequences) {
    Counts c;
    c.pair_counts.assign(vocab_size, std::vector<std::uint64_t>(vocab_size, 0));
    c.unigram.assign(vocab_size, 0);
    for (const auto& seq : sequences) {
      for (std::size_t i = 0; i < seq.size(); ++i) {
        c.unigram[static_cast<std::size_t>(seq[i].value)]++;
        if (i + 1 < seq.size()) {
          c.pair_counts[static_cast<std::size_t>(seq[i].value)][static_cast<std::size_t>(seq[i + 1].value)]++;
        }
      }
    }
    return c;
  }

  // Random walk over a seeded sparse successor graph. Raw engine output is
  // reduced with modulo so the corpus does not depend on the standard
  // library's distribution implementations.
  static std::vector<TokenId> generate_corpus(std::size_t vocab_size, std::uint64_t seed,
                                              std::size_t length, std::size_t branching) {
    if (vocab_size == 0 || branching == 0) throw MalformedSpec("bigram corpus needs vocab and branching > 0");
    std::mt19937_64 rng(seed);
    std::vector<std::vector<std::int32_t>> successors(vocab_size);
    for (auto& s : successors) {
      for (std::size_t b = 0; b < branching; ++b) s.push_back(static_cast<std::int32_t>(rng() % vocab_size));
    }
    std::vector<TokenId> corpus;
    corpus.reserve(length);
    auto cur = static_cast<std::int32_t>(rng() % vocab_size);
    for (std::size_t i = 0; i < length; ++i) {
      corpus.push_back(TokenId{cur});
      const auto& s = successors[static_cast<std::size_t>(cur)];
      cur = s[rng() % s.size()];
    }
    return corpus;
  }

  std::vector<double> logprobs(std::string_view rendered) const override {
    auto ids = tokenizer_->try_encode(rendered);
    if (!ids || ids->empty()) return rows_.back();
    return rows_[static_cast<std::size_t>(ids->back().value)];
  }

 private:
  TokenizerPtr tokenizer_;
  std::vector<std::vector<double>> rows_;
};

class ToyBackend final : public Backend {
 public:
  ToyBackend(std::string id, TokenizerPtr tokenizer, std::shared_ptr<const ToyModel> model,
             PromptTemplate prompt = {}, std::optional<std::size_t> max_context_tokens = std::nullopt)
      : id_(std::move(id)),
        tokenizer_(std::move(tokenizer)),
        model_(std::move(model)),
        prompt_(std::move(prompt)),
        max_context_tokens_(max_context_tokens) {}

  const std::string& id() const override { return id_; }
  const TokenizerPtr& tokenizer() const override { return tokenizer_; }
  BackendKind kind() const override { return BackendKind::toy; }

  std::vector<double> full_logprobs(const Context& ctx) const {
    const std::string rendered = prompt_.render(ctx);
    if (max_context_tokens_) {
      auto ids = tokenizer_->try_encode(rendered);
      const std::size_t n = ids ? ids->size() : rendered.size();
      if (n > *max_context_tokens_) {
        throw ContextTooLong("context of " + std::to_string(n) + " tokens exceeds limit " +
                             std::to_string(*max_context_tokens_) + " for backend '" + id_ + "'");
      }
    }
    return model_->logprobs(rendered);
  }

  NextTokenDistribution next_logprobs(const Context& ctx, std::optional<std::size_t> top_k) const override {
    check_query(ctx, top_k);
    const auto lp = full_logprobs(ctx);
    return distribution_from_dense(lp, top_k);
  }

  std::map<TokenId, double> score_tokens(const Context& ctx, std::span<const TokenId> tokens) const override {
    for (TokenId t : tokens) tokenizer_->check(t);
    std::map<TokenId, double> out;
    if (tokens.empty()) return out;
    check_query(ctx, std::nullopt);
    const auto lp = full_logprobs(ctx);
    for (TokenId t : tokens) out[t] = lp[static_cast<std::size_t>(t.value)];
    return out;
  }

  const PromptTemplate& prompt_template() const { return prompt_; }
  void set_prompt_template(PromptTemplate p) { prompt_ = std::move(p); }
  void set_id(std::string id) { id_ = std::move(id); }

 private:
  std::string id_;
  TokenizerPtr tokenizer_;
  std::shared_ptr<const ToyModel> model_;
  PromptTemplate prompt_;
  std::optional<std::size_t> max_context_tokens_;
};

namespace detail {

inline std::unordered_map<std::string, TokenId> display_index(const Tokenizer& tok) {
  std::unordered_map<std::string, TokenId> idx;
  for (std::size_t i = 0; i < tok.vocab_size(); ++i) {
    const TokenId id{static_cast<std::int32_t>(i)};
    idx.try_emplace(tok.display_text(id), id);
  }
  return idx;
}

}  // namespace detail

// Toy model definition:
//   {"name": str, "tokenizer": {...} | "tokenizer_path": str,
//    "model": "uniform" | "table" | "bigram",
//    "rows": [{"suffix": str, "probs": {token: weight}}],              (table)
//    "seed": int, "corpus_length": int, "branching": int,              (bigram)
//    "corpus": [str], "smoothing": real,                               (bigram)
//    "max_context_tokens": int}
// Relative paths resolve against `base_dir`.
inline std::shared_ptr<ToyBackend> make_toy_model(const nlohmann::json& spec,
                                                  const std::filesystem::path& base_dir = {}) {
  try {
    if (!spec.is_object()) throw MalformedSpec("toy model spec must be a JSON object");
    static const std::vector<std::string> kKeys = {"name", "tokenizer", "tokenizer_path", "model",
                                                   "rows", "seed", "corpus_length", "branching",
                                                   "corpus", "smoothing", "max_context_tokens"};
    for (const auto& [key, _] : spec.items()) {
      if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
        throw MalformedSpec("unknown toy model key: " + key);
      }
    }
    TokenizerPtr tok;
    if (spec.contains("tokenizer")) {
      tok = GreedyTokenizer::from_json(spec["tokenizer"]);
    } else if (spec.contains("tokenizer_path")) {
      tok = load_tokenizer_file((base_dir / spec["tokenizer_path"].get<std::string>()).string());
    } else {
      throw MalformedSpec("toy model needs \"tokenizer\" or \"tokenizer_path\"");
    }
    if (tok->vocab_size() == 0) throw MalformedSpec("toy model vocabulary is empty");

    const std::string name = spec.value("name", std::string("toy"));
    const std::string kind = spec.value("model", std::string());
    std::shared_ptr<const ToyModel> model;
    if (kind == "uniform") {
      model = std::make_shared<UniformToy>(tok->vocab_size());
    } else if (kind == "table") {
      if (!spec.contains("rows") || !spec["rows"].is_array()) throw MalformedSpec("table model needs \"rows\"");
      const auto index = detail::display_index(*tok);
      std::vector<TableToy::Row> rows;
      for (const auto& r : spec["rows"]) {
        std::vector<double> weights(tok->vocab_size(), 0.0);
        for (const auto& [token, w] : r.at("probs").items()) {
          auto it = index.find(token);
          if (it == index.end()) throw MalformedSpec("table row names unknown token \"" + token + "\"");
          weights[static_cast<std::size_t>(it->second.value)] = w.get<double>();
        }
        rows.push_back({r.value("suffix", std::string()), TableToy::normalize_row(weights)});
      }
      model = std::make_shared<TableToy>(std::move(rows));
    } else if (kind == "bigram") {
      std::vector<std::vector<TokenId>> sequences;
      if (spec.contains("corpus")) {
        for (const auto& line : spec["corpus"]) {
          auto ids = tok->try_encode(line.get<std::string>());
          if (!ids) throw MalformedSpec("bigram corpus line is not encodable by the tokenizer");
          sequences.push_back(std::move(*ids));
        }
      } else {
        sequences.push_back(BigramToy::generate_corpus(
            tok->vocab_size(), spec.value("seed", std::uint64_t{0}),
            spec.value("corpus_length", std::size_t{2000}), spec.value("branching", std::size_t{3})));
      }
      const auto counts = BigramToy::count_sequences(tok->vocab_size(), sequences);
      model = std::make_shared<BigramToy>(tok, counts, spec.value("smoothing", 0.1));
    } else {
      throw MalformedSpec("unknown toy model kind \"" + kind + "\" (uniform, table, bigram)");
    }
    std::optional<std::size_t> max_ctx;
    if (spec.contains("max_context_tokens")) max_ctx = spec["max_context_tokens"].get<std::size_t>();
    return std::make_shared<ToyBackend>(name, tok, model, PromptTemplate{}, max_ctx);
  } catch (const nlohmann::json::exception& e) {
    throw MalformedSpec(std::string("toy model spec: ") + e.what());
  }
}

inline std::shared_ptr<ToyBackend> load_toy_model(const std::string& path) {
  nlohmann::json spec;
  try {
    spec = nlohmann::json::parse(text::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedSpec("toy model file " + path + ": " + e.what());
  }
  return make_toy_model(spec, std::filesystem::path(path).parent_path());
}

}  // namespace capt
