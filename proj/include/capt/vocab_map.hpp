#pragma once

#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <unordered_map>
#include <utility>

#include "capt/tokenizer.hpp"
#include "capt/text.hpp"

namespace capt {

// Projects `id` from `src` into `dst`: decode to text, re-encode with `dst`,
// and take the first token whose decoded form is not entirely whitespace.
// Absent when `dst` cannot encode the text or every token is whitespace.
inline std::optional<TokenId> retokenize_first_non_space(const Tokenizer& src, const Tokenizer& dst,
                                                         TokenId id) {
  src.check(id);
  const std::string decoded = src.token_text(id);
  const auto encoded = dst.try_encode(decoded);
  if (!encoded) return std::nullopt;
  for (TokenId t : *encoded) {
    if (text::has_non_whitespace(dst.token_text(t))) return t;
  }
  return std::nullopt;
}

// Lazily populated mapping f : V_src -> V_dst. Safe for concurrent callers;
// entries are pure functions of the token so racing writers agree.
class CrossVocabMap {
 public:
  CrossVocabMap(TokenizerPtr src, TokenizerPtr dst, bool identity = false)
      : src_(std::move(src)), dst_(std::move(dst)), identity_(identity) {
    if (!src_ || !dst_) throw InvalidArgument("CrossVocabMap needs two tokenizers");
  }

  // f(i) = i. Used when both sides share one vocabulary, where no
  // projection is needed.
  static CrossVocabMap identity(TokenizerPtr tok) { return CrossVocabMap(tok, tok, true); }

  CrossVocabMap(const CrossVocabMap& other)
      : src_(other.src_), dst_(other.dst_), identity_(other.identity_) {
    std::shared_lock lock(other.mutex_);
    cache_ = other.cache_;
  }
  CrossVocabMap& operator=(const CrossVocabMap&) = delete;

  std::optional<TokenId> map_token(TokenId id) const {
    src_->check(id);
    if (identity_) return id;
    {
      std::shared_lock lock(mutex_);
      if (auto it = cache_.find(id); it != cache_.end()) return it->second;
    }
    auto mapped = retokenize_first_non_space(*src_, *dst_, id);
    std::unique_lock lock(mutex_);
    return cache_.try_emplace(id, mapped).first->second;
  }

  const TokenizerPtr& src() const { return src_; }
  const TokenizerPtr& dst() const { return dst_; }
  bool is_identity() const { return identity_; }

  std::size_t cached_entries() const {
    std::shared_lock lock(mutex_);
    return cache_.size();
  }

 private:
  TokenizerPtr src_;
  TokenizerPtr dst_;
  bool identity_ = false;
  mutable std::shared_mutex mutex_;
  mutable std::unordered_map<TokenId, std::optional<TokenId>> cache_;
};

inline CrossVocabMap build_map(TokenizerPtr src, TokenizerPtr dst) {
  return CrossVocabMap(std::move(src), std::move(dst));
}

}  // namespace capt
