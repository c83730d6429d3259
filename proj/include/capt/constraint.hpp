#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "capt/errors.hpp"
#include "capt/method.hpp"
#include "capt/text.hpp"
#include "capt/tokenizer.hpp"

namespace capt {

// Output schema for classification runs:
//   {"reason": "<at most reason_max_chars characters>", "label": "<label>"}
// or with arity array: "label": ["<label>", ...] (non-empty, no duplicates).
struct JsonSchemaConstraint {
  enum class Arity { single, array };

  std::vector<std::string> label_set;
  Arity label_arity = Arity::single;
  std::size_t reason_max_chars = 600;

  void validate() const {
    if (label_set.empty()) throw MalformedSpec("constraint needs at least one label");
    for (std::size_t i = 0; i < label_set.size(); ++i) {
      const auto& l = label_set[i];
      if (l.empty()) throw MalformedSpec("labels must be non-empty");
      for (unsigned char c : l) {
        if (c == '"' || c == '\\' || c < 0x20) {
          throw MalformedSpec("label \"" + l + "\" contains a character that needs JSON escaping");
        }
      }
      if (std::find(label_set.begin(), label_set.begin() + static_cast<std::ptrdiff_t>(i), l) !=
          label_set.begin() + static_cast<std::ptrdiff_t>(i)) {
        throw MalformedSpec("duplicate label \"" + l + "\"");
      }
    }
  }

  // {"labels": [...], "arity": "single"|"array", "reason_max_chars": 600}
  static JsonSchemaConstraint from_json(const nlohmann::json& j) {
    JsonSchemaConstraint c;
    try {
      for (const auto& [key, _] : j.items()) {
        if (key != "labels" && key != "arity" && key != "reason_max_chars") {
          throw MalformedSpec("unknown constraint key: " + key);
        }
      }
      c.label_set = j.at("labels").get<std::vector<std::string>>();
      const auto arity = j.value("arity", std::string("single"));
      if (arity == "single") {
        c.label_arity = Arity::single;
      } else if (arity == "array") {
        c.label_arity = Arity::array;
      } else {
        throw MalformedSpec("arity must be \"single\" or \"array\"");
      }
      const auto max_chars = j.value("reason_max_chars", std::int64_t{600});
      if (max_chars < 0) throw MalformedSpec("reason_max_chars must be >= 0");
      c.reason_max_chars = static_cast<std::size_t>(max_chars);
    } catch (const nlohmann::json::exception& e) {
      throw MalformedSpec(std::string("constraint spec: ") + e.what());
    }
    c.validate();
    return c;
  }

  nlohmann::json to_json() const {
    return {{"labels", label_set},
            {"arity", label_arity == Arity::single ? "single" : "array"},
            {"reason_max_chars", reason_max_chars}};
  }
};

enum class ApplyPoint { mask_leader_before_topk, mask_union_candidates };

// Where the constraint mask enters each decoding method. CAPT and the
// single-model baseline generate only the leader's tokens, so the leader's
// distribution is masked before top-k; the combining baselines mask the
// candidates they combine.
constexpr ApplyPoint apply_point(Method m) {
  switch (m) {
    case Method::capt:
    case Method::single:
      return ApplyPoint::mask_leader_before_topk;
    case Method::proxy_tuning:
    case Method::unite:
      return ApplyPoint::mask_union_candidates;
  }
  return ApplyPoint::mask_leader_before_topk;
}

struct TokenMask {
  std::vector<bool> bits;
  std::size_t count = 0;

  static TokenMask none(std::size_t vocab_size) { return TokenMask{std::vector<bool>(vocab_size, false), 0}; }

  bool contains(TokenId id) const {
    return id.value >= 0 && static_cast<std::size_t>(id.value) < bits.size() &&
           bits[static_cast<std::size_t>(id.value)];
  }

  void allow(TokenId id) {
    auto ref = bits.at(static_cast<std::size_t>(id.value));
    if (!ref) {
      ref = true;
      ++count;
    }
  }

  bool empty() const { return count == 0; }

  std::vector<TokenId> tokens() const {
    std::vector<TokenId> out;
    out.reserve(count);
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (bits[i]) out.push_back(TokenId{static_cast<std::int32_t>(i)});
    }
    return out;
  }
};

enum class Phase { pre_object, in_reason, between, in_label, post_object, done };

namespace detail {

// Structural literals. '\x01' marks a slot for one optional space.
inline constexpr char kOptionalSpace = '\x01';
inline constexpr std::string_view kPreObject = "{\x01\"reason\"\x01:\x01\"";
inline constexpr std::string_view kBetween = "\x01,\x01\"label\"\x01:\x01";
inline constexpr std::string_view kPostObject = "\x01}";

enum class StringMode : std::uint8_t { normal, escape, hex, utf8 };
enum class LabelStep : std::uint8_t { value_start, array_open, in_string, after_item, after_comma };

// Byte-level automaton position. Every accepted byte strictly advances it,
// so the reachable state graph is acyclic.
struct Cursor {
  Phase phase = Phase::pre_object;
  std::uint16_t literal_pos = 0;
  std::uint32_t chars = 0;
  StringMode mode = StringMode::normal;
  std::uint8_t pending = 0;
  std::uint8_t lo = 0x80;
  std::uint8_t hi = 0xBF;
  bool surrogate_lead = false;
  LabelStep label_step = LabelStep::value_start;
  bool space_used = false;
  std::string label_prefix;
  std::vector<std::uint16_t> used;  // sorted label indices already emitted (array arity)

  std::string key() const {
    std::string k;
    k.reserve(16 + label_prefix.size() + 2 * used.size());
    auto put = [&k](std::uint32_t v, int bytes) {
      for (int i = 0; i < bytes; ++i) k.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    };
    put(static_cast<std::uint32_t>(phase), 1);
    put(literal_pos, 2);
    put(chars, 4);
    put(static_cast<std::uint32_t>(mode), 1);
    put(pending, 1);
    put(lo, 1);
    put(hi, 1);
    put(surrogate_lead ? 1 : 0, 1);
    put(static_cast<std::uint32_t>(label_step), 1);
    put(space_used ? 1 : 0, 1);
    put(static_cast<std::uint32_t>(label_prefix.size()), 2);
    k += label_prefix;
    for (auto u : used) put(u, 2);
    return k;
  }
};

inline bool is_hex(unsigned char b) {
  return (b >= '0' && b <= '9') || (b >= 'a' && b <= 'f') || (b >= 'A' && b <= 'F');
}

inline int hex_value(unsigned char b) {
  if (b >= '0' && b <= '9') return b - '0';
  if (b >= 'a' && b <= 'f') return b - 'a' + 10;
  return b - 'A' + 10;
}

}  // namespace detail

// Immutable snapshot of constrained generation: the automaton position plus
// the text accepted so far.
class ConstraintState {
 public:
  ConstraintState() = default;

  Phase phase() const { return cursor_.phase; }
  bool done() const { return cursor_.phase == Phase::done; }
  std::size_t chars_consumed() const { return cursor_.chars; }
  const std::string& text() const { return text_; }

  // (label_index, matched_prefix_len) for every label still consistent with
  // the partially emitted label string.
  std::vector<std::pair<std::size_t, std::size_t>> label_progress(const JsonSchemaConstraint& c) const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (cursor_.phase != Phase::in_label || cursor_.label_step != detail::LabelStep::in_string) return out;
    for (std::size_t i = 0; i < c.label_set.size(); ++i) {
      if (std::binary_search(cursor_.used.begin(), cursor_.used.end(), static_cast<std::uint16_t>(i))) continue;
      if (c.label_set[i].starts_with(cursor_.label_prefix)) out.emplace_back(i, cursor_.label_prefix.size());
    }
    return out;
  }

  const detail::Cursor& cursor() const { return cursor_; }

 private:
  friend class ConstraintMatcher;
  ConstraintState(detail::Cursor c, std::string t) : cursor_(std::move(c)), text_(std::move(t)) {}

  detail::Cursor cursor_;
  std::string text_;
};

// Incremental matcher for one (constraint, tokenizer) pair. A token is
// allowed when the text it appends keeps the output a prefix of a
// schema-valid object AND the vocabulary can still finish that object.
// Tokens that decode to "" never make progress and are never allowed.
class ConstraintMatcher {
 public:
  ConstraintMatcher(JsonSchemaConstraint constraint, TokenizerPtr tokenizer)
      : constraint_(std::move(constraint)), tokenizer_(std::move(tokenizer)) {
    constraint_.validate();
    if (constraint_.label_set.size() > 0xFFFF) throw MalformedSpec("too many labels");
    const std::size_t v = tokenizer_->vocab_size();
    token_bytes_.resize(v);
    for (std::size_t i = 0; i < v; ++i) token_bytes_[i] = tokenizer_->token_text(TokenId{static_cast<std::int32_t>(i)});
    // Search order for completion: tokens carrying JSON punctuation first,
    // since they are what moves the automaton towards a closed object.
    for (std::size_t i = 0; i < v; ++i) {
      if (!token_bytes_[i].empty() &&
          token_bytes_[i].find_first_of("\"{}[],:") != std::string::npos) {
        search_order_.push_back(static_cast<std::int32_t>(i));
      }
    }
    for (std::size_t i = 0; i < v; ++i) {
      if (!token_bytes_[i].empty() &&
          token_bytes_[i].find_first_of("\"{}[],:") == std::string::npos) {
        search_order_.push_back(static_cast<std::int32_t>(i));
      }
    }
    std::lock_guard lock(mutex_);
    if (!completable_locked(detail::Cursor{})) {
      throw Uncompletable("vocabulary of '" + tokenizer_->name() +
                          "' cannot express any schema-valid object");
    }
  }

  const JsonSchemaConstraint& constraint() const { return constraint_; }
  const TokenizerPtr& tokenizer() const { return tokenizer_; }

  ConstraintState initial() const { return ConstraintState(); }

  TokenMask allowed_tokens(const ConstraintState& s) const {
    if (s.done()) throw InvalidArgument("allowed_tokens called on a finished constraint state");
    TokenMask mask = TokenMask::none(token_bytes_.size());
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < token_bytes_.size(); ++i) {
      if (token_bytes_[i].empty()) continue;
      auto next = feed(s.cursor_, token_bytes_[i]);
      if (next && completable_locked(*next)) mask.allow(TokenId{static_cast<std::int32_t>(i)});
    }
    if (mask.empty()) {
      throw Uncompletable("no token of '" + tokenizer_->name() + "' can continue the constrained output");
    }
    return mask;
  }

  ConstraintState advance(const ConstraintState& s, TokenId chosen) const {
    if (!tokenizer_->valid(chosen)) throw IllegalAdvance("token id out of range");
    const auto& bytes = token_bytes_[static_cast<std::size_t>(chosen.value)];
    if (s.done() || bytes.empty()) throw IllegalAdvance("token " + std::to_string(chosen.value) + " is not allowed here");
    auto next = feed(s.cursor_, bytes);
    bool ok = false;
    if (next) {
      std::lock_guard lock(mutex_);
      ok = completable_locked(*next);
    }
    if (!ok) throw IllegalAdvance("token " + std::to_string(chosen.value) + " is not allowed here");
    return ConstraintState(std::move(*next), s.text_ + bytes);
  }

  // Language-level check, independent of the vocabulary: is `text` a prefix
  // of some schema-valid object?
  bool is_viable_prefix(std::string_view text) const { return feed(detail::Cursor{}, text).has_value(); }

  bool is_complete(std::string_view text) const {
    auto c = feed(detail::Cursor{}, text);
    return c && c->phase == Phase::done;
  }

  std::size_t memo_size() const {
    std::lock_guard lock(mutex_);
    return memo_.size();
  }

 private:
  std::optional<detail::Cursor> feed(detail::Cursor c, std::string_view bytes) const {
    for (char ch : bytes) {
      if (!step(c, static_cast<unsigned char>(ch))) return std::nullopt;
    }
    return c;
  }

  static std::string_view literal_for(Phase p) {
    switch (p) {
      case Phase::pre_object: return detail::kPreObject;
      case Phase::between: return detail::kBetween;
      case Phase::post_object: return detail::kPostObject;
      default: return {};
    }
  }

  void finish_literal(detail::Cursor& c) const {
    switch (c.phase) {
      case Phase::pre_object:
        c.phase = Phase::in_reason;
        c.chars = 0;
        c.mode = detail::StringMode::normal;
        break;
      case Phase::between:
        c.phase = Phase::in_label;
        c.label_step = detail::LabelStep::value_start;
        c.space_used = false;
        break;
      case Phase::post_object:
        c.phase = Phase::done;
        break;
      default:
        break;
    }
    c.literal_pos = 0;
  }

  bool step(detail::Cursor& c, unsigned char b) const {
    switch (c.phase) {
      case Phase::pre_object:
      case Phase::between:
      case Phase::post_object:
        return step_literal(c, b);
      case Phase::in_reason:
        return step_reason(c, b);
      case Phase::in_label:
        return step_label(c, b);
      case Phase::done:
        return false;
    }
    return false;
  }

  bool step_literal(detail::Cursor& c, unsigned char b) const {
    const auto lit = literal_for(c.phase);
    while (true) {
      const char want = lit[c.literal_pos];
      if (want == detail::kOptionalSpace) {
        ++c.literal_pos;
        if (b == ' ') {
          if (c.literal_pos == lit.size()) finish_literal(c);
          return true;
        }
        if (c.literal_pos == lit.size()) {
          finish_literal(c);
          return step(c, b);
        }
        continue;
      }
      if (static_cast<unsigned char>(want) != b) return false;
      ++c.literal_pos;
      if (c.literal_pos == lit.size()) finish_literal(c);
      return true;
    }
  }

  bool step_reason(detail::Cursor& c, unsigned char b) const {
    using detail::StringMode;
    const auto begin_char = [&]() {
      if (c.chars >= constraint_.reason_max_chars) return false;
      ++c.chars;
      return true;
    };
    switch (c.mode) {
      case StringMode::normal:
        if (b == '"') {
          c.phase = Phase::between;
          c.literal_pos = 0;
          return true;
        }
        if (b == '\\') {
          if (!begin_char()) return false;
          c.mode = StringMode::escape;
          return true;
        }
        if (b < 0x20) return false;
        if (b < 0x80) return begin_char();
        {
          std::uint8_t pending = 0;
          std::uint8_t lo = 0x80;
          std::uint8_t hi = 0xBF;
          if (b >= 0xC2 && b <= 0xDF) {
            pending = 1;
          } else if (b == 0xE0) {
            pending = 2, lo = 0xA0;
          } else if ((b >= 0xE1 && b <= 0xEC) || b == 0xEE || b == 0xEF) {
            pending = 2;
          } else if (b == 0xED) {
            pending = 2, hi = 0x9F;
          } else if (b == 0xF0) {
            pending = 3, lo = 0x90;
          } else if (b >= 0xF1 && b <= 0xF3) {
            pending = 3;
          } else if (b == 0xF4) {
            pending = 3, hi = 0x8F;
          } else {
            return false;
          }
          if (!begin_char()) return false;
          c.mode = StringMode::utf8;
          c.pending = pending;
          c.lo = lo;
          c.hi = hi;
          return true;
        }
      case StringMode::utf8:
        if (b < c.lo || b > c.hi) return false;
        c.lo = 0x80;
        c.hi = 0xBF;
        if (--c.pending == 0) c.mode = StringMode::normal;
        return true;
      case StringMode::escape:
        if (b == 'u') {
          c.mode = StringMode::hex;
          c.pending = 4;
          c.surrogate_lead = false;
          return true;
        }
        if (b == '"' || b == '\\' || b == '/' || b == 'b' || b == 'f' || b == 'n' || b == 'r' || b == 't') {
          c.mode = StringMode::normal;
          return true;
        }
        return false;
      case StringMode::hex:
        if (!detail::is_hex(b)) return false;
        // \uD800-\uDFFF are surrogate code units; only BMP scalars may be escaped.
        if (c.pending == 4) c.surrogate_lead = (b == 'd' || b == 'D');
        if (c.pending == 3 && c.surrogate_lead && detail::hex_value(b) >= 8) return false;
        if (--c.pending == 0) c.mode = StringMode::normal;
        return true;
    }
    return false;
  }

  bool label_available(const detail::Cursor& c, std::size_t i) const {
    return !std::binary_search(c.used.begin(), c.used.end(), static_cast<std::uint16_t>(i));
  }

  bool step_label(detail::Cursor& c, unsigned char b) const {
    using detail::LabelStep;
    const bool array = constraint_.label_arity == JsonSchemaConstraint::Arity::array;
    switch (c.label_step) {
      case LabelStep::value_start:
        if (!array && b == '"') {
          c.label_step = LabelStep::in_string;
          c.label_prefix.clear();
          return true;
        }
        if (array && b == '[') {
          c.label_step = LabelStep::array_open;
          c.space_used = false;
          return true;
        }
        return false;
      case LabelStep::array_open:
      case LabelStep::after_comma:
        if (b == ' ' && !c.space_used) {
          c.space_used = true;
          return true;
        }
        if (b == '"') {
          c.label_step = LabelStep::in_string;
          c.label_prefix.clear();
          return true;
        }
        return false;
      case LabelStep::in_string: {
        if (b == '"') {
          for (std::size_t i = 0; i < constraint_.label_set.size(); ++i) {
            if (constraint_.label_set[i] == c.label_prefix && label_available(c, i)) {
              c.label_prefix.clear();
              if (!array) {
                c.phase = Phase::post_object;
                c.literal_pos = 0;
              } else {
                c.used.insert(std::upper_bound(c.used.begin(), c.used.end(), static_cast<std::uint16_t>(i)),
                              static_cast<std::uint16_t>(i));
                c.label_step = LabelStep::after_item;
                c.space_used = false;
              }
              return true;
            }
          }
          return false;
        }
        c.label_prefix.push_back(static_cast<char>(b));
        for (std::size_t i = 0; i < constraint_.label_set.size(); ++i) {
          if (label_available(c, i) && constraint_.label_set[i].starts_with(c.label_prefix)) return true;
        }
        return false;
      }
      case LabelStep::after_item:
        if (b == ' ' && !c.space_used) {
          c.space_used = true;
          return true;
        }
        if (b == ',') {
          if (c.used.size() >= constraint_.label_set.size()) return false;
          c.label_step = LabelStep::after_comma;
          c.space_used = false;
          return true;
        }
        if (b == ']') {
          c.phase = Phase::post_object;
          c.literal_pos = 0;
          return true;
        }
        return false;
    }
    return false;
  }

  // Can some token sequence drive `c` to done? Memoized; the state graph is
  // acyclic so plain depth-first search terminates.
  bool completable_locked(const detail::Cursor& c) const {
    if (c.phase == Phase::done) return true;
    auto key = c.key();
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    bool result = false;
    for (std::int32_t id : search_order_) {
      auto next = feed(c, token_bytes_[static_cast<std::size_t>(id)]);
      if (next && completable_locked(*next)) {
        result = true;
        break;
      }
    }
    memo_.emplace(std::move(key), result);
    return result;
  }

  JsonSchemaConstraint constraint_;
  TokenizerPtr tokenizer_;
  std::vector<std::string> token_bytes_;
  std::vector<std::int32_t> search_order_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::string, bool> memo_;
};

// One-shot conveniences; long-running callers should keep a ConstraintMatcher
// so the completability memo is reused across steps.
inline TokenMask allowed_tokens(const ConstraintState& s, const JsonSchemaConstraint& c, TokenizerPtr tok) {
  return ConstraintMatcher(c, std::move(tok)).allowed_tokens(s);
}

inline ConstraintState advance(const ConstraintState& s, const JsonSchemaConstraint& c, TokenizerPtr tok,
                               TokenId chosen) {
  return ConstraintMatcher(c, std::move(tok)).advance(s, chosen);
}

}  // namespace capt
