#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "capt/errors.hpp"
#include "capt/text.hpp"

namespace capt {

// Index into one tokenizer's vocabulary. Only meaningful relative to the
// tokenizer that produced it.
struct TokenId {
  std::int32_t value = 0;

  friend constexpr auto operator<=>(TokenId, TokenId) = default;
};

}  // namespace capt

template <>
struct std::hash<capt::TokenId> {
  std::size_t operator()(capt::TokenId t) const noexcept {
    return std::hash<std::int32_t>{}(t.value);
  }
};

namespace capt {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual const std::string& name() const = 0;
  virtual std::size_t vocab_size() const = 0;

  // Returns nullopt when the text contains something the vocabulary cannot
  // express.
  virtual std::optional<std::vector<TokenId>> try_encode(std::string_view text) const = 0;

  // Raw decoded bytes of one token. Special tokens decode to "".
  virtual std::string token_text(TokenId id) const = 0;

  // Human-readable form used in vocabulary listings ("<0xC3>" for byte tokens).
  virtual std::string display_text(TokenId id) const { return token_text(id); }

  virtual std::optional<TokenId> eos() const { return std::nullopt; }

  bool valid(TokenId id) const {
    return id.value >= 0 && static_cast<std::size_t>(id.value) < vocab_size();
  }

  void check(TokenId id) const {
    if (!valid(id)) {
      throw InvalidToken("token " + std::to_string(id.value) + " out of range for tokenizer '" +
                         name() + "' (vocab_size " + std::to_string(vocab_size()) + ")");
    }
  }

  std::vector<TokenId> encode(std::string_view text) const {
    auto ids = try_encode(text);
    if (!ids) throw Unencodable("tokenizer '" + name() + "' cannot encode text");
    return std::move(*ids);
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += token_text(id);
    return out;
  }
};

using TokenizerPtr = std::shared_ptr<const Tokenizer>;

// Greedy longest-match tokenizer over an explicit piece list. Pieces are plain
// strings, single raw bytes (byte fallback), or special tokens that never come
// out of encode().
class GreedyTokenizer final : public Tokenizer {
 public:
  enum class PieceKind { normal, byte, special };

  struct Piece {
    std::string text;  // raw bytes for normal/byte pieces, marker for special
    PieceKind kind = PieceKind::normal;
  };

  GreedyTokenizer(std::string name, std::vector<Piece> pieces, bool allow_duplicates = false)
      : name_(std::move(name)), pieces_(std::move(pieces)) {
    nodes_.emplace_back();
    byte_token_.fill(-1);
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      const auto& p = pieces_[i];
      const auto id = static_cast<std::int32_t>(i);
      switch (p.kind) {
        case PieceKind::normal:
          if (p.text.empty()) throw MalformedSpec("tokenizer '" + name_ + "': empty vocab entry");
          insert(p.text, id, allow_duplicates);
          break;
        case PieceKind::byte: {
          if (p.text.size() != 1) throw MalformedSpec("byte piece must hold exactly one byte");
          auto& slot = byte_token_[static_cast<unsigned char>(p.text[0])];
          if (slot < 0) slot = id;
          break;
        }
        case PieceKind::special:
          if (!eos_) eos_ = TokenId{id};
          break;
      }
    }
  }

  // Toy tokenizer definition: {"vocab": [...], "byte_fallback": bool,
  // "name"?: str, "eos"?: str}. Byte tokens follow the vocab, the optional
  // end-of-sequence token comes last.
  static std::shared_ptr<const GreedyTokenizer> from_json(const nlohmann::json& j,
                                                          std::string default_name = "toy") {
    if (!j.is_object()) throw MalformedSpec("tokenizer definition must be a JSON object");
    for (const auto& [key, _] : j.items()) {
      if (key != "vocab" && key != "byte_fallback" && key != "name" && key != "eos") {
        throw MalformedSpec("unknown tokenizer key: " + key);
      }
    }
    if (!j.contains("vocab") || !j["vocab"].is_array()) {
      throw MalformedSpec("tokenizer definition needs a \"vocab\" array");
    }
    std::vector<Piece> pieces;
    for (const auto& v : j["vocab"]) {
      if (!v.is_string()) throw MalformedSpec("vocab entries must be strings");
      pieces.push_back({v.get<std::string>(), PieceKind::normal});
    }
    if (j.value("byte_fallback", false)) {
      for (int b = 0; b < 256; ++b) pieces.push_back({std::string(1, static_cast<char>(b)), PieceKind::byte});
    }
    if (j.contains("eos")) pieces.push_back({j["eos"].get<std::string>(), PieceKind::special});
    return std::make_shared<const GreedyTokenizer>(j.value("name", std::move(default_name)),
                                                   std::move(pieces));
  }

  // Vocabulary as listed by a remote model server. Entries of the form
  // "<0xNN>" are byte tokens.
  static std::shared_ptr<const GreedyTokenizer> from_listing(std::string name,
                                                             const std::vector<std::string>& vocab,
                                                             std::optional<std::int32_t> eos_id) {
    std::vector<Piece> pieces;
    pieces.reserve(vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      const auto& v = vocab[i];
      if (eos_id && static_cast<std::size_t>(*eos_id) == i) {
        pieces.push_back({v, PieceKind::special});
      } else if (auto byte = parse_byte_marker(v)) {
        pieces.push_back({std::string(1, static_cast<char>(*byte)), PieceKind::byte});
      } else if (v.empty()) {
        pieces.push_back({v, PieceKind::special});
      } else {
        pieces.push_back({v, PieceKind::normal});
      }
    }
    return std::make_shared<const GreedyTokenizer>(std::move(name), std::move(pieces), true);
  }

  const std::string& name() const override { return name_; }
  std::size_t vocab_size() const override { return pieces_.size(); }
  std::optional<TokenId> eos() const override { return eos_; }

  std::optional<std::vector<TokenId>> try_encode(std::string_view text) const override {
    std::vector<TokenId> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::int32_t best = -1;
      std::size_t best_len = 0;
      std::int32_t node = 0;
      for (std::size_t i = pos; i < text.size(); ++i) {
        const auto& children = nodes_[static_cast<std::size_t>(node)].children;
        auto it = children.find(static_cast<unsigned char>(text[i]));
        if (it == children.end()) break;
        node = it->second;
        if (nodes_[static_cast<std::size_t>(node)].token >= 0) {
          best = nodes_[static_cast<std::size_t>(node)].token;
          best_len = i - pos + 1;
        }
      }
      if (best < 0) {
        best = byte_token_[static_cast<unsigned char>(text[pos])];
        best_len = 1;
        if (best < 0) return std::nullopt;
      }
      out.push_back(TokenId{best});
      pos += best_len;
    }
    return out;
  }

  std::string token_text(TokenId id) const override {
    check(id);
    const auto& p = pieces_[static_cast<std::size_t>(id.value)];
    return p.kind == PieceKind::special ? std::string() : p.text;
  }

  std::string display_text(TokenId id) const override {
    check(id);
    const auto& p = pieces_[static_cast<std::size_t>(id.value)];
    if (p.kind == PieceKind::byte) return byte_marker(static_cast<unsigned char>(p.text[0]));
    return p.text;
  }

  PieceKind kind(TokenId id) const {
    check(id);
    return pieces_[static_cast<std::size_t>(id.value)].kind;
  }

  static std::string byte_marker(unsigned char b) {
    static constexpr char kHex[] = "0123456789ABCDEF";
    return std::string("<0x") + kHex[b >> 4] + kHex[b & 0xF] + ">";
  }

  static std::optional<unsigned char> parse_byte_marker(std::string_view s) {
    if (s.size() != 6 || s.substr(0, 3) != "<0x" || s[5] != '>') return std::nullopt;
    auto hex = [](char c) -> int {
      if (c >= '0' && c <= '9') return c - '0';
      if (c >= 'A' && c <= 'F') return c - 'A' + 10;
      if (c >= 'a' && c <= 'f') return c - 'a' + 10;
      return -1;
    };
    const int hi = hex(s[3]);
    const int lo = hex(s[4]);
    if (hi < 0 || lo < 0) return std::nullopt;
    return static_cast<unsigned char>(hi * 16 + lo);
  }

 private:
  struct Node {
    std::unordered_map<unsigned char, std::int32_t> children;
    std::int32_t token = -1;
  };

  void insert(const std::string& s, std::int32_t id, bool allow_duplicates) {
    std::int32_t node = 0;
    for (char c : s) {
      const auto key = static_cast<unsigned char>(c);
      auto& children = nodes_[static_cast<std::size_t>(node)].children;
      auto it = children.find(key);
      if (it == children.end()) {
        const auto next = static_cast<std::int32_t>(nodes_.size());
        nodes_[static_cast<std::size_t>(node)].children.emplace(key, next);
        nodes_.emplace_back();
        node = next;
      } else {
        node = it->second;
      }
    }
    auto& slot = nodes_[static_cast<std::size_t>(node)].token;
    if (slot >= 0) {
      if (!allow_duplicates) throw MalformedSpec("tokenizer '" + name_ + "': duplicate vocab entry \"" + s + "\"");
      return;
    }
    slot = id;
  }

  std::string name_;
  std::vector<Piece> pieces_;
  std::vector<Node> nodes_;
  std::array<std::int32_t, 256> byte_token_{};
  std::optional<TokenId> eos_;
};

inline std::shared_ptr<const GreedyTokenizer> load_tokenizer_file(const std::string& path) {
  try {
    return GreedyTokenizer::from_json(nlohmann::json::parse(text::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw MalformedSpec("tokenizer file " + path + ": " + e.what());
  }
}

// Two handles describe the same vocabulary when every id has the same listed
// form and the same end-of-sequence token.
inline bool same_vocabulary(const Tokenizer& a, const Tokenizer& b) {
  if (&a == &b) return true;
  if (a.vocab_size() != b.vocab_size() || a.eos() != b.eos()) return false;
  for (std::size_t i = 0; i < a.vocab_size(); ++i) {
    const TokenId id{static_cast<std::int32_t>(i)};
    if (a.display_text(id) != b.display_text(id) || a.token_text(id) != b.token_text(id)) return false;
  }
  return true;
}

}  // namespace capt
