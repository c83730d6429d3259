#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "capt/errors.hpp"

namespace capt::text {

inline constexpr char32_t kInvalidCodepoint = 0xFFFFFFFF;

// Decodes one UTF-8 sequence starting at `pos`, advancing `pos`. Malformed
// input yields kInvalidCodepoint and consumes exactly one byte.
inline char32_t next_codepoint(std::string_view s, std::size_t& pos) {
  const auto b0 = static_cast<unsigned char>(s[pos]);
  if (b0 < 0x80) {
    ++pos;
    return b0;
  }
  int extra = 0;
  char32_t cp = 0;
  char32_t min = 0;
  if ((b0 & 0xE0) == 0xC0) {
    extra = 1, cp = b0 & 0x1F, min = 0x80;
  } else if ((b0 & 0xF0) == 0xE0) {
    extra = 2, cp = b0 & 0x0F, min = 0x800;
  } else if ((b0 & 0xF8) == 0xF0) {
    extra = 3, cp = b0 & 0x07, min = 0x10000;
  } else {
    ++pos;
    return kInvalidCodepoint;
  }
  if (pos + static_cast<std::size_t>(extra) >= s.size()) {
    ++pos;
    return kInvalidCodepoint;
  }
  for (int i = 1; i <= extra; ++i) {
    const auto b = static_cast<unsigned char>(s[pos + i]);
    if ((b & 0xC0) != 0x80) {
      ++pos;
      return kInvalidCodepoint;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  if (cp < min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
    ++pos;
    return kInvalidCodepoint;
  }
  pos += static_cast<std::size_t>(extra) + 1;
  return cp;
}

// Unicode White_Space property.
constexpr bool is_whitespace(char32_t cp) {
  return (cp >= 0x09 && cp <= 0x0D) || cp == 0x20 || cp == 0x85 || cp == 0xA0 ||
         cp == 0x1680 || (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 ||
         cp == 0x2029 || cp == 0x202F || cp == 0x205F || cp == 0x3000;
}

// True for the empty string and for strings made only of whitespace.
inline bool all_whitespace(std::string_view s) {
  std::size_t pos = 0;
  while (pos < s.size()) {
    if (!is_whitespace(next_codepoint(s, pos))) return false;
  }
  return true;
}

inline bool has_non_whitespace(std::string_view s) { return !all_whitespace(s); }

inline bool valid_utf8(std::string_view s) {
  for (std::size_t pos = 0; pos < s.size();) {
    if (next_codepoint(s, pos) == kInvalidCodepoint) return false;
  }
  return true;
}

inline std::size_t codepoint_count(std::string_view s) {
  std::size_t n = 0;
  std::size_t pos = 0;
  while (pos < s.size()) {
    next_codepoint(s, pos);
    ++n;
  }
  return n;
}

inline std::string strip_whitespace(std::string_view s) {
  std::size_t begin = 0;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const std::size_t start = pos;
    if (!is_whitespace(next_codepoint(s, pos))) {
      begin = start;
      break;
    }
    begin = pos;
  }
  std::size_t end = begin;
  pos = begin;
  while (pos < s.size()) {
    if (!is_whitespace(next_codepoint(s, pos))) end = pos;
  }
  return std::string(s.substr(begin, end - begin));
}

inline std::string html_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

// FNV-1a, 64 bit. Used for dataset fingerprints in run manifests.
inline std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
    v >>= 4;
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write file: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

}  // namespace capt::text
