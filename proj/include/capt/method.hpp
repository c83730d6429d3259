#pragma once

#include <string>
#include <string_view>

#include "capt/errors.hpp"

namespace capt {

enum class Method { capt, proxy_tuning, unite, single };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::capt: return "capt";
    case Method::proxy_tuning: return "proxy_tuning";
    case Method::unite: return "unite";
    case Method::single: return "single";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "capt") return Method::capt;
  if (s == "proxy_tuning") return Method::proxy_tuning;
  if (s == "unite") return Method::unite;
  if (s == "single") return Method::single;
  throw ConfigError("unknown method \"" + std::string(s) + "\" (capt, proxy_tuning, unite, single)");
}

}  // namespace capt
