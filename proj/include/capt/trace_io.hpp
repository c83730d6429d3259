#pragma once

#include <sstream>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "capt/ensemble.hpp"
#include "capt/errors.hpp"
#include "capt/method.hpp"

// Step-trace JSONL. Line 1 is a header
//   {"schema": "capt.step_trace", "version": 1, "method": ..., "finish_reason": ...,
//    "text": ..., "num_steps": N}
// followed by one StepRecord object per line.
namespace capt {

inline constexpr std::string_view kTraceSchema = "capt.step_trace";
inline constexpr int kTraceVersion = 1;

// Token texts can hold partial UTF-8 (byte tokens); those bytes are replaced
// with U+FFFD on output. Token ids stay authoritative.
inline std::string dump_json(const nlohmann::json& j, int indent = -1) {
  return j.dump(indent, ' ', false, nlohmann::json::error_handler_t::replace);
}

namespace detail {

template <class T>
nlohmann::json optional_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const CandidateScore& c) {
  j = nlohmann::json{{"token", c.token.value},
                     {"text", c.text},
                     {"logp_new", c.logp_new},
                     {"mapped", c.mapped ? nlohmann::json(c.mapped->value) : nlohmann::json(nullptr)},
                     {"logp_clin", detail::optional_json(c.logp_clin)},
                     {"logp_base", detail::optional_json(c.logp_base)},
                     {"offset", c.offset},
                     {"total", c.total}};
}

inline void from_json(const nlohmann::json& j, CandidateScore& c) {
  c.token = TokenId{j.at("token").get<std::int32_t>()};
  c.text = j.at("text").get<std::string>();
  c.logp_new = j.at("logp_new").get<double>();
  c.mapped = j.at("mapped").is_null() ? std::nullopt : std::optional<TokenId>(TokenId{j.at("mapped").get<std::int32_t>()});
  c.logp_clin = j.at("logp_clin").is_null() ? std::nullopt : std::optional<double>(j.at("logp_clin").get<double>());
  c.logp_base = j.at("logp_base").is_null() ? std::nullopt : std::optional<double>(j.at("logp_base").get<double>());
  c.offset = j.at("offset").get<double>();
  c.total = j.at("total").get<double>();
}

inline void to_json(nlohmann::json& j, const StepRecord& s) {
  j = nlohmann::json{{"step_index", s.step_index},
                     {"candidates", s.candidates},
                     {"chosen", s.chosen.value},
                     {"top_choice_changed", s.top_choice_changed},
                     {"constraint_applied", s.constraint_applied}};
}

inline void from_json(const nlohmann::json& j, StepRecord& s) {
  s.step_index = j.at("step_index").get<std::size_t>();
  s.candidates = j.at("candidates").get<std::vector<CandidateScore>>();
  s.chosen = TokenId{j.at("chosen").get<std::int32_t>()};
  s.top_choice_changed = j.at("top_choice_changed").get<bool>();
  s.constraint_applied = j.at("constraint_applied").get<bool>();
}

inline FinishReason parse_finish_reason(std::string_view s) {
  if (s == "stop") return FinishReason::stop;
  if (s == "max_tokens") return FinishReason::max_tokens;
  if (s == "constraint_complete") return FinishReason::constraint_complete;
  throw MalformedSpec("unknown finish_reason \"" + std::string(s) + "\"");
}

inline std::string write_trace_jsonl(const GenerationResult& r) {
  std::string out;
  const nlohmann::json header{{"schema", kTraceSchema},
                              {"version", kTraceVersion},
                              {"method", to_string(r.method)},
                              {"finish_reason", to_string(r.finish_reason)},
                              {"text", r.text},
                              {"num_steps", r.steps.size()}};
  out += dump_json(header);
  out += '\n';
  for (const auto& s : r.steps) {
    out += dump_json(nlohmann::json(s));
    out += '\n';
  }
  return out;
}

inline GenerationResult read_trace_jsonl(std::string_view content) {
  std::istringstream in{std::string(content)};
  std::string line;
  GenerationResult r;
  try {
    if (!std::getline(in, line)) throw MalformedSpec("empty trace file");
    const auto header = nlohmann::json::parse(line);
    if (header.value("schema", std::string()) != kTraceSchema) throw MalformedSpec("not a step trace file");
    if (header.value("version", 0) != kTraceVersion) {
      throw MalformedSpec("unsupported trace version " + header.value("version", nlohmann::json()).dump());
    }
    r.method = parse_method(header.at("method").get<std::string>());
    r.finish_reason = parse_finish_reason(header.at("finish_reason").get<std::string>());
    r.text = header.at("text").get<std::string>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      r.steps.push_back(nlohmann::json::parse(line).get<StepRecord>());
    }
    if (r.steps.size() != header.at("num_steps").get<std::size_t>()) throw MalformedSpec("trace is truncated");
  } catch (const nlohmann::json::exception& e) {
    throw MalformedSpec(std::string("trace file: ") + e.what());
  }
  return r;
}

}  // namespace capt
