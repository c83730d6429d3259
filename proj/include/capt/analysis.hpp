#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "capt/ensemble.hpp"
#include "capt/errors.hpp"
#include "capt/text.hpp"
#include "capt/trace_io.hpp"

namespace capt {

inline constexpr std::size_t kDefaultMinFreq = 6;
inline constexpr double kDefaultTopFrac = 0.25;

class TokenCategoryMap {
 public:
  TokenCategoryMap() = default;

  explicit TokenCategoryMap(std::map<std::string, std::set<std::string>> categories)
      : categories_(std::move(categories)) {
    for (const auto& [name, tokens] : categories_) {
      for (const auto& t : tokens) {
        auto [it, inserted] = index_.emplace(t, name);
        if (!inserted) {
          throw MalformedSpec("token \"" + t + "\" appears in categories \"" + it->second + "\" and \"" + name + "\"");
        }
      }
    }
  }

  // {"categories": {name: [tokens...]}}
  static TokenCategoryMap from_json(const nlohmann::json& j) {
    try {
      std::map<std::string, std::set<std::string>> cats;
      for (const auto& [name, tokens] : j.at("categories").items()) {
        auto& set = cats[name];
        for (const auto& t : tokens) set.insert(t.get<std::string>());
      }
      return TokenCategoryMap(std::move(cats));
    } catch (const nlohmann::json::exception& e) {
      throw MalformedSpec(std::string("category map: ") + e.what());
    }
  }

  static TokenCategoryMap load(const std::string& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text::read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw MalformedSpec("category map " + path + ": " + e.what());
    }
    return from_json(j);
  }

  std::optional<std::string> category_of(const std::string& token) const {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    return std::nullopt;
  }

  const std::map<std::string, std::set<std::string>>& categories() const { return categories_; }

 private:
  std::map<std::string, std::set<std::string>> categories_;
  std::unordered_map<std::string, std::string> index_;
};

struct CategoryStats {
  double mean_offset = 0.0;
  std::size_t token_count = 0;
  std::size_t occurrence_count = 0;
};

struct OffsetReport {
  std::map<std::string, CategoryStats> per_category;
  std::size_t uncategorized_count = 0;  // kept occurrences outside every category
  std::size_t kept_token_count = 0;     // distinct token strings surviving both filters

  nlohmann::json to_json() const {
    nlohmann::json cats = nlohmann::json::object();
    for (const auto& [name, s] : per_category) {
      cats[name] = {{"mean_offset", s.mean_offset},
                    {"token_count", s.token_count},
                    {"occurrence_count", s.occurrence_count}};
    }
    return {{"per_category", cats},
            {"uncategorized_count", uncategorized_count},
            {"kept_token_count", kept_token_count}};
  }
};

// Mean contrastive offset of generated tokens per category. Only chosen
// tokens count. Token strings are whitespace-stripped, ranked by frequency
// (ties by string), cut to the top ceil(top_frac * distinct) and then to
// those generated at least min_freq times. Means are over occurrences.
inline OffsetReport aggregate_by_category(std::span<const StepRecord> steps, const TokenCategoryMap& map,
                                          std::size_t min_freq = kDefaultMinFreq,
                                          double top_frac = kDefaultTopFrac) {
  if (!(top_frac > 0.0 && top_frac <= 1.0)) throw InvalidArgument("top_frac must be in (0, 1]");
  if (min_freq < 1) throw InvalidArgument("min_freq must be >= 1");

  std::vector<std::pair<std::string, double>> occurrences;
  std::map<std::string, std::size_t> freq;
  for (const auto& step : steps) {
    const auto& c = step.chosen_candidate();
    auto key = text::strip_whitespace(c.text);
    if (key.empty()) continue;
    ++freq[key];
    occurrences.emplace_back(std::move(key), c.offset);
  }

  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  const auto keep_n = static_cast<std::size_t>(std::ceil(top_frac * static_cast<double>(ranked.size()) - 1e-9));
  std::set<std::string> kept;
  for (std::size_t i = 0; i < std::min(keep_n, ranked.size()); ++i) {
    if (ranked[i].second >= min_freq) kept.insert(ranked[i].first);
  }

  OffsetReport report;
  report.kept_token_count = kept.size();
  std::map<std::string, double> sums;
  std::map<std::string, std::set<std::string>> tokens_seen;
  for (const auto& [key, offset] : occurrences) {
    if (!kept.count(key)) continue;
    auto cat = map.category_of(key);
    if (!cat) {
      ++report.uncategorized_count;
      continue;
    }
    sums[*cat] += offset;
    tokens_seen[*cat].insert(key);
    ++report.per_category[*cat].occurrence_count;
  }
  for (auto& [name, stats] : report.per_category) {
    stats.mean_offset = sums[name] / static_cast<double>(stats.occurrence_count);
    stats.token_count = tokens_seen[name].size();
  }
  return report;
}

inline OffsetReport aggregate_by_category(std::span<const GenerationResult> results, const TokenCategoryMap& map,
                                          std::size_t min_freq = kDefaultMinFreq,
                                          double top_frac = kDefaultTopFrac) {
  std::vector<StepRecord> all;
  for (const auto& r : results) all.insert(all.end(), r.steps.begin(), r.steps.end());
  return aggregate_by_category(std::span<const StepRecord>(all), map, min_freq, top_frac);
}

struct AnnotatedSpan {
  std::size_t step_index = 0;
  TokenId token;
  std::string text;
  double offset = 0.0;
  int sign = 0;
  double magnitude = 0.0;
  bool changed = false;
  std::optional<TokenId> displaced;
  std::string displaced_text;
};

struct AnnotatedText {
  std::vector<AnnotatedSpan> spans;

  std::size_t change_count() const {
    return static_cast<std::size_t>(std::count_if(spans.begin(), spans.end(), [](const auto& s) { return s.changed; }));
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : spans) {
      nlohmann::json j{{"step_index", s.step_index},
                       {"token", s.token.value},
                       {"text", s.text},
                       {"offset", s.offset},
                       {"sign", s.sign},
                       {"magnitude", s.magnitude},
                       {"changed", s.changed}};
      if (s.displaced) {
        j["displaced"] = {{"token", s.displaced->value}, {"text", s.displaced_text}};
      } else {
        j["displaced"] = nullptr;
      }
      arr.push_back(std::move(j));
    }
    return {{"spans", arr}};
  }
};

inline AnnotatedText annotate_output(const GenerationResult& result) {
  if (result.method != Method::capt) {
    throw MethodMismatch(std::string("annotation needs a capt run, got ") + to_string(result.method));
  }
  AnnotatedText out;
  for (const auto& step : result.steps) {
    const auto& c = step.chosen_candidate();
    AnnotatedSpan s;
    s.step_index = step.step_index;
    s.token = c.token;
    s.text = c.text;
    s.offset = c.offset;
    s.sign = c.offset > 0.0 ? 1 : (c.offset < 0.0 ? -1 : 0);
    s.magnitude = std::fabs(c.offset);
    s.changed = step.top_choice_changed;
    if (s.changed) {
      const TokenId top = detail::argmax_logp_new(step.candidates);
      s.displaced = top;
      for (const auto& cand : step.candidates) {
        if (cand.token == top) s.displaced_text = cand.text;
      }
    }
    out.spans.push_back(std::move(s));
  }
  return out;
}

// Static HTML view: orange background where the clinical offset pushed a
// token up, blue where it pushed against the chosen token, intensity by
// magnitude; bold marks a changed top choice with the displaced token struck
// through.
inline std::string render_html(const AnnotatedText& a, const std::string& title = "CAPT output") {
  double scale = 0.0;
  for (const auto& s : a.spans) scale = std::max(scale, s.magnitude);
  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" << text::html_escape(title)
       << "</title>\n<style>body{font-family:sans-serif;white-space:pre-wrap;line-height:1.6}"
          "s{color:#888}</style></head><body>\n";
  for (const auto& s : a.spans) {
    // %.6f keeps the file byte-stable across runs
    char alpha[32];
    const double strength = scale > 0.0 ? s.magnitude / scale : 0.0;
    std::snprintf(alpha, sizeof alpha, "%.6f", 0.15 + 0.65 * strength);
    char offset[32];
    std::snprintf(offset, sizeof offset, "%.6f", s.offset);
    html << "<span title=\"offset " << offset << "\"";
    if (s.sign > 0) {
      html << " style=\"background:rgba(230,159,0," << alpha << ")\"";
    } else if (s.sign < 0) {
      html << " style=\"background:rgba(86,180,233," << alpha << ")\"";
    }
    html << ">";
    if (s.changed) html << "<s>" << text::html_escape(s.displaced_text) << "</s><b>";
    html << text::html_escape(s.text);
    if (s.changed) html << "</b>";
    html << "</span>";
  }
  html << "\n</body></html>\n";
  return html.str();
}

}  // namespace capt
