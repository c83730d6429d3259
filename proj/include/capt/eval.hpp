#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "capt/constraint.hpp"
#include "capt/ensemble.hpp"
#include "capt/errors.hpp"
#include "capt/metrics.hpp"
#include "capt/text.hpp"
#include "capt/trace_io.hpp"

namespace capt {

// Prediction recorded for outputs that are not a schema-valid object.
inline constexpr const char* kInvalidPrediction = "<invalid>";

struct TaskSpec {
  std::string name;
  std::string prompt_template;  // exactly one "{text}" slot
  JsonSchemaConstraint constraint;
  std::optional<std::size_t> sample_limit;

  void validate() const {
    constraint.validate();
    const auto first = prompt_template.find("{text}");
    if (first == std::string::npos || prompt_template.find("{text}", first + 1) != std::string::npos) {
      throw ConfigError("prompt template of task '" + name + "' must contain exactly one {text} slot");
    }
    if (sample_limit && *sample_limit == 0) throw ConfigError("sample_limit must be >= 1");
  }

  std::string render(const std::string& input) const {
    std::string out = prompt_template;
    out.replace(out.find("{text}"), 6, input);
    return out;
  }
};

struct ExampleRecord {
  std::string id;
  std::string text;
  LabelSet gold;
};

// JSONL with {"id", "text", "gold"}; gold is a string or an array of strings.
inline std::vector<ExampleRecord> parse_dataset_jsonl(const std::string& content, const JsonSchemaConstraint& c) {
  std::vector<ExampleRecord> out;
  std::istringstream in(content);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::all_whitespace(line)) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ExampleRecord r;
      r.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      r.text = j.at("text").get<std::string>();
      const auto& g = j.at("gold");
      if (g.is_string()) {
        r.gold = {g.get<std::string>()};
      } else {
        r.gold = g.get<std::vector<std::string>>();
      }
      for (const auto& l : r.gold) {
        if (std::find(c.label_set.begin(), c.label_set.end(), l) == c.label_set.end()) {
          throw MalformedSpec("gold label \"" + l + "\" is not in the task's label set");
        }
      }
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw MalformedSpec("dataset line " + std::to_string(line_no) + ": " + e.what());
    } catch (const MalformedSpec& e) {
      throw MalformedSpec("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// Seeded sample of `limit` examples, returned in file order.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::optional<std::size_t> limit, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (!limit || *limit >= n) return idx;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < *limit; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(*limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Labels from a generated object, or {kInvalidPrediction} when the text is
// not a well-formed object whose labels all belong to the label set.
inline LabelSet extract_labels(const std::string& output, const JsonSchemaConstraint& c) {
  const LabelSet invalid{kInvalidPrediction};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(output);
  } catch (const nlohmann::json::exception&) {
    return invalid;
  }
  if (!j.is_object() || !j.contains("label")) return invalid;
  LabelSet labels;
  const auto& l = j["label"];
  if (l.is_string()) {
    labels.push_back(l.get<std::string>());
  } else if (l.is_array() && !l.empty()) {
    for (const auto& e : l) {
      if (!e.is_string()) return invalid;
      labels.push_back(e.get<std::string>());
    }
  } else {
    return invalid;
  }
  for (const auto& s : labels) {
    if (std::find(c.label_set.begin(), c.label_set.end(), s) == c.label_set.end()) return invalid;
  }
  return normalize_labels(std::move(labels));
}

struct ExampleOutcome {
  ExampleRecord example;
  LabelSet predicted;
  GenerationResult result;
  std::optional<std::string> error;
};

struct TaskRun {
  MetricsReport metrics;
  std::vector<ExampleOutcome> outcomes;
};

struct RunOptions {
  std::uint64_t seed = 0;
  std::size_t parallelism = 1;
  bool constrained = true;
};

// One generation per sampled example; failures are recorded per example and
// scored as kInvalidPrediction.
inline TaskRun run_task(const TaskSpec& task, const EnsembleConfig& cfg, const ModelSet& models,
                        const std::vector<ExampleRecord>& data, const RunOptions& opts = {}) {
  task.validate();
  if (data.empty()) throw InvalidArgument("dataset is empty");
  const Ensemble ensemble(models, cfg);
  std::optional<ConstraintMatcher> matcher;
  if (opts.constrained) matcher.emplace(task.constraint, models.leader->tokenizer());

  const auto picked = sample_indices(data.size(), task.sample_limit, opts.seed);
  TaskRun run;
  run.outcomes.resize(picked.size());

  auto work = [&](std::size_t i) {
    auto& o = run.outcomes[i];
    o.example = data[picked[i]];
    try {
      o.result = ensemble.generate(task.render(o.example.text), matcher ? &*matcher : nullptr);
      o.predicted = extract_labels(o.result.text, task.constraint);
    } catch (const Error& e) {
      o.error = e.what();
      o.predicted = {kInvalidPrediction};
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(opts.parallelism, picked.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < picked.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < picked.size(); i = next++) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }

  std::vector<LabelSet> preds, golds;
  for (const auto& o : run.outcomes) {
    preds.push_back(o.predicted);
    golds.push_back(o.example.gold);
  }
  run.metrics = macro_f1(preds, golds, task.constraint.label_set);
  return run;
}

inline std::string trace_file_name(std::size_t index, const std::string& id) {
  std::string safe;
  for (char c : id) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  char prefix[16];
  std::snprintf(prefix, sizeof prefix, "%04zu_", index);
  return prefix + safe + ".jsonl";
}

// Writes metrics.json, predictions.jsonl and traces/<n>_<id>.jsonl under `dir`.
inline void persist_run(const TaskRun& run, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "traces");
  std::string preds;
  for (std::size_t i = 0; i < run.outcomes.size(); ++i) {
    const auto& o = run.outcomes[i];
    nlohmann::json line{{"id", o.example.id},
                        {"gold", o.example.gold},
                        {"pred", o.predicted},
                        {"output", o.result.text},
                        {"error", o.error ? nlohmann::json(*o.error) : nlohmann::json(nullptr)}};
    preds += dump_json(line) + "\n";
    if (!o.error) text::write_file((dir / "traces" / trace_file_name(i, o.example.id)).string(), write_trace_jsonl(o.result));
  }
  text::write_file((dir / "predictions.jsonl").string(), preds);
  text::write_file((dir / "metrics.json").string(), dump_json(run.metrics.to_json(), 2) + "\n");
}

}  // namespace capt
