#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capt/analysis.hpp"
#include "capt/backend.hpp"
#include "capt/constraint.hpp"
#include "capt/ensemble.hpp"
#include "capt/errors.hpp"
#include "capt/eval.hpp"
#include "capt/method.hpp"
#include "capt/remote_backend.hpp"
#include "capt/text.hpp"
#include "capt/toy_model.hpp"

namespace capt {

inline constexpr int kConfigVersion = 1;

struct BackendConfig {
  std::string id;
  BackendKind kind = BackendKind::toy;
  std::string url;
  std::filesystem::path toy_spec_path;
  std::string prompt_prefix;
  std::string prompt_suffix;
  int timeout_ms = 30000;
  int retries = 2;
};

struct RolesConfig {
  std::string leader;
  std::string tuned;
  std::string base;
};

struct TaskConfig {
  std::string name;
  std::string prompt_template;
  std::filesystem::path constraint_path;
  std::filesystem::path dataset_path;
  std::optional<std::size_t> sample_limit;
  std::uint64_t seed = 0;
  std::size_t parallelism = 1;
  bool constrained = true;
};

struct AnalysisConfig {
  std::filesystem::path category_map_path;
  std::size_t min_freq = kDefaultMinFreq;
  double top_frac = kDefaultTopFrac;
};

// One declarative run. Relative paths resolve against the config file's
// directory; every referenced file must exist at load time.
struct RunConfig {
  int version = kConfigVersion;
  std::vector<BackendConfig> backends;
  RolesConfig roles;
  EnsembleConfig ensemble;
  std::optional<TaskConfig> task;
  std::optional<AnalysisConfig> analysis;
  std::filesystem::path output_dir = "out";
  nlohmann::json source;  // as loaded, for manifests

  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static RunConfig load(const std::string& path);
  nlohmann::json to_json() const;

  ModelSet build_models() const;
  TaskSpec task_spec() const;
  std::vector<ExampleRecord> load_dataset() const;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown key \"" + key + "\" in " + where);
    }
  }
}

inline std::filesystem::path existing_path(const nlohmann::json& j, const char* key, const std::filesystem::path& base,
                                           const std::string& where) {
  const std::filesystem::path p = base / j.at(key).get<std::string>();
  if (!std::filesystem::exists(p)) throw ConfigError(where + "." + key + ": file not found: " + p.string());
  return p;
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  using detail::existing_path;
  using detail::reject_unknown;
  RunConfig c;
  try {
    reject_unknown(j, "config", {"version", "backends", "roles", "ensemble", "task", "analysis", "output_dir"});
    c.version = j.at("version").get<int>();
    if (c.version != kConfigVersion) {
      throw ConfigError("unsupported config version " + std::to_string(c.version) + " (expected " +
                        std::to_string(kConfigVersion) + ")");
    }

    std::set<std::string> ids;
    for (const auto& b : j.at("backends")) {
      reject_unknown(b, "backend", {"id", "kind", "url", "toy_spec_path", "prompt_prefix", "prompt_suffix",
                                    "timeout_ms", "retries"});
      BackendConfig bc;
      bc.id = b.at("id").get<std::string>();
      if (bc.id.empty() || !ids.insert(bc.id).second) throw ConfigError("backend ids must be unique and non-empty");
      const auto kind = b.at("kind").get<std::string>();
      const std::string where = "backend '" + bc.id + "'";
      if (kind == "toy") {
        bc.kind = BackendKind::toy;
        bc.toy_spec_path = existing_path(b, "toy_spec_path", base_dir, where);
      } else if (kind == "remote") {
        bc.kind = BackendKind::remote;
        bc.url = b.at("url").get<std::string>();
      } else {
        throw ConfigError(where + ": kind must be \"toy\" or \"remote\"");
      }
      bc.prompt_prefix = b.value("prompt_prefix", std::string());
      bc.prompt_suffix = b.value("prompt_suffix", std::string());
      bc.timeout_ms = b.value("timeout_ms", 30000);
      bc.retries = b.value("retries", 2);
      c.backends.push_back(std::move(bc));
    }
    if (c.backends.empty()) throw ConfigError("config lists no backends");

    const auto& r = j.at("roles");
    reject_unknown(r, "roles", {"leader", "tuned", "base"});
    c.roles.leader = r.at("leader").get<std::string>();
    c.roles.tuned = r.value("tuned", std::string());
    c.roles.base = r.value("base", std::string());
    for (const auto* role : {&c.roles.leader, &c.roles.tuned, &c.roles.base}) {
      if (!role->empty() && !ids.count(*role)) throw ConfigError("roles reference unknown backend '" + *role + "'");
    }

    if (j.contains("ensemble")) {
      const auto& e = j["ensemble"];
      reject_unknown(e, "ensemble", {"method", "k", "alpha", "max_tokens", "stop"});
      if (e.contains("method")) c.ensemble.method = parse_method(e["method"].get<std::string>());
      c.ensemble.k = e.value("k", c.ensemble.k);
      c.ensemble.alpha = e.value("alpha", c.ensemble.alpha);
      c.ensemble.max_tokens = e.value("max_tokens", c.ensemble.max_tokens);
      c.ensemble.stop_sequences = e.value("stop", std::vector<std::string>{});
    }
    c.ensemble.validate();

    if (j.contains("task")) {
      const auto& t = j["task"];
      reject_unknown(t, "task", {"name", "prompt_template", "constraint_path", "dataset_path", "sample_limit",
                                 "seed", "parallelism", "constrained"});
      TaskConfig tc;
      tc.name = t.value("name", std::string("task"));
      tc.prompt_template = t.value("prompt_template", std::string("{text}"));
      tc.constraint_path = existing_path(t, "constraint_path", base_dir, "task");
      if (t.contains("dataset_path")) tc.dataset_path = existing_path(t, "dataset_path", base_dir, "task");
      if (t.contains("sample_limit") && !t["sample_limit"].is_null()) tc.sample_limit = t["sample_limit"].get<std::size_t>();
      tc.seed = t.value("seed", std::uint64_t{0});
      tc.parallelism = t.value("parallelism", std::size_t{1});
      if (tc.parallelism < 1) throw ConfigError("task.parallelism must be >= 1");
      tc.constrained = t.value("constrained", true);
      c.task = std::move(tc);
    }

    if (j.contains("analysis")) {
      const auto& a = j["analysis"];
      reject_unknown(a, "analysis", {"category_map_path", "min_freq", "top_frac"});
      AnalysisConfig ac;
      ac.category_map_path = existing_path(a, "category_map_path", base_dir, "analysis");
      ac.min_freq = a.value("min_freq", kDefaultMinFreq);
      ac.top_frac = a.value("top_frac", kDefaultTopFrac);
      c.analysis = std::move(ac);
    }

    c.output_dir = base_dir / j.value("output_dir", std::string("out"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.source = j;
  return c;
}

inline RunConfig RunConfig::load(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return from_json(j, std::filesystem::path(path).parent_path());
}

// Effective configuration after overrides; paths are written as resolved.
inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json backs = nlohmann::json::array();
  for (const auto& b : backends) {
    nlohmann::json o{{"id", b.id}, {"kind", to_string(b.kind)}, {"prompt_prefix", b.prompt_prefix},
                     {"prompt_suffix", b.prompt_suffix}, {"timeout_ms", b.timeout_ms}, {"retries", b.retries}};
    if (b.kind == BackendKind::toy) {
      o["toy_spec_path"] = b.toy_spec_path.generic_string();
    } else {
      o["url"] = b.url;
    }
    backs.push_back(std::move(o));
  }
  nlohmann::json j{{"version", version},
                   {"backends", backs},
                   {"roles", {{"leader", roles.leader}, {"tuned", roles.tuned}, {"base", roles.base}}},
                   {"ensemble",
                    {{"method", to_string(ensemble.method)},
                     {"k", ensemble.k},
                     {"alpha", ensemble.alpha},
                     {"max_tokens", ensemble.max_tokens},
                     {"stop", ensemble.stop_sequences}}},
                   {"output_dir", output_dir.generic_string()}};
  if (task) {
    j["task"] = {{"name", task->name},
                 {"prompt_template", task->prompt_template},
                 {"constraint_path", task->constraint_path.generic_string()},
                 {"dataset_path", task->dataset_path.generic_string()},
                 {"sample_limit", task->sample_limit ? nlohmann::json(*task->sample_limit) : nlohmann::json(nullptr)},
                 {"seed", task->seed},
                 {"parallelism", task->parallelism},
                 {"constrained", task->constrained}};
  }
  if (analysis) {
    j["analysis"] = {{"category_map_path", analysis->category_map_path.generic_string()},
                     {"min_freq", analysis->min_freq},
                     {"top_frac", analysis->top_frac}};
  }
  return j;
}

inline ModelSet RunConfig::build_models() const {
  std::map<std::string, BackendPtr> built;
  auto get = [&](const std::string& id) -> BackendPtr {
    if (id.empty()) return nullptr;
    if (auto it = built.find(id); it != built.end()) return it->second;
    const auto& bc = *std::find_if(backends.begin(), backends.end(), [&](const auto& b) { return b.id == id; });
    const PromptTemplate tmpl{bc.prompt_prefix, bc.prompt_suffix};
    BackendPtr b;
    if (bc.kind == BackendKind::toy) {
      auto toy = load_toy_model(bc.toy_spec_path.string());
      toy->set_id(bc.id);
      toy->set_prompt_template(tmpl);
      b = toy;
    } else {
      b = RemoteBackend::connect(bc.id, RemoteOptions{bc.url, tmpl, bc.timeout_ms, bc.retries});
    }
    built.emplace(id, b);
    return b;
  };
  return ModelSet{get(roles.leader), get(roles.tuned), get(roles.base)};
}

inline TaskSpec RunConfig::task_spec() const {
  if (!task) throw ConfigError("config has no task section");
  nlohmann::json cj;
  try {
    cj = nlohmann::json::parse(text::read_file(task->constraint_path.string()));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("constraint " + task->constraint_path.string() + ": " + e.what());
  }
  TaskSpec spec{task->name, task->prompt_template, JsonSchemaConstraint::from_json(cj), task->sample_limit};
  spec.validate();
  return spec;
}

inline std::vector<ExampleRecord> RunConfig::load_dataset() const {
  if (!task || task->dataset_path.empty()) throw ConfigError("config has no task.dataset_path");
  return parse_dataset_jsonl(text::read_file(task->dataset_path.string()), task_spec().constraint);
}

}  // namespace capt
