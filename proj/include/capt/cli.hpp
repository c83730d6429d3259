#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capt/analysis.hpp"
#include "capt/config.hpp"
#include "capt/constraint.hpp"
#include "capt/ensemble.hpp"
#include "capt/errors.hpp"
#include "capt/eval.hpp"
#include "capt/text.hpp"
#include "capt/toy_model.hpp"
#include "capt/trace_io.hpp"
#include "capt/wire_server.hpp"

// Command implementations behind tools/capt. Each returns a process exit
// code and reports failures on `err` instead of throwing.
namespace capt::cli {

struct Overrides {
  std::optional<std::size_t> k;
  std::optional<double> alpha;
  std::optional<std::string> method;
  std::optional<std::string> out;
};

inline RunConfig load_config(const std::string& path, const Overrides& o) {
  RunConfig c = RunConfig::load(path);
  if (o.k) c.ensemble.k = *o.k;
  if (o.alpha) c.ensemble.alpha = *o.alpha;
  if (o.method) c.ensemble.method = parse_method(*o.method);
  if (o.out) c.output_dir = *o.out;
  c.ensemble.validate();
  return c;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class F>
int guarded(std::ostream& err, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

// Prompts pass through the task template when the config has a task.
// Writes trace.jsonl; CAPT runs also get annotated.json and annotated.html.
inline int cmd_generate(const std::string& config_path, const std::string& prompt, const Overrides& o,
                        std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const RunConfig cfg = load_config(config_path, o);
    const ModelSet models = cfg.build_models();
    const Ensemble ensemble(models, cfg.ensemble);
    std::optional<ConstraintMatcher> matcher;
    std::string rendered = prompt;
    if (cfg.task) {
      const TaskSpec task = cfg.task_spec();
      rendered = task.render(prompt);
      if (cfg.task->constrained) matcher.emplace(task.constraint, models.leader->tokenizer());
    }
    const auto result = ensemble.generate(rendered, matcher ? &*matcher : nullptr);

    std::filesystem::create_directories(cfg.output_dir);
    text::write_file((cfg.output_dir / "trace.jsonl").string(), write_trace_jsonl(result));
    if (result.method == Method::capt) {
      const auto annotated = annotate_output(result);
      text::write_file((cfg.output_dir / "annotated.json").string(), dump_json(annotated.to_json(), 2) + "\n");
      text::write_file((cfg.output_dir / "annotated.html").string(), render_html(annotated));
    }
    out << result.text << "\n";
    return 0;
  });
}

// Writes metrics.json, manifest.json, predictions.jsonl and traces/.
inline int cmd_eval(const std::string& config_path, const Overrides& o, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const RunConfig cfg = load_config(config_path, o);
    const TaskSpec task = cfg.task_spec();
    const std::string raw = text::read_file(cfg.task->dataset_path.string());
    const auto data = parse_dataset_jsonl(raw, task.constraint);
    const ModelSet models = cfg.build_models();
    const RunOptions opts{cfg.task->seed, cfg.task->parallelism, cfg.task->constrained};
    const TaskRun run = run_task(task, cfg.ensemble, models, data, opts);
    persist_run(run, cfg.output_dir);

    nlohmann::json ids = nlohmann::json::array();
    for (const auto& oc : run.outcomes) ids.push_back(oc.example.id);
    nlohmann::json backend_ids = {{"leader", cfg.roles.leader}, {"tuned", cfg.roles.tuned}, {"base", cfg.roles.base}};
    const nlohmann::json manifest{{"config", cfg.to_json()},
                                  {"seed", cfg.task->seed},
                                  {"backend_ids", backend_ids},
                                  {"dataset_hash", "fnv1a64:" + text::hex64(text::fnv1a64(raw))},
                                  {"dataset_size", data.size()},
                                  {"sampled_ids", ids}};
    text::write_file((cfg.output_dir / "manifest.json").string(), dump_json(manifest, 2) + "\n");
    out << "macro_f1=" << format_double(run.metrics.macro_f1) << " accuracy=" << format_double(run.metrics.accuracy)
        << " n=" << run.metrics.num_examples << "\n";
    return 0;
  });
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

// One eval per (k, alpha) cell; failed cells are reported and the sweep goes on.
inline int cmd_sweep(const std::string& config_path, const std::vector<std::size_t>& ks,
                     const std::vector<double>& alphas, const Overrides& o, std::ostream& out = std::cout,
                     std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (ks.empty() || alphas.empty()) throw ConfigError("sweep grids must be non-empty");
    const RunConfig base = load_config(config_path, o);
    const TaskSpec task = base.task_spec();
    const auto data = base.load_dataset();
    const ModelSet models = base.build_models();
    const RunOptions opts{base.task->seed, base.task->parallelism, base.task->constrained};

    std::string csv = "k,alpha,macro_f1,accuracy,status\n";
    std::size_t failed = 0;
    for (std::size_t k : ks) {
      for (double alpha : alphas) {
        EnsembleConfig cell = base.ensemble;
        cell.k = k;
        cell.alpha = alpha;
        csv += std::to_string(k) + "," + format_double(alpha) + ",";
        try {
          const TaskRun run = run_task(task, cell, models, data, opts);
          csv += format_double(run.metrics.macro_f1) + "," + format_double(run.metrics.accuracy) + ",ok\n";
        } catch (const std::exception& e) {
          ++failed;
          csv += ",," + csv_field(std::string("error: ") + e.what()) + "\n";
          err << "cell k=" << k << " alpha=" << format_double(alpha) << " failed: " << e.what() << "\n";
        }
      }
    }
    std::filesystem::create_directories(base.output_dir);
    text::write_file((base.output_dir / "sweep.csv").string(), csv);
    out << csv;
    return failed == 0 ? 0 : 1;
  });
}

// Aggregates every *.jsonl trace under `traces_dir` into report.json and
// writes annotations/<name>.{json,html} for the CAPT traces.
inline int cmd_analyze(const std::string& traces_dir, const std::string& category_map_path, std::size_t min_freq,
                       double top_frac, const std::string& out_dir, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    namespace fs = std::filesystem;
    if (!fs::is_directory(traces_dir)) throw ConfigError("traces directory not found: " + traces_dir);
    if (!fs::exists(category_map_path)) throw ConfigError("category map not found: " + category_map_path);
    const auto map = TokenCategoryMap::load(category_map_path);

    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(traces_dir)) {
      if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());

    std::vector<GenerationResult> results;
    fs::create_directories(fs::path(out_dir) / "annotations");
    std::size_t annotated = 0;
    for (const auto& f : files) {
      auto r = read_trace_jsonl(text::read_file(f.string()));
      if (r.method == Method::capt) {
        const auto a = annotate_output(r);
        const auto stem = fs::relative(f, traces_dir).replace_extension().generic_string();
        std::string flat;
        for (char c : stem) flat += c == '/' ? '_' : c;
        text::write_file((fs::path(out_dir) / "annotations" / (flat + ".json")).string(), dump_json(a.to_json(), 2) + "\n");
        text::write_file((fs::path(out_dir) / "annotations" / (flat + ".html")).string(), render_html(a, flat));
        ++annotated;
      }
      results.push_back(std::move(r));
    }
    const auto report = aggregate_by_category(std::span<const GenerationResult>(results), map, min_freq, top_frac);
    nlohmann::json j = report.to_json();
    j["trace_count"] = files.size();
    j["min_freq"] = min_freq;
    j["top_frac"] = top_frac;
    text::write_file((fs::path(out_dir) / "report.json").string(), dump_json(j, 2) + "\n");
    out << files.size() << " traces, " << annotated << " annotated, " << report.kept_token_count << " tokens kept\n";
    return 0;
  });
}

// Serves a toy model until the process is stopped.
inline int cmd_serve_toy(const std::string& spec_path, const std::string& host, int port, std::ostream& out = std::cout,
                         std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (!std::filesystem::exists(spec_path)) throw ConfigError("toy model file not found: " + spec_path);
    auto backend = load_toy_model(spec_path);
    WireServer server(backend);
    out << "serving " << backend->id() << " on " << host << ":" << port << std::endl;
    server.serve(host, port);
    return 0;
  });
}

}  // namespace capt::cli
