#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "capt/cli.hpp"

namespace {

void add_overrides(CLI::App* cmd, capt::cli::Overrides& o) {
  cmd->add_option("--k", o.k, "Candidate count override")->check(CLI::PositiveNumber);
  cmd->add_option("--alpha", o.alpha, "Offset weight override");
  cmd->add_option("--method", o.method, "capt | proxy_tuning | unite | single");
  cmd->add_option("--out", o.out, "Output directory override");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-vocabulary proxy tuning: decoding, evaluation and offset analysis"};
  app.require_subcommand(1);

  std::string config, prompt;
  capt::cli::Overrides ov;

  auto* gen = app.add_subcommand("generate", "Decode one prompt and write its step trace");
  gen->add_option("config", config, "Run config (JSON)")->required();
  gen->add_option("--prompt", prompt, "Prompt text")->required();
  add_overrides(gen, ov);

  auto* eval = app.add_subcommand("eval", "Run the configured task and write metrics");
  eval->add_option("config", config, "Run config (JSON)")->required();
  add_overrides(eval, ov);

  std::vector<std::size_t> ks;
  std::vector<double> alphas;
  auto* sweep = app.add_subcommand("sweep", "Evaluate a k x alpha grid into sweep.csv");
  sweep->add_option("config", config, "Run config (JSON)")->required();
  sweep->add_option("--ks", ks, "Comma-separated k values")->delimiter(',')->required();
  sweep->add_option("--alphas", alphas, "Comma-separated alpha values")->delimiter(',')->required();
  add_overrides(sweep, ov);

  std::string traces, categories, out_dir = "analysis";
  std::size_t min_freq = capt::kDefaultMinFreq;
  double top_frac = capt::kDefaultTopFrac;
  auto* analyze = app.add_subcommand("analyze", "Aggregate offsets by token category and annotate traces");
  analyze->add_option("traces", traces, "Directory of trace .jsonl files")->required();
  analyze->add_option("--categories", categories, "Token category map (JSON)")->required();
  analyze->add_option("--min-freq", min_freq, "Minimum token frequency")->capture_default_str();
  analyze->add_option("--top-frac", top_frac, "Fraction of most frequent tokens kept")->capture_default_str();
  analyze->add_option("--out", out_dir, "Output directory")->capture_default_str();

  std::string spec, host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve-toy", "Serve a toy model over the logprob wire protocol");
  serve->add_option("spec", spec, "Toy model definition (JSON)")->required();
  serve->add_option("--host", host, "Bind address")->capture_default_str();
  serve->add_option("--port", port, "Port")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  if (*gen) return capt::cli::cmd_generate(config, prompt, ov);
  if (*eval) return capt::cli::cmd_eval(config, ov);
  if (*sweep) return capt::cli::cmd_sweep(config, ks, alphas, ov);
  if (*analyze) return capt::cli::cmd_analyze(traces, categories, min_freq, top_frac, out_dir);
  if (*serve) return capt::cli::cmd_serve_toy(spec, host, port);
  return 1;
}
