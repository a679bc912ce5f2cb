#include <CLI11.hpp>

#include <iostream>

#include "cli/commands.hpp"

using namespace specdraft;

int main(int argc, char** argv) {
  CLI::App app{"Speculative decoding with a SpecFormer draft model on desk-scale language models"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out_path, format;
  std::string chip, model_params, seeds, prompt, n, base, draft, corpus, threads;

  app.add_option("--config", config_path, "YAML config file")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "Override as key=value (repeatable; dotted or unique leaf keys)");
  app.add_option("--seed", seed, "Root seed");
  app.add_option("--out", out_path, "Output path");
  app.add_option("--format", format, "Report format: csv or json-lines");
  app.add_option("--chip", chip, "Chip spec file or built-in chip name (roofline)");
  app.add_option("--model-params", model_params, "Model parameter count M (roofline)");
  app.add_option("--seeds", seeds, "Number of seeds (bench)");
  app.add_option("--prompt", prompt, "Prompt token ids, space or comma separated");
  app.add_option("--n", n, "Tokens to generate");
  app.add_option("--base", base, "Base model checkpoint directory");
  app.add_option("--draft", draft, "Draft model checkpoint directory");
  app.add_option("--corpus", corpus, "Corpus file");
  app.add_option("--threads", threads, "Worker threads (bench)");

  const std::vector<std::pair<std::string, std::string>> help{
      {"gen-corpus", "Generate a synthetic corpus or ingest raw text"},
      {"train-base", "Train the base language model on a corpus"},
      {"distill", "Regenerate corpus completions with the base model"},
      {"train-draft", "Train a SpecFormer draft model against a frozen base"},
      {"decode", "Plain greedy decoding with the base model"},
      {"sd-decode", "Speculative decoding with base and draft models"},
      {"bench", "Acceptance-length sweep over seeds and prompts"},
      {"roofline", "Arithmetic-intensity budget report and throughput curve"},
      {"gradcheck", "Compare backprop gradients with finite differences"},
  };
  for (const auto& [name, desc] : help) app.add_subcommand(name, desc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  // Convenience flags are ordinary overrides applied after --set.
  std::vector<std::string> overrides = sets;
  auto push = [&](const char* key, const std::string& v) {
    if (!v.empty()) overrides.push_back(std::string(key) + "=" + v);
  };
  push("paths.out", out_path);
  push("format", format);
  push("roofline.chip", chip);
  push("roofline.model_params", model_params);
  push("bench.seeds", seeds);
  push("decode.prompt", prompt);
  if (!n.empty()) push(sub == "bench" ? "bench.n" : "decode.n", n);
  push("paths.base", base);
  push("paths.draft", draft);
  push("paths.corpus", corpus);
  push("bench.threads", threads);
  if (seed) push("seed", std::to_string(*seed));

  try {
    const cli::RunConfig cfg = cli::parse_config(config_path, overrides);
    return cli::run(sub, cfg, std::cout);
  } catch (const cli::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
