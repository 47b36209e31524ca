#include <CLI11.hpp>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>

#include "xai3d/parallel.hpp"
#include "xai3d/pipeline.hpp"

using namespace xai3d;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

// config file < XAI3D_* environment < command-line flags
RunConfig resolve(const Flags& flags) {
  json doc = json::object();
  if (!flags.config.empty()) {
    try {
      doc = read_json_file(flags.config);
    } catch (const Error& e) {
      throw Error(e.kind() == ErrorKind::io ? ErrorKind::config : e.kind(), e.what());
    }
  }
  doc = apply_env_overrides(std::move(doc), environment_with_prefix());
  if (!flags.out.empty()) doc["out_dir"] = flags.out;
  if (flags.seed) doc["seed"] = *flags.seed;
  RunConfig cfg = RunConfig::from_json(doc);
  require(cfg.seed.has_value(), ErrorKind::config, "no seed given; set 'seed' in the config, XAI3D_SEED or --seed");
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Global 3D explanations for volumetric classifiers"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Flags flags;
  app.add_option("--config", flags.config, "JSON configuration file");
  app.add_option("--out", flags.out, "output directory (overrides out_dir)");
  app.add_option("--seed", flags.seed, "master seed (overrides seed)");
  app.add_option("--threads", flags.threads, "worker threads")->check(CLI::PositiveNumber);

  const std::map<std::string, std::pair<const char*, std::function<void(const RunConfig&)>>> commands = {
      {"generate", {"synthesize the cohort and its splits", cmd_generate}},
      {"train", {"train the classifier", cmd_train}},
      {"explain", {"per-subject GradCAM and Shapley maps", cmd_explain}},
      {"aggregate", {"PCA global maps and fusion", cmd_aggregate}},
      {"evaluate", {"faithfulness and complexity table", cmd_evaluate}},
      {"ablate", {"fusion weight ablation table", cmd_ablate}},
      {"atlas-report", {"atlas histograms and slices", cmd_atlas_report}},
      {"run", {"every stage in order", cmd_run}},
  };
  for (const auto& [name, entry] : commands) app.add_subcommand(name, entry.first)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code_for(ErrorKind::config);
  }

  try {
    set_thread_count(flags.threads);
    const RunConfig cfg = resolve(flags);
    for (const auto* sub : app.get_subcommands()) {
      commands.at(sub->get_name()).second(cfg);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "xai3d: %s: %s\n", to_string(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "xai3d: %s\n", e.what());
    return 1;
  }
  return 0;
}
