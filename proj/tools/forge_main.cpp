#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <string>

#include "satstereo/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"satellite-stereo groundtruthing pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  int jobs = 0;
  long long seed = -1;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "pipeline config (json)")->required();
    cmd->add_option("--jobs", jobs, "parallelism degree (overrides config)");
    cmd->add_option("--seed", seed, "master seed (overrides config)");
  };

  std::vector<CLI::App*> stage_cmds;
  for (const auto& name : satstereo::stage_names()) {
    CLI::App* cmd = app.add_subcommand(name, "run the '" + name + "' stage");
    add_common(cmd);
    stage_cmds.push_back(cmd);
  }
  CLI::App* all_cmd = app.add_subcommand("all", "run every stage in order");
  add_common(all_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    satstereo::PipelineConfig cfg = satstereo::load_config(config_path);
    if (jobs > 0) cfg.jobs = jobs;
    if (seed >= 0) cfg.master_seed = static_cast<uint64_t>(seed);

    if (all_cmd->parsed()) {
      satstereo::run_all(cfg);
      std::printf("all stages complete\n");
      return 0;
    }
    for (size_t i = 0; i < stage_cmds.size(); ++i)
      if (stage_cmds[i]->parsed()) {
        satstereo::run_stage(satstereo::stage_names()[i], cfg);
        std::printf("stage %s complete\n", satstereo::stage_names()[i].c_str());
        return 0;
      }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
