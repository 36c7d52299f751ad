#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cpsseg/pipeline.hpp"
#include "json.hpp"

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

int report_error(const cpsseg::Error& e) {
  const nlohmann::json j = {{"level", "error"},
                            {"error", std::string(cpsseg::to_string(e.code()))},
                            {"message", e.what()}};
  std::cerr << j.dump() << '\n';
  return e.code() == cpsseg::ErrorCode::ConfigValidationError ? kExitConfig : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross pseudo supervision land-cover segmentation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  bool force = false;
  app.add_option("-c,--config", config_path, "JSON experiment config");
  app.add_option("-s,--set", overrides, "Override a config value, e.g. train.epochs=20");
  app.add_flag("-f,--force", force, "Rerun stages even when their stamp matches");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "Generate a synthetic scene (raster, dense mask, sparse vectors)"},
      {"rasterize", "Burn vector layers and NDVI into a merged label mask"},
      {"chip", "Cut the raster and label mask into a training chip store"},
      {"train", "Train the configured regime and write checkpoints"},
      {"predict", "Predict per-chip class probabilities"},
      {"merge", "Max-merge chip probabilities into mosaic GeoTIFFs"},
      {"evaluate", "Per-class recall report at the configured thresholds"},
      {"pipeline", "Run rasterize, chip, train, predict, merge and evaluate"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) subs.push_back(app.add_subcommand(name, help));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  std::string command;
  for (auto* s : subs) {
    if (s->parsed()) command = s->get_name();
  }

  try {
    const auto log = cpsseg::Logger::from_env();
    const cpsseg::ExperimentConfig cfg = cpsseg::load_config(config_path, overrides);
    std::vector<cpsseg::Stage> stages;
    if (command == "pipeline") stages = cpsseg::pipeline_stages();
    else stages = {cpsseg::parse_stage(command)};

    const auto lock_dir = command == "synth" ? cfg.synth_dir() : cfg.paths.work_dir;
    cpsseg::DirLock lock(lock_dir);
    for (auto stage : stages) {
      const auto outcome = cpsseg::run_stage(stage, cfg, log, force);
      std::cout << cpsseg::to_string(stage) << ": " << outcome.summary << '\n';
    }
  } catch (const cpsseg::Error& e) {
    return report_error(e);
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"level", "error"}, {"error", "Internal"}, {"message", e.what()}}.dump()
              << '\n';
    return kExitFailure;
  }
  return 0;
}
