#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cpsseg/chipper.hpp"
#include "cpsseg/maskgen.hpp"
#include "cpsseg/synthdata.hpp"
#include "cpsseg/trainer.hpp"
#include "json.hpp"

namespace cpsseg {

struct PathsConfig {
  std::filesystem::path raster;     // NRGB GeoTIFF
  std::filesystem::path buildings;  // GeoJSON layers
  std::filesystem::path roads;
  std::filesystem::path water;
  std::filesystem::path eval_raster;  // defaults to raster
  std::filesystem::path eval_mask;    // defaults to the rasterized label mask
  std::filesystem::path work_dir = "run";
  std::filesystem::path synth_dir;  // defaults to <work_dir>/synth
};

struct EvalConfig {
  std::vector<double> thresholds{0.4, 0.5};
  std::size_t batch_size = 4;
  std::size_t stride = 256;
};

struct SynthConfig {
  SceneSpec scene;
  std::optional<std::uint64_t> eval_seed;  // also writes a held-out scene
};

struct ExperimentConfig {
  PathsConfig paths;
  MaskOptions maskgen;
  ChipOptions chipper;
  TrainConfig train;
  EvalConfig eval;
  SynthConfig synth;

  // Every field, defaults included.
  nlohmann::json to_json() const;
  // Throws ConfigValidationError on unknown keys, wrong types or bad values.
  static ExperimentConfig from_json(const nlohmann::json& j);

  std::filesystem::path synth_dir() const;
  std::filesystem::path eval_raster() const;
  std::filesystem::path checkpoint_dir() const;
};

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {});

// Applies "dotted.path=value"; value is parsed as JSON when possible, else
// taken as a string. Throws ConfigValidationError on a malformed override.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t hash_file(const std::filesystem::path& path, std::uint64_t h = 0xcbf29ce484222325ULL);

enum class Stage { Synth, Rasterize, Chip, Train, Predict, Merge, Evaluate };

std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);
// Stages run by `pipeline`, in order.
std::vector<Stage> pipeline_stages();

class Logger {
 public:
  enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3 };
  // Level from CPSSEG_LOG_LEVEL (debug|info|warn|error), default info.
  static Logger from_env();
  explicit Logger(Level level) : level_(level) {}

  void log(Level level, std::string_view msg, const nlohmann::json& fields = nlohmann::json::object()) const;
  void info(std::string_view msg, const nlohmann::json& f = nlohmann::json::object()) const { log(Level::Info, msg, f); }
  void debug(std::string_view msg, const nlohmann::json& f = nlohmann::json::object()) const { log(Level::Debug, msg, f); }

 private:
  Level level_;
};

struct StageOutcome {
  Stage stage;
  bool skipped = false;  // stamp matched, outputs reused
  std::string hash;
  std::string summary;  // one human-readable line
};

// Runs one stage under <work_dir>/<stage>. Each stage writes its outputs,
// resolved_config.json and stamp.json (content hash of its config section
// and inputs). A matching stamp skips the stage unless force is set.
StageOutcome run_stage(Stage stage, const ExperimentConfig& cfg, const Logger& log,
                       bool force = false);

// Output-directory lock held for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace cpsseg
