#include "cpsseg/pipeline.hpp"

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cpsseg/geojson.hpp"
#include "cpsseg/geotiff.hpp"
#include "cpsseg/inference.hpp"

namespace cpsseg {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

[[noreturn]] void bad_config(const std::string& msg) {
  throw Error(ErrorCode::ConfigValidationError, msg);
}

template <typename T>
void get(const json& v, T& out, const std::string& key) {
  try {
    out = v.get<T>();
  } catch (const json::exception&) {
    bad_config("wrong type for " + key);
  }
}

void get_path(const json& v, fs::path& out, const std::string& key) {
  std::string s;
  get(v, s, key);
  out = s;
}

void expect_object(const json& j, const std::string& key) {
  if (!j.is_object()) bad_config(key + " must be an object");
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path stage_dir(const ExperimentConfig& cfg, Stage s) {
  if (s == Stage::Synth) return cfg.synth_dir();
  return cfg.paths.work_dir / std::string(to_string(s));
}

std::optional<std::string> read_stamp(const fs::path& dir) {
  std::ifstream in(dir / "stamp.json");
  if (!in) return std::nullopt;
  try {
    return json::parse(in).at("hash").get<std::string>();
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

std::string upstream(const ExperimentConfig& cfg, Stage s) {
  auto h = read_stamp(stage_dir(cfg, s));
  if (!h) {
    throw Error(ErrorCode::IoError,
                "stage '" + std::string(to_string(s)) + "' has not completed in " +
                    cfg.paths.work_dir.string());
  }
  return *h;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
}

void require_file(const fs::path& p, const std::string& what) {
  require(!p.empty(), ErrorCode::ConfigValidationError, "paths." + what + " is not set");
  require(fs::exists(p), ErrorCode::IoError, what + " not found: " + p.string());
}

std::vector<VectorFeature> read_layer(const fs::path& p, LandClass c) {
  if (p.empty()) return {};
  require(fs::exists(p), ErrorCode::IoError, "vector layer not found: " + p.string());
  return geojson::read(p, c);
}

std::uint64_t hash_optional_file(const fs::path& p, std::uint64_t h) {
  if (p.empty()) return fnv1a("<none>", h);
  return hash_file(p, h);
}

fs::path label_mask_path(const ExperimentConfig& cfg) {
  return stage_dir(cfg, Stage::Rasterize) / "label.tif";
}

fs::path gt_path(const ExperimentConfig& cfg) {
  return cfg.paths.eval_mask.empty() ? label_mask_path(cfg) : cfg.paths.eval_mask;
}

// Content hash of a stage's config section and inputs.
std::uint64_t stage_hash(Stage s, const ExperimentConfig& cfg) {
  std::uint64_t h = fnv1a(to_string(s));
  auto add = [&h](const std::string& text) { h = fnv1a(text, h); };
  switch (s) {
    case Stage::Synth:
      add(cfg.to_json().at("synth").dump());
      break;
    case Stage::Rasterize:
      add(cfg.to_json().at("maskgen").dump());
      require_file(cfg.paths.raster, "raster");
      h = hash_file(cfg.paths.raster, h);
      h = hash_optional_file(cfg.paths.buildings, h);
      h = hash_optional_file(cfg.paths.roads, h);
      h = hash_optional_file(cfg.paths.water, h);
      break;
    case Stage::Chip:
      add(cfg.to_json().at("chipper").dump());
      add(upstream(cfg, Stage::Rasterize));
      h = hash_file(cfg.paths.raster, h);
      break;
    case Stage::Train:
      add(cfg.to_json().at("train").dump());
      add(upstream(cfg, Stage::Chip));
      break;
    case Stage::Predict: {
      const auto e = cfg.to_json();
      add(e.at("eval").at("stride").dump());
      add(e.at("chipper").at("chip_size").dump());
      add(upstream(cfg, Stage::Train));
      require_file(cfg.eval_raster(), "eval_raster");
      h = hash_file(cfg.eval_raster(), h);
      break;
    }
    case Stage::Merge:
      add(upstream(cfg, Stage::Predict));
      break;
    case Stage::Evaluate:
      add(cfg.to_json().at("eval").at("thresholds").dump());
      add(upstream(cfg, Stage::Merge));
      require(fs::exists(gt_path(cfg)), ErrorCode::IoError,
              "ground-truth mask not found: " + gt_path(cfg).string());
      h = hash_file(gt_path(cfg), h);
      break;
  }
  return h;
}

std::string run_synth(const ExperimentConfig& cfg, const fs::path& dir) {
  const Scene scene = generate_scene(cfg.synth.scene);
  geotiff::write_raster(dir / "raster.tif", scene.raster);
  geotiff::write_label_mask(dir / "dense_mask.tif", scene.dense);
  geojson::write(dir / "buildings.geojson", scene.buildings);
  geojson::write(dir / "roads.geojson", scene.roads);
  geojson::write(dir / "water.geojson", scene.water);
  std::ostringstream os;
  os << "synthetic scene " << scene.raster.rows() << "x" << scene.raster.cols() << ", kept "
     << scene.buildings.size() << "/" << scene.placed[0] << " buildings, " << scene.roads.size()
     << "/" << scene.placed[1] << " roads, " << scene.water.size() << "/" << scene.placed[2]
     << " water bodies";
  if (cfg.synth.eval_seed) {
    SceneSpec spec = cfg.synth.scene;
    spec.seed = *cfg.synth.eval_seed;
    spec.sparsity = 0.0;
    const Scene held_out = generate_scene(spec);
    geotiff::write_raster(dir / "eval_raster.tif", held_out.raster);
    geotiff::write_label_mask(dir / "eval_dense_mask.tif", held_out.dense);
    os << "; held-out scene seed " << spec.seed;
  }
  return os.str();
}

std::string run_rasterize(const ExperimentConfig& cfg, const fs::path& dir) {
  const GeoRaster raster = geotiff::read_raster(cfg.paths.raster);
  const auto b = read_layer(cfg.paths.buildings, LandClass::Buildings);
  const auto r = read_layer(cfg.paths.roads, LandClass::Roads);
  const auto w = read_layer(cfg.paths.water, LandClass::Water);
  const ClassMasks m = build_label_mask(raster, b, r, w, cfg.maskgen);
  const auto& t = raster.transform();
  geotiff::write_u8(dir / "buildings.tif", m.buildings.values, t, raster.crs_id());
  geotiff::write_u8(dir / "roads.tif", m.roads.values, t, raster.crs_id());
  geotiff::write_u8(dir / "trees.tif", m.trees.values, t, raster.crs_id());
  geotiff::write_u8(dir / "water.tif", m.water.values, t, raster.crs_id());
  geotiff::write_label_mask(dir / "label.tif", m.merged);
  return "label mask " + std::to_string(raster.rows()) + "x" + std::to_string(raster.cols()) +
         " from " + std::to_string(b.size() + r.size() + w.size()) + " vector features";
}

std::string run_chip(const ExperimentConfig& cfg, const fs::path& dir) {
  const GeoRaster raster = geotiff::read_raster(cfg.paths.raster);
  const LabelMask mask = geotiff::read_label_mask(label_mask_path(cfg));
  const ChipDataset ds = build_dataset(raster, mask, DatasetMode::Train, cfg.chipper);
  fs::remove_all(dir / "store");
  chipstore::save(dir / "store", ds);
  return std::to_string(ds.size()) + " training chips";
}

std::string run_train(const ExperimentConfig& cfg, const fs::path& dir, const Logger& log) {
  const ChipDataset ds = chipstore::load(stage_dir(cfg, Stage::Chip) / "store");
  TrainConfig tc = cfg.train;
  tc.checkpoint_dir = dir;
  auto on_epoch = [&log](const EpochRecord& r) { log.info("epoch", r.to_json()); };
  std::ostringstream os;
  if (tc.regime == Regime::Cps) {
    const auto res = train_cps(tc, ds, on_epoch);
    os << "cps trained " << tc.epochs << " epochs, final total loss "
       << res.history.epochs.back().total;
  } else {
    const auto res = train_supervised(tc, ds, on_epoch);
    os << to_string(tc.regime) << " trained " << tc.epochs << " epochs, final loss "
       << res.history.epochs.back().total;
  }
  return os.str();
}

std::string run_predict(const ExperimentConfig& cfg, const fs::path& dir) {
  const GeoRaster raster = geotiff::read_raster(cfg.eval_raster());
  const ChipDataset ds = build_unlabelled_dataset(
      raster, ChipOptions{cfg.chipper.chip_size, cfg.eval.stride, cfg.chipper.min_class_density});
  const fs::path ckpt = stage_dir(cfg, Stage::Train);
  std::vector<ProbabilityChip> chips;
  if (cfg.train.regime == Regime::Cps) {
    const auto m1 = load_checkpoint(ckpt / "model1");
    const auto m2 = load_checkpoint(ckpt / "model2");
    chips = predict_ensemble(m1, m2, ds, cfg.eval.batch_size);
  } else {
    chips = predict(load_checkpoint(ckpt / "model"), ds, cfg.eval.batch_size);
  }
  fs::remove_all(dir / "store");
  predstore::save(dir / "store", chips, ds);
  return std::to_string(chips.size()) + " probability chips";
}

std::string run_merge(const ExperimentConfig& cfg, const fs::path& dir) {
  const auto loaded = predstore::load(stage_dir(cfg, Stage::Predict) / "store");
  const auto mosaic =
      merge_chips(loaded.chips, loaded.source_shape, loaded.source_transform, loaded.crs_id);
  write_mosaic(dir / "probs.tif", dir / "classes.tif", mosaic);
  return "mosaic " + std::to_string(mosaic.shape.rows) + "x" + std::to_string(mosaic.shape.cols) +
         " from " + std::to_string(loaded.chips.size()) + " chips";
}

std::string run_evaluate(const ExperimentConfig& cfg, const fs::path& dir) {
  const auto mosaic = read_mosaic(stage_dir(cfg, Stage::Merge) / "probs.tif");
  const LabelMask gt = geotiff::read_label_mask(gt_path(cfg));
  const RecallReport rep = evaluate_recall(mosaic, gt, cfg.eval.thresholds);
  write_text(dir / "recall.json", rep.to_json().dump(2) + "\n");
  write_text(dir / "recall.txt", rep.to_text());
  return "\n" + rep.to_text();
}

Logger::Level parse_level(std::string_view s) {
  if (s == "debug") return Logger::Level::Debug;
  if (s == "warn") return Logger::Level::Warn;
  if (s == "error") return Logger::Level::Error;
  return Logger::Level::Info;
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_file(const fs::path& path, std::uint64_t h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())), h);
  }
  return h;
}

json ExperimentConfig::to_json() const {
  std::vector<std::string> priority;
  for (auto c : maskgen.priority) priority.emplace_back(class_name(c));
  json synth_j = synth.scene.to_json();
  synth_j["eval_seed"] = synth.eval_seed ? json(*synth.eval_seed) : json(nullptr);
  return {
      {"paths",
       {{"raster", paths.raster.string()},
        {"buildings", paths.buildings.string()},
        {"roads", paths.roads.string()},
        {"water", paths.water.string()},
        {"eval_raster", paths.eval_raster.string()},
        {"eval_mask", paths.eval_mask.string()},
        {"work_dir", paths.work_dir.string()},
        {"synth_dir", paths.synth_dir.string()}}},
      {"maskgen",
       {{"buffer_px", maskgen.buffer_px},
        {"ndvi_threshold", maskgen.ndvi_threshold},
        {"class_priority", priority}}},
      {"chipper",
       {{"chip_size", chipper.chip_size},
        {"stride", chipper.stride},
        {"min_class_density", chipper.min_class_density}}},
      {"train", train.to_json()},
      {"eval",
       {{"thresholds", eval.thresholds}, {"batch_size", eval.batch_size}, {"stride", eval.stride}}},
      {"synth", synth_j},
  };
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  expect_object(j, "config");
  ExperimentConfig c;
  for (const auto& [section, body] : j.items()) {
    if (section == "paths") {
      expect_object(body, "paths");
      for (const auto& [k, v] : body.items()) {
        const std::string key = "paths." + k;
        if (k == "raster") get_path(v, c.paths.raster, key);
        else if (k == "buildings") get_path(v, c.paths.buildings, key);
        else if (k == "roads") get_path(v, c.paths.roads, key);
        else if (k == "water") get_path(v, c.paths.water, key);
        else if (k == "eval_raster") get_path(v, c.paths.eval_raster, key);
        else if (k == "eval_mask") get_path(v, c.paths.eval_mask, key);
        else if (k == "work_dir") get_path(v, c.paths.work_dir, key);
        else if (k == "synth_dir") get_path(v, c.paths.synth_dir, key);
        else bad_config("unknown key " + key);
      }
    } else if (section == "maskgen") {
      expect_object(body, "maskgen");
      for (const auto& [k, v] : body.items()) {
        const std::string key = "maskgen." + k;
        if (k == "buffer_px") get(v, c.maskgen.buffer_px, key);
        else if (k == "ndvi_threshold") get(v, c.maskgen.ndvi_threshold, key);
        else if (k == "class_priority") {
          std::vector<std::string> names;
          get(v, names, key);
          try {
            c.maskgen.priority = parse_priority(names);
          } catch (const Error& e) {
            bad_config(key + ": " + e.what());
          }
        } else bad_config("unknown key " + key);
      }
    } else if (section == "chipper") {
      expect_object(body, "chipper");
      for (const auto& [k, v] : body.items()) {
        const std::string key = "chipper." + k;
        if (k == "chip_size") get(v, c.chipper.chip_size, key);
        else if (k == "stride") get(v, c.chipper.stride, key);
        else if (k == "min_class_density") get(v, c.chipper.min_class_density, key);
        else bad_config("unknown key " + key);
      }
    } else if (section == "train") {
      c.train = TrainConfig::from_json(body);
    } else if (section == "eval") {
      expect_object(body, "eval");
      for (const auto& [k, v] : body.items()) {
        const std::string key = "eval." + k;
        if (k == "thresholds") get(v, c.eval.thresholds, key);
        else if (k == "batch_size") get(v, c.eval.batch_size, key);
        else if (k == "stride") get(v, c.eval.stride, key);
        else bad_config("unknown key " + key);
      }
    } else if (section == "synth") {
      expect_object(body, "synth");
      json scene = body;
      if (scene.contains("eval_seed")) {
        if (!scene["eval_seed"].is_null()) {
          std::uint64_t s = 0;
          get(scene["eval_seed"], s, "synth.eval_seed");
          c.synth.eval_seed = s;
        }
        scene.erase("eval_seed");
      }
      c.synth.scene = SceneSpec::from_json(scene);
    } else {
      bad_config("unknown key " + section);
    }
  }

  if (c.maskgen.buffer_px < 0) bad_config("maskgen.buffer_px must be >= 0");
  if (!(c.maskgen.ndvi_threshold >= -1.0 && c.maskgen.ndvi_threshold <= 1.0)) {
    bad_config("maskgen.ndvi_threshold must lie in [-1, 1]");
  }
  if (c.chipper.chip_size < 16 || c.chipper.chip_size % 16 != 0) {
    bad_config("chipper.chip_size must be a positive multiple of 16");
  }
  if (c.chipper.stride < 1 || c.chipper.stride > c.chipper.chip_size) {
    bad_config("chipper.stride must lie in [1, chip_size]");
  }
  if (!(c.chipper.min_class_density >= 0.0 && c.chipper.min_class_density <= 1.0)) {
    bad_config("chipper.min_class_density must lie in [0, 1]");
  }
  if (c.eval.thresholds.empty()) bad_config("eval.thresholds must not be empty");
  for (double t : c.eval.thresholds) {
    if (!(t > 0.0 && t < 1.0)) bad_config("eval.thresholds must lie in (0, 1)");
  }
  if (c.eval.batch_size < 1) bad_config("eval.batch_size must be >= 1");
  if (c.eval.stride < 1 || c.eval.stride > c.chipper.chip_size) {
    bad_config("eval.stride must lie in [1, chip_size]");
  }
  try {
    c.synth.scene.validate();
  } catch (const Error& e) {
    bad_config(std::string("synth: ") + e.what());
  }
  return c;
}

fs::path ExperimentConfig::synth_dir() const {
  return paths.synth_dir.empty() ? paths.work_dir / "synth" : paths.synth_dir;
}

fs::path ExperimentConfig::eval_raster() const {
  return paths.eval_raster.empty() ? paths.raster : paths.eval_raster;
}

fs::path ExperimentConfig::checkpoint_dir() const { return stage_dir(*this, Stage::Train); }

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) bad_config("override must look like a.b=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) bad_config("empty path component in override " + path);
    if (!node->is_object()) {
      if (!node->is_null()) bad_config("override path " + path + " crosses a non-object");
      *node = json::object();
    }
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot read config " + path.string());
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      bad_config(std::string("config is not valid JSON: ") + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return ExperimentConfig::from_json(doc);
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Synth: return "synth";
    case Stage::Rasterize: return "rasterize";
    case Stage::Chip: return "chip";
    case Stage::Train: return "train";
    case Stage::Predict: return "predict";
    case Stage::Merge: return "merge";
    case Stage::Evaluate: return "evaluate";
  }
  return "synth";
}

Stage parse_stage(std::string_view s) {
  for (Stage st : {Stage::Synth, Stage::Rasterize, Stage::Chip, Stage::Train, Stage::Predict,
                   Stage::Merge, Stage::Evaluate}) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown stage '" + std::string(s) + "'");
}

std::vector<Stage> pipeline_stages() {
  return {Stage::Rasterize, Stage::Chip, Stage::Train, Stage::Predict, Stage::Merge,
          Stage::Evaluate};
}

Logger Logger::from_env() {
  const char* v = std::getenv("CPSSEG_LOG_LEVEL");
  return Logger(parse_level(v ? v : "info"));
}

void Logger::log(Level level, std::string_view msg, const json& fields) const {
  if (level < level_) return;
  static constexpr const char* kNames[] = {"debug", "info", "warn", "error"};
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  json line = {{"ts", std::chrono::duration<double>(now).count()},
               {"level", kNames[static_cast<int>(level)]},
               {"msg", std::string(msg)}};
  for (const auto& [k, v] : fields.items()) line[k] = v;
  std::cerr << line.dump() << '\n';
}

StageOutcome run_stage(Stage stage, const ExperimentConfig& cfg, const Logger& log, bool force) {
  const fs::path dir = stage_dir(cfg, stage);
  const std::string hash = hex(stage_hash(stage, cfg));
  StageOutcome out{stage, false, hash, {}};
  if (!force && read_stamp(dir) == hash) {
    out.skipped = true;
    out.summary = "up to date (stamp " + hash + ")";
    log.info("stage reused", {{"stage", to_string(stage)}, {"hash", hash}});
    return out;
  }
  fs::create_directories(dir);
  fs::remove(dir / "stamp.json");
  log.info("stage start", {{"stage", to_string(stage)}, {"hash", hash}});
  switch (stage) {
    case Stage::Synth: out.summary = run_synth(cfg, dir); break;
    case Stage::Rasterize: out.summary = run_rasterize(cfg, dir); break;
    case Stage::Chip: out.summary = run_chip(cfg, dir); break;
    case Stage::Train: out.summary = run_train(cfg, dir, log); break;
    case Stage::Predict: out.summary = run_predict(cfg, dir); break;
    case Stage::Merge: out.summary = run_merge(cfg, dir); break;
    case Stage::Evaluate: out.summary = run_evaluate(cfg, dir); break;
  }
  write_text(dir / "resolved_config.json", cfg.to_json().dump(2) + "\n");
  write_text(dir / "stamp.json",
             json{{"stage", to_string(stage)}, {"hash", hash}}.dump(2) + "\n");
  log.info("stage done", {{"stage", to_string(stage)}});
  return out;
}

DirLock::DirLock(const fs::path& dir) : path_(dir / ".cpsseg.lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    throw Error(ErrorCode::IoError, "output directory is locked: " + path_.string());
  }
  std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
  std::fclose(f);
}

DirLock::~DirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

}  // namespace cpsseg
