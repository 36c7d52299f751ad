#include "doctest.h"
#include "fixtures.hpp"

#include <fstream>
#include <sstream>

#include "cpsseg/pipeline.hpp"

using namespace cpsseg;
using nlohmann::json;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Tiny end-to-end configuration rooted at dir.
ExperimentConfig tiny_experiment(const std::filesystem::path& dir) {
  json doc = json::object();
  for (const std::string o : {
           "synth.rows=256", "synth.cols=256", "synth.n_buildings=12", "synth.n_roads=2",
           "synth.n_water=2", "synth.n_tree_patches=3", "synth.seed=5", "chipper.chip_size=64",
           "chipper.stride=64", "train.epochs=1", "train.rampup_length=1", "train.batch_size=4",
           "train.width_multiplier=0.25", "train.optimizer=adam", "train.learning_rate=0.001",
           "eval.stride=64"}) {
    apply_override(doc, o);
  }
  apply_override(doc, "paths.work_dir=" + (dir / "work").string());
  apply_override(doc, "paths.synth_dir=" + (dir / "synth").string());
  apply_override(doc, "paths.raster=" + (dir / "synth" / "raster.tif").string());
  apply_override(doc, "paths.buildings=" + (dir / "synth" / "buildings.geojson").string());
  apply_override(doc, "paths.roads=" + (dir / "synth" / "roads.geojson").string());
  apply_override(doc, "paths.water=" + (dir / "synth" / "water.geojson").string());
  return ExperimentConfig::from_json(doc);
}

}  // namespace

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);
  CHECK(fnv1a("bar", fnv1a("foo")) == fnv1a("foobar"));
}

TEST_CASE("experiment config materializes defaults and roundtrips") {
  const ExperimentConfig def;
  const json j = def.to_json();
  for (const char* section : {"paths", "maskgen", "chipper", "train", "eval", "synth"}) {
    CHECK(j.contains(section));
  }
  CHECK(j["eval"]["thresholds"] == json::array({0.4, 0.5}));
  CHECK(j["chipper"]["min_class_density"] == 0.05);
  CHECK(j["maskgen"]["buffer_px"] == 3);
  CHECK(ExperimentConfig::from_json(j).to_json() == j);
  CHECK(ExperimentConfig::from_json(json::object()).to_json() == j);
}

TEST_CASE("unknown keys and bad values are rejected") {
  auto expect_invalid = [](const json& doc) {
    try {
      ExperimentConfig::from_json(doc);
      FAIL("expected ConfigValidationError for " << doc.dump());
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ConfigValidationError);
    }
  };
  expect_invalid({{"trian", json::object()}});
  expect_invalid({{"paths", {{"rastr", "x.tif"}}}});
  expect_invalid({{"train", {{"epochs", "ten"}}}});
  expect_invalid({{"train", {{"regime", "fully_supervised"}}}});
  expect_invalid({{"maskgen", {{"class_priority", {"Buildings", "Roads"}}}}});
  expect_invalid({{"eval", {{"thresholds", {0.4, 1.5}}}}});
  expect_invalid({{"chipper", {{"stride", 0}}}});
  expect_invalid({{"synth", {{"rows", 100}}}});
  expect_invalid(json::array());
}

TEST_CASE("dotted overrides") {
  json doc = json::object();
  apply_override(doc, "train.epochs=7");
  apply_override(doc, "train.rampup_length=3");
  apply_override(doc, "train.regime=unet_wce");
  apply_override(doc, "eval.thresholds=[0.3,0.6]");
  apply_override(doc, "paths.work_dir=out dir");
  CHECK(doc["train"]["epochs"] == 7);
  CHECK(doc["train"]["regime"] == "unet_wce");
  const auto c = ExperimentConfig::from_json(doc);
  CHECK(c.train.epochs == 7);
  CHECK(c.train.regime == Regime::UnetWce);
  CHECK(c.eval.thresholds == std::vector<double>{0.3, 0.6});
  CHECK(c.paths.work_dir == "out dir");
  CHECK(c.synth_dir() == std::filesystem::path("out dir") / "synth");
  CHECK_THROWS_AS(apply_override(doc, "novalue"), Error);
  CHECK_THROWS_AS(apply_override(doc, "train..epochs=1"), Error);
  CHECK_THROWS_AS(apply_override(doc, "train.epochs.x=1"), Error);
}

TEST_CASE("load_config reads a file and applies overrides last") {
  fixture::TempDir tmp("cfg");
  {
    std::ofstream f(tmp.path() / "c.json");
    f << R"({"train": {"epochs": 3, "rampup_length": 2, "seed_pair": [5, 6]}})";
  }
  const auto c = load_config(tmp.path() / "c.json", {"train.epochs=9"});
  CHECK(c.train.epochs == 9);
  CHECK(c.train.seed_pair[0] == 5);
  {
    std::ofstream f(tmp.path() / "broken.json");
    f << "{\"train\": ";
  }
  try {
    load_config(tmp.path() / "broken.json");
    FAIL("expected ConfigValidationError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigValidationError);
  }
}

TEST_CASE("stage names") {
  for (auto s : {Stage::Synth, Stage::Rasterize, Stage::Chip, Stage::Train, Stage::Predict,
                 Stage::Merge, Stage::Evaluate}) {
    CHECK(parse_stage(to_string(s)) == s);
  }
  CHECK_THROWS_AS(parse_stage("deploy"), Error);
  CHECK(pipeline_stages().front() == Stage::Rasterize);
  CHECK(pipeline_stages().back() == Stage::Evaluate);
}

TEST_CASE("directory lock is exclusive and released") {
  fixture::TempDir tmp("lock");
  {
    DirLock a(tmp.path());
    CHECK_THROWS_AS(DirLock(tmp.path()), Error);
  }
  CHECK_NOTHROW(DirLock(tmp.path()));
}

TEST_CASE("stages run, stamp, skip and match a manual run") {
  fixture::TempDir tmp("stages");
  const Logger quiet(Logger::Level::Error);
  const auto cfg = tiny_experiment(tmp.path());
  run_stage(Stage::Synth, cfg, quiet);
  for (auto s : pipeline_stages()) {
    const auto out = run_stage(s, cfg, quiet);
    CHECK_FALSE(out.skipped);
    CHECK(std::filesystem::exists(tmp.path() / "work" / std::string(to_string(s)) / "resolved_config.json"));
  }
  const auto report = slurp(tmp.path() / "work" / "evaluate" / "recall.json");
  const auto parsed = json::parse(report);
  CHECK(parsed["recall"].contains("Buildings"));
  CHECK(parsed["recall"]["Buildings"].contains("0.4"));
  CHECK(parsed["recall"]["Buildings"].contains("0.5"));

  for (auto s : pipeline_stages()) CHECK(run_stage(s, cfg, quiet).skipped);
  CHECK_FALSE(run_stage(Stage::Evaluate, cfg, quiet, true).skipped);
  CHECK(slurp(tmp.path() / "work" / "evaluate" / "recall.json") == report);

  // Changing an upstream setting invalidates everything downstream of it.
  auto changed = cfg;
  changed.eval.thresholds = {0.3};
  CHECK(run_stage(Stage::Merge, changed, quiet).skipped);
  CHECK_FALSE(run_stage(Stage::Evaluate, changed, quiet).skipped);

  // A second work directory, same config: identical report.
  auto second = cfg;
  second.paths.work_dir = tmp.path() / "work2";
  for (auto s : pipeline_stages()) run_stage(s, second, quiet);
  CHECK(slurp(tmp.path() / "work2" / "evaluate" / "recall.json") == report);
}

TEST_CASE("downstream stage without its upstream fails") {
  fixture::TempDir tmp("orphan");
  const auto cfg = tiny_experiment(tmp.path());
  CHECK_THROWS_AS(run_stage(Stage::Train, cfg, Logger(Logger::Level::Error)), Error);
}
