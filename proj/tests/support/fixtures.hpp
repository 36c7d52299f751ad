#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "cpsseg/chipper.hpp"
#include "cpsseg/maskgen.hpp"
#include "cpsseg/synthdata.hpp"
#include "cpsseg/trainer.hpp"

namespace fixture {

// Small synthetic training set: 256x256 scene cut into 64-pixel chips.
inline cpsseg::ChipDataset small_dataset(std::uint64_t seed, std::size_t max_chips = 4,
                                         double sparsity = 0.0) {
  cpsseg::SceneSpec spec;
  spec.seed = seed;
  spec.rows = spec.cols = 256;
  spec.n_buildings = 20;
  spec.n_roads = 3;
  spec.n_water = 3;
  spec.n_tree_patches = 4;
  spec.sparsity = sparsity;
  spec.noise_sigma = 0.01;
  const auto scene = cpsseg::generate_scene(spec);
  const auto masks = cpsseg::build_label_mask(scene.raster, scene.buildings, scene.roads, scene.water);
  cpsseg::ChipOptions opts;
  opts.chip_size = 64;
  opts.stride = 64;
  auto ds = cpsseg::build_dataset(scene.raster, masks.merged, cpsseg::DatasetMode::Train, opts);
  if (ds.records.size() > max_chips) ds.records.resize(max_chips);
  return ds;
}

inline cpsseg::TrainConfig tiny_config(cpsseg::Regime regime, int epochs = 2) {
  cpsseg::TrainConfig c;
  c.regime = regime;
  c.epochs = epochs;
  c.rampup_length = std::min(1, epochs);
  c.batch_size = 2;
  c.width_multiplier = 0.25;
  c.optimizer = cpsseg::OptimizerKind::Adam;
  c.learning_rate = 1e-3;
  c.hausdorff.erosions = 3;
  return c;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("cpsseg_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture
