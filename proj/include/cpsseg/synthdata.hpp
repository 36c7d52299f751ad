#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cpsseg/geo_core.hpp"
#include "cpsseg/geojson.hpp"
#include "json.hpp"

namespace cpsseg {

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t rows = 512;
  std::size_t cols = 512;
  int n_buildings = 40;
  int n_roads = 6;
  int n_water = 4;
  int n_tree_patches = 8;
  double sparsity = 0.0;  // fraction of objects withheld per class
  double noise_sigma = 0.0;
  int road_buffer_px = 3;
  double origin_x = 500000.0;
  double origin_y = 4000000.0;
  double pixel_size = 1.0;
  std::string crs_id = "EPSG:32643";

  // Throws SpecTooSmall below 256 x 256, InvalidArgument otherwise.
  void validate() const;
  AffineGeoTransform transform() const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys throw ConfigValidationError.
  static SceneSpec from_json(const nlohmann::json& j);
};

struct Scene {
  GeoRaster raster;  // NIR, R, G, B in [0, 1]
  LabelMask dense;
  // Labelled vectors left after sparsification.
  std::vector<VectorFeature> buildings;
  std::vector<VectorFeature> roads;
  std::vector<VectorFeature> water;
  // Objects placed per class before sparsification (buildings, roads, water).
  std::array<std::size_t, 3> placed{};
};

// Nominal reflectance per class, band order NIR, R, G, B.
std::array<float, kImageBands> class_spectrum(LandClass c);

// Number of objects kept out of n at the given sparsity.
std::size_t retained_count(std::size_t n, double sparsity);

Scene generate_scene(const SceneSpec& spec);

}  // namespace cpsseg
