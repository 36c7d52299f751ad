#include "cpsseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "cpsseg/maskgen.hpp"

namespace cpsseg {
namespace {

// Portable draws; std distributions differ across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(eng_() % n); }
  double normal() {
    if (spare_) {
      spare_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    cached_ = r * std::sin(2.0 * std::numbers::pi * u2);
    spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 eng_;
  bool spare_ = false;
  double cached_ = 0.0;
};

constexpr std::uint64_t kObjectStream = 0x0b7ec75ULL;
constexpr std::uint64_t kNoiseStream = 0x5eed0f0015eULL;
constexpr std::uint64_t kSparsityStream = 0x5ba75e11ULL;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  return seed * 0x9E3779B97F4A7C15ULL ^ stream;
}

struct Placer {
  const SceneSpec& spec;
  AffineGeoTransform t;
  Rng rng;

  WorldPoint at(double row, double col) const { return pixel_to_world(t, row, col); }

  Polygon rectangle() {
    const double h = std::round(rng.uniform(10.0, 30.0));
    const double w = std::round(rng.uniform(10.0, 30.0));
    const double r0 = std::round(rng.uniform(0.0, static_cast<double>(spec.rows) - h));
    const double c0 = std::round(rng.uniform(0.0, static_cast<double>(spec.cols) - w));
    Ring ring{at(r0, c0), at(r0, c0 + w), at(r0 + h, c0 + w), at(r0 + h, c0), at(r0, c0)};
    return Polygon{{ring}};
  }

  // Star-shaped blob with a jittered radius.
  Polygon blob(double r_min, double r_max) {
    const double radius = rng.uniform(r_min, r_max);
    const double cr = rng.uniform(radius, static_cast<double>(spec.rows) - radius);
    const double cc = rng.uniform(radius, static_cast<double>(spec.cols) - radius);
    const int n = 12 + static_cast<int>(rng.index(6));
    Ring ring;
    for (int k = 0; k < n; ++k) {
      const double theta = 2.0 * std::numbers::pi * k / n;
      const double rad = radius * rng.uniform(0.7, 1.0);
      ring.push_back(at(cr + rad * std::sin(theta), cc + rad * std::cos(theta)));
    }
    ring.push_back(ring.front());
    return Polygon{{ring}};
  }

  // Polyline crossing the scene between two edges with one or two bends.
  LineString road() {
    const auto rows = static_cast<double>(spec.rows), cols = static_cast<double>(spec.cols);
    LineString line;
    const bool horizontal = rng.uniform() < 0.5;
    const int bends = 1 + static_cast<int>(rng.index(2));
    for (int k = 0; k <= bends + 1; ++k) {
      const double f = static_cast<double>(k) / (bends + 1);
      if (horizontal) {
        line.points.push_back(at(rng.uniform(0.1 * rows, 0.9 * rows), f * cols));
      } else {
        line.points.push_back(at(f * rows, rng.uniform(0.1 * cols, 0.9 * cols)));
      }
    }
    return line;
  }
};

std::vector<VectorFeature> tag(std::vector<Geometry> geoms, LandClass c) {
  std::vector<VectorFeature> out;
  for (auto& g : geoms) out.push_back(VectorFeature{std::move(g), c});
  return out;
}

// Keeps the first retained_count objects of a seeded permutation, in
// placement order. The permutation ignores sparsity, so kept sets nest.
std::vector<VectorFeature> sparsify(const std::vector<VectorFeature>& all, double sparsity,
                                    std::uint64_t seed, LandClass c) {
  Rng rng(stream_seed(seed, kSparsityStream + static_cast<std::uint64_t>(c)));
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  const std::size_t keep = retained_count(all.size(), sparsity);
  std::vector<char> kept(all.size(), 0);
  for (std::size_t i = 0; i < keep; ++i) kept[order[i]] = 1;
  std::vector<VectorFeature> out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (kept[i]) out.push_back(all[i]);
  }
  return out;
}

template <typename T>
void read_key(const nlohmann::json& v, T& out) {
  out = v.get<T>();
}

}  // namespace

std::array<float, kImageBands> class_spectrum(LandClass c) {
  switch (c) {
    case LandClass::Buildings: return {0.35f, 0.70f, 0.70f, 0.70f};
    case LandClass::Roads: return {0.06f, 0.22f, 0.22f, 0.24f};
    case LandClass::Trees: return {0.60f, 0.10f, 0.30f, 0.10f};
    case LandClass::Water: return {0.02f, 0.15f, 0.18f, 0.35f};
    case LandClass::Other: break;
  }
  return {0.12f, 0.32f, 0.28f, 0.22f};
}

std::size_t retained_count(std::size_t n, double sparsity) {
  require(sparsity >= 0.0 && sparsity <= 1.0, ErrorCode::InvalidArgument,
          "sparsity must lie in [0, 1]");
  // The epsilon absorbs representation error such as (1 - 0.7) * 10 = 2.9999...
  return static_cast<std::size_t>(std::floor((1.0 - sparsity) * static_cast<double>(n) + 1e-9));
}

void SceneSpec::validate() const {
  require(rows >= 256 && cols >= 256, ErrorCode::SpecTooSmall,
          "scene must be at least 256 x 256 to yield chips");
  require(sparsity >= 0.0 && sparsity <= 1.0, ErrorCode::InvalidArgument,
          "sparsity must lie in [0, 1]");
  require(noise_sigma >= 0.0 && std::isfinite(noise_sigma), ErrorCode::InvalidArgument,
          "noise_sigma must be >= 0");
  require(n_buildings >= 0 && n_roads >= 0 && n_water >= 0 && n_tree_patches >= 0,
          ErrorCode::InvalidArgument, "object counts must be >= 0");
  require(road_buffer_px >= 0, ErrorCode::InvalidArgument, "road_buffer_px must be >= 0");
  require(pixel_size > 0.0, ErrorCode::InvalidArgument, "pixel_size must be > 0");
}

AffineGeoTransform SceneSpec::transform() const {
  AffineGeoTransform t;
  t.origin_x = origin_x;
  t.origin_y = origin_y;
  t.pixel_width = pixel_size;
  t.pixel_height = -pixel_size;
  return t;
}

nlohmann::json SceneSpec::to_json() const {
  return {{"seed", seed},
          {"rows", rows},
          {"cols", cols},
          {"n_buildings", n_buildings},
          {"n_roads", n_roads},
          {"n_water", n_water},
          {"n_tree_patches", n_tree_patches},
          {"sparsity", sparsity},
          {"noise_sigma", noise_sigma},
          {"road_buffer_px", road_buffer_px},
          {"origin_x", origin_x},
          {"origin_y", origin_y},
          {"pixel_size", pixel_size},
          {"crs_id", crs_id}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::ConfigValidationError, "scene spec must be an object");
  SceneSpec s;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") read_key(v, s.seed);
      else if (key == "rows") read_key(v, s.rows);
      else if (key == "cols") read_key(v, s.cols);
      else if (key == "n_buildings") read_key(v, s.n_buildings);
      else if (key == "n_roads") read_key(v, s.n_roads);
      else if (key == "n_water") read_key(v, s.n_water);
      else if (key == "n_tree_patches") read_key(v, s.n_tree_patches);
      else if (key == "sparsity") read_key(v, s.sparsity);
      else if (key == "noise_sigma") read_key(v, s.noise_sigma);
      else if (key == "road_buffer_px") read_key(v, s.road_buffer_px);
      else if (key == "origin_x") read_key(v, s.origin_x);
      else if (key == "origin_y") read_key(v, s.origin_y);
      else if (key == "pixel_size") read_key(v, s.pixel_size);
      else if (key == "crs_id") read_key(v, s.crs_id);
      else throw Error(ErrorCode::ConfigValidationError, "unknown key synth." + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigValidationError, std::string("synth config: ") + e.what());
  }
  return s;
}

Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  const AffineGeoTransform t = spec.transform();
  const RasterShape shape{spec.rows, spec.cols};
  Placer place{spec, t, Rng(stream_seed(spec.seed, kObjectStream))};

  std::vector<Geometry> b, r, w, tr;
  for (int i = 0; i < spec.n_buildings; ++i) b.emplace_back(place.rectangle());
  for (int i = 0; i < spec.n_roads; ++i) r.emplace_back(place.road());
  for (int i = 0; i < spec.n_water; ++i) w.emplace_back(place.blob(15.0, 35.0));
  for (int i = 0; i < spec.n_tree_patches; ++i) tr.emplace_back(place.blob(15.0, 40.0));

  const auto buildings = tag(std::move(b), LandClass::Buildings);
  const auto roads = tag(std::move(r), LandClass::Roads);
  const auto water = tag(std::move(w), LandClass::Water);
  const auto trees = tag(std::move(tr), LandClass::Trees);

  Scene scene;
  scene.dense = merge_masks(rasterize_polygons(buildings, t, shape),
                            rasterize_lines(roads, t, shape, spec.road_buffer_px),
                            rasterize_polygons(trees, t, shape), rasterize_polygons(water, t, shape));
  scene.dense.crs_id = spec.crs_id;

  // Pixels take the spectrum of their final class, so NDVI sees exactly the
  // visible Trees region.
  scene.raster = GeoRaster(kImageBands, shape, t, spec.crs_id);
  Rng noise(stream_seed(spec.seed, kNoiseStream));
  for (std::size_t band = 0; band < kImageBands; ++band) {
    for (std::size_t row = 0; row < spec.rows; ++row) {
      for (std::size_t col = 0; col < spec.cols; ++col) {
        const auto cls = static_cast<LandClass>(scene.dense.classes(row, col));
        double v = class_spectrum(cls)[band];
        if (spec.noise_sigma > 0.0) v = std::clamp(v + spec.noise_sigma * noise.normal(), 0.0, 1.0);
        scene.raster.at(band, row, col) = static_cast<float>(v);
      }
    }
  }

  scene.placed = {buildings.size(), roads.size(), water.size()};
  scene.buildings = sparsify(buildings, spec.sparsity, spec.seed, LandClass::Buildings);
  scene.roads = sparsify(roads, spec.sparsity, spec.seed, LandClass::Roads);
  scene.water = sparsify(water, spec.sparsity, spec.seed, LandClass::Water);
  return scene;
}

}  // namespace cpsseg
