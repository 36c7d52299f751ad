#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "cpsseg/geo_core.hpp"
#include "cpsseg/geojson.hpp"

namespace cpsseg {

struct BinaryMask {
  Grid<std::uint8_t> values;  // 0 or 1
  AffineGeoTransform transform;

  RasterShape shape() const { return values.shape(); }
  std::size_t count() const;
};

// Overlap resolution order for merge_masks, highest priority first.
using ClassPriority = std::array<LandClass, 4>;
inline constexpr ClassPriority kDefaultPriority = {LandClass::Buildings, LandClass::Water,
                                                   LandClass::Roads, LandClass::Trees};

// Marks every pixel whose center lies within buffer_px (pixel units,
// Euclidean) of any projected polyline.
BinaryMask rasterize_lines(std::span<const VectorFeature> features,
                           const AffineGeoTransform& transform, RasterShape shape,
                           int buffer_px = 3);

// Marks pixel centers inside the polygons (even-odd rule per polygon, so
// holes are excluded; polygons of a MultiPolygon are unioned).
BinaryMask rasterize_polygons(std::span<const VectorFeature> features,
                              const AffineGeoTransform& transform, RasterShape shape);

// 1 where (NIR - R) / (NIR + R) > threshold; 0 for nodata and NIR + R == 0.
BinaryMask ndvi_mask(const GeoRaster& raster, double threshold = -0.1);

LabelMask merge_masks(const BinaryMask& buildings, const BinaryMask& roads,
                      const BinaryMask& trees, const BinaryMask& water,
                      const ClassPriority& priority = kDefaultPriority);

struct MaskOptions {
  int buffer_px = 3;
  double ndvi_threshold = -0.1;
  ClassPriority priority = kDefaultPriority;
};

struct ClassMasks {
  BinaryMask buildings, roads, trees, water;
  LabelMask merged;
};

// Rasterizes the vector layers onto the raster grid, derives Trees from
// NDVI and merges everything by priority.
ClassMasks build_label_mask(const GeoRaster& raster, std::span<const VectorFeature> buildings,
                            std::span<const VectorFeature> roads,
                            std::span<const VectorFeature> water, const MaskOptions& options = {});

// Parses "Buildings,Water,Roads,Trees"-style lists (case-insensitive).
ClassPriority parse_priority(std::span<const std::string> names);

}  // namespace cpsseg
