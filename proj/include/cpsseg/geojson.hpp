#pragma once

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "cpsseg/geo_core.hpp"

namespace cpsseg {

using Ring = std::vector<WorldPoint>;

struct LineString {
  std::vector<WorldPoint> points;
};

// First ring is the exterior, the rest are holes.
struct Polygon {
  std::vector<Ring> rings;
};

struct MultiPolygon {
  std::vector<Polygon> polygons;
};

using Geometry = std::variant<LineString, Polygon, MultiPolygon>;

struct VectorFeature {
  Geometry geometry;
  LandClass class_tag = LandClass::Other;
};

namespace geojson {

// Parses a FeatureCollection, Feature, or bare geometry. MultiLineString
// features are split into one LineString each. Every feature is tagged with
// class_tag. Other geometry types raise GeometryTypeError.
std::vector<VectorFeature> parse(const std::string& text, LandClass class_tag);
std::vector<VectorFeature> read(const std::filesystem::path& path, LandClass class_tag);

std::string dump(const std::vector<VectorFeature>& features);
void write(const std::filesystem::path& path, const std::vector<VectorFeature>& features);

}  // namespace geojson
}  // namespace cpsseg
