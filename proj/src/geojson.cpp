#include "cpsseg/geojson.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace cpsseg::geojson {
namespace {

using nlohmann::json;

WorldPoint parse_position(const json& p) {
  if (!p.is_array() || p.size() < 2 || !p[0].is_number() || !p[1].is_number()) {
    throw Error(ErrorCode::FormatError, "GeoJSON position must be [x, y, ...]");
  }
  return {p[0].get<double>(), p[1].get<double>()};
}

std::vector<WorldPoint> parse_positions(const json& arr) {
  if (!arr.is_array()) throw Error(ErrorCode::FormatError, "expected coordinate array");
  std::vector<WorldPoint> out;
  out.reserve(arr.size());
  for (const auto& p : arr) out.push_back(parse_position(p));
  return out;
}

Polygon parse_polygon(const json& coords) {
  if (!coords.is_array()) throw Error(ErrorCode::FormatError, "expected ring array");
  Polygon poly;
  for (const auto& ring : coords) poly.rings.push_back(parse_positions(ring));
  return poly;
}

void parse_geometry(const json& g, LandClass tag, std::vector<VectorFeature>& out) {
  if (g.is_null()) return;
  const std::string type = g.value("type", "");
  if (type == "GeometryCollection") {
    for (const auto& sub : g.at("geometries")) parse_geometry(sub, tag, out);
    return;
  }
  const json& coords = g.at("coordinates");
  if (type == "LineString") {
    out.push_back({LineString{parse_positions(coords)}, tag});
  } else if (type == "MultiLineString") {
    for (const auto& line : coords) out.push_back({LineString{parse_positions(line)}, tag});
  } else if (type == "Polygon") {
    out.push_back({parse_polygon(coords), tag});
  } else if (type == "MultiPolygon") {
    MultiPolygon mp;
    for (const auto& poly : coords) mp.polygons.push_back(parse_polygon(poly));
    out.push_back({std::move(mp), tag});
  } else {
    throw Error(ErrorCode::GeometryTypeError, "unsupported GeoJSON geometry '" + type + "'");
  }
}

json positions_json(const std::vector<WorldPoint>& pts) {
  json arr = json::array();
  for (const auto& p : pts) arr.push_back({p.x, p.y});
  return arr;
}

json polygon_json(const Polygon& poly) {
  json rings = json::array();
  for (const auto& r : poly.rings) rings.push_back(positions_json(r));
  return rings;
}

}  // namespace

std::vector<VectorFeature> parse(const std::string& text, LandClass class_tag) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::FormatError, std::string("invalid GeoJSON: ") + e.what());
  }
  std::vector<VectorFeature> out;
  try {
    const std::string type = doc.value("type", "");
    if (type == "FeatureCollection") {
      for (const auto& f : doc.at("features")) parse_geometry(f.at("geometry"), class_tag, out);
    } else if (type == "Feature") {
      parse_geometry(doc.at("geometry"), class_tag, out);
    } else {
      parse_geometry(doc, class_tag, out);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("malformed GeoJSON: ") + e.what());
  }
  return out;
}

std::vector<VectorFeature> read(const std::filesystem::path& path, LandClass class_tag) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), class_tag);
}

std::string dump(const std::vector<VectorFeature>& features) {
  json fc = {{"type", "FeatureCollection"}, {"features", json::array()}};
  for (const auto& f : features) {
    json geom;
    if (const auto* ls = std::get_if<LineString>(&f.geometry)) {
      geom = {{"type", "LineString"}, {"coordinates", positions_json(ls->points)}};
    } else if (const auto* poly = std::get_if<Polygon>(&f.geometry)) {
      geom = {{"type", "Polygon"}, {"coordinates", polygon_json(*poly)}};
    } else {
      const auto& mp = std::get<MultiPolygon>(f.geometry);
      json polys = json::array();
      for (const auto& p : mp.polygons) polys.push_back(polygon_json(p));
      geom = {{"type", "MultiPolygon"}, {"coordinates", polys}};
    }
    fc["features"].push_back({{"type", "Feature"},
                              {"properties", {{"class", std::string(class_name(f.class_tag))}}},
                              {"geometry", geom}});
  }
  return fc.dump();
}

void write(const std::filesystem::path& path, const std::vector<VectorFeature>& features) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot create " + path.string());
  out << dump(features) << '\n';
}

}  // namespace cpsseg::geojson
