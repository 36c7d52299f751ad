#include "cpsseg/maskgen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

namespace cpsseg {
namespace {

// Absorbs round-off from world/pixel projection on exact-boundary pixels.
constexpr double kDistanceSlack = 1e-9;

PixelPoint project(const AffineGeoTransform& t, const WorldPoint& p) {
  return world_to_pixel(t, p.x, p.y);
}

double segment_distance_sq(double pr, double pc, const PixelPoint& a, const PixelPoint& b) {
  const double dr = b.row - a.row, dc = b.col - a.col;
  const double len_sq = dr * dr + dc * dc;
  double s = 0.0;
  if (len_sq > 0.0) {
    s = ((pr - a.row) * dr + (pc - a.col) * dc) / len_sq;
    s = std::clamp(s, 0.0, 1.0);
  }
  const double er = pr - (a.row + s * dr);
  const double ec = pc - (a.col + s * dc);
  return er * er + ec * ec;
}

void burn_segment(Grid<std::uint8_t>& grid, const PixelPoint& a, const PixelPoint& b,
                  double radius) {
  const auto rows = static_cast<long>(grid.rows());
  const auto cols = static_cast<long>(grid.cols());
  // Pixel (r, c) has its center at (r + 0.5, c + 0.5).
  const long r0 = std::max(0L, static_cast<long>(std::floor(std::min(a.row, b.row) - radius - 0.5)));
  const long r1 = std::min(rows - 1, static_cast<long>(std::ceil(std::max(a.row, b.row) + radius - 0.5)));
  const long c0 = std::max(0L, static_cast<long>(std::floor(std::min(a.col, b.col) - radius - 0.5)));
  const long c1 = std::min(cols - 1, static_cast<long>(std::ceil(std::max(a.col, b.col) + radius - 0.5)));
  const double limit = radius * radius + kDistanceSlack;
  for (long r = r0; r <= r1; ++r) {
    for (long c = c0; c <= c1; ++c) {
      if (grid(r, c)) continue;
      if (segment_distance_sq(r + 0.5, c + 0.5, a, b) <= limit) grid(r, c) = 1;
    }
  }
}

void check_ring(const Ring& ring) {
  if (ring.empty()) return;
  const auto& f = ring.front();
  const auto& l = ring.back();
  if (ring.size() < 2 || f.x != l.x || f.y != l.y) {
    throw Error(ErrorCode::UnclosedRing, "polygon ring is not closed");
  }
}

// Scanline even-odd fill; the crossing test matches the classic PNPOLY
// predicate evaluated at every pixel center.
void fill_polygon(Grid<std::uint8_t>& grid, const AffineGeoTransform& t, const Polygon& poly) {
  std::vector<std::vector<PixelPoint>> rings;
  double min_r = std::numeric_limits<double>::infinity();
  double max_r = -min_r;
  for (const auto& ring : poly.rings) {
    check_ring(ring);
    std::vector<PixelPoint> px;
    px.reserve(ring.size());
    for (const auto& p : ring) {
      px.push_back(project(t, p));
      min_r = std::min(min_r, px.back().row);
      max_r = std::max(max_r, px.back().row);
    }
    rings.push_back(std::move(px));
  }
  if (rings.empty() || !std::isfinite(min_r)) return;
  const auto rows = static_cast<long>(grid.rows());
  const auto cols = static_cast<long>(grid.cols());
  const long r0 = std::max(0L, static_cast<long>(std::floor(min_r - 0.5)));
  const long r1 = std::min(rows - 1, static_cast<long>(std::ceil(max_r)));
  std::vector<double> xs;
  for (long r = r0; r <= r1; ++r) {
    const double y = r + 0.5;
    xs.clear();
    for (const auto& ring : rings) {
      const std::size_t n = ring.size();
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const PixelPoint& pi = ring[i];
        const PixelPoint& pj = ring[j];
        if ((pi.row > y) != (pj.row > y)) {
          xs.push_back((pj.col - pi.col) * (y - pi.row) / (pj.row - pi.row) + pi.col);
        }
      }
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // Centers cx with xs[k] <= cx < xs[k+1].
      long c_begin = static_cast<long>(std::ceil(xs[k] - 0.5));
      long c_end = static_cast<long>(std::ceil(xs[k + 1] - 0.5));
      c_begin = std::max(c_begin, 0L);
      c_end = std::min(c_end, cols);
      for (long c = c_begin; c < c_end; ++c) grid(r, c) = 1;
    }
  }
}

}  // namespace

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(
      std::count(values.values().begin(), values.values().end(), std::uint8_t{1}));
}

BinaryMask rasterize_lines(std::span<const VectorFeature> features,
                           const AffineGeoTransform& transform, RasterShape shape,
                           int buffer_px) {
  require(shape.area() > 0, ErrorCode::EmptyShape, "raster shape has zero size");
  require(buffer_px >= 0, ErrorCode::InvalidArgument, "buffer_px must be >= 0");
  transform.validate();
  BinaryMask mask{Grid<std::uint8_t>(shape, 0), transform};
  for (const auto& f : features) {
    const auto* line = std::get_if<LineString>(&f.geometry);
    if (!line) throw Error(ErrorCode::GeometryTypeError, "rasterize_lines expects LineStrings");
    if (line->points.empty()) continue;
    std::vector<PixelPoint> px;
    px.reserve(line->points.size());
    for (const auto& p : line->points) px.push_back(project(transform, p));
    if (px.size() == 1) {
      burn_segment(mask.values, px[0], px[0], buffer_px);
      continue;
    }
    for (std::size_t i = 0; i + 1 < px.size(); ++i) {
      burn_segment(mask.values, px[i], px[i + 1], buffer_px);
    }
  }
  return mask;
}

BinaryMask rasterize_polygons(std::span<const VectorFeature> features,
                              const AffineGeoTransform& transform, RasterShape shape) {
  require(shape.area() > 0, ErrorCode::EmptyShape, "raster shape has zero size");
  transform.validate();
  BinaryMask mask{Grid<std::uint8_t>(shape, 0), transform};
  for (const auto& f : features) {
    if (const auto* poly = std::get_if<Polygon>(&f.geometry)) {
      fill_polygon(mask.values, transform, *poly);
    } else if (const auto* mp = std::get_if<MultiPolygon>(&f.geometry)) {
      for (const auto& p : mp->polygons) fill_polygon(mask.values, transform, p);
    } else {
      throw Error(ErrorCode::GeometryTypeError, "rasterize_polygons expects (Multi)Polygons");
    }
  }
  return mask;
}

BinaryMask ndvi_mask(const GeoRaster& raster, double threshold) {
  require(raster.band_count() >= 2, ErrorCode::MissingBand,
          "NDVI needs NIR and red bands, raster has " + std::to_string(raster.band_count()));
  require(threshold >= -1.0 && threshold <= 1.0, ErrorCode::InvalidArgument,
          "NDVI threshold must lie in [-1, 1]");
  BinaryMask mask{Grid<std::uint8_t>(raster.shape(), 0), raster.transform()};
  const auto nir = raster.band(static_cast<std::size_t>(Band::Nir));
  const auto red = raster.band(static_cast<std::size_t>(Band::Red));
  const auto& nodata = raster.nodata_mask().storage();
  auto out = mask.values.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (nodata[i]) continue;
    const double n = nir[i], r = red[i];
    const double sum = n + r;
    if (sum == 0.0 || !std::isfinite(sum)) continue;
    out[i] = (n - r) / sum > threshold ? 1 : 0;
  }
  return mask;
}

LabelMask merge_masks(const BinaryMask& buildings, const BinaryMask& roads,
                      const BinaryMask& trees, const BinaryMask& water,
                      const ClassPriority& priority) {
  const std::array<const BinaryMask*, 4> by_class = {&buildings, &roads, &trees, &water};
  for (const auto* m : by_class) {
    require(m->shape() == buildings.shape(), ErrorCode::ShapeMismatch, "mask shapes differ");
    require(m->transform == buildings.transform, ErrorCode::TransformMismatch,
            "mask transforms differ");
  }
  {
    std::array<LandClass, 4> sorted = priority;
    std::sort(sorted.begin(), sorted.end());
    require(sorted == std::array<LandClass, 4>{LandClass::Buildings, LandClass::Roads,
                                               LandClass::Trees, LandClass::Water},
            ErrorCode::InvalidArgument, "priority must list each mapped class once");
  }
  LabelMask out{Grid<std::uint8_t>(buildings.shape(), static_cast<std::uint8_t>(LandClass::Other)),
                buildings.transform, {}};
  auto dst = out.classes.values();
  // Paint lowest priority first so higher classes overwrite.
  for (auto it = priority.rbegin(); it != priority.rend(); ++it) {
    const auto cls = static_cast<std::uint8_t>(*it);
    const auto src = by_class[cls]->values.values();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (src[i]) dst[i] = cls;
    }
  }
  return out;
}

ClassMasks build_label_mask(const GeoRaster& raster, std::span<const VectorFeature> buildings,
                            std::span<const VectorFeature> roads,
                            std::span<const VectorFeature> water, const MaskOptions& options) {
  const auto& t = raster.transform();
  const auto shape = raster.shape();
  ClassMasks m{rasterize_polygons(buildings, t, shape),
               rasterize_lines(roads, t, shape, options.buffer_px),
               ndvi_mask(raster, options.ndvi_threshold),
               rasterize_polygons(water, t, shape),
               {}};
  m.merged = merge_masks(m.buildings, m.roads, m.trees, m.water, options.priority);
  m.merged.crs_id = raster.crs_id();
  return m;
}

ClassPriority parse_priority(std::span<const std::string> names) {
  require(names.size() == 4, ErrorCode::InvalidArgument,
          "class priority must name exactly four classes");
  ClassPriority p{};
  for (std::size_t i = 0; i < 4; ++i) {
    std::string lower = names[i];
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (lower == "buildings") p[i] = LandClass::Buildings;
    else if (lower == "roads") p[i] = LandClass::Roads;
    else if (lower == "trees") p[i] = LandClass::Trees;
    else if (lower == "water") p[i] = LandClass::Water;
    else throw Error(ErrorCode::InvalidArgument, "unknown class '" + names[i] + "'");
    for (std::size_t j = 0; j < i; ++j) {
      if (p[j] == p[i]) throw Error(ErrorCode::InvalidArgument, "class '" + names[i] + "' listed twice");
    }
  }
  return p;
}

}  // namespace cpsseg
