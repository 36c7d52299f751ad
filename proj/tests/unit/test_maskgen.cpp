#include "doctest.h"

#include <cmath>
#include <random>

#include "cpsseg/maskgen.hpp"

using namespace cpsseg;

namespace {

const AffineGeoTransform kId = AffineGeoTransform::identity();

// Identity transform maps pixel (row, col) to world (col, -row).
WorldPoint at(double row, double col) { return {col, -row}; }

VectorFeature line(std::vector<WorldPoint> pts) { return {LineString{std::move(pts)}, LandClass::Roads}; }

VectorFeature polygon(std::vector<Ring> rings) { return {Polygon{std::move(rings)}, LandClass::Buildings}; }

Ring rect(double r0, double c0, double r1, double c1) {
  return {at(r0, c0), at(r0, c1), at(r1, c1), at(r1, c0), at(r0, c0)};
}

// Brute-force oracle: distance from every pixel center to every segment.
std::size_t line_oracle(const std::vector<std::vector<PixelPoint>>& lines, RasterShape s, double buf) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < s.rows; ++r) {
    for (std::size_t c = 0; c < s.cols; ++c) {
      const double pr = r + 0.5, pc = c + 0.5;
      bool hit = false;
      for (const auto& l : lines) {
        for (std::size_t i = 0; i < l.size() && !hit; ++i) {
          const auto& a = l[i];
          const auto& b = i + 1 < l.size() ? l[i + 1] : l[i];
          const double vr = b.row - a.row, vc = b.col - a.col;
          const double L = vr * vr + vc * vc;
          double u = L > 0 ? ((pr - a.row) * vr + (pc - a.col) * vc) / L : 0.0;
          u = std::min(1.0, std::max(0.0, u));
          const double dr = pr - a.row - u * vr, dc = pc - a.col - u * vc;
          hit = std::sqrt(dr * dr + dc * dc) <= buf + 1e-9;
        }
      }
      n += hit;
    }
  }
  return n;
}

// PNPOLY even-odd oracle over pixel-space rings.
bool inside(const std::vector<PixelPoint>& ring, double r, double c) {
  bool in = false;
  for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
    const auto& a = ring[i];
    const auto& b = ring[j];
    if ((a.row > r) != (b.row > r) && c < (b.col - a.col) * (r - a.row) / (b.row - a.row) + a.col) {
      in = !in;
    }
  }
  return in;
}

GeoRaster two_band(float nir, float red) {
  GeoRaster r(4, {1, 1}, kId);
  r.at(0, 0, 0) = nir;
  r.at(1, 0, 0) = red;
  return r;
}

template <typename F>
void expect_code(ErrorCode code, F&& f) {
  try {
    f();
    FAIL("expected " << to_string(code));
  } catch (const Error& e) {
    CHECK(e.code() == code);
  }
}

}  // namespace

TEST_CASE("rasterize_lines examples") {
  const RasterShape s{100, 40};
  CHECK(rasterize_lines({}, kId, s).count() == 0);

  const std::vector<VectorFeature> seg{line({at(50.5, 10.5), at(50.5, 20.5)})};
  const auto m = rasterize_lines(seg, kId, s, 3);
  CHECK(m.count() == line_oracle({{{50.5, 10.5}, {50.5, 20.5}}}, s, 3));
  for (std::size_t r = 0; r < s.rows; ++r) {
    if (std::abs(static_cast<double>(r) - 50.0) > 3.0) {
      for (std::size_t c = 0; c < s.cols; ++c) CHECK(m.values(r, c) == 0);
    }
  }
  for (std::size_t r = 47; r <= 53; ++r)
    for (std::size_t c = 10; c <= 20; ++c) CHECK(m.values(r, c) == 1);

  const std::vector<VectorFeature> dot{line({at(50.5, 20.5)})};
  CHECK(rasterize_lines(dot, kId, s, 3).count() == 29);
  CHECK(rasterize_lines(dot, kId, s, 0).count() == 1);
}

TEST_CASE("rasterize_lines matches brute force on random polylines") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-5.0, 70.0);
  const RasterShape s{64, 64};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<VectorFeature> fs;
    std::vector<std::vector<PixelPoint>> px;
    for (int k = 0; k < 3; ++k) {
      std::vector<WorldPoint> pts;
      std::vector<PixelPoint> pp;
      for (int i = 0; i < 3; ++i) {
        const double r = u(rng), c = u(rng);
        pts.push_back(at(r, c));
        pp.push_back({r, c});
      }
      fs.push_back(line(pts));
      px.push_back(pp);
    }
    const int buf = trial % 5;
    CHECK(rasterize_lines(fs, kId, s, buf).count() == line_oracle(px, s, buf));
  }
}

TEST_CASE("rasterize_polygons examples") {
  const RasterShape s{20, 20};
  CHECK(rasterize_polygons({}, kId, s).count() == 0);

  // Pixel centers rows 2..5, cols 3..8.
  const std::vector<VectorFeature> r{polygon({rect(2.0, 3.0, 6.0, 9.0)})};
  const auto m = rasterize_polygons(r, kId, s);
  CHECK(m.count() == 24);
  for (std::size_t row = 2; row <= 5; ++row)
    for (std::size_t col = 3; col <= 8; ++col) CHECK(m.values(row, col) == 1);

  const std::vector<VectorFeature> holed{polygon({rect(0, 0, 10, 10), rect(3, 3, 7, 7)})};
  CHECK(rasterize_polygons(holed, kId, s).count() == 100 - 16);

  const std::vector<VectorFeature> multi{
      {MultiPolygon{{Polygon{{rect(0, 0, 2, 2)}}, Polygon{{rect(10, 10, 13, 13)}}}}, LandClass::Water}};
  CHECK(rasterize_polygons(multi, kId, s).count() == 4 + 9);
}

TEST_CASE("rasterize_polygons matches PNPOLY on random star polygons") {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> ang(0.0, 0.3), rad(3.0, 20.0);
  const RasterShape s{48, 48};
  for (int trial = 0; trial < 20; ++trial) {
    Ring ring;
    std::vector<PixelPoint> px;
    double a = 0.0;
    while (a < 2 * M_PI - 0.3) {
      const double rr = rad(rng);
      const double r = 24.3 + rr * std::sin(a), c = 23.7 + rr * std::cos(a);
      ring.push_back(at(r, c));
      px.push_back({r, c});
      a += 0.2 + ang(rng);
    }
    ring.push_back(ring.front());
    px.push_back(px.front());
    const auto m = rasterize_polygons(std::vector{polygon({ring})}, kId, s);
    std::size_t expect = 0, agree = 0;
    for (std::size_t r = 0; r < s.rows; ++r) {
      for (std::size_t c = 0; c < s.cols; ++c) {
        const bool in = inside(px, r + 0.5, c + 0.5);
        expect += in;
        agree += (m.values(r, c) == 1) == in;
      }
    }
    CHECK(agree == s.area());
    CHECK(m.count() == expect);
  }
}

TEST_CASE("rasterizer errors") {
  const RasterShape s{4, 4};
  const std::vector<VectorFeature> poly{polygon({rect(0, 0, 2, 2)})};
  const std::vector<VectorFeature> seg{line({at(0, 0), at(1, 1)})};
  expect_code(ErrorCode::GeometryTypeError, [&] { rasterize_lines(poly, kId, s); });
  expect_code(ErrorCode::GeometryTypeError, [&] { rasterize_polygons(seg, kId, s); });
  expect_code(ErrorCode::EmptyShape, [&] { rasterize_lines(seg, kId, {0, 4}); });
  Ring open = rect(0, 0, 2, 2);
  open.pop_back();
  const std::vector<VectorFeature> bad{polygon({open})};
  expect_code(ErrorCode::UnclosedRing, [&] { rasterize_polygons(bad, kId, s); });
}

TEST_CASE("ndvi_mask thresholds strictly") {
  CHECK(ndvi_mask(two_band(0.5f, 0.5f)).count() == 1);
  CHECK(ndvi_mask(two_band(0.0f, 1.0f)).count() == 0);
  CHECK(ndvi_mask(two_band(0.0f, 0.0f)).count() == 0);
  // Exactly -0.1 in double arithmetic.
  GeoRaster r(4, {1, 1}, kId);
  r.at(0, 0, 0) = 0.45f;
  r.at(1, 0, 0) = 0.55f;
  const double nd = (0.45f - 0.55f) / (0.45f + 0.55f);
  CHECK(ndvi_mask(r).count() == (nd > -0.1 ? 1u : 0u));
  CHECK(ndvi_mask(r, nd).count() == 0);

  auto nodata = two_band(0.9f, 0.1f);
  nodata.nodata_mask()(0, 0) = 1;
  CHECK(ndvi_mask(nodata).count() == 0);
  expect_code(ErrorCode::MissingBand, [] { ndvi_mask(GeoRaster(1, {1, 1}, kId)); });
}

TEST_CASE("merge_masks priority") {
  const RasterShape s{1, 4};
  auto mk = [&](std::initializer_list<int> v) {
    BinaryMask m{Grid<std::uint8_t>(s, 0), kId};
    std::size_t i = 0;
    for (int x : v) m.values.values()[i++] = static_cast<std::uint8_t>(x);
    return m;
  };
  // pixel 0: nothing; 1: buildings+trees; 2: water only; 3: roads+water+trees
  const auto b = mk({0, 1, 0, 0}), r = mk({0, 0, 0, 1}), t = mk({0, 1, 0, 1}), w = mk({0, 0, 1, 1});
  const auto out = merge_masks(b, r, t, w);
  CHECK(out.classes(0, 0) == 4);
  CHECK(out.classes(0, 1) == 0);
  CHECK(out.classes(0, 2) == 3);
  CHECK(out.classes(0, 3) == 3);
  const std::vector<std::string> names{"trees", "Roads", "WATER", "buildings"};
  const auto p = parse_priority(names);
  CHECK(merge_masks(b, r, t, w, p).classes(0, 1) == 2);
  CHECK(merge_masks(b, r, t, w, p).classes(0, 3) == 2);

  BinaryMask other{Grid<std::uint8_t>({2, 2}, 0), kId};
  expect_code(ErrorCode::ShapeMismatch, [&] { merge_masks(b, r, t, other); });
  BinaryMask moved = w;
  moved.transform.origin_x = 5;
  expect_code(ErrorCode::TransformMismatch, [&] { merge_masks(b, r, t, moved); });
  const std::vector<std::string> dup{"trees", "trees", "water", "roads"};
  CHECK_THROWS_AS(parse_priority(dup), Error);
}
