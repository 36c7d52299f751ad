#include "doctest.h"
#include "fixtures.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "cpsseg/geo_core.hpp"
#include "cpsseg/geojson.hpp"
#include "cpsseg/geotiff.hpp"

using namespace cpsseg;

namespace {

// Big-endian byte writer for hand-built TIFF fixtures.
struct BeWriter {
  std::vector<std::uint8_t> bytes;
  void u16(std::uint16_t v) {
    bytes.push_back(static_cast<std::uint8_t>(v >> 8));
    bytes.push_back(static_cast<std::uint8_t>(v));
  }
  void u32(std::uint32_t v) {
    u16(static_cast<std::uint16_t>(v >> 16));
    u16(static_cast<std::uint16_t>(v));
  }
  void f64(double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    u32(static_cast<std::uint32_t>(v >> 32));
    u32(static_cast<std::uint32_t>(v));
  }
  void entry(std::uint16_t tag, std::uint16_t type, std::uint32_t count, std::uint32_t value) {
    u16(tag);
    u16(type);
    u32(count);
    // SHORT scalars are left-justified in the value field.
    if (type == 3 && count == 1) {
      u16(static_cast<std::uint16_t>(value));
      u16(0);
    } else {
      u32(value);
    }
  }
};

}  // namespace

TEST_CASE("pixel_to_world and world_to_pixel examples") {
  const auto id = AffineGeoTransform::identity();
  auto w = pixel_to_world(id, 0, 0);
  CHECK(w.x == 0.0);
  CHECK(w.y == 0.0);
  const AffineGeoTransform t{100, 200, 2, -2, 0, 0};
  w = pixel_to_world(t, 1, 3);
  CHECK(w.x == 106.0);
  CHECK(w.y == 198.0);
  const auto p = world_to_pixel(t, 106, 198);
  CHECK(p.row == doctest::Approx(1.0));
  CHECK(p.col == doctest::Approx(3.0));
}

TEST_CASE("sheared transform inverts like a 2x2 solve") {
  const AffineGeoTransform t{10, 20, 1.5, -2.0, 0.3, -0.4};
  const double x = 7.25, y = -3.5;
  // x - ox = col*pw + row*cr ; y - oy = col*rr + row*ph
  const double a = t.pixel_width, b = t.col_rotation, c = t.row_rotation, d = t.pixel_height;
  const double det = a * d - b * c;
  const double col = ((x - t.origin_x) * d - b * (y - t.origin_y)) / det;
  const double row = (a * (y - t.origin_y) - c * (x - t.origin_x)) / det;
  const auto p = world_to_pixel(t, x, y);
  CHECK(p.row == doctest::Approx(row).epsilon(1e-12));
  CHECK(p.col == doctest::Approx(col).epsilon(1e-12));
}

TEST_CASE("roundtrip over random invertible transforms") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-5.0, 5.0), o(-1e6, 1e6), px(0.0, 5000.0);
  int done = 0;
  while (done < 1000) {
    const AffineGeoTransform t{o(rng), o(rng), u(rng), u(rng), u(rng) * 0.2, u(rng) * 0.2};
    if (std::abs(t.determinant()) < 1e-3) continue;
    const double r = std::floor(px(rng)), c = std::floor(px(rng));
    const auto w = pixel_to_world(t, r, c);
    const auto p = world_to_pixel(t, w.x, w.y);
    CHECK(std::abs(p.row - r) <= 1e-6);
    CHECK(std::abs(p.col - c) <= 1e-6);
    ++done;
  }
}

TEST_CASE("geo_core errors") {
  try {
    world_to_pixel({0, 0, 1, 1, 1, 1}, 0, 0);
    FAIL("expected SingularTransform");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SingularTransform);
  }
  CHECK_THROWS_AS((AffineGeoTransform{0, 0, 0, -1, 0, 0}.validate()), Error);
  LabelMask m{Grid<std::uint8_t>(2, 2, 4), AffineGeoTransform::identity(), {}};
  CHECK_NOTHROW(m.validate());
  m.classes(1, 1) = 5;
  try {
    m.validate();
    FAIL("expected InvalidClassValue");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidClassValue);
  }
}

TEST_CASE("shifted transform places sub-windows") {
  const AffineGeoTransform t{100, 200, 2, -2, 0, 0};
  const auto s = t.shifted(3, 5);
  const auto a = pixel_to_world(s, 0, 0), b = pixel_to_world(t, 3, 5);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
}

TEST_CASE("GeoRaster roundtrip keeps values, nodata, transform and CRS") {
  fixture::TempDir tmp("geo");
  GeoRaster r(4, {5, 7}, {500000, 4000000, 0.5, -0.5, 0, 0}, "EPSG:32643");
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : r.values()) v = u(rng);
  r.at(2, 1, 3) = std::nanf("");
  r.at(0, 4, 6) = std::nanf("");
  r.mark_nan_as_nodata();
  CHECK(r.nodata_mask()(1, 3) == 1);
  geotiff::write_raster(tmp.path() / "r.tif", r);
  const auto back = geotiff::read_raster(tmp.path() / "r.tif");
  CHECK(back.shape() == r.shape());
  CHECK(back.band_count() == 4);
  CHECK(back.transform() == r.transform());
  CHECK(back.crs_id() == "EPSG:32643");
  CHECK(back.nodata_mask() == r.nodata_mask());
  for (std::size_t i = 0; i < r.values().size(); ++i) {
    const float a = r.values()[i], b = back.values()[i];
    const std::size_t px = i % r.shape().area();
    if (!r.nodata_mask().values()[px]) CHECK(a == b);
  }
}

TEST_CASE("label mask roundtrip") {
  fixture::TempDir tmp("mask");
  LabelMask m{Grid<std::uint8_t>(3, 4, 4), {1, 2, 3, -4, 0.1, 0.2}, "custom crs"};
  m.classes(0, 1) = 0;
  m.classes(2, 3) = 3;
  geotiff::write_label_mask(tmp.path() / "m.tif", m);
  const auto back = geotiff::read_label_mask(tmp.path() / "m.tif");
  CHECK(back.classes == m.classes);
  CHECK(back.transform == m.transform);
  CHECK(back.crs_id == m.crs_id);
}

TEST_CASE("reads a hand-built big-endian uint16 GeoTIFF") {
  fixture::TempDir tmp("be");
  BeWriter w;
  w.bytes = {'M', 'M'};
  w.u16(42);
  w.u32(8);
  const std::uint16_t n = 11;
  const std::uint32_t scale_at = 8 + 2 + n * 12 + 4, tie_at = scale_at + 24, pix_at = tie_at + 48;
  w.u16(n);
  w.entry(256, 3, 1, 3);       // width
  w.entry(257, 3, 1, 2);       // height
  w.entry(258, 3, 1, 16);      // bits per sample
  w.entry(259, 3, 1, 1);       // no compression
  w.entry(262, 3, 1, 1);       // black is zero
  w.entry(273, 4, 1, pix_at);  // strip offsets
  w.entry(277, 3, 1, 1);       // samples per pixel
  w.entry(278, 3, 1, 2);       // rows per strip
  w.entry(279, 4, 1, 12);      // strip byte counts
  w.entry(33550, 12, 3, scale_at);
  w.entry(33922, 12, 6, tie_at);
  w.u32(0);
  REQUIRE(w.bytes.size() == scale_at);
  for (double v : {2.0, 3.0, 0.0}) w.f64(v);
  for (double v : {0.0, 0.0, 0.0, 100.0, 200.0, 0.0}) w.f64(v);
  for (std::uint16_t v : {1, 2, 3, 400, 500, 65535}) w.u16(v);
  {
    std::ofstream f(tmp.path() / "be.tif", std::ios::binary);
    f.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
  }
  const auto f = geotiff::read(tmp.path() / "be.tif");
  CHECK(f.bands == 1);
  CHECK(f.shape == RasterShape{2, 3});
  CHECK(f.sample_type == geotiff::SampleType::UInt16);
  CHECK(f.samples == std::vector<double>{1, 2, 3, 400, 500, 65535});
  CHECK(f.transform.origin_x == 100.0);
  CHECK(f.transform.origin_y == 200.0);
  CHECK(f.transform.pixel_width == 2.0);
  CHECK(f.transform.pixel_height == -3.0);
}

TEST_CASE("geotiff rejects garbage and missing files") {
  fixture::TempDir tmp("bad");
  {
    std::ofstream f(tmp.path() / "x.tif", std::ios::binary);
    f << "not a tiff at all";
  }
  try {
    geotiff::read(tmp.path() / "x.tif");
    FAIL("expected FormatError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::FormatError);
  }
  CHECK_THROWS_AS(geotiff::read(tmp.path() / "missing.tif"), Error);
}

TEST_CASE("geojson parsing") {
  const std::string text = R"({
    "type": "FeatureCollection",
    "features": [
      {"type": "Feature", "properties": {}, "geometry":
        {"type": "LineString", "coordinates": [[0, 0], [10, 0]]}},
      {"type": "Feature", "properties": {}, "geometry":
        {"type": "MultiLineString", "coordinates": [[[0, 1], [1, 1]], [[2, 2], [3, 3]]]}},
      {"type": "Feature", "properties": {}, "geometry":
        {"type": "Polygon", "coordinates": [[[0, 0], [4, 0], [4, 4], [0, 4], [0, 0]]]}}
    ]})";
  const auto fs = geojson::parse(text, LandClass::Roads);
  REQUIRE(fs.size() == 4);
  CHECK(std::holds_alternative<LineString>(fs[0].geometry));
  CHECK(std::holds_alternative<LineString>(fs[2].geometry));
  CHECK(std::get<LineString>(fs[2].geometry).points[1].x == 3.0);
  CHECK(std::holds_alternative<Polygon>(fs[3].geometry));
  for (const auto& f : fs) CHECK(f.class_tag == LandClass::Roads);

  const auto again = geojson::parse(geojson::dump(fs), LandClass::Roads);
  CHECK(geojson::dump(again) == geojson::dump(fs));

  try {
    geojson::parse(R"({"type": "Point", "coordinates": [1, 2]})", LandClass::Water);
    FAIL("expected GeometryTypeError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::GeometryTypeError);
  }
  CHECK_THROWS_AS(geojson::parse("{not json", LandClass::Water), Error);
}
