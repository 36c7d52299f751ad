#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpsseg/error.hpp"

namespace cpsseg {

// Land-cover palette. Values are the on-disk label codes.
enum class LandClass : std::uint8_t {
  Buildings = 0,
  Roads = 1,
  Trees = 2,
  Water = 3,
  Other = 4,
};

inline constexpr int kNumClasses = 5;
inline constexpr int kImageBands = 4;  // NIR, R, G, B

enum class Band : int { Nir = 0, Red = 1, Green = 2, Blue = 3 };

std::string_view class_name(LandClass c);
std::string_view class_name(int c);

struct RasterShape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t area() const { return rows * cols; }
  bool operator==(const RasterShape&) const = default;
};

// Row-major 2-D array.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(RasterShape shape, T fill = T{})
      : shape_(shape), data_(shape.area(), fill) {}
  Grid(std::size_t rows, std::size_t cols, T fill = T{})
      : Grid(RasterShape{rows, cols}, fill) {}

  RasterShape shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_.cols + c];
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  bool operator==(const Grid&) const = default;

 private:
  RasterShape shape_;
  std::vector<T> data_;
};

struct WorldPoint {
  double x = 0.0;
  double y = 0.0;
};

struct PixelPoint {
  double row = 0.0;
  double col = 0.0;
};

// GDAL-style six-parameter affine transform; maps pixel corner coordinates
// to world coordinates.
struct AffineGeoTransform {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double pixel_width = 1.0;
  double pixel_height = -1.0;
  double row_rotation = 0.0;
  double col_rotation = 0.0;

  static AffineGeoTransform identity() { return {0.0, 0.0, 1.0, -1.0, 0.0, 0.0}; }

  // Throws InvalidArgument when either pixel size is zero.
  void validate() const;

  double determinant() const;

  // Transform of the sub-window whose top-left pixel is (row_off, col_off).
  AffineGeoTransform shifted(std::size_t row_off, std::size_t col_off) const;

  bool operator==(const AffineGeoTransform&) const = default;
};

WorldPoint pixel_to_world(const AffineGeoTransform& t, double row, double col);
PixelPoint world_to_pixel(const AffineGeoTransform& t, double x, double y);

// Multi-band georeferenced image, band order NIR, R, G, B.
class GeoRaster {
 public:
  GeoRaster() = default;
  GeoRaster(std::size_t bands, RasterShape shape, AffineGeoTransform transform,
            std::string crs_id = {});

  std::size_t band_count() const { return bands_; }
  RasterShape shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }

  float& at(std::size_t band, std::size_t r, std::size_t c) {
    return data_[(band * shape_.rows + r) * shape_.cols + c];
  }
  float at(std::size_t band, std::size_t r, std::size_t c) const {
    return data_[(band * shape_.rows + r) * shape_.cols + c];
  }

  std::span<float> band(std::size_t b) {
    return std::span<float>(data_).subspan(b * shape_.area(), shape_.area());
  }
  std::span<const float> band(std::size_t b) const {
    return std::span<const float>(data_).subspan(b * shape_.area(), shape_.area());
  }

  std::span<const float> values() const { return data_; }
  std::span<float> values() { return data_; }

  const Grid<std::uint8_t>& nodata_mask() const { return nodata_; }
  Grid<std::uint8_t>& nodata_mask() { return nodata_; }

  const AffineGeoTransform& transform() const { return transform_; }
  const std::string& crs_id() const { return crs_id_; }

  // Flags every pixel with a NaN in any band as nodata.
  void mark_nan_as_nodata();

 private:
  std::size_t bands_ = 0;
  RasterShape shape_;
  std::vector<float> data_;
  Grid<std::uint8_t> nodata_;
  AffineGeoTransform transform_;
  std::string crs_id_;
};

// Single-band class raster with values in [0, kNumClasses).
struct LabelMask {
  Grid<std::uint8_t> classes;
  AffineGeoTransform transform;
  std::string crs_id;

  RasterShape shape() const { return classes.shape(); }
  // Throws InvalidClassValue on any out-of-range pixel.
  void validate() const;
};

}  // namespace cpsseg
