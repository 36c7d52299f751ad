#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpsseg/geo_core.hpp"

namespace cpsseg::geotiff {

enum class SampleType { UInt8, UInt16, Int16, UInt32, Int32, Float32, Float64 };

// Band-sequential raster payload as read from or written to a GeoTIFF.
// Samples are widened to double on read.
struct RasterFile {
  std::size_t bands = 0;
  RasterShape shape;
  SampleType sample_type = SampleType::Float32;
  std::vector<double> samples;  // [band, row, col]
  AffineGeoTransform transform;
  std::string crs_id;
  std::optional<double> nodata;  // GDAL_NODATA tag
};

// Reads baseline, uncompressed TIFF (strips or tiles, chunky or planar,
// either byte order) with GeoTIFF georeferencing tags. Compressed files
// raise FormatError.
RasterFile read(const std::filesystem::path& path);

// Writes a little-endian, uncompressed, band-planar GeoTIFF.
void write(const std::filesystem::path& path, const RasterFile& raster);

// Typed helpers.
GeoRaster read_raster(const std::filesystem::path& path);
void write_raster(const std::filesystem::path& path, const GeoRaster& raster);

LabelMask read_label_mask(const std::filesystem::path& path);
void write_label_mask(const std::filesystem::path& path, const LabelMask& mask);

void write_u8(const std::filesystem::path& path, const Grid<std::uint8_t>& grid,
              const AffineGeoTransform& transform, const std::string& crs_id);
Grid<std::uint8_t> read_u8(const std::filesystem::path& path,
                           AffineGeoTransform* transform = nullptr,
                           std::string* crs_id = nullptr);

void write_float_bands(const std::filesystem::path& path, std::span<const float> values,
                       std::size_t bands, RasterShape shape,
                       const AffineGeoTransform& transform, const std::string& crs_id);

}  // namespace cpsseg::geotiff
