#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cpsseg/geo_core.hpp"
#include "cpsseg/tensor.hpp"

namespace cpsseg {

inline constexpr std::size_t kDefaultChipSize = 256;

struct ChipIndex {
  std::size_t row_off = 0;
  std::size_t col_off = 0;
  std::size_t chip_size = kDefaultChipSize;

  bool operator==(const ChipIndex&) const = default;
};

struct ChipRecord {
  std::vector<float> image;         // [band, row, col], kImageBands x size x size
  std::vector<std::uint8_t> label;  // [row, col]
  ChipIndex index;
  double nan_fraction = 0.0;
};

enum class DatasetMode { Train, Eval };

std::string_view to_string(DatasetMode mode);
DatasetMode parse_dataset_mode(std::string_view s);

struct ChipDataset {
  std::vector<ChipRecord> records;
  DatasetMode mode = DatasetMode::Train;
  AffineGeoTransform source_transform;
  RasterShape source_shape;
  std::string crs_id;
  std::size_t chip_size = kDefaultChipSize;
  std::size_t stride = kDefaultChipSize;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

struct ChipOptions {
  std::size_t chip_size = kDefaultChipSize;
  std::size_t stride = kDefaultChipSize;
  double min_class_density = 0.05;
};

// Row-major chip offsets at the given stride, plus an edge-flush final
// row/column when the extent is not a multiple of the stride.
std::vector<ChipIndex> chip_grid(RasterShape raster_shape,
                                 std::size_t chip_size = kDefaultChipSize,
                                 std::size_t stride = kDefaultChipSize);

// Fraction of spatial pixels flagged nodata. image holds bands x rows x cols
// samples laid out over the same grid as nodata.
double nan_fraction(std::span<const float> image, const Grid<std::uint8_t>& nodata);

// Fraction of pixels whose class is not Other.
double class_density(std::span<const std::uint8_t> label);

ChipDataset build_dataset(const GeoRaster& raster, const LabelMask& mask, DatasetMode mode,
                          const ChipOptions& options = {});

// Chips without labels (inference on unlabelled scenes); labels are Other.
ChipDataset build_unlabelled_dataset(const GeoRaster& raster, const ChipOptions& options = {});

// Stacks the given records into [B, 4, S, S] images and [B, S, S] labels.
Tensor<float> stack_images(const ChipDataset& ds, std::span<const std::size_t> which);
std::vector<std::uint8_t> stack_labels(const ChipDataset& ds, std::span<const std::size_t> which);

namespace chipstore {

// Directory with manifest.json plus chip_{row}_{col}.img (little-endian
// float32) and chip_{row}_{col}.lbl (uint8) per record.
void save(const std::filesystem::path& dir, const ChipDataset& ds);
ChipDataset load(const std::filesystem::path& dir);

}  // namespace chipstore
}  // namespace cpsseg
