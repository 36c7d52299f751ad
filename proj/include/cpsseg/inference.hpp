#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpsseg/chipper.hpp"
#include "cpsseg/geo_core.hpp"
#include "cpsseg/models.hpp"
#include "json.hpp"

namespace cpsseg {

// Softmax probabilities of one chip, laid out [class, row, col].
struct ProbabilityChip {
  std::vector<float> probs;
  ChipIndex index;

  std::size_t size() const { return index.chip_size; }
  float at(int cls, std::size_t r, std::size_t c) const {
    return probs[(static_cast<std::size_t>(cls) * size() + r) * size() + c];
  }
  // Throws ShapeMismatch if probs does not hold 5 x size x size values.
  void validate() const;
};

struct ProbabilityMosaic {
  std::vector<float> probs;  // [class, row, col]
  RasterShape shape;
  AffineGeoTransform transform;
  std::string crs_id;
  Grid<std::uint32_t> coverage;

  float at(int cls, std::size_t r, std::size_t c) const {
    return probs[(static_cast<std::size_t>(cls) * shape.rows + r) * shape.cols + c];
  }
  // Per-pixel argmax class (lowest index wins ties).
  Grid<std::uint8_t> argmax() const;
};

// Element-wise mean of two chips over the same index.
ProbabilityChip ensemble(const ProbabilityChip& p1, const ProbabilityChip& p2);

// Per-pixel, per-class max over every chip covering the pixel. Uncovered
// pixels hold 0 with coverage 0.
ProbabilityMosaic merge_chips(std::span<const ProbabilityChip> chips, RasterShape mosaic_shape,
                              const AffineGeoTransform& transform, std::string crs_id = {});

// nullopt marks a class without ground-truth pixels.
using RecallVector = std::array<std::optional<double>, kNumClasses>;

// A pixel is predicted-c iff probs_c >= threshold.
RecallVector recall_per_class(const ProbabilityMosaic& mosaic, const LabelMask& gt,
                              double threshold);

// Mean over the defined recalls of the four named classes (Other excluded).
std::optional<double> mean_named_recall(const RecallVector& r);

// Softmax probabilities for every chip of ds, in dataset order.
std::vector<ProbabilityChip> predict(const SegmentationModel& model, const ChipDataset& ds,
                                     std::size_t batch_size = 4);
// Ensembled probabilities of a model pair.
std::vector<ProbabilityChip> predict_ensemble(const SegmentationModel& m1,
                                              const SegmentationModel& m2, const ChipDataset& ds,
                                              std::size_t batch_size = 4);

struct RecallReport {
  std::vector<double> thresholds;
  std::vector<RecallVector> recalls;  // one per threshold

  nlohmann::json to_json() const;
  // Classes as rows, thresholds as columns.
  std::string to_text() const;
};

RecallReport evaluate_recall(const ProbabilityMosaic& mosaic, const LabelMask& gt,
                             std::span<const double> thresholds);

// Threshold key as it appears in reports, e.g. "0.4".
std::string threshold_key(double t);

namespace predstore {

// Directory with manifest.json plus chip_{row}_{col}.prob (little-endian
// float32, 5 x size x size) per chip.
void save(const std::filesystem::path& dir, std::span<const ProbabilityChip> chips,
          const ChipDataset& source);

struct Loaded {
  std::vector<ProbabilityChip> chips;
  RasterShape source_shape;
  AffineGeoTransform source_transform;
  std::string crs_id;
};
Loaded load(const std::filesystem::path& dir);

}  // namespace predstore

// 5-band float probability GeoTIFF and single-band argmax class GeoTIFF.
void write_mosaic(const std::filesystem::path& probs_path, const std::filesystem::path& classes_path,
                  const ProbabilityMosaic& mosaic);
// Reads a probability GeoTIFF written by write_mosaic; coverage is set to 1.
ProbabilityMosaic read_mosaic(const std::filesystem::path& probs_path);

}  // namespace cpsseg
