#include "cpsseg/geo_core.hpp"

#include <cmath>

namespace cpsseg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::SingularTransform: return "SingularTransform";
    case ErrorCode::GeometryTypeError: return "GeometryTypeError";
    case ErrorCode::EmptyShape: return "EmptyShape";
    case ErrorCode::UnclosedRing: return "UnclosedRing";
    case ErrorCode::MissingBand: return "MissingBand";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TransformMismatch: return "TransformMismatch";
    case ErrorCode::RasterSmallerThanChip: return "RasterSmallerThanChip";
    case ErrorCode::InvalidClassValue: return "InvalidClassValue";
    case ErrorCode::AlignmentError: return "AlignmentError";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::UnknownArchitecture: return "UnknownArchitecture";
    case ErrorCode::BadSpatialDims: return "BadSpatialDims";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::IndexMismatch: return "IndexMismatch";
    case ErrorCode::ChipOutOfBounds: return "ChipOutOfBounds";
    case ErrorCode::SpecTooSmall: return "SpecTooSmall";
    case ErrorCode::ConfigValidationError: return "ConfigValidationError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

std::string_view class_name(LandClass c) {
  switch (c) {
    case LandClass::Buildings: return "Buildings";
    case LandClass::Roads: return "Roads";
    case LandClass::Trees: return "Trees";
    case LandClass::Water: return "Water";
    case LandClass::Other: return "Other";
  }
  return "Unknown";
}

std::string_view class_name(int c) {
  if (c < 0 || c >= kNumClasses) return "Unknown";
  return class_name(static_cast<LandClass>(c));
}

void AffineGeoTransform::validate() const {
  require(pixel_width != 0.0 && pixel_height != 0.0, ErrorCode::InvalidArgument,
          "pixel size must be non-zero");
}

double AffineGeoTransform::determinant() const {
  return pixel_width * pixel_height - col_rotation * row_rotation;
}

AffineGeoTransform AffineGeoTransform::shifted(std::size_t row_off,
                                               std::size_t col_off) const {
  AffineGeoTransform t = *this;
  const WorldPoint o = pixel_to_world(*this, static_cast<double>(row_off),
                                      static_cast<double>(col_off));
  t.origin_x = o.x;
  t.origin_y = o.y;
  return t;
}

WorldPoint pixel_to_world(const AffineGeoTransform& t, double row, double col) {
  return {t.origin_x + col * t.pixel_width + row * t.col_rotation,
          t.origin_y + row * t.pixel_height + col * t.row_rotation};
}

PixelPoint world_to_pixel(const AffineGeoTransform& t, double x, double y) {
  const double det = t.determinant();
  if (det == 0.0 || !std::isfinite(det)) {
    throw Error(ErrorCode::SingularTransform, "affine transform is not invertible");
  }
  const double dx = x - t.origin_x;
  const double dy = y - t.origin_y;
  // [pw cr; rr ph] * [col; row] = [dx; dy]
  const double col = (t.pixel_height * dx - t.col_rotation * dy) / det;
  const double row = (t.pixel_width * dy - t.row_rotation * dx) / det;
  return {row, col};
}

GeoRaster::GeoRaster(std::size_t bands, RasterShape shape, AffineGeoTransform transform,
                     std::string crs_id)
    : bands_(bands),
      shape_(shape),
      data_(bands * shape.area(), 0.0f),
      nodata_(shape, 0),
      transform_(transform),
      crs_id_(std::move(crs_id)) {
  transform_.validate();
}

void GeoRaster::mark_nan_as_nodata() {
  const std::size_t n = shape_.area();
  for (std::size_t b = 0; b < bands_; ++b) {
    const float* p = data_.data() + b * n;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::isnan(p[i])) nodata_.storage()[i] = 1;
    }
  }
}

void LabelMask::validate() const {
  for (std::uint8_t v : classes.values()) {
    if (v >= kNumClasses) {
      throw Error(ErrorCode::InvalidClassValue,
                  "label value " + std::to_string(v) + " outside [0, 4]");
    }
  }
}

}  // namespace cpsseg
