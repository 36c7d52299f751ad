#include "cpsseg/chipper.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace cpsseg {
namespace {

std::vector<std::size_t> axis_offsets(std::size_t extent, std::size_t chip, std::size_t stride) {
  std::vector<std::size_t> offs;
  for (std::size_t o = 0; o + chip <= extent; o += stride) offs.push_back(o);
  if (offs.back() + chip < extent) offs.push_back(extent - chip);
  return offs;
}

ChipRecord extract(const GeoRaster& raster, const LabelMask* mask, const ChipIndex& idx) {
  const std::size_t s = idx.chip_size;
  const std::size_t bands = raster.band_count();
  ChipRecord rec;
  rec.index = idx;
  rec.image.resize(bands * s * s);
  rec.label.assign(s * s, static_cast<std::uint8_t>(LandClass::Other));
  Grid<std::uint8_t> nodata(s, s);
  for (std::size_t b = 0; b < bands; ++b) {
    for (std::size_t r = 0; r < s; ++r) {
      const float* src = &raster.band(b)[(idx.row_off + r) * raster.cols() + idx.col_off];
      std::copy(src, src + s, rec.image.data() + (b * s + r) * s);
    }
  }
  for (std::size_t r = 0; r < s; ++r) {
    for (std::size_t c = 0; c < s; ++c) {
      nodata(r, c) = raster.nodata_mask()(idx.row_off + r, idx.col_off + c);
      if (mask) rec.label[r * s + c] = mask->classes(idx.row_off + r, idx.col_off + c);
    }
  }
  rec.nan_fraction = nan_fraction(rec.image, nodata);
  if (rec.nan_fraction > 0.0) {
    for (std::size_t b = 0; b < bands; ++b) {
      for (std::size_t i = 0; i < s * s; ++i) {
        if (nodata.storage()[i]) rec.image[b * s * s + i] = 0.0f;
      }
    }
  }
  return rec;
}

void write_bytes(const std::filesystem::path& p, const void* data, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot create " + p.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + p.string());
}

void read_bytes(const std::filesystem::path& p, void* data, std::size_t n) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + p.string());
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (!in || in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorCode::FormatError, "unexpected size for " + p.string());
  }
}

std::string chip_stem(const ChipIndex& idx) {
  return "chip_" + std::to_string(idx.row_off) + "_" + std::to_string(idx.col_off);
}

}  // namespace

std::string_view to_string(DatasetMode mode) {
  return mode == DatasetMode::Train ? "train" : "eval";
}

DatasetMode parse_dataset_mode(std::string_view s) {
  if (s == "train") return DatasetMode::Train;
  if (s == "eval") return DatasetMode::Eval;
  throw Error(ErrorCode::InvalidArgument, "dataset mode must be train or eval");
}

std::vector<ChipIndex> chip_grid(RasterShape raster_shape, std::size_t chip_size,
                                 std::size_t stride) {
  require(chip_size >= 1, ErrorCode::InvalidArgument, "chip_size must be >= 1");
  require(stride >= 1 && stride <= chip_size, ErrorCode::InvalidArgument,
          "stride must lie in [1, chip_size]");
  if (raster_shape.rows < chip_size || raster_shape.cols < chip_size) {
    throw Error(ErrorCode::RasterSmallerThanChip,
                "raster " + std::to_string(raster_shape.rows) + "x" +
                    std::to_string(raster_shape.cols) + " is smaller than chip " +
                    std::to_string(chip_size));
  }
  const auto rows = axis_offsets(raster_shape.rows, chip_size, stride);
  const auto cols = axis_offsets(raster_shape.cols, chip_size, stride);
  std::vector<ChipIndex> out;
  out.reserve(rows.size() * cols.size());
  for (std::size_t r : rows) {
    for (std::size_t c : cols) out.push_back({r, c, chip_size});
  }
  return out;
}

double nan_fraction(std::span<const float> image, const Grid<std::uint8_t>& nodata) {
  const std::size_t n = nodata.size();
  require(n > 0 && image.size() % n == 0, ErrorCode::ShapeMismatch,
          "image chip does not cover the nodata grid");
  const auto flagged = std::count_if(nodata.values().begin(), nodata.values().end(),
                                     [](std::uint8_t v) { return v != 0; });
  return static_cast<double>(flagged) / static_cast<double>(n);
}

double class_density(std::span<const std::uint8_t> label) {
  require(!label.empty(), ErrorCode::EmptyShape, "empty label chip");
  std::size_t labelled = 0;
  for (std::uint8_t v : label) {
    if (v >= kNumClasses) {
      throw Error(ErrorCode::InvalidClassValue, "label value " + std::to_string(v));
    }
    if (v != static_cast<std::uint8_t>(LandClass::Other)) ++labelled;
  }
  return static_cast<double>(labelled) / static_cast<double>(label.size());
}

ChipDataset build_dataset(const GeoRaster& raster, const LabelMask& mask, DatasetMode mode,
                          const ChipOptions& options) {
  if (!(raster.shape() == mask.shape()) || !(raster.transform() == mask.transform)) {
    throw Error(ErrorCode::AlignmentError, "raster and label mask are not aligned");
  }
  require(raster.band_count() == static_cast<std::size_t>(kImageBands), ErrorCode::MissingBand,
          "imagery must have 4 bands (NIR, R, G, B)");
  ChipDataset ds;
  ds.mode = mode;
  ds.source_transform = raster.transform();
  ds.source_shape = raster.shape();
  ds.crs_id = raster.crs_id();
  ds.chip_size = options.chip_size;
  ds.stride = options.stride;
  for (const auto& idx : chip_grid(raster.shape(), options.chip_size, options.stride)) {
    ChipRecord rec = extract(raster, &mask, idx);
    if (mode == DatasetMode::Train) {
      if (!(rec.nan_fraction < 0.5)) continue;
      if (class_density(rec.label) < options.min_class_density) continue;
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

ChipDataset build_unlabelled_dataset(const GeoRaster& raster, const ChipOptions& options) {
  require(raster.band_count() == static_cast<std::size_t>(kImageBands), ErrorCode::MissingBand,
          "imagery must have 4 bands (NIR, R, G, B)");
  ChipDataset ds;
  ds.mode = DatasetMode::Eval;
  ds.source_transform = raster.transform();
  ds.source_shape = raster.shape();
  ds.crs_id = raster.crs_id();
  ds.chip_size = options.chip_size;
  ds.stride = options.stride;
  for (const auto& idx : chip_grid(raster.shape(), options.chip_size, options.stride)) {
    ds.records.push_back(extract(raster, nullptr, idx));
  }
  return ds;
}

Tensor<float> stack_images(const ChipDataset& ds, std::span<const std::size_t> which) {
  const std::size_t s = ds.chip_size;
  Tensor<float> out(which.size(), kImageBands, s, s);
  for (std::size_t i = 0; i < which.size(); ++i) {
    const auto& img = ds.records.at(which[i]).image;
    std::copy(img.begin(), img.end(), out.sample(i));
  }
  return out;
}

std::vector<std::uint8_t> stack_labels(const ChipDataset& ds, std::span<const std::size_t> which) {
  const std::size_t s = ds.chip_size;
  std::vector<std::uint8_t> out;
  out.reserve(which.size() * s * s);
  for (std::size_t i : which) {
    const auto& lbl = ds.records.at(i).label;
    out.insert(out.end(), lbl.begin(), lbl.end());
  }
  return out;
}

namespace chipstore {

using nlohmann::json;

void save(const std::filesystem::path& dir, const ChipDataset& ds) {
  std::filesystem::create_directories(dir);
  const auto& t = ds.source_transform;
  json manifest = {
      {"format", "cpsseg-chipstore/1"},
      {"mode", std::string(to_string(ds.mode))},
      {"chip_size", ds.chip_size},
      {"stride", ds.stride},
      {"bands", kImageBands},
      {"crs_id", ds.crs_id},
      {"source_shape", {ds.source_shape.rows, ds.source_shape.cols}},
      {"transform", {t.origin_x, t.pixel_width, t.col_rotation, t.origin_y, t.row_rotation,
                     t.pixel_height}},
      {"records", json::array()},
  };
  static_assert(std::endian::native == std::endian::little, "chip store is little-endian");
  for (const auto& rec : ds.records) {
    const std::string stem = chip_stem(rec.index);
    write_bytes(dir / (stem + ".img"), rec.image.data(), rec.image.size() * sizeof(float));
    write_bytes(dir / (stem + ".lbl"), rec.label.data(), rec.label.size());
    manifest["records"].push_back({{"row_off", rec.index.row_off},
                                   {"col_off", rec.index.col_off},
                                   {"nan_fraction", rec.nan_fraction}});
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write chip manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

ChipDataset load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorCode::IoError, "no chip manifest in " + dir.string());
  ChipDataset ds;
  try {
    const json m = json::parse(in);
    ds.mode = parse_dataset_mode(m.at("mode").get<std::string>());
    ds.chip_size = m.at("chip_size").get<std::size_t>();
    ds.stride = m.at("stride").get<std::size_t>();
    ds.crs_id = m.at("crs_id").get<std::string>();
    ds.source_shape = {m.at("source_shape")[0].get<std::size_t>(),
                       m.at("source_shape")[1].get<std::size_t>()};
    const auto& t = m.at("transform");
    ds.source_transform = {t[0].get<double>(), t[3].get<double>(), t[1].get<double>(),
                           t[5].get<double>(), t[4].get<double>(), t[2].get<double>()};
    const std::size_t bands = m.at("bands").get<std::size_t>();
    const std::size_t s = ds.chip_size;
    for (const auto& r : m.at("records")) {
      ChipRecord rec;
      rec.index = {r.at("row_off").get<std::size_t>(), r.at("col_off").get<std::size_t>(), s};
      rec.nan_fraction = r.at("nan_fraction").get<double>();
      rec.image.resize(bands * s * s);
      rec.label.resize(s * s);
      const std::string stem = chip_stem(rec.index);
      read_bytes(dir / (stem + ".img"), rec.image.data(), rec.image.size() * sizeof(float));
      read_bytes(dir / (stem + ".lbl"), rec.label.data(), rec.label.size());
      ds.records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("bad chip manifest: ") + e.what());
  }
  return ds;
}

}  // namespace chipstore
}  // namespace cpsseg
