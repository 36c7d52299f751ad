#include "cpsseg/inference.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cpsseg/geotiff.hpp"
#include "cpsseg/losses.hpp"

namespace cpsseg {
namespace {

using nlohmann::json;

bool same_transform(const AffineGeoTransform& a, const AffineGeoTransform& b) {
  auto close = [](double x, double y) {
    return std::abs(x - y) <= 1e-9 * std::max({1.0, std::abs(x), std::abs(y)});
  };
  return close(a.origin_x, b.origin_x) && close(a.origin_y, b.origin_y) &&
         close(a.pixel_width, b.pixel_width) && close(a.pixel_height, b.pixel_height) &&
         close(a.row_rotation, b.row_rotation) && close(a.col_rotation, b.col_rotation);
}

std::string chip_stem(const ChipIndex& i) {
  return "chip_" + std::to_string(i.row_off) + "_" + std::to_string(i.col_off);
}

json transform_json(const AffineGeoTransform& t) {
  return {t.origin_x, t.pixel_width, t.col_rotation, t.origin_y, t.row_rotation, t.pixel_height};
}

AffineGeoTransform transform_from_json(const json& j) {
  AffineGeoTransform t;
  t.origin_x = j.at(0).get<double>();
  t.pixel_width = j.at(1).get<double>();
  t.col_rotation = j.at(2).get<double>();
  t.origin_y = j.at(3).get<double>();
  t.row_rotation = j.at(4).get<double>();
  t.pixel_height = j.at(5).get<double>();
  return t;
}

std::vector<ProbabilityChip> softmax_chips(const Tensor<float>& logits,
                                           std::span<const std::size_t> which,
                                           const ChipDataset& ds) {
  const Logits probs = softmax(logits.cast<double>());
  std::vector<ProbabilityChip> out;
  const std::size_t per = kNumClasses * probs.shape().plane();
  for (std::size_t b = 0; b < which.size(); ++b) {
    ProbabilityChip chip;
    chip.index = ds.records[which[b]].index;
    chip.probs.resize(per);
    const double* src = probs.sample(b);
    for (std::size_t i = 0; i < per; ++i) chip.probs[i] = static_cast<float>(src[i]);
    out.push_back(std::move(chip));
  }
  return out;
}

template <typename Fn>
void for_each_batch(const ChipDataset& ds, std::size_t batch_size, Fn&& fn) {
  require(batch_size >= 1, ErrorCode::InvalidArgument, "batch_size must be >= 1");
  for (std::size_t i = 0; i < ds.size(); i += batch_size) {
    std::vector<std::size_t> which;
    for (std::size_t j = i; j < std::min(ds.size(), i + batch_size); ++j) which.push_back(j);
    fn(which);
  }
}

}  // namespace

void ProbabilityChip::validate() const {
  require(probs.size() == static_cast<std::size_t>(kNumClasses) * size() * size(),
          ErrorCode::ShapeMismatch, "probability chip must hold 5 x size x size values");
}

Grid<std::uint8_t> ProbabilityMosaic::argmax() const {
  Grid<std::uint8_t> out(shape, static_cast<std::uint8_t>(LandClass::Other));
  for (std::size_t r = 0; r < shape.rows; ++r) {
    for (std::size_t c = 0; c < shape.cols; ++c) {
      int best = 0;
      for (int k = 1; k < kNumClasses; ++k) {
        if (at(k, r, c) > at(best, r, c)) best = k;
      }
      out(r, c) = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

ProbabilityChip ensemble(const ProbabilityChip& p1, const ProbabilityChip& p2) {
  require(p1.index == p2.index, ErrorCode::IndexMismatch, "cannot ensemble chips of different indices");
  p1.validate();
  p2.validate();
  ProbabilityChip out{std::vector<float>(p1.probs.size()), p1.index};
  for (std::size_t i = 0; i < out.probs.size(); ++i) {
    out.probs[i] = static_cast<float>(0.5 * (static_cast<double>(p1.probs[i]) + p2.probs[i]));
  }
  return out;
}

ProbabilityMosaic merge_chips(std::span<const ProbabilityChip> chips, RasterShape mosaic_shape,
                              const AffineGeoTransform& transform, std::string crs_id) {
  ProbabilityMosaic m;
  m.shape = mosaic_shape;
  m.transform = transform;
  m.crs_id = std::move(crs_id);
  m.probs.assign(static_cast<std::size_t>(kNumClasses) * mosaic_shape.rows * mosaic_shape.cols, 0.0f);
  m.coverage = Grid<std::uint32_t>(mosaic_shape, 0);
  for (const auto& chip : chips) {
    chip.validate();
    const auto& ix = chip.index;
    require(ix.row_off + ix.chip_size <= mosaic_shape.rows &&
                ix.col_off + ix.chip_size <= mosaic_shape.cols,
            ErrorCode::ChipOutOfBounds,
            "chip at (" + std::to_string(ix.row_off) + ", " + std::to_string(ix.col_off) +
                ") exceeds the mosaic extent");
    const std::size_t s = ix.chip_size;
    for (int k = 0; k < kNumClasses; ++k) {
      for (std::size_t r = 0; r < s; ++r) {
        float* dst = m.probs.data() +
                     (static_cast<std::size_t>(k) * mosaic_shape.rows + ix.row_off + r) * mosaic_shape.cols +
                     ix.col_off;
        const float* src = chip.probs.data() + (static_cast<std::size_t>(k) * s + r) * s;
        for (std::size_t c = 0; c < s; ++c) dst[c] = std::max(dst[c], src[c]);
      }
    }
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t c = 0; c < s; ++c) ++m.coverage(ix.row_off + r, ix.col_off + c);
    }
  }
  return m;
}

RecallVector recall_per_class(const ProbabilityMosaic& mosaic, const LabelMask& gt,
                              double threshold) {
  require(threshold > 0.0 && threshold < 1.0, ErrorCode::InvalidArgument,
          "threshold must lie in (0, 1)");
  require(gt.classes.shape() == mosaic.shape, ErrorCode::AlignmentError,
          "mosaic and ground truth differ in shape");
  require(same_transform(gt.transform, mosaic.transform), ErrorCode::AlignmentError,
          "mosaic and ground truth differ in geotransform");
  std::array<std::uint64_t, kNumClasses> tp{}, positives{};
  for (std::size_t r = 0; r < mosaic.shape.rows; ++r) {
    for (std::size_t c = 0; c < mosaic.shape.cols; ++c) {
      const std::uint8_t g = gt.classes(r, c);
      if (g >= kNumClasses) throw Error(ErrorCode::InvalidClassValue, "label " + std::to_string(g));
      ++positives[g];
      if (static_cast<double>(mosaic.at(g, r, c)) >= threshold) ++tp[g];
    }
  }
  RecallVector out;
  for (int k = 0; k < kNumClasses; ++k) {
    if (positives[k] > 0) {
      out[k] = static_cast<double>(tp[k]) / static_cast<double>(positives[k]);
    }
  }
  return out;
}

std::optional<double> mean_named_recall(const RecallVector& r) {
  double sum = 0.0;
  int n = 0;
  for (int k = 0; k < kNumClasses; ++k) {
    if (k == static_cast<int>(LandClass::Other) || !r[k]) continue;
    sum += *r[k];
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::vector<ProbabilityChip> predict(const SegmentationModel& model, const ChipDataset& ds,
                                     std::size_t batch_size) {
  std::vector<ProbabilityChip> out;
  for_each_batch(ds, batch_size, [&](const std::vector<std::size_t>& which) {
    auto chips = softmax_chips(model.infer(stack_images(ds, which)), which, ds);
    for (auto& c : chips) out.push_back(std::move(c));
  });
  return out;
}

std::vector<ProbabilityChip> predict_ensemble(const SegmentationModel& m1,
                                              const SegmentationModel& m2, const ChipDataset& ds,
                                              std::size_t batch_size) {
  std::vector<ProbabilityChip> out;
  for_each_batch(ds, batch_size, [&](const std::vector<std::size_t>& which) {
    const auto images = stack_images(ds, which);
    const auto a = softmax_chips(m1.infer(images), which, ds);
    const auto b = softmax_chips(m2.infer(images), which, ds);
    for (std::size_t i = 0; i < a.size(); ++i) out.push_back(ensemble(a[i], b[i]));
  });
  return out;
}

std::string threshold_key(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", t);
  return buf;
}

RecallReport evaluate_recall(const ProbabilityMosaic& mosaic, const LabelMask& gt,
                             std::span<const double> thresholds) {
  require(!thresholds.empty(), ErrorCode::InvalidArgument, "no thresholds given");
  RecallReport rep;
  for (double t : thresholds) {
    rep.thresholds.push_back(t);
    rep.recalls.push_back(recall_per_class(mosaic, gt, t));
  }
  return rep;
}

json RecallReport::to_json() const {
  json classes = json::object();
  for (int k = 0; k < kNumClasses; ++k) {
    json per = json::object();
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      const auto& v = recalls[i][k];
      per[threshold_key(thresholds[i])] = v ? json(*v) : json(nullptr);
    }
    classes[std::string(class_name(k))] = per;
  }
  json mean = json::object();
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    const auto m = mean_named_recall(recalls[i]);
    mean[threshold_key(thresholds[i])] = m ? json(*m) : json(nullptr);
  }
  return {{"recall", classes}, {"mean_named_classes", mean}};
}

std::string RecallReport::to_text() const {
  auto cell = [](const std::optional<double>& v) {
    char buf[32];
    if (v) std::snprintf(buf, sizeof buf, "%9.4f", *v);
    else std::snprintf(buf, sizeof buf, "%9s", "n/a");
    return std::string(buf);
  };
  std::ostringstream os;
  char head[64];
  std::snprintf(head, sizeof head, "%-10s", "Class");
  os << head;
  for (double t : thresholds) {
    std::snprintf(head, sizeof head, " %9s", ("t=" + threshold_key(t)).c_str());
    os << head;
  }
  os << '\n';
  for (int k = 0; k < kNumClasses; ++k) {
    std::snprintf(head, sizeof head, "%-10s", std::string(class_name(k)).c_str());
    os << head;
    for (const auto& r : recalls) os << ' ' << cell(r[k]);
    os << '\n';
  }
  std::snprintf(head, sizeof head, "%-10s", "Mean*");
  os << head;
  for (const auto& r : recalls) os << ' ' << cell(mean_named_recall(r));
  os << "\n* over Buildings, Roads, Trees, Water\n";
  return os.str();
}

namespace predstore {

void save(const std::filesystem::path& dir, std::span<const ProbabilityChip> chips,
          const ChipDataset& source) {
  static_assert(std::endian::native == std::endian::little, "prediction store is little-endian");
  std::filesystem::create_directories(dir);
  json records = json::array();
  for (const auto& chip : chips) {
    chip.validate();
    const auto path = dir / (chip_stem(chip.index) + ".prob");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(chip.probs.data()),
              static_cast<std::streamsize>(chip.probs.size() * sizeof(float)));
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    records.push_back({{"row_off", chip.index.row_off},
                       {"col_off", chip.index.col_off},
                       {"chip_size", chip.index.chip_size}});
  }
  const json manifest = {{"format", "cpsseg-predictions/1"},
                         {"classes", kNumClasses},
                         {"crs_id", source.crs_id},
                         {"source_shape", {source.source_shape.rows, source.source_shape.cols}},
                         {"transform", transform_json(source.source_transform)},
                         {"records", records}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write prediction manifest");
  out << manifest.dump(2) << '\n';
}

Loaded load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorCode::IoError, "no prediction manifest in " + dir.string());
  Loaded out;
  try {
    const json m = json::parse(in);
    out.crs_id = m.at("crs_id").get<std::string>();
    out.source_shape = {m.at("source_shape")[0].get<std::size_t>(),
                        m.at("source_shape")[1].get<std::size_t>()};
    out.source_transform = transform_from_json(m.at("transform"));
    for (const auto& r : m.at("records")) {
      ProbabilityChip chip;
      chip.index = {r.at("row_off").get<std::size_t>(), r.at("col_off").get<std::size_t>(),
                    r.at("chip_size").get<std::size_t>()};
      chip.probs.resize(static_cast<std::size_t>(kNumClasses) * chip.size() * chip.size());
      const auto path = dir / (chip_stem(chip.index) + ".prob");
      std::ifstream f(path, std::ios::binary);
      f.read(reinterpret_cast<char*>(chip.probs.data()),
             static_cast<std::streamsize>(chip.probs.size() * sizeof(float)));
      if (!f) throw Error(ErrorCode::IoError, "cannot read " + path.string());
      out.chips.push_back(std::move(chip));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("bad prediction manifest: ") + e.what());
  }
  return out;
}

}  // namespace predstore

void write_mosaic(const std::filesystem::path& probs_path, const std::filesystem::path& classes_path,
                  const ProbabilityMosaic& mosaic) {
  geotiff::write_float_bands(probs_path, mosaic.probs, kNumClasses, mosaic.shape, mosaic.transform,
                             mosaic.crs_id);
  geotiff::write_u8(classes_path, mosaic.argmax(), mosaic.transform, mosaic.crs_id);
}

ProbabilityMosaic read_mosaic(const std::filesystem::path& probs_path) {
  const auto f = geotiff::read(probs_path);
  require(f.bands == static_cast<std::size_t>(kNumClasses), ErrorCode::FormatError,
          "probability mosaic must have 5 bands");
  ProbabilityMosaic m;
  m.shape = f.shape;
  m.transform = f.transform;
  m.crs_id = f.crs_id;
  m.probs.resize(f.samples.size());
  for (std::size_t i = 0; i < f.samples.size(); ++i) m.probs[i] = static_cast<float>(f.samples[i]);
  m.coverage = Grid<std::uint32_t>(m.shape, 1);
  return m;
}

}  // namespace cpsseg
