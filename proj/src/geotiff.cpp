#include "cpsseg/geotiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace cpsseg::geotiff {
namespace {

// Baseline TIFF tags.
constexpr std::uint16_t kImageWidth = 256;
constexpr std::uint16_t kImageLength = 257;
constexpr std::uint16_t kBitsPerSample = 258;
constexpr std::uint16_t kCompression = 259;
constexpr std::uint16_t kPhotometric = 262;
constexpr std::uint16_t kStripOffsets = 273;
constexpr std::uint16_t kSamplesPerPixel = 277;
constexpr std::uint16_t kRowsPerStrip = 278;
constexpr std::uint16_t kStripByteCounts = 279;
constexpr std::uint16_t kPlanarConfig = 284;
constexpr std::uint16_t kTileWidth = 322;
constexpr std::uint16_t kTileLength = 323;
constexpr std::uint16_t kTileOffsets = 324;
constexpr std::uint16_t kTileByteCounts = 325;
constexpr std::uint16_t kExtraSamples = 338;
constexpr std::uint16_t kSampleFormat = 339;
// GeoTIFF tags.
constexpr std::uint16_t kModelPixelScale = 33550;
constexpr std::uint16_t kModelTiepoint = 33922;
constexpr std::uint16_t kModelTransformation = 34264;
constexpr std::uint16_t kGeoKeyDirectory = 34735;
constexpr std::uint16_t kGeoDoubleParams = 34736;
constexpr std::uint16_t kGeoAsciiParams = 34737;
constexpr std::uint16_t kGdalNodata = 42113;
// GeoKeys.
constexpr std::uint16_t kGTModelTypeKey = 1024;
constexpr std::uint16_t kGTRasterTypeKey = 1025;
constexpr std::uint16_t kGTCitationKey = 1026;
constexpr std::uint16_t kGeographicTypeKey = 2048;
constexpr std::uint16_t kProjectedCSTypeKey = 3072;

enum FieldType : std::uint16_t {
  kByte = 1, kAscii = 2, kShort = 3, kLong = 4, kRational = 5, kSByte = 6,
  kUndefined = 7, kSShort = 8, kSLong = 9, kSRational = 10, kFloat = 11, kDouble = 12,
};

std::size_t field_size(std::uint16_t type) {
  switch (type) {
    case kByte: case kAscii: case kSByte: case kUndefined: return 1;
    case kShort: case kSShort: return 2;
    case kLong: case kSLong: case kFloat: return 4;
    case kRational: case kSRational: case kDouble: return 8;
    default: return 0;
  }
}

std::size_t sample_bytes(SampleType t) {
  switch (t) {
    case SampleType::UInt8: return 1;
    case SampleType::UInt16: case SampleType::Int16: return 2;
    case SampleType::UInt32: case SampleType::Int32: case SampleType::Float32: return 4;
    case SampleType::Float64: return 8;
  }
  return 0;
}

std::uint16_t sample_format_code(SampleType t) {
  switch (t) {
    case SampleType::Int16: case SampleType::Int32: return 2;
    case SampleType::Float32: case SampleType::Float64: return 3;
    default: return 1;
  }
}

class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> bytes, bool big_endian)
      : bytes_(std::move(bytes)), big_endian_(big_endian) {}

  std::size_t size() const { return bytes_.size(); }
  const std::uint8_t* data() const { return bytes_.data(); }
  bool big_endian() const { return big_endian_; }

  void check(std::size_t offset, std::size_t n) const {
    if (offset > bytes_.size() || n > bytes_.size() - offset) {
      throw Error(ErrorCode::FormatError, "TIFF offset out of range");
    }
  }

  std::uint64_t uint(std::size_t offset, std::size_t n) const {
    check(offset, n);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = big_endian_ ? offset + i : offset + n - 1 - i;
      v = (v << 8) | bytes_[idx];
    }
    return v;
  }
  std::uint16_t u16(std::size_t offset) const {
    return static_cast<std::uint16_t>(uint(offset, 2));
  }
  std::uint32_t u32(std::size_t offset) const {
    return static_cast<std::uint32_t>(uint(offset, 4));
  }

 private:
  std::vector<std::uint8_t> bytes_;
  bool big_endian_;
};

struct Entry {
  std::uint16_t type = 0;
  std::uint32_t count = 0;
  std::size_t value_offset = 0;  // absolute offset of the value bytes
};

double field_as_double(const ByteReader& r, const Entry& e, std::size_t i) {
  const std::size_t sz = field_size(e.type);
  const std::size_t off = e.value_offset + i * sz;
  switch (e.type) {
    case kByte: case kUndefined: case kShort: case kLong:
      return static_cast<double>(r.uint(off, sz));
    case kSByte: return static_cast<std::int8_t>(r.uint(off, 1));
    case kSShort: return static_cast<std::int16_t>(r.uint(off, 2));
    case kSLong: return static_cast<std::int32_t>(r.uint(off, 4));
    case kFloat: return std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(off, 4)));
    case kDouble: return std::bit_cast<double>(r.uint(off, 8));
    case kRational:
      return static_cast<double>(r.uint(off, 4)) / static_cast<double>(r.uint(off + 4, 4));
    case kSRational:
      return static_cast<double>(static_cast<std::int32_t>(r.uint(off, 4))) /
             static_cast<double>(static_cast<std::int32_t>(r.uint(off + 4, 4)));
    default:
      throw Error(ErrorCode::FormatError, "unsupported TIFF field type");
  }
}

std::vector<double> field_values(const ByteReader& r, const Entry& e) {
  std::vector<double> out(e.count);
  for (std::uint32_t i = 0; i < e.count; ++i) out[i] = field_as_double(r, e, i);
  return out;
}

std::string field_ascii(const ByteReader& r, const Entry& e) {
  r.check(e.value_offset, e.count);
  std::string s(reinterpret_cast<const char*>(r.data() + e.value_offset), e.count);
  while (!s.empty() && s.back() == '\0') s.pop_back();
  return s;
}

double decode_sample(const std::uint8_t* p, SampleType t, bool big_endian) {
  std::uint8_t buf[8];
  const std::size_t n = sample_bytes(t);
  std::memcpy(buf, p, n);
  if (big_endian != (std::endian::native == std::endian::big)) std::reverse(buf, buf + n);
  switch (t) {
    case SampleType::UInt8: return buf[0];
    case SampleType::UInt16: { std::uint16_t v; std::memcpy(&v, buf, 2); return v; }
    case SampleType::Int16: { std::int16_t v; std::memcpy(&v, buf, 2); return v; }
    case SampleType::UInt32: { std::uint32_t v; std::memcpy(&v, buf, 4); return v; }
    case SampleType::Int32: { std::int32_t v; std::memcpy(&v, buf, 4); return v; }
    case SampleType::Float32: { float v; std::memcpy(&v, buf, 4); return v; }
    case SampleType::Float64: { double v; std::memcpy(&v, buf, 8); return v; }
  }
  return 0.0;
}

SampleType resolve_sample_type(unsigned bits, unsigned format) {
  if (format == 3 && bits == 32) return SampleType::Float32;
  if (format == 3 && bits == 64) return SampleType::Float64;
  if (format == 2 && bits == 16) return SampleType::Int16;
  if (format == 2 && bits == 32) return SampleType::Int32;
  if (format == 1 && bits == 8) return SampleType::UInt8;
  if (format == 1 && bits == 16) return SampleType::UInt16;
  if (format == 1 && bits == 32) return SampleType::UInt32;
  throw Error(ErrorCode::FormatError, "unsupported sample layout: " + std::to_string(bits) +
                                          " bits, format " + std::to_string(format));
}

std::string epsg_from_keys(const std::map<std::uint16_t, double>& keys) {
  for (std::uint16_t k : {kProjectedCSTypeKey, kGeographicTypeKey}) {
    auto it = keys.find(k);
    if (it != keys.end() && it->second > 0 && it->second < 32767) {
      return "EPSG:" + std::to_string(static_cast<int>(it->second));
    }
  }
  return {};
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw Error(ErrorCode::IoError, "short read on " + path.string());
  return bytes;
}

// In-memory IFD builder for the writer; all values are little-endian.
class IfdBuilder {
 public:
  void add_shorts(std::uint16_t tag, std::vector<std::uint16_t> v) {
    std::vector<std::uint8_t> b;
    for (auto x : v) append_le(b, x, 2);
    add(tag, kShort, static_cast<std::uint32_t>(v.size()), std::move(b));
  }
  void add_longs(std::uint16_t tag, std::vector<std::uint32_t> v) {
    std::vector<std::uint8_t> b;
    for (auto x : v) append_le(b, x, 4);
    add(tag, kLong, static_cast<std::uint32_t>(v.size()), std::move(b));
  }
  void add_doubles(std::uint16_t tag, std::vector<double> v) {
    std::vector<std::uint8_t> b;
    for (double x : v) append_le(b, std::bit_cast<std::uint64_t>(x), 8);
    add(tag, kDouble, static_cast<std::uint32_t>(v.size()), std::move(b));
  }
  void add_ascii(std::uint16_t tag, const std::string& s) {
    std::vector<std::uint8_t> b(s.begin(), s.end());
    b.push_back(0);
    const auto count = static_cast<std::uint32_t>(b.size());
    add(tag, kAscii, count, std::move(b));
  }

  std::size_t byte_size() const {
    std::size_t n = 2 + entries_.size() * 12 + 4;
    for (const auto& [tag, e] : entries_) {
      if (e.bytes.size() > 4) n += e.bytes.size() + (e.bytes.size() & 1);
    }
    return n;
  }

  std::vector<std::uint8_t> serialize(std::size_t ifd_offset) const {
    std::vector<std::uint8_t> out;
    append_le(out, entries_.size(), 2);
    std::size_t extra = ifd_offset + 2 + entries_.size() * 12 + 4;
    std::vector<std::uint8_t> tail;
    for (const auto& [tag, e] : entries_) {
      append_le(out, tag, 2);
      append_le(out, e.type, 2);
      append_le(out, e.count, 4);
      if (e.bytes.size() <= 4) {
        std::vector<std::uint8_t> inl = e.bytes;
        inl.resize(4, 0);
        out.insert(out.end(), inl.begin(), inl.end());
      } else {
        append_le(out, extra + tail.size(), 4);
        tail.insert(tail.end(), e.bytes.begin(), e.bytes.end());
        if (tail.size() & 1) tail.push_back(0);
      }
    }
    append_le(out, 0, 4);  // no next IFD
    out.insert(out.end(), tail.begin(), tail.end());
    return out;
  }

 private:
  struct Value {
    std::uint16_t type;
    std::uint32_t count;
    std::vector<std::uint8_t> bytes;
  };

  static void append_le(std::vector<std::uint8_t>& b, std::uint64_t v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void add(std::uint16_t tag, std::uint16_t type, std::uint32_t count,
           std::vector<std::uint8_t> bytes) {
    entries_[tag] = Value{type, count, std::move(bytes)};
  }

  std::map<std::uint16_t, Value> entries_;  // tags must be ascending
};

std::string format_nodata(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

RasterFile read(const std::filesystem::path& path) {
  auto bytes = slurp(path);
  if (bytes.size() < 8) throw Error(ErrorCode::FormatError, "file too small for TIFF");
  bool big_endian = false;
  if (bytes[0] == 'I' && bytes[1] == 'I') {
    big_endian = false;
  } else if (bytes[0] == 'M' && bytes[1] == 'M') {
    big_endian = true;
  } else {
    throw Error(ErrorCode::FormatError, "not a TIFF file: " + path.string());
  }
  ByteReader r(std::move(bytes), big_endian);
  if (r.u16(2) != 42) throw Error(ErrorCode::FormatError, "BigTIFF and non-TIFF unsupported");
  const std::size_t ifd = r.u32(4);
  const std::size_t n_entries = r.u16(ifd);

  std::map<std::uint16_t, Entry> tags;
  for (std::size_t i = 0; i < n_entries; ++i) {
    const std::size_t at = ifd + 2 + i * 12;
    Entry e;
    const std::uint16_t tag = r.u16(at);
    e.type = r.u16(at + 2);
    e.count = r.u32(at + 4);
    const std::size_t fs = field_size(e.type);
    if (fs == 0) continue;
    e.value_offset = fs * e.count <= 4 ? at + 8 : r.u32(at + 8);
    r.check(e.value_offset, fs * e.count);
    tags[tag] = e;
  }

  auto scalar = [&](std::uint16_t tag, double fallback) {
    auto it = tags.find(tag);
    return it == tags.end() ? fallback : field_as_double(r, it->second, 0);
  };
  auto need = [&](std::uint16_t tag) -> const Entry& {
    auto it = tags.find(tag);
    if (it == tags.end()) {
      throw Error(ErrorCode::FormatError, "missing TIFF tag " + std::to_string(tag));
    }
    return it->second;
  };

  RasterFile out;
  out.shape.cols = static_cast<std::size_t>(field_as_double(r, need(kImageWidth), 0));
  out.shape.rows = static_cast<std::size_t>(field_as_double(r, need(kImageLength), 0));
  out.bands = static_cast<std::size_t>(scalar(kSamplesPerPixel, 1));
  if (scalar(kCompression, 1) != 1) {
    throw Error(ErrorCode::FormatError, "compressed TIFF is not supported");
  }
  const auto bits = static_cast<unsigned>(scalar(kBitsPerSample, 1));
  const auto fmt = static_cast<unsigned>(scalar(kSampleFormat, 1));
  out.sample_type = resolve_sample_type(bits, fmt);
  const bool planar = scalar(kPlanarConfig, 1) == 2;
  const std::size_t bps = sample_bytes(out.sample_type);
  const std::size_t rows = out.shape.rows, cols = out.shape.cols, bands = out.bands;
  out.samples.assign(bands * rows * cols, 0.0);

  // A chunk is a strip (full width) or a tile; both are walked the same way.
  const bool tiled = tags.count(kTileOffsets) != 0;
  std::size_t chunk_w = cols, chunk_h = rows;
  std::vector<double> offsets;
  if (tiled) {
    chunk_w = static_cast<std::size_t>(field_as_double(r, need(kTileWidth), 0));
    chunk_h = static_cast<std::size_t>(field_as_double(r, need(kTileLength), 0));
    offsets = field_values(r, need(kTileOffsets));
  } else {
    chunk_h = static_cast<std::size_t>(scalar(kRowsPerStrip, static_cast<double>(rows)));
    chunk_h = std::min(std::max<std::size_t>(chunk_h, 1), rows);
    offsets = field_values(r, need(kStripOffsets));
  }
  const std::size_t across = (cols + chunk_w - 1) / chunk_w;
  const std::size_t down = (rows + chunk_h - 1) / chunk_h;
  const std::size_t per_plane = across * down;
  const std::size_t planes = planar ? bands : 1;
  if (offsets.size() < per_plane * planes) {
    throw Error(ErrorCode::FormatError, "too few strip/tile offsets");
  }
  const std::size_t spp_in_chunk = planar ? 1 : bands;
  for (std::size_t plane = 0; plane < planes; ++plane) {
    for (std::size_t cy = 0; cy < down; ++cy) {
      for (std::size_t cx = 0; cx < across; ++cx) {
        const std::size_t base = static_cast<std::size_t>(offsets[plane * per_plane + cy * across + cx]);
        // Strips may be truncated at the image bottom; tiles are always full.
        const std::size_t h = tiled ? chunk_h : std::min(chunk_h, rows - cy * chunk_h);
        r.check(base, h * chunk_w * spp_in_chunk * bps);
        for (std::size_t y = 0; y < h; ++y) {
          const std::size_t row = cy * chunk_h + y;
          if (row >= rows) break;
          for (std::size_t x = 0; x < chunk_w; ++x) {
            const std::size_t col = cx * chunk_w + x;
            if (col >= cols) break;
            for (std::size_t s = 0; s < spp_in_chunk; ++s) {
              const std::size_t band = planar ? plane : s;
              const std::uint8_t* p =
                  r.data() + base + ((y * chunk_w + x) * spp_in_chunk + s) * bps;
              out.samples[(band * rows + row) * cols + col] =
                  decode_sample(p, out.sample_type, r.big_endian());
            }
          }
        }
      }
    }
  }

  // Georeferencing.
  std::map<std::uint16_t, double> keys;
  std::string citation;
  if (auto it = tags.find(kGeoKeyDirectory); it != tags.end()) {
    const auto dir = field_values(r, it->second);
    if (dir.size() >= 4) {
      const auto n = static_cast<std::size_t>(dir[3]);
      for (std::size_t k = 0; k < n && 4 + 4 * k + 3 < dir.size(); ++k) {
        const auto key = static_cast<std::uint16_t>(dir[4 + 4 * k]);
        const auto loc = static_cast<std::uint16_t>(dir[4 + 4 * k + 1]);
        const auto count = static_cast<std::size_t>(dir[4 + 4 * k + 2]);
        const auto value = dir[4 + 4 * k + 3];
        if (loc == 0) {
          keys[key] = value;
        } else if (loc == kGeoAsciiParams && key == kGTCitationKey) {
          if (auto a = tags.find(kGeoAsciiParams); a != tags.end()) {
            const std::string all = field_ascii(r, a->second);
            const auto start = static_cast<std::size_t>(value);
            if (start < all.size()) {
              citation = all.substr(start, count);
              while (!citation.empty() && (citation.back() == '|' || citation.back() == '\0')) {
                citation.pop_back();
              }
            }
          }
        }
      }
    }
  }
  out.crs_id = !citation.empty() ? citation : epsg_from_keys(keys);

  AffineGeoTransform t = AffineGeoTransform::identity();
  if (auto it = tags.find(kModelTransformation); it != tags.end()) {
    const auto m = field_values(r, it->second);
    if (m.size() < 16) throw Error(ErrorCode::FormatError, "bad ModelTransformation");
    t = {m[3], m[7], m[0], m[5], m[4], m[1]};
  } else if (tags.count(kModelPixelScale) && tags.count(kModelTiepoint)) {
    const auto s = field_values(r, tags.at(kModelPixelScale));
    const auto tp = field_values(r, tags.at(kModelTiepoint));
    if (s.size() < 2 || tp.size() < 6) throw Error(ErrorCode::FormatError, "bad tiepoint");
    t.pixel_width = s[0];
    t.pixel_height = -s[1];
    t.origin_x = tp[3] - tp[0] * s[0];
    t.origin_y = tp[4] + tp[1] * s[1];
  }
  if (auto it = keys.find(kGTRasterTypeKey); it != keys.end() && it->second == 2) {
    // PixelIsPoint: the model point is the pixel center.
    const WorldPoint half = pixel_to_world(t, -0.5, -0.5);
    t.origin_x = half.x;
    t.origin_y = half.y;
  }
  out.transform = t;

  if (auto it = tags.find(kGdalNodata); it != tags.end()) {
    const std::string s = field_ascii(r, it->second);
    try {
      out.nodata = std::stod(s);
    } catch (const std::exception&) {
      throw Error(ErrorCode::FormatError, "unparseable GDAL_NODATA value '" + s + "'");
    }
  }
  return out;
}

void write(const std::filesystem::path& path, const RasterFile& raster) {
  const std::size_t rows = raster.shape.rows, cols = raster.shape.cols;
  const std::size_t bands = raster.bands;
  require(rows > 0 && cols > 0 && bands > 0, ErrorCode::EmptyShape, "cannot write empty raster");
  require(raster.samples.size() == bands * rows * cols, ErrorCode::ShapeMismatch,
          "sample count does not match raster dimensions");
  const std::size_t bps = sample_bytes(raster.sample_type);
  const std::size_t plane_bytes = rows * cols * bps;
  require(plane_bytes < (std::size_t{1} << 32), ErrorCode::InvalidArgument,
          "band plane exceeds classic TIFF limits");

  IfdBuilder ifd;
  ifd.add_longs(kImageWidth, {static_cast<std::uint32_t>(cols)});
  ifd.add_longs(kImageLength, {static_cast<std::uint32_t>(rows)});
  ifd.add_shorts(kBitsPerSample,
                 std::vector<std::uint16_t>(bands, static_cast<std::uint16_t>(bps * 8)));
  ifd.add_shorts(kCompression, {1});
  ifd.add_shorts(kPhotometric, {1});
  ifd.add_shorts(kSamplesPerPixel, {static_cast<std::uint16_t>(bands)});
  ifd.add_longs(kRowsPerStrip, {static_cast<std::uint32_t>(rows)});
  ifd.add_shorts(kPlanarConfig, {2});
  if (bands > 1) ifd.add_shorts(kExtraSamples, std::vector<std::uint16_t>(bands - 1, 0));
  ifd.add_shorts(kSampleFormat,
                 std::vector<std::uint16_t>(bands, sample_format_code(raster.sample_type)));

  const AffineGeoTransform& t = raster.transform;
  if (t.row_rotation == 0.0 && t.col_rotation == 0.0 && t.pixel_height < 0.0) {
    ifd.add_doubles(kModelPixelScale, {t.pixel_width, -t.pixel_height, 0.0});
    ifd.add_doubles(kModelTiepoint, {0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0});
  } else {
    ifd.add_doubles(kModelTransformation,
                    {t.pixel_width, t.col_rotation, 0.0, t.origin_x,
                     t.row_rotation, t.pixel_height, 0.0, t.origin_y,
                     0.0, 0.0, 0.0, 0.0,
                     0.0, 0.0, 0.0, 1.0});
  }
  std::vector<std::uint16_t> keys = {1, 1, 0, 0};
  auto add_key = [&](std::uint16_t id, std::uint16_t loc, std::uint16_t count,
                     std::uint16_t value) {
    keys.insert(keys.end(), {id, loc, count, value});
    keys[3] = static_cast<std::uint16_t>(keys[3] + 1);
  };
  // CRS is opaque; the id string rides in the citation key so any value
  // round-trips. EPSG codes are also written as numeric keys.
  int epsg = 0;
  if (raster.crs_id.rfind("EPSG:", 0) == 0) {
    try {
      epsg = std::stoi(raster.crs_id.substr(5));
    } catch (const std::exception&) {
      epsg = 0;
    }
  }
  const bool geographic = epsg >= 4000 && epsg < 5000;
  if (epsg > 0 && epsg < 32767) add_key(kGTModelTypeKey, 0, 1, geographic ? 2 : 1);
  add_key(kGTRasterTypeKey, 0, 1, 1);
  std::string ascii;
  if (!raster.crs_id.empty()) {
    ascii = raster.crs_id + "|";
    add_key(kGTCitationKey, kGeoAsciiParams, static_cast<std::uint16_t>(ascii.size()), 0);
  }
  if (epsg > 0 && epsg < 32767) {
    add_key(geographic ? kGeographicTypeKey : kProjectedCSTypeKey, 0, 1,
            static_cast<std::uint16_t>(epsg));
  }
  ifd.add_shorts(kGeoKeyDirectory, keys);
  if (!ascii.empty()) ifd.add_ascii(kGeoAsciiParams, ascii);
  if (raster.nodata) ifd.add_ascii(kGdalNodata, format_nodata(*raster.nodata));

  const std::size_t data_offset = 8;
  std::vector<std::uint32_t> strip_offsets(bands), strip_counts(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    strip_offsets[b] = static_cast<std::uint32_t>(data_offset + b * plane_bytes);
    strip_counts[b] = static_cast<std::uint32_t>(plane_bytes);
  }
  ifd.add_longs(kStripOffsets, strip_offsets);
  ifd.add_longs(kStripByteCounts, strip_counts);
  std::size_t ifd_offset = data_offset + bands * plane_bytes;
  ifd_offset += ifd_offset & 1;
  require(ifd_offset + ifd.byte_size() < (std::size_t{1} << 32), ErrorCode::InvalidArgument,
          "raster exceeds classic TIFF limits");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot create " + path.string());
  const std::uint8_t header[8] = {
      'I', 'I', 42, 0,
      static_cast<std::uint8_t>(ifd_offset), static_cast<std::uint8_t>(ifd_offset >> 8),
      static_cast<std::uint8_t>(ifd_offset >> 16), static_cast<std::uint8_t>(ifd_offset >> 24)};
  out.write(reinterpret_cast<const char*>(header), 8);

  std::vector<std::uint8_t> row_buf(cols * bps);
  for (std::size_t b = 0; b < bands; ++b) {
    for (std::size_t row = 0; row < rows; ++row) {
      const double* src = raster.samples.data() + (b * rows + row) * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        std::uint8_t* dst = row_buf.data() + c * bps;
        const double v = src[c];
        switch (raster.sample_type) {
          case SampleType::UInt8: { auto x = static_cast<std::uint8_t>(v); std::memcpy(dst, &x, 1); break; }
          case SampleType::UInt16: { auto x = static_cast<std::uint16_t>(v); std::memcpy(dst, &x, 2); break; }
          case SampleType::Int16: { auto x = static_cast<std::int16_t>(v); std::memcpy(dst, &x, 2); break; }
          case SampleType::UInt32: { auto x = static_cast<std::uint32_t>(v); std::memcpy(dst, &x, 4); break; }
          case SampleType::Int32: { auto x = static_cast<std::int32_t>(v); std::memcpy(dst, &x, 4); break; }
          case SampleType::Float32: { auto x = static_cast<float>(v); std::memcpy(dst, &x, 4); break; }
          case SampleType::Float64: { std::memcpy(dst, &v, 8); break; }
        }
      }
      static_assert(std::endian::native == std::endian::little, "writer assumes little-endian host");
      out.write(reinterpret_cast<const char*>(row_buf.data()),
                static_cast<std::streamsize>(row_buf.size()));
    }
  }
  if ((data_offset + bands * plane_bytes) & 1) out.put(0);
  const auto ifd_bytes = ifd.serialize(ifd_offset);
  out.write(reinterpret_cast<const char*>(ifd_bytes.data()),
            static_cast<std::streamsize>(ifd_bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

GeoRaster read_raster(const std::filesystem::path& path) {
  RasterFile f = read(path);
  GeoRaster raster(f.bands, f.shape, f.transform, f.crs_id);
  auto dst = raster.values();
  for (std::size_t i = 0; i < f.samples.size(); ++i) dst[i] = static_cast<float>(f.samples[i]);
  const std::size_t n = f.shape.area();
  auto& mask = raster.nodata_mask().storage();
  if (f.nodata && !std::isnan(*f.nodata)) {
    for (std::size_t b = 0; b < f.bands; ++b) {
      for (std::size_t i = 0; i < n; ++i) {
        if (f.samples[b * n + i] == *f.nodata) mask[i] = 1;
      }
    }
  }
  raster.mark_nan_as_nodata();
  return raster;
}

void write_raster(const std::filesystem::path& path, const GeoRaster& raster) {
  RasterFile f;
  f.bands = raster.band_count();
  f.shape = raster.shape();
  f.sample_type = SampleType::Float32;
  f.transform = raster.transform();
  f.crs_id = raster.crs_id();
  f.samples.assign(raster.values().begin(), raster.values().end());
  const std::size_t n = f.shape.area();
  const auto& mask = raster.nodata_mask().storage();
  bool any_nodata = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    any_nodata = true;
    for (std::size_t b = 0; b < f.bands; ++b) f.samples[b * n + i] = std::nan("");
  }
  if (any_nodata) f.nodata = std::nan("");
  write(path, f);
}

void write_u8(const std::filesystem::path& path, const Grid<std::uint8_t>& grid,
              const AffineGeoTransform& transform, const std::string& crs_id) {
  RasterFile f;
  f.bands = 1;
  f.shape = grid.shape();
  f.sample_type = SampleType::UInt8;
  f.transform = transform;
  f.crs_id = crs_id;
  f.samples.assign(grid.values().begin(), grid.values().end());
  write(path, f);
}

Grid<std::uint8_t> read_u8(const std::filesystem::path& path, AffineGeoTransform* transform,
                           std::string* crs_id) {
  RasterFile f = read(path);
  require(f.bands >= 1, ErrorCode::MissingBand, "no bands in " + path.string());
  Grid<std::uint8_t> grid(f.shape);
  auto dst = grid.values();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double v = f.samples[i];
    if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v)) {
      throw Error(ErrorCode::InvalidClassValue,
                  "non-integer or out-of-range value in " + path.string());
    }
    dst[i] = static_cast<std::uint8_t>(v);
  }
  if (transform) *transform = f.transform;
  if (crs_id) *crs_id = f.crs_id;
  return grid;
}

LabelMask read_label_mask(const std::filesystem::path& path) {
  LabelMask m;
  m.classes = read_u8(path, &m.transform, &m.crs_id);
  m.validate();
  return m;
}

void write_label_mask(const std::filesystem::path& path, const LabelMask& mask) {
  mask.validate();
  write_u8(path, mask.classes, mask.transform, mask.crs_id);
}

void write_float_bands(const std::filesystem::path& path, std::span<const float> values,
                       std::size_t bands, RasterShape shape,
                       const AffineGeoTransform& transform, const std::string& crs_id) {
  RasterFile f;
  f.bands = bands;
  f.shape = shape;
  f.sample_type = SampleType::Float32;
  f.transform = transform;
  f.crs_id = crs_id;
  f.samples.assign(values.begin(), values.end());
  write(path, f);
}

}  // namespace cpsseg::geotiff
