#pragma once

// Georeferenced precipitation grids, the rate quantization scheme,
// threshold-exceedance masks and the NWC1 frame file format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/binary_io.hpp"
#include "nowcast/error.hpp"

namespace nowcast {

/// Regular lat/lon grid anchored at the northwest corner of pixel (0, 0).
struct GeoRef {
  double lat0 = 40.0;
  double lon0 = -100.0;
  double dlat = -0.01;  // degrees per row, rows run south
  double dlon = 0.01;   // degrees per column

  void validate() const {
    if (!(dlon > 0.0) || !(dlat < 0.0) || !(std::abs(lat0) <= 90.0) ||
        !(std::abs(lon0) <= 180.0)) {
      throw InvalidArgument("GeoRef requires dlon > 0, dlat < 0, |lat0| <= 90, |lon0| <= 180");
    }
  }

  double lat_center(double row) const { return lat0 + dlat * (row + 0.5); }
  double lon_center(double col) const { return lon0 + dlon * (col + 0.5); }

  /// Georef of a sub-grid whose pixel (0, 0) is (row, col) here.
  GeoRef shifted(std::size_t row, std::size_t col) const {
    return {lat0 + dlat * static_cast<double>(row), lon0 + dlon * static_cast<double>(col),
            dlat, dlon};
  }

  bool operator==(const GeoRef&) const = default;
};

/// Instantaneous precipitation rate (mm/h) on a georeferenced grid.
/// Immutable once built; the constructor rejects negative or non-finite rates.
class RadarFrame {
 public:
  RadarFrame() = default;

  RadarFrame(std::size_t height, std::size_t width, std::int64_t timestamp, GeoRef georef,
             std::vector<float> rates)
      : height_(height),
        width_(width),
        timestamp_(timestamp),
        georef_(georef),
        rates_(std::move(rates)) {
    if (rates_.size() != height_ * width_) {
      throw InvalidFrame("rate count " + std::to_string(rates_.size()) + " != " +
                         std::to_string(height_) + "x" + std::to_string(width_));
    }
    georef_.validate();
    for (std::size_t i = 0; i < rates_.size(); ++i) {
      if (!std::isfinite(rates_[i]) || rates_[i] < 0.0f) {
        throw InvalidFrame("rate at pixel " + std::to_string(i) + " is negative or non-finite");
      }
    }
  }

  static RadarFrame zeros(std::size_t height, std::size_t width, std::int64_t timestamp = 0,
                          GeoRef georef = {}) {
    return {height, width, timestamp, georef, std::vector<float>(height * width, 0.0f)};
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return rates_.size(); }
  std::int64_t timestamp() const noexcept { return timestamp_; }
  const GeoRef& georef() const noexcept { return georef_; }
  std::span<const float> rates() const noexcept { return rates_; }
  float at(std::size_t row, std::size_t col) const { return rates_[row * width_ + col]; }

  RadarFrame with_timestamp(std::int64_t t) const {
    RadarFrame f = *this;
    f.timestamp_ = t;
    return f;
  }

  bool operator==(const RadarFrame&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::int64_t timestamp_ = 0;
  GeoRef georef_{};
  std::vector<float> rates_;
};

/// Rectangular crop whose top-left pixel is (row, col).
inline RadarFrame crop(const RadarFrame& frame, std::size_t row, std::size_t col,
                       std::size_t height, std::size_t width) {
  if (row + height > frame.height() || col + width > frame.width()) {
    throw InvalidArgument("crop window exceeds frame bounds");
  }
  std::vector<float> out(height * width);
  for (std::size_t r = 0; r < height; ++r) {
    const auto src = frame.rates().subspan((row + r) * frame.width() + col, width);
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return {height, width, frame.timestamp(), frame.georef().shifted(row, col), std::move(out)};
}

inline RadarFrame crop(const RadarFrame& frame, std::size_t row, std::size_t col,
                       std::size_t size) {
  return crop(frame, row, col, size, size);
}

/// Ascending rate cut points; class k covers [threshold[k-1], threshold[k]).
class QuantizationScheme {
 public:
  QuantizationScheme() : QuantizationScheme(std::vector<double>{0.1, 1.0, 2.5}) {}

  explicit QuantizationScheme(std::vector<double> thresholds)
      : thresholds_(std::move(thresholds)) {
    if (thresholds_.empty() || thresholds_.size() > 254) {
      throw InvalidArgument("quantization scheme needs 1..254 thresholds");
    }
    for (std::size_t i = 0; i < thresholds_.size(); ++i) {
      if (!(thresholds_[i] > 0.0) || !std::isfinite(thresholds_[i]) ||
          (i > 0 && !(thresholds_[i] > thresholds_[i - 1]))) {
        throw InvalidArgument("thresholds must be positive, finite and strictly ascending");
      }
      cuts_.push_back(static_cast<float>(thresholds_[i]));
      if (i > 0 && !(cuts_[i] > cuts_[i - 1])) {
        throw InvalidArgument("thresholds collide at 32-bit rate resolution");
      }
    }
  }

  const std::vector<double>& thresholds() const noexcept { return thresholds_; }
  std::size_t class_count() const noexcept { return thresholds_.size() + 1; }

  /// Number of thresholds <= rate. Comparison happens at the 32-bit
  /// resolution rates are stored in, so a threshold value always owns its bin.
  std::uint8_t classify(float rate) const {
    return static_cast<std::uint8_t>(std::upper_bound(cuts_.begin(), cuts_.end(), rate) -
                                     cuts_.begin());
  }

  bool operator==(const QuantizationScheme&) const = default;

 private:
  std::vector<double> thresholds_;
  std::vector<float> cuts_;
};

struct ClassGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> classes;

  std::uint8_t at(std::size_t row, std::size_t col) const { return classes[row * width + col]; }
  bool operator==(const ClassGrid&) const = default;
};

struct BitMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1

  bool operator==(const BitMask&) const = default;
};

inline ClassGrid quantize(const RadarFrame& frame, const QuantizationScheme& scheme) {
  ClassGrid grid{frame.height(), frame.width(), std::vector<std::uint8_t>(frame.size())};
  const auto rates = frame.rates();
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (!std::isfinite(rates[i]) || rates[i] < 0.0f) {
      throw InvalidFrame("rate at pixel " + std::to_string(i) + " is negative or non-finite");
    }
    grid.classes[i] = scheme.classify(rates[i]);
  }
  return grid;
}

/// Bit set where the pixel reaches threshold `threshold_index`, i.e. its
/// class index is strictly greater than the threshold index.
inline BitMask exceedance_mask(const ClassGrid& grid, std::size_t threshold_index,
                               std::size_t threshold_count = 3) {
  if (threshold_index >= threshold_count) {
    throw InvalidArgument("threshold index " + std::to_string(threshold_index) +
                          " out of range (count " + std::to_string(threshold_count) + ")");
  }
  BitMask mask{grid.height, grid.width, std::vector<std::uint8_t>(grid.classes.size())};
  std::transform(grid.classes.begin(), grid.classes.end(), mask.bits.begin(),
                 [threshold_index](std::uint8_t c) {
                   return static_cast<std::uint8_t>(c > threshold_index);
                 });
  return mask;
}

inline BitMask exceedance_mask(const ClassGrid& grid, std::size_t threshold_index,
                               const QuantizationScheme& scheme) {
  return exceedance_mask(grid, threshold_index, scheme.thresholds().size());
}

// ---------------------------------------------------------------------------
// NWC1 frame files: magic "NWC1", u32 height, u32 width, i64 timestamp,
// f64 lat0, lon0, dlat, dlon, then height*width f32 rates (row-major).

inline constexpr std::array<char, 4> kFrameMagic{'N', 'W', 'C', '1'};
inline constexpr std::size_t kFrameHeaderBytes = 4 + 4 + 4 + 8 + 4 * 8;

inline void write_frame(const RadarFrame& frame, std::ostream& out) {
  out.write(kFrameMagic.data(), kFrameMagic.size());
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(frame.height()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(frame.width()));
  io::put<std::int64_t>(out, frame.timestamp());
  const auto& g = frame.georef();
  for (double v : {g.lat0, g.lon0, g.dlat, g.dlon}) io::put<double>(out, v);
  out.write(reinterpret_cast<const char*>(frame.rates().data()),
            static_cast<std::streamsize>(frame.size() * sizeof(float)));
  if (!out) throw Error("failed writing frame");
}

namespace detail {

struct GridHeader {
  std::uint32_t height;
  std::uint32_t width;
  std::int64_t timestamp;
  GeoRef georef;
};

inline GridHeader read_grid_header(io::Reader& in, const std::array<char, 4>& magic) {
  char got[4];
  in.bytes(got, 4, "magic");
  if (!std::equal(got, got + 4, magic.begin())) {
    throw FormatError("bad magic, expected " + std::string(magic.begin(), magic.end()), 0);
  }
  GridHeader h{};
  h.height = in.get<std::uint32_t>("height");
  h.width = in.get<std::uint32_t>("width");
  h.timestamp = in.get<std::int64_t>("timestamp");
  const auto georef_at = in.offset();
  h.georef.lat0 = in.get<double>("lat0");
  h.georef.lon0 = in.get<double>("lon0");
  h.georef.dlat = in.get<double>("dlat");
  h.georef.dlon = in.get<double>("dlon");
  try {
    h.georef.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(e.what(), georef_at);
  }
  return h;
}

}  // namespace detail

inline RadarFrame read_frame(std::istream& source) {
  io::Reader in(source);
  const auto h = detail::read_grid_header(in, kFrameMagic);
  const std::size_t count = std::size_t{h.height} * h.width;
  const auto payload_at = in.offset();
  std::vector<float> rates;
  in.get_array(rates, count, "rate payload");
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::isfinite(rates[i]) || rates[i] < 0.0f) {
      throw FormatError("negative or non-finite rate", payload_at + i * sizeof(float));
    }
  }
  return {h.height, h.width, h.timestamp, h.georef, std::move(rates)};
}

inline void save_frame(const RadarFrame& frame, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_frame(frame, out);
}

inline RadarFrame load_frame(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_frame(in);
}

}  // namespace nowcast
