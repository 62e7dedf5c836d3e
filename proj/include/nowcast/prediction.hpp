#pragma once

// Threshold-exceedance probability maps and their file format ("NWP1"):
// the NWC1 header layout with magic "NWP1" (u32 height, u32 width,
// i64 valid time, f64 lat0, lon0, dlat, dlon), then u32 plane count and
// plane_count * height * width f32 probabilities, plane-major.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "nowcast/binary_io.hpp"
#include "nowcast/error.hpp"
#include "nowcast/raster.hpp"

namespace nowcast {

/// One probability plane per threshold: maps[i][p] = P(rate >= r_i) at pixel p.
struct ExceedanceMaps {
  std::size_t height = 0;
  std::size_t width = 0;
  std::int64_t timestamp = 0;  // valid time of the forecast
  GeoRef georef{};
  std::vector<std::vector<float>> maps;

  void validate() const {
    for (const auto& m : maps) {
      if (m.size() != height * width) throw InvalidArgument("probability plane size mismatch");
      for (float p : m) {
        if (!(p >= 0.0f && p <= 1.0f)) throw InvalidArgument("probability outside [0, 1]");
      }
    }
  }

  /// True when P_0 >= P_1 >= ... at every pixel.
  bool nested() const {
    for (std::size_t i = 1; i < maps.size(); ++i) {
      for (std::size_t p = 0; p < maps[i].size(); ++p) {
        if (maps[i][p] > maps[i - 1][p]) return false;
      }
    }
    return true;
  }

  bool operator==(const ExceedanceMaps&) const = default;
};

/// Hard {0,1} maps from a quantized grid: plane i is the exceedance mask of threshold i.
inline ExceedanceMaps hard_maps(const ClassGrid& grid, std::size_t threshold_count) {
  ExceedanceMaps out{grid.height, grid.width, 0, GeoRef{}, {}};
  for (std::size_t i = 0; i < threshold_count; ++i) {
    const auto mask = exceedance_mask(grid, i, threshold_count);
    out.maps.emplace_back(mask.bits.begin(), mask.bits.end());
  }
  return out;
}

inline constexpr std::array<char, 4> kPredictionMagic{'N', 'W', 'P', '1'};

inline void write_prediction(const ExceedanceMaps& m, std::ostream& out) {
  m.validate();
  out.write(kPredictionMagic.data(), 4);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.height));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.width));
  io::put<std::int64_t>(out, m.timestamp);
  for (double v : {m.georef.lat0, m.georef.lon0, m.georef.dlat, m.georef.dlon}) {
    io::put<double>(out, v);
  }
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.maps.size()));
  for (const auto& plane : m.maps) io::put_array(out, plane);
  if (!out) throw Error("failed writing prediction");
}

inline ExceedanceMaps read_prediction(std::istream& source) {
  io::Reader in(source);
  const auto h = detail::read_grid_header(in, kPredictionMagic);
  ExceedanceMaps m{h.height, h.width, h.timestamp, h.georef, {}};
  const auto count_at = in.offset();
  const auto planes = in.get<std::uint32_t>("plane count");
  if (planes > 255) throw FormatError("implausible plane count", count_at);
  m.maps.resize(planes);
  for (auto& plane : m.maps) {
    const auto at = in.offset();
    in.get_array(plane, m.height * m.width, "probability plane");
    for (std::size_t i = 0; i < plane.size(); ++i) {
      if (!(plane[i] >= 0.0f && plane[i] <= 1.0f)) {
        throw FormatError("probability outside [0, 1]", at + i * sizeof(float));
      }
    }
  }
  return m;
}

inline void save_prediction(const ExceedanceMaps& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_prediction(m, out);
}

inline ExceedanceMaps load_prediction(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_prediction(in);
}

}  // namespace nowcast
