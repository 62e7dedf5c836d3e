#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "nowcast/raster.hpp"

namespace testing_support {

inline nowcast::RadarFrame random_frame(std::mt19937_64& rng, std::size_t h, std::size_t w,
                                        float max_rate = 4.0f, std::int64_t ts = 0) {
  std::uniform_real_distribution<float> d(0.0f, max_rate);
  std::vector<float> v(h * w);
  for (auto& x : v) x = d(rng);
  return {h, w, ts, nowcast::GeoRef{}, std::move(v)};
}

/// Interval lookup: index of the half-open range [lo, hi) holding rate.
inline std::uint8_t interval_class(float rate, const std::vector<double>& thresholds) {
  std::vector<double> lo{0.0};
  for (double t : thresholds) lo.push_back(static_cast<float>(t));
  for (std::size_t k = lo.size(); k-- > 0;) {
    if (static_cast<double>(rate) >= lo[k]) return static_cast<std::uint8_t>(k);
  }
  return 0;
}

}  // namespace testing_support
