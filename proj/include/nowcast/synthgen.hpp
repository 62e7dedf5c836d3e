#pragma once

// Deterministic synthetic radar sequences: Gaussian storm cells carried by a
// stationary velocity field, growing or decaying at a per-cell rate.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "nowcast/error.hpp"
#include "nowcast/raster.hpp"

namespace nowcast {

struct StormCell {
  double row = 0.0;
  double col = 0.0;
  double amplitude = 1.0;  // peak rate, mm/h
  double sigma = 4.0;      // Gaussian radius, pixels
  double growth_rate = 1.0;  // multiplicative factor per frame step

  void validate() const {
    if (!(amplitude >= 0.0) || !(sigma > 0.0) || !(growth_rate > 0.0) ||
        !std::isfinite(row) || !std::isfinite(col)) {
      throw InvalidArgument("storm cell needs amplitude >= 0, sigma > 0, growth_rate > 0");
    }
  }
};

/// Displacement per frame step: u along columns (east), v along rows (south).
struct VelocityField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> u;
  std::vector<double> v;

  static VelocityField uniform(std::size_t height, std::size_t width, double u, double v) {
    return {height, width, std::vector<double>(height * width, u),
            std::vector<double>(height * width, v)};
  }

  /// Solid-body rotation about (center_row, center_col), omega radians per step.
  static VelocityField rotational(std::size_t height, std::size_t width, double omega,
                                  double center_row, double center_col) {
    VelocityField f{height, width, std::vector<double>(height * width),
                    std::vector<double>(height * width)};
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        f.u[r * width + c] = -omega * (static_cast<double>(r) - center_row);
        f.v[r * width + c] = omega * (static_cast<double>(c) - center_col);
      }
    }
    return f;
  }

  void validate() const {
    if (u.size() != height * width || v.size() != height * width) {
      throw InvalidArgument("velocity field component size mismatch");
    }
    for (std::size_t i = 0; i < u.size(); ++i) {
      if (!std::isfinite(u[i]) || !std::isfinite(v[i])) {
        throw InvalidArgument("velocity field must be finite");
      }
    }
  }
};

namespace detail {

/// Bilinear sample of a row-major grid; samples outside the grid read 0.
inline double sample_bilinear(const float* grid, std::size_t height, std::size_t width,
                              double row, double col) {
  const double r0f = std::floor(row);
  const double c0f = std::floor(col);
  const double fr = row - r0f;
  const double fc = col - c0f;
  const auto r0 = static_cast<long long>(r0f);
  const auto c0 = static_cast<long long>(c0f);
  const auto h = static_cast<long long>(height);
  const auto w = static_cast<long long>(width);
  auto at = [&](long long r, long long c) -> double {
    if (r < 0 || c < 0 || r >= h || c >= w) return 0.0;
    return grid[r * w + c];
  };
  double value = 0.0;
  if (fr == 0.0 && fc == 0.0) return at(r0, c0);
  value += (1.0 - fr) * (1.0 - fc) * at(r0, c0);
  value += (1.0 - fr) * fc * at(r0, c0 + 1);
  value += fr * (1.0 - fc) * at(r0 + 1, c0);
  value += fr * fc * at(r0 + 1, c0 + 1);
  return value;
}

}  // namespace detail

/// Backward semi-Lagrangian transport: output(p) = input(p - velocity(p) * steps),
/// bilinearly interpolated, zero outside the domain.
inline RadarFrame advect(const RadarFrame& frame, const VelocityField& field, double steps) {
  if (field.height != frame.height() || field.width != frame.width()) {
    throw InvalidArgument("velocity field " + std::to_string(field.height) + "x" +
                          std::to_string(field.width) + " does not match frame " +
                          std::to_string(frame.height()) + "x" + std::to_string(frame.width()));
  }
  if (!(steps >= 0.0)) throw InvalidArgument("advection steps must be >= 0");
  field.validate();
  const std::size_t h = frame.height();
  const std::size_t w = frame.width();
  std::vector<float> out(h * w);
  const float* src = frame.rates().data();
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      const double sr = static_cast<double>(r) - field.v[i] * steps;
      const double sc = static_cast<double>(c) - field.u[i] * steps;
      // Bilinear weights are non-negative, so the result stays >= 0.
      out[i] = static_cast<float>(detail::sample_bilinear(src, h, w, sr, sc));
    }
  }
  return {h, w, frame.timestamp(), frame.georef(), std::move(out)};
}

enum class VelocityModel { uniform, rotational };

inline std::string to_string(VelocityModel m) {
  return m == VelocityModel::uniform ? "uniform" : "rotational";
}

inline VelocityModel parse_velocity_model(const std::string& s) {
  if (s == "uniform") return VelocityModel::uniform;
  if (s == "rotational") return VelocityModel::rotational;
  throw InvalidArgument("unknown velocity model '" + s + "'");
}

struct SynthConfig {
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t frame_count = 24;
  int interval_minutes = 10;
  std::int64_t start_time = 1527811200;  // 2018-06-01T00:00:00Z
  GeoRef georef{};

  std::size_t cell_count = 6;
  double amplitude_min = 1.0;
  double amplitude_max = 8.0;
  double sigma_min = 4.0;
  double sigma_max = 10.0;
  double growth_min = 1.0;
  double growth_max = 1.0;

  VelocityModel velocity_model = VelocityModel::uniform;
  double u = 1.0;      // uniform model, px per step
  double v = 0.0;
  double omega = 0.02;  // rotational model, rad per step

  /// Padding around the visible grid where cells may start, so rain can
  /// drift into view.
  std::size_t margin = 0;
  double noise = 0.0;  // stddev of additive Gaussian noise, mm/h
  std::uint64_t seed = 0;

  void validate() const {
    if (height == 0 || width == 0) throw InvalidArgument("synth grid must be non-empty");
    if (interval_minutes <= 0 || 60 % interval_minutes != 0) {
      throw InvalidArgument("frame interval must divide 60 minutes");
    }
    if (amplitude_min < 0.0 || amplitude_max < amplitude_min || sigma_min <= 0.0 ||
        sigma_max < sigma_min || growth_min <= 0.0 || growth_max < growth_min || noise < 0.0) {
      throw InvalidArgument("inconsistent synth cell/noise ranges");
    }
    if (!std::isfinite(u) || !std::isfinite(v) || !std::isfinite(omega)) {
      throw InvalidArgument("velocity parameters must be finite");
    }
    georef.validate();
  }

  std::size_t canvas_height() const { return height + 2 * margin; }
  std::size_t canvas_width() const { return width + 2 * margin; }
};

/// Velocity field over the padded canvas; rotation is about the visible grid's center.
inline VelocityField make_velocity_field(const SynthConfig& config) {
  const auto ch = config.canvas_height();
  const auto cw = config.canvas_width();
  if (config.velocity_model == VelocityModel::uniform) {
    return VelocityField::uniform(ch, cw, config.u, config.v);
  }
  return VelocityField::rotational(ch, cw, config.omega, (static_cast<double>(ch) - 1.0) / 2.0,
                                   (static_cast<double>(cw) - 1.0) / 2.0);
}

/// Cells in canvas coordinates (visible pixel (0,0) is canvas (margin, margin)).
inline std::vector<StormCell> make_cells(const SynthConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::vector<StormCell> cells(config.cell_count);
  for (auto& cell : cells) {
    cell.row = between(0.0, static_cast<double>(config.canvas_height()));
    cell.col = between(0.0, static_cast<double>(config.canvas_width()));
    cell.amplitude = between(config.amplitude_min, config.amplitude_max);
    cell.sigma = between(config.sigma_min, config.sigma_max);
    cell.growth_rate = between(config.growth_min, config.growth_max);
    cell.validate();
  }
  return cells;
}

/// Sum of Gaussians, each cell's amplitude scaled by growth_rate^step.
inline RadarFrame render_cells(const std::vector<StormCell>& cells, std::size_t height,
                               std::size_t width, double step) {
  std::vector<double> acc(height * width, 0.0);
  for (const auto& cell : cells) {
    const double amp = cell.amplitude * std::pow(cell.growth_rate, step);
    const double inv = 1.0 / (2.0 * cell.sigma * cell.sigma);
    for (std::size_t r = 0; r < height; ++r) {
      const double dr = static_cast<double>(r) - cell.row;
      for (std::size_t c = 0; c < width; ++c) {
        const double dc = static_cast<double>(c) - cell.col;
        acc[r * width + c] += amp * std::exp(-(dr * dr + dc * dc) * inv);
      }
    }
  }
  std::vector<float> rates(acc.begin(), acc.end());
  return RadarFrame(height, width, 0, GeoRef{}, std::move(rates));
}

/// Frame t = crop(advect(render(cells at growth^t), field, t)) + clamped noise.
/// Pure function of the config; same seed gives bit-identical frames.
inline std::vector<RadarFrame> generate_sequence(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const auto cells = make_cells(config, rng);
  const auto field = make_velocity_field(config);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<RadarFrame> frames;
  frames.reserve(config.frame_count);
  for (std::size_t t = 0; t < config.frame_count; ++t) {
    const auto step = static_cast<double>(t);
    const auto canvas = render_cells(cells, config.canvas_height(), config.canvas_width(), step);
    const auto moved = advect(canvas, field, step);
    const auto view = crop(moved, config.margin, config.margin, config.height, config.width);
    std::vector<float> rates(view.rates().begin(), view.rates().end());
    if (config.noise > 0.0) {
      for (auto& x : rates) {
        x = static_cast<float>(std::max(0.0, static_cast<double>(x) + config.noise * gauss(rng)));
      }
    }
    const std::int64_t timestamp =
        config.start_time + static_cast<std::int64_t>(t) * config.interval_minutes * 60;
    frames.emplace_back(config.height, config.width, timestamp, config.georef, std::move(rates));
  }
  return frames;
}

}  // namespace nowcast
