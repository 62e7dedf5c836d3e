#pragma once

// Persistence and optical-flow extrapolation baselines.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "nowcast/error.hpp"
#include "nowcast/prediction.hpp"
#include "nowcast/raster.hpp"
#include "nowcast/synthgen.hpp"

namespace nowcast {

/// Dense displacement per frame interval (pixels) with a per-pixel
/// confidence in [0, 1].
struct FlowField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> u;  // columns (east)
  std::vector<double> v;  // rows (south)
  std::vector<double> confidence;

  VelocityField velocity() const { return {height, width, u, v}; }
};

enum class BaselineKind { persistence, optical_flow };

inline std::string to_string(BaselineKind k) {
  return k == BaselineKind::persistence ? "persistence" : "optical_flow";
}

struct BaselinePrediction {
  ExceedanceMaps maps;
  BaselineKind source = BaselineKind::persistence;
};

/// The future equals the present.
inline BaselinePrediction persistence_predict(const RadarFrame& last_frame,
                                              const QuantizationScheme& scheme) {
  auto maps = hard_maps(quantize(last_frame, scheme), scheme.thresholds().size());
  maps.timestamp = last_frame.timestamp();
  maps.georef = last_frame.georef();
  return {std::move(maps), BaselineKind::persistence};
}

struct FlowOptions {
  std::size_t window = 17;       // odd window side for the local least squares
  std::size_t pyramid_levels = 1;
  std::size_t iterations = 10;   // Gauss-Newton refinements per level
  double min_confidence = 0.05;  // below this the global mean displacement is used
};

namespace detail {

struct Grid {
  std::size_t h = 0, w = 0;
  std::vector<double> a;
  double at(std::size_t r, std::size_t c) const { return a[r * w + c]; }
};

inline Grid to_grid(const RadarFrame& f) {
  return {f.height(), f.width(), std::vector<double>(f.rates().begin(), f.rates().end())};
}

inline Grid half(const Grid& g) {
  Grid o{std::max<std::size_t>(1, g.h / 2), std::max<std::size_t>(1, g.w / 2), {}};
  o.a.assign(o.h * o.w, 0.0);
  for (std::size_t r = 0; r < o.h; ++r) {
    for (std::size_t c = 0; c < o.w; ++c) {
      double s = 0.0;
      int n = 0;
      for (std::size_t dr = 0; dr < 2; ++dr) {
        for (std::size_t dc = 0; dc < 2; ++dc) {
          const std::size_t rr = 2 * r + dr, cc = 2 * c + dc;
          if (rr < g.h && cc < g.w) {
            s += g.at(rr, cc);
            ++n;
          }
        }
      }
      o.a[r * o.w + c] = s / n;
    }
  }
  return o;
}

inline double sample(const Grid& g, double row, double col) {
  const double r0f = std::floor(row), c0f = std::floor(col);
  const double fr = row - r0f, fc = col - c0f;
  const auto r0 = static_cast<long long>(r0f), c0 = static_cast<long long>(c0f);
  auto at = [&](long long r, long long c) -> double {
    if (r < 0 || c < 0 || r >= static_cast<long long>(g.h) || c >= static_cast<long long>(g.w)) {
      return 0.0;
    }
    return g.a[static_cast<std::size_t>(r) * g.w + static_cast<std::size_t>(c)];
  };
  return (1 - fr) * (1 - fc) * at(r0, c0) + (1 - fr) * fc * at(r0, c0 + 1) +
         fr * (1 - fc) * at(r0 + 1, c0) + fr * fc * at(r0 + 1, c0 + 1);
}

/// Sum over a (2*half+1)^2 window clipped to the grid, via a summed-area table.
inline std::vector<double> box_sum(const std::vector<double>& x, std::size_t h, std::size_t w,
                                   std::size_t half) {
  std::vector<double> sat((h + 1) * (w + 1), 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    double row = 0.0;
    for (std::size_t c = 0; c < w; ++c) {
      row += x[r * w + c];
      sat[(r + 1) * (w + 1) + c + 1] = sat[r * (w + 1) + c + 1] + row;
    }
  }
  std::vector<double> out(h * w);
  for (std::size_t r = 0; r < h; ++r) {
    const std::size_t r0 = r >= half ? r - half : 0, r1 = std::min(h, r + half + 1);
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t c0 = c >= half ? c - half : 0, c1 = std::min(w, c + half + 1);
      out[r * w + c] = sat[r1 * (w + 1) + c1] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0] +
                       sat[r0 * (w + 1) + c0];
    }
  }
  return out;
}

/// Smallest eigenvalue of the symmetric 2x2 matrix [[a, b], [b, c]].
inline double min_eigen(double a, double b, double c) {
  const double tr = 0.5 * (a + c);
  const double d = std::sqrt(std::max(0.0, 0.25 * (a - c) * (a - c) + b * b));
  return tr - d;
}

}  // namespace detail

/// Dense iterative Lucas-Kanade between the last two frames: at every pixel
/// the displacement d minimizing sum over its window of (I2(x + d) - I1(x))^2
/// is refined by Gauss-Newton steps on the window's structure tensor. Confidence is the
/// tensor's smallest eigenvalue normalized by its image maximum; pixels
/// below `min_confidence` take the confidence-weighted mean displacement.
inline FlowField estimate_flow(std::span<const RadarFrame> frames, const FlowOptions& opt = {}) {
  if (frames.size() < 2) throw InvalidArgument("optical flow needs at least 2 frames");
  const auto& f1 = frames[frames.size() - 2];
  const auto& f2 = frames.back();
  if (f1.height() != f2.height() || f1.width() != f2.width()) {
    throw InvalidArgument("optical flow frames differ in grid size");
  }
  if (opt.window % 2 == 0 || opt.window < 3 || opt.pyramid_levels < 1) {
    throw InvalidArgument("flow window must be odd and >= 3; pyramid levels >= 1");
  }
  std::vector<detail::Grid> p1{detail::to_grid(f1)}, p2{detail::to_grid(f2)};
  for (std::size_t l = 1; l < opt.pyramid_levels; ++l) {
    p1.push_back(detail::half(p1.back()));
    p2.push_back(detail::half(p2.back()));
  }

  std::vector<double> u, v, lam;
  std::size_t ph = 0, pw = 0;
  for (std::size_t level = opt.pyramid_levels; level-- > 0;) {
    const auto& I1 = p1[level];
    const auto& I2 = p2[level];
    const std::size_t h = I1.h, w = I1.w, n = h * w;
    // Carry the coarser estimate up one level.
    std::vector<double> nu(n, 0.0), nv(n, 0.0);
    if (!u.empty()) {
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          const std::size_t cr = std::min(ph - 1, r / 2), cc = std::min(pw - 1, c / 2);
          nu[r * w + c] = 2.0 * u[cr * pw + cc];
          nv[r * w + c] = 2.0 * v[cr * pw + cc];
        }
      }
    }
    u = std::move(nu);
    v = std::move(nv);

    std::vector<double> ix(n), iy(n);
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t cl = c > 0 ? c - 1 : c, cr = c + 1 < w ? c + 1 : c;
        const std::size_t ru = r > 0 ? r - 1 : r, rd = r + 1 < h ? r + 1 : r;
        ix[r * w + c] = (I1.at(r, cr) - I1.at(r, cl)) / static_cast<double>(cr - cl == 0 ? 1 : cr - cl);
        iy[r * w + c] = (I1.at(rd, c) - I1.at(ru, c)) / static_cast<double>(rd - ru == 0 ? 1 : rd - ru);
      }
    }
    const std::size_t half = opt.window / 2;
    std::vector<double> xx(n), xy(n), yy(n);
    for (std::size_t i = 0; i < n; ++i) {
      xx[i] = ix[i] * ix[i];
      xy[i] = ix[i] * iy[i];
      yy[i] = iy[i] * iy[i];
    }
    const auto sxx = detail::box_sum(xx, h, w, half);
    const auto sxy = detail::box_sum(xy, h, w, half);
    const auto syy = detail::box_sum(yy, h, w, half);
    lam.assign(n, 0.0);
    double lam_max = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      lam[i] = std::max(0.0, detail::min_eigen(sxx[i], sxy[i], syy[i]));
      lam_max = std::max(lam_max, lam[i]);
    }
    const double solvable = lam_max * 1e-6;

    const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
    const auto sh_half = static_cast<std::ptrdiff_t>(half);
    for (std::size_t r = 0; r < h && lam_max > 0.0; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t i = r * w + c;
        if (lam[i] <= solvable) continue;
        const double det = sxx[i] * syy[i] - sxy[i] * sxy[i];
        if (det <= 0.0) continue;
        const auto r0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(r) - sh_half);
        const auto r1 = std::min<std::ptrdiff_t>(sh - 1, static_cast<std::ptrdiff_t>(r) + sh_half);
        const auto c0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(c) - sh_half);
        const auto c1 = std::min<std::ptrdiff_t>(sw - 1, static_cast<std::ptrdiff_t>(c) + sh_half);
        for (std::size_t it = 0; it < opt.iterations; ++it) {
          double bx = 0.0, by = 0.0;
          for (auto y = r0; y <= r1; ++y) {
            for (auto x = c0; x <= c1; ++x) {
              const std::size_t q = static_cast<std::size_t>(y * sw + x);
              if (ix[q] == 0.0 && iy[q] == 0.0) continue;
              const double dt = detail::sample(I2, static_cast<double>(y) + v[i],
                                               static_cast<double>(x) + u[i]) - I1.a[q];
              bx += ix[q] * dt;
              by += iy[q] * dt;
            }
          }
          const double du = (-syy[i] * bx + sxy[i] * by) / det;
          const double dv = (sxy[i] * bx - sxx[i] * by) / det;
          u[i] += du;
          v[i] += dv;
          if (du * du + dv * dv < 1e-6) break;
        }
      }
    }
    ph = h;
    pw = w;
  }

  FlowField flow{f2.height(), f2.width(), std::move(u), std::move(v), {}};
  const std::size_t n = flow.height * flow.width;
  const double lam_max = lam.empty() ? 0.0 : *std::max_element(lam.begin(), lam.end());
  flow.confidence.assign(n, 0.0);
  if (lam_max > 0.0) {
    for (std::size_t i = 0; i < n; ++i) flow.confidence[i] = lam[i] / lam_max;
  }
  double wsum = 0.0, mu = 0.0, mv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (flow.confidence[i] < opt.min_confidence) continue;
    wsum += flow.confidence[i];
    mu += flow.confidence[i] * flow.u[i];
    mv += flow.confidence[i] * flow.v[i];
  }
  if (wsum > 0.0) {
    mu /= wsum;
    mv /= wsum;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (flow.confidence[i] < opt.min_confidence || !std::isfinite(flow.u[i]) ||
        !std::isfinite(flow.v[i])) {
      flow.u[i] = mu;
      flow.v[i] = mv;
    }
  }
  return flow;
}

/// Advection-only extrapolation of the last frame along the flow; rain
/// intensity is never changed.
inline RadarFrame flow_extrapolate(const RadarFrame& last_frame, const FlowField& flow,
                                   double horizon_steps) {
  if (flow.height != last_frame.height() || flow.width != last_frame.width()) {
    throw InvalidArgument("flow field does not match frame dimensions");
  }
  if (!(horizon_steps >= 0.0)) throw InvalidArgument("horizon must be >= 0 steps");
  return advect(last_frame, flow.velocity(), horizon_steps);
}

inline BaselinePrediction flow_predict(const RadarFrame& last_frame, const FlowField& flow,
                                       double horizon_steps, const QuantizationScheme& scheme) {
  const auto future = flow_extrapolate(last_frame, flow, horizon_steps);
  auto pred = persistence_predict(future, scheme);
  pred.source = BaselineKind::optical_flow;
  return pred;
}

}  // namespace nowcast
