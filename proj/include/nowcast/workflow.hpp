#pragma once

// End-to-end plumbing shared by the command-line tool and the acceptance
// run: scenario generation, example loading, and paired prediction sets for
// the network and both baselines.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "nowcast/baselines.hpp"
#include "nowcast/eval.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/rng.hpp"
#include "nowcast/synthgen.hpp"
#include "nowcast/unet.hpp"

namespace nowcast {

/// A family of synthetic sequences: each gets its own seed, a uniform
/// velocity of random direction, and (for a `growth_fraction` share of
/// sequences) per-cell growth or decay drawn from [growth_min, growth_max].
struct ScenarioConfig {
  std::size_t sequences = 8;
  SynthConfig base{};
  double speed_min = 0.5;  // px per frame step
  double speed_max = 2.0;
  double growth_fraction = 0.5;
  double growth_min = 0.85;
  double growth_max = 1.15;
  std::uint64_t seed = 0;

  void validate() const {
    base.validate();
    if (!(speed_min >= 0.0 && speed_max >= speed_min)) {
      throw InvalidArgument("need 0 <= speed_min <= speed_max");
    }
    if (!(growth_fraction >= 0.0 && growth_fraction <= 1.0)) {
      throw InvalidArgument("growth fraction must lie in [0, 1]");
    }
    if (!(growth_min > 0.0 && growth_max >= growth_min)) {
      throw InvalidArgument("need 0 < growth_min <= growth_max");
    }
  }
};

inline std::string sequence_name(std::size_t i) {
  std::string digits = std::to_string(i);
  return "seq" + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

/// Per-sequence configs; sequence i starts on day i at a varying hour so that
/// the time-of-day channel is exercised.
inline std::vector<std::pair<std::string, SynthConfig>> scenario_configs(const ScenarioConfig& sc) {
  sc.validate();
  const CounterRng rng(sc.seed);
  std::vector<std::pair<std::string, SynthConfig>> out;
  for (std::size_t i = 0; i < sc.sequences; ++i) {
    SynthConfig c = sc.base;
    c.seed = rng.bits(i, 0);
    const double angle = 2.0 * std::numbers::pi * rng.uniform(i, 1);
    const double speed = sc.speed_min + (sc.speed_max - sc.speed_min) * rng.uniform(i, 2);
    c.velocity_model = VelocityModel::uniform;
    c.u = speed * std::cos(angle);
    c.v = speed * std::sin(angle);
    if (rng.uniform(i, 3) < sc.growth_fraction) {
      c.growth_min = sc.growth_min;
      c.growth_max = sc.growth_max;
    } else {
      c.growth_min = c.growth_max = 1.0;
    }
    c.start_time = sc.base.start_time + static_cast<std::int64_t>(i) * 86400 +
                   static_cast<std::int64_t>(rng.below(24, i, 4)) * 3600;
    out.emplace_back(sequence_name(i), c);
  }
  return out;
}

inline FrameStore generate_scenarios(const ScenarioConfig& sc) {
  FrameStore store;
  for (const auto& [id, c] : scenario_configs(sc)) store.add_sequence(id, generate_sequence(c));
  return store;
}

/// Every complete (sequence, time, tile) in the store.
inline DatasetManifest index_store(const FrameStore& store, std::size_t tile_size,
                                   const QuantizationScheme& scheme) {
  DatasetManifest m;
  m.split = "all";
  m.scheme = scheme;
  m.tile_size = tile_size;
  for (const auto& id : store.ids()) {
    auto entries = index_sequence(id, store.sequence(id), tile_size, scheme);
    m.entries.insert(m.entries.end(), entries.begin(), entries.end());
  }
  return m;
}

/// Identity of a manifest's contents (scheme, tile size and entries), used to
/// label evaluations so that only comparable ones are reported together.
inline std::string manifest_fingerprint(const DatasetManifest& m) {
  std::ostringstream s;
  s << text::join_doubles(m.scheme.thresholds()) << ';' << m.tile_size << '\n';
  for (const auto& e : m.entries) {
    s << e.sequence_id << ',' << e.tile_row << ',' << e.tile_col << ',' << e.t_last_input << '\n';
  }
  return text::hex64(text::fnv1a(s.str()));
}

inline Example load_example(const FrameStore& store, const DatasetManifest& m,
                            const ManifestEntry& e) {
  const auto [inputs, label] = store.window(e.sequence_id, e.t_last_input);
  return assemble_example(inputs, m.tile_of(e), m.scheme, label);
}

inline ExceedanceMaps crop_maps(const ExceedanceMaps& maps, const TileSpec& tile) {
  if (tile.row + tile.size > maps.height || tile.col + tile.size > maps.width) {
    throw InvalidArgument("tile outside prediction grid");
  }
  ExceedanceMaps out{tile.size, tile.size, maps.timestamp, maps.georef.shifted(tile.row, tile.col), {}};
  for (const auto& plane : maps.maps) {
    std::vector<float> p(tile.size * tile.size);
    for (std::size_t r = 0; r < tile.size; ++r) {
      const auto* src = plane.data() + (tile.row + r) * maps.width + tile.col;
      std::copy(src, src + tile.size, p.begin() + static_cast<std::ptrdiff_t>(r * tile.size));
    }
    out.maps.push_back(std::move(p));
  }
  return out;
}

/// Network exceedance maps for a batch of examples, valid at their label times.
template <std::floating_point T>
std::vector<ExceedanceMaps> unet_maps(UNetModel<T>& model, const std::vector<const Example*>& batch,
                                      const GeoRef& georef) {
  auto [x, labels] = make_batch<T>(batch);
  const auto probs = exceedance_probs(model.predict_logits(x), model.config().class_count);
  const std::size_t planes = probs.dim(1), n = probs.dim(2) * probs.dim(3);
  std::vector<ExceedanceMaps> out;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = *batch[b];
    ExceedanceMaps m{ex.size, ex.size, ex.label_timestamp, georef.shifted(ex.tile.row, ex.tile.col), {}};
    for (std::size_t k = 0; k < planes; ++k) {
      const T* src = probs.data().data() + (b * planes + k) * n;
      std::vector<float> plane(n);
      for (std::size_t i = 0; i < n; ++i) {
        plane[i] = std::clamp(static_cast<float>(src[i]), 0.0f, 1.0f);
      }
      m.maps.push_back(std::move(plane));
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// Full-frame baseline forecasts cropped to tiles; the flow field for a
/// given (sequence, time) is estimated once.
class BaselineForecaster {
 public:
  BaselineForecaster(const FrameStore& store, QuantizationScheme scheme, FlowOptions flow = {})
      : store_(store), scheme_(std::move(scheme)), flow_(flow) {}

  ExceedanceMaps predict(BaselineKind kind, const ManifestEntry& e, std::size_t tile_size) {
    const auto key = std::make_tuple(kind, e.sequence_id, e.t_last_input);
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      const auto& last = store_.frame(e.sequence_id, e.t_last_input);
      ExceedanceMaps full;
      if (kind == BaselineKind::persistence) {
        full = persistence_predict(last, scheme_).maps;
      } else {
        const std::vector<RadarFrame> pair{
            store_.frame(e.sequence_id, e.t_last_input - kCadenceSeconds), last};
        const auto flow = estimate_flow(pair, flow_);
        full = flow_predict(last, flow, static_cast<double>(kLeadSeconds / kCadenceSeconds), scheme_)
                   .maps;
      }
      full.timestamp = e.t_last_input + kLeadSeconds;
      it = cache_.emplace(key, std::move(full)).first;
    }
    return crop_maps(it->second, {e.tile_row, e.tile_col, tile_size});
  }

 private:
  const FrameStore& store_;
  QuantizationScheme scheme_;
  FlowOptions flow_;
  std::map<std::tuple<BaselineKind, std::string, std::int64_t>, ExceedanceMaps> cache_;
};

/// Quantized ground truth for a manifest entry.
inline ClassGrid truth_of(const FrameStore& store, const DatasetManifest& m, const ManifestEntry& e) {
  const auto& label = store.frame(e.sequence_id, e.t_last_input + kLeadSeconds);
  return quantize(crop(label, e.tile_row, e.tile_col, m.tile_size), m.scheme);
}

inline PredictionSet baseline_prediction_set(BaselineKind kind, const FrameStore& store,
                                             const DatasetManifest& m, const FlowOptions& flow = {}) {
  BaselineForecaster forecaster(store, m.scheme, flow);
  PredictionSet set;
  for (const auto& e : m.entries) set.add(forecaster.predict(kind, e, m.tile_size), truth_of(store, m, e));
  return set;
}

template <std::floating_point T>
PredictionSet unet_prediction_set(UNetModel<T>& model, const FrameStore& store,
                                  const DatasetManifest& m, std::size_t batch_size = 8) {
  PredictionSet set;
  for (std::size_t first = 0; first < m.entries.size(); first += batch_size) {
    const std::size_t last = std::min(m.entries.size(), first + batch_size);
    std::vector<Example> examples;
    for (std::size_t i = first; i < last; ++i) examples.push_back(load_example(store, m, m.entries[i]));
    std::vector<const Example*> batch;
    for (const auto& ex : examples) batch.push_back(&ex);
    auto maps = unet_maps(model, batch,
                          store.frame(m.entries[first].sequence_id, m.entries[first].t_last_input).georef());
    for (std::size_t i = 0; i < maps.size(); ++i) set.add(std::move(maps[i]), examples[i].label);
  }
  return set;
}

}  // namespace nowcast
