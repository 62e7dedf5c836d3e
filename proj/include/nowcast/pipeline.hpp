#pragma once

// Frame sequences -> training/evaluation examples: tiling, input channel
// assembly, +60 min quantized labels, rainy-tile oversampling and splits.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/error.hpp"
#include "nowcast/provenance.hpp"
#include "nowcast/raster.hpp"
#include "nowcast/rng.hpp"
#include "nowcast/text.hpp"

namespace nowcast {

inline constexpr std::size_t kInputFrames = 7;
inline constexpr std::int64_t kCadenceSeconds = 600;
inline constexpr std::int64_t kLeadSeconds = 3600;
inline constexpr std::size_t kChannelsPerFrame = 4;  // rate, time of day, lat, lon
inline constexpr std::size_t kInputChannels = kInputFrames * kChannelsPerFrame;
inline constexpr const char* kChannelDescriptor =
    "frames=7;cadence_s=600;order=oldest_first;per_frame=rate,tod,lat,lon;"
    "tod=utc_seconds/86400;lat=deg/90;lon=deg/180";

struct TileSpec {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t size = 256;

  bool operator==(const TileSpec&) const = default;
  auto operator<=>(const TileSpec&) const = default;
};

/// Non-overlapping grid-aligned tiles; trailing rows/columns that do not
/// fill a whole tile are dropped.
inline std::vector<TileSpec> tile_mosaic(std::size_t height, std::size_t width, std::size_t size) {
  if (size == 0) throw InvalidArgument("tile size must be > 0");
  if (height < size || width < size) {
    throw InvalidArgument("mosaic " + std::to_string(height) + "x" + std::to_string(width) +
                          " smaller than tile size " + std::to_string(size));
  }
  std::vector<TileSpec> tiles;
  for (std::size_t r = 0; r + size <= height; r += size) {
    for (std::size_t c = 0; c + size <= width; c += size) tiles.push_back({r, c, size});
  }
  return tiles;
}

inline std::vector<TileSpec> tile_mosaic(const RadarFrame& frame, std::size_t size) {
  return tile_mosaic(frame.height(), frame.width(), size);
}

/// Model input for one tile: channels laid out [frame k][rate, tod, lat, lon]
/// for k oldest-first, each channel a size x size row-major plane.
struct Example {
  std::size_t channels = 0;
  std::size_t size = 0;
  std::vector<float> values;
  ClassGrid label;
  TileSpec tile;
  std::int64_t t_last_input = 0;
  std::int64_t label_timestamp = 0;

  std::span<const float> plane(std::size_t channel) const {
    return std::span<const float>(values).subspan(channel * size * size, size * size);
  }

  bool rainy() const {
    return std::any_of(label.classes.begin(), label.classes.end(),
                       [](std::uint8_t c) { return c >= 1; });
  }
};

inline double time_of_day_fraction(std::int64_t timestamp) {
  const std::int64_t day = 86400;
  const std::int64_t secs = ((timestamp % day) + day) % day;
  return static_cast<double>(secs) / static_cast<double>(day);
}

inline Example assemble_example(std::span<const RadarFrame> frames, const TileSpec& tile,
                                const QuantizationScheme& scheme, const RadarFrame& label_frame) {
  if (frames.size() != kInputFrames) {
    throw InvalidArgument("expected " + std::to_string(kInputFrames) + " input frames, got " +
                          std::to_string(frames.size()));
  }
  for (std::size_t k = 1; k < frames.size(); ++k) {
    if (frames[k].timestamp() - frames[k - 1].timestamp() != kCadenceSeconds) {
      throw InvalidArgument("input frames " + std::to_string(k - 1) + " and " +
                            std::to_string(k) + " are not 10 minutes apart");
    }
  }
  const auto t_last = frames.back().timestamp();
  if (label_frame.timestamp() - t_last != kLeadSeconds) {
    throw InvalidArgument("label frame must be exactly 60 minutes after the last input");
  }
  for (const auto* f : {&frames.front(), &label_frame}) {
    if (tile.size == 0 || tile.row + tile.size > f->height() || tile.col + tile.size > f->width()) {
      throw InvalidArgument("tile out of frame bounds");
    }
  }

  const std::size_t n = tile.size;
  const std::size_t plane = n * n;
  Example ex;
  ex.channels = kInputChannels;
  ex.size = n;
  ex.tile = tile;
  ex.t_last_input = t_last;
  ex.label_timestamp = label_frame.timestamp();
  ex.values.resize(kInputChannels * plane);

  // Lat/lon planes depend only on the tile; build once and copy per frame.
  std::vector<float> lat(plane), lon(plane);
  const auto& geo = frames.back().georef();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      lat[r * n + c] = static_cast<float>(geo.lat_center(static_cast<double>(tile.row + r)) / 90.0);
      lon[r * n + c] =
          static_cast<float>(geo.lon_center(static_cast<double>(tile.col + c)) / 180.0);
    }
  }

  for (std::size_t k = 0; k < kInputFrames; ++k) {
    const auto& f = frames[k];
    if (f.height() != frames.front().height() || f.width() != frames.front().width()) {
      throw InvalidArgument("input frames differ in grid size");
    }
    float* base = ex.values.data() + k * kChannelsPerFrame * plane;
    for (std::size_t r = 0; r < n; ++r) {
      const auto src = f.rates().subspan((tile.row + r) * f.width() + tile.col, n);
      std::copy(src.begin(), src.end(), base + r * n);
    }
    std::fill(base + plane, base + 2 * plane, static_cast<float>(time_of_day_fraction(f.timestamp())));
    std::copy(lat.begin(), lat.end(), base + 2 * plane);
    std::copy(lon.begin(), lon.end(), base + 3 * plane);
  }
  ex.label = quantize(crop(label_frame, tile.row, tile.col, n), scheme);
  return ex;
}

// ---------------------------------------------------------------------------
// Frame store: sequences of frames on disk under
// <root>/<sequence_id>/frame_NNNN.nwc, indexed by <root>/sequences.txt.

class FrameStore {
 public:
  void add_sequence(const std::string& id, std::vector<RadarFrame> frames) {
    std::sort(frames.begin(), frames.end(),
              [](const auto& a, const auto& b) { return a.timestamp() < b.timestamp(); });
    auto& seq = sequences_[id];
    seq.frames = std::move(frames);
    seq.by_time.clear();
    for (std::size_t i = 0; i < seq.frames.size(); ++i) {
      seq.by_time[seq.frames[i].timestamp()] = i;
    }
  }

  bool has(const std::string& id, std::int64_t timestamp) const {
    const auto it = sequences_.find(id);
    return it != sequences_.end() && it->second.by_time.contains(timestamp);
  }

  const RadarFrame& frame(const std::string& id, std::int64_t timestamp) const {
    const auto it = sequences_.find(id);
    if (it == sequences_.end()) throw InvalidArgument("unknown sequence '" + id + "'");
    const auto jt = it->second.by_time.find(timestamp);
    if (jt == it->second.by_time.end()) {
      throw InvalidArgument("sequence '" + id + "' has no frame at " + std::to_string(timestamp));
    }
    return it->second.frames[jt->second];
  }

  const std::vector<RadarFrame>& sequence(const std::string& id) const {
    const auto it = sequences_.find(id);
    if (it == sequences_.end()) throw InvalidArgument("unknown sequence '" + id + "'");
    return it->second.frames;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : sequences_) out.push_back(id);
    return out;
  }

  /// The 7 input frames ending at t_last plus the label frame at t_last + 60 min.
  std::pair<std::vector<RadarFrame>, RadarFrame> window(const std::string& id,
                                                        std::int64_t t_last) const {
    std::vector<RadarFrame> inputs;
    for (std::size_t k = 0; k < kInputFrames; ++k) {
      const auto back = static_cast<std::int64_t>(kInputFrames - 1 - k) * kCadenceSeconds;
      inputs.push_back(frame(id, t_last - back));
    }
    return {std::move(inputs), frame(id, t_last + kLeadSeconds)};
  }

  static FrameStore load(const std::filesystem::path& root);

 private:
  struct Sequence {
    std::vector<RadarFrame> frames;
    std::map<std::int64_t, std::size_t> by_time;
  };
  std::map<std::string, Sequence> sequences_;
};

/// Writes frames as numbered NWC1 files and (re)writes the sequence index.
inline void write_sequences(const std::filesystem::path& root,
                            const std::vector<std::pair<std::string, std::vector<RadarFrame>>>& seqs,
                            const Provenance& provenance, const std::string& config_text = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  std::ofstream index(root / "sequences.txt");
  if (!index) throw Error("cannot write " + (root / "sequences.txt").string());
  index << "# nowcast-sequences v1\n";
  provenance.write(index);
  std::istringstream cfg(config_text);
  for (std::string line; std::getline(cfg, line);) index << "# config." << line << '\n';
  index << "sequence_id,frame_index,timestamp,path\n";
  for (const auto& [id, frames] : seqs) {
    fs::create_directories(root / id);
    for (std::size_t i = 0; i < frames.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%04zu.nwc", i);
      const auto rel = fs::path(id) / name;
      save_frame(frames[i], (root / rel).string());
      index << id << ',' << i << ',' << frames[i].timestamp() << ',' << rel.generic_string()
            << '\n';
    }
  }
}

inline FrameStore FrameStore::load(const std::filesystem::path& root) {
  const auto index_path = root / "sequences.txt";
  std::ifstream in(index_path);
  if (!in) throw Error("cannot open " + index_path.string());
  std::map<std::string, std::vector<RadarFrame>> loaded;
  std::string line;
  std::size_t lineno = 0;
  bool saw_columns = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!saw_columns) {
      saw_columns = true;
      continue;
    }
    const auto parts = text::split(line, ',');
    if (parts.size() != 4) throw FormatError("sequence index expects 4 fields", lineno);
    loaded[parts[0]].push_back(load_frame((root / parts[3]).string()));
  }
  FrameStore store;
  for (auto& [id, frames] : loaded) store.add_sequence(id, std::move(frames));
  return store;
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestEntry {
  std::string sequence_id;
  std::size_t tile_row = 0;
  std::size_t tile_col = 0;
  std::int64_t t_last_input = 0;
  bool rainy = false;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::string split = "train";
  QuantizationScheme scheme{};
  std::string channel_descriptor = kChannelDescriptor;
  std::size_t tile_size = 256;
  Provenance provenance{};
  std::vector<ManifestEntry> entries;

  TileSpec tile_of(const ManifestEntry& e) const { return {e.tile_row, e.tile_col, tile_size}; }

  bool operator==(const DatasetManifest&) const = default;
};

/// One entry per (last-input frame, tile) whose full input hour and +60 min
/// label exist in the sequence.
inline std::vector<ManifestEntry> index_sequence(const std::string& id,
                                                 const std::vector<RadarFrame>& frames,
                                                 std::size_t tile_size,
                                                 const QuantizationScheme& scheme) {
  std::vector<ManifestEntry> out;
  if (frames.empty()) return out;
  std::map<std::int64_t, const RadarFrame*> by_time;
  for (const auto& f : frames) by_time[f.timestamp()] = &f;
  const auto tiles = tile_mosaic(frames.front(), tile_size);
  const float trace = static_cast<float>(scheme.thresholds().front());
  for (const auto& [t, _] : by_time) {
    bool complete = by_time.contains(t + kLeadSeconds);
    for (std::size_t k = 1; complete && k < kInputFrames; ++k) {
      complete = by_time.contains(t - static_cast<std::int64_t>(k) * kCadenceSeconds);
    }
    if (!complete) continue;
    const auto& label = *by_time.at(t + kLeadSeconds);
    for (const auto& tile : tiles) {
      bool rainy = false;
      for (std::size_t r = 0; r < tile.size && !rainy; ++r) {
        for (std::size_t c = 0; c < tile.size; ++c) {
          if (label.at(tile.row + r, tile.col + c) >= trace) {
            rainy = true;
            break;
          }
        }
      }
      out.push_back({id, tile.row, tile.col, t, rainy});
    }
  }
  return out;
}

inline void write_manifest(const DatasetManifest& m, std::ostream& out) {
  out << "# nowcast-manifest v1\n";
  out << "# split=" << m.split << '\n';
  out << "# thresholds=" << text::join_doubles(m.scheme.thresholds()) << '\n';
  out << "# channels=" << m.channel_descriptor << '\n';
  out << "# tile_size=" << m.tile_size << '\n';
  m.provenance.write(out);
  out << "sequence_id,tile_row,tile_col,t_last_input,rainy\n";
  for (const auto& e : m.entries) {
    out << e.sequence_id << ',' << e.tile_row << ',' << e.tile_col << ',' << e.t_last_input << ','
        << (e.rainy ? 1 : 0) << '\n';
  }
}

inline DatasetManifest read_manifest(std::istream& in) {
  DatasetManifest m;
  std::map<std::string, std::string> header;
  std::string line;
  std::size_t lineno = 0;
  bool saw_columns = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (parse_header_line(line, header)) continue;
    if (!saw_columns) {
      if (line != "sequence_id,tile_row,tile_col,t_last_input,rainy") {
        throw FormatError("unexpected manifest column header", lineno);
      }
      saw_columns = true;
      continue;
    }
    const auto p = text::split(line, ',');
    if (p.size() != 5 || (p[4] != "0" && p[4] != "1")) {
      throw FormatError("malformed manifest record", lineno);
    }
    m.entries.push_back({p[0], text::parse_number<std::size_t>(p[1], "tile_row"),
                         text::parse_number<std::size_t>(p[2], "tile_col"),
                         text::parse_number<std::int64_t>(p[3], "t_last_input"), p[4] == "1"});
  }
  if (!saw_columns) throw FormatError("manifest has no column header", lineno);
  auto get = [&](const char* key) -> std::string {
    const auto it = header.find(key);
    if (it == header.end()) throw FormatError(std::string("manifest header lacks ") + key, 0);
    return it->second;
  };
  m.split = get("split");
  m.scheme = QuantizationScheme(text::parse_double_list(get("thresholds"), "thresholds"));
  m.channel_descriptor = get("channels");
  m.tile_size = text::parse_number<std::size_t>(get("tile_size"), "tile_size");
  m.provenance = Provenance::from_header(header);
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_manifest(m, out);
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_manifest(in);
}

// ---------------------------------------------------------------------------
// Oversampling

/// Per-draw stratified sampler: draw k is rainy with probability `target`,
/// then picks uniformly (with replacement) inside the chosen stratum. Draw k
/// depends only on (seed, k), so consumers can resume mid-stream.
class Oversampler {
 public:
  Oversampler(const std::vector<ManifestEntry>& entries, double target_rainy_fraction,
              std::uint64_t seed)
      : target_(target_rainy_fraction), rng_(seed) {
    if (!(target_ >= 0.0 && target_ <= 1.0)) {
      throw InvalidArgument("target rainy fraction must lie in [0, 1]");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
      (entries[i].rainy ? rainy_ : dry_).push_back(i);
    }
    if (target_ > 0.0 && rainy_.empty()) {
      throw InvalidArgument("oversampling needs at least one rainy entry");
    }
    if (target_ < 1.0 && dry_.empty()) {
      throw InvalidArgument("oversampling needs at least one rainless entry");
    }
  }

  /// Index into the manifest entries for draw number `k`.
  std::size_t draw(std::uint64_t k) const {
    const bool rainy = rng_.uniform(k, 0) < target_;
    const auto& stratum = rainy ? rainy_ : dry_;
    return stratum[rng_.below(stratum.size(), k, 1)];
  }

  std::vector<std::size_t> take(std::uint64_t first, std::size_t count) const {
    std::vector<std::size_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = draw(first + i);
    return out;
  }

  double target() const noexcept { return target_; }

 private:
  double target_;
  CounterRng rng_;
  std::vector<std::size_t> rainy_;
  std::vector<std::size_t> dry_;
};

// ---------------------------------------------------------------------------
// Train/test split

struct TimeRange {
  std::int64_t begin = 0;  // inclusive
  std::int64_t end = 0;    // exclusive

  bool contains(std::int64_t t) const { return t >= begin && t < end; }
  bool overlaps(const TimeRange& o) const { return begin < o.end && o.begin < end; }
};

inline TimeRange utc_year(int year) {
  using namespace std::chrono;
  const auto b = sys_days{std::chrono::year{year} / January / 1};
  const auto e = sys_days{std::chrono::year{year + 1} / January / 1};
  return {duration_cast<seconds>(b.time_since_epoch()).count(),
          duration_cast<seconds>(e.time_since_epoch()).count()};
}

inline int utc_year_of(std::int64_t timestamp) {
  using namespace std::chrono;
  const auto days = floor<std::chrono::days>(sys_seconds{seconds{timestamp}});
  return static_cast<int>(year_month_day{days}.year());
}

/// Partition rule keyed by sequence id or by the entry's last-input
/// timestamp. A side left empty takes everything the other side does not
/// claim; with both sides empty every entry goes to train.
struct SplitRule {
  enum class Key { sequence_id, timestamp };
  Key key = Key::timestamp;
  std::vector<std::string> train_sequences;
  std::vector<std::string> test_sequences;
  std::vector<TimeRange> train_ranges;
  std::vector<TimeRange> test_ranges;

  static SplitRule by_years(const std::vector<int>& train, const std::vector<int>& test) {
    SplitRule r;
    r.key = Key::timestamp;
    for (int y : train) r.train_ranges.push_back(utc_year(y));
    for (int y : test) r.test_ranges.push_back(utc_year(y));
    return r;
  }

  static SplitRule by_sequences(std::vector<std::string> train, std::vector<std::string> test) {
    SplitRule r;
    r.key = Key::sequence_id;
    r.train_sequences = std::move(train);
    r.test_sequences = std::move(test);
    return r;
  }
};

inline std::pair<DatasetManifest, DatasetManifest> split(const DatasetManifest& all,
                                                         const SplitRule& rule) {
  const bool by_seq = rule.key == SplitRule::Key::sequence_id;
  const bool has_train = by_seq ? !rule.train_sequences.empty() : !rule.train_ranges.empty();
  const bool has_test = by_seq ? !rule.test_sequences.empty() : !rule.test_ranges.empty();

  if (by_seq) {
    for (const auto& s : rule.train_sequences) {
      if (std::find(rule.test_sequences.begin(), rule.test_sequences.end(), s) !=
          rule.test_sequences.end()) {
        throw InvalidArgument("split rule assigns sequence '" + s + "' to both train and test");
      }
    }
  } else {
    for (const auto& a : rule.train_ranges) {
      for (const auto& b : rule.test_ranges) {
        if (a.overlaps(b)) {
          throw InvalidArgument("split rule time ranges overlap at " +
                                std::to_string(std::max(a.begin, b.begin)));
        }
      }
    }
  }

  auto matches = [&](const ManifestEntry& e, bool train_side) {
    if (by_seq) {
      const auto& set = train_side ? rule.train_sequences : rule.test_sequences;
      return std::find(set.begin(), set.end(), e.sequence_id) != set.end();
    }
    const auto& ranges = train_side ? rule.train_ranges : rule.test_ranges;
    return std::any_of(ranges.begin(), ranges.end(),
                       [&](const TimeRange& r) { return r.contains(e.t_last_input); });
  };

  DatasetManifest train = all, test = all;
  train.split = "train";
  test.split = "test";
  train.entries.clear();
  test.entries.clear();
  for (const auto& e : all.entries) {
    bool to_train, to_test;
    if (has_train && has_test) {
      to_train = matches(e, true);
      to_test = matches(e, false);
    } else if (has_train) {
      to_train = matches(e, true);
      to_test = !to_train;
    } else if (has_test) {
      to_test = matches(e, false);
      to_train = !to_test;
    } else {
      to_train = true;
      to_test = false;
    }
    if (to_train) train.entries.push_back(e);
    else if (to_test) test.entries.push_back(e);
  }

  // Test entries whose input hour or label touches a training frame are
  // dropped so no frame appears on both sides.
  std::set<std::pair<std::string, std::int64_t>> train_frames;
  auto frames_of = [](const ManifestEntry& e) {
    std::vector<std::int64_t> ts;
    for (std::size_t k = 0; k < kInputFrames; ++k) {
      ts.push_back(e.t_last_input - static_cast<std::int64_t>(k) * kCadenceSeconds);
    }
    ts.push_back(e.t_last_input + kLeadSeconds);
    return ts;
  };
  for (const auto& e : train.entries) {
    for (auto t : frames_of(e)) train_frames.emplace(e.sequence_id, t);
  }
  std::erase_if(test.entries, [&](const ManifestEntry& e) {
    for (auto t : frames_of(e)) {
      if (train_frames.contains({e.sequence_id, t})) return true;
    }
    return false;
  });
  return {std::move(train), std::move(test)};
}

}  // namespace nowcast
