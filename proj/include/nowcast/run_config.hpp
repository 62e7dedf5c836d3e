#pragma once

// Flat key=value configuration for the command-line workflow. Every key has
// a default; files and `--set` overrides may only assign known keys.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nowcast/baselines.hpp"
#include "nowcast/optim.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/provenance.hpp"
#include "nowcast/text.hpp"
#include "nowcast/unet.hpp"
#include "nowcast/workflow.hpp"

namespace nowcast {

class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d{
        {"seed", "7"},
        {"work", "nowcast_work"},

        {"synth.sequences", "40"},
        {"synth.height", "128"},
        {"synth.width", "128"},
        {"synth.frames", "18"},
        {"synth.start_time", "1527811200"},
        {"synth.cells", "6"},
        {"synth.margin", "32"},
        {"synth.amplitude_min", "1"},
        {"synth.amplitude_max", "8"},
        {"synth.sigma_min", "4"},
        {"synth.sigma_max", "10"},
        {"synth.speed_min", "0.5"},
        {"synth.speed_max", "2"},
        {"synth.growth_fraction", "1"},
        {"synth.growth_min", "0.75"},
        {"synth.growth_max", "1.25"},
        {"synth.noise", "0"},
        {"synth.lat0", "40"},
        {"synth.lon0", "-100"},
        {"synth.dlat", "-0.01"},
        {"synth.dlon", "0.01"},

        {"prepare.tile_size", "64"},
        {"prepare.thresholds", "0.1,1,2.5"},
        {"prepare.split_by", "sequences"},
        {"prepare.test_sequences", "8"},
        {"prepare.train_years", ""},
        {"prepare.test_years", ""},

        {"unet.depth", "4"},
        {"unet.base_filters", "16"},
        {"unet.schedule", ""},
        {"unet.max_filters", "512"},
        {"unet.leaky_slope", "0.2"},
        {"unet.bn_momentum", "0.9"},
        {"unet.bn_eps", "1e-5"},
        {"unet.init_seed", "1"},

        {"train.steps", "2000"},
        {"train.batch_size", "4"},
        {"train.rainy_fraction", "0.8"},
        {"train.checkpoint_every", "500"},
        {"train.rho", "0.95"},
        {"train.epsilon", "1e-6"},
        {"train.precision", "f32"},

        {"flow.window", "17"},
        {"flow.pyramid_levels", "1"},
        {"flow.iterations", "10"},
        {"flow.min_confidence", "0.05"},

        {"predict.batch_size", "8"},

        {"paths.frames", ""},
        {"paths.manifests", ""},
        {"paths.checkpoints", ""},
        {"paths.predictions", ""},
        {"paths.evaluations", ""},
        {"paths.reports", ""},
    };
    return d;
  }

  void set(const std::string& key, const std::string& value) {
    const auto k = std::string(text::trim(key));
    if (!values_.contains(k)) throw InvalidArgument("unknown config key '" + k + "'");
    values_[k] = std::string(text::trim(value));
  }

  /// Applies one `key=value` assignment.
  void assign(std::string_view line) {
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw InvalidArgument("expected key=value, got '" + std::string(line) + "'");
    }
    set(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
  }

  void read(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto body = text::trim(std::string_view(line).substr(0, line.find('#')));
      if (body.empty()) continue;
      try {
        assign(body);
      } catch (const InvalidArgument& e) {
        throw FormatError(e.what(), lineno);
      }
    }
  }

  void load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path.string());
    read(in);
  }

  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw InvalidArgument("unknown config key '" + key + "'");
    return it->second;
  }

  template <typename T>
  T number(const std::string& key) const {
    return text::parse_number<T>(get(key), key);
  }

  std::uint64_t seed() const { return number<std::uint64_t>("seed"); }

  /// Everything that influences results, sorted by key. Paths are excluded so
  /// that relocating a work directory keeps the hash.
  std::string canonical_text() const {
    std::ostringstream s;
    for (const auto& [k, v] : values_) {
      if (k == "work" || k.starts_with("paths.")) continue;
      s << k << '=' << v << '\n';
    }
    return s.str();
  }

  std::uint64_t hash() const { return text::fnv1a(canonical_text()); }

  Provenance provenance() const { return {kToolVersion, seed(), text::hex64(hash())}; }

  /// Writes provenance plus the full effective configuration.
  void write_effective(std::ostream& out) const {
    provenance().write(out);
    for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
  }

  std::filesystem::path path(const std::string& stage) const {
    const auto& explicit_path = get("paths." + stage);
    if (!explicit_path.empty()) return explicit_path;
    return std::filesystem::path(get("work")) / stage;
  }

  ScenarioConfig scenario() const {
    ScenarioConfig sc;
    sc.sequences = number<std::size_t>("synth.sequences");
    auto& b = sc.base;
    b.height = number<std::size_t>("synth.height");
    b.width = number<std::size_t>("synth.width");
    b.frame_count = number<std::size_t>("synth.frames");
    b.interval_minutes = static_cast<int>(kCadenceSeconds / 60);
    b.start_time = number<std::int64_t>("synth.start_time");
    b.cell_count = number<std::size_t>("synth.cells");
    b.margin = number<std::size_t>("synth.margin");
    b.amplitude_min = number<double>("synth.amplitude_min");
    b.amplitude_max = number<double>("synth.amplitude_max");
    b.sigma_min = number<double>("synth.sigma_min");
    b.sigma_max = number<double>("synth.sigma_max");
    b.noise = number<double>("synth.noise");
    b.georef = {number<double>("synth.lat0"), number<double>("synth.lon0"),
                number<double>("synth.dlat"), number<double>("synth.dlon")};
    sc.speed_min = number<double>("synth.speed_min");
    sc.speed_max = number<double>("synth.speed_max");
    sc.growth_fraction = number<double>("synth.growth_fraction");
    sc.growth_min = number<double>("synth.growth_min");
    sc.growth_max = number<double>("synth.growth_max");
    sc.seed = seed();
    sc.validate();
    return sc;
  }

  QuantizationScheme scheme() const {
    return QuantizationScheme(text::parse_double_list(get("prepare.thresholds"), "prepare.thresholds"));
  }

  std::size_t tile_size() const { return number<std::size_t>("prepare.tile_size"); }

  /// Sequence ids are sorted; the last `prepare.test_sequences` are held out.
  SplitRule split_rule(const std::vector<std::string>& ids) const {
    const auto& by = get("prepare.split_by");
    if (by == "years") {
      auto years = [&](const std::string& key) {
        std::vector<int> out;
        for (double y : text::parse_double_list(get(key), key)) out.push_back(static_cast<int>(y));
        return out;
      };
      return SplitRule::by_years(years("prepare.train_years"), years("prepare.test_years"));
    }
    if (by != "sequences") throw InvalidArgument("prepare.split_by must be sequences or years");
    const auto n_test = number<std::size_t>("prepare.test_sequences");
    if (n_test == 0 || n_test >= ids.size()) {
      throw InvalidArgument("prepare.test_sequences must leave at least one sequence on each side");
    }
    const std::vector<std::string> train(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(n_test));
    const std::vector<std::string> test(ids.end() - static_cast<std::ptrdiff_t>(n_test), ids.end());
    return SplitRule::by_sequences(train, test);
  }

  UNetConfig unet() const {
    UNetConfig c;
    c.depth = number<std::size_t>("unet.depth");
    c.base_filters = number<std::size_t>("unet.base_filters");
    for (double f : text::parse_double_list(get("unet.schedule"), "unet.schedule")) {
      c.schedule.push_back(static_cast<std::size_t>(f));
    }
    c.max_filters = number<std::size_t>("unet.max_filters");
    c.class_count = scheme().class_count();
    c.leaky_slope = number<double>("unet.leaky_slope");
    c.bn_momentum = number<double>("unet.bn_momentum");
    c.bn_eps = number<double>("unet.bn_eps");
    c.init_seed = number<std::uint64_t>("unet.init_seed");
    c.validate();
    return c;
  }

  TrainConfig train() const {
    TrainConfig c;
    c.batch_size = number<std::size_t>("train.batch_size");
    c.steps = number<std::uint64_t>("train.steps");
    c.seed = seed();
    c.checkpoint_every = number<std::uint64_t>("train.checkpoint_every");
    c.rho = number<double>("train.rho");
    c.epsilon = number<double>("train.epsilon");
    c.precision = get("train.precision");
    c.validate();
    return c;
  }

  double rainy_fraction() const { return number<double>("train.rainy_fraction"); }

  FlowOptions flow() const {
    FlowOptions f;
    f.window = number<std::size_t>("flow.window");
    f.pyramid_levels = number<std::size_t>("flow.pyramid_levels");
    f.iterations = number<std::size_t>("flow.iterations");
    f.min_confidence = number<double>("flow.min_confidence");
    return f;
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace nowcast
