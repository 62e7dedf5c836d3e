// nowcast: synth -> prepare -> train -> predict -> evaluate -> report.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nowcast/nowcast.hpp"
#include "nowcast/run_config.hpp"

namespace fs = std::filesystem;
using namespace nowcast;

namespace {

class MissingInput : public Error {
 public:
  using Error::Error;
};

struct Options {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string work;
  std::string model = "unet";
  std::string checkpoint;
  std::string resume;
  std::vector<std::string> report_models;
};

const std::vector<std::string> kModels{"persistence", "optical_flow", "unet"};

RunConfig effective_config(const Options& o) {
  RunConfig cfg;
  if (!o.config_file.empty()) {
    if (!fs::exists(o.config_file)) throw MissingInput("config file " + o.config_file + " not found");
    cfg.load(o.config_file);
  }
  for (const auto& kv : o.overrides) cfg.assign(kv);
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  if (!o.work.empty()) cfg.set("work", o.work);
  return cfg;
}

void require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput("required input " + p.string() + " does not exist");
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

void write_effective(const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  auto out = open_out(dir / "effective_config.txt");
  cfg.write_effective(out);
}

fs::path frames_index(const RunConfig& cfg) { return cfg.path("frames") / "sequences.txt"; }
fs::path manifest_path(const RunConfig& cfg, const std::string& split) {
  return cfg.path("manifests") / (split + ".txt");
}
fs::path final_checkpoint(const RunConfig& cfg) { return cfg.path("checkpoints") / "unet.nwk"; }
fs::path prediction_dir(const RunConfig& cfg, const std::string& model) {
  return cfg.path("predictions") / model;
}
fs::path evaluation_path(const RunConfig& cfg, const std::string& model) {
  return cfg.path("evaluations") / (model + ".csv");
}

// ---------------------------------------------------------------------------

void run_synth(const RunConfig& cfg) {
  const auto sc = cfg.scenario();
  std::vector<std::pair<std::string, std::vector<RadarFrame>>> seqs;
  std::size_t frames = 0;
  for (const auto& [id, c] : scenario_configs(sc)) {
    seqs.emplace_back(id, generate_sequence(c));
    frames += seqs.back().second.size();
  }
  const auto dir = cfg.path("frames");
  write_sequences(dir, seqs, cfg.provenance(), cfg.canonical_text());
  write_effective(cfg, dir);
  std::cout << "synth: " << seqs.size() << " sequences, " << frames << " frames -> " << dir.string()
            << '\n';
}

void run_prepare(const RunConfig& cfg) {
  require(frames_index(cfg));
  const auto store = FrameStore::load(cfg.path("frames"));
  auto all = index_store(store, cfg.tile_size(), cfg.scheme());
  auto [train, test] = split(all, cfg.split_rule(store.ids()));
  if (train.entries.empty() || test.entries.empty()) {
    throw InvalidArgument("split leaves an empty train or test manifest");
  }
  const auto dir = cfg.path("manifests");
  fs::create_directories(dir);
  for (auto* m : {&all, &train, &test}) {
    m->provenance = cfg.provenance();
    save_manifest(*m, manifest_path(cfg, m->split).string());
  }
  write_effective(cfg, dir);
  std::size_t rainy = 0;
  for (const auto& e : train.entries) rainy += e.rainy;
  std::cout << "prepare: " << all.entries.size() << " tiles, train " << train.entries.size() << " ("
            << rainy << " rainy), test " << test.entries.size() << '\n';
}

std::vector<LossRecord> read_loss_prefix(const fs::path& p, std::uint64_t up_to) {
  std::vector<LossRecord> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line == "step,loss") continue;
    const auto f = text::split(line, ',');
    if (f.size() != 2) continue;
    const auto step = text::parse_number<std::uint64_t>(f[0], "step");
    if (step <= up_to) out.push_back({step, text::parse_number<double>(f[1], "loss")});
  }
  return out;
}

template <std::floating_point T>
void train_model(const RunConfig& cfg, const Options& o) {
  require(frames_index(cfg));
  require(manifest_path(cfg, "train"));
  if (!o.resume.empty()) require(o.resume);
  const auto store = FrameStore::load(cfg.path("frames"));
  const auto m = load_manifest(manifest_path(cfg, "train").string());
  if (!(m.scheme == cfg.scheme()) || m.tile_size != cfg.tile_size()) {
    throw ConfigMismatch("train manifest was prepared with a different scheme or tile size");
  }
  const auto unet_cfg = cfg.unet();
  const auto tc = cfg.train();
  UNetModel<T> model(unet_cfg);
  Trainer<T> trainer(model, tc);
  const auto dir = cfg.path("checkpoints");
  fs::create_directories(dir);

  std::vector<LossRecord> prefix;
  if (!o.resume.empty()) {
    trainer.resume(load_checkpoint(o.resume, unet_cfg.hash()));
    prefix = read_loss_prefix(dir / "loss.csv", trainer.step());
  }

  const Oversampler sampler(m.entries, cfg.rainy_fraction(), tc.seed);
  auto source = [&](std::uint64_t k) { return load_example(store, m, m.entries[sampler.draw(k)]); };
  auto save = [&](Trainer<T>& t) {
    char name[40];
    std::snprintf(name, sizeof(name), "unet_step%06llu.nwk", static_cast<unsigned long long>(t.step()));
    save_checkpoint(t.checkpoint(), (dir / name).string());
    std::cout << "train: step " << t.step() << " loss "
              << text::format_double(t.loss_log().back().loss, 5) << '\n';
  };
  trainer.run(source, save);
  save_checkpoint(trainer.checkpoint(), final_checkpoint(cfg).string());

  auto log = prefix;
  log.insert(log.end(), trainer.loss_log().begin(), trainer.loss_log().end());
  auto out = open_out(dir / "loss.csv");
  cfg.provenance().write(out);
  write_loss_log(log, out);
  write_effective(cfg, dir);
  std::cout << "train: " << trainer.step() << " steps -> " << final_checkpoint(cfg).string() << '\n';
}

void run_train(const RunConfig& cfg, const Options& o) {
  if (cfg.train().precision == "f64") train_model<double>(cfg, o);
  else train_model<float>(cfg, o);
}

std::string prediction_name(std::size_t i) {
  char name[24];
  std::snprintf(name, sizeof(name), "%06zu.nwp", i);
  return name;
}

constexpr const char* kIndexColumns = "index,sequence_id,tile_row,tile_col,t_last_input,path";

void write_prediction_index(const RunConfig& cfg, const std::string& model,
                            const DatasetManifest& m, std::ostream& out) {
  out << "# nowcast-predictions v1\n# model=" << model << "\n# test_set=" << manifest_fingerprint(m)
      << '\n';
  cfg.provenance().write(out);
  out << kIndexColumns << '\n';
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    out << i << ',' << e.sequence_id << ',' << e.tile_row << ',' << e.tile_col << ','
        << e.t_last_input << ',' << prediction_name(i) << '\n';
  }
}

template <std::floating_point T>
void predict_unet(const RunConfig& cfg, const Checkpoint& ck, const FrameStore& store,
                  const DatasetManifest& m, const fs::path& dir) {
  UNetModel<T> model(cfg.unet());
  model.load_checkpoint(ck);
  const auto batch_size = cfg.number<std::size_t>("predict.batch_size");
  for (std::size_t first = 0; first < m.entries.size(); first += batch_size) {
    const std::size_t last = std::min(m.entries.size(), first + batch_size);
    std::vector<Example> examples;
    for (std::size_t i = first; i < last; ++i) examples.push_back(load_example(store, m, m.entries[i]));
    std::vector<const Example*> batch;
    for (const auto& ex : examples) batch.push_back(&ex);
    const auto& e0 = m.entries[first];
    const auto maps = unet_maps(model, batch, store.frame(e0.sequence_id, e0.t_last_input).georef());
    for (std::size_t i = 0; i < maps.size(); ++i) {
      save_prediction(maps[i], (dir / prediction_name(first + i)).string());
    }
  }
}

void run_predict(const RunConfig& cfg, const Options& o) {
  require(frames_index(cfg));
  require(manifest_path(cfg, "test"));
  const auto ckpt_path = o.checkpoint.empty() ? final_checkpoint(cfg) : fs::path(o.checkpoint);
  if (o.model == "unet") require(ckpt_path);
  const auto store = FrameStore::load(cfg.path("frames"));
  const auto m = load_manifest(manifest_path(cfg, "test").string());
  const auto dir = prediction_dir(cfg, o.model);
  if (o.model == "unet") {
    // Refuses before anything is written when the architecture differs.
    const auto ck = load_checkpoint(ckpt_path.string(), cfg.unet().hash());
    fs::create_directories(dir);
    if (cfg.train().precision == "f64") predict_unet<double>(cfg, ck, store, m, dir);
    else predict_unet<float>(cfg, ck, store, m, dir);
  } else {
    fs::create_directories(dir);
    const auto kind = o.model == "persistence" ? BaselineKind::persistence : BaselineKind::optical_flow;
    BaselineForecaster forecaster(store, m.scheme, cfg.flow());
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      save_prediction(forecaster.predict(kind, m.entries[i], m.tile_size),
                      (dir / prediction_name(i)).string());
    }
  }
  auto out = open_out(dir / "index.csv");
  write_prediction_index(cfg, o.model, m, out);
  write_effective(cfg, dir);
  std::cout << "predict: " << o.model << ", " << m.entries.size() << " tiles -> " << dir.string()
            << '\n';
}

/// Reads a prediction index and checks it row by row against the manifest.
std::vector<fs::path> read_prediction_index(const fs::path& dir, const DatasetManifest& m) {
  std::ifstream in(dir / "index.csv");
  if (!in) throw MissingInput("cannot open " + (dir / "index.csv").string());
  std::vector<fs::path> files;
  std::string line;
  std::size_t lineno = 0;
  bool saw_columns = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!saw_columns) {
      if (line != kIndexColumns) throw FormatError("unexpected prediction index columns", lineno);
      saw_columns = true;
      continue;
    }
    const auto f = text::split(line, ',');
    if (f.size() != 6) throw FormatError("prediction index row needs 6 fields", lineno);
    const auto i = files.size();
    if (i >= m.entries.size()) throw ConfigMismatch("prediction index has more rows than the test manifest");
    const auto& e = m.entries[i];
    if (f[1] != e.sequence_id || text::parse_number<std::size_t>(f[2], "tile_row") != e.tile_row ||
        text::parse_number<std::size_t>(f[3], "tile_col") != e.tile_col ||
        text::parse_number<std::int64_t>(f[4], "t_last_input") != e.t_last_input) {
      throw ConfigMismatch("prediction index row " + f[0] + " does not match the test manifest");
    }
    files.push_back(dir / f[5]);
  }
  if (files.size() != m.entries.size()) {
    throw ConfigMismatch("prediction index covers " + std::to_string(files.size()) + " of " +
                         std::to_string(m.entries.size()) + " test tiles");
  }
  return files;
}

void run_evaluate(const RunConfig& cfg, const Options& o) {
  require(frames_index(cfg));
  require(manifest_path(cfg, "test"));
  require(prediction_dir(cfg, o.model) / "index.csv");
  const auto store = FrameStore::load(cfg.path("frames"));
  const auto m = load_manifest(manifest_path(cfg, "test").string());
  const auto files = read_prediction_index(prediction_dir(cfg, o.model), m);
  PredictionSet set;
  for (std::size_t i = 0; i < files.size(); ++i) {
    auto maps = load_prediction(files[i].string());
    if (maps.maps.size() != m.scheme.thresholds().size()) {
      throw ConfigMismatch(files[i].string() + " was written under a different quantization scheme");
    }
    set.add(std::move(maps), truth_of(store, m, m.entries[i]));
  }
  auto ev = evaluate_model(o.model, set, m.scheme, o.model == "unet");
  ev.test_set = manifest_fingerprint(m);
  ev.provenance = cfg.provenance();
  const auto dir = cfg.path("evaluations");
  fs::create_directories(dir);
  {
    auto out = open_out(evaluation_path(cfg, o.model));
    write_evaluation(ev, out);
  }
  write_effective(cfg, dir);
  std::cout << "evaluate: " << o.model;
  for (std::size_t k = 0; k < m.scheme.thresholds().size(); ++k) {
    std::cout << "  >=" << text::format_double(m.scheme.thresholds()[k]) << ": ";
    if (ev.is_curve) std::cout << "auc_pr " << text::format_double(auc_pr(ev.curves[k]), 4);
    else std::cout << "f1 " << text::format_double(f1_score(ev.points[k]), 4);
  }
  std::cout << '\n';
}

void run_report(const RunConfig& cfg, const Options& o) {
  auto models = o.report_models;
  if (models.empty()) {
    for (const auto& name : kModels) {
      if (fs::exists(evaluation_path(cfg, name))) models.push_back(name);
    }
  }
  if (models.empty()) throw MissingInput("no evaluations found in " + cfg.path("evaluations").string());
  std::vector<ModelEvaluation> evals;
  for (const auto& name : models) {
    const auto p = evaluation_path(cfg, name);
    require(p);
    std::ifstream in(p);
    evals.push_back(read_evaluation(in));
  }
  check_compatible(evals);
  const auto dir = cfg.path("reports");
  fs::create_directories(dir);
  {
    auto csv = open_out(dir / "report.csv");
    write_report_csv(evals, cfg.provenance(), csv);
    auto svg = open_out(dir / "report.svg");
    write_report_svg(evals, cfg.provenance(), svg);
  }
  write_effective(cfg, dir);
  std::cout << "report: " << evals.size() << " models -> " << (dir / "report.csv").string() << ", "
            << (dir / "report.svg").string() << '\n';
}

void run_all(const RunConfig& cfg, Options o) {
  run_synth(cfg);
  run_prepare(cfg);
  run_train(cfg, o);
  for (const auto& name : kModels) {
    o.model = name;
    o.checkpoint.clear();
    run_predict(cfg, o);
    run_evaluate(cfg, o);
  }
  o.report_models = kModels;
  run_report(cfg, o);
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const MissingInput*>(&e)) return "missing_input";
  if (dynamic_cast<const ConfigMismatch*>(&e)) return "config_mismatch";
  if (dynamic_cast<const FormatError*>(&e)) return "format_error";
  if (dynamic_cast<const InvalidFrame*>(&e)) return "invalid_frame";
  if (dynamic_cast<const DegenerateSet*>(&e)) return "degenerate_set";
  if (dynamic_cast<const NonFiniteGradient*>(&e)) return "non_finite_gradient";
  if (dynamic_cast<const InvalidArgument*>(&e)) return "invalid_argument";
  if (dynamic_cast<const Error*>(&e)) return "error";
  return "internal";
}

int exit_code(const std::string& kind) {
  if (kind == "usage") return 2;
  if (kind == "missing_input") return 3;
  if (kind == "config_mismatch") return 4;
  if (kind == "format_error" || kind == "invalid_frame") return 5;
  if (kind == "invalid_argument") return 6;
  return 1;
}

int fail(const std::string& kind, const std::string& stage, const std::string& message) {
  std::string escaped;
  for (char c : message) {
    if (c == '"' || c == '\\') escaped += '\\';
    escaped += c == '\n' ? ' ' : c;
  }
  std::cerr << "error: kind=" << kind << " stage=" << (stage.empty() ? "none" : stage) << " message=\""
            << escaped << "\"\n";
  return exit_code(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Precipitation nowcasting toolkit: synthetic radar, U-Net training, baselines and PR evaluation"};
  app.require_subcommand(1);
  Options o;
  app.add_option("-c,--config", o.config_file, "key=value config file");
  app.add_option("-s,--set", o.overrides, "override one config key (key=value), repeatable");
  app.add_option("--seed", o.seed, "run seed (overrides the config key 'seed')");
  app.add_option("-w,--work", o.work, "work directory (overrides the config key 'work')");

  auto* synth = app.add_subcommand("synth", "generate synthetic radar sequences");
  auto* prepare = app.add_subcommand("prepare", "tile, label and split the frames into manifests");
  auto* train = app.add_subcommand("train", "train the U-Net with ADADELTA");
  train->add_option("--resume", o.resume, "continue from a checkpoint written by an earlier run");
  auto* predict = app.add_subcommand("predict", "write exceedance maps for the test manifest");
  predict->add_option("-m,--model", o.model, "persistence | optical_flow | unet")
      ->check(CLI::IsMember(kModels));
  predict->add_option("--checkpoint", o.checkpoint, "checkpoint to load (default: the final one)");
  auto* evaluate = app.add_subcommand("evaluate", "score one model's predictions against the truth");
  evaluate->add_option("-m,--model", o.model, "persistence | optical_flow | unet")
      ->check(CLI::IsMember(kModels));
  auto* report = app.add_subcommand("report", "combine evaluations into report.csv and report.svg");
  report->add_option("--models", o.report_models, "evaluations to include (default: all present)")
      ->check(CLI::IsMember(kModels));
  auto* all = app.add_subcommand("run-all", "synth, prepare, train, predict, evaluate and report");
  for (auto* sub : {synth, prepare, train, predict, evaluate, report, all}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", "", e.what());
  }

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    const auto cfg = effective_config(o);
    if (synth->parsed()) run_synth(cfg);
    else if (prepare->parsed()) run_prepare(cfg);
    else if (train->parsed()) run_train(cfg, o);
    else if (predict->parsed()) run_predict(cfg, o);
    else if (evaluate->parsed()) run_evaluate(cfg, o);
    else if (report->parsed()) run_report(cfg, o);
    else run_all(cfg, o);
  } catch (const std::exception& e) {
    return fail(error_kind(e), stage, e.what());
  }
  return 0;
}
