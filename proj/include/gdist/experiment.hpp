#pragma once

#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gdist/container.hpp"
#include "gdist/training.hpp"

namespace gdist {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// classification: one classification run. detection: one detection run from scratch.
/// transfer: source classification, encoder transfer, target detection.
enum class Pipeline { classification, detection, transfer };

NLOHMANN_JSON_SERIALIZE_ENUM(Pipeline, {{Pipeline::classification, "classification"},
                                        {Pipeline::detection, "detection"},
                                        {Pipeline::transfer, "transfer"}})

enum class Stage { generate, train_cls, transfer, train_det, eval };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::generate: return "generate";
    case Stage::train_cls: return "train-cls";
    case Stage::transfer: return "transfer";
    case Stage::train_det: return "train-det";
    case Stage::eval: return "eval";
  }
  return "?";
}

struct ModalitySets {
  std::vector<std::string> source;  // transfer only
  std::vector<std::string> target;  // training modalities of the final stage
  std::vector<std::string> test;    // each evaluated alone
};

/// Unprefixed strategy/schedule/sampler describe the final stage; source_* the source stage of a
/// transfer pipeline.
struct ExperimentConfig {
  std::string name = "experiment";
  Pipeline pipeline = Pipeline::classification;
  CorpusSpec corpus;
  ModalitySets modalities;
  StrategyConfig strategy;
  StrategyConfig source_strategy;
  TrainSchedule schedule;
  TrainSchedule source_schedule;
  SamplerConfig sampler;
  SamplerConfig source_sampler;
  EncoderConfig encoder;
  double target_fraction = 1.0;
  std::vector<double> thresholds = kDefaultThresholds;
  std::vector<std::uint64_t> seeds{0};
  std::vector<nlohmann::json> sweep;  // merge patches, each optionally carrying a "label"
  std::string output_dir = "runs";

  bool detection_final() const { return pipeline != Pipeline::classification; }
  bool needs_classification_corpus() const { return pipeline != Pipeline::detection; }

  std::vector<Stage> stages() const {
    switch (pipeline) {
      case Pipeline::classification: return {Stage::generate, Stage::train_cls, Stage::eval};
      case Pipeline::detection: return {Stage::generate, Stage::train_det, Stage::eval};
      case Pipeline::transfer:
        return {Stage::generate, Stage::train_cls, Stage::transfer, Stage::train_det, Stage::eval};
    }
    return {};
  }

  void validate() const {
    auto field = [](const std::string& f, const std::string& msg) { return ConfigError(f + ": " + msg); };
    try {
      if (detection_final()) corpus.validate_detection();
      if (needs_classification_corpus()) corpus.validate_classification();
    } catch (const ConfigError& e) {
      throw field("corpus", e.what());
    }
    auto known = [&](const std::vector<std::string>& names, const std::string& f) {
      if (names.empty()) throw field(f, "must list at least one modality");
      std::set<std::string> seen;
      for (const auto& n : names) {
        try {
          corpus.modality_index(n);
        } catch (const ConfigError& e) {
          throw field(f, e.what());
        }
        if (!seen.insert(n).second) throw field(f, "modality '" + n + "' listed twice");
      }
    };
    known(modalities.target, "modalities.target");
    known(modalities.test, "modalities.test");
    for (const auto& t : modalities.test)
      if (std::find(modalities.target.begin(), modalities.target.end(), t) == modalities.target.end())
        throw field("modalities.test", "'" + t + "' is not among the training modalities");
    if (pipeline == Pipeline::transfer) {
      known(modalities.source, "modalities.source");
      for (const auto& t : modalities.target)
        if (std::find(modalities.source.begin(), modalities.source.end(), t) == modalities.source.end())
          throw field("modalities.target", "'" + t + "' is not a source modality, so it cannot be transferred");
    } else if (!modalities.source.empty()) {
      throw field("modalities.source", "only used by the transfer pipeline");
    }
    auto check = [&](const std::string& f, auto&& fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        throw field(f, e.what());
      }
    };
    check("strategy", [&] { detail::check_strategy(strategy, modalities.target.size()); });
    check("schedule", [&] { schedule.validate(); });
    check("sampler", [&] { sampler.validate(); });
    if (pipeline == Pipeline::transfer) {
      check("source_strategy", [&] { detail::check_strategy(source_strategy, modalities.source.size()); });
      check("source_schedule", [&] { source_schedule.validate(); });
      check("source_sampler", [&] { source_sampler.validate(); });
    }
    const auto& cls_sampler = pipeline == Pipeline::transfer ? source_sampler : sampler;
    if (needs_classification_corpus() && cls_sampler.clip_length > corpus.video_length)
      throw field(pipeline == Pipeline::transfer ? "source_sampler.clip_length" : "sampler.clip_length",
                  "exceeds corpus.video_length");
    if (detection_final() && sampler.window_span() > corpus.video_frames)
      throw field("sampler", "one window spans " + std::to_string(sampler.window_span()) +
                                 " frames, more than corpus.video_frames");
    if (encoder.feature_dim == 0 || encoder.conv_width == 0 || encoder.gru_layers == 0)
      throw field("encoder", "feature_dim, conv_width and gru_layers must be >= 1");
    if (!(target_fraction > 0.0 && target_fraction <= 1.0)) throw field("target_fraction", "must lie in (0, 1]");
    if (thresholds.empty()) throw field("thresholds", "must not be empty");
    for (double t : thresholds)
      if (!(t > 0.0 && t < 1.0)) throw field("thresholds", "values must lie in (0, 1)");
    if (seeds.empty()) throw field("seeds", "must not be empty");
    if (output_dir.empty()) throw field("output_dir", "must not be empty");
  }
};

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

inline std::vector<std::string> name_list(const nlohmann::json& j, const std::string& key) {
  try {
    if (j.is_string()) return {j.get<std::string>()};
    return j.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(key + ": expected a modality name or a list of names (" + e.what() + ")");
  }
}

inline const std::set<std::string>& experiment_keys() {
  static const std::set<std::string> keys = {
      "name",     "pipeline",        "corpus",         "modalities",      "strategy", "source_strategy",
      "schedule", "source_schedule", "sampler",        "source_sampler",  "encoder",  "target_fraction",
      "thresholds", "seeds",         "sweep",          "output_dir"};
  return keys;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"name", c.name},
       {"pipeline", c.pipeline},
       {"corpus", c.corpus},
       {"modalities", {{"source", c.modalities.source}, {"target", c.modalities.target}, {"test", c.modalities.test}}},
       {"strategy", c.strategy},
       {"source_strategy", c.source_strategy},
       {"schedule", c.schedule},
       {"source_schedule", c.source_schedule},
       {"sampler", c.sampler},
       {"source_sampler", c.source_sampler},
       {"encoder", c.encoder},
       {"target_fraction", c.target_fraction},
       {"thresholds", c.thresholds},
       {"seeds", c.seeds},
       {"sweep", c.sweep},
       {"output_dir", c.output_dir}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!detail::experiment_keys().count(k)) throw ConfigError("unknown field '" + k + "'");
  c = ExperimentConfig{};
  detail::read_field(j, "name", c.name);
  detail::read_field(j, "pipeline", c.pipeline);
  if (j.contains("pipeline") && nlohmann::json(c.pipeline) != j.at("pipeline"))
    throw ConfigError("pipeline: unknown value " + j.at("pipeline").dump());
  if (!j.contains("corpus")) throw ConfigError("corpus: required");
  if (j.at("corpus").is_string())
    throw ConfigError("corpus: a path must be resolved before parsing (use load_experiment)");
  detail::read_field(j, "corpus", c.corpus);
  if (!j.contains("modalities")) throw ConfigError("modalities: required");
  const auto& m = j.at("modalities");
  if (!m.is_object()) throw ConfigError("modalities: expected an object with source, target and test");
  for (const auto& [k, v] : m.items())
    if (k != "source" && k != "target" && k != "test") throw ConfigError("modalities: unknown field '" + k + "'");
  if (m.contains("source")) c.modalities.source = detail::name_list(m.at("source"), "modalities.source");
  if (m.contains("target")) c.modalities.target = detail::name_list(m.at("target"), "modalities.target");
  if (m.contains("test")) c.modalities.test = detail::name_list(m.at("test"), "modalities.test");
  detail::read_field(j, "strategy", c.strategy);
  detail::read_field(j, "source_strategy", c.source_strategy);
  detail::read_field(j, "schedule", c.schedule);
  detail::read_field(j, "source_schedule", c.source_schedule);
  detail::read_field(j, "sampler", c.sampler);
  detail::read_field(j, "source_sampler", c.source_sampler);
  detail::read_field(j, "encoder", c.encoder);
  detail::read_field(j, "target_fraction", c.target_fraction);
  detail::read_field(j, "thresholds", c.thresholds);
  detail::read_field(j, "seeds", c.seeds);
  detail::read_field(j, "sweep", c.sweep);
  detail::read_field(j, "output_dir", c.output_dir);
  for (const auto& o : c.sweep)
    if (!o.is_object()) throw ConfigError("sweep: every entry must be an object of overrides");
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

/// Parse, resolve a corpus given as a path (relative to the config file) and validate.
inline ExperimentConfig parse_experiment(nlohmann::json j, const fs::path& base_dir = {}) {
  if (j.is_object() && j.contains("corpus") && j.at("corpus").is_string())
    j["corpus"] = read_json_file(base_dir / j.at("corpus").get<std::string>());
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment(const fs::path& path) {
  return parse_experiment(read_json_file(path), path.parent_path());
}

/// Hash over every field that can change results. Naming, seeds, sweep list and output location
/// are excluded: runs are stored per seed under the hash directory.
inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = c;
  for (const char* k : {"name", "seeds", "sweep", "output_dir"}) j.erase(k);
  j["schedule"]["seed"] = 0;
  j["source_schedule"]["seed"] = 0;
  if (c.pipeline != Pipeline::transfer) {
    for (const char* k : {"source_strategy", "source_schedule", "source_sampler"}) j.erase(k);
  }
  if (!c.detection_final()) j.erase("target_fraction");
  return detail::hex(fnv1a(j.dump()));
}

inline fs::path experiment_dir(const ExperimentConfig& c) { return fs::path(c.output_dir) / config_hash(c); }
inline fs::path seed_dir(const ExperimentConfig& c, std::uint64_t seed) {
  return experiment_dir(c) / ("seed-" + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepVariant {
  std::string label;
  ExperimentConfig config;
};

/// One variant per override (the base config itself when the list is empty).
inline std::vector<SweepVariant> expand_sweep(const ExperimentConfig& base) {
  std::vector<SweepVariant> out;
  nlohmann::json bj = base;
  bj.erase("sweep");
  if (base.sweep.empty()) {
    out.push_back({base.name, base});
    out.back().config.sweep.clear();
    return out;
  }
  for (std::size_t i = 0; i < base.sweep.size(); ++i) {
    nlohmann::json patch = base.sweep[i];
    std::string label = "variant-" + std::to_string(i);
    if (patch.contains("label")) {
      label = patch.at("label").get<std::string>();
      patch.erase("label");
    }
    nlohmann::json vj = bj;
    vj.merge_patch(patch);
    vj["name"] = base.name + "/" + label;
    try {
      out.push_back({label, parse_experiment(vj)});
    } catch (const ConfigError& e) {
      throw ConfigError("sweep[" + std::to_string(i) + "] (" + label + "): " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << text;
  }
  fs::rename(tmp, path);
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline const char* corpus_file(bool detection) { return detection ? "corpus-detection.gdst" : "corpus-classification.gdst"; }

inline std::vector<Checkpoint> load_checkpoints(const fs::path& dir, const std::vector<std::string>& modalities) {
  std::vector<Checkpoint> out;
  for (const auto& m : modalities) {
    const auto p = dir / (m + ".ckpt");
    if (!fs::exists(p)) throw DataError("missing checkpoint '" + p.string() + "'");
    out.push_back(load_checkpoint(p));
  }
  return out;
}

inline void save_checkpoints(const fs::path& dir, const std::vector<Checkpoint>& cks) {
  fs::create_directories(dir);
  for (const auto& ck : cks) save_checkpoint(ck, dir / (ck.modality + ".ckpt"));
}

/// Streams metric records to a JSON-lines file as they are produced.
class MetricsFile {
public:
  explicit MetricsFile(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw DataError("cannot write '" + path.string() + "'");
  }
  MetricsSink sink() {
    return [this](const nlohmann::json& rec) { out_ << rec.dump() << '\n' << std::flush; };
  }

private:
  std::ofstream out_;
};

}  // namespace detail

/// Headline score of one seed: mean over test modalities of accuracy (classification) or of mAP
/// at tIoU 0.5, falling back to the largest threshold when 0.5 is not evaluated.
struct SeedReport {
  std::string metric;
  double headline = 0.0;
  std::map<std::string, EvalReport> reports;
};

inline void to_json(nlohmann::json& j, const SeedReport& r) {
  j = {{"metric", r.metric}, {"headline", r.headline}, {"reports", r.reports}};
}
inline void from_json(const nlohmann::json& j, SeedReport& r) {
  r.metric = j.at("metric").get<std::string>();
  r.headline = j.at("headline").get<double>();
  r.reports = j.at("reports").get<std::map<std::string, EvalReport>>();
}

inline std::size_t headline_threshold(const std::vector<double>& thresholds) {
  for (std::size_t t = 0; t < thresholds.size(); ++t)
    if (std::abs(thresholds[t] - 0.5) < 1e-12) return t;
  return static_cast<std::size_t>(std::max_element(thresholds.begin(), thresholds.end()) - thresholds.begin());
}

inline SeedReport classification_seed_report(const ClassificationModel& model, const ClassificationCorpus& corpus,
                                             const ExperimentConfig& c) {
  SeedReport r;
  r.metric = "accuracy";
  const auto& smp = c.pipeline == Pipeline::transfer ? c.source_sampler : c.sampler;
  const auto full = classification_report(model, corpus.test, smp.test_clips, corpus.spec.num_classes);
  for (const auto& t : c.modalities.test) {
    EvalReport e;
    e.accuracy[t] = full.accuracy.at(t);
    std::vector<std::vector<int>> pred;
    std::vector<int> truth;
    for (const auto& ex : corpus.test) {
      truth.push_back(ex.label);
      pred.push_back({argmax(model.classify(ex, model.slot(t), smp.test_clips))});
    }
    std::vector<int> flat;
    for (const auto& p : pred) flat.push_back(p[0]);
    e.confusion = confusion_matrix(truth, flat, corpus.spec.num_classes);
    r.headline += e.accuracy[t] / static_cast<double>(c.modalities.test.size());
    r.reports[t] = std::move(e);
  }
  return r;
}

inline SeedReport detection_seed_report(const DetectionModel& model, const DetectionCorpus& corpus,
                                        const ExperimentConfig& c) {
  SeedReport r;
  const std::size_t ti = headline_threshold(c.thresholds);
  r.metric = "map@" + detail::fmt_double(c.thresholds[ti]);
  for (const auto& t : c.modalities.test) {
    auto e = evaluate_detection(model, corpus.test, model.slot(t), c.thresholds);
    r.headline += e.map[ti] / static_cast<double>(c.modalities.test.size());
    r.reports[t] = std::move(e);
  }
  return r;
}

/// Target corpus of one seed: the full detection corpus of that seed with its training videos
/// subsampled to target_fraction.
inline DetectionCorpus detection_training_corpus(const DetectionCorpus& full, const ExperimentConfig& c,
                                                 std::uint64_t seed) {
  return c.target_fraction < 1.0 ? subsample_training(full, c.target_fraction, seed) : full;
}

inline std::uint64_t detection_corpus_seed(std::uint64_t seed) { return derive_seed(seed, "detection-corpus"); }

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

struct StageContext {
  const ExperimentConfig& config;
  std::uint64_t seed;
  fs::path dir;
};

namespace detail {

inline ClassificationCorpus load_cls(const StageContext& s) {
  return io::read_classification_corpus(s.dir / corpus_file(false));
}
inline DetectionCorpus load_det(const StageContext& s) { return io::read_detection_corpus(s.dir / corpus_file(true)); }

inline void stage_generate(const StageContext& s) {
  const auto& c = s.config;
  fs::create_directories(s.dir);
  if (c.needs_classification_corpus())
    io::write_corpus(generate_classification_corpus(c.corpus, s.seed), s.dir / corpus_file(false));
  if (c.detection_final())
    io::write_corpus(generate_detection_corpus(c.corpus, detection_corpus_seed(s.seed)), s.dir / corpus_file(true));
}

inline void stage_train_cls(const StageContext& s) {
  const auto& c = s.config;
  const bool source = c.pipeline == Pipeline::transfer;
  const auto corpus = load_cls(s);
  TrainSchedule sch = source ? c.source_schedule : c.schedule;
  sch.seed = s.seed;
  const auto& mods = source ? c.modalities.source : c.modalities.target;
  const fs::path out = s.dir / "classification";
  fs::create_directories(out);
  MetricsFile metrics(out / "metrics.jsonl");
  auto run = train_classification(corpus, mods, source ? c.source_strategy : c.strategy, sch,
                                  source ? c.source_sampler : c.sampler, c.encoder, metrics.sink());
  save_checkpoints(out, run.model.checkpoints({{"seed", s.seed}, {"config_hash", config_hash(c)}}));
  write_json(out / "graph.json", {{"modalities", mods},
                                  {"prior", run.prior},
                                  {"class_graph", run.class_graph},
                                  {"final_mode", run.graph.mode()}});
  if (!source) write_json(out / "report.json", classification_seed_report(run.model, corpus, c));
  else write_json(out / "report.json", {{"accuracy", run.test.accuracy}});
}

inline void stage_transfer(const StageContext& s) {
  const auto& c = s.config;
  std::map<std::string, Checkpoint> source;
  for (auto& ck : load_checkpoints(s.dir / "classification", c.modalities.source)) source.emplace(ck.modality, ck);
  const auto encoders = transfer_encoders(source, c.modalities.target);
  std::vector<Checkpoint> out;
  for (std::size_t i = 0; i < encoders.size(); ++i)
    out.push_back(encoder_checkpoint(c.modalities.target[i], *encoders[i],
                                     {{"transferred_from", "classification"}, {"seed", s.seed}}));
  save_checkpoints(s.dir / "transfer", out);
}

inline void stage_train_det(const StageContext& s) {
  const auto& c = s.config;
  const auto corpus = detection_training_corpus(load_det(s), c, s.seed);
  TrainSchedule sch = c.schedule;
  sch.seed = s.seed;
  std::map<std::string, Checkpoint> init;
  if (c.pipeline == Pipeline::transfer)
    for (auto& ck : load_checkpoints(s.dir / "transfer", c.modalities.target)) init.emplace(ck.modality, ck);
  const fs::path out = s.dir / "detection";
  fs::create_directories(out);
  MetricsFile metrics(out / "metrics.jsonl");
  auto run = train_detection(corpus, c.modalities.target, c.strategy, sch, c.sampler, c.encoder,
                             init.empty() ? nullptr : &init, metrics.sink());
  save_checkpoints(out, run.model.checkpoints({{"seed", s.seed}, {"config_hash", config_hash(c)}}));
  write_json(out / "graph.json", {{"modalities", c.modalities.target}, {"prior", run.prior}, {"final_mode", run.graph.mode()}});
  write_json(out / "report.json", detection_seed_report(run.model, corpus, c));
}

/// Re-evaluates the final-stage checkpoints restored from disk.
inline void stage_eval(const StageContext& s) {
  const auto& c = s.config;
  SeedReport r;
  if (c.detection_final()) {
    const auto corpus = load_det(s);
    const auto model = restore_detection_model(load_checkpoints(s.dir / "detection", c.modalities.target),
                                               corpus.spec, c.sampler);
    r = detection_seed_report(model, corpus, c);
  } else {
    const auto corpus = load_cls(s);
    const auto model = restore_classification_model(load_checkpoints(s.dir / "classification", c.modalities.target),
                                                    corpus.spec, c.sampler.clip_length);
    r = classification_seed_report(model, corpus, c);
  }
  write_json(s.dir / "eval.json", r);
}

}  // namespace detail

inline void run_stage(Stage stage, const StageContext& s) {
  switch (stage) {
    case Stage::generate: return detail::stage_generate(s);
    case Stage::train_cls: return detail::stage_train_cls(s);
    case Stage::transfer: return detail::stage_transfer(s);
    case Stage::train_det: return detail::stage_train_det(s);
    case Stage::eval: return detail::stage_eval(s);
  }
}

inline fs::path stage_marker(const fs::path& dir, Stage s) { return dir / (std::string(stage_name(s)) + ".done"); }

/// Raised when a stage throws; artifacts written so far stay on disk.
class StageError : public Error {
public:
  StageError(Stage stage, std::uint64_t seed, const std::string& what)
      : Error(std::string("stage ") + stage_name(stage) + " failed for seed " + std::to_string(seed) + ": " + what),
        stage_(stage) {}
  Stage stage() const { return stage_; }

private:
  Stage stage_;
};

/// Run the pipeline of one seed up to and including `until`. Stages with a completion marker are
/// skipped unless `force`.
inline void run_seed(const ExperimentConfig& c, std::uint64_t seed, Stage until, bool force,
                     std::ostream* log = nullptr) {
  const auto stages = c.stages();
  if (std::find(stages.begin(), stages.end(), until) == stages.end())
    throw ConfigError(std::string("stage ") + stage_name(until) + " is not part of the " +
                      nlohmann::json(c.pipeline).get<std::string>() + " pipeline");
  const StageContext ctx{c, seed, seed_dir(c, seed)};
  fs::create_directories(ctx.dir);
  for (Stage st : stages) {
    const auto marker = stage_marker(ctx.dir, st);
    if (!force && fs::exists(marker)) {
      if (log) *log << c.name << " seed " << seed << ": " << stage_name(st) << " up to date\n";
    } else {
      fs::remove(marker);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        run_stage(st, ctx);
      } catch (const std::exception& e) {
        throw StageError(st, seed, e.what());
      }
      detail::write_text(marker, config_hash(c) + "\n");
      if (log)
        *log << c.name << " seed " << seed << ": " << stage_name(st) << " done in " << std::fixed
             << std::setprecision(1) << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
             << " s\n";
    }
    if (st == until) break;
  }
}

inline SeedReport read_seed_report(const ExperimentConfig& c, std::uint64_t seed) {
  const auto p = seed_dir(c, seed) / "eval.json";
  if (!fs::exists(p)) throw DataError("missing '" + p.string() + "'; run the eval stage first");
  return read_json_file(p).get<SeedReport>();
}

/// Manifest of an experiment directory: resolved config, its hash and per-seed outcomes.
inline void write_manifest(const ExperimentConfig& c) {
  nlohmann::json runs = nlohmann::json::object();
  for (auto seed : c.seeds) {
    const auto dir = seed_dir(c, seed);
    nlohmann::json stages = nlohmann::json::object();
    for (Stage st : c.stages()) stages[stage_name(st)] = fs::exists(stage_marker(dir, st));
    nlohmann::json r = {{"dir", dir.filename().string()}, {"stages", stages}};
    if (fs::exists(dir / "eval.json")) {
      const auto rep = read_seed_report(c, seed);
      r["metric"] = rep.metric;
      r["headline"] = rep.headline;
    }
    runs[std::to_string(seed)] = r;
  }
  nlohmann::json cfg = c;
  detail::write_json(experiment_dir(c) / "manifest.json",
                     {{"config_hash", config_hash(c)}, {"config", cfg}, {"seeds", c.seeds}, {"runs", runs}});
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

struct Job {
  std::string label;
  std::function<void()> run;
};

/// Executes a batch of independent jobs; the default runs them in order in this process.
using JobRunner = std::function<void(const std::vector<Job>&)>;

inline void run_sequential(const std::vector<Job>& jobs) {
  for (const auto& j : jobs) j.run();
}

struct VariantResult {
  std::string label;
  std::string config_hash;
  std::string metric;
  std::vector<std::uint64_t> seeds;
  std::vector<double> headline;  // per seed
  double mean() const {
    double s = 0.0;
    for (double v : headline) s += v;
    return headline.empty() ? 0.0 : s / static_cast<double>(headline.size());
  }
};

struct RunOptions {
  Stage until = Stage::eval;
  bool force = false;
  std::optional<std::uint64_t> seed;  // restrict to one seed
  std::ostream* log = nullptr;
};

/// Runs every (variant, seed) pair as an independent job, then writes manifests and, when the
/// config declares a sweep, the comparison table.
inline std::vector<VariantResult> run_experiment(const ExperimentConfig& base, const RunOptions& opt,
                                                 const JobRunner& runner = run_sequential) {
  auto variants = expand_sweep(base);
  if (opt.seed)
    for (auto& v : variants) v.config.seeds = {*opt.seed};
  std::vector<Job> jobs;
  for (const auto& v : variants)
    for (auto seed : v.config.seeds) {
      const ExperimentConfig* cfg = &v.config;
      jobs.push_back({v.label + " seed " + std::to_string(seed),
                      [cfg, seed, &opt] { run_seed(*cfg, seed, opt.until, opt.force, opt.log); }});
    }
  runner(jobs);

  std::vector<VariantResult> results;
  for (const auto& v : variants) {
    write_manifest(v.config);
    if (opt.until != Stage::eval) continue;
    VariantResult r{v.label, config_hash(v.config), {}, v.config.seeds, {}};
    for (auto seed : v.config.seeds) {
      const auto rep = read_seed_report(v.config, seed);
      r.metric = rep.metric;
      r.headline.push_back(rep.headline);
    }
    results.push_back(std::move(r));
  }
  return results;
}

/// Markdown table: one row per variant, one column per seed plus the mean.
inline std::string sweep_table_markdown(const std::vector<VariantResult>& results) {
  if (results.empty()) return {};
  std::ostringstream os;
  os << "| variant |";
  for (auto s : results[0].seeds) os << " seed " << s << " |";
  os << " mean |\n|---|";
  for (std::size_t i = 0; i <= results[0].seeds.size(); ++i) os << "---|";
  os << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : results) {
    os << "| " << r.label << " |";
    for (double v : r.headline) os << ' ' << v << " |";
    os << ' ' << r.mean() << " |\n";
  }
  return os.str();
}

inline std::string sweep_table_csv(const std::vector<VariantResult>& results) {
  std::ostringstream os;
  os << "variant,config_hash,metric,seed,value\n";
  for (const auto& r : results)
    for (std::size_t i = 0; i < r.seeds.size(); ++i)
      os << r.label << ',' << r.config_hash << ',' << r.metric << ',' << r.seeds[i] << ','
         << detail::fmt_double(r.headline[i]) << '\n';
  return os.str();
}

/// Writes sweep-<hash>/table.{md,csv} under the output dir and returns the directory.
inline fs::path write_sweep_table(const ExperimentConfig& base, const std::vector<VariantResult>& results) {
  nlohmann::json j = base;
  const fs::path dir = fs::path(base.output_dir) / ("sweep-" + detail::hex(fnv1a(j.dump())));
  detail::write_text(dir / "table.md", sweep_table_markdown(results));
  detail::write_text(dir / "table.csv", sweep_table_csv(results));
  return dir;
}

// ---------------------------------------------------------------------------
// Plots and tables
// ---------------------------------------------------------------------------

/// Per (class, receiver) ranks of the senders j != k by weight, 1 = largest; ties go to the lower
/// sender index. graph is [S*S] row-major with entry (j,k) the edge k <- j.
inline std::vector<std::vector<std::size_t>> receiver_ranks(std::span<const double> graph, std::size_t S) {
  if (graph.size() != S * S) throw ShapeError("graph snapshot does not hold S*S weights");
  std::vector<std::vector<std::size_t>> ranks(S, std::vector<std::size_t>(S, 0));
  for (std::size_t k = 0; k < S; ++k) {
    std::vector<std::size_t> senders;
    for (std::size_t j = 0; j < S; ++j)
      if (j != k) senders.push_back(j);
    std::stable_sort(senders.begin(), senders.end(),
                     [&](std::size_t a, std::size_t b) { return graph[a * S + k] > graph[b * S + k]; });
    for (std::size_t r = 0; r < senders.size(); ++r) ranks[k][senders[r]] = r + 1;
  }
  return ranks;  // ranks[k][j], 0 on the diagonal
}

namespace detail {

inline std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

inline std::string svg_lines(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                             const std::string& title) {
  const double W = 640, H = 360, pad = 40;
  double lo = 1e300, hi = -1e300;
  std::size_t n = 0;
  for (const auto& [name, ys] : series) {
    n = std::max(n, ys.size());
    for (double y : ys) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  }
  if (!(hi > lo)) hi = lo + 1.0;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << pad << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n"
     << "<text x=\"4\" y=\"" << pad << "\" font-size=\"10\">" << fmt_double(hi) << "</text>\n"
     << "<text x=\"4\" y=\"" << H - pad << "\" font-size=\"10\">" << fmt_double(lo) << "</text>\n"
     << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\"" << H - pad
     << "\" stroke=\"black\"/>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& ys = series[s].second;
    os << "<polyline fill=\"none\" stroke=\"" << colors[s % 7] << "\" points=\"";
    for (std::size_t i = 0; i < ys.size(); ++i) {
      const double x = pad + (W - 2 * pad) * (n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0);
      const double y = H - pad - (H - 2 * pad) * (ys[i] - lo) / (hi - lo);
      os << x << ',' << y << ' ';
    }
    os << "\"/>\n<text x=\"" << W - pad - 120 << "\" y=\"" << pad + 14 * static_cast<double>(s) << "\" font-size=\"11\" fill=\""
       << colors[s % 7] << "\">" << series[s].first << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace detail

/// Writes learning curves, graph rank tables and mAP tables for a stage directory holding
/// metrics.jsonl (plus graph.json / report.json when present). Returns the files written.
inline std::vector<fs::path> emit_plots(const fs::path& metrics_dir) {
  const auto metrics_path = metrics_dir / "metrics.jsonl";
  if (!fs::exists(metrics_path))
    throw DataError("no metrics logs in '" + metrics_dir.string() +
                    "': expected metrics.jsonl (optional: graph.json, report.json)");
  std::vector<fs::path> written;
  const fs::path out = metrics_dir / "plots";
  fs::create_directories(out);

  std::vector<std::string> modalities;
  if (fs::exists(metrics_dir / "graph.json"))
    modalities = read_json_file(metrics_dir / "graph.json").at("modalities").get<std::vector<std::string>>();

  // Learning curves.
  std::vector<double> loss;
  std::vector<std::vector<double>> train_acc, val_acc;
  for (const auto& rec : detail::read_jsonl(metrics_path)) {
    const auto split = rec.value("split", std::string());
    const char* key = rec.contains("clip_accuracy") ? "clip_accuracy" : "accuracy";
    if (split == "train") {
      loss.push_back(rec.at("loss").get<double>());
      train_acc.push_back(rec.at(key).get<std::vector<double>>());
    } else if (split == "val") {
      val_acc.push_back(rec.at(key).get<std::vector<double>>());
    }
  }
  if (loss.empty()) throw DataError("'" + metrics_path.string() + "' holds no training records");
  const std::size_t S = train_acc[0].size();
  auto mod_name = [&](std::size_t m) { return m < modalities.size() ? modalities[m] : "m" + std::to_string(m); };
  {
    std::ostringstream os;
    os << "epoch,loss";
    for (std::size_t m = 0; m < S; ++m) os << ",train_" << mod_name(m);
    if (!val_acc.empty())
      for (std::size_t m = 0; m < S; ++m) os << ",val_" << mod_name(m);
    os << '\n';
    for (std::size_t e = 0; e < loss.size(); ++e) {
      os << e << ',' << detail::fmt_double(loss[e]);
      for (double a : train_acc[e]) os << ',' << detail::fmt_double(a);
      if (!val_acc.empty())
        for (std::size_t m = 0; m < S; ++m) os << ',' << (e < val_acc.size() ? detail::fmt_double(val_acc[e].at(m)) : "");
      os << '\n';
    }
    detail::write_text(out / "learning_curve.csv", os.str());
    written.push_back(out / "learning_curve.csv");
    detail::write_text(out / "loss.svg", detail::svg_lines({{"train loss", loss}}, "training loss"));
    written.push_back(out / "loss.svg");
    std::vector<std::pair<std::string, std::vector<double>>> acc;
    for (std::size_t m = 0; m < S; ++m) {
      std::vector<double> ys;
      for (const auto& a : train_acc) ys.push_back(a[m]);
      acc.push_back({"train " + mod_name(m), ys});
    }
    detail::write_text(out / "accuracy.svg", detail::svg_lines(acc, "training accuracy"));
    written.push_back(out / "accuracy.svg");
  }

  // Per-class graph ranks.
  if (fs::exists(metrics_dir / "graph.json")) {
    const auto g = read_json_file(metrics_dir / "graph.json");
    const auto cg = g.value("class_graph", std::vector<std::vector<double>>{});
    if (!cg.empty()) {
      const std::size_t n = modalities.size();
      std::ostringstream md, csv;
      csv << "class,receiver,sender,weight,rank\n";
      for (std::size_t c = 0; c < cg.size(); ++c) {
        const auto ranks = receiver_ranks(cg[c], n);
        md << "### class " << c << "\n\n| receiver |";
        for (std::size_t j = 0; j < n; ++j) md << ' ' << modalities[j] << " |";
        md << "\n|---|";
        for (std::size_t j = 0; j < n; ++j) md << "---|";
        md << '\n';
        for (std::size_t k = 0; k < n; ++k) {
          md << "| " << modalities[k] << " |";
          for (std::size_t j = 0; j < n; ++j) {
            if (j == k) md << " - |";
            else md << ' ' << ranks[k][j] << " |";
            if (j != k)
              csv << c << ',' << modalities[k] << ',' << modalities[j] << ',' << detail::fmt_double(cg[c][j * n + k])
                  << ',' << ranks[k][j] << '\n';
          }
          md << '\n';
        }
        md << '\n';
      }
      detail::write_text(out / "graph_ranks.md", md.str());
      detail::write_text(out / "graph_ranks.csv", csv.str());
      written.push_back(out / "graph_ranks.md");
      written.push_back(out / "graph_ranks.csv");
    }
  }

  // mAP versus threshold.
  const fs::path report_path =
      fs::exists(metrics_dir / "report.json") ? metrics_dir / "report.json" : metrics_dir / ".." / "eval.json";
  if (fs::exists(report_path)) {
    const auto rj = read_json_file(report_path);
    if (rj.contains("reports")) {
      const auto rep = rj.get<SeedReport>();
      for (const auto& [mod, e] : rep.reports) {
        if (e.thresholds.empty()) continue;
        std::ostringstream csv, md;
        csv << "class";
        md << "| class |";
        for (double t : e.thresholds) {
          csv << ',' << detail::fmt_double(t);
          md << " tIoU " << detail::fmt_double(t) << " |";
        }
        csv << '\n';
        md << "\n|---|";
        for (std::size_t t = 0; t < e.thresholds.size(); ++t) md << "---|";
        md << '\n';
        const std::size_t L = e.ap[0].size();
        for (std::size_t c = 0; c <= L; ++c) {
          const bool mean_row = c == L;
          csv << (mean_row ? std::string("mAP") : std::to_string(c));
          md << "| " << (mean_row ? std::string("mAP") : std::to_string(c)) << " |";
          for (std::size_t t = 0; t < e.thresholds.size(); ++t) {
            const std::optional<double> v = mean_row ? std::optional(e.map[t]) : e.ap[t][c];
            csv << ',' << (v ? detail::fmt_double(*v) : "");
            md << ' ' << (v ? detail::fmt_double(*v) : "n/a") << " |";
          }
          csv << '\n';
          md << '\n';
        }
        detail::write_text(out / ("map_" + mod + ".csv"), csv.str());
        detail::write_text(out / ("map_" + mod + ".md"), md.str());
        written.push_back(out / ("map_" + mod + ".csv"));
        written.push_back(out / ("map_" + mod + ".md"));
      }
    }
  }
  return written;
}

}  // namespace gdist
