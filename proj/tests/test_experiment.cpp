#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "gdist/experiment.hpp"
#include "helpers.hpp"

using namespace gdist;
using gdist::testing::TempDir;

namespace {

const fs::path kConfigs = GDIST_CONFIG_DIR;

nlohmann::json smoke_json(const char* file = "smoke_classification.json") {
  return read_json_file(kConfigs / file);
}

std::string config_error(const nlohmann::json& j) {
  try {
    parse_experiment(j, kConfigs);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(ExperimentConfig, ShippedConfigsParse) {
  for (const char* f : {"smoke_classification.json", "smoke_transfer.json", "graph_ablation.json", "transfer_ablation.json"}) {
    const auto c = load_experiment(kConfigs / f);
    EXPECT_FALSE(expand_sweep(c).empty()) << f;
  }
  const auto g = load_experiment(kConfigs / "graph_ablation.json");
  EXPECT_EQ(g.corpus.num_classes, 8u);  // resolved from the shared corpus file
  EXPECT_EQ(g.corpus.modalities.size(), 4u);
}

TEST(ExperimentConfig, UnknownFieldsRejected) {
  auto j = smoke_json();
  j["learning_rate"] = 0.1;
  EXPECT_NE(config_error(j).find("unknown field 'learning_rate'"), std::string::npos);
  j = smoke_json();
  j["modalities"]["privileged"] = {"skel"};
  EXPECT_NE(config_error(j).find("modalities: unknown field 'privileged'"), std::string::npos);
  j = smoke_json();
  j["strategy"]["kind"] = "teacher";
  EXPECT_NE(config_error(j).find("strategy"), std::string::npos);
  j = smoke_json();
  j["pipeline"] = "segmentation";
  EXPECT_NE(config_error(j).find("pipeline"), std::string::npos);
}

TEST(ExperimentConfig, ModalityRelationsChecked) {
  auto j = smoke_json();
  j["modalities"] = {{"target", {"rgb"}}, {"test", {"skel"}}};
  EXPECT_EQ(config_error(j), "modalities.test: 'skel' is not among the training modalities");

  j = smoke_json();
  j["modalities"]["source"] = {"rgb"};
  EXPECT_EQ(config_error(j).rfind("modalities.source:", 0), 0u) << config_error(j);

  j = smoke_json("smoke_transfer.json");
  j["modalities"]["source"] = {"rgb"};
  j["source_strategy"]["kind"] = "empty";
  EXPECT_EQ(config_error(j).rfind("modalities.target: 'skel' is not a source modality", 0), 0u) << config_error(j);

  j = smoke_json();
  j["modalities"]["target"] = {"rgb", "audio"};
  EXPECT_EQ(config_error(j).rfind("modalities.target:", 0), 0u) << config_error(j);

  j = smoke_json();
  j["modalities"]["target"] = {"rgb"};
  EXPECT_EQ(config_error(j).rfind("strategy:", 0), 0u) << config_error(j);  // learned needs two

  j = smoke_json();
  j["modalities"]["test"] = "rgb";  // a single name is accepted
  EXPECT_EQ(config_error(j), "");
}

TEST(ExperimentConfig, FieldPrefixedValueErrors) {
  auto j = smoke_json();
  j["target_fraction"] = 0.0;
  EXPECT_EQ(config_error(j).rfind("target_fraction:", 0), 0u);
  j = smoke_json();
  j["thresholds"] = {0.5, 1.5};
  EXPECT_EQ(config_error(j).rfind("thresholds:", 0), 0u);
  j = smoke_json();
  j["sampler"]["clip_length"] = 9;
  EXPECT_EQ(config_error(j).rfind("sampler.clip_length:", 0), 0u);
  j = smoke_json();
  j["schedule"]["stage1_epochs"] = 9;
  EXPECT_EQ(config_error(j).rfind("schedule:", 0), 0u);
}

TEST(ConfigHash, IgnoresBookkeepingFields) {
  const auto base = load_experiment(kConfigs / "smoke_classification.json");
  auto c = base;
  c.name = "renamed";
  c.seeds = {1, 2, 3};
  c.output_dir = "/elsewhere";
  c.schedule.seed = 99;
  c.source_schedule.total_epochs = 77;  // unused outside transfer
  EXPECT_EQ(config_hash(c), config_hash(base));
  c.schedule.visual_lr = 0.04;
  EXPECT_NE(config_hash(c), config_hash(base));
  c = base;
  c.strategy.distill.alpha = 3.0;
  EXPECT_NE(config_hash(c), config_hash(base));
  c = base;
  c.corpus.template_seed = 12345;
  EXPECT_NE(config_hash(c), config_hash(base));
}

TEST(Sweep, ExpandsLabelledVariants) {
  const auto t = load_experiment(kConfigs / "transfer_ablation.json");
  const auto v = expand_sweep(t);
  std::vector<std::string> labels;
  std::set<std::string> hashes;
  for (const auto& x : v) {
    labels.push_back(x.label);
    hashes.insert(config_hash(x.config));
    EXPECT_TRUE(x.config.sweep.empty());
    EXPECT_EQ(x.config.seeds, t.seeds);
  }
  EXPECT_EQ(labels, (std::vector<std::string>{"trg", "src+trg", "srcPI+trg", "src+trgPI", "srcPI+trgPI",
                                               "srcPI+trg+1PI", "srcPI+trg+2PI"}));
  EXPECT_EQ(hashes.size(), v.size());
  EXPECT_EQ(v[0].config.pipeline, Pipeline::detection);
  EXPECT_EQ(v[1].config.source_strategy.kind, StrategyKind::empty);
  EXPECT_EQ(v[2].config.source_strategy.kind, StrategyKind::learned);
  EXPECT_EQ(v[6].config.modalities.target.size(), 3u);

  auto g = load_experiment(kConfigs / "smoke_classification.json");
  ASSERT_EQ(expand_sweep(g).size(), 1u);
  EXPECT_EQ(expand_sweep(g)[0].label, g.name);
  g.sweep = {{{"strategy", {{"kind", "bogus"}}}}};
  try {
    expand_sweep(g);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("sweep[0] (variant-0):", 0), 0u) << e.what();
  }
}

TEST(ReceiverRanks, EachReceiverGetsAPermutation) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t S = 2 + uniform_index(rng, 4);
    std::vector<double> g(S * S);
    for (auto& v : g) v = uniform_index(rng, 4) * 0.25;  // ties are common
    const auto r = receiver_ranks(g, S);
    for (std::size_t k = 0; k < S; ++k) {
      std::vector<std::size_t> seen;
      for (std::size_t j = 0; j < S; ++j)
        if (j != k) seen.push_back(r[k][j]);
      std::sort(seen.begin(), seen.end());
      for (std::size_t i = 0; i < seen.size(); ++i) ASSERT_EQ(seen[i], i + 1);
      EXPECT_EQ(r[k][k], 0u);
      for (std::size_t a = 0; a < S; ++a)
        for (std::size_t b = 0; b < S; ++b)
          if (a != k && b != k && g[a * S + k] > g[b * S + k]) {
            EXPECT_LT(r[k][a], r[k][b]);
          }
    }
  }
  EXPECT_THROW(receiver_ranks(std::vector<double>(5), 2), ShapeError);
}

TEST(Run, ClassificationSmokeEndToEnd) {
  TempDir dir("run");
  auto c = load_experiment(kConfigs / "smoke_classification.json");
  c.output_dir = dir.path().string();
  std::ostringstream log;
  std::size_t jobs = 0;
  const auto counting = [&](const std::vector<Job>& js) {
    jobs += js.size();
    run_sequential(js);
  };
  const auto results = run_experiment(c, {Stage::eval, false, std::nullopt, &log}, counting);
  EXPECT_EQ(jobs, 1u);
  ASSERT_EQ(results.size(), 1u);
  EXPECT_EQ(results[0].metric, "accuracy");
  EXPECT_GE(results[0].mean(), 0.0);
  EXPECT_LE(results[0].mean(), 1.0);
  const auto sd = seed_dir(c, 7);
  for (const char* f : {"eval.json", "classification/metrics.jsonl", "classification/rgb.ckpt",
                        "classification/graph.json", "eval.done"})
    EXPECT_TRUE(fs::exists(sd / f)) << f;
  EXPECT_TRUE(fs::exists(experiment_dir(c) / "manifest.json"));
  const auto report = read_seed_report(c, 7);
  EXPECT_EQ(report.headline, results[0].headline[0]);
  // The report written during training equals the one re-evaluated from checkpoints.
  EXPECT_EQ(read_json_file(sd / "classification" / "report.json"), read_json_file(sd / "eval.json"));

  const std::string metrics = slurp(sd / "classification/metrics.jsonl");
  const auto mtime = fs::last_write_time(sd / "classification/metrics.jsonl");
  log.str("");
  run_experiment(c, {Stage::eval, false, std::nullopt, &log});
  EXPECT_NE(log.str().find("train-cls up to date"), std::string::npos) << log.str();
  EXPECT_EQ(fs::last_write_time(sd / "classification/metrics.jsonl"), mtime);

  log.str("");
  run_experiment(c, {Stage::eval, true, std::nullopt, &log});
  EXPECT_EQ(log.str().find("up to date"), std::string::npos);
  EXPECT_EQ(slurp(sd / "classification/metrics.jsonl"), metrics);  // same seed, same bytes

  const auto written = emit_plots(sd / "classification");
  for (const char* f : {"learning_curve.csv", "loss.svg", "accuracy.svg", "graph_ranks.md", "graph_ranks.csv"})
    EXPECT_TRUE(fs::exists(sd / "classification/plots" / f)) << f;
  const auto ranks = read_csv(sd / "classification/plots/graph_ranks.csv");
  ASSERT_GT(ranks.size(), 1u);
  for (std::size_t i = 1; i < ranks.size(); ++i) EXPECT_EQ(ranks[i][4], "1");  // two modalities: one sender each
  EXPECT_EQ(read_csv(sd / "classification/plots/learning_curve.csv").size(), c.schedule.total_epochs + 1);
}

TEST(Run, StageSelectionAndMissingReports) {
  TempDir dir("run");
  auto c = load_experiment(kConfigs / "smoke_classification.json");
  c.output_dir = dir.path().string();
  EXPECT_THROW(run_seed(c, 7, Stage::transfer, false), ConfigError);
  run_seed(c, 7, Stage::generate, false);
  EXPECT_TRUE(fs::exists(seed_dir(c, 7) / "corpus-classification.gdst"));
  EXPECT_FALSE(fs::exists(seed_dir(c, 7) / "corpus-detection.gdst"));
  EXPECT_THROW(read_seed_report(c, 7), DataError);
  const auto partial = run_experiment(c, {Stage::generate, false, std::nullopt, nullptr});
  EXPECT_TRUE(partial.empty());
}

TEST(Run, TransferMapTableMatchesReport) {
  TempDir dir("run");
  auto base = load_experiment(kConfigs / "smoke_transfer.json");
  base.output_dir = dir.path().string();
  const auto variant = expand_sweep(base)[1].config;
  run_seed(variant, 3, Stage::eval, false);
  const auto sd = seed_dir(variant, 3);
  for (const char* f : {"transfer/rgb.ckpt", "transfer/skel.ckpt", "detection/metrics.jsonl", "eval.json"})
    EXPECT_TRUE(fs::exists(sd / f)) << f;
  const auto rep = read_seed_report(variant, 3);
  EXPECT_EQ(rep.metric, "map@0.5");
  const auto& e = rep.reports.at("rgb");
  ASSERT_EQ(e.thresholds, kDefaultThresholds);
  for (std::size_t t = 1; t < e.map.size(); ++t) EXPECT_LE(e.map[t], e.map[t - 1]);

  emit_plots(sd / "detection");
  const auto table = read_csv(sd / "detection/plots/map_rgb.csv");
  const auto det_report = read_json_file(sd / "detection/report.json").get<SeedReport>().reports.at("rgb");
  ASSERT_EQ(table.size(), det_report.ap[0].size() + 2);
  for (std::size_t t = 0; t < det_report.thresholds.size(); ++t) {
    for (std::size_t c = 0; c < det_report.ap[t].size(); ++c) {
      const auto& cell = table[c + 1][t + 1];
      if (!det_report.ap[t][c]) {
        EXPECT_EQ(cell, "");
      } else {
        EXPECT_EQ(std::stod(cell), *det_report.ap[t][c]);
      }
    }
    EXPECT_EQ(std::stod(table.back()[t + 1]), det_report.map[t]);
  }
}

TEST(Run, SweepTableListsEveryVariant) {
  TempDir dir("run");
  auto base = load_experiment(kConfigs / "smoke_classification.json");
  base.output_dir = dir.path().string();
  std::vector<VariantResult> results{{"a", "h1", "accuracy", {1, 2}, {0.5, 0.25}},
                                     {"b", "h2", "accuracy", {1, 2}, {1.0, 0.0}}};
  const auto out = write_sweep_table(base, results);
  const auto md = slurp(out / "table.md");
  EXPECT_NE(md.find("| a | 0.5000 | 0.2500 | 0.3750 |"), std::string::npos) << md;
  EXPECT_NE(md.find("| b | 1.0000 | 0.0000 | 0.5000 |"), std::string::npos) << md;
  EXPECT_EQ(read_csv(out / "table.csv").size(), 5u);
}

TEST(Plots, MissingLogsNameTheExpectedFiles) {
  TempDir dir("plots");
  try {
    emit_plots(dir.path());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("metrics.jsonl"), std::string::npos);
    EXPECT_NE(msg.find("graph.json"), std::string::npos);
    EXPECT_NE(msg.find("report.json"), std::string::npos);
  }
  std::ofstream(dir.path() / "metrics.jsonl") << "{\"split\":\"test\",\"accuracy\":{}}\n";
  EXPECT_THROW(emit_plots(dir.path()), DataError);
}
