#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "gdist/experiment.hpp"

namespace {

using namespace gdist;

// Exit codes: 0 success, 1 stage failure, 2 invalid configuration or usage.
constexpr int kStageFailure = 1;
constexpr int kConfigInvalid = 2;

/// Runs jobs in at most `n` forked worker processes.
void run_forked(const std::vector<Job>& jobs, unsigned n) {
  if (n <= 1 || jobs.size() <= 1) return run_sequential(jobs);
  std::map<pid_t, std::string> running;
  std::vector<std::string> failed;
  auto reap = [&] {
    int status = 0;
    const pid_t pid = ::wait(&status);
    if (pid < 0) throw Error("wait() failed");
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed.push_back(running[pid]);
    running.erase(pid);
  };
  for (const auto& job : jobs) {
    while (running.size() >= n) reap();
    std::cout.flush();
    std::cerr.flush();
    const pid_t pid = ::fork();
    if (pid < 0) throw Error("fork() failed");
    if (pid == 0) {
      int code = 0;
      try {
        job.run();
      } catch (const std::exception& e) {
        std::cerr << "error: " << job.label << ": " << e.what() << '\n';
        code = kStageFailure;
      }
      std::cerr.flush();
      std::_Exit(code);
    }
    running[pid] = job.label;
  }
  while (!running.empty()) reap();
  if (!failed.empty()) {
    std::string list;
    for (const auto& f : failed) list += (list.empty() ? "" : ", ") + f;
    throw Error(std::to_string(failed.size()) + " job(s) failed: " + list);
  }
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  bool force = false;
  std::string out;
};

ExperimentConfig load(const Common& c) {
  auto cfg = load_experiment(c.config);
  if (const char* env = std::getenv("GDIST_OUTPUT_DIR"); env && *env) cfg.output_dir = env;
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

unsigned resolve_jobs(const Common& c, bool jobs_given) {
  if (jobs_given) return std::max(1u, c.jobs);
  if (const char* env = std::getenv("GDIST_JOBS"); env && *env) return std::max(1, std::atoi(env));
  return 1;
}

void print_results(const std::vector<VariantResult>& results) {
  for (const auto& r : results) {
    std::cout << r.label << " [" << r.config_hash << "] " << r.metric << ":";
    for (std::size_t i = 0; i < r.seeds.size(); ++i) std::cout << " seed " << r.seeds[i] << '=' << r.headline[i];
    std::cout << "  mean=" << r.mean() << '\n';
  }
}

int run_verb(const std::string& verb, const Common& c, bool jobs_given) {
  const auto cfg = load(c);
  if (verb == "sweep" && cfg.sweep.empty()) throw ConfigError("sweep: the config declares no sweep overrides");
  static const std::map<std::string, Stage> stages = {{"generate", Stage::generate},   {"train-cls", Stage::train_cls},
                                                      {"transfer", Stage::transfer},   {"train-det", Stage::train_det},
                                                      {"eval", Stage::eval},           {"run", Stage::eval},
                                                      {"sweep", Stage::eval}};
  RunOptions opt;
  opt.until = stages.at(verb);
  opt.force = c.force;
  opt.seed = c.seed;
  opt.log = &std::clog;
  const unsigned jobs = resolve_jobs(c, jobs_given);
  const auto results = run_experiment(cfg, opt, [jobs](const std::vector<Job>& j) { run_forked(j, jobs); });
  if (opt.until == Stage::eval) {
    print_results(results);
    if (!cfg.sweep.empty()) std::cout << "table: " << (write_sweep_table(cfg, results) / "table.md").string() << '\n';
  }
  for (const auto& v : expand_sweep(cfg)) std::cout << "artifacts: " << experiment_dir(v.config).string() << '\n';
  return 0;
}

int plot_verb(const Common& c, const std::vector<std::string>& dirs) {
  std::vector<fs::path> targets(dirs.begin(), dirs.end());
  if (targets.empty()) {
    if (c.config.empty()) throw ConfigError("plot: give metrics directories or --config");
    const auto cfg = load(c);
    for (const auto& v : expand_sweep(cfg))
      for (auto seed : c.seed ? std::vector<std::uint64_t>{*c.seed} : v.config.seeds)
        for (const char* stage : {"classification", "detection"})
          if (fs::exists(seed_dir(v.config, seed) / stage)) targets.push_back(seed_dir(v.config, seed) / stage);
    if (targets.empty()) throw DataError("plot: no stage directories found; run the experiment first");
  }
  for (const auto& d : targets)
    for (const auto& f : emit_plots(d)) std::cout << f.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph distillation experiments on synthetic multimodal corpora"};
  app.require_subcommand(1);
  Common common;
  std::vector<std::string> plot_dirs;
  std::map<std::string, CLI::App*> verbs;
  const std::vector<std::pair<std::string, std::string>> descriptions = {
      {"generate", "write the seeded corpora of every seed"},
      {"train-cls", "train the classification (or source) stage"},
      {"transfer", "copy source visual encoders into target checkpoints"},
      {"train-det", "train the detection (target) stage"},
      {"eval", "evaluate final checkpoints and print headline metrics"},
      {"run", "execute the whole pipeline"},
      {"sweep", "run every sweep variant and write the comparison table"},
      {"plot", "emit learning curves, graph rank tables and mAP tables"}};
  for (const auto& [name, desc] : descriptions) {
    auto* sub = app.add_subcommand(name, desc);
    auto* cfg = sub->add_option("--config", common.config, "experiment config (JSON)");
    if (name != "plot") cfg->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "run only this seed");
    sub->add_option("--jobs", common.jobs, "parallel worker processes (env GDIST_JOBS)");
    sub->add_flag("--force", common.force, "recompute stages that are already complete");
    sub->add_option("--out", common.out, "output directory (env GDIST_OUTPUT_DIR)");
    if (name == "plot") sub->add_option("dirs", plot_dirs, "stage directories holding metrics.jsonl");
    verbs[name] = sub;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (const auto& [name, sub] : verbs) {
      if (!sub->parsed()) continue;
      const bool jobs_given = sub->get_option("--jobs")->count() > 0;
      if (name == "plot") return plot_verb(common, plot_dirs);
      return run_verb(name, common, jobs_given);
    }
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kConfigInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageFailure;
  }
  return 0;
}
