#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dgp/cli.hpp"

namespace {

int exit_code(const dgp::Error& e) {
  switch (e.kind()) {
    case dgp::ErrorKind::kConfig:
    case dgp::ErrorKind::kCapacity:
    case dgp::ErrorKind::kInput:
      return 2;
    case dgp::ErrorKind::kData:
      return 3;
    case dgp::ErrorKind::kNumerical:
      return 4;
    case dgp::ErrorKind::kPlanningInfeasible:
      return 5;
    default:
      return 1;
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed GP exploration simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output_dir;
  std::string baselines;
  std::uint64_t seed = 0;

  auto* run = app.add_subcommand("run", "Run an experiment and write its report");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  auto* seed_opt = run->add_option("--seed", seed, "Override world.seed");
  auto* out_opt = run->add_option("--output-dir", output_dir, "Override run.output_dir");
  auto* base_opt = run->add_option("--baselines", baselines, "Comma-separated baselines (independent,centralized)");

  auto* validate = app.add_subcommand("validate", "Validate a config and print it with defaults filled in");
  validate->add_option("config", config_path, "Experiment config (JSON)")->required();

  std::string replay_dir;
  auto* replay = app.add_subcommand("replay", "Recompute metrics from a run directory's trajectories");
  replay->add_option("output_dir", replay_dir, "Directory written by `run`")->required();

  CLI11_PARSE(app, argc, argv);

  dgp::Report report;
  std::string out_dir;
  bool running = false;
  try {
    if (*validate) {
      const dgp::Config cfg = dgp::load_config(config_path);
      std::cout << cfg.doc.dump(2) << "\n";
      return 0;
    }
    if (*replay) {
      const auto rows = dgp::replay(replay_dir);
      const dgp::Config cfg = dgp::load_config(std::filesystem::path(replay_dir) / "config.resolved.json");
      std::vector<std::uint32_t> ids;
      for (int i = 0; i < cfg.doc["world"]["n_agents"].get<int>(); ++i) ids.push_back(static_cast<std::uint32_t>(i));
      const auto path = std::filesystem::path(replay_dir) / "metrics_replay.csv";
      dgp::write_metrics_csv(rows, ids, path);
      std::cout << "wrote " << path.string() << " (" << rows.size() << " steps)\n";
      return 0;
    }

    dgp::Config cfg = dgp::load_config(config_path);
    nlohmann::json doc = cfg.doc;
    if (*seed_opt) doc["world"]["seed"] = seed;
    if (*out_opt) doc["run"]["output_dir"] = output_dir;
    if (*base_opt) doc["run"]["baselines"] = split_list(baselines);
    cfg = dgp::parse_config(doc, std::filesystem::path(config_path).parent_path());
    out_dir = cfg.doc["run"]["output_dir"];
    running = true;
    dgp::run_experiment(cfg, report);
    dgp::write_report(report, out_dir);
    const auto& last = report.main.metrics.back();
    double mean = 0.0;
    for (double v : last.rmse) mean += v;
    std::printf("steps %lld  final mean RMSE %.6g  max disagreement %.6g  (%.2f s)\n",
                static_cast<long long>(last.step), mean / static_cast<double>(last.rmse.size()),
                last.max_disagreement, report.wall_clock_s);
    std::printf("report written to %s\n", out_dir.c_str());
    return 0;
  } catch (const dgp::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (running) {
      try {
        dgp::write_report(report, out_dir);
        std::cerr << "partial report written to " << out_dir << "\n";
      } catch (const std::exception& inner) {
        std::cerr << "could not write partial report: " << inner.what() << "\n";
      }
    }
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
