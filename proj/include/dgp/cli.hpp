#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dgp/sim.hpp"

namespace dgp {

/// Checks `doc` against a JSON schema and fills in defaults, in place.
/// Supports the subset used by the shipped schema: type, properties,
/// required, additionalProperties=false, items, enum, default, minimum,
/// maximum, exclusiveMinimum, exclusiveMaximum, minItems, maxItems.
/// Throws ConfigError naming the offending JSON pointer.
void apply_schema(nlohmann::json& doc, const nlohmann::json& schema);

/// The configuration schema shipped in schema/config.schema.json.
const nlohmann::json& config_schema();

/// Validated experiment configuration with all defaults filled in.
struct Config {
  nlohmann::json doc;

  bool operator==(const Config& other) const { return doc == other.doc; }
};

Config parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
Config load_config(const std::filesystem::path& path);
void write_config(const Config& config, const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct StationDataset {
  std::vector<std::string> station_ids;  // sorted
  std::vector<Position> positions;
  std::vector<double> timestamps;  // epoch seconds, strictly increasing
  Eigen::MatrixXd values;          // snapshots x stations, NaN = missing
  std::string units;
};

/// Parses "YYYY-MM-DDTHH:MM:SS[.fff][Z|+HH:MM]" or plain epoch seconds.
double parse_timestamp(const std::string& text);

StationDataset load_station_csv(const std::filesystem::path& path);
StationDataset parse_station_csv(std::istream& in, const std::string& source = "<stream>");

/// IDW/linear-in-time field over `lo`..`hi`. Snapshot times become seconds
/// since the first snapshot divided by `time_scale`.
EnvironmentField build_dataset_field(const StationDataset& dataset, const Position& lo, const Position& hi,
                                     double time_scale = 1.0);

// ---------------------------------------------------------------------------

/// Everything a run needs, derived from a Config.
struct Scenario {
  World world;
  EnvironmentField env;
  EigenBasis basis;
  NoiseModel noise{1.0};
  SimConfig sim;
};

Scenario build_scenario(const Config& config, RunMode mode);
RunMode parse_run_mode(const std::string& name);
std::string run_mode_name(RunMode mode);

struct TrajectoryRow {
  std::int64_t step = 0;
  std::uint32_t agent_id = 0;
  Position position;
};

struct Snapshot {
  std::int64_t step = 0;
  double time_s = 0.0;
  int resolution = 0;
  Eigen::VectorXd truth;
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

struct RunResult {
  std::vector<MetricsRow> metrics;
  std::vector<TrajectoryRow> trajectories;
  std::uint64_t planned_points = 0;
  std::uint64_t planned_points_in_collision = 0;
  std::uint64_t executed_positions_in_collision = 0;
  std::uint64_t cross_agent_reads = 0;
};

struct Report {
  Config config;
  std::vector<std::uint32_t> agent_ids;
  RunResult main;
  std::vector<Snapshot> snapshots;
  std::map<std::string, RunResult> baselines;
  double wall_clock_s = 0.0;
};

/// Runs one mode for `run.steps` steps, appending to `out` as it goes.
/// `on_step` (optional) sees the simulation after every step, step 0 included.
void run_scenario(const Config& config, RunMode mode, RunResult& out,
                  const std::function<void(const Simulation&)>& on_step = {});
RunResult run_scenario(const Config& config, RunMode mode);

/// Main run plus configured baselines. Fills `report` as it goes so a
/// failure still leaves the completed steps behind.
void run_experiment(const Config& config, Report& report);
Report run_experiment(const Config& config);

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::vector<std::uint32_t>& agent_ids,
                       const std::filesystem::path& path);
void write_report(const Report& report, const std::filesystem::path& dir);

/// Recomputes metrics from a run directory's logged trajectories and
/// resolved config. Returns the recomputed rows.
std::vector<MetricsRow> replay(const std::filesystem::path& dir);

}  // namespace dgp
