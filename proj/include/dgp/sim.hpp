#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dgp/consensus.hpp"
#include "dgp/gp.hpp"
#include "dgp/kernel.hpp"
#include "dgp/planner.hpp"
#include "dgp/rng.hpp"
#include "dgp/world.hpp"

namespace dgp {

/// Gaussian bump w * exp(-|x - c - v t|^2 / (2 s^2)).
struct Bump {
  Position center;
  Position velocity;  // zero for static fields
  double weight = 1.0;
  double width = 1.0;
};

/// Station-interpolated field: IDW (power 2) in space, linear in time,
/// constant outside the time range. NaN marks a missing value.
struct StationGrid {
  std::vector<Position> stations;
  std::vector<double> times;  // seconds, strictly increasing
  Eigen::MatrixXd values;     // snapshots x stations
};

enum class FieldKind { kSyntheticStatic, kSyntheticDynamic, kDataset };

struct EnvironmentField {
  FieldKind kind = FieldKind::kSyntheticStatic;
  Position lo;
  Position hi;
  std::vector<Bump> bumps;
  StationGrid stations;
};

double field_eval(const EnvironmentField& env, const Position& x, double t);
double measure(const EnvironmentField& env, const Position& x, double t, const NoiseModel& noise, Rng& rng);

struct BumpFieldOptions {
  int min_bumps = 3;
  int max_bumps = 6;
  double signal_std = 1.0;
  double length_scale = 1.0;
  /// Drift speed for dynamic fields (position units per second).
  double drift_speed = 0.0;
  /// Simulated duration; dynamic fields keep the domain populated for it.
  double horizon = 0.0;
};

/// Random bump field. Static: `min..max` bumps inside the domain with
/// weights +-U(0.5, 1.5) signal_std and widths U(0.8, 1.6) length_scale.
/// Dynamic: one common drift direction; bumps are also laid out upstream
/// so the domain stays covered for `horizon` seconds.
EnvironmentField random_bump_field(FieldKind kind, const Position& lo, const Position& hi,
                                   const BumpFieldOptions& options, Rng& rng);

/// Regular grid with `resolution` points per axis, bounds included, first
/// axis varying fastest.
std::vector<Position> make_grid(const Position& lo, const Position& hi, int resolution);

struct MetricsRow {
  std::int64_t step = 0;
  double time_s = 0.0;
  std::vector<double> rmse;
  std::vector<double> disagreement_vs_agent0;
  std::vector<double> consensus_residual;
  /// Max pairwise RMSE between agents' posterior-mean fields.
  double max_disagreement = 0.0;
};

/// Caches grid features so per-step evaluation only costs products.
class GridEvaluator {
 public:
  GridEvaluator(const EigenBasis& basis, const Position& lo, const Position& hi, int resolution);

  const std::vector<Position>& points() const { return points_; }
  Eigen::VectorXd mean_field(const GpState& state, const NoiseModel& noise) const;
  Eigen::VectorXd variance_field(const GpState& state, const NoiseModel& noise) const;
  Eigen::VectorXd truth(const EnvironmentField& env, double t) const;

 private:
  const EigenBasis* basis_;
  std::vector<Position> points_;
  Eigen::MatrixXd phi_;
};

MetricsRow evaluate_rmse(std::span<const GpState> states, const GridEvaluator& grid, const NoiseModel& noise,
                         const EnvironmentField& env, double t);
MetricsRow evaluate_rmse(std::span<const GpState> states, const EigenBasis& basis, const NoiseModel& noise,
                         const EnvironmentField& env, double t, int grid_resolution);

enum class RunMode { kDistributed, kIndependent, kCentralized };
enum class ForgettingMode { kRunningMean, kFixed };

struct SimConfig {
  RunMode mode = RunMode::kDistributed;
  ForgettingMode r_mode = ForgettingMode::kRunningMean;
  double r_value = 0.2;
  int rounds_per_step = 10;
  double drop_prob = 0.0;
  PlannerConfig planner;
  std::string action_set = "compass8";
  int replan_interval = 1;
  int centralized_iteration_factor = 22;
  int eval_grid = 50;
  /// Overrides the network size n used by the estimator (default: team size;
  /// 1 in independent mode).
  std::optional<std::uint64_t> network_size;
  int workers = 1;
  std::uint64_t seed = 0;
};

/// Lock-step multi-agent simulation.
class Simulation {
 public:
  Simulation(World world, EnvironmentField env, const EigenBasis& basis, NoiseModel noise, SimConfig config);

  /// Metrics for the current state (step 0 before any timestep).
  MetricsRow metrics() const;
  /// measure -> fuse -> consensus -> plan -> move -> metrics.
  MetricsRow run_timestep();
  /// Same sensing and fusion, but agents jump to `next_positions` instead
  /// of planning (replay of logged trajectories).
  MetricsRow run_timestep_scripted(std::span<const Position> next_positions);

  const World& world() const { return world_; }
  const EnvironmentField& env() const { return env_; }
  const std::vector<GpState>& states() const { return states_; }
  const std::vector<Trajectory>& plans() const { return plans_; }
  const SimConfig& config() const { return config_; }
  const GridEvaluator& grid() const { return grid_; }
  /// Number of times an agent read another agent's state or trajectory.
  std::uint64_t cross_agent_reads() const { return cross_reads_; }
  /// Every trajectory point produced by the planners so far.
  std::uint64_t planned_points() const { return planned_points_; }
  std::uint64_t planned_points_in_collision() const { return planned_collisions_; }

 private:
  void fuse_measurements();
  void sense_and_share();
  void plan_distributed(std::vector<bool>& replan);
  void plan_centralized();
  double forgetting(std::uint64_t m) const;
  void record_plan(const Trajectory& traj);

  World world_;
  EnvironmentField env_;
  const EigenBasis* basis_;
  NoiseModel noise_;
  SimConfig config_;
  ActionSpace actions_;
  GridEvaluator grid_;
  std::vector<GpState> states_;
  std::vector<Rng> measure_rngs_;
  std::vector<Rng> planner_rngs_;
  Rng drop_rng_;
  std::vector<Trajectory> plans_;
  std::vector<std::size_t> plan_cursor_;
  std::vector<double> residual_;
  CommGraph graph_;
  std::uint64_t cross_reads_ = 0;
  std::uint64_t planned_points_ = 0;
  std::uint64_t planned_collisions_ = 0;
};

/// Uniform collision-free start positions (rejection sampling).
std::vector<Position> random_start_positions(const World& world, int count, Rng& rng);

/// Runs `body(i)` for i in [0, count) on `workers` threads.
void parallel_for(int count, int workers, const std::function<void(int)>& body);

}  // namespace dgp
