#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dgp/gp.hpp"
#include "dgp/kernel.hpp"
#include "dgp/rng.hpp"
#include "dgp/world.hpp"

namespace dgp {

struct PlannerConfig {
  int horizon = 5;  // search depth T
  int n_iteration = 300;
  int n_search = 3;
  double gamma = 0.9;
  MergeMode merge_mode = MergeMode::kAsPrinted;
};

/// Per-edge D-UCB statistics. N and W are stored as of iteration `tau`;
/// their value at a later iteration t is N * gamma^(t - tau).
struct EdgeStats {
  double N = 0.0;
  double W = 0.0;
  std::int64_t tau = 0;
  bool closed = false;
  int child = -1;
  /// Undiscounted visit count (diagnostics only).
  std::int64_t visits = 0;
};

struct TreeNode {
  /// One position per team member (a single agent in distributed mode).
  std::vector<Position> positions;
  int depth = 0;
  int parent = -1;
  int incoming_action = -1;
  std::vector<EdgeStats> edges;

  // Feature cache, valid while `cache_model` matches the active reward model.
  std::uint64_t cache_model = 0;
  Eigen::MatrixXd phi;
  Eigen::MatrixXd whitened;
};

/// Search tree over joint actions of a team of `team_size` members
/// (|A|^team_size edges per node). Nodes live in an arena; index 0 is the root.
class SearchTree {
 public:
  SearchTree(std::vector<Position> root_positions, ActionSpace actions, int max_depth);

  int team_size() const { return static_cast<int>(nodes_.front().positions.size()); }
  int max_depth() const { return max_depth_; }
  int num_joint_actions() const { return num_joint_actions_; }
  const ActionSpace& actions() const { return actions_; }

  std::size_t size() const { return nodes_.size(); }
  TreeNode& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }
  const TreeNode& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  TreeNode& root() { return nodes_.front(); }
  const TreeNode& root() const { return nodes_.front(); }

  /// Per-member displacement of a joint action.
  Position member_move(int joint_action, int member) const;
  /// Appends the child reached from `parent` by `joint_action`.
  int add_child(int parent, int joint_action);
  /// Node indices from the root's child down to `node` (root excluded).
  std::vector<int> path_to(int node) const;

 private:
  ActionSpace actions_;
  int max_depth_;
  int num_joint_actions_;
  std::vector<TreeNode> nodes_;
};

/// Informational reward of a candidate point set: 1/2 log det(2 pi e (Sigma + j I))
/// with Sigma the trajectory-merged posterior covariance and j = 1e-9 signal variance.
class RewardModel {
 public:
  RewardModel(const MergedGpState& merged, const EigenBasis& basis, const NoiseModel& noise);

  std::uint64_t id() const { return id_; }
  const EigenBasis& basis() const { return *basis_; }
  const GpPosterior& posterior() const { return posterior_; }

  /// Fills Phi and whitened features for each column's point.
  void features(std::span<const Position> points, Eigen::Ref<Eigen::MatrixXd> phi,
                Eigen::Ref<Eigen::MatrixXd> whitened) const;
  /// Reward from precomputed feature columns.
  double reward(std::span<const Position> points, const Eigen::MatrixXd& phi,
                const Eigen::MatrixXd& whitened) const;
  double reward(std::span<const Position> points) const;

 private:
  std::uint64_t id_;
  const EigenBasis* basis_;
  GpPosterior posterior_;
  double jitter_;
};

double informational_reward(const MergedGpState& merged, const EigenBasis& basis,
                            const NoiseModel& noise, const Trajectory& traj);

/// D-UCB action choice at `node` among open edges. Unvisited open edges
/// (N = 0) win first, lowest index first. Returns nullopt when every edge
/// is closed.
std::optional<int> ducb_select(const TreeNode& node, std::int64_t tau, double gamma);

/// Descends from the root to a node with an untried open action or at the
/// depth limit, closing edges into fully blocked nodes on the way. Throws
/// PlanningInfeasibleError once the root itself is fully closed.
int selection(SearchTree& tree, std::int64_t tau, double gamma);

/// Adds a child for a uniformly drawn untried open action of `leaf`.
std::pair<int, int> expand(SearchTree& tree, int leaf, Rng& rng);

/// Root-to-node path extended by uniform legal random steps to depth T;
/// returns its informational reward. A rollout step with no legal move
/// truncates the rollout. `rollout` (optional) receives the random-walk points.
double simulate(SearchTree& tree, int node, const RewardModel& model, const World& world, Rng& rng,
                std::vector<Position>* rollout = nullptr);

/// N <- N gamma^(tau - tau_e) + 1, W <- W gamma^(tau - tau_e) + reward on each
/// edge of the root path.
void backprop(SearchTree& tree, int node, double reward, double gamma, std::int64_t tau);

/// One search pass: selection, expansion, collision check (closing edges),
/// simulation, backpropagation; repeated n_iteration times.
void tree_search(SearchTree& tree, std::int64_t tau, const RewardModel& model, const World& world,
                 int n_iteration, double gamma, Rng& rng);

/// Root descent by maximal mean value W/N over open visited edges (lowest
/// action index on ties). One trajectory per team member; empty when the
/// root has no visited open edge.
std::vector<Trajectory> best_trajectories(const SearchTree& tree,
                                          std::span<const std::uint32_t> member_ids);

/// Receding-horizon planner for a team (size 1 in distributed mode). The
/// tree persists across the outer search rounds of one planning step.
class TreePlanner {
 public:
  TreePlanner(std::vector<std::uint32_t> member_ids, PlannerConfig config, ActionSpace actions,
              const EigenBasis& basis, NoiseModel noise, const World& world);

  void reset(std::vector<Position> root_positions);
  /// One outer round at iteration tau: search under `merged`, then extract
  /// the best trajectory per member.
  std::vector<Trajectory> search_round(std::int64_t tau, const MergedGpState& merged, Rng& rng);

  const SearchTree& tree() const { return *tree_; }
  const PlannerConfig& config() const { return config_; }
  const ActionSpace& actions() const { return actions_; }

 private:
  std::vector<std::uint32_t> ids_;
  PlannerConfig config_;
  ActionSpace actions_;
  const EigenBasis* basis_;
  NoiseModel noise_;
  const World* world_;
  std::optional<SearchTree> tree_;
};

/// Exchange hook for the outer rounds: receives this agent's latest
/// trajectory after round tau and returns the neighbor trajectories to merge
/// in the next round.
using TrajectoryExchange = std::function<std::vector<Trajectory>(std::int64_t tau, const Trajectory& mine)>;

/// Full planning step for one agent: n_search rounds of
/// merge -> tree search -> best trajectory -> exchange.
Trajectory plan_step(std::uint32_t agent_id, const Position& position, const GpState& gp_state,
                     std::vector<Trajectory> initial_neighbor_trajs, const TrajectoryExchange& exchange,
                     const PlannerConfig& config, const ActionSpace& actions, const EigenBasis& basis,
                     const NoiseModel& noise, const World& world, Rng& rng);

// Wire format: {agent_id u32, round u64, T u16, points T*d f64}, little-endian.
std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj, std::uint64_t round);
std::pair<Trajectory, std::uint64_t> decode_trajectory(std::span<const std::uint8_t> bytes, int dim);

}  // namespace dgp
