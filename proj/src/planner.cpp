#include "dgp/planner.hpp"

#include <atomic>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>

#include "dgp/bytes.hpp"

namespace dgp {

namespace {

std::atomic<std::uint64_t> next_model_id{1};

int int_pow(int base, int exp) {
  long long out = 1;
  for (int i = 0; i < exp; ++i) {
    out *= base;
    if (out > std::numeric_limits<int>::max()) throw CapacityError("joint action space too large");
  }
  return static_cast<int>(out);
}

}  // namespace

SearchTree::SearchTree(std::vector<Position> root_positions, ActionSpace actions, int max_depth)
    : actions_(std::move(actions)), max_depth_(max_depth) {
  if (root_positions.empty()) throw InputError("SearchTree: empty team");
  if (max_depth < 1) throw InputError("SearchTree: horizon must be at least 1");
  if (actions_.size() < 1) throw InputError("SearchTree: empty action set");
  num_joint_actions_ = int_pow(actions_.size(), static_cast<int>(root_positions.size()));
  TreeNode root;
  root.positions = std::move(root_positions);
  root.edges.resize(static_cast<std::size_t>(num_joint_actions_));
  nodes_.push_back(std::move(root));
}

Position SearchTree::member_move(int joint_action, int member) const {
  int code = joint_action;
  for (int i = 0; i < member; ++i) code /= actions_.size();
  return actions_.moves[static_cast<std::size_t>(code % actions_.size())];
}

int SearchTree::add_child(int parent, int joint_action) {
  TreeNode child;
  {
    const TreeNode& p = node(parent);
    child.positions.reserve(p.positions.size());
    for (std::size_t m = 0; m < p.positions.size(); ++m) {
      child.positions.push_back(p.positions[m] + member_move(joint_action, static_cast<int>(m)));
    }
    child.depth = p.depth + 1;
  }
  child.parent = parent;
  child.incoming_action = joint_action;
  if (child.depth < max_depth_) child.edges.resize(static_cast<std::size_t>(num_joint_actions_));
  const int index = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(child));
  node(parent).edges[static_cast<std::size_t>(joint_action)].child = index;
  return index;
}

std::vector<int> SearchTree::path_to(int n) const {
  std::vector<int> out;
  for (int s = n; s > 0; s = node(s).parent) out.push_back(s);
  return {out.rbegin(), out.rend()};
}

// ---------------------------------------------------------------------------

RewardModel::RewardModel(const MergedGpState& merged, const EigenBasis& basis, const NoiseModel& noise)
    : id_(next_model_id.fetch_add(1)),
      basis_(&basis),
      posterior_(merged_posterior(merged, basis, noise)),
      jitter_(1e-9 * basis.params().signal_variance) {}

void RewardModel::features(std::span<const Position> points, Eigen::Ref<Eigen::MatrixXd> phi,
                           Eigen::Ref<Eigen::MatrixXd> whitened) const {
  for (std::size_t i = 0; i < points.size(); ++i) {
    basis_->eval_into(points[i], phi.col(static_cast<Eigen::Index>(i)));
  }
  if (posterior_.is_prior()) return;
  whitened = phi;
  posterior_.whiten_features(whitened);
}

double RewardModel::reward(std::span<const Position> points, const Eigen::MatrixXd& phi,
                           const Eigen::MatrixXd& whitened) const {
  const auto t = static_cast<Eigen::Index>(points.size());
  if (t == 0) throw InputError("reward: empty trajectory");
  Eigen::MatrixXd cov(t, t);
  if (posterior_.is_prior()) {
    const Eigen::MatrixXd scaled = basis_->sqrt_eigenvalues().asDiagonal() * phi;
    cov.noalias() = scaled.transpose() * scaled;
  } else {
    cov.noalias() = posterior_.ridge() * whitened.transpose() * whitened;
  }
  cov = 0.5 * (cov + cov.transpose());
  cov.diagonal().array() += jitter_;
  double log_det = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() == Eigen::Success) {
    log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  } else {
    log_det = SpdFactor(cov).log_det();
  }
  return 0.5 * (static_cast<double>(t) * std::log(2.0 * M_PI * M_E) + log_det);
}

double RewardModel::reward(std::span<const Position> points) const {
  const auto t = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd phi(basis_->size(), t);
  Eigen::MatrixXd whitened(basis_->size(), t);
  features(points, phi, whitened);
  return reward(points, phi, whitened);
}

double informational_reward(const MergedGpState& merged, const EigenBasis& basis,
                            const NoiseModel& noise, const Trajectory& traj) {
  return RewardModel(merged, basis, noise).reward(traj.points);
}

// ---------------------------------------------------------------------------

std::optional<int> ducb_select(const TreeNode& node, std::int64_t tau, double gamma) {
  double total = 0.0;
  bool any_open = false;
  for (std::size_t a = 0; a < node.edges.size(); ++a) {
    const EdgeStats& e = node.edges[a];
    if (e.closed) continue;
    any_open = true;
    if (e.N <= 0.0) return static_cast<int>(a);
    total += e.N * std::pow(gamma, static_cast<double>(tau - e.tau));
  }
  if (!any_open) return std::nullopt;
  // Discounted totals can drop below 1; clamp the log so the bonus stays real.
  const double log_total = std::max(0.0, std::log(total));
  int best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < node.edges.size(); ++a) {
    const EdgeStats& e = node.edges[a];
    if (e.closed) continue;
    const double discounted = e.N * std::pow(gamma, static_cast<double>(tau - e.tau));
    const double score = e.W / e.N + std::sqrt(log_total / discounted);
    if (score > best_score) {
      best_score = score;
      best = static_cast<int>(a);
    }
  }
  return best;
}

int selection(SearchTree& tree, std::int64_t tau, double gamma) {
  int s = 0;
  while (true) {
    TreeNode& node = tree.node(s);
    if (node.depth >= tree.max_depth()) return s;
    for (const auto& e : node.edges) {
      if (!e.closed && e.child < 0) return s;
    }
    const auto a = ducb_select(node, tau, gamma);
    if (!a) {
      if (s == 0) throw PlanningInfeasibleError("every action from the current position is blocked");
      const int parent = node.parent;
      tree.node(parent).edges[static_cast<std::size_t>(node.incoming_action)].closed = true;
      s = parent;
      continue;
    }
    s = node.edges[static_cast<std::size_t>(*a)].child;
  }
}

std::pair<int, int> expand(SearchTree& tree, int leaf, Rng& rng) {
  std::vector<int> untried;
  const TreeNode& node = tree.node(leaf);
  for (std::size_t a = 0; a < node.edges.size(); ++a) {
    if (!node.edges[a].closed && node.edges[a].child < 0) untried.push_back(static_cast<int>(a));
  }
  if (untried.empty()) throw ContractError("expand: node has no untried open action");
  std::uniform_int_distribution<std::size_t> pick(0, untried.size() - 1);
  const int action = untried[pick(rng)];
  return {tree.add_child(leaf, action), action};
}

namespace {

void ensure_cache(TreeNode& node, const RewardModel& model) {
  if (node.cache_model == model.id()) return;
  const auto k = static_cast<Eigen::Index>(node.positions.size());
  node.phi.resize(model.basis().size(), k);
  node.whitened.resize(model.basis().size(), k);
  model.features(node.positions, node.phi, node.whitened);
  node.cache_model = model.id();
}

}  // namespace

double simulate(SearchTree& tree, int node, const RewardModel& model, const World& world, Rng& rng,
                std::vector<Position>* rollout) {
  const int k = tree.team_size();
  const int e = model.basis().size();
  const double resolution = tree.actions().step_length / 4.0;
  const auto path = tree.path_to(node);

  std::vector<Position> points;
  points.reserve(static_cast<std::size_t>(k * tree.max_depth()));
  for (int s : path) {
    const auto& pos = tree.node(s).positions;
    points.insert(points.end(), pos.begin(), pos.end());
  }
  const std::size_t n_path = points.size();

  std::vector<Position> current = tree.node(node).positions;
  std::vector<int> legal;
  for (int depth = tree.node(node).depth; depth < tree.max_depth(); ++depth) {
    std::vector<Position> next;
    next.reserve(current.size());
    bool stuck = false;
    for (const auto& pos : current) {
      legal.clear();
      for (int a = 0; a < tree.actions().size(); ++a) {
        const Position dest = pos + tree.actions().moves[static_cast<std::size_t>(a)];
        if (!segment_collides(world, pos, dest, resolution)) legal.push_back(a);
      }
      if (legal.empty()) {
        stuck = true;
        break;
      }
      std::uniform_int_distribution<std::size_t> pick(0, legal.size() - 1);
      next.push_back(pos + tree.actions().moves[static_cast<std::size_t>(legal[pick(rng)])]);
    }
    if (stuck) break;
    points.insert(points.end(), next.begin(), next.end());
    current = std::move(next);
  }
  if (rollout) rollout->assign(points.begin() + static_cast<std::ptrdiff_t>(n_path), points.end());
  if (points.empty()) return 0.0;

  const auto total = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd phi(e, total);
  Eigen::MatrixXd whitened(e, total);
  Eigen::Index col = 0;
  for (int s : path) {
    TreeNode& n = tree.node(s);
    ensure_cache(n, model);
    phi.middleCols(col, k) = n.phi;
    if (!model.posterior().is_prior()) whitened.middleCols(col, k) = n.whitened;
    col += k;
  }
  if (points.size() > n_path) {
    const auto rest = static_cast<Eigen::Index>(points.size() - n_path);
    model.features(std::span<const Position>(points).subspan(n_path), phi.middleCols(col, rest),
                   whitened.middleCols(col, rest));
  }
  return model.reward(points, phi, whitened);
}

void backprop(SearchTree& tree, int node, double reward, double gamma, std::int64_t tau) {
  for (int s = node; s > 0;) {
    const TreeNode& child = tree.node(s);
    const int parent = child.parent;
    EdgeStats& e = tree.node(parent).edges[static_cast<std::size_t>(child.incoming_action)];
    const double decay = std::pow(gamma, static_cast<double>(tau - e.tau));
    e.N = e.N * decay + 1.0;
    e.W = e.W * decay + reward;
    e.tau = tau;
    ++e.visits;
    s = parent;
  }
}

void tree_search(SearchTree& tree, std::int64_t tau, const RewardModel& model, const World& world,
                 int n_iteration, double gamma, Rng& rng) {
  const double resolution = tree.actions().step_length / 4.0;
  for (int it = 0; it < n_iteration; ++it) {
    const int leaf = selection(tree, tau, gamma);
    int node = leaf;
    if (tree.node(leaf).depth < tree.max_depth()) {
      const auto [child, action] = expand(tree, leaf, rng);
      bool blocked = false;
      const auto& from = tree.node(leaf).positions;
      const auto& to = tree.node(child).positions;
      for (std::size_t m = 0; m < from.size() && !blocked; ++m) {
        blocked = segment_collides(world, from[m], to[m], resolution);
      }
      if (blocked) {
        EdgeStats& e = tree.node(leaf).edges[static_cast<std::size_t>(action)];
        e.closed = true;
        e.child = -1;
        continue;
      }
      node = child;
    }
    backprop(tree, node, simulate(tree, node, model, world, rng), gamma, tau);
  }
}

std::vector<Trajectory> best_trajectories(const SearchTree& tree,
                                          std::span<const std::uint32_t> member_ids) {
  const int k = tree.team_size();
  if (member_ids.size() != static_cast<std::size_t>(k)) {
    throw InputError("best_trajectories: one id per team member required");
  }
  std::vector<Trajectory> out(static_cast<std::size_t>(k));
  for (int m = 0; m < k; ++m) out[static_cast<std::size_t>(m)].agent_id = member_ids[static_cast<std::size_t>(m)];
  int s = 0;
  while (true) {
    const TreeNode& node = tree.node(s);
    int best = -1;
    double best_value = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < node.edges.size(); ++a) {
      const EdgeStats& e = node.edges[a];
      if (e.closed || e.child < 0 || e.N <= 0.0) continue;
      const double value = e.W / e.N;
      if (value > best_value) {
        best_value = value;
        best = static_cast<int>(a);
      }
    }
    if (best < 0) break;
    s = node.edges[static_cast<std::size_t>(best)].child;
    for (int m = 0; m < k; ++m) {
      out[static_cast<std::size_t>(m)].points.push_back(tree.node(s).positions[static_cast<std::size_t>(m)]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

TreePlanner::TreePlanner(std::vector<std::uint32_t> member_ids, PlannerConfig config,
                         ActionSpace actions, const EigenBasis& basis, NoiseModel noise,
                         const World& world)
    : ids_(std::move(member_ids)),
      config_(config),
      actions_(std::move(actions)),
      basis_(&basis),
      noise_(noise),
      world_(&world) {
  if (config_.horizon < 1) throw InputError("planner horizon must be at least 1");
  if (config_.n_iteration < 1) throw InputError("planner n_iteration must be at least 1");
  if (config_.n_search < 1) throw InputError("planner n_search must be at least 1");
  if (!(config_.gamma > 0.0 && config_.gamma <= 1.0)) throw InputError("planner gamma must lie in (0, 1]");
}

void TreePlanner::reset(std::vector<Position> root_positions) {
  if (root_positions.size() != ids_.size()) throw InputError("TreePlanner: one root position per member");
  tree_.emplace(std::move(root_positions), actions_, config_.horizon);
}

std::vector<Trajectory> TreePlanner::search_round(std::int64_t tau, const MergedGpState& merged, Rng& rng) {
  if (!tree_) throw ContractError("TreePlanner: reset() must precede search_round()");
  const RewardModel model(merged, *basis_, noise_);
  tree_search(*tree_, tau, model, *world_, config_.n_iteration, config_.gamma, rng);
  return best_trajectories(*tree_, ids_);
}

Trajectory plan_step(std::uint32_t agent_id, const Position& position, const GpState& gp_state,
                     std::vector<Trajectory> initial_neighbor_trajs, const TrajectoryExchange& exchange,
                     const PlannerConfig& config, const ActionSpace& actions, const EigenBasis& basis,
                     const NoiseModel& noise, const World& world, Rng& rng) {
  TreePlanner planner({agent_id}, config, actions, basis, noise, world);
  planner.reset({position});
  std::vector<Trajectory> neighbors = std::move(initial_neighbor_trajs);
  Trajectory best;
  for (int tau = 1; tau <= config.n_search; ++tau) {
    const MergedGpState merged = merge_trajectories(gp_state, neighbors, basis, config.merge_mode);
    best = planner.search_round(tau, merged, rng).front();
    if (exchange && tau < config.n_search) neighbors = exchange(tau, best);
  }
  if (best.points.empty()) throw PlanningInfeasibleError("no collision-free trajectory found");
  return best;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj, std::uint64_t round) {
  if (traj.points.size() > 0xFFFF) throw InputError("trajectory too long for the wire format");
  ByteWriter w;
  w.u32(traj.agent_id);
  w.u64(round);
  w.u16(static_cast<std::uint16_t>(traj.points.size()));
  for (const auto& p : traj.points) {
    for (Eigen::Index i = 0; i < p.size(); ++i) w.f64(p(i));
  }
  return w.take();
}

std::pair<Trajectory, std::uint64_t> decode_trajectory(std::span<const std::uint8_t> bytes, int dim) {
  if (dim < 1 || dim > 3) throw InputError("decode_trajectory: dimension must be 1, 2 or 3");
  ByteReader r(bytes);
  Trajectory traj;
  traj.agent_id = r.u32();
  const std::uint64_t round = r.u64();
  const std::uint16_t t = r.u16();
  if (r.remaining() != static_cast<std::size_t>(t) * static_cast<std::size_t>(dim) * 8) {
    throw InputError("decode_trajectory: payload size does not match header");
  }
  for (std::uint16_t i = 0; i < t; ++i) {
    Position p(dim);
    for (int d = 0; d < dim; ++d) p(d) = r.f64();
    traj.points.push_back(p);
  }
  return {std::move(traj), round};
}

}  // namespace dgp
