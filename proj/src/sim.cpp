#include "dgp/sim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

namespace dgp {

namespace {

void check_in_bounds(const EnvironmentField& env, const Position& x) {
  if (x.size() != env.lo.size()) throw InputError("field_eval: position dimension does not match the domain");
  if (!x.allFinite() || (x.array() < env.lo.array()).any() || (x.array() > env.hi.array()).any()) {
    std::ostringstream os;
    os << "field_eval: position (" << x.transpose() << ") outside the domain";
    throw InputError(os.str());
  }
}

double idw(const StationGrid& grid, Eigen::Index snapshot, const Position& x) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t s = 0; s < grid.stations.size(); ++s) {
    const double v = grid.values(snapshot, static_cast<Eigen::Index>(s));
    if (std::isnan(v)) continue;
    const double d2 = (grid.stations[s] - x).squaredNorm();
    if (d2 == 0.0) return v;
    num += v / d2;
    den += 1.0 / d2;
  }
  if (den == 0.0) throw DataError("dataset snapshot has no valid station values");
  return num / den;
}

double dataset_eval(const StationGrid& grid, const Position& x, double t) {
  const auto& times = grid.times;
  if (times.empty()) throw DataError("dataset field has no snapshots");
  if (t <= times.front()) return idw(grid, 0, x);
  if (t >= times.back()) return idw(grid, static_cast<Eigen::Index>(times.size() - 1), x);
  const auto upper = std::upper_bound(times.begin(), times.end(), t);
  const auto hi = static_cast<Eigen::Index>(upper - times.begin());
  const Eigen::Index lo = hi - 1;
  const double w = (t - times[lo]) / (times[hi] - times[lo]);
  return (1.0 - w) * idw(grid, lo, x) + w * idw(grid, hi, x);
}

}  // namespace

double field_eval(const EnvironmentField& env, const Position& x, double t) {
  check_in_bounds(env, x);
  if (env.kind == FieldKind::kDataset) return dataset_eval(env.stations, x, t);
  const double time = (env.kind == FieldKind::kSyntheticDynamic) ? t : 0.0;
  double value = 0.0;
  for (const auto& b : env.bumps) {
    const double d2 = (x - b.center - time * b.velocity).squaredNorm();
    value += b.weight * std::exp(-d2 / (2.0 * b.width * b.width));
  }
  return value;
}

double measure(const EnvironmentField& env, const Position& x, double t, const NoiseModel& noise, Rng& rng) {
  const double f = field_eval(env, x, t);
  std::normal_distribution<double> v(0.0, std::sqrt(noise.sigma_v_sq));
  return f + v(rng);
}

EnvironmentField random_bump_field(FieldKind kind, const Position& lo, const Position& hi,
                                   const BumpFieldOptions& opt, Rng& rng) {
  if (kind == FieldKind::kDataset) throw InputError("random_bump_field: dataset kind has no bumps");
  if (opt.min_bumps < 0 || opt.max_bumps < opt.min_bumps) throw InputError("random_bump_field: bad bump count range");
  const int dim = static_cast<int>(lo.size());
  EnvironmentField env;
  env.kind = kind;
  env.lo = lo;
  env.hi = hi;

  Position velocity = Position::Zero(dim);
  double upstream = 0.0;
  if (kind == FieldKind::kSyntheticDynamic && opt.drift_speed > 0.0) {
    std::normal_distribution<double> g(0.0, 1.0);
    Position dir(dim);
    do {
      for (int k = 0; k < dim; ++k) dir(k) = g(rng);
    } while (dir.norm() < 1e-6);
    velocity = opt.drift_speed * dir / dir.norm();
    upstream = opt.drift_speed * opt.horizon;
  }

  std::uniform_int_distribution<int> count_dist(opt.min_bumps, opt.max_bumps);
  int count = count_dist(rng);
  if (upstream > 0.0) {
    // Keep the in-domain bump density constant over the sweep.
    const Position span = hi - lo;
    const double extent = (span.array() * (velocity / opt.drift_speed).array().abs()).sum();
    count = static_cast<int>(std::lround(count * (extent + upstream) / extent));
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int b = 0; b < count; ++b) {
    Bump bump;
    bump.center = Position(dim);
    for (int k = 0; k < dim; ++k) bump.center(k) = lo(k) + unit(rng) * (hi(k) - lo(k));
    const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
    bump.weight = sign * (0.5 + unit(rng)) * opt.signal_std;
    bump.width = (0.8 + 0.8 * unit(rng)) * opt.length_scale;
    bump.velocity = velocity;
    if (upstream > 0.0) bump.center -= velocity * (opt.horizon * unit(rng));
    env.bumps.push_back(std::move(bump));
  }
  return env;
}

std::vector<Position> make_grid(const Position& lo, const Position& hi, int resolution) {
  if (resolution < 2) throw InputError("evaluation grid needs at least 2 points per axis");
  const int dim = static_cast<int>(lo.size());
  std::size_t total = 1;
  for (int k = 0; k < dim; ++k) total *= static_cast<std::size_t>(resolution);
  std::vector<Position> out;
  out.reserve(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    Position p(dim);
    std::size_t rem = idx;
    for (int k = 0; k < dim; ++k) {
      const auto i = static_cast<double>(rem % static_cast<std::size_t>(resolution));
      rem /= static_cast<std::size_t>(resolution);
      p(k) = (i == resolution - 1) ? hi(k) : lo(k) + (hi(k) - lo(k)) * i / (resolution - 1);
    }
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------

GridEvaluator::GridEvaluator(const EigenBasis& basis, const Position& lo, const Position& hi, int resolution)
    : basis_(&basis), points_(make_grid(lo, hi, resolution)), phi_(basis.eval_many(points_)) {}

Eigen::VectorXd GridEvaluator::mean_field(const GpState& state, const NoiseModel& noise) const {
  const GpPosterior post(state, *basis_, noise);
  if (post.is_prior()) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(points_.size()));
  return phi_.transpose() * post.mean_weights();
}

Eigen::VectorXd GridEvaluator::variance_field(const GpState& state, const NoiseModel& noise) const {
  const double prior = basis_->params().signal_variance;
  const GpPosterior post(state, *basis_, noise);
  const auto n = static_cast<Eigen::Index>(points_.size());
  if (post.is_prior()) return Eigen::VectorXd::Constant(n, prior);
  const Eigen::VectorXd truncated = (basis_->eigenvalues().asDiagonal() * phi_.cwiseAbs2()).colwise().sum();
  Eigen::MatrixXd w = phi_;
  post.whiten_features(w);
  const Eigen::VectorXd extra = post.ridge() * w.cwiseAbs2().colwise().sum().transpose();
  return (Eigen::VectorXd::Constant(n, prior) - truncated + extra).cwiseMax(0.0);
}

Eigen::VectorXd GridEvaluator::truth(const EnvironmentField& env, double t) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(points_.size()));
  for (std::size_t i = 0; i < points_.size(); ++i) out(static_cast<Eigen::Index>(i)) = field_eval(env, points_[i], t);
  return out;
}

MetricsRow evaluate_rmse(std::span<const GpState> states, const GridEvaluator& grid, const NoiseModel& noise,
                         const EnvironmentField& env, double t) {
  MetricsRow row;
  row.time_s = t;
  const Eigen::VectorXd truth = grid.truth(env, t);
  std::vector<Eigen::VectorXd> means;
  means.reserve(states.size());
  for (const auto& s : states) means.push_back(grid.mean_field(s, noise));
  const auto rms = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
  };
  for (std::size_t i = 0; i < means.size(); ++i) {
    row.rmse.push_back(rms(means[i], truth));
    row.disagreement_vs_agent0.push_back(rms(means[i], means[0]));
    row.consensus_residual.push_back(0.0);
    for (std::size_t j = 0; j < i; ++j) row.max_disagreement = std::max(row.max_disagreement, rms(means[i], means[j]));
  }
  return row;
}

MetricsRow evaluate_rmse(std::span<const GpState> states, const EigenBasis& basis, const NoiseModel& noise,
                         const EnvironmentField& env, double t, int grid_resolution) {
  const GridEvaluator grid(basis, env.lo, env.hi, grid_resolution);
  return evaluate_rmse(states, grid, noise, env, t);
}

// ---------------------------------------------------------------------------

void parallel_for(int count, int workers, const std::function<void(int)>& body) {
  if (workers <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex mu;
  int failed_index = count;
  std::exception_ptr failure;
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        // Report the lowest failing index so errors do not depend on scheduling.
        if (i < failed_index) {
          failed_index = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> threads;
  const int n = std::min(workers, count);
  threads.reserve(static_cast<std::size_t>(n));
  for (int w = 0; w < n; ++w) threads.emplace_back(worker);
  for (auto& th : threads) th.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<Position> random_start_positions(const World& world, int count, Rng& rng) {
  std::vector<std::uniform_real_distribution<double>> axes;
  for (int k = 0; k < world.dim(); ++k) axes.emplace_back(world.lo(k), world.hi(k));
  std::vector<Position> out;
  for (int i = 0; i < count; ++i) {
    Position p(world.dim());
    int attempts = 0;
    do {
      if (++attempts > 100000) throw InputError("no collision-free start position found");
      for (int k = 0; k < world.dim(); ++k) p(k) = axes[static_cast<std::size_t>(k)](rng);
    } while (collision_check(world, p));
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------

Simulation::Simulation(World world, EnvironmentField env, const EigenBasis& basis, NoiseModel noise,
                       SimConfig config)
    : world_(std::move(world)),
      env_(std::move(env)),
      basis_(&basis),
      noise_(noise),
      config_(std::move(config)),
      grid_(basis, world_.lo, world_.hi, config_.eval_grid),
      drop_rng_(make_stream(config_.seed, "drop")) {
  const int n = static_cast<int>(world_.agents.size());
  if (n < 1) throw InputError("simulation needs at least one agent");
  if (world_.dim() != basis.dim()) throw InputError("world and kernel dimensions differ");
  if (config_.replan_interval < 1) throw InputError("replan_interval must be at least 1");
  if (config_.rounds_per_step < 0) throw InputError("rounds_per_step must be non-negative");
  if (!(config_.drop_prob >= 0.0 && config_.drop_prob < 1.0)) throw InputError("drop_prob must lie in [0, 1)");
  if (config_.r_mode == ForgettingMode::kFixed && !(config_.r_value > 0.0 && config_.r_value <= 1.0)) {
    throw InputError("fixed forgetting factor must lie in (0, 1]");
  }
  if (config_.mode == RunMode::kCentralized && n > 3) {
    throw CapacityError("centralized joint-action planning supports at most 3 agents");
  }
  if (config_.centralized_iteration_factor < 1) throw InputError("centralized_iteration_factor must be positive");
  for (const auto& a : world_.agents) {
    if (collision_check(world_, a.position)) {
      throw InputError("agent " + std::to_string(a.id) + " starts in collision");
    }
  }
  actions_ = ActionSpace::make(config_.action_set, world_.dim(), world_.agents.front().speed * world_.dt);

  const std::uint64_t default_n = (config_.mode == RunMode::kIndependent) ? 1 : static_cast<std::uint64_t>(n);
  const std::uint64_t network_n = config_.network_size.value_or(default_n);
  states_.assign(static_cast<std::size_t>(n), GpState::zero(basis.size(), network_n));
  for (const auto& a : world_.agents) {
    measure_rngs_.push_back(make_stream(config_.seed, "measure", a.id));
    planner_rngs_.push_back(make_stream(config_.seed, "planner", a.id));
  }
  plans_.resize(static_cast<std::size_t>(n));
  plan_cursor_.assign(static_cast<std::size_t>(n), 0);
  residual_.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) plans_[static_cast<std::size_t>(i)].agent_id = world_.agents[static_cast<std::size_t>(i)].id;
}

MetricsRow Simulation::metrics() const {
  MetricsRow row = evaluate_rmse(states_, grid_, noise_, env_, world_.time());
  row.step = world_.k;
  row.consensus_residual = residual_;
  return row;
}

double Simulation::forgetting(std::uint64_t m) const {
  if (config_.r_mode == ForgettingMode::kFixed) return config_.r_value;
  return 1.0 / static_cast<double>(m + 1);
}

void Simulation::fuse_measurements() {
  const int n = static_cast<int>(states_.size());
  const double t = world_.time();
  std::vector<GpState> updated(states_.size());
  const bool pooled = config_.mode == RunMode::kCentralized;
  parallel_for(n, config_.workers, [&](int i) {
    const auto& agent = world_.agents[static_cast<std::size_t>(i)];
    try {
      const double y = measure(env_, agent.position, t, noise_, measure_rngs_[static_cast<std::size_t>(i)]);
      const GpState& base = pooled ? states_.front() : states_[static_cast<std::size_t>(i)];
      updated[static_cast<std::size_t>(i)] = gp_state_update(base, *basis_, agent.position, y, forgetting(base.m));
    } catch (const Error& e) {
      rethrow_with_context(e, "agent " + std::to_string(agent.id));
    }
  });
  if (!pooled) {
    states_ = std::move(updated);
    return;
  }
  // The central server holds the exact network average of the per-agent updates.
  GpState avg = updated.front();
  for (int i = 1; i < n; ++i) {
    avg.alpha += updated[static_cast<std::size_t>(i)].alpha;
    avg.beta += updated[static_cast<std::size_t>(i)].beta;
  }
  avg.alpha /= static_cast<double>(n);
  avg.beta /= static_cast<double>(n);
  std::fill(states_.begin(), states_.end(), avg);
}

void Simulation::record_plan(const Trajectory& traj) {
  planned_points_ += traj.points.size();
  for (const auto& p : traj.points) {
    if (collision_check(world_, p)) ++planned_collisions_;
  }
}

void Simulation::plan_distributed(std::vector<bool>& replan) {
  const int n = static_cast<int>(states_.size());
  const bool share = config_.mode == RunMode::kDistributed;

  // Neighbor plans from the previous step, minus the points already executed.
  const auto remaining = [&](int j) {
    const auto& plan = plans_[static_cast<std::size_t>(j)];
    Trajectory out;
    out.agent_id = plan.agent_id;
    const std::size_t c = std::min(plan_cursor_[static_cast<std::size_t>(j)], plan.points.size());
    out.points.assign(plan.points.begin() + static_cast<std::ptrdiff_t>(c), plan.points.end());
    return out;
  };
  std::vector<std::vector<Trajectory>> neighbors(static_cast<std::size_t>(n));
  if (share) {
    for (int i = 0; i < n; ++i) {
      for (int j : graph_.neighbors(i)) {
        Trajectory r = remaining(j);
        ++cross_reads_;
        if (!r.points.empty()) neighbors[static_cast<std::size_t>(i)].push_back(std::move(r));
      }
    }
  }

  std::vector<std::optional<TreePlanner>> planners(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (!replan[static_cast<std::size_t>(i)]) continue;
    const auto& agent = world_.agents[static_cast<std::size_t>(i)];
    planners[static_cast<std::size_t>(i)].emplace(std::vector<std::uint32_t>{agent.id}, config_.planner, actions_,
                                                  *basis_, noise_, world_);
    planners[static_cast<std::size_t>(i)]->reset({agent.position});
  }

  std::vector<Trajectory> best(static_cast<std::size_t>(n));
  for (int tau = 1; tau <= config_.planner.n_search; ++tau) {
    parallel_for(n, config_.workers, [&](int i) {
      const auto idx = static_cast<std::size_t>(i);
      if (!replan[idx]) return;
      try {
        const MergedGpState merged =
            merge_trajectories(states_[idx], neighbors[idx], *basis_, config_.planner.merge_mode);
        best[idx] = planners[idx]->search_round(tau, merged, planner_rngs_[idx]).front();
      } catch (const Error& e) {
        rethrow_with_context(e, "agent " + std::to_string(world_.agents[idx].id));
      }
    });
    if (!share || tau == config_.planner.n_search) continue;
    // Barrier: every agent sees its neighbors' round-tau trajectories.
    for (int i = 0; i < n; ++i) {
      auto& list = neighbors[static_cast<std::size_t>(i)];
      list.clear();
      for (int j : graph_.neighbors(i)) {
        ++cross_reads_;
        Trajectory t = replan[static_cast<std::size_t>(j)] ? best[static_cast<std::size_t>(j)] : remaining(j);
        if (!t.points.empty()) list.push_back(std::move(t));
      }
    }
  }

  for (int i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    if (!replan[idx]) continue;
    if (best[idx].points.empty()) {
      throw PlanningInfeasibleError("agent " + std::to_string(world_.agents[idx].id) +
                                    ": no collision-free trajectory found");
    }
    record_plan(best[idx]);
    plans_[idx] = std::move(best[idx]);
    plan_cursor_[idx] = 0;
  }
}

void Simulation::plan_centralized() {
  const int n = static_cast<int>(states_.size());
  std::vector<std::uint32_t> ids;
  std::vector<Position> roots;
  for (const auto& a : world_.agents) {
    ids.push_back(a.id);
    roots.push_back(a.position);
  }
  PlannerConfig cfg = config_.planner;
  cfg.n_iteration *= config_.centralized_iteration_factor;
  TreePlanner planner(ids, cfg, actions_, *basis_, noise_, world_);
  planner.reset(roots);
  const MergedGpState merged = merge_trajectories(states_.front(), {}, *basis_, cfg.merge_mode);
  std::vector<Trajectory> best;
  for (int tau = 1; tau <= cfg.n_search; ++tau) best = planner.search_round(tau, merged, planner_rngs_.front());
  for (int i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    if (best[idx].points.empty()) throw PlanningInfeasibleError("centralized planner found no joint trajectory");
    record_plan(best[idx]);
    plans_[idx] = std::move(best[idx]);
    plan_cursor_[idx] = 0;
  }
}

void Simulation::sense_and_share() {
  const int n = static_cast<int>(states_.size());
  fuse_measurements();

  if (config_.mode == RunMode::kDistributed) {
    graph_ = build_comm_graph(world_.positions(), world_.d_comm);
    if (config_.rounds_per_step > 0) {
      const WeightMatrix w = metropolis_weights(graph_);
      ConsensusResult res = run_consensus(states_, w, config_.rounds_per_step, config_.drop_prob, drop_rng_);
      cross_reads_ += res.messages;
      states_ = std::move(res.states);
    }
  }
  if (config_.mode != RunMode::kIndependent && n > 1) {
    Eigen::MatrixXd mean_alpha = Eigen::MatrixXd::Zero(basis_->size(), basis_->size());
    Eigen::VectorXd mean_beta = Eigen::VectorXd::Zero(basis_->size());
    for (const auto& s : states_) {
      mean_alpha += s.alpha;
      mean_beta += s.beta;
    }
    mean_alpha /= static_cast<double>(n);
    mean_beta /= static_cast<double>(n);
    for (int i = 0; i < n; ++i) {
      const auto& s = states_[static_cast<std::size_t>(i)];
      residual_[static_cast<std::size_t>(i)] =
          std::sqrt((s.alpha - mean_alpha).squaredNorm() + (s.beta - mean_beta).squaredNorm());
    }
  }
}

MetricsRow Simulation::run_timestep_scripted(std::span<const Position> next_positions) {
  if (next_positions.size() != world_.agents.size()) {
    throw InputError("scripted step needs one position per agent");
  }
  sense_and_share();
  for (std::size_t i = 0; i < next_positions.size(); ++i) {
    if (collision_check(world_, next_positions[i])) {
      throw ContractError("scripted position of agent " + std::to_string(world_.agents[i].id) + " is in collision");
    }
  }
  for (std::size_t i = 0; i < next_positions.size(); ++i) world_.agents[i].position = next_positions[i];
  ++world_.k;
  return metrics();
}

MetricsRow Simulation::run_timestep() {
  const int n = static_cast<int>(states_.size());
  sense_and_share();

  std::vector<bool> replan(static_cast<std::size_t>(n));
  bool any = false;
  for (int i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    replan[idx] = world_.k % config_.replan_interval == 0 || plan_cursor_[idx] >= plans_[idx].points.size();
    any = any || replan[idx];
  }
  if (config_.mode == RunMode::kCentralized) {
    if (any) plan_centralized();
  } else {
    plan_distributed(replan);
  }

  std::vector<Position> moves;
  moves.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    moves.push_back(plans_[idx].points[plan_cursor_[idx]] - world_.agents[idx].position);
    ++plan_cursor_[idx];
  }
  step_world(world_, moves, actions_);
  return metrics();
}

}  // namespace dgp
