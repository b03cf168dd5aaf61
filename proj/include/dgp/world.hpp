#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "dgp/common.hpp"

namespace dgp {

/// Closed axis-aligned box (rectangle in 2D).
struct Box {
  Position lo;
  Position hi;

  bool contains(const Position& x) const {
    return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
  }
};

/// Finite set of per-step displacements.
struct ActionSpace {
  std::vector<Position> moves;
  double step_length = 1.0;

  /// "axis"     : +-step along each axis (2d moves);
  /// "compass8" : all 3^d - 1 neighbor directions scaled to step_length
  ///              (the eight compass headings in 2D);
  /// suffix "+hold" adds the zero move.
  static ActionSpace make(std::string_view name, int dim, double step_length);

  int size() const { return static_cast<int>(moves.size()); }
  /// Index of the move equal to `displacement` (1e-9 tolerance), or -1.
  int find(const Position& displacement) const;
};

struct AgentPose {
  std::uint32_t id = 0;
  Position position;
  double speed = 1.0;
};

struct World {
  Position lo;
  Position hi;
  std::vector<Box> obstacles;
  std::vector<AgentPose> agents;
  double d_comm = 10.0;
  std::int64_t k = 0;
  double dt = 1.0;

  int dim() const { return static_cast<int>(lo.size()); }
  double time() const { return static_cast<double>(k) * dt; }
  bool in_bounds(const Position& x) const;
  std::vector<Position> positions() const;
};

/// True iff x lies inside an obstacle or outside the (closed) domain.
bool collision_check(const World& world, const Position& x);

/// Samples the straight segment a -> b at `resolution` spacing (endpoint
/// included, start excluded) and reports whether any sample collides.
bool segment_collides(const World& world, const Position& a, const Position& b, double resolution);

/// Advances every agent by its displacement and increments k. Each
/// displacement must be a move of `actions` and land on a collision-free
/// point; anything else is a planner contract violation (ContractError).
void step_world(World& world, std::span<const Position> displacements, const ActionSpace& actions);

}  // namespace dgp
