#include "dgp/world.hpp"

#include <cmath>
#include <sstream>
#include <string>

namespace dgp {

ActionSpace ActionSpace::make(std::string_view name, int dim, double step_length) {
  if (dim < 1 || dim > 3) throw InputError("action space dimension must be 1, 2 or 3");
  if (!(step_length > 0.0)) throw InputError("step length must be positive");
  bool hold = false;
  constexpr std::string_view kHold = "+hold";
  if (name.size() > kHold.size() && name.substr(name.size() - kHold.size()) == kHold) {
    hold = true;
    name = name.substr(0, name.size() - kHold.size());
  }
  ActionSpace space;
  space.step_length = step_length;
  if (name == "axis") {
    for (int k = 0; k < dim; ++k) {
      for (double sign : {1.0, -1.0}) {
        Position p = Position::Zero(dim);
        p(k) = sign * step_length;
        space.moves.push_back(p);
      }
    }
  } else if (name == "compass8") {
    // Counter-clockwise from east in 2D; lexicographic sign patterns otherwise.
    if (dim == 2) {
      for (int i = 0; i < 8; ++i) {
        const double angle = i * M_PI / 4.0;
        Position p(2);
        p << std::cos(angle), std::sin(angle);
        // Snap round-off so axis moves are exact.
        for (int k = 0; k < 2; ++k) {
          if (std::abs(p(k)) < 1e-15) p(k) = 0.0;
        }
        space.moves.push_back(step_length * p);
      }
    } else {
      const int total = (dim == 1) ? 3 : 27;
      for (int code = 0; code < total; ++code) {
        Position p(dim);
        int c = code;
        for (int k = 0; k < dim; ++k) {
          p(k) = static_cast<double>(c % 3) - 1.0;
          c /= 3;
        }
        if (p.squaredNorm() == 0.0) continue;
        space.moves.push_back(step_length * p / p.norm());
      }
    }
  } else {
    throw InputError("unknown action set: " + std::string(name));
  }
  if (hold) space.moves.push_back(Position::Zero(dim));
  return space;
}

int ActionSpace::find(const Position& displacement) const {
  for (int i = 0; i < size(); ++i) {
    if (moves[i].size() == displacement.size() && (moves[i] - displacement).norm() <= 1e-9) return i;
  }
  return -1;
}

bool World::in_bounds(const Position& x) const {
  return x.size() == lo.size() && (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
}

std::vector<Position> World::positions() const {
  std::vector<Position> out;
  out.reserve(agents.size());
  for (const auto& a : agents) out.push_back(a.position);
  return out;
}

bool collision_check(const World& world, const Position& x) {
  if (!x.allFinite() || !world.in_bounds(x)) return true;
  for (const auto& box : world.obstacles) {
    if (box.contains(x)) return true;
  }
  return false;
}

bool segment_collides(const World& world, const Position& a, const Position& b, double resolution) {
  const double length = (b - a).norm();
  const int samples = std::max(1, static_cast<int>(std::ceil(length / resolution - 1e-12)));
  for (int s = 1; s <= samples; ++s) {
    const double t = static_cast<double>(s) / samples;
    const Position p = (s == samples) ? b : Position(a + t * (b - a));
    if (collision_check(world, p)) return true;
  }
  return false;
}

void step_world(World& world, std::span<const Position> displacements, const ActionSpace& actions) {
  if (displacements.size() != world.agents.size()) {
    throw ContractError("step_world: one displacement per agent required");
  }
  std::vector<Position> next;
  next.reserve(world.agents.size());
  for (std::size_t i = 0; i < world.agents.size(); ++i) {
    const auto& agent = world.agents[i];
    const Position& d = displacements[i];
    if (actions.find(d) < 0) {
      std::ostringstream os;
      os << "step_world: agent " << agent.id << " displacement is not a legal action";
      throw ContractError(os.str());
    }
    const Position dest = agent.position + d;
    if (segment_collides(world, agent.position, dest, actions.step_length / 4.0)) {
      std::ostringstream os;
      os << "step_world: agent " << agent.id << " would enter an obstacle or leave the domain";
      throw ContractError(os.str());
    }
    next.push_back(dest);
  }
  for (std::size_t i = 0; i < world.agents.size(); ++i) world.agents[i].position = next[i];
  ++world.k;
}

}  // namespace dgp
