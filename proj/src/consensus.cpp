#include "dgp/consensus.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dgp/bytes.hpp"

namespace dgp {

int CommGraph::degree(int i) const { return static_cast<int>(adjacency.row(i).count()); }

std::vector<int> CommGraph::neighbors(int i) const {
  std::vector<int> out;
  for (int j = 0; j < n; ++j) {
    if (adjacency(i, j)) out.push_back(j);
  }
  return out;
}

std::vector<int> CommGraph::components() const {
  std::vector<int> label(static_cast<std::size_t>(n), -1);
  int next = 0;
  std::vector<int> stack;
  for (int s = 0; s < n; ++s) {
    if (label[s] >= 0) continue;
    label[s] = next;
    stack.push_back(s);
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (int v = 0; v < n; ++v) {
        if (adjacency(u, v) && label[v] < 0) {
          label[v] = next;
          stack.push_back(v);
        }
      }
    }
    ++next;
  }
  return label;
}

bool CommGraph::connected() const {
  const auto c = components();
  return std::all_of(c.begin(), c.end(), [](int l) { return l == 0; });
}

CommGraph build_comm_graph(std::span<const Position> positions, double d_comm) {
  if (!(d_comm > 0.0)) throw InputError("communication range must be positive");
  CommGraph g;
  g.n = static_cast<int>(positions.size());
  g.d_comm = d_comm;
  g.adjacency.setConstant(g.n, g.n, false);
  for (int i = 0; i < g.n; ++i) {
    for (int j = i + 1; j < g.n; ++j) {
      const bool linked = (positions[i] - positions[j]).norm() < d_comm;
      g.adjacency(i, j) = linked;
      g.adjacency(j, i) = linked;
    }
  }
  return g;
}

WeightMatrix metropolis_weights(const CommGraph& graph) {
  WeightMatrix out;
  out.w = Eigen::MatrixXd::Zero(graph.n, graph.n);
  std::vector<int> deg(static_cast<std::size_t>(graph.n));
  for (int i = 0; i < graph.n; ++i) deg[i] = graph.degree(i);
  for (int i = 0; i < graph.n; ++i) {
    double off = 0.0;
    for (int j = 0; j < graph.n; ++j) {
      if (i == j || !graph.adjacency(i, j)) continue;
      const double wij = 1.0 / (1.0 + std::max(deg[i], deg[j]));
      out.w(i, j) = wij;
      off += wij;
    }
    out.w(i, i) = 1.0 - off;
  }
  return out;
}

namespace {

void check_states(std::span<const GpState> states, const WeightMatrix& weights) {
  if (states.empty()) return;
  const int e = states.front().size();
  for (const auto& s : states) {
    if (s.size() != e || s.alpha.rows() != e || s.alpha.cols() != e) {
      throw InputError("consensus: states have mismatched feature dimension E");
    }
  }
  if (weights.w.rows() != static_cast<Eigen::Index>(states.size()) ||
      weights.w.cols() != static_cast<Eigen::Index>(states.size())) {
    throw InputError("consensus: weight matrix size does not match the number of states");
  }
}

// Directed messages delivered under `w`: every nonzero off-diagonal entry.
std::uint64_t count_links(const WeightMatrix& weights) {
  std::uint64_t count = 0;
  const auto n = weights.w.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i != j && weights.w(i, j) != 0.0) ++count;
    }
  }
  return count;
}

}  // namespace

std::vector<GpState> consensus_round(std::span<const GpState> states, const WeightMatrix& weights) {
  check_states(states, weights);
  const int n = static_cast<int>(states.size());
  std::vector<GpState> out;
  out.reserve(states.size());
  for (int i = 0; i < n; ++i) {
    GpState next = states[i];
    next.alpha.setZero();
    next.beta.setZero();
    // Fixed summation order (by sender id) keeps results bit-reproducible.
    for (int j = 0; j < n; ++j) {
      const double wij = weights.w(i, j);
      if (wij == 0.0) continue;
      next.alpha.noalias() += wij * states[j].alpha;
      next.beta.noalias() += wij * states[j].beta;
    }
    out.push_back(std::move(next));
  }
  return out;
}

WeightMatrix apply_link_drops(const WeightMatrix& weights, double drop_prob, Rng& rng) {
  if (drop_prob <= 0.0) return weights;
  std::bernoulli_distribution drop(drop_prob);
  WeightMatrix out = weights;
  const auto n = weights.w.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i != j && weights.w(i, j) != 0.0 && drop(rng)) out.w(i, j) = 0.0;
    }
    const double total = out.w.row(i).sum();
    out.w.row(i) /= total;
  }
  return out;
}

double max_disagreement(std::span<const GpState> states) {
  if (states.empty()) return 0.0;
  Eigen::MatrixXd mean_alpha = Eigen::MatrixXd::Zero(states[0].alpha.rows(), states[0].alpha.cols());
  Eigen::VectorXd mean_beta = Eigen::VectorXd::Zero(states[0].beta.size());
  for (const auto& s : states) {
    mean_alpha += s.alpha;
    mean_beta += s.beta;
  }
  mean_alpha /= static_cast<double>(states.size());
  mean_beta /= static_cast<double>(states.size());
  double worst = 0.0;
  for (const auto& s : states) {
    const double d = std::sqrt((s.alpha - mean_alpha).squaredNorm() + (s.beta - mean_beta).squaredNorm());
    worst = std::max(worst, d);
  }
  return worst;
}

ConsensusResult run_consensus(std::span<const GpState> states, const WeightMatrix& weights,
                              int rounds, double drop_prob, Rng& rng) {
  if (rounds < 0) throw InputError("run_consensus: rounds must be non-negative");
  check_states(states, weights);
  ConsensusResult res;
  res.states.assign(states.begin(), states.end());
  res.disagreement.push_back(max_disagreement(res.states));
  for (int r = 0; r < rounds; ++r) {
    const WeightMatrix applied = apply_link_drops(weights, drop_prob, rng);
    res.states = consensus_round(res.states, applied);
    res.messages += count_links(applied);
    res.disagreement.push_back(max_disagreement(res.states));
  }
  return res;
}

ConsensusResult run_consensus(std::span<const GpState> states, const WeightMatrix& weights,
                              int rounds) {
  Rng unused(0);
  return run_consensus(states, weights, rounds, 0.0, unused);
}

std::vector<std::uint8_t> encode_message(const ConsensusMessage& msg) {
  ByteWriter w;
  w.raw(encode_gp_state(msg.state));
  w.u32(msg.sender);
  w.u64(msg.round);
  return w.take();
}

ConsensusMessage decode_message(std::span<const std::uint8_t> bytes, int num_features) {
  if (bytes.size() < 12) throw InputError("consensus message too short");
  const std::size_t state_bytes = bytes.size() - 12;
  ConsensusMessage msg;
  msg.state = decode_gp_state(bytes.first(state_bytes), num_features);
  ByteReader r(bytes.subspan(state_bytes));
  msg.sender = r.u32();
  msg.round = r.u64();
  return msg;
}

}  // namespace dgp
