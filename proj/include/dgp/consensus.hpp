#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "dgp/common.hpp"
#include "dgp/gp.hpp"
#include "dgp/rng.hpp"

namespace dgp {

/// Range-limited communication graph: i and j are adjacent iff
/// ||x_i - x_j|| < d_comm and i != j.
struct CommGraph {
  int n = 0;
  double d_comm = 0.0;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> adjacency;

  int degree(int i) const;
  std::vector<int> neighbors(int i) const;
  /// Component label per node, labels numbered from 0 in order of first node.
  std::vector<int> components() const;
  bool connected() const;
};

CommGraph build_comm_graph(std::span<const Position> positions, double d_comm);

/// Doubly stochastic mixing matrix.
struct WeightMatrix {
  Eigen::MatrixXd w;
};

/// Metropolis-Hastings weights: 1 / (1 + max(deg_i, deg_j)) on edges,
/// remaining mass on the diagonal.
WeightMatrix metropolis_weights(const CommGraph& graph);

/// One synchronous averaging round: alpha_i' = sum_j W_ij alpha_j, same for beta.
std::vector<GpState> consensus_round(std::span<const GpState> states, const WeightMatrix& weights);

/// Per-round message-loss model. Each directed message j -> i is dropped
/// with probability drop_prob; the receiver rescales the surviving entries of
/// its weight row to sum to one. Returns the weights actually applied.
WeightMatrix apply_link_drops(const WeightMatrix& weights, double drop_prob, Rng& rng);

struct ConsensusResult {
  std::vector<GpState> states;
  /// Entry r is max_i ||(alpha_i, beta_i) - mean||_F after r rounds (entry 0 = input).
  std::vector<double> disagreement;
  /// Messages delivered (one per directed neighbor link per round).
  std::uint64_t messages = 0;
};

ConsensusResult run_consensus(std::span<const GpState> states, const WeightMatrix& weights,
                              int rounds);
/// Lossy variant; drop_prob = 0 reproduces run_consensus exactly.
ConsensusResult run_consensus(std::span<const GpState> states, const WeightMatrix& weights,
                              int rounds, double drop_prob, Rng& rng);

/// max_i Frobenius distance of (alpha_i, beta_i) from the arithmetic mean.
double max_disagreement(std::span<const GpState> states);

/// Wire payload: GpState record + sender id u32 + round index u64.
struct ConsensusMessage {
  std::uint32_t sender = 0;
  std::uint64_t round = 0;
  GpState state;
};
std::vector<std::uint8_t> encode_message(const ConsensusMessage& msg);
ConsensusMessage decode_message(std::span<const std::uint8_t> bytes, int num_features);

}  // namespace dgp
