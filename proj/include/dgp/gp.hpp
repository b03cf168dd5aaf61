#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "dgp/common.hpp"
#include "dgp/kernel.hpp"

namespace dgp {

struct NoiseModel {
  double sigma_v_sq = 0.01;

  explicit NoiseModel(double variance = 0.01);
};

/// Per-agent sufficient statistic of the E-dimensional estimator:
/// alpha = running average of Phi Phi^T, beta = running average of Phi y,
/// m = samples taken, n = network size used by the regularizer.
struct GpState {
  Eigen::MatrixXd alpha;
  Eigen::VectorXd beta;
  std::uint64_t m = 0;
  std::uint64_t n = 1;

  static GpState zero(int num_features, std::uint64_t network_size);

  int size() const { return static_cast<int>(beta.size()); }
  friend bool operator==(const GpState& a, const GpState& b) {
    return a.m == b.m && a.n == b.n && a.alpha == b.alpha && a.beta == b.beta;
  }
};

/// IIR fusion of one sample: alpha <- (1-r) alpha + r Phi Phi^T,
/// beta <- (1-r) beta + r Phi y, m <- m + 1.
GpState gp_state_update(const GpState& state, const Eigen::VectorXd& phi, double y, double r);
GpState gp_state_update(const GpState& state, const EigenBasis& basis, const Position& x, double y,
                        double r);

/// Symmetric LDL^T factorization with escalating diagonal jitter
/// (1e-10 * trace/n, doubling, up to 1e-4 * trace/n). Throws NumericalError
/// when no jitter level yields positive pivots.
class SpdFactor {
 public:
  SpdFactor() = default;
  explicit SpdFactor(const Eigen::MatrixXd& matrix);

  Eigen::Index rows() const { return ldlt_.rows(); }
  double jitter() const { return jitter_; }
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const { return ldlt_.solve(rhs); }
  /// Returns W with W^T W = B^T S^-1 B for the factored S.
  Eigen::MatrixXd whiten(const Eigen::MatrixXd& b) const;
  void whiten_in_place(Eigen::Ref<Eigen::MatrixXd> b) const;
  double log_det() const;

 private:
  Eigen::LDLT<Eigen::MatrixXd> ldlt_;
  Eigen::VectorXd inv_sqrt_d_;
  double jitter_ = 0.0;
};

/// Posterior of the E-dimensional estimator for a given (alpha, beta) and
/// effective sample count c_n:
///   mean(x)     = Phi^T (alpha + s/c_n Lambda^-1)^-1 beta
///   variance(x) = k(x,x) - Phi^T (alpha + s/c_n Lambda^-1)^-1 alpha Lambda Phi
/// with s the noise variance. The solve is carried out on the equilibrated
/// system Lambda^1/2 alpha Lambda^1/2 + (s/c_n) I, which is the same linear
/// system with a bounded condition number. With c_n = 0 the estimator is the
/// prior (mean 0, variance k(x,x)).
class GpPosterior {
 public:
  GpPosterior(const EigenBasis& basis, const NoiseModel& noise, const Eigen::MatrixXd& alpha,
              const Eigen::VectorXd* beta, double effective_count);
  GpPosterior(const GpState& state, const EigenBasis& basis, const NoiseModel& noise);

  bool is_prior() const { return prior_; }
  const EigenBasis& basis() const { return *basis_; }
  /// s / c_n; zero for the prior.
  double ridge() const { return ridge_; }

  double mean(const Position& x) const;
  double mean_from_features(const Eigen::VectorXd& phi) const;
  /// Mean-field weights w with mean(x) = Phi(x)^T w.
  const Eigen::VectorXd& mean_weights() const { return mean_weights_; }

  double variance(const Position& x) const;
  double variance_unclamped(const Position& x) const;

  /// Whitened features W = L^-1 Lambda^1/2 Phi so the data-dependent part of
  /// the covariance is ridge * W^T W.
  void whiten_features(Eigen::Ref<Eigen::MatrixXd> phi_in_out) const;

  enum class Prior { kExact, kTruncated };
  /// Joint covariance over `points`, symmetrized. The prior block is the
  /// exact kernel or its E-term truncation; with the truncated block the
  /// result reduces to ridge * W^T W (prior: Phi^T Lambda Phi).
  Eigen::MatrixXd covariance(const std::vector<Position>& points, Prior prior = Prior::kExact) const;

 private:
  const EigenBasis* basis_;
  bool prior_ = true;
  double ridge_ = 0.0;
  SpdFactor factor_;
  Eigen::VectorXd mean_weights_;
};

double posterior_mean(const GpState& state, const EigenBasis& basis, const NoiseModel& noise,
                      const Position& x);
double posterior_variance(const GpState& state, const EigenBasis& basis, const NoiseModel& noise,
                          const Position& x);

/// Neighbor-trajectory weighting in merge_trajectories.
enum class MergeMode {
  kAsPrinted,   // second coefficient n(X) / (mn + n(X))
  kConsistent,  // second coefficient 1 / (mn + n(X))
};

/// Ordered predicted sensing positions of one agent.
struct Trajectory {
  std::uint32_t agent_id = 0;
  std::vector<Position> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Temporary GP state with neighbors' predicted sensing points folded in.
struct MergedGpState {
  Eigen::MatrixXd alpha_hat;
  double effective_count = 0.0;
  std::reference_wrapper<const GpState> base;
  std::size_t merged_points = 0;
};

MergedGpState merge_trajectories(const GpState& state, std::span<const Trajectory> neighbor_trajs,
                                 const EigenBasis& basis, MergeMode mode);

GpPosterior merged_posterior(const MergedGpState& merged, const EigenBasis& basis,
                             const NoiseModel& noise);

/// T x T covariance of the trajectory-merged estimator at `points`, with the
/// truncated kernel as prior block.
Eigen::MatrixXd merged_variance(const MergedGpState& merged, const EigenBasis& basis,
                                const NoiseModel& noise, const std::vector<Position>& points);

// Wire format: {m u64, n u64, alpha E*E row-major f64, beta E f64}, little-endian.
std::vector<std::uint8_t> encode_gp_state(const GpState& state);
GpState decode_gp_state(std::span<const std::uint8_t> bytes, int num_features);

// Checkpoint: 16-byte header {"DGPS", version u32, E u32, reserved u32} + wire record.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const GpState& state, const std::filesystem::path& path);
GpState load_checkpoint(const std::filesystem::path& path);

}  // namespace dgp
