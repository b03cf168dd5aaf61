#pragma once

#include <array>
#include <vector>

#include <Eigen/Core>

#include "dgp/common.hpp"

namespace dgp {

/// Hyperparameters of the squared-exponential kernel
///   k(x1, x2) = signal_variance * exp(-0.5 (x1-x2)^T diag(length_scale)^-1 (x1-x2)).
/// `length_scale` holds the diagonal of the length-scale matrix (position units^2).
struct KernelParams {
  double signal_variance = 1.0;
  Eigen::VectorXd length_scale;

  KernelParams() = default;
  KernelParams(double signal_variance, Eigen::VectorXd length_scale);

  int dim() const { return static_cast<int>(length_scale.size()); }
  void validate() const;
};

double kernel_eval(const KernelParams& params, const Position& x1, const Position& x2);

/// Closed-form 1D eigensystem of the unit-variance SE kernel under the
/// Gaussian measure N(center, width^2).
///
///   lambda_n = sqrt(a^2 / (a^2 + delta^2 + eps^2)) * ratio^n,
///   ratio    = eps^2 / (a^2 + delta^2 + eps^2),
///   phi_n(x) = sqrt(beta / (2^n n!)) exp(-delta^2 u^2) H_n(a beta u),  u = x - center,
///
/// with eps^2 = 1/(2 l^2), a = 1/(sqrt(2) width), beta = (1 + (2 eps / a)^2)^(1/4),
/// delta^2 = a^2 (beta^2 - 1) / 2. The phi_n are orthonormal in L2 of the measure.
struct HermiteAxis {
  double center = 0.0;
  double measure_width = 1.0;
  double a = 0.0;
  double beta = 0.0;
  double delta_sq = 0.0;
  double log_lambda0 = 0.0;
  double log_ratio = 0.0;

  static HermiteAxis make(double length_scale_sq, double center, double measure_width);

  double eigenvalue(int order) const;
  /// Writes phi_0..phi_max_order at x into out (size max_order + 1).
  void eval(double x, int max_order, double* out) const;
};

/// Truncated Karhunen-Loeve basis of the SE kernel: tensor products of
/// per-axis Hermite eigenfunctions, ordered by non-increasing eigenvalue
/// (ties broken by lexicographic multi-index).
class EigenBasis {
 public:
  static constexpr int kMaxHermiteOrder = 100;

  EigenBasis() = default;
  EigenBasis(KernelParams params, std::vector<HermiteAxis> axes, Eigen::VectorXd eigenvalues,
             std::vector<std::array<int, 3>> multi_index);

  int size() const { return static_cast<int>(eigenvalues_.size()); }
  int dim() const { return params_.dim(); }
  const KernelParams& params() const { return params_; }
  const Eigen::VectorXd& eigenvalues() const { return eigenvalues_; }
  const Eigen::VectorXd& sqrt_eigenvalues() const { return sqrt_eigenvalues_; }
  const std::vector<HermiteAxis>& axes() const { return axes_; }
  const std::vector<std::array<int, 3>>& multi_index() const { return multi_index_; }

  /// Phi(x) = [phi_1(x), ..., phi_E(x)]. Throws InputError on non-finite x
  /// or a dimension mismatch.
  Eigen::VectorXd eval(const Position& x) const;
  void eval_into(const Position& x, Eigen::Ref<Eigen::VectorXd> out) const;
  /// Columnwise Phi for each point (E x points.size()).
  Eigen::MatrixXd eval_many(const std::vector<Position>& points) const;

 private:
  KernelParams params_;
  std::vector<HermiteAxis> axes_;
  Eigen::VectorXd eigenvalues_;
  Eigen::VectorXd sqrt_eigenvalues_;
  std::vector<std::array<int, 3>> multi_index_;
  std::array<int, 3> max_order_{0, 0, 0};
};

/// Builds the top-E eigenpairs. `center` and `measure_width` describe the
/// Gaussian input measure per axis. Throws CapacityError when E needs a
/// Hermite order above kMaxHermiteOrder, or when an eigenvalue falls below
/// 1e-14 of the leading one.
EigenBasis build_basis(const KernelParams& params, const Position& center,
                       const Eigen::VectorXd& measure_width, int num_features);

/// Centered-at-origin convenience overload.
EigenBasis build_basis(const KernelParams& params, const Eigen::VectorXd& measure_width,
                       int num_features);

Eigen::VectorXd basis_eval(const EigenBasis& basis, const Position& x);

double truncated_kernel(const EigenBasis& basis, const Position& x1, const Position& x2);

}  // namespace dgp
