#include "dgp/oracles.hpp"

#include <Eigen/Cholesky>
#include <Eigen/LU>

namespace dgp::oracle {

namespace {

void check_data(const std::vector<Position>& xs, const std::vector<double>& ys) {
  if (xs.empty() || xs.size() != ys.size()) {
    throw InputError("oracle: need |X| = |y| >= 1");
  }
}

}  // namespace

Prediction centralized_gp_posterior(const std::vector<Position>& xs, const std::vector<double>& ys,
                                    const KernelParams& params, const NoiseModel& noise,
                                    const Position& x) {
  check_data(xs, ys);
  const auto n = static_cast<Eigen::Index>(xs.size());
  Eigen::MatrixXd k(n, n);
  Eigen::VectorXd kx(n);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) k(i, j) = kernel_eval(params, xs[i], xs[j]);
    kx(i) = kernel_eval(params, xs[i], x);
    y(i) = ys[i];
  }
  k.diagonal().array() += noise.sigma_v_sq;
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success) throw NumericalError("oracle: Gram matrix not positive definite");
  Prediction p;
  p.mean = kx.dot(llt.solve(y));
  p.var = kernel_eval(params, x, x) - kx.dot(llt.solve(kx));
  return p;
}

Prediction centralized_edim_posterior(const std::vector<Position>& xs, const std::vector<double>& ys,
                                      const EigenBasis& basis, const NoiseModel& noise,
                                      const Position& x) {
  check_data(xs, ys);
  const auto n = static_cast<Eigen::Index>(xs.size());
  const Eigen::MatrixXd g = basis.eval_many(xs).transpose();  // N x E
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = ys[i];
  const double nn = static_cast<double>(n);
  const Eigen::VectorXd& lam = basis.eigenvalues();

  Eigen::MatrixXd a = g.transpose() * g / nn;
  a.diagonal() += (noise.sigma_v_sq / nn) * lam.cwiseInverse();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (!lu.isInvertible()) throw NumericalError("oracle: E-dimensional system is singular");
  const Eigen::MatrixXd h = lu.solve(g.transpose() / nn);  // E x N

  const Eigen::VectorXd phi = basis.eval(x);
  Prediction p;
  p.mean = phi.dot(h * y);
  p.var = kernel_eval(basis.params(), x, x) - phi.dot(h * (g * (lam.asDiagonal() * phi)));
  return p;
}

}  // namespace dgp::oracle
