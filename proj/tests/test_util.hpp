#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "dgp/gp.hpp"
#include "dgp/kernel.hpp"
#include "dgp/rng.hpp"

namespace dgp::test {

inline Position P(double x) { return make_position({x}); }
inline Position P(double x, double y) { return make_position({x, y}); }

inline Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// 20x20 map, E=80, unit signal variance, measure centered on the map.
inline KernelParams sim1_params() { return KernelParams(1.0, vec({8.0, 8.0})); }
inline EigenBasis sim1_basis(int e = 80) {
  return build_basis(sim1_params(), P(10.0, 10.0), vec({5.0, 5.0}), e);
}

inline Position uniform_point(Rng& rng, double lo, double hi, int dim) {
  std::uniform_real_distribution<double> u(lo, hi);
  Position p(dim);
  for (int i = 0; i < dim; ++i) p(i) = u(rng);
  return p;
}

// Trapezoid nodes and weights for integrating against N(center, width^2).
struct Quadrature {
  std::vector<double> x;
  std::vector<double> w;
};

inline Quadrature gaussian_quadrature(double center, double width, int n, double span = 10.0) {
  Quadrature q;
  const double lo = center - span * width;
  const double h = 2.0 * span * width / (n - 1);
  const double norm = 1.0 / (std::sqrt(2.0 * M_PI) * width);
  for (int i = 0; i < n; ++i) {
    const double x = lo + i * h;
    const double u = (x - center) / width;
    double w = h * norm * std::exp(-0.5 * u * u);
    if (i == 0 || i == n - 1) w *= 0.5;
    q.x.push_back(x);
    q.w.push_back(w);
  }
  return q;
}

// Nystrom eigenvalues (descending) of the 1D SE integral operator.
inline Eigen::VectorXd nystrom_eigenvalues(const KernelParams& params, double center, double width, int n) {
  const Quadrature q = gaussian_quadrature(center, width, n);
  Eigen::MatrixXd m(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      m(i, j) = std::sqrt(q.w[i] * q.w[j]) * kernel_eval(params, P(q.x[i]), P(q.x[j]));
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().reverse();
}

}  // namespace dgp::test
