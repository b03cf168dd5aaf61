#pragma once

#include <vector>

#include "dgp/gp.hpp"
#include "dgp/kernel.hpp"

namespace dgp::oracle {

struct Prediction {
  double mean = 0.0;
  double var = 0.0;
};

/// Exact GP posterior through the full |X| x |X| Gram matrix. O(|X|^3); for
/// tests and diagnostics only.
Prediction centralized_gp_posterior(const std::vector<Position>& xs, const std::vector<double>& ys,
                                    const KernelParams& params, const NoiseModel& noise,
                                    const Position& x);

/// Centralized E-dimensional estimator on pooled data, built row-per-sample:
///   mean = Phi^T H y,  H = (G^T G / N + s/N Lambda^-1)^-1 G^T / N,
///   var  = k(x,x) - Phi^T H G Lambda Phi,
/// with N = number of pooled samples. Solved by full-pivot LU on the
/// unscaled system, independent of the distributed code path.
Prediction centralized_edim_posterior(const std::vector<Position>& xs, const std::vector<double>& ys,
                                      const EigenBasis& basis, const NoiseModel& noise,
                                      const Position& x);

}  // namespace dgp::oracle
