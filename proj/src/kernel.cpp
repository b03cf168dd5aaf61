#include "dgp/kernel.hpp"

#include <cmath>
#include <cstdint>
#include <queue>
#include <set>
#include <sstream>
#include <utility>

namespace dgp {

KernelParams::KernelParams(double signal_variance_in, Eigen::VectorXd length_scale_in)
    : signal_variance(signal_variance_in), length_scale(std::move(length_scale_in)) {
  validate();
}

void KernelParams::validate() const {
  if (!(signal_variance > 0.0) || !std::isfinite(signal_variance)) {
    throw InputError("kernel signal variance must be positive and finite");
  }
  if (length_scale.size() < 1 || length_scale.size() > 3) {
    throw InputError("kernel dimension must be 1, 2 or 3");
  }
  for (Eigen::Index i = 0; i < length_scale.size(); ++i) {
    if (!(length_scale(i) > 0.0) || !std::isfinite(length_scale(i))) {
      throw InputError("kernel length-scale entries must be positive and finite");
    }
  }
}

double kernel_eval(const KernelParams& params, const Position& x1, const Position& x2) {
  const Eigen::Index d = params.length_scale.size();
  if (x1.size() != d || x2.size() != d) {
    std::ostringstream os;
    os << "kernel_eval: dimension mismatch (kernel " << d << ", points " << x1.size() << " and "
       << x2.size() << ")";
    throw InputError(os.str());
  }
  double q = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    const double diff = x1(i) - x2(i);
    q += diff * diff / params.length_scale(i);
  }
  return params.signal_variance * std::exp(-0.5 * q);
}

HermiteAxis HermiteAxis::make(double length_scale_sq, double center, double measure_width) {
  if (!(measure_width > 0.0) || !std::isfinite(measure_width)) {
    throw InputError("measure width must be positive and finite");
  }
  HermiteAxis ax;
  ax.center = center;
  ax.measure_width = measure_width;
  const double eps_sq = 1.0 / (2.0 * length_scale_sq);
  ax.a = 1.0 / (std::sqrt(2.0) * measure_width);
  const double a_sq = ax.a * ax.a;
  ax.beta = std::pow(1.0 + 4.0 * eps_sq / a_sq, 0.25);
  ax.delta_sq = 0.5 * a_sq * (ax.beta * ax.beta - 1.0);
  const double denom = a_sq + ax.delta_sq + eps_sq;
  ax.log_lambda0 = 0.5 * std::log(a_sq / denom);
  ax.log_ratio = std::log(eps_sq / denom);
  return ax;
}

double HermiteAxis::eigenvalue(int order) const {
  return std::exp(log_lambda0 + order * log_ratio);
}

void HermiteAxis::eval(double x, int max_order, double* out) const {
  // Normalized Hermite functions via the three-term recurrence
  //   psi_{n+1} = sqrt(2/(n+1)) z psi_n - sqrt(n/(n+1)) psi_{n-1},
  // with the Gaussian envelope folded into psi_0.
  const double u = x - center;
  const double z = a * beta * u;
  out[0] = std::sqrt(beta) * std::exp(-delta_sq * u * u);
  if (max_order == 0) return;
  out[1] = std::sqrt(2.0) * z * out[0];
  for (int n = 1; n < max_order; ++n) {
    out[n + 1] = std::sqrt(2.0 / (n + 1)) * z * out[n] - std::sqrt(static_cast<double>(n) / (n + 1)) * out[n - 1];
  }
}

EigenBasis::EigenBasis(KernelParams params, std::vector<HermiteAxis> axes,
                       Eigen::VectorXd eigenvalues, std::vector<std::array<int, 3>> multi_index)
    : params_(std::move(params)),
      axes_(std::move(axes)),
      eigenvalues_(std::move(eigenvalues)),
      multi_index_(std::move(multi_index)) {
  sqrt_eigenvalues_ = eigenvalues_.cwiseSqrt();
  for (const auto& idx : multi_index_) {
    for (int k = 0; k < 3; ++k) max_order_[k] = std::max(max_order_[k], idx[k]);
  }
}

void EigenBasis::eval_into(const Position& x, Eigen::Ref<Eigen::VectorXd> out) const {
  const int d = dim();
  if (x.size() != d) throw InputError("basis_eval: point dimension does not match the basis");
  if (!x.allFinite()) throw InputError("basis_eval: non-finite position");
  // Per-axis tables; orders are bounded by kMaxHermiteOrder.
  std::array<std::array<double, kMaxHermiteOrder + 1>, 3> table;
  for (int k = 0; k < d; ++k) axes_[k].eval(x(k), max_order_[k], table[k].data());
  const int e_count = size();
  for (int e = 0; e < e_count; ++e) {
    const auto& idx = multi_index_[e];
    double v = table[0][idx[0]];
    for (int k = 1; k < d; ++k) v *= table[k][idx[k]];
    out(e) = v;
  }
}

Eigen::VectorXd EigenBasis::eval(const Position& x) const {
  Eigen::VectorXd out(size());
  eval_into(x, out);
  return out;
}

Eigen::MatrixXd EigenBasis::eval_many(const std::vector<Position>& points) const {
  Eigen::MatrixXd out(size(), static_cast<Eigen::Index>(points.size()));
  for (std::size_t j = 0; j < points.size(); ++j) eval_into(points[j], out.col(static_cast<Eigen::Index>(j)));
  return out;
}

namespace {

struct Candidate {
  std::int64_t key;  // quantized log eigenvalue
  std::array<int, 3> idx;
};

// Pops the largest key first; equal keys resolve to the lexicographically
// smallest multi-index.
struct CandidateOrder {
  bool operator()(const Candidate& lhs, const Candidate& rhs) const {
    if (lhs.key != rhs.key) return lhs.key < rhs.key;
    return lhs.idx > rhs.idx;
  }
};

}  // namespace

EigenBasis build_basis(const KernelParams& params, const Position& center,
                       const Eigen::VectorXd& measure_width, int num_features) {
  params.validate();
  const int d = params.dim();
  if (num_features < 1) throw InputError("build_basis: E must be at least 1");
  if (center.size() != d || measure_width.size() != d) {
    throw InputError("build_basis: center/measure width dimension does not match the kernel");
  }

  std::vector<HermiteAxis> axes;
  axes.reserve(d);
  for (int k = 0; k < d; ++k) {
    axes.push_back(HermiteAxis::make(params.length_scale(k), center(k), measure_width(k)));
  }

  // Log eigenvalues are quantized to 1e-10 so that mathematically tied
  // products (e.g. orders (2,0) and (1,1) with equal per-axis ratios) order
  // by multi-index rather than by rounding noise.
  auto key_of = [&](const std::array<int, 3>& idx) {
    double s = 0.0;
    for (int k = 0; k < d; ++k) s += axes[k].log_lambda0 + idx[k] * axes[k].log_ratio;
    return static_cast<std::int64_t>(std::llround(s * 1e10));
  };

  std::priority_queue<Candidate, std::vector<Candidate>, CandidateOrder> frontier;
  std::set<std::array<int, 3>> seen;
  const std::array<int, 3> origin{0, 0, 0};
  frontier.push({key_of(origin), origin});
  seen.insert(origin);

  std::vector<std::array<int, 3>> chosen;
  chosen.reserve(num_features);
  while (static_cast<int>(chosen.size()) < num_features) {
    const Candidate top = frontier.top();
    frontier.pop();
    for (int k = 0; k < d; ++k) {
      if (top.idx[k] > EigenBasis::kMaxHermiteOrder) {
        std::ostringstream os;
        os << "build_basis: E=" << num_features << " requires Hermite order above "
           << EigenBasis::kMaxHermiteOrder;
        throw CapacityError(os.str());
      }
    }
    chosen.push_back(top.idx);
    for (int k = 0; k < d; ++k) {
      auto next = top.idx;
      ++next[k];
      if (seen.insert(next).second) frontier.push({key_of(next), next});
    }
  }

  Eigen::VectorXd eigenvalues(num_features);
  for (int e = 0; e < num_features; ++e) {
    double lam = params.signal_variance;
    for (int k = 0; k < d; ++k) lam *= axes[k].eigenvalue(chosen[e][k]);
    // Quantization ties can leave ulp-level inversions; keep the sequence monotone.
    eigenvalues(e) = (e > 0) ? std::min(lam, eigenvalues(e - 1)) : lam;
  }
  if (eigenvalues(num_features - 1) < 1e-14 * eigenvalues(0)) {
    std::ostringstream os;
    os << "build_basis: eigenvalue " << num_features << " is below 1e-14 of the leading one";
    throw CapacityError(os.str());
  }
  return EigenBasis(params, std::move(axes), std::move(eigenvalues), std::move(chosen));
}

EigenBasis build_basis(const KernelParams& params, const Eigen::VectorXd& measure_width,
                       int num_features) {
  return build_basis(params, Position::Zero(params.dim()), measure_width, num_features);
}

Eigen::VectorXd basis_eval(const EigenBasis& basis, const Position& x) { return basis.eval(x); }

double truncated_kernel(const EigenBasis& basis, const Position& x1, const Position& x2) {
  const Eigen::VectorXd p1 = basis.eval(x1);
  const Eigen::VectorXd p2 = basis.eval(x2);
  return (basis.eigenvalues().array() * (p1.array() * p2.array())).sum();
}

}  // namespace dgp
