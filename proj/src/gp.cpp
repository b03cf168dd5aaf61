#include "dgp/gp.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "dgp/bytes.hpp"

namespace dgp {

NoiseModel::NoiseModel(double variance) : sigma_v_sq(variance) {
  if (!(variance > 0.0) || !std::isfinite(variance)) {
    throw InputError("noise variance must be positive and finite");
  }
}

GpState GpState::zero(int num_features, std::uint64_t network_size) {
  if (num_features < 1) throw InputError("GpState needs at least one feature");
  if (network_size < 1) throw InputError("GpState network size must be positive");
  GpState s;
  s.alpha = Eigen::MatrixXd::Zero(num_features, num_features);
  s.beta = Eigen::VectorXd::Zero(num_features);
  s.m = 0;
  s.n = network_size;
  return s;
}

GpState gp_state_update(const GpState& state, const Eigen::VectorXd& phi, double y, double r) {
  if (!(r > 0.0 && r <= 1.0)) throw InputError("forgetting factor must lie in (0, 1]");
  if (!std::isfinite(y)) throw InputError("gp_state_update: non-finite measurement");
  if (!phi.allFinite()) throw InputError("gp_state_update: non-finite features");
  if (phi.size() != state.size()) throw InputError("gp_state_update: feature size mismatch");
  GpState out = state;
  out.alpha *= (1.0 - r);
  out.alpha.noalias() += r * phi * phi.transpose();
  out.beta = (1.0 - r) * state.beta + (r * y) * phi;
  out.m = state.m + 1;
  return out;
}

GpState gp_state_update(const GpState& state, const EigenBasis& basis, const Position& x, double y,
                        double r) {
  return gp_state_update(state, basis.eval(x), y, r);
}

// ---------------------------------------------------------------------------

namespace {

bool pivots_ok(const Eigen::LDLT<Eigen::MatrixXd>& ldlt) {
  if (ldlt.info() != Eigen::Success) return false;
  const auto& d = ldlt.vectorD();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!(d(i) > 0.0) || !std::isfinite(d(i))) return false;
  }
  return true;
}

}  // namespace

SpdFactor::SpdFactor(const Eigen::MatrixXd& matrix) {
  const Eigen::Index n = matrix.rows();
  if (n == 0 || matrix.cols() != n) throw InputError("SpdFactor: matrix must be square and non-empty");
  ldlt_.compute(matrix);
  if (!pivots_ok(ldlt_)) {
    double scale = std::abs(matrix.trace()) / static_cast<double>(n);
    if (!(scale > 0.0) || !std::isfinite(scale)) scale = matrix.cwiseAbs().maxCoeff();
    if (!(scale > 0.0) || !std::isfinite(scale)) throw NumericalError("symmetric factorization: degenerate matrix");
    const double max_jitter = 1e-4 * scale;
    bool ok = false;
    for (double jitter = 1e-10 * scale; jitter <= max_jitter * (1.0 + 1e-12); jitter *= 2.0) {
      Eigen::MatrixXd shifted = matrix;
      shifted.diagonal().array() += jitter;
      ldlt_.compute(shifted);
      if (pivots_ok(ldlt_)) {
        jitter_ = jitter;
        ok = true;
        break;
      }
    }
    if (!ok) throw NumericalError("symmetric factorization failed at maximum jitter");
  }
  inv_sqrt_d_ = ldlt_.vectorD().cwiseSqrt().cwiseInverse();
}

void SpdFactor::whiten_in_place(Eigen::Ref<Eigen::MatrixXd> b) const {
  b = ldlt_.transpositionsP() * b;
  ldlt_.matrixL().solveInPlace(b);
  b = inv_sqrt_d_.asDiagonal() * b;
}

Eigen::MatrixXd SpdFactor::whiten(const Eigen::MatrixXd& b) const {
  Eigen::MatrixXd out = b;
  whiten_in_place(out);
  return out;
}

double SpdFactor::log_det() const { return ldlt_.vectorD().array().log().sum(); }

// ---------------------------------------------------------------------------

GpPosterior::GpPosterior(const EigenBasis& basis, const NoiseModel& noise,
                         const Eigen::MatrixXd& alpha, const Eigen::VectorXd* beta,
                         double effective_count)
    : basis_(&basis) {
  const int e = basis.size();
  if (alpha.rows() != e || alpha.cols() != e || (beta != nullptr && beta->size() != e)) {
    throw InputError("GpPosterior: state size does not match the basis");
  }
  mean_weights_ = Eigen::VectorXd::Zero(e);
  if (!(effective_count > 0.0)) return;

  prior_ = false;
  ridge_ = noise.sigma_v_sq / effective_count;
  const Eigen::VectorXd& d = basis.sqrt_eigenvalues();
  Eigen::MatrixXd s = d.asDiagonal() * alpha * d.asDiagonal();
  s = 0.5 * (s + s.transpose());
  s.diagonal().array() += ridge_;
  factor_ = SpdFactor(s);
  if (beta != nullptr) {
    mean_weights_ = d.asDiagonal() * factor_.solve(d.asDiagonal() * (*beta));
  }
}

GpPosterior::GpPosterior(const GpState& state, const EigenBasis& basis, const NoiseModel& noise)
    : GpPosterior(basis, noise, state.alpha, &state.beta,
                  static_cast<double>(state.m) * static_cast<double>(state.n)) {}

double GpPosterior::mean_from_features(const Eigen::VectorXd& phi) const {
  return prior_ ? 0.0 : phi.dot(mean_weights_);
}

double GpPosterior::mean(const Position& x) const {
  if (prior_) return 0.0;
  return mean_from_features(basis_->eval(x));
}

void GpPosterior::whiten_features(Eigen::Ref<Eigen::MatrixXd> phi_in_out) const {
  phi_in_out = basis_->sqrt_eigenvalues().asDiagonal() * phi_in_out;
  factor_.whiten_in_place(phi_in_out);
}

double GpPosterior::variance_unclamped(const Position& x) const {
  const double prior_var = basis_->params().signal_variance;
  if (prior_) return prior_var;
  Eigen::MatrixXd phi = basis_->eval(x);
  const double truncated = (basis_->eigenvalues().array() * phi.col(0).array().square()).sum();
  whiten_features(phi);
  return prior_var - truncated + ridge_ * phi.col(0).squaredNorm();
}

double GpPosterior::variance(const Position& x) const {
  return std::max(0.0, variance_unclamped(x));
}

Eigen::MatrixXd GpPosterior::covariance(const std::vector<Position>& points, Prior prior) const {
  const auto t = static_cast<Eigen::Index>(points.size());
  if (t == 0) throw InputError("covariance: empty point list");
  Eigen::MatrixXd phi = basis_->eval_many(points);
  Eigen::MatrixXd cov(t, t);
  if (prior == Prior::kExact) {
    const KernelParams& kp = basis_->params();
    for (Eigen::Index i = 0; i < t; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        cov(i, j) = cov(j, i) = kernel_eval(kp, points[i], points[j]);
      }
    }
    if (prior_) return cov;
    cov.noalias() -= phi.transpose() * basis_->eigenvalues().asDiagonal() * phi;
  } else {
    if (prior_) {
      const Eigen::MatrixXd scaled = basis_->sqrt_eigenvalues().asDiagonal() * phi;
      cov.noalias() = scaled.transpose() * scaled;
      return 0.5 * (cov + cov.transpose());
    }
    cov.setZero();
  }
  whiten_features(phi);
  cov.noalias() += ridge_ * phi.transpose() * phi;
  return 0.5 * (cov + cov.transpose());
}

double posterior_mean(const GpState& state, const EigenBasis& basis, const NoiseModel& noise,
                      const Position& x) {
  if (state.m == 0) throw EmptyStateError("posterior_mean: no measurements fused yet (m = 0)");
  return GpPosterior(state, basis, noise).mean(x);
}

double posterior_variance(const GpState& state, const EigenBasis& basis, const NoiseModel& noise,
                          const Position& x) {
  return GpPosterior(state, basis, noise).variance(x);
}

// ---------------------------------------------------------------------------

MergedGpState merge_trajectories(const GpState& state, std::span<const Trajectory> neighbor_trajs,
                                 const EigenBasis& basis, MergeMode mode) {
  std::size_t n_points = 0;
  for (const auto& traj : neighbor_trajs) n_points += traj.points.size();
  const double mn = static_cast<double>(state.m) * static_cast<double>(state.n);
  if (n_points == 0) return MergedGpState{state.alpha, mn, std::cref(state), 0};

  const int e = basis.size();
  Eigen::MatrixXd outer_sum = Eigen::MatrixXd::Zero(e, e);
  Eigen::VectorXd phi(e);
  for (const auto& traj : neighbor_trajs) {
    for (const auto& p : traj.points) {
      basis.eval_into(p, phi);
      outer_sum.noalias() += phi * phi.transpose();
    }
  }
  const double nx = static_cast<double>(n_points);
  const double total = mn + nx;
  const double own_weight = mn / total;
  const double neighbor_weight = (mode == MergeMode::kAsPrinted) ? nx / total : 1.0 / total;
  MergedGpState merged{own_weight * state.alpha + neighbor_weight * outer_sum, total,
                       std::cref(state), n_points};
  return merged;
}

GpPosterior merged_posterior(const MergedGpState& merged, const EigenBasis& basis,
                             const NoiseModel& noise) {
  return GpPosterior(basis, noise, merged.alpha_hat, nullptr, merged.effective_count);
}

Eigen::MatrixXd merged_variance(const MergedGpState& merged, const EigenBasis& basis,
                                const NoiseModel& noise, const std::vector<Position>& points) {
  if (points.empty()) throw InputError("merged_variance: empty point list");
  return merged_posterior(merged, basis, noise).covariance(points, GpPosterior::Prior::kTruncated);
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_gp_state(const GpState& state) {
  ByteWriter w;
  w.u64(state.m);
  w.u64(state.n);
  const Eigen::Index e = state.beta.size();
  for (Eigen::Index i = 0; i < e; ++i) {
    for (Eigen::Index j = 0; j < e; ++j) w.f64(state.alpha(i, j));
  }
  for (Eigen::Index i = 0; i < e; ++i) w.f64(state.beta(i));
  return w.take();
}

GpState decode_gp_state(std::span<const std::uint8_t> bytes, int num_features) {
  const std::size_t e = static_cast<std::size_t>(num_features);
  const std::size_t expected = 16 + 8 * (e * e + e);
  if (bytes.size() != expected) {
    std::ostringstream os;
    os << "GpState record has " << bytes.size() << " bytes, expected " << expected;
    throw InputError(os.str());
  }
  ByteReader r(bytes);
  GpState s = GpState::zero(num_features, 1);
  s.m = r.u64();
  s.n = r.u64();
  for (int i = 0; i < num_features; ++i) {
    for (int j = 0; j < num_features; ++j) s.alpha(i, j) = r.f64();
  }
  for (int i = 0; i < num_features; ++i) s.beta(i) = r.f64();
  return s;
}

void save_checkpoint(const GpState& state, const std::filesystem::path& path) {
  ByteWriter w;
  const std::uint8_t magic[4] = {'D', 'G', 'P', 'S'};
  w.raw(magic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(state.size()));
  w.u32(0);
  w.raw(encode_gp_state(state));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  const auto& bytes = w.bytes();
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

GpState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader r(bytes);
  const auto magic = r.raw(4);
  if (magic[0] != 'D' || magic[1] != 'G' || magic[2] != 'P' || magic[3] != 'S') {
    throw InputError("not a GpState checkpoint: " + path.string());
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw InputError("unsupported checkpoint version");
  const std::uint32_t e = r.u32();
  r.u32();
  return decode_gp_state(r.raw(r.remaining()), static_cast<int>(e));
}

}  // namespace dgp
