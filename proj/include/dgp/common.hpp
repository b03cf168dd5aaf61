#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace dgp {

/// A point in the workspace. Dimension 1..3, stored inline (no heap allocation).
using Position = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, 3, 1>;

inline Position make_position(std::initializer_list<double> coords) {
  Position p(static_cast<Eigen::Index>(coords.size()));
  Eigen::Index i = 0;
  for (double c : coords) p(i++) = c;
  return p;
}

enum class ErrorKind {
  kInput,
  kCapacity,
  kEmptyState,
  kNumerical,
  kPlanningInfeasible,
  kContract,
  kConfig,
  kData,
  kIo,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define DGP_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(Kind, what) {}      \
  };

DGP_DEFINE_ERROR(InputError, ErrorKind::kInput)
DGP_DEFINE_ERROR(CapacityError, ErrorKind::kCapacity)
DGP_DEFINE_ERROR(EmptyStateError, ErrorKind::kEmptyState)
DGP_DEFINE_ERROR(NumericalError, ErrorKind::kNumerical)
DGP_DEFINE_ERROR(PlanningInfeasibleError, ErrorKind::kPlanningInfeasible)
DGP_DEFINE_ERROR(ContractError, ErrorKind::kContract)
DGP_DEFINE_ERROR(ConfigError, ErrorKind::kConfig)
DGP_DEFINE_ERROR(DataError, ErrorKind::kData)
DGP_DEFINE_ERROR(IoError, ErrorKind::kIo)

#undef DGP_DEFINE_ERROR

/// Rethrows `e` as the same error type with `context` prepended.
[[noreturn]] inline void rethrow_with_context(const Error& e, const std::string& context) {
  const std::string what = context + ": " + e.what();
  switch (e.kind()) {
    case ErrorKind::kInput: throw InputError(what);
    case ErrorKind::kCapacity: throw CapacityError(what);
    case ErrorKind::kEmptyState: throw EmptyStateError(what);
    case ErrorKind::kNumerical: throw NumericalError(what);
    case ErrorKind::kPlanningInfeasible: throw PlanningInfeasibleError(what);
    case ErrorKind::kContract: throw ContractError(what);
    case ErrorKind::kConfig: throw ConfigError(what);
    case ErrorKind::kData: throw DataError(what);
    case ErrorKind::kIo: throw IoError(what);
  }
  throw Error(e.kind(), what);
}

inline bool all_finite(const Position& x) { return x.allFinite(); }

}  // namespace dgp
