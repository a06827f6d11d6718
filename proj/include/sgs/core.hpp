#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgs {

template <typename Scalar>
using StateVec = Eigen::Matrix<Scalar, 3, 1>;

template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;

using Vec3 = StateVec<double>;
using Mat3d = Mat3<double>;
using Vec6 = Eigen::Matrix<double, 6, 1>;

// Column-major batch of states, one state per column.
using Batch = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>;

/// Uniformly sampled time series: state i lives at t0 + i * dt.
struct Trajectory {
  double dt = 1.0;
  double t0 = 0.0;
  std::vector<Vec3> states;

  [[nodiscard]] std::size_t size() const { return states.size(); }
  [[nodiscard]] bool empty() const { return states.empty(); }
  [[nodiscard]] double time(std::size_t i) const { return t0 + static_cast<double>(i) * dt; }
  [[nodiscard]] const Vec3& operator[](std::size_t i) const { return states[i]; }
  [[nodiscard]] Vec3& operator[](std::size_t i) { return states[i]; }

  /// One coordinate across the whole series.
  [[nodiscard]] std::vector<double> component(int axis) const;
};

/// Result of a rollout that may diverge. On blow-up the trajectory holds
/// every finite state up to (not including) the first non-finite one.
struct Rollout {
  Trajectory path;
  bool blew_up = false;
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

// ---------------------------------------------------------------------------
// Error hierarchy. Every failure mode named by the public API has its own type
// so the CLI can map them onto exit codes.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class NonFiniteState : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

class DimMismatch : public Error {
 public:
  using Error::Error;
};

class StencilTooWide : public Error {
 public:
  using Error::Error;
};

class OddStride : public Error {
 public:
  using Error::Error;
};

class GammaSingular : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class MissingInput : public Error {
 public:
  using Error::Error;
};

class SchemaMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace sgs
