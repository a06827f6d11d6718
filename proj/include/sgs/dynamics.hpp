#pragma once

#include "sgs/core.hpp"
#include "sgs/rng.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace sgs {

template <typename Scalar = double>
struct LorenzParams {
  Scalar sigma = Scalar(10);
  Scalar r = Scalar(28);
  Scalar beta = Scalar(8) / Scalar(3);
};

using Params = LorenzParams<double>;

/// Lorenz-63 vector field (sigma (y - x), x (r - z) - y, x y - beta z).
template <typename Derived>
StateVec<typename Derived::Scalar> lorenz_rhs(const Eigen::MatrixBase<Derived>& x,
                                              const LorenzParams<typename Derived::Scalar>& p) {
  EIGEN_STATIC_ASSERT_VECTOR_SPECIFIC_SIZE(Derived, 3);
  return {p.sigma * (x(1) - x(0)), x(0) * (p.r - x(2)) - x(1), x(0) * x(1) - p.beta * x(2)};
}

template <typename Derived>
Mat3<typename Derived::Scalar> lorenz_jacobian(const Eigen::MatrixBase<Derived>& x,
                                               const LorenzParams<typename Derived::Scalar>& p) {
  EIGEN_STATIC_ASSERT_VECTOR_SPECIFIC_SIZE(Derived, 3);
  using S = typename Derived::Scalar;
  Mat3<S> j;
  j << -p.sigma, p.sigma, S(0),
       p.r - x(2), S(-1), -x(0),
       x(1), x(0), -p.beta;
  return j;
}

/// Hessian slices H_i = d^2 f_i / dx^2. State independent for Lorenz-63.
template <typename Scalar = double>
std::array<Mat3<Scalar>, 3> lorenz_hessians(const LorenzParams<Scalar>& = {}) {
  std::array<Mat3<Scalar>, 3> h;
  for (auto& m : h) m.setZero();
  h[1](0, 2) = h[1](2, 0) = Scalar(-1);
  h[2](0, 1) = h[2](1, 0) = Scalar(1);
  return h;
}

/// x + drift dt + diag(diff) sqrt(dt) noise, with `noise` a unit normal draw.
template <typename Scalar>
StateVec<Scalar> em_step(const StateVec<Scalar>& x, const StateVec<Scalar>& drift,
                         const StateVec<Scalar>& diff_diag, Scalar dt, const StateVec<Scalar>& noise) {
  using std::sqrt;
  return x + drift * dt + (diff_diag.array() * noise.array()).matrix() * sqrt(dt);
}

enum class Scheme { rk2, rk4 };

Scheme parse_scheme(std::string_view name);
std::string_view scheme_name(Scheme s);

/// One explicit Runge-Kutta step of `rhs` (midpoint for rk2, classical rk4).
template <typename Rhs>
Vec3 rk_step(Rhs&& rhs, const Vec3& x, double dt, Scheme scheme = Scheme::rk4) {
  if (scheme == Scheme::rk2) {
    const Vec3 k1 = rhs(x);
    return x + dt * rhs(Vec3(x + 0.5 * dt * k1));
  }
  const Vec3 k1 = rhs(x);
  const Vec3 k2 = rhs(Vec3(x + 0.5 * dt * k1));
  const Vec3 k3 = rhs(Vec3(x + 0.5 * dt * k2));
  const Vec3 k4 = rhs(Vec3(x + dt * k3));
  return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Fixed-step integration of x' = rhs(x); n steps, n + 1 states.
/// Throws NonFiniteState on divergence.
template <typename Rhs>
Trajectory integrate_ode(Rhs&& rhs, const Vec3& x0, double dt, std::size_t n, Scheme scheme = Scheme::rk4,
                         double t0 = 0.0) {
  if (!(dt > 0.0)) throw InvalidArgument("integrate_ode: dt must be positive");
  if (n < 1) throw InvalidArgument("integrate_ode: need at least one step");
  if (!x0.allFinite()) throw NonFiniteState("integrate_ode: non-finite initial state");
  Trajectory traj;
  traj.dt = dt;
  traj.t0 = t0;
  traj.states.reserve(n + 1);
  traj.states.push_back(x0);
  Vec3 x = x0;
  for (std::size_t i = 0; i < n; ++i) {
    x = rk_step(rhs, x, dt, scheme);
    if (!x.allFinite())
      throw NonFiniteState("integrate_ode: non-finite state at step " + std::to_string(i + 1));
    traj.states.push_back(x);
  }
  return traj;
}

/// Lorenz-63 convenience overload.
Trajectory integrate_lorenz(const Vec3& x0, double dt, std::size_t n, const Params& p = {},
                            Scheme scheme = Scheme::rk4);

/// Deterministic forward Euler on the Lorenz field; reports blow-up instead of throwing.
Rollout forward_euler(const Vec3& x0, double dt, std::size_t n, const Params& p = {});

/// Runge-Kutta rollout on the Lorenz field; reports blow-up instead of throwing.
Rollout runge_kutta(const Vec3& x0, double dt, std::size_t n, const Params& p = {}, Scheme scheme = Scheme::rk4);

/// Tangent propagation x~_{n+1} = x~_n + J(x_n) x~_n dt along `nominal`.
Rollout integrate_linearized(const Trajectory& nominal, const Vec3& xt0, const Params& p = {});

/// Euler-Maruyama rollout with diagonal diffusion. `drift(x, i)` and
/// `diffusion(x, i)` receive the state and the step index and are called in
/// that order. All noise comes from one generator seeded with `seed`.
/// Reports blow-up instead of throwing.
template <typename Drift, typename Diffusion>
Rollout euler_maruyama(Drift&& drift, Diffusion&& diffusion, const Vec3& x0, double dt, std::size_t n,
                       std::uint64_t seed) {
  if (!(dt > 0.0)) throw InvalidArgument("euler_maruyama: dt must be positive");
  Rng rng(seed);
  Rollout out;
  out.path.dt = dt;
  out.path.states.reserve(n + 1);
  out.path.states.push_back(x0);
  Vec3 x = x0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 xi = rng.normal3();
    const Vec3 a = drift(x, i);
    const Vec3 b = diffusion(x, i);
    x = em_step<double>(x, a, b, dt, xi);
    if (!x.allFinite()) {
      out.blew_up = true;
      break;
    }
    out.path.states.push_back(x);
  }
  return out;
}

/// Euler-Maruyama path of dX = lambda X dt + mu X dW (n steps, n + 1 values).
std::vector<double> simulate_linear_sde(double lambda, double mu, double x0, double dt, std::size_t n,
                                        std::uint64_t seed);

/// Largest Euclidean norm over a trajectory.
double max_norm(const Trajectory& traj);

/// Largest pairwise distance between states (exact, O(n^2) on a strided subset
/// of at most `max_points` states).
double attractor_diameter(const Trajectory& traj, std::size_t max_points = 4000);

}  // namespace sgs
