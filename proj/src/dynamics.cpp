#include "sgs/dynamics.hpp"

#include "sgs/rng.hpp"

#include <algorithm>

namespace sgs {

std::vector<double> Trajectory::component(int axis) const {
  std::vector<double> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(s(axis));
  return out;
}

Scheme parse_scheme(std::string_view name) {
  if (name == "rk2") return Scheme::rk2;
  if (name == "rk4") return Scheme::rk4;
  throw InvalidArgument("unknown integration scheme '" + std::string(name) + "'");
}

std::string_view scheme_name(Scheme s) { return s == Scheme::rk2 ? "rk2" : "rk4"; }

Trajectory integrate_lorenz(const Vec3& x0, double dt, std::size_t n, const Params& p, Scheme scheme) {
  return integrate_ode([&p](const Vec3& x) { return lorenz_rhs(x, p); }, x0, dt, n, scheme);
}

namespace {

template <typename Step>
Rollout step_until_blowup(const Vec3& x0, double dt, std::size_t n, Step&& step) {
  Rollout out;
  out.path.dt = dt;
  out.path.states.reserve(n + 1);
  out.path.states.push_back(x0);
  Vec3 x = x0;
  for (std::size_t i = 0; i < n; ++i) {
    x = step(x, i);
    if (!x.allFinite()) {
      out.blew_up = true;
      break;
    }
    out.path.states.push_back(x);
  }
  return out;
}

}  // namespace

Rollout forward_euler(const Vec3& x0, double dt, std::size_t n, const Params& p) {
  return step_until_blowup(x0, dt, n, [&](const Vec3& x, std::size_t) { return Vec3(x + dt * lorenz_rhs(x, p)); });
}

Rollout runge_kutta(const Vec3& x0, double dt, std::size_t n, const Params& p, Scheme scheme) {
  auto f = [&p](const Vec3& x) { return lorenz_rhs(x, p); };
  return step_until_blowup(x0, dt, n, [&](const Vec3& x, std::size_t) { return rk_step(f, x, dt, scheme); });
}

Rollout integrate_linearized(const Trajectory& nominal, const Vec3& xt0, const Params& p) {
  if (nominal.empty()) throw EmptyInput("integrate_linearized: empty nominal trajectory");
  const double dt = nominal.dt;
  Rollout out = step_until_blowup(xt0, dt, nominal.size() - 1, [&](const Vec3& xt, std::size_t i) {
    return Vec3(xt + lorenz_jacobian(nominal[i], p) * xt * dt);
  });
  out.path.t0 = nominal.t0;
  return out;
}

std::vector<double> simulate_linear_sde(double lambda, double mu, double x0, double dt, std::size_t n,
                                        std::uint64_t seed) {
  if (!(dt > 0.0)) throw InvalidArgument("simulate_linear_sde: dt must be positive");
  Rng rng(seed);
  const double sqdt = std::sqrt(dt);
  std::vector<double> path;
  path.reserve(n + 1);
  double x = x0;
  path.push_back(x);
  for (std::size_t i = 0; i < n; ++i) {
    x += lambda * x * dt + mu * x * sqdt * rng.normal();
    path.push_back(x);
  }
  return path;
}

double max_norm(const Trajectory& traj) {
  double m = 0.0;
  for (const auto& s : traj.states) m = std::max(m, s.norm());
  return m;
}

double attractor_diameter(const Trajectory& traj, std::size_t max_points) {
  if (traj.empty()) return 0.0;
  const std::size_t stride = std::max<std::size_t>(1, traj.size() / std::max<std::size_t>(1, max_points));
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < traj.size(); i += stride) pts.push_back(traj[i]);
  double d2 = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) d2 = std::max(d2, (pts[i] - pts[j]).squaredNorm());
  return std::sqrt(d2);
}

}  // namespace sgs
