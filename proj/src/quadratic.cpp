#include "sgs/quadratic.hpp"

#include <cmath>

namespace sgs {

QuadCoeffs QuadCoeffs::at(const Vec3& xbar, double delta, const Params& p) {
  if (!(delta > 0.0)) throw InvalidArgument("QuadCoeffs: delta must be positive");
  const Mat3d j = lorenz_jacobian(xbar, p);
  const auto h = lorenz_hessians<double>(p);
  QuadCoeffs c;
  c.delta = delta;
  const double k = delta * delta / 12.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const Mat3d m = h[i] + k * j.transpose() * h[i] * j;
    c.a[i] = 0.5 * (m + m.transpose());
  }
  return c;
}

Vec3 QuadCoeffs::apply(const Vec3& xprime) const {
  return {0.5 * xprime.dot(a[0] * xprime), 0.5 * xprime.dot(a[1] * xprime), 0.5 * xprime.dot(a[2] * xprime)};
}

Vec3 tau_quad(const Vec3& xbar, const Vec3& xprime, double delta, const Params& p) {
  return QuadCoeffs::at(xbar, delta, p).apply(xprime);
}

QuadReport verify_quad(const FilteredBundle& bundle, const Params& p) {
  if (bundle.size() == 0) throw EmptyInput("verify_quad: empty bundle");
  if (bundle.fluctuations.size() != bundle.size() || bundle.exact_tau.size() != bundle.size())
    throw DimMismatch("verify_quad: bundle series have different lengths");
  QuadReport r;
  r.delta = bundle.spec.width;
  r.exact = bundle.exact_tau;
  r.modeled = bundle.exact_tau;
  Vec3 err2 = Vec3::Zero(), ref2 = Vec3::Zero();
  for (std::size_t i = 0; i < bundle.size(); ++i) {
    r.modeled[i] = tau_quad(bundle.filtered[i], bundle.fluctuations[i], r.delta, p);
    err2 += (r.modeled[i] - r.exact[i]).cwiseAbs2();
    ref2 += r.exact[i].cwiseAbs2();
  }
  const double n = static_cast<double>(bundle.size());
  for (int c = 0; c < 3; ++c) {
    const bool degenerate = std::sqrt(ref2(c) / n) < 1e-9;
    r.rel_l2(c) = degenerate ? std::sqrt(err2(c) / n) : std::sqrt(err2(c) / ref2(c));
  }
  return r;
}

std::vector<ConvergenceRow> quad_convergence(const Trajectory& fine, std::span<const double> deltas, const Params& p) {
  std::vector<ConvergenceRow> rows;
  rows.reserve(deltas.size());
  for (double d : deltas) {
    const FilteredBundle b = compute_exact_sgs(fine, FilterSpec::from_width(d, fine.dt), p);
    rows.push_back({d, verify_quad(b, p).rel_l2});
  }
  return rows;
}

ConditionalDataset build_fluct_dataset(const FilteredBundle& bundle) {
  if (bundle.fluctuations.size() != bundle.size()) throw DimMismatch("build_fluct_dataset: misaligned bundle");
  const auto n = static_cast<Eigen::Index>(bundle.size());
  ConditionalDataset d;
  d.target.resize(3, n);
  d.cond.resize(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d.target.col(i) = bundle.fluctuations[static_cast<std::size_t>(i)];
    d.cond.col(i) = bundle.filtered[static_cast<std::size_t>(i)];
  }
  return d;
}

std::vector<Rollout> closure_rollouts_quadratic(const FlowScorePair& pair, const Vec3& xbar0, double h, std::size_t n,
                                                double delta, const GuidanceCfg& cfg,
                                                std::span<const std::uint64_t> seeds, const Params& p) {
  if (pair.cond_dim != 3) throw DimMismatch("quadratic rollout needs a pair conditioned on the 3 coarse states");
  if (!(delta > 0.0)) throw InvalidArgument("closure_rollouts_quadratic: delta must be positive");
  const auto forcing = [&](const Batch& xbar, std::span<Rng> rngs) {
    const Batch xp = sample_conditional(pair, xbar, cfg, rngs);
    Batch tau(3, xbar.cols());
    for (Eigen::Index j = 0; j < xbar.cols(); ++j) tau.col(j) = tau_quad(xbar.col(j), xp.col(j), delta, p);
    return tau;
  };
  return forced_rollouts(forcing, xbar0, h, n, seeds, p);
}

Rollout closure_rollout_quadratic(const FlowScorePair& pair, const Vec3& xbar0, double h, std::size_t n, double delta,
                                  const GuidanceCfg& cfg, std::uint64_t seed, const Params& p) {
  const std::uint64_t seeds[1] = {seed};
  return std::move(closure_rollouts_quadratic(pair, xbar0, h, n, delta, cfg, seeds, p).front());
}

}  // namespace sgs
