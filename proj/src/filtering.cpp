#include "sgs/filtering.hpp"

#include <cmath>
#include <string>

namespace sgs {

FilterSpec FilterSpec::from_width(double delta, double dt) {
  if (!(delta > 0.0) || !(dt > 0.0)) throw InvalidArgument("filter width and dt must be positive");
  const double k = std::round(delta / dt);
  if (k < 1.0 || std::abs(k * dt - delta) > 1e-12)
    throw InvalidArgument("filter width " + std::to_string(delta) + " is not a multiple of dt " + std::to_string(dt));
  return {delta, static_cast<std::size_t>(k)};
}

void FilterSpec::validate(double dt) const {
  if (!(width > 0.0)) throw InvalidArgument("filter width must be positive");
  if (stride < 1) throw InvalidArgument("filter stride must be >= 1");
  if (std::abs(width - static_cast<double>(stride) * dt) > 1e-12)
    throw InvalidArgument("filter width does not equal stride * dt");
}

std::vector<double> trapezoid_weights(std::size_t stride) {
  const double k = static_cast<double>(stride);
  std::vector<double> w(stride + 1, 1.0 / k);
  w.front() = w.back() = 0.5 / k;
  return w;
}

namespace {

void check_stencil(std::size_t length, const FilterSpec& spec) {
  if (spec.stride % 2 != 0) throw OddStride("box filter needs an even stride, got " + std::to_string(spec.stride));
  if (length < spec.stride + 1)
    throw StencilTooWide("trajectory of length " + std::to_string(length) + " is shorter than the stencil (" +
                         std::to_string(spec.stride + 1) + ")");
}

std::vector<Vec3> apply_weights(const std::vector<Vec3>& xs, const std::vector<double>& w) {
  const std::size_t k = w.size() - 1;
  std::vector<Vec3> out(xs.size() - k);
  for (std::size_t i = 0; i < out.size(); ++i) {
    Vec3 acc = Vec3::Zero();
    for (std::size_t j = 0; j <= k; ++j) acc += w[j] * xs[i + j];
    out[i] = acc;
  }
  return out;
}

Trajectory slice(const Trajectory& src, std::size_t begin, std::size_t count) {
  Trajectory t;
  t.dt = src.dt;
  t.t0 = src.time(begin);
  t.states.assign(src.states.begin() + static_cast<std::ptrdiff_t>(begin),
                  src.states.begin() + static_cast<std::ptrdiff_t>(begin + count));
  return t;
}

}  // namespace

Trajectory box_filter(const Trajectory& traj, const FilterSpec& spec) {
  spec.validate(traj.dt);
  check_stencil(traj.size(), spec);
  Trajectory out;
  out.dt = traj.dt;
  out.t0 = traj.time(spec.offset());
  out.states = apply_weights(traj.states, trapezoid_weights(spec.stride));
  return out;
}

FilteredBundle compute_exact_sgs(const Trajectory& fine, const FilterSpec& spec, const Params& p) {
  FilteredBundle b;
  b.spec = spec;
  b.offset = spec.offset();
  b.filtered = box_filter(fine, spec);

  std::vector<Vec3> fx;
  fx.reserve(fine.size());
  for (const auto& x : fine.states) fx.push_back(lorenz_rhs(x, p));
  const std::vector<Vec3> filtered_f = apply_weights(fx, trapezoid_weights(spec.stride));

  const std::size_t n = b.filtered.size();
  b.fine = slice(fine, b.offset, n);
  b.fluctuations = b.filtered;
  b.exact_tau = b.filtered;
  for (std::size_t i = 0; i < n; ++i) {
    b.fluctuations[i] = b.fine[i] - b.filtered[i];
    b.exact_tau[i] = filtered_f[i] - lorenz_rhs(b.filtered[i], p);
  }
  return b;
}

Trajectory subsample(const Trajectory& traj, std::size_t step) {
  if (step < 1) throw InvalidArgument("subsample step must be >= 1");
  Trajectory out;
  out.dt = traj.dt * static_cast<double>(step);
  out.t0 = traj.t0;
  for (std::size_t i = 0; i < traj.size(); i += step) out.states.push_back(traj[i]);
  return out;
}

FilteredBundle subsample(const FilteredBundle& bundle, std::size_t step) {
  FilteredBundle out;
  out.spec = bundle.spec;
  out.offset = bundle.offset;
  out.step = bundle.step * step;
  out.fine = subsample(bundle.fine, step);
  out.filtered = subsample(bundle.filtered, step);
  out.fluctuations = subsample(bundle.fluctuations, step);
  out.exact_tau = subsample(bundle.exact_tau, step);
  return out;
}

}  // namespace sgs
