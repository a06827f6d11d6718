#pragma once

#include "sgs/core.hpp"
#include "sgs/dynamics.hpp"

#include <cstddef>
#include <vector>

namespace sgs {

/// Box filter of temporal width `width` realised as a composite trapezoid rule
/// over `stride + 1` fine samples (width = stride * fine dt, stride even).
struct FilterSpec {
  double width = 0.0;
  std::size_t stride = 0;

  /// Box filter of width `delta` on a grid of spacing `dt`.
  static FilterSpec from_width(double delta, double dt);

  /// Throws InvalidArgument unless width > 0, stride >= 1 and width matches stride * dt.
  void validate(double dt) const;

  /// Fine-grid index of the first retained (fully stencilled) sample.
  [[nodiscard]] std::size_t offset() const { return stride / 2; }
};

/// Aligned series on a common grid: fine[i] = filtered[i] + fluctuations[i].
struct FilteredBundle {
  Trajectory fine;
  Trajectory filtered;
  Trajectory fluctuations;
  Trajectory exact_tau;
  FilterSpec spec;
  std::size_t offset = 0;  ///< index of element 0 in the source fine trajectory
  std::size_t step = 1;    ///< source-grid stride between consecutive elements

  [[nodiscard]] std::size_t size() const { return filtered.size(); }
};

/// Trapezoid weights (1/(2K), 1/K, ..., 1/K, 1/(2K)).
std::vector<double> trapezoid_weights(std::size_t stride);

/// Centred box filter. Output element i sits at fine index i + stride/2; the
/// returned trajectory's t0 is shifted accordingly.
Trajectory box_filter(const Trajectory& traj, const FilterSpec& spec);

/// tau_i = filter(f(x))_i - f(xbar_i), with identical weights for both filters.
FilteredBundle compute_exact_sgs(const Trajectory& fine, const FilterSpec& spec, const Params& p = {});

/// Keeps every `step`-th element of every series.
FilteredBundle subsample(const FilteredBundle& bundle, std::size_t step);

/// Every `step`-th state of a trajectory (dt scaled by step).
Trajectory subsample(const Trajectory& traj, std::size_t step);

}  // namespace sgs
