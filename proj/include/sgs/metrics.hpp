#pragma once

#include "sgs/core.hpp"

#include <array>
#include <span>
#include <utility>
#include <vector>

namespace sgs {

/// Normalized 1-D histogram; `mass` sums to one.
struct Hist1D {
  std::vector<double> edges;
  std::vector<double> mass;
};

/// 2-D histogram on explicit edges. counts(i, j) covers
/// [xedges[i], xedges[i+1]) x [yedges[j], yedges[j+1]); the last edge is closed.
struct Hist2D {
  std::vector<double> xedges;
  std::vector<double> yedges;
  Eigen::MatrixXd counts;

  [[nodiscard]] double total() const { return counts.sum(); }
  /// Probability mass function (counts / total).
  [[nodiscard]] Eigen::MatrixXd mass() const;
};

/// Exact W1 between the empirical distributions of `a` and `b`
/// (integral of |F_a - F_b| over the merged support).
double wasserstein1(std::span<const double> a, std::span<const double> b);

/// Evenly spaced edges; the range is widened by `pad` of its extent on both
/// sides (a degenerate range is widened to +-0.5).
std::vector<double> linear_edges(double lo, double hi, std::size_t bins, double pad = 0.0);

Hist1D histogram1d(std::span<const double> samples, std::size_t bins, double lo, double hi);

Hist2D histogram2d(std::span<const double> x, std::span<const double> y, std::vector<double> xedges,
                   std::vector<double> yedges);

/// sqrt(1/2 sum (sqrt p - sqrt q)^2) for two mass functions of equal shape.
double hellinger(const Eigen::MatrixXd& p, const Eigen::MatrixXd& q);

/// Hellinger distance between the 2-D projections of two trajectories onto
/// `axes`, binned on shared edges spanning the union support padded by 5%.
double hellinger2d(const Trajectory& a, const Trajectory& b, std::pair<int, int> axes, std::size_t bins = 50);

/// W1 of each coordinate's marginal.
std::array<double, 3> per_coordinate_w1(const Trajectory& a, const Trajectory& b);

/// Hellinger on the (x, y), (x, z), (y, z) projections.
std::array<double, 3> projected_hellinger(const Trajectory& a, const Trajectory& b, std::size_t bins = 50);

}  // namespace sgs
