#include "sgs/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace sgs {

Eigen::MatrixXd Hist2D::mass() const {
  const double t = total();
  if (t <= 0.0) throw EmptyInput("histogram has no mass");
  return counts / t;
}

double wasserstein1(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw EmptyInput("wasserstein1: empty sample set");
  std::vector<double> sa(a.begin(), a.end());
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());

  const double na = static_cast<double>(sa.size());
  const double nb = static_cast<double>(sb.size());
  std::size_t i = 0;
  std::size_t j = 0;
  double prev = std::min(sa.front(), sb.front());
  double total = 0.0;
  // Sweep the merged support; between consecutive breakpoints both cdfs are constant.
  while (i < sa.size() || j < sb.size()) {
    double next;
    if (j >= sb.size() || (i < sa.size() && sa[i] <= sb[j]))
      next = sa[i];
    else
      next = sb[j];
    total += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (next - prev);
    while (i < sa.size() && sa[i] == next) ++i;
    while (j < sb.size() && sb[j] == next) ++j;
    prev = next;
  }
  return total;
}

std::vector<double> linear_edges(double lo, double hi, std::size_t bins, double pad) {
  if (bins < 1) throw InvalidArgument("need at least one bin");
  if (!(hi >= lo)) throw InvalidArgument("histogram range is empty");
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  } else {
    const double extra = pad * (hi - lo);
    lo -= extra;
    hi += extra;
  }
  std::vector<double> edges(bins + 1);
  for (std::size_t k = 0; k <= bins; ++k)
    edges[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(bins);
  edges.back() = hi;
  return edges;
}

namespace {

// Bin index for v, or -1 when v lies outside [edges.front(), edges.back()].
long locate(const std::vector<double>& edges, double v) {
  if (!(v >= edges.front() && v <= edges.back())) return -1;
  if (v == edges.back()) return static_cast<long>(edges.size()) - 2;
  auto it = std::upper_bound(edges.begin(), edges.end(), v);
  return static_cast<long>(it - edges.begin()) - 1;
}

}  // namespace

Hist1D histogram1d(std::span<const double> samples, std::size_t bins, double lo, double hi) {
  if (!(hi > lo)) throw InvalidArgument("histogram1d: empty range");
  if (samples.empty()) throw EmptyInput("histogram1d: no samples");
  Hist1D h;
  h.edges = linear_edges(lo, hi, bins);
  h.mass.assign(bins, 0.0);
  double n = 0.0;
  for (double s : samples) {
    const long k = locate(h.edges, s);
    if (k < 0) continue;
    h.mass[static_cast<std::size_t>(k)] += 1.0;
    n += 1.0;
  }
  if (n == 0.0) throw EmptyInput("histogram1d: no samples inside the range");
  for (double& m : h.mass) m /= n;
  return h;
}

Hist2D histogram2d(std::span<const double> x, std::span<const double> y, std::vector<double> xedges,
                   std::vector<double> yedges) {
  if (x.size() != y.size()) throw DimMismatch("histogram2d: coordinate arrays differ in length");
  Hist2D h;
  h.xedges = std::move(xedges);
  h.yedges = std::move(yedges);
  h.counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h.xedges.size() - 1),
                                   static_cast<Eigen::Index>(h.yedges.size() - 1));
  for (std::size_t k = 0; k < x.size(); ++k) {
    const long i = locate(h.xedges, x[k]);
    const long j = locate(h.yedges, y[k]);
    if (i >= 0 && j >= 0) h.counts(i, j) += 1.0;
  }
  return h;
}

double hellinger(const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw DimMismatch("hellinger: shape mismatch");
  const double s = (p.array().sqrt() - q.array().sqrt()).square().sum();
  return std::sqrt(std::clamp(0.5 * s, 0.0, 1.0));
}

double hellinger2d(const Trajectory& a, const Trajectory& b, std::pair<int, int> axes, std::size_t bins) {
  if (a.empty() || b.empty()) throw EmptyInput("hellinger2d: empty trajectory");
  const auto [ia, ib] = axes;
  const auto ax = a.component(ia), ay = a.component(ib);
  const auto bx = b.component(ia), by = b.component(ib);
  auto bounds = [](const std::vector<double>& u, const std::vector<double>& v) {
    const auto [ulo, uhi] = std::minmax_element(u.begin(), u.end());
    const auto [vlo, vhi] = std::minmax_element(v.begin(), v.end());
    return std::pair{std::min(*ulo, *vlo), std::max(*uhi, *vhi)};
  };
  const auto [xlo, xhi] = bounds(ax, bx);
  const auto [ylo, yhi] = bounds(ay, by);
  const auto xe = linear_edges(xlo, xhi, bins, 0.05);
  const auto ye = linear_edges(ylo, yhi, bins, 0.05);
  const Hist2D ha = histogram2d(ax, ay, xe, ye);
  const Hist2D hb = histogram2d(bx, by, xe, ye);
  return hellinger(ha.mass(), hb.mass());
}

std::array<double, 3> per_coordinate_w1(const Trajectory& a, const Trajectory& b) {
  std::array<double, 3> out{};
  for (int k = 0; k < 3; ++k) out[static_cast<std::size_t>(k)] = wasserstein1(a.component(k), b.component(k));
  return out;
}

std::array<double, 3> projected_hellinger(const Trajectory& a, const Trajectory& b, std::size_t bins) {
  return {hellinger2d(a, b, {0, 1}, bins), hellinger2d(a, b, {0, 2}, bins), hellinger2d(a, b, {1, 2}, bins)};
}

}  // namespace sgs
