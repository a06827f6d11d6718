#include "sgs/parametric.hpp"

#include <cmath>
#include <numbers>

namespace sgs {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2 pi) / 2

Eigen::VectorXd as_vector(const Vec3& a) { return Eigen::VectorXd(a); }

Eigen::VectorXd concat(const Vec3& a, const Vec3& b) {
  Eigen::VectorXd v(6);
  v << a, b;
  return v;
}

void check_finite_loss(double loss, const char* what) {
  if (!std::isfinite(loss)) throw NonFiniteLoss(std::string(what) + ": loss is not finite");
}

}  // namespace

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

ClosureModel ClosureModel::create(const std::vector<std::size_t>& hidden, Activation act, std::uint64_t seed,
                                  bool residual) {
  ClosureModel m;
  m.net = Mlp::random(MlpSpec{3, 6, hidden, act, residual}, seed);
  return m;
}

void ClosureModel::evaluate(const Vec3& xbar, Vec3& drift, Vec3& diffusion) const {
  const Eigen::VectorXd out = net.evaluate(as_vector(xbar));
  drift = out.head<3>();
  for (int i = 0; i < 3; ++i) diffusion(i) = softplus(out(3 + i)) + diffusion_floor;
}

StabilizerModel StabilizerModel::create(const std::vector<std::size_t>& hidden, Activation act, std::uint64_t seed,
                                        bool residual) {
  StabilizerModel m;
  m.net = Mlp::random(MlpSpec{6, 3, hidden, act, residual}, seed);
  return m;
}

Vec3 StabilizerModel::diffusion(const Vec3& x, const Vec3& xt) const {
  const Eigen::VectorXd out = net.evaluate(concat(x, xt));
  Vec3 s;
  for (int i = 0; i < 3; ++i) s(i) = softplus(out(i)) + diffusion_floor;
  return s;
}

std::vector<PairSample> gen_pairs(const Trajectory& fine, const FilterSpec& spec) {
  const Trajectory xbar = box_filter(fine, spec);
  const std::size_t k = spec.stride;
  const double h = static_cast<double>(k) * fine.dt;
  std::vector<PairSample> out;
  if (xbar.size() <= k) return out;
  out.reserve(xbar.size() - k);
  for (std::size_t i = 0; i + k < xbar.size(); ++i) out.push_back({xbar[i], xbar[i + k], h});
  return out;
}

std::vector<PerturbSample> gen_perturb(const Trajectory& nominal, std::size_t k, double eps, std::uint64_t seed,
                                       const Params& p) {
  if (!(eps > 0.0)) throw InvalidArgument("gen_perturb: eps must be positive");
  if (k < 1) throw InvalidArgument("gen_perturb: need at least one perturbation per state");
  if (nominal.empty()) throw EmptyInput("gen_perturb: empty nominal trajectory");
  const double dt = nominal.dt;
  Rng rng(seed);
  std::vector<PerturbSample> out;
  out.reserve(k * nominal.size());
  for (const Vec3& xn : nominal.states) {
    const Vec3 next = xn + lorenz_rhs(xn, p) * dt;
    for (std::size_t j = 0; j < k; ++j) {
      const Vec3 xt0 = eps * rng.normal3();
      const Vec3 xk = xn + xt0;
      const Vec3 xk1 = xk + lorenz_rhs(xk, p) * dt;
      out.push_back({xn, xt0, Vec3(xk1 - next), dt});
    }
  }
  return out;
}

double gaussian_nll_diag(const Vec3& residual, const Vec3& variance) {
  double l = 3.0 * kHalfLog2Pi;
  for (int i = 0; i < 3; ++i) l += 0.5 * std::log(variance(i)) + 0.5 * residual(i) * residual(i) / variance(i);
  return l;
}

double nll_closure(const ClosureModel& model, const PairSample& s, const Params& p) {
  Vec3 drift, gamma;
  model.evaluate(s.xbar0, drift, gamma);
  const Vec3 a = s.xbar0 + (lorenz_rhs(s.xbar0, p) + drift) * s.h;
  const double l = gaussian_nll_diag(s.xbarh - a, (gamma.array().square() * s.h).matrix());
  check_finite_loss(l, "nll_closure");
  return l;
}

double nll_stabilizer(const StabilizerModel& model, const PerturbSample& s, const Params& p) {
  const Vec3 sigma = model.diffusion(s.xn, s.xt0);
  const Vec3 a = s.xt0 + lorenz_jacobian(s.xn, p) * s.xt0 * s.dt;
  const double l = gaussian_nll_diag(s.xt1 - a, (sigma.array().square() * s.dt).matrix());
  check_finite_loss(l, "nll_stabilizer");
  return l;
}

LossGrad nll_closure_batch(const ClosureModel& model, std::span<const PairSample> data,
                           std::span<const std::size_t> indices, const Params& p) {
  const auto b = static_cast<Eigen::Index>(indices.size());
  if (b == 0) throw EmptyInput("nll_closure_batch: empty batch");
  Batch x0(3, b);
  for (Eigen::Index j = 0; j < b; ++j) x0.col(j) = data[indices[static_cast<std::size_t>(j)]].xbar0;
  Tape tape;
  const Batch out = model.net.forward(x0, tape);
  Batch d_out(6, b);
  const double inv_b = 1.0 / static_cast<double>(b);
  double total = 0.0;
  for (Eigen::Index j = 0; j < b; ++j) {
    const PairSample& s = data[indices[static_cast<std::size_t>(j)]];
    const Vec3 a = s.xbar0 + (lorenz_rhs(s.xbar0, p) + out.col(j).head<3>()) * s.h;
    const Vec3 r = s.xbarh - a;
    total += 3.0 * kHalfLog2Pi;
    for (int i = 0; i < 3; ++i) {
      const double raw = out(3 + i, j);
      const double g = softplus(raw) + model.diffusion_floor;
      const double var = g * g * s.h;
      total += 0.5 * std::log(var) + 0.5 * r(i) * r(i) / var;
      d_out(i, j) = -s.h * r(i) / var * inv_b;
      d_out(3 + i, j) = (1.0 / g - r(i) * r(i) / (g * g * g * s.h)) * sigmoid(raw) * inv_b;
    }
  }
  LossGrad lg;
  lg.loss = total * inv_b;
  check_finite_loss(lg.loss, "nll_closure_batch");
  lg.grad = Eigen::VectorXd::Zero(model.net.params().size());
  model.net.backward(tape, d_out, lg.grad);
  return lg;
}

LossGrad nll_stabilizer_batch(const StabilizerModel& model, std::span<const PerturbSample> data,
                              std::span<const std::size_t> indices, const Params& p) {
  const auto b = static_cast<Eigen::Index>(indices.size());
  if (b == 0) throw EmptyInput("nll_stabilizer_batch: empty batch");
  Batch in(6, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const PerturbSample& s = data[indices[static_cast<std::size_t>(j)]];
    in.col(j) << s.xn, s.xt0;
  }
  Tape tape;
  const Batch out = model.net.forward(in, tape);
  Batch d_out(3, b);
  const double inv_b = 1.0 / static_cast<double>(b);
  double total = 0.0;
  for (Eigen::Index j = 0; j < b; ++j) {
    const PerturbSample& s = data[indices[static_cast<std::size_t>(j)]];
    const Vec3 r = s.xt1 - (s.xt0 + lorenz_jacobian(s.xn, p) * s.xt0 * s.dt);
    total += 3.0 * kHalfLog2Pi;
    for (int i = 0; i < 3; ++i) {
      const double raw = out(i, j);
      const double g = softplus(raw) + model.diffusion_floor;
      const double var = g * g * s.dt;
      total += 0.5 * std::log(var) + 0.5 * r(i) * r(i) / var;
      d_out(i, j) = (1.0 / g - r(i) * r(i) / (g * g * g * s.dt)) * sigmoid(raw) * inv_b;
    }
  }
  LossGrad lg;
  lg.loss = total * inv_b;
  check_finite_loss(lg.loss, "nll_stabilizer_batch");
  lg.grad = Eigen::VectorXd::Zero(model.net.params().size());
  model.net.backward(tape, d_out, lg.grad);
  return lg;
}

namespace {

template <typename Model, typename Sample, typename BatchFn>
double mean_over(const Model& model, std::span<const Sample> data, const Params& p, BatchFn&& fn) {
  if (data.empty()) throw EmptyInput("mean_nll: empty dataset");
  constexpr std::size_t chunk = 4096;
  std::vector<std::size_t> idx;
  double total = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    idx.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
    total += fn(model, data, std::span<const std::size_t>(idx), p).loss * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(data.size());
}

}  // namespace

double mean_nll(const ClosureModel& model, std::span<const PairSample> data, const Params& p) {
  return mean_over(model, data, p, nll_closure_batch);
}

double mean_nll(const StabilizerModel& model, std::span<const PerturbSample> data, const Params& p) {
  return mean_over(model, data, p, nll_stabilizer_batch);
}

TrainResult train_closure(ClosureModel& model, AdamState& opt, std::span<const PairSample> data,
                          const TrainConfig& cfg, const Params& p, std::size_t first_epoch) {
  return train(
      model.net, opt, data.size(),
      [&](const Mlp&, std::span<const std::size_t> idx, Rng&) { return nll_closure_batch(model, data, idx, p); }, cfg,
      first_epoch);
}

TrainResult train_stabilizer(StabilizerModel& model, AdamState& opt, std::span<const PerturbSample> data,
                             const TrainConfig& cfg, const Params& p, std::size_t first_epoch) {
  return train(
      model.net, opt, data.size(),
      [&](const Mlp&, std::span<const std::size_t> idx, Rng&) { return nll_stabilizer_batch(model, data, idx, p); },
      cfg, first_epoch);
}

ClosureModel train_closure(std::span<const PairSample> data, const MlpSpec& spec, const TrainConfig& cfg,
                           const Params& p, TrainResult* result) {
  if (data.empty()) throw EmptyInput("train_closure: empty dataset");
  ClosureModel model = ClosureModel::create(spec.hidden, spec.activation, named_seed(cfg.seed, "init"), spec.residual);
  model.h = data.front().h;
  Batch x0(3, static_cast<Eigen::Index>(data.size()));
  for (std::size_t j = 0; j < data.size(); ++j) x0.col(static_cast<Eigen::Index>(j)) = data[j].xbar0;
  model.net.fit_input_normalization(x0);
  AdamState opt = AdamState::for_model(model.net, cfg.lr);
  TrainResult r = train_closure(model, opt, data, cfg, p);
  if (result != nullptr) *result = std::move(r);
  return model;
}

StabilizerModel train_stabilizer(std::span<const PerturbSample> data, const MlpSpec& spec, const TrainConfig& cfg,
                                 const Params& p, TrainResult* result) {
  if (data.empty()) throw EmptyInput("train_stabilizer: empty dataset");
  StabilizerModel model =
      StabilizerModel::create(spec.hidden, spec.activation, named_seed(cfg.seed, "init"), spec.residual);
  Batch in(6, static_cast<Eigen::Index>(data.size()));
  for (std::size_t j = 0; j < data.size(); ++j) in.col(static_cast<Eigen::Index>(j)) << data[j].xn, data[j].xt0;
  model.net.fit_input_normalization(in);
  AdamState opt = AdamState::for_model(model.net, cfg.lr);
  TrainResult r = train_stabilizer(model, opt, data, cfg, p);
  if (result != nullptr) *result = std::move(r);
  return model;
}

Rollout rollout_closure(const ClosureModel& model, const Vec3& xbar0, double h, std::size_t n, std::uint64_t seed,
                        const Params& p) {
  if (!(h > 0.0)) throw InvalidArgument("rollout_closure: h must be positive");
  Vec3 drift, gamma;
  // The diffusion callback runs after the drift callback on the same state.
  return euler_maruyama(
      [&](const Vec3& x, std::size_t) {
        model.evaluate(x, drift, gamma);
        return Vec3(lorenz_rhs(x, p) + drift);
      },
      [&](const Vec3&, std::size_t) { return gamma; }, xbar0, h, n, seed);
}

Trajectory reconstruct(const Trajectory& nominal, const Trajectory& tangent) {
  if (tangent.size() > nominal.size()) throw DimMismatch("reconstruct: tangent outlives the nominal");
  Trajectory out;
  out.dt = nominal.dt;
  out.t0 = nominal.t0;
  out.states.reserve(tangent.size());
  for (std::size_t i = 0; i < tangent.size(); ++i) out.states.push_back(nominal[i] + tangent[i]);
  return out;
}

StabilizedRollout rollout_stabilized(const StabilizerModel& model, const Trajectory& nominal, const Vec3& xt0,
                                     std::uint64_t seed, const Params& p) {
  if (nominal.size() < 2) throw EmptyInput("rollout_stabilized: nominal needs at least two states");
  StabilizedRollout out;
  out.tangent = euler_maruyama([&](const Vec3& xt, std::size_t i) { return Vec3(lorenz_jacobian(nominal[i], p) * xt); },
                               [&](const Vec3& xt, std::size_t i) { return model.diffusion(nominal[i], xt); }, xt0,
                               nominal.dt, nominal.size() - 1, seed);
  out.tangent.path.t0 = nominal.t0;
  out.reconstructed = reconstruct(nominal, out.tangent.path);
  return out;
}

}  // namespace sgs
