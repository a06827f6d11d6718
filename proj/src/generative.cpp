#include "sgs/generative.hpp"

#include <algorithm>
#include <cmath>

namespace sgs {

namespace {

void check_gamma(double gamma, const char* what) {
  if (!(gamma < 1.0)) throw GammaSingular(std::string(what) + ": gamma must be < 1");
  if (gamma < 0.0) throw InvalidArgument(std::string(what) + ": gamma must be >= 0");
}

}  // namespace

Vec3 path_sample(const Vec3& tau, double gamma, const Vec3& eps) {
  if (gamma < 0.0 || gamma > 1.0) throw InvalidArgument("path_sample: gamma outside [0, 1]");
  return GaussianPath::alpha(gamma) * tau + GaussianPath::beta(gamma) * eps;
}

Vec3 cond_vector_field(const Vec3& t, const Vec3& tau, double gamma) {
  check_gamma(gamma, "cond_vector_field");
  return GaussianPath::alpha_dot(gamma) * tau + GaussianPath::beta_rate(gamma) * (t - GaussianPath::alpha(gamma) * tau);
}

Vec3 cond_score(const Vec3& t, const Vec3& tau, double gamma) {
  check_gamma(gamma, "cond_score");
  return -(t - GaussianPath::alpha(gamma) * tau) / (1.0 - gamma);
}

void GuidanceCfg::validate() const {
  if (!(w >= 0.0)) throw InvalidArgument("guidance scale w must be >= 0");
  if (!(eta >= 0.0 && eta <= 1.0) || !(eta_score >= 0.0 && eta_score <= 1.0))
    throw InvalidArgument("eta must lie in [0, 1]");
  if (!(sigma_gamma >= 0.0)) throw InvalidArgument("sigma_gamma must be >= 0");
  if (!(d_gamma > 0.0)) throw InvalidArgument("d_gamma must be positive");
  if (!(gamma_max > 0.0 && gamma_max < 1.0)) throw InvalidArgument("gamma_max must lie in (0, 1)");
}

GuidanceCfg GuidanceCfg::flow_closure() { return {}; }

GuidanceCfg GuidanceCfg::score_closure() {
  GuidanceCfg c;
  c.w = 1.5;
  c.sigma_gamma = 0.15;
  c.d_gamma = 0.0001;
  return c;
}

GuidanceCfg GuidanceCfg::stabilization() {
  GuidanceCfg c;
  c.w = 0.1;
  c.eta = 0.2;
  c.eta_score = 0.5;
  c.sigma_gamma = 0.5;
  c.d_gamma = 0.00014;
  c.enforce_linear_zero = false;
  return c;
}

GuidanceCfg GuidanceCfg::quadratic() {
  GuidanceCfg c;
  c.w = 1.5;
  c.sigma_gamma = 0.1;
  c.d_gamma = 0.0001;
  c.enforce_linear_zero = false;
  return c;
}

Standardizer Standardizer::identity(std::size_t dim) {
  const auto d = static_cast<Eigen::Index>(dim);
  return {Eigen::VectorXd::Zero(d), Eigen::VectorXd::Ones(d)};
}

Standardizer Standardizer::fit(const Batch& data) {
  if (data.cols() == 0) throw EmptyInput("Standardizer::fit: no samples");
  Standardizer s;
  s.shift = data.rowwise().mean();
  s.scale = ((data.colwise() - s.shift).array().square().rowwise().mean()).sqrt().matrix();
  for (Eigen::Index i = 0; i < s.scale.size(); ++i)
    if (!(s.scale(i) > 1e-10)) {
      s.shift(i) = 0.0;
      s.scale(i) = 1.0;
    }
  return s;
}

Batch Standardizer::forward(const Batch& v) const {
  if (v.rows() != shift.size()) throw DimMismatch("Standardizer: wrong row count");
  return (v.colwise() - shift).array().colwise() / scale.array();
}

Batch Standardizer::inverse(const Batch& z) const {
  if (z.rows() != shift.size()) throw DimMismatch("Standardizer: wrong row count");
  return (z.array().colwise() * scale.array()).matrix().colwise() + shift;
}

FlowScorePair FlowScorePair::create(std::size_t cond_dim, const std::vector<std::size_t>& flow_hidden,
                                    const std::vector<std::size_t>& score_hidden, Activation act,
                                    std::uint64_t seed) {
  FlowScorePair pair;
  pair.cond_dim = cond_dim;
  pair.cond_norm = Standardizer::identity(cond_dim);
  pair.flow = Mlp::random(MlpSpec{cond_dim + 5, 3, flow_hidden, act}, named_seed(seed, "flow"));
  if (!score_hidden.empty())
    pair.score = Mlp::random(MlpSpec{cond_dim + 5, 3, score_hidden, act}, named_seed(seed, "score"));
  return pair;
}

void FlowScorePair::fit_normalization(const ConditionalDataset& data) {
  if (data.cond_dim() != cond_dim) throw DimMismatch("fit_normalization: condition dimension mismatch");
  target_norm = Standardizer::fit(data.target);
  cond_norm = Standardizer::fit(data.cond);
}

Batch FlowScorePair::make_inputs(const Batch& t, double gamma, const Batch& cond, bool null) const {
  const Eigen::Index b = t.cols();
  const auto c = static_cast<Eigen::Index>(cond_dim);
  Batch in(input_dim(), b);
  in.topRows(3) = t;
  in.row(3).setConstant(gamma);
  if (null) {
    in.middleRows(4, c).setZero();
    in.row(4 + c).setOnes();
  } else {
    if (cond.rows() != c || cond.cols() != b) throw DimMismatch("make_inputs: condition batch has the wrong shape");
    in.middleRows(4, c) = cond_norm.forward(cond);
    in.row(4 + c).setZero();
  }
  return in;
}

BatchField as_field(const Mlp& net) {
  return [&net](const Batch& in) { return net.forward(in); };
}

PathDraw draw_path_batch(const FlowScorePair& pair, const ConditionalDataset& data,
                         std::span<const std::size_t> indices, double eta, double gamma_max, PathTarget kind,
                         Rng& rng) {
  if (indices.empty()) throw EmptyInput("draw_path_batch: empty batch");
  if (data.cond_dim() != pair.cond_dim) throw DimMismatch("draw_path_batch: condition dimension mismatch");
  const auto b = static_cast<Eigen::Index>(indices.size());
  const auto c = static_cast<Eigen::Index>(pair.cond_dim);
  Batch tau(3, b), cond(c, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto k = static_cast<Eigen::Index>(indices[static_cast<std::size_t>(j)]);
    tau.col(j) = data.target.col(k);
    cond.col(j) = data.cond.col(k);
  }
  tau = pair.target_norm.forward(tau);
  cond = pair.cond_norm.forward(cond);

  PathDraw d;
  d.inputs.resize(pair.input_dim(), b);
  d.target.resize(3, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const double gamma = rng.uniform(0.0, gamma_max);
    const Vec3 eps = rng.normal3();
    const bool drop = rng.uniform() < eta;
    const Vec3 tj = tau.col(j);
    const Vec3 t = path_sample(tj, gamma, eps);
    d.inputs.col(j).head<3>() = t;
    d.inputs(3, j) = gamma;
    if (drop) {
      d.inputs.col(j).segment(4, c).setZero();
      d.inputs(4 + c, j) = 1.0;
    } else {
      d.inputs.col(j).segment(4, c) = cond.col(j);
      d.inputs(4 + c, j) = 0.0;
    }
    d.target.col(j) = kind == PathTarget::velocity ? cond_vector_field(t, tj, gamma) : cond_score(t, tj, gamma);
  }
  return d;
}

namespace {

double dataset_loss(const BatchField& field, const FlowScorePair& pair, const ConditionalDataset& data, double eta,
                    std::uint64_t seed, double gamma_max, PathTarget kind) {
  if (data.size() == 0) throw EmptyInput("path loss: empty dataset");
  Rng rng(seed);
  constexpr std::size_t chunk = 2048;
  std::vector<std::size_t> idx;
  double total = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    idx.resize(end - begin);
    for (std::size_t i = begin; i < end; ++i) idx[i - begin] = i;
    const PathDraw d = draw_path_batch(pair, data, idx, eta, gamma_max, kind, rng);
    total += (field(d.inputs) - d.target).squaredNorm();
  }
  const double loss = total / static_cast<double>(data.size());
  if (!std::isfinite(loss)) throw NonFiniteLoss("path loss is not finite");
  return loss;
}

}  // namespace

double cfm_loss(const BatchField& field, const FlowScorePair& pair, const ConditionalDataset& data, double eta,
                std::uint64_t seed, double gamma_max) {
  return dataset_loss(field, pair, data, eta, seed, gamma_max, PathTarget::velocity);
}

double dsm_loss(const BatchField& field, const FlowScorePair& pair, const ConditionalDataset& data, double eta,
                std::uint64_t seed, double gamma_max) {
  return dataset_loss(field, pair, data, eta, seed, gamma_max, PathTarget::score);
}

LossGrad path_loss_grad(const Mlp& net, const FlowScorePair& pair, const ConditionalDataset& data,
                        std::span<const std::size_t> indices, double eta, double gamma_max, PathTarget kind,
                        Rng& rng) {
  const PathDraw d = draw_path_batch(pair, data, indices, eta, gamma_max, kind, rng);
  const Batch target = d.target;
  const double inv_b = 1.0 / static_cast<double>(indices.size());
  return loss_grad(net, d.inputs, [&](const Batch& out, Batch& d_out) {
    const Batch r = out - target;
    d_out = 2.0 * inv_b * r;
    return r.squaredNorm() * inv_b;
  });
}

namespace {

TrainResult train_head(Mlp& net, FlowScorePair& pair, AdamState& opt, const ConditionalDataset& data,
                       const TrainConfig& cfg, double eta, PathTarget kind, std::size_t first_epoch) {
  if (data.size() == 0) throw EmptyInput("train: empty dataset");
  constexpr double gamma_max = 1.0 - 1e-4;
  return train(
      net, opt, data.size(),
      [&](const Mlp& m, std::span<const std::size_t> idx, Rng& rng) {
        return path_loss_grad(m, pair, data, idx, eta, gamma_max, kind, rng);
      },
      cfg, first_epoch);
}

}  // namespace

TrainResult train_flow(FlowScorePair& pair, AdamState& opt, const ConditionalDataset& data, const TrainConfig& cfg,
                       double eta, std::size_t first_epoch) {
  return train_head(pair.flow, pair, opt, data, cfg, eta, PathTarget::velocity, first_epoch);
}

TrainResult train_score(FlowScorePair& pair, AdamState& opt, const ConditionalDataset& data, const TrainConfig& cfg,
                        double eta, std::size_t first_epoch) {
  if (!pair.score) throw InvalidArgument("train_score: the pair has no score network");
  return train_head(*pair.score, pair, opt, data, cfg, eta, PathTarget::score, first_epoch);
}

Batch guided_combine(const Batch& uncond, const Batch& cond, double w) { return (1.0 - w) * uncond + w * cond; }

Guided guided_combine(const FlowScorePair& pair, const Vec3& t, double gamma, const Eigen::VectorXd& cond, double w) {
  const Batch tb = t;
  const Batch cb = cond;
  const Batch in_c = pair.make_inputs(tb, gamma, cb, false);
  const Batch in_n = pair.make_inputs(tb, gamma, cb, true);
  Guided g;
  g.field = guided_combine(pair.flow.forward(in_n), pair.flow.forward(in_c), w).col(0);
  if (pair.score) g.score = Vec3(guided_combine(pair.score->forward(in_n), pair.score->forward(in_c), w).col(0));
  return g;
}

namespace {

// Guided output of `field` for conditional inputs `in_c` and null inputs `in_n`,
// skipping the branch whose weight is zero.
Batch guided(const BatchField& field, const Batch& in_c, const Batch& in_n, double w) {
  if (w == 1.0) return field(in_c);
  if (w == 0.0) return field(in_n);
  const Eigen::Index b = in_c.cols();
  Batch both(in_c.rows(), 2 * b);
  both.leftCols(b) = in_n;
  both.rightCols(b) = in_c;
  const Batch out = field(both);
  return guided_combine(out.leftCols(b), out.rightCols(b), w);
}

}  // namespace

Batch sample_sde(const BatchField& flow, const BatchField* score, const FlowScorePair& pair, const Batch& cond,
                 const GuidanceCfg& cfg, std::span<Rng> rngs) {
  cfg.validate();
  const Eigen::Index b = cond.cols();
  if (static_cast<std::size_t>(b) != rngs.size()) throw DimMismatch("sample_sde: one generator per sample required");
  if (cfg.sigma_gamma > 0.0 && score == nullptr)
    throw InvalidArgument("sample_sde: sigma_gamma > 0 needs a score network");
  Batch t(3, b);
  for (Eigen::Index j = 0; j < b; ++j) t.col(j) = rngs[static_cast<std::size_t>(j)].normal3();

  const auto steps = static_cast<std::size_t>(std::ceil(cfg.gamma_max / cfg.d_gamma - 1e-9));
  const double half_sigma2 = 0.5 * cfg.sigma_gamma * cfg.sigma_gamma;
  double gamma = 0.0;
  for (std::size_t k = 0; k < steps; ++k) {
    const double next = std::min(cfg.gamma_max, static_cast<double>(k + 1) * cfg.d_gamma);
    const double dg = next - gamma;
    const Batch in_c = pair.make_inputs(t, gamma, cond, false);
    const Batch in_n = pair.make_inputs(t, gamma, cond, true);
    Batch drift = guided(flow, in_c, in_n, cfg.w);
    if (cfg.sigma_gamma > 0.0) {
      drift += half_sigma2 * guided(*score, in_c, in_n, cfg.w);
      const double amp = cfg.sigma_gamma * std::sqrt(dg);
      for (Eigen::Index j = 0; j < b; ++j) t.col(j) += amp * rngs[static_cast<std::size_t>(j)].normal3();
    }
    t += dg * drift;
    gamma = next;
    if (!t.allFinite()) throw NonFiniteState("sample_sde: non-finite sample");
  }
  // Endpoint: jump to the denoised estimate implied by the guided velocity.
  const Batch u = guided(flow, pair.make_inputs(t, gamma, cond, false), pair.make_inputs(t, gamma, cond, true), cfg.w);
  t = (t + 2.0 * (1.0 - gamma) * u) / (2.0 - gamma);
  if (!t.allFinite()) throw NonFiniteState("sample_sde: non-finite sample");
  return t;
}

Batch sample_conditional(const FlowScorePair& pair, const Batch& cond, const GuidanceCfg& cfg, std::span<Rng> rngs) {
  const BatchField flow = as_field(pair.flow);
  BatchField score;
  if (pair.score) score = as_field(*pair.score);
  const bool use_score = pair.score.has_value() && cfg.sigma_gamma > 0.0;
  Batch out = pair.target_norm.inverse(sample_sde(flow, use_score ? &score : nullptr, pair, cond, cfg, rngs));
  if (cfg.enforce_linear_zero) out.row(0).setZero();
  return out;
}

Vec3 sample_sde(const FlowScorePair& pair, const Eigen::VectorXd& cond, const GuidanceCfg& cfg, std::uint64_t seed) {
  std::vector<Rng> rngs{Rng(seed)};
  return sample_conditional(pair, Batch(cond), cfg, rngs).col(0);
}

ConditionalDataset build_sgs_dataset(const FilteredBundle& bundle) {
  const auto n = static_cast<Eigen::Index>(bundle.size());
  ConditionalDataset d;
  d.target.resize(3, n);
  d.cond.resize(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d.target.col(i) = bundle.exact_tau[static_cast<std::size_t>(i)];
    d.cond.col(i) = bundle.filtered[static_cast<std::size_t>(i)];
  }
  return d;
}

ConditionalDataset build_stab_dataset(std::span<const PerturbSample> samples, const Params& p) {
  const auto n = static_cast<Eigen::Index>(samples.size());
  ConditionalDataset d;
  d.target.resize(3, n);
  d.cond.resize(6, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const PerturbSample& s = samples[static_cast<std::size_t>(i)];
    if (!(s.dt > 0.0)) throw InvalidArgument("build_stab_dataset: dt must be positive");
    d.target.col(i) = (s.xt1 - s.xt0 - lorenz_jacobian(s.xn, p) * s.xt0 * s.dt) / s.dt;
    d.cond.col(i) << s.xn, s.xt0;
  }
  return d;
}

std::vector<Rollout> forced_rollouts(const BatchForcing& forcing, const Vec3& xbar0, double h, std::size_t n,
                                     std::span<const std::uint64_t> seeds, const Params& p) {
  if (!(h > 0.0)) throw InvalidArgument("forced_rollouts: h must be positive");
  std::vector<Rollout> out(seeds.size());
  std::vector<Rng> rngs;
  std::vector<std::size_t> live;
  for (std::size_t j = 0; j < seeds.size(); ++j) {
    out[j].path.dt = h;
    out[j].path.states.reserve(n + 1);
    out[j].path.states.push_back(xbar0);
    rngs.emplace_back(seeds[j]);
    live.push_back(j);
  }
  Batch x(3, static_cast<Eigen::Index>(live.size()));
  for (std::size_t step = 0; step < n && !live.empty(); ++step) {
    x.resize(3, static_cast<Eigen::Index>(live.size()));
    for (std::size_t k = 0; k < live.size(); ++k) x.col(static_cast<Eigen::Index>(k)) = out[live[k]].path.states.back();
    const Batch force = forcing(x, rngs);
    std::size_t keep = 0;
    for (std::size_t k = 0; k < live.size(); ++k) {
      const Vec3 fk = force.col(static_cast<Eigen::Index>(k));
      const Vec3 xk = x.col(static_cast<Eigen::Index>(k));
      const Vec3 next = rk_step([&](const Vec3& s) { return Vec3(lorenz_rhs(s, p) + fk); }, xk, h, Scheme::rk4);
      Rollout& r = out[live[k]];
      if (!next.allFinite() || !fk.allFinite()) {
        r.blew_up = true;
        continue;
      }
      r.path.states.push_back(next);
      if (keep != k) {
        live[keep] = live[k];
        rngs[keep] = std::move(rngs[k]);
      }
      ++keep;
    }
    live.resize(keep);
    rngs.erase(rngs.begin() + static_cast<std::ptrdiff_t>(keep), rngs.end());
  }
  return out;
}

std::vector<Rollout> closure_rollouts_generative(const FlowScorePair& pair, const Vec3& xbar0, double h,
                                                 std::size_t n, const GuidanceCfg& cfg,
                                                 std::span<const std::uint64_t> seeds, const Params& p) {
  if (pair.cond_dim != 3) throw DimMismatch("closure rollout needs a pair conditioned on the 3 coarse states");
  return forced_rollouts(
      [&](const Batch& xbar, std::span<Rng> rngs) { return sample_conditional(pair, xbar, cfg, rngs); }, xbar0, h, n,
      seeds, p);
}

Rollout closure_rollout_generative(const FlowScorePair& pair, const Vec3& xbar0, double h, std::size_t n,
                                   const GuidanceCfg& cfg, std::uint64_t seed, const Params& p) {
  const std::uint64_t seeds[1] = {seed};
  return std::move(closure_rollouts_generative(pair, xbar0, h, n, cfg, seeds, p).front());
}

std::vector<StabilizedRollout> stabilize_rollouts_generative(const FlowScorePair& pair, const Trajectory& nominal,
                                                             const Vec3& xt0, const GuidanceCfg& cfg,
                                                             std::span<const std::uint64_t> seeds,
                                                             const Params& p) {
  if (pair.cond_dim != 6) throw DimMismatch("stabilization needs a pair conditioned on (x, x~)");
  if (nominal.size() < 2) throw EmptyInput("stabilize_rollouts_generative: nominal needs at least two states");
  const double dt = nominal.dt;
  std::vector<StabilizedRollout> out(seeds.size());
  std::vector<Rng> rngs;
  std::vector<std::size_t> live;
  for (std::size_t j = 0; j < seeds.size(); ++j) {
    Trajectory& tp = out[j].tangent.path;
    tp.dt = dt;
    tp.t0 = nominal.t0;
    tp.states.reserve(nominal.size());
    tp.states.push_back(xt0);
    rngs.emplace_back(seeds[j]);
    live.push_back(j);
  }
  Batch cond;
  for (std::size_t step = 0; step + 1 < nominal.size() && !live.empty(); ++step) {
    const Vec3& xn = nominal[step];
    const Mat3d jac = lorenz_jacobian(xn, p);
    cond.resize(6, static_cast<Eigen::Index>(live.size()));
    for (std::size_t k = 0; k < live.size(); ++k) cond.col(static_cast<Eigen::Index>(k)) << xn, out[live[k]].tangent.path.states.back();
    const Batch s = sample_conditional(pair, cond, cfg, rngs);
    std::size_t keep = 0;
    for (std::size_t k = 0; k < live.size(); ++k) {
      Rollout& r = out[live[k]].tangent;
      const Vec3 xt = r.path.states.back();
      const Vec3 next = xt + (jac * xt + s.col(static_cast<Eigen::Index>(k))) * dt;
      if (!next.allFinite()) {
        r.blew_up = true;
        continue;
      }
      r.path.states.push_back(next);
      if (keep != k) {
        live[keep] = live[k];
        rngs[keep] = std::move(rngs[k]);
      }
      ++keep;
    }
    live.resize(keep);
    rngs.erase(rngs.begin() + static_cast<std::ptrdiff_t>(keep), rngs.end());
  }
  for (auto& r : out) r.reconstructed = reconstruct(nominal, r.tangent.path);
  return out;
}

StabilizedRollout stabilize_rollout_generative(const FlowScorePair& pair, const Trajectory& nominal, const Vec3& xt0,
                                               const GuidanceCfg& cfg, std::uint64_t seed, const Params& p) {
  const std::uint64_t seeds[1] = {seed};
  return std::move(stabilize_rollouts_generative(pair, nominal, xt0, cfg, seeds, p).front());
}

}  // namespace sgs
