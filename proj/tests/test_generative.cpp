#include <doctest.h>

#include "sgs/generative.hpp"

#include <cmath>
#include <numbers>

using namespace sgs;

namespace {

// Target tau ~ N(m, s^2 I) in standardized space. With t = gamma tau + sqrt(1 - gamma) eps,
// t ~ N(gamma m, v I), v = gamma^2 s^2 + 1 - gamma, and E[tau | t] = m + gamma s^2 (t - gamma m) / v.
struct GaussianTarget {
  Vec3 m;
  double s;

  [[nodiscard]] double var(double g) const { return g * g * s * s + 1.0 - g; }
  [[nodiscard]] Vec3 denoised(const Vec3& t, double g) const { return m + g * s * s / var(g) * (t - g * m); }
  [[nodiscard]] Vec3 velocity(const Vec3& t, double g) const {
    const Vec3 e = denoised(t, g);
    return e - (t - g * e) / (2.0 * (1.0 - g));
  }
  [[nodiscard]] Vec3 score(const Vec3& t, double g) const { return -(t - g * m) / var(g); }

  // Fields reading t and gamma from the network input layout.
  [[nodiscard]] BatchField velocity_field() const {
    return [*this](const Batch& in) {
      Batch out(3, in.cols());
      for (Eigen::Index j = 0; j < in.cols(); ++j) out.col(j) = velocity(in.col(j).head<3>(), in(3, j));
      return out;
    };
  }
  [[nodiscard]] BatchField score_field() const {
    return [*this](const Batch& in) {
      Batch out(3, in.cols());
      for (Eigen::Index j = 0; j < in.cols(); ++j) out.col(j) = score(in.col(j).head<3>(), in(3, j));
      return out;
    };
  }
};

std::vector<Rng> make_rngs(std::size_t n, std::uint64_t root) {
  std::vector<Rng> r;
  for (std::size_t i = 0; i < n; ++i) r.emplace_back(stream_seed(root, i));
  return r;
}

FlowScorePair zero_pair(std::size_t cond_dim) {
  FlowScorePair pair = FlowScorePair::create(cond_dim, {8}, {8}, Activation::silu, 1);
  pair.flow.params().setZero();
  pair.score->params().setZero();
  return pair;
}

// Draws from a Gaussian target paired with arbitrary conditions.
ConditionalDataset gaussian_dataset(const GaussianTarget& g, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  ConditionalDataset d;
  d.target.resize(3, static_cast<Eigen::Index>(n));
  d.cond.resize(3, static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < d.target.cols(); ++j) {
    d.target.col(j) = g.m + g.s * rng.normal3();
    d.cond.col(j) = rng.normal3();
  }
  return d;
}

const Trajectory& attractor() {
  static const Trajectory t = [] {
    const auto spin = integrate_lorenz(Vec3(1, 1, 1), 0.001, 5000);
    return integrate_lorenz(spin.states.back(), 0.001, 6000);
  }();
  return t;
}

}  // namespace

TEST_CASE("conditional path targets at a worked point") {
  const Vec3 tau(1, 2, 3), t(0.5, 1, 2);
  const Vec3 u = cond_vector_field(t, tau, 0.75);
  const Vec3 s = cond_score(t, tau, 0.75);
  CHECK((u - Vec3(1.5, 3.0, 3.5)).norm() < 1e-14);
  CHECK((s - Vec3(1.0, 2.0, 1.0)).norm() < 1e-14);
  CHECK_THROWS_AS((void)cond_vector_field(t, tau, 1.0), GammaSingular);
  CHECK_THROWS_AS((void)cond_score(t, tau, 1.0), GammaSingular);
  CHECK_THROWS_AS((void)path_sample(tau, 1.5, t), InvalidArgument);
  CHECK((path_sample(tau, 0.0, t) - t).norm() == 0.0);
  CHECK((path_sample(tau, 1.0, t) - tau).norm() == 0.0);
}

TEST_CASE("conditional velocity is the gamma-derivative of the path map") {
  Rng rng(3);
  for (int k = 0; k < 20; ++k) {
    const Vec3 tau = rng.normal3(), eps = rng.normal3();
    const double g = rng.uniform(0.05, 0.95), h = 1e-6;
    const Vec3 fd = (path_sample(tau, g + h, eps) - path_sample(tau, g - h, eps)) / (2.0 * h);
    CHECK((fd - cond_vector_field(path_sample(tau, g, eps), tau, g)).norm() < 1e-6);
  }
}

TEST_CASE("conditional score is the gradient of the log density") {
  Rng rng(4);
  for (int k = 0; k < 20; ++k) {
    const Vec3 tau = rng.normal3(), t = rng.normal3();
    const double g = rng.uniform(0.05, 0.95);
    const auto logp = [&](const Vec3& x) {
      const double v = 1.0 - g;
      return -0.5 * (x - g * tau).squaredNorm() / v - 1.5 * std::log(2.0 * std::numbers::pi * v);
    };
    Vec3 fd;
    for (int i = 0; i < 3; ++i) {
      Vec3 e = Vec3::Zero();
      e(i) = 1e-5;
      fd(i) = (logp(t + e) - logp(t - e)) / 2e-5;
    }
    CHECK((fd - cond_score(t, tau, g)).norm() < 1e-5);
  }
}

TEST_CASE("path marginal moments") {
  const Vec3 tau(1, -2, 0.5);
  const double g = 0.3;
  const int n = 100000;
  Rng rng(5);
  Vec3 sum = Vec3::Zero(), sq = Vec3::Zero();
  for (int i = 0; i < n; ++i) {
    const Vec3 x = path_sample(tau, g, rng.normal3());
    sum += x;
    sq += x.cwiseProduct(x);
  }
  const Vec3 mean = sum / n;
  const Vec3 var = sq / n - mean.cwiseProduct(mean);
  const double sd = std::sqrt(1.0 - g);
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(mean(i) - g * tau(i)) < 3.0 * sd / std::sqrt(n));
    CHECK(std::abs(var(i) - (1.0 - g)) < 3.0 * (1.0 - g) * std::sqrt(2.0 / n));
  }
}

TEST_CASE("sampler reproduces a Gaussian target from its exact fields") {
  const GaussianTarget g{Vec3(1.0, -0.5, 2.0), 0.4};
  const BatchField u = g.velocity_field(), s = g.score_field();
  const FlowScorePair pair = zero_pair(3);
  const std::size_t b = 4000;
  const Batch cond = Batch::Zero(3, b);
  for (double sigma : {0.0, 0.15}) {
    CAPTURE(sigma);
    GuidanceCfg cfg;
    cfg.w = 1.0;
    cfg.sigma_gamma = sigma;
    cfg.d_gamma = 0.005;
    auto rngs = make_rngs(b, 7);
    const Batch x = sample_sde(u, &s, pair, cond, cfg, rngs);
    const Eigen::VectorXd mean = x.rowwise().mean();
    const Eigen::VectorXd var = (x.colwise() - mean).array().square().rowwise().mean();
    for (int i = 0; i < 3; ++i) {
      CHECK(std::abs(mean(i) - g.m(i)) < 1e-2 + 4.0 * g.s / std::sqrt(double(b)));
      CHECK(std::abs(var(i) - g.s * g.s) < 1e-2 + 4.0 * g.s * g.s * std::sqrt(2.0 / double(b)));
    }
  }
}

TEST_CASE("endpoint step recovers a point mass exactly") {
  const GaussianTarget g{Vec3(0.3, 2.0, -1.0), 0.0};
  const BatchField u = g.velocity_field(), s = g.score_field();
  const FlowScorePair pair = zero_pair(3);
  GuidanceCfg cfg;
  cfg.w = 1.0;
  cfg.sigma_gamma = 0.15;
  cfg.d_gamma = 0.05;
  auto rngs = make_rngs(50, 8);
  const Batch x = sample_sde(u, &s, pair, Batch::Zero(3, 50), cfg, rngs);
  for (Eigen::Index j = 0; j < x.cols(); ++j) CHECK((x.col(j) - g.m).norm() < 1e-9);
}

TEST_CASE("zero networks with no diffusion only rescale the initial noise") {
  const FlowScorePair pair = zero_pair(3);
  GuidanceCfg cfg;
  cfg.d_gamma = 0.01;
  cfg.enforce_linear_zero = false;
  auto rngs = make_rngs(10, 9);
  auto fresh = make_rngs(10, 9);
  const Batch x = sample_conditional(pair, Batch::Random(3, 10), cfg, rngs);
  for (Eigen::Index j = 0; j < 10; ++j) {
    const Vec3 t0 = fresh[static_cast<std::size_t>(j)].normal3();
    CHECK((x.col(j) - t0 / (2.0 - cfg.gamma_max)).norm() < 1e-14);
  }
  cfg.enforce_linear_zero = true;
  auto again = make_rngs(10, 9);
  const Batch z = sample_conditional(pair, Batch::Random(3, 10), cfg, again);
  CHECK(z.row(0).isZero(0.0));
  CHECK((z.bottomRows(2) - x.bottomRows(2)).norm() < 1e-14);
}

TEST_CASE("sampler argument checks") {
  const FlowScorePair pair = zero_pair(3);
  const BatchField u = as_field(pair.flow);
  GuidanceCfg cfg;
  auto rngs = make_rngs(2, 1);
  CHECK_THROWS_AS((void)sample_sde(u, nullptr, pair, Batch::Zero(3, 3), cfg, rngs), DimMismatch);
  cfg.sigma_gamma = 0.1;
  CHECK_THROWS_AS((void)sample_sde(u, nullptr, pair, Batch::Zero(3, 2), cfg, rngs), InvalidArgument);
  cfg.sigma_gamma = 0.0;
  cfg.gamma_max = 1.0;
  CHECK_THROWS_AS((void)sample_sde(u, nullptr, pair, Batch::Zero(3, 2), cfg, rngs), InvalidArgument);
  cfg.gamma_max = 0.99;
  cfg.d_gamma = 0.0;
  CHECK_THROWS_AS((void)sample_sde(u, nullptr, pair, Batch::Zero(3, 2), cfg, rngs), InvalidArgument);
  CHECK_THROWS_AS((void)pair.make_inputs(Batch::Zero(3, 2), 0.5, Batch::Zero(4, 2), false), DimMismatch);
}

TEST_CASE("guidance combination") {
  const Batch un = Batch::Random(3, 5), co = Batch::Random(3, 5);
  CHECK((guided_combine(un, co, 0.0) - un).norm() == 0.0);
  CHECK((guided_combine(un, co, 1.0) - co).norm() == 0.0);
  CHECK((guided_combine(un, co, 3.0) - (3.0 * co - 2.0 * un)).norm() < 1e-14);

  const FlowScorePair pair = FlowScorePair::create(3, {16}, {16}, Activation::silu, 11);
  const Vec3 t(0.2, -0.4, 1.0);
  const Eigen::VectorXd c = Vec3(3, 1, -2);
  const Eigen::VectorXd in_c = pair.make_inputs(Batch(t), 0.4, Batch(c), false).col(0);
  const Eigen::VectorXd in_n = pair.make_inputs(Batch(t), 0.4, Batch(c), true).col(0);
  CHECK(in_n.segment(4, 3).isZero(0.0));
  CHECK(in_n(7) == 1.0);
  CHECK(in_c(7) == 0.0);
  CHECK((in_c.segment(4, 3) - c).norm() == 0.0);
  for (double w : {0.0, 1.0, 3.0}) {
    const Guided gd = guided_combine(pair, t, 0.4, c, w);
    const Eigen::VectorXd fu = pair.flow.evaluate(in_n), fc = pair.flow.evaluate(in_c);
    const Eigen::VectorXd su = pair.score->evaluate(in_n), sc = pair.score->evaluate(in_c);
    CHECK((gd.field - ((1.0 - w) * fu + w * fc)).norm() < 1e-13);
    REQUIRE(gd.score.has_value());
    CHECK((*gd.score - ((1.0 - w) * su + w * sc)).norm() < 1e-13);
  }
}

TEST_CASE("matching losses are minimized by the exact marginal fields") {
  const GaussianTarget g{Vec3(0.5, -1.0, 0.0), 0.7};
  const ConditionalDataset data = gaussian_dataset(g, 20000, 12);
  const FlowScorePair pair = zero_pair(3);
  const BatchField u = g.velocity_field(), s = g.score_field();
  const double lu = cfm_loss(u, pair, data, 0.0, 99);
  const double ls = dsm_loss(s, pair, data, 0.0, 99);
  Rng rng(13);
  for (int k = 0; k < 10; ++k) {
    const Vec3 c = rng.normal3();
    const double delta = rng.uniform(0.1, 0.3);
    const BatchField up = [&](const Batch& in) { return Batch(u(in).colwise() + delta * c); };
    const BatchField sp = [&](const Batch& in) { return Batch(s(in) * (1.0 + delta)); };
    CHECK(cfm_loss(up, pair, data, 0.0, 99) > lu);
    CHECK(dsm_loss(sp, pair, data, 0.0, 99) > ls);
  }
}

TEST_CASE("full condition dropout hides the condition from the loss") {
  const GaussianTarget g{Vec3(0, 0, 0), 1.0};
  ConditionalDataset a = gaussian_dataset(g, 500, 14);
  ConditionalDataset b = a;
  b.cond = Batch::Random(3, 500) * 10.0;
  const FlowScorePair pair = FlowScorePair::create(3, {16}, {16}, Activation::silu, 2);
  const BatchField f = as_field(pair.flow);
  CHECK(cfm_loss(f, pair, a, 1.0, 5) == cfm_loss(f, pair, b, 1.0, 5));
  CHECK(dsm_loss(f, pair, a, 1.0, 5) == dsm_loss(f, pair, b, 1.0, 5));
  CHECK(cfm_loss(f, pair, a, 0.0, 5) != cfm_loss(f, pair, b, 0.0, 5));
}

TEST_CASE("path loss gradient matches finite differences") {
  const GaussianTarget g{Vec3(0.5, 0, -1), 0.5};
  const ConditionalDataset data = gaussian_dataset(g, 64, 15);
  FlowScorePair pair = FlowScorePair::create(3, {12}, {}, Activation::silu, 3);
  std::vector<std::size_t> idx(64);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto eval = [&](const Mlp& m) {
    Rng rng(21);
    return path_loss_grad(m, pair, data, idx, 0.3, 0.99, PathTarget::velocity, rng);
  };
  const LossGrad lg = eval(pair.flow);
  Eigen::VectorXd fd(lg.grad.size());
  for (Eigen::Index i = 0; i < fd.size(); ++i) {
    Mlp m = pair.flow;
    m.params()(i) += 1e-6;
    const double up = eval(m).loss;
    m.params()(i) -= 2e-6;
    fd(i) = (up - eval(m).loss) / 2e-6;
  }
  CHECK((fd - lg.grad).norm() <= 1e-5 * lg.grad.norm());
}

TEST_CASE("training a conditional flow learns the conditional map") {
  // tau = 2 cond, cond ~ N(0, I): a deterministic map the sampler should reproduce.
  Rng rng(16);
  ConditionalDataset data;
  data.cond.resize(3, 4000);
  for (Eigen::Index j = 0; j < 4000; ++j) data.cond.col(j) = rng.normal3();
  data.target = 2.0 * data.cond;
  FlowScorePair pair = FlowScorePair::create(3, {32, 32}, {}, Activation::silu, 4);
  pair.fit_normalization(data);

  GuidanceCfg cfg;
  cfg.w = 1.0;
  cfg.d_gamma = 0.01;
  cfg.enforce_linear_zero = false;
  const Batch cond = Batch::Random(3, 200);
  const auto rms_error = [&] {
    auto rngs = make_rngs(200, 18);
    const Batch x = sample_conditional(pair, cond, cfg, rngs);
    return std::sqrt((x - 2.0 * cond).squaredNorm() / 200.0);
  };
  const double before = rms_error();

  TrainConfig tc;
  tc.epochs = 60;
  tc.batch_size = 128;
  tc.lr = 3e-3;
  tc.seed = 17;
  AdamState opt = AdamState::for_model(pair.flow, tc.lr);
  const TrainResult res = train_flow(pair, opt, data, tc, 0.1);
  REQUIRE_FALSE(res.diverged);
  const double after = rms_error();
  CHECK(after < 0.2 * before);
}

TEST_CASE("standardizer round trip and degenerate rows") {
  Batch d(2, 4);
  d << 1, 2, 3, 4, 5, 5, 5, 5;
  const Standardizer s = Standardizer::fit(d);
  CHECK(s.scale(1) == 1.0);
  CHECK(s.shift(1) == 0.0);
  const Batch z = s.forward(d);
  CHECK(std::abs(z.row(0).mean()) < 1e-15);
  CHECK(std::abs(z.row(0).squaredNorm() / 4.0 - 1.0) < 1e-14);
  CHECK((s.inverse(z) - d).norm() < 1e-14);
  CHECK_THROWS_AS((void)Standardizer::fit(Batch(2, 0)), EmptyInput);
}

TEST_CASE("dataset builders") {
  const FilteredBundle b = compute_exact_sgs(attractor(), FilterSpec::from_width(0.02, 0.001));
  const ConditionalDataset sgs = build_sgs_dataset(b);
  REQUIRE(sgs.size() == b.size());
  CHECK(sgs.cond_dim() == 3);
  for (std::size_t i : {std::size_t{0}, b.size() / 2, b.size() - 1}) {
    CHECK((sgs.target.col(static_cast<Eigen::Index>(i)) - b.exact_tau[i]).norm() == 0.0);
    CHECK((sgs.cond.col(static_cast<Eigen::Index>(i)) - b.filtered[i]).norm() == 0.0);
  }
  CHECK(sgs.target.row(0).cwiseAbs().maxCoeff() < 1e-10);

  // Rate-form residual of an Euler step is exactly the Hessian quadratic 1/2 x~^T H x~.
  const Trajectory nominal = subsample(attractor(), 50);
  const auto samples = gen_perturb(nominal, 3, 0.5, 19);
  const ConditionalDataset st = build_stab_dataset(samples);
  REQUIRE(st.size() == samples.size());
  CHECK(st.cond_dim() == 6);
  const auto hess = lorenz_hessians<double>();
  for (std::size_t i = 0; i < samples.size(); i += 7) {
    const Vec3& xt = samples[i].xt0;
    const auto j = static_cast<Eigen::Index>(i);
    for (int k = 0; k < 3; ++k)
      CHECK(std::abs(st.target(k, j) - 0.5 * xt.dot(hess[static_cast<std::size_t>(k)] * xt)) <
            1e-9 * (1.0 + xt.squaredNorm()));
    CHECK((st.cond.col(j).head<3>() - samples[i].xn).norm() == 0.0);
    CHECK((st.cond.col(j).tail<3>() - xt).norm() == 0.0);
  }
}

TEST_CASE("forced rollouts") {
  const Vec3 x0 = attractor().states.back();
  const std::uint64_t seeds[] = {1, 2, 3};
  SUBCASE("zero forcing is plain RK4") {
    const auto zero = [](const Batch& x, std::span<Rng>) { return Batch(Batch::Zero(3, x.cols())); };
    const auto rs = forced_rollouts(zero, x0, 0.01, 300, seeds);
    const Trajectory ref = integrate_lorenz(x0, 0.01, 300);
    for (const Rollout& r : rs) {
      REQUIRE(r.path.size() == ref.size());
      CHECK_FALSE(r.blew_up);
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK((r.path[i] - ref[i]).norm() == 0.0);
    }
  }
  SUBCASE("each path depends only on its own seed") {
    // Noise large enough that some paths diverge and drop out of the batch.
    const auto noisy = [](const Batch& x, std::span<Rng> rngs) {
      Batch f(3, x.cols());
      for (Eigen::Index j = 0; j < x.cols(); ++j) f.col(j) = 400.0 * rngs[static_cast<std::size_t>(j)].normal3();
      return f;
    };
    std::vector<std::uint64_t> many(12);
    for (std::size_t i = 0; i < many.size(); ++i) many[i] = 100 + i;
    const auto batch = forced_rollouts(noisy, x0, 0.05, 400, many);
    std::size_t blown = 0;
    for (std::size_t i = 0; i < many.size(); ++i) {
      const std::uint64_t one[] = {many[i]};
      const Rollout single = forced_rollouts(noisy, x0, 0.05, 400, one).front();
      blown += batch[i].blew_up ? 1 : 0;
      CHECK(single.blew_up == batch[i].blew_up);
      REQUIRE(single.path.size() == batch[i].path.size());
      for (std::size_t k = 0; k < single.path.size(); ++k) CHECK((single.path[k] - batch[i].path[k]).norm() == 0.0);
    }
    CHECK(blown > 0);
    CHECK(blown < many.size());
  }
}

TEST_CASE("generative closure rollouts are reproducible and batch independent") {
  FlowScorePair pair = FlowScorePair::create(3, {8}, {8}, Activation::silu, 5);
  pair.flow.params() *= 0.1;
  GuidanceCfg cfg = GuidanceCfg::score_closure();
  cfg.d_gamma = 0.05;
  const Vec3 x0 = attractor().states.back();
  const std::uint64_t seeds[] = {7, 8};
  const auto a = closure_rollouts_generative(pair, x0, 0.005, 40, cfg, seeds);
  const auto b = closure_rollouts_generative(pair, x0, 0.005, 40, cfg, seeds);
  const Rollout c = closure_rollout_generative(pair, x0, 0.005, 40, cfg, 8);
  REQUIRE(a[1].path.size() == 41);
  for (std::size_t k = 0; k < 41; ++k) {
    CHECK((a[0].path[k] - b[0].path[k]).norm() == 0.0);
    CHECK((a[1].path[k] - c.path[k]).norm() < 1e-12 * (1.0 + c.path[k].norm()));
  }
  CHECK((a[0].path.states.back() - a[1].path.states.back()).norm() > 0.0);
  const FlowScorePair stab = FlowScorePair::create(6, {8}, {8}, Activation::silu, 5);
  CHECK_THROWS_AS((void)closure_rollout_generative(stab, x0, 0.005, 4, cfg, 1), DimMismatch);
}

TEST_CASE("generative stabilization with a vanishing residual is the linearized flow") {
  FlowScorePair pair = zero_pair(6);
  pair.target_norm.scale.setZero();  // every sample maps to zero in data space
  GuidanceCfg cfg = GuidanceCfg::stabilization();
  cfg.d_gamma = 0.1;
  const Trajectory nominal = subsample(attractor(), 10);
  const Vec3 xt0(0.01, -0.02, 0.03);
  const StabilizedRollout r = stabilize_rollout_generative(pair, nominal, xt0, cfg, 3);
  const Rollout lin = integrate_linearized(nominal, xt0);
  REQUIRE(r.tangent.path.size() == lin.path.size());
  for (std::size_t k = 0; k < lin.path.size(); ++k) CHECK((r.tangent.path[k] - lin.path[k]).norm() == 0.0);
  REQUIRE(r.reconstructed.size() == nominal.size());
  CHECK((r.reconstructed.states.back() - (nominal.states.back() + lin.path.states.back())).norm() == 0.0);
}
