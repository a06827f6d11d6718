#include <doctest.h>

#include "sgs/parametric.hpp"

#include <cmath>
#include <numbers>

using namespace sgs;

namespace {

double inv_softplus(double y) { return std::log(std::expm1(y)); }

// Sets the output bias of the last layer; other layers keep their weights.
void set_output_bias(Mlp& net, const Eigen::VectorXd& b) { net.bias(net.spec().layer_count() - 1) = b; }

// Network with all weights zero so the outputs equal the final bias.
ClosureModel constant_closure(const Vec3& drift, const Vec3& gamma) {
  ClosureModel m;
  m.net = Mlp(MlpSpec{3, 6, {2}, Activation::relu});
  Eigen::VectorXd b(6);
  b << drift, inv_softplus(gamma(0) - m.diffusion_floor), inv_softplus(gamma(1) - m.diffusion_floor),
      inv_softplus(gamma(2) - m.diffusion_floor);
  set_output_bias(m.net, b);
  return m;
}

// Direct dense-matrix Gaussian NLL: 1/2 log det(2 pi M) + 1/2 r^T M^-1 r.
double dense_nll(const Vec3& r, const Mat3d& m) {
  return 0.5 * std::log((2.0 * std::numbers::pi * m).determinant()) + 0.5 * r.dot(m.inverse() * r);
}

const Trajectory& attractor() {
  static const Trajectory t = [] {
    const auto spin = integrate_lorenz(Vec3(1, 1, 1), 0.001, 5000);
    return integrate_lorenz(spin.states.back(), 0.001, 20000);
  }();
  return t;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

TEST_CASE("softplus") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(softplus(800.0) == 800.0);
  CHECK(softplus(-800.0) == 0.0);
  for (double x : {-5.0, -0.3, 0.0, 1.5, 10.0}) CHECK(softplus(x) == doctest::Approx(std::log1p(std::exp(x))));
}

TEST_CASE("closure NLL closed-form values") {
  const PairSample s{Vec3(1, 2, 3), Vec3::Zero(), 1.0};
  // Choose the drift so that the residual vanishes: xbarh = xbar0 + (f + Lambda) h.
  const Vec3 drift = -s.xbar0 - lorenz_rhs(s.xbar0, Params{});
  const double l1 = nll_closure(constant_closure(drift, Vec3(1, 1, 1)), s);
  CHECK(l1 == doctest::Approx(1.5 * std::log(2.0 * std::numbers::pi)).epsilon(1e-12));
  CHECK(l1 == doctest::Approx(2.7568).epsilon(1e-4));
  const double l2 = nll_closure(constant_closure(drift, Vec3(2, 2, 2)), s);
  CHECK(l2 - l1 == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("stabilizer NLL closed-form value") {
  StabilizerModel m;
  m.net = Mlp(MlpSpec{6, 3, {4}, Activation::relu});
  set_output_bias(m.net, Eigen::VectorXd::Constant(3, inv_softplus(1.0 - m.diffusion_floor)));
  const Vec3 xn(1, -2, 20), xt0(0.1, 0.2, -0.3);
  const PerturbSample s{xn, xt0, Vec3(xt0 + lorenz_jacobian(xn, Params{}) * xt0), 1.0};
  CHECK(nll_stabilizer(m, s) == doctest::Approx(1.5 * std::log(2.0 * std::numbers::pi)).epsilon(1e-12));
}

TEST_CASE("NLLs agree with the dense Gaussian formula") {
  Rng rng(5);
  const Params p;
  const auto closure = ClosureModel::create({8}, Activation::silu, 1);
  const auto stab = StabilizerModel::create({6, 6}, Activation::relu, 2);
  for (int trial = 0; trial < 20; ++trial) {
    const PairSample ps{rng.normal3() * 10.0, rng.normal3() * 10.0, 0.01 + rng.uniform()};
    Vec3 drift, gamma;
    closure.evaluate(ps.xbar0, drift, gamma);
    const Vec3 a = ps.xbar0 + (lorenz_rhs(ps.xbar0, p) + drift) * ps.h;
    const Mat3d m = gamma.cwiseAbs2().asDiagonal() * ps.h;
    CHECK(nll_closure(closure, ps) == doctest::Approx(dense_nll(ps.xbarh - a, m)).epsilon(1e-10));

    const PerturbSample qs{rng.normal3() * 10.0, rng.normal3(), rng.normal3(), 0.001 + 0.01 * rng.uniform()};
    const Vec3 sig = stab.diffusion(qs.xn, qs.xt0);
    const Vec3 b = qs.xt0 + lorenz_jacobian(qs.xn, p) * qs.xt0 * qs.dt;
    const Mat3d ms = sig.cwiseAbs2().asDiagonal() * qs.dt;
    CHECK(nll_stabilizer(stab, qs) == doctest::Approx(dense_nll(qs.xt1 - b, ms)).epsilon(1e-10));
  }
}

TEST_CASE("batch losses are means of sample losses with matching gradients") {
  Rng rng(6);
  std::vector<PairSample> pairs;
  std::vector<PerturbSample> perts;
  for (int i = 0; i < 12; ++i) {
    const Vec3 x = rng.normal3() * 5.0;
    pairs.push_back({x, Vec3(x + rng.normal3() * 0.3), 0.05});
    perts.push_back({Vec3(rng.normal3() * 5.0), rng.normal3(), rng.normal3(), 0.01});
  }
  const auto idx = all_indices(pairs.size());
  ClosureModel closure = ClosureModel::create({5}, Activation::silu, 3);
  StabilizerModel stab = StabilizerModel::create({5, 5}, Activation::silu, 4);

  const LossGrad lc = nll_closure_batch(closure, pairs, idx);
  double mean = 0.0;
  for (const auto& s : pairs) mean += nll_closure(closure, s) / 12.0;
  CHECK(lc.loss == doctest::Approx(mean).epsilon(1e-12));

  const LossGrad ls = nll_stabilizer_batch(stab, perts, idx);
  double mean_s = 0.0;
  for (const auto& s : perts) mean_s += nll_stabilizer(stab, s) / 12.0;
  CHECK(ls.loss == doctest::Approx(mean_s).epsilon(1e-12));

  // Central differences, compared as whole vectors.
  const double h = 1e-6;
  Eigen::VectorXd fd_c(closure.net.params().size()), fd_s(stab.net.params().size());
  for (Eigen::Index k = 0; k < fd_c.size(); ++k) {
    const double saved = closure.net.params()(k);
    closure.net.params()(k) = saved + h;
    const double up = nll_closure_batch(closure, pairs, idx).loss;
    closure.net.params()(k) = saved - h;
    const double down = nll_closure_batch(closure, pairs, idx).loss;
    closure.net.params()(k) = saved;
    fd_c(k) = (up - down) / (2 * h);
  }
  for (Eigen::Index k = 0; k < fd_s.size(); ++k) {
    const double saved = stab.net.params()(k);
    stab.net.params()(k) = saved + h;
    const double up = nll_stabilizer_batch(stab, perts, idx).loss;
    stab.net.params()(k) = saved - h;
    const double down = nll_stabilizer_batch(stab, perts, idx).loss;
    stab.net.params()(k) = saved;
    fd_s(k) = (up - down) / (2 * h);
  }
  CHECK((lc.grad - fd_c).norm() <= 1e-4 * fd_c.norm());
  CHECK((ls.grad - fd_s).norm() <= 1e-4 * fd_s.norm());

  SUBCASE("batch order does not matter") {
    std::vector<std::size_t> rev(idx.rbegin(), idx.rend());
    CHECK(nll_stabilizer_batch(stab, perts, rev).loss == doctest::Approx(ls.loss).epsilon(1e-14));
  }
}

TEST_CASE("the constant drift minimizing the NLL is the mean residual drift") {
  Rng rng(7);
  const Params p;
  std::vector<PairSample> pairs;
  Vec3 mean_drift = Vec3::Zero();
  for (int i = 0; i < 200; ++i) {
    const Vec3 x = rng.normal3() * 8.0;
    const Vec3 xh = x + rng.normal3();
    pairs.push_back({x, xh, 0.1});
    mean_drift += ((xh - x) / 0.1 - lorenz_rhs(x, p)) / 200.0;
  }
  const ClosureModel m = constant_closure(mean_drift, Vec3(0.7, 0.7, 0.7));
  const LossGrad lg = nll_closure_batch(m, pairs, all_indices(pairs.size()));
  // Gradient of the last-layer drift biases.
  const Eigen::Index off = lg.grad.size() - 6;
  for (int i = 0; i < 3; ++i) CHECK(std::abs(lg.grad(off + i)) < 1e-9);
  const ClosureModel shifted = constant_closure(mean_drift + Vec3(0.5, 0, 0), Vec3(0.7, 0.7, 0.7));
  CHECK(mean_nll(shifted, pairs) > mean_nll(m, pairs));
}

TEST_CASE("gen_pairs") {
  SUBCASE("count accounts for filter truncation") {
    Trajectory t;
    t.dt = 0.001;
    for (int i = 0; i < 10001; ++i) t.states.push_back(Vec3(std::sin(0.01 * i), 0, 1));
    const auto pairs = gen_pairs(t, FilterSpec{0.01, 10});
    CHECK(pairs.size() == 10001 - 2 * 10);
    CHECK(pairs.front().h == doctest::Approx(0.01));
    for (std::size_t i = 0; i + 10 < pairs.size(); i += 101) CHECK(pairs[i].xbarh == pairs[i + 10].xbar0);
  }
  SUBCASE("constant trajectory") {
    Trajectory t;
    t.dt = 0.01;
    t.states.assign(100, Vec3(2, -1, 5));
    for (const auto& s : gen_pairs(t, FilterSpec{0.04, 4})) {
      CHECK((s.xbar0 - Vec3(2, -1, 5)).norm() < 1e-14);
      CHECK((s.xbarh - Vec3(2, -1, 5)).norm() < 1e-14);
    }
  }
  SUBCASE("too short") {
    Trajectory t;
    t.dt = 0.01;
    t.states.assign(8, Vec3::Zero());
    CHECK(gen_pairs(t, FilterSpec{0.04, 4}).empty());
  }
}

TEST_CASE("gen_perturb") {
  const Params p;
  const Trajectory nominal = subsample(attractor(), 10);
  const Trajectory shortnom{nominal.dt, 0.0, {nominal.states.begin(), nominal.states.begin() + 51}};
  SUBCASE("sample count is K (T + 1)") { CHECK(gen_perturb(shortnom, 7, 0.01, 1).size() == 7 * 51); }
  SUBCASE("small perturbations follow the tangent map to second order") {
    const double eps = 1e-6;
    for (const auto& s : gen_perturb(shortnom, 4, eps, 2)) {
      const Vec3 lin = s.xt0 + lorenz_jacobian(s.xn, p) * s.xt0 * s.dt;
      CHECK((s.xt1 - lin).norm() <= 1e-11);
      CHECK(s.xt0.norm() < 10 * eps);
    }
  }
  SUBCASE("the residual is the Hessian quadratic form") {
    const auto hs = lorenz_hessians<double>();
    for (const auto& s : gen_perturb(shortnom, 3, 1.0, 3)) {
      const Vec3 lin = s.xt0 + lorenz_jacobian(s.xn, p) * s.xt0 * s.dt;
      Vec3 quad;
      for (int i = 0; i < 3; ++i) quad(i) = 0.5 * s.xt0.dot(hs[i] * s.xt0) * s.dt;
      CHECK((s.xt1 - lin - quad).norm() <= 1e-12);
    }
  }
  SUBCASE("fixed seed reproduces the dataset") {
    const auto a = gen_perturb(shortnom, 3, 0.01, 9), b = gen_perturb(shortnom, 3, 0.01, 9);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].xt1 == b[i].xt1);
    CHECK(gen_perturb(shortnom, 3, 0.01, 10)[0].xt0 != a[0].xt0);
  }
  SUBCASE("bad arguments") {
    CHECK_THROWS_AS(gen_perturb(shortnom, 3, 0.0, 1), InvalidArgument);
    CHECK_THROWS_AS(gen_perturb(shortnom, 0, 0.1, 1), InvalidArgument);
  }
}

TEST_CASE("training recovers a known constant drift and diffusion") {
  const Params p;
  const Vec3 lambda(2.0, -3.0, 4.0), gamma(0.5, 1.0, 1.5);
  const double h = 0.1;
  Rng rng(31);
  const auto& traj = attractor();
  std::vector<PairSample> pairs;
  for (std::size_t i = 0; i < 20000; ++i) {
    const Vec3 x = traj[i];
    const Vec3 xh = x + (lorenz_rhs(x, p) + lambda) * h + (gamma.array() * rng.normal3().array()).matrix() * std::sqrt(h);
    pairs.push_back({x, xh, h});
  }
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 256;
  cfg.lr = 1e-2;
  cfg.seed = 4;
  TrainResult result;
  const ClosureModel m = train_closure(pairs, MlpSpec{3, 6, {2}, Activation::relu}, cfg, p, &result);
  REQUIRE_FALSE(result.diverged);
  CHECK(result.history.back() < result.history.front());
  CHECK(m.h == h);
  Vec3 d_mean = Vec3::Zero(), g_mean = Vec3::Zero();
  for (std::size_t i = 0; i < 20000; i += 100) {
    Vec3 d, g;
    m.evaluate(traj[i], d, g);
    d_mean += d / 200.0;
    g_mean += g / 200.0;
  }
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(d_mean(i) - lambda(i)) <= 0.1 * std::abs(lambda(i)));
    CHECK(std::abs(g_mean(i) - gamma(i)) <= 0.1 * gamma(i));
  }
}

TEST_CASE("training recovers a known constant stabilizer diffusion") {
  const Params p;
  const Vec3 sigma(0.3, 0.7, 1.2);
  const double dt = 0.01;
  Rng rng(32);
  const auto& traj = attractor();
  std::vector<PerturbSample> data;
  for (std::size_t i = 0; i < 20000; ++i) {
    const Vec3 xt0 = rng.normal3();
    const Vec3 xt1 = xt0 + lorenz_jacobian(traj[i], p) * xt0 * dt +
                     (sigma.array() * rng.normal3().array()).matrix() * std::sqrt(dt);
    data.push_back({traj[i], xt0, xt1, dt});
  }
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr = 3e-3;
  cfg.seed = 5;
  TrainResult result;
  const StabilizerModel m = train_stabilizer(data, MlpSpec{6, 3, {10, 10, 10}, Activation::relu}, cfg, p, &result);
  REQUIRE_FALSE(result.diverged);
  CHECK(result.history.back() < result.history.front());
  Vec3 s_mean = Vec3::Zero();
  for (std::size_t i = 0; i < data.size(); i += 50) s_mean += m.diffusion(data[i].xn, data[i].xt0) / 400.0;
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s_mean(i) - sigma(i)) <= 0.05 * sigma(i));
}

TEST_CASE("zero learning rate leaves the initialization untouched") {
  const auto& traj = attractor();
  std::vector<PairSample> pairs = gen_pairs(subsample(traj, 10), FilterSpec{0.02, 2});
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 0.0;
  cfg.seed = 8;
  const ClosureModel a = train_closure(pairs, MlpSpec{3, 6, {2}, Activation::relu}, cfg);
  ClosureModel b = ClosureModel::create({2}, Activation::relu, named_seed(8, "init"));
  CHECK(a.net.params() == b.net.params());
}

TEST_CASE("rollouts") {
  const Params p;
  SUBCASE("zero drift and diffusion fields reduce to forward Euler bitwise") {
    const Vec3 x0(1, 2, 20);
    const auto em = euler_maruyama([&](const Vec3& x, std::size_t) { return lorenz_rhs(x, p); },
                                   [](const Vec3&, std::size_t) { return Vec3::Zero().eval(); }, x0, 0.01, 500, 3);
    const auto fe = forward_euler(x0, 0.01, 500, p);
    REQUIRE(em.path.size() == fe.path.size());
    for (std::size_t i = 0; i < em.path.size(); ++i) CHECK(em.path[i] == fe.path[i]);
  }
  SUBCASE("floor-only closure stays close to forward Euler") {
    const ClosureModel m = constant_closure(Vec3::Zero(), Vec3::Constant(kDiffusionFloor + 1e-12));
    const auto r = rollout_closure(m, Vec3(1, 2, 20), 0.01, 100, 4);
    const auto fe = forward_euler(Vec3(1, 2, 20), 0.01, 100, p);
    CHECK((r.path.states.back() - fe.path.states.back()).norm() < 1e-2);
  }
  SUBCASE("fixed seed reproduces, other seeds differ") {
    const ClosureModel m = ClosureModel::create({2}, Activation::relu, 1);
    const auto a = rollout_closure(m, Vec3(1, 2, 20), 0.01, 200, 7);
    const auto b = rollout_closure(m, Vec3(1, 2, 20), 0.01, 200, 7);
    const auto c = rollout_closure(m, Vec3(1, 2, 20), 0.01, 200, 8);
    CHECK(a.path.states == b.path.states);
    CHECK(a.path.states.back() != c.path.states.back());
  }
  SUBCASE("vanishing stabilizer reproduces the linearized blow-up") {
    StabilizerModel m;
    m.net = Mlp(MlpSpec{6, 3, {4}, Activation::relu});
    m.diffusion_floor = 0.0;
    set_output_bias(m.net, Eigen::VectorXd::Constant(3, -2000.0));
    const Trajectory nominal = subsample(attractor(), 10);
    const auto r = rollout_stabilized(m, nominal, Vec3(0.01, 0.01, 0.01), 1);
    const auto lin = integrate_linearized(nominal, Vec3(0.01, 0.01, 0.01), p);
    REQUIRE(r.tangent.path.size() == lin.path.size());
    for (std::size_t i = 0; i < lin.path.size(); i += 97)
      CHECK((r.tangent.path[i] - lin.path[i]).norm() <= 1e-12 * std::max(1.0, lin.path[i].norm()));
    CHECK(max_norm(r.tangent.path) > 1e6);
    CHECK(r.reconstructed.size() == r.tangent.path.size());
    CHECK(r.reconstructed[5] == nominal[5] + r.tangent.path[5]);
  }
}
