#pragma once

#include "sgs/core.hpp"
#include "sgs/dynamics.hpp"
#include "sgs/filtering.hpp"
#include "sgs/neural.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace sgs {

inline constexpr double kDiffusionFloor = 1e-4;

/// Consecutive filtered states a time h apart.
struct PairSample {
  Vec3 xbar0;
  Vec3 xbarh;
  double h = 0.0;
};

/// A perturbation of the nominal state xn and its image after one step.
struct PerturbSample {
  Vec3 xn;
  Vec3 xt0;
  Vec3 xt1;
  double dt = 0.0;
};

/// log(1 + e^x) without overflow.
double softplus(double x);

/// Drift correction and diagonal diffusion for the filtered dynamics.
/// The network maps xbar to 6 outputs: the drift Lambda followed by the raw
/// diffusion, Gamma = softplus(raw) + floor.
struct ClosureModel {
  Mlp net;
  double diffusion_floor = kDiffusionFloor;
  double h = 0.0;  ///< step the model was trained for (0 if unknown)

  /// Random network of the given hidden layout (input 3, output 6).
  static ClosureModel create(const std::vector<std::size_t>& hidden, Activation act, std::uint64_t seed,
                             bool residual = false);

  void evaluate(const Vec3& xbar, Vec3& drift, Vec3& diffusion) const;
};

/// Diagonal diffusion Sigma(x, x~) = softplus(raw) + floor for the tangent
/// dynamics. Network input is (x, x~), 6 values.
struct StabilizerModel {
  Mlp net;
  double diffusion_floor = kDiffusionFloor;

  static StabilizerModel create(const std::vector<std::size_t>& hidden, Activation act, std::uint64_t seed,
                                bool residual = false);

  [[nodiscard]] Vec3 diffusion(const Vec3& x, const Vec3& xt) const;
};

/// Filters `fine` and pairs xbar_i with xbar_{i+K}, h = K dt. Boundary
/// truncation leaves fine.size() - 2K pairs.
std::vector<PairSample> gen_pairs(const Trajectory& fine, const FilterSpec& spec);

/// K perturbations x~ = eps N(0, I) per nominal state. Each perturbed state takes
/// one explicit Euler step and is compared with the nominal state's own Euler
/// step, so there are K * nominal.size() samples.
std::vector<PerturbSample> gen_perturb(const Trajectory& nominal, std::size_t k, double eps, std::uint64_t seed,
                                       const Params& p = {});

/// d/2 log(2 pi) + 1/2 sum log(var) + 1/2 sum r^2 / var.
double gaussian_nll_diag(const Vec3& residual, const Vec3& variance);

double nll_closure(const ClosureModel& model, const PairSample& s, const Params& p = {});
double nll_stabilizer(const StabilizerModel& model, const PerturbSample& s, const Params& p = {});

/// Mean NLL over `indices` and its parameter gradient.
LossGrad nll_closure_batch(const ClosureModel& model, std::span<const PairSample> data,
                           std::span<const std::size_t> indices, const Params& p = {});
LossGrad nll_stabilizer_batch(const StabilizerModel& model, std::span<const PerturbSample> data,
                              std::span<const std::size_t> indices, const Params& p = {});

/// Mean NLL over a whole dataset.
double mean_nll(const ClosureModel& model, std::span<const PairSample> data, const Params& p = {});
double mean_nll(const StabilizerModel& model, std::span<const PerturbSample> data, const Params& p = {});

/// Continues training in place (resumable through `opt` and `first_epoch`).
TrainResult train_closure(ClosureModel& model, AdamState& opt, std::span<const PairSample> data,
                          const TrainConfig& cfg, const Params& p = {}, std::size_t first_epoch = 0);
TrainResult train_stabilizer(StabilizerModel& model, AdamState& opt, std::span<const PerturbSample> data,
                             const TrainConfig& cfg, const Params& p = {}, std::size_t first_epoch = 0);

/// Fresh model with input normalization fitted to `data`, trained from scratch.
/// Initial weights come from the "init" stream of cfg.seed.
ClosureModel train_closure(std::span<const PairSample> data, const MlpSpec& spec, const TrainConfig& cfg,
                           const Params& p = {}, TrainResult* result = nullptr);
StabilizerModel train_stabilizer(std::span<const PerturbSample> data, const MlpSpec& spec, const TrainConfig& cfg,
                                 const Params& p = {}, TrainResult* result = nullptr);

/// xbar_{n+1} = xbar_n + (f + Lambda) h + Gamma dW, dW ~ N(0, h I).
Rollout rollout_closure(const ClosureModel& model, const Vec3& xbar0, double h, std::size_t n, std::uint64_t seed,
                        const Params& p = {});

struct StabilizedRollout {
  Rollout tangent;         ///< x~ along the nominal
  Trajectory reconstructed;  ///< x + x~ over the finite part of the tangent
};

/// x~_{n+1} = x~_n + J(x_n) x~_n dt + Sigma(x_n, x~_n) dW over the nominal's grid.
StabilizedRollout rollout_stabilized(const StabilizerModel& model, const Trajectory& nominal, const Vec3& xt0,
                                     std::uint64_t seed, const Params& p = {});

/// Nominal plus tangent, state by state, over the tangent's length.
Trajectory reconstruct(const Trajectory& nominal, const Trajectory& tangent);

}  // namespace sgs
