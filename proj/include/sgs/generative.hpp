#pragma once

#include "sgs/core.hpp"
#include "sgs/dynamics.hpp"
#include "sgs/filtering.hpp"
#include "sgs/neural.hpp"
#include "sgs/parametric.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace sgs {

/// Gaussian probability path N(alpha t, beta^2 I) with alpha = gamma and
/// beta = sqrt(1 - gamma): noise at gamma = 0, data at gamma = 1.
struct GaussianPath {
  static double alpha(double gamma) { return gamma; }
  static double beta(double gamma) { return std::sqrt(1.0 - gamma); }
  static double alpha_dot(double) { return 1.0; }
  /// beta'/beta, singular at gamma = 1.
  static double beta_rate(double gamma) { return -0.5 / (1.0 - gamma); }
};

Vec3 path_sample(const Vec3& tau, double gamma, const Vec3& eps);

/// Conditional velocity alpha' tau + (beta'/beta)(t - alpha tau). Throws GammaSingular for gamma >= 1.
Vec3 cond_vector_field(const Vec3& t, const Vec3& tau, double gamma);

/// Conditional score -(t - alpha tau) / beta^2. Throws GammaSingular for gamma >= 1.
Vec3 cond_score(const Vec3& t, const Vec3& tau, double gamma);

struct GuidanceCfg {
  double w = 3.0;             ///< guidance scale: (1 - w) uncond + w cond
  double eta = 0.1;           ///< probability of dropping the condition when training the flow
  double eta_score = 0.1;     ///< same for the score network
  double sigma_gamma = 0.0;   ///< sampler diffusion; 0 gives the flow ODE
  double d_gamma = 0.00014;   ///< sampler step
  double gamma_max = 1.0 - 1e-4;
  bool enforce_linear_zero = true;  ///< zero the first output component

  void validate() const;

  static GuidanceCfg flow_closure();
  static GuidanceCfg score_closure();
  static GuidanceCfg stabilization();
  static GuidanceCfg quadratic();
};

/// Targets (3 x N) with their conditioning vectors (c x N), column-aligned.
struct ConditionalDataset {
  Batch target;
  Batch cond;

  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(target.cols()); }
  [[nodiscard]] std::size_t cond_dim() const { return static_cast<std::size_t>(cond.rows()); }
};

/// Per-row affine standardization z = (v - shift) / scale.
struct Standardizer {
  Eigen::VectorXd shift;
  Eigen::VectorXd scale;

  static Standardizer identity(std::size_t dim);
  /// Row means and standard deviations; rows without spread keep shift 0 and scale 1.
  static Standardizer fit(const Batch& data);

  [[nodiscard]] Batch forward(const Batch& v) const;
  [[nodiscard]] Batch inverse(const Batch& z) const;
};

/// Vector field (and optional score) networks. Both take the input layout
/// [t (3) | gamma | cond (c) | null flag] and emit 3 values. Targets and
/// conditions are standardized before they reach the networks; a null
/// condition is encoded as zeroed cond slots with the flag set.
struct FlowScorePair {
  Mlp flow;
  std::optional<Mlp> score;
  std::size_t cond_dim = 3;
  Standardizer target_norm = Standardizer::identity(3);
  Standardizer cond_norm = Standardizer::identity(3);

  static FlowScorePair create(std::size_t cond_dim, const std::vector<std::size_t>& flow_hidden,
                              const std::vector<std::size_t>& score_hidden, Activation act, std::uint64_t seed);

  [[nodiscard]] std::size_t input_dim() const { return cond_dim + 5; }

  /// Fits both standardizers to the dataset.
  void fit_normalization(const ConditionalDataset& data);

  /// Network inputs for samples t (3 x B, standardized space) at one gamma.
  /// `cond` holds raw conditions (c x B); null == true drops them.
  [[nodiscard]] Batch make_inputs(const Batch& t, double gamma, const Batch& cond, bool null) const;
};

/// A learned or analytic map from network inputs (see FlowScorePair) to 3 x B outputs.
using BatchField = std::function<Batch(const Batch& inputs)>;

BatchField as_field(const Mlp& net);

/// Training inputs and regression targets for one minibatch: per sample
/// gamma ~ U(0, gamma_max), eps ~ N(0, I), condition dropped with probability eta.
struct PathDraw {
  Batch inputs;
  Batch target;
};

enum class PathTarget { velocity, score };

PathDraw draw_path_batch(const FlowScorePair& pair, const ConditionalDataset& data,
                         std::span<const std::size_t> indices, double eta, double gamma_max, PathTarget kind,
                         Rng& rng);

/// Mean squared error of `field` against the conditional targets over the whole dataset.
double cfm_loss(const BatchField& field, const FlowScorePair& pair, const ConditionalDataset& data, double eta,
                std::uint64_t seed, double gamma_max = 1.0 - 1e-4);
double dsm_loss(const BatchField& field, const FlowScorePair& pair, const ConditionalDataset& data, double eta,
                std::uint64_t seed, double gamma_max = 1.0 - 1e-4);

/// Loss and gradient of `net` on a minibatch (mean over samples of the squared error).
LossGrad path_loss_grad(const Mlp& net, const FlowScorePair& pair, const ConditionalDataset& data,
                        std::span<const std::size_t> indices, double eta, double gamma_max, PathTarget kind,
                        Rng& rng);

TrainResult train_flow(FlowScorePair& pair, AdamState& opt, const ConditionalDataset& data, const TrainConfig& cfg,
                       double eta, std::size_t first_epoch = 0);
TrainResult train_score(FlowScorePair& pair, AdamState& opt, const ConditionalDataset& data, const TrainConfig& cfg,
                        double eta, std::size_t first_epoch = 0);

/// (1 - w) uncond + w cond.
Batch guided_combine(const Batch& uncond, const Batch& cond, double w);

struct Guided {
  Vec3 field;
  std::optional<Vec3> score;
};

/// Guided field and score of the pair at one standardized-space point.
Guided guided_combine(const FlowScorePair& pair, const Vec3& t, double gamma, const Eigen::VectorXd& cond, double w);

/// Euler-Maruyama in gamma from t0 ~ N(0, I) up to gamma_max with drift
/// u~ + sigma^2/2 s~, then one endpoint step to the denoised estimate
/// (t + 2(1 - gamma) u~) / (2 - gamma). Column j of `cond` (c x B) is the
/// condition of sample j, whose noise is drawn from rngs[j]. Fields act in
/// standardized space and the result is in that space too.
Batch sample_sde(const BatchField& flow, const BatchField* score, const FlowScorePair& pair, const Batch& cond,
                 const GuidanceCfg& cfg, std::span<Rng> rngs);

/// Samples in data space (standardization undone, first component zeroed
/// when cfg.enforce_linear_zero).
Batch sample_conditional(const FlowScorePair& pair, const Batch& cond, const GuidanceCfg& cfg, std::span<Rng> rngs);
Vec3 sample_sde(const FlowScorePair& pair, const Eigen::VectorXd& cond, const GuidanceCfg& cfg, std::uint64_t seed);

/// (tau_i, xbar_i) on the filtered grid.
ConditionalDataset build_sgs_dataset(const FilteredBundle& bundle);

/// Rate-form residual s = (x~1 - x~0 - J(xn) x~0 dt) / dt conditioned on (xn, x~0).
ConditionalDataset build_stab_dataset(std::span<const PerturbSample> samples, const Params& p = {});

/// Forcing for a batch of coarse states (3 x B); column j draws from rngs[j].
using BatchForcing = std::function<Batch(const Batch& states, std::span<Rng> rngs)>;

/// One rollout per seed of xbar' = f(xbar) + forcing, RK4 with the forcing held
/// constant over each step. Path j draws its noise from Rng(seeds[j]); a path
/// that blows up leaves the batch and keeps its partial trajectory.
std::vector<Rollout> forced_rollouts(const BatchForcing& forcing, const Vec3& xbar0, double h, std::size_t n,
                                     std::span<const std::uint64_t> seeds, const Params& p = {});

std::vector<Rollout> closure_rollouts_generative(const FlowScorePair& pair, const Vec3& xbar0, double h,
                                                 std::size_t n, const GuidanceCfg& cfg,
                                                 std::span<const std::uint64_t> seeds, const Params& p = {});
Rollout closure_rollout_generative(const FlowScorePair& pair, const Vec3& xbar0, double h, std::size_t n,
                                   const GuidanceCfg& cfg, std::uint64_t seed, const Params& p = {});

/// x~_{n+1} = x~_n + J(x_n) x~_n dt + s dt with s sampled conditioned on (x_n, x~_n).
std::vector<StabilizedRollout> stabilize_rollouts_generative(const FlowScorePair& pair, const Trajectory& nominal,
                                                             const Vec3& xt0, const GuidanceCfg& cfg,
                                                             std::span<const std::uint64_t> seeds,
                                                             const Params& p = {});
StabilizedRollout stabilize_rollout_generative(const FlowScorePair& pair, const Trajectory& nominal, const Vec3& xt0,
                                               const GuidanceCfg& cfg, std::uint64_t seed, const Params& p = {});

}  // namespace sgs
