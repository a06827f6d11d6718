#pragma once

#include "sgs/core.hpp"
#include "sgs/rng.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sgs {

enum class Activation { relu, silu };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

struct MlpSpec {
  std::size_t in_dim = 1;
  std::size_t out_dim = 1;
  std::vector<std::size_t> hidden{1};
  Activation activation = Activation::relu;
  bool residual = false;  ///< add input[k] to output[k] for k < min(in_dim, out_dim)

  void validate() const;
  [[nodiscard]] std::size_t layer_count() const { return hidden.size() + 1; }
  [[nodiscard]] std::size_t layer_in(std::size_t l) const { return l == 0 ? in_dim : hidden[l - 1]; }
  [[nodiscard]] std::size_t layer_out(std::size_t l) const { return l == hidden.size() ? out_dim : hidden[l]; }
  [[nodiscard]] std::size_t parameter_count() const;
};

/// Activations recorded by a forward pass; consumed by Mlp::backward.
struct Tape {
  std::vector<Batch> pre;   ///< pre-activation of every layer
  std::vector<Batch> post;  ///< post[0] is the normalized input, post[l + 1] the output of layer l
};

/// Feed-forward network with a flat parameter vector. Layer l stores its
/// weight matrix (column-major, out x in) followed by its bias. Inputs are
/// normalized by a fixed affine map before the first layer.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(MlpSpec spec);

  /// He-uniform weights, zero biases.
  static Mlp random(MlpSpec spec, std::uint64_t seed);

  [[nodiscard]] const MlpSpec& spec() const { return spec_; }
  [[nodiscard]] const Eigen::VectorXd& params() const { return params_; }
  Eigen::VectorXd& params() { return params_; }
  void set_params(const Eigen::VectorXd& p);

  [[nodiscard]] const Eigen::VectorXd& input_shift() const { return shift_; }
  [[nodiscard]] const Eigen::VectorXd& input_scale() const { return scale_; }
  void set_input_normalization(const Eigen::VectorXd& shift, const Eigen::VectorXd& scale);

  /// Sets the normalization to the per-row mean and standard deviation of `inputs`
  /// (rows with zero spread keep unit scale).
  void fit_input_normalization(const Batch& inputs);

  [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> weight(std::size_t layer) const;
  [[nodiscard]] Eigen::Map<const Eigen::VectorXd> bias(std::size_t layer) const;
  Eigen::Map<Eigen::MatrixXd> weight(std::size_t layer);
  Eigen::Map<Eigen::VectorXd> bias(std::size_t layer);

  [[nodiscard]] Eigen::VectorXd evaluate(const Eigen::VectorXd& input) const;
  [[nodiscard]] Batch forward(const Batch& inputs) const;
  Batch forward(const Batch& inputs, Tape& tape) const;

  /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
  /// When `d_input` is non-null it receives d(loss)/d(input).
  void backward(const Tape& tape, const Batch& d_output, Eigen::VectorXd& grad, Batch* d_input = nullptr) const;

 private:
  [[nodiscard]] std::size_t offset(std::size_t layer) const { return offsets_[layer]; }

  MlpSpec spec_;
  Eigen::VectorXd params_;
  std::vector<std::size_t> offsets_;
  Eigen::VectorXd shift_;
  Eigen::VectorXd scale_;
};

struct LossGrad {
  double loss = 0.0;
  Eigen::VectorXd grad;
};

/// A batch loss: maps network outputs (out_dim x B) to a scalar and writes
/// d(loss)/d(outputs) into the second argument.
using OutputLoss = std::function<double(const Batch& outputs, Batch& d_outputs)>;

/// Loss and parameter gradient by reverse-mode propagation through the tape.
/// Throws NonFiniteLoss if the loss or gradient is not finite.
LossGrad loss_grad(const Mlp& model, const Batch& inputs, const OutputLoss& loss);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  Eigen::VectorXd m;
  Eigen::VectorXd v;

  static AdamState for_model(const Mlp& model, double lr = 1e-3);
};

/// Bias-corrected Adam update of the model parameters.
void adam_step(AdamState& state, Mlp& model, const Eigen::VectorXd& grad);

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
};

struct TrainResult {
  std::vector<double> history;  ///< sample-weighted mean loss of each completed epoch
  bool diverged = false;
  std::size_t failed_epoch = 0;
  std::string message;
};

/// Loss and gradient over the samples `indices`; `rng` is the epoch stream for
/// objectives that draw noise.
using BatchObjective = std::function<LossGrad(const Mlp& model, std::span<const std::size_t> indices, Rng& rng)>;

/// Minibatch Adam. Epoch e draws its shuffle and objective noise from
/// stream_seed(cfg.seed, e), so a run resumed at `first_epoch` with the saved
/// optimizer state continues exactly. A non-finite loss stops training and
/// is reported through the result.
TrainResult train(Mlp& model, AdamState& opt, std::size_t sample_count, const BatchObjective& objective,
                  const TrainConfig& cfg, std::size_t first_epoch = 0);

double sigmoid(double x);
double silu(double x);

}  // namespace sgs
