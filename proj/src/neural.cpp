#include "sgs/neural.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sgs {

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "silu") return Activation::silu;
  throw InvalidArgument("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation a) { return a == Activation::relu ? "relu" : "silu"; }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

void MlpSpec::validate() const {
  if (in_dim < 1 || out_dim < 1) throw InvalidArgument("MLP input and output dims must be >= 1");
  if (hidden.empty()) throw InvalidArgument("MLP needs at least one hidden layer");
  for (auto h : hidden)
    if (h < 1) throw InvalidArgument("MLP hidden widths must be >= 1");
}

std::size_t MlpSpec::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < layer_count(); ++l) n += layer_out(l) * (layer_in(l) + 1);
  return n;
}

Mlp::Mlp(MlpSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  offsets_.resize(spec_.layer_count());
  std::size_t off = 0;
  for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
    offsets_[l] = off;
    off += spec_.layer_out(l) * (spec_.layer_in(l) + 1);
  }
  params_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(off));
  shift_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec_.in_dim));
  scale_ = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(spec_.in_dim));
}

Mlp Mlp::random(MlpSpec spec, std::uint64_t seed) {
  Mlp m(std::move(spec));
  Rng rng(seed);
  for (std::size_t l = 0; l < m.spec_.layer_count(); ++l) {
    auto w = m.weight(l);
    const double limit = std::sqrt(6.0 / static_cast<double>(m.spec_.layer_in(l)));
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.uniform(-limit, limit);
  }
  return m;
}

void Mlp::set_params(const Eigen::VectorXd& p) {
  if (p.size() != params_.size())
    throw DimMismatch("parameter vector has " + std::to_string(p.size()) + " entries, model expects " +
                      std::to_string(params_.size()));
  params_ = p;
}

void Mlp::set_input_normalization(const Eigen::VectorXd& shift, const Eigen::VectorXd& scale) {
  if (shift.size() != shift_.size() || scale.size() != scale_.size())
    throw DimMismatch("input normalization has the wrong dimension");
  if ((scale.array() <= 0.0).any()) throw InvalidArgument("input scales must be positive");
  shift_ = shift;
  scale_ = scale;
}

void Mlp::fit_input_normalization(const Batch& inputs) {
  if (inputs.rows() != shift_.size()) throw DimMismatch("fit_input_normalization: wrong input dimension");
  if (inputs.cols() == 0) throw EmptyInput("fit_input_normalization: no samples");
  const Eigen::VectorXd mean = inputs.rowwise().mean();
  Eigen::VectorXd sd = ((inputs.colwise() - mean).array().square().rowwise().mean()).sqrt().matrix();
  for (Eigen::Index i = 0; i < sd.size(); ++i)
    if (!(sd(i) > 1e-12)) sd(i) = 1.0;
  set_input_normalization(mean, sd);
}

Eigen::Map<const Eigen::MatrixXd> Mlp::weight(std::size_t l) const {
  return {params_.data() + offset(l), static_cast<Eigen::Index>(spec_.layer_out(l)),
          static_cast<Eigen::Index>(spec_.layer_in(l))};
}

Eigen::Map<const Eigen::VectorXd> Mlp::bias(std::size_t l) const {
  return {params_.data() + offset(l) + spec_.layer_out(l) * spec_.layer_in(l),
          static_cast<Eigen::Index>(spec_.layer_out(l))};
}

Eigen::Map<Eigen::MatrixXd> Mlp::weight(std::size_t l) {
  return {params_.data() + offset(l), static_cast<Eigen::Index>(spec_.layer_out(l)),
          static_cast<Eigen::Index>(spec_.layer_in(l))};
}

Eigen::Map<Eigen::VectorXd> Mlp::bias(std::size_t l) {
  return {params_.data() + offset(l) + spec_.layer_out(l) * spec_.layer_in(l),
          static_cast<Eigen::Index>(spec_.layer_out(l))};
}

namespace {

void activate(Activation a, const Batch& z, Batch& out) {
  if (a == Activation::relu) {
    out = z.cwiseMax(0.0);
  } else {
    out = z.unaryExpr([](double v) { return silu(v); });
  }
}

// d(act)/dz evaluated at z, multiplied into g in place.
void activation_backward(Activation a, const Batch& z, Batch& g) {
  if (a == Activation::relu) {
    g = (z.array() > 0.0).select(g, 0.0);
  } else {
    g.array() *= z.unaryExpr([](double v) {
      const double s = sigmoid(v);
      return s + v * s * (1.0 - s);
    }).array();
  }
}

}  // namespace

Eigen::VectorXd Mlp::evaluate(const Eigen::VectorXd& input) const {
  Batch in = input;
  return forward(in).col(0);
}

Batch Mlp::forward(const Batch& inputs) const {
  Tape tape;
  return forward(inputs, tape);
}

Batch Mlp::forward(const Batch& inputs, Tape& tape) const {
  if (static_cast<std::size_t>(inputs.rows()) != spec_.in_dim)
    throw DimMismatch("MLP expects " + std::to_string(spec_.in_dim) + " inputs, got " +
                      std::to_string(inputs.rows()));
  const std::size_t layers = spec_.layer_count();
  tape.pre.resize(layers);
  tape.post.resize(layers + 1);
  tape.post[0] = (inputs.colwise() - shift_).array().colwise() / scale_.array();
  for (std::size_t l = 0; l < layers; ++l) {
    Batch& z = tape.pre[l];
    z.noalias() = weight(l) * tape.post[l];
    z.colwise() += bias(l);
    if (l + 1 < layers)
      activate(spec_.activation, z, tape.post[l + 1]);
    else
      tape.post[l + 1] = z;
  }
  Batch out = tape.post[layers];
  if (spec_.residual) {
    const auto m = static_cast<Eigen::Index>(std::min(spec_.in_dim, spec_.out_dim));
    out.topRows(m) += inputs.topRows(m);
  }
  return out;
}

void Mlp::backward(const Tape& tape, const Batch& d_output, Eigen::VectorXd& grad, Batch* d_input) const {
  if (grad.size() != params_.size()) grad = Eigen::VectorXd::Zero(params_.size());
  const std::size_t layers = spec_.layer_count();
  Batch g = d_output;
  for (std::size_t l = layers; l-- > 0;) {
    if (l + 1 < layers) activation_backward(spec_.activation, tape.pre[l], g);
    const auto out = static_cast<Eigen::Index>(spec_.layer_out(l));
    const auto in = static_cast<Eigen::Index>(spec_.layer_in(l));
    Eigen::Map<Eigen::MatrixXd> gw(grad.data() + offset(l), out, in);
    Eigen::Map<Eigen::VectorXd> gb(grad.data() + offset(l) + static_cast<std::size_t>(out * in), out);
    gw.noalias() += g * tape.post[l].transpose();
    gb += g.rowwise().sum();
    if (l > 0 || d_input != nullptr) {
      Batch prev = weight(l).transpose() * g;
      g.swap(prev);
    }
  }
  if (d_input != nullptr) {
    *d_input = g.array().colwise() / scale_.array();
    if (spec_.residual) {
      const auto m = static_cast<Eigen::Index>(std::min(spec_.in_dim, spec_.out_dim));
      d_input->topRows(m) += d_output.topRows(m);
    }
  }
}

LossGrad loss_grad(const Mlp& model, const Batch& inputs, const OutputLoss& loss) {
  Tape tape;
  const Batch out = model.forward(inputs, tape);
  Batch d_out = Batch::Zero(out.rows(), out.cols());
  LossGrad r;
  r.loss = loss(out, d_out);
  if (!std::isfinite(r.loss)) throw NonFiniteLoss("loss is not finite");
  r.grad = Eigen::VectorXd::Zero(model.params().size());
  model.backward(tape, d_out, r.grad);
  if (!r.grad.allFinite()) throw NonFiniteLoss("gradient is not finite");
  return r;
}

AdamState AdamState::for_model(const Mlp& model, double lr) {
  AdamState s;
  s.lr = lr;
  s.m = Eigen::VectorXd::Zero(model.params().size());
  s.v = Eigen::VectorXd::Zero(model.params().size());
  return s;
}

void adam_step(AdamState& s, Mlp& model, const Eigen::VectorXd& grad) {
  if (grad.size() != model.params().size()) throw DimMismatch("adam_step: gradient size mismatch");
  if (s.m.size() != grad.size()) s.m = Eigen::VectorXd::Zero(grad.size());
  if (s.v.size() != grad.size()) s.v = Eigen::VectorXd::Zero(grad.size());
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  model.params().array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (!(lr >= 0.0)) throw InvalidArgument("learning rate must be non-negative");
}

TrainResult train(Mlp& model, AdamState& opt, std::size_t sample_count, const BatchObjective& objective,
                  const TrainConfig& cfg, std::size_t first_epoch) {
  cfg.validate();
  if (sample_count == 0) throw EmptyInput("train: empty dataset");
  opt.lr = cfg.lr;
  TrainResult result;
  std::vector<std::size_t> order(sample_count);
  for (std::size_t e = first_epoch; e < first_epoch + cfg.epochs; ++e) {
    Rng rng(stream_seed(cfg.seed, e));
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    for (std::size_t begin = 0; begin < sample_count; begin += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, sample_count - begin);
      std::span<const std::size_t> batch(order.data() + begin, count);
      LossGrad lg;
      try {
        lg = objective(model, batch, rng);
        if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) throw NonFiniteLoss("loss is not finite");
      } catch (const NonFiniteLoss& err) {
        result.diverged = true;
        result.failed_epoch = e;
        result.message = err.what();
        return result;
      }
      total += lg.loss * static_cast<double>(count);
      adam_step(opt, model, lg.grad);
    }
    result.history.push_back(total / static_cast<double>(sample_count));
  }
  return result;
}

}  // namespace sgs
