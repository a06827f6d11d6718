// sgslab: simulate, filter, build datasets, train, roll out and score
// stochastic closure models for Lorenz-63.

#include "sgs/config.hpp"
#include "sgs/dynamics.hpp"
#include "sgs/filtering.hpp"
#include "sgs/generative.hpp"
#include "sgs/io.hpp"
#include "sgs/metrics.hpp"
#include "sgs/parametric.hpp"
#include "sgs/quadratic.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace sgs;
namespace fs = std::filesystem;
using io::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitMissing = 4;

const std::vector<std::string> kCommonKeys = {"seed", "out", "sigma", "r", "beta"};

std::vector<std::string> with_common(std::vector<std::string> keys) {
  keys.insert(keys.end(), kCommonKeys.begin(), kCommonKeys.end());
  return keys;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

/// State shared by every command: the merged config, the output directory,
/// the root seed and the manifest being assembled.
struct Run {
  std::string command;
  Config cfg;
  fs::path out;
  std::uint64_t root_seed = 0;
  io::RunManifest manifest;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  [[nodiscard]] Params params() const {
    Params p;
    p.sigma = cfg.get_double("sigma", p.sigma);
    p.r = cfg.get_double("r", p.r);
    p.beta = cfg.get_double("beta", p.beta);
    return p;
  }

  /// Named stream of the root seed, recorded in the manifest.
  std::uint64_t seed(const std::string& stream) {
    const std::uint64_t s = named_seed(root_seed, stream);
    manifest.seeds[stream] = s;
    return s;
  }

  fs::path input(const std::string& key) {
    const fs::path p = cfg.get_string(key);
    if (!fs::exists(p)) throw MissingInput("input '" + key + "' not found: " + p.string());
    manifest.add_input(p);
    return p;
  }

  fs::path output(const std::string& name) {
    fs::create_directories(out);
    return out / name;
  }

  void produced(const fs::path& p) { manifest.add_output(p); }

  void finish() {
    manifest.command = command;
    manifest.tool_version = SGSLAB_VERSION;
    manifest.config = cfg.snapshot();
    manifest.timings_s["total"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    manifest.write(output("manifest.json"));
  }
};

double positive(const Config& c, const std::string& key, double fallback) {
  const double v = c.get_double(key, fallback);
  if (!(v > 0.0)) throw ConfigError("key '" + key + "' must be positive, got " + c.get_string(key, "?"));
  return v;
}

/// "name=path, name=path"
std::vector<std::pair<std::string, fs::path>> named_paths(const std::string& spec) {
  std::vector<std::pair<std::string, fs::path>> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("expected name=path, got '" + item + "'");
    const auto strip = [](std::string s) {
      s.erase(0, s.find_first_not_of(' '));
      s.erase(s.find_last_not_of(' ') + 1);
      return s;
    };
    out.emplace_back(strip(item.substr(0, eq)), strip(item.substr(eq + 1)));
  }
  if (out.empty()) throw ConfigError("empty name=path list");
  return out;
}

// ---------------------------------------------------------------------------

void cmd_simulate(Run& run) {
  const Config& c = run.cfg;
  c.require_known(with_common({"dt", "steps", "x0", "scheme", "spinup"}));
  const double dt = positive(c, "dt", 0.01);
  const std::size_t steps = c.get_size("steps", 10000);
  const std::size_t spinup = c.get_size("spinup", 0);
  const Scheme scheme = parse_scheme(c.get_string("scheme", "rk4"));
  const Params p = run.params();
  Vec3 x0 = c.get_vec3("x0", Vec3(1, 1, 1));
  if (spinup > 0) x0 = integrate_lorenz(x0, dt, spinup, p, scheme).states.back();
  const Trajectory traj = integrate_lorenz(x0, dt, steps, p, scheme);
  const fs::path f = run.output("trajectory.csv");
  io::write_trajectory(f, traj);
  run.produced(f);
}

FilteredBundle filtered_input(Run& run) {
  const Trajectory fine = io::read_trajectory(run.input("input"));
  const double delta = positive(run.cfg, "delta", 0.04);
  FilteredBundle b = compute_exact_sgs(fine, FilterSpec::from_width(delta, fine.dt), run.params());
  const std::size_t step = run.cfg.get_size("subsample", 1);
  return step > 1 ? subsample(b, step) : b;
}

void cmd_filter(Run& run) {
  run.cfg.require_known(with_common({"input", "delta", "subsample"}));
  const FilteredBundle b = filtered_input(run);
  io::Table t{{"t"}, Eigen::MatrixXd(static_cast<Eigen::Index>(b.size()), 13)};
  for (auto& col : io::xyz_columns({"x", "xbar", "xp", "tau"})) t.columns.push_back(col);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    t.data(r, 0) = b.filtered.time(i);
    t.data.block<1, 3>(r, 1) = b.fine[i].transpose();
    t.data.block<1, 3>(r, 4) = b.filtered[i].transpose();
    t.data.block<1, 3>(r, 7) = b.fluctuations[i].transpose();
    t.data.block<1, 3>(r, 10) = b.exact_tau[i].transpose();
  }
  const fs::path bundle = run.output("bundle.csv"), filtered = run.output("filtered.csv");
  io::write_table(bundle, t);
  io::write_trajectory(filtered, b.filtered);
  run.produced(bundle);
  run.produced(filtered);
}

void cmd_dataset(Run& run) {
  const Config& c = run.cfg;
  c.require_known(with_common({"kind", "input", "delta", "subsample", "samples_per_state", "eps"}));
  const std::string kind = c.get_string("kind");
  const Params p = run.params();
  io::Table table;
  if (kind == "pairs") {
    const Trajectory fine = io::read_trajectory(run.input("input"));
    const double delta = positive(c, "delta", 0.01);
    table = io::pairs_table(gen_pairs(fine, FilterSpec::from_width(delta, fine.dt)));
  } else if (kind == "perturb" || kind == "stab") {
    const Trajectory nominal = io::read_trajectory(run.input("input"));
    const auto samples =
        gen_perturb(nominal, c.get_size("samples_per_state", 10), positive(c, "eps", 0.01), run.seed("data"), p);
    table = kind == "perturb" ? io::perturb_table(samples)
                              : io::dataset_table(build_stab_dataset(samples, p), {"s"}, {"xn", "xt"});
  } else if (kind == "sgs") {
    table = io::dataset_table(build_sgs_dataset(filtered_input(run)), {"tau"}, {"xbar"});
  } else if (kind == "fluct") {
    table = io::dataset_table(build_fluct_dataset(filtered_input(run)), {"xp"}, {"xbar"});
  } else {
    throw ConfigError("unknown dataset kind '" + kind + "' (pairs, perturb, sgs, stab, fluct)");
  }
  const fs::path f = run.output("dataset.csv");
  io::write_table(f, table);
  run.produced(f);
  run.manifest.extra["samples"] = table.rows();
}

// ---------------------------------------------------------------------------

struct TrainSetup {
  TrainConfig tc;
  MlpSpec spec;
  std::optional<io::Checkpoint> resume;
};

TrainSetup train_setup(Run& run) {
  const Config& c = run.cfg;
  TrainSetup s;
  s.tc.epochs = c.get_size("epochs", 100);
  s.tc.batch_size = c.get_size("batch_size", 256);
  s.tc.lr = c.get_double("lr", 1e-3);
  s.tc.seed = run.seed("train");
  s.tc.validate();
  s.spec.hidden = c.get_sizes("hidden", {64, 64});
  s.spec.activation = parse_activation(c.get_string("activation", "silu"));
  s.spec.residual = c.get_bool("residual", false);
  if (c.has("resume")) s.resume = io::load_checkpoint(run.input("resume"));
  return s;
}

void write_training(Run& run, const io::Checkpoint& ck, const TrainResult& res, std::size_t first_epoch) {
  const fs::path hist = run.output("history.csv");
  io::write_history(hist, res.history, first_epoch);
  run.produced(hist);
  if (res.diverged)
    throw NonFiniteLoss("training diverged at epoch " + std::to_string(res.failed_epoch) + ": " + res.message);
  const fs::path f = run.output("checkpoint.json");
  io::save_checkpoint(f, ck);
  run.produced(f);
}

io::Checkpoint expect_family(io::Checkpoint ck, const std::string& family) {
  if (ck.family != family) throw SchemaMismatch("checkpoint family is '" + ck.family + "', expected '" + family + "'");
  return ck;
}

void cmd_train(Run& run) {
  const Config& c = run.cfg;
  c.require_known(with_common({"family", "dataset", "epochs", "batch_size", "lr", "hidden", "score_hidden",
                               "activation", "residual", "resume", "model", "eta"}));
  const std::string family = c.get_string("family");
  const Params p = run.params();
  TrainSetup s = train_setup(run);
  const io::Table table = io::read_table(run.input("dataset"));
  const std::size_t first = s.resume ? s.resume->next_epoch : 0;
  TrainResult res;
  io::Checkpoint ck;
  ck.family = family;

  if (family == "closure") {
    const auto data = io::pairs_from_table(table);
    if (data.empty()) throw EmptyInput("closure dataset is empty");
    ClosureModel m;
    AdamState opt;
    if (s.resume) {
      const auto r = expect_family(*s.resume, "closure");
      m = io::closure_from_json(r.model);
      opt = r.optimizers.at("net");
    } else {
      m = ClosureModel::create(s.spec.hidden, s.spec.activation, run.seed("init"), s.spec.residual);
      m.h = data.front().h;
      Batch x0(3, static_cast<Eigen::Index>(data.size()));
      for (std::size_t j = 0; j < data.size(); ++j) x0.col(static_cast<Eigen::Index>(j)) = data[j].xbar0;
      m.net.fit_input_normalization(x0);
      opt = AdamState::for_model(m.net, s.tc.lr);
    }
    res = train_closure(m, opt, data, s.tc, p, first);
    ck.model = io::to_json(m);
    ck.optimizers["net"] = opt;
  } else if (family == "stabilizer") {
    const auto data = io::perturb_from_table(table);
    if (data.empty()) throw EmptyInput("stabilizer dataset is empty");
    StabilizerModel m;
    AdamState opt;
    if (s.resume) {
      const auto r = expect_family(*s.resume, "stabilizer");
      m = io::stabilizer_from_json(r.model);
      opt = r.optimizers.at("net");
    } else {
      m = StabilizerModel::create(s.spec.hidden, s.spec.activation, run.seed("init"), s.spec.residual);
      Batch in(6, static_cast<Eigen::Index>(data.size()));
      for (std::size_t j = 0; j < data.size(); ++j) in.col(static_cast<Eigen::Index>(j)) << data[j].xn, data[j].xt0;
      m.net.fit_input_normalization(in);
      opt = AdamState::for_model(m.net, s.tc.lr);
    }
    res = train_stabilizer(m, opt, data, s.tc, p, first);
    ck.model = io::to_json(m);
    ck.optimizers["net"] = opt;
  } else if (family == "flow" || family == "score") {
    const ConditionalDataset data = io::dataset_from_table(table, 3);
    if (data.size() == 0) throw EmptyInput("generative dataset is empty");
    const double eta = c.get_double("eta", 0.1);
    FlowScorePair pair;
    AdamState opt;
    if (s.resume) {
      const auto r = expect_family(*s.resume, family);
      pair = io::flow_score_from_json(r.model);
      opt = r.optimizers.at(family);
    } else if (family == "flow") {
      pair = FlowScorePair::create(data.cond_dim(), s.spec.hidden, c.get_sizes("score_hidden", {}),
                                   s.spec.activation, run.seed("init"));
      pair.fit_normalization(data);
      opt = AdamState::for_model(pair.flow, s.tc.lr);
    } else {
      pair = io::flow_score_from_json(io::load_checkpoint(run.input("model")).model);
      if (pair.cond_dim != data.cond_dim()) throw SchemaMismatch("dataset condition width does not match the model");
      if (!pair.score)
        pair.score = Mlp::random(MlpSpec{pair.input_dim(), 3, c.get_sizes("score_hidden", {128, 128, 128, 128}),
                                         s.spec.activation},
                                 run.seed("init"));
      opt = AdamState::for_model(*pair.score, s.tc.lr);
    }
    res = family == "flow" ? train_flow(pair, opt, data, s.tc, eta, first)
                           : train_score(pair, opt, data, s.tc, eta, first);
    ck.model = io::to_json(pair);
    ck.optimizers[family] = opt;
  } else {
    throw ConfigError("unknown training family '" + family + "' (closure, stabilizer, flow, score)");
  }
  ck.next_epoch = first + res.history.size();
  run.manifest.extra["first_epoch"] = first;
  run.manifest.extra["final_loss"] = res.history.empty() ? json(nullptr) : json(res.history.back());
  write_training(run, ck, res, first);
}

// ---------------------------------------------------------------------------

GuidanceCfg guidance(const Config& c, const std::string& fallback_preset) {
  const std::string preset = c.get_string("preset", fallback_preset);
  GuidanceCfg g;
  if (preset == "flow_closure") g = GuidanceCfg::flow_closure();
  else if (preset == "score_closure") g = GuidanceCfg::score_closure();
  else if (preset == "stabilization") g = GuidanceCfg::stabilization();
  else if (preset == "quadratic") g = GuidanceCfg::quadratic();
  else throw ConfigError("unknown guidance preset '" + preset + "'");
  g.w = c.get_double("w", g.w);
  g.sigma_gamma = c.get_double("sigma_gamma", g.sigma_gamma);
  g.d_gamma = c.get_double("d_gamma", g.d_gamma);
  g.gamma_max = c.get_double("gamma_max", g.gamma_max);
  g.enforce_linear_zero = c.get_bool("enforce_linear_zero", g.enforce_linear_zero);
  try {
    g.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("guidance: ") + e.what());
  }
  return g;
}

std::vector<std::uint64_t> rollout_seeds(Run& run) {
  if (run.cfg.has("seeds")) return run.cfg.get_u64s("seeds");
  const std::size_t n = run.cfg.get_size("ensemble", 1);
  const std::uint64_t base = run.seed("sample");
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = stream_seed(base, i);
  return s;
}

Vec3 start_state(Run& run) {
  if (run.cfg.has("start")) {
    const Trajectory t = io::read_trajectory(run.input("start"));
    const std::size_t i = run.cfg.get_size("start_index", 0);
    if (i >= t.size()) throw ConfigError("start_index beyond the start trajectory");
    return t[i];
  }
  return run.cfg.get_vec3("x0", Vec3(1, 1, 1));
}

void cmd_rollout(Run& run) {
  const Config& c = run.cfg;
  c.require_known(with_common({"method", "steps", "h", "x0", "start", "start_index", "model", "seeds", "ensemble",
                               "nominal", "xt0", "delta", "preset", "w", "sigma_gamma", "d_gamma", "gamma_max",
                               "enforce_linear_zero"}));
  const std::string method = c.get_string("method");
  const Params p = run.params();
  std::vector<Rollout> paths;
  std::vector<Trajectory> reconstructed;

  const bool tangent = method == "linearized" || method == "stabilized-parametric" || method == "stabilized-generative";
  if (tangent) {
    const Trajectory nominal = io::read_trajectory(run.input("nominal"));
    const Vec3 xt0 = c.get_vec3("xt0", Vec3::Constant(0.01));
    if (method == "linearized") {
      paths.push_back(integrate_linearized(nominal, xt0, p));
      reconstructed.push_back(reconstruct(nominal, paths.back().path));
    } else if (method == "stabilized-parametric") {
      const StabilizerModel m = io::stabilizer_from_json(io::load_checkpoint(run.input("model")).model);
      for (const auto s : rollout_seeds(run)) {
        StabilizedRollout r = rollout_stabilized(m, nominal, xt0, s, p);
        paths.push_back(std::move(r.tangent));
        reconstructed.push_back(std::move(r.reconstructed));
      }
    } else {
      const FlowScorePair pair = io::flow_score_from_json(io::load_checkpoint(run.input("model")).model);
      const auto seeds = rollout_seeds(run);
      for (auto& r : stabilize_rollouts_generative(pair, nominal, xt0, guidance(c, "stabilization"), seeds, p)) {
        paths.push_back(std::move(r.tangent));
        reconstructed.push_back(std::move(r.reconstructed));
      }
    }
  } else {
    const Vec3 x0 = start_state(run);
    const std::size_t steps = c.get_size("steps", 1000);
    if (method == "fe" || method == "rk") {
      const double h = positive(c, "h", 0.01);
      paths.push_back(method == "fe" ? forward_euler(x0, h, steps, p) : runge_kutta(x0, h, steps, p));
    } else if (method == "em-parametric") {
      const ClosureModel m = io::closure_from_json(io::load_checkpoint(run.input("model")).model);
      const double h = positive(c, "h", m.h > 0.0 ? m.h : 0.01);
      for (const auto s : rollout_seeds(run)) paths.push_back(rollout_closure(m, x0, h, steps, s, p));
    } else if (method == "generative" || method == "quadratic") {
      const FlowScorePair pair = io::flow_score_from_json(io::load_checkpoint(run.input("model")).model);
      const double h = positive(c, "h", 0.01);
      const auto seeds = rollout_seeds(run);
      paths = method == "generative"
                  ? closure_rollouts_generative(pair, x0, h, steps, guidance(c, "flow_closure"), seeds, p)
                  : closure_rollouts_quadratic(pair, x0, h, steps, positive(c, "delta", 0.04),
                                               guidance(c, "quadratic"), seeds, p);
    } else {
      throw ConfigError("unknown rollout method '" + method +
                        "' (fe, rk, em-parametric, generative, quadratic, linearized, stabilized-parametric, "
                        "stabilized-generative)");
    }
  }

  json flags = json::array(), norms = json::array();
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const std::string idx = std::to_string(i);
    const fs::path f = run.output((tangent ? "tangent_" : "rollout_") + idx + ".csv");
    io::write_trajectory(f, paths[i].path);
    run.produced(f);
    if (tangent) {
      const fs::path g = run.output("rollout_" + idx + ".csv");
      io::write_trajectory(g, reconstructed[i]);
      run.produced(g);
      norms.push_back(max_norm(paths[i].path));
    }
    flags.push_back(paths[i].blew_up);
  }
  run.manifest.extra["blew_up"] = flags;
  if (tangent) run.manifest.extra["max_tangent_norm"] = norms;
}

// ---------------------------------------------------------------------------

Trajectory burned(const Trajectory& t, std::size_t skip) {
  if (skip >= t.size()) throw EmptyInput("trajectory shorter than the requested burn-in");
  Trajectory out = t;
  out.states.erase(out.states.begin(), out.states.begin() + static_cast<std::ptrdiff_t>(skip));
  return out;
}

void write_metric_csv(const fs::path& path, const std::vector<std::string>& header,
                      const std::vector<std::pair<std::string, std::array<double, 3>>>& rows,
                      const std::optional<std::array<double, 3>>& baseline) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "method";
  for (const auto& h : header) out << ',' << h;
  if (baseline) out << ",beats_baseline";
  out << '\n';
  out.precision(17);
  for (const auto& [name, v] : rows) {
    out << name << ',' << v[0] << ',' << v[1] << ',' << v[2];
    if (baseline) out << ',' << ((v[0] < (*baseline)[0] && v[1] < (*baseline)[1] && v[2] < (*baseline)[2]) ? 1 : 0);
    out << '\n';
  }
}

void cmd_metrics(Run& run) {
  const Config& c = run.cfg;
  c.require_known(with_common({"reference", "candidates", "baseline", "bins", "skip"}));
  const std::size_t skip = c.get_size("skip", 0);
  const std::size_t bins = c.get_size("bins", 50);
  const Trajectory ref = burned(io::read_trajectory(run.input("reference")), skip);
  std::vector<std::pair<std::string, std::array<double, 3>>> w1, hell;
  json report = json::object();
  for (const auto& [name, path] : named_paths(c.get_string("candidates"))) {
    if (!fs::exists(path)) throw MissingInput("candidate '" + name + "' not found: " + path.string());
    run.manifest.add_input(path);
    const Trajectory t = burned(io::read_trajectory(path), skip);
    w1.emplace_back(name, per_coordinate_w1(t, ref));
    hell.emplace_back(name, projected_hellinger(t, ref, bins));
    report[name] = {{"w1", w1.back().second}, {"hellinger", hell.back().second}};
  }
  std::optional<std::array<double, 3>> base_w1, base_hell;
  if (c.has("baseline")) {
    const std::string b = c.get_string("baseline");
    for (std::size_t i = 0; i < w1.size(); ++i)
      if (w1[i].first == b) {
        base_w1 = w1[i].second;
        base_hell = hell[i].second;
      }
    if (!base_w1) throw ConfigError("baseline '" + b + "' is not among the candidates");
    report["baseline"] = b;
  }
  const fs::path fw = run.output("w1.csv"), fh = run.output("hellinger.csv"), fj = run.output("metrics.json");
  write_metric_csv(fw, {"x", "y", "z"}, w1, base_w1);
  write_metric_csv(fh, {"x-y", "x-z", "y-z"}, hell, base_hell);
  io::write_json(fj, report);
  for (const auto& f : {fw, fh, fj}) run.produced(f);
}

// ---------------------------------------------------------------------------

void write_histograms(Run& run, const std::string& name, const Trajectory& t, const Trajectory& range,
                      std::size_t bins) {
  io::Table h1{{"x_center", "x_density", "y_center", "y_density", "z_center", "z_density"},
               Eigen::MatrixXd(static_cast<Eigen::Index>(bins), 6)};
  for (int a = 0; a < 3; ++a) {
    const auto samples = t.component(a), span = range.component(a);
    const auto [lo, hi] = std::minmax_element(span.begin(), span.end());
    const Hist1D h = histogram1d(samples, bins, *lo, *hi);
    for (std::size_t b = 0; b < bins; ++b) {
      const double width = h.edges[b + 1] - h.edges[b];
      h1.data(static_cast<Eigen::Index>(b), 2 * a) = 0.5 * (h.edges[b] + h.edges[b + 1]);
      h1.data(static_cast<Eigen::Index>(b), 2 * a + 1) = h.mass[b] / width;
    }
  }
  const fs::path f = run.output("hist_" + name + ".csv");
  io::write_table(f, h1);
  run.produced(f);

  const std::pair<int, int> axes[] = {{0, 1}, {0, 2}, {1, 2}};
  const char* labels[] = {"xy", "xz", "yz"};
  for (int k = 0; k < 3; ++k) {
    const auto [i, j] = axes[k];
    const auto ri = range.component(i), rj = range.component(j);
    const auto [ilo, ihi] = std::minmax_element(ri.begin(), ri.end());
    const auto [jlo, jhi] = std::minmax_element(rj.begin(), rj.end());
    const Hist2D h = histogram2d(t.component(i), t.component(j), linear_edges(*ilo, *ihi, bins, 0.05),
                                 linear_edges(*jlo, *jhi, bins, 0.05));
    const Eigen::MatrixXd m = h.mass();
    io::Table tab{{"u_center", "v_center", "density"}, Eigen::MatrixXd(static_cast<Eigen::Index>(bins * bins), 3)};
    Eigen::Index row = 0;
    for (std::size_t a = 0; a < bins; ++a)
      for (std::size_t b = 0; b < bins; ++b, ++row) {
        const double wa = h.xedges[a + 1] - h.xedges[a], wb = h.yedges[b + 1] - h.yedges[b];
        tab.data(row, 0) = 0.5 * (h.xedges[a] + h.xedges[a + 1]);
        tab.data(row, 1) = 0.5 * (h.yedges[b] + h.yedges[b + 1]);
        tab.data(row, 2) = m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) / (wa * wb);
      }
    const fs::path g = run.output("proj_" + name + "_" + labels[k] + ".csv");
    io::write_table(g, tab);
    run.produced(g);
  }
}

void cmd_report(Run& run) {
  const Config& c = run.cfg;
  c.require_known(with_common({"input", "delta", "subsample", "bins", "rollouts"}));
  const std::size_t bins = c.get_size("bins", 50);
  const FilteredBundle b = filtered_input(run);
  io::Table series{{"t"}, Eigen::MatrixXd(static_cast<Eigen::Index>(b.size()), 13)};
  for (auto& col : io::xyz_columns({"x", "xbar", "xp", "tau"})) series.columns.push_back(col);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    series.data(r, 0) = b.filtered.time(i);
    series.data.block<1, 3>(r, 1) = b.fine[i].transpose();
    series.data.block<1, 3>(r, 4) = b.filtered[i].transpose();
    series.data.block<1, 3>(r, 7) = b.fluctuations[i].transpose();
    series.data.block<1, 3>(r, 10) = b.exact_tau[i].transpose();
  }
  const fs::path f = run.output("series.csv");
  io::write_table(f, series);
  run.produced(f);

  write_histograms(run, "filtered", b.filtered, b.filtered, bins);
  if (c.has("rollouts"))
    for (const auto& [name, path] : named_paths(c.get_string("rollouts"))) {
      if (!fs::exists(path)) throw MissingInput("rollout '" + name + "' not found: " + path.string());
      run.manifest.add_input(path);
      write_histograms(run, name, io::read_trajectory(path), b.filtered, bins);
    }
}

// ---------------------------------------------------------------------------

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
};

int run_command(const std::string& name, const CommonArgs& args, void (*fn)(Run&)) {
  Run run;
  run.command = name;
  run.manifest.started_at = utc_now();
  if (!args.config.empty()) run.cfg = Config::load(args.config);
  for (const auto& s : args.sets) run.cfg.set_assignment(s);
  if (args.seed) run.cfg.set("seed", std::to_string(*args.seed), "--seed");
  run.root_seed = run.cfg.get_u64("seed", 0);
  if (!args.out.empty()) {
    run.out = args.out;
  } else if (run.cfg.has("out")) {
    run.out = run.cfg.get_string("out");
  } else {
    const char* root = std::getenv("SGSLAB_OUT");
    run.out = fs::path(root != nullptr && *root != '\0' ? root : "sgslab-out") / name;
  }
  run.manifest.seeds["root"] = run.root_seed;
  fn(run);
  run.finish();
  std::cout << name << ": wrote " << run.manifest.outputs.size() << " file(s) to " << run.out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic closure modeling lab for Lorenz-63"};
  app.set_version_flag("--version", std::string(SGSLAB_VERSION));
  app.require_subcommand(1);
  CommonArgs args;

  struct Entry {
    const char* name;
    const char* help;
    void (*fn)(Run&);
  };
  const Entry entries[] = {
      {"simulate", "Integrate the Lorenz-63 system", cmd_simulate},
      {"filter", "Box-filter a trajectory and compute the exact subgrid term", cmd_filter},
      {"dataset", "Build a training dataset (pairs, perturb, sgs, stab, fluct)", cmd_dataset},
      {"train", "Train a closure, stabilizer, flow or score model", cmd_train},
      {"rollout", "Roll out a deterministic, parametric, generative or tangent model", cmd_rollout},
      {"metrics", "Compare trajectories by W1 and projected Hellinger distance", cmd_metrics},
      {"report", "Emit plot-ready series, histograms and projections", cmd_report},
  };
  std::vector<std::pair<CLI::App*, const Entry*>> subs;
  for (const Entry& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    sub->add_option("--config,-c", args.config, "Config file (key = value)");
    sub->add_option("--seed", args.seed, "Root seed (overrides the config)");
    sub->add_option("--out,-o", args.out, "Output directory (default $SGSLAB_OUT/<command>)");
    sub->add_option("--set", args.sets, "Override a config key: --set key=value")->take_all();
    subs.emplace_back(sub, &e);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  for (const auto& [sub, e] : subs) {
    if (!sub->parsed()) continue;
    try {
      return run_command(e->name, args, e->fn);
    } catch (const ConfigError& err) {
      std::cerr << "config error: " << err.what() << '\n';
      return kExitConfig;
    } catch (const InvalidArgument& err) {
      std::cerr << "invalid setting: " << err.what() << '\n';
      return kExitConfig;
    } catch (const OddStride& err) {
      std::cerr << "invalid setting: " << err.what() << '\n';
      return kExitConfig;
    } catch (const StencilTooWide& err) {
      std::cerr << "invalid setting: " << err.what() << '\n';
      return kExitConfig;
    } catch (const NonFiniteState& err) {
      std::cerr << "numerical failure: " << err.what() << '\n';
      return kExitNumerical;
    } catch (const NonFiniteLoss& err) {
      std::cerr << "numerical failure: " << err.what() << '\n';
      return kExitNumerical;
    } catch (const MissingInput& err) {
      std::cerr << "missing input: " << err.what() << '\n';
      return kExitMissing;
    } catch (const SchemaMismatch& err) {
      std::cerr << "bad input: " << err.what() << '\n';
      return kExitMissing;
    } catch (const EmptyInput& err) {
      std::cerr << "bad input: " << err.what() << '\n';
      return kExitMissing;
    } catch (const std::exception& err) {
      std::cerr << "error: " << err.what() << '\n';
      return 1;
    }
  }
  return 1;
}
