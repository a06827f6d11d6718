#include "sgs/io.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sgs::io {

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  if (!fs::exists(path)) throw MissingInput("missing input file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput("cannot read " + path.string());
  return in;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

void append_number(std::string& s, double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  s.append(buf, r.ptr);
}

Eigen::VectorXd vec_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json vec_to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

template <typename F>
auto schema_guard(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw SchemaMismatch(std::string(what) + ": " + e.what());
  }
}

}  // namespace

Eigen::Index Table::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return static_cast<Eigen::Index>(i);
  throw SchemaMismatch("table has no column '" + name + "'");
}

void write_table(const fs::path& path, const Table& table) {
  if (static_cast<Eigen::Index>(table.columns.size()) != table.data.cols())
    throw DimMismatch("write_table: header and data widths differ");
  auto out = open_out(path);
  std::string line;
  for (std::size_t i = 0; i < table.columns.size(); ++i) {
    if (i) line += ',';
    line += table.columns[i];
  }
  out << line << '\n';
  for (Eigen::Index r = 0; r < table.data.rows(); ++r) {
    line.clear();
    for (Eigen::Index c = 0; c < table.data.cols(); ++c) {
      if (c) line += ',';
      append_number(line, table.data(r, c));
    }
    out << line << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

Table read_table(const fs::path& path, const std::vector<std::string>& expected) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw SchemaMismatch(path.string() + ": empty file");
  Table t;
  t.columns = split(line, ',');
  if (!expected.empty() && t.columns != expected) {
    std::string want;
    for (const auto& c : expected) want += (want.empty() ? "" : ",") + c;
    throw SchemaMismatch(path.string() + ": expected header '" + want + "', got '" + line + "'");
  }
  std::vector<double> values;
  std::size_t rows = 0, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != t.columns.size())
      throw SchemaMismatch(path.string() + ":" + std::to_string(lineno) + ": expected " +
                           std::to_string(t.columns.size()) + " fields, got " + std::to_string(cells.size()));
    for (const auto& c : cells) {
      double v = 0.0;
      const auto r = std::from_chars(c.data(), c.data() + c.size(), v);
      if (r.ec != std::errc() || r.ptr != c.data() + c.size())
        throw SchemaMismatch(path.string() + ":" + std::to_string(lineno) + ": not a number: '" + c + "'");
      values.push_back(v);
    }
    ++rows;
  }
  const auto cols = static_cast<Eigen::Index>(t.columns.size());
  t.data = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), static_cast<Eigen::Index>(rows), cols);
  return t;
}

std::vector<std::string> xyz_columns(const std::vector<std::string>& prefixes) {
  std::vector<std::string> out;
  for (const auto& p : prefixes)
    for (const char* s : {"_x", "_y", "_z"}) out.push_back(p + s);
  return out;
}

Table trajectory_table(const Trajectory& traj) {
  Table t{{"t", "x", "y", "z"}, Eigen::MatrixXd(static_cast<Eigen::Index>(traj.size()), 4)};
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    t.data(r, 0) = traj.time(i);
    t.data.block<1, 3>(r, 1) = traj[i].transpose();
  }
  return t;
}

Trajectory trajectory_from_table(const Table& table) {
  if (table.columns != std::vector<std::string>{"t", "x", "y", "z"})
    throw SchemaMismatch("trajectory table needs columns t,x,y,z");
  if (table.rows() == 0) throw EmptyInput("trajectory table has no rows");
  Trajectory traj;
  traj.t0 = table.data(0, 0);
  traj.dt = table.rows() > 1 ? (table.data(table.data.rows() - 1, 0) - traj.t0) / double(table.rows() - 1) : 1.0;
  traj.states.reserve(table.rows());
  for (Eigen::Index r = 0; r < table.data.rows(); ++r) traj.states.emplace_back(table.data.block<1, 3>(r, 1).transpose());
  return traj;
}

void write_trajectory(const fs::path& path, const Trajectory& traj) { write_table(path, trajectory_table(traj)); }

Trajectory read_trajectory(const fs::path& path) {
  return trajectory_from_table(read_table(path, {"t", "x", "y", "z"}));
}

Table dataset_table(const ConditionalDataset& d, const std::vector<std::string>& target_prefixes,
                    const std::vector<std::string>& cond_prefixes) {
  if (d.target.rows() != static_cast<Eigen::Index>(3 * target_prefixes.size()) ||
      d.cond.rows() != static_cast<Eigen::Index>(3 * cond_prefixes.size()))
    throw DimMismatch("dataset_table: column names do not match the dataset");
  Table t;
  t.columns = xyz_columns(target_prefixes);
  for (auto& c : xyz_columns(cond_prefixes)) t.columns.push_back(std::move(c));
  t.data.resize(d.target.cols(), d.target.rows() + d.cond.rows());
  t.data.leftCols(d.target.rows()) = d.target.transpose();
  t.data.rightCols(d.cond.rows()) = d.cond.transpose();
  return t;
}

ConditionalDataset dataset_from_table(const Table& t, std::size_t target_dim) {
  const auto td = static_cast<Eigen::Index>(target_dim);
  if (t.data.cols() <= td) throw SchemaMismatch("dataset table has no condition columns");
  ConditionalDataset d;
  d.target = t.data.leftCols(td).transpose();
  d.cond = t.data.rightCols(t.data.cols() - td).transpose();
  return d;
}

Table pairs_table(const std::vector<PairSample>& pairs) {
  Table t{xyz_columns({"xbar0", "xbarh"}), Eigen::MatrixXd(static_cast<Eigen::Index>(pairs.size()), 7)};
  t.columns.push_back("h");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    t.data.block<1, 3>(r, 0) = pairs[i].xbar0.transpose();
    t.data.block<1, 3>(r, 3) = pairs[i].xbarh.transpose();
    t.data(r, 6) = pairs[i].h;
  }
  return t;
}

std::vector<PairSample> pairs_from_table(const Table& t) {
  auto cols = xyz_columns({"xbar0", "xbarh"});
  cols.push_back("h");
  if (t.columns != cols) throw SchemaMismatch("pairs table has the wrong columns");
  std::vector<PairSample> out(t.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i] = {t.data.block<1, 3>(r, 0).transpose(), t.data.block<1, 3>(r, 3).transpose(), t.data(r, 6)};
  }
  return out;
}

Table perturb_table(const std::vector<PerturbSample>& samples) {
  Table t{xyz_columns({"xn", "xt0", "xt1"}), Eigen::MatrixXd(static_cast<Eigen::Index>(samples.size()), 10)};
  t.columns.push_back("dt");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    t.data.block<1, 3>(r, 0) = samples[i].xn.transpose();
    t.data.block<1, 3>(r, 3) = samples[i].xt0.transpose();
    t.data.block<1, 3>(r, 6) = samples[i].xt1.transpose();
    t.data(r, 9) = samples[i].dt;
  }
  return t;
}

std::vector<PerturbSample> perturb_from_table(const Table& t) {
  auto cols = xyz_columns({"xn", "xt0", "xt1"});
  cols.push_back("dt");
  if (t.columns != cols) throw SchemaMismatch("perturb table has the wrong columns");
  std::vector<PerturbSample> out(t.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out[i] = {t.data.block<1, 3>(r, 0).transpose(), t.data.block<1, 3>(r, 3).transpose(),
              t.data.block<1, 3>(r, 6).transpose(), t.data(r, 9)};
  }
  return out;
}

void write_history(const fs::path& path, const std::vector<double>& history, std::size_t first_epoch) {
  Table t{{"epoch", "loss"}, Eigen::MatrixXd(static_cast<Eigen::Index>(history.size()), 2)};
  for (std::size_t i = 0; i < history.size(); ++i) {
    t.data(static_cast<Eigen::Index>(i), 0) = static_cast<double>(first_epoch + i);
    t.data(static_cast<Eigen::Index>(i), 1) = history[i];
  }
  write_table(path, t);
}

json to_json(const Mlp& net) {
  const MlpSpec& s = net.spec();
  return {{"in_dim", s.in_dim},
          {"out_dim", s.out_dim},
          {"hidden", s.hidden},
          {"activation", std::string(activation_name(s.activation))},
          {"residual", s.residual},
          {"input_shift", vec_to_json(net.input_shift())},
          {"input_scale", vec_to_json(net.input_scale())},
          {"params", vec_to_json(net.params())}};
}

Mlp mlp_from_json(const json& j) {
  return schema_guard("network", [&] {
    MlpSpec s;
    s.in_dim = j.at("in_dim").get<std::size_t>();
    s.out_dim = j.at("out_dim").get<std::size_t>();
    s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    s.activation = parse_activation(j.at("activation").get<std::string>());
    s.residual = j.at("residual").get<bool>();
    s.validate();
    Mlp net(s);
    const Eigen::VectorXd p = vec_from_json(j.at("params"));
    if (static_cast<std::size_t>(p.size()) != s.parameter_count())
      throw SchemaMismatch("network: parameter count does not match the layout");
    net.set_params(p);
    net.set_input_normalization(vec_from_json(j.at("input_shift")), vec_from_json(j.at("input_scale")));
    return net;
  });
}

json to_json(const AdamState& s) {
  return {{"lr", s.lr}, {"beta1", s.beta1}, {"beta2", s.beta2}, {"eps", s.eps},
          {"step", s.step}, {"m", vec_to_json(s.m)}, {"v", vec_to_json(s.v)}};
}

AdamState adam_from_json(const json& j) {
  return schema_guard("optimizer", [&] {
    AdamState s;
    s.lr = j.at("lr").get<double>();
    s.beta1 = j.at("beta1").get<double>();
    s.beta2 = j.at("beta2").get<double>();
    s.eps = j.at("eps").get<double>();
    s.step = j.at("step").get<std::size_t>();
    s.m = vec_from_json(j.at("m"));
    s.v = vec_from_json(j.at("v"));
    return s;
  });
}

json to_json(const Standardizer& s) { return {{"shift", vec_to_json(s.shift)}, {"scale", vec_to_json(s.scale)}}; }

Standardizer standardizer_from_json(const json& j) {
  return schema_guard("standardizer", [&] {
    Standardizer s{vec_from_json(j.at("shift")), vec_from_json(j.at("scale"))};
    if (s.shift.size() != s.scale.size()) throw SchemaMismatch("standardizer: shift and scale sizes differ");
    return s;
  });
}

json to_json(const ClosureModel& m) {
  return {{"kind", "closure"}, {"net", to_json(m.net)}, {"diffusion_floor", m.diffusion_floor}, {"h", m.h}};
}

ClosureModel closure_from_json(const json& j) {
  return schema_guard("closure model", [&] {
    if (j.at("kind") != "closure") throw SchemaMismatch("not a closure model");
    ClosureModel m;
    m.net = mlp_from_json(j.at("net"));
    m.diffusion_floor = j.at("diffusion_floor").get<double>();
    m.h = j.at("h").get<double>();
    if (m.net.spec().in_dim != 3 || m.net.spec().out_dim != 6) throw SchemaMismatch("closure network must be 3 -> 6");
    return m;
  });
}

json to_json(const StabilizerModel& m) {
  return {{"kind", "stabilizer"}, {"net", to_json(m.net)}, {"diffusion_floor", m.diffusion_floor}};
}

StabilizerModel stabilizer_from_json(const json& j) {
  return schema_guard("stabilizer model", [&] {
    if (j.at("kind") != "stabilizer") throw SchemaMismatch("not a stabilizer model");
    StabilizerModel m;
    m.net = mlp_from_json(j.at("net"));
    m.diffusion_floor = j.at("diffusion_floor").get<double>();
    if (m.net.spec().in_dim != 6 || m.net.spec().out_dim != 3)
      throw SchemaMismatch("stabilizer network must be 6 -> 3");
    return m;
  });
}

json to_json(const FlowScorePair& p) {
  json j = {{"kind", "flow_score"},
            {"cond_dim", p.cond_dim},
            {"flow", to_json(p.flow)},
            {"target_norm", to_json(p.target_norm)},
            {"cond_norm", to_json(p.cond_norm)}};
  j["score"] = p.score ? to_json(*p.score) : json(nullptr);
  return j;
}

FlowScorePair flow_score_from_json(const json& j) {
  return schema_guard("generative model", [&] {
    if (j.at("kind") != "flow_score") throw SchemaMismatch("not a generative model");
    FlowScorePair p;
    p.cond_dim = j.at("cond_dim").get<std::size_t>();
    p.flow = mlp_from_json(j.at("flow"));
    if (!j.at("score").is_null()) p.score = mlp_from_json(j.at("score"));
    p.target_norm = standardizer_from_json(j.at("target_norm"));
    p.cond_norm = standardizer_from_json(j.at("cond_norm"));
    const std::size_t in = p.input_dim();
    if (p.flow.spec().in_dim != in || p.flow.spec().out_dim != 3 ||
        (p.score && (p.score->spec().in_dim != in || p.score->spec().out_dim != 3)))
      throw SchemaMismatch("generative networks do not match the condition dimension");
    if (p.target_norm.shift.size() != 3 || p.cond_norm.shift.size() != static_cast<Eigen::Index>(p.cond_dim))
      throw SchemaMismatch("generative standardizers have the wrong size");
    return p;
  });
}

void write_json(const fs::path& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(1) << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  auto in = open_in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaMismatch(path.string() + ": " + e.what());
  }
}

void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  json opt = json::object();
  for (const auto& [name, s] : c.optimizers) opt[name] = to_json(s);
  write_json(path, {{"format", "sgslab-checkpoint"},
                    {"version", 1},
                    {"family", c.family},
                    {"next_epoch", c.next_epoch},
                    {"model", c.model},
                    {"optimizers", opt}});
}

Checkpoint load_checkpoint(const fs::path& path) {
  const json j = read_json(path);
  return schema_guard(path.string().c_str(), [&] {
    if (j.at("format") != "sgslab-checkpoint" || j.at("version") != 1)
      throw SchemaMismatch(path.string() + ": not a version 1 checkpoint");
    Checkpoint c;
    c.family = j.at("family").get<std::string>();
    c.next_epoch = j.at("next_epoch").get<std::size_t>();
    c.model = j.at("model");
    for (const auto& [name, s] : j.at("optimizers").items()) c.optimizers[name] = adam_from_json(s);
    return c;
  });
}

std::string sha256_file(const fs::path& path) {
  auto in = open_in(path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha256: digest initialisation failed");
  }
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", md[i]);
    hex += byte;
  }
  return hex;
}

void RunManifest::add_input(const fs::path& p) { inputs.push_back({p.string(), sha256_file(p)}); }
void RunManifest::add_output(const fs::path& p) { outputs.push_back({p.string(), sha256_file(p)}); }

json RunManifest::to_json() const {
  json in = json::array(), out = json::array();
  for (const auto& a : inputs) in.push_back({{"path", a.path}, {"sha256", a.sha256}});
  for (const auto& a : outputs) out.push_back({{"path", a.path}, {"sha256", a.sha256}});
  return {{"command", command}, {"tool_version", tool_version}, {"config", config}, {"seeds", seeds},
          {"inputs", in},       {"outputs", out},                {"timings_s", timings_s},
          {"started_at", started_at}, {"extra", extra}};
}

void RunManifest::write(const fs::path& p) const { write_json(p, to_json()); }

}  // namespace sgs::io
