#pragma once

#include "sgs/core.hpp"
#include "sgs/generative.hpp"
#include "sgs/neural.hpp"
#include "sgs/parametric.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sgs::io {

namespace fs = std::filesystem;
using nlohmann::json;

/// Named numeric columns; data is rows x columns.
struct Table {
  std::vector<std::string> columns;
  Eigen::MatrixXd data;

  [[nodiscard]] std::size_t rows() const { return static_cast<std::size_t>(data.rows()); }
  /// Index of `name`; throws SchemaMismatch if absent.
  [[nodiscard]] Eigen::Index column(const std::string& name) const;
};

/// CSV with a header row; values printed with 17 significant digits.
void write_table(const fs::path& path, const Table& table);

/// Throws MissingInput if the file is absent and SchemaMismatch on a malformed
/// file or, when `expected` is non-empty, a header that differs from it.
Table read_table(const fs::path& path, const std::vector<std::string>& expected = {});

/// "p_x", "p_y", "p_z" for each prefix p.
std::vector<std::string> xyz_columns(const std::vector<std::string>& prefixes);

Table trajectory_table(const Trajectory& traj);
Trajectory trajectory_from_table(const Table& table);
void write_trajectory(const fs::path& path, const Trajectory& traj);
Trajectory read_trajectory(const fs::path& path);

/// Target columns followed by condition columns, named by xyz_columns.
Table dataset_table(const ConditionalDataset& d, const std::vector<std::string>& target_prefixes,
                    const std::vector<std::string>& cond_prefixes);
ConditionalDataset dataset_from_table(const Table& t, std::size_t target_dim);

Table pairs_table(const std::vector<PairSample>& pairs);
std::vector<PairSample> pairs_from_table(const Table& t);
Table perturb_table(const std::vector<PerturbSample>& samples);
std::vector<PerturbSample> perturb_from_table(const Table& t);

/// Loss history: columns epoch, loss.
void write_history(const fs::path& path, const std::vector<double>& history, std::size_t first_epoch = 0);

json to_json(const Mlp& net);
Mlp mlp_from_json(const json& j);
json to_json(const AdamState& s);
AdamState adam_from_json(const json& j);
json to_json(const Standardizer& s);
Standardizer standardizer_from_json(const json& j);

json to_json(const ClosureModel& m);
ClosureModel closure_from_json(const json& j);
json to_json(const StabilizerModel& m);
StabilizerModel stabilizer_from_json(const json& j);
json to_json(const FlowScorePair& p);
FlowScorePair flow_score_from_json(const json& j);

/// Training checkpoint: the model, one optimizer state per trained network and
/// the next epoch index, so training can resume exactly.
struct Checkpoint {
  std::string family;  ///< closure, stabilizer, flow, score
  json model;
  std::map<std::string, AdamState> optimizers;
  std::size_t next_epoch = 0;
};

void write_json(const fs::path& path, const json& j);
json read_json(const fs::path& path);
void save_checkpoint(const fs::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const fs::path& path);

/// Lowercase hex SHA-256 of the file contents.
std::string sha256_file(const fs::path& path);

struct ArtifactRecord {
  std::string path;
  std::string sha256;
};

/// Provenance of one command run. Everything except `timings_s` and
/// `started_at` is a pure function of the inputs.
struct RunManifest {
  std::string command;
  std::string tool_version;
  std::map<std::string, std::string> config;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<ArtifactRecord> inputs;
  std::vector<ArtifactRecord> outputs;
  std::map<std::string, double> timings_s;
  std::string started_at;
  json extra = json::object();

  void add_input(const fs::path& p);
  void add_output(const fs::path& p);
  [[nodiscard]] json to_json() const;
  void write(const fs::path& p) const;
};

}  // namespace sgs::io
