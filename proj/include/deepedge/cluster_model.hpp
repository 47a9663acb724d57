#pragma once

// Cluster, job and node-state data model plus JSON document ingestion.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace deepedge {

using Json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Malformed document (bad JSON, wrong types, unknown fields, wrong schema).
class ParseError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Well-formed document that violates a model invariant.
class ValidationError : public std::runtime_error {
public:
  ValidationError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

/// Utilization vector of a node. All components are fractions in [0,1].
struct NodeState {
  double cpu_util = 0.0;
  double gpu_util = 0.0;
  double mem_util = 0.0;

  bool operator==(const NodeState&) const = default;

  static NodeState idle() { return {}; }
  static NodeState saturated() { return {1.0, 1.0, 1.0}; }
};

struct BackgroundApp {
  std::string id;
  double deadline = 0.0;  // seconds
  std::string description;

  bool operator==(const BackgroundApp&) const = default;
};

struct WorkerSpec {
  std::string id;
  std::string device_class;
  NodeState initial_state;
  std::vector<BackgroundApp> background_apps;
  std::int64_t b_min = 1;
  std::int64_t b_max = 1;
  double init_cost = 0.0;
  // seconds per sample, keyed by data store id; missing stores cost nothing
  std::map<std::string, double> per_sample_transfer_cost;

  double transfer_cost_from(const std::string& store) const;

  bool operator==(const WorkerSpec&) const = default;
};

struct ClusterSpec {
  std::vector<WorkerSpec> workers;
  NodeState ps_state;
  std::vector<std::string> data_stores;

  const WorkerSpec* find_worker(const std::string& id) const;
  std::size_t size() const noexcept { return workers.size(); }

  bool operator==(const ClusterSpec&) const = default;
};

struct JobSpec {
  std::int64_t num_samples = 1;
  std::int64_t num_epoch = 1;
  std::string source_store;
  std::optional<double> target_accuracy;
  double epsilon = 1.0;
  std::int64_t tau = 50;

  bool operator==(const JobSpec&) const = default;
};

struct Violation {
  std::string field;
  std::string message;
};

std::vector<Violation> validate(const NodeState& state, const std::string& prefix);
std::vector<Violation> validate(const ClusterSpec& cluster);
std::vector<Violation> validate(const JobSpec& job);
/// Empty iff every invariant of both documents holds and the job's source
/// store belongs to the cluster.
std::vector<Violation> validate(const ClusterSpec& cluster, const JobSpec& job);

// Strict document parsing. Throws ParseError or ValidationError.
ClusterSpec parse_cluster(const Json& doc);
JobSpec parse_job(const Json& doc);
ClusterSpec parse_cluster_text(std::string_view text);
JobSpec parse_job_text(std::string_view text);
ClusterSpec load_cluster(const std::filesystem::path& path);
JobSpec load_job(const std::filesystem::path& path);

Json to_json(const NodeState& state);
Json to_json(const ClusterSpec& cluster);
Json to_json(const JobSpec& job);
void save_cluster(const ClusterSpec& cluster, const std::filesystem::path& path);

// Shared helpers for the other document readers.
namespace detail {

Json parse_text(std::string_view text, const std::string& what);
Json read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const Json& doc);
void require_schema(const Json& doc, const std::string& what);
void reject_unknown(const Json& obj, std::initializer_list<std::string_view> allowed,
                    const std::string& where);
double read_number(const Json& obj, const std::string& key, const std::string& where);
std::int64_t read_integer(const Json& obj, const std::string& key, const std::string& where);
std::string read_string(const Json& obj, const std::string& key, const std::string& where);
/// Accepts a bare fraction or a string percentage such as "88%".
double read_utilization(const Json& obj, const std::string& key, const std::string& where);
NodeState parse_node_state(const Json& obj, const std::string& where);

}  // namespace detail

}  // namespace deepedge
