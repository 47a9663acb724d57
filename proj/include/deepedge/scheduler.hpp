#pragma once

// Cost model, interference constraint checks, the iterative shard/batch
// solver with worker elimination, and the equal-split fairness baseline.

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepedge/cluster_model.hpp"
#include "deepedge/estimators.hpp"

namespace deepedge {

/// No feasible worker set exists (every worker removed or ineligible).
class InfeasibleError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class RemovalReason {
  Pressure,           // a background app would miss its deadline
  SlowestEliminated,  // dropped by the outer loop as the slowest worker
  BelowMinBatch,      // shard smaller than b_min
  NoMemory,           // not even b_min fits under the memory ceiling
  Excluded,           // excluded by the caller (e.g. struck out after failures)
};

std::string_view to_string(RemovalReason reason);
RemovalReason parse_removal_reason(std::string_view name);

struct RemovedWorker {
  std::string id;
  RemovalReason reason;

  bool operator==(const RemovedWorker&) const = default;
};

struct WorkerAssignment {
  std::string id;
  bool selected = false;
  std::int64_t shard = 0;  // d_i
  std::int64_t batch = 0;  // b_i
  // Rates at the assigned batch; zero for unselected workers.
  double t_compute = 0.0;  // s/sample
  double t_update = 0.0;   // s/round
  double t_total = 0.0;    // s/sample, t_compute + t_update / batch
};

/// Worker assignments in cluster order.
struct ShardingPlan {
  std::vector<WorkerAssignment> workers;
  double predicted_epoch_time = 0.0;
  double predicted_total_cost = 0.0;
  std::int64_t iterations_used = 0;
  std::vector<RemovedWorker> removed;

  const WorkerAssignment* find(const std::string& id) const;
  std::int64_t total_samples() const;
  std::size_t selected_count() const;
  std::vector<std::string> selected_ids() const;
};

struct WorkerCost {
  std::string id;
  double transfer = 0.0;
  double init = 0.0;
  double epoch_time = 0.0;
  double total = 0.0;
};

struct CostBreakdown {
  std::vector<WorkerCost> workers;  // selected workers only
  double job_total = 0.0;
};

/// ceil(d/b) * (b * t_compute + t_update). Throws std::invalid_argument on b < 1.
double epoch_time(std::int64_t d, std::int64_t b, double t_compute, double t_update);

struct AppPressure {
  std::string app_id;
  double pressure = 0.0;  // predicted execution time, s
  double deadline = 0.0;
};

struct PressureCheck {
  bool eligible = true;
  std::vector<AppPressure> pressures;
};

/// b == 0 means the task is absent: trivially eligible, no pressures.
PressureCheck check_pressure(const WorkerSpec& worker, const EstimatorBundle& bundle, std::int64_t b);

struct SolveOptions {
  std::set<std::string> excluded;
};

/// Iterative heuristic: harmonic proportional shards at memory-bounded batch
/// sizes, pressure-based removal, then elimination of the slowest worker one
/// at a time, keeping the best plan seen. Each rounded plan is refined by a
/// search over shards and batches that keeps it balanced and deadline-safe.
/// Ties go to cluster order.
/// Throws InfeasibleError when no worker can be scheduled.
ShardingPlan solve(const ClusterSpec& cluster, const JobSpec& job, const EstimatorRegistry& registry,
                   const SolveOptions& options = {});

/// Equal shards to every worker regardless of speed or interference.
ShardingPlan fairness_plan(const ClusterSpec& cluster, const JobSpec& job,
                           const EstimatorRegistry& registry);

CostBreakdown total_cost(const ShardingPlan& plan, const ClusterSpec& cluster, const JobSpec& job,
                         const EstimatorRegistry& registry);

/// Per-worker rates for explicit shard/batch choices (unselected workers get
/// zeros). Used to predict arbitrary plans with the registry's estimators.
ShardingPlan evaluate_assignment(const ClusterSpec& cluster, const EstimatorRegistry& registry,
                                 const std::vector<std::int64_t>& shards,
                                 const std::vector<std::int64_t>& batches);

/// Structural checks: conservation, gamma/shard consistency and batch bounds.
std::vector<Violation> validate(const ShardingPlan& plan, const ClusterSpec& cluster,
                                const JobSpec& job);

Json to_json(const ShardingPlan& plan);
Json to_json(const CostBreakdown& cost);
ShardingPlan parse_plan(const Json& doc);

}  // namespace deepedge
