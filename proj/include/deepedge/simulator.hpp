#pragma once

// Discrete-event simulation of asynchronous parameter-server training for a
// sharding plan, with a single FIFO update server, background-app deadline
// tracking and scripted crash injection with kill-all/retrigger recovery.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "deepedge/cluster_model.hpp"
#include "deepedge/estimators.hpp"
#include "deepedge/scheduler.hpp"

namespace deepedge {

struct FailureEvent {
  std::string worker;
  double time = 0.0;  // absolute simulated seconds
};

struct SimConfig {
  std::uint64_t seed = 0;
  double jitter_std = 0.0;  // relative, per duration
  std::vector<FailureEvent> failure_script;
  std::int64_t num_epoch = 1;
  double heartbeat_interval = 1.0;  // crash detection latency
  bool retrigger_transfer = true;   // re-send shards after a retrigger
  bool initial_transfer = false;    // charge the transfer before the first run
  std::int64_t max_retriggers = 100;
  bool record_events = true;
};

std::vector<Violation> validate(const SimConfig& config);
Json to_json(const SimConfig& config);
SimConfig parse_sim_config(const Json& doc);

enum class EventKind {
  Start,
  BatchDone,
  Push,
  UpdateStart,
  Update,
  Pull,
  EpochDone,
  Crash,
  CrashIgnored,
  Detected,
  Killed,
  Retriggered,
  Completed,
  Abandoned,
};

std::string_view to_string(EventKind kind);

struct SimEvent {
  double time = 0.0;
  std::string worker;  // empty for job-level events
  EventKind kind = EventKind::Start;
  std::string detail;
};

struct WorkerTrace {
  std::string id;
  std::int64_t shard = 0;
  std::int64_t batch = 0;
  std::int64_t steps_per_epoch = 0;
  std::vector<double> step_durations;
  std::vector<double> epoch_completions;  // absolute times
};

struct DeadlineViolation {
  std::string worker;
  std::string app;
  double time = 0.0;       // first violating period
  double observed = 0.0;   // execution time under load
  double deadline = 0.0;
  std::int64_t periods = 0;  // violating periods while the task ran
};

enum class SimStatus { Completed, Abandoned };

struct SimResult {
  SimStatus status = SimStatus::Completed;
  std::string status_detail;
  double makespan = 0.0;  // wall clock including wasted work and recovery
  std::vector<WorkerTrace> workers;  // final run, plan order, selected only
  std::int64_t ps_max_queue_depth = 0;
  double ps_mean_wait = 0.0;
  std::vector<DeadlineViolation> deadline_violations;
  std::vector<SimEvent> events;
  ShardingPlan final_plan;
  std::map<std::string, std::int64_t> strikes;
  std::int64_t retriggers = 0;
  double wasted_time = 0.0;

  const WorkerTrace* find(const std::string& id) const;
};

/// Job lifecycle notifications raised while a run proceeds.
enum class Lifecycle { Solved, Transferring, Registered, Running, Interrupted, Retriggered,
                       Completed, Abandoned };

struct LifecycleNote {
  Lifecycle stage;
  double time = 0.0;
  const ShardingPlan* plan = nullptr;  // set for Solved
  std::string detail;
};

using LifecycleHook = std::function<void(const LifecycleNote&)>;

/// Runs the plan to completion. Crashes from config.failure_script trigger
/// detection, kill-all and a re-solve that excludes workers with three or more
/// strikes. Deterministic for a fixed seed. Throws std::invalid_argument when
/// the plan names a worker the cluster lacks.
SimResult simulate(const ShardingPlan& plan, const ClusterSpec& cluster, const JobSpec& job,
                   const EstimatorRegistry& registry, const SimConfig& config);

/// simulate() with lifecycle notifications.
SimResult inject_and_recover(const ShardingPlan& plan, const ClusterSpec& cluster,
                             const JobSpec& job, const EstimatorRegistry& registry,
                             const SimConfig& config, const LifecycleHook& hook = {});

/// Strike threshold after which a worker is excluded from re-solves.
inline constexpr std::int64_t kStrikeLimit = 3;

Json to_json(const SimResult& result);
void write_trace_csv(const SimResult& result, std::ostream& out);

}  // namespace deepedge
