#pragma once

// Job lifecycle state machine, online epoch refinement from validation
// accuracy, and the heuristic-versus-fairness benchmark harness.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "deepedge/cluster_model.hpp"
#include "deepedge/estimators.hpp"
#include "deepedge/scheduler.hpp"
#include "deepedge/simulator.hpp"

namespace deepedge {

// ---------------------------------------------------------------------------
// Lifecycle

enum class Phase {
  Requested,
  Solved,
  Transferring,
  Registered,
  Running,
  Interrupted,
  Retriggered,
  Completed,
  Abandoned,
};

std::string_view to_string(Phase phase);
bool is_legal_transition(Phase from, Phase to);

struct PhaseEntry {
  Phase phase;
  double time = 0.0;
};

/// True when the history starts at Requested and every step is legal.
bool is_legal_history(const std::vector<PhaseEntry>& history);

class JobState {
public:
  JobState() { history_.push_back({Phase::Requested, 0.0}); }

  Phase phase() const noexcept { return history_.back().phase; }
  const std::vector<PhaseEntry>& history() const noexcept { return history_; }
  const std::map<std::string, std::int64_t>& strike_counts() const noexcept { return strikes_; }
  const std::optional<ShardingPlan>& active_plan() const noexcept { return plan_; }

  /// Throws std::logic_error on an illegal transition.
  void advance(Phase next, double time);
  void strike(const std::string& worker);
  void set_plan(ShardingPlan plan) { plan_ = std::move(plan); }

  std::size_t count(Phase phase) const;

private:
  std::vector<PhaseEntry> history_;
  std::map<std::string, std::int64_t> strikes_;
  std::optional<ShardingPlan> plan_;
};

struct JobRun {
  JobState state;
  SimResult result;
  std::string diagnostics;  // set when the job is abandoned
  std::vector<ShardingPlan> plans;  // every plan the solver produced, in order
};

/// Solve, transfer, register, run; crashes route through Interrupted and
/// Retriggered with the three-strike rule. Infeasible solves end in Abandoned.
JobRun run_job(const ClusterSpec& cluster, const JobSpec& job, const EstimatorRegistry& registry,
               const SimConfig& config);

Json to_json(const JobRun& run);

// ---------------------------------------------------------------------------
// Accuracy monitor

/// acc(k) = L / (1 + exp(-r (k - k0)))
struct LogisticCurve {
  double plateau = 1.0;    // L
  double rate = 1.0;       // r
  double midpoint = 0.0;   // k0

  double operator()(double epoch) const;
  /// Real-valued epoch where the curve reaches `target`; +inf if never.
  double crossing(double target) const;
};

class InsufficientData : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct AccuracyRecord {
  std::vector<std::pair<std::int64_t, double>> observations;  // (epoch, accuracy)
  std::optional<LogisticCurve> curve;
  std::optional<std::int64_t> predicted_epochs;

  /// Epochs must strictly increase and accuracies lie in [0,1].
  void add(std::int64_t epoch, double accuracy);
};

/// Least-squares logistic fit by damped Gauss-Newton (100 iterations max,
/// L in (0,1], r > 0). Throws InsufficientData below three observations.
LogisticCurve fit_logistic(const std::vector<std::pair<std::int64_t, double>>& observations);

/// Smallest epoch whose fitted accuracy reaches `target`, clamped to
/// [last observed epoch, current_num_epoch]; current_num_epoch when the curve
/// plateaus below target. Stores the fit in `record`.
std::int64_t refine_num_epoch(AccuracyRecord& record, double target, std::int64_t current_num_epoch);

// ---------------------------------------------------------------------------
// Benchmark

struct BenchOptions {
  std::int64_t n_trials = 120;
  std::uint64_t seed = 0;
  SimConfig sim;
  double max_cpu = 0.9;
  double max_gpu = 0.9;
  double max_mem = 0.6;
  int max_draws = 1000;  // rejection-sampling budget per trial
};

struct TrialRecord {
  std::int64_t index = 0;
  bool skipped = false;
  std::string skip_reason;
  std::vector<NodeState> states;
  double heuristic_epoch_time = 0.0;  // simulated
  double fairness_epoch_time = 0.0;   // simulated
  double predicted_heuristic = 0.0;
  double predicted_fairness = 0.0;
  double speedup = 0.0;
  std::int64_t heuristic_violations = 0;  // simulated violation records
  std::int64_t fairness_violations = 0;
  std::int64_t heuristic_predicted_violations = 0;
  std::vector<std::string> heuristic_workers;
};

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::int64_t count = 0;
};

struct BenchReport {
  std::vector<TrialRecord> trials;
  double mean_speedup = 0.0;
  std::int64_t skipped = 0;
  std::int64_t violations_heuristic = 0;  // trials with any violation
  std::int64_t violations_fairness = 0;
  double fraction_speedup_ge_1_5 = 0.0;
  std::vector<HistogramBin> histogram;
};

/// Random pre-job cluster states (every deadline met before launch), then
/// both schedulers simulated on each draw. Trials are independent and merged
/// in index order.
BenchReport bench(const ClusterSpec& cluster_template, const JobSpec& job,
                  const EstimatorRegistry& registry, const BenchOptions& options);

std::vector<HistogramBin> speedup_histogram(const std::vector<TrialRecord>& trials);

Json to_json(const BenchReport& report);
BenchReport parse_bench_report(const Json& doc);
void render_report_markdown(const BenchReport& report, std::ostream& out);
void render_histogram_csv(const BenchReport& report, std::ostream& out);

}  // namespace deepedge
