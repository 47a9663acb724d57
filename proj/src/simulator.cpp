#include "deepedge/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <ostream>
#include <queue>
#include <random>
#include <sstream>

namespace deepedge {

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::Start: return "start";
    case EventKind::BatchDone: return "batch-done";
    case EventKind::Push: return "push";
    case EventKind::UpdateStart: return "update-start";
    case EventKind::Update: return "update";
    case EventKind::Pull: return "pull";
    case EventKind::EpochDone: return "epoch-done";
    case EventKind::Crash: return "crash";
    case EventKind::CrashIgnored: return "crash-ignored";
    case EventKind::Detected: return "detected";
    case EventKind::Killed: return "killed";
    case EventKind::Retriggered: return "retriggered";
    case EventKind::Completed: return "completed";
    case EventKind::Abandoned: return "abandoned";
  }
  return "unknown";
}

const WorkerTrace* SimResult::find(const std::string& id) const {
  for (const auto& w : workers) {
    if (w.id == id) return &w;
  }
  return nullptr;
}

std::vector<Violation> validate(const SimConfig& c) {
  std::vector<Violation> out;
  if (!(std::isfinite(c.jitter_std) && c.jitter_std >= 0.0)) out.push_back({"jitter_std", "must be >= 0"});
  if (c.num_epoch < 1) out.push_back({"num_epoch", "must be >= 1"});
  if (!(std::isfinite(c.heartbeat_interval) && c.heartbeat_interval >= 0.0)) {
    out.push_back({"heartbeat_interval", "must be >= 0"});
  }
  if (c.max_retriggers < 0) out.push_back({"max_retriggers", "must be >= 0"});
  for (std::size_t i = 0; i < c.failure_script.size(); ++i) {
    const auto& f = c.failure_script[i];
    if (!(std::isfinite(f.time) && f.time >= 0.0)) {
      out.push_back({"failure_script[" + std::to_string(i) + "].time", "must be >= 0"});
    }
  }
  return out;
}

Json to_json(const SimConfig& c) {
  Json failures = Json::array();
  for (const auto& f : c.failure_script) failures.push_back({{"worker", f.worker}, {"time", f.time}});
  return {{"schema", kSchemaVersion},
          {"seed", c.seed},
          {"jitter_std", c.jitter_std},
          {"failure_script", failures},
          {"num_epoch", c.num_epoch},
          {"heartbeat_interval", c.heartbeat_interval},
          {"retrigger_transfer", c.retrigger_transfer},
          {"initial_transfer", c.initial_transfer},
          {"max_retriggers", c.max_retriggers},
          {"record_events", c.record_events}};
}

SimConfig parse_sim_config(const Json& doc) {
  const std::string where = "config";
  detail::require_schema(doc, where);
  detail::reject_unknown(doc,
                         {"schema", "seed", "jitter_std", "failure_script", "num_epoch",
                          "heartbeat_interval", "retrigger_transfer", "initial_transfer",
                          "max_retriggers", "record_events", "ps_service_discipline"},
                         where);
  SimConfig c;
  try {
    if (doc.contains("seed")) c.seed = doc.at("seed").get<std::uint64_t>();
    if (doc.contains("jitter_std")) c.jitter_std = detail::read_number(doc, "jitter_std", where);
    if (doc.contains("num_epoch")) c.num_epoch = detail::read_integer(doc, "num_epoch", where);
    if (doc.contains("heartbeat_interval")) {
      c.heartbeat_interval = detail::read_number(doc, "heartbeat_interval", where);
    }
    if (doc.contains("retrigger_transfer")) c.retrigger_transfer = doc.at("retrigger_transfer").get<bool>();
    if (doc.contains("initial_transfer")) c.initial_transfer = doc.at("initial_transfer").get<bool>();
    if (doc.contains("max_retriggers")) c.max_retriggers = detail::read_integer(doc, "max_retriggers", where);
    if (doc.contains("record_events")) c.record_events = doc.at("record_events").get<bool>();
    if (doc.contains("ps_service_discipline") && doc.at("ps_service_discipline") != "fifo") {
      throw ParseError("config.ps_service_discipline: only \"fifo\" is supported");
    }
    if (doc.contains("failure_script")) {
      for (const auto& f : doc.at("failure_script")) {
        detail::reject_unknown(f, {"worker", "time"}, "config.failure_script");
        c.failure_script.push_back({detail::read_string(f, "worker", "config.failure_script"),
                                    detail::read_number(f, "time", "config.failure_script")});
      }
    }
  } catch (const Json::exception& e) {
    throw ParseError(where + ": " + e.what());
  }
  auto v = validate(c);
  if (!v.empty()) throw ValidationError(v.front().field, v.front().message);
  return c;
}

namespace {

struct WorkerRun {
  const WorkerSpec* spec = nullptr;
  const EstimatorBundle* bundle = nullptr;
  WorkerTrace trace;
  double compute = 0.0;  // nominal step compute, s
  double push = 0.0;
  double service = 0.0;
  double pull = 0.0;
  std::int64_t steps_in_epoch = 0;
  std::int64_t epochs_done = 0;
  double step_start = 0.0;
  double arrival = 0.0;
  bool finished = false;
  double finish_time = 0.0;
};

enum class Pending { ComputeDone, PushArrive, ServiceDone, PullDone, Crash };

struct QueuedEvent {
  double time;
  std::uint64_t seq;
  Pending kind;
  std::size_t worker;  // index into runs, or into crash list for Crash

  bool operator>(const QueuedEvent& o) const {
    return time != o.time ? time > o.time : seq > o.seq;
  }
};

struct SegmentOutcome {
  bool completed = false;
  double end_time = 0.0;
  std::string crashed_worker;
  std::vector<WorkerTrace> traces;
  std::int64_t max_depth = 0;
  double total_wait = 0.0;
  std::int64_t updates = 0;
};

class Segment {
public:
  Segment(const ShardingPlan& plan, const ClusterSpec& cluster, const EstimatorRegistry& registry,
          const SimConfig& config, std::mt19937_64& rng, std::vector<SimEvent>& log,
          std::vector<DeadlineViolation>& violations)
      : cluster_(cluster), registry_(registry), config_(config), rng_(rng), log_(log),
        violations_(violations) {
    std::vector<std::int64_t> dist;
    for (const auto& a : plan.workers) {
      if (a.selected) dist.push_back(a.batch);
    }
    for (const auto& a : plan.workers) {
      const WorkerSpec* spec = cluster.find_worker(a.id);
      if (!spec) throw std::invalid_argument("simulate: plan names unknown worker '" + a.id + "'");
      if (!a.selected) continue;
      if (a.batch < 1 || a.shard < 1) {
        throw std::invalid_argument("simulate: selected worker '" + a.id + "' needs shard and batch >= 1");
      }
      WorkerRun r;
      r.spec = spec;
      r.bundle = &registry.at(spec->device_class);
      r.trace.id = a.id;
      r.trace.shard = a.shard;
      r.trace.batch = a.batch;
      r.trace.steps_per_epoch = (a.shard + a.batch - 1) / a.batch;
      const double per_sample = est_compute_time(*r.bundle, spec->initial_state, a.batch);
      r.compute = static_cast<double>(a.batch) * per_sample;
      // Uncontended update round; queueing at the server adds the rest.
      UpdateQuery q;
      q.state = spec->initial_state;
      q.own_batch = a.batch;
      q.batch_dist = dist;
      q.ps_state = cluster.ps_state;
      q.n_workers = 1;
      const double solo = est_update_time(*r.bundle, q);
      r.service = std::clamp(r.bundle->ps_service_time(cluster.ps_state), 0.0, solo);
      r.push = 0.5 * (solo - r.service);
      r.pull = solo - r.service - r.push;
      runs_.push_back(std::move(r));
    }
  }

  SegmentOutcome run(double start, const std::vector<FailureEvent>& crashes,
                     std::vector<bool>& consumed) {
    start_ = start;
    for (std::size_t c = 0; c < crashes.size(); ++c) {
      if (consumed[c]) continue;
      if (crashes[c].time < start) {
        consumed[c] = true;
        log(crashes[c].time, crashes[c].worker, EventKind::CrashIgnored, "node down between runs");
        continue;
      }
      push_event(crashes[c].time, Pending::Crash, c);
    }
    for (std::size_t i = 0; i < runs_.size(); ++i) {
      log(start, runs_[i].trace.id, EventKind::Start,
          "shard=" + std::to_string(runs_[i].trace.shard) + " batch=" + std::to_string(runs_[i].trace.batch));
      begin_step(i, start);
    }

    SegmentOutcome out;
    std::size_t remaining = runs_.size();
    while (!events_.empty() && remaining > 0) {
      QueuedEvent e = events_.top();
      events_.pop();
      const double t = e.time;
      if (e.kind == Pending::Crash) {
        consumed[e.worker] = true;
        const std::string& id = crashes[e.worker].worker;
        auto it = std::find_if(runs_.begin(), runs_.end(),
                               [&](const WorkerRun& r) { return r.trace.id == id; });
        if (it == runs_.end() || it->finished) {
          log(t, id, EventKind::CrashIgnored, it == runs_.end() ? "not in active plan" : "already finished");
          continue;
        }
        log(t, id, EventKind::Crash, "");
        out.crashed_worker = id;
        out.end_time = t;
        for (auto& r : runs_) {
          if (!r.finished) r.finish_time = t;
        }
        close(out);
        return out;
      }
      WorkerRun& r = runs_[e.worker];
      switch (e.kind) {
        case Pending::ComputeDone:
          log(t, r.trace.id, EventKind::BatchDone, "");
          push_event(t + jitter(r.push), Pending::PushArrive, e.worker);
          break;
        case Pending::PushArrive:
          log(t, r.trace.id, EventKind::Push, "");
          r.arrival = t;
          queue_.push_back(e.worker);
          out.max_depth = std::max<std::int64_t>(out.max_depth, static_cast<std::int64_t>(queue_.size()) - (busy_ ? 0 : 1));
          if (!busy_) start_service(t, out);
          break;
        case Pending::ServiceDone:
          log(t, r.trace.id, EventKind::Update, "");
          busy_ = false;
          if (!queue_.empty()) start_service(t, out);
          push_event(t + jitter(r.pull), Pending::PullDone, e.worker);
          break;
        case Pending::PullDone: {
          log(t, r.trace.id, EventKind::Pull, "");
          r.trace.step_durations.push_back(t - r.step_start);
          if (++r.steps_in_epoch == r.trace.steps_per_epoch) {
            r.steps_in_epoch = 0;
            ++r.epochs_done;
            r.trace.epoch_completions.push_back(t);
            log(t, r.trace.id, EventKind::EpochDone, "epoch=" + std::to_string(r.epochs_done));
          }
          if (r.epochs_done == config_.num_epoch) {
            r.finished = true;
            r.finish_time = t;
            --remaining;
            out.end_time = std::max(out.end_time, t);
          } else {
            begin_step(e.worker, t);
          }
          break;
        }
        case Pending::Crash: break;
      }
    }
    out.completed = true;
    if (runs_.empty()) out.end_time = start;
    close(out);
    return out;
  }

private:
  void log(double t, const std::string& worker, EventKind kind, std::string detail) {
    if (config_.record_events) log_.push_back({t, worker, kind, std::move(detail)});
  }

  void push_event(double t, Pending kind, std::size_t worker) {
    events_.push({t, seq_++, kind, worker});
  }

  double jitter(double nominal) {
    if (config_.jitter_std == 0.0 || nominal == 0.0) return nominal;
    std::normal_distribution<double> g(0.0, config_.jitter_std);
    return nominal * (1.0 + std::max(-0.9, g(rng_)));
  }

  void begin_step(std::size_t i, double t) {
    runs_[i].step_start = t;
    push_event(t + jitter(runs_[i].compute), Pending::ComputeDone, i);
  }

  void start_service(double t, SegmentOutcome& out) {
    const std::size_t i = queue_.front();
    queue_.pop_front();
    WorkerRun& r = runs_[i];
    out.total_wait += t - r.arrival;
    ++out.updates;
    busy_ = true;
    log(t, r.trace.id, EventKind::UpdateStart, "");
    push_event(t + jitter(r.service), Pending::ServiceDone, i);
  }

  // Background apps are checked every deadline period against the node's
  // state: loaded while the task runs there, initial otherwise.
  void close(SegmentOutcome& out) {
    for (const auto& w : cluster_.workers) {
      if (w.background_apps.empty()) continue;
      auto run = std::find_if(runs_.begin(), runs_.end(),
                              [&](const WorkerRun& r) { return r.spec == &w; });
      const EstimatorBundle& bundle = registry_.at(w.device_class);
      NodeState state = w.initial_state;
      double duration = out.end_time - start_;
      if (run != runs_.end()) {
        state = est_state(bundle, w.initial_state, run->trace.batch);
        duration = run->finish_time - start_;
      }
      const double observed = est_exec_time(bundle, state);
      for (const auto& app : w.background_apps) {
        if (observed > app.deadline && duration > 0.0) {
          const auto periods = static_cast<std::int64_t>(std::ceil(duration / app.deadline));
          violations_.push_back({w.id, app.id, start_, observed, app.deadline, periods});
        }
      }
    }
    for (auto& r : runs_) out.traces.push_back(std::move(r.trace));
  }

  const ClusterSpec& cluster_;
  const EstimatorRegistry& registry_;
  const SimConfig& config_;
  std::mt19937_64& rng_;
  std::vector<SimEvent>& log_;
  std::vector<DeadlineViolation>& violations_;
  std::vector<WorkerRun> runs_;
  std::priority_queue<QueuedEvent, std::vector<QueuedEvent>, std::greater<>> events_;
  std::deque<std::size_t> queue_;
  bool busy_ = false;
  std::uint64_t seq_ = 0;
  double start_ = 0.0;
};

double transfer_time(const ShardingPlan& plan, const ClusterSpec& cluster, const JobSpec& job) {
  double worst = 0.0;
  for (const auto& a : plan.workers) {
    if (!a.selected) continue;
    const auto* w = cluster.find_worker(a.id);
    if (w) worst = std::max(worst, static_cast<double>(a.shard) * w->transfer_cost_from(job.source_store));
  }
  return worst;
}

}  // namespace

SimResult inject_and_recover(const ShardingPlan& plan, const ClusterSpec& cluster,
                             const JobSpec& job, const EstimatorRegistry& registry,
                             const SimConfig& config, const LifecycleHook& hook) {
  auto v = validate(config);
  if (!v.empty()) throw ValidationError(v.front().field, v.front().message);
  for (const auto& a : plan.workers) {
    if (!cluster.find_worker(a.id)) {
      throw std::invalid_argument("simulate: plan names unknown worker '" + a.id + "'");
    }
  }
  auto note = [&](Lifecycle stage, double t, const ShardingPlan* p = nullptr, std::string detail = {}) {
    if (hook) hook({stage, t, p, std::move(detail)});
  };

  SimResult result;
  std::mt19937_64 rng(config.seed);
  std::vector<FailureEvent> crashes = config.failure_script;
  std::stable_sort(crashes.begin(), crashes.end(),
                   [](const FailureEvent& a, const FailureEvent& b) { return a.time < b.time; });
  std::vector<bool> consumed(crashes.size(), false);
  for (const auto& w : cluster.workers) result.strikes[w.id] = 0;

  ShardingPlan current = plan;
  double now = 0.0;
  double total_wait = 0.0;
  std::int64_t updates = 0;
  bool transfer = config.initial_transfer;

  while (true) {
    note(Lifecycle::Transferring, now);
    if (transfer) now += transfer_time(current, cluster, job);
    note(Lifecycle::Registered, now);
    note(Lifecycle::Running, now);

    Segment segment(current, cluster, registry, config, rng, result.events, result.deadline_violations);
    const double seg_start = now;
    SegmentOutcome out = segment.run(now, crashes, consumed);
    result.ps_max_queue_depth = std::max(result.ps_max_queue_depth, out.max_depth);
    total_wait += out.total_wait;
    updates += out.updates;
    result.workers = std::move(out.traces);
    result.final_plan = current;

    if (out.completed) {
      result.status = SimStatus::Completed;
      result.makespan = out.end_time;
      if (config.record_events) result.events.push_back({out.end_time, "", EventKind::Completed, ""});
      note(Lifecycle::Completed, out.end_time);
      break;
    }

    // Crash: detect after a heartbeat, kill every task, retrigger from scratch.
    const double crashed_at = out.end_time;
    result.wasted_time += crashed_at - seg_start;
    const std::int64_t strikes = ++result.strikes[out.crashed_worker];
    note(Lifecycle::Interrupted, crashed_at, nullptr, out.crashed_worker);
    now = crashed_at + config.heartbeat_interval;
    if (config.record_events) {
      result.events.push_back({now, out.crashed_worker, EventKind::Detected,
                               "strikes=" + std::to_string(strikes)});
      for (const auto& id : current.selected_ids()) {
        if (id != out.crashed_worker) result.events.push_back({now, id, EventKind::Killed, ""});
      }
    }
    result.wasted_time += config.heartbeat_interval;

    auto abandon = [&](const std::string& why) {
      result.status = SimStatus::Abandoned;
      result.status_detail = why;
      result.makespan = now;
      if (config.record_events) result.events.push_back({now, "", EventKind::Abandoned, why});
      note(Lifecycle::Abandoned, now, nullptr, why);
    };
    if (result.retriggers >= config.max_retriggers) {
      abandon("job abandoned: retrigger limit reached");
      break;
    }
    ++result.retriggers;
    if (config.record_events) result.events.push_back({now, "", EventKind::Retriggered, ""});
    note(Lifecycle::Retriggered, now);

    SolveOptions options;
    for (const auto& [id, count] : result.strikes) {
      if (count >= kStrikeLimit) options.excluded.insert(id);
    }
    try {
      current = solve(cluster, job, registry, options);
    } catch (const InfeasibleError& e) {
      abandon(std::string("job abandoned: ") + e.what());
      break;
    }
    note(Lifecycle::Solved, now, &current);
    transfer = config.retrigger_transfer;
  }
  result.ps_mean_wait = updates == 0 ? 0.0 : total_wait / static_cast<double>(updates);
  return result;
}

SimResult simulate(const ShardingPlan& plan, const ClusterSpec& cluster, const JobSpec& job,
                   const EstimatorRegistry& registry, const SimConfig& config) {
  return inject_and_recover(plan, cluster, job, registry, config);
}

Json to_json(const SimResult& r) {
  Json workers = Json::array();
  for (const auto& w : r.workers) {
    workers.push_back({{"id", w.id},
                       {"shard", w.shard},
                       {"batch", w.batch},
                       {"steps_per_epoch", w.steps_per_epoch},
                       {"step_durations", w.step_durations},
                       {"epoch_completions", w.epoch_completions}});
  }
  Json violations = Json::array();
  for (const auto& v : r.deadline_violations) {
    violations.push_back({{"worker", v.worker},
                          {"app", v.app},
                          {"time", v.time},
                          {"observed", v.observed},
                          {"deadline", v.deadline},
                          {"periods", v.periods}});
  }
  Json events = Json::array();
  for (const auto& e : r.events) {
    events.push_back({{"time", e.time}, {"worker", e.worker}, {"event", to_string(e.kind)}, {"detail", e.detail}});
  }
  Json strikes = Json::object();
  for (const auto& [id, n] : r.strikes) strikes[id] = n;
  return {{"schema", kSchemaVersion},
          {"status", r.status == SimStatus::Completed ? "completed" : "abandoned"},
          {"status_detail", r.status_detail},
          {"makespan", r.makespan},
          {"workers", workers},
          {"ps_queue", {{"max_depth", r.ps_max_queue_depth}, {"mean_wait", r.ps_mean_wait}}},
          {"deadline_violations", violations},
          {"events", events},
          {"final_plan", to_json(r.final_plan)},
          {"strikes", strikes},
          {"retriggers", r.retriggers},
          {"wasted_time", r.wasted_time}};
}

void write_trace_csv(const SimResult& result, std::ostream& out) {
  out << "time,worker,event,detail\n";
  out.precision(12);
  for (const auto& e : result.events) {
    out << e.time << ',' << e.worker << ',' << to_string(e.kind) << ',' << e.detail << '\n';
  }
}

}  // namespace deepedge
