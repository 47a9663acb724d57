#include "deepedge/orchestrator.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

namespace deepedge {

// ---------------------------------------------------------------------------
// Lifecycle

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::Requested: return "requested";
    case Phase::Solved: return "solved";
    case Phase::Transferring: return "transferring";
    case Phase::Registered: return "registered";
    case Phase::Running: return "running";
    case Phase::Interrupted: return "interrupted";
    case Phase::Retriggered: return "retriggered";
    case Phase::Completed: return "completed";
    case Phase::Abandoned: return "abandoned";
  }
  return "unknown";
}

bool is_legal_transition(Phase from, Phase to) {
  switch (from) {
    case Phase::Requested: return to == Phase::Solved || to == Phase::Abandoned;
    case Phase::Solved: return to == Phase::Transferring;
    case Phase::Transferring: return to == Phase::Registered;
    case Phase::Registered: return to == Phase::Running;
    case Phase::Running: return to == Phase::Completed || to == Phase::Interrupted;
    case Phase::Interrupted: return to == Phase::Retriggered || to == Phase::Abandoned;
    case Phase::Retriggered: return to == Phase::Solved || to == Phase::Abandoned;
    case Phase::Completed:
    case Phase::Abandoned: return false;
  }
  return false;
}

bool is_legal_history(const std::vector<PhaseEntry>& history) {
  if (history.empty() || history.front().phase != Phase::Requested) return false;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (!is_legal_transition(history[i - 1].phase, history[i].phase)) return false;
    if (history[i].time < history[i - 1].time) return false;
  }
  return true;
}

void JobState::advance(Phase next, double time) {
  if (!is_legal_transition(phase(), next)) {
    throw std::logic_error("illegal job transition " + std::string(to_string(phase())) + " -> " +
                           std::string(to_string(next)));
  }
  history_.push_back({next, time});
}

void JobState::strike(const std::string& worker) { ++strikes_[worker]; }

std::size_t JobState::count(Phase p) const {
  return static_cast<std::size_t>(
      std::count_if(history_.begin(), history_.end(), [p](const PhaseEntry& e) { return e.phase == p; }));
}

namespace {

Phase phase_of(Lifecycle stage) {
  switch (stage) {
    case Lifecycle::Solved: return Phase::Solved;
    case Lifecycle::Transferring: return Phase::Transferring;
    case Lifecycle::Registered: return Phase::Registered;
    case Lifecycle::Running: return Phase::Running;
    case Lifecycle::Interrupted: return Phase::Interrupted;
    case Lifecycle::Retriggered: return Phase::Retriggered;
    case Lifecycle::Completed: return Phase::Completed;
    case Lifecycle::Abandoned: return Phase::Abandoned;
  }
  throw std::logic_error("unknown lifecycle stage");
}

}  // namespace

JobRun run_job(const ClusterSpec& cluster, const JobSpec& job, const EstimatorRegistry& registry,
               const SimConfig& config) {
  JobRun run;
  ShardingPlan initial;
  try {
    initial = solve(cluster, job, registry);
  } catch (const InfeasibleError& e) {
    run.diagnostics = std::string("job abandoned: ") + e.what();
    run.state.advance(Phase::Abandoned, 0.0);
    run.result.status = SimStatus::Abandoned;
    run.result.status_detail = run.diagnostics;
    return run;
  }
  run.state.advance(Phase::Solved, 0.0);
  run.state.set_plan(initial);
  run.plans.push_back(initial);

  SimConfig cfg = config;
  cfg.initial_transfer = true;
  cfg.num_epoch = job.num_epoch;
  auto hook = [&run](const LifecycleNote& note) {
    run.state.advance(phase_of(note.stage), note.time);
    if (note.stage == Lifecycle::Interrupted) run.state.strike(note.detail);
    if (note.stage == Lifecycle::Solved && note.plan) {
      run.state.set_plan(*note.plan);
      run.plans.push_back(*note.plan);
    }
  };
  run.result = inject_and_recover(initial, cluster, job, registry, cfg, hook);
  if (run.result.status == SimStatus::Abandoned) run.diagnostics = run.result.status_detail;
  return run;
}

Json to_json(const JobRun& run) {
  Json history = Json::array();
  for (const auto& e : run.state.history()) history.push_back({{"phase", to_string(e.phase)}, {"time", e.time}});
  Json strikes = Json::object();
  for (const auto& [id, n] : run.state.strike_counts()) strikes[id] = n;
  Json plans = Json::array();
  for (const auto& p : run.plans) plans.push_back(to_json(p));
  return {{"schema", kSchemaVersion},
          {"phase", to_string(run.state.phase())},
          {"history", history},
          {"strikes", strikes},
          {"diagnostics", run.diagnostics},
          {"plans", plans},
          {"result", to_json(run.result)}};
}

// ---------------------------------------------------------------------------
// Accuracy monitor

double LogisticCurve::operator()(double epoch) const {
  return plateau / (1.0 + std::exp(-rate * (epoch - midpoint)));
}

double LogisticCurve::crossing(double target) const {
  if (target <= 0.0) return -std::numeric_limits<double>::infinity();
  if (target >= plateau) return std::numeric_limits<double>::infinity();
  return midpoint - std::log(plateau / target - 1.0) / rate;
}

void AccuracyRecord::add(std::int64_t epoch, double accuracy) {
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) {
    throw std::invalid_argument("accuracy must lie in [0,1]");
  }
  if (!observations.empty() && epoch <= observations.back().first) {
    throw std::invalid_argument("accuracy epochs must strictly increase");
  }
  observations.emplace_back(epoch, accuracy);
}

namespace {

constexpr double kMinRate = 1e-6;
constexpr int kMaxIterations = 100;

double sse(const LogisticCurve& c, const std::vector<std::pair<std::int64_t, double>>& obs) {
  double s = 0.0;
  for (const auto& [k, a] : obs) {
    const double r = c(static_cast<double>(k)) - a;
    s += r * r;
  }
  return s;
}

LogisticCurve clamp_params(LogisticCurve c) {
  c.plateau = std::clamp(c.plateau, 1e-9, 1.0);
  c.rate = std::max(c.rate, kMinRate);
  return c;
}

// Levenberg-style damping on the normal equations; steps that would leave the
// feasible box are projected back before the acceptance test.
LogisticCurve gauss_newton(LogisticCurve c, const std::vector<std::pair<std::int64_t, double>>& obs) {
  double lambda = 1e-3;
  double current = sse(c, obs);
  for (int it = 0; it < kMaxIterations; ++it) {
    Eigen::Matrix3d jtj = Eigen::Matrix3d::Zero();
    Eigen::Vector3d jtr = Eigen::Vector3d::Zero();
    for (const auto& [k, a] : obs) {
      const double x = static_cast<double>(k) - c.midpoint;
      const double e = std::exp(-c.rate * x);
      const double denom = 1.0 + e;
      const double f = c.plateau / denom;
      const double g = c.plateau * e / (denom * denom);
      Eigen::Vector3d j(1.0 / denom, g * x, -g * c.rate);
      jtj += j * j.transpose();
      jtr += j * (a - f);
    }
    bool accepted = false;
    for (int tries = 0; tries < 20 && !accepted; ++tries) {
      Eigen::Matrix3d damped = jtj;
      for (int d = 0; d < 3; ++d) damped(d, d) += lambda * std::max(jtj(d, d), 1e-12);
      const Eigen::Vector3d step = damped.ldlt().solve(jtr);
      if (!step.allFinite()) {
        lambda *= 4.0;
        continue;
      }
      LogisticCurve next = clamp_params({c.plateau + step(0), c.rate + step(1), c.midpoint + step(2)});
      const double s = sse(next, obs);
      if (s < current) {
        const double gain = current - s;
        c = next;
        current = s;
        lambda = std::max(lambda / 3.0, 1e-12);
        accepted = true;
        if (gain < 1e-15 * std::max(1.0, current)) return c;
      } else {
        lambda *= 4.0;
      }
    }
    if (!accepted) break;
  }
  return c;
}

}  // namespace

LogisticCurve fit_logistic(const std::vector<std::pair<std::int64_t, double>>& observations) {
  if (observations.size() < 3) {
    throw InsufficientData("logistic fit needs at least 3 accuracy observations, got " +
                           std::to_string(observations.size()));
  }
  double top = 0.0;
  for (const auto& [k, a] : observations) top = std::max(top, a);
  const double first = static_cast<double>(observations.front().first);
  const double last = static_cast<double>(observations.back().first);

  LogisticCurve best;
  double best_sse = std::numeric_limits<double>::infinity();
  for (double plateau : {std::min(1.0, top * 1.05 + 1e-3), 1.0}) {
    for (double rate : {0.3, 1.0, 3.0}) {
      for (double frac : {0.0, 0.5, 1.0, 2.0}) {
        const double k0 = first + frac * (last - first);
        LogisticCurve c = gauss_newton(clamp_params({plateau, rate, k0}), observations);
        const double s = sse(c, observations);
        if (s < best_sse) {
          best_sse = s;
          best = c;
        }
      }
    }
  }
  return best;
}

std::int64_t refine_num_epoch(AccuracyRecord& record, double target, std::int64_t current_num_epoch) {
  if (!(target > 0.0 && target <= 1.0)) throw std::invalid_argument("target accuracy must lie in (0,1]");
  if (current_num_epoch < 1) throw std::invalid_argument("current num_epoch must be >= 1");
  const LogisticCurve curve = fit_logistic(record.observations);
  record.curve = curve;
  const std::int64_t last = record.observations.back().first;
  const std::int64_t lo = std::min(last, current_num_epoch);

  std::int64_t result = current_num_epoch;
  const bool observed = std::any_of(record.observations.begin(), record.observations.end(),
                                    [target](const auto& o) { return o.second >= target; });
  if (observed) {
    result = lo;
  } else {
    const double k = curve.crossing(target);
    if (std::isfinite(k) && k <= static_cast<double>(current_num_epoch)) {
      auto candidate = static_cast<std::int64_t>(std::ceil(k));
      // Guard against rounding at the crossing itself.
      while (candidate > lo && curve(static_cast<double>(candidate - 1)) >= target) --candidate;
      while (candidate < current_num_epoch && curve(static_cast<double>(candidate)) < target) ++candidate;
      result = std::clamp(candidate, lo, current_num_epoch);
    }
  }
  record.predicted_epochs = result;
  return result;
}

// ---------------------------------------------------------------------------
// Benchmark

namespace {

bool deadlines_met(const ClusterSpec& cluster, const EstimatorRegistry& registry) {
  for (const auto& w : cluster.workers) {
    if (w.background_apps.empty()) continue;
    const double exec = est_exec_time(registry.at(w.device_class), w.initial_state);
    for (const auto& app : w.background_apps) {
      if (exec > app.deadline) return false;
    }
  }
  return true;
}

std::int64_t predicted_violations(const ShardingPlan& plan, const ClusterSpec& cluster,
                                  const EstimatorRegistry& registry) {
  std::int64_t n = 0;
  for (const auto& a : plan.workers) {
    if (!a.selected) continue;
    const auto* w = cluster.find_worker(a.id);
    if (!check_pressure(*w, registry.at(w->device_class), a.batch).eligible) ++n;
  }
  return n;
}

TrialRecord run_trial(std::int64_t index, const ClusterSpec& base, const JobSpec& job,
                      const EstimatorRegistry& registry, const BenchOptions& options) {
  TrialRecord t;
  t.index = index;
  std::seed_seq seq{options.seed, static_cast<std::uint64_t>(index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> cpu(0.0, options.max_cpu);
  std::uniform_real_distribution<double> gpu(0.0, options.max_gpu);
  std::uniform_real_distribution<double> mem(0.0, options.max_mem);

  ClusterSpec cluster = base;
  bool drawn = false;
  for (int draw = 0; draw < options.max_draws && !drawn; ++draw) {
    for (auto& w : cluster.workers) w.initial_state = {cpu(rng), gpu(rng), mem(rng)};
    drawn = deadlines_met(cluster, registry);
  }
  for (const auto& w : cluster.workers) t.states.push_back(w.initial_state);
  if (!drawn) {
    t.skipped = true;
    t.skip_reason = "no cluster state meets every deadline";
    return t;
  }

  ShardingPlan heuristic;
  try {
    heuristic = solve(cluster, job, registry);
  } catch (const InfeasibleError& e) {
    t.skipped = true;
    t.skip_reason = std::string("infeasible: ") + e.what();
    return t;
  }
  const ShardingPlan fairness = fairness_plan(cluster, job, registry);

  SimConfig cfg = options.sim;
  cfg.seed = options.sim.seed + static_cast<std::uint64_t>(index);
  cfg.failure_script.clear();
  cfg.record_events = false;
  const SimResult hs = simulate(heuristic, cluster, job, registry, cfg);
  const SimResult fs = simulate(fairness, cluster, job, registry, cfg);
  const double epochs = static_cast<double>(cfg.num_epoch);

  t.heuristic_epoch_time = hs.makespan / epochs;
  t.fairness_epoch_time = fs.makespan / epochs;
  t.predicted_heuristic = heuristic.predicted_epoch_time;
  t.predicted_fairness = fairness.predicted_epoch_time;
  t.speedup = t.heuristic_epoch_time > 0.0 ? t.fairness_epoch_time / t.heuristic_epoch_time : 0.0;
  t.heuristic_violations = static_cast<std::int64_t>(hs.deadline_violations.size());
  t.fairness_violations = static_cast<std::int64_t>(fs.deadline_violations.size());
  t.heuristic_predicted_violations = predicted_violations(heuristic, cluster, registry);
  t.heuristic_workers = heuristic.selected_ids();
  return t;
}

constexpr double kHistLo = 0.5;
constexpr double kHistWidth = 0.25;
constexpr int kHistBins = 10;

}  // namespace

std::vector<HistogramBin> speedup_histogram(const std::vector<TrialRecord>& trials) {
  std::vector<HistogramBin> bins(kHistBins);
  for (int i = 0; i < kHistBins; ++i) {
    bins[i].lo = kHistLo + kHistWidth * i;
    bins[i].hi = bins[i].lo + kHistWidth;
  }
  // Out-of-range speedups land in the edge bins.
  for (const auto& t : trials) {
    if (t.skipped) continue;
    const int i = std::clamp(static_cast<int>(std::floor((t.speedup - kHistLo) / kHistWidth)), 0, kHistBins - 1);
    ++bins[i].count;
  }
  return bins;
}

BenchReport bench(const ClusterSpec& cluster_template, const JobSpec& job,
                  const EstimatorRegistry& registry, const BenchOptions& options) {
  if (options.n_trials < 1) throw std::invalid_argument("bench needs at least one trial");
  auto v = validate(cluster_template, job);
  if (!v.empty()) throw ValidationError(v.front().field, v.front().message);

  BenchReport report;
  double sum = 0.0;
  std::int64_t run = 0;
  std::int64_t fast = 0;
  for (std::int64_t i = 0; i < options.n_trials; ++i) {
    TrialRecord t = run_trial(i, cluster_template, job, registry, options);
    if (t.skipped) {
      ++report.skipped;
    } else {
      ++run;
      sum += t.speedup;
      if (t.speedup >= 1.5) ++fast;
      if (t.heuristic_violations > 0) ++report.violations_heuristic;
      if (t.fairness_violations > 0) ++report.violations_fairness;
    }
    report.trials.push_back(std::move(t));
  }
  report.mean_speedup = run == 0 ? 0.0 : sum / static_cast<double>(run);
  report.fraction_speedup_ge_1_5 = run == 0 ? 0.0 : static_cast<double>(fast) / static_cast<double>(run);
  report.histogram = speedup_histogram(report.trials);
  return report;
}

Json to_json(const BenchReport& report) {
  Json trials = Json::array();
  for (const auto& t : report.trials) {
    Json states = Json::array();
    for (const auto& s : t.states) states.push_back(to_json(s));
    trials.push_back({{"index", t.index},
                      {"skipped", t.skipped},
                      {"skip_reason", t.skip_reason},
                      {"states", states},
                      {"heuristic_epoch_time", t.heuristic_epoch_time},
                      {"fairness_epoch_time", t.fairness_epoch_time},
                      {"predicted_heuristic", t.predicted_heuristic},
                      {"predicted_fairness", t.predicted_fairness},
                      {"speedup", t.speedup},
                      {"heuristic_violations", t.heuristic_violations},
                      {"fairness_violations", t.fairness_violations},
                      {"heuristic_predicted_violations", t.heuristic_predicted_violations},
                      {"heuristic_workers", t.heuristic_workers}});
  }
  Json hist = Json::array();
  for (const auto& b : report.histogram) hist.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}});
  return {{"schema", kSchemaVersion},
          {"kind", "bench"},
          {"trials", trials},
          {"mean_speedup", report.mean_speedup},
          {"skipped", report.skipped},
          {"violations_heuristic", report.violations_heuristic},
          {"violations_fairness", report.violations_fairness},
          {"fraction_speedup_ge_1_5", report.fraction_speedup_ge_1_5},
          {"histogram", hist}};
}

BenchReport parse_bench_report(const Json& doc) {
  detail::require_schema(doc, "bench report");
  BenchReport r;
  try {
    for (const auto& t : doc.at("trials")) {
      TrialRecord rec;
      rec.index = t.at("index").get<std::int64_t>();
      rec.skipped = t.at("skipped").get<bool>();
      rec.skip_reason = t.value("skip_reason", "");
      if (t.contains("states")) {
        for (const auto& s : t.at("states")) rec.states.push_back(detail::parse_node_state(s, "trials.states"));
      }
      rec.heuristic_epoch_time = t.at("heuristic_epoch_time").get<double>();
      rec.fairness_epoch_time = t.at("fairness_epoch_time").get<double>();
      rec.predicted_heuristic = t.value("predicted_heuristic", 0.0);
      rec.predicted_fairness = t.value("predicted_fairness", 0.0);
      rec.speedup = t.at("speedup").get<double>();
      rec.heuristic_violations = t.at("heuristic_violations").get<std::int64_t>();
      rec.fairness_violations = t.at("fairness_violations").get<std::int64_t>();
      rec.heuristic_predicted_violations = t.value("heuristic_predicted_violations", std::int64_t{0});
      rec.heuristic_workers = t.value("heuristic_workers", std::vector<std::string>{});
      r.trials.push_back(std::move(rec));
    }
    r.mean_speedup = doc.at("mean_speedup").get<double>();
    r.skipped = doc.value("skipped", std::int64_t{0});
    r.violations_heuristic = doc.at("violations_heuristic").get<std::int64_t>();
    r.violations_fairness = doc.at("violations_fairness").get<std::int64_t>();
    r.fraction_speedup_ge_1_5 = doc.value("fraction_speedup_ge_1_5", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bench report: ") + e.what());
  }
  r.histogram = speedup_histogram(r.trials);
  return r;
}

void render_report_markdown(const BenchReport& report, std::ostream& out) {
  const auto run = static_cast<std::int64_t>(report.trials.size()) - report.skipped;
  std::ostringstream s;
  s << std::fixed << std::setprecision(3);
  s << "# Benchmark report\n\n";
  s << "| metric | value |\n|---|---|\n";
  s << "| trials run | " << run << " |\n";
  s << "| trials skipped | " << report.skipped << " |\n";
  s << "| mean speedup (fairness / heuristic) | " << report.mean_speedup << " |\n";
  s << "| share of trials with speedup >= 1.5 | " << report.fraction_speedup_ge_1_5 << " |\n";
  s << "| trials with deadline violations, heuristic | " << report.violations_heuristic << " |\n";
  s << "| trials with deadline violations, fairness | " << report.violations_fairness << " |\n\n";
  s << "## Speedup histogram\n\n| bin | count |\n|---|---|\n";
  for (std::size_t i = 0; i < report.histogram.size(); ++i) {
    const auto& b = report.histogram[i];
    s << "| ";
    if (i == 0) s << "< " << b.hi;
    else if (i + 1 == report.histogram.size()) s << ">= " << b.lo;
    else s << "[" << b.lo << ", " << b.hi << ")";
    s << " | " << b.count << " |\n";
  }
  out << s.str();
}

void render_histogram_csv(const BenchReport& report, std::ostream& out) {
  out << "lo,hi,count\n";
  for (const auto& b : report.histogram) out << b.lo << ',' << b.hi << ',' << b.count << '\n';
}

}  // namespace deepedge
