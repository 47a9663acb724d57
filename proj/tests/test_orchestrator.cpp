#include <doctest.h>

#include "support.hpp"

#include <deepedge/orchestrator.hpp>

#include <cmath>
#include <random>
#include <sstream>

using namespace deepedge;
using testing::make_job;

namespace {

std::vector<std::pair<std::int64_t, double>> sample(const LogisticCurve& c, std::int64_t from, std::int64_t to) {
  std::vector<std::pair<std::int64_t, double>> out;
  for (std::int64_t k = from; k <= to; ++k) out.emplace_back(k, c(static_cast<double>(k)));
  return out;
}

AccuracyRecord record_of(const std::vector<std::pair<std::int64_t, double>>& points) {
  AccuracyRecord r;
  for (const auto& [k, a] : points) r.add(k, a);
  return r;
}

std::vector<Phase> phases(const JobState& s) {
  std::vector<Phase> out;
  for (const auto& e : s.history()) out.push_back(e.phase);
  return out;
}

}  // namespace

TEST_CASE("legal and illegal transitions") {
  CHECK(is_legal_transition(Phase::Requested, Phase::Solved));
  CHECK(is_legal_transition(Phase::Running, Phase::Interrupted));
  CHECK(is_legal_transition(Phase::Interrupted, Phase::Retriggered));
  CHECK(is_legal_transition(Phase::Retriggered, Phase::Solved));
  CHECK_FALSE(is_legal_transition(Phase::Requested, Phase::Running));
  CHECK_FALSE(is_legal_transition(Phase::Completed, Phase::Solved));
  CHECK_FALSE(is_legal_transition(Phase::Interrupted, Phase::Running));

  JobState s;
  CHECK(s.phase() == Phase::Requested);
  CHECK_THROWS_AS(s.advance(Phase::Running, 1.0), std::logic_error);
  s.advance(Phase::Solved, 0.0);
  CHECK(s.phase() == Phase::Solved);
  CHECK(is_legal_history(s.history()));
  CHECK_FALSE(is_legal_history({{Phase::Solved, 0.0}}));
  CHECK_FALSE(is_legal_history({{Phase::Requested, 0.0}, {Phase::Completed, 1.0}}));
}

TEST_CASE("healthy run goes straight through") {
  const auto reg = default_registry();
  SimConfig cfg;
  cfg.num_epoch = 2;
  const auto run = run_job(testing::testbed(), make_job(3855, 2), reg, cfg);
  CHECK(phases(run.state) == std::vector<Phase>{Phase::Requested, Phase::Solved, Phase::Transferring,
                                                  Phase::Registered, Phase::Running, Phase::Completed});
  CHECK(run.plans.size() == 1);
  CHECK(run.result.status == SimStatus::Completed);
  CHECK(run.diagnostics.empty());
  // The initial transfer is charged before training starts.
  const double transfer = run.state.history()[3].time - run.state.history()[2].time;
  CHECK(transfer > 0.0);
}

TEST_CASE("one crash adds one interrupted and retriggered cycle") {
  const auto reg = default_registry();
  SimConfig cfg;
  cfg.num_epoch = 2;
  cfg.failure_script = {{"nano-2", 100.0}};
  const auto run = run_job(testing::testbed(), make_job(3855, 2), reg, cfg);
  CHECK(phases(run.state) ==
        std::vector<Phase>{Phase::Requested, Phase::Solved, Phase::Transferring, Phase::Registered, Phase::Running,
                           Phase::Interrupted, Phase::Retriggered, Phase::Solved, Phase::Transferring,
                           Phase::Registered, Phase::Running, Phase::Completed});
  CHECK(run.state.strike_counts().at("nano-2") == 1);
  CHECK(run.plans.size() == 2);
  CHECK(is_legal_history(run.state.history()));
  for (std::size_t i = 1; i < run.state.history().size(); ++i) {
    CHECK(run.state.history()[i].time >= run.state.history()[i - 1].time);
  }
}

TEST_CASE("running out of workers is abandoned with a reason") {
  const auto reg = default_registry();
  auto c = testing::make_cluster({testing::make_worker("solo", "nano")});
  SimConfig cfg;
  cfg.failure_script = {{"solo", 5.0}, {"solo", 20.0}, {"solo", 40.0}};
  const auto run = run_job(c, make_job(2000), reg, cfg);
  CHECK(run.state.phase() == Phase::Abandoned);
  CHECK(run.state.count(Phase::Interrupted) == 3);
  CHECK(run.diagnostics.find("abandoned") != std::string::npos);
  CHECK(is_legal_history(run.state.history()));
}

TEST_CASE("an infeasible first solve is abandoned before running") {
  EstimatorRegistry reg;
  reg.add(testing::fixed_bundle("busy", 1.0, 0.0, 0.5), testing::roomy_profile());
  auto w = testing::make_worker("a", "busy");
  w.background_apps.push_back({"cam", 0.2, ""});
  const auto run = run_job(testing::make_cluster({w}), make_job(10), reg, {});
  CHECK(phases(run.state) == std::vector<Phase>{Phase::Requested, Phase::Abandoned});
  CHECK(run.diagnostics.find("cam") != std::string::npos);
  CHECK(to_json(run).at("phase") == "abandoned");
}

TEST_CASE("logistic fit recovers the crossing epoch") {
  const LogisticCurve truth{0.9, 0.8, 4.0};
  CHECK(truth.crossing(0.85) == doctest::Approx(4.0 + std::log(17.0) / 0.8));
  CHECK(std::isinf(truth.crossing(0.95)));
  auto rec = record_of(sample(truth, 1, 6));
  CHECK(refine_num_epoch(rec, 0.85, 20) == 8);
  REQUIRE(rec.curve);
  CHECK(rec.curve->plateau == doctest::Approx(0.9).epsilon(1e-3));
  CHECK(rec.predicted_epochs == 8);
}

TEST_CASE("refinement edge cases") {
  AccuracyRecord few;
  few.add(1, 0.2);
  few.add(2, 0.3);
  CHECK_THROWS_AS(refine_num_epoch(few, 0.8, 10), InsufficientData);
  CHECK_THROWS_AS(few.add(2, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(few.add(3, 1.4), std::invalid_argument);

  // Target already met at epoch 5: stop there.
  auto met = record_of({{1, 0.3}, {2, 0.5}, {3, 0.65}, {4, 0.72}, {5, 0.81}});
  CHECK(refine_num_epoch(met, 0.8, 20) == 5);

  // A plateau below the target keeps the current budget.
  auto flat = record_of(sample({0.6, 1.0, 2.0}, 1, 8));
  CHECK(refine_num_epoch(flat, 0.9, 15) == 15);
  CHECK_THROWS(refine_num_epoch(flat, 1.5, 15));
}

TEST_CASE("refined epochs grow with the target") {
  const LogisticCurve truth{0.95, 0.6, 6.0};
  std::int64_t last = 0;
  for (double target = 0.5; target <= 0.94; target += 0.04) {
    auto rec = record_of(sample(truth, 1, 5));
    const auto k = refine_num_epoch(rec, target, 40);
    CHECK(k >= last);
    last = k;
  }
}

TEST_CASE("bench on the testbed") {
  const auto reg = default_registry();
  BenchOptions opts;
  opts.n_trials = 12;
  opts.seed = 3;
  opts.sim.num_epoch = 1;
  const auto report = bench(testing::testbed(), make_job(3855), reg, opts);
  CHECK(report.trials.size() == 12);
  CHECK(report.violations_heuristic == 0);
  std::int64_t binned = 0;
  for (const auto& b : report.histogram) binned += b.count;
  CHECK(binned == 12 - report.skipped);
  for (const auto& t : report.trials) {
    if (t.skipped) continue;
    CHECK(t.speedup == doctest::Approx(t.fairness_epoch_time / t.heuristic_epoch_time));
  }
  CHECK(to_json(bench(testing::testbed(), make_job(3855), reg, opts)) == to_json(report));

  const auto back = parse_bench_report(to_json(report));
  CHECK(back.mean_speedup == doctest::Approx(report.mean_speedup));
  CHECK(back.trials.size() == report.trials.size());
  std::stringstream md, csv;
  render_report_markdown(back, md);
  render_histogram_csv(back, csv);
  CHECK(md.str().find("mean speedup") != std::string::npos);
  CHECK(csv.str().rfind("lo,hi,count\n", 0) == 0);
}

TEST_CASE("speedup histogram edges absorb outliers") {
  std::vector<TrialRecord> trials(3);
  trials[0].speedup = 0.1;
  trials[1].speedup = 1.6;
  trials[2].speedup = 9.0;
  const auto h = speedup_histogram(trials);
  REQUIRE(h.size() == 10);
  CHECK(h.front().count == 1);
  CHECK(h.back().count == 1);
  std::int64_t total = 0;
  for (const auto& b : h) total += b.count;
  CHECK(total == 3);
}
