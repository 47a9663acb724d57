#include <doctest.h>

#include "support.hpp"

#include <deepedge/simulator.hpp>

#include <sstream>

using namespace deepedge;
using testing::fixed_bundle;
using testing::make_cluster;
using testing::make_job;
using testing::make_worker;

namespace {

EstimatorRegistry one_class(double tc, double tu, double exec = 0.0, double ps_service = 0.0) {
  EstimatorRegistry reg;
  reg.add(fixed_bundle("x", tc, tu, exec, ps_service), testing::roomy_profile());
  return reg;
}

SimConfig quiet(std::int64_t epochs = 1) {
  SimConfig c;
  c.num_epoch = epochs;
  return c;
}

std::size_t count(const SimResult& r, EventKind kind) {
  return static_cast<std::size_t>(
      std::count_if(r.events.begin(), r.events.end(), [&](const SimEvent& e) { return e.kind == kind; }));
}

}  // namespace

TEST_CASE("single worker matches the prediction exactly") {
  const auto reg = one_class(1.0, 0.0);
  const auto c = make_cluster({make_worker("a", "x")});
  const auto plan = evaluate_assignment(c, reg, {100}, {10});
  REQUIRE(plan.predicted_epoch_time == doctest::Approx(100.0));
  const auto r = simulate(plan, c, make_job(100, 2), reg, quiet(2));
  CHECK(r.status == SimStatus::Completed);
  CHECK(r.makespan == doctest::Approx(200.0).epsilon(1e-12));
  REQUIRE(r.workers.size() == 1);
  CHECK(r.workers[0].steps_per_epoch == 10);
  CHECK(r.workers[0].step_durations.size() == 20);
  CHECK(r.workers[0].epoch_completions == std::vector<double>{100.0, 200.0});
}

TEST_CASE("built-in profiles: single worker matches with update rounds") {
  const auto reg = default_registry();
  const auto c = make_cluster({make_worker("a", "nano", {0.3, 0.2, 0.1})});
  const auto job = make_job(333, 3);
  const auto plan = solve(c, job, reg);
  const auto r = simulate(plan, c, job, reg, quiet(3));
  CHECK(r.makespan == doctest::Approx(plan.predicted_epoch_time * 3).epsilon(1e-9));
}

TEST_CASE("updates queue FIFO at the parameter server") {
  // Both workers push at t=1; service takes the whole 2 s round.
  const auto reg = one_class(1.0, 2.0, 0.0, 2.0);
  const auto c = make_cluster({make_worker("a", "x"), make_worker("b", "x")});
  const auto plan = evaluate_assignment(c, reg, {1, 1}, {1, 1});
  const auto r = simulate(plan, c, make_job(2), reg, quiet());
  CHECK(r.find("a")->step_durations == std::vector<double>{3.0});
  CHECK(r.find("b")->step_durations == std::vector<double>{5.0});
  CHECK(r.makespan == doctest::Approx(5.0));
  CHECK(r.ps_mean_wait == doctest::Approx(1.0));
  CHECK(r.ps_max_queue_depth == 1);
}

TEST_CASE("testbed plan simulates within 5% of its prediction") {
  const auto reg = default_registry();
  const auto c = testing::testbed();
  const auto job = make_job(3855, 2);
  const auto plan = solve(c, job, reg);
  const auto r = simulate(plan, c, job, reg, quiet(2));
  CHECK(r.status == SimStatus::Completed);
  CHECK(std::abs(r.makespan - plan.predicted_epoch_time * 2) <= 0.05 * plan.predicted_epoch_time * 2);
  CHECK(r.deadline_violations.empty());
}

TEST_CASE("jittered runs are reproducible per seed") {
  const auto reg = default_registry();
  const auto c = testing::testbed();
  const auto job = make_job(800);
  const auto plan = solve(c, job, reg);
  SimConfig cfg;
  cfg.jitter_std = 0.1;
  cfg.seed = 4;
  const auto a = simulate(plan, c, job, reg, cfg);
  const auto b = simulate(plan, c, job, reg, cfg);
  cfg.seed = 5;
  const auto other = simulate(plan, c, job, reg, cfg);
  CHECK(to_json(a) == to_json(b));
  CHECK(a.makespan != other.makespan);
}

TEST_CASE("a crash is detected, everything is killed and the job retriggers") {
  const auto reg = default_registry();
  const auto c = testing::testbed();
  const auto job = make_job(3855, 2);
  const auto plan = solve(c, job, reg);
  SimConfig cfg = quiet(2);
  cfg.failure_script = {{"nano-2", 100.0}};
  const auto r = simulate(plan, c, job, reg, cfg);
  CHECK(r.status == SimStatus::Completed);
  CHECK(r.retriggers == 1);
  CHECK(r.strikes.at("nano-2") == 1);
  CHECK(count(r, EventKind::Crash) == 1);
  CHECK(count(r, EventKind::Detected) == 1);
  CHECK(count(r, EventKind::Killed) == plan.selected_count() - 1);
  CHECK(r.wasted_time == doctest::Approx(100.0 + cfg.heartbeat_interval));
  // One strike is not enough to exclude the worker.
  CHECK(r.final_plan.find("nano-2")->selected);
  CHECK(r.final_plan.total_samples() == job.num_samples);
  CHECK(r.makespan > 100.0 + plan.predicted_epoch_time * 2);
}

TEST_CASE("three strikes exclude a worker") {
  const auto reg = default_registry();
  const auto c = testing::testbed();
  const auto job = make_job(3855);
  SimConfig cfg = quiet();
  cfg.failure_script = {{"nano-2", 10.0}, {"nano-2", 30.0}, {"nano-2", 60.0}};
  const auto r = simulate(solve(c, job, reg), c, job, reg, cfg);
  CHECK(r.status == SimStatus::Completed);
  CHECK(r.strikes.at("nano-2") == 3);
  CHECK(r.retriggers == 3);
  CHECK_FALSE(r.final_plan.find("nano-2")->selected);
  CHECK(r.final_plan.total_samples() == job.num_samples);
  CHECK(r.find("nano-2") == nullptr);
}

TEST_CASE("crashes outside the active plan are ignored") {
  const auto reg = default_registry();
  const auto c = testing::testbed();
  const auto job = make_job(500);
  SolveOptions opts;
  opts.excluded.insert("nano-3");
  SimConfig cfg = quiet();
  cfg.failure_script = {{"nano-3", 1.0}, {"ghost", 2.0}};
  const auto r = simulate(solve(c, job, reg, opts), c, job, reg, cfg);
  CHECK(r.retriggers == 0);
  CHECK(count(r, EventKind::CrashIgnored) == 2);
}

TEST_CASE("retrigger limit abandons the job") {
  const auto reg = default_registry();
  const auto c = testing::testbed();
  const auto job = make_job(3855);
  SimConfig cfg = quiet();
  cfg.max_retriggers = 0;
  cfg.failure_script = {{"tx2-0", 5.0}};
  const auto r = simulate(solve(c, job, reg), c, job, reg, cfg);
  CHECK(r.status == SimStatus::Abandoned);
  CHECK(r.status_detail.find("retrigger limit") != std::string::npos);
}

TEST_CASE("losing every worker abandons the job") {
  const auto reg = one_class(1.0, 0.0);
  const auto c = make_cluster({make_worker("a", "x")});
  const auto job = make_job(100);
  SimConfig cfg = quiet();
  cfg.failure_script = {{"a", 5.0}, {"a", 20.0}, {"a", 40.0}};
  const auto r = simulate(evaluate_assignment(c, reg, {100}, {10}), c, job, reg, cfg);
  CHECK(r.status == SimStatus::Abandoned);
  CHECK(r.status_detail.find("abandoned") != std::string::npos);
}

TEST_CASE("deadline violations are recorded per period") {
  const auto reg = one_class(1.0, 0.0, 0.3);
  auto w = make_worker("a", "x");
  w.background_apps.push_back({"cam", 0.2, ""});
  const auto c = make_cluster({w});
  const auto r = simulate(evaluate_assignment(c, reg, {10}, {10}), c, make_job(10), reg, quiet());
  REQUIRE(r.deadline_violations.size() == 1);
  CHECK(r.deadline_violations[0].app == "cam");
  CHECK(r.deadline_violations[0].periods == 50);
  CHECK(r.deadline_violations[0].observed == doctest::Approx(0.3));
}

TEST_CASE("trace csv and input errors") {
  const auto reg = one_class(1.0, 0.0);
  const auto c = make_cluster({make_worker("a", "x")});
  const auto plan = evaluate_assignment(c, reg, {4}, {2});
  std::stringstream s;
  write_trace_csv(simulate(plan, c, make_job(4), reg, quiet()), s);
  std::string header;
  std::getline(s, header);
  CHECK(header == "time,worker,event,detail");
  std::string first;
  std::getline(s, first);
  CHECK(first.find("start") != std::string::npos);

  auto bad = plan;
  bad.workers[0].id = "nobody";
  CHECK_THROWS_AS(simulate(bad, c, make_job(4), reg, quiet()), std::invalid_argument);
  SimConfig cfg;
  cfg.num_epoch = 0;
  CHECK_FALSE(validate(cfg).empty());
  cfg = quiet();
  cfg.failure_script = {{"a", 3.0}};
  CHECK(to_json(parse_sim_config(to_json(cfg))) == to_json(cfg));
}
