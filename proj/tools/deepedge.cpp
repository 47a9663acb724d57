// Command-line front end: one subcommand per operation, JSON/CSV in and out.
// Exit codes: 0 ok, 1 runtime failure, 2 bad input, 3 infeasible schedule.

#include <CLI11.hpp>

#include <deepedge/cluster_model.hpp>
#include <deepedge/estimators.hpp>
#include <deepedge/orchestrator.hpp>
#include <deepedge/profiler.hpp>
#include <deepedge/scheduler.hpp>
#include <deepedge/simulator.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace de = deepedge;

namespace {

de::EstimatorRegistry registry_from(const std::string& path) {
  return path.empty() ? de::default_registry() : de::load_registry(path);
}

void emit(const de::Json& doc, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << doc.dump(2) << '\n';
  } else {
    de::detail::write_file(path, doc);
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

de::Json plan_document(const de::ShardingPlan& plan, const de::ClusterSpec& cluster, const de::JobSpec& job,
                       const de::EstimatorRegistry& registry, std::string_view kind) {
  de::Json doc = de::to_json(plan);
  doc["kind"] = kind;
  doc["job"] = de::to_json(job);
  doc["cost"] = de::to_json(de::total_cost(plan, cluster, job, registry));
  return doc;
}

// Epoch/accuracy pairs, one per line, header optional.
std::vector<std::pair<std::int64_t, double>> read_accuracy_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw de::ParseError("cannot read " + path);
  std::vector<std::pair<std::int64_t, double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.find_first_not_of("0123456789.-, \t\r") != std::string::npos) continue;
    std::istringstream s(line);
    std::int64_t epoch = 0;
    double acc = 0.0;
    char comma = 0;
    if (!(s >> epoch >> comma >> acc) || comma != ',') throw de::ParseError(path + ": bad row '" + line + "'");
    rows.emplace_back(epoch, acc);
  }
  return rows;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interference-aware data sharding and scheduling for edge model re-training"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;

  // solve / fairness
  std::string cluster_path, job_path, registry_path, out_path;
  bool fairness_flag = false;
  auto add_solve_opts = [&](CLI::App* cmd) {
    cmd->add_option("--cluster", cluster_path, "cluster JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--job", job_path, "job JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--registry", registry_path, "estimator registry JSON (default: built-in profiles)");
    cmd->add_option("--out", out_path, "plan JSON (default: stdout)");
    cmd->add_option("--seed", seed, "unused by the deterministic solver; accepted for uniformity");
  };
  auto* solve_cmd = app.add_subcommand("solve", "compute a sharding plan");
  add_solve_opts(solve_cmd);
  solve_cmd->add_flag("--fairness", fairness_flag, "emit the equal-split baseline instead");
  auto* fair_cmd = app.add_subcommand("fairness", "compute the equal-split baseline plan");
  add_solve_opts(fair_cmd);

  // simulate
  std::string plan_path, config_path, trace_path;
  std::optional<std::uint64_t> sim_seed;
  auto* sim_cmd = app.add_subcommand("simulate", "simulate a plan");
  sim_cmd->add_option("--plan", plan_path, "plan JSON")->required()->check(CLI::ExistingFile);
  sim_cmd->add_option("--cluster", cluster_path, "cluster JSON")->required()->check(CLI::ExistingFile);
  sim_cmd->add_option("--config", config_path, "simulation config JSON")->check(CLI::ExistingFile);
  sim_cmd->add_option("--job", job_path, "job JSON (default: the job embedded in the plan)");
  sim_cmd->add_option("--registry", registry_path, "estimator registry JSON");
  sim_cmd->add_option("--out", out_path, "result JSON (default: stdout)");
  sim_cmd->add_option("--trace", trace_path, "event trace CSV");
  sim_cmd->add_option("--seed", sim_seed, "overrides the config seed");

  // run
  std::string accuracy_path;
  auto* run_cmd = app.add_subcommand("run", "solve, launch and supervise a job end to end");
  run_cmd->add_option("--cluster", cluster_path, "cluster JSON")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--job", job_path, "job JSON")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--config", config_path, "simulation config JSON")->check(CLI::ExistingFile);
  run_cmd->add_option("--registry", registry_path, "estimator registry JSON");
  run_cmd->add_option("--accuracy", accuracy_path,
                      "epoch,accuracy CSV; with target_accuracy set, refines num_epoch first")
      ->check(CLI::ExistingFile);
  run_cmd->add_option("--out", out_path, "run JSON (default: stdout)");
  run_cmd->add_option("--trace", trace_path, "event trace CSV");
  run_cmd->add_option("--seed", sim_seed, "overrides the config seed");

  // profile
  std::string device, target_name, grid_path;
  std::size_t points = 1650;
  std::int64_t reps = 1, b_max = 64;
  double noise = 0.05;
  auto* prof_cmd = app.add_subcommand("profile", "run a synthetic profiling sweep");
  prof_cmd->add_option("--device", device, "device class")->required();
  prof_cmd->add_option("--target", target_name, "compute_time|update_time|state_cpu|state_gpu|state_mem|exec_time")
      ->required();
  prof_cmd->add_option("--grid", grid_path, "grid CSV (default: sampled grid)")->check(CLI::ExistingFile);
  prof_cmd->add_option("--points", points, "sampled grid size when --grid is absent");
  prof_cmd->add_option("--b-max", b_max, "largest batch in a sampled grid");
  prof_cmd->add_option("--reps", reps, "repetitions per grid point");
  prof_cmd->add_option("--noise", noise, "relative measurement noise");
  prof_cmd->add_option("--registry", registry_path, "estimator registry JSON used as ground truth");
  prof_cmd->add_option("--seed", seed, "RNG seed");
  prof_cmd->add_option("--out", out_path, "dataset CSV")->required();

  // fit
  std::string data_path;
  double split = 1386.0 / 1650.0;
  auto* fit_cmd = app.add_subcommand("fit", "fit an estimator to a profiling dataset");
  fit_cmd->add_option("--data", data_path, "dataset CSV")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--split", split, "training fraction")->check(CLI::Range(0.0, 1.0));
  fit_cmd->add_option("--seed", seed, "shuffle seed");
  fit_cmd->add_option("--registry", registry_path,
                      "merge the model into this registry and emit the whole registry");
  fit_cmd->add_option("--device", device, "device class for --registry");
  fit_cmd->add_option("--out", out_path, "model or registry JSON (default: stdout)");

  // bench
  std::int64_t trials = 120;
  auto* bench_cmd = app.add_subcommand("bench", "heuristic versus fairness over random cluster states");
  bench_cmd->add_option("--cluster", cluster_path, "cluster template JSON")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--job", job_path, "job JSON")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--config", config_path, "simulation config JSON")->check(CLI::ExistingFile);
  bench_cmd->add_option("--registry", registry_path, "estimator registry JSON");
  bench_cmd->add_option("--trials", trials, "number of trials")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--seed", seed, "RNG seed");
  bench_cmd->add_option("--out", out_path, "report JSON (default: stdout)");

  // report
  std::string report_path, md_path, csv_path;
  auto* report_cmd = app.add_subcommand("report", "render a benchmark report");
  report_cmd->add_option("--in", report_path, "report JSON")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--markdown", md_path, "Markdown output (default: stdout)");
  report_cmd->add_option("--csv", csv_path, "histogram CSV output");
  report_cmd->add_option("--seed", seed, "accepted for uniformity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help and version are "errors" with exit code 0.
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*solve_cmd || *fair_cmd) {
      const auto cluster = de::load_cluster(cluster_path);
      const auto job = de::load_job(job_path);
      const auto registry = registry_from(registry_path);
      const bool fair = *fair_cmd || fairness_flag;
      const auto plan = fair ? de::fairness_plan(cluster, job, registry) : de::solve(cluster, job, registry);
      emit(plan_document(plan, cluster, job, registry, fair ? "fairness" : "heuristic"), out_path);
    } else if (*sim_cmd) {
      const de::Json plan_doc = de::detail::read_file(plan_path);
      const auto plan = de::parse_plan(plan_doc);
      const auto cluster = de::load_cluster(cluster_path);
      de::JobSpec job;
      if (!job_path.empty()) {
        job = de::load_job(job_path);
      } else if (plan_doc.contains("job")) {
        job = de::parse_job(plan_doc.at("job"));
      } else {
        throw de::ParseError("plan has no embedded job; pass --job");
      }
      const auto registry = registry_from(registry_path);
      de::SimConfig config;
      if (!config_path.empty()) config = de::parse_sim_config(de::detail::read_file(config_path));
      if (sim_seed) config.seed = *sim_seed;
      const auto result = de::simulate(plan, cluster, job, registry, config);
      emit(de::to_json(result), out_path);
      if (!trace_path.empty()) {
        auto out = open_out(trace_path);
        de::write_trace_csv(result, out);
      }
    } else if (*run_cmd) {
      const auto cluster = de::load_cluster(cluster_path);
      auto job = de::load_job(job_path);
      const auto registry = registry_from(registry_path);
      de::SimConfig config;
      if (!config_path.empty()) config = de::parse_sim_config(de::detail::read_file(config_path));
      if (sim_seed) config.seed = *sim_seed;
      de::Json refinement;
      if (!accuracy_path.empty() && job.target_accuracy) {
        de::AccuracyRecord record;
        for (const auto& [k, a] : read_accuracy_csv(accuracy_path)) record.add(k, a);
        const auto before = job.num_epoch;
        job.num_epoch = de::refine_num_epoch(record, *job.target_accuracy, job.num_epoch);
        refinement = {{"num_epoch_before", before},
                      {"num_epoch_after", job.num_epoch},
                      {"plateau", record.curve->plateau},
                      {"rate", record.curve->rate},
                      {"midpoint", record.curve->midpoint}};
      }
      const auto run = de::run_job(cluster, job, registry, config);
      de::Json doc = de::to_json(run);
      if (!refinement.is_null()) doc["refinement"] = refinement;
      emit(doc, out_path);
      if (!trace_path.empty()) {
        auto out = open_out(trace_path);
        de::write_trace_csv(run.result, out);
      }
      if (run.state.phase() == de::Phase::Abandoned) {
        std::cerr << run.diagnostics << '\n';
        return 3;
      }
    } else if (*prof_cmd) {
      const auto registry = registry_from(registry_path);
      de::SweepPlan plan;
      plan.device_class = device;
      plan.target = de::parse_target(target_name);
      plan.repetitions = reps;
      plan.noise_std = noise;
      plan.grid = grid_path.empty()
                      ? de::make_grid(plan.target, registry.profile(device), points, b_max, seed)
                      : de::load_grid(grid_path);
      de::save_dataset(de::run_sweep(plan, registry.at(device), seed), out_path);
    } else if (*fit_cmd) {
      const auto model = de::fit(de::load_dataset(data_path), split, seed);
      std::cerr << de::target_name(model.target) << ": train MAPE " << model.train_mape << "%, test MAPE "
                << model.test_mape << "%\n";
      if (registry_path.empty()) {
        emit(de::to_json(model), out_path);
      } else {
        if (device.empty()) throw de::ParseError("--registry needs --device");
        de::Json doc = de::detail::read_file(registry_path);
        doc["devices"][device]["fitted"][std::string(de::target_name(model.target))] = de::to_json(model);
        emit(de::parse_registry(doc).to_json(), out_path);
      }
    } else if (*bench_cmd) {
      const auto cluster = de::load_cluster(cluster_path);
      const auto job = de::load_job(job_path);
      const auto registry = registry_from(registry_path);
      de::BenchOptions options;
      options.n_trials = trials;
      options.seed = seed;
      if (!config_path.empty()) options.sim = de::parse_sim_config(de::detail::read_file(config_path));
      const auto report = de::bench(cluster, job, registry, options);
      emit(de::to_json(report), out_path);
    } else if (*report_cmd) {
      const auto report = de::parse_bench_report(de::detail::read_file(report_path));
      if (md_path.empty()) {
        de::render_report_markdown(report, std::cout);
      } else {
        auto out = open_out(md_path);
        de::render_report_markdown(report, out);
      }
      if (!csv_path.empty()) {
        auto out = open_out(csv_path);
        de::render_histogram_csv(report, out);
      }
    }
  } catch (const de::InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return 3;
  } catch (const de::ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const de::ParseError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
