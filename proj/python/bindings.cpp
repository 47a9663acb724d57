// JSON-in, JSON-out bindings. Documents use the same schema as the CLI; the
// Python package converts dicts to and from strings.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <deepedge/cluster_model.hpp>
#include <deepedge/estimators.hpp>
#include <deepedge/orchestrator.hpp>
#include <deepedge/scheduler.hpp>
#include <deepedge/simulator.hpp>

namespace py = pybind11;
namespace de = deepedge;

namespace {

de::Json parse(const std::string& text, const char* what) { return de::detail::parse_text(text, what); }

de::EstimatorRegistry registry_of(const std::string& text) {
  return text.empty() ? de::default_registry() : de::parse_registry(parse(text, "registry"));
}

de::SimConfig config_of(const std::string& text) {
  return text.empty() ? de::SimConfig{} : de::parse_sim_config(parse(text, "config"));
}

std::string solve(const std::string& cluster, const std::string& job, const std::string& registry,
                  bool fairness, const std::vector<std::string>& excluded) {
  const auto c = de::parse_cluster(parse(cluster, "cluster"));
  const auto j = de::parse_job(parse(job, "job"));
  const auto reg = registry_of(registry);
  if (fairness) return de::to_json(de::fairness_plan(c, j, reg)).dump();
  de::SolveOptions opts;
  opts.excluded.insert(excluded.begin(), excluded.end());
  return de::to_json(de::solve(c, j, reg, opts)).dump();
}

std::string simulate(const std::string& plan, const std::string& cluster, const std::string& job,
                     const std::string& config, const std::string& registry) {
  const auto c = de::parse_cluster(parse(cluster, "cluster"));
  const auto j = de::parse_job(parse(job, "job"));
  return de::to_json(de::simulate(de::parse_plan(parse(plan, "plan")), c, j, registry_of(registry),
                                  config_of(config)))
      .dump();
}

std::string run_job(const std::string& cluster, const std::string& job, const std::string& config,
                    const std::string& registry) {
  const auto c = de::parse_cluster(parse(cluster, "cluster"));
  const auto j = de::parse_job(parse(job, "job"));
  auto cfg = config_of(config);
  cfg.num_epoch = j.num_epoch;
  return de::to_json(de::run_job(c, j, registry_of(registry), cfg)).dump();
}

std::string bench(const std::string& cluster, const std::string& job, std::int64_t trials, std::uint64_t seed,
                  const std::string& config, const std::string& registry) {
  const auto c = de::parse_cluster(parse(cluster, "cluster"));
  const auto j = de::parse_job(parse(job, "job"));
  de::BenchOptions opts;
  opts.n_trials = trials;
  opts.seed = seed;
  opts.sim = config_of(config);
  return de::to_json(de::bench(c, j, registry_of(registry), opts)).dump();
}

de::NodeState state_of(double cpu, double gpu, double mem) { return {cpu, gpu, mem}; }

}  // namespace

PYBIND11_MODULE(_deepedge, m) {
  m.doc() = "Edge training scheduler and simulator core";

  py::register_exception<de::ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<de::ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<de::InfeasibleError>(m, "InfeasibleError", PyExc_RuntimeError);
  py::register_exception<de::InsufficientData>(m, "InsufficientData", PyExc_ValueError);

  m.def("solve", &solve, py::arg("cluster"), py::arg("job"), py::arg("registry") = "",
        py::arg("fairness") = false, py::arg("excluded") = std::vector<std::string>{});
  m.def("simulate", &simulate, py::arg("plan"), py::arg("cluster"), py::arg("job"), py::arg("config") = "",
        py::arg("registry") = "");
  m.def("run_job", &run_job, py::arg("cluster"), py::arg("job"), py::arg("config") = "",
        py::arg("registry") = "");
  m.def("bench", &bench, py::arg("cluster"), py::arg("job"), py::arg("trials") = 120, py::arg("seed") = 0,
        py::arg("config") = "", py::arg("registry") = "");
  m.def("default_registry", [] { return de::default_registry().to_json().dump(); });

  m.def(
      "est_compute_time",
      [](const std::string& device, double cpu, double gpu, double mem, std::int64_t batch,
         const std::string& registry) {
        return de::est_compute_time(registry_of(registry).at(device), state_of(cpu, gpu, mem), batch);
      },
      py::arg("device"), py::arg("cpu"), py::arg("gpu"), py::arg("mem"), py::arg("batch"),
      py::arg("registry") = "");
  m.def(
      "est_update_time",
      [](const std::string& device, double cpu, double ps_cpu, std::int64_t batch, std::int64_t n_workers,
         const std::string& registry) {
        de::UpdateQuery q;
        q.state = state_of(cpu, 0.0, 0.0);
        q.ps_state = state_of(ps_cpu, 0.0, 0.0);
        q.own_batch = batch;
        q.n_workers = n_workers;
        return de::est_update_time(registry_of(registry).at(device), q);
      },
      py::arg("device"), py::arg("cpu"), py::arg("ps_cpu"), py::arg("batch"), py::arg("n_workers"),
      py::arg("registry") = "");
  m.def(
      "get_max_batch_size",
      [](const std::string& device, double cpu, double gpu, double mem, std::int64_t b_min, std::int64_t b_max,
         const std::string& registry) {
        const auto reg = registry_of(registry);
        return de::get_max_batch_size(reg.at(device), state_of(cpu, gpu, mem), {b_min, b_max},
                                      reg.mem_ceiling());
      },
      py::arg("device"), py::arg("cpu"), py::arg("gpu"), py::arg("mem"), py::arg("b_min") = 1,
      py::arg("b_max") = 64, py::arg("registry") = "");

  m.def(
      "refine_num_epoch",
      [](const std::vector<std::pair<std::int64_t, double>>& observations, double target, std::int64_t current) {
        de::AccuracyRecord rec;
        for (const auto& [k, a] : observations) rec.add(k, a);
        return de::refine_num_epoch(rec, target, current);
      },
      py::arg("observations"), py::arg("target"), py::arg("current"));
  m.def(
      "fit_logistic",
      [](const std::vector<std::pair<std::int64_t, double>>& observations) {
        const auto c = de::fit_logistic(observations);
        return std::tuple{c.plateau, c.rate, c.midpoint};
      },
      py::arg("observations"));
}
