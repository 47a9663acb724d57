#pragma once

// Fixture builders and independent oracles shared by the unit and acceptance
// tests. Oracles here call only the estimator functions, never scheduler or
// simulator code, so they can check those modules.

#include <deepedge/cluster_model.hpp>
#include <deepedge/estimators.hpp>
#include <deepedge/scheduler.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace testing {

namespace de = deepedge;

inline de::WorkerSpec make_worker(std::string id, std::string device_class, de::NodeState state = {},
                                  std::int64_t b_max = 64) {
  de::WorkerSpec w;
  w.id = std::move(id);
  w.device_class = std::move(device_class);
  w.initial_state = state;
  w.b_min = 1;
  w.b_max = b_max;
  w.per_sample_transfer_cost["store"] = 0.0;
  return w;
}

inline de::ClusterSpec make_cluster(std::vector<de::WorkerSpec> workers) {
  de::ClusterSpec c;
  c.workers = std::move(workers);
  c.data_stores = {"store"};
  return c;
}

inline de::JobSpec make_job(std::int64_t samples, std::int64_t epochs = 1) {
  de::JobSpec j;
  j.num_samples = samples;
  j.num_epoch = epochs;
  j.source_store = "store";
  return j;
}

/// 1 tx2 + 3 nano, idle except a light load, one 200 ms background app each.
inline de::ClusterSpec testbed() {
  std::vector<de::WorkerSpec> ws;
  ws.push_back(make_worker("tx2-0", "tx2", {0.1, 0.05, 0.2}));
  for (int i = 1; i <= 3; ++i) ws.push_back(make_worker("nano-" + std::to_string(i), "nano", {0.1, 0.05, 0.2}));
  for (auto& w : ws) {
    w.background_apps.push_back({"sift", 0.2, "feature extraction"});
    w.init_cost = 5.0;
    w.per_sample_transfer_cost["store"] = w.device_class == "tx2" ? 0.002 : 0.003;
  }
  return make_cluster(std::move(ws));
}

/// A bundle with constant per-sample compute and per-round update times.
inline de::EstimatorBundle fixed_bundle(std::string name, double t_compute, double t_update,
                                        double exec = 0.0, double ps_service = 0.0) {
  de::EstimatorBundle b;
  b.device_class = name;
  b.compute_time = [t_compute](const de::NodeState&, std::int64_t) { return t_compute; };
  b.update_time = [t_update](const de::UpdateQuery&) { return t_update; };
  b.state = [](const de::NodeState& s, std::int64_t) { return s; };
  b.exec_time = [exec](const de::NodeState&) { return exec; };
  b.ps_service_time = [ps_service](const de::NodeState&) { return ps_service; };
  return b;
}

/// Profile whose memory model admits every batch up to any b_max.
inline de::ParametricProfile roomy_profile() {
  de::ParametricProfile p = de::builtin_profile("tx2");
  p.mem_per_batch_unit = 0.0;
  p.base_mem_footprint = 0.0;
  return p;
}

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

/// Epoch time written out independently of the scheduler.
inline double oracle_epoch_time(std::int64_t d, std::int64_t b, double tc, double tu) {
  if (d == 0) return 0.0;
  return static_cast<double>(ceil_div(d, b)) * (static_cast<double>(b) * tc + tu);
}

/// Memory-feasible batch bound by scanning every batch (no early exit).
inline std::int64_t oracle_max_batch(const de::EstimatorBundle& bundle, const de::NodeState& state,
                                     std::int64_t b_min, std::int64_t b_max, double ceiling) {
  std::int64_t best = 0;
  for (std::int64_t b = b_min; b <= b_max; ++b) {
    if (bundle.state(state, b).mem_util <= ceiling + 1e-12) best = b;
  }
  return best;
}

inline bool oracle_eligible(const de::WorkerSpec& w, const de::EstimatorBundle& bundle, std::int64_t b) {
  if (w.background_apps.empty()) return true;
  const double exec = bundle.exec_time(bundle.state(w.initial_state, b));
  return std::all_of(w.background_apps.begin(), w.background_apps.end(),
                     [exec](const de::BackgroundApp& a) { return exec <= a.deadline; });
}

/// Best epoch time over every shard split and every eligible, memory-feasible
/// batch. Update time depends on the number of selected workers, so splits
/// are grouped by their support. nullopt when nothing is feasible.
inline std::optional<double> brute_force_epoch_time(const de::ClusterSpec& cluster, const de::JobSpec& job,
                                                    const de::EstimatorRegistry& registry) {
  const auto n = cluster.workers.size();
  const std::int64_t m = job.num_samples;
  constexpr double inf = std::numeric_limits<double>::infinity();
  // cost[i][k][d]: best epoch time of worker i holding d samples among k selected.
  std::vector<std::vector<std::vector<double>>> cost(
      n, std::vector<std::vector<double>>(n + 1, std::vector<double>(m + 1, inf)));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& w = cluster.workers[i];
    const auto& bundle = registry.at(w.device_class);
    const auto max_b = oracle_max_batch(bundle, w.initial_state, w.b_min, w.b_max, registry.mem_ceiling());
    for (std::size_t k = 1; k <= n; ++k) {
      for (std::int64_t d = 1; d <= m; ++d) {
        for (std::int64_t b = w.b_min; b <= std::min(max_b, d); ++b) {
          if (!oracle_eligible(w, bundle, b)) continue;
          de::UpdateQuery q;
          q.state = w.initial_state;
          q.own_batch = b;
          q.ps_state = cluster.ps_state;
          q.n_workers = static_cast<std::int64_t>(k);
          const double t = oracle_epoch_time(d, b, bundle.compute_time(w.initial_state, b), bundle.update_time(q));
          cost[i][k][d] = std::min(cost[i][k][d], t);
        }
      }
    }
  }
  double best = inf;
  std::vector<std::int64_t> d(n, 0);
  // Odometer over all compositions of m into n non-negative parts.
  auto recurse = [&](auto&& self, std::size_t i, std::int64_t left) -> void {
    if (i + 1 == n) {
      d[i] = left;
      std::size_t k = 0;
      for (auto x : d) k += x > 0 ? 1 : 0;
      double worst = 0.0;
      for (std::size_t j = 0; j < n && worst < best; ++j) {
        if (d[j] > 0) worst = std::max(worst, cost[j][k][d[j]]);
      }
      best = std::min(best, worst);
      return;
    }
    for (std::int64_t x = 0; x <= left; ++x) {
      d[i] = x;
      self(self, i + 1, left - x);
    }
  };
  recurse(recurse, 0, m);
  if (!std::isfinite(best)) return std::nullopt;
  return best;
}

/// Best epoch time over plans that also satisfy the balance bound
/// max - min of d_i * t_total_i <= max t_total_i among selected workers.
/// Same enumeration as above, with the batch choice kept per worker.
inline std::optional<double> brute_force_balanced_epoch_time(const de::ClusterSpec& cluster,
                                                             const de::JobSpec& job,
                                                             const de::EstimatorRegistry& registry) {
  struct Option {
    double epoch;
    double t_total;
  };
  const auto n = cluster.workers.size();
  const std::int64_t m = job.num_samples;
  // options[i][k][d], sorted by epoch time.
  std::vector<std::vector<std::vector<std::vector<Option>>>> options(
      n, std::vector<std::vector<std::vector<Option>>>(n + 1, std::vector<std::vector<Option>>(m + 1)));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& w = cluster.workers[i];
    const auto& bundle = registry.at(w.device_class);
    const auto max_b = oracle_max_batch(bundle, w.initial_state, w.b_min, w.b_max, registry.mem_ceiling());
    for (std::int64_t b = w.b_min; b <= max_b; ++b) {
      if (!oracle_eligible(w, bundle, b)) continue;
      const double tc = bundle.compute_time(w.initial_state, b);
      for (std::size_t k = 1; k <= n; ++k) {
        de::UpdateQuery q;
        q.state = w.initial_state;
        q.own_batch = b;
        q.ps_state = cluster.ps_state;
        q.n_workers = static_cast<std::int64_t>(k);
        const double tu = bundle.update_time(q);
        for (std::int64_t d = b; d <= m; ++d) {
          options[i][k][d].push_back({oracle_epoch_time(d, b, tc, tu), tc + tu / static_cast<double>(b)});
        }
      }
    }
    for (auto& per_k : options[i]) {
      for (auto& opts : per_k) {
        std::sort(opts.begin(), opts.end(), [](const Option& a, const Option& b) { return a.epoch < b.epoch; });
      }
    }
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  double best = inf;
  std::vector<std::int64_t> d(n, 0);
  std::vector<double> product(n), t_total(n);
  std::size_t k = 0;
  // Picks one batch option per selected worker, pruning on the running max.
  auto pick = [&](auto&& self, std::size_t i, double worst) -> void {
    if (worst >= best) return;
    if (i == n) {
      double lo = inf, hi = 0.0, t_max = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (d[j] == 0) continue;
        lo = std::min(lo, product[j]);
        hi = std::max(hi, product[j]);
        t_max = std::max(t_max, t_total[j]);
      }
      if (hi - lo <= t_max * (1 + 1e-12)) best = worst;
      return;
    }
    if (d[i] == 0) {
      self(self, i + 1, worst);
      return;
    }
    for (const auto& o : options[i][k][d[i]]) {
      if (o.epoch >= best) break;
      product[i] = static_cast<double>(d[i]) * o.t_total;
      t_total[i] = o.t_total;
      self(self, i + 1, std::max(worst, o.epoch));
    }
  };
  auto split = [&](auto&& self, std::size_t i, std::int64_t left) -> void {
    if (i + 1 == n) {
      d[i] = left;
      k = 0;
      for (auto x : d) k += x > 0 ? 1 : 0;
      pick(pick, 0, 0.0);
      return;
    }
    for (std::int64_t x = 0; x <= left; ++x) {
      d[i] = x;
      self(self, i + 1, left - x);
    }
  };
  split(split, 0, m);
  if (!std::isfinite(best)) return std::nullopt;
  return best;
}

/// Random heterogeneous cluster on the built-in profiles. Background apps are
/// added to roughly half the workers with deadlines that sometimes bind.
inline de::ClusterSpec random_cluster(std::mt19937_64& rng, std::size_t n, std::int64_t b_max_hi = 64) {
  std::uniform_real_distribution<double> util(0.0, 0.9);
  std::uniform_real_distribution<double> mem(0.0, 0.6);
  std::uniform_real_distribution<double> deadline(0.12, 0.4);
  std::uniform_int_distribution<std::int64_t> bmax(4, b_max_hi);
  std::bernoulli_distribution coin(0.5);
  std::vector<de::WorkerSpec> ws;
  for (std::size_t i = 0; i < n; ++i) {
    auto w = make_worker("w" + std::to_string(i), coin(rng) ? "tx2" : "nano", {util(rng), util(rng), mem(rng)},
                         bmax(rng));
    if (coin(rng)) w.background_apps.push_back({"app", deadline(rng), ""});
    ws.push_back(std::move(w));
  }
  auto c = make_cluster(std::move(ws));
  c.ps_state = {util(rng), 0.0, mem(rng)};
  return c;
}

}  // namespace testing
