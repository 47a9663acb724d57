#include "deepedge/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace deepedge {

std::string_view to_string(RemovalReason reason) {
  switch (reason) {
    case RemovalReason::Pressure: return "pressure";
    case RemovalReason::SlowestEliminated: return "slowest-eliminated";
    case RemovalReason::BelowMinBatch: return "below-min-batch";
    case RemovalReason::NoMemory: return "no-memory";
    case RemovalReason::Excluded: return "excluded";
  }
  return "unknown";
}

RemovalReason parse_removal_reason(std::string_view name) {
  for (auto r : {RemovalReason::Pressure, RemovalReason::SlowestEliminated,
                 RemovalReason::BelowMinBatch, RemovalReason::NoMemory, RemovalReason::Excluded}) {
    if (to_string(r) == name) return r;
  }
  throw ParseError("unknown removal reason '" + std::string(name) + "'");
}

const WorkerAssignment* ShardingPlan::find(const std::string& id) const {
  for (const auto& w : workers) {
    if (w.id == id) return &w;
  }
  return nullptr;
}

std::int64_t ShardingPlan::total_samples() const {
  std::int64_t sum = 0;
  for (const auto& w : workers) sum += w.shard;
  return sum;
}

std::size_t ShardingPlan::selected_count() const {
  return static_cast<std::size_t>(
      std::count_if(workers.begin(), workers.end(), [](const auto& w) { return w.selected; }));
}

std::vector<std::string> ShardingPlan::selected_ids() const {
  std::vector<std::string> out;
  for (const auto& w : workers) {
    if (w.selected) out.push_back(w.id);
  }
  return out;
}

double epoch_time(std::int64_t d, std::int64_t b, double t_compute, double t_update) {
  if (b < 1) throw std::invalid_argument("epoch_time: batch size must be >= 1");
  if (d < 0) throw std::invalid_argument("epoch_time: shard must be >= 0");
  const std::int64_t steps = (d + b - 1) / b;
  return static_cast<double>(steps) * (static_cast<double>(b) * t_compute + t_update);
}

PressureCheck check_pressure(const WorkerSpec& worker, const EstimatorBundle& bundle, std::int64_t b) {
  PressureCheck out;
  if (b == 0 || worker.background_apps.empty()) return out;
  const NodeState running = est_state(bundle, worker.initial_state, b);
  const double exec = est_exec_time(bundle, running);
  for (const auto& app : worker.background_apps) {
    out.pressures.push_back({app.id, exec, app.deadline});
    if (exec > app.deadline) out.eligible = false;
  }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Largest batch not above min(max_batch, d) that splits d into the fewest
// steps as evenly as possible; never below b_min.
std::int64_t batch_for_shard(double d, std::int64_t max_batch, std::int64_t b_min) {
  if (!std::isfinite(d)) return max_batch;
  const auto shard = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(d)));
  const std::int64_t steps = (shard + max_batch - 1) / max_batch;
  const std::int64_t even = (shard + steps - 1) / steps;
  return std::clamp(even, b_min, max_batch);
}

struct Rates {
  double compute = 0.0;
  double update = 0.0;
  double total = 0.0;
};

// Solver working state over the cluster's workers (indexed in cluster order).
class Solver {
public:
  Solver(const ClusterSpec& cluster, const JobSpec& job, const EstimatorRegistry& registry,
         const SolveOptions& options)
      : cluster_(cluster), job_(job), registry_(registry), n_(cluster.workers.size()),
        active_(n_, true), mem_batch_(n_, 0), max_batch_(n_, 0), batch_(n_, 0), shard_(n_, kInf), rates_(n_) {
    for (std::size_t i = 0; i < n_; ++i) {
      const auto& w = cluster_.workers[i];
      bundles_.push_back(&registry_.at(w.device_class));
      if (options.excluded.count(w.id)) {
        remove(i, RemovalReason::Excluded);
        continue;
      }
      max_batch_[i] = get_max_batch_size(*bundles_[i], w.initial_state, {w.b_min, w.b_max},
                                         registry_.mem_ceiling());
      mem_batch_[i] = max_batch_[i];
      if (max_batch_[i] == 0) {
        remove(i, RemovalReason::NoMemory);
        continue;
      }
      // Pressure grows with the batch through the loaded state, so cap the
      // batch where every deadline still holds.
      while (max_batch_[i] >= w.b_min && !check_pressure(w, *bundles_[i], max_batch_[i]).eligible) {
        --max_batch_[i];
      }
      if (max_batch_[i] < w.b_min) {
        max_batch_[i] = 0;
        remove(i, RemovalReason::Pressure);
      }
    }
  }

  ShardingPlan run() {
    double best_time = kInf;
    std::optional<ShardingPlan> best;
    while (active_count() > 0) {
      inner_loop();
      if (active_count() == 0) break;
      ShardingPlan candidate = finalize();
      if (active_count() == 0) break;
      // Elimination continues past a non-improving step: with ceil-rounded
      // steps and per-worker contention the objective is not unimodal in |W|.
      if (candidate.predicted_epoch_time < best_time) {
        best_time = candidate.predicted_epoch_time;
        best = std::move(candidate);
      }
      remove(slowest(), RemovalReason::SlowestEliminated);
    }
    if (!best) throw InfeasibleError(diagnose());
    best->iterations_used = iterations_;
    best->predicted_total_cost = total_cost(*best, cluster_, job_, registry_).job_total;
    return std::move(*best);
  }

private:
  std::size_t active_count() const {
    return static_cast<std::size_t>(std::count(active_.begin(), active_.end(), true));
  }

  void remove(std::size_t i, RemovalReason reason) {
    active_[i] = false;
    shard_[i] = 0.0;
    batch_[i] = 0;
    rates_[i] = {};
    removed_.push_back({cluster_.workers[i].id, reason});
  }

  std::vector<std::int64_t> batch_distribution() const {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < n_; ++i) {
      if (active_[i]) out.push_back(batch_[i]);
    }
    return out;
  }

  void update_rates() {
    const auto n_active = static_cast<std::int64_t>(active_count());
    const auto dist = batch_distribution();
    for (std::size_t i = 0; i < n_; ++i) {
      if (!active_[i]) continue;
      const auto& w = cluster_.workers[i];
      Rates r;
      r.compute = est_compute_time(*bundles_[i], w.initial_state, batch_[i]);
      UpdateQuery q;
      q.state = w.initial_state;
      q.own_batch = batch_[i];
      q.batch_dist = dist;
      q.ps_state = cluster_.ps_state;
      q.n_workers = n_active;
      r.update = est_update_time(*bundles_[i], q);
      r.total = r.compute + r.update / static_cast<double>(batch_[i]);
      rates_[i] = r;
    }
  }

  // Harmonic proportional shards: equal d_i * t_total_i across active workers.
  std::vector<double> proportional_shards() const {
    double inv_sum = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (active_[i]) inv_sum += 1.0 / rates_[i].total;
    }
    std::vector<double> d(n_, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      if (active_[i]) d[i] = static_cast<double>(job_.num_samples) / (rates_[i].total * inv_sum);
    }
    return d;
  }

  bool pressure_ok(std::size_t i) const {
    return check_pressure(cluster_.workers[i], *bundles_[i], batch_[i]).eligible;
  }

  void inner_loop() {
    std::int64_t iter = 0;
    while (true) {
      const std::vector<double> previous = shard_;
      for (std::size_t i = 0; i < n_; ++i) {
        if (active_[i]) batch_[i] = batch_for_shard(shard_[i], max_batch_[i], cluster_.workers[i].b_min);
      }
      update_rates();
      std::vector<double> next = proportional_shards();
      for (std::size_t i = 0; i < n_; ++i) {
        if (active_[i] && !pressure_ok(i)) {
          remove(i, RemovalReason::Pressure);
          next[i] = 0.0;
        }
      }
      ++iter;
      ++iterations_;
      double norm2 = 0.0;
      for (std::size_t i = 0; i < n_; ++i) {
        const double diff = next[i] - previous[i];
        norm2 += std::isfinite(diff) ? diff * diff : kInf;
      }
      const bool converged = std::sqrt(norm2) <= job_.epsilon || iter >= job_.tau;
      shard_ = std::move(next);
      if (converged || active_count() == 0) break;
    }
  }

  // Floors plus one-by-one remainder to the worker whose product d_i * t_i
  // stays smallest; keeps max - min of the products within max t_i.
  std::vector<std::int64_t> integer_shards() const {
    const auto real = proportional_shards();
    std::vector<std::int64_t> d(n_, 0);
    std::int64_t assigned = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (!active_[i]) continue;
      d[i] = static_cast<std::int64_t>(std::floor(real[i]));
      assigned += d[i];
    }
    for (std::int64_t left = job_.num_samples - assigned; left > 0; --left) {
      std::size_t pick = n_;
      for (std::size_t i = 0; i < n_; ++i) {
        if (!active_[i]) continue;
        if (pick == n_) {
          pick = i;
          continue;
        }
        const double a = static_cast<double>(d[i] + 1) * rates_[i].total;
        const double b = static_cast<double>(d[pick] + 1) * rates_[pick].total;
        if (a < b || (a == b && rates_[i].total < rates_[pick].total)) pick = i;
      }
      ++d[pick];
    }
    return d;
  }

  // Rounds the converged shards to integers and settles batch sizes on them,
  // dropping workers whose shard cannot hold b_min or whose batch change
  // breaks a deadline. Repeats until shards stop moving.
  ShardingPlan finalize() {
    constexpr int kMaxRounds = 50;
    std::vector<std::int64_t> d;
    std::vector<std::int64_t> last;
    std::vector<std::vector<std::int64_t>> visited;
    for (int round = 0; round < kMaxRounds && active_count() > 0; ++round) {
      d = integer_shards();

      std::size_t smallest = n_;
      for (std::size_t i = 0; i < n_; ++i) {
        if (active_[i] && d[i] < cluster_.workers[i].b_min &&
            (smallest == n_ || d[i] < d[smallest])) {
          smallest = i;
        }
      }
      if (smallest != n_) {
        remove(smallest, RemovalReason::BelowMinBatch);
        update_rates();
        last.clear();
        visited.clear();
        continue;
      }

      bool changed = d != last;
      for (std::size_t i = 0; i < n_; ++i) {
        if (!active_[i]) continue;
        const auto b = batch_for_shard(static_cast<double>(d[i]), max_batch_[i],
                                       cluster_.workers[i].b_min);
        changed = changed || b != batch_[i];
        batch_[i] = b;
      }
      bool dropped = false;
      for (std::size_t i = 0; i < n_; ++i) {
        if (active_[i] && !pressure_ok(i)) {
          remove(i, RemovalReason::Pressure);
          dropped = true;
        }
      }
      update_rates();
      if (dropped) {
        last.clear();
        visited.clear();
        continue;
      }
      last = d;
      if (std::find(visited.begin(), visited.end(), batch_) == visited.end()) visited.push_back(batch_);
      if (!changed) break;
    }
    if (active_count() == 0) return {};
    if (visited.empty()) visited.push_back(batch_);

    // Without a fixed point the loop cycles through batch vectors none of
    // which reproduces its own shards; settle from each and keep the best.
    const Working base = save();
    std::optional<Working> best_state;
    ShardingPlan best;
    for (const auto& batches : visited) {
      restore(base);
      batch_ = batches;
      if (!settle(d)) continue;
      polish(d);
      refine_batches(d);
      for (std::size_t i = 0; i < n_; ++i) shard_[i] = static_cast<double>(d[i]);
      ShardingPlan plan = snapshot(d);
      if (!best_state || plan.predicted_epoch_time < best.predicted_epoch_time) {
        best = std::move(plan);
        best_state = save();
      }
    }
    if (!best_state) {
      restore(base);
      for (std::size_t i = 0; i < n_; ++i) {
        if (active_[i]) remove(i, RemovalReason::BelowMinBatch);
      }
      return {};
    }
    restore(*best_state);
    return best;
  }

  struct Working {
    std::vector<bool> active;
    std::vector<std::int64_t> batch;
    std::vector<double> shard;
    std::vector<Rates> rates;
    std::vector<RemovedWorker> removed;
  };

  Working save() const { return {active_, batch_, shard_, rates_, removed_}; }

  void restore(const Working& w) {
    active_ = w.active;
    batch_ = w.batch;
    shard_ = w.shard;
    rates_ = w.rates;
    removed_ = w.removed;
  }

  // Rates depend on batches and the rounding above may stop on an
  // oscillation, so round once more at the current batches. Batches only
  // shrink here (to fit a smaller shard), so this terminates.
  bool settle(std::vector<std::int64_t>& d) {
    while (active_count() > 0) {
      update_rates();
      d = integer_shards();
      std::size_t smallest = n_;
      for (std::size_t i = 0; i < n_; ++i) {
        if (active_[i] && d[i] < cluster_.workers[i].b_min && (smallest == n_ || d[i] < d[smallest])) {
          smallest = i;
        }
      }
      if (smallest != n_) {
        remove(smallest, RemovalReason::BelowMinBatch);
        continue;
      }
      bool changed = false;
      for (std::size_t i = 0; i < n_; ++i) {
        if (!active_[i] || batch_[i] <= d[i]) continue;
        batch_[i] = batch_for_shard(static_cast<double>(d[i]), max_batch_[i], cluster_.workers[i].b_min);
        if (!pressure_ok(i)) remove(i, RemovalReason::Pressure);
        changed = true;
      }
      if (!changed) return true;
    }
    return false;
  }

  double worker_epoch(std::size_t i, std::int64_t d) const {
    return epoch_time(d, batch_[i], rates_[i].compute, rates_[i].update);
  }

  bool balanced(const std::vector<std::int64_t>& d) const {
    double lo = kInf, hi = 0.0, t_max = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (!active_[i]) continue;
      const double p = static_cast<double>(d[i]) * rates_[i].total;
      lo = std::min(lo, p);
      hi = std::max(hi, p);
      t_max = std::max(t_max, rates_[i].total);
    }
    return hi - lo <= t_max * (1.0 + 1e-12);
  }

  struct Objective {
    double worst = kInf;
    double sum = kInf;
    bool better_than(const Objective& o) const {
      constexpr double rel = 1e-12;
      if (worst < o.worst * (1.0 - rel)) return true;
      if (worst > o.worst * (1.0 + rel)) return false;
      return sum < o.sum * (1.0 - rel);
    }
  };

  Objective objective(const std::vector<std::int64_t>& d) const {
    Objective o{0.0, 0.0};
    for (std::size_t i = 0; i < n_; ++i) {
      if (!active_[i]) continue;
      const double e = worker_epoch(i, d[i]);
      o.worst = std::max(o.worst, e);
      o.sum += e;
    }
    return o;
  }

  // Fill the boxes [lo_i, hi_i] up to M samples, lowest epoch growth first.
  std::vector<std::int64_t> fill(std::vector<std::int64_t> d, const std::vector<std::int64_t>& hi) const {
    std::int64_t left = job_.num_samples;
    for (std::size_t i = 0; i < n_; ++i) left -= d[i];
    while (left > 0) {
      std::size_t pick = n_;
      double pick_cost = kInf;
      for (std::size_t i = 0; i < n_; ++i) {
        if (!active_[i] || d[i] >= hi[i]) continue;
        const double c = worker_epoch(i, d[i] + 1) - worker_epoch(i, d[i]);
        if (c < pick_cost) {
          pick = i;
          pick_cost = c;
        }
      }
      // Whole remaining capacity of a worker inside its current step is free.
      const std::int64_t room = std::min(hi[pick] - d[pick], left);
      const std::int64_t in_step = (batch_[pick] - d[pick] % batch_[pick]) % batch_[pick];
      const std::int64_t take = pick_cost == 0.0 ? std::min(room, std::max<std::int64_t>(in_step, 1)) : 1;
      d[pick] += take;
      left -= take;
    }
    return d;
  }

  // Best balanced shard vector for the current batches, whose rates are then
  // fixed. For a bound E on the epoch time each worker gets a box of shard
  // sizes; a balanced vector exists iff some window [L, L + max t] of
  // products meets every box with the right total, and L can be taken at a
  // product d_j * t_j. Smallest feasible E by bisection over step costs.
  std::optional<std::vector<std::int64_t>> exact_shards(std::int64_t& work) const {
    const std::int64_t m = job_.num_samples;
    double t_max = 0.0;
    std::vector<double> step_cost(n_, 0.0), cands;
    for (std::size_t i = 0; i < n_; ++i) {
      if (!active_[i]) continue;
      t_max = std::max(t_max, rates_[i].total);
      step_cost[i] = static_cast<double>(batch_[i]) * rates_[i].compute + rates_[i].update;
      for (std::int64_t s = 1; s <= (m + batch_[i] - 1) / batch_[i]; ++s) {
        cands.push_back(static_cast<double>(s) * step_cost[i]);
      }
    }
    std::sort(cands.begin(), cands.end());
    cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
    const double slack = t_max * (1.0 + 1e-12);

    auto attempt = [&](double e) -> std::optional<std::vector<std::int64_t>> {
      std::vector<std::int64_t> upper(n_, 0);
      for (std::size_t i = 0; i < n_; ++i) {
        if (!active_[i]) continue;
        const auto steps = static_cast<std::int64_t>(std::floor(e / step_cost[i] * (1.0 + 1e-12)));
        upper[i] = std::min(m, steps * batch_[i]);
        if (upper[i] < batch_[i]) return std::nullopt;
      }
      std::vector<std::int64_t> lo(n_, 0), hi(n_, 0);
      for (std::size_t j = 0; j < n_; ++j) {
        if (!active_[j]) continue;
        for (std::int64_t dj = batch_[j]; dj <= upper[j]; ++dj) {
          const double window = static_cast<double>(dj) * rates_[j].total;
          std::int64_t sum_lo = 0, sum_hi = 0;
          bool ok = true;
          for (std::size_t i = 0; i < n_ && ok; ++i) {
            if (!active_[i]) continue;
            const double t = rates_[i].total;
            lo[i] = i == j ? dj : std::max(batch_[i], static_cast<std::int64_t>(std::ceil(window / t)));
            hi[i] = i == j ? dj : std::min(upper[i], static_cast<std::int64_t>(std::floor((window + slack) / t)));
            ok = lo[i] <= hi[i];
            sum_lo += lo[i];
            sum_hi += hi[i];
          }
          work += static_cast<std::int64_t>(n_);
          if (work >= kWorkBudget) return std::nullopt;
          if (!ok || sum_lo > m || sum_hi < m) continue;
          auto d = fill(lo, hi);
          if (balanced(d)) return d;
        }
      }
      return std::nullopt;
    };

    std::size_t a = 0, b = cands.size();
    std::optional<std::vector<std::int64_t>> found;
    while (a < b && work < kWorkBudget) {
      const std::size_t mid = a + (b - a) / 2;
      if (auto d = attempt(cands[mid])) {
        found = std::move(d);
        b = mid;
      } else {
        a = mid + 1;
      }
    }
    // An interrupted bisection has not proven `found` optimal, but it is
    // still balanced and feasible.
    return found;
  }

  // Descent over batch sizes with the shards re-solved exactly at each trial:
  // first one worker's batch at a time, then pairs, since balance often
  // needs two batches to move together. A partial last step costs at most
  // 1/steps of an epoch, so this only runs when workers take few steps; a
  // work budget shared by the whole solve bounds it.
  void refine_batches(std::vector<std::int64_t>& d) {
    constexpr std::int64_t kMaxSteps = 4;
    std::int64_t& work = refine_work_;
    Objective best = objective(d);
    std::vector<std::size_t> ids;
    std::int64_t capacity = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (active_[i]) {
        ids.push_back(i);
        capacity += max_batch_[i];
      }
    }
    if (job_.num_samples > kMaxSteps * capacity) return;
    auto batch_range = [&](std::size_t i) {
      return std::pair{cluster_.workers[i].b_min, max_batch_[i]};
    };
    // Applies `set` to batch_, keeps it if the exact shards improve.
    auto trial = [&](auto&& set) {
      const auto saved_batch = batch_;
      const auto saved_rates = rates_;
      set();
      if (batch_ != saved_batch &&
          std::all_of(ids.begin(), ids.end(), [&](std::size_t i) { return pressure_ok(i); })) {
        update_rates();
        if (auto cand = exact_shards(work)) {
          const Objective o = objective(*cand);
          if (o.better_than(best)) {
            best = o;
            d = std::move(*cand);
            return true;
          }
        }
      }
      batch_ = saved_batch;
      rates_ = saved_rates;
      return false;
    };
    bool improved = true;
    while (improved && work < kWorkBudget) {
      improved = false;
      for (std::size_t i : ids) {
        const auto [lo, hi] = batch_range(i);
        for (std::int64_t b = lo; b <= hi && work < kWorkBudget; ++b) {
          improved = trial([&] { batch_[i] = b; }) || improved;
        }
      }
      if (improved) continue;
      for (std::size_t x = 0; x < ids.size(); ++x) {
        for (std::size_t y = x + 1; y < ids.size(); ++y) {
          const std::size_t i = ids[x], j = ids[y];
          const auto [lo_i, hi_i] = batch_range(i);
          const auto [lo_j, hi_j] = batch_range(j);
          for (std::int64_t bi = lo_i; bi <= hi_i && work < kWorkBudget; ++bi) {
            for (std::int64_t bj = lo_j; bj <= hi_j && work < kWorkBudget; ++bj) {
              improved = trial([&] {
                batch_[i] = bi;
                batch_[j] = bj;
              }) || improved;
            }
          }
        }
      }
    }
  }

  // The harmonic split balances per-sample rates but epochs run in whole
  // steps, which matters on small shards. Greedy descent on (max epoch time,
  // summed epoch time) over two move kinds: re-batch one worker to the even
  // split of its shard, or move one sample between two workers. Every
  // accepted state stays balanced and pressure-feasible.
  void polish(std::vector<std::int64_t>& d) {
    struct Score {
      double worst = 0.0;
      double sum = 0.0;
      bool better_than(const Score& o) const {
        constexpr double rel = 1e-12;
        if (worst < o.worst * (1.0 - rel)) return true;
        if (worst > o.worst * (1.0 + rel)) return false;
        return sum < o.sum * (1.0 - rel);
      }
    };
    auto score = [&](const std::vector<std::int64_t>& shards) {
      Score sc;
      for (std::size_t i = 0; i < n_; ++i) {
        if (!active_[i]) continue;
        const double e = worker_epoch(i, shards[i]);
        sc.worst = std::max(sc.worst, e);
        sc.sum += e;
      }
      return sc;
    };
    const std::int64_t budget = std::min<std::int64_t>(job_.num_samples, 10000) + static_cast<std::int64_t>(n_);
    for (std::int64_t step = 0; step < budget; ++step) {
      const auto saved_batch = batch_;
      const auto saved_rates = rates_;
      Score best = score(d);
      std::vector<std::int64_t> best_d;
      std::vector<std::int64_t> best_batch;
      // `rebatch` re-derives touched batches from their shards; otherwise
      // the caller has already set them in batch_.
      auto consider = [&](const std::vector<std::int64_t>& trial, std::initializer_list<std::size_t> touched,
                          bool rebatch) {
        bool ok = true;
        for (std::size_t i : touched) {
          if (rebatch) {
            batch_[i] = batch_for_shard(static_cast<double>(trial[i]), max_batch_[i], cluster_.workers[i].b_min);
          }
          ok = ok && trial[i] >= cluster_.workers[i].b_min && batch_[i] >= cluster_.workers[i].b_min &&
               batch_[i] <= std::min(trial[i], max_batch_[i]) && pressure_ok(i);
        }
        if (ok) {
          update_rates();
          const Score sc = score(trial);
          if (sc.better_than(best) && balanced(trial)) {
            best = sc;
            best_d = trial;
            best_batch = batch_;
          }
        }
        batch_ = saved_batch;
        rates_ = saved_rates;
      };
      for (std::size_t i = 0; i < n_; ++i) {
        if (!active_[i]) continue;
        if (batch_[i] != batch_for_shard(static_cast<double>(d[i]), max_batch_[i], cluster_.workers[i].b_min)) {
          consider(d, {i}, true);
        }
        // Any feasible batch, not just the even split: a smaller batch can be
        // what brings a worker's product back inside the balance bound.
        const std::int64_t hi = std::min(d[i], max_batch_[i]);
        for (std::int64_t b = cluster_.workers[i].b_min; b <= hi; ++b) {
          if (b == saved_batch[i]) continue;
          batch_[i] = b;
          consider(d, {i}, false);
        }
      }
      for (std::size_t from = 0; from < n_; ++from) {
        if (!active_[from]) continue;
        for (std::size_t to = 0; to < n_; ++to) {
          if (!active_[to] || to == from) continue;
          auto trial = d;
          --trial[from];
          ++trial[to];
          consider(trial, {from, to}, true);
          consider(trial, {from, to}, false);
        }
      }
      if (best_d.empty()) return;
      d = std::move(best_d);
      batch_ = std::move(best_batch);
      update_rates();
    }
  }

  ShardingPlan snapshot(const std::vector<std::int64_t>& d) const {
    ShardingPlan plan;
    double worst = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      WorkerAssignment a;
      a.id = cluster_.workers[i].id;
      if (active_[i] && d[i] > 0) {
        a.selected = true;
        a.shard = d[i];
        a.batch = batch_[i];
        a.t_compute = rates_[i].compute;
        a.t_update = rates_[i].update;
        a.t_total = rates_[i].total;
        worst = std::max(worst, epoch_time(a.shard, a.batch, a.t_compute, a.t_update));
      }
      plan.workers.push_back(std::move(a));
    }
    plan.predicted_epoch_time = worst;
    plan.removed = removed_;
    return plan;
  }

  std::size_t slowest() const {
    std::size_t pick = n_;
    for (std::size_t i = 0; i < n_; ++i) {
      if (active_[i] && (pick == n_ || rates_[i].total > rates_[pick].total)) pick = i;
    }
    return pick;
  }

  std::string diagnose() const {
    std::ostringstream os;
    os << "infeasible: no eligible workers";
    for (std::size_t i = 0; i < n_; ++i) {
      const auto& w = cluster_.workers[i];
      os << "; " << w.id << ":";
      if (options_excluded(w.id)) {
        os << " excluded";
        continue;
      }
      if (mem_batch_[i] == 0) {
        os << " no batch fits in memory";
        continue;
      }
      // Smallest batch gives the least pressure; report that one.
      const auto check = check_pressure(w, *bundles_[i], std::max<std::int64_t>(w.b_min, 1));
      if (check.pressures.empty()) os << " no background apps";
      for (const auto& p : check.pressures) {
        os << " " << p.app_id << " pressure=" << p.pressure << "s deadline=" << p.deadline << "s";
      }
    }
    return os.str();
  }

  const ClusterSpec& cluster_;
  const JobSpec& job_;
  const EstimatorRegistry& registry_;
  std::size_t n_;
  std::vector<const EstimatorBundle*> bundles_;
  std::vector<bool> active_;
  bool options_excluded(const std::string& id) const {
    return std::any_of(removed_.begin(), removed_.end(), [&](const RemovedWorker& r) {
      return r.id == id && r.reason == RemovalReason::Excluded;
    });
  }

  static constexpr std::int64_t kWorkBudget = 20'000'000;
  std::int64_t refine_work_ = 0;
  std::vector<std::int64_t> mem_batch_;  // memory bound before the pressure cap
  std::vector<std::int64_t> max_batch_;
  std::vector<std::int64_t> batch_;
  std::vector<double> shard_;
  std::vector<Rates> rates_;
  std::vector<RemovedWorker> removed_;
  std::int64_t iterations_ = 0;
};

void require_valid(const ClusterSpec& cluster, const JobSpec& job) {
  auto v = validate(cluster, job);
  if (!v.empty()) throw ValidationError(v.front().field, v.front().message);
}

}  // namespace

ShardingPlan solve(const ClusterSpec& cluster, const JobSpec& job, const EstimatorRegistry& registry,
                   const SolveOptions& options) {
  require_valid(cluster, job);
  return Solver(cluster, job, registry, options).run();
}

ShardingPlan evaluate_assignment(const ClusterSpec& cluster, const EstimatorRegistry& registry,
                                 const std::vector<std::int64_t>& shards,
                                 const std::vector<std::int64_t>& batches) {
  if (shards.size() != cluster.workers.size() || batches.size() != cluster.workers.size()) {
    throw std::invalid_argument("evaluate_assignment: one shard and batch per worker required");
  }
  std::vector<std::int64_t> dist;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    if (shards[i] > 0) dist.push_back(batches[i]);
  }
  const auto n_active = static_cast<std::int64_t>(dist.size());
  ShardingPlan plan;
  for (std::size_t i = 0; i < cluster.workers.size(); ++i) {
    const auto& w = cluster.workers[i];
    WorkerAssignment a;
    a.id = w.id;
    if (shards[i] > 0) {
      const auto& bundle = registry.at(w.device_class);
      a.selected = true;
      a.shard = shards[i];
      a.batch = batches[i];
      a.t_compute = est_compute_time(bundle, w.initial_state, a.batch);
      UpdateQuery q;
      q.state = w.initial_state;
      q.own_batch = a.batch;
      q.batch_dist = dist;
      q.ps_state = cluster.ps_state;
      q.n_workers = n_active;
      a.t_update = est_update_time(bundle, q);
      a.t_total = a.t_compute + a.t_update / static_cast<double>(a.batch);
      plan.predicted_epoch_time = std::max(plan.predicted_epoch_time,
                                           epoch_time(a.shard, a.batch, a.t_compute, a.t_update));
    }
    plan.workers.push_back(std::move(a));
  }
  return plan;
}

ShardingPlan fairness_plan(const ClusterSpec& cluster, const JobSpec& job,
                           const EstimatorRegistry& registry) {
  require_valid(cluster, job);
  const auto n = static_cast<std::int64_t>(cluster.workers.size());
  const std::int64_t base = job.num_samples / n;
  const std::int64_t extra = job.num_samples % n;
  std::vector<std::int64_t> shards, batches;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& w = cluster.workers[static_cast<std::size_t>(i)];
    const std::int64_t d = base + (i < extra ? 1 : 0);
    std::int64_t max_b = get_max_batch_size(registry.at(w.device_class), w.initial_state,
                                            {w.b_min, w.b_max}, registry.mem_ceiling());
    if (max_b == 0) max_b = w.b_min;  // memory is ignored by this baseline
    shards.push_back(d);
    batches.push_back(d > 0 ? std::max<std::int64_t>(1, std::min(max_b, d)) : 0);
  }
  ShardingPlan plan = evaluate_assignment(cluster, registry, shards, batches);
  plan.predicted_total_cost = total_cost(plan, cluster, job, registry).job_total;
  return plan;
}

CostBreakdown total_cost(const ShardingPlan& plan, const ClusterSpec& cluster, const JobSpec& job,
                         const EstimatorRegistry& registry) {
  std::vector<std::int64_t> shards, batches;
  for (const auto& w : cluster.workers) {
    const auto* a = plan.find(w.id);
    if (!a) throw std::invalid_argument("total_cost: plan does not cover worker '" + w.id + "'");
    shards.push_back(a->selected ? a->shard : 0);
    batches.push_back(a->selected ? a->batch : 0);
  }
  const ShardingPlan rates = evaluate_assignment(cluster, registry, shards, batches);
  CostBreakdown out;
  for (std::size_t i = 0; i < cluster.workers.size(); ++i) {
    const auto& a = rates.workers[i];
    if (!a.selected) continue;
    const auto& w = cluster.workers[i];
    WorkerCost c;
    c.id = w.id;
    c.transfer = static_cast<double>(a.shard) * w.transfer_cost_from(job.source_store);
    c.init = w.init_cost;
    c.epoch_time = epoch_time(a.shard, a.batch, a.t_compute, a.t_update);
    c.total = c.transfer + c.init + c.epoch_time * static_cast<double>(job.num_epoch);
    out.job_total = std::max(out.job_total, c.total);
    out.workers.push_back(std::move(c));
  }
  return out;
}

std::vector<Violation> validate(const ShardingPlan& plan, const ClusterSpec& cluster,
                                const JobSpec& job) {
  std::vector<Violation> out;
  if (plan.total_samples() != job.num_samples) {
    out.push_back({"shards", "sum " + std::to_string(plan.total_samples()) + " != num_samples " +
                                 std::to_string(job.num_samples)});
  }
  for (const auto& a : plan.workers) {
    const auto* w = cluster.find_worker(a.id);
    if (!w) {
      out.push_back({"workers." + a.id, "unknown worker"});
      continue;
    }
    if (a.selected != (a.shard > 0)) out.push_back({"workers." + a.id, "selected must match shard > 0"});
    if (a.shard < 0 || a.shard > job.num_samples) out.push_back({"workers." + a.id, "shard out of range"});
    if (!a.selected && a.batch != 0) out.push_back({"workers." + a.id, "unselected worker has a batch"});
    if (a.selected && (a.batch < w->b_min || a.batch > std::min(w->b_max, a.shard))) {
      out.push_back({"workers." + a.id, "batch outside [b_min, min(b_max, shard)]"});
    }
  }
  return out;
}

Json to_json(const ShardingPlan& plan) {
  Json workers = Json::array();
  for (const auto& a : plan.workers) {
    workers.push_back({{"id", a.id},
                       {"selected", a.selected},
                       {"shard", a.shard},
                       {"batch", a.batch},
                       {"t_compute", a.t_compute},
                       {"t_update", a.t_update},
                       {"t_total", a.t_total}});
  }
  Json removed = Json::array();
  for (const auto& r : plan.removed) removed.push_back({{"id", r.id}, {"reason", to_string(r.reason)}});
  return {{"schema", kSchemaVersion},
          {"workers", workers},
          {"predicted_epoch_time", plan.predicted_epoch_time},
          {"predicted_total_cost", plan.predicted_total_cost},
          {"iterations_used", plan.iterations_used},
          {"removed", removed}};
}

Json to_json(const CostBreakdown& cost) {
  Json workers = Json::array();
  for (const auto& c : cost.workers) {
    workers.push_back({{"id", c.id},
                       {"transfer", c.transfer},
                       {"init", c.init},
                       {"epoch_time", c.epoch_time},
                       {"total", c.total}});
  }
  return {{"workers", workers}, {"job_total", cost.job_total}};
}

ShardingPlan parse_plan(const Json& doc) {
  const std::string where = "plan";
  detail::require_schema(doc, where);
  detail::reject_unknown(doc,
                         {"schema", "kind", "workers", "predicted_epoch_time", "predicted_total_cost",
                          "iterations_used", "removed", "job", "cost"},
                         where);
  ShardingPlan plan;
  try {
    for (const auto& w : doc.at("workers")) {
      detail::reject_unknown(w, {"id", "selected", "shard", "batch", "t_compute", "t_update", "t_total"},
                             "plan.workers");
      WorkerAssignment a;
      a.id = w.at("id").get<std::string>();
      a.selected = w.at("selected").get<bool>();
      a.shard = w.at("shard").get<std::int64_t>();
      a.batch = w.at("batch").get<std::int64_t>();
      a.t_compute = w.value("t_compute", 0.0);
      a.t_update = w.value("t_update", 0.0);
      a.t_total = w.value("t_total", 0.0);
      plan.workers.push_back(std::move(a));
    }
    plan.predicted_epoch_time = doc.value("predicted_epoch_time", 0.0);
    plan.predicted_total_cost = doc.value("predicted_total_cost", 0.0);
    plan.iterations_used = doc.value("iterations_used", std::int64_t{0});
    if (doc.contains("removed")) {
      for (const auto& r : doc.at("removed")) {
        plan.removed.push_back({r.at("id").get<std::string>(),
                                parse_removal_reason(r.at("reason").get<std::string>())});
      }
    }
  } catch (const Json::exception& e) {
    throw ParseError(where + ": " + e.what());
  }
  return plan;
}

}  // namespace deepedge
