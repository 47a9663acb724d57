#include "deepedge/profiler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Dense>

namespace deepedge {

std::vector<Violation> validate(const SweepPlan& plan) {
  std::vector<Violation> out;
  if (plan.grid.empty()) out.push_back({"grid", "must be non-empty"});
  if (plan.repetitions < 1) out.push_back({"repetitions", "must be >= 1"});
  if (!(std::isfinite(plan.noise_std) && plan.noise_std >= 0.0)) {
    out.push_back({"noise_std", "must be >= 0"});
  }
  for (std::size_t i = 0; i < plan.grid.size(); ++i) {
    const auto& g = plan.grid[i];
    const std::string where = "grid[" + std::to_string(i) + "]";
    auto v = validate(NodeState{g.cpu, g.gpu, g.mem}, where);
    out.insert(out.end(), v.begin(), v.end());
    if (g.batch < 1) out.push_back({where + ".batch", "must be >= 1"});
    if (g.n_workers < 1) out.push_back({where + ".n_workers", "must be >= 1"});
    if (!(g.ps_cpu >= 0.0 && g.ps_cpu <= 1.0)) out.push_back({where + ".ps_cpu", "must be in [0,1]"});
  }
  return out;
}

namespace {

std::vector<double> feature_vector(Target t, const GridPoint& g) {
  const double b = static_cast<double>(g.batch);
  switch (t) {
    case Target::ComputeTime: return {g.cpu, g.gpu, b};
    case Target::UpdateTime: return {g.cpu, g.ps_cpu, static_cast<double>(g.n_workers), b};
    case Target::StateCpu:
    case Target::StateGpu:
    case Target::StateMem: return {g.cpu, g.gpu, g.mem, b};
    case Target::ExecTime: return {g.cpu, g.gpu, g.mem};
  }
  return {};
}

double oracle_value(Target t, const EstimatorBundle& oracle, const GridPoint& g) {
  const NodeState s{g.cpu, g.gpu, g.mem};
  switch (t) {
    case Target::ComputeTime: return oracle.compute_time(s, g.batch);
    case Target::UpdateTime: {
      UpdateQuery q;
      q.state = s;
      q.own_batch = g.batch;
      q.ps_state = NodeState{g.ps_cpu, 0.0, 0.0};
      q.n_workers = g.n_workers;
      return oracle.update_time(q);
    }
    case Target::StateCpu: return oracle.state(s, g.batch).cpu_util;
    case Target::StateGpu: return oracle.state(s, g.batch).gpu_util;
    case Target::StateMem: return oracle.state(s, g.batch).mem_util;
    case Target::ExecTime: return oracle.exec_time(s);
  }
  return 0.0;
}

bool is_state_target(Target t) {
  return t == Target::StateCpu || t == Target::StateGpu || t == Target::StateMem;
}

// Per-row generator so the observation at a grid index does not depend on
// the order rows are produced in.
std::mt19937_64 row_rng(std::uint64_t seed, std::uint64_t row) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(row), static_cast<std::uint32_t>(row >> 32)};
  return std::mt19937_64(seq);
}

double percentile95(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  // Linear interpolation between closest ranks.
  const double pos = 0.95 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

}  // namespace

ProfileDataset run_sweep(const SweepPlan& plan, const EstimatorBundle& oracle, std::uint64_t seed) {
  auto violations = validate(plan);
  if (!violations.empty()) {
    throw ValidationError("sweep." + violations.front().field, violations.front().message);
  }
  ProfileDataset ds;
  ds.target = plan.target;
  ds.feature_names = target_features(plan.target);
  const auto reps = static_cast<std::size_t>(plan.repetitions);
  ds.features.reserve(plan.grid.size() * reps);
  ds.targets.reserve(plan.grid.size() * reps);

  for (std::size_t i = 0; i < plan.grid.size(); ++i) {
    const GridPoint& g = plan.grid[i];
    const double truth = oracle_value(plan.target, oracle, g);
    for (std::size_t r = 0; r < reps; ++r) {
      auto rng = row_rng(seed, i * reps + r);
      std::normal_distribution<double> noise(0.0, plan.noise_std);
      auto noisy = [&] {
        return plan.noise_std == 0.0 ? truth : truth * std::max(0.1, 1.0 + noise(rng));
      };
      double observed;
      if (is_state_target(plan.target)) {
        std::vector<double> draws(kStateDraws);
        for (auto& d : draws) d = noisy();
        observed = percentile95(std::move(draws));
      } else {
        observed = noisy();
      }
      ds.features.push_back(feature_vector(plan.target, g));
      ds.targets.push_back(observed);
    }
  }
  return ds;
}

double mape(std::span<const double> predictions, std::span<const double> truth) {
  if (predictions.size() != truth.size()) throw std::invalid_argument("mape: length mismatch");
  if (truth.empty()) throw std::invalid_argument("mape: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!(truth[i] > 0.0)) {
      throw std::invalid_argument("mape: truth values must be > 0 (index " + std::to_string(i) +
                                  ")");
    }
    sum += std::abs(predictions[i] - truth[i]) / truth[i];
  }
  return 100.0 * sum / static_cast<double>(truth.size());
}

FittedModel fit(const ProfileDataset& ds, double split_fraction, std::uint64_t seed) {
  const std::string tname(target_name(ds.target));
  if (ds.feature_names != target_features(ds.target)) {
    throw FitError("fit " + tname + ": dataset features do not match the target");
  }
  for (const auto& row : ds.features) {
    if (row.size() != ds.feature_names.size()) throw FitError("fit " + tname + ": ragged rows");
  }
  if (ds.features.size() != ds.targets.size()) throw FitError("fit " + tname + ": row count mismatch");
  if (!(split_fraction > 0.0 && split_fraction <= 1.0)) {
    throw FitError("fit " + tname + ": split fraction must be in (0,1]");
  }

  FittedModel model;
  model.target = ds.target;
  model.features = ds.feature_names;
  model.terms = make_basis(model.features);
  const std::size_t cols = model.terms.size();

  if (ds.size() < 2 * cols) {
    throw FitError("fit " + tname + ": insufficient rows (" + std::to_string(ds.size()) +
                   " < " + std::to_string(2 * cols) + ")");
  }
  auto [lo, hi] = std::minmax_element(ds.targets.begin(), ds.targets.end());
  if (!std::isfinite(*lo) || !std::isfinite(*hi)) throw FitError("fit " + tname + ": non-finite target");
  if (*hi - *lo <= 1e-12 * std::max(1.0, std::abs(*hi))) {
    throw FitError("fit " + tname + ": degenerate (constant) target");
  }

  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_train = static_cast<std::size_t>(std::llround(split_fraction * static_cast<double>(ds.size())));
  n_train = std::clamp<std::size_t>(n_train, cols, ds.size());

  Eigen::MatrixXd a(static_cast<Eigen::Index>(n_train), static_cast<Eigen::Index>(cols));
  Eigen::VectorXd y(static_cast<Eigen::Index>(n_train));
  for (std::size_t r = 0; r < n_train; ++r) {
    auto phi = model.expand(ds.features[order[r]]);
    for (std::size_t c = 0; c < cols; ++c) a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = phi[c];
    y(static_cast<Eigen::Index>(r)) = ds.targets[order[r]];
  }

  // Column scaling keeps the rank decision meaningful across feature units.
  Eigen::VectorXd scale = a.colwise().norm().transpose();
  for (Eigen::Index c = 0; c < scale.size(); ++c) {
    if (scale(c) == 0.0) scale(c) = 1.0;
  }
  Eigen::MatrixXd as = a * scale.cwiseInverse().asDiagonal();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(as);
  qr.setThreshold(1e-10);
  Eigen::VectorXd coef_scaled;
  if (qr.rank() == static_cast<Eigen::Index>(cols)) {
    coef_scaled = qr.solve(y);
  } else {
    const double lambda = 1e-8 * static_cast<double>(n_train);
    Eigen::MatrixXd normal = as.transpose() * as;
    normal.diagonal().array() += lambda;
    coef_scaled = normal.ldlt().solve(as.transpose() * y);
  }
  Eigen::VectorXd coef = coef_scaled.cwiseQuotient(scale);
  model.coefficients.assign(coef.data(), coef.data() + coef.size());

  auto score = [&](std::size_t begin, std::size_t end) {
    std::vector<double> pred, truth;
    for (std::size_t r = begin; r < end; ++r) {
      truth.push_back(ds.targets[order[r]]);
      pred.push_back(model.predict(ds.features[order[r]]));
    }
    return pred.empty() ? 0.0 : mape(pred, truth);
  };
  model.train_rows = n_train;
  model.test_rows = ds.size() - n_train;
  model.train_mape = score(0, n_train);
  model.test_mape = model.test_rows == 0 ? model.train_mape : score(n_train, ds.size());
  return model;
}

std::vector<GridPoint> make_grid(Target target, const ParametricProfile& p, std::size_t points,
                                 std::int64_t b_max, std::uint64_t seed) {
  if (b_max < 1) throw std::invalid_argument("make_grid: b_max must be >= 1");
  std::mt19937_64 rng(seed);
  // Stay below the saturation clamp of the state model.
  const double cpu_hi = std::max(0.05, std::min(0.95, 1.0 - p.cpu_pressure));
  const double gpu_hi = std::max(0.05, std::min(0.95, 1.0 - p.gpu_pressure));
  const double room = 1.0 - p.base_mem_footprint;
  std::int64_t batch_hi = b_max;
  if (p.mem_per_batch_unit > 0.0) {
    batch_hi = std::clamp<std::int64_t>(
        static_cast<std::int64_t>(std::floor(0.8 * room / p.mem_per_batch_unit)), 1, b_max);
  }
  std::uniform_real_distribution<double> cpu(0.0, cpu_hi), gpu(0.0, gpu_hi), ps(0.0, 0.9);
  std::uniform_int_distribution<std::int64_t> batch(1, batch_hi), workers(1, 8);
  std::vector<GridPoint> grid;
  grid.reserve(points);
  for (std::size_t i = 0; i < points; ++i) {
    GridPoint g;
    g.cpu = cpu(rng);
    g.gpu = gpu(rng);
    g.batch = batch(rng);
    const double mem_room = room - p.mem_per_batch_unit * static_cast<double>(g.batch);
    std::uniform_real_distribution<double> mem(0.0, std::max(0.0, std::min(0.9, mem_room)));
    g.mem = mem(rng);
    g.ps_cpu = ps(rng);
    g.n_workers = workers(rng);
    grid.push_back(g);
  }
  (void)target;
  return grid;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_cell(const std::string& cell, std::size_t line_no) {
  try {
    std::size_t used = 0;
    double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line_no) + ": bad number '" + cell + "'");
  }
}

}  // namespace

void write_dataset_csv(const ProfileDataset& ds, std::ostream& out) {
  for (const auto& f : ds.feature_names) out << f << ',';
  out << target_name(ds.target) << '\n';
  out.precision(17);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (double v : ds.features[r]) out << v << ',';
    out << ds.targets[r] << '\n';
  }
}

ProfileDataset read_dataset_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("dataset: missing header row");
  auto header = split_csv_line(line);
  if (header.size() < 2) throw ParseError("dataset: header needs features and a target");
  ProfileDataset ds;
  try {
    ds.target = parse_target(header.back());
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("dataset: ") + e.what());
  }
  ds.feature_names.assign(header.begin(), header.end() - 1);
  if (ds.feature_names != target_features(ds.target)) {
    throw ParseError("dataset: feature columns do not match target " +
                     std::string(target_name(ds.target)));
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " columns");
    }
    std::vector<double> row;
    for (std::size_t c = 0; c + 1 < cells.size(); ++c) row.push_back(parse_cell(cells[c], line_no));
    double y = parse_cell(cells.back(), line_no);
    if (!std::isfinite(y)) throw ParseError("dataset line " + std::to_string(line_no) + ": non-finite target");
    ds.features.push_back(std::move(row));
    ds.targets.push_back(y);
  }
  return ds;
}

void write_grid_csv(const std::vector<GridPoint>& grid, std::ostream& out) {
  out << "cpu,gpu,mem,batch,ps_cpu,n_workers\n";
  out.precision(17);
  for (const auto& g : grid) {
    out << g.cpu << ',' << g.gpu << ',' << g.mem << ',' << g.batch << ',' << g.ps_cpu << ','
        << g.n_workers << '\n';
  }
}

std::vector<GridPoint> read_grid_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("grid: missing header row");
  auto header = split_csv_line(line);
  auto column = [&](const std::string& name) -> std::ptrdiff_t {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  for (const auto& h : header) {
    if (h != "cpu" && h != "gpu" && h != "mem" && h != "batch" && h != "ps_cpu" && h != "n_workers") {
      throw ParseError("grid: unknown column '" + h + "'");
    }
  }
  const auto cpu = column("cpu"), gpu = column("gpu"), mem = column("mem"), batch = column("batch");
  const auto ps = column("ps_cpu"), workers = column("n_workers");
  if (cpu < 0 || gpu < 0 || mem < 0 || batch < 0) {
    throw ParseError("grid: columns cpu, gpu, mem and batch are required");
  }
  std::vector<GridPoint> grid;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ParseError("grid line " + std::to_string(line_no) + ": column count mismatch");
    }
    auto at = [&](std::ptrdiff_t c) { return parse_cell(cells[static_cast<std::size_t>(c)], line_no); };
    GridPoint g;
    g.cpu = at(cpu);
    g.gpu = at(gpu);
    g.mem = at(mem);
    g.batch = static_cast<std::int64_t>(std::llround(at(batch)));
    if (ps >= 0) g.ps_cpu = at(ps);
    if (workers >= 0) g.n_workers = static_cast<std::int64_t>(std::llround(at(workers)));
    grid.push_back(g);
  }
  return grid;
}

void save_dataset(const ProfileDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  write_dataset_csv(dataset, out);
}

ProfileDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  return read_dataset_csv(in);
}

std::vector<GridPoint> load_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  return read_grid_csv(in);
}

}  // namespace deepedge
