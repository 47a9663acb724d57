#pragma once

// Synthetic profiler: stress-grid sweeps against an oracle bundle, CSV
// datasets, fixed-basis least-squares fits and MAPE reporting.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepedge/estimators.hpp"

namespace deepedge {

class FitError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct GridPoint {
  double cpu = 0.0;
  double gpu = 0.0;
  double mem = 0.0;
  std::int64_t batch = 1;
  double ps_cpu = 0.0;
  std::int64_t n_workers = 1;
};

struct SweepPlan {
  std::string device_class;
  Target target = Target::ComputeTime;
  std::vector<GridPoint> grid;
  std::int64_t repetitions = 1;
  double noise_std = 0.0;  // relative
};

std::vector<Violation> validate(const SweepPlan& plan);

struct ProfileDataset {
  Target target = Target::ComputeTime;
  std::vector<std::string> feature_names;
  std::vector<std::vector<double>> features;
  std::vector<double> targets;

  std::size_t size() const noexcept { return targets.size(); }
};

/// Number of noisy draws reduced to a 95th-percentile observation for the
/// state targets.
inline constexpr int kStateDraws = 20;

/// |grid| * repetitions rows in grid order; deterministic for a given seed.
ProfileDataset run_sweep(const SweepPlan& plan, const EstimatorBundle& oracle, std::uint64_t seed);

/// Train/test split at `split_fraction` by seeded shuffle, then least squares
/// over make_basis(features) with a ridge fallback on rank deficiency.
FittedModel fit(const ProfileDataset& dataset, double split_fraction, std::uint64_t seed);

/// Mean absolute percentage error, in percent.
double mape(std::span<const double> predictions, std::span<const double> truth);

/// Points drawn uniformly from the region where the profile's state model does
/// not saturate, batch in [1, b_max].
std::vector<GridPoint> make_grid(Target target, const ParametricProfile& profile,
                                 std::size_t points, std::int64_t b_max, std::uint64_t seed);

void write_dataset_csv(const ProfileDataset& dataset, std::ostream& out);
ProfileDataset read_dataset_csv(std::istream& in);
void write_grid_csv(const std::vector<GridPoint>& grid, std::ostream& out);
std::vector<GridPoint> read_grid_csv(std::istream& in);

void save_dataset(const ProfileDataset& dataset, const std::filesystem::path& path);
ProfileDataset load_dataset(const std::filesystem::path& path);
std::vector<GridPoint> load_grid(const std::filesystem::path& path);

}  // namespace deepedge
