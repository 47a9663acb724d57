#pragma once

// Performance and interference estimators: per-device predictive functions
// for compute time, update time, post-launch node state, background-app
// execution time, and the memory-bounded batch size.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deepedge/cluster_model.hpp"

namespace deepedge {

/// Closed-form device profile. Times are at an idle node; slopes scale them
/// with utilization.
struct ParametricProfile {
  double base_forward = 0.1;         // s/sample
  double base_backward = 0.5;        // s/batch
  double cpu_slope = 0.0;
  double gpu_slope = 0.0;
  double base_push = 0.05;           // s
  double base_pull = 0.05;           // s
  double ps_update = 0.1;            // s
  double ps_cpu_slope = 0.0;
  double contention_slope = 0.0;     // s per extra worker
  double batch_overhead = 0.0;       // push/pull inflation factor numerator, divided by batch
  double mem_per_batch_unit = 0.01;  // mem fraction per sample of batch
  double base_mem_footprint = 0.1;
  double cpu_pressure = 0.0;         // utilization added by the training task
  double gpu_pressure = 0.0;
  double bg_base_exec = 0.1;         // s
  double bg_cpu_slope = 0.0;
  double bg_gpu_slope = 0.0;
  double bg_mem_slope = 0.0;

  bool operator==(const ParametricProfile&) const = default;
};

std::vector<Violation> validate(const ParametricProfile& profile);
Json to_json(const ParametricProfile& profile);
ParametricProfile parse_profile(const Json& obj, const std::string& where);

/// Built-in calibrated profiles ("tx2", "nano"). Throws std::out_of_range.
const ParametricProfile& builtin_profile(std::string_view device_class);
std::vector<std::string> builtin_device_classes();

/// Step reference batch used to calibrate built-in idle step times.
inline constexpr std::int64_t kReferenceBatch = 16;
inline constexpr double kDefaultMemCeiling = 0.95;

// ---------------------------------------------------------------------------
// Fitted regression models (produced by the profiler)

enum class Target { ComputeTime, UpdateTime, StateCpu, StateGpu, StateMem, ExecTime };

inline constexpr Target kAllTargets[] = {Target::ComputeTime, Target::UpdateTime,
                                         Target::StateCpu,    Target::StateGpu,
                                         Target::StateMem,    Target::ExecTime};

std::string_view target_name(Target t);
Target parse_target(std::string_view name);
/// Raw feature names for a target, in the order queries supply them.
const std::vector<std::string>& target_features(Target t);

/// One basis term: product of factors; a factor is a feature name or
/// "inv_<feature>" for its reciprocal.
using BasisTerm = std::vector<std::string>;

/// Multilinear basis over the features, with `batch` and `inv_batch` treated
/// as alternatives in the same factor group (never multiplied together).
std::vector<BasisTerm> make_basis(const std::vector<std::string>& features);

struct FittedModel {
  Target target = Target::ComputeTime;
  std::vector<std::string> features;
  std::vector<BasisTerm> terms;
  std::vector<double> coefficients;
  double train_mape = 0.0;
  double test_mape = 0.0;
  std::size_t train_rows = 0;
  std::size_t test_rows = 0;

  /// Evaluate the term values for a feature vector.
  std::vector<double> expand(std::span<const double> x) const;
  double predict(std::span<const double> x) const;
};

Json to_json(const FittedModel& model);
FittedModel parse_fitted_model(const Json& obj, const std::string& where);

// ---------------------------------------------------------------------------
// Bundles

struct UpdateQuery {
  NodeState state;
  std::int64_t own_batch = 1;
  std::span<const std::int64_t> batch_dist;  // every selected worker, may be empty
  NodeState ps_state;
  std::int64_t n_workers = 1;
};

/// The predictive functions for one device class. Immutable once built.
struct EstimatorBundle {
  std::string device_class;
  std::function<double(const NodeState&, std::int64_t)> compute_time;  // s/sample
  std::function<double(const UpdateQuery&)> update_time;               // s/round
  std::function<NodeState(const NodeState&, std::int64_t)> state;      // post-launch state
  std::function<double(const NodeState&)> exec_time;                   // s
  // PS-resident share of an update round; used by the simulator's FIFO server.
  std::function<double(const NodeState&)> ps_service_time;
};

EstimatorBundle make_parametric_bundle(std::string device_class, const ParametricProfile& profile);

/// Parametric bundle with the given targets replaced by fitted models.
EstimatorBundle make_fitted_bundle(std::string device_class, const ParametricProfile& fallback,
                                   const std::map<Target, FittedModel>& models);

// Checked evaluation. Preconditions throw std::invalid_argument.
double est_compute_time(const EstimatorBundle& bundle, const NodeState& state, std::int64_t b);
double est_update_time(const EstimatorBundle& bundle, const UpdateQuery& query);
NodeState est_state(const EstimatorBundle& bundle, const NodeState& initial, std::int64_t b);
double est_exec_time(const EstimatorBundle& bundle, const NodeState& new_state);

struct BatchBounds {
  std::int64_t b_min = 1;
  std::int64_t b_max = 1;
};

/// Largest batch in [b_min, b_max] whose post-launch memory stays at or below
/// `mem_ceiling`; 0 when even b_min does not fit.
std::int64_t get_max_batch_size(const EstimatorBundle& bundle, const NodeState& state,
                                BatchBounds bounds, double mem_ceiling = kDefaultMemCeiling);
std::int64_t get_max_batch_size(const EstimatorBundle& bundle, double mem_util,
                                BatchBounds bounds, double mem_ceiling = kDefaultMemCeiling);

// ---------------------------------------------------------------------------
// Registry

class EstimatorRegistry {
public:
  EstimatorRegistry() = default;

  void add(EstimatorBundle bundle, ParametricProfile profile,
           std::map<Target, FittedModel> fitted = {});
  bool contains(const std::string& device_class) const;
  /// Throws std::out_of_range naming the missing class.
  const EstimatorBundle& at(const std::string& device_class) const;
  const ParametricProfile& profile(const std::string& device_class) const;

  double mem_ceiling() const noexcept { return mem_ceiling_; }
  void set_mem_ceiling(double ceiling);

  std::vector<std::string> device_classes() const;
  Json to_json() const;

private:
  struct Entry {
    EstimatorBundle bundle;
    ParametricProfile profile;
    std::map<Target, FittedModel> fitted;
  };
  std::map<std::string, Entry> entries_;
  double mem_ceiling_ = kDefaultMemCeiling;
};

/// Registry holding every built-in profile.
EstimatorRegistry default_registry();
EstimatorRegistry parse_registry(const Json& doc);
EstimatorRegistry load_registry(const std::filesystem::path& path);

}  // namespace deepedge
