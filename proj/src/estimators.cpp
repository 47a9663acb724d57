#include "deepedge/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace deepedge {

namespace {

// Field table shared by the profile reader, writer and validator.
struct ProfileField {
  const char* name;
  double ParametricProfile::*member;
};

constexpr ProfileField kProfileFields[] = {
    {"base_forward", &ParametricProfile::base_forward},
    {"base_backward", &ParametricProfile::base_backward},
    {"cpu_slope", &ParametricProfile::cpu_slope},
    {"gpu_slope", &ParametricProfile::gpu_slope},
    {"base_push", &ParametricProfile::base_push},
    {"base_pull", &ParametricProfile::base_pull},
    {"ps_update", &ParametricProfile::ps_update},
    {"ps_cpu_slope", &ParametricProfile::ps_cpu_slope},
    {"contention_slope", &ParametricProfile::contention_slope},
    {"batch_overhead", &ParametricProfile::batch_overhead},
    {"mem_per_batch_unit", &ParametricProfile::mem_per_batch_unit},
    {"base_mem_footprint", &ParametricProfile::base_mem_footprint},
    {"cpu_pressure", &ParametricProfile::cpu_pressure},
    {"gpu_pressure", &ParametricProfile::gpu_pressure},
    {"bg_base_exec", &ParametricProfile::bg_base_exec},
    {"bg_cpu_slope", &ParametricProfile::bg_cpu_slope},
    {"bg_gpu_slope", &ParametricProfile::bg_gpu_slope},
    {"bg_mem_slope", &ParametricProfile::bg_mem_slope},
};

// Idle step time at the reference batch is 16*forward + backward:
// 1.89 s on the TX2 and 2.69 s on the Nano.
ParametricProfile make_tx2() {
  ParametricProfile p;
  p.base_forward = 0.085;
  p.base_backward = 0.53;
  p.cpu_slope = 0.45;
  p.gpu_slope = 0.25;
  p.base_push = 0.05;
  p.base_pull = 0.05;
  p.ps_update = 0.08;
  p.ps_cpu_slope = 1.0;
  p.contention_slope = 0.01;
  p.batch_overhead = 0.5;
  p.mem_per_batch_unit = 0.008;
  p.base_mem_footprint = 0.2;
  p.cpu_pressure = 0.25;
  p.gpu_pressure = 0.45;
  p.bg_base_exec = 0.08;
  p.bg_cpu_slope = 0.6;
  p.bg_gpu_slope = 0.3;
  p.bg_mem_slope = 0.2;
  return p;
}

ParametricProfile make_nano() {
  ParametricProfile p;
  p.base_forward = 0.12;
  p.base_backward = 0.77;
  p.cpu_slope = 0.6;
  p.gpu_slope = 0.3;
  p.base_push = 0.07;
  p.base_pull = 0.07;
  p.ps_update = 0.08;
  p.ps_cpu_slope = 1.0;
  p.contention_slope = 0.01;
  p.batch_overhead = 0.5;
  p.mem_per_batch_unit = 0.015;
  p.base_mem_footprint = 0.3;
  p.cpu_pressure = 0.3;
  p.gpu_pressure = 0.5;
  p.bg_base_exec = 0.1;
  p.bg_cpu_slope = 0.6;
  p.bg_gpu_slope = 0.3;
  p.bg_mem_slope = 0.2;
  return p;
}

const std::map<std::string, ParametricProfile, std::less<>>& builtins() {
  static const std::map<std::string, ParametricProfile, std::less<>> table = {
      {"tx2", make_tx2()}, {"nano", make_nano()}};
  return table;
}

void require_batch(std::int64_t b, const char* op) {
  if (b < 1) {
    throw std::invalid_argument(std::string(op) + ": batch size must be >= 1, got " +
                                std::to_string(b));
  }
}

void require_state(const NodeState& s, const char* op) {
  auto v = validate(s, op);
  if (!v.empty()) throw std::invalid_argument(v.front().field + ": " + v.front().message);
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double nonneg(double v) { return std::isfinite(v) ? std::max(0.0, v) : 0.0; }

}  // namespace

std::vector<Violation> validate(const ParametricProfile& p) {
  std::vector<Violation> out;
  for (const auto& f : kProfileFields) {
    if (!std::isfinite(p.*f.member) || p.*f.member < 0.0) {
      out.push_back({f.name, "must be finite and >= 0"});
    }
  }
  if (!(p.base_forward > 0.0)) out.push_back({"base_forward", "must be > 0"});
  if (!(p.base_mem_footprint < 1.0)) out.push_back({"base_mem_footprint", "must be < 1"});
  if (!(p.bg_base_exec > 0.0)) out.push_back({"bg_base_exec", "must be > 0"});
  return out;
}

Json to_json(const ParametricProfile& p) {
  Json obj = Json::object();
  for (const auto& f : kProfileFields) obj[f.name] = p.*f.member;
  return obj;
}

ParametricProfile parse_profile(const Json& obj, const std::string& where) {
  if (obj.is_string()) {
    try {
      return builtin_profile(obj.get<std::string>());
    } catch (const std::out_of_range&) {
      throw ParseError(where + ": unknown built-in profile '" + obj.get<std::string>() + "'");
    }
  }
  if (!obj.is_object()) throw ParseError(where + ": expected an object or built-in name");
  for (const auto& [key, _] : obj.items()) {
    bool known = std::any_of(std::begin(kProfileFields), std::end(kProfileFields),
                             [&](const ProfileField& f) { return key == f.name; });
    if (!known) throw ParseError(where + ": unknown field '" + key + "'");
  }
  ParametricProfile p;
  for (const auto& f : kProfileFields) p.*f.member = detail::read_number(obj, f.name, where);
  auto v = validate(p);
  if (!v.empty()) throw ValidationError(where + "." + v.front().field, v.front().message);
  return p;
}

const ParametricProfile& builtin_profile(std::string_view device_class) {
  auto it = builtins().find(device_class);
  if (it == builtins().end()) {
    throw std::out_of_range("no built-in profile for device class '" + std::string(device_class) +
                            "'");
  }
  return it->second;
}

std::vector<std::string> builtin_device_classes() {
  std::vector<std::string> out;
  for (const auto& [name, _] : builtins()) out.push_back(name);
  return out;
}

// ---------------------------------------------------------------------------
// Fitted models

std::string_view target_name(Target t) {
  switch (t) {
    case Target::ComputeTime: return "compute_time";
    case Target::UpdateTime: return "update_time";
    case Target::StateCpu: return "state_cpu";
    case Target::StateGpu: return "state_gpu";
    case Target::StateMem: return "state_mem";
    case Target::ExecTime: return "exec_time";
  }
  return "unknown";
}

Target parse_target(std::string_view name) {
  for (Target t : kAllTargets) {
    if (target_name(t) == name) return t;
  }
  throw std::invalid_argument("unknown target '" + std::string(name) + "'");
}

const std::vector<std::string>& target_features(Target t) {
  static const std::vector<std::string> compute = {"cpu", "gpu", "batch"};
  static const std::vector<std::string> update = {"cpu", "ps_cpu", "n_workers", "batch"};
  static const std::vector<std::string> state = {"cpu", "gpu", "mem", "batch"};
  static const std::vector<std::string> exec = {"cpu", "gpu", "mem"};
  switch (t) {
    case Target::ComputeTime: return compute;
    case Target::UpdateTime: return update;
    case Target::StateCpu:
    case Target::StateGpu:
    case Target::StateMem: return state;
    case Target::ExecTime: return exec;
  }
  return exec;
}

std::vector<BasisTerm> make_basis(const std::vector<std::string>& features) {
  // Each feature contributes a factor group; batch may appear as itself or
  // as its reciprocal, never both.
  std::vector<std::vector<std::string>> groups;
  for (const auto& f : features) {
    if (f == "batch") {
      groups.push_back({f, "inv_" + f});
    } else {
      groups.push_back({f});
    }
  }
  std::vector<BasisTerm> terms = {{}};
  for (const auto& group : groups) {
    std::vector<BasisTerm> next;
    for (const auto& term : terms) {
      next.push_back(term);
      for (const auto& factor : group) {
        BasisTerm t = term;
        t.push_back(factor);
        next.push_back(std::move(t));
      }
    }
    terms = std::move(next);
  }
  std::stable_sort(terms.begin(), terms.end(),
                   [](const BasisTerm& a, const BasisTerm& b) { return a.size() < b.size(); });
  return terms;
}

std::vector<double> FittedModel::expand(std::span<const double> x) const {
  if (x.size() != features.size()) {
    throw std::invalid_argument("fitted model for " + std::string(target_name(target)) +
                                " expects " + std::to_string(features.size()) + " features");
  }
  auto factor_value = [&](const std::string& factor) {
    bool inverse = factor.rfind("inv_", 0) == 0;
    std::string_view name = inverse ? std::string_view(factor).substr(4) : factor;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (features[i] == name) return inverse ? 1.0 / x[i] : x[i];
    }
    throw std::invalid_argument("basis factor '" + factor + "' names no feature");
  };
  std::vector<double> out;
  out.reserve(terms.size());
  for (const auto& term : terms) {
    double v = 1.0;
    for (const auto& factor : term) v *= factor_value(factor);
    out.push_back(v);
  }
  return out;
}

double FittedModel::predict(std::span<const double> x) const {
  auto phi = expand(x);
  double y = 0.0;
  for (std::size_t i = 0; i < phi.size() && i < coefficients.size(); ++i) y += coefficients[i] * phi[i];
  return y;
}

Json to_json(const FittedModel& m) {
  Json terms = Json::array();
  for (const auto& t : m.terms) terms.push_back(t);
  return {{"target", target_name(m.target)}, {"features", m.features},
          {"terms", terms},                  {"coefficients", m.coefficients},
          {"train_mape", m.train_mape},      {"test_mape", m.test_mape},
          {"train_rows", m.train_rows},      {"test_rows", m.test_rows}};
}

FittedModel parse_fitted_model(const Json& obj, const std::string& where) {
  detail::reject_unknown(obj,
                         {"schema", "target", "features", "terms", "coefficients", "train_mape",
                          "test_mape", "train_rows", "test_rows"},
                         where);
  FittedModel m;
  try {
    m.target = parse_target(detail::read_string(obj, "target", where));
    m.features = obj.at("features").get<std::vector<std::string>>();
    for (const auto& t : obj.at("terms")) m.terms.push_back(t.get<BasisTerm>());
    m.coefficients = obj.at("coefficients").get<std::vector<double>>();
    if (obj.contains("train_mape")) m.train_mape = obj.at("train_mape").get<double>();
    if (obj.contains("test_mape")) m.test_mape = obj.at("test_mape").get<double>();
    if (obj.contains("train_rows")) m.train_rows = obj.at("train_rows").get<std::size_t>();
    if (obj.contains("test_rows")) m.test_rows = obj.at("test_rows").get<std::size_t>();
  } catch (const Json::exception& e) {
    throw ParseError(where + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(where + ": " + e.what());
  }
  if (m.features != target_features(m.target)) {
    throw ParseError(where + ": feature list does not match target " +
                     std::string(target_name(m.target)));
  }
  if (m.terms.size() != m.coefficients.size()) {
    throw ParseError(where + ": terms and coefficients differ in length");
  }
  // Reject unknown factors now rather than at first prediction.
  std::vector<double> probe(m.features.size(), 1.0);
  try {
    (void)m.predict(probe);
  } catch (const std::invalid_argument& e) {
    throw ParseError(where + ": " + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Bundles

EstimatorBundle make_parametric_bundle(std::string device_class, const ParametricProfile& p) {
  EstimatorBundle b;
  b.device_class = std::move(device_class);
  b.compute_time = [p](const NodeState& s, std::int64_t batch) {
    const double load = (1.0 + p.cpu_slope * s.cpu_util) * (1.0 + p.gpu_slope * s.gpu_util);
    return p.base_forward * load + p.base_backward * load / static_cast<double>(batch);
  };
  b.update_time = [p](const UpdateQuery& q) {
    const double network = (p.base_push + p.base_pull) * (1.0 + p.cpu_slope * q.state.cpu_util) *
                           (1.0 + p.batch_overhead / static_cast<double>(q.own_batch));
    const double server = p.ps_update * (1.0 + p.ps_cpu_slope * q.ps_state.cpu_util);
    return network + server + p.contention_slope * static_cast<double>(q.n_workers - 1);
  };
  b.state = [p](const NodeState& s, std::int64_t batch) {
    return NodeState{
        std::min(1.0, s.cpu_util + p.cpu_pressure), std::min(1.0, s.gpu_util + p.gpu_pressure),
        std::min(1.0, s.mem_util + p.base_mem_footprint +
                          p.mem_per_batch_unit * static_cast<double>(batch))};
  };
  b.exec_time = [p](const NodeState& s) {
    return p.bg_base_exec * (1.0 + p.bg_cpu_slope * s.cpu_util + p.bg_gpu_slope * s.gpu_util +
                             p.bg_mem_slope * s.mem_util);
  };
  b.ps_service_time = [p](const NodeState& ps) {
    return p.ps_update * (1.0 + p.ps_cpu_slope * ps.cpu_util);
  };
  return b;
}

EstimatorBundle make_fitted_bundle(std::string device_class, const ParametricProfile& fallback,
                                   const std::map<Target, FittedModel>& models) {
  EstimatorBundle b = make_parametric_bundle(std::move(device_class), fallback);
  auto find = [&](Target t) -> const FittedModel* {
    auto it = models.find(t);
    return it == models.end() ? nullptr : &it->second;
  };
  if (auto* m = find(Target::ComputeTime)) {
    b.compute_time = [m = *m](const NodeState& s, std::int64_t batch) {
      const double x[] = {s.cpu_util, s.gpu_util, static_cast<double>(batch)};
      return nonneg(m.predict(x));
    };
  }
  if (auto* m = find(Target::UpdateTime)) {
    b.update_time = [m = *m](const UpdateQuery& q) {
      const double x[] = {q.state.cpu_util, q.ps_state.cpu_util, static_cast<double>(q.n_workers),
                          static_cast<double>(q.own_batch)};
      return nonneg(m.predict(x));
    };
  }
  // State regressors never report less than the initial utilization.
  const FittedModel* cpu = find(Target::StateCpu);
  const FittedModel* gpu = find(Target::StateGpu);
  const FittedModel* mem = find(Target::StateMem);
  if (cpu || gpu || mem) {
    auto parametric = b.state;
    std::optional<FittedModel> fc, fg, fm;
    if (cpu) fc = *cpu;
    if (gpu) fg = *gpu;
    if (mem) fm = *mem;
    b.state = [parametric, fc, fg, fm](const NodeState& s, std::int64_t batch) {
      NodeState out = parametric(s, batch);
      const double x[] = {s.cpu_util, s.gpu_util, s.mem_util, static_cast<double>(batch)};
      auto eval = [&](const std::optional<FittedModel>& m, double initial, double fallback_value) {
        if (!m) return fallback_value;
        double v = m->predict(x);
        if (!std::isfinite(v)) return fallback_value;
        return clamp01(std::max(initial, v));
      };
      out.cpu_util = eval(fc, s.cpu_util, out.cpu_util);
      out.gpu_util = eval(fg, s.gpu_util, out.gpu_util);
      out.mem_util = eval(fm, s.mem_util, out.mem_util);
      return out;
    };
  }
  if (auto* m = find(Target::ExecTime)) {
    b.exec_time = [m = *m](const NodeState& s) {
      const double x[] = {s.cpu_util, s.gpu_util, s.mem_util};
      return nonneg(m.predict(x));
    };
  }
  return b;
}

double est_compute_time(const EstimatorBundle& bundle, const NodeState& state, std::int64_t b) {
  require_batch(b, "est_compute_time");
  require_state(state, "est_compute_time.state");
  return bundle.compute_time(state, b);
}

double est_update_time(const EstimatorBundle& bundle, const UpdateQuery& q) {
  if (q.n_workers < 1) {
    throw std::invalid_argument("est_update_time: n_workers must be >= 1, got " +
                                std::to_string(q.n_workers));
  }
  require_batch(q.own_batch, "est_update_time");
  require_state(q.state, "est_update_time.state");
  require_state(q.ps_state, "est_update_time.ps_state");
  return bundle.update_time(q);
}

NodeState est_state(const EstimatorBundle& bundle, const NodeState& initial, std::int64_t b) {
  require_batch(b, "est_state");
  require_state(initial, "est_state.initial");
  return bundle.state(initial, b);
}

double est_exec_time(const EstimatorBundle& bundle, const NodeState& new_state) {
  require_state(new_state, "est_exec_time.state");
  return bundle.exec_time(new_state);
}

std::int64_t get_max_batch_size(const EstimatorBundle& bundle, const NodeState& state,
                                BatchBounds bounds, double mem_ceiling) {
  require_state(state, "get_max_batch_size.state");
  if (bounds.b_min < 1 || bounds.b_max < bounds.b_min) {
    throw std::invalid_argument("get_max_batch_size: invalid batch bounds");
  }
  // Tolerance absorbs rounding in sums like 0.3 + 0.2 + 0.45 == 0.95.
  constexpr double kTol = 1e-12;
  for (std::int64_t b = bounds.b_max; b >= bounds.b_min; --b) {
    if (bundle.state(state, b).mem_util <= mem_ceiling + kTol) return b;
  }
  return 0;
}

std::int64_t get_max_batch_size(const EstimatorBundle& bundle, double mem_util,
                                BatchBounds bounds, double mem_ceiling) {
  return get_max_batch_size(bundle, NodeState{0.0, 0.0, mem_util}, bounds, mem_ceiling);
}

// ---------------------------------------------------------------------------
// Registry

void EstimatorRegistry::add(EstimatorBundle bundle, ParametricProfile profile,
                            std::map<Target, FittedModel> fitted) {
  std::string name = bundle.device_class;
  entries_.insert_or_assign(name, Entry{std::move(bundle), profile, std::move(fitted)});
}

bool EstimatorRegistry::contains(const std::string& device_class) const {
  return entries_.count(device_class) != 0;
}

const EstimatorBundle& EstimatorRegistry::at(const std::string& device_class) const {
  auto it = entries_.find(device_class);
  if (it == entries_.end()) {
    throw std::out_of_range("no estimators registered for device class '" + device_class + "'");
  }
  return it->second.bundle;
}

const ParametricProfile& EstimatorRegistry::profile(const std::string& device_class) const {
  auto it = entries_.find(device_class);
  if (it == entries_.end()) {
    throw std::out_of_range("no estimators registered for device class '" + device_class + "'");
  }
  return it->second.profile;
}

void EstimatorRegistry::set_mem_ceiling(double ceiling) {
  if (!(ceiling > 0.0 && ceiling <= 1.0)) {
    throw std::invalid_argument("mem_ceiling must be in (0,1]");
  }
  mem_ceiling_ = ceiling;
}

std::vector<std::string> EstimatorRegistry::device_classes() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

Json EstimatorRegistry::to_json() const {
  Json devices = Json::object();
  for (const auto& [name, e] : entries_) {
    Json entry = {{"profile", deepedge::to_json(e.profile)}};
    if (!e.fitted.empty()) {
      Json fitted = Json::object();
      for (const auto& [t, m] : e.fitted) fitted[std::string(target_name(t))] = deepedge::to_json(m);
      entry["fitted"] = fitted;
    }
    devices[name] = entry;
  }
  return {{"schema", kSchemaVersion}, {"mem_ceiling", mem_ceiling_}, {"devices", devices}};
}

EstimatorRegistry default_registry() {
  EstimatorRegistry r;
  for (const auto& [name, profile] : builtins()) r.add(make_parametric_bundle(name, profile), profile);
  return r;
}

EstimatorRegistry parse_registry(const Json& doc) {
  const std::string where = "registry";
  detail::require_schema(doc, where);
  detail::reject_unknown(doc, {"schema", "mem_ceiling", "devices"}, where);
  EstimatorRegistry r;
  if (doc.contains("mem_ceiling")) {
    double ceiling = detail::read_number(doc, "mem_ceiling", where);
    if (!(ceiling > 0.0 && ceiling <= 1.0)) {
      throw ValidationError("registry.mem_ceiling", "must be in (0,1]");
    }
    r.set_mem_ceiling(ceiling);
  }
  auto it = doc.find("devices");
  if (it == doc.end() || !it->is_object()) throw ParseError("registry.devices: expected an object");
  for (const auto& [name, entry] : it->items()) {
    const std::string ew = "registry.devices." + name;
    detail::reject_unknown(entry, {"profile", "fitted"}, ew);
    if (!entry.contains("profile")) throw ParseError(ew + ": missing field 'profile'");
    ParametricProfile profile = parse_profile(entry.at("profile"), ew + ".profile");
    std::map<Target, FittedModel> fitted;
    if (entry.contains("fitted")) {
      const Json& block = entry.at("fitted");
      if (!block.is_object()) throw ParseError(ew + ".fitted: expected an object");
      for (const auto& [tname, model] : block.items()) {
        Target t;
        try {
          t = parse_target(tname);
        } catch (const std::invalid_argument& e) {
          throw ParseError(ew + ".fitted: " + e.what());
        }
        FittedModel m = parse_fitted_model(model, ew + ".fitted." + tname);
        if (m.target != t) throw ParseError(ew + ".fitted." + tname + ": target mismatch");
        fitted.emplace(t, std::move(m));
      }
    }
    EstimatorBundle bundle = fitted.empty() ? make_parametric_bundle(name, profile)
                                            : make_fitted_bundle(name, profile, fitted);
    r.add(std::move(bundle), profile, std::move(fitted));
  }
  return r;
}

EstimatorRegistry load_registry(const std::filesystem::path& path) {
  return parse_registry(detail::read_file(path));
}

}  // namespace deepedge
