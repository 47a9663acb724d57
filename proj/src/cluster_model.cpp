#include "deepedge/cluster_model.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace deepedge {

double WorkerSpec::transfer_cost_from(const std::string& store) const {
  auto it = per_sample_transfer_cost.find(store);
  return it == per_sample_transfer_cost.end() ? 0.0 : it->second;
}

const WorkerSpec* ClusterSpec::find_worker(const std::string& id) const {
  for (const auto& w : workers) {
    if (w.id == id) return &w;
  }
  return nullptr;
}

namespace {

bool is_fraction(double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; }

}  // namespace

std::vector<Violation> validate(const NodeState& state, const std::string& prefix) {
  std::vector<Violation> out;
  auto check = [&](double v, const char* name) {
    if (!is_fraction(v)) {
      out.push_back({prefix + "." + name, "must be a finite fraction in [0,1], got " +
                                              std::to_string(v)});
    }
  };
  check(state.cpu_util, "cpu_util");
  check(state.gpu_util, "gpu_util");
  check(state.mem_util, "mem_util");
  return out;
}

std::vector<Violation> validate(const ClusterSpec& cluster) {
  std::vector<Violation> out;
  auto append = [&](std::vector<Violation> more) {
    out.insert(out.end(), more.begin(), more.end());
  };

  if (cluster.workers.empty()) out.push_back({"workers", "at least one worker required"});
  if (cluster.data_stores.empty()) {
    out.push_back({"data_stores", "at least one data store required"});
  }
  std::set<std::string> stores;
  for (const auto& s : cluster.data_stores) {
    if (!stores.insert(s).second) out.push_back({"data_stores", "duplicate store id '" + s + "'"});
  }
  append(validate(cluster.ps_state, "ps_state"));

  std::set<std::string> ids;
  for (std::size_t i = 0; i < cluster.workers.size(); ++i) {
    const auto& w = cluster.workers[i];
    const std::string where = "workers[" + std::to_string(i) + "]";
    if (w.id.empty()) out.push_back({where + ".id", "must be non-empty"});
    if (!ids.insert(w.id).second) out.push_back({where + ".id", "duplicate worker id '" + w.id + "'"});
    if (w.device_class.empty()) out.push_back({where + ".device_class", "must be non-empty"});
    append(validate(w.initial_state, where + ".initial_state"));
    if (w.b_min < 1) out.push_back({where + ".b_min", "must be >= 1"});
    if (w.b_min > w.b_max) out.push_back({where + ".b_max", "b_min must not exceed b_max"});
    if (!(std::isfinite(w.init_cost) && w.init_cost >= 0.0)) {
      out.push_back({where + ".init_cost", "must be finite and >= 0"});
    }
    for (const auto& [store, cost] : w.per_sample_transfer_cost) {
      if (!(std::isfinite(cost) && cost >= 0.0)) {
        out.push_back({where + ".per_sample_transfer_cost." + store, "must be finite and >= 0"});
      }
    }
    for (std::size_t a = 0; a < w.background_apps.size(); ++a) {
      const auto& app = w.background_apps[a];
      const std::string aw = where + ".background_apps[" + std::to_string(a) + "]";
      if (app.id.empty()) out.push_back({aw + ".id", "must be non-empty"});
      if (!(std::isfinite(app.deadline) && app.deadline > 0.0)) {
        out.push_back({aw + ".deadline", "must be > 0"});
      }
    }
  }
  return out;
}

std::vector<Violation> validate(const JobSpec& job) {
  std::vector<Violation> out;
  if (job.num_samples < 1) out.push_back({"num_samples", "must be >= 1"});
  if (job.num_epoch < 1) out.push_back({"num_epoch", "must be >= 1"});
  if (!(std::isfinite(job.epsilon) && job.epsilon > 0.0)) out.push_back({"epsilon", "must be > 0"});
  if (job.tau < 1) out.push_back({"tau", "must be >= 1"});
  if (job.target_accuracy && !is_fraction(*job.target_accuracy)) {
    out.push_back({"target_accuracy", "must be a fraction in [0,1]"});
  }
  return out;
}

std::vector<Violation> validate(const ClusterSpec& cluster, const JobSpec& job) {
  auto out = validate(cluster);
  auto more = validate(job);
  out.insert(out.end(), more.begin(), more.end());
  bool known = false;
  for (const auto& s : cluster.data_stores) known = known || s == job.source_store;
  if (!known) out.push_back({"source_store", "unknown data store '" + job.source_store + "'"});
  return out;
}

// ---------------------------------------------------------------------------
// Document reading

namespace detail {

Json parse_text(std::string_view text, const std::string& what) {
  try {
    return Json::parse(text.begin(), text.end());
  } catch (const Json::exception& e) {
    throw ParseError(what + ": malformed JSON: " + e.what());
  }
}

Json read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path.string());
}

void write_file(const std::filesystem::path& path, const Json& doc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << doc.dump(2) << "\n";
}

void require_schema(const Json& doc, const std::string& what) {
  if (!doc.is_object()) throw ParseError(what + ": document must be a JSON object");
  auto it = doc.find("schema");
  if (it == doc.end()) throw ParseError(what + ": missing \"schema\" field");
  if (!it->is_number_integer() || it->get<std::int64_t>() != kSchemaVersion) {
    throw ParseError(what + ": unsupported schema version " + it->dump());
  }
}

void reject_unknown(const Json& obj, std::initializer_list<std::string_view> allowed,
                    const std::string& where) {
  if (!obj.is_object()) throw ParseError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ParseError(where + ": unknown field '" + key + "'");
  }
}

const Json& require(const Json& obj, const std::string& key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(where + ": missing field '" + key + "'");
  return *it;
}

double read_number(const Json& obj, const std::string& key, const std::string& where) {
  const Json& v = require(obj, key, where);
  if (!v.is_number()) throw ParseError(where + "." + key + ": expected a number");
  return v.get<double>();
}

std::int64_t read_integer(const Json& obj, const std::string& key, const std::string& where) {
  const Json& v = require(obj, key, where);
  if (!v.is_number_integer()) throw ParseError(where + "." + key + ": expected an integer");
  return v.get<std::int64_t>();
}

std::string read_string(const Json& obj, const std::string& key, const std::string& where) {
  const Json& v = require(obj, key, where);
  if (!v.is_string()) throw ParseError(where + "." + key + ": expected a string");
  return v.get<std::string>();
}

double read_utilization(const Json& obj, const std::string& key, const std::string& where) {
  const Json& v = require(obj, key, where);
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    std::string s = v.get<std::string>();
    if (!s.empty() && s.back() == '%') {
      s.pop_back();
      try {
        std::size_t used = 0;
        double pct = std::stod(s, &used);
        if (used == s.size()) return pct / 100.0;
      } catch (const std::exception&) {
      }
    }
    throw ParseError(where + "." + key + ": percentage must look like \"88%\", got \"" +
                     v.get<std::string>() + "\"");
  }
  throw ParseError(where + "." + key + ": expected a fraction or percentage string");
}

NodeState parse_node_state(const Json& obj, const std::string& where) {
  reject_unknown(obj, {"cpu_util", "gpu_util", "mem_util"}, where);
  return {read_utilization(obj, "cpu_util", where), read_utilization(obj, "gpu_util", where),
          read_utilization(obj, "mem_util", where)};
}

}  // namespace detail

namespace {

using namespace detail;

void throw_first(const std::vector<Violation>& violations) {
  if (!violations.empty()) {
    throw ValidationError(violations.front().field, violations.front().message);
  }
}

WorkerSpec parse_worker(const Json& obj, const std::string& where) {
  reject_unknown(obj,
                 {"id", "device_class", "initial_state", "background_apps", "b_min", "b_max",
                  "init_cost", "per_sample_transfer_cost"},
                 where);
  WorkerSpec w;
  w.id = read_string(obj, "id", where);
  w.device_class = read_string(obj, "device_class", where);
  w.initial_state = parse_node_state(require(obj, "initial_state", where), where + ".initial_state");
  w.b_min = read_integer(obj, "b_min", where);
  w.b_max = read_integer(obj, "b_max", where);
  if (obj.contains("init_cost")) w.init_cost = read_number(obj, "init_cost", where);
  if (obj.contains("background_apps")) {
    const Json& apps = obj.at("background_apps");
    if (!apps.is_array()) throw ParseError(where + ".background_apps: expected an array");
    for (std::size_t i = 0; i < apps.size(); ++i) {
      const std::string aw = where + ".background_apps[" + std::to_string(i) + "]";
      reject_unknown(apps[i], {"id", "deadline", "description"}, aw);
      BackgroundApp app;
      app.id = read_string(apps[i], "id", aw);
      app.deadline = read_number(apps[i], "deadline", aw);
      if (apps[i].contains("description")) app.description = read_string(apps[i], "description", aw);
      w.background_apps.push_back(std::move(app));
    }
  }
  if (obj.contains("per_sample_transfer_cost")) {
    const Json& costs = obj.at("per_sample_transfer_cost");
    if (!costs.is_object()) {
      throw ParseError(where + ".per_sample_transfer_cost: expected an object");
    }
    for (const auto& [store, _] : costs.items()) {
      w.per_sample_transfer_cost[store] =
          read_number(costs, store, where + ".per_sample_transfer_cost");
    }
  }
  return w;
}

}  // namespace

ClusterSpec parse_cluster(const Json& doc) {
  const std::string where = "cluster";
  require_schema(doc, where);
  reject_unknown(doc, {"schema", "workers", "ps_state", "data_stores"}, where);
  ClusterSpec c;
  const Json& workers = require(doc, "workers", where);
  if (!workers.is_array()) throw ParseError("cluster.workers: expected an array");
  for (std::size_t i = 0; i < workers.size(); ++i) {
    c.workers.push_back(parse_worker(workers[i], "workers[" + std::to_string(i) + "]"));
  }
  c.ps_state = parse_node_state(require(doc, "ps_state", where), "ps_state");
  const Json& stores = require(doc, "data_stores", where);
  if (!stores.is_array()) throw ParseError("cluster.data_stores: expected an array");
  for (const auto& s : stores) {
    if (!s.is_string()) throw ParseError("cluster.data_stores: expected strings");
    c.data_stores.push_back(s.get<std::string>());
  }
  throw_first(validate(c));
  return c;
}

JobSpec parse_job(const Json& doc) {
  const std::string where = "job";
  require_schema(doc, where);
  reject_unknown(doc,
                 {"schema", "num_samples", "num_epoch", "source_store", "target_accuracy",
                  "epsilon", "tau"},
                 where);
  JobSpec j;
  j.num_samples = read_integer(doc, "num_samples", where);
  j.num_epoch = read_integer(doc, "num_epoch", where);
  j.source_store = read_string(doc, "source_store", where);
  if (doc.contains("target_accuracy") && !doc.at("target_accuracy").is_null()) {
    j.target_accuracy = read_utilization(doc, "target_accuracy", where);
  }
  if (doc.contains("epsilon")) j.epsilon = read_number(doc, "epsilon", where);
  if (doc.contains("tau")) j.tau = read_integer(doc, "tau", where);
  throw_first(validate(j));
  return j;
}

ClusterSpec parse_cluster_text(std::string_view text) {
  return parse_cluster(parse_text(text, "cluster"));
}

JobSpec parse_job_text(std::string_view text) { return parse_job(parse_text(text, "job")); }

ClusterSpec load_cluster(const std::filesystem::path& path) { return parse_cluster(read_file(path)); }

JobSpec load_job(const std::filesystem::path& path) { return parse_job(read_file(path)); }

// ---------------------------------------------------------------------------
// Document writing

Json to_json(const NodeState& s) {
  return {{"cpu_util", s.cpu_util}, {"gpu_util", s.gpu_util}, {"mem_util", s.mem_util}};
}

Json to_json(const ClusterSpec& c) {
  Json workers = Json::array();
  for (const auto& w : c.workers) {
    Json apps = Json::array();
    for (const auto& a : w.background_apps) {
      apps.push_back({{"id", a.id}, {"deadline", a.deadline}, {"description", a.description}});
    }
    Json costs = Json::object();
    for (const auto& [store, cost] : w.per_sample_transfer_cost) costs[store] = cost;
    workers.push_back({{"id", w.id},
                       {"device_class", w.device_class},
                       {"initial_state", to_json(w.initial_state)},
                       {"background_apps", apps},
                       {"b_min", w.b_min},
                       {"b_max", w.b_max},
                       {"init_cost", w.init_cost},
                       {"per_sample_transfer_cost", costs}});
  }
  return {{"schema", kSchemaVersion},
          {"workers", workers},
          {"ps_state", to_json(c.ps_state)},
          {"data_stores", c.data_stores}};
}

Json to_json(const JobSpec& j) {
  Json doc = {{"schema", kSchemaVersion},
              {"num_samples", j.num_samples},
              {"num_epoch", j.num_epoch},
              {"source_store", j.source_store},
              {"epsilon", j.epsilon},
              {"tau", j.tau}};
  if (j.target_accuracy) doc["target_accuracy"] = *j.target_accuracy;
  return doc;
}

void save_cluster(const ClusterSpec& cluster, const std::filesystem::path& path) {
  write_file(path, to_json(cluster));
}

}  // namespace deepedge
