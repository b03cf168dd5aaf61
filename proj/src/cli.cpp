#include "dgp/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace dgp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char kSchemaText[] =
#include "config_schema.inc"
    ;

std::string pointer_child(const std::string& ptr, const std::string& key) {
  std::string escaped;
  for (char c : key) {
    if (c == '~') escaped += "~0";
    else if (c == '/') escaped += "~1";
    else escaped += c;
  }
  return ptr + "/" + escaped;
}

std::string where(const std::string& ptr) { return ptr.empty() ? std::string("/") : ptr; }

void check_node(json& v, const json& s, const std::string& ptr) {
  if (s.contains("type")) {
    const std::string type = s["type"];
    bool ok = false;
    if (type == "object") ok = v.is_object();
    else if (type == "array") ok = v.is_array();
    else if (type == "string") ok = v.is_string();
    else if (type == "boolean") ok = v.is_boolean();
    else if (type == "number") ok = v.is_number();
    else if (type == "integer") {
      if (v.is_number_integer()) {
        ok = true;
      } else if (v.is_number_float()) {
        const double d = v.get<double>();
        if (std::isfinite(d) && d == std::floor(d) && std::abs(d) < 9.0e15) {
          v = static_cast<std::int64_t>(d);
          ok = true;
        }
      }
    }
    if (!ok) throw ConfigError("config " + where(ptr) + ": expected " + type);
  }
  if (s.contains("enum")) {
    const auto& options = s["enum"];
    if (std::find(options.begin(), options.end(), v) == options.end()) {
      throw ConfigError("config " + where(ptr) + ": value " + v.dump() + " is not one of " + options.dump());
    }
  }
  if (v.is_number()) {
    const double d = v.get<double>();
    if (s.contains("minimum") && d < s["minimum"].get<double>()) {
      throw ConfigError("config " + where(ptr) + ": must be >= " + s["minimum"].dump());
    }
    if (s.contains("maximum") && d > s["maximum"].get<double>()) {
      throw ConfigError("config " + where(ptr) + ": must be <= " + s["maximum"].dump());
    }
    if (s.contains("exclusiveMinimum") && d <= s["exclusiveMinimum"].get<double>()) {
      throw ConfigError("config " + where(ptr) + ": must be > " + s["exclusiveMinimum"].dump());
    }
    if (s.contains("exclusiveMaximum") && d >= s["exclusiveMaximum"].get<double>()) {
      throw ConfigError("config " + where(ptr) + ": must be < " + s["exclusiveMaximum"].dump());
    }
  }
  if (v.is_array()) {
    if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) {
      throw ConfigError("config " + where(ptr) + ": needs at least " + s["minItems"].dump() + " items");
    }
    if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) {
      throw ConfigError("config " + where(ptr) + ": allows at most " + s["maxItems"].dump() + " items");
    }
    if (s.contains("items")) {
      for (std::size_t i = 0; i < v.size(); ++i) check_node(v[i], s["items"], pointer_child(ptr, std::to_string(i)));
    }
  }
  if (v.is_object()) {
    const json empty = json::object();
    const json& props = s.contains("properties") ? s["properties"] : empty;
    const bool closed = s.contains("additionalProperties") && s["additionalProperties"] == false;
    if (s.contains("required")) {
      for (const auto& key : s["required"]) {
        if (!v.contains(key.get<std::string>())) {
          throw ConfigError("config " + pointer_child(ptr, key.get<std::string>()) + ": required key missing");
        }
      }
    }
    for (auto it = v.begin(); it != v.end(); ++it) {
      if (props.contains(it.key())) {
        check_node(it.value(), props[it.key()], pointer_child(ptr, it.key()));
      } else if (closed) {
        throw ConfigError("config " + pointer_child(ptr, it.key()) + ": unknown key \"" + it.key() + "\"");
      }
    }
    for (auto it = props.begin(); it != props.end(); ++it) {
      if (v.contains(it.key())) continue;
      const json& sub = it.value();
      if (sub.contains("default")) {
        v[it.key()] = sub["default"];
      } else if (sub.value("type", "") == "object" && sub.contains("properties")) {
        v[it.key()] = json::object();
        check_node(v[it.key()], sub, pointer_child(ptr, it.key()));
      }
    }
  }
}

Position to_position(const json& arr) {
  Position p(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) p(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
  return p;
}

Eigen::VectorXd to_vector(const json& arr) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) v(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
  return v;
}

void require_dim(const json& arr, std::size_t dim, const std::string& ptr) {
  if (arr.size() != dim) {
    throw ConfigError("config " + ptr + ": expected " + std::to_string(dim) + " coordinates, got " +
                      std::to_string(arr.size()));
  }
}

void check_semantics(json& doc, const fs::path& base_dir) {
  const auto& bounds = doc["world"]["bounds"];
  const std::size_t dim = bounds["lo"].size();
  require_dim(bounds["hi"], dim, "/world/bounds/hi");
  for (std::size_t k = 0; k < dim; ++k) {
    if (!(bounds["lo"][k].get<double>() < bounds["hi"][k].get<double>())) {
      throw ConfigError("config /world/bounds: lo must be below hi on every axis");
    }
  }
  require_dim(doc["kernel"]["length_scale"], dim, "/kernel/length_scale");
  if (doc["kernel"].contains("measure_width")) require_dim(doc["kernel"]["measure_width"], dim, "/kernel/measure_width");
  const auto& obstacles = doc["world"]["obstacles"];
  for (std::size_t i = 0; i < obstacles.size(); ++i) {
    const std::string ptr = "/world/obstacles/" + std::to_string(i);
    require_dim(obstacles[i]["lo"], dim, ptr + "/lo");
    require_dim(obstacles[i]["hi"], dim, ptr + "/hi");
    for (std::size_t k = 0; k < dim; ++k) {
      if (obstacles[i]["lo"][k].get<double>() > obstacles[i]["hi"][k].get<double>()) {
        throw ConfigError("config " + ptr + ": lo must not exceed hi");
      }
    }
  }
  const auto& starts = doc["world"]["start_positions"];
  if (!starts.empty() && starts.size() != doc["world"]["n_agents"].get<std::size_t>()) {
    throw ConfigError("config /world/start_positions: need one position per agent");
  }
  for (std::size_t i = 0; i < starts.size(); ++i) require_dim(starts[i], dim, "/world/start_positions/" + std::to_string(i));

  auto& env = doc["env"];
  const auto& params = env["parameters"];
  if (params["min_bumps"].get<int>() > params["max_bumps"].get<int>()) {
    throw ConfigError("config /env/parameters: min_bumps exceeds max_bumps");
  }
  if (params.contains("bumps")) {
    for (std::size_t i = 0; i < params["bumps"].size(); ++i) {
      const std::string ptr = "/env/parameters/bumps/" + std::to_string(i);
      require_dim(params["bumps"][i]["center"], dim, ptr + "/center");
      if (params["bumps"][i].contains("velocity")) require_dim(params["bumps"][i]["velocity"], dim, ptr + "/velocity");
    }
  }
  if (env["kind"] == "dataset") {
    if (dim != 2) throw ConfigError("config /env/kind: dataset fields are planar (2D bounds required)");
    std::string path = env["dataset_path"];
    if (path.empty()) throw ConfigError("config /env/dataset_path: required for kind \"dataset\"");
    fs::path p(path);
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    p = p.lexically_normal();
    if (!fs::exists(p)) throw ConfigError("config /env/dataset_path: file not found: " + p.string());
    env["dataset_path"] = p.string();
  }

  const int n = doc["world"]["n_agents"];
  const bool central = doc["run"]["mode"] == "centralized" ||
                       std::find(doc["run"]["baselines"].begin(), doc["run"]["baselines"].end(), "centralized") !=
                           doc["run"]["baselines"].end();
  if (central && n > 3) {
    throw ConfigError("config /world/n_agents: centralized mode plans jointly over |A|^n actions and supports n <= 3");
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

bool parse_double(const std::string& text, double& out) {
  const char* b = text.data();
  const char* e = b + text.size();
  if (b != e && *b == '+') ++b;
  const auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e && b != e;
}

// Days since 1970-01-01 of a proleptic Gregorian date.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

void finish(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

void apply_schema(json& doc, const json& schema) { check_node(doc, schema, ""); }

const json& config_schema() {
  static const json schema = json::parse(kSchemaText);
  return schema;
}

Config parse_config(const json& doc, const fs::path& base_dir) {
  Config cfg{doc};
  apply_schema(cfg.doc, config_schema());
  check_semantics(cfg.doc, base_dir);
  return cfg;
}

Config load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": parse error: " + e.what());
  }
  return parse_config(doc, path.parent_path());
}

void write_config(const Config& config, const fs::path& path) {
  auto out = open_out(path);
  out << config.doc.dump(2) << "\n";
  finish(out, path);
}

// ---------------------------------------------------------------------------

double parse_timestamp(const std::string& raw) {
  const std::string text = trim(raw);
  double epoch = 0.0;
  if (parse_double(text, epoch)) return epoch;
  int y = 0, mo = 0, d = 0, h = 0, mi = 0;
  double sec = 0.0;
  int consumed = 0;
  if (std::sscanf(text.c_str(), "%4d-%2d-%2d%*1[T ]%2d:%2d:%n", &y, &mo, &d, &h, &mi, &consumed) != 5 ||
      consumed == 0) {
    throw DataError("unparseable timestamp \"" + text + "\"");
  }
  std::size_t pos = static_cast<std::size_t>(consumed);
  std::size_t end = pos;
  while (end < text.size() && (std::isdigit(static_cast<unsigned char>(text[end])) || text[end] == '.')) ++end;
  if (!parse_double(text.substr(pos, end - pos), sec)) throw DataError("unparseable timestamp \"" + text + "\"");
  double offset = 0.0;
  const std::string zone = text.substr(end);
  if (zone.empty() || zone == "Z") {
    offset = 0.0;
  } else if ((zone[0] == '+' || zone[0] == '-') && zone.size() == 6 && zone[3] == ':') {
    int oh = 0, om = 0;
    if (std::sscanf(zone.c_str() + 1, "%2d:%2d", &oh, &om) != 2) throw DataError("bad UTC offset in \"" + text + "\"");
    offset = (zone[0] == '+' ? 1.0 : -1.0) * (oh * 3600.0 + om * 60.0);
  } else {
    throw DataError("bad UTC offset in \"" + text + "\"");
  }
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || sec >= 61.0) {
    throw DataError("timestamp field out of range in \"" + text + "\"");
  }
  const auto days = days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d));
  return static_cast<double>(days) * 86400.0 + h * 3600.0 + mi * 60.0 + sec - offset;
}

StationDataset parse_station_csv(std::istream& in, const std::string& source) {
  struct Row {
    std::string station;
    double x, y, t, value;
  };
  std::vector<Row> rows;
  std::string units;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  const auto fail = [&](const std::string& msg) {
    throw DataError(source + ":" + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const auto colon = t.find(':');
      if (colon != std::string::npos && trim(t.substr(1, colon - 1)) == "units") units = trim(t.substr(colon + 1));
      continue;
    }
    auto fields = split_csv(t);
    if (!header_seen) {
      if (fields != std::vector<std::string>{"station_id", "x", "y", "timestamp", "value"}) {
        fail("expected header station_id,x,y,timestamp,value");
      }
      header_seen = true;
      continue;
    }
    if (fields.size() != 5) fail("expected 5 fields, got " + std::to_string(fields.size()));
    Row r;
    r.station = fields[0];
    if (r.station.empty()) fail("empty station_id");
    if (!parse_double(fields[1], r.x) || !parse_double(fields[2], r.y) || !std::isfinite(r.x) || !std::isfinite(r.y)) {
      fail("bad station coordinates");
    }
    try {
      r.t = parse_timestamp(fields[3]);
    } catch (const DataError& e) {
      fail(e.what());
    }
    const std::string& v = fields[4];
    if (v.empty() || v == "NA" || v == "nan" || v == "NaN") {
      r.value = std::numeric_limits<double>::quiet_NaN();
    } else if (!parse_double(v, r.value) || !std::isfinite(r.value)) {
      fail("bad value \"" + v + "\"");
    }
    rows.push_back(std::move(r));
  }
  if (!header_seen) throw DataError(source + ": missing header");

  StationDataset ds;
  ds.units = units;
  std::map<std::string, std::pair<double, double>> stations;
  std::set<double> times;
  for (const auto& r : rows) {
    auto [it, inserted] = stations.emplace(r.station, std::make_pair(r.x, r.y));
    if (!inserted && (it->second.first != r.x || it->second.second != r.y)) {
      throw DataError(source + ": station " + r.station + " has inconsistent coordinates");
    }
    times.insert(r.t);
  }
  std::map<std::string, Eigen::Index> column;
  for (const auto& [id, xy] : stations) {
    column[id] = static_cast<Eigen::Index>(ds.station_ids.size());
    ds.station_ids.push_back(id);
    ds.positions.push_back(make_position({xy.first, xy.second}));
  }
  ds.timestamps.assign(times.begin(), times.end());
  ds.values = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(ds.timestamps.size()),
                                        static_cast<Eigen::Index>(ds.station_ids.size()),
                                        std::numeric_limits<double>::quiet_NaN());
  std::set<std::pair<std::string, double>> seen;
  for (const auto& r : rows) {
    if (!seen.emplace(r.station, r.t).second) {
      throw DataError(source + ": duplicate entry for station " + r.station + " at timestamp " + fmt(r.t));
    }
    const auto snap = static_cast<Eigen::Index>(
        std::lower_bound(ds.timestamps.begin(), ds.timestamps.end(), r.t) - ds.timestamps.begin());
    ds.values(snap, column[r.station]) = r.value;
  }
  return ds;
}

StationDataset load_station_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open station CSV: " + path.string());
  return parse_station_csv(in, path.string());
}

EnvironmentField build_dataset_field(const StationDataset& ds, const Position& lo, const Position& hi,
                                     double time_scale) {
  if (ds.station_ids.size() < 3) throw DataError("dataset field needs at least 3 stations");
  if (ds.timestamps.size() < 2) throw DataError("dataset field needs at least 2 snapshots");
  if (!(time_scale > 0.0)) throw InputError("time_scale must be positive");
  for (std::size_t i = 1; i < ds.timestamps.size(); ++i) {
    if (!(ds.timestamps[i] > ds.timestamps[i - 1])) throw DataError("snapshot timestamps must be strictly increasing");
  }
  for (Eigen::Index s = 0; s < ds.values.rows(); ++s) {
    if (ds.values.row(s).array().isNaN().all()) {
      throw DataError("snapshot at timestamp " + fmt(ds.timestamps[static_cast<std::size_t>(s)]) +
                      " has no station values");
    }
  }
  EnvironmentField env;
  env.kind = FieldKind::kDataset;
  env.lo = lo;
  env.hi = hi;
  env.stations.stations = ds.positions;
  env.stations.values = ds.values;
  for (double t : ds.timestamps) env.stations.times.push_back((t - ds.timestamps.front()) / time_scale);
  return env;
}

// ---------------------------------------------------------------------------

RunMode parse_run_mode(const std::string& name) {
  if (name == "distributed") return RunMode::kDistributed;
  if (name == "independent") return RunMode::kIndependent;
  if (name == "centralized") return RunMode::kCentralized;
  throw ConfigError("unknown run mode \"" + name + "\"");
}

std::string run_mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::kDistributed: return "distributed";
    case RunMode::kIndependent: return "independent";
    case RunMode::kCentralized: return "centralized";
  }
  return "distributed";
}

Scenario build_scenario(const Config& config, RunMode mode) {
  const json& doc = config.doc;
  const json& w = doc["world"];
  const std::uint64_t seed = w["seed"].get<std::uint64_t>();
  Scenario sc;

  sc.world.lo = to_position(w["bounds"]["lo"]);
  sc.world.hi = to_position(w["bounds"]["hi"]);
  for (const auto& o : w["obstacles"]) sc.world.obstacles.push_back({to_position(o["lo"]), to_position(o["hi"])});
  sc.world.d_comm = w["d_comm"];
  sc.world.dt = w["dt"];
  const int n = w["n_agents"];
  std::vector<Position> starts;
  if (!w["start_positions"].empty()) {
    for (const auto& p : w["start_positions"]) starts.push_back(to_position(p));
  } else {
    Rng rng = make_stream(seed, "start");
    starts = random_start_positions(sc.world, n, rng);
  }
  for (int i = 0; i < n; ++i) {
    sc.world.agents.push_back({static_cast<std::uint32_t>(i), starts[static_cast<std::size_t>(i)], w["speed"].get<double>()});
  }

  const json& k = doc["kernel"];
  const KernelParams params(k["signal_variance"].get<double>(), to_vector(k["length_scale"]));
  const Position center = 0.5 * (sc.world.lo + sc.world.hi);
  const Eigen::VectorXd width =
      k.contains("measure_width") ? to_vector(k["measure_width"]) : Eigen::VectorXd(0.25 * (sc.world.hi - sc.world.lo));
  try {
    sc.basis = build_basis(params, center, width, k["E"].get<int>());
  } catch (const InputError& e) {
    throw ConfigError(std::string("config /kernel: ") + e.what());
  }
  sc.noise = NoiseModel(doc["noise"]["sigma_v_sq"].get<double>());

  const json& env = doc["env"];
  const json& ep = env["parameters"];
  const std::string kind = env["kind"];
  if (kind == "dataset") {
    sc.env = build_dataset_field(load_station_csv(env["dataset_path"].get<std::string>()), sc.world.lo, sc.world.hi,
                                 ep["time_scale"].get<double>());
  } else {
    const FieldKind fk = kind == "synthetic-dynamic" ? FieldKind::kSyntheticDynamic : FieldKind::kSyntheticStatic;
    if (ep.contains("bumps")) {
      sc.env.kind = fk;
      sc.env.lo = sc.world.lo;
      sc.env.hi = sc.world.hi;
      for (const auto& b : ep["bumps"]) {
        Bump bump;
        bump.center = to_position(b["center"]);
        bump.velocity = b.contains("velocity") ? to_position(b["velocity"]) : Position(Position::Zero(bump.center.size()));
        bump.weight = b["weight"];
        bump.width = b["width"];
        sc.env.bumps.push_back(std::move(bump));
      }
    } else {
      BumpFieldOptions opt;
      opt.min_bumps = ep["min_bumps"];
      opt.max_bumps = ep["max_bumps"];
      opt.signal_std = std::sqrt(params.signal_variance);
      opt.length_scale = std::sqrt(params.length_scale.minCoeff());
      opt.drift_speed = ep["drift_speed"];
      opt.horizon = doc["run"]["steps"].get<double>() * sc.world.dt;
      Rng rng = make_stream(seed, "field");
      sc.env = random_bump_field(fk, sc.world.lo, sc.world.hi, opt, rng);
    }
  }

  SimConfig& s = sc.sim;
  s.mode = mode;
  s.r_mode = doc["gp"]["r_mode"] == "fixed" ? ForgettingMode::kFixed : ForgettingMode::kRunningMean;
  s.r_value = doc["gp"]["r_value"];
  s.planner.merge_mode = doc["gp"]["merge_mode"] == "consistent" ? MergeMode::kConsistent : MergeMode::kAsPrinted;
  s.rounds_per_step = doc["consensus"]["rounds_per_step"];
  s.drop_prob = doc["consensus"]["drop_prob"];
  const json& p = doc["planner"];
  s.planner.horizon = p["T"];
  s.planner.n_iteration = p["n_iteration"];
  s.planner.n_search = p["n_search"];
  s.planner.gamma = p["gamma"];
  s.action_set = p["action_set"];
  s.replan_interval = p["replan_interval"];
  s.centralized_iteration_factor = p["centralized_iteration_factor"];
  s.eval_grid = doc["run"]["eval_grid"];
  s.workers = doc["run"]["workers"];
  s.seed = seed;
  return sc;
}

// ---------------------------------------------------------------------------

void run_scenario(const Config& config, RunMode mode, RunResult& out,
                  const std::function<void(const Simulation&)>& on_step) {
  const Scenario sc = build_scenario(config, mode);
  Simulation sim(sc.world, sc.env, sc.basis, sc.noise, sc.sim);
  const auto record = [&](const MetricsRow& row) {
    out.metrics.push_back(row);
    for (const auto& a : sim.world().agents) {
      out.trajectories.push_back({sim.world().k, a.id, a.position});
      if (collision_check(sim.world(), a.position)) ++out.executed_positions_in_collision;
    }
    out.planned_points = sim.planned_points();
    out.planned_points_in_collision = sim.planned_points_in_collision();
    out.cross_agent_reads = sim.cross_agent_reads();
    if (on_step) on_step(sim);
  };
  record(sim.metrics());
  const int steps = config.doc["run"]["steps"];
  for (int k = 1; k <= steps; ++k) {
    MetricsRow row;
    try {
      row = sim.run_timestep();
    } catch (const Error& e) {
      rethrow_with_context(e, run_mode_name(mode) + " run, step " + std::to_string(k));
    }
    record(row);
  }
}

RunResult run_scenario(const Config& config, RunMode mode) {
  RunResult out;
  run_scenario(config, mode, out);
  return out;
}

void run_experiment(const Config& config, Report& report) {
  const auto t0 = std::chrono::steady_clock::now();
  report.config = config;
  const int n = config.doc["world"]["n_agents"];
  report.agent_ids.clear();
  for (int i = 0; i < n; ++i) report.agent_ids.push_back(static_cast<std::uint32_t>(i));
  const int interval = config.doc["run"]["snapshot_interval"];
  const int resolution = config.doc["run"]["eval_grid"];
  const auto snapshot = [&](const Simulation& sim) {
    const std::int64_t k = sim.world().k;
    if (k == 0 || k % interval != 0) return;
    Snapshot s;
    s.step = k;
    s.time_s = sim.world().time();
    s.resolution = resolution;
    s.truth = sim.grid().truth(sim.env(), s.time_s);
    s.mean = sim.grid().mean_field(sim.states().front(), NoiseModel(config.doc["noise"]["sigma_v_sq"].get<double>()));
    s.variance =
        sim.grid().variance_field(sim.states().front(), NoiseModel(config.doc["noise"]["sigma_v_sq"].get<double>()));
    report.snapshots.push_back(std::move(s));
  };
  const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  try {
    run_scenario(config, parse_run_mode(config.doc["run"]["mode"]), report.main, snapshot);
    for (const auto& name : config.doc["run"]["baselines"]) {
      run_scenario(config, parse_run_mode(name), report.baselines[name]);
    }
  } catch (...) {
    report.wall_clock_s = elapsed();
    throw;
  }
  report.wall_clock_s = elapsed();
}

Report run_experiment(const Config& config) {
  Report report;
  run_experiment(config, report);
  return report;
}

// ---------------------------------------------------------------------------

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::vector<std::uint32_t>& agent_ids,
                       const fs::path& path) {
  auto out = open_out(path);
  out << "step,time_s,agent_id,rmse,disagreement_vs_agent0,consensus_residual\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.rmse.size(); ++i) {
      out << row.step << ',' << fmt(row.time_s) << ',' << agent_ids.at(i) << ',' << fmt(row.rmse[i]) << ','
          << fmt(row.disagreement_vs_agent0[i]) << ',' << fmt(row.consensus_residual[i]) << '\n';
    }
  }
  finish(out, path);
}

namespace {

void write_f64(const Eigen::VectorXd& v, const fs::path& path) {
  auto out = open_out(path);
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double d = v(i);
    std::uint64_t bits = 0;
    std::memcpy(&bits, &d, sizeof bits);
    unsigned char le[8];
    for (int b = 0; b < 8; ++b) le[b] = static_cast<unsigned char>(bits >> (8 * b));
    out.write(reinterpret_cast<const char*>(le), 8);
  }
  finish(out, path);
}

json run_summary(const RunResult& r) {
  json s;
  if (r.metrics.empty()) {
    s["final_step"] = nullptr;
    s["final_rmse"] = json::array();
    s["final_rmse_mean"] = nullptr;
    s["final_max_disagreement"] = nullptr;
  } else {
    const auto& last = r.metrics.back();
    s["final_step"] = last.step;
    s["final_rmse"] = last.rmse;
    double mean = 0.0;
    for (double v : last.rmse) mean += v;
    s["final_rmse_mean"] = last.rmse.empty() ? 0.0 : mean / static_cast<double>(last.rmse.size());
    s["final_max_disagreement"] = last.max_disagreement;
  }
  s["planned_points"] = r.planned_points;
  s["planned_points_in_collision"] = r.planned_points_in_collision;
  s["executed_positions_in_collision"] = r.executed_positions_in_collision;
  s["cross_agent_reads"] = r.cross_agent_reads;
  return s;
}

}  // namespace

void write_report(const Report& report, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "snapshots", ec);
  if (ec) throw IoError("cannot create output directory " + (dir / "snapshots").string() + ": " + ec.message());

  write_metrics_csv(report.main.metrics, report.agent_ids, dir / "metrics.csv");
  for (const auto& [name, result] : report.baselines) {
    write_metrics_csv(result.metrics, report.agent_ids, dir / ("metrics_" + name + ".csv"));
  }

  std::size_t dim = 2;
  if (report.config.doc.contains("world")) dim = report.config.doc["world"]["bounds"]["lo"].size();
  {
    const fs::path path = dir / "trajectories.csv";
    auto out = open_out(path);
    out << "step,agent_id,x";
    if (dim > 1) out << ",y";
    if (dim > 2) out << ",z";
    out << '\n';
    for (const auto& row : report.main.trajectories) {
      out << row.step << ',' << row.agent_id;
      for (Eigen::Index k = 0; k < row.position.size(); ++k) out << ',' << fmt(row.position(k));
      out << '\n';
    }
    finish(out, path);
  }

  for (const auto& snap : report.snapshots) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "step_%06lld", static_cast<long long>(snap.step));
    const fs::path base = dir / "snapshots";
    write_f64(snap.truth, base / (std::string(stem) + "_truth.f64"));
    write_f64(snap.mean, base / (std::string(stem) + "_mean.f64"));
    write_f64(snap.variance, base / (std::string(stem) + "_variance.f64"));
    json side;
    side["step"] = snap.step;
    side["t"] = snap.time_s;
    side["bounds"] = report.config.doc["world"]["bounds"];
    side["resolution"] = snap.resolution;
    side["layout"] = "row-major, first axis fastest, little-endian f64";
    side["agent_id"] = report.agent_ids.empty() ? 0u : report.agent_ids.front();
    side["fields"] = {"truth", "mean", "variance"};
    const fs::path path = base / (std::string(stem) + ".json");
    auto out = open_out(path);
    out << side.dump(2) << '\n';
    finish(out, path);
  }

  write_config(report.config, dir / "config.resolved.json");

  json summary = run_summary(report.main);
  summary["mode"] = report.config.doc.contains("run") ? report.config.doc["run"]["mode"] : json("distributed");
  summary["agent_ids"] = report.agent_ids;
  summary["runtime_s"] = report.wall_clock_s;
  summary["snapshots"] = report.snapshots.size();
  summary["baselines"] = json::object();
  for (const auto& [name, result] : report.baselines) {
    json b = run_summary(result);
    if (!b["final_rmse_mean"].is_null() && !summary["final_rmse_mean"].is_null()) {
      b["delta_final_rmse_mean"] = summary["final_rmse_mean"].get<double>() - b["final_rmse_mean"].get<double>();
    }
    summary["baselines"][name] = b;
  }
  const fs::path path = dir / "summary.json";
  auto out = open_out(path);
  out << summary.dump(2) << '\n';
  finish(out, path);
}

// ---------------------------------------------------------------------------

std::vector<MetricsRow> replay(const fs::path& dir) {
  const Config config = load_config(dir / "config.resolved.json");
  const fs::path traj_path = dir / "trajectories.csv";
  std::ifstream in(traj_path);
  if (!in) throw DataError("cannot open " + traj_path.string());
  std::map<std::int64_t, std::map<std::uint32_t, Position>> steps;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || trim(line).empty()) continue;
    const auto f = split_csv(line);
    if (f.size() < 3) throw DataError(traj_path.string() + ":" + std::to_string(lineno) + ": malformed row");
    double step = 0, id = 0;
    if (!parse_double(f[0], step) || !parse_double(f[1], id)) {
      throw DataError(traj_path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    Position p(static_cast<Eigen::Index>(f.size() - 2));
    for (std::size_t k = 2; k < f.size(); ++k) {
      if (!parse_double(f[k], p(static_cast<Eigen::Index>(k - 2)))) {
        throw DataError(traj_path.string() + ":" + std::to_string(lineno) + ": malformed coordinate");
      }
    }
    steps[static_cast<std::int64_t>(step)][static_cast<std::uint32_t>(id)] = p;
  }
  if (steps.empty() || steps.begin()->first != 0) throw DataError("trajectory log has no step-0 positions");

  Scenario sc = build_scenario(config, parse_run_mode(config.doc["run"]["mode"]));
  const auto positions_at = [&](std::int64_t k) {
    std::vector<Position> out;
    const auto& row = steps.at(k);
    for (const auto& a : sc.world.agents) {
      const auto it = row.find(a.id);
      if (it == row.end()) throw DataError("trajectory log misses agent " + std::to_string(a.id) + " at step " + std::to_string(k));
      out.push_back(it->second);
    }
    return out;
  };
  const auto start = positions_at(0);
  for (std::size_t i = 0; i < start.size(); ++i) sc.world.agents[i].position = start[i];
  Simulation sim(sc.world, sc.env, sc.basis, sc.noise, sc.sim);
  std::vector<MetricsRow> rows{sim.metrics()};
  for (auto it = std::next(steps.begin()); it != steps.end(); ++it) {
    rows.push_back(sim.run_timestep_scripted(positions_at(it->first)));
  }
  return rows;
}

}  // namespace dgp
