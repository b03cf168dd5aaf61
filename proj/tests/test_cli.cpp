#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "dgp/cli.hpp"
#include "test_util.hpp"

using namespace dgp;
using namespace dgp::test;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dgp_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

StationDataset csv(const std::string& text) {
  std::istringstream in(text);
  return parse_station_csv(in);
}

json tiny_run(int steps) {
  return json{{"world", {{"n_agents", 3}, {"seed", 4}}},
              {"kernel", {{"E", 30}}},
              {"planner", {{"T", 3}, {"n_iteration", 30}, {"n_search", 2}}},
              {"run", {{"steps", steps}, {"eval_grid", 12}, {"snapshot_interval", 4}}}};
}

const char* kFourRows =
    "station_id,x,y,timestamp,value\n"
    "a,0,0,0,10\n"
    "b,4,0,0,12\n"
    "a,0,0,3600,20\n"
    "b,4,0,3600,14\n";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config defaults") {
  const Config c = parse_config(json::object());
  CHECK(c.doc["world"]["d_comm"] == 10.0);
  CHECK(c.doc["world"]["bounds"]["hi"] == json::array({20.0, 20.0}));
  CHECK(c.doc["kernel"]["E"] == 80);
  CHECK(c.doc["kernel"]["signal_variance"] == 1.0);
  CHECK(c.doc["world"]["speed"] == 1.0);
  CHECK(c.doc["planner"]["T"] == 5);
  CHECK(c.doc["gp"]["merge_mode"] == "as-printed");
  CHECK(c.doc["run"]["snapshot_interval"] == 10);

  const Scenario sc = build_scenario(c, RunMode::kDistributed);
  CHECK(sc.basis.size() == 80);
  CHECK(sc.basis.params().signal_variance == 1.0);
  // diag(0.02, 0.02) on the 20 m map: 0.02 * 20^2 = 8 m^2.
  CHECK(sc.basis.params().length_scale(0) == doctest::Approx(8.0));
  CHECK(sc.world.agents.size() == 12);
  CHECK(sc.world.d_comm == 10.0);
}

TEST_CASE("config rejects unknown keys with their path") {
  try {
    parse_config(json{{"typo_field", 1}});
    FAIL("accepted an unknown key");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("typo_field") != std::string::npos);
  }
  try {
    parse_config(json{{"planner", {{"T", 0}}}});
    FAIL("accepted T = 0");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("/planner/T") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config(json{{"kernel", {{"E", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config(json{{"env", {{"kind", "dataset"}}}}), ConfigError);
}

TEST_CASE("config round trip") {
  const fs::path dir = scratch("config");
  const Config c = parse_config(tiny_run(5));
  write_config(c, dir / "c.json");
  const Config back = load_config(dir / "c.json");
  CHECK(back == c);
  write_config(back, dir / "d.json");
  CHECK(slurp(dir / "c.json") == slurp(dir / "d.json"));

  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK_THROWS_AS(load_config(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
}

TEST_CASE("shipped configs validate") {
  for (const auto& entry : fs::directory_iterator(fs::path(DGP_TEST_DATA_DIR).parent_path() / "configs")) {
    CAPTURE(entry.path().string());
    CHECK_NOTHROW(load_config(entry.path()));
  }
}

TEST_CASE("station CSV grouping") {
  const StationDataset ds = csv(kFourRows);
  CHECK(ds.station_ids == std::vector<std::string>{"a", "b"});
  CHECK(ds.timestamps == std::vector<double>{0.0, 3600.0});
  REQUIRE(ds.values.rows() == 2);
  REQUIRE(ds.values.cols() == 2);
  CHECK(ds.values(0, 0) == 10.0);
  CHECK(ds.values(1, 1) == 14.0);

  const StationDataset partial = csv("station_id,x,y,timestamp,value\na,0,0,0,1\nb,1,0,0,2\na,0,0,5,3\n");
  CHECK(std::isnan(partial.values(1, 1)));
}

TEST_CASE("station CSV is order-insensitive") {
  std::vector<std::string> rows;
  std::ostringstream full;
  full << "station_id,x,y,timestamp,value\n";
  for (int s = 0; s < 6; ++s) {
    for (int t = 0; t < 5; ++t) {
      std::ostringstream r;
      r << "st" << s << ',' << s * 1.5 << ',' << (s % 3) * 2.0 << ',' << t * 600 << ',' << 20.0 + s - 0.5 * t;
      rows.push_back(r.str());
      full << r.str() << '\n';
    }
  }
  const StationDataset base = csv(full.str());
  std::mt19937_64 rng(3);
  for (int k = 0; k < 10; ++k) {
    std::shuffle(rows.begin(), rows.end(), rng);
    std::ostringstream text;
    text << "station_id,x,y,timestamp,value\n";
    for (const auto& r : rows) text << r << '\n';
    const StationDataset again = csv(text.str());
    CHECK(again.station_ids == base.station_ids);
    CHECK(again.timestamps == base.timestamps);
    CHECK(again.values == base.values);
  }
}

TEST_CASE("station CSV errors") {
  CHECK_THROWS_AS(csv("station_id,x,y,timestamp,value\na,0,0,0,1\na,0,0,0,2\n"), DataError);
  try {
    csv("station_id,x,y,timestamp,value\na,0,0,0,1\nb,zero,0,0,2\n");
    FAIL("accepted a malformed row");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":3") != std::string::npos);
  }
  CHECK_THROWS_AS(csv("a,0,0,0,1\n"), DataError);
}

TEST_CASE("timestamps") {
  CHECK(parse_timestamp("0") == 0.0);
  CHECK(parse_timestamp("1594857600") == 1594857600.0);
  CHECK(parse_timestamp("2020-07-16T00:00:00Z") == 1594857600.0);
  CHECK(parse_timestamp("2020-07-16T09:00:00+09:00") == 1594857600.0);
  CHECK(parse_timestamp("2020-07-16T00:00:01.5") == 1594857601.5);
  CHECK_THROWS_AS(parse_timestamp("yesterday"), DataError);
}

TEST_CASE("dataset field interpolation") {
  const std::string text =
      "station_id,x,y,timestamp,value\n"
      "a,2,2,0,10\nb,18,2,0,30\nc,10,18,0,25\n"
      "a,2,2,100,20\nb,18,2,100,30\nc,10,18,100,25\n";
  const StationDataset ds = csv(text);
  const EnvironmentField f = build_dataset_field(ds, P(0, 0), P(20, 20));
  CHECK(field_eval(f, P(2, 2), 0.0) == 10.0);
  CHECK(field_eval(f, P(18, 2), 100.0) == 30.0);
  CHECK(field_eval(f, P(10, 18), 0.0) == 25.0);
  CHECK(field_eval(f, P(2, 2), 50.0) == doctest::Approx(15.0).epsilon(1e-14));
  CHECK(field_eval(f, P(2, 2), -10.0) == 10.0);
  CHECK(field_eval(f, P(2, 2), 500.0) == 20.0);

  // Hand IDW at one off-station point.
  const Position x = P(5, 7);
  double num = 0.0;
  double den = 0.0;
  const std::vector<std::pair<Position, double>> st{{P(2, 2), 10.0}, {P(18, 2), 30.0}, {P(10, 18), 25.0}};
  for (const auto& [p, v] : st) {
    const double w = 1.0 / (p - x).squaredNorm();
    num += w * v;
    den += w;
  }
  CHECK(field_eval(f, x, 0.0) == doctest::Approx(num / den).epsilon(1e-14));

  const EnvironmentField scaled = build_dataset_field(ds, P(0, 0), P(20, 20), 10.0);
  CHECK(field_eval(scaled, P(2, 2), 5.0) == doctest::Approx(15.0).epsilon(1e-14));
}

TEST_CASE("uniform snapshots give a constant field") {
  const std::string text =
      "station_id,x,y,timestamp,value\n"
      "a,1,1,0,7.5\nb,15,3,0,7.5\nc,4,19,0,7.5\nd,9,9,0,7.5\n"
      "a,1,1,60,7.5\nb,15,3,60,7.5\nc,4,19,60,7.5\nd,9,9,60,7.5\n";
  const EnvironmentField f = build_dataset_field(csv(text), P(0, 0), P(20, 20));
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    CHECK(field_eval(f, uniform_point(rng, 0, 20, 2), 30.0) == doctest::Approx(7.5).epsilon(1e-14));
  }
}

TEST_CASE("dataset field preconditions") {
  CHECK_THROWS_AS(build_dataset_field(csv(kFourRows), P(0, 0), P(20, 20)), DataError);
  const std::string missing =
      "station_id,x,y,timestamp,value\n"
      "a,1,1,0,1\nb,5,1,0,2\nc,9,1,0,3\n"
      "a,1,1,60,nan\nb,5,1,60,nan\nc,9,1,60,nan\n";
  CHECK_THROWS_AS(build_dataset_field(csv(missing), P(0, 0), P(20, 20)), DataError);
}

TEST_CASE("shipped station data loads") {
  const StationDataset ds = load_station_csv(fs::path(DGP_TEST_DATA_DIR) / "stations_synthetic.csv");
  CHECK(ds.station_ids.size() >= 3);
  CHECK(ds.timestamps.size() >= 2);
  CHECK_NOTHROW(build_dataset_field(ds, P(0, 0), P(20, 20)));
}

TEST_CASE("zero-step report") {
  const fs::path dir = scratch("zero");
  const Config c = parse_config(tiny_run(0));
  const Report r = run_experiment(c);
  REQUIRE(r.main.metrics.size() == 1);
  CHECK(r.main.metrics[0].step == 0);
  CHECK(r.snapshots.empty());
  write_report(r, dir);
  const json summary = json::parse(slurp(dir / "summary.json"));
  CHECK(summary["final_step"] == 0);
  CHECK(summary["snapshots"] == 0);
  CHECK(fs::exists(dir / "metrics.csv"));
  CHECK(fs::exists(dir / "config.resolved.json"));

  Report empty;
  const fs::path dir2 = scratch("empty");
  write_report(empty, dir2);
  CHECK(slurp(dir2 / "metrics.csv") == "step,time_s,agent_id,rmse,disagreement_vs_agent0,consensus_residual\n");
  CHECK(json::parse(slurp(dir2 / "summary.json"))["final_rmse"].empty());
}

TEST_CASE("report contents, determinism and replay") {
  const fs::path a = scratch("run_a");
  const fs::path b = scratch("run_b");
  json doc = tiny_run(9);
  doc["run"]["baselines"] = {"independent"};
  const Config c = parse_config(doc);
  const Report r = run_experiment(c);
  write_report(r, a);
  write_report(run_experiment(c), b);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "trajectories.csv") == slurp(b / "trajectories.csv"));

  // Snapshots every 4 steps over 9 steps.
  CHECK(r.snapshots.size() == 2);
  int files = 0;
  for (const auto& e : fs::directory_iterator(a / "snapshots")) files += e.path().extension() == ".json";
  CHECK(files == 2);
  CHECK(fs::file_size(a / "snapshots" / "step_000004_mean.f64") == 12u * 12u * 8u);

  const json summary = json::parse(slurp(a / "summary.json"));
  const MetricsRow& last = r.main.metrics.back();
  CHECK(summary["final_step"] == 9);
  REQUIRE(summary["final_rmse"].size() == last.rmse.size());
  for (std::size_t i = 0; i < last.rmse.size(); ++i) CHECK(summary["final_rmse"][i].get<double>() == last.rmse[i]);
  CHECK(summary["baselines"].contains("independent"));
  CHECK(summary["baselines"]["independent"]["cross_agent_reads"] == 0);
  CHECK(fs::exists(a / "metrics_independent.csv"));

  // Adding a baseline leaves the main run untouched.
  const fs::path plain = scratch("run_plain");
  write_report(run_experiment(parse_config(tiny_run(9))), plain);
  CHECK(slurp(a / "metrics.csv") == slurp(plain / "metrics.csv"));

  const auto rows = replay(a);
  REQUIRE(rows.size() == r.main.metrics.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    CHECK(rows[k].step == r.main.metrics[k].step);
    CHECK(rows[k].rmse == r.main.metrics[k].rmse);
  }

  // Re-running from the echoed config reproduces the run.
  const fs::path echo = scratch("run_echo");
  write_report(run_experiment(load_config(a / "config.resolved.json")), echo);
  CHECK(slurp(a / "metrics.csv") == slurp(echo / "metrics.csv"));
}

TEST_CASE("dataset scenario runs") {
  json doc = tiny_run(3);
  doc["env"] = {{"kind", "dataset"}, {"dataset_path", "stations_synthetic.csv"}};
  const Config c = parse_config(doc, fs::path(DGP_TEST_DATA_DIR));
  const RunResult r = run_scenario(c, RunMode::kDistributed);
  CHECK(r.metrics.size() == 4);
  for (double v : r.metrics.back().rmse) CHECK(std::isfinite(v));
}

TEST_CASE("centralized baseline is capped at three agents") {
  json doc = tiny_run(2);
  doc["world"]["n_agents"] = 2;
  const RunResult r = run_scenario(parse_config(doc), RunMode::kCentralized);
  CHECK(r.metrics.size() == 3);
  doc["world"]["n_agents"] = 4;
  doc["run"]["mode"] = "centralized";
  CHECK_THROWS_AS(parse_config(doc), ConfigError);
}

}  // TEST_SUITE
