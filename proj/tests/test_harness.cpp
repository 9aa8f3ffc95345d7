#include "closedsys/harness.hpp"

#include <catch_amalgamated.hpp>

#include <fstream>
#include <sstream>

using namespace closedsys;
using namespace closedsys::harness;
using Catch::Matchers::ContainsSubstring;
using json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("closedsys_test_harness_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// A cheap three-point sweep over the fiber coupling.
const char* kGapSweep = R"({
  "experiment": "model2.gap_check",
  "params": {"modes": 4, "n_max": 2},
  "sweep": {"param": "lambda0", "values": [0.01, 0.02, 0.05]}
})";

RecordList records_of(const fs::path& csv) {
  RecordList out;
  for (const auto& r : read_csv(csv)) out.push_back(r.rec);
  return out;
}

}  // namespace

TEST_CASE("minimal config loads with defaults echoed", "[config]") {
  const auto c = parse_config(R"({"experiment": "model1.closed_subsystem"})");
  const auto* spec = experiments::find_experiment("model1.closed_subsystem");
  REQUIRE(spec);
  CHECK(c.params == spec->defaults());
  CHECK(c.params["alpha"] == 3.0);
  CHECK(c.times == std::vector<double>{0.0});
  CHECK(!c.sweep);
  const json echo = c.to_json();
  CHECK(echo["params"] == spec->defaults());
  CHECK(echo["config_hash"] == c.short_hash());
  CHECK(c.short_hash().size() == 16);

  const auto d = parse_config(R"({"experiment": "model1.closed_subsystem", "params": {"d": 6}, "times": {"start": 0, "stop": 1, "step": 0.25}})");
  CHECK(d.params["d"] == 6.0);
  CHECK(d.times == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  CHECK(d.hash() != c.hash());
}

TEST_CASE("the output name does not change the config hash", "[config]") {
  const auto a = parse_config(R"({"experiment": "model2.gap_check"})");
  const auto b = parse_config(R"({"experiment": "model2.gap_check", "output": "elsewhere"})");
  CHECK(a.hash() == b.hash());
}

TEST_CASE("unordered sweep values are rejected", "[config]") {
  const auto msg = config_error(R"({"experiment": "model1.closed_subsystem", "sweep": {"param": "d", "values": [4, 2, 8]}})");
  CHECK_THAT(msg, ContainsSubstring("sweep values strictly increasing"));
}

TEST_CASE("a non-summable interaction exponent is rejected", "[config]") {
  const auto msg = config_error(R"({"experiment": "model1.closed_subsystem", "params": {"alpha": 1}})");
  CHECK_THAT(msg, ContainsSubstring("alpha"));
  CHECK_THAT(msg, ContainsSubstring("must exceed 1"));
  // The same check fires when the bad value only appears at a sweep point.
  const auto sw = config_error(R"({"experiment": "model1.closed_subsystem", "sweep": {"param": "alpha", "values": [0.5, 2, 3]}})");
  CHECK_THAT(sw, ContainsSubstring("must exceed 1"));
}

TEST_CASE("parse errors carry line and column", "[config]") {
  const auto msg = config_error("{\n  \"experiment\": \"model2.gap_check\",\n  \"params\": {,}\n}");
  CHECK_THAT(msg, ContainsSubstring("parse error at line 3"));
  CHECK_THAT(msg, ContainsSubstring("column"));
}

TEST_CASE("every violated invariant is reported at once", "[config]") {
  const auto msg = config_error(R"({"experiment": "model1.closed_subsystem", "bogus": 1,
    "params": {"grid_points": "many", "no_such_param": 2, "coupling_kind": "dipole"},
    "times": [0, 2, 1]})");
  CHECK_THAT(msg, ContainsSubstring("bogus"));
  CHECK_THAT(msg, ContainsSubstring("grid_points"));
  CHECK_THAT(msg, ContainsSubstring("no_such_param"));
  CHECK_THAT(msg, ContainsSubstring("coupling_kind"));
  CHECK_THAT(msg, ContainsSubstring("times"));
}

TEST_CASE("unknown experiments and fit axes are rejected", "[config]") {
  const auto unknown = config_error(R"({"experiment": "model3.nothing"})");
  CHECK_THAT(unknown, ContainsSubstring("unknown experiment"));
  CHECK_THAT(unknown, ContainsSubstring("model2.gap_check"));
  const auto axis = config_error(R"({"experiment": "model2.gap_check", "fits": [{"metric": "min_margin", "axis": "d"}]})");
  CHECK_THAT(axis, ContainsSubstring("axis"));
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), std::runtime_error);
}

TEST_CASE("geometric sweeps expand to increasing values", "[config]") {
  const auto c = parse_config(R"({"experiment": "model1.closed_subsystem",
    "sweep": {"param": "d", "geometric": {"start": 3, "factor": 2, "count": 4}}})");
  REQUIRE(c.sweep);
  CHECK(c.sweep->values == std::vector<double>{3, 6, 12, 24});
}

TEST_CASE("CSV formatting is exact and round-trips", "[csv]") {
  CHECK(std::string(kCsvHeader) == "config_hash,experiment,sweep_param,sweep_value,time,metric,value,diag_norm_drift,diag_residual");
  CHECK(format_number(0.1) == "0.10000000000000001");
  CHECK(format_number(1.0) == "1");
  CHECK(format_number(1.0 / 3.0) == "0.33333333333333331");
  CHECK(format_number(-2.5e-300) == "-2.5e-300");
  const ExperimentRecord r{"model2.gap_check", "lambda0", 0.05, 1.0 / 3.0, "odd,name", 2.0 / 3.0, 1e-17, 0.0};
  const auto row = format_row("abc", r);
  CHECK_THAT(row, ContainsSubstring("\"odd,name\""));
  const auto back = parse_row(row);
  CHECK(back.config_hash == "abc");
  CHECK(back.rec.metric == "odd,name");
  CHECK(back.rec.time == r.time);
  CHECK(back.rec.value == r.value);
  CHECK(back.rec.diag_norm_drift == r.diag_norm_drift);
}

TEST_CASE("a one-point sweep matches the direct experiment call", "[sweep]") {
  const auto dir = scratch("direct");
  const auto c = parse_config(R"({"experiment": "model2.gap_check", "params": {"modes": 4, "n_max": 2}})");
  SweepOptions so;
  so.out_dir = dir;
  so.jobs = 1;
  const auto res = run_sweep(c, so);
  REQUIRE(res.complete);
  const auto* spec = experiments::find_experiment(c.experiment);
  experiments::RunContext ctx;
  ctx.times = c.times;
  const auto direct = spec->run(experiments::Params(c.params), ctx);
  REQUIRE(res.records.size() == direct.size());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(res.records[i].metric == direct[i].metric);
    CHECK(res.records[i].value == direct[i].value);
    CHECK(res.records[i].sweep_param == "none");
    CHECK(res.records[i].experiment == c.experiment);
  }
}

TEST_CASE("reruns produce byte-identical records regardless of parallelism", "[sweep]") {
  const auto c = parse_config(kGapSweep);
  std::vector<std::string> csvs;
  for (unsigned jobs : {1u, 3u, 1u}) {
    const auto dir = scratch("rerun" + std::to_string(csvs.size()));
    SweepOptions so;
    so.out_dir = dir;
    so.jobs = jobs;
    so.resume = false;
    const auto o = execute(c, so);
    REQUIRE(o.sweep.complete);
    csvs.push_back(slurp(o.report.csv));
  }
  CHECK(csvs[0] == csvs[1]);
  CHECK(csvs[0] == csvs[2]);
}

TEST_CASE("records come back in sweep order", "[sweep]") {
  const auto c = parse_config(kGapSweep);
  SweepOptions so;
  so.out_dir = scratch("order");
  so.jobs = 3;
  const auto o = execute(c, so);
  const auto recs = records_of(o.report.csv);
  REQUIRE(recs.size() == 3 * 4);
  for (std::size_t i = 1; i < recs.size(); ++i) CHECK(recs[i - 1].sweep_value <= recs[i].sweep_value);
}

TEST_CASE("an interrupted sweep resumes to the uninterrupted record set", "[sweep]") {
  const auto c = parse_config(kGapSweep);
  const auto full_dir = scratch("full");
  SweepOptions full;
  full.out_dir = full_dir;
  full.jobs = 1;
  const auto ref = execute(c, full);
  REQUIRE(ref.sweep.complete);

  const auto dir = scratch("resume");
  SweepOptions part;
  part.out_dir = dir;
  part.jobs = 1;
  part.stop_after = 1;
  const auto first = run_sweep(c, part);
  CHECK(!first.complete);
  const fs::path journal = dir / (c.short_hash() + ".journal.csv");
  REQUIRE(fs::exists(journal));
  // Simulate a crash in the middle of writing the next block.
  std::ofstream(journal, std::ios::app | std::ios::binary) << c.short_hash() << ",model2.gap_check,lambda0,0.02,0,min_mar";

  SweepOptions rest;
  rest.out_dir = dir;
  rest.jobs = 2;
  const auto second = execute(c, rest);
  CHECK(second.sweep.complete);
  CHECK(second.sweep.resumed == 1);
  CHECK(slurp(second.report.csv) == slurp(ref.report.csv));

  // A further run finds everything journaled and recomputes nothing.
  const auto third = run_sweep(c, rest);
  CHECK(third.resumed == 3);
}

TEST_CASE("a d-sweep of the closed-subsystem run emits one row per point, time and metric", "[sweep]") {
  const auto c = parse_config(R"({"experiment": "model1.closed_subsystem",
    "params": {"grid_points": 256, "grid_spacing": 0.5, "dt": 0.1},
    "sweep": {"param": "d", "values": [2, 3, 4, 5]}, "times": [0, 0.5, 1]})");
  SweepOptions so;
  so.out_dir = scratch("rows");
  const auto o = execute(c, so);
  INFO((o.sweep.failures.empty() ? std::string() : o.sweep.failures.front()));
  REQUIRE(o.sweep.failures.empty());
  std::set<std::string> metrics;
  for (const auto& r : o.sweep.records) metrics.insert(r.metric);
  CHECK(o.sweep.records.size() == 4 * 3 * metrics.size());
  CHECK(read_csv(o.report.csv).size() == o.sweep.records.size());
  for (const auto& row : read_csv(o.report.csv)) CHECK(row.config_hash == c.short_hash());
}

TEST_CASE("failed points become marker rows and the sweep continues", "[sweep]") {
  // A packet this wide in momentum leaks outside the cone; only the packet builder notices.
  const auto c = parse_config(R"({"experiment": "model1.closed_subsystem",
    "params": {"grid_points": 256, "grid_spacing": 0.5, "dt": 0.1},
    "sweep": {"param": "packet_width", "values": [0.185, 0.5]}, "times": [0, 0.5]})");
  SweepOptions so;
  so.out_dir = scratch("failed");
  const auto o = execute(c, so);
  CHECK(o.sweep.complete);
  REQUIRE(o.sweep.failures.size() == 1);
  CHECK_THAT(o.sweep.failures.front(), ContainsSubstring("packet_width = 0.5"));
  CHECK_THAT(o.sweep.failures.front(), ContainsSubstring("leaks outside cone"));
  CHECK(!o.ok);
  std::size_t failed = 0, good = 0;
  for (const auto& r : o.sweep.records) (r.metric == kFailedMetric ? failed : good) += 1;
  CHECK(failed == 1);
  CHECK(good > 0);
  const auto summary = json::parse(slurp(o.report.summary));
  CHECK(summary["all_pass"] == false);
  CHECK(summary["failures"].size() == 1);
}

TEST_CASE("power-law fits", "[fit]") {
  RecordList exact;
  for (double d : {2.0, 4.0, 8.0, 16.0, 32.0}) exact.push_back({"e", "d", d, 0.0, "m", 1.0 / d, 0.0, 0.0});
  const auto f = fit_power_law(exact, "m", "d");
  CHECK(std::abs(f.slope + 1.0) < 1e-12);
  CHECK(f.points == 5);
  CHECK(f.verdict == "reported");
  CHECK(f.rms < 1e-12);

  const RecordList constructed = {{"e", "d", 8, 0, "m", 0.1, 0, 0}, {"e", "d", 16, 0, "m", 0.05, 0, 0}, {"e", "d", 32, 0, "m", 0.025, 0, 0}};
  const auto g = fit_power_law(constructed, "m", "d", -1.1, -0.9, "3");
  CHECK(g.slope == Catch::Approx(-1.0).margin(1e-12));
  CHECK(g.verdict == "pass");
  CHECK(g.to_json()["criterion"] == "3");
  CHECK(fit_power_law(constructed, "m", "d", std::nullopt, -1.5).verdict == "fail");

  // The maximum over time is taken at each axis point.
  RecordList timed = constructed;
  timed.push_back({"e", "d", 8, 1.0, "m", 0.01, 0, 0});
  CHECK(fit_power_law(timed, "m", "d").slope == Catch::Approx(-1.0).margin(1e-12));

  RecordList bad = constructed;
  bad.push_back({"e", "d", 64, 0, "m", 0.0, 0, 0});
  const auto b = fit_power_law(bad, "m", "d");
  CHECK(b.verdict == "fail");
  CHECK_THAT(b.error, ContainsSubstring("nonpositive"));
  CHECK_THAT(b.error, ContainsSubstring("d = 64"));

  const RecordList two(constructed.begin(), constructed.begin() + 2);
  CHECK_THAT(fit_power_law(two, "m", "d").error, ContainsSubstring("at least 3"));
}

TEST_CASE("reports", "[report]") {
  const auto dir = scratch("report");
  const RecordList one = {{"model2.gap_check", "none", 0, 0, "min_margin", 0.25, 0, 1e-12}};
  const auto rep = emit_report(one, {}, dir, json{{"experiment", "model2.gap_check"}}, "deadbeef");
  const auto text = slurp(rep.csv);
  CHECK(text == std::string(kCsvHeader) + "\ndeadbeef,model2.gap_check,none,0,0,min_margin,0.25,0,9.9999999999999998e-13\n");
  const auto s = json::parse(slurp(rep.summary));
  CHECK(s["fits"].is_array());
  CHECK(s["fits"].empty());
  CHECK(s["all_pass"] == true);
  CHECK(s["record_count"] == 1);
  CHECK(s["content_sha256"]["records.csv"] == file_sha256(rep.csv));
  REQUIRE(rep.plots.size() == 1);
  CHECK(slurp(rep.plots.front()) == "# time min_margin\n0 0.25\n");

  CHECK_THROWS(emit_report({}, {}, dir, json::object(), "x"));
  CHECK_THROWS(emit_report(one, {}, "/proc/closedsys_cannot_write_here", json::object(), "x"));
}

TEST_CASE("sweep reports carry per-point series and the sup-over-time curve", "[report]") {
  const auto c = parse_config(R"({"experiment": "model2.gap_check", "params": {"modes": 4, "n_max": 2},
    "sweep": {"param": "lambda0", "values": [0.01, 0.02, 0.05]},
    "fits": [{"metric": "max_residual", "axis": "lambda0", "criterion": "7"}]})");
  SweepOptions so;
  so.out_dir = scratch("sweep_report");
  const auto o = execute(c, so);
  CHECK(fs::exists(so.out_dir / "plots" / "min_margin_sup_vs_lambda0.dat"));
  CHECK(fs::exists(so.out_dir / "plots" / "min_margin_lambda0=0.01.dat"));
  CHECK(fs::exists(so.out_dir / "config.json"));
  REQUIRE(o.fits.size() == 1);
  const auto s = json::parse(slurp(o.report.summary));
  CHECK(s["fits"][0]["criterion"] == "7");
  CHECK(s["config_hash"] == c.short_hash());
  // The echoed config reloads to the same hash; a tampered echo is caught.
  CHECK(load_config(so.out_dir / "config.json").hash() == c.hash());
  auto echo = json::parse(slurp(so.out_dir / "config.json"));
  echo["params"]["lambda0"] = 0.2;
  CHECK_THAT(config_error(echo.dump()), ContainsSubstring("config_hash"));
}

TEST_CASE("the output root follows the environment", "[output]") {
  const auto c = parse_config(R"({"experiment": "model2.gap_check"})");
  ::setenv(kOutputRootEnv, "/tmp/closedsys_root", 1);
  CHECK(output_dir(c) == fs::path("/tmp/closedsys_root") / ("model2.gap_check-" + c.short_hash()));
  ::unsetenv(kOutputRootEnv);
  CHECK(output_root() == fs::path("results"));
  const auto named = parse_config(R"({"experiment": "model2.gap_check", "output": "/abs/place"})");
  CHECK(output_dir(named) == fs::path("/abs/place"));
}

#ifdef CLOSEDSYS_CONFIG_DIR
TEST_CASE("the shipped schema matches the registry and every shipped config loads", "[config]") {
  const fs::path dir = CLOSEDSYS_CONFIG_DIR;
  CHECK(json::parse(slurp(dir / "experiment_config.schema.json")) == config_schema());
  std::size_t n = 0;
  for (const auto& sub : {dir / "acceptance", dir / "examples"})
    for (const auto& e : fs::directory_iterator(sub))
      if (e.path().extension() == ".json") {
        INFO(e.path().string());
        CHECK_NOTHROW(load_config(e.path()));
        ++n;
      }
  CHECK(n > 20);
}
#endif
