// closedsys_cli.cpp — command-line front end: run, sweep, fit, report, verify
#include "closedsys/acceptance.hpp"
#include "closedsys/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

namespace fs = std::filesystem;
namespace hs = closedsys::harness;
namespace acc = closedsys::acceptance;

#ifndef CLOSEDSYS_CONFIG_DIR
#define CLOSEDSYS_CONFIG_DIR "configs"
#endif

void log_line(const std::string& s) { std::cerr << s << std::endl; }

void print_fits(const std::vector<hs::FitResult>& fits) {
  for (const auto& f : fits) {
    if (!f.error.empty()) {
      std::cout << "fit " << f.metric << " vs " << f.axis << ": " << f.verdict << " (" << f.error << ")\n";
      continue;
    }
    std::cout << "fit " << f.metric << " vs " << f.axis << ": slope " << hs::format_number(f.slope) << ", intercept "
              << hs::format_number(f.intercept) << ", rms " << hs::format_number(f.rms) << ", " << f.points << " points, " << f.verdict;
    if (!f.criterion.empty()) std::cout << " (criterion " << f.criterion << ")";
    std::cout << '\n';
  }
}

int run_config(const std::string& path, bool sweep, unsigned jobs, const std::string& out, bool fresh) {
  auto cfg = hs::load_config(path);
  if (!sweep && cfg.sweep) {
    // `run` executes the base point only.
    cfg.sweep.reset();
    cfg.fits.erase(std::remove_if(cfg.fits.begin(), cfg.fits.end(), [](const hs::FitSpec& f) { return f.axis != "time"; }), cfg.fits.end());
  }
  hs::SweepOptions so;
  so.jobs = jobs;
  so.resume = !fresh;
  so.log = log_line;
  if (!out.empty()) so.out_dir = out;
  const auto o = hs::execute(cfg, so);
  std::cout << "config " << cfg.short_hash() << ": " << o.sweep.points << " points (" << o.sweep.resumed << " resumed), "
            << o.sweep.records.size() << " records\n";
  for (const auto& f : o.sweep.failures) std::cout << "failed point: " << f << '\n';
  print_fits(o.fits);
  std::cout << "wrote " << o.report.csv.string() << " and " << o.report.summary.string() << '\n';
  return o.ok ? 0 : 1;
}

int fit_records(const std::string& csv, const std::string& metric, const std::string& axis, std::optional<double> lo,
                std::optional<double> hi) {
  closedsys::RecordList recs;
  for (const auto& row : hs::read_csv(csv)) recs.push_back(row.rec);
  const auto f = hs::fit_power_law(recs, metric, axis, lo, hi);
  print_fits({f});
  return f.verdict == "fail" || !f.error.empty() ? 1 : 0;
}

int report_dir(const fs::path& dir) {
  const fs::path cfg_path = dir / "config.json";
  std::string hash;
  nlohmann::json echo = nlohmann::json::object();
  std::vector<hs::FitResult> fits;
  closedsys::RecordList recs;
  const auto rows = hs::read_csv(dir / "records.csv");
  for (const auto& row : rows) {
    recs.push_back(row.rec);
    hash = row.config_hash;
  }
  std::vector<std::string> failures;
  for (const auto& r : recs)
    if (r.metric == hs::kFailedMetric) failures.push_back(r.sweep_param + " = " + hs::format_number(r.sweep_value) + " failed");
  if (fs::exists(cfg_path)) {
    const auto cfg = hs::load_config(cfg_path);
    echo = cfg.to_json();
    fits = hs::configured_fits(cfg, recs);
  }
  const auto rep = hs::emit_report(recs, fits, dir, echo, hash, failures);
  print_fits(fits);
  std::cout << "wrote " << rep.summary.string() << " and " << rep.plots.size() << " plot files\n";
  return rep.all_pass ? 0 : 1;
}

int verify(const std::string& config_dir, const std::string& out, unsigned jobs, const std::vector<int>& only, bool determinism) {
  acc::Options opt;
  opt.config_dir = config_dir;
  opt.out_dir = out;
  opt.jobs = jobs;
  opt.only = {only.begin(), only.end()};
  opt.determinism = determinism;
  opt.log = log_line;
  const auto res = acc::run_battery(opt);
  for (const auto& r : res.results) std::cout << acc::format_result(r);
  std::cout << (res.all_pass() ? "all criteria pass" : "some criteria fail") << '\n';
  return res.all_pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-subsystem simulation harness"};
  app.require_subcommand(1);
  unsigned jobs = hs::default_jobs();
  app.add_option("--jobs,-j", jobs, "parallel sweep points (default: available cores)")->check(CLI::PositiveNumber);

  std::string config, out;
  bool fresh = false;
  auto* run = app.add_subcommand("run", "run the base point of a config (any sweep is ignored)");
  run->add_option("config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out,-o", out, "output directory (default: <output root>/<output or experiment-hash>)");
  run->add_flag("--fresh", fresh, "ignore previously journaled points");
  auto* sweep = app.add_subcommand("sweep", "run every sweep point of a config and fit the configured power laws");
  sweep->add_option("config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out,-o", out, "output directory");
  sweep->add_flag("--fresh", fresh, "ignore previously journaled points");

  std::string csv, metric, axis;
  std::optional<double> min_slope, max_slope;
  auto* fit = app.add_subcommand("fit", "log-log least-squares slope of one metric from a records CSV");
  fit->add_option("records", csv, "records.csv")->required()->check(CLI::ExistingFile);
  fit->add_option("--metric,-m", metric, "metric name")->required();
  fit->add_option("--axis,-a", axis, "\"time\" or the sweep parameter")->required();
  fit->add_option("--min-slope", min_slope, "lower bound for a pass verdict");
  fit->add_option("--max-slope", max_slope, "upper bound for a pass verdict");

  std::string dir;
  auto* report = app.add_subcommand("report", "rebuild summary.json and plot files from a run directory");
  report->add_option("dir", dir, "directory holding records.csv (and config.json)")->required()->check(CLI::ExistingDirectory);

  std::string config_dir = fs::path(CLOSEDSYS_CONFIG_DIR) / "acceptance";
  std::string verify_out = (hs::output_root() / "acceptance").string();
  std::vector<int> only;
  bool no_determinism = false;
  auto* ver = app.add_subcommand("verify", "run the full acceptance battery");
  ver->add_option("--configs", config_dir, "directory of acceptance configs")->check(CLI::ExistingDirectory);
  ver->add_option("--out,-o", verify_out, "battery output directory");
  ver->add_option("--only", only, "run only these criteria (1-12)")->check(CLI::Range(1, 12));
  ver->add_flag("--no-determinism", no_determinism, "skip the rerun that checks byte-identical records");

  auto* schema = app.add_subcommand("schema", "print the JSON Schema of experiment configs");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return run_config(config, false, jobs, out, fresh);
    if (*sweep) return run_config(config, true, jobs, out, fresh);
    if (*fit) return fit_records(csv, metric, axis, min_slope, max_slope);
    if (*report) return report_dir(dir);
    if (*schema) {
      std::cout << hs::config_schema().dump(2) << '\n';
      return 0;
    }
    if (*ver) return verify(config_dir, verify_out, jobs, only, !no_determinism);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
