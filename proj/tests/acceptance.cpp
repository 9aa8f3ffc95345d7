// acceptance.cpp — runs the acceptance battery and prints one verdict line per criterion
#include "closedsys/acceptance.hpp"

#include <CLI11.hpp>

#include <iostream>

#ifndef CLOSEDSYS_CONFIG_DIR
#define CLOSEDSYS_CONFIG_DIR "configs"
#endif

int main(int argc, char** argv) {
  namespace acc = closedsys::acceptance;
  CLI::App app{"Acceptance battery"};
  acc::Options opt;
  opt.config_dir = std::filesystem::path(CLOSEDSYS_CONFIG_DIR) / "acceptance";
  std::string out = "acceptance_out", configs = opt.config_dir.string();
  std::vector<int> only;
  unsigned jobs = closedsys::harness::default_jobs();
  bool verbose = false;
  app.add_option("--out", out, "output directory for records and verdicts");
  app.add_option("--configs", configs, "directory of acceptance configs")->check(CLI::ExistingDirectory);
  app.add_option("--jobs", jobs, "parallel sweep points")->check(CLI::PositiveNumber);
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 12));
  app.add_flag("--verbose,-v", verbose, "print every check and progress messages");
  CLI11_PARSE(app, argc, argv);

  opt.out_dir = out;
  opt.config_dir = configs;
  opt.jobs = jobs;
  opt.only = {only.begin(), only.end()};
  if (verbose) opt.log = [](const std::string& s) { std::cerr << s << std::endl; };

  acc::BatteryResult res;
  try {
    res = acc::run_battery(opt);
  } catch (const std::exception& e) {
    std::cerr << "acceptance battery aborted: " << e.what() << '\n';
    return 2;
  }
  for (const auto& r : res.results) {
    std::cout << (r.pass() ? "PASS" : "FAIL") << " criterion " << r.id << ": " << r.title << '\n';
    if (verbose || !r.pass())
      for (const auto& c : r.checks) std::cout << "    [" << (c.pass ? "ok" : "FAIL") << "] " << c.name << ": " << c.detail << '\n';
  }
  std::cout << (res.all_pass() ? "all criteria pass" : "some criteria fail") << " (details in " << (opt.out_dir / "verdicts.json").string()
            << ")\n";
  return res.all_pass() ? 0 : 1;
}
