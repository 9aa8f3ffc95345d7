// acceptance.hpp — acceptance battery: runs the shipped configs and judges each criterion from the emitted CSV records
#pragma once

#include "closedsys/fit.hpp"
#include "closedsys/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace closedsys::acceptance {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct CriterionResult {
  int id = 0;
  std::string title;
  std::vector<Check> checks;
  double seconds = 0.0;
  bool pass() const {
    if (checks.empty()) return false;
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
  json to_json() const {
    json cl = json::array();
    for (const auto& c : checks) cl.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    return {{"criterion", id}, {"title", title}, {"pass", pass()}, {"seconds", seconds}, {"checks", cl}};
  }
};

// Records of every executed config, keyed by config file stem, as read back from records.csv.
struct Outputs {
  std::map<std::string, RecordList> records;
  std::map<std::string, double> seconds;
  std::map<std::string, std::string> errors;

  bool has(const std::string& stem) const { return records.count(stem) != 0; }

  const RecordList& at(const std::string& stem) const {
    auto it = records.find(stem);
    if (it == records.end()) {
      auto e = errors.find(stem);
      throw std::runtime_error("no records for " + stem + (e != errors.end() ? ": " + e->second : ""));
    }
    return it->second;
  }

  std::vector<ExperimentRecord> series(const std::string& stem, const std::string& metric) const {
    std::vector<ExperimentRecord> out;
    for (const auto& r : at(stem))
      if (r.metric == metric) out.push_back(r);
    if (out.empty()) throw std::runtime_error(stem + ": no '" + metric + "' records");
    return out;
  }

  double max_value(const std::string& stem, const std::string& metric) const {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& r : series(stem, metric)) m = std::max(m, r.value);
    return m;
  }

  double scalar(const std::string& stem, const std::string& metric) const {
    const auto s = series(stem, metric);
    if (s.size() != 1) throw std::runtime_error(stem + ": expected one '" + metric + "' record, found " + std::to_string(s.size()));
    return s.front().value;
  }

  // Sweep value -> max over time.
  std::vector<std::pair<double, double>> sup_by_point(const std::string& stem, const std::string& metric) const {
    return harness::axis_samples(at(stem), metric, series(stem, metric).front().sweep_param);
  }

  double seconds_of(const std::string& stem) const {
    auto it = seconds.find(stem);
    return it == seconds.end() ? 0.0 : it->second;
  }
};

// Maps a base config stem to the stem actually judged (criterion 11 swaps in refined runs).
using StemMap = std::function<std::string(const std::string&)>;
inline std::string identity_stem(const std::string& s) { return s; }

struct Criterion {
  int id = 0;
  std::string title;
  std::vector<std::string> configs;   // timed against the budget
  std::vector<std::string> dependencies;  // also needed, timed elsewhere
  double budget_seconds = 0.0;
  bool budget_each = false;  // budget applies to every config rather than their sum
  std::function<std::vector<Check>(const Outputs&)> evaluate;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string fmt_list(const std::vector<std::pair<double, double>>& s) {
  std::string o = "[";
  for (std::size_t i = 0; i < s.size(); ++i) o += (i ? ", " : "") + fmt(s[i].first) + ": " + fmt(s[i].second);
  return o + "]";
}

inline Check bound(const std::string& name, double v, double lo, double hi) {
  const bool ok = v >= lo && v <= hi;
  std::string range = std::isinf(lo) ? "<= " + fmt(hi) : std::isinf(hi) ? ">= " + fmt(lo) : "in [" + fmt(lo) + ", " + fmt(hi) + "]";
  return {name, ok, fmt(v) + " (required " + range + ")"};
}
inline Check at_most(const std::string& name, double v, double hi) { return bound(name, v, -INFINITY, hi); }
inline Check at_least(const std::string& name, double v, double lo) { return bound(name, v, lo, INFINITY); }

inline Check decreasing(const std::string& name, const std::vector<std::pair<double, double>>& s, std::size_t min_points) {
  std::vector<double> ys;
  for (const auto& p : s) ys.push_back(p.second);
  const bool ok = s.size() >= min_points && strictly_decreasing(ys);
  return {name, ok, fmt_list(s) + (s.size() < min_points ? " (too few points)" : "")};
}

inline Check slope_check(const std::string& name, const Outputs& o, const std::string& stem, const std::string& metric,
                         std::optional<double> lo, std::optional<double> hi, const std::string& criterion) {
  const auto& recs = o.at(stem);
  const auto axis = o.series(stem, metric).front().sweep_param;
  const auto f = harness::fit_power_law(recs, metric, axis, lo, hi, criterion);
  std::string detail = f.error.empty() ? "slope " + fmt(f.slope) + " over " + std::to_string(f.points) + " points, rms " + fmt(f.rms) : f.error;
  if (lo || hi) detail += " (required " + (lo ? fmt(*lo) : std::string("-inf")) + " <= slope <= " + (hi ? fmt(*hi) : std::string("inf")) + ")";
  return {name, f.verdict == "pass", detail};
}

inline double fitted_slope(const Outputs& o, const std::string& stem, const std::string& metric) {
  const auto axis = o.series(stem, metric).front().sweep_param;
  const auto f = harness::fit_power_law(o.at(stem), metric, axis);
  if (!f.error.empty()) throw std::runtime_error(stem + ": " + f.error);
  return f.slope;
}

// Wraps an evaluation so that a missing record turns into a failed check instead of an abort.
inline std::vector<Check> guarded(const std::function<std::vector<Check>()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return {{"records", false, e.what()}};
  }
}

// ---- criteria 6 to 8, parameterized by the stems they read ----------------------------------

inline std::vector<Check> fock_checks(const Outputs& o, const StemMap& m) {
  const auto s = m("c06_fock_algebra");
  return {at_most("CCR defect below the cutoff", o.scalar(s, "ccr_defect"), 1e-11),
          at_most("partition isometry defect", o.scalar(s, "isometry_defect"), 1e-11),
          at_most("partition adjoint identity defect", o.scalar(s, "adjoint_defect"), 1e-11),
          at_most("pull-through residual", o.scalar(s, "pull_through_residual"), 1e-11),
          at_most("field bound constant", o.scalar(s, "field_bound_constant"), 1.01)};
}

inline std::vector<Check> gap_checks(const Outputs& o, const StemMap& m) {
  const auto s = m("c07_gap");
  return {at_least("minimum gap margin", o.scalar(s, "min_margin"), 0.0), at_most("ground-state residual", o.scalar(s, "max_residual"), 1e-9),
          bound("grid samples", o.scalar(s, "samples"), 25, 25)};
}

inline std::vector<Check> localization_checks(const Outputs& o, const StemMap& m) {
  return {slope_check("free-field cutoff commutator slope", o, m("c08_free_field"), "free_field", -1.3, -0.7, "8"),
          slope_check("far-field coupling slope (delta = 1)", o, m("c08_far_coupling"), "far_coupling", -1.4, -0.6, "8"),
          decreasing("photon localization defect decreasing in d", o.sup_by_point(m("c08_photon_localization"), "defect"), 3),
          decreasing("localized initial state defect decreasing in d", o.sup_by_point(m("c08_localized_state"), "defect"), 3)};
}

// Scalars that summarize criteria 6 to 8. Roundoff-level defects are left out: their relative shift is noise.
inline std::map<std::string, double> headline_values(const Outputs& o, const StemMap& m) {
  return {{"field bound constant", o.scalar(m("c06_fock_algebra"), "field_bound_constant")},
          {"minimum relative gap margin", o.scalar(m("c07_gap"), "min_relative_margin")},
          {"free-field commutator slope", fitted_slope(o, m("c08_free_field"), "free_field")},
          {"far-field coupling slope", fitted_slope(o, m("c08_far_coupling"), "far_coupling")},
          {"photon localization defect slope", fitted_slope(o, m("c08_photon_localization"), "defect")},
          {"localized initial state defect slope", fitted_slope(o, m("c08_localized_state"), "defect")}};
}

inline double relative_shift(double base, double refined) {
  const double scale = std::max(std::abs(base), std::abs(refined));
  return scale < 1e-300 ? 0.0 : std::abs(refined - base) / std::abs(base == 0.0 ? scale : base);
}

// Least-squares coefficients of err(t) = a t + b t^2 over 0 < t <= horizon.
inline std::vector<double> short_time_coefficients(const std::vector<ExperimentRecord>& s, double horizon) {
  std::vector<double> ts, ys;
  for (const auto& r : s)
    if (r.time > 0.0 && r.time <= horizon + 1e-12) {
      ts.push_back(r.time);
      ys.push_back(r.value);
    }
  return fit_monomials(ts, ys, {1, 2});
}

}  // namespace detail

inline const std::vector<std::string>& refinement_tags() {
  static const std::vector<std::string> t = {"nmax", "modes"};
  return t;
}

// "c08_free_field" + "nmax" -> "c11_free_field_nmax".
inline std::string refined_stem(const std::string& base, const std::string& tag) { return "c11" + base.substr(3) + "_" + tag; }

inline const std::vector<std::string>& refinable_stems() {
  static const std::vector<std::string> s = {"c06_fock_algebra", "c07_gap", "c08_free_field", "c08_far_coupling", "c08_photon_localization",
                                            "c08_localized_state"};
  return s;
}

inline std::vector<Criterion> criteria() {
  using namespace detail;
  std::vector<Criterion> c;
  c.push_back({1, "Exact decoupling oracle", {"c01_model1_decoupled", "c01_model2_decoupled"}, {}, 120.0, true, [](const Outputs& o) {
                 return guarded([&] {
                   const auto s1 = o.series("c01_model1_decoupled", "deviation");
                   const auto s2 = o.series("c01_model2_decoupled", "error");
                   return std::vector<Check>{at_most("model1 deviation, t <= 20", o.max_value("c01_model1_decoupled", "deviation"), 1e-6),
                                             at_least("model1 horizon", s1.back().time, 20.0),
                                             at_most("model2 closed-system error, t <= 20", o.max_value("c01_model2_decoupled", "error"), 1e-6),
                                             at_least("model2 horizon", s2.back().time, 20.0)};
                 });
               }});
  c.push_back({2, "No-signaling identity", {"c02_no_signaling"}, {}, 300.0, false, [](const Outputs& o) {
                 return guarded([&] {
                   const std::string s = "c02_no_signaling";
                   double spin_gap = 0.0;
                   for (const char* ax : {"x", "y", "z"}) {
                     const auto a = o.series(s, std::string("setting0_spin_") + ax), b = o.series(s, std::string("setting1_spin_") + ax);
                     if (a.size() != b.size()) throw std::runtime_error("setting series differ in length");
                     for (std::size_t i = 0; i < a.size(); ++i) spin_gap = std::max(spin_gap, std::abs(a[i].value - b[i].value));
                   }
                   return std::vector<Check>{at_most("largest difference of unconditioned P observables", o.max_value(s, "max_setting_difference"), 1e-10),
                                             at_most("largest spin difference, recomputed from the series", spin_gap, 1e-10)};
                 });
               }});
  c.push_back({3, "Closed-subsystem deviation scaling", {"c03_deviation_sweep"}, {}, 1200.0, false, [](const Outputs& o) {
                 return guarded([&] {
                   return std::vector<Check>{decreasing("sup_t deviation decreasing in d", o.sup_by_point("c03_deviation_sweep", "deviation"), 4),
                                             slope_check("sup_t deviation slope", o, "c03_deviation_sweep", "deviation", std::nullopt, -0.5, "3")};
                 });
               }});
  c.push_back({4, "Conditioned against unconditioned spin", {"c04_far_spin", "c04_toy"}, {}, 300.0, false, [](const Outputs& o) {
                 return guarded([&] {
                   // Worst conditioned value after t = 0.
                   std::optional<double> cond;
                   for (const auto& r : o.series("c04_toy", "setting0_conditioned_spin"))
                     if (r.time > 0.0 && (!cond || std::abs(r.value + 0.5) > std::abs(*cond + 0.5))) cond = r.value;
                   if (!cond) throw std::runtime_error("c04_toy: no conditioned spin after t = 0");
                   return std::vector<Check>{at_most("unconditioned |<S_P>| at the largest d", o.max_value("c04_far_spin", "setting0_spin_magnitude"), 0.05),
                                             bound("conditioned spin after filter passage", *cond, -0.6, -0.4)};
                 });
               }});
  c.push_back({5, "Stationary-phase decay outside the doubled cone", {"c05_free_propagation"}, {}, 300.0, false, [](const Outputs& o) {
                 return guarded([&] {
                   return std::vector<Check>{at_most("fitted constant kappa", o.scalar("c05_free_propagation", "kappa_max"), 10.0),
                                             at_least("fitted radial exponent", o.scalar("c05_free_propagation", "radial_exponent"), 3.5)};
                 });
               }});
  c.push_back({6, "Fock algebra exactness", {"c06_fock_algebra"}, {}, 60.0, false,
               [](const Outputs& o) { return guarded([&] { return fock_checks(o, identity_stem); }); }});
  c.push_back({7, "Gap inequality", {"c07_gap"}, {}, 300.0, false,
               [](const Outputs& o) { return guarded([&] { return gap_checks(o, identity_stem); }); }});
  c.push_back({8, "Localization slope battery",
               {"c08_free_field", "c08_far_coupling", "c08_photon_localization", "c08_localized_state"}, {}, 600.0, false,
               [](const Outputs& o) { return guarded([&] { return localization_checks(o, identity_stem); }); }});
  c.push_back({9, "Effective dynamics", {"c09_effective", "c09_control"}, {}, 600.0, false, [](const Outputs& o) {
                 return guarded([&] {
                   return std::vector<Check>{slope_check("max_t error slope against eps", o, "c09_effective", "error", 0.7, 1.3, "9"),
                                             at_most("zero-potential control error", o.max_value("c09_control", "error"), 1e-8)};
                 });
               }});
  c.push_back({10, "Closed-system error trend", {"c10_isolated"}, {}, 1200.0, false, [](const Outputs& o) {
                 return guarded([&] {
                   const std::string s = "c10_isolated";
                   std::map<double, std::vector<ExperimentRecord>> by_d;
                   for (const auto& r : o.series(s, "error")) by_d[r.sweep_value].push_back(r);
                   std::vector<std::pair<double, double>> at5, lin, quad;
                   for (const auto& [d, rs] : by_d) {
                     for (const auto& r : rs)
                       if (std::abs(r.time - 5.0) < 1e-9) at5.emplace_back(d, r.value);
                     const auto cf = short_time_coefficients(rs, 5.0);
                     lin.emplace_back(d, std::abs(cf[0]));
                     quad.emplace_back(d, std::abs(cf[1]));
                   }
                   return std::vector<Check>{decreasing("error at t = 5 decreasing in d", at5, 3),
                                             decreasing("|linear coefficient| of the short-time fit decreasing in d", lin, 3),
                                             decreasing("|quadratic coefficient| of the short-time fit decreasing in d", quad, 3)};
                 });
               }});
  {
    Criterion r{11, "Truncation-refinement stability", {}, {}, 1800.0, false, nullptr};
    for (const auto& tag : refinement_tags())
      for (const auto& b : refinable_stems()) r.configs.push_back(refined_stem(b, tag));
    r.dependencies = refinable_stems();
    r.evaluate = [](const Outputs& o) {
      return guarded([&] {
        std::vector<Check> out;
        using Fn = std::vector<Check> (*)(const Outputs&, const StemMap&);
        const std::vector<std::pair<std::string, Fn>> families = {{"Fock algebra", fock_checks}, {"gap inequality", gap_checks}, {"localization", localization_checks}};
        const auto base_head = headline_values(o, identity_stem);
        for (const auto& tag : refinement_tags()) {
          const StemMap m = [&](const std::string& s) { return refined_stem(s, tag); };
          for (const auto& [name, fn] : families) {
            const auto base = fn(o, identity_stem), ref = fn(o, m);
            bool same = base.size() == ref.size();
            std::string detail;
            for (std::size_t i = 0; same && i < base.size(); ++i) {
              if (base[i].pass != ref[i].pass) same = false;
              detail += (i ? "; " : "") + ref[i].name + ": " + ref[i].detail;
            }
            out.push_back({name + " verdicts unchanged (" + tag + ")", same, detail});
          }
          for (const auto& [key, v] : headline_values(o, m)) {
            const double shift = relative_shift(base_head.at(key), v);
            out.push_back({key + " shift (" + tag + ")", shift <= 0.2, fmt(base_head.at(key)) + " -> " + fmt(v) + ", relative shift " + fmt(shift) + " (required <= 0.2)"});
          }
        }
        return out;
      });
    };
    c.push_back(std::move(r));
  }
  return c;
}

struct Options {
  fs::path config_dir;
  fs::path out_dir = "acceptance_out";
  unsigned jobs = 0;
  std::set<int> only;        // empty runs every criterion
  bool determinism = true;   // criterion 12: rerun everything into a second root and compare CSV bytes
  std::function<void(const std::string&)> log;
};

struct BatteryResult {
  std::vector<CriterionResult> results;
  bool all_pass() const {
    if (results.empty()) return false;
    for (const auto& r : results)
      if (!r.pass()) return false;
    return true;
  }
  json to_json() const {
    json j = json::array();
    for (const auto& r : results) j.push_back(r.to_json());
    return {{"all_pass", all_pass()}, {"criteria", j}};
  }
};

namespace detail {

inline std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Sets the output root for the lifetime of the guard, so ground tables are cached under it.
class OutputRootGuard {
 public:
  explicit OutputRootGuard(const fs::path& root) {
    if (const char* v = std::getenv(harness::kOutputRootEnv)) saved_ = v;
    ::setenv(harness::kOutputRootEnv, root.string().c_str(), 1);
  }
  ~OutputRootGuard() {
    if (saved_) ::setenv(harness::kOutputRootEnv, saved_->c_str(), 1);
    else ::unsetenv(harness::kOutputRootEnv);
  }
  OutputRootGuard(const OutputRootGuard&) = delete;
  OutputRootGuard& operator=(const OutputRootGuard&) = delete;

 private:
  std::optional<std::string> saved_;
};

// Runs the named configs from scratch under `root`; returns the records read back from disk.
inline Outputs run_configs(const std::vector<std::string>& stems, const fs::path& config_dir, const fs::path& root, unsigned jobs,
                           const std::function<void(const std::string&)>& log) {
  OutputRootGuard guard(root);
  Outputs out;
  for (const auto& stem : stems) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto cfg = harness::load_config(config_dir / (stem + ".json"));
      harness::SweepOptions so;
      so.jobs = jobs;
      so.out_dir = root / stem;
      so.resume = false;
      const auto res = harness::execute(cfg, so);
      RecordList recs;
      for (const auto& row : harness::read_csv(res.report.csv)) recs.push_back(row.rec);
      out.records[stem] = std::move(recs);
      if (!res.sweep.failures.empty()) {
        std::string msg;
        for (const auto& f : res.sweep.failures) msg += f + "; ";
        out.errors[stem] = msg;
      }
    } catch (const std::exception& e) {
      out.errors[stem] = e.what();
    }
    out.seconds[stem] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) log(stem + ": " + fmt(out.seconds[stem]) + " s" + (out.errors.count(stem) ? " (error: " + out.errors[stem] + ")" : ""));
  }
  return out;
}

}  // namespace detail

// Runs the battery. Each criterion is judged only from the records.csv files written under out_dir.
inline BatteryResult run_battery(const Options& opt) {
  using namespace detail;
  const auto all = criteria();
  std::vector<std::string> stems;
  std::set<std::string> seen;
  auto want = [&](int id) { return opt.only.empty() || opt.only.count(id); };
  for (const auto& c : all) {
    if (!want(c.id)) continue;
    for (const auto* list : {&c.dependencies, &c.configs})
      for (const auto& s : *list)
        if (seen.insert(s).second) stems.push_back(s);
  }

  fs::create_directories(opt.out_dir);
  const Outputs out = run_configs(stems, opt.config_dir, opt.out_dir / "run1", opt.jobs, opt.log);

  BatteryResult res;
  for (const auto& c : all) {
    if (!want(c.id)) continue;
    CriterionResult cr{c.id, c.title, {}, 0.0};
    for (const auto& s : c.configs) {
      if (out.errors.count(s)) cr.checks.push_back({s + " ran without failures", false, out.errors.at(s)});
      cr.seconds += out.seconds_of(s);
    }
    for (auto& ch : c.evaluate(out)) cr.checks.push_back(std::move(ch));
    if (c.budget_each) {
      for (const auto& s : c.configs) cr.checks.push_back(at_most("runtime of " + s + " [s]", out.seconds_of(s), c.budget_seconds));
    } else {
      cr.checks.push_back(at_most("runtime [s]", cr.seconds, c.budget_seconds));
    }
    res.results.push_back(std::move(cr));
  }

  if (opt.determinism && (opt.only.empty() || opt.only.count(12))) {
    CriterionResult cr{12, "Determinism", {}, 0.0};
    if (opt.log) opt.log("rerunning every config for the determinism check");
    const auto t0 = std::chrono::steady_clock::now();
    run_configs(stems, opt.config_dir, opt.out_dir / "run2", opt.jobs, opt.log);
    cr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& s : stems) {
      const fs::path a = opt.out_dir / "run1" / s / "records.csv", b = opt.out_dir / "run2" / s / "records.csv";
      try {
        const bool same = read_bytes(a) == read_bytes(b);
        cr.checks.push_back({s + " records.csv byte-identical", same, same ? "sha256 " + harness::file_sha256(a) : "contents differ"});
      } catch (const std::exception& e) {
        cr.checks.push_back({s + " records.csv byte-identical", false, e.what()});
      }
    }
    res.results.push_back(std::move(cr));
  }

  std::ofstream(opt.out_dir / "verdicts.json", std::ios::binary | std::ios::trunc) << res.to_json().dump(2) << '\n';
  return res;
}

// One line per criterion, then one indented line per check.
inline std::string format_result(const CriterionResult& r) {
  std::string s = std::string(r.pass() ? "PASS" : "FAIL") + " criterion " + std::to_string(r.id) + ": " + r.title + " (" + detail::fmt(r.seconds) + " s)\n";
  for (const auto& c : r.checks) s += std::string("    [") + (c.pass ? "ok" : "FAIL") + "] " + c.name + ": " + c.detail + "\n";
  return s;
}

}  // namespace closedsys::acceptance
