// experiments.hpp — named experiments with typed parameters, each runnable at one sweep point
#pragma once

#include "closedsys/model1_experiments.hpp"
#include "closedsys/model2_dynamics.hpp"
#include "closedsys/record.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>

namespace closedsys::experiments {

using json = nlohmann::json;

enum class ParamKind { number, integer, boolean, string, vector, vector_list, number_list };

struct ParamSpec {
  std::string name;
  ParamKind kind = ParamKind::number;
  json default_value;
  std::string help;
  std::vector<std::string> choices;  // allowed values of string parameters
};

// Typed read access to a validated parameter object.
class Params {
 public:
  explicit Params(json j) : j_(std::move(j)) {}
  double num(const std::string& k) const { return j_.at(k).get<double>(); }
  int integer(const std::string& k) const { return j_.at(k).get<int>(); }
  bool flag(const std::string& k) const { return j_.at(k).get<bool>(); }
  std::string str(const std::string& k) const { return j_.at(k).get<std::string>(); }
  std::vector<double> list(const std::string& k) const { return j_.at(k).get<std::vector<double>>(); }
  model1::Vec3 vec(const std::string& k) const { return to_vec3(j_.at(k)); }
  std::vector<model1::Vec3> vecs(const std::string& k) const {
    std::vector<model1::Vec3> out;
    for (const auto& v : j_.at(k)) out.push_back(to_vec3(v));
    return out;
  }
  const json& raw() const { return j_; }

  static model1::Vec3 to_vec3(const json& v) {
    model1::Vec3 r{0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < v.size() && i < 3; ++i) r[i] = v[i].get<double>();
    return r;
  }

 private:
  json j_;
};

struct RunContext {
  std::vector<double> times;
  std::uint64_t seed = 0;
  std::filesystem::path cache_dir;  // ground-state table artifacts; empty disables caching
};

struct ExperimentSpec {
  std::string id;
  std::string description;
  std::vector<ParamSpec> params;
  bool uses_times = true;
  // Semantic checks beyond types; returns every violated condition.
  std::function<std::vector<std::string>(const Params&)> validate;
  std::function<RecordList(const Params&, const RunContext&)> run;

  const ParamSpec* find(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }
  json defaults() const {
    json d = json::object();
    for (const auto& p : params) d[p.name] = p.default_value;
    return d;
  }
};

namespace detail {

inline ParamSpec num(std::string n, double v, std::string h) { return {std::move(n), ParamKind::number, v, std::move(h), {}}; }
inline ParamSpec integer(std::string n, int v, std::string h) { return {std::move(n), ParamKind::integer, v, std::move(h), {}}; }
inline ParamSpec flag(std::string n, bool v, std::string h) { return {std::move(n), ParamKind::boolean, v, std::move(h), {}}; }
inline ParamSpec str(std::string n, std::string v, std::vector<std::string> choices, std::string h) {
  return {std::move(n), ParamKind::string, v, std::move(h), std::move(choices)};
}
inline ParamSpec vec(std::string n, std::vector<double> v, std::string h) { return {std::move(n), ParamKind::vector, v, std::move(h), {}}; }
inline ParamSpec vecs(std::string n, std::vector<std::vector<double>> v, std::string h) {
  return {std::move(n), ParamKind::vector_list, v, std::move(h), {}};
}
inline ParamSpec list(std::string n, std::vector<double> v, std::string h) {
  return {std::move(n), ParamKind::number_list, v, std::move(h), {}};
}

// Splits "QConfig validation failed:\n  - a\n  - b" into {"a", "b"}.
inline std::vector<std::string> split_validation(const std::string& msg) {
  std::vector<std::string> out;
  std::istringstream is(msg);
  std::string line;
  while (std::getline(is, line)) {
    const auto pos = line.find("- ");
    if (line.rfind("  - ", 0) == 0 && pos != std::string::npos) out.push_back(line.substr(pos + 2));
  }
  if (out.empty()) out.push_back(msg);
  return out;
}

// ---- model1 ----------------------------------------------------------------------------------

inline std::vector<ParamSpec> model1_params() {
  return {
      integer("grid_dim", 2, "spatial dimension of the lattice (2 or 3)"),
      integer("grid_points", 512, "points per axis, a power of two"),
      num("grid_spacing", 0.5, "lattice spacing"),
      vec("cone_axis", {1.0, 0.0, 0.0}, "unit axis of the momentum cone"),
      num("cone_half_angle", 0.6, "cone half-angle theta0 in radians, below pi/4"),
      num("cone_speed", 1.0, "speed floor v of the cone"),
      vec("cone_apex", {0.0, 0.0, 0.0}, "apex of the position-space cone"),
      vec("packet_momentum", {2.5, 0.0, 0.0}, "centre of the wave-packet envelope in momentum space"),
      num("packet_width", 0.185, "Gaussian width of the momentum envelope"),
      num("coupling", 1.0, "interaction strength g"),
      num("alpha", 3.0, "decay exponent of the interaction profile"),
      str("coupling_kind", "exchange", {"exchange", "zz"}, "spin coupling between P and a cell"),
      str("profile", "smooth", {"smooth", "cell_distance"}, "interaction profile shape"),
      num("core_radius", 3.0, "core radius of the smooth profile"),
      num("cell_side", 1.0, "side length of the cell"),
      integer("cell_levels", 2, "local dimension of the cell system"),
      num("cell_energy", 0.0, "level spacing of the cell system"),
      integer("cell_initial_level", 1, "initial level of the cell system"),
      num("d", 24.0, "distance between the cell and the doubled cone"),
      num("sum_constant", 1.0, "C in the summability condition sum_n d_n^((1-alpha)/2) <= C d^-beta"),
      num("sum_exponent", 1.0, "beta in the summability condition"),
      num("dt", 0.05, "largest split step"),
      integer("order", 2, "splitting order (2 or 4)"),
      num("boundary_tol", 1e-8, "largest tolerated amplitude in the edge layer"),
      integer("boundary_layer", 8, "edge layer width in sites"),
  };
}

inline model1::LatticeGrid m1_grid(const Params& p) { return {p.integer("grid_dim"), p.integer("grid_points"), p.num("grid_spacing")}; }

inline model1::ConeSpec m1_cone(const Params& p) {
  model1::ConeSpec c;
  c.axis = p.vec("cone_axis");
  c.half_angle = p.num("cone_half_angle");
  c.speed_floor = p.num("cone_speed");
  c.apex = p.vec("cone_apex");
  return c;
}

inline model1::QConfig m1_q(const Params& p, bool partner_and_filter) {
  model1::QConfig q;
  q.cone = m1_cone(p);
  q.coupling = p.num("coupling");
  q.decay_exponent = p.num("alpha");
  q.kind = p.str("coupling_kind") == "zz" ? model1::CouplingKind::zz : model1::CouplingKind::exchange;
  q.profile = p.str("profile") == "cell_distance" ? model1::ProfileKind::cell_distance : model1::ProfileKind::smooth;
  q.core_radius = p.num("core_radius");
  q.sum_constant = p.num("sum_constant");
  q.sum_exponent = p.num("sum_exponent");
  model1::CellSpec c;
  c.center = q.cone.apex;
  c.side = p.num("cell_side");
  c.local_dim = p.integer("cell_levels");
  c.energy = p.num("cell_energy");
  c.initial_level = p.integer("cell_initial_level");
  q.cells.push_back(c);
  q.partner_spin = partner_and_filter;
  q.filter = partner_and_filter;
  return q;
}

inline model1::RunOptions m1_options(const Params& p) {
  model1::RunOptions o;
  o.dt = p.num("dt");
  o.boundary_tol = p.num("boundary_tol");
  o.boundary_layer = p.integer("boundary_layer");
  o.order = p.integer("order");
  return o;
}

inline std::vector<std::string> m1_validate(const Params& p, bool partner_and_filter) {
  std::vector<std::string> errs;
  if (!(p.num("alpha") > 1.0)) errs.emplace_back("alpha: the interaction decay exponent must exceed 1 (summable power-law hypothesis)");
  if (!(p.num("d") > 0.0)) errs.emplace_back("d: cell distance must be positive");
  if (!(p.num("dt") > 0.0)) errs.emplace_back("dt: must be positive");
  if (p.integer("order") != 2 && p.integer("order") != 4) errs.emplace_back("order: must be 2 or 4");
  if (!(p.num("packet_width") > 0.0)) errs.emplace_back("packet_width: must be positive");
  if (!errs.empty()) return errs;
  try {
    const auto grid = m1_grid(p);
    grid.validate();
    const auto q = model1::place_cells_at_distance(m1_q(p, partner_and_filter), grid.dim, p.num("d"));
    model1::validate_qconfig(grid, q);
    if (!q.cone.momentum_inside(p.vec("packet_momentum"))) errs.emplace_back("packet_momentum: must lie strictly inside the momentum cone");
  } catch (const std::exception& e) {
    for (auto& s : split_validation(e.what())) errs.push_back(std::move(s));
  }
  return errs;
}

inline StateVector m1_packet(const Params& p, const model1::LatticeGrid& grid, const model1::ConeSpec& cone) {
  return model1::cone_wavepacket(grid, cone, p.vec("packet_momentum"), p.num("packet_width"));
}

inline ExperimentSpec model1_closed_subsystem() {
  ExperimentSpec s;
  s.id = "model1.closed_subsystem";
  s.description = "Deviation of a P-spin expectation from its isolated evolution, particle scattering past one cell of Q";
  s.params = model1_params();
  s.params.push_back(str("p_spin", "down", {"up", "down"}, "initial spin of P"));
  s.params.push_back(vec("observable_axis", {0.0, 0.0, 1.0}, "P observable S.n"));
  s.validate = [](const Params& p) { return m1_validate(p, false); };
  s.run = [](const Params& p, const RunContext& ctx) {
    const auto grid = m1_grid(p);
    const auto q = model1::place_cells_at_distance(m1_q(p, false), grid.dim, p.num("d"));
    const auto phi = m1_packet(p, grid, q.cone);
    const Vec spin = model1::basis_state(2, p.str("p_spin") == "up" ? 0 : 1);
    const auto psi0 = model1::attach_internal(phi, model1::product_internal(q, spin));
    const auto obs = model1::p_spin_observable(grid, p.vec("observable_axis"));
    RecordList recs = model1::run_closed_subsystem(grid, q, psi0, obs, ctx.times, {}, m1_options(p));
    return recs;
  };
  return s;
}

inline ExperimentSpec model1_no_signaling() {
  ExperimentSpec s;
  s.id = "model1.no_signaling";
  s.description = "Singlet pair with a spin filter on the partner: P-observable series for each filter setting";
  s.params = model1_params();
  s.params.push_back(vecs("filter_axes", {{0.0, 0.0, 1.0}, {1.0, 0.0, 0.0}}, "filter settings n"));
  s.params.push_back(num("filter_strength", M_PI / 2.0, "filter coupling lambda_D"));
  s.validate = [](const Params& p) {
    auto errs = m1_validate(p, true);
    const auto axes = p.vecs("filter_axes");
    if (axes.empty()) errs.emplace_back("filter_axes: at least one setting is required");
    for (const auto& a : axes)
      if (std::abs(model1::norm3(a) - 1.0) > 1e-12) errs.emplace_back("filter_axes: every axis must be a unit vector");
    return errs;
  };
  s.run = [](const Params& p, const RunContext& ctx) {
    const auto grid = m1_grid(p);
    auto q = model1::place_cells_at_distance(m1_q(p, true), grid.dim, p.num("d"));
    q.filter_strength = p.num("filter_strength");
    const auto phi = m1_packet(p, grid, q.cone);
    const auto psi0 = model1::attach_internal(phi, model1::singlet_internal(q));
    auto rep = model1::run_no_signaling(grid, q, psi0, p.vecs("filter_axes"), ctx.times, m1_options(p));
    // |<S_P>(t)| per setting, the quantity bounded at large separation.
    for (std::size_t a = 0; a < rep.spin.size(); ++a)
      for (std::size_t i = 0; i < ctx.times.size(); ++i)
        rep.records.push_back({"", "", 0.0, ctx.times[i], "setting" + std::to_string(a) + "_spin_magnitude", model1::norm3(rep.spin[a][i]), 0.0, 0.0});
    return rep.records;
  };
  return s;
}

inline ExperimentSpec model1_free_propagation() {
  ExperimentSpec s;
  s.id = "model1.free_propagation";
  s.description = "Free cone wave packet: decay bound outside the doubled cone with the spectral decay constant";
  s.params = model1_params();
  s.params.push_back(integer("decay_order", 4, "decay order p (>= 4)"));
  s.params.push_back(integer("rays", 16, "rays sampled outside the doubled cone"));
  s.params.push_back(num("fit_floor", 1e-10, "amplitudes below this fraction of the peak are left out of the exponent fit"));
  s.validate = [](const Params& p) {
    std::vector<std::string> errs;
    if (p.integer("decay_order") < 4) errs.emplace_back("decay_order: must be at least 4");
    if (!(p.num("fit_floor") > 0.0 && p.num("fit_floor") < 1.0)) errs.emplace_back("fit_floor: must lie in (0, 1)");
    try {
      m1_grid(p).validate();
      m1_cone(p).validate();
    } catch (const std::exception& e) {
      errs.emplace_back(e.what());
    }
    return errs;
  };
  s.run = [](const Params& p, const RunContext& ctx) {
    const auto grid = m1_grid(p);
    const auto cone = m1_cone(p);
    const auto phi = m1_packet(p, grid, cone);
    model1::FreePropagationOptions o;
    o.boundary_tol = p.num("boundary_tol");
    o.boundary_layer = p.integer("boundary_layer");
    o.rays = p.integer("rays");
    o.floor_relative = p.num("fit_floor");
    const auto rep = model1::verify_free_propagation(grid, phi, p.integer("decay_order"), cone, ctx.times, o);
    RecordList out = rep.records;
    out.push_back({"", "", 0.0, 0.0, "far_amplitude_t0", rep.far_amplitude_t0, 0.0, 0.0});
    return out;
  };
  return s;
}

// ---- model2 ----------------------------------------------------------------------------------

inline std::vector<ParamSpec> fiber_params(double lambda0, double nu, int modes, int n_max) {
  return {
      num("omega0", 1.0, "excited-level energy"),
      num("lambda0", lambda0, "atom-field coupling"),
      num("nu", nu, "momentum bound nu in (0, 1)"),
      integer("modes", modes, "number of photon modes"),
      integer("n_max", n_max, "total photon-number cutoff"),
      num("k_max", 1.0, "photon momentum range [-k_max, k_max]"),
      num("coupling_ceiling", 0.3, "empirical ceiling on |lambda0|"),
      num("tol", 1e-10, "eigensolver tolerance"),
  };
}

inline model2::FiberParams fiber_of(const Params& p) {
  model2::FiberParams f;
  f.omega0 = p.num("omega0");
  f.lambda0 = p.num("lambda0");
  f.nu = p.num("nu");
  f.modes = p.integer("modes");
  f.n_max = p.integer("n_max");
  f.k_max = p.num("k_max");
  f.coupling_ceiling = p.num("coupling_ceiling");
  return f;
}

inline std::vector<std::string> fiber_validate(const Params& p) {
  std::vector<std::string> errs;
  try {
    fiber_of(p).validate();
  } catch (const std::exception& e) {
    errs.emplace_back(e.what());
  }
  if (!(p.num("tol") > 0.0)) errs.emplace_back("tol: must be positive");
  return errs;
}

inline model2::GroundTable table_for(const model2::Fiber& f, const std::vector<double>& ps, double tol, const RunContext& ctx) {
  if (ctx.cache_dir.empty()) return model2::tabulate(f, ps, tol);
  std::filesystem::create_directories(ctx.cache_dir);
  return model2::cached_table(f, ps, tol, ctx.cache_dir);
}

inline std::vector<ParamSpec> atom_params(int points, double spacing, double radius) {
  return {integer("atom_points", points, "atom grid points"), num("atom_spacing", spacing, "atom grid spacing"),
          num("radius", radius, "support radius R of the atom profile")};
}

inline ExperimentSpec model2_closed_system_error() {
  ExperimentSpec s;
  s.id = "model2.closed_system_error";
  s.description = "Dressed atom next to a far qubit system: deviation of atom observables from the isolated dressed dynamics";
  s.params = fiber_params(0.1, 0.9, 24, 3);
  for (auto& a : atom_params(32, 4.0, 8.0)) s.params.push_back(a);
  s.params.push_back(num("q_energy", 1.0, "qubit level spacing"));
  s.params.push_back(num("q_field", 0.05, "strength of the Q-field coupling beyond the shell"));
  s.params.push_back(num("q_coupling", 0.05, "strength of the atom-Q potential"));
  s.params.push_back(num("beta", 2.0, "decay exponent of the atom-Q potential"));
  s.params.push_back(num("d", 4.0, "separation radius"));
  s.params.push_back(num("evolve_tol", 1e-9, "Krylov tolerance"));
  s.validate = [](const Params& p) {
    auto errs = fiber_validate(p);
    if (!(p.num("d") > 0.0)) errs.emplace_back("d: must be positive");
    if (!(p.num("radius") > 0.0)) errs.emplace_back("radius: must be positive");
    return errs;
  };
  s.run = [](const Params& p, const RunContext& ctx) {
    const model2::Fiber f(fiber_of(p));
    const auto g = model2::AtomGrid::make(p.integer("atom_points"), p.num("atom_spacing"));
    const auto tab = table_for(f, model2::window_momenta(g, p.num("nu")), p.num("tol"), ctx);
    const Vec u = model2::compact_profile(g, p.num("radius"));
    const auto q = model2::QModel::qubit(p.num("q_energy"), p.num("q_field"), p.num("q_coupling"), p.num("beta"));
    const auto r = model2::closed_system_error(f, g, tab, u, p.num("radius"), q, p.num("d"), ctx.times, p.num("evolve_tol"));
    RecordList out;
    for (std::size_t i = 0; i < r.times.size(); ++i)
      out.push_back({"", "", 0.0, r.times[i], "error", r.error[i], r.norm_drift[i], tab.max_residual()});
    return out;
  };
  return s;
}

inline ExperimentSpec model2_effective_dynamics() {
  ExperimentSpec s;
  s.id = "model2.effective_dynamics";
  s.description = "Dressed atom in a slowly varying potential against the effective one-body dynamics";
  s.params = fiber_params(0.1, 0.9, 16, 3);
  s.params.push_back(integer("atom_points", 128, "atom grid points"));
  s.params.push_back(num("atom_spacing", 8.0 * M_PI / 0.025 / 128.0, "atom grid spacing"));
  s.params.push_back(num("packet_width", 0.05, "momentum width of the band-limited atom profile"));
  s.params.push_back(num("potential", 0.005, "amplitude v0 of the potential v0 cos(eps x)"));
  s.params.push_back(num("eps", 0.05, "slowness parameter, a grid momentum in (0, 1)"));
  s.params.push_back(num("evolve_tol", 1e-10, "Krylov tolerance"));
  s.validate = [](const Params& p) {
    auto errs = fiber_validate(p);
    if (p.num("potential") != 0.0 && !(p.num("eps") > 0.0 && p.num("eps") < 1.0))
      errs.emplace_back("eps: the potential spectrum must lie inside the unit ball (0 < eps < 1)");
    return errs;
  };
  s.run = [](const Params& p, const RunContext& ctx) {
    const model2::Fiber f(fiber_of(p));
    const auto g = model2::AtomGrid::make(p.integer("atom_points"), p.num("atom_spacing"));
    const auto tab = table_for(f, g.p, p.num("tol"), ctx);
    const model2::FiberTransform tr(g, f);
    const Vec u = model2::band_limited_profile(g, p.num("packet_width"));
    const auto r = model2::effective_dynamics_error(tr, tab, u, p.num("potential"), p.num("eps"), ctx.times, p.num("evolve_tol"));
    RecordList out;
    for (std::size_t i = 0; i < r.times.size(); ++i) out.push_back({"", "", 0.0, r.times[i], "error", r.error[i], 0.0, tab.max_residual()});
    return out;
  };
  return s;
}

inline ExperimentSpec model2_gap_check() {
  ExperimentSpec s;
  s.id = "model2.gap_check";
  s.description = "Ground-energy gap margin E(p-k) - E(p) + |k| - (1-nu)/2 |k| over a (p, k) grid";
  s.uses_times = false;
  s.params = fiber_params(0.05, 0.5, 16, 3);
  s.params.push_back(list("p_samples", {-0.4, -0.2, 0.0, 0.2, 0.4}, "total momenta, |p| < nu"));
  s.params.push_back(list("k_samples", {-0.08, -0.04, 0.0, 0.04, 0.08}, "photon momenta, |k| < (1-nu)/6"));
  s.validate = [](const Params& p) {
    auto errs = fiber_validate(p);
    for (double x : p.list("p_samples"))
      if (!(std::abs(x) < p.num("nu"))) errs.emplace_back("p_samples: every |p| must be below nu");
    for (double k : p.list("k_samples"))
      if (!(std::abs(k) < (1.0 - p.num("nu")) / 6.0)) errs.emplace_back("k_samples: every |k| must be below (1 - nu)/6");
    return errs;
  };
  s.run = [](const Params& p, const RunContext&) {
    const model2::Fiber f(fiber_of(p));
    const auto r = model2::gap_check(f, p.list("p_samples"), p.list("k_samples"), p.num("tol"));
    // Margin per unit |k| over k != 0; the k = 0 samples pin the plain minimum at zero.
    double rel = std::numeric_limits<double>::infinity();
    for (const auto& smp : r.samples)
      if (smp.k != 0.0) rel = std::min(rel, smp.margin / std::abs(smp.k));
    if (!std::isfinite(rel)) rel = 0.0;
    return RecordList{{"", "", 0.0, 0.0, "min_margin", r.min_margin, 0.0, r.max_residual},
                      {"", "", 0.0, 0.0, "min_relative_margin", rel, 0.0, r.max_residual},
                      {"", "", 0.0, 0.0, "max_residual", r.max_residual, 0.0, r.max_residual},
                      {"", "", 0.0, 0.0, "samples", static_cast<double>(r.samples.size()), 0.0, 0.0}};
  };
  return s;
}

struct FockAlgebraReport {
  double ccr = 0.0;            // entrywise CCR defect below the cutoff
  double isometry = 0.0;       // max | |Gcheck psi| / |psi| - 1 |
  double adjoint = 0.0;        // relative defect of Gcheck^* = I o (Gamma(j0) (x) Gamma(jinf))
  double pull_through = 0.0;   // operator pull-through residual below the cutoff
  double field_bound = 0.0;    // max_f ||a#(f) (N+1)^{-1/2}|| / ||f||
};

inline FockAlgebraReport fock_algebra_battery(const model2::FiberParams& prm, double partition_cells, int trials, std::uint64_t seed) {
  using fock::FockSpace;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  auto rnd = [&](Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = cplx(nd(rng), nd(rng));
    return v;
  };
  FockAlgebraReport r;
  const int m = prm.modes;
  const FockSpace fs(m, prm.n_max);
  const auto n = static_cast<Eigen::Index>(fs.dim());
  Eigen::VectorXd below(n);
  for (Eigen::Index s = 0; s < n; ++s) below(s) = fs.number(static_cast<std::size_t>(s)) < fs.n_max() ? 1.0 : 0.0;
  for (int i = 0; i < m; ++i) {
    Vec ei = Vec::Zero(m);
    ei(i) = 1.0;
    const SpMat a = fock::annihilate(fs, ei).matrix;
    for (int j = 0; j < m; ++j) {
      Vec ej = Vec::Zero(m);
      ej(j) = 1.0;
      const SpMat c = fock::create(fs, ej).matrix;
      SpMat comm = a * c - c * a;
      if (i == j) comm -= SparseOperator::identity(fs.dim()).matrix;
      const SpMat masked = comm * SpMat(below.cast<cplx>().asDiagonal().toDenseMatrix().sparseView());
      for (Eigen::Index k = 0; k < masked.outerSize(); ++k)
        for (SpMat::InnerIterator it(masked, k); it; ++it) r.ccr = std::max(r.ccr, std::abs(it.value()));
    }
  }

  const fock::ModeSet ms = fock::ModeSet::uniform(m, prm.k_max);
  const auto pp = fock::partition_pair(ms, partition_cells * ms.position_spacing());
  const auto gc = fock::gamma_check(fs, pp);
  for (int t = 0; t < trials; ++t) {
    const Vec psi = rnd(n);
    r.isometry = std::max(r.isometry, std::abs(gc.apply(psi).norm() / psi.norm() - 1.0));
  }
  const std::size_t d = fs.dim();
  for (int t = 0; t < std::max(1, trials / 2); ++t) {
    Vec w = Vec::Zero(static_cast<Eigen::Index>(d * d));
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        if (fs.number(a) + fs.number(b) <= fs.n_max()) w(static_cast<Eigen::Index>(a * d + b)) = rnd(1)(0);
    r.adjoint = std::max(r.adjoint, (gc.adjoint(w) - fock::identification_after_partition(fs, pp, w)).norm() / w.norm());
  }

  const model2::Fiber f(prm);
  for (int j = 0; j < m; ++j) r.pull_through = std::max(r.pull_through, model2::pull_through_residual(f, 0.2 * prm.nu, j));

  Eigen::VectorXd weight(n);
  for (Eigen::Index s = 0; s < n; ++s) weight(s) = 1.0 / std::sqrt(fs.number(static_cast<std::size_t>(s)) + 1.0);
  const SpMat wdiag = weight.cast<cplx>().asDiagonal().toDenseMatrix().sparseView();
  for (int t = 0; t < 3; ++t) {
    const Vec fvec = rnd(m);
    for (const SpMat& op : {fock::annihilate(fs, fvec).matrix, fock::create(fs, fvec).matrix}) {
      const SpMat a = op * wdiag;
      const SpMat ad = a.adjoint();
      const double nrm = spectral_norm([&](const Vec& x, Vec& y) { y = a * x; }, [&](const Vec& x, Vec& y) { y = ad * x; }, fs.dim());
      r.field_bound = std::max(r.field_bound, nrm / fvec.norm());
    }
  }
  return r;
}

inline ExperimentSpec model2_fock_algebra() {
  ExperimentSpec s;
  s.id = "model2.fock_algebra";
  s.description = "Exactness of the truncated Fock algebra: CCR, partition isometry and adjoint, pull-through, field bound";
  s.uses_times = false;
  s.params = fiber_params(0.1, 0.5, 8, 3);
  s.params.push_back(num("partition_cells", 2.0, "partition radius in position-grid spacings"));
  s.params.push_back(integer("trials", 20, "random vectors per identity"));
  s.validate = [](const Params& p) {
    auto errs = fiber_validate(p);
    if (p.integer("trials") < 1) errs.emplace_back("trials: must be positive");
    return errs;
  };
  s.run = [](const Params& p, const RunContext& ctx) {
    const auto r = fock_algebra_battery(fiber_of(p), p.num("partition_cells"), p.integer("trials"), ctx.seed);
    return RecordList{{"", "", 0.0, 0.0, "ccr_defect", r.ccr, 0.0, 0.0},
                      {"", "", 0.0, 0.0, "isometry_defect", r.isometry, 0.0, 0.0},
                      {"", "", 0.0, 0.0, "adjoint_defect", r.adjoint, 0.0, 0.0},
                      {"", "", 0.0, 0.0, "pull_through_residual", r.pull_through, 0.0, 0.0},
                      {"", "", 0.0, 0.0, "field_bound_constant", r.field_bound, 0.0, 0.0}};
  };
  return s;
}

inline ExperimentSpec model2_commutator_scaling() {
  ExperimentSpec s;
  s.id = "model2.commutator_scaling";
  s.description = "Commutators of photon cutoffs with the free field and far-field coupling norms at radius d";
  s.uses_times = false;
  s.params = fiber_params(0.1, 0.5, 32, 3);
  s.params.push_back(num("d", 4.0 * M_PI, "cutoff radius"));
  s.params.push_back(num("delta", 1.0, "weight exponent delta in <x>^(-2+delta)"));
  s.params.push_back(flag("free_field", true, "measure the free-field cutoff commutator"));
  s.params.push_back(flag("far_coupling", false, "measure the far-field coupling norm"));
  s.validate = [](const Params& p) {
    auto errs = fiber_validate(p);
    const auto ms = fock::ModeSet::uniform(std::max(2, p.integer("modes")), p.num("k_max") > 0 ? p.num("k_max") : 1.0);
    try {
      fock::check_radius(ms, p.num("d"), p.flag("far_coupling") ? 2.0 : 1.0, "d");
    } catch (const std::exception& e) {
      errs.emplace_back(e.what());
    }
    return errs;
  };
  s.run = [](const Params& p, const RunContext&) {
    model2::ScalingOptions so;
    so.delta = p.num("delta");
    so.free_field = p.flag("free_field");
    so.far_coupling = p.flag("far_coupling");
    const auto r = model2::commutator_scaling_suite(fiber_of(p), {p.num("d")}, so);
    const auto& row = r.rows.front();
    RecordList out{{"", "", 0.0, 0.0, "one_particle", row.one_particle, 0.0, 0.0}};
    if (so.free_field) out.push_back({"", "", 0.0, 0.0, "free_field", row.free_field, 0.0, 0.0});
    if (so.far_coupling) out.push_back({"", "", 0.0, 0.0, "far_coupling", row.far_coupling, 0.0, 0.0});
    return out;
  };
  return s;
}

inline ExperimentSpec model2_photon_localization() {
  ExperimentSpec s;
  s.id = "model2.photon_localization";
  s.description = "Photon mass of a dressed atom outside |y| <= d";
  s.uses_times = false;
  s.params = fiber_params(0.1, 0.9, 32, 2);
  for (auto& a : atom_params(32, 2.0, 4.0)) s.params.push_back(a);
  s.params.push_back(num("d", 8.0, "localization radius"));
  s.validate = fiber_validate;
  s.run = [](const Params& p, const RunContext& ctx) {
    const model2::Fiber f(fiber_of(p));
    const auto g = model2::AtomGrid::make(p.integer("atom_points"), p.num("atom_spacing"));
    const auto tab = table_for(f, model2::window_momenta(g, p.num("nu")), p.num("tol"), ctx);
    const model2::FiberTransform tr(g, f);
    const Vec j = model2::dressed_state(tr, tab, model2::compact_profile(g, p.num("radius")));
    return RecordList{{"", "", 0.0, 0.0, "defect", model2::photon_localization(f.modes(), f.space(), j, p.num("d")), 0.0, tab.max_residual()}};
  };
  return s;
}

inline ExperimentSpec model2_localized_initial_state() {
  ExperimentSpec s;
  s.id = "model2.localized_initial_state";
  s.description = "Distance between the merged dressed-atom state with far photons and its localized approximation";
  s.uses_times = false;
  s.params = fiber_params(0.1, 0.9, 64, 1);
  for (auto& a : atom_params(32, 2.0, 4.0)) s.params.push_back(a);
  s.params.push_back(num("far_momentum", -0.5, "momentum of the far photon"));
  s.params.push_back(num("d", 2.0 * M_PI, "localization radius"));
  s.validate = fiber_validate;
  s.run = [](const Params& p, const RunContext& ctx) {
    const model2::Fiber f(fiber_of(p));
    const auto g = model2::AtomGrid::make(p.integer("atom_points"), p.num("atom_spacing"));
    const auto tab = table_for(f, model2::window_momenta(g, p.num("nu")), p.num("tol"), ctx);
    const model2::FiberTransform tr(g, f);
    const fock::FockSpace big(f.params().modes, f.params().n_max + 1);
    const Vec j = model2::embed_blocks(f.space(), big, model2::dressed_state(tr, tab, model2::compact_profile(g, p.num("radius"))));
    const Vec far = model2::far_photon_state(f.modes(), big, Vec::Ones(1), p.num("d"), p.num("far_momentum"));
    const auto r = model2::localized_initial_state(f.modes(), big, j, far, p.num("d"));
    return RecordList{{"", "", 0.0, 0.0, "defect", r.defect, 0.0, tab.max_residual()}};
  };
  return s;
}

}  // namespace detail

inline const std::vector<ExperimentSpec>& registry() {
  static const std::vector<ExperimentSpec> r = {
      detail::model1_closed_subsystem(),     detail::model1_no_signaling(),        detail::model1_free_propagation(),
      detail::model2_closed_system_error(),  detail::model2_effective_dynamics(),  detail::model2_gap_check(),
      detail::model2_fock_algebra(),         detail::model2_commutator_scaling(),  detail::model2_photon_localization(),
      detail::model2_localized_initial_state(),
  };
  return r;
}

inline const ExperimentSpec* find_experiment(const std::string& id) {
  for (const auto& e : registry())
    if (e.id == id) return &e;
  return nullptr;
}

}  // namespace closedsys::experiments
