// model1_experiments.hpp — deviation, no-signaling and free-decay experiments for the lattice model
#pragma once

#include "closedsys/model1.hpp"

namespace closedsys::model1 {

struct RunOptions {
  double dt = 0.02;              // largest split-step
  double boundary_tol = 1e-8;    // largest tolerated amplitude near the box edge
  int boundary_layer = 8;        // width of the monitored edge layer in sites
  int order = 2;                 // splitting order, 2 or 4
};

inline void check_times(const std::vector<double>& times, const char* who) {
  if (times.empty()) throw std::invalid_argument(std::string(who) + ": no recording times");
  for (std::size_t i = 0; i < times.size(); ++i)
    if (!(times[i] >= 0.0) || (i > 0 && times[i] < times[i - 1]))
      throw std::invalid_argument(std::string(who) + ": times must be nonnegative and nondecreasing");
}

inline void check_boundary(double amp, const RunOptions& opt, const char* who, double t) {
  if (amp > opt.boundary_tol) {
    std::ostringstream os;
    os << who << ": boundary contamination at t = " << t << " (edge amplitude " << amp << " > " << opt.boundary_tol << ")";
    throw std::runtime_error(os.str());
  }
}

// ---------------------------------------------------------------------------------------------
// Closed-subsystem deviation

// For each d and t: |<O_P>_full(t) - Tr(rho_P e^{itH_P} O_P e^{-itH_P})| / |O_P|.
// The reference is evaluated on the purification: the same state evolved by the kinetic term alone.
inline RecordList run_closed_subsystem(const LatticeGrid& grid, const QConfig& q, const StateVector& psi0,
                                       const SparseOperator& o_p, const std::vector<double>& times,
                                       const std::vector<double>& d_values, const RunOptions& opt = {}) {
  check_times(times, "run_closed_subsystem");
  if (!o_p.hermitian) throw std::invalid_argument("run_closed_subsystem: observable must be hermitian");
  const std::size_t qd = q.q_dim(), w = 2 * qd;
  if (psi0.size() != grid.sites() * w) throw std::invalid_argument("run_closed_subsystem: state size mismatch");
  if (o_p.dim() != grid.sites() * 2) throw std::invalid_argument("run_closed_subsystem: observable must act on the P space");
  const double onorm = operator_norm(o_p);
  if (!(onorm > 0.0)) throw std::invalid_argument("run_closed_subsystem: zero observable");
  std::vector<std::pair<double, QConfig>> sweep;
  if (d_values.empty()) sweep.emplace_back(validate_qconfig(grid, q).min_distance, q);
  for (double d : d_values) sweep.emplace_back(d, place_cells_at_distance(q, grid.dim, d));
  RecordList out;
  const Vec start = psi0.amplitudes / psi0.norm();
  for (const auto& [d, qc] : sweep) {
    validate_qconfig(grid, qc);
    const SplitStepPropagator prop(grid, qc, opt.dt, true, opt.order);
    Vec full = start, free = start;
    double t_now = 0.0;
    for (double t : times) {
      prop.evolve(full, t - t_now);
      free_evolve(grid, free, w, t - t_now);
      t_now = t;
      const double edge = std::max(boundary_amplitude(grid, full, w, opt.boundary_layer),
                                   boundary_amplitude(grid, free, w, opt.boundary_layer));
      check_boundary(edge, opt, "run_closed_subsystem", t);
      const double dev = std::abs(p_expectation(o_p, full, qd) - p_expectation(o_p, free, qd)) / onorm;
      out.push_back({"closed_subsystem", "d", d, t, "deviation", dev, std::abs(full.norm() - 1.0), edge});
    }
  }
  return out;
}

// 2 int_0^t |H_PQ U_0(s) psi0| ds with U_0 the uncoupled evolution: a first-order Duhamel bound on the deviation.
inline std::vector<double> duhamel_bound(const LatticeGrid& grid, const QConfig& q, const StateVector& psi0,
                                         const std::vector<double>& times, double ds = 0.005) {
  check_times(times, "duhamel_bound");
  const SplitStepPropagator coupled(grid, q, 1.0);
  const SplitStepPropagator free(grid, q, 1.0, false);
  Vec u = psi0.amplitudes / psi0.norm(), hu;
  auto integrand = [&](const Vec& v) {
    coupled.apply_coupling(v, hu);
    return hu.norm();
  };
  std::vector<double> out;
  double acc = 0.0, t_now = 0.0, f_now = integrand(u);
  for (double t : times) {
    const long n = std::max<long>(1, static_cast<long>(std::ceil((t - t_now) / ds)));
    const double h = (t - t_now) / static_cast<double>(n);
    for (long i = 0; i < n && h > 0.0; ++i) {
      // Simpson on each sub-interval.
      Vec mid = u;
      free.evolve(mid, 0.5 * h);
      const double f_mid = integrand(mid);
      free.evolve(mid, 0.5 * h);
      const double f_end = integrand(mid);
      acc += h / 6.0 * (f_now + 4.0 * f_mid + f_end);
      u = std::move(mid);
      f_now = f_end;
    }
    t_now = t;
    out.push_back(2.0 * acc);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// No-signaling

struct NoSignalingReport {
  std::vector<Vec3> axes;
  std::vector<std::vector<Vec3>> spin;           // unconditioned <S_P>(t) per setting
  std::vector<std::vector<double>> conditioned;  // <S_P.n> given the detector fired, NaN when undefined
  std::vector<double> max_spin;                  // max_t |<S_P>(t)| per setting
  double max_setting_difference = 0.0;           // max over setting pairs, times and P observables
  RecordList records;
};

// Evolves the entangled state once per filter setting and compares the P-observable series.
inline NoSignalingReport run_no_signaling(const LatticeGrid& grid, const QConfig& q, const StateVector& psi0,
                                          const std::vector<Vec3>& filter_axes, const std::vector<double>& times,
                                          const RunOptions& opt = {}, double sweep_value = 0.0) {
  check_times(times, "run_no_signaling");
  if (!q.partner_spin || !q.filter) throw std::invalid_argument("run_no_signaling: requires the partner spin and the filter detector");
  if (filter_axes.empty()) throw std::invalid_argument("run_no_signaling: no filter settings");
  const std::size_t qd = q.q_dim(), w = 2 * qd;
  if (psi0.size() != grid.sites() * w) throw std::invalid_argument("run_no_signaling: state size mismatch");
  const Vec3 ex{1, 0, 0}, ey{0, 1, 0}, ez{0, 0, 1};
  const std::vector<Mat> spin_ops = {p_spin_operator(ex, qd), p_spin_operator(ey, qd), p_spin_operator(ez, qd)};
  NoSignalingReport rep;
  std::vector<std::vector<std::vector<double>>> series;  // [setting][time][observable]
  for (const Vec3& axis : filter_axes) {
    QConfig qc = q;
    qc.filter_axis = axis;
    const SplitStepPropagator prop(grid, qc, opt.dt, true, opt.order);
    const Mat fired = detector_fired_projector(qc);
    Vec psi = psi0.amplitudes / psi0.norm();
    double t_now = 0.0;
    std::vector<Vec3> sp;
    std::vector<double> cond;
    std::vector<std::vector<double>> obs;
    const std::size_t idx = rep.axes.size();
    for (double t : times) {
      prop.evolve(psi, t - t_now);
      t_now = t;
      const double edge = boundary_amplitude(grid, psi, w, opt.boundary_layer);
      check_boundary(edge, opt, "run_no_signaling", t);
      const double drift = std::abs(psi.norm() - 1.0);
      Vec3 s{};
      for (int c = 0; c < 3; ++c) s[static_cast<std::size_t>(c)] = internal_expectation(psi, w, spin_ops[static_cast<std::size_t>(c)]).real();
      const Vec3 x = position_mean(grid, psi, w);
      sp.push_back(s);
      obs.push_back({s[0], s[1], s[2], x[0], x[1], x[2]});
      double cv = std::numeric_limits<double>::quiet_NaN();
      try {
        cv = conditioned_spin(StateVector(psi), qd, fired, axis);
      } catch (const std::domain_error&) {
      }
      cond.push_back(cv);
      const std::string tag = "setting" + std::to_string(idx);
      rep.records.push_back({"no_signaling", "d", sweep_value, t, tag + "_spin_x", s[0], drift, edge});
      rep.records.push_back({"no_signaling", "d", sweep_value, t, tag + "_spin_y", s[1], drift, edge});
      rep.records.push_back({"no_signaling", "d", sweep_value, t, tag + "_spin_z", s[2], drift, edge});
      if (std::isfinite(cv)) rep.records.push_back({"no_signaling", "d", sweep_value, t, tag + "_conditioned_spin", cv, drift, edge});
    }
    double m = 0.0;
    for (const auto& s : sp) m = std::max(m, norm3(s));
    rep.axes.push_back(axis);
    rep.spin.push_back(std::move(sp));
    rep.conditioned.push_back(std::move(cond));
    rep.max_spin.push_back(m);
    series.push_back(std::move(obs));
  }
  for (std::size_t a = 0; a < series.size(); ++a)
    for (std::size_t b = a + 1; b < series.size(); ++b)
      for (std::size_t t = 0; t < times.size(); ++t)
        for (std::size_t k = 0; k < series[a][t].size(); ++k)
          rep.max_setting_difference = std::max(rep.max_setting_difference, std::abs(series[a][t][k] - series[b][t][k]));
  for (std::size_t a = 0; a < rep.max_spin.size(); ++a)
    rep.records.push_back({"no_signaling", "d", sweep_value, times.back(), "setting" + std::to_string(a) + "_max_spin", rep.max_spin[a], 0.0, 0.0});
  rep.records.push_back({"no_signaling", "d", sweep_value, times.back(), "max_setting_difference", rep.max_setting_difference, 0.0, 0.0});
  return rep;
}

// ---------------------------------------------------------------------------------------------
// Free-propagation decay bound

// All multi-indices of length dim with total order <= order, in lexicographic order.
inline std::vector<std::array<int, 3>> multi_indices(int dim, int order) {
  std::vector<std::array<int, 3>> out;
  for (int a = 0; a <= order; ++a)
    for (int b = 0; b <= (dim > 1 ? order - a : 0); ++b)
      for (int c = 0; c <= (dim > 2 ? order - a - b : 0); ++c) out.push_back({a, b, c});
  return out;
}

// sum_{|beta| <= order} |d_beta psi_hat|_{L1}, derivatives taken spectrally as the transform of (-i(x - apex))^beta psi.
inline double derivative_l1_sum(const LatticeGrid& grid, const Vec& psi, std::size_t width, const Vec3& apex, int order) {
  const std::size_t n = grid.sites();
  const auto w = static_cast<Eigen::Index>(width);
  UnitaryFft fft(grid.shape(), static_cast<int>(width));
  // |psi_hat(k_m)| = (2 pi)^{-d/2} h^{d/2} sqrt(N) |DFT_unitary(a)_m| for site amplitudes a.
  const double amp_scale = std::pow(2.0 * std::numbers::pi, -0.5 * grid.dim) * std::sqrt(grid.cell_volume()) * std::sqrt(static_cast<double>(n));
  const double dk = std::pow(grid.momentum_spacing(), grid.dim);
  std::vector<Vec3> rel(n);
  for (std::size_t s = 0; s < n; ++s) rel[s] = sub3(grid.position(s), apex);
  double total = 0.0;
  Vec f(psi.size());
  for (const auto& beta : multi_indices(grid.dim, order)) {
    const int ord = beta[0] + beta[1] + beta[2];
    const cplx pref = std::pow(cplx(0.0, -1.0), ord);
    for (std::size_t s = 0; s < n; ++s) {
      double m = 1.0;
      for (int a = 0; a < 3; ++a) m *= std::pow(rel[s][static_cast<std::size_t>(a)], beta[static_cast<std::size_t>(a)]);
      f.segment(static_cast<Eigen::Index>(s) * w, w) = (pref * m) * psi.segment(static_cast<Eigen::Index>(s) * w, w);
    }
    fft.forward(f);
    double l1 = 0.0;
    for (std::size_t s = 0; s < n; ++s) l1 += f.segment(static_cast<Eigen::Index>(s) * w, w).norm();
    total += l1 * amp_scale * dk;
  }
  return total;
}

// Embeds a state into a grid with twice the points per axis and the same spacing (finer momentum grid).
inline Vec zero_pad(const LatticeGrid& grid, const Vec& psi, std::size_t width, LatticeGrid& padded) {
  padded = grid;
  padded.points = 2 * grid.points;
  const auto w = static_cast<Eigen::Index>(width);
  Vec out = Vec::Zero(static_cast<Eigen::Index>(padded.sites()) * w);
  const int off = grid.points / 2;
  for (std::size_t s = 0; s < grid.sites(); ++s) {
    auto idx = grid.indices(s);
    for (int a = 0; a < grid.dim; ++a) idx[static_cast<std::size_t>(a)] += off;
    out.segment(static_cast<Eigen::Index>(padded.site(idx)) * w, w) = psi.segment(static_cast<Eigen::Index>(s) * w, w);
  }
  return out;
}

inline double decay_constant_from_sum(double derivative_sum, int p, const ConeSpec& cone) {
  return std::max(1.0, std::pow(cone.speed_floor, -p)) * std::pow(std::sin(cone.half_angle), -2.0 * p) * derivative_sum;
}

struct DecayConstantReport {
  double K = 0.0;
  double derivative_sum = 0.0;
  double refined_sum = 0.0;
  double relative_change = 0.0;
};

// K = max(1, v^-p) sin(theta0)^-2p sum_{|beta| <= p+1} |d_beta psi_hat|_{L1} with unit prefactor.
inline DecayConstantReport decay_constant_report(const LatticeGrid& grid, const StateVector& psi0, int p, const ConeSpec& cone) {
  grid.validate();
  cone.validate();
  if (p < 4) throw std::invalid_argument("free_decay_constant: p must be >= 4");
  if (psi0.size() % grid.sites() != 0) throw std::invalid_argument("free_decay_constant: state size mismatch");
  const std::size_t w = psi0.size() / grid.sites();
  const Vec u = psi0.amplitudes / psi0.norm();
  DecayConstantReport r;
  r.derivative_sum = derivative_l1_sum(grid, u, w, cone.apex, p + 1);
  LatticeGrid fine;
  const Vec padded = zero_pad(grid, u, w, fine);
  r.refined_sum = derivative_l1_sum(fine, padded, w, cone.apex, p + 1);
  r.relative_change = std::abs(r.refined_sum - r.derivative_sum) / r.refined_sum;
  if (r.relative_change > 0.01)
    throw std::runtime_error("free_decay_constant: p too large for grid resolution (derivative quadrature unconverged: changes by more than 1% under refinement)");
  r.K = decay_constant_from_sum(r.refined_sum, p, cone);
  return r;
}

inline double free_decay_constant(const LatticeGrid& grid, const StateVector& psi0, int p, const ConeSpec& cone) {
  return decay_constant_report(grid, psi0, p, cone).K;
}

struct FreePropagationOptions {
  int boundary_layer = 8;
  double boundary_tol = 1e-8;
  double fit_radius_min = 0.0;     // 0 selects extent/16
  double fit_radius_max = 0.0;     // 0 selects extent/2 minus the boundary layer
  double floor_relative = 1e-10;   // amplitudes below this fraction of the peak are excluded from fits (FFT roundoff sits near 1e-12)
  int rays = 16;                   // sampled directions outside the doubled cone (2D/3D)
  double ray_margin = 0.05;        // angular margin outside the doubled cone
};

struct FreePropagationReport {
  double K = 0.0;
  double kappa = 0.0;                 // max over (y, t) of amplitude (|y| + vt)^p / K
  std::vector<double> kappa_by_time;
  double radial_exponent = 0.0;       // smallest fitted decay exponent over rays and times
  int fits = 0;
  double far_amplitude_t0 = 0.0;      // t = 0 amplitude beyond 3/4 of the fit range, outside the cone
  double max_boundary_amplitude = 0.0;
  RecordList records;
};

// Ray directions making an angle larger than 2 theta0 + margin with the cone axis.
inline std::vector<Vec3> exterior_rays(const ConeSpec& cone, int dim, int count, double margin) {
  std::vector<Vec3> out;
  const Vec3 e = cone.axis;
  if (dim == 1) return {scale3(e, -1.0)};
  Vec3 u = std::abs(e[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  if (dim == 2) u = {-e[1], e[0], 0.0};
  else u = sub3(u, scale3(e, dot3(u, e)));
  u = scale3(u, 1.0 / norm3(u));
  const Vec3 v{e[1] * u[2] - e[2] * u[1], e[2] * u[0] - e[0] * u[2], e[0] * u[1] - e[1] * u[0]};
  const double lo = 2.0 * cone.half_angle + margin;
  const int half = std::max(1, count / 2);
  for (int i = 0; i < half; ++i) {
    const double ang = lo + (std::numbers::pi - lo) * i / std::max(1, half - 1);
    const double c = std::cos(ang), s = std::sin(ang);
    out.push_back(add3(scale3(e, c), scale3(u, s)));
    if (i > 0 && i + 1 < half) out.push_back(add3(scale3(e, c), scale3(u, -s)));
    if (dim == 3 && i > 0 && i + 1 < half) out.push_back(add3(scale3(e, c), scale3(v, s)));
  }
  return out;
}

// Checks |psi_t(y)| <= kappa K / (|y| + vt)^p outside the doubled cone and fits the radial decay exponent.
inline FreePropagationReport verify_free_propagation(const LatticeGrid& grid, const StateVector& psi0, int p,
                                                     const ConeSpec& cone, const std::vector<double>& times,
                                                     const FreePropagationOptions& opt = {}) {
  check_times(times, "verify_free_propagation");
  FreePropagationReport rep;
  rep.K = free_decay_constant(grid, psi0, p, cone);
  const std::size_t n = grid.sites(), w = psi0.size() / n;
  const auto wi = static_cast<Eigen::Index>(w);
  const double rmin = opt.fit_radius_min > 0.0 ? opt.fit_radius_min : grid.extent() / 16.0;
  const double rmax = opt.fit_radius_max > 0.0 ? opt.fit_radius_max : 0.5 * grid.extent() - opt.boundary_layer * grid.spacing;
  const auto rays = exterior_rays(cone, grid.dim, opt.rays, opt.ray_margin);
  const double vol = std::sqrt(grid.cell_volume());
  Vec psi = psi0.amplitudes / psi0.norm();
  double t_now = 0.0;
  double exponent = std::numeric_limits<double>::infinity();
  for (double t : times) {
    free_evolve(grid, psi, w, t - t_now);
    t_now = t;
    Eigen::VectorXd amp(static_cast<Eigen::Index>(n));
    for (std::size_t s = 0; s < n; ++s) amp(static_cast<Eigen::Index>(s)) = psi.segment(static_cast<Eigen::Index>(s) * wi, wi).norm() / vol;
    const double edge = boundary_amplitude(grid, psi, w, opt.boundary_layer);
    rep.max_boundary_amplitude = std::max(rep.max_boundary_amplitude, edge);
    if (edge > opt.boundary_tol) {
      std::ostringstream os;
      os << "verify_free_propagation: wrap-around contamination at t = " << t << " (edge amplitude " << edge << ")";
      throw std::runtime_error(os.str());
    }
    double kt = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      if (grid.in_boundary_layer(s, opt.boundary_layer)) continue;
      const Vec3 y = grid.position(s);
      if (cone.position_inside(y)) continue;
      const double r = norm3(sub3(y, cone.apex));
      kt = std::max(kt, amp(static_cast<Eigen::Index>(s)) * std::pow(r + cone.speed_floor * t, p) / rep.K);
      if (t == 0.0 && r >= rmin + 0.75 * (rmax - rmin)) rep.far_amplitude_t0 = std::max(rep.far_amplitude_t0, amp(static_cast<Eigen::Index>(s)));
    }
    rep.kappa_by_time.push_back(kt);
    rep.kappa = std::max(rep.kappa, kt);
    rep.records.push_back({"free_propagation", "t", t, t, "kappa", kt, std::abs(psi.norm() - 1.0), edge});
    const double floor = opt.floor_relative * amp.maxCoeff();
    for (const Vec3& dir : rays) {
      std::vector<double> xs, ys;
      for (double r = rmin; r <= rmax; r += grid.spacing) {
        bool clamped = false;
        const std::size_t s = grid.nearest_site(add3(cone.apex, scale3(dir, r)), &clamped);
        if (clamped || grid.in_boundary_layer(s, opt.boundary_layer)) break;
        const Vec3 y = grid.position(s);
        if (cone.position_inside(y)) continue;
        const double a = amp(static_cast<Eigen::Index>(s));
        if (!(a > floor)) continue;
        xs.push_back(norm3(sub3(y, cone.apex)) + cone.speed_floor * t);
        ys.push_back(a);
      }
      if (xs.size() < 4) continue;
      const PowerFit f = fit_power_law(xs, ys);
      exponent = std::min(exponent, -f.slope);
      ++rep.fits;
    }
  }
  if (rep.fits == 0) throw std::runtime_error("verify_free_propagation: no ray has enough samples above the numerical floor");
  rep.radial_exponent = exponent;
  rep.records.push_back({"free_propagation", "p", static_cast<double>(p), times.back(), "decay_constant", rep.K, 0.0, 0.0});
  rep.records.push_back({"free_propagation", "p", static_cast<double>(p), times.back(), "kappa_max", rep.kappa, 0.0, 0.0});
  rep.records.push_back({"free_propagation", "p", static_cast<double>(p), times.back(), "radial_exponent", rep.radial_exponent, 0.0, 0.0});
  return rep;
}

}  // namespace closedsys::model1
