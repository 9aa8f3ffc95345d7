// model2_lemmas.hpp — photon localization, far-photon propagation, factorization remainders, commutator scaling
#pragma once

#include "closedsys/fit.hpp"
#include "closedsys/model2.hpp"

#include <memory>

namespace closedsys::model2 {

// Gamma(j) applied to every dim(F)-block of psi.
inline Vec gamma_blocks(const Mat& j, const FockSpace& fs, const Vec& psi) {
  const auto nf = static_cast<Eigen::Index>(fs.dim());
  if (psi.size() % nf != 0) throw std::invalid_argument("gamma_blocks: length is not a multiple of dim(F)");
  Vec out(psi.size());
  for (Eigen::Index b = 0; b < psi.size() / nf; ++b) {
    const Vec blk = psi.segment(b * nf, nf);
    out.segment(b * nf, nf) = blk.cwiseAbs().maxCoeff() == 0.0 ? blk : apply_gamma(j, fs, blk);
  }
  return out;
}

// ||N psi||
inline double number_norm(const FockSpace& fs, const Vec& psi) {
  const auto nf = static_cast<Eigen::Index>(fs.dim());
  double s = 0.0;
  for (Eigen::Index i = 0; i < psi.size(); ++i) s += std::norm(psi(i)) * std::pow(fs.number(static_cast<std::size_t>(i % nf)), 2);
  return std::sqrt(s);
}

// ||(1 + |x|)^mu psi|| for a grid state with atom position outermost.
inline double position_weight_norm(const AtomGrid& g, const Vec& psi, double mu) {
  if (psi.size() % g.points != 0) throw std::invalid_argument("position_weight_norm: length mismatch");
  const Eigen::Index blk = psi.size() / g.points;
  double s = 0.0;
  for (int n = 0; n < g.points; ++n)
    s += std::pow(1.0 + std::abs(g.x[static_cast<std::size_t>(n)]), 2.0 * mu) * psi.segment(n * blk, blk).squaredNorm();
  return std::sqrt(s);
}

// ||Gamma(1_{|y| <= d}) psi - psi||
inline double photon_localization(const ModeSet& ms, const FockSpace& fs, const Vec& psi, double d) {
  fock::check_radius(ms, d, 1.0, "photon_localization");
  const auto ind = fock::position_indicator(ms, [d](double y) { return std::abs(y) <= d; });
  return (gamma_blocks(ind.matrix, fs, psi) - psi).norm();
}

// ---- propagation of the dressed atom -------------------------------------------------------------

struct ConeReport {
  std::vector<double> times, defect, number, position;
  double kappa = 0.0;         // max_T  max_{t<=T} defect / (T^{5/4} d^{-1/2} + <T>^{3/4} (d/R)^{-1/2})
  double number_slope = 0.0;  // log-log slope of ||N psi_t|| over t in [1, 20]
};

inline ConeReport propagation_cone_check(const FiberTransform& tr, const Vec& dressed, double radius, double d,
                                         const std::vector<double>& times, double tol = 1e-9) {
  const Fiber& f = tr.fiber();
  const AtomFieldOperator h{&tr, {}};
  const auto ind = fock::position_indicator(f.modes(), [d](double y) { return std::abs(y) <= d; });
  fock::check_radius(f.modes(), d, 1.0, "propagation_cone_check");
  ConeReport r;
  evolve_series(h, dressed, times, tol, [&](std::size_t, double t, const Vec& psi) {
    r.times.push_back(t);
    r.defect.push_back((gamma_blocks(ind.matrix, f.space(), psi) - psi).norm());
    r.number.push_back(number_norm(f.space(), psi));
    r.position.push_back(position_weight_norm(tr.grid(), psi, 1.0));
  });
  double running = 0.0;
  std::vector<double> lt, ln;
  for (std::size_t i = 0; i < r.times.size(); ++i) {
    const double t = r.times[i];
    running = std::max(running, r.defect[i]);
    const double shape = std::pow(t, 1.25) / std::sqrt(d) + std::pow(1.0 + t * t, 0.375) / std::sqrt(d / radius);
    r.kappa = std::max(r.kappa, running / shape);
    if (t >= 1.0 && t <= 20.0) {
      lt.push_back(t);
      ln.push_back(r.number[i]);
    }
  }
  if (lt.size() >= 2) r.number_slope = fit_power_law(lt, ln).slope;
  return r;
}

// ---- far photons and the Q v E dynamics ----------------------------------------------------------

// H_Q (x) 1 + 1 (x) dGamma(|k|) + A_Q (x) dGamma(m0 1_{|y| > shell d}) on C^q (x) F.
inline SparseOperator qe_hamiltonian(const ModeSet& ms, const FockSpace& fs, const Mat& h_q, const Mat& a_q, double m0, double d,
                                     double shell = 3.0) {
  const auto hq = SparseOperator::from_dense(h_q, true);
  const auto aq = SparseOperator::from_dense(a_q, true);
  const auto he = fock::dGamma(fs, ms.momentum_multiplier([](double k) { return cplx(std::abs(k)); }));
  const auto far = fock::position_indicator(ms, [&](double y) { return std::abs(y) > shell * d; });
  const auto couple = fock::dGamma(fs, Mat(m0 * far.matrix));
  return kron(hq, SparseOperator::identity(fs.dim())) + kron(SparseOperator::identity(hq.dim()), he) + kron(aq, couple);
}

// One photon spread smoothly over shell d <= y <= y_max with carrier momentum k0, tensored with q0.
inline Vec far_photon_state(const ModeSet& ms, const FockSpace& fs, const Vec& q0, double d, double k0, double shell = 3.0) {
  const double lo = shell * d;
  const double hi = ms.positions.back();
  if (!(hi > lo)) throw std::invalid_argument("far_photon_state: no grid points beyond shell d");
  Vec gy = Vec::Zero(ms.size());
  for (int m = 0; m < ms.size(); ++m) {
    const double y = ms.positions[static_cast<std::size_t>(m)];
    if (y < lo) continue;
    const double s = (y - lo) / (hi - lo + ms.position_spacing());
    gy(m) = std::pow(std::sin(M_PI * s), 2) * std::exp(cplx(0.0, k0 * y));
  }
  if (gy.norm() == 0.0) throw std::invalid_argument("far_photon_state: empty photon profile");
  const Vec coef = ms.to_position.adjoint() * gy.normalized();
  Vec photon = Vec::Zero(static_cast<Eigen::Index>(fs.dim()));
  for (int j = 0; j < ms.size(); ++j) photon(static_cast<Eigen::Index>(fs.index({j}))) = coef(j);
  return kron_vec(q0.normalized(), photon);
}

struct FarReport {
  std::vector<double> times, defect, growth_ratio;
  double initial_defect = 0.0;
  double kappa = 0.0;   // max defect d / t^2
  double growth_max = 0.0;  // max over t in [1, 20]
  double moment = 0.0;  // ||e^{delta N} phi|| / ||phi||
};

inline FarReport far_photon_check(const ModeSet& ms, const FockSpace& fs, const SparseOperator& h, const Vec& phi, double d,
                                  double c, double delta, const std::vector<double>& times, double tol = 1e-10,
                                  double shell = 3.0) {
  if (!(c > 1.0)) throw std::invalid_argument("far_photon_check: propagation-speed parameter c must exceed 1");
  const auto beyond_shell = fock::position_indicator(ms, [&](double y) { return std::abs(y) >= shell * d; });
  if ((gamma_blocks(beyond_shell.matrix, fs, phi) - phi).norm() > 1e-10 * phi.norm())
    throw std::invalid_argument("far_photon_check: far-photon hypothesis violated, photon mass inside |y| < 3d at t = 0");
  const auto outer = fock::position_indicator(ms, [&](double y) { return std::abs(y) >= 2.0 * d; });
  FarReport r;
  r.moment = photon_moment(fs, phi, delta);
  const auto nf = fs.dim();
  evolve_series(h, phi, times, tol, [&](std::size_t, double t, const Vec& psi) {
    r.times.push_back(t);
    r.defect.push_back((gamma_blocks(outer.matrix, fs, psi) - psi).norm());
    const auto fast = fock::dGamma(fs, fock::position_indicator(ms, [&](double y) { return std::abs(y) >= c * t; }).matrix);
    double s = 0.0;
    for (Eigen::Index b = 0; b < psi.size() / static_cast<Eigen::Index>(nf); ++b)
      s += (fast.matrix * psi.segment(b * static_cast<Eigen::Index>(nf), static_cast<Eigen::Index>(nf))).squaredNorm();
    r.growth_ratio.push_back(std::sqrt(s) / std::sqrt(1.0 + t * t));
  });
  r.initial_defect = r.defect.empty() ? 0.0 : r.defect.front();
  for (std::size_t i = 0; i < r.times.size(); ++i) {
    if (r.times[i] > 0.0) r.kappa = std::max(r.kappa, r.defect[i] * d / (r.times[i] * r.times[i]));
    if (r.times[i] >= 1.0 && r.times[i] <= 20.0) r.growth_max = std::max(r.growth_max, r.growth_ratio[i]);
  }
  return r;
}

// max over a mode basis h of ||[H_QE, a^*(1_{|y| <= shell d} h)]||.
inline double near_creation_commutator(const ModeSet& ms, const FockSpace& fs, const Mat& a_q, double m0, double d, double shell = 3.0) {
  const auto aq = SparseOperator::from_dense(a_q, true);
  const auto far = fock::position_indicator(ms, [&](double y) { return std::abs(y) > shell * d; });
  const auto hqe = kron(aq, fock::dGamma(fs, Mat(m0 * far.matrix)));
  const auto near = fock::position_indicator(ms, [&](double y) { return std::abs(y) <= shell * d; });
  double worst = 0.0;
  for (int j = 0; j < ms.size(); ++j) {
    const Vec h = near.matrix.col(j);
    const auto a = kron(SparseOperator::identity(aq.dim()), fock::create(fs, h));
    const SpMat c = hqe.matrix * a.matrix - a.matrix * hqe.matrix;
    double s = 0.0;
    for (Eigen::Index k = 0; k < c.outerSize(); ++k)
      for (SpMat::InnerIterator it(c, k); it; ++it) s += std::norm(it.value());
    worst = std::max(worst, std::sqrt(s));
  }
  return worst;
}

// ---- initial-state localization ------------------------------------------------------------------

struct LocalizedState {
  Vec merged;     // I(J (x) phi) blockwise
  Vec localized;  // Gamma-check(j)^* (Gamma(1_{|y|<=d}) J (x) Gamma(1_{|y|>=3d}) phi)
  double defect = 0.0;
};

// `dressed` is made of dim(F)-blocks; `far` is one Fock vector over the same space.
inline LocalizedState localized_initial_state(const ModeSet& ms, const FockSpace& fs, const Vec& dressed, const Vec& far, double d) {
  const auto nf = static_cast<Eigen::Index>(fs.dim());
  if (dressed.size() % nf != 0 || far.size() != nf) throw std::invalid_argument("localized_initial_state: length mismatch");
  const auto pp = fock::partition_pair(ms, d);
  const auto inside = fock::position_indicator(ms, [d](double y) { return std::abs(y) <= d; });
  const auto outside = fock::position_indicator(ms, [d](double y) { return std::abs(y) >= 3.0 * d; });
  const Vec far_loc = apply_gamma(outside.matrix, fs, far);
  if ((far_loc - far).norm() > 1e-10 * std::max(1.0, far.norm()))
    throw std::invalid_argument("localized_initial_state: far-photon hypothesis violated, far photons inside |y| < 3d");
  // Gamma-check(j)^*(a (x) b) = I(Gamma(j_0) a (x) Gamma(j_inf) b) on product vectors.
  const Vec far_part = apply_gamma(pp.far.matrix, fs, far_loc);
  LocalizedState r;
  r.merged = Vec::Zero(dressed.size());
  r.localized = Vec::Zero(dressed.size());
  for (Eigen::Index b = 0; b < dressed.size() / nf; ++b) {
    const Vec blk = dressed.segment(b * nf, nf);
    if (blk.cwiseAbs().maxCoeff() == 0.0) continue;
    r.merged.segment(b * nf, nf) = fock::identification(fs, blk, far);
    const Vec near_part = apply_gamma(pp.near.matrix, fs, apply_gamma(inside.matrix, fs, blk));
    r.localized.segment(b * nf, nf) = fock::identification(fs, near_part, far_part);
  }
  r.defect = (r.merged - r.localized).norm();
  return r;
}

// ---- factorization remainders --------------------------------------------------------------------

namespace detail {

inline Vec scatter(const Vec& x, const std::vector<std::size_t>& idx, std::size_t n, const Eigen::VectorXd& w) {
  Vec full = Vec::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < idx.size(); ++i) full(static_cast<Eigen::Index>(idx[i])) = x(static_cast<Eigen::Index>(i)) * w(static_cast<Eigen::Index>(i));
  return full;
}
inline Vec gather(const Vec& full, const std::vector<std::size_t>& idx, const Eigen::VectorXd& w) {
  Vec x(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) x(static_cast<Eigen::Index>(i)) = full(static_cast<Eigen::Index>(idx[i])) * w(static_cast<Eigen::Index>(i));
  return x;
}
inline std::vector<std::size_t> below_cutoff(const FockSpace& fs) {
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < fs.dim(); ++s)
    if (fs.number(s) < fs.n_max()) idx.push_back(s);
  return idx;
}

}  // namespace detail

// Coupling form factor of an atom at x: lambda0 chi(k) |k|^{1/2} e^{-ikx}.
inline Vec coupling_at(const ModeSet& ms, double lambda0, double x) {
  return ms.discretize([&](double k) { return lambda0 * uv_cutoff(k) * std::sqrt(std::abs(k)) * std::exp(cplx(0.0, -k * x)); });
}

// The interaction field i(a(h) - a^*(h)).
inline SparseOperator interaction_field(const FockSpace& fs, const Vec& h) {
  const auto c = fock::create(fs, h);
  return (c.adjoint() - c).scaled(cplx(0.0, 1.0));
}

struct FactorizationReport {
  double d = 0.0;
  double rem1 = 0.0;        // ||Rem1 (N0 + Ninf + 1)^{-1}||
  double rem2 = 0.0;        // sup_x ||Rem2(x) (N0 + Ninf + <x>^{4 - 2 delta})^{-1}||
  double rem2_split = 0.0;  // sup_x <x>^{-1/2} ||Rem2(x) (N + 1)^{-1/2}||
};

inline FactorizationReport factorization_residual(const ModeSet& ms, const FockSpace& fs, double lambda0, double d,
                                                  const std::vector<double>& xs, double delta = 1.5,
                                                  SpectralNormOptions opt = {.rel_tol = 1e-6, .krylov = 30}) {
  const auto pp = fock::partition_pair(ms, d);
  const FockSpace dbl = fock::doubled(fs);
  const auto [js, ad] = fock::partition_commutator_maps(ms, pp);
  const Mat jsa = js.adjoint(), ada = ad.adjoint();
  FactorizationReport r;
  r.d = d;
  // Rem1 = dGamma(j*, ad(|k|, j*)) U*: number-conserving, so sector by sector.
  for (int n = 1; n <= fs.n_max(); ++n) {
    const auto& idx = dbl.sector(n);
    const Eigen::VectorXd w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(idx.size()), 1.0 / (n + 1.0));
    const double v = spectral_norm(
        [&](const Vec& x, Vec& y) { y = fock::apply_dgamma_two(js, ad, dbl, fs, detail::scatter(x, idx, dbl.dim(), w)); },
        [&](const Vec& y, Vec& x) { x = detail::gather(fock::apply_dgamma_two(jsa, ada, fs, dbl, y), idx, w); }, idx.size(), opt);
    r.rem1 = std::max(r.rem1, v);
  }
  // Rem2(x) U = Phi(h_x) Gamma(j*) - Gamma(j*) Phi(h_x (+) 0) on F(h (+) h), below the cutoff.
  const auto idx = detail::below_cutoff(dbl);
  for (double x : xs) {
    const Vec h = coupling_at(ms, lambda0, x);
    Vec h2 = Vec::Zero(2 * ms.size());
    h2.head(ms.size()) = h;
    const SpMat phi = interaction_field(fs, h).matrix;
    const SpMat phi2 = interaction_field(dbl, h2).matrix;
    const double bracket = std::sqrt(1.0 + x * x);
    auto norm_with = [&](const Eigen::VectorXd& w) {
      return spectral_norm(
          [&](const Vec& v, Vec& y) {
            const Vec full = detail::scatter(v, idx, dbl.dim(), w);
            y = phi * fock::apply_gamma(js, dbl, fs, full) - fock::apply_gamma(js, dbl, fs, Vec(phi2 * full));
          },
          [&](const Vec& y, Vec& v) {
            const Vec a = fock::apply_gamma(jsa, fs, dbl, Vec(phi * y)) - phi2 * fock::apply_gamma(jsa, fs, dbl, y);
            v = detail::gather(a, idx, w);
          },
          idx.size(), opt);
    };
    Eigen::VectorXd w1(static_cast<Eigen::Index>(idx.size())), w2(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int n = dbl.number(idx[i]);
      w1(static_cast<Eigen::Index>(i)) = 1.0 / (n + std::pow(bracket, 4.0 - 2.0 * delta));
      w2(static_cast<Eigen::Index>(i)) = 1.0 / std::sqrt((n + 1.0) * bracket);
    }
    r.rem2 = std::max(r.rem2, norm_with(w1));
    r.rem2_split = std::max(r.rem2_split, norm_with(w2));
  }
  return r;
}

// ---- commutator scaling ----------------------------------------------------------------------------

// ||i(a - a^dag) (N + 1)^{-1/2}|| for one mode truncated at n_max.
inline double single_mode_field_constant(int n_max) {
  Mat a = Mat::Zero(n_max + 1, n_max + 1);
  for (int n = 1; n <= n_max; ++n) a(n - 1, n) = std::sqrt(double(n));
  Mat phi = cplx(0.0, 1.0) * (a - a.adjoint());
  for (int n = 0; n <= n_max; ++n) phi.col(n) /= std::sqrt(n + 1.0);
  return Eigen::JacobiSVD<Mat>(phi).singularValues()(0);
}

struct ScalingRow {
  double d = 0.0;
  double one_particle = 0.0;  // ||[|k|, f(y^2/d^2)]||
  double interaction = -1.0;  // sup_x <x>^{-2+delta} ||[Gamma(c_d), Phi(h_x)] (N+1)^{-1/2}||; -1 when skipped
  double free_field = 0.0;    // ||[H_E, Gamma(c_d)] (N+1)^{-1}||
  double far_coupling = 0.0;  // sup_x <x>^{-2+delta} ||Phi(j_inf h_x) (N+1)^{-1/2}||
};

struct ScalingReport {
  std::vector<ScalingRow> rows;
  double slope_one_particle = 0.0, slope_interaction = 0.0, slope_free_field = 0.0, slope_far_coupling = 0.0;
};

struct ScalingOptions {
  double delta = 1.0;
  bool interaction = false;  // Fock-level Lanczos per x; meant for small mode sets
  bool free_field = true;
  bool far_coupling = true;  // needs the two-sided partition, so 2d within half the extent
};

inline ScalingReport commutator_scaling_suite(const FiberParams& prm, const std::vector<double>& ds, const ScalingOptions& so = {}) {
  const ModeSet ms = ModeSet::uniform(prm.modes, prm.k_max);
  for (double d : ds) fock::check_radius(ms, d, so.far_coupling ? 2.0 : 1.0, "commutator_scaling_suite");
  const Mat w = ms.momentum_multiplier([](double k) { return cplx(std::abs(k)); });
  const double cn = single_mode_field_constant(prm.n_max);
  std::unique_ptr<FockSpace> fs;
  if (so.interaction) fs = std::make_unique<FockSpace>(prm.modes, prm.n_max);
  ScalingReport rep;
  for (double d : ds) {
    ScalingRow row;
    row.d = d;
    const Mat f = ms.position_multiplier([d](double y) { return cplx(fock::near_profile(1.0 + y * y / (d * d))); });
    row.one_particle = Eigen::JacobiSVD<Mat>(w * f - f * w).singularValues()(0);
    Eigen::VectorXd cut(ms.size());
    for (int m = 0; m < ms.size(); ++m) cut(m) = fock::inner_profile(ms.positions[static_cast<std::size_t>(m)], d);
    if (so.free_field) row.free_field = fock::free_field_cutoff_commutator(ms, prm.n_max, cut);
    if (so.far_coupling) {
      const auto pp = fock::partition_pair(ms, d);
      for (double x : ms.positions) {
      const double weight = std::pow(1.0 + x * x, 0.5 * (-2.0 + so.delta));
      const Vec h = coupling_at(ms, prm.lambda0, x);
      row.far_coupling = std::max(row.far_coupling, weight * (pp.far.matrix * h).norm() * cn);
      }
    }
    if (so.interaction) {
      const auto c = fock::inner_cutoff(ms, d);
      const auto idx = detail::below_cutoff(*fs);
      Eigen::VectorXd wn(static_cast<Eigen::Index>(idx.size()));
      for (std::size_t i = 0; i < idx.size(); ++i) wn(static_cast<Eigen::Index>(i)) = 1.0 / std::sqrt(fs->number(idx[i]) + 1.0);
      row.interaction = 0.0;
      for (double x : ms.positions) {
        const double weight = std::pow(1.0 + x * x, 0.5 * (-2.0 + so.delta));
        const SpMat phi = interaction_field(*fs, coupling_at(ms, prm.lambda0, x)).matrix;
        auto comm = [&](const Vec& v) {
          return Vec(fock::apply_gamma(c.matrix, *fs, Vec(phi * v)) - phi * fock::apply_gamma(c.matrix, *fs, v));
        };
        const double v = spectral_norm([&](const Vec& xin, Vec& y) { y = comm(detail::scatter(xin, idx, fs->dim(), wn)); },
                                       [&](const Vec& y, Vec& xout) { xout = detail::gather(Vec(-comm(y)), idx, wn); }, idx.size(),
                                       {.rel_tol = 1e-6, .krylov = 30});
        row.interaction = std::max(row.interaction, weight * v);
      }
    }
    rep.rows.push_back(row);
  }
  std::vector<double> dv, a, b, c, e;
  for (const auto& r : rep.rows) {
    dv.push_back(r.d);
    a.push_back(r.one_particle);
    b.push_back(r.interaction);
    c.push_back(r.free_field);
    e.push_back(r.far_coupling);
  }
  if (ds.size() >= 2) {
    rep.slope_one_particle = fit_power_law(dv, a).slope;
    if (so.interaction) rep.slope_interaction = fit_power_law(dv, b).slope;
    if (so.free_field) rep.slope_free_field = fit_power_law(dv, c).slope;
    if (so.far_coupling) rep.slope_far_coupling = fit_power_law(dv, e).slope;
  }
  return rep;
}

}  // namespace closedsys::model2
