// model2_dynamics.hpp — dressed atom plus a far qubit system Q: closed-subsystem error and effective dynamics
#pragma once

#include "closedsys/model2_lemmas.hpp"

namespace closedsys::model2 {

// System Q: a small register with
//   H_Q,   H_QE = A_Q (x) dGamma(m0 1_{|y| > shell d}),   H_PQ = V_PQ(x) (x) B_Q,
//   V_PQ(x) = g (1 + max(0, shell d - |x|))^{-beta}.
struct QModel {
  Mat h_q, a_q, b_q;
  Vec q0;
  double m0 = 0.0;
  double g = 0.0;
  double beta = 2.0;
  double shell = 3.0;

  static QModel qubit(double omega_q, double m0, double g, double beta = 2.0) {
    QModel q;
    q.h_q = 0.5 * omega_q * pauli::z();
    q.a_q = pauli::x();
    q.b_q = pauli::x();
    q.q0 = Vec::Zero(2);
    q.q0(0) = 1.0;
    q.m0 = m0;
    q.g = g;
    q.beta = beta;
    return q;
  }
  int dim() const { return static_cast<int>(h_q.rows()); }
  double potential(double x, double d) const { return g * std::pow(1.0 + std::max(0.0, shell * d - std::abs(x)), -beta); }
};

// H_{P v E} (x) 1 + 1 (x) H_Q + H_QE + H_PQ on grid (x) Q (x) C^2 (x) F.
struct ClosedSystemOperator {
  const FiberTransform* transform = nullptr;  // spectators = dim Q
  Mat h_q, a_q, b_q;
  SpMat field;               // dGamma(m0 1_{|y| > shell d})
  Eigen::VectorXd v_pq;      // per grid point

  ClosedSystemOperator(const FiberTransform& tr, const QModel& q, double d) : transform(&tr), h_q(q.h_q), a_q(q.a_q), b_q(q.b_q) {
    if (tr.spectators() != q.dim()) throw std::invalid_argument("ClosedSystemOperator: transform spectators must equal dim Q");
    const Fiber& f = tr.fiber();
    const auto far = fock::position_indicator(f.modes(), [&](double y) { return std::abs(y) > q.shell * d; });
    field = fock::dGamma(f.space(), Mat(q.m0 * far.matrix)).matrix;
    v_pq.resize(tr.grid().points);
    for (int n = 0; n < tr.grid().points; ++n) v_pq(n) = q.potential(tr.grid().x[static_cast<std::size_t>(n)], d);
  }

  std::size_t dim() const { return transform->dim(); }
  void apply(const Vec& in, Vec& out) const {
    AtomFieldOperator{transform, {}}.apply(in, out);
    const Fiber& f = transform->fiber();
    const int qd = transform->spectators();
    const auto d = static_cast<Eigen::Index>(f.dim());
    const auto nf = static_cast<Eigen::Index>(f.fock_dim());
    const int nx = transform->grid().points;
    const Mat hqt = h_q.transpose(), bqt = b_q.transpose();
    for (int n = 0; n < nx; ++n) {
      Eigen::Map<const Mat> x(in.data() + static_cast<Eigen::Index>(n) * qd * d, d, qd);
      Eigen::Map<Mat> y(out.data() + static_cast<Eigen::Index>(n) * qd * d, d, qd);
      y.noalias() += x * hqt;
      if (v_pq(n) != 0.0) y.noalias() += v_pq(n) * (x * bqt);
    }
    if (field.nonZeros() == 0) return;
    const Eigen::Index cols = in.size() / nf;  // ((x * qd + q) * 2 + level)
    Eigen::Map<const Mat> blocks(in.data(), nf, cols);
    const Mat z = field * blocks;
    for (int n = 0; n < nx; ++n)
      for (int l = 0; l < 2; ++l)
        for (int q = 0; q < qd; ++q)
          for (int r = 0; r < qd; ++r) {
            const cplx a = a_q(q, r);
            if (a == cplx(0.0, 0.0)) continue;
            const Eigen::Index to = (static_cast<Eigen::Index>(n) * qd + q) * 2 + l;
            const Eigen::Index from = (static_cast<Eigen::Index>(n) * qd + r) * 2 + l;
            out.segment(to * nf, nf) += a * z.col(from);
          }
  }
};

// O = f(x) (x) A_level, acting trivially on Q and the field.
struct AtomObservable {
  std::string name;
  Eigen::VectorXd profile;
  Mat level;
  double norm() const { return profile.cwiseAbs().maxCoeff() * Eigen::JacobiSVD<Mat>(level).singularValues()(0); }
};

inline std::vector<AtomObservable> observable_battery(const AtomGrid& g) {
  const Eigen::VectorXd one = Eigen::VectorXd::Ones(g.points);
  Eigen::VectorXd c(g.points), s(g.points);
  for (int n = 0; n < g.points; ++n) {
    const double ph = 2.0 * M_PI * g.x[static_cast<std::size_t>(n)] / g.length();
    c(n) = std::cos(ph);
    s(n) = std::sin(ph);
  }
  return {{"level_z", one, pauli::z()}, {"level_x", one, pauli::x()}, {"cos_x", c, pauli::id()}, {"sin_x", s, pauli::id()}};
}

// <psi, O psi> / ||psi||^2 with layout ((x * spectators + q) * 2 + level) * dim(F) + s.
inline double atom_expectation(const Vec& psi, int points, int spectators, std::size_t fock_dim, const AtomObservable& o) {
  const auto nf = static_cast<Eigen::Index>(fock_dim);
  if (psi.size() != static_cast<Eigen::Index>(points) * spectators * 2 * nf) throw std::invalid_argument("atom_expectation: size mismatch");
  cplx acc = 0.0;
  for (int n = 0; n < points; ++n) {
    if (o.profile(n) == 0.0) continue;
    for (int q = 0; q < spectators; ++q) {
      const Eigen::Index base = ((static_cast<Eigen::Index>(n) * spectators + q) * 2) * nf;
      Eigen::Map<const Mat> blk(psi.data() + base, nf, 2);
      acc += o.profile(n) * (blk.adjoint() * blk).cwiseProduct(o.level.transpose()).sum();
    }
  }
  return acc.real() / psi.squaredNorm();
}

struct HypothesisReport {
  double atom_outside = 0.0;   // max |u(x)| for |x| > R
  double photon_inside = 0.0;    // photon mass of phi inside |y| < shell d
  double potential_near = 0.0;     // sup_{|x| <= d} |V_PQ|
  double potential_bound = 0.0;     // g 2^{-beta} d^{-beta}
  double field_overlap = 0.0;    // max_{|y| <= shell d} |m(y)|
  double d_over_r2 = 0.0;    // d / R^2 (the theorem assumes > 1)
};

struct ClosedSystemResult {
  std::vector<double> times, error, norm_drift;
  std::vector<std::string> observables;
  std::vector<std::vector<double>> reference, full;  // [observable][time]
  HypothesisReport hypotheses;
};

// err(t) = max_O |<O>_full(t) - <O>_ref(t)| / ||O||, with the reference the dressed atom evolved alone.
// phi = q0 (x) vacuum, so I(J (x) phi) = J (x) q0.
inline ClosedSystemResult closed_system_error(const Fiber& f, const AtomGrid& g, const GroundTable& table, const Vec& u, double radius,
                                              const QModel& q, double d, const std::vector<double>& times, double tol = 1e-9) {
  ClosedSystemResult res;
  auto& hy = res.hypotheses;
  for (int n = 0; n < g.points; ++n)
    if (std::abs(g.x[static_cast<std::size_t>(n)]) > radius) hy.atom_outside = std::max(hy.atom_outside, std::abs(u(n)));
  if (hy.atom_outside > 1e-14) throw std::invalid_argument("closed_system_error: atom-support hypothesis failed, u not supported in |x| <= R");
  hy.photon_inside = 0.0;
  for (int n = 0; n < g.points; ++n)
    if (std::abs(g.x[static_cast<std::size_t>(n)]) <= d) hy.potential_near = std::max(hy.potential_near, std::abs(q.potential(g.x[static_cast<std::size_t>(n)], d)));
  hy.potential_bound = std::abs(q.g) * std::pow(2.0, -q.beta) * std::pow(d, -q.beta);
  if (hy.potential_near > hy.potential_bound * (1.0 + 1e-12) + 1e-300)
    throw std::invalid_argument("closed_system_error: potential-decay hypothesis failed, |V_PQ| on |x| <= d exceeds C d^{-beta}");
  {
    // Field-support hypothesis: the Q-E multiplier must vanish where the near creation operators live.
    const auto far = fock::position_indicator(f.modes(), [&](double y) { return std::abs(y) > q.shell * d; });
    const auto near = fock::position_indicator(f.modes(), [&](double y) { return std::abs(y) <= q.shell * d; });
    hy.field_overlap = std::abs(q.m0) * (far.matrix * near.matrix).norm();
  }
  if (hy.field_overlap > 1e-12) throw std::invalid_argument("closed_system_error: field-support hypothesis failed");
  if (q.shell * d > 0.5 * f.modes().position_extent() && q.m0 != 0.0)
    throw std::invalid_argument("closed_system_error: field-support hypothesis failed, no photon region beyond shell d on this grid");
  hy.d_over_r2 = d / (radius * radius);
  if (std::abs(q.q0.norm() - 1.0) > 1e-12) throw std::invalid_argument("closed_system_error: q0 must be normalized");

  const FiberTransform tr1(g, f, 1);
  Vec j = dressed_state(tr1, table, u);
  j.normalize();
  const int qd = q.dim();
  const auto dd = static_cast<Eigen::Index>(f.dim());
  Vec psi(j.size() * qd);
  for (int n = 0; n < g.points; ++n)
    for (int a = 0; a < qd; ++a) psi.segment((static_cast<Eigen::Index>(n) * qd + a) * dd, dd) = q.q0(a) * j.segment(n * dd, dd);

  const auto battery = observable_battery(g);
  for (const auto& o : battery) res.observables.push_back(o.name);
  res.reference.assign(battery.size(), {});
  res.full.assign(battery.size(), {});
  evolve_series(AtomFieldOperator{&tr1, {}}, j, times, tol, [&](std::size_t, double, const Vec& s) {
    for (std::size_t k = 0; k < battery.size(); ++k) res.reference[k].push_back(atom_expectation(s, g.points, 1, f.fock_dim(), battery[k]));
  });
  const FiberTransform trq(g, f, qd);
  const ClosedSystemOperator h(trq, q, d);
  evolve_series(h, psi, times, tol, [&](std::size_t, double t, const Vec& s) {
    res.times.push_back(t);
    res.norm_drift.push_back(std::abs(s.norm() - 1.0));
    for (std::size_t k = 0; k < battery.size(); ++k) res.full[k].push_back(atom_expectation(s, g.points, qd, f.fock_dim(), battery[k]));
  });
  res.error.assign(res.times.size(), 0.0);
  for (std::size_t i = 0; i < res.times.size(); ++i)
    for (std::size_t k = 0; k < battery.size(); ++k)
      res.error[i] = std::max(res.error[i], std::abs(res.full[k][i] - res.reference[k][i]) / battery[k].norm());
  return res;
}

// ---- effective dynamics --------------------------------------------------------------------------

struct EffectiveDynamicsResult {
  double eps = 0.0;
  std::vector<double> times, error;
  double max_error = 0.0;
};

// ||e^{-itH} J(u) - J(e^{-itH_eff} u)|| with H = H_{P v E} + v0 cos(eps x) and H_eff = E(-i grad) + v0 cos(eps x).
// The table must hold every grid momentum.
inline EffectiveDynamicsResult effective_dynamics_error(const FiberTransform& tr, const GroundTable& table, const Vec& u, double v0,
                                                        double eps, const std::vector<double>& times, double tol = 1e-10) {
  const AtomGrid& g = tr.grid();
  const double nu = tr.fiber().params().nu;
  if (v0 != 0.0) {
    if (!(eps > 0.0 && eps < 1.0)) throw std::invalid_argument("effective_dynamics_error: potential spectrum outside the unit ball");
    const double r = eps / g.momentum_spacing();
    if (std::abs(r - std::round(r)) > 1e-9) throw std::invalid_argument("effective_dynamics_error: eps is not a grid momentum");
  }
  Vec uh = u;
  const UnitaryFft fft({g.points});
  fft.forward(uh);
  for (int m = 0; m < g.points; ++m)
    if (std::abs(g.p[static_cast<std::size_t>(m)]) > 0.25 * nu && std::abs(uh(m)) > 1e-12 * uh.norm())
      throw std::invalid_argument("effective_dynamics_error: u is not band-limited within nu/4");
  Eigen::VectorXd pot(g.points);
  for (int n = 0; n < g.points; ++n) pot(n) = v0 * std::cos(eps * g.x[static_cast<std::size_t>(n)]);
  // Dense H_eff = F^dag E F + V on the atom grid.
  Mat four(g.points, g.points);
  for (int c = 0; c < g.points; ++c) {
    Vec e = Vec::Zero(g.points);
    e(c) = 1.0;
    fft.forward(e);
    four.col(c) = e;
  }
  Eigen::VectorXd ep(g.points);
  for (int m = 0; m < g.points; ++m) ep(m) = table.at(g.p[static_cast<std::size_t>(m)]).energy;
  Mat heff = four.adjoint() * ep.cast<cplx>().asDiagonal() * four;
  heff.diagonal() += pot.cast<cplx>();
  heff = 0.5 * (heff + heff.adjoint()).eval();
  const Eigen::SelfAdjointEigenSolver<Mat> es(heff);

  EffectiveDynamicsResult r;
  r.eps = eps;
  const AtomFieldOperator h{&tr, pot};
  evolve_series(h, dressed_state(tr, table, u), times, tol, [&](std::size_t, double t, const Vec& s) {
    const Vec ph = (es.eigenvalues().cast<cplx>() * cplx(0.0, -t)).array().exp();
    const Vec ut = es.eigenvectors() * ph.asDiagonal() * (es.eigenvectors().adjoint() * u);
    r.times.push_back(t);
    r.error.push_back((s - dressed_state(tr, table, ut)).norm());
    r.max_error = std::max(r.max_error, r.error.back());
  });
  return r;
}

}  // namespace closedsys::model2
