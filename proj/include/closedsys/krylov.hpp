// krylov.hpp — Lanczos time propagation and lowest-eigenpair solver for hermitian operators
#pragma once

#include "closedsys/tensor.hpp"

#include <cstdint>
#include <optional>

namespace closedsys {

struct KrylovOptions {
  int subspace = 30;          // Krylov dimension per step
  long max_steps = 1000000;   // adaptive step budget before giving up
  double safety = 0.9;        // step-size shrink factor on rejection
};

struct EvolveStats {
  long steps = 0;
  long rejected = 0;
  long matvecs = 0;
  double error_estimate = 0.0;  // accumulated local error estimates
};

namespace detail {

// Orthonormal Lanczos basis with full reorthogonalization; returns the number of vectors built.
template <LinearOperator Op>
int lanczos_basis(const Op& h, const Vec& start, int m, std::vector<Vec>& basis, Eigen::VectorXd& alpha,
                  Eigen::VectorXd& beta, long& matvecs) {
  basis.clear();
  basis.push_back(start);
  alpha.resize(m);
  beta.resize(m);
  Vec w(start.size());
  for (int j = 0; j < m; ++j) {
    h.apply(basis[static_cast<std::size_t>(j)], w);
    ++matvecs;
    alpha(j) = basis[static_cast<std::size_t>(j)].dot(w).real();
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) w -= b * b.dot(w);
    beta(j) = w.norm();
    const double scale = std::max({1.0, std::abs(alpha(j)), j > 0 ? beta(j - 1) : 0.0});
    if (beta(j) <= 1e-13 * scale) {
      beta(j) = 0.0;
      return j + 1;
    }
    if (j + 1 < m) basis.push_back(w / beta(j));
  }
  return m;
}

inline Eigen::MatrixXd tridiagonal(const Eigen::VectorXd& alpha, const Eigen::VectorXd& beta, int k) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(k, k);
  for (int j = 0; j < k; ++j) {
    t(j, j) = alpha(j);
    if (j + 1 < k) t(j, j + 1) = t(j + 1, j) = beta(j);
  }
  return t;
}

}  // namespace detail

// e^{-itH} psi with residual-controlled steps; tol bounds the total error over [0, t].
template <LinearOperator Op>
Vec evolve_vec(const Op& h, const Vec& psi, double t, double tol, const KrylovOptions& opt = {}, EvolveStats* stats = nullptr) {
  if (static_cast<std::size_t>(psi.size()) != h.dim()) throw std::invalid_argument("evolve: dimension mismatch");
  if (!(tol > 0.0)) throw std::invalid_argument("evolve: tol must be positive");
  EvolveStats local;
  EvolveStats& st = stats ? *stats : local;
  Vec w = psi;
  const double total = std::abs(t);
  const double sign = t < 0 ? -1.0 : 1.0;
  double beta0 = w.norm();
  if (total == 0.0 || beta0 == 0.0) return w;

  Vec hw(w.size());
  h.apply(w, hw);
  ++st.matvecs;
  const double hnorm = std::max(hw.norm() / beta0, 1e-12);
  double tau = std::min(total, 2.0 * opt.subspace / (3.0 * hnorm));
  double done = 0.0;
  std::vector<Vec> basis;
  Eigen::VectorXd alpha, beta;
  const int m = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(opt.subspace), h.dim()));

  while (done < total) {
    if (st.steps >= opt.max_steps) throw std::runtime_error("evolve: exceeded the adaptive step budget");
    const double bn = w.norm();
    const int k = detail::lanczos_basis(h, w / bn, m, basis, alpha, beta, st.matvecs);
    const bool exact = (k < m) || beta(k - 1) == 0.0 || k == static_cast<int>(h.dim());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(detail::tridiagonal(alpha, beta, k));
    const Eigen::VectorXd& lam = es.eigenvalues();
    const Eigen::MatrixXd& q = es.eigenvectors();
    const double hk = exact ? 0.0 : beta(k - 1);
    const double remaining = total - done;
    if (exact) tau = remaining;
    tau = std::min(tau, remaining);
    Vec y;
    double err = 0.0;
    for (;;) {
      Eigen::VectorXcd phase(k);
      for (int i = 0; i < k; ++i) phase(i) = std::exp(cplx(0.0, -sign * tau * lam(i))) * q(0, i);
      y = q.cast<cplx>() * phase;
      err = bn * hk * std::abs(y(k - 1));
      const double allowed = tol * tau / total;
      if (err <= allowed || exact) break;
      ++st.rejected;
      tau *= opt.safety * std::pow(allowed / err, 1.0 / k);
      if (tau < 1e-14 * total) throw std::runtime_error("evolve: step size underflow (non-convergence)");
    }
    Vec next = Vec::Zero(w.size());
    for (int i = 0; i < k; ++i) next += basis[static_cast<std::size_t>(i)] * (bn * y(i));
    w = std::move(next);
    done += tau;
    st.error_estimate += err;
    ++st.steps;
    if (!exact) {
      const double allowed = tol * tau / total;
      const double grow = err > 0.0 ? opt.safety * std::pow(allowed / err, 1.0 / k) : 2.0;
      tau *= std::clamp(grow, 0.2, 2.0);
    }
  }
  return w;
}

inline void require_hermitian(const SparseOperator& h, const char* who) {
  if (!h.hermitian) throw std::invalid_argument(std::string(who) + ": operator is not flagged hermitian");
}

inline StateVector evolve(const SparseOperator& h, const StateVector& psi, double t, double tol,
                          const KrylovOptions& opt = {}, EvolveStats* stats = nullptr) {
  require_hermitian(h, "evolve");
  return StateVector(evolve_vec(h, psi.amplitudes, t, tol, opt, stats), psi.basis_dims);
}

// Propagates through an increasing list of times, calling sink(index, time, state) at each.
template <LinearOperator Op, class Sink>
void evolve_series(const Op& h, const Vec& psi, const std::vector<double>& times, double tol, Sink&& sink,
                   const KrylovOptions& opt = {}, EvolveStats* stats = nullptr) {
  Vec w = psi;
  double now = 0.0;
  const double horizon = times.empty() ? 0.0 : std::max(1.0, times.back());
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < now) throw std::invalid_argument("evolve_series: times must be nondecreasing and >= 0");
    const double dt = times[i] - now;
    if (dt > 0.0) w = evolve_vec(h, w, dt, tol * dt / horizon, opt, stats);
    now = times[i];
    sink(i, now, static_cast<const Vec&>(w));
  }
}

struct LanczosOptions {
  int subspace = 80;
  int max_restarts = 400;
  std::uint64_t seed = 0x9e3779b97f4a7c15ULL;
};

struct GroundState {
  double energy = 0.0;
  Vec vector;
  double residual = 0.0;   // ||H v - E v||
  double gap = 0.0;        // Ritz estimate of E_1 - E_0
  bool degenerate = false; // gap within tol; reported, never resolved
  long matvecs = 0;
};

inline Vec seeded_vector(std::size_t n, std::uint64_t seed) {
  Vec v(static_cast<Eigen::Index>(n));
  std::uint64_t s = seed;
  auto next = [&s]() {
    s ^= s << 13;
    s ^= s >> 7;
    s ^= s << 17;
    return static_cast<double>(s >> 11) / 9007199254740992.0 - 0.5;
  };
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double a = next();
    v(i) = cplx(a, next());
  }
  return v.normalized();
}

template <LinearOperator Op>
GroundState ground_state_vec(const Op& h, double tol, const LanczosOptions& opt = {}, const Vec* guess = nullptr) {
  const std::size_t n = h.dim();
  if (n == 0) throw std::invalid_argument("ground_state: empty operator");
  if (!(tol > 0.0)) throw std::invalid_argument("ground_state: tol must be positive");
  GroundState gs;
  Vec v = seeded_vector(n, opt.seed);
  if (guess) {
    if (static_cast<std::size_t>(guess->size()) != n) throw std::invalid_argument("ground_state: guess dimension mismatch");
    v = (*guess + 1e-3 * v).normalized();
  }
  const int m = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(opt.subspace), n));
  std::vector<Vec> basis;
  Eigen::VectorXd alpha, beta;
  Vec hv(static_cast<Eigen::Index>(n));
  for (int r = 0; r < opt.max_restarts; ++r) {
    const int k = detail::lanczos_basis(h, v, m, basis, alpha, beta, gs.matvecs);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(detail::tridiagonal(alpha, beta, k));
    Vec x = Vec::Zero(static_cast<Eigen::Index>(n));
    for (int i = 0; i < k; ++i) x += basis[static_cast<std::size_t>(i)] * es.eigenvectors()(i, 0);
    x.normalize();
    h.apply(x, hv);
    ++gs.matvecs;
    const double e = x.dot(hv).real();
    const double res = (hv - e * x).norm();
    if (k >= 2) gs.gap = es.eigenvalues()(1) - es.eigenvalues()(0);
    if (res <= tol) {
      gs.energy = e;
      gs.vector = std::move(x);
      gs.residual = res;
      gs.degenerate = k >= 2 && gs.gap <= tol;
      return gs;
    }
    v = x;
  }
  throw std::runtime_error("ground_state: Lanczos did not reach the residual tolerance");
}

inline GroundState ground_state(const SparseOperator& h, double tol, const LanczosOptions& opt = {}) {
  require_hermitian(h, "ground_state");
  return ground_state_vec(h, tol, opt);
}

}  // namespace closedsys
