// tensor.hpp — state vectors, sparse operators, tensor products, reduced density matrices
#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <complex>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace closedsys {

using cplx = std::complex<double>;
using Vec = Eigen::VectorXcd;
using Mat = Eigen::MatrixXcd;
using SpMat = Eigen::SparseMatrix<cplx, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<cplx>;

inline constexpr cplx I_UNIT{0.0, 1.0};

// Largest admissible amplitude count; kron and builders refuse anything bigger.
inline std::size_t& max_state_dim() {
  static std::size_t cap = std::size_t{1} << 22;
  return cap;
}

inline std::size_t product(const std::vector<std::size_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

// Anything that can act on a vector.
template <class Op>
concept LinearOperator = requires(const Op& op, const Vec& x, Vec& y) {
  { op.dim() } -> std::convertible_to<std::size_t>;
  op.apply(x, y);
};

struct StateVector {
  Vec amplitudes;
  std::vector<std::size_t> basis_dims;  // tensor factor dimensions, outermost first

  StateVector() = default;
  StateVector(Vec amps, std::vector<std::size_t> dims) : amplitudes(std::move(amps)), basis_dims(std::move(dims)) {
    if (basis_dims.empty()) basis_dims = {static_cast<std::size_t>(amplitudes.size())};
    for (auto d : basis_dims)
      if (d == 0) throw std::invalid_argument("StateVector: zero basis dimension");
    if (product(basis_dims) != static_cast<std::size_t>(amplitudes.size()))
      throw std::invalid_argument("StateVector: amplitude count does not match basis_dims");
    if (!amplitudes.allFinite()) throw std::invalid_argument("StateVector: non-finite amplitude");
  }
  explicit StateVector(Vec amps) : StateVector(std::move(amps), {}) {}

  std::size_t size() const { return static_cast<std::size_t>(amplitudes.size()); }
  double norm() const { return amplitudes.norm(); }
  StateVector normalized() const {
    const double n = norm();
    if (n == 0.0) throw std::invalid_argument("StateVector::normalized: zero-norm state");
    return StateVector(amplitudes / n, basis_dims);
  }
};

struct SparseOperator {
  SpMat matrix;
  bool hermitian = false;

  SparseOperator() = default;
  SparseOperator(SpMat m, bool herm) : matrix(std::move(m)), hermitian(herm) {
    if (matrix.rows() != matrix.cols()) throw std::invalid_argument("SparseOperator: matrix must be square");
    matrix.makeCompressed();
    if (hermitian && hermiticity_defect() > 1e-13 * std::max(1.0, max_abs()))
      throw std::invalid_argument("SparseOperator: hermitian flag set but |A - A^dag| exceeds 1e-13");
  }

  // Duplicate coordinates are summed, so the assembled matrix has unique (row, col) entries.
  static SparseOperator from_triplets(std::size_t dim, const std::vector<Triplet>& entries, bool herm) {
    SpMat m(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    m.setFromTriplets(entries.begin(), entries.end());
    m.prune(cplx(0.0, 0.0));
    return SparseOperator(std::move(m), herm);
  }
  static SparseOperator from_dense(const Mat& a, bool herm, double drop = 0.0) {
    std::vector<Triplet> t;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j)
        if (std::abs(a(i, j)) > drop) t.emplace_back(i, j, a(i, j));
    return from_triplets(static_cast<std::size_t>(a.rows()), t, herm);
  }
  static SparseOperator identity(std::size_t n) {
    SpMat m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    m.setIdentity();
    return SparseOperator(std::move(m), true);
  }
  static SparseOperator diagonal(const Eigen::VectorXd& d) {
    std::vector<Triplet> t;
    for (Eigen::Index i = 0; i < d.size(); ++i)
      if (d(i) != 0.0) t.emplace_back(i, i, cplx(d(i), 0.0));
    return from_triplets(static_cast<std::size_t>(d.size()), t, true);
  }

  std::size_t dim() const { return static_cast<std::size_t>(matrix.rows()); }
  void apply(const Vec& in, Vec& out) const { out.noalias() = matrix * in; }
  Mat dense() const { return Mat(matrix); }

  double max_abs() const {
    double m = 0.0;
    for (Eigen::Index k = 0; k < matrix.outerSize(); ++k)
      for (SpMat::InnerIterator it(matrix, k); it; ++it) m = std::max(m, std::abs(it.value()));
    return m;
  }
  double hermiticity_defect() const {
    SpMat diff = matrix - SpMat(matrix.adjoint());
    double m = 0.0;
    for (Eigen::Index k = 0; k < diff.outerSize(); ++k)
      for (SpMat::InnerIterator it(diff, k); it; ++it) m = std::max(m, std::abs(it.value()));
    return m;
  }
  std::vector<Triplet> entries() const {
    std::vector<Triplet> t;
    t.reserve(static_cast<std::size_t>(matrix.nonZeros()));
    for (Eigen::Index k = 0; k < matrix.outerSize(); ++k)
      for (SpMat::InnerIterator it(matrix, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
    return t;
  }
  SparseOperator adjoint() const { return SparseOperator(SpMat(matrix.adjoint()), hermitian); }
  SparseOperator operator+(const SparseOperator& o) const {
    check_same(o, "operator+");
    return SparseOperator(SpMat(matrix + o.matrix), hermitian && o.hermitian);
  }
  SparseOperator operator-(const SparseOperator& o) const {
    check_same(o, "operator-");
    return SparseOperator(SpMat(matrix - o.matrix), hermitian && o.hermitian);
  }
  SparseOperator operator*(const SparseOperator& o) const {
    check_same(o, "operator*");
    return SparseOperator(SpMat(matrix * o.matrix), false);
  }
  SparseOperator scaled(cplx s) const {
    const bool keep = hermitian && std::abs(s.imag()) == 0.0;
    return SparseOperator(SpMat(matrix * s), keep);
  }

 private:
  void check_same(const SparseOperator& o, const char* what) const {
    if (dim() != o.dim()) throw std::invalid_argument(std::string("SparseOperator::") + what + ": dimension mismatch");
  }
};

struct DensityMatrix {
  Mat entries;

  DensityMatrix() = default;
  explicit DensityMatrix(Mat m) : entries(std::move(m)) { validate(); }

  std::size_t dim() const { return static_cast<std::size_t>(entries.rows()); }
  cplx trace_with(const Mat& a) const { return (entries * a).trace(); }

  void validate() const {
    if (entries.rows() != entries.cols()) throw std::invalid_argument("DensityMatrix: not square");
    if ((entries - entries.adjoint()).cwiseAbs().maxCoeff() > 1e-12)
      throw std::invalid_argument("DensityMatrix: not hermitian to 1e-12");
    if (std::abs(entries.trace() - cplx(1.0, 0.0)) > 1e-10)
      throw std::invalid_argument("DensityMatrix: trace differs from 1 by more than 1e-10");
    Eigen::SelfAdjointEigenSolver<Mat> es(entries, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-10) throw std::invalid_argument("DensityMatrix: negative eigenvalue below -1e-10");
  }
};

// Generic operator backed by a callable; used for matrix-free Hamiltonians.
struct FunctionOperator {
  std::size_t n = 0;
  std::function<void(const Vec&, Vec&)> fn;
  bool hermitian = true;
  std::size_t dim() const { return n; }
  void apply(const Vec& in, Vec& out) const { fn(in, out); }
};

namespace pauli {
inline Mat x() { Mat m(2, 2); m << 0, 1, 1, 0; return m; }
inline Mat y() { Mat m(2, 2); m << 0, -I_UNIT, I_UNIT, 0; return m; }
inline Mat z() { Mat m(2, 2); m << 1, 0, 0, -1; return m; }
inline Mat id() { return Mat::Identity(2, 2); }
}  // namespace pauli

// Entry (i*dim(B)+k, j*dim(B)+l) = A_ij * B_kl.
inline SparseOperator kron(const SparseOperator& a, const SparseOperator& b) {
  const std::size_t na = a.dim(), nb = b.dim();
  if (na != 0 && nb > max_state_dim() / na)
    throw std::length_error("kron: product dimension exceeds max_state_dim (" + std::to_string(max_state_dim()) + ")");
  const auto ea = a.entries();
  const auto eb = b.entries();
  std::vector<Triplet> t;
  t.reserve(ea.size() * eb.size());
  for (const auto& x : ea)
    for (const auto& y : eb)
      t.emplace_back(x.row() * static_cast<Eigen::Index>(nb) + y.row(), x.col() * static_cast<Eigen::Index>(nb) + y.col(),
                     x.value() * y.value());
  return SparseOperator::from_triplets(na * nb, t, a.hermitian && b.hermitian);
}

inline SparseOperator kron(const std::vector<SparseOperator>& factors) {
  if (factors.empty()) throw std::invalid_argument("kron: empty factor list");
  SparseOperator acc = factors.front();
  for (std::size_t i = 1; i < factors.size(); ++i) acc = kron(acc, factors[i]);
  return acc;
}

inline Vec kron_vec(const Vec& a, const Vec& b) {
  Vec out(a.size() * b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) out.segment(i * b.size(), b.size()) = a(i) * b;
  return out;
}

// <psi, O psi> / <psi, psi>; the imaginary part must vanish for a hermitian O.
template <LinearOperator Op>
double expectation_vec(const Vec& psi, const Op& o) {
  if (static_cast<std::size_t>(psi.size()) != o.dim()) throw std::invalid_argument("expectation: dimension mismatch");
  const double nn = psi.squaredNorm();
  if (nn == 0.0) throw std::invalid_argument("expectation: zero-norm state");
  Vec opsi(psi.size());
  o.apply(psi, opsi);
  const cplx v = psi.dot(opsi) / nn;
  const double scale = std::max(1.0, opsi.norm() / std::sqrt(nn));
  if (std::abs(v.imag()) > 1e-11 * scale)
    throw std::runtime_error("expectation: imaginary part " + std::to_string(v.imag()) + " exceeds 1e-11");
  return v.real();
}

inline double expectation(const StateVector& psi, const SparseOperator& o) {
  if (!o.hermitian) throw std::invalid_argument("expectation: operator not flagged hermitian");
  return expectation_vec(psi.amplitudes, o);
}

// Reduced density matrix on the leading factors; rho_{ab} = sum_t psi_{a t} conj(psi_{b t}) / |psi|^2.
inline DensityMatrix partial_trace_P(const StateVector& psi, const std::vector<std::size_t>& keep_dims,
                                     const std::vector<std::size_t>& trace_dims) {
  std::vector<std::size_t> joined = keep_dims;
  joined.insert(joined.end(), trace_dims.begin(), trace_dims.end());
  const std::size_t k = product(keep_dims), t = product(trace_dims);
  const bool same_factors = joined == psi.basis_dims;
  const bool same_split = product(psi.basis_dims) == k * t && psi.size() == k * t;
  if (!same_factors && !(same_split && psi.basis_dims.size() <= 1))
    throw std::invalid_argument("partial_trace_P: keep x trace factors do not match basis_dims");
  const double nn = psi.amplitudes.squaredNorm();
  if (nn == 0.0) throw std::invalid_argument("partial_trace_P: zero-norm state");
  Eigen::Map<const Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      psi.amplitudes.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(t));
  Mat rho = m * m.adjoint() / nn;
  rho = 0.5 * (rho + rho.adjoint()).eval();
  return DensityMatrix(std::move(rho));
}

struct SpectralNormOptions {
  double rel_tol = 1e-8;        // stop when the Ritz value moves less than this
  int krylov = 40;              // Lanczos steps per restart
  int max_restarts = 50;
  std::uint64_t seed = 0x5eed;  // start vector seed
};

// Largest singular value of a map via Lanczos on its normal operator C^dag C.
template <class Fwd, class Adj>
double spectral_norm(Fwd&& fwd, Adj&& adj, std::size_t n, const SpectralNormOptions& opt = {}) {
  if (n == 0) return 0.0;
  Vec v(static_cast<Eigen::Index>(n));
  {
    std::uint64_t s = opt.seed;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      s = s * 6364136223846793005ULL + 1442695040888963407ULL;
      const double a = static_cast<double>(s >> 11) / 9007199254740992.0 - 0.5;
      s = s * 6364136223846793005ULL + 1442695040888963407ULL;
      const double b = static_cast<double>(s >> 11) / 9007199254740992.0 - 0.5;
      v(i) = cplx(a, b);
    }
  }
  v.normalize();
  double prev = -1.0;
  Vec w, tmp;
  for (int r = 0; r < opt.max_restarts; ++r) {
    const int m = std::min<int>(opt.krylov, static_cast<int>(n));
    std::vector<Vec> basis;
    basis.reserve(static_cast<std::size_t>(m) + 1);
    basis.push_back(v);
    Eigen::VectorXd alpha(m), beta(m);
    int used = m;
    for (int j = 0; j < m; ++j) {
      fwd(basis[static_cast<std::size_t>(j)], tmp);
      adj(tmp, w);
      alpha(j) = basis[static_cast<std::size_t>(j)].dot(w).real();
      for (int pass = 0; pass < 2; ++pass)
        for (const auto& b : basis) w -= b * b.dot(w);
      beta(j) = w.norm();
      if (beta(j) < 1e-14 * std::max(1.0, std::abs(alpha(j)))) {
        used = j + 1;
        break;
      }
      if (j + 1 < m) basis.push_back(w / beta(j));
    }
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(used, used);
    for (int j = 0; j < used; ++j) {
      t(j, j) = alpha(j);
      if (j + 1 < used) t(j, j + 1) = t(j + 1, j) = beta(j);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t);
    const double lam = std::max(0.0, es.eigenvalues()(used - 1));
    Vec nv = Vec::Zero(static_cast<Eigen::Index>(n));
    for (int j = 0; j < used; ++j) nv += basis[static_cast<std::size_t>(j)] * es.eigenvectors()(j, used - 1);
    const double est = std::sqrt(lam);
    if (used < m || m == static_cast<int>(n) || (prev >= 0.0 && std::abs(est - prev) <= opt.rel_tol * std::max(est, 1e-300))) return est;
    if (est == 0.0 && prev == 0.0) return 0.0;
    prev = est;
    v = nv.normalized();
  }
  throw std::runtime_error("spectral_norm: Lanczos iteration stagnated");
}

template <LinearOperator Op>
double operator_norm(const Op& a, const SpectralNormOptions& opt = {}) {
  return spectral_norm([&](const Vec& x, Vec& y) { a.apply(x, y); },
                       [&](const Vec& x, Vec& y) { a.apply(x, y); }, a.dim(), opt);
}

// ||AB - BA|| estimated on C^dag C.
inline double commutator_norm(const SparseOperator& a, const SparseOperator& b, const SpectralNormOptions& opt = {}) {
  if (a.dim() != b.dim()) throw std::invalid_argument("commutator_norm: dimension mismatch");
  const SpMat c = a.matrix * b.matrix - b.matrix * a.matrix;
  const SpMat cd = c.adjoint();
  return spectral_norm([&](const Vec& x, Vec& y) { y.noalias() = c * x; },
                       [&](const Vec& x, Vec& y) { y.noalias() = cd * x; }, a.dim(), opt);
}

}  // namespace closedsys
