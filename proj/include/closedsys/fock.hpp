// fock.hpp — truncated bosonic Fock space over a discrete 1D mode set
//
// Basis: occupation lists (n_0, ..., n_{M-1}) with sum <= n_max, in ascending lexicographic order
// with n_0 the most significant digit.  The vacuum is index 0.  This order is part of the
// serialized-state format and must not change.
#pragma once

#include "closedsys/fft.hpp"
#include "closedsys/tensor.hpp"

#include <array>
#include <unordered_map>

namespace closedsys::fock {

// Momentum modes k_j = (j - (M-1)/2) dk on (-k_max, k_max); the photon position y = i d/dk
// lives on the DFT-conjugate grid y_m = (m - M/2) * 2 pi / (M dk).  No mode sits at k = 0.
struct ModeSet {
  std::vector<double> momenta;    // k_j
  double weight = 0.0;            // quadrature weight dk
  std::vector<double> positions;  // y_m
  Mat to_position;                // unitary: position amplitudes = to_position * mode coefficients

  static ModeSet uniform(int modes, double k_max) {
    if (modes < 2) throw std::invalid_argument("ModeSet::uniform: need at least two modes");
    if (!(k_max > 0.0)) throw std::invalid_argument("ModeSet::uniform: k_max must be positive");
    ModeSet s;
    const double dk = 2.0 * k_max / modes;
    const double dy = 2.0 * M_PI / (modes * dk);
    s.weight = dk;
    for (int j = 0; j < modes; ++j) s.momenta.push_back((j - 0.5 * (modes - 1)) * dk);
    for (int m = 0; m < modes; ++m) s.positions.push_back((m - modes / 2) * dy);
    s.to_position.resize(modes, modes);
    for (int m = 0; m < modes; ++m)
      for (int j = 0; j < modes; ++j)
        s.to_position(m, j) = std::exp(cplx(0.0, s.positions[m] * s.momenta[j])) / std::sqrt(double(modes));
    return s;
  }

  int size() const { return static_cast<int>(momenta.size()); }
  double position_spacing() const { return positions.size() > 1 ? positions[1] - positions[0] : 0.0; }
  double position_extent() const { return position_spacing() * static_cast<double>(positions.size()); }

  // Orthonormal-mode coefficients of a continuum amplitude f(k): f(k_j) sqrt(dk).
  template <class F>
  Vec discretize(F&& f) const {
    Vec v(size());
    for (int j = 0; j < size(); ++j) v(j) = cplx(f(momenta[static_cast<std::size_t>(j)])) * std::sqrt(weight);
    return v;
  }
  template <class F>
  Mat momentum_multiplier(F&& f) const {
    Mat m = Mat::Zero(size(), size());
    for (int j = 0; j < size(); ++j) m(j, j) = f(momenta[static_cast<std::size_t>(j)]);
    return m;
  }
  template <class F>
  Mat position_multiplier(F&& f) const {
    Eigen::VectorXcd d(size());
    for (int m = 0; m < size(); ++m) d(m) = f(positions[static_cast<std::size_t>(m)]);
    return to_position.adjoint() * d.asDiagonal() * to_position;
  }
};

// One-particle operator on mode space (or between mode spaces).
struct OneParticleMap {
  Mat matrix;
  bool contraction = false;  // spectral norm <= 1

  OneParticleMap() = default;
  explicit OneParticleMap(Mat m) : matrix(std::move(m)) {
    Eigen::JacobiSVD<Mat> svd(matrix);
    contraction = matrix.size() == 0 || svd.singularValues()(0) <= 1.0 + 1e-12;
  }
  int rows() const { return static_cast<int>(matrix.rows()); }
  int cols() const { return static_cast<int>(matrix.cols()); }
};

class FockSpace {
 public:
  FockSpace(int modes, int n_max) : modes_(modes), n_max_(n_max) {
    if (modes < 1 || modes > 4095) throw std::invalid_argument("FockSpace: mode count out of range [1, 4095]");
    if (n_max < 0 || n_max > 5) throw std::invalid_argument("FockSpace: n_max out of range [0, 5]");
    std::vector<int> occ(static_cast<std::size_t>(modes), 0);
    enumerate(0, n_max, occ);
    sector_.assign(static_cast<std::size_t>(n_max) + 1, {});
    for (std::size_t i = 0; i < states_.size(); ++i) {
      const int n = static_cast<int>(states_[i].size());
      sector_pos_.push_back(sector_[static_cast<std::size_t>(n)].size());
      sector_[static_cast<std::size_t>(n)].push_back(i);
      index_.emplace(key(states_[i]), i);
      double f = 1.0;
      int run = 1;
      for (std::size_t a = 1; a <= states_[i].size(); ++a) {
        if (a < states_[i].size() && states_[i][a] == states_[i][a - 1]) {
          ++run;
        } else {
          for (int r = 2; r <= run; ++r) f *= r;
          run = 1;
        }
      }
      double nf = 1.0;
      for (int r = 2; r <= n; ++r) nf *= r;
      multiplicity_.push_back(nf / f);
    }
  }

  int modes() const { return modes_; }
  int n_max() const { return n_max_; }
  std::size_t dim() const { return states_.size(); }
  // Sorted list of occupied mode labels (with repetition) for basis state i.
  const std::vector<int>& modes_of(std::size_t i) const { return states_[i]; }
  int number(std::size_t i) const { return static_cast<int>(states_[i].size()); }
  std::vector<int> occupation(std::size_t i) const {
    std::vector<int> o(static_cast<std::size_t>(modes_), 0);
    for (int m : states_[i]) ++o[static_cast<std::size_t>(m)];
    return o;
  }
  // Number of distinct orderings n! / prod n_i! of basis state i.
  double multiplicity(std::size_t i) const { return multiplicity_[i]; }
  const std::vector<std::size_t>& sector(int n) const { return sector_.at(static_cast<std::size_t>(n)); }
  std::size_t sector_position(std::size_t i) const { return sector_pos_[i]; }

  std::size_t index(const std::vector<int>& sorted_modes) const {
    auto it = index_.find(key(sorted_modes));
    if (it == index_.end()) throw std::out_of_range("FockSpace::index: occupation not in truncated basis");
    return it->second;
  }
  bool contains(const std::vector<int>& sorted_modes) const {
    return static_cast<int>(sorted_modes.size()) <= n_max_ && index_.count(key(sorted_modes)) > 0;
  }
  std::size_t index_from_occupation(const std::vector<int>& occ) const {
    std::vector<int> s;
    for (std::size_t m = 0; m < occ.size(); ++m)
      for (int c = 0; c < occ[m]; ++c) s.push_back(static_cast<int>(m));
    return index(s);
  }
  Vec vacuum() const {
    Vec v = Vec::Zero(static_cast<Eigen::Index>(dim()));
    v(0) = 1.0;
    return v;
  }

 private:
  static std::uint64_t key(const std::vector<int>& s) {
    std::uint64_t k = 0;
    for (int m : s) k = (k << 12) | static_cast<std::uint64_t>(m + 1);
    return k;
  }
  void enumerate(int mode, int budget, std::vector<int>& occ) {
    if (mode == modes_) {
      std::vector<int> s;
      for (int m = 0; m < modes_; ++m)
        for (int c = 0; c < occ[static_cast<std::size_t>(m)]; ++c) s.push_back(m);
      states_.push_back(std::move(s));
      return;
    }
    for (int c = 0; c <= budget; ++c) {
      occ[static_cast<std::size_t>(mode)] = c;
      enumerate(mode + 1, budget - c, occ);
    }
    occ[static_cast<std::size_t>(mode)] = 0;
  }

  int modes_;
  int n_max_;
  std::vector<std::vector<int>> states_;
  std::vector<std::vector<std::size_t>> sector_;
  std::vector<std::size_t> sector_pos_;
  std::vector<double> multiplicity_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

inline std::size_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// Number of multisets of at most n_max elements drawn from M modes.
inline std::size_t basis_size(int modes, int n_max) {
  return binomial(static_cast<std::size_t>(modes + n_max), static_cast<std::size_t>(n_max));
}

// a*(f) = sum_i f_i a*_i.  States in the top sector are mapped to zero.
inline SparseOperator create(const FockSpace& fs, const Vec& f) {
  if (f.size() != fs.modes()) throw std::invalid_argument("create: mode-vector length mismatch");
  std::vector<Triplet> t;
  for (std::size_t s = 0; s < fs.dim(); ++s) {
    if (fs.number(s) >= fs.n_max()) continue;
    const auto occ = fs.occupation(s);
    for (int i = 0; i < fs.modes(); ++i) {
      if (f(i) == cplx(0.0, 0.0)) continue;
      std::vector<int> target = fs.modes_of(s);
      target.insert(std::upper_bound(target.begin(), target.end(), i), i);
      t.emplace_back(static_cast<Eigen::Index>(fs.index(target)), static_cast<Eigen::Index>(s),
                     f(i) * std::sqrt(double(occ[static_cast<std::size_t>(i)] + 1)));
    }
  }
  return SparseOperator::from_triplets(fs.dim(), t, false);
}

// a(f) = sum_i conj(f_i) a_i, defined as the exact adjoint of create(f).
inline SparseOperator annihilate(const FockSpace& fs, const Vec& f) { return create(fs, f).adjoint(); }

inline SparseOperator number_operator(const FockSpace& fs) {
  Eigen::VectorXd d(static_cast<Eigen::Index>(fs.dim()));
  for (std::size_t s = 0; s < fs.dim(); ++s) d(static_cast<Eigen::Index>(s)) = fs.number(s);
  return SparseOperator::diagonal(d);
}

inline double hermiticity_defect(const Mat& m) { return (m - m.adjoint()).cwiseAbs().maxCoeff(); }

// dGamma(w) = sum_ij w_ij a*_i a_j.
inline SparseOperator dGamma(const FockSpace& fs, const Mat& w) {
  if (w.rows() != fs.modes() || w.cols() != fs.modes()) throw std::invalid_argument("dGamma: one-particle operator size mismatch");
  if (w.size() > 0 && hermiticity_defect(w) > 1e-12 * std::max(1.0, w.cwiseAbs().maxCoeff()))
    throw std::invalid_argument("dGamma: one-particle operator is not hermitian");
  std::vector<Triplet> t;
  for (std::size_t s = 0; s < fs.dim(); ++s) {
    const auto& modes = fs.modes_of(s);
    const auto occ = fs.occupation(s);
    for (int j = 0; j < fs.modes(); ++j) {
      const int nj = occ[static_cast<std::size_t>(j)];
      if (nj == 0) continue;
      std::vector<int> removed = modes;
      removed.erase(std::find(removed.begin(), removed.end(), j));
      for (int i = 0; i < fs.modes(); ++i) {
        const cplx wij = w(i, j);
        if (wij == cplx(0.0, 0.0)) continue;
        const int ni_after = occ[static_cast<std::size_t>(i)] - (i == j ? 1 : 0);
        std::vector<int> target = removed;
        target.insert(std::upper_bound(target.begin(), target.end(), i), i);
        t.emplace_back(static_cast<Eigen::Index>(fs.index(target)), static_cast<Eigen::Index>(s),
                       wij * std::sqrt(double(nj)) * std::sqrt(double(ni_after + 1)));
      }
    }
  }
  return SparseOperator::from_triplets(fs.dim(), t, true);
}

// ---- sector tensors --------------------------------------------------------------------------
// The n-particle sector is the symmetric subspace of (C^M)^{(x)n}.  A basis state with orderings
// count c = n!/prod n_i! has tensor entries 1/sqrt(c) on each of its orderings.

namespace detail {

inline std::size_t ipow(std::size_t b, int e) {
  std::size_t r = 1;
  for (int i = 0; i < e; ++i) r *= b;
  return r;
}

inline std::size_t flat_index(const std::vector<int>& legs, std::size_t dim) {
  std::size_t idx = 0;
  for (int l : legs) idx = idx * dim + static_cast<std::size_t>(l);
  return idx;
}

inline Vec sector_to_tensor(const FockSpace& fs, const Vec& v, int n) {
  const std::size_t m = static_cast<std::size_t>(fs.modes());
  Vec t = Vec::Zero(static_cast<Eigen::Index>(ipow(m, n)));
  for (std::size_t s : fs.sector(n)) {
    const cplx c = v(static_cast<Eigen::Index>(s));
    if (c == cplx(0.0, 0.0)) continue;
    const cplx val = c / std::sqrt(fs.multiplicity(s));
    std::vector<int> legs = fs.modes_of(s);
    do {
      t(static_cast<Eigen::Index>(flat_index(legs, m))) = val;
    } while (std::next_permutation(legs.begin(), legs.end()));
  }
  return t;
}

// Projects a (symmetric) tensor back onto the occupation basis of sector n.
inline void tensor_to_sector(const FockSpace& fs, const Vec& t, int n, Vec& out) {
  const std::size_t m = static_cast<std::size_t>(fs.modes());
  for (std::size_t s : fs.sector(n)) {
    const auto& legs = fs.modes_of(s);
    out(static_cast<Eigen::Index>(s)) += t(static_cast<Eigen::Index>(flat_index(legs, m))) * std::sqrt(fs.multiplicity(s));
  }
}

// Applies a (rows x cols) matrix to leg `leg` of a tensor with the given leg dimensions.
inline Vec apply_leg(const Vec& t, std::vector<std::size_t>& dims, int leg, const Mat& a) {
  const std::size_t cols = dims[static_cast<std::size_t>(leg)];
  if (static_cast<std::size_t>(a.cols()) != cols) throw std::invalid_argument("apply_leg: leg dimension mismatch");
  std::size_t pre = 1, post = 1;
  for (int i = 0; i < leg; ++i) pre *= dims[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(leg) + 1; i < dims.size(); ++i) post *= dims[i];
  const std::size_t rows = static_cast<std::size_t>(a.rows());
  Vec out(static_cast<Eigen::Index>(pre * rows * post));
  using RowMat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (std::size_t p = 0; p < pre; ++p) {
    Eigen::Map<const RowMat> in(t.data() + p * cols * post, static_cast<Eigen::Index>(cols), static_cast<Eigen::Index>(post));
    Eigen::Map<RowMat> o(out.data() + p * rows * post, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(post));
    o.noalias() = a * in;
  }
  dims[static_cast<std::size_t>(leg)] = rows;
  return out;
}

}  // namespace detail

// Gamma(j) between Fock spaces over possibly different mode sets: j^{(x)n} on each sector.
inline Vec apply_gamma(const Mat& j, const FockSpace& in, const FockSpace& out, const Vec& v) {
  if (j.cols() != in.modes() || j.rows() != out.modes()) throw std::invalid_argument("apply_gamma: map shape mismatch");
  if (static_cast<std::size_t>(v.size()) != in.dim()) throw std::invalid_argument("apply_gamma: vector length mismatch");
  Vec res = Vec::Zero(static_cast<Eigen::Index>(out.dim()));
  res(0) = v(0);
  const int top = std::min(in.n_max(), out.n_max());
  for (int n = 1; n <= in.n_max(); ++n) {
    bool any = false;
    for (std::size_t s : in.sector(n))
      if (v(static_cast<Eigen::Index>(s)) != cplx(0.0, 0.0)) { any = true; break; }
    if (!any) continue;
    if (n > top) throw std::invalid_argument("apply_gamma: input occupies a sector above the output cutoff");
    Vec t = detail::sector_to_tensor(in, v, n);
    std::vector<std::size_t> dims(static_cast<std::size_t>(n), static_cast<std::size_t>(in.modes()));
    for (int l = 0; l < n; ++l) t = detail::apply_leg(t, dims, l, j);
    detail::tensor_to_sector(out, t, n, res);
  }
  return res;
}

inline Vec apply_gamma(const Mat& j, const FockSpace& fs, const Vec& v) { return apply_gamma(j, fs, fs, v); }

// dGamma(a, b) = sum_l a (x) ... (x) b (l-th) (x) ... (x) a on each sector; zero on the vacuum.
inline Vec apply_dgamma_two(const Mat& a, const Mat& b, const FockSpace& in, const FockSpace& out, const Vec& v) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("dGamma_two: a and b must have equal shapes");
  if (a.cols() != in.modes() || a.rows() != out.modes()) throw std::invalid_argument("dGamma_two: map shape mismatch");
  if (static_cast<std::size_t>(v.size()) != in.dim()) throw std::invalid_argument("dGamma_two: vector length mismatch");
  Vec res = Vec::Zero(static_cast<Eigen::Index>(out.dim()));
  for (int n = 1; n <= in.n_max(); ++n) {
    bool any = false;
    for (std::size_t s : in.sector(n))
      if (v(static_cast<Eigen::Index>(s)) != cplx(0.0, 0.0)) { any = true; break; }
    if (!any) continue;
    if (n > out.n_max()) throw std::invalid_argument("dGamma_two: input occupies a sector above the output cutoff");
    const Vec t = detail::sector_to_tensor(in, v, n);
    Vec acc;
    for (int pos = 0; pos < n; ++pos) {
      Vec w = t;
      std::vector<std::size_t> dims(static_cast<std::size_t>(n), static_cast<std::size_t>(in.modes()));
      for (int l = 0; l < n; ++l) w = detail::apply_leg(w, dims, l, l == pos ? b : a);
      if (pos == 0) acc = std::move(w); else acc += w;
    }
    detail::tensor_to_sector(out, acc, n, res);
  }
  return res;
}

// Builds the matrix of a linear map column by column (small spaces only).
template <class F>
Mat matrix_of(F&& apply, std::size_t in_dim, std::size_t out_dim) {
  Mat m(static_cast<Eigen::Index>(out_dim), static_cast<Eigen::Index>(in_dim));
  for (std::size_t c = 0; c < in_dim; ++c) {
    Vec e = Vec::Zero(static_cast<Eigen::Index>(in_dim));
    e(static_cast<Eigen::Index>(c)) = 1.0;
    m.col(static_cast<Eigen::Index>(c)) = apply(e);
  }
  return m;
}

inline SparseOperator Gamma(const FockSpace& fs, const OneParticleMap& j, double drop = 1e-15) {
  if (j.rows() != fs.modes() || j.cols() != fs.modes()) throw std::invalid_argument("Gamma: one-particle map size mismatch");
  if (!j.contraction) throw std::invalid_argument("Gamma: one-particle map is not a contraction");
  const Mat m = matrix_of([&](const Vec& e) { return apply_gamma(j.matrix, fs, e); }, fs.dim(), fs.dim());
  return SparseOperator::from_dense(m, hermiticity_defect(m) <= 1e-13, drop);
}

inline SparseOperator dGamma_two(const FockSpace& fs, const OneParticleMap& a, const OneParticleMap& b, double drop = 1e-15) {
  if (a.rows() != fs.modes() || a.cols() != fs.modes() || b.rows() != fs.modes() || b.cols() != fs.modes())
    throw std::invalid_argument("dGamma_two: dimension mismatch");
  const Mat m = matrix_of([&](const Vec& e) { return apply_dgamma_two(a.matrix, b.matrix, fs, fs, e); }, fs.dim(), fs.dim());
  return SparseOperator::from_dense(m, false, drop);
}

// ---- identification and factorization ----------------------------------------------------------

inline double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

// I(Phi_0 (x) Phi_inf): merges two Fock vectors over the same mode set into one.
inline Vec identification(const FockSpace& fs, const Vec& near, const Vec& far, double zero_tol = 0.0) {
  if (static_cast<std::size_t>(near.size()) != fs.dim() || static_cast<std::size_t>(far.size()) != fs.dim())
    throw std::invalid_argument("identification: vector length mismatch");
  Vec out = Vec::Zero(static_cast<Eigen::Index>(fs.dim()));
  std::vector<std::size_t> nz_far;
  for (std::size_t b = 0; b < fs.dim(); ++b)
    if (std::abs(far(static_cast<Eigen::Index>(b))) > zero_tol) nz_far.push_back(b);
  std::vector<int> occ_a(static_cast<std::size_t>(fs.modes())), occ_b(static_cast<std::size_t>(fs.modes()));
  for (std::size_t a = 0; a < fs.dim(); ++a) {
    const cplx ca = near(static_cast<Eigen::Index>(a));
    if (std::abs(ca) <= zero_tol) continue;
    for (std::size_t b : nz_far) {
      const cplx cb = far(static_cast<Eigen::Index>(b));
      if (fs.number(a) + fs.number(b) > fs.n_max())
        throw std::invalid_argument("identification: cutoff overflow (combined photon number exceeds n_max)");
      std::vector<int> merged;
      std::merge(fs.modes_of(a).begin(), fs.modes_of(a).end(), fs.modes_of(b).begin(), fs.modes_of(b).end(),
                 std::back_inserter(merged));
      std::fill(occ_a.begin(), occ_a.end(), 0);
      std::fill(occ_b.begin(), occ_b.end(), 0);
      for (int m : fs.modes_of(a)) ++occ_a[static_cast<std::size_t>(m)];
      for (int m : fs.modes_of(b)) ++occ_b[static_cast<std::size_t>(m)];
      double coef = 1.0;
      for (std::size_t m = 0; m < occ_a.size(); ++m)
        if (occ_a[m] && occ_b[m])
          coef *= std::sqrt(factorial(occ_a[m] + occ_b[m]) / (factorial(occ_a[m]) * factorial(occ_b[m])));
      out(static_cast<Eigen::Index>(fs.index(merged))) += coef * ca * cb;
    }
  }
  return out;
}

// Fock space over the doubled mode set h (+) h: modes [0, M) form the first copy, [M, 2M) the second.
inline FockSpace doubled(const FockSpace& fs) { return FockSpace(2 * fs.modes(), fs.n_max()); }

// U : F(h (+) h) -> F(h) (x) F(h) on the shared-cutoff subspace.  Column s of the returned map
// holds a single 1 at row index(first copy) * dim + index(second copy).
inline Eigen::SparseMatrix<cplx> factorization_U(const FockSpace& fs, const FockSpace& dbl) {
  if (dbl.modes() != 2 * fs.modes() || dbl.n_max() != fs.n_max())
    throw std::invalid_argument("factorization_U: doubled space does not match");
  const std::size_t d = fs.dim();
  std::vector<Eigen::Triplet<cplx>> t;
  t.reserve(dbl.dim());
  for (std::size_t s = 0; s < dbl.dim(); ++s) {
    std::vector<int> first, second;
    for (int m : dbl.modes_of(s)) (m < fs.modes() ? first : second).push_back(m < fs.modes() ? m : m - fs.modes());
    t.emplace_back(static_cast<Eigen::Index>(fs.index(first) * d + fs.index(second)), static_cast<Eigen::Index>(s), 1.0);
  }
  Eigen::SparseMatrix<cplx> u(static_cast<Eigen::Index>(d * d), static_cast<Eigen::Index>(dbl.dim()));
  u.setFromTriplets(t.begin(), t.end());
  return u;
}

// ---- partition of unity in photon position ------------------------------------------------------

// Quintic smoothstep 10u^3 - 15u^4 + 6u^5: C^2 at both ends of [0, 1].
inline double smoothstep5(double u) {
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 1.0;
  return u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
}

// Profiles in s = |y|/d: near = cos(pi/2 S(s-1)), far = sin(pi/2 S(s-1)); squares sum to one.
inline double near_profile(double s) { return std::cos(0.5 * M_PI * smoothstep5(s - 1.0)); }
inline double far_profile(double s) { return std::sin(0.5 * M_PI * smoothstep5(s - 1.0)); }

struct PartitionPair {
  OneParticleMap near;  // j_0(|y|/d)
  OneParticleMap far;   // j_inf(|y|/d)
  Eigen::VectorXd near_values, far_values;  // pointwise on the position grid
  double radius = 0.0;
};

inline void check_radius(const ModeSet& ms, double d, double reach, const char* who) {
  if (!(d > 0.0)) throw std::invalid_argument(std::string(who) + ": radius must be positive");
  if (d < 2.0 * ms.position_spacing() * (1.0 - 1e-12))
    throw std::invalid_argument(std::string(who) + ": radius below grid resolution (need d >= 2 dy)");
  if (reach * d > 0.5 * ms.position_extent())
    throw std::invalid_argument(std::string(who) + ": radius exceeds the position grid extent");
}

inline PartitionPair partition_pair(const ModeSet& ms, double d) {
  check_radius(ms, d, 2.0, "partition_pair");
  PartitionPair p;
  p.radius = d;
  const int m = ms.size();
  p.near_values.resize(m);
  p.far_values.resize(m);
  for (int i = 0; i < m; ++i) {
    const double s = std::abs(ms.positions[static_cast<std::size_t>(i)]) / d;
    p.near_values(i) = near_profile(s);
    p.far_values(i) = far_profile(s);
  }
  auto lift = [&](const Eigen::VectorXd& vals) {
    return Mat(ms.to_position.adjoint() * vals.cast<cplx>().asDiagonal() * ms.to_position);
  };
  p.near = OneParticleMap(lift(p.near_values));
  p.far = OneParticleMap(lift(p.far_values));
  return p;
}

// j : h -> h (+) h, u -> (j_0 u, j_inf u).
inline Mat stacked_partition(const PartitionPair& p) {
  const auto m = p.near.matrix.rows();
  Mat j(2 * m, m);
  j.topRows(m) = p.near.matrix;
  j.bottomRows(m) = p.far.matrix;
  return j;
}

// Gamma-check(j) = U Gamma(j) and its adjoint; vectors on F(h) (x) F(h) are indexed a*dim + b.
struct PartitionIsometry {
  const FockSpace* space = nullptr;
  FockSpace dbl;
  Mat j;  // 2M x M
  Eigen::SparseMatrix<cplx> u;

  PartitionIsometry(const FockSpace& fs, const PartitionPair& p)
      : space(&fs), dbl(doubled(fs)), j(stacked_partition(p)), u(factorization_U(fs, dbl)) {}

  Vec apply(const Vec& v) const { return u * apply_gamma(j, *space, dbl, v); }
  Vec apply_doubled(const Vec& v) const { return apply_gamma(j, *space, dbl, v); }
  // Gamma-check(j)^* = Gamma(j^*) U^*.
  Vec adjoint(const Vec& w) const {
    const Vec back = u.adjoint() * w;
    return apply_gamma(j.adjoint(), dbl, *space, back);
  }
  Vec adjoint_doubled(const Vec& w) const { return apply_gamma(j.adjoint(), dbl, *space, w); }
};

// I o (Gamma(j_0) (x) Gamma(j_inf)) acting on a product-basis vector of F(h) (x) F(h).
inline Vec identification_after_partition(const FockSpace& fs, const PartitionPair& p, const Vec& w) {
  const std::size_t d = fs.dim();
  if (static_cast<std::size_t>(w.size()) != d * d) throw std::invalid_argument("identification_after_partition: size mismatch");
  Vec out = Vec::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t a = 0; a < d; ++a) {
    Vec row = w.segment(static_cast<Eigen::Index>(a * d), static_cast<Eigen::Index>(d));
    if (row.cwiseAbs().maxCoeff() == 0.0) continue;
    Vec ea = Vec::Zero(static_cast<Eigen::Index>(d));
    ea(static_cast<Eigen::Index>(a)) = 1.0;
    const Vec near = apply_gamma(p.near.matrix, fs, ea);
    const Vec far = apply_gamma(p.far.matrix, fs, row);
    out += identification(fs, near, far);
  }
  return out;
}

inline PartitionIsometry gamma_check(const FockSpace& fs, const PartitionPair& p) { return PartitionIsometry(fs, p); }

// Smooth cutoff supported in |y| <= d: cos(pi/2 S(|y|/d)), equal to one only at y = 0.
inline double inner_profile(double y, double d) { return near_profile(1.0 + std::abs(y) / d); }

inline OneParticleMap inner_cutoff(const ModeSet& ms, double d) {
  check_radius(ms, d, 1.0, "inner_cutoff");
  return OneParticleMap(ms.position_multiplier([d](double y) { return cplx(inner_profile(y, d)); }));
}

// ||[dGamma(|k|), Gamma(c)] (N+1)^{-1}|| for a real position multiplier c.  Both operators conserve N,
// so this is the largest photon-number sector norm; each sector is handled on symmetric tensors,
// where Gamma(c) is diagonal after an n-dimensional DFT.
inline double free_field_cutoff_commutator(const ModeSet& ms, int n_max, const Eigen::VectorXd& cutoff_y,
                                           SpectralNormOptions opt = {.rel_tol = 1e-5, .krylov = 20}) {
  const int m = ms.size();
  if (cutoff_y.size() != m) throw std::invalid_argument("free_field_cutoff_commutator: cutoff length mismatch");
  double best = 0.0;
  for (int n = 1; n <= n_max; ++n) {
    const FockSpace sector_space(m, n);
    const std::size_t len = detail::ipow(static_cast<std::size_t>(m), n);
    if (len > 8 * max_state_dim()) throw std::length_error("free_field_cutoff_commutator: sector tensor exceeds the state cap");
    Eigen::VectorXd energy = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(len));
    Eigen::VectorXd weight = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(len));
    for (std::size_t flat = 0; flat < len; ++flat) {
      std::size_t r = flat;
      for (int l = 0; l < n; ++l) {
        const std::size_t j = r % static_cast<std::size_t>(m);
        r /= static_cast<std::size_t>(m);
        energy(static_cast<Eigen::Index>(flat)) += std::abs(ms.momenta[j]);
        weight(static_cast<Eigen::Index>(flat)) *= cutoff_y(static_cast<Eigen::Index>(j));
      }
    }
    // With half-integer momenta the mode -> position map is D1 * DFT * D2 with diagonal phases; D2
    // commutes with everything here and D1 with the cutoff, so the plain DFT conjugation suffices.
    const UnitaryFft fft(std::vector<int>(static_cast<std::size_t>(n), m));
    auto gamma = [&](Vec& t) {
      fft.backward(t);
      t.array() *= weight.cast<cplx>().array();
      fft.forward(t);
    };
    auto comm = [&](const Vec& x, Vec& y, double sign) {
      Vec t = detail::sector_to_tensor(sector_space, x, n);
      Vec et = (t.array() * energy.cast<cplx>().array()).matrix();
      gamma(t);
      gamma(et);
      Vec c = (t.array() * energy.cast<cplx>().array()).matrix() - et;
      y = Vec::Zero(x.size());
      detail::tensor_to_sector(sector_space, c, n, y);
      y *= sign / (n + 1.0);
    };
    // Work inside the n-photon sector of sector_space; other entries stay zero.
    const auto& idx = sector_space.sector(n);
    auto restrict_op = [&](double sign) {
      return [&, sign](const Vec& x, Vec& y) {
        Vec full = Vec::Zero(static_cast<Eigen::Index>(sector_space.dim()));
        for (std::size_t i = 0; i < idx.size(); ++i) full(static_cast<Eigen::Index>(idx[i])) = x(static_cast<Eigen::Index>(i));
        Vec out;
        comm(full, out, sign);
        y.resize(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) y(static_cast<Eigen::Index>(i)) = out(static_cast<Eigen::Index>(idx[i]));
      };
    };
    best = std::max(best, spectral_norm(restrict_op(1.0), restrict_op(-1.0), idx.size(), opt));
  }
  return best;
}

// Sharp indicator of a position region.
template <class Pred>
OneParticleMap position_indicator(const ModeSet& ms, Pred&& inside) {
  return OneParticleMap(ms.position_multiplier([&](double y) { return cplx(inside(y) ? 1.0 : 0.0); }));
}

// j* and ad(|k|, j*) as maps h (+) h -> h, used in the commutator of the free field with Gamma-check(j)*.
inline std::pair<Mat, Mat> partition_commutator_maps(const ModeSet& ms, const PartitionPair& p) {
  const Mat w = ms.momentum_multiplier([](double k) { return cplx(std::abs(k)); });
  const auto m = p.near.matrix.rows();
  Mat js(m, 2 * m), ad(m, 2 * m);
  js.leftCols(m) = p.near.matrix;
  js.rightCols(m) = p.far.matrix;
  ad.leftCols(m) = w * p.near.matrix - p.near.matrix * w;
  ad.rightCols(m) = w * p.far.matrix - p.far.matrix * w;
  return {js, ad};
}

}  // namespace closedsys::fock
