// model2.hpp — two-level atom dressed by a scalar photon field: fibers, ground-state table, dressed states
//
// Atom level 0 is excited (energy omega0), level 1 is the ground level.  A fiber vector on C^2 (x) F is
// level-major: index level * dim(F) + fock_index.  Grid states put the atom position outermost:
// index (x * spectators + q) * D + a with D = 2 dim(F) and q an optional spectator (system Q) index.
#pragma once

#include "closedsys/fft.hpp"
#include "closedsys/fock.hpp"
#include "closedsys/hash.hpp"
#include "closedsys/krylov.hpp"

#include <Eigen/SparseLU>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace closedsys::model2 {

using fock::FockSpace;
using fock::ModeSet;

// 1 for |k| <= 1/2, 0 for |k| >= 1.
inline double uv_cutoff(double k) { return 1.0 - fock::smoothstep5(2.0 * std::abs(k) - 1.0); }

// Momentum window: 1 for |p| <= nu/4, 0 for |p| >= nu/2.
inline double momentum_window(double p, double nu) { return 1.0 - fock::smoothstep5(4.0 * std::abs(p) / nu - 1.0); }

// Compactly supported C-infinity bump on (-1, 1), equal to 1 at 0.
inline double bump(double s) { return std::abs(s) < 1.0 ? std::exp(1.0 - 1.0 / (1.0 - s * s)) : 0.0; }

struct FiberParams {
  double omega0 = 1.0;
  double lambda0 = 0.1;
  double nu = 0.5;
  int modes = 16;
  int n_max = 3;
  double k_max = 1.0;
  double coupling_ceiling = 0.3;

  void validate() const {
    if (!(omega0 > 0.0)) throw std::invalid_argument("FiberParams: omega0 must be positive");
    if (!(nu > 0.0 && nu < 1.0)) throw std::invalid_argument("FiberParams: nu must lie in (0, 1)");
    if (!(std::abs(lambda0) <= coupling_ceiling))
      throw std::invalid_argument("FiberParams: |lambda0| exceeds the coupling ceiling " + std::to_string(coupling_ceiling));
    if (modes < 2 || n_max < 1) throw std::invalid_argument("FiberParams: need modes >= 2 and n_max >= 1");
    if (!(k_max > 0.0)) throw std::invalid_argument("FiberParams: k_max must be positive");
  }
  std::string canonical() const {
    std::ostringstream s;
    s.precision(17);
    s << "omega0=" << omega0 << ";lambda0=" << lambda0 << ";nu=" << nu << ";modes=" << modes << ";n_max=" << n_max
      << ";k_max=" << k_max << ";ceiling=" << coupling_ceiling;
    return s.str();
  }
};

class Fiber {
 public:
  explicit Fiber(const FiberParams& prm)
      : prm_((prm.validate(), prm)), modes_(ModeSet::uniform(prm.modes, prm.k_max)), fs_(prm.modes, prm.n_max) {
    const std::size_t nf = fs_.dim();
    momentum_.resize(static_cast<Eigen::Index>(2 * nf));
    Eigen::VectorXd energy(static_cast<Eigen::Index>(nf));
    for (std::size_t s = 0; s < nf; ++s) {
      double k = 0.0, e = 0.0;
      for (int m : fs_.modes_of(s)) {
        k += modes_.momenta[static_cast<std::size_t>(m)];
        e += std::abs(modes_.momenta[static_cast<std::size_t>(m)]);
      }
      momentum_(static_cast<Eigen::Index>(s)) = momentum_(static_cast<Eigen::Index>(nf + s)) = k;
      energy(static_cast<Eigen::Index>(s)) = e;
    }
    coupling_ = modes_.discretize([](double k) { return uv_cutoff(k) * std::sqrt(std::abs(k)); });
    // C = i lambda0 (B - B^dag), B = sum_j c_j b_j
    const SpMat b = fock::annihilate(fs_, coupling_.conjugate()).matrix;
    const SpMat c = SpMat((b - SpMat(b.adjoint())) * cplx(0.0, prm_.lambda0));
    std::vector<Triplet> t;
    for (std::size_t s = 0; s < nf; ++s) {
      const auto i = static_cast<Eigen::Index>(s);
      const double kin = 0.5 * momentum_(i) * momentum_(i) + energy(i);
      t.emplace_back(i, i, kin + prm_.omega0);
      t.emplace_back(i + static_cast<Eigen::Index>(nf), i + static_cast<Eigen::Index>(nf), kin);
    }
    for (Eigen::Index k = 0; k < c.outerSize(); ++k)
      for (SpMat::InnerIterator it(c, k); it; ++it) {
        t.emplace_back(it.row(), it.col() + static_cast<Eigen::Index>(nf), it.value());
        t.emplace_back(it.row() + static_cast<Eigen::Index>(nf), it.col(), it.value());
      }
    base_ = SparseOperator::from_triplets(2 * nf, t, true).matrix;
  }

  const FiberParams& params() const { return prm_; }
  const ModeSet& modes() const { return modes_; }
  const FockSpace& space() const { return fs_; }
  std::size_t fock_dim() const { return fs_.dim(); }
  std::size_t dim() const { return 2 * fs_.dim(); }
  const Eigen::VectorXd& photon_momentum() const { return momentum_; }  // per fiber index
  const Vec& coupling() const { return coupling_; }
  const SpMat& base() const { return base_; }

  // H(p) = base + p^2/2 - p P_E, without the |p| < 1 guard.
  void apply(double p, const Vec& in, Vec& out) const {
    out.noalias() = base_ * in;
    out.array() += (0.5 * p * p - p * momentum_.array()).cast<cplx>() * in.array();
  }
  SparseOperator hamiltonian(double p) const {
    if (!(std::abs(p) < 1.0)) throw std::invalid_argument("fiber_hamiltonian: |p| must be < 1");
    return unchecked_hamiltonian(p);
  }
  SparseOperator unchecked_hamiltonian(double p) const {
    const Eigen::VectorXd d = (0.5 * p * p - p * momentum_.array()).matrix();
    SpMat diag(base_.rows(), base_.cols());
    std::vector<Triplet> t;
    for (Eigen::Index i = 0; i < d.size(); ++i) t.emplace_back(i, i, d(i));
    diag.setFromTriplets(t.begin(), t.end());
    SpMat h = base_ + diag;
    h.prune(cplx(0.0, 0.0));
    return SparseOperator(std::move(h), true);
  }
  // |ground level> (x) vacuum
  Vec bare_ground() const {
    Vec v = Vec::Zero(static_cast<Eigen::Index>(dim()));
    v(static_cast<Eigen::Index>(fs_.dim())) = 1.0;
    return v;
  }
  // b_j acting on the Fock factor.
  SparseOperator lowering(int j) const {
    Vec e = Vec::Zero(modes_.size());
    e(j) = 1.0;
    return kron(SparseOperator::identity(2), fock::annihilate(fs_, e));
  }
  // Source term of the pull-through identity for mode j: -i lambda0 c_j sigma_x (x) 1.
  SparseOperator source(int j) const {
    return kron(SparseOperator::from_dense(pauli::x(), true), SparseOperator::identity(fs_.dim()))
        .scaled(cplx(0.0, -prm_.lambda0) * coupling_(j));
  }

 private:
  FiberParams prm_;
  ModeSet modes_;
  FockSpace fs_;
  Eigen::VectorXd momentum_;
  Vec coupling_;
  SpMat base_;
};

inline SparseOperator fiber_hamiltonian(const FiberParams& prm, double p) { return Fiber(prm).hamiltonian(p); }

struct FiberOperator {
  const Fiber* fiber;
  double p;
  std::size_t dim() const { return fiber->dim(); }
  void apply(const Vec& in, Vec& out) const { fiber->apply(p, in, out); }
};

// Fock-space index map from a lower cutoff into a higher one over the same modes.
inline std::vector<std::size_t> embedding(const FockSpace& small, const FockSpace& big) {
  if (small.modes() != big.modes() || small.n_max() > big.n_max()) throw std::invalid_argument("embedding: spaces do not nest");
  std::vector<std::size_t> idx(small.dim());
  for (std::size_t s = 0; s < small.dim(); ++s) idx[s] = big.index(small.modes_of(s));
  return idx;
}

// Embeds every dim(small)-block of v into dim(big)-blocks.
inline Vec embed_blocks(const FockSpace& small, const FockSpace& big, const Vec& v) {
  const auto idx = embedding(small, big);
  const auto ns = static_cast<Eigen::Index>(small.dim()), nb = static_cast<Eigen::Index>(big.dim());
  if (v.size() % ns != 0) throw std::invalid_argument("embed_blocks: length is not a multiple of the Fock dimension");
  const Eigen::Index blocks = v.size() / ns;
  Vec out = Vec::Zero(blocks * nb);
  for (Eigen::Index b = 0; b < blocks; ++b)
    for (Eigen::Index s = 0; s < ns; ++s) out(b * nb + static_cast<Eigen::Index>(idx[static_cast<std::size_t>(s)])) = v(b * ns + s);
  return out;
}

// ---- fiber ground states -------------------------------------------------------------------------

struct FiberGround {
  double p = 0.0;
  double energy = 0.0;
  double residual = 0.0;
  double overlap = 0.0;  // |<g, psi0>|
  double gap = 0.0;      // Ritz estimate
  bool degenerate = false;
  Vec vector;            // pi(p) psi0 = g <g, psi0>
};

inline FiberGround fiber_ground_state(const Fiber& f, double p, double tol = 1e-10, const Vec* guess = nullptr) {
  if (!(std::abs(p) < 1.0)) throw std::invalid_argument("fiber_hamiltonian: |p| must be < 1");
  const FiberOperator op{&f, p};
  Vec start;
  if (guess) start = guess->normalized();
  const GroundState gs = ground_state_vec(op, tol, LanczosOptions{}, guess ? &start : nullptr);
  FiberGround out;
  out.p = p;
  out.energy = gs.energy;
  out.residual = gs.residual;
  out.gap = gs.gap;
  out.degenerate = gs.degenerate;
  const cplx ov = gs.vector(static_cast<Eigen::Index>(f.fock_dim()));  // <psi0, g>
  out.overlap = std::abs(ov);
  if (out.overlap < 1e-8) throw std::runtime_error("fiber_ground_state: ground state orthogonal to the bare ground state");
  out.vector = gs.vector * std::conj(ov);
  return out;
}

// E(p) and pi(p) psi0 on a sorted momentum list; E is cubic between nodes.
struct GroundTable {
  FiberParams params;
  double tol = 0.0;
  std::vector<FiberGround> rows;

  const FiberGround& at(double p) const {
    auto it = std::lower_bound(rows.begin(), rows.end(), p - 1e-12, [](const FiberGround& g, double v) { return g.p < v; });
    if (it == rows.end() || std::abs(it->p - p) > 1e-12) throw std::out_of_range("GroundTable: momentum not tabulated");
    return *it;
  }
  bool contains(double p) const {
    auto it = std::lower_bound(rows.begin(), rows.end(), p - 1e-12, [](const FiberGround& g, double v) { return g.p < v; });
    return it != rows.end() && std::abs(it->p - p) <= 1e-12;
  }
  // Cubic Hermite with centred-difference slopes; exact at nodes.
  double energy(double p) const {
    if (rows.empty()) throw std::logic_error("GroundTable: empty");
    if (p < rows.front().p - 1e-12 || p > rows.back().p + 1e-12) throw std::out_of_range("GroundTable: momentum outside the table");
    if (contains(p)) return at(p).energy;
    std::size_t i = 0;
    while (i + 2 < rows.size() && rows[i + 1].p < p) ++i;
    auto slope = [&](std::size_t k) {
      const std::size_t lo = k == 0 ? 0 : k - 1, hi = std::min(k + 1, rows.size() - 1);
      return (rows[hi].energy - rows[lo].energy) / (rows[hi].p - rows[lo].p);
    };
    const double h = rows[i + 1].p - rows[i].p, s = (p - rows[i].p) / h;
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s), h01 = s * s * (3 - 2 * s), h11 = s * s * (s - 1);
    return h00 * rows[i].energy + h10 * h * slope(i) + h01 * rows[i + 1].energy + h11 * h * slope(i + 1);
  }
  double max_residual() const {
    double r = 0.0;
    for (const auto& g : rows) r = std::max(r, g.residual);
    return r;
  }
};

inline GroundTable tabulate(const Fiber& f, std::vector<double> ps, double tol = 1e-10) {
  std::sort(ps.begin(), ps.end());
  ps.erase(std::unique(ps.begin(), ps.end(), [](double a, double b) { return std::abs(a - b) <= 1e-12; }), ps.end());
  GroundTable t;
  t.params = f.params();
  t.tol = tol;
  // Sweep outward from the momentum nearest zero so each solve starts from its neighbour.
  std::size_t c = 0;
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (std::abs(ps[i]) < std::abs(ps[c])) c = i;
  std::vector<FiberGround> rows(ps.size());
  if (!ps.empty()) {
    rows[c] = fiber_ground_state(f, ps[c], tol);
    for (std::size_t i = c + 1; i < ps.size(); ++i) rows[i] = fiber_ground_state(f, ps[i], tol, &rows[i - 1].vector);
    for (std::size_t i = c; i-- > 0;) rows[i] = fiber_ground_state(f, ps[i], tol, &rows[i + 1].vector);
  }
  t.rows = std::move(rows);
  return t;
}

// ---- table artifact --------------------------------------------------------------------------------
// Layout: "CSYSGRND" | u32 version | 32-byte SHA-256 of the payload | payload.  Little-endian doubles.

inline constexpr std::uint32_t kTableVersion = 1;

namespace detail {
template <class T>
void put(std::string& s, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  s.append(b, sizeof(T));
}
template <class T>
T take(const std::string& s, std::size_t& pos) {
  if (pos + sizeof(T) > s.size()) throw std::runtime_error("ground table artifact: truncated payload");
  T v;
  std::memcpy(&v, s.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace detail

inline std::string table_payload(const GroundTable& t) {
  std::string s;
  const auto& p = t.params;
  for (double v : {p.omega0, p.lambda0, p.nu, p.k_max, p.coupling_ceiling, t.tol}) detail::put(s, v);
  detail::put<std::int64_t>(s, p.modes);
  detail::put<std::int64_t>(s, p.n_max);
  detail::put<std::uint64_t>(s, t.rows.size());
  const std::uint64_t dim = t.rows.empty() ? 0 : static_cast<std::uint64_t>(t.rows.front().vector.size());
  detail::put<std::uint64_t>(s, dim);
  for (const auto& g : t.rows) {
    for (double v : {g.p, g.energy, g.residual, g.overlap, g.gap, g.degenerate ? 1.0 : 0.0}) detail::put(s, v);
    for (Eigen::Index i = 0; i < g.vector.size(); ++i) {
      detail::put(s, g.vector(i).real());
      detail::put(s, g.vector(i).imag());
    }
  }
  return s;
}

inline std::string table_hash(const GroundTable& t) { return sha256_hex(table_payload(t)); }

inline void save_table(const std::filesystem::path& path, const GroundTable& t) {
  const std::string payload = table_payload(t);
  const Digest d = sha256(payload);
  std::string head("CSYSGRND");
  detail::put(head, kTableVersion);
  head.append(reinterpret_cast<const char*>(d.data()), d.size());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_table: cannot open " + tmp);
    out << head << payload;
    if (!out) throw std::runtime_error("save_table: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline GroundTable load_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_table: cannot open " + path.string());
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (all.size() < 44 || all.compare(0, 8, "CSYSGRND") != 0) throw std::runtime_error("load_table: not a ground-table artifact");
  std::size_t pos = 8;
  const auto version = detail::take<std::uint32_t>(all, pos);
  if (version != kTableVersion) throw std::runtime_error("load_table: unsupported version " + std::to_string(version));
  Digest stored;
  std::memcpy(stored.data(), all.data() + pos, stored.size());
  pos += stored.size();
  const std::string payload = all.substr(pos);
  if (sha256(payload) != stored) throw std::runtime_error("load_table: content hash mismatch");
  GroundTable t;
  std::size_t q = 0;
  t.params.omega0 = detail::take<double>(payload, q);
  t.params.lambda0 = detail::take<double>(payload, q);
  t.params.nu = detail::take<double>(payload, q);
  t.params.k_max = detail::take<double>(payload, q);
  t.params.coupling_ceiling = detail::take<double>(payload, q);
  t.tol = detail::take<double>(payload, q);
  t.params.modes = static_cast<int>(detail::take<std::int64_t>(payload, q));
  t.params.n_max = static_cast<int>(detail::take<std::int64_t>(payload, q));
  const auto rows = detail::take<std::uint64_t>(payload, q);
  const auto dim = detail::take<std::uint64_t>(payload, q);
  for (std::uint64_t r = 0; r < rows; ++r) {
    FiberGround g;
    g.p = detail::take<double>(payload, q);
    g.energy = detail::take<double>(payload, q);
    g.residual = detail::take<double>(payload, q);
    g.overlap = detail::take<double>(payload, q);
    g.gap = detail::take<double>(payload, q);
    g.degenerate = detail::take<double>(payload, q) != 0.0;
    g.vector.resize(static_cast<Eigen::Index>(dim));
    for (std::uint64_t i = 0; i < dim; ++i) {
      const double re = detail::take<double>(payload, q);
      g.vector(static_cast<Eigen::Index>(i)) = cplx(re, detail::take<double>(payload, q));
    }
    t.rows.push_back(std::move(g));
  }
  if (q != payload.size()) throw std::runtime_error("load_table: trailing bytes");
  return t;
}

// Tabulates through an on-disk cache keyed by the parameters, momenta and tolerance.
inline GroundTable cached_table(const Fiber& f, const std::vector<double>& ps, double tol, const std::filesystem::path& cache_dir) {
  std::ostringstream key;
  key.precision(17);
  key << "v" << kTableVersion << ";" << f.params().canonical() << ";tol=" << tol << ";p=";
  std::vector<double> sorted = ps;
  std::sort(sorted.begin(), sorted.end());
  for (double p : sorted) key << p << ",";
  const auto path = cache_dir / (sha256_hex(key.str()) + ".bin");
  if (std::filesystem::exists(path)) {
    try {
      return load_table(path);
    } catch (const std::exception&) {
      // Corrupt or stale artifact: recompute and overwrite.
    }
  }
  GroundTable t = tabulate(f, ps, tol);
  save_table(path, t);
  return t;
}

// ---- checks on single fibers -----------------------------------------------------------------------

struct GapSample {
  double p = 0.0, k = 0.0, margin = 0.0;
};
struct GapReport {
  std::vector<GapSample> samples;
  double min_margin = 0.0;
  double max_residual = 0.0;
};

// E(p-k) - E(p) + |k| - (1-nu)/2 |k| on every (p, k) pair.
inline GapReport gap_check(const Fiber& f, const std::vector<double>& ps, const std::vector<double>& ks, double tol = 1e-10) {
  const double nu = f.params().nu;
  for (double p : ps)
    if (!(std::abs(p) < nu)) throw std::invalid_argument("gap_check: |p| must be < nu");
  for (double k : ks)
    if (!(std::abs(k) < (1.0 - nu) / 6.0)) throw std::invalid_argument("gap_check: |k| must be < (1 - nu)/6");
  std::map<double, FiberGround> cache;
  auto energy = [&](double p) {
    auto it = cache.find(p);
    if (it == cache.end()) it = cache.emplace(p, fiber_ground_state(f, p, tol)).first;
    return it->second.energy;
  };
  GapReport r;
  r.min_margin = std::numeric_limits<double>::infinity();
  for (double p : ps)
    for (double k : ks) {
      const double m = energy(p - k) - energy(p) + std::abs(k) - 0.5 * (1.0 - nu) * std::abs(k);
      r.samples.push_back({p, k, m});
      r.min_margin = std::min(r.min_margin, m);
    }
  for (const auto& [p, g] : cache) r.max_residual = std::max(r.max_residual, g.residual);
  return r;
}

// Frobenius norm (an upper bound on the spectral norm) of
//   b_j H(p) - (H(p - k_j) + |k_j|) b_j - f_j
// restricted to columns below the photon cutoff, where the identity is exact.
inline double pull_through_residual(const Fiber& f, double p, int j) {
  if (j < 0 || j >= f.modes().size()) throw std::invalid_argument("pull_through_residual: mode index out of range");
  const double k = f.modes().momenta[static_cast<std::size_t>(j)];
  const SpMat b = f.lowering(j).matrix;
  const SpMat lhs = b * f.unchecked_hamiltonian(p).matrix;
  const SpMat rhs = (f.unchecked_hamiltonian(p - k).matrix + SparseOperator::identity(f.dim()).matrix * std::abs(k)) * b;
  const SpMat d = lhs - rhs - f.source(j).matrix;
  const std::size_t nf = f.fock_dim();
  double s = 0.0;
  for (Eigen::Index r = 0; r < d.outerSize(); ++r)
    for (SpMat::InnerIterator it(d, r); it; ++it)
      if (f.space().number(static_cast<std::size_t>(it.col()) % nf) < f.params().n_max) s += std::norm(it.value());
  return std::sqrt(s);
}

// || b_j psi(p) + (H'(p - k_j) - E(p) + |k_j|)^{-1} f_j psi'(p) ||, where ' marks the space one photon below
// the cutoff; the relation is exact there.
inline double pull_through_ground_residual(const Fiber& f, const FiberGround& g, int j) {
  if (f.params().n_max < 2) throw std::invalid_argument("pull_through_ground_residual: needs n_max >= 2");
  FiberParams lower = f.params();
  lower.n_max -= 1;
  const Fiber fl(lower);
  const auto idx = embedding(fl.space(), f.space());
  const std::size_t nf = f.fock_dim(), nl = fl.fock_dim();
  auto restrict_vec = [&](const Vec& v) {
    Vec out(static_cast<Eigen::Index>(2 * nl));
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t s = 0; s < nl; ++s) out(static_cast<Eigen::Index>(l * nl + s)) = v(static_cast<Eigen::Index>(l * nf + idx[s]));
    return out;
  };
  const double k = f.modes().momenta[static_cast<std::size_t>(j)];
  const Vec bpsi = restrict_vec(Vec(f.lowering(j).matrix * g.vector));
  const Vec rhs = fl.source(j).matrix * restrict_vec(g.vector);
  Eigen::SparseMatrix<cplx> a = fl.unchecked_hamiltonian(g.p - k).matrix;
  for (Eigen::Index i = 0; i < a.rows(); ++i) a.coeffRef(i, i) += std::abs(k) - g.energy;
  a.makeCompressed();
  Eigen::SparseLU<Eigen::SparseMatrix<cplx>> lu(a);
  if (lu.info() != Eigen::Success) throw std::runtime_error("pull_through_ground_residual: factorization failed");
  const Vec x = lu.solve(rhs);
  return (bpsi + x).norm();
}

// ||e^{delta N} psi|| / ||psi|| for any vector made of dim(F)-blocks.
inline double photon_moment(const FockSpace& fs, const Vec& psi, double delta) {
  const auto nf = static_cast<Eigen::Index>(fs.dim());
  if (psi.size() == 0 || psi.size() % nf != 0) throw std::invalid_argument("photon_moment: length is not a multiple of dim(F)");
  const double n0 = psi.norm();
  if (n0 == 0.0) throw std::invalid_argument("photon_moment: zero vector");
  double s = 0.0;
  for (Eigen::Index i = 0; i < psi.size(); ++i) s += std::norm(psi(i)) * std::exp(2.0 * delta * fs.number(static_cast<std::size_t>(i % nf)));
  return std::sqrt(s) / n0;
}

// Largest coupling in `candidates` (ascending) whose ground-state Ritz gap stays above 10 tol at every p.
inline double coupling_ceiling(FiberParams prm, const std::vector<double>& ps, const std::vector<double>& candidates, double tol = 1e-10) {
  double best = 0.0;
  for (double lam : candidates) {
    prm.lambda0 = lam;
    prm.coupling_ceiling = std::max(prm.coupling_ceiling, std::abs(lam));
    const Fiber f(prm);
    bool ok = true;
    for (double p : ps) {
      const auto g = fiber_ground_state(f, p, tol);
      if (g.degenerate || g.gap <= 10.0 * tol) ok = false;
    }
    if (!ok) break;
    best = lam;
  }
  return best;
}

// ---- atom grid and the fiber transform -------------------------------------------------------------

struct AtomGrid {
  int points = 0;
  double spacing = 0.0;
  std::vector<double> x, p;

  static AtomGrid make(int n, double a) {
    if (n < 2 || !(a > 0.0)) throw std::invalid_argument("AtomGrid: need n >= 2 and a > 0");
    AtomGrid g;
    g.points = n;
    g.spacing = a;
    for (int i = 0; i < n; ++i) {
      g.x.push_back((i - n / 2) * a);
      g.p.push_back(2.0 * M_PI * fft_frequency_index(i, n) / (n * a));
    }
    return g;
  }
  double length() const { return points * spacing; }
  double momentum_spacing() const { return 2.0 * M_PI / length(); }
};

// Normalized samples of R^{-1/2} v(x/R) with v a smooth bump on (-1, 1).
inline Vec compact_profile(const AtomGrid& g, double radius, double center = 0.0) {
  Vec u(g.points);
  for (int i = 0; i < g.points; ++i) u(i) = bump((g.x[static_cast<std::size_t>(i)] - center) / radius);
  if (u.norm() == 0.0) throw std::invalid_argument("compact_profile: radius below grid resolution");
  return u.normalized();
}

// Normalized state whose momentum samples are bump(p / width) e^{-i p center}.
inline Vec band_limited_profile(const AtomGrid& g, double width, double center = 0.0) {
  Vec uh(g.points);
  for (int i = 0; i < g.points; ++i) {
    const double p = g.p[static_cast<std::size_t>(i)];
    uh(i) = bump(p / width) * std::exp(cplx(0.0, -p * center));
  }
  if (uh.norm() == 0.0) throw std::invalid_argument("band_limited_profile: width below momentum resolution");
  const UnitaryFft fft({g.points});
  fft.backward(uh);
  return uh.normalized();
}

// U = DFT_x o e^{i x P_E}: maps grid states to fiber columns (column m*spectators + q holds momentum p_m).
class FiberTransform {
 public:
  FiberTransform(const AtomGrid& g, const Fiber& f, int spectators = 1)
      : grid_(&g), fiber_(&f), spectators_(spectators),
        block_(static_cast<std::size_t>(spectators) * f.dim()), fft_({g.points}, static_cast<int>(block_)) {
    if (spectators < 1) throw std::invalid_argument("FiberTransform: spectators must be >= 1");
    const auto d = static_cast<Eigen::Index>(f.dim());
    phase_.resize(d, g.points);
    for (int n = 0; n < g.points; ++n)
      for (Eigen::Index a = 0; a < d; ++a)
        phase_(a, n) = std::exp(cplx(0.0, f.photon_momentum()(a) * g.x[static_cast<std::size_t>(n)]));
  }
  const AtomGrid& grid() const { return *grid_; }
  const Fiber& fiber() const { return *fiber_; }
  int spectators() const { return spectators_; }
  std::size_t dim() const { return block_ * static_cast<std::size_t>(grid_->points); }

  void to_fibers(Vec& v) const {
    twist(v, false);
    fft_.forward(v);
  }
  void from_fibers(Vec& v) const {
    fft_.backward(v);
    twist(v, true);
  }

 private:
  void twist(Vec& v, bool inverse) const {
    if (static_cast<std::size_t>(v.size()) != dim()) throw std::invalid_argument("FiberTransform: size mismatch");
    const auto d = phase_.rows();
    for (int n = 0; n < grid_->points; ++n)
      for (int q = 0; q < spectators_; ++q) {
        auto seg = v.segment((static_cast<Eigen::Index>(n) * spectators_ + q) * d, d);
        if (inverse) seg.array() *= phase_.col(n).array().conjugate();
        else seg.array() *= phase_.col(n).array();
      }
  }

  const AtomGrid* grid_;
  const Fiber* fiber_;
  int spectators_;
  std::size_t block_;
  UnitaryFft fft_;
  Mat phase_;  // e^{i P_E x_n}, D x Nx
};

// H_{P v E} + V(x), applied as U^{-1} (direct sum of H(p)) U plus the diagonal potential; spectators ride along.
struct AtomFieldOperator {
  const FiberTransform* transform = nullptr;
  Eigen::VectorXd potential;  // per grid point; empty for none

  std::size_t dim() const { return transform->dim(); }
  void apply(const Vec& in, Vec& out) const {
    const Fiber& f = transform->fiber();
    const AtomGrid& g = transform->grid();
    const int sp = transform->spectators();
    const auto d = static_cast<Eigen::Index>(f.dim());
    Vec t = in;
    transform->to_fibers(t);
    Eigen::Map<const Mat> tm(t.data(), d, static_cast<Eigen::Index>(g.points) * sp);
    out.resize(in.size());
    Eigen::Map<Mat> ym(out.data(), d, static_cast<Eigen::Index>(g.points) * sp);
    ym.noalias() = f.base() * tm;
    for (int m = 0; m < g.points; ++m) {
      const double p = g.p[static_cast<std::size_t>(m)];
      const Eigen::ArrayXd diag = 0.5 * p * p - p * f.photon_momentum().array();
      for (int q = 0; q < sp; ++q) {
        const auto c = static_cast<Eigen::Index>(m) * sp + q;
        ym.col(c).array() += diag.cast<cplx>() * tm.col(c).array();
      }
    }
    transform->from_fibers(out);
    if (potential.size() > 0) {
      if (potential.size() != g.points) throw std::invalid_argument("AtomFieldOperator: potential length mismatch");
      const Eigen::Index blk = d * sp;
      for (int n = 0; n < g.points; ++n) out.segment(n * blk, blk) += potential(n) * in.segment(n * blk, blk);
    }
  }
};

// J(u) = U^{-1}( window(p) u^(p) psi(p) ), with psi(p) = pi(p) psi0 from the table.
inline Vec dressed_state(const FiberTransform& tr, const GroundTable& table, const Vec& u) {
  const AtomGrid& g = tr.grid();
  const Fiber& f = tr.fiber();
  if (tr.spectators() != 1) throw std::invalid_argument("dressed_state: transform must have no spectators");
  if (u.size() != g.points) throw std::invalid_argument("dressed_state: profile length mismatch");
  Vec uh = u;
  const UnitaryFft fft({g.points});
  fft.forward(uh);
  const auto d = static_cast<Eigen::Index>(f.dim());
  Vec out = Vec::Zero(static_cast<Eigen::Index>(tr.dim()));
  std::vector<std::pair<double, int>> used;
  for (int m = 0; m < g.points; ++m) {
    const double p = g.p[static_cast<std::size_t>(m)];
    const double w = momentum_window(p, f.params().nu);
    if (w == 0.0) continue;
    const auto& row = table.at(p);
    if (row.vector.size() != d) throw std::invalid_argument("dressed_state: table does not match the fiber");
    out.segment(static_cast<Eigen::Index>(m) * d, d) = (w * uh(m)) * row.vector;
    used.emplace_back(p, m);
  }
  std::sort(used.begin(), used.end());
  for (std::size_t i = 1; i < used.size(); ++i) {
    const auto& a = table.at(used[i - 1].first).vector;
    const auto& b = table.at(used[i].first).vector;
    if (a.dot(b).real() < 0.5 * a.norm() * b.norm())
      throw std::runtime_error("dressed_state: phase-alignment failure between neighbouring momenta");
  }
  tr.from_fibers(out);
  return out;
}

// Grid momenta inside the window support, i.e. those dressed_state needs from the table.
inline std::vector<double> window_momenta(const AtomGrid& g, double nu) {
  std::vector<double> ps;
  for (double p : g.p)
    if (momentum_window(p, nu) > 0.0) ps.push_back(p);
  std::sort(ps.begin(), ps.end());
  return ps;
}

}  // namespace closedsys::model2
