// model1.hpp — spin-1/2 lattice particle scattering away from a finite system Q
#pragma once

#include "closedsys/fft.hpp"
#include "closedsys/fit.hpp"
#include "closedsys/record.hpp"
#include "closedsys/tensor.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace closedsys::model1 {

using Vec3 = std::array<double, 3>;
using RowMat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }
inline Vec3 sub3(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 add3(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 scale3(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }

// ---------------------------------------------------------------------------------------------
// Grid

// Periodic box [-extent/2, extent/2)^dim; site index has the last axis fastest.
struct LatticeGrid {
  int dim = 2;
  int points = 256;
  double spacing = 0.5;

  void validate() const {
    if (dim < 1 || dim > 3) throw std::invalid_argument("LatticeGrid: dim must be 1, 2 or 3");
    if (points < 4 || (points & (points - 1)) != 0)
      throw std::invalid_argument("LatticeGrid: points_per_axis must be a power of two >= 4");
    if (!(spacing > 0.0) || !std::isfinite(spacing)) throw std::invalid_argument("LatticeGrid: spacing must be positive");
  }
  std::size_t sites() const {
    std::size_t n = 1;
    for (int a = 0; a < dim; ++a) n *= static_cast<std::size_t>(points);
    return n;
  }
  double extent() const { return points * spacing; }
  double lower() const { return -0.5 * extent(); }
  std::vector<int> shape() const { return std::vector<int>(static_cast<std::size_t>(dim), points); }
  double cell_volume() const { return std::pow(spacing, dim); }
  double momentum_spacing() const { return 2.0 * std::numbers::pi / extent(); }
  double nyquist() const { return std::numbers::pi / spacing; }

  std::array<int, 3> indices(std::size_t site) const {
    std::array<int, 3> idx{0, 0, 0};
    for (int a = dim - 1; a >= 0; --a) {
      idx[static_cast<std::size_t>(a)] = static_cast<int>(site % static_cast<std::size_t>(points));
      site /= static_cast<std::size_t>(points);
    }
    return idx;
  }
  std::size_t site(const std::array<int, 3>& idx) const {
    std::size_t s = 0;
    for (int a = 0; a < dim; ++a) s = s * static_cast<std::size_t>(points) + static_cast<std::size_t>(idx[static_cast<std::size_t>(a)]);
    return s;
  }
  Vec3 position(std::size_t s) const {
    const auto idx = indices(s);
    Vec3 x{0, 0, 0};
    for (int a = 0; a < dim; ++a) x[static_cast<std::size_t>(a)] = lower() + spacing * idx[static_cast<std::size_t>(a)];
    return x;
  }
  Vec3 momentum(std::size_t s) const {
    const auto idx = indices(s);
    Vec3 k{0, 0, 0};
    for (int a = 0; a < dim; ++a)
      k[static_cast<std::size_t>(a)] = momentum_spacing() * fft_frequency_index(idx[static_cast<std::size_t>(a)], points);
    return k;
  }
  // Nearest site to a point (clamped to the box); also reports whether clamping happened.
  std::size_t nearest_site(const Vec3& x, bool* clamped = nullptr) const {
    std::array<int, 3> idx{0, 0, 0};
    bool c = false;
    for (int a = 0; a < dim; ++a) {
      long i = std::lround((x[static_cast<std::size_t>(a)] - lower()) / spacing);
      if (i < 0 || i >= points) c = true;
      idx[static_cast<std::size_t>(a)] = static_cast<int>(std::clamp<long>(i, 0, points - 1));
    }
    if (clamped) *clamped = c;
    return site(idx);
  }
  bool in_boundary_layer(std::size_t s, int layer) const {
    const auto idx = indices(s);
    for (int a = 0; a < dim; ++a) {
      const int i = idx[static_cast<std::size_t>(a)];
      if (i < layer || i >= points - layer) return true;
    }
    return false;
  }
};

// ---------------------------------------------------------------------------------------------
// Cones

// Momentum cone {k : k.axis >= |k| cos(theta0), |k| > v}; its doubled-angle position cone sits at `apex`.
struct ConeSpec {
  Vec3 axis{1.0, 0.0, 0.0};
  double half_angle = 0.6;
  double speed_floor = 1.0;
  Vec3 apex{0.0, 0.0, 0.0};

  void validate() const {
    if (std::abs(norm3(axis) - 1.0) > 1e-12) throw std::invalid_argument("ConeSpec: axis must be a unit vector");
    if (!(half_angle > 0.0 && half_angle < std::numbers::pi / 4))
      throw std::invalid_argument("ConeSpec: half_angle must lie in (0, pi/4)");
    if (!(speed_floor > 0.0) || !std::isfinite(speed_floor)) throw std::invalid_argument("ConeSpec: speed floor must be > 0");
  }
  bool momentum_inside(const Vec3& k) const {
    const double n = norm3(k);
    return n > speed_floor && dot3(k, axis) >= n * std::cos(half_angle);
  }
  // Membership in the doubled-angle position cone with apex at `apex`.
  bool position_inside(const Vec3& y) const {
    const Vec3 r = sub3(y, apex);
    return dot3(r, axis) >= norm3(r) * std::cos(2.0 * half_angle);
  }
};

// Euclidean projection onto the circular cone {apex + r : r.axis >= |r| cos(angle)}.
inline Vec3 project_onto_cone(const Vec3& y, const Vec3& apex, const Vec3& axis, double angle) {
  const Vec3 r = sub3(y, apex);
  const double along = dot3(r, axis);
  const Vec3 perp = sub3(r, scale3(axis, along));
  const double rho = norm3(perp);
  if (rho <= along * std::tan(angle)) return y;
  if (rho == 0.0) return apex;
  const Vec3 u = add3(scale3(axis, std::cos(angle)), scale3(perp, std::sin(angle) / rho));
  const double t = dot3(r, u);
  if (t <= 0.0) return apex;
  return add3(apex, scale3(u, t));
}

inline double distance_to_cone(const Vec3& y, const Vec3& apex, const Vec3& axis, double angle) {
  return norm3(sub3(y, project_onto_cone(y, apex, axis, angle)));
}

// ---------------------------------------------------------------------------------------------
// Q register

enum class CouplingKind { exchange, zz };

// Interaction profile: smooth uses |x - centre|, cell_distance uses the distance to the cell.
enum class ProfileKind { smooth, cell_distance };

// Axis-aligned cube of side `side` (only the first `dim` coordinates matter).
struct CellSpec {
  Vec3 center{0.0, 0.0, 0.0};
  double side = 1.0;
  int local_dim = 2;       // qubit (2) or truncated oscillator (> 2)
  double energy = 0.0;     // local term energy * number
  int initial_level = 1;   // occupation of the cell at t = 0
};

inline Vec3 clamp_to_cell(const Vec3& y, const CellSpec& c, int dim) {
  Vec3 p = y;
  for (int a = 0; a < 3; ++a) {
    const auto i = static_cast<std::size_t>(a);
    if (a >= dim) p[i] = 0.0;
    else p[i] = std::clamp(y[i], c.center[i] - 0.5 * c.side, c.center[i] + 0.5 * c.side);
  }
  return p;
}

inline double distance_to_cell(const Vec3& y, const CellSpec& c, int dim) {
  double s = 0.0;
  for (int a = 0; a < dim; ++a) {
    const auto i = static_cast<std::size_t>(a);
    const double e = std::max(0.0, std::abs(y[i] - c.center[i]) - 0.5 * c.side);
    s += e * e;
  }
  return std::sqrt(s);
}

// Distance between a cell and the doubled-angle position cone, by alternating projections.
inline double cell_cone_distance(const CellSpec& c, const ConeSpec& cone, int dim) {
  const double angle = 2.0 * cone.half_angle;
  Vec3 x = clamp_to_cell(c.center, c, dim);
  for (int it = 0; it < 100000; ++it) {
    const Vec3 q = project_onto_cone(x, cone.apex, cone.axis, angle);
    const Vec3 nx = clamp_to_cell(q, c, dim);
    const double step = norm3(sub3(nx, x));
    x = nx;
    if (step < 1e-15 * std::max(1.0, norm3(x))) break;
  }
  return distance_to_cone(x, cone.apex, cone.axis, angle);
}

struct QConfig {
  std::vector<CellSpec> cells;
  double coupling = 0.0;        // g
  double decay_exponent = 3.0;  // alpha
  CouplingKind kind = CouplingKind::exchange;
  ProfileKind profile = ProfileKind::smooth;
  double core_radius = 3.0;     // a in the smooth profile
  ConeSpec cone;
  double sum_constant = 1.0;    // C in sum_n d_n^{(1-alpha)/2} <= C d^{-beta}
  double sum_exponent = 1.0;    // beta
  bool partner_spin = false;    // include the partner spin P'
  bool filter = false;          // include the filter detector coupled to P'
  Vec3 filter_axis{0.0, 0.0, 1.0};
  double filter_strength = 0.0;

  // Q factor dimensions: [P'] [filter detector] cells...
  std::vector<std::size_t> factor_dims() const {
    std::vector<std::size_t> d;
    if (partner_spin) d.push_back(2);
    if (filter) d.push_back(2);
    for (const auto& c : cells) d.push_back(static_cast<std::size_t>(c.local_dim));
    return d;
  }
  std::size_t q_dim() const { return product(factor_dims()); }
  std::size_t partner_factor() const { return 0; }
  std::size_t filter_factor() const { return partner_spin ? 1 : 0; }
  std::size_t cell_factor(std::size_t n) const { return (partner_spin ? 1 : 0) + (filter ? 1 : 0) + n; }
};

struct QValidation {
  std::vector<double> cell_distances;
  double min_distance = 0.0;
  double decay_sum = 0.0;
  double decay_sum_bound = 0.0;
};

// Checks every structural invariant and reports all failures together.
inline QValidation validate_qconfig(const LatticeGrid& grid, const QConfig& q) {
  grid.validate();
  std::vector<std::string> errors;
  try {
    q.cone.validate();
  } catch (const std::exception& e) {
    errors.emplace_back(e.what());
  }
  if (!std::isfinite(q.coupling)) errors.emplace_back("coupling must be finite");
  if (!(q.decay_exponent > 1.0)) errors.emplace_back("decay exponent alpha must exceed 1");
  if (!(q.core_radius > 0.0)) errors.emplace_back("core radius must be positive");
  if (!(q.sum_constant > 0.0) || !(q.sum_exponent > 0.0)) errors.emplace_back("summability constants must be positive");
  if (q.filter && !q.partner_spin) errors.emplace_back("filter detector requires the partner spin");
  if (q.filter && std::abs(norm3(q.filter_axis) - 1.0) > 1e-12) errors.emplace_back("filter axis must be a unit vector");
  QValidation v;
  const double half = 0.5 * grid.extent();
  for (std::size_t n = 0; n < q.cells.size(); ++n) {
    const auto& c = q.cells[n];
    if (!(c.side > 0.0)) errors.push_back("cell " + std::to_string(n) + ": side must be positive");
    if (c.local_dim < 2) errors.push_back("cell " + std::to_string(n) + ": local dimension must be >= 2");
    if (c.initial_level < 0 || c.initial_level >= c.local_dim)
      errors.push_back("cell " + std::to_string(n) + ": initial level out of range");
    for (int a = 0; a < grid.dim; ++a)
      if (std::abs(c.center[static_cast<std::size_t>(a)]) + 0.5 * c.side > half)
        errors.push_back("cell " + std::to_string(n) + ": lies outside the periodic box");
  }
  if (errors.empty()) {
    v.min_distance = std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < q.cells.size(); ++n) {
      const double d = cell_cone_distance(q.cells[n], q.cone, grid.dim);
      v.cell_distances.push_back(d);
      v.min_distance = std::min(v.min_distance, d);
      if (!(d > 0.0)) {
        std::ostringstream os;
        os << "cone-separation hypothesis failed: cell " << n << " touches the doubled-angle cone (distance " << d << ")";
        errors.push_back(os.str());
      }
    }
    if (errors.empty() && !q.cells.empty()) {
      for (double d : v.cell_distances) v.decay_sum += std::pow(d, 0.5 * (1.0 - q.decay_exponent));
      v.decay_sum_bound = q.sum_constant * std::pow(v.min_distance, -q.sum_exponent);
      if (v.decay_sum > v.decay_sum_bound * (1.0 + 1e-12)) {
        std::ostringstream os;
        os << "summability condition failed: sum of d_n^((1-alpha)/2) = " << v.decay_sum << " exceeds C d^-beta = "
           << v.decay_sum_bound;
        errors.push_back(os.str());
      }
    }
  }
  if (!errors.empty()) {
    std::string msg = "QConfig validation failed:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
  return v;
}

// Translates all cells along -axis so that the smallest cell-cone distance equals d.
inline QConfig place_cells_at_distance(const QConfig& q, int dim, double d) {
  if (q.cells.empty()) throw std::invalid_argument("place_cells_at_distance: no cells");
  if (!(d > 0.0)) throw std::invalid_argument("place_cells_at_distance: distance must be positive");
  auto shifted = [&](double s) {
    QConfig r = q;
    for (auto& c : r.cells) c.center = sub3(c.center, scale3(q.cone.axis, s));
    return r;
  };
  auto dist = [&](double s) {
    const QConfig r = shifted(s);
    double m = std::numeric_limits<double>::infinity();
    for (const auto& c : r.cells) m = std::min(m, cell_cone_distance(c, r.cone, dim));
    return m;
  };
  // The cone is invariant under translation by +axis, so dist(s) is nondecreasing.
  double lo = 0.0, hi = 0.0;
  if (dist(0.0) < d) {
    hi = 1.0;
    while (dist(hi) < d) {
      lo = hi;
      hi *= 2.0;
      if (hi > 1e9) throw std::runtime_error("place_cells_at_distance: cannot reach distance");
    }
  } else {
    lo = -1.0;
    while (dist(lo) > d) {
      hi = lo;
      lo *= 2.0;
      if (lo < -1e9) throw std::runtime_error("place_cells_at_distance: cannot reach distance");
    }
  }
  for (int it = 0; it < 200 && hi - lo > 1e-14 * std::max(1.0, std::abs(hi)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (dist(mid) < d ? lo : hi) = mid;
  }
  return shifted(hi);
}

// ---------------------------------------------------------------------------------------------
// Operators on the internal space (P spin outermost, then Q factors)

namespace ops {

inline Mat kron_dense(const Mat& a, const Mat& b) {
  Mat out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

inline Mat embed_list(const std::vector<Mat>& factors) {
  Mat out = Mat::Identity(1, 1);
  for (const auto& f : factors) out = kron_dense(out, f);
  return out;
}

inline Mat embed(const Mat& op, std::size_t factor, const std::vector<std::size_t>& dims) {
  std::vector<Mat> factors;
  for (std::size_t f = 0; f < dims.size(); ++f)
    factors.push_back(f == factor ? op : Mat::Identity(static_cast<Eigen::Index>(dims[f]), static_cast<Eigen::Index>(dims[f])));
  return embed_list(factors);
}

inline Mat lowering(int n) {
  Mat a = Mat::Zero(n, n);
  for (int k = 1; k < n; ++k) a(k - 1, k) = std::sqrt(static_cast<double>(k));
  return a;
}

inline Mat number(int n) {
  Mat m = Mat::Zero(n, n);
  for (int k = 0; k < n; ++k) m(k, k) = static_cast<double>(k);
  return m;
}

// Spin-1/2 operator S.n with S = sigma/2; basis index 0 is spin up along z.
inline Mat spin(const Vec3& n) { return 0.5 * (n[0] * pauli::x() + n[1] * pauli::y() + n[2] * pauli::z()); }

// Projector onto spin +n: 1/2 + S.n.
inline Mat spin_projector(const Vec3& n) { return 0.5 * pauli::id() + spin(n); }

inline Mat sigma_plus() {
  Mat m = Mat::Zero(2, 2);
  m(0, 1) = 1.0;
  return m;
}

}  // namespace ops

// Dense matrices on C^2 (P spin) x H_Q used by the propagator and the assembled Hamiltonian.
struct InternalOperators {
  std::vector<std::size_t> q_dims;
  std::size_t q_dim = 1;
  Mat h_q;                   // on H_Q
  std::vector<Mat> couplings; // per cell, on C^2 x H_Q
};

inline InternalOperators internal_operators(const QConfig& q) {
  InternalOperators r;
  r.q_dims = q.factor_dims();
  r.q_dim = product(r.q_dims);
  const auto qd = static_cast<Eigen::Index>(r.q_dim);
  r.h_q = Mat::Zero(qd, qd);
  for (std::size_t n = 0; n < q.cells.size(); ++n)
    if (q.cells[n].energy != 0.0)
      r.h_q += q.cells[n].energy * ops::embed(ops::number(q.cells[n].local_dim), q.cell_factor(n), r.q_dims);
  if (q.filter && q.filter_strength != 0.0) {
    const Mat proj = ops::embed(ops::spin_projector(q.filter_axis), q.partner_factor(), r.q_dims);
    const Mat flip = ops::embed(pauli::x(), q.filter_factor(), r.q_dims);
    r.h_q += q.filter_strength * proj * flip;
  }
  std::vector<std::size_t> full = {2};
  full.insert(full.end(), r.q_dims.begin(), r.q_dims.end());
  for (std::size_t n = 0; n < q.cells.size(); ++n) {
    const std::size_t f = 1 + q.cell_factor(n);
    const int ld = q.cells[n].local_dim;
    Mat c;
    if (q.kind == CouplingKind::exchange) {
      const Mat sp = ops::embed(ops::sigma_plus(), 0, full);
      const Mat b = ops::embed(ops::lowering(ld), f, full);
      c = sp * b;
      c += c.adjoint().eval();
    } else {
      c = ops::embed(pauli::z(), 0, full) * ops::embed(ops::number(ld), f, full);
    }
    r.couplings.push_back(std::move(c));
  }
  return r;
}

// Smooth: V_n(x) = g (a^2 + |x - c_n|^2)^{-alpha/2} with core radius a. Since dist(x, cell) <= |x - c_n|
// it obeys the same power-law bound as g (1 + dist(x, cell_n))^{-alpha}; its Fourier transform decays like
// e^{-a|k|}, which keeps the coupling from feeding momenta near the grid cutoff.
inline double interaction_profile(const Vec3& x, const CellSpec& c, const QConfig& q, int dim) {
  if (q.profile == ProfileKind::cell_distance) return q.coupling * std::pow(1.0 + distance_to_cell(x, c, dim), -q.decay_exponent);
  double r2 = 0.0;
  for (int a = 0; a < dim; ++a) r2 += std::pow(x[static_cast<std::size_t>(a)] - c.center[static_cast<std::size_t>(a)], 2);
  return q.coupling * std::pow(q.core_radius * q.core_radius + r2, -0.5 * q.decay_exponent);
}

inline std::vector<Eigen::VectorXd> interaction_profiles(const LatticeGrid& grid, const QConfig& q) {
  std::vector<Eigen::VectorXd> out;
  const std::size_t n = grid.sites();
  for (const auto& c : q.cells) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (std::size_t s = 0; s < n; ++s) v(static_cast<Eigen::Index>(s)) = interaction_profile(grid.position(s), c, q, grid.dim);
    out.push_back(std::move(v));
  }
  return out;
}

// max over sites outside the cell of |V_n(x)| dist(x, cell)^alpha / g; the decay bound requires <= 1.
inline double interaction_bound_ratio(const LatticeGrid& grid, const QConfig& q, const std::vector<Eigen::VectorXd>& profiles) {
  if (q.coupling == 0.0) return 0.0;
  double worst = 0.0;
  for (std::size_t n = 0; n < q.cells.size(); ++n)
    for (std::size_t s = 0; s < grid.sites(); ++s) {
      const double d = distance_to_cell(grid.position(s), q.cells[n], grid.dim);
      if (d > 0.0)
        worst = std::max(worst, std::abs(profiles[n](static_cast<Eigen::Index>(s))) * std::pow(d, q.decay_exponent) /
                                    std::abs(q.coupling));
    }
  return worst;
}

// Dense spectral second-derivative part -1/2 d^2/dx^2 on one periodic axis.
inline Eigen::MatrixXd kinetic_1d(int n, double h) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(n, n);
  const double dk = 2.0 * std::numbers::pi / (n * h);
  for (int j = 0; j < n; ++j)
    for (int l = 0; l < n; ++l) {
      double s = 0.0;
      for (int m = 0; m < n; ++m) {
        const double k = dk * fft_frequency_index(m, n);
        s += 0.5 * k * k * std::cos(k * h * (j - l));
      }
      t(j, l) = s / n;
    }
  return 0.5 * (t + t.transpose());
}

inline constexpr std::size_t kMaxAssembledDim = std::size_t{1} << 16;

// H = -Delta/2 x 1 + 1 x (1_2 x H_Q) + sum_n V_n(x) C_n, assembled explicitly for small grids.
inline SparseOperator build_hamiltonian(const LatticeGrid& grid, const QConfig& q) {
  validate_qconfig(grid, q);
  const InternalOperators io = internal_operators(q);
  const std::size_t w = 2 * io.q_dim, n_sites = grid.sites(), total = n_sites * w;
  if (total > kMaxAssembledDim) throw std::invalid_argument("build_hamiltonian: grid too large for explicit assembly");
  const auto profiles = interaction_profiles(grid, q);
  if (interaction_bound_ratio(grid, q, profiles) > 1.0 + 1e-12)
    throw std::logic_error("build_hamiltonian: interaction profile violates the power-law decay bound");
  const Eigen::MatrixXd t1 = kinetic_1d(grid.points, grid.spacing);
  std::vector<Triplet> tr;
  // Kinetic: sum over axes of t1 acting on that axis index.
  for (std::size_t s = 0; s < n_sites; ++s) {
    const auto idx = grid.indices(s);
    for (int a = 0; a < grid.dim; ++a)
      for (int l = 0; l < grid.points; ++l) {
        auto jdx = idx;
        jdx[static_cast<std::size_t>(a)] = l;
        const double v = t1(idx[static_cast<std::size_t>(a)], l);
        if (v == 0.0) continue;
        const std::size_t s2 = grid.site(jdx);
        for (std::size_t b = 0; b < w; ++b)
          tr.emplace_back(static_cast<Eigen::Index>(s * w + b), static_cast<Eigen::Index>(s2 * w + b), cplx(v, 0.0));
      }
  }
  Mat local_q = Mat::Zero(static_cast<Eigen::Index>(w), static_cast<Eigen::Index>(w));
  local_q.topLeftCorner(io.h_q.rows(), io.h_q.cols()) = io.h_q;
  local_q.bottomRightCorner(io.h_q.rows(), io.h_q.cols()) = io.h_q;
  for (std::size_t s = 0; s < n_sites; ++s) {
    Mat local = local_q;
    for (std::size_t n = 0; n < io.couplings.size(); ++n) local += profiles[n](static_cast<Eigen::Index>(s)) * io.couplings[n];
    for (Eigen::Index i = 0; i < local.rows(); ++i)
      for (Eigen::Index j = 0; j < local.cols(); ++j)
        if (local(i, j) != cplx(0.0, 0.0))
          tr.emplace_back(static_cast<Eigen::Index>(s * w) + i, static_cast<Eigen::Index>(s * w) + j, local(i, j));
  }
  SparseOperator h = SparseOperator::from_triplets(total, tr, false);
  if (h.hermiticity_defect() > 1e-12 * std::max(1.0, h.max_abs())) throw std::logic_error("build_hamiltonian: not hermitian");
  SpMat m = 0.5 * (h.matrix + SpMat(h.matrix.adjoint()));
  return SparseOperator(std::move(m), true);
}

// ---------------------------------------------------------------------------------------------
// Propagation

// Strang split-step for H = T + (1 x H_Q) + sum_n V_n(x) C_n on a state laid out as (site, spin, q).
// T and H_Q commute, so e^{-iH_Q dt} is applied once per step; the couplings are exponentiated
// exactly per site through the eigendecomposition of each C_n.
class SplitStepPropagator {
 public:
  SplitStepPropagator(const LatticeGrid& grid, const QConfig& q, double dt_max, bool coupled = true, int order = 2)
      : grid_(grid), dt_max_(dt_max), order_(order) {
    validate_qconfig(grid, q);
    if (!(dt_max > 0.0)) throw std::invalid_argument("SplitStepPropagator: dt must be positive");
    if (order != 2 && order != 4) throw std::invalid_argument("SplitStepPropagator: order must be 2 or 4");
    const InternalOperators io = internal_operators(q);
    q_dim_ = io.q_dim;
    width_ = 2 * q_dim_;
    fft_ = std::make_unique<UnitaryFft>(grid.shape(), static_cast<int>(width_));
    k2half_.resize(static_cast<Eigen::Index>(grid.sites()));
    for (std::size_t s = 0; s < grid.sites(); ++s) {
      const Vec3 k = grid.momentum(s);
      k2half_(static_cast<Eigen::Index>(s)) = 0.5 * dot3(k, k);
    }
    Mat local_q = Mat::Zero(static_cast<Eigen::Index>(width_), static_cast<Eigen::Index>(width_));
    local_q.topLeftCorner(io.h_q.rows(), io.h_q.cols()) = io.h_q;
    local_q.bottomRightCorner(io.h_q.rows(), io.h_q.cols()) = io.h_q;
    has_hq_ = local_q.cwiseAbs().maxCoeff() > 0.0;
    if (has_hq_) {
      Eigen::SelfAdjointEigenSolver<Mat> es(local_q);
      hq_vals_ = es.eigenvalues();
      hq_vecs_ = es.eigenvectors();
    }
    if (coupled && q.coupling != 0.0) {
      profiles_ = interaction_profiles(grid, q);
      if (interaction_bound_ratio(grid, q, profiles_) > 1.0 + 1e-12)
        throw std::logic_error("SplitStepPropagator: interaction profile violates the power-law decay bound");
      for (const auto& c : io.couplings) {
        Eigen::SelfAdjointEigenSolver<Mat> es(c);
        c_vals_.push_back(es.eigenvalues());
        c_vecs_.push_back(es.eigenvectors());
      }
    }
  }

  std::size_t width() const { return width_; }
  std::size_t q_dim() const { return q_dim_; }
  std::size_t dim() const { return grid_.sites() * width_; }
  const LatticeGrid& grid() const { return grid_; }
  bool coupled() const { return !profiles_.empty(); }

  // psi <- e^{-iHt} psi.
  void evolve(Vec& psi, double t) const {
    if (static_cast<std::size_t>(psi.size()) != dim()) throw std::invalid_argument("SplitStepPropagator: state size mismatch");
    if (t < 0.0) throw std::invalid_argument("SplitStepPropagator: negative time step");
    if (t == 0.0) return;
    if (!coupled()) {
      kinetic(psi, t);
      internal_q(psi, t);
      return;
    }
    const long n = std::max<long>(1, static_cast<long>(std::ceil(t / dt_max_ - 1e-12)));
    const double dt = t / static_cast<double>(n);
    // Symmetric second-order steps, optionally composed into the fourth-order triple jump.
    std::vector<double> weights = {1.0};
    if (order_ == 4) {
      const double c = std::cbrt(2.0);
      weights = {1.0 / (2.0 - c), -c / (2.0 - c), 1.0 / (2.0 - c)};
    }
    std::vector<double> cs;
    for (long i = 0; i < n; ++i)
      for (double wgt : weights) cs.push_back(wgt * dt);
    // Adjacent kinetic and H_Q half steps commute with each other and are merged.
    kinetic(psi, 0.5 * cs[0]);
    internal_q(psi, 0.5 * cs[0]);
    for (std::size_t i = 0; i < cs.size(); ++i) {
      couplings(psi, cs[i]);
      const double tau = i + 1 < cs.size() ? 0.5 * (cs[i] + cs[i + 1]) : 0.5 * cs[i];
      internal_q(psi, tau);
      kinetic(psi, tau);
    }
  }

  // H_PQ psi (the coupling part only).
  void apply_coupling(const Vec& psi, Vec& out) const {
    out = Vec::Zero(psi.size());
    if (!coupled()) return;
    Eigen::Map<const RowMat> x(psi.data(), static_cast<Eigen::Index>(grid_.sites()), static_cast<Eigen::Index>(width_));
    Eigen::Map<RowMat> y(out.data(), x.rows(), x.cols());
    for (std::size_t n = 0; n < c_vals_.size(); ++n) {
      const Mat c = c_vecs_[n] * c_vals_[n].asDiagonal() * c_vecs_[n].adjoint();
      y.noalias() += profiles_[n].asDiagonal() * (x * c.transpose());
    }
  }

 private:
  void kinetic(Vec& psi, double tau) const {
    if (tau == 0.0) return;
    fft_->forward(psi);
    const auto w = static_cast<Eigen::Index>(width_);
    for (Eigen::Index s = 0; s < k2half_.size(); ++s) {
      const cplx ph = std::exp(cplx(0.0, -tau * k2half_(s)));
      psi.segment(s * w, w) *= ph;
    }
    fft_->backward(psi);
  }
  void internal_q(Vec& psi, double tau) const {
    if (!has_hq_ || tau == 0.0) return;
    const Eigen::VectorXcd ph = (cplx(0.0, -tau) * hq_vals_.cast<cplx>()).array().exp();
    const Mat u = hq_vecs_ * ph.asDiagonal() * hq_vecs_.adjoint();
    right_multiply(psi, u.transpose());
  }
  // Symmetric product of the exact per-cell exponentials.
  void couplings(Vec& psi, double tau) const {
    const std::size_t m = c_vals_.size();
    for (std::size_t n = 0; n + 1 < m; ++n) coupling_step(psi, n, 0.5 * tau);
    coupling_step(psi, m - 1, tau);
    for (std::size_t n = m - 1; n-- > 0;) coupling_step(psi, n, 0.5 * tau);
  }
  // Row-wise v <- W diag(e^{-i tau V(x) c}) W^dag v.
  void coupling_step(Vec& psi, std::size_t n, double tau) const {
    Eigen::Map<RowMat> x(psi.data(), static_cast<Eigen::Index>(grid_.sites()), static_cast<Eigen::Index>(width_));
    work_.noalias() = x * c_vecs_[n].conjugate();
    const auto& vals = c_vals_[n];
    const auto& prof = profiles_[n];
    for (Eigen::Index s = 0; s < work_.rows(); ++s)
      for (Eigen::Index j = 0; j < work_.cols(); ++j) work_(s, j) *= std::exp(cplx(0.0, -tau * prof(s) * vals(j)));
    x.noalias() = work_ * c_vecs_[n].transpose();
  }
  void right_multiply(Vec& psi, const Mat& m) const {
    Eigen::Map<RowMat> x(psi.data(), static_cast<Eigen::Index>(grid_.sites()), static_cast<Eigen::Index>(width_));
    work_.noalias() = x * m;
    x = work_;
  }

  LatticeGrid grid_;
  double dt_max_;
  int order_ = 2;
  std::size_t q_dim_ = 1, width_ = 2;
  std::unique_ptr<UnitaryFft> fft_;
  Eigen::VectorXd k2half_;
  bool has_hq_ = false;
  Eigen::VectorXd hq_vals_;
  Mat hq_vecs_;
  std::vector<Eigen::VectorXd> profiles_;
  std::vector<Eigen::VectorXd> c_vals_;
  std::vector<Mat> c_vecs_;
  mutable RowMat work_;
};

// Exact free evolution e^{-itT} of a state with `width` internal components per site.
inline void free_evolve(const LatticeGrid& grid, Vec& psi, std::size_t width, double t) {
  UnitaryFft fft(grid.shape(), static_cast<int>(width));
  fft.forward(psi);
  const auto w = static_cast<Eigen::Index>(width);
  for (std::size_t s = 0; s < grid.sites(); ++s) {
    const Vec3 k = grid.momentum(s);
    psi.segment(static_cast<Eigen::Index>(s) * w, w) *= std::exp(cplx(0.0, -0.5 * t * dot3(k, k)));
  }
  fft.backward(psi);
}

// ---------------------------------------------------------------------------------------------
// States and observables

inline double smooth_step(double t) { return t <= 0.0 ? 0.0 : std::exp(-1.0 / t); }

// C-infinity cutoff: 1 on [0, s0], 0 on [1, inf).
inline double compact_cutoff(double s, double s0 = 0.85) {
  if (s <= s0) return 1.0;
  if (s >= 1.0) return 0.0;
  const double u = (s - s0) / (1.0 - s0);
  const double a = smooth_step(1.0 - u), b = smooth_step(u);
  return a / (a + b);
}

struct WavepacketInfo {
  double support_radius = 0.0;  // radius of the momentum ball carrying the envelope
  double outside_mass = 0.0;    // Fourier mass outside the momentum cone
};

// Scalar packet centred at cone.apex whose momentum envelope is a Gaussian of amplitude width `width`
// times a smooth cutoff on a ball inside the momentum cone.
inline StateVector cone_wavepacket(const LatticeGrid& grid, const ConeSpec& cone, const Vec3& center_k, double width,
                                   WavepacketInfo* info = nullptr) {
  grid.validate();
  cone.validate();
  if (!(width > 0.0)) throw std::invalid_argument("cone_wavepacket: width must be positive");
  const double kc = norm3(center_k);
  if (!cone.momentum_inside(center_k) || kc <= cone.speed_floor)
    throw std::invalid_argument("cone_wavepacket: centre momentum not strictly inside the momentum cone");
  const double phi = std::acos(std::clamp(dot3(center_k, cone.axis) / kc, -1.0, 1.0));
  const double radius = 0.999 * std::min(kc * std::sin(cone.half_angle - phi), kc - cone.speed_floor);
  if (!(radius > 0.0)) throw std::invalid_argument("cone_wavepacket: centre momentum on the cone boundary");
  if (std::exp(-radius * radius / (2.0 * width * width)) > 1e-12)
    throw std::invalid_argument("cone_wavepacket: envelope leaks outside cone (width too large)");
  if (kc + radius >= grid.nyquist()) throw std::invalid_argument("cone_wavepacket: momentum support exceeds the grid band");
  const std::size_t n = grid.sites();
  Vec a(static_cast<Eigen::Index>(n));
  const double x0 = grid.lower();
  for (std::size_t s = 0; s < n; ++s) {
    const Vec3 k = grid.momentum(s);
    const double q = norm3(sub3(k, center_k));
    const double env = std::exp(-q * q / (2.0 * width * width)) * compact_cutoff(q / radius);
    // Centre at the apex; the grid origin phase makes the inverse DFT a continuum Fourier sum.
    double phase = 0.0;
    for (int ax = 0; ax < grid.dim; ++ax) phase += k[static_cast<std::size_t>(ax)] * (x0 - cone.apex[static_cast<std::size_t>(ax)]);
    a(static_cast<Eigen::Index>(s)) = env * std::exp(cplx(0.0, phase));
  }
  UnitaryFft fft(grid.shape());
  fft.backward(a);
  a /= a.norm();
  // Post-condition: Fourier mass outside the cone.
  Vec b = a;
  fft.forward(b);
  double outside = 0.0;
  for (std::size_t s = 0; s < n; ++s)
    if (!cone.momentum_inside(grid.momentum(s))) outside += std::norm(b(static_cast<Eigen::Index>(s)));
  if (outside > 1e-10) throw std::logic_error("cone_wavepacket: Fourier mass outside the cone exceeds 1e-10");
  if (info) *info = {radius, outside};
  return StateVector(std::move(a), {n});
}

// phi(x) (x) internal, laid out as (site, internal).
inline StateVector attach_internal(const StateVector& spatial, const Vec& internal) {
  const auto n = static_cast<Eigen::Index>(spatial.size());
  const auto w = internal.size();
  Vec out(n * w);
  for (Eigen::Index s = 0; s < n; ++s) out.segment(s * w, w) = spatial.amplitudes(s) * internal;
  return StateVector(std::move(out), {spatial.size(), static_cast<std::size_t>(w)});
}

inline Vec basis_state(std::size_t dim, std::size_t index) {
  Vec v = Vec::Zero(static_cast<Eigen::Index>(dim));
  v(static_cast<Eigen::Index>(index)) = 1.0;
  return v;
}

// Q state with the given partner-spin vector (ignored without the partner), detector in 0, cells at their initial levels.
inline Vec q_initial_state(const QConfig& q, const Vec& partner) {
  Vec v = Vec::Ones(1);
  if (q.partner_spin) v = kron_vec(v, partner);
  if (q.filter) v = kron_vec(v, basis_state(2, 0));
  for (const auto& c : q.cells) v = kron_vec(v, basis_state(static_cast<std::size_t>(c.local_dim), static_cast<std::size_t>(c.initial_level)));
  return v;
}

// P spin state (x) Q initial state.
inline Vec product_internal(const QConfig& q, const Vec& p_spin) {
  return kron_vec(p_spin, q_initial_state(q, basis_state(2, 0)));
}

// Singlet (|down_P up_P'> - |up_P down_P'>)/sqrt 2 with detector and cells in their initial states.
inline Vec singlet_internal(const QConfig& q) {
  if (!q.partner_spin) throw std::invalid_argument("singlet_internal: requires the partner spin");
  const Vec up = basis_state(2, 0), down = basis_state(2, 1);
  return (kron_vec(down, q_initial_state(q, up)) - kron_vec(up, q_initial_state(q, down))) / std::sqrt(2.0);
}

// <psi, (1_x (x) A) psi> for a w x w internal operator A.
inline cplx internal_expectation(const Vec& psi, std::size_t width, const Mat& a) {
  Eigen::Map<const RowMat> x(psi.data(), psi.size() / static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(width));
  const RowMat y = x * a.transpose();
  return (x.conjugate().cwiseProduct(y)).sum();
}

inline Mat p_spin_operator(const Vec3& n, std::size_t q_dim) {
  return ops::kron_dense(ops::spin(n), Mat::Identity(static_cast<Eigen::Index>(q_dim), static_cast<Eigen::Index>(q_dim)));
}

// 1_x (x) O_P-on-(spin) is the common case; general P operators act on the (site, spin) index.
inline Vec apply_p_operator(const SparseOperator& o_p, const Vec& psi, std::size_t q_dim) {
  const auto rows = static_cast<Eigen::Index>(o_p.dim());
  if (psi.size() != rows * static_cast<Eigen::Index>(q_dim)) throw std::invalid_argument("apply_p_operator: size mismatch");
  Vec out(psi.size());
  Eigen::Map<const RowMat> x(psi.data(), rows, static_cast<Eigen::Index>(q_dim));
  Eigen::Map<RowMat> y(out.data(), rows, static_cast<Eigen::Index>(q_dim));
  y.noalias() = o_p.matrix * x;
  return out;
}

inline double p_expectation(const SparseOperator& o_p, const Vec& psi, std::size_t q_dim) {
  return psi.dot(apply_p_operator(o_p, psi, q_dim)).real() / psi.squaredNorm();
}

// 1_x (x) S.n on the P space (site, spin).
inline SparseOperator p_spin_observable(const LatticeGrid& grid, const Vec3& n) {
  return kron(SparseOperator::identity(grid.sites()), SparseOperator::from_dense(ops::spin(n), true));
}

// Mean position (box coordinates) and mean momentum of a state with `width` internal components.
inline Vec3 position_mean(const LatticeGrid& grid, const Vec& psi, std::size_t width) {
  Vec3 m{0, 0, 0};
  const auto w = static_cast<Eigen::Index>(width);
  const double nn = psi.squaredNorm();
  for (std::size_t s = 0; s < grid.sites(); ++s) {
    const double p = psi.segment(static_cast<Eigen::Index>(s) * w, w).squaredNorm() / nn;
    m = add3(m, scale3(grid.position(s), p));
  }
  return m;
}

inline Vec3 momentum_mean(const LatticeGrid& grid, Vec psi, std::size_t width) {
  UnitaryFft fft(grid.shape(), static_cast<int>(width));
  fft.forward(psi);
  Vec3 m{0, 0, 0};
  const auto w = static_cast<Eigen::Index>(width);
  const double nn = psi.squaredNorm();
  for (std::size_t s = 0; s < grid.sites(); ++s) {
    const double p = psi.segment(static_cast<Eigen::Index>(s) * w, w).squaredNorm() / nn;
    m = add3(m, scale3(grid.momentum(s), p));
  }
  return m;
}

// Largest site amplitude |psi(x)| (continuum normalization) within `layer` sites of the box edge.
inline double boundary_amplitude(const LatticeGrid& grid, const Vec& psi, std::size_t width, int layer) {
  const auto w = static_cast<Eigen::Index>(width);
  double m = 0.0;
  for (std::size_t s = 0; s < grid.sites(); ++s)
    if (grid.in_boundary_layer(s, layer)) m = std::max(m, psi.segment(static_cast<Eigen::Index>(s) * w, w).norm());
  return m / std::sqrt(grid.cell_volume());
}

// Projector onto "filter detector fired" on H_Q.
inline Mat detector_fired_projector(const QConfig& q) {
  if (!q.filter) throw std::invalid_argument("detector_fired_projector: no filter detector configured");
  Mat p = Mat::Zero(2, 2);
  p(1, 1) = 1.0;
  return ops::embed(p, q.filter_factor(), q.factor_dims());
}

// <S_P.n> in the state projected by 1 (x) 1_2 (x) projector_q and renormalized.
inline double conditioned_spin(const StateVector& psi, std::size_t q_dim, const Mat& projector_q, const Vec3& n) {
  if (projector_q.rows() != static_cast<Eigen::Index>(q_dim) || projector_q.cols() != static_cast<Eigen::Index>(q_dim))
    throw std::invalid_argument("conditioned_spin: projector dimension mismatch");
  const std::size_t w = 2 * q_dim;
  if (psi.size() % w != 0) throw std::invalid_argument("conditioned_spin: state size mismatch");
  const Mat full = ops::kron_dense(Mat::Identity(2, 2), projector_q);
  Eigen::Map<const RowMat> x(psi.amplitudes.data(), static_cast<Eigen::Index>(psi.size() / w), static_cast<Eigen::Index>(w));
  const RowMat px = x * full.transpose();
  const double pn = std::sqrt(px.squaredNorm() / x.squaredNorm());
  if (pn < 1e-8) throw std::domain_error("conditioned_spin: conditioning on a near-null event (projected norm < 1e-8)");
  const Vec v = Eigen::Map<const Vec>(px.data(), px.size());
  return internal_expectation(v, w, p_spin_operator(n, q_dim)).real() / v.squaredNorm();
}

}  // namespace closedsys::model1
