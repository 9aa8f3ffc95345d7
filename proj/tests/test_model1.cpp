// test_model1.cpp — lattice scattering model: assembly, propagation, packets and experiments
#include "closedsys/krylov.hpp"
#include "closedsys/model1_experiments.hpp"

#include <catch_amalgamated.hpp>
#include <unsupported/Eigen/KroneckerProduct>

#include <numbers>
#include <random>

using namespace closedsys;
using namespace closedsys::model1;

namespace {

constexpr double kPi = std::numbers::pi;

QConfig two_cell_config() {
  QConfig q;
  q.cone.apex = {1.0, 0.0, 0.0};
  q.coupling = 0.8;
  q.profile = ProfileKind::cell_distance;
  q.cells.push_back({{-2.0, 0.5, 0.0}, 1.0, 2, 0.3, 1});
  q.cells.push_back({{-1.5, -2.5, 0.0}, 1.0, 3, 0.2, 1});
  q.sum_constant = 100.0;
  q.partner_spin = true;
  q.filter = true;
  q.filter_strength = 0.7;
  q.filter_axis = {1.0, 0.0, 0.0};
  return q;
}

// Smooth state with distinct internal components on a small grid.
Vec smooth_state(const LatticeGrid& g, std::size_t w) {
  Vec psi(static_cast<Eigen::Index>(g.sites() * w));
  for (std::size_t s = 0; s < g.sites(); ++s) {
    const Vec3 x = g.position(s);
    const double e = std::exp(-((x[0] - 0.5) * (x[0] - 0.5) + x[1] * x[1]) / 2.0);
    for (std::size_t b = 0; b < w; ++b)
      psi(static_cast<Eigen::Index>(s * w + b)) = e * std::exp(cplx(0.0, 1.3 * x[0] + 0.1 * b)) * (1.0 + 0.1 * b);
  }
  return psi / psi.norm();
}

// Unitary DFT matrix on one axis: F_{mj} = e^{-2 pi i m j / n} / sqrt n.
Mat dft_matrix(int n) {
  Mat f(n, n);
  for (int m = 0; m < n; ++m)
    for (int j = 0; j < n; ++j) f(m, j) = std::exp(cplx(0.0, -2.0 * kPi * m * j / n)) / std::sqrt(double(n));
  return f;
}

// Independent dense assembly: T = F^dag diag(k^2/2) F with F the 2D DFT, couplings from the textbook formulas.
Mat dense_oracle(const LatticeGrid& g, const QConfig& q) {
  const Mat f1 = dft_matrix(g.points);
  const Mat f = Eigen::kroneckerProduct(f1, f1).eval();
  Eigen::VectorXcd k2(g.sites());
  for (std::size_t s = 0; s < g.sites(); ++s) {
    const Vec3 k = g.momentum(s);
    k2(static_cast<Eigen::Index>(s)) = 0.5 * dot3(k, k);
  }
  const Mat t = f.adjoint() * k2.asDiagonal() * f;
  // Q: [P'(2)] [detector(2)] [cell0(2)] [cell1(3)].
  Mat sp = Mat::Zero(2, 2);
  sp(0, 1) = 1.0;
  Mat a2 = Mat::Zero(2, 2), a3 = Mat::Zero(3, 3);
  a2(0, 1) = 1.0;
  a3(0, 1) = 1.0;
  a3(1, 2) = std::sqrt(2.0);
  Mat n2 = a2.adjoint() * a2, n3 = a3.adjoint() * a3;
  const Mat i2 = Mat::Identity(2, 2), i3 = Mat::Identity(3, 3);
  auto kr = [](const std::vector<Mat>& fs) {
    Mat o = Mat::Identity(1, 1);
    for (const auto& x : fs) o = Eigen::kroneckerProduct(o, x).eval();
    return o;
  };
  const Vec3 n = q.filter_axis;
  const Mat sn = 0.5 * (n[0] * pauli::x() + n[1] * pauli::y() + n[2] * pauli::z());
  Mat hq = q.cells[0].energy * kr({i2, i2, n2, i3}) + q.cells[1].energy * kr({i2, i2, i2, n3}) +
           q.filter_strength * kr({0.5 * i2 + sn, pauli::x(), i2, i3});
  const Mat c0 = kr({sp, i2, i2, a2, i3}) + kr({sp.adjoint(), i2, i2, a2.adjoint(), i3});
  const Mat c1 = kr({sp, i2, i2, i2, a3}) + kr({sp.adjoint(), i2, i2, i2, a3.adjoint()});
  const auto ns = static_cast<Eigen::Index>(g.sites());
  Eigen::VectorXcd v0(ns), v1(ns);
  for (std::size_t s = 0; s < g.sites(); ++s) {
    const Vec3 x = g.position(s);
    v0(static_cast<Eigen::Index>(s)) = q.coupling * std::pow(1.0 + distance_to_cell(x, q.cells[0], 2), -q.decay_exponent);
    v1(static_cast<Eigen::Index>(s)) = q.coupling * std::pow(1.0 + distance_to_cell(x, q.cells[1], 2), -q.decay_exponent);
  }
  const Mat id_n = Mat::Identity(ns, ns);
  const Mat w_id = Mat::Identity(2 * hq.rows(), 2 * hq.rows());
  return Eigen::kroneckerProduct(t, w_id).eval() + Eigen::kroneckerProduct(id_n, Eigen::kroneckerProduct(i2, hq).eval()).eval() +
         Eigen::kroneckerProduct(Mat(v0.asDiagonal()), c0).eval() + Eigen::kroneckerProduct(Mat(v1.asDiagonal()), c1).eval();
}

// Packet setup used by the propagation tests: 256^2 grid, spacing 0.5.
struct PacketSetup {
  LatticeGrid grid{2, 256, 0.5};
  ConeSpec cone;
  Vec3 kc{3.0, 0.0, 0.0};
  double width = 0.25;
  PacketSetup() {
    cone.half_angle = 0.75;
    cone.speed_floor = 1.0;
    cone.apex = {-16.0, 0.0, 0.0};
  }
};

}  // namespace

TEST_CASE("grid geometry and cone helpers", "[model1]") {
  LatticeGrid g{2, 8, 0.5};
  REQUIRE_NOTHROW(g.validate());
  CHECK(g.sites() == 64);
  CHECK(g.position(0)[0] == Catch::Approx(-2.0));
  CHECK(g.site(g.indices(37)) == 37);
  CHECK_THROWS(LatticeGrid{2, 12, 0.5}.validate());
  CHECK_THROWS(LatticeGrid{4, 8, 0.5}.validate());
  CHECK_THROWS(LatticeGrid{2, 8, 0.0}.validate());

  ConeSpec c;
  CHECK_NOTHROW(c.validate());
  c.half_angle = kPi / 4;
  CHECK_THROWS(c.validate());

  // Cube-to-cone distance against brute-force sampling of the cube.
  ConeSpec cone;
  cone.apex = {1.0, -0.5, 0.0};
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  for (int trial = 0; trial < 20; ++trial) {
    CellSpec cell{{u(rng), u(rng), 0.0}, 1.5, 2, 0.0, 1};
    double brute = 1e300;
    for (int i = 0; i <= 200; ++i)
      for (int j = 0; j <= 200; ++j) {
        const Vec3 y{cell.center[0] - 0.75 + 1.5 * i / 200.0, cell.center[1] - 0.75 + 1.5 * j / 200.0, 0.0};
        brute = std::min(brute, distance_to_cone(y, cone.apex, cone.axis, 2.0 * cone.half_angle));
      }
    const double d = cell_cone_distance(cell, cone, 2);
    CHECK(d <= brute + 1e-12);
    CHECK(d >= brute - 0.01);
  }
}

TEST_CASE("QConfig validation names the failing condition", "[model1]") {
  LatticeGrid g{2, 32, 0.5};
  QConfig q;
  q.cells.push_back({{-3.0, 0.0, 0.0}, 1.0, 2, 0.0, 1});
  q.coupling = 1.0;
  const auto v = validate_qconfig(g, q);
  CHECK(v.min_distance == Catch::Approx(2.5).epsilon(1e-12));
  CHECK(v.decay_sum == Catch::Approx(std::pow(2.5, -1.0)).epsilon(1e-12));

  QConfig inside = q;
  inside.cells[0].center = {3.0, 0.0, 0.0};
  try {
    validate_qconfig(g, inside);
    FAIL("expected a validation error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("cone-separation hypothesis failed") != std::string::npos);
  }

  QConfig dense = q;
  dense.sum_constant = 0.1;
  try {
    validate_qconfig(g, dense);
    FAIL("expected a validation error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("summability condition failed") != std::string::npos);
  }

  QConfig several = q;
  several.decay_exponent = 1.0;
  several.cells[0].initial_level = 5;
  try {
    validate_qconfig(g, several);
    FAIL("expected a validation error");
  } catch (const std::invalid_argument& e) {
    const std::string m = e.what();
    CHECK(m.find("alpha") != std::string::npos);
    CHECK(m.find("initial level") != std::string::npos);
  }

  // Translating cells hits the requested distance.
  for (double d : {1.0, 3.0, 6.5}) {
    const QConfig moved = place_cells_at_distance(q, 2, d);
    CHECK(validate_qconfig(g, moved).min_distance == Catch::Approx(d).epsilon(1e-10));
  }
}

TEST_CASE("build_hamiltonian matches a dense term-by-term oracle", "[model1]") {
  const LatticeGrid g{2, 8, 1.0};
  const QConfig q = two_cell_config();
  const SparseOperator h = build_hamiltonian(g, q);
  CHECK(h.hermitian);
  CHECK(h.hermiticity_defect() == 0.0);
  const Mat oracle = dense_oracle(g, q);
  CHECK((h.dense() - oracle).cwiseAbs().maxCoeff() <= 1e-12);

  SECTION("zero coupling gives the decoupled sum exactly") {
    QConfig q0 = q;
    q0.coupling = 0.0;
    const Mat h0 = build_hamiltonian(g, q0).dense();
    QConfig qn = q;
    qn.coupling = 0.0;
    const Mat o0 = dense_oracle(g, qn);
    CHECK((h0 - o0).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SECTION("too large for explicit assembly") {
    CHECK_THROWS_AS(build_hamiltonian(LatticeGrid{2, 64, 1.0}, q), std::invalid_argument);
  }
}

TEST_CASE("interaction profile obeys the power-law decay bound", "[model1]") {
  const LatticeGrid g{2, 32, 0.5};
  for (ProfileKind kind : {ProfileKind::smooth, ProfileKind::cell_distance}) {
    QConfig q;
    q.cells.push_back({{-4.0, 1.0, 0.0}, 1.0, 2, 0.0, 1});
    q.coupling = 0.7;
    q.decay_exponent = 2.0;
    q.profile = kind;
    q.core_radius = 0.5;
    const auto prof = interaction_profiles(g, q);
    double worst = 0.0;
    for (std::size_t s = 0; s < g.sites(); ++s) {
      const double d = distance_to_cell(g.position(s), q.cells[0], 2);
      if (d > 0.0) worst = std::max(worst, std::abs(prof[0](static_cast<Eigen::Index>(s))) * d * d);
    }
    CHECK(worst <= q.coupling);
    CHECK(worst > 0.1 * q.coupling);
    CHECK(interaction_bound_ratio(g, q, prof) <= 1.0);
  }
  QConfig q;
  q.cells.push_back({{1.0, 2.0, 0.0}, 1.0, 2, 0.0, 1});
  q.coupling = 2.0;
  q.decay_exponent = 3.0;
  q.core_radius = 3.0;
  CHECK(interaction_profile({4.0, 6.0, 0.0}, q.cells[0], q, 2) == Catch::Approx(2.0 * std::pow(9.0 + 25.0, -1.5)).epsilon(1e-14));
  CHECK(interaction_profile({1.0, 2.0, 0.0}, q.cells[0], q, 2) == Catch::Approx(2.0 / 27.0).epsilon(1e-14));
}

TEST_CASE("split-step propagation agrees with Krylov on a small grid", "[model1]") {
  const LatticeGrid g{2, 16, 0.5};
  const QConfig q = two_cell_config();
  const SparseOperator h = build_hamiltonian(g, q);
  const Vec psi = smooth_state(g, 2 * q.q_dim());
  const Vec ref = evolve_vec(h, psi, 2.0, 1e-12);
  std::vector<double> err2, err4;
  for (double dt : {0.05, 0.025}) {
    Vec a = psi, b = psi;
    SplitStepPropagator(g, q, dt, true, 2).evolve(a, 2.0);
    SplitStepPropagator(g, q, dt, true, 4).evolve(b, 2.0);
    err2.push_back((a - ref).norm());
    err4.push_back((b - ref).norm());
    CHECK(std::abs(a.norm() - 1.0) <= 1e-12);
  }
  CHECK(err2[0] / err2[1] == Catch::Approx(4.0).margin(0.4));
  CHECK(err4[0] / err4[1] == Catch::Approx(16.0).margin(3.0));
  CHECK(err4[1] <= 1e-6);

  SECTION("uncoupled evolution is exact") {
    QConfig q0 = q;
    q0.coupling = 0.0;
    const Vec ref0 = evolve_vec(build_hamiltonian(g, q0), psi, 3.0, 1e-13);
    Vec a = psi;
    SplitStepPropagator(g, q0, 0.5).evolve(a, 3.0);
    CHECK((a - ref0).norm() <= 1e-11);
  }
  SECTION("coupling operator matches H - H0") {
    QConfig q0 = q;
    q0.coupling = 0.0;
    const Vec diff = h.matrix * psi - build_hamiltonian(g, q0).matrix * psi;
    Vec hc;
    SplitStepPropagator(g, q, 0.1).apply_coupling(psi, hc);
    CHECK((diff - hc).norm() <= 1e-13);
  }
  SECTION("bad inputs") {
    CHECK_THROWS(SplitStepPropagator(g, q, 0.0));
    CHECK_THROWS(SplitStepPropagator(g, q, 0.1, true, 3));
    Vec wrong = Vec::Zero(5);
    CHECK_THROWS(SplitStepPropagator(g, q, 0.1).evolve(wrong, 1.0));
  }
}

TEST_CASE("cone wave packet contract", "[model1]") {
  PacketSetup s;
  WavepacketInfo info;
  const StateVector phi = cone_wavepacket(s.grid, s.cone, s.kc, s.width, &info);
  CHECK(phi.norm() == Catch::Approx(1.0).epsilon(1e-14));
  CHECK(info.outside_mass <= 1e-10);
  const Vec3 k = momentum_mean(s.grid, phi.amplitudes, 1);
  CHECK(dot3(k, s.cone.axis) >= s.cone.speed_floor);
  CHECK(k[0] == Catch::Approx(3.0).margin(0.01));
  const Vec3 x0 = position_mean(s.grid, phi.amplitudes, 1);
  CHECK(std::abs(x0[0] - s.cone.apex[0]) <= 1e-8);
  CHECK(std::abs(x0[1]) <= 1e-8);

  // Free drift: <x>(t) = x0 + <k> t within two grid spacings.
  Vec psi = phi.amplitudes;
  free_evolve(s.grid, psi, 1, 4.0);
  const Vec3 xt = position_mean(s.grid, psi, 1);
  CHECK(std::abs(xt[0] - (x0[0] + 4.0 * k[0])) <= 2.0 * s.grid.spacing);
  CHECK(std::abs(xt[1] - (x0[1] + 4.0 * k[1])) <= 2.0 * s.grid.spacing);

  CHECK_THROWS_WITH(cone_wavepacket(s.grid, s.cone, s.kc, 0.6), Catch::Matchers::ContainsSubstring("leaks outside cone"));
  CHECK_THROWS(cone_wavepacket(s.grid, s.cone, Vec3{0.5, 0.0, 0.0}, 0.1));
  CHECK_THROWS(cone_wavepacket(s.grid, s.cone, Vec3{1.0, 3.0, 0.0}, 0.1));
}

TEST_CASE("free decay constant", "[model1]") {
  PacketSetup s;
  const StateVector phi = cone_wavepacket(s.grid, s.cone, s.kc, s.width);
  const auto rep = decay_constant_report(s.grid, phi, 4, s.cone);
  CHECK(rep.relative_change <= 0.01);

  SECTION("derivative sum matches Hermite-function quadrature") {
    // psi_hat = A exp(-|q|^2 / 2w^2) with A = 1/(w sqrt pi); the cutoff is below 1e-12 where it acts.
    // The L1 norm of a product of 1D derivatives factorizes.
    const double w = s.width, amp = 1.0 / (w * std::sqrt(kPi));
    auto l1_1d = [&](int order) {
      // d^n/dq^n e^{-q^2/2w^2} = (-1/(w sqrt2))^n H_n(q/(w sqrt2)) e^{-q^2/2w^2}
      const int m = 200000;
      const double lim = 12.0 * w, h = 2.0 * lim / m;
      double acc = 0.0;
      for (int i = 0; i <= m; ++i) {
        const double q = -lim + h * i, z = q / (w * std::sqrt(2.0));
        double hm = 1.0, hn = 2.0 * z;  // H_0, H_1
        double hv = order == 0 ? 1.0 : hn;
        for (int k = 1; k < order; ++k) {
          const double next = 2.0 * z * hn - 2.0 * k * hm;
          hm = hn;
          hn = next;
          hv = hn;
        }
        const double f = std::pow(1.0 / (w * std::sqrt(2.0)), order) * std::abs(hv) * std::exp(-z * z);
        acc += (i == 0 || i == m ? 0.5 : 1.0) * f * h;
      }
      return acc;
    };
    std::vector<double> one(7);
    for (int n = 0; n <= 6; ++n) one[static_cast<std::size_t>(n)] = l1_1d(n);
    double oracle = 0.0;
    for (int a = 0; a <= 5; ++a)
      for (int b = 0; a + b <= 5; ++b) oracle += amp * one[static_cast<std::size_t>(a)] * one[static_cast<std::size_t>(b)];
    // Riemann sums of |f| converge quadratically in the momentum spacing.
    CHECK(rep.refined_sum == Catch::Approx(oracle).epsilon(2e-3));
    CHECK(std::abs(rep.refined_sum - oracle) < std::abs(rep.derivative_sum - oracle));
  }
  SECTION("formula branches") {
    ConeSpec slow = s.cone;
    slow.speed_floor = 0.5;
    CHECK(free_decay_constant(s.grid, phi, 4, slow) / rep.K == Catch::Approx(16.0).epsilon(1e-12));
    ConeSpec narrow = s.cone;
    narrow.half_angle = 0.5 * s.cone.half_angle;
    const double expect = std::pow(std::sin(s.cone.half_angle) / std::sin(narrow.half_angle), 8.0);
    CHECK(free_decay_constant(s.grid, phi, 4, narrow) / rep.K == Catch::Approx(expect).epsilon(1e-12));
  }
  SECTION("errors") {
    CHECK_THROWS(free_decay_constant(s.grid, phi, 3, s.cone));
    // A packet far wider than its box leaves the derivative quadrature unconverged.
    const LatticeGrid tiny{2, 16, 0.5};
    ConeSpec c = s.cone;
    c.apex = {0.0, 0.0, 0.0};  // centre of the tiny box
    const StateVector wide = cone_wavepacket(tiny, c, s.kc, s.width);
    CHECK_THROWS_WITH(free_decay_constant(tiny, wide, 4, c), Catch::Matchers::ContainsSubstring("unconverged"));
  }
}

TEST_CASE("free propagation obeys the stationary-phase bound", "[model1]") {
  PacketSetup s;
  const StateVector phi = cone_wavepacket(s.grid, s.cone, s.kc, s.width);
  const std::vector<double> times = {0.0, 1.0, 2.0, 3.0, 4.0};
  const auto rep = verify_free_propagation(s.grid, phi, 4, s.cone, times);
  CHECK(rep.far_amplitude_t0 <= 1e-10);
  CHECK(rep.kappa <= 10.0);
  CHECK(rep.radial_exponent >= 3.5);
  CHECK(rep.fits > 0);

  SECTION("amplitude behind the apex decreases in time") {
    Vec psi = phi.amplitudes;
    const std::size_t site = s.grid.nearest_site(sub3(s.cone.apex, Vec3{6.0, 0.0, 0.0}));
    std::vector<double> amp;
    for (int i = 0; i < 8; ++i) {
      free_evolve(s.grid, psi, 1, i == 0 ? 0.0 : 0.5);
      amp.push_back(std::abs(psi(static_cast<Eigen::Index>(site))));
    }
    CHECK(strictly_decreasing(amp));
  }
  SECTION("wrap-around is detected") {
    CHECK_THROWS_WITH(verify_free_propagation(s.grid, phi, 4, s.cone, {0.0, 40.0}),
                      Catch::Matchers::ContainsSubstring("wrap-around"));
  }
}

TEST_CASE("closed-subsystem deviation", "[model1]") {
  PacketSetup s;
  QConfig q;
  q.cone = s.cone;
  q.coupling = 0.5;
  q.cells.push_back({{-28.0, 0.0, 0.0}, 1.0, 2, 0.0, 1});
  const StateVector phi = cone_wavepacket(s.grid, s.cone, s.kc, s.width);
  const StateVector psi0 = attach_internal(phi, product_internal(q, basis_state(2, 1)));
  const SparseOperator sz = p_spin_observable(s.grid, {0.0, 0.0, 1.0});
  const std::vector<double> times = {0.0, 0.5, 1.0, 2.0, 3.0};
  RunOptions opt;
  opt.dt = 0.1;

  SECTION("zero coupling decouples exactly") {
    QConfig q0 = q;
    q0.coupling = 0.0;
    for (const auto& r : run_closed_subsystem(s.grid, q0, psi0, sz, times, {}, opt)) CHECK(r.value <= 1e-9);
  }
  SECTION("deviation decreases with distance") {
    const auto recs = run_closed_subsystem(s.grid, q, psi0, sz, times, {2.0, 4.0}, opt);
    double sup1 = 0.0, sup2 = 0.0;
    for (const auto& r : recs) (r.sweep_value == 2.0 ? sup1 : sup2) = std::max(r.sweep_value == 2.0 ? sup1 : sup2, r.value);
    CHECK(sup2 < sup1);
    CHECK(sup1 > 0.0);
  }
  SECTION("first-order Duhamel bound holds") {
    const std::vector<double> short_times = {0.0, 0.05, 0.1, 0.2, 0.4};
    const auto recs = run_closed_subsystem(s.grid, q, psi0, sz, short_times, {}, opt);
    const auto bound = duhamel_bound(s.grid, q, psi0, short_times);
    Vec hc;
    SplitStepPropagator(s.grid, q, 0.05).apply_coupling(psi0.amplitudes, hc);
    for (std::size_t i = 0; i < short_times.size(); ++i) {
      CHECK(recs[i].value <= bound[i] + 1e-12);
      CHECK(bound[i] <= 2.0 * short_times[i] * hc.norm() * 1.2 + 1e-15);
    }
  }
  SECTION("errors") {
    CHECK_THROWS(run_closed_subsystem(s.grid, q, psi0, p_spin_observable(LatticeGrid{2, 8, 0.5}, {0, 0, 1}), times, {}, opt));
    QConfig q0 = q;
    q0.coupling = 0.0;
    CHECK_THROWS_WITH(run_closed_subsystem(s.grid, q0, psi0, sz, {0.0, 40.0}, {}, opt),
                      Catch::Matchers::ContainsSubstring("boundary contamination"));
  }
}

TEST_CASE("singlet state and conditioned spin", "[model1]") {
  const LatticeGrid g{2, 8, 0.5};
  QConfig q;
  q.cone.apex = {1.0, 0.0, 0.0};
  q.cells.push_back({{-1.5, 0.0, 0.0}, 1.0, 2, 0.0, 1});
  q.partner_spin = true;
  q.filter = true;
  q.filter_strength = 1.0;
  const std::size_t qd = q.q_dim(), w = 2 * qd;
  Vec spatial = smooth_state(g, 1);
  const StateVector psi = attach_internal(StateVector(spatial), singlet_internal(q));

  SECTION("singlet marginal is maximally mixed") {
    const StateVector split(psi.amplitudes, {g.sites() * 2, qd});
    const DensityMatrix rho = partial_trace_P(split, {g.sites() * 2}, {qd});
    Mat spin = Mat::Zero(2, 2);
    for (std::size_t s = 0; s < g.sites(); ++s) spin += rho.entries.block(static_cast<Eigen::Index>(2 * s), static_cast<Eigen::Index>(2 * s), 2, 2);
    CHECK((spin - 0.5 * Mat::Identity(2, 2)).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SECTION("identity projector gives the unconditioned value") {
    const Vec3 n{0.0, 0.6, 0.8};
    const double unc = internal_expectation(psi.amplitudes, w, p_spin_operator(n, qd)).real();
    CHECK(conditioned_spin(psi, qd, Mat::Identity(static_cast<Eigen::Index>(qd), static_cast<Eigen::Index>(qd)), n) ==
          Catch::Approx(unc).margin(1e-15));
  }
  SECTION("random projector against brute force") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    Mat basis(static_cast<Eigen::Index>(qd), 3);
    for (Eigen::Index i = 0; i < basis.rows(); ++i)
      for (Eigen::Index j = 0; j < 3; ++j) basis(i, j) = cplx(nd(rng), nd(rng));
    const Mat qm = Eigen::HouseholderQR<Mat>(basis).householderQ() * Mat::Identity(static_cast<Eigen::Index>(qd), 3);
    const Mat proj = qm * qm.adjoint();
    Vec random_psi(static_cast<Eigen::Index>(g.sites() * w));
    for (Eigen::Index i = 0; i < random_psi.size(); ++i) random_psi(i) = cplx(nd(rng), nd(rng));
    const StateVector rp(random_psi / random_psi.norm());
    const Vec3 n{0.48, -0.6, 0.64};
    const Mat full_p = Eigen::kroneckerProduct(Mat::Identity(static_cast<Eigen::Index>(g.sites() * 2), static_cast<Eigen::Index>(g.sites() * 2)), proj).eval();
    const Mat full_s = Eigen::kroneckerProduct(Mat::Identity(static_cast<Eigen::Index>(g.sites()), static_cast<Eigen::Index>(g.sites())),
                                               Eigen::kroneckerProduct(ops::spin(n), Mat::Identity(static_cast<Eigen::Index>(qd), static_cast<Eigen::Index>(qd))).eval()).eval();
    const Vec pp = full_p * rp.amplitudes;
    const double brute = pp.dot(full_s * pp).real() / pp.squaredNorm();
    CHECK(conditioned_spin(rp, qd, proj, n) == Catch::Approx(brute).margin(1e-13));
  }
  SECTION("near-null conditioning throws") {
    CHECK_THROWS_AS(conditioned_spin(psi, qd, detector_fired_projector(q), {0, 0, 1}), std::domain_error);
  }
}

TEST_CASE("no-signaling across filter settings", "[model1]") {
  PacketSetup s;
  QConfig q;
  q.cone = s.cone;
  q.coupling = 0.5;
  q.cells.push_back({{-28.0, 0.0, 0.0}, 1.0, 2, 0.0, 1});
  q.partner_spin = true;
  q.filter = true;
  q.filter_strength = kPi / 2.0;
  const StateVector phi = cone_wavepacket(s.grid, s.cone, s.kc, s.width);
  const StateVector psi0 = attach_internal(phi, singlet_internal(q));
  const std::vector<Vec3> axes = {{0.0, 0.0, 1.0}, {1.0, 0.0, 0.0}};
  const std::vector<double> times = {0.0, 0.5, 1.0, 2.0};
  RunOptions opt;
  opt.dt = 0.1;

  SECTION("setting-independent P series and a shrinking spin signal") {
    const auto near = run_no_signaling(s.grid, place_cells_at_distance(q, 2, 2.0), psi0, axes, times, opt);
    CHECK(norm3(near.spin[0][0]) <= 1e-15);
    CHECK(near.max_setting_difference <= 1e-10);
    CHECK(near.max_spin[0] > 0.0);
    CHECK(std::isnan(near.conditioned[0][0]));
    const auto far = run_no_signaling(s.grid, place_cells_at_distance(q, 2, 4.0), psi0, {axes[0]}, times, opt);
    CHECK(far.max_spin[0] < near.max_spin[0]);
  }
  SECTION("perfect-correlation toy: conditioning on the fired detector gives -1/2") {
    QConfig q0 = q;
    q0.coupling = 0.0;
    const auto toy = run_no_signaling(s.grid, q0, psi0, axes, {0.0, 1.0}, opt);
    for (std::size_t a = 0; a < axes.size(); ++a) {
      CHECK(toy.conditioned[a][1] == Catch::Approx(-0.5).margin(1e-12));
      CHECK(norm3(toy.spin[a][1]) <= 1e-14);
    }
  }
  SECTION("requires the filter") {
    QConfig bare = q;
    bare.filter = false;
    CHECK_THROWS(run_no_signaling(s.grid, bare, psi0, axes, times, opt));
  }
}
